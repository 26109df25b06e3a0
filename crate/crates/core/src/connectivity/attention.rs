use rand::Rng;

use super::{fan_in_normal, Connectivity};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the initial position embedding entries.
pub const POS_INIT_STD: f64 = 0.5;

/// Multi-head softmax attention between the `L` tokens of `x [B, L, C, N]`.
///
/// Each token is flattened to `D = C·N` features. The projections are
/// `[D, D]` matrices (row = input feature, column = output feature); output
/// column `(h, a, n)` belongs to head `h`, so every head owns `C/heads`
/// whole oscillators. No biases. Logits are scaled by `1/√(D/heads)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnCoupling {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    /// Learned absolute position embedding `[L, D]`, added to the query/key input only.
    pub pos: Option<ParamId>,
    pub heads: usize,
    pub channels: usize,
    pub n: usize,
}

impl AttnCoupling {
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        n: usize,
        heads: usize,
        tokens: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Param(format!(
                "heads ({heads}) must divide the oscillator channel count ({channels})"
            )));
        }
        let d = channels * n;
        let mut w = |suffix: &str, rng: &mut R| store.add(format!("{name}.{suffix}"), fan_in_normal(&[d, d], d, rng));
        let wq = w("wq", rng);
        let wk = w("wk", rng);
        let wv = w("wv", rng);
        let wo = w("wo", rng);
        // Random rather than zero so that otherwise identical tokens (blank
        // Sudoku cells) are distinguishable from the first step.
        let pos = tokens.map(|l| {
            let pe = Tensor::randn([l, d], rng).map(|v| v * POS_INIT_STD);
            store.add(format!("{name}.pos"), pe)
        });
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            pos,
            heads,
            channels,
            n,
        })
    }

    fn dims(&self, x: &Var) -> Result<(usize, usize)> {
        let xs = x.shape();
        if xs.len() != 4 || xs[2] != self.channels || xs[3] != self.n {
            return shape_err("attention coupling", xs, &[self.channels, self.n]);
        }
        Ok((xs[0], xs[1]))
    }

    /// Attention weights `[B, heads, L, L]`; each row sums to one.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let (b, l) = self.dims(x)?;
        let d = self.channels * self.n;
        let dh = d / self.heads;
        let xf = tape.reshape(x, &[b, l, d])?;
        let qk_in = match self.pos {
            Some(p) => {
                let pe = tape.param(store, p);
                tape.add(&xf, &pe)?
            }
            None => xf,
        };
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let q = tape.matmul(&qk_in, &wq)?;
        let q = tape.reshape(&q, &[b, l, self.heads, dh])?;
        let q = tape.permute(&q, &[0, 2, 1, 3])?;
        let k = tape.matmul(&qk_in, &wk)?;
        let k = tape.reshape(&k, &[b, l, self.heads, dh])?;
        let kt = tape.permute(&k, &[0, 2, 3, 1])?;
        let logits = tape.bmm(&q, &kt)?;
        let logits = tape.scale(&logits, 1.0 / (dh as f64).sqrt());
        tape.softmax(&logits, 3)
    }
}

impl Connectivity for AttnCoupling {
    fn coupling(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let (b, l) = self.dims(x)?;
        let d = self.channels * self.n;
        let xf = tape.reshape(x, &[b, l, d])?;
        let qk_in = match self.pos {
            Some(p) => {
                let pe = tape.param(store, p);
                tape.add(&xf, &pe)?
            }
            None => xf.clone(),
        };
        let [wq, wk, wv, wo] = [self.wq, self.wk, self.wv, self.wo].map(|w| tape.param(store, w));
        let q = tape.matmul(&qk_in, &wq)?;
        let k = tape.matmul(&qk_in, &wk)?;
        let v = tape.matmul(&xf, &wv)?;
        let o = tape.attention(&q, &k, &v, self.heads)?;
        let y = tape.matmul(&o, &wo)?;
        tape.reshape(&y, &[b, l, self.channels, self.n])
    }
}
