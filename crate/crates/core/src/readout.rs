//! Phase-invariant readout `m_k = ‖Σ_i U_ki x_i‖₂` followed by a map `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::fan_in_normal;
use crate::error::{shape_err, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// How `U` mixes the `C` input oscillators into `K` outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutKind {
    /// `U [K, C, N', N]`, arbitrary matrix blocks.
    Full,
    /// `u [K, C]`, each block a multiple of the identity.
    Scalar,
}

/// The map applied to the norms `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GKind {
    Identity,
    Linear,
    /// `m + W₂ relu(W₁ m + b₁) + b₂`.
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
enum GParams {
    Identity,
    Linear { w: ParamId, b: ParamId },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Readout acting on `x [.., C, N]`, producing `[.., K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub kind: ReadoutKind,
    pub u: ParamId,
    /// Added to the norms before `g`.
    pub bias: Option<ParamId>,
    g: GParams,
    pub k: usize,
    pub n_out: usize,
}

impl Readout {
    /// Fan-in Gaussian `U`; `n_out` is `N'` (ignored in scalar mode, where `N' = N`).
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: ReadoutKind,
        c: usize,
        n: usize,
        k: usize,
        n_out: usize,
        bias: bool,
        g: GKind,
        rng: &mut R,
    ) -> Self {
        let u = match kind {
            ReadoutKind::Full => fan_in_normal(&[k, c, n_out, n], c * n, rng),
            ReadoutKind::Scalar => fan_in_normal(&[k, c], c, rng),
        };
        let n_out = if kind == ReadoutKind::Scalar { n } else { n_out };
        let mut r = Self::with_u(store, name, kind, u);
        r.n_out = n_out;
        r.k = k;
        if bias {
            r.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([k])));
        }
        r.g = match g {
            GKind::Identity => GParams::Identity,
            GKind::Linear => GParams::Linear {
                w: store.add(format!("{name}.g.w"), fan_in_normal(&[k, k], k, rng)),
                b: store.add(format!("{name}.g.b"), Tensor::zeros([k])),
            },
            GKind::Mlp => GParams::Mlp {
                w1: store.add(format!("{name}.g.w1"), fan_in_normal(&[k, k], k, rng)),
                b1: store.add(format!("{name}.g.b1"), Tensor::zeros([k])),
                w2: store.add(format!("{name}.g.w2"), fan_in_normal(&[k, k], k, rng)),
                b2: store.add(format!("{name}.g.b2"), Tensor::zeros([k])),
            },
        };
        r
    }

    /// Readout with a given `U`, no bias and identity `g`.
    pub fn with_u(store: &mut ParamStore, name: &str, kind: ReadoutKind, u: Tensor) -> Self {
        let (k, n_out) = match kind {
            ReadoutKind::Full => (u.shape()[0], u.shape()[2]),
            ReadoutKind::Scalar => (u.shape()[0], 0),
        };
        Self {
            kind,
            u: store.add(format!("{name}.u"), u),
            bias: None,
            g: GParams::Identity,
            k,
            n_out,
        }
    }

    /// The norms `m [.., K]` before bias and `g`.
    pub fn norms(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let u = tape.param(store, self.u);
        let xs = x.shape().to_vec();
        let r = xs.len();
        if r < 2 || xs[r - 2] != u.shape()[1] {
            return shape_err("readout", &xs, u.shape());
        }
        let (c, n) = (xs[r - 2], xs[r - 1]);
        let lead = &xs[..r - 2];
        let m: usize = lead.iter().product();
        let k = u.shape()[0];
        let z = match self.kind {
            ReadoutKind::Full => {
                let n_out = u.shape()[2];
                if u.shape()[3] != n {
                    return shape_err("readout", &xs, u.shape());
                }
                // Row (i, q), column (k, p) holds U[k, i, p, q].
                let up = tape.permute(&u, &[1, 3, 0, 2])?;
                let um = tape.reshape(&up, &[c * n, k * n_out])?;
                let xf = tape.reshape(x, &[m, c * n])?;
                let z = tape.matmul(&xf, &um)?;
                tape.reshape(&z, &[m, k, n_out])?
            }
            ReadoutKind::Scalar => {
                let ut = tape.transpose(&u)?;
                let xf = tape.reshape(x, &[m, c, n])?;
                let xt = tape.permute(&xf, &[0, 2, 1])?;
                let z = tape.matmul(&xt, &ut)?;
                tape.permute(&z, &[0, 2, 1])?
            }
        };
        let norms = tape.norm_last(&z, 1e-12)?;
        let mut shape = lead.to_vec();
        shape.push(k);
        tape.reshape(&norms, &shape)
    }

    /// `g(m + bias)`, shape `[.., K]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let mut m = self.norms(tape, store, x)?;
        if let Some(b) = self.bias {
            let bv = tape.param(store, b);
            m = tape.add(&m, &bv)?;
        }
        match self.g {
            GParams::Identity => Ok(m),
            GParams::Linear { w, b } => affine(tape, store, &m, w, b),
            GParams::Mlp { w1, b1, w2, b2 } => {
                let h = affine(tape, store, &m, w1, b1)?;
                let h = tape.relu(&h);
                let h = affine(tape, store, &h, w2, b2)?;
                tape.add(&m, &h)
            }
        }
    }
}

/// `x · W + b`.
pub(crate) fn affine(tape: &mut Tape, store: &ParamStore, x: &Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let y = tape.matmul(x, &wv)?;
    tape.add(&y, &bv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::randn(shape.to_vec(), rng);
        for r in t.rows_mut() {
            let n = norm(r);
            r.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn run(r: &Readout, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        r.forward(&mut tape, store, &xv).unwrap().to_tensor()
    }

    #[test]
    fn one_hot_scalar_blocks_give_unit_norms() {
        let c = 5;
        let u = Tensor::from_fn([c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let mut store = ParamStore::new();
        let r = Readout::with_u(&mut store, "r", ReadoutKind::Scalar, u);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = unit_rows(&[2, c, 4], &mut rng);
        let m = run(&r, &store, &x);
        assert_eq!(m.shape(), &[2, c]);
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn full_mode_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let (c, n, k, np) = (3, 4, 5, 2);
        let r = Readout::random(&mut store, "r", ReadoutKind::Full, c, n, k, np, false, GKind::Identity, &mut rng);
        let x = unit_rows(&[2, c, n], &mut rng);
        let u = store.get(r.u);
        let got = run(&r, &store, &x);
        for b in 0..2 {
            for kk in 0..k {
                let z: Vec<f64> = (0..np)
                    .map(|p| {
                        (0..c)
                            .flat_map(|i| (0..n).map(move |q| (i, q)))
                            .map(|(i, q)| u.at(&[kk, i, p, q]) * x.at(&[b, i, q]))
                            .sum()
                    })
                    .collect();
                assert!((got.at(&[b, kk]) - norm(&z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_blocks_are_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let r = Readout::random(&mut store, "r", ReadoutKind::Scalar, 3, 2, 4, 0, false, GKind::Identity, &mut rng);
        let x = unit_rows(&[1, 3, 2], &mut rng);
        let a = 0.7f64;
        let mut rx = x.clone();
        for row in rx.rows_mut() {
            let (p, q) = (row[0], row[1]);
            row[0] = a.cos() * p - a.sin() * q;
            row[1] = a.sin() * p + a.cos() * q;
        }
        assert!(run(&r, &store, &x).max_abs_diff(&run(&r, &store, &rx)) < 1e-12);
    }

    #[test]
    fn identity_g_output_is_nonnegative_and_maps_have_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = unit_rows(&[2, 3, 4], &mut rng);
        for g in [GKind::Identity, GKind::Linear, GKind::Mlp] {
            let mut store = ParamStore::new();
            let r = Readout::random(&mut store, "r", ReadoutKind::Full, 3, 4, 6, 4, true, g, &mut rng);
            let m = run(&r, &store, &x);
            assert_eq!(m.shape(), &[2, 6]);
            if g == GKind::Identity {
                assert!(m.data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
