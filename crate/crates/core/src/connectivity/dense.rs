use rand::Rng;

use super::{fan_in_normal, Connectivity};
use crate::error::{shape_err, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// All-to-all coupling between the `C` oscillators of `x [B, C, N]`.
///
/// Inputs `[B, .., N]` with more axes are treated as `C` = product of the middle axes.
///
/// Full mode stores `J [C, C, N, N]`; scalar mode stores `J [C, C]` and
/// applies each entry as a multiple of the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCoupling {
    pub j: ParamId,
    pub scalar: bool,
    /// Use `(J + Jᵀ)/2` (block transpose in full mode) in every forward pass.
    pub symmetric: bool,
}

impl DenseCoupling {
    pub fn full(store: &mut ParamStore, name: &str, j: Tensor, symmetric: bool) -> Result<Self> {
        let sh = j.shape();
        if sh.len() != 4 || sh[0] != sh[1] || sh[2] != sh[3] {
            return shape_err("DenseCoupling::full", sh, &[]);
        }
        Ok(Self {
            j: store.add(name, j),
            scalar: false,
            symmetric,
        })
    }

    /// Scalar mode with `J [C, C]`.
    pub fn scalar(store: &mut ParamStore, name: &str, j: Tensor) -> Self {
        assert!(j.rank() == 2 && j.shape()[0] == j.shape()[1], "scalar J must be square");
        Self {
            j: store.add(name, j),
            scalar: true,
            symmetric: false,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        n: usize,
        symmetric: bool,
        rng: &mut R,
    ) -> Self {
        let j = fan_in_normal(&[c, c, n, n], c * n, rng);
        Self::full(store, name, j, symmetric).expect("shape built above")
    }

    /// The effective full coupling as a plain `[C, C, N, N]` tensor.
    pub fn effective(&self, store: &ParamStore) -> Tensor {
        let j = store.get(self.j);
        let c = j.shape()[0];
        if self.scalar {
            return j.clone();
        }
        let n = j.shape()[2];
        let mut out = j.clone();
        if self.symmetric {
            for a in 0..c {
                for b in 0..c {
                    for p in 0..n {
                        for q in 0..n {
                            let v = 0.5 * (j.at(&[a, b, p, q]) + j.at(&[b, a, q, p]));
                            out.set(&[a, b, p, q], v);
                        }
                    }
                }
            }
        }
        out
    }
}

impl Connectivity for DenseCoupling {
    fn coupling(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let j = tape.param(store, self.j);
        let (js, xs) = (j.shape().to_vec(), x.shape().to_vec());
        let r = xs.len();
        let c: usize = xs.get(1..r.saturating_sub(1)).map_or(0, |m| m.iter().product());
        if r < 3 || c != js[0] || (!self.scalar && xs[r - 1] != js[2]) {
            return shape_err("dense coupling", &xs, &js);
        }
        let (b, n) = (xs[0], xs[r - 1]);
        let x = &tape.reshape(x, &[b, c, n])?;
        if self.scalar {
            // y[b, i, :] = Σ_j J_ij x[b, j, :]
            let mut m = tape.transpose(&j)?;
            if self.symmetric {
                let mt = tape.transpose(&m)?;
                let s = tape.add(&m, &mt)?;
                m = tape.scale(&s, 0.5);
            }
            let xt = tape.permute(x, &[0, 2, 1])?;
            let y = tape.matmul(&xt, &m)?;
            let y = tape.permute(&y, &[0, 2, 1])?;
            return tape.reshape(&y, &xs);
        }
        // Row (j, q), column (i, p) holds J[i, j, p, q], so y_flat = x_flat · M.
        let jp = tape.permute(&j, &[1, 3, 0, 2])?;
        let mut m = tape.reshape(&jp, &[c * n, c * n])?;
        if self.symmetric {
            let mt = tape.transpose(&m)?;
            let s = tape.add(&m, &mt)?;
            m = tape.scale(&s, 0.5);
        }
        let xf = tape.reshape(x, &[b, c * n])?;
        let y = tape.matmul(&xf, &m)?;
        tape.reshape(&y, &xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn drive(conn: &DenseCoupling, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        conn.coupling(&mut tape, store, &xv).unwrap().to_tensor()
    }

    fn naive(j: &Tensor, x: &Tensor) -> Tensor {
        let (b, c, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut y = Tensor::zeros([b, c, n]);
        for bi in 0..b {
            for i in 0..c {
                for p in 0..n {
                    let mut s = 0.0;
                    for k in 0..c {
                        for q in 0..n {
                            s += j.at(&[i, k, p, q]) * x.at(&[bi, k, q]);
                        }
                    }
                    y.set(&[bi, i, p], s);
                }
            }
        }
        y
    }

    #[test]
    fn identity_blocks_return_input() {
        let (c, n) = (3, 4);
        let j = Tensor::from_fn([c, c, n, n], |k| {
            let (i, jj, p, q) = (k / (c * n * n), (k / (n * n)) % c, (k / n) % n, k % n);
            if i == jj && p == q {
                1.0
            } else {
                0.0
            }
        });
        let mut store = ParamStore::new();
        let conn = DenseCoupling::full(&mut store, "J", j, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([2, c, n], &mut rng);
        assert_eq!(drive(&conn, &store, &x), x);
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conn = DenseCoupling::random(&mut store, "J", 3, 4, false, &mut rng);
        let x = Tensor::randn([2, 3, 4], &mut rng);
        let want = naive(store.get(conn.j), &x);
        assert!(drive(&conn, &store, &x).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn scalar_mode_embeds_into_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, n) = (4, 3);
        let js = Tensor::randn([c, c], &mut rng);
        let jf = Tensor::from_fn([c, c, n, n], |k| {
            let (i, jj, p, q) = (k / (c * n * n), (k / (n * n)) % c, (k / n) % n, k % n);
            if p == q {
                js.at(&[i, jj])
            } else {
                0.0
            }
        });
        let mut store = ParamStore::new();
        let s = DenseCoupling::scalar(&mut store, "Js", js);
        let f = DenseCoupling::full(&mut store, "Jf", jf, false).unwrap();
        let x = Tensor::randn([2, c, n], &mut rng);
        assert!(drive(&s, &store, &x).max_abs_diff(&drive(&f, &store, &x)) < 1e-12);
    }

    #[test]
    fn symmetric_flag_gives_block_symmetric_j() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conn = DenseCoupling::random(&mut store, "J", 3, 2, true, &mut rng);
        let j = conn.effective(&store);
        for a in 0..3 {
            for b in 0..3 {
                for p in 0..2 {
                    for q in 0..2 {
                        assert_eq!(j.at(&[a, b, p, q]), j.at(&[b, a, q, p]));
                    }
                }
            }
        }
        let x = Tensor::randn([1, 3, 2], &mut rng);
        assert!(drive(&conn, &store, &x).max_abs_diff(&naive(&j, &x)) < 1e-12);
    }
}
