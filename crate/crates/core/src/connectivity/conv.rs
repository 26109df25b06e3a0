use rand::Rng;

use super::{fan_in_normal, Connectivity};
use crate::error::{Error, Result};
use crate::tensor::{Padding, ParamId, ParamStore, Tape, Tensor, Var};

/// Local lattice coupling, `y[c,h,w] = Σ_d Σ_{h',w'} J[c,d,h',w'] x[d, h+h', w+w']`.
///
/// Kernel `[C_out, C_in, KH, KW, N, N]`, odd spatial size, centred offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCoupling {
    pub kernel: ParamId,
    pub padding: Padding,
}

impl ConvCoupling {
    pub fn new(store: &mut ParamStore, name: &str, kernel: Tensor, padding: Padding) -> Result<Self> {
        let sh = kernel.shape();
        if sh.len() != 6 || sh[4] != sh[5] {
            return Err(Error::Param(format!("conv kernel must be [Cout, Cin, KH, KW, N, N], got {sh:?}")));
        }
        if sh[2].is_multiple_of(2) || sh[3].is_multiple_of(2) {
            return Err(Error::Param(format!(
                "convolution kernel size must be odd, got {}x{}",
                sh[2], sh[3]
            )));
        }
        Ok(Self {
            kernel: store.add(name, kernel),
            padding,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        n: usize,
        ksize: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let k = fan_in_normal(&[c, c, ksize, ksize, n, n], c * ksize * ksize * n, rng);
        Self::new(store, name, k, padding)
    }
}

impl Connectivity for ConvCoupling {
    fn coupling(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        tape.conv2d(x, &k, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn drive(conn: &ConvCoupling, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        conn.coupling(&mut tape, store, &xv).unwrap().to_tensor()
    }

    fn naive(k: &Tensor, x: &Tensor, pad: Padding) -> Tensor {
        let ks = k.shape();
        let xs = x.shape();
        let (b, cin, h, w, n) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let mut y = Tensor::zeros([b, cout, h, w, n]);
        for bi in 0..b {
            for c in 0..cout {
                for hh in 0..h {
                    for ww in 0..w {
                        for p in 0..n {
                            let mut s = 0.0;
                            for d in 0..cin {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let sh = hh as isize + u as isize - (kh / 2) as isize;
                                        let sw = ww as isize + v as isize - (kw / 2) as isize;
                                        let (sh, sw) = match pad {
                                            Padding::Circular => {
                                                (sh.rem_euclid(h as isize) as usize, sw.rem_euclid(w as isize) as usize)
                                            }
                                            Padding::Zero => {
                                                if sh < 0 || sw < 0 || sh >= h as isize || sw >= w as isize {
                                                    continue;
                                                }
                                                (sh as usize, sw as usize)
                                            }
                                        };
                                        for q in 0..n {
                                            s += k.at(&[c, d, u, v, p, q]) * x.at(&[bi, d, sh, sw, q]);
                                        }
                                    }
                                }
                            }
                            y.set(&[bi, c, hh, ww, p], s);
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn one_by_one_identity() {
        let n = 3;
        let k = Tensor::from_fn([1, 1, 1, 1, n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let mut store = ParamStore::new();
        let conn = ConvCoupling::new(&mut store, "K", k, Padding::Zero).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([1, 1, 4, 4, n], &mut rng);
        assert_eq!(drive(&conn, &store, &x), x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pad in [Padding::Circular, Padding::Zero] {
            let mut store = ParamStore::new();
            let conn = ConvCoupling::random(&mut store, "K", 2, 2, 3, pad, &mut rng).unwrap();
            let x = Tensor::randn([2, 2, 5, 5, 2], &mut rng);
            let want = naive(store.get(conn.kernel), &x, pad);
            assert!(drive(&conn, &store, &x).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn circular_padding_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conn = ConvCoupling::random(&mut store, "K", 2, 2, 3, Padding::Circular, &mut rng).unwrap();
        let (h, w) = (6, 5);
        let x = Tensor::randn([1, 2, h, w, 2], &mut rng);
        let shift = |t: &Tensor, dh: usize, dw: usize| {
            let mut s = t.clone();
            for c in 0..2 {
                for i in 0..h {
                    for j in 0..w {
                        for p in 0..2 {
                            s.set(&[0, c, (i + dh) % h, (j + dw) % w, p], t.at(&[0, c, i, j, p]));
                        }
                    }
                }
            }
            s
        };
        let a = drive(&conn, &store, &shift(&x, 2, 3));
        let b = shift(&drive(&conn, &store, &x), 2, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn even_kernel_is_param_error() {
        let mut store = ParamStore::new();
        let k = Tensor::zeros([1, 1, 4, 3, 2, 2]);
        assert!(matches!(
            ConvCoupling::new(&mut store, "K", k, Padding::Zero),
            Err(Error::Param(_))
        ));
    }
}
