//! Coupling backends producing the drive `Σ_j J_ij x_j`.
//!
//! | backend | oscillator layout   |
//! |---------|---------------------|
//! | dense   | `[B, C, N]`         |
//! | conv    | `[B, C, H, W, N]`   |
//! | attn    | `[B, L, C, N]`      |

mod attention;
mod conv;
mod dense;

pub use attention::AttnCoupling;
pub use conv::ConvCoupling;
pub use dense::DenseCoupling;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Anything that maps oscillators to their coupling drive (stimulus excluded).
pub trait Connectivity {
    fn coupling(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var>;
}

/// One of the three backends.
#[derive(Clone, Debug, PartialEq)]
pub enum Coupling {
    Dense(DenseCoupling),
    Conv(ConvCoupling),
    Attn(AttnCoupling),
}

impl Connectivity for Coupling {
    fn coupling(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        match self {
            Coupling::Dense(c) => c.coupling(tape, store, x),
            Coupling::Conv(c) => c.coupling(tape, store, x),
            Coupling::Attn(c) => c.coupling(tape, store, x),
        }
    }
}

/// Gaussian weights with standard deviation `1/√fan_in`.
pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal))
}
