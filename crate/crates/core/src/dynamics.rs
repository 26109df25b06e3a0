//! Vector Kuramoto update, energy and the scalar phase model.
//!
//! Oscillators live on the last axis of a tensor: `[.., N]`, every row a unit
//! vector. Couplings only supply the drive `Σ_j J_ij x_j`; the update itself
//! is independent of how that drive is produced.

use serde::{Deserialize, Serialize};

use crate::connectivity::Connectivity;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{norm, ParamId, ParamStore, Tape, Tensor, Var};

/// Guard for zero vectors in the sphere projection.
pub const NORM_EPS: f64 = 1e-12;

/// `y − ⟨y, x⟩ x`, the tangent component of `y` at unit vector `x`.
pub fn project(x: &[f64], y: &[f64]) -> Vec<f64> {
    let k = crate::tensor::dot(x, y);
    x.iter().zip(y).map(|(xi, yi)| yi - k * xi).collect()
}

/// Row-wise tangent projection on the tape.
pub fn project_var(tape: &mut Tape, x: &Var, y: &Var) -> Result<Var> {
    let k = tape.dot_last(y, x)?;
    let par = tape.mul_last(x, &k)?;
    tape.sub(y, &par)
}

/// Antisymmetric natural-frequency generator.
///
/// Stored as an unconstrained `A`; the effective matrix is `Ω = A − Aᵀ`.
/// The shape is `[N, N]` (shared) or `[R, N, N]`, one block per row of the
/// second-to-last oscillator axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NaturalFrequency {
    pub raw: ParamId,
}

impl NaturalFrequency {
    pub fn omega(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let a = tape.param(store, self.raw);
        let at = tape.transpose(&a)?;
        tape.sub(&a, &at)
    }
}

/// `A − Aᵀ` for a plain tensor of shape `[.., N, N]`.
pub fn antisymmetrize(a: &Tensor) -> Result<Tensor> {
    let sh = a.shape();
    let r = sh.len();
    if r < 2 || sh[r - 1] != sh[r - 2] {
        return shape_err("antisymmetrize", sh, &[]);
    }
    let n = sh[r - 1];
    let mut out = a.clone();
    for (dst, src) in out.data_mut().chunks_mut(n * n).zip(a.data().chunks(n * n)) {
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = src[i * n + j] - src[j * n + i];
            }
        }
    }
    Ok(out)
}

/// Softplus, the map from the raw step-size parameter to `γ > 0`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One discrete update: `x ← Π[x + γ(Ωx + Proj_x(drive))]`.
///
/// `drive` already contains the stimulus. `gamma` must hold one positive value.
pub fn kuramoto_step(
    tape: &mut Tape,
    x: &Var,
    drive: &Var,
    omega: Option<&Var>,
    gamma: &Var,
) -> Result<Var> {
    let g = gamma.value().item()?;
    if g.is_nan() || g <= 0.0 {
        return Err(Error::Param(format!("step size must be positive, got {g}")));
    }
    if x.shape() != drive.shape() {
        return shape_err("kuramoto_step", x.shape(), drive.shape());
    }
    let mut delta = project_var(tape, x, drive)?;
    if let Some(om) = omega {
        let rot = tape.block_matvec(x, om)?;
        delta = tape.add(&delta, &rot)?;
    }
    let scaled = tape.mul(&delta, gamma)?;
    let moved = tape.add(x, &scaled)?;
    Ok(tape.normalize(&moved, NORM_EPS))
}

/// Per-step energies of one system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub energies: Vec<f64>,
}

impl EnergyTrace {
    pub fn sum(&self) -> f64 {
        self.energies.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.energies.last().copied()
    }
}

/// `E = −½ Σ_i ⟨x_i, (Jx)_i⟩ − Σ_i ⟨c_i, x_i⟩` for each batch element (axis 0).
pub fn energy_values(x: &Tensor, jx: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != jx.shape() || x.shape() != c.shape() || x.rank() < 2 {
        return shape_err("energy", x.shape(), jx.shape());
    }
    let b = x.shape()[0];
    let per = x.numel() / b.max(1);
    Ok((0..b)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            x.data()[r.clone()]
                .iter()
                .zip(&jx.data()[r.clone()])
                .zip(&c.data()[r])
                .map(|((xv, jv), cv)| -0.5 * xv * jv - cv * xv)
                .sum()
        })
        .collect())
}

/// Energy of each batch element under `conn` with stimulus `c`.
pub fn energy(
    conn: &dyn Connectivity,
    store: &ParamStore,
    x: &Tensor,
    c: &Tensor,
) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let jx = conn.coupling(&mut tape, store, &xv)?;
    energy_values(x, jx.value(), c)
}

/// Result of [`rollout`].
pub struct Rollout {
    /// Final oscillators `x_T`.
    pub state: Var,
    /// `x_0 ..= x_T` when recording was requested, otherwise empty.
    pub states: Vec<Tensor>,
    /// `energies[t][b]`: energy of batch element `b` at the start of step `t`.
    pub energies: Vec<Vec<f64>>,
}

impl Rollout {
    /// Trace of one batch element.
    pub fn trace(&self, b: usize) -> EnergyTrace {
        EnergyTrace {
            energies: self.energies.iter().map(|e| e[b]).collect(),
        }
    }
}

/// Options for [`rollout`].
#[derive(Clone, Copy, Debug)]
pub struct RolloutOpts {
    pub steps: usize,
    pub record_states: bool,
}

impl RolloutOpts {
    pub fn steps(steps: usize) -> Self {
        Self {
            steps,
            record_states: false,
        }
    }
}

/// Apply [`kuramoto_step`] `T` times, recomputing the drive `Jx_t + c` each step.
///
/// The energy recorded for step `t` uses `x_t` and the same `Jx_t` that
/// drives the update, so the trace has exactly `T` entries.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    store: &ParamStore,
    conn: &dyn Connectivity,
    x0: &Var,
    c: &Var,
    omega: Option<&Var>,
    gamma: &Var,
    opts: RolloutOpts,
) -> Result<Rollout> {
    if opts.steps == 0 {
        return Err(Error::Param("rollout needs at least one step".into()));
    }
    let mut x = x0.clone();
    let mut states = Vec::new();
    let mut energies = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        if opts.record_states {
            states.push(x.to_tensor());
        }
        let jx = conn.coupling(tape, store, &x)?;
        energies.push(energy_values(x.value(), jx.value(), c.value())?);
        let drive = tape.add(&jx, c)?;
        x = kuramoto_step(tape, &x, &drive, omega, gamma)?;
    }
    if opts.record_states {
        states.push(x.to_tensor());
    }
    Ok(Rollout {
        state: x,
        states,
        energies,
    })
}

/// Largest deviation of any row norm from one.
pub fn max_norm_error(x: &Tensor) -> f64 {
    x.rows().map(|r| (norm(r) - 1.0).abs()).fold(0.0, f64::max)
}

/// Euler step of the phase model `θ̇_i = ω_i + Σ_j J_ij sin(θ_j − θ_i)`.
pub fn scalar_kuramoto_step(theta: &[f64], omega: &[f64], j: &[f64], gamma: f64) -> Vec<f64> {
    let c = theta.len();
    debug_assert_eq!(omega.len(), c);
    debug_assert_eq!(j.len(), c * c);
    (0..c)
        .map(|i| {
            let pull: f64 = (0..c).map(|k| j[i * c + k] * (theta[k] - theta[i]).sin()).sum();
            theta[i] + gamma * (omega[i] + pull)
        })
        .collect()
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}
