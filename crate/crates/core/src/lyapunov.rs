//! Numerical check that the energy is a Lyapunov function of the update.
//!
//! Case A: scalar symmetric couplings `J_ij = k_ij I`, one shared Ω for all
//! oscillators, stimulus inside the kernel of Ω.
//! Case B: the Kronecker construction `Ω = I ⊗ Ω_b`, `J = k ⊗ I`, whose block
//! matrices commute exactly.
//! The asymmetric control drops the symmetry of `k` and carries no guarantee.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::DenseCoupling;
use crate::dynamics::{self, RolloutOpts};
use crate::error::{Error, Result};
use crate::tensor::{norm, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LyapunovCase {
    A,
    B,
    Asymmetric,
}

impl std::str::FromStr for LyapunovCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Self::A),
            "b" | "B" => Ok(Self::B),
            "asym" | "asymmetric" => Ok(Self::Asymmetric),
            other => Err(Error::Param(format!("unknown Lyapunov case {other:?} (expected a, b or asym)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub case: LyapunovCase,
    pub oscillators: usize,
    pub n: usize,
    pub gamma: f64,
    pub steps: usize,
    pub seeds: usize,
    pub seed: u64,
    /// Largest per-step energy increase still counted as monotone.
    pub tol: f64,
    /// Rotation rate of the shared natural frequency.
    pub omega_scale: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            case: LyapunovCase::A,
            oscillators: 8,
            n: 4,
            gamma: 0.01,
            steps: 200,
            seeds: 20,
            seed: 0,
            tol: 1e-8,
            omega_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub case: LyapunovCase,
    /// Every per-step increase is at most `tol`.
    pub monotone: bool,
    /// Largest `E_{t+1} − E_t` over all seeds and steps (negative if strictly decreasing).
    pub max_increase: f64,
    /// Largest `‖JΩ − ΩJ‖_F` over seeds, on the assembled block matrices.
    pub commutator_norm: f64,
    /// Largest `‖Ω c‖` over seeds and oscillators.
    pub omega_c_norm: f64,
    /// Total energy drop `E_0 − E_T`, averaged over seeds.
    pub mean_energy_drop: f64,
}

/// One sampled system: scalar couplings `k [C, C]`, shared `Ω [N, N]`, stimulus `c [C, N]`.
pub struct System {
    pub k: Tensor,
    pub omega: Tensor,
    pub c: Tensor,
    pub x0: Tensor,
}

/// Random unit vector orthogonal to the columns already in `basis`.
fn orthonormal(basis: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = Tensor::randn([n], rng).into_data();
        for b in basis {
            let k = crate::tensor::dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
        }
        let nv = norm(&v);
        if nv > 1e-6 {
            v.iter_mut().for_each(|x| *x /= nv);
            return v;
        }
    }
}

pub fn sample_system(cfg: &LyapunovConfig, seed: u64) -> Result<System> {
    let (c, n) = (cfg.oscillators, cfg.n);
    if c == 0 || n < 2 {
        return Err(Error::Param("need at least one oscillator and N >= 2".into()));
    }
    if !(cfg.gamma > 0.0) || cfg.steps == 0 || cfg.seeds == 0 {
        return Err(Error::Param("gamma, steps and seeds must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Tensor::randn([c, c], &mut rng);
    let scale = 1.0 / (c as f64).sqrt();
    let k = Tensor::from_fn([c, c], |i| {
        let (a, b) = (i / c, i % c);
        match cfg.case {
            LyapunovCase::Asymmetric => scale * g.at(&[a, b]),
            _ => 0.5 * scale * (g.at(&[a, b]) + g.at(&[b, a])),
        }
    });

    // Ω = ω (u vᵀ − v uᵀ): a single rotation plane, so its kernel is the
    // orthogonal complement of span(u, v) whenever N > 2.
    let u = orthonormal(&[], n, &mut rng);
    let v = orthonormal(std::slice::from_ref(&u), n, &mut rng);
    let w = cfg.omega_scale;
    let omega = Tensor::from_fn([n, n], |i| {
        let (p, q) = (i / n, i % n);
        w * (u[p] * v[q] - v[p] * u[q])
    });

    let stim = match cfg.case {
        LyapunovCase::B => Tensor::zeros([c, n]),
        _ => {
            let mut s = Tensor::randn([c, n], &mut rng);
            for row in s.rows_mut() {
                for b in [&u, &v] {
                    let k = crate::tensor::dot(b, row);
                    row.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= k * y);
                }
            }
            s
        }
    };

    let mut x0 = Tensor::randn([c, n], &mut rng);
    for row in x0.rows_mut() {
        let nv = norm(row);
        row.iter_mut().for_each(|x| *x /= nv);
    }
    Ok(System {
        k,
        omega,
        c: stim,
        x0,
    })
}

/// Block matrices `J = k ⊗ I_N` and `Ω = I_C ⊗ Ω_b`, both `CN × CN`, row-major.
pub fn block_matrices(k: &Tensor, omega: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let c = k.shape()[0];
    let n = omega.shape()[0];
    let d = c * n;
    let mut j = vec![0.0; d * d];
    let mut o = vec![0.0; d * d];
    for a in 0..c {
        for b in 0..c {
            for p in 0..n {
                j[(a * n + p) * d + b * n + p] = k.at(&[a, b]);
            }
        }
        for p in 0..n {
            for q in 0..n {
                o[(a * n + p) * d + a * n + q] = omega.at(&[p, q]);
            }
        }
    }
    (j, o, d)
}

/// `‖AB − BA‖_F` by direct summation.
pub fn commutator_norm(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut ab = 0.0;
            let mut ba = 0.0;
            for k in 0..d {
                ab += a[i * d + k] * b[k * d + j];
                ba += b[i * d + k] * a[k * d + j];
            }
            total += (ab - ba) * (ab - ba);
        }
    }
    total.sqrt()
}

/// Per-step energies `E_0 ..= E_T` of one system.
pub fn simulate(sys: &System, gamma: f64, steps: usize) -> Result<Vec<f64>> {
    let (c, n) = (sys.x0.shape()[0], sys.x0.shape()[1]);
    let mut store = ParamStore::new();
    let conn = DenseCoupling::scalar(&mut store, "k", sys.k.clone());
    let mut tape = Tape::no_grad();
    let x0 = tape.constant(sys.x0.clone().reshape([1, c, n])?);
    let cv = tape.constant(sys.c.clone().reshape([1, c, n])?);
    let om = tape.constant(sys.omega.clone());
    let g = tape.constant(Tensor::scalar(gamma));
    let r = dynamics::rollout(&mut tape, &store, &conn, &x0, &cv, Some(&om), &g, RolloutOpts::steps(steps))?;
    let mut e: Vec<f64> = r.energies.iter().map(|v| v[0]).collect();
    e.push(dynamics::energy(&conn, &store, r.state.value(), cv.value())?[0]);
    Ok(e)
}

pub fn lyapunov_check(cfg: &LyapunovConfig) -> Result<LyapunovReport> {
    let mut max_increase = f64::NEG_INFINITY;
    let mut comm: f64 = 0.0;
    let mut omega_c: f64 = 0.0;
    let mut drop = 0.0;
    for s in 0..cfg.seeds {
        let sys = sample_system(cfg, cfg.seed.wrapping_add(s as u64))?;
        let (j, o, d) = block_matrices(&sys.k, &sys.omega);
        comm = comm.max(commutator_norm(&j, &o, d));
        for row in sys.c.rows() {
            let oc: Vec<f64> = sys.omega.rows().map(|r| crate::tensor::dot(r, row)).collect();
            omega_c = omega_c.max(norm(&oc));
        }
        let e = simulate(&sys, cfg.gamma, cfg.steps)?;
        for w in e.windows(2) {
            max_increase = max_increase.max(w[1] - w[0]);
        }
        drop += e[0] - e[e.len() - 1];
    }
    Ok(LyapunovReport {
        case: cfg.case,
        monotone: max_increase <= cfg.tol,
        max_increase,
        commutator_norm: comm,
        omega_c_norm: omega_c,
        mean_energy_drop: drop / cfg.seeds as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronecker_factors_commute_exactly() {
        let cfg = LyapunovConfig {
            case: LyapunovCase::B,
            ..Default::default()
        };
        for s in 0..5 {
            let sys = sample_system(&cfg, s).unwrap();
            let (j, o, d) = block_matrices(&sys.k, &sys.omega);
            assert_eq!(commutator_norm(&j, &o, d), 0.0);
        }
    }

    #[test]
    fn non_commuting_pair_has_positive_norm() {
        let a = [0.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 0.0];
        assert!(commutator_norm(&a, &b, 2) > 0.0);
    }

    #[test]
    fn stimulus_lies_in_kernel_of_omega() {
        let sys = sample_system(&LyapunovConfig::default(), 3).unwrap();
        for row in sys.c.rows() {
            for orow in sys.omega.rows() {
                assert!(crate::tensor::dot(orow, row).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn case_a_short_run_is_monotone() {
        let cfg = LyapunovConfig {
            seeds: 3,
            steps: 50,
            ..Default::default()
        };
        let r = lyapunov_check(&cfg).unwrap();
        assert!(r.monotone, "max increase {:e}", r.max_increase);
        assert!(r.mean_energy_drop > 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LyapunovConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(lyapunov_check(&cfg).is_err());
    }
}
