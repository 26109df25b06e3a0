//! WebAssembly bindings for the static page in `www/`.
//!
//! Three operations are exposed: stepping and drawing the oscillator lattice,
//! scrambling a disc of it with the pointer, and sampling the energy trace of a
//! small random Kuramoto system.

use akorn::lyapunov::{self, LyapunovCase, LyapunovConfig};
use akorn::tensor::{norm, Tensor};
use akorn::wave::{KernelSpec, LatticeConfig, MaskSpec, WaveSim};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: akorn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A square lattice with a Gaussian kernel, driven by an optional fish silhouette.
#[wasm_bindgen]
pub struct Lattice {
    sim: WaveSim,
    energy: Vec<f64>,
    coherence: Vec<f64>,
    rng: ChaCha8Rng,
}

#[wasm_bindgen]
impl Lattice {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, sigma: f64, gamma: f64, omega: f64, fish: bool, seed: u64) -> Result<Lattice, JsError> {
        let cfg = LatticeConfig {
            height: size,
            width: size,
            kernel: KernelSpec::Gaussian { sigma },
            mask: if fish { MaskSpec::Fish } else { MaskSpec::None },
            gamma,
            omega,
            ..LatticeConfig::default()
        };
        let sim = WaveSim::new(&cfg, seed).map_err(js_err)?;
        let energy = vec![sim.energy().map_err(js_err)?];
        let coherence = vec![sim.coherence()];
        Ok(Lattice {
            sim,
            energy,
            coherence,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        })
    }

    pub fn size(&self) -> usize {
        self.sim.config().width
    }

    /// Advance `k` steps; returns the energy afterwards.
    pub fn step(&mut self, k: usize) -> Result<f64, JsError> {
        for _ in 0..k {
            self.sim.step().map_err(js_err)?;
            self.energy.push(self.sim.energy().map_err(js_err)?);
            self.coherence.push(self.sim.coherence());
        }
        Ok(*self.energy.last().expect("history starts non-empty"))
    }

    /// RGBA pixels, row-major, hue from the orientation of each oscillator.
    pub fn rgba(&self) -> Vec<u8> {
        self.sim.frame().to_rgba()
    }

    pub fn energy(&self) -> f64 {
        *self.energy.last().expect("history starts non-empty")
    }

    pub fn coherence(&self) -> f64 {
        self.sim.coherence()
    }

    /// Energy after every step so far, starting from the initial state.
    pub fn energy_history(&self) -> Vec<f64> {
        self.energy.clone()
    }

    pub fn coherence_history(&self) -> Vec<f64> {
        self.coherence.clone()
    }

    /// Give every oscillator within `radius` of `(row, col)` a fresh random direction.
    pub fn scramble(&mut self, row: f64, col: f64, radius: f64) -> Result<(), JsError> {
        let size = self.size();
        let n = self.sim.config().n;
        let noise = Tensor::randn([size * size, n], &mut self.rng);
        let mut x = self.sim.state().clone();
        for (i, (cell, fresh)) in x.rows_mut().zip(noise.rows()).enumerate() {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            if (r - row).hypot(c - col) <= radius {
                let s = norm(fresh).max(1e-12);
                cell.iter_mut().zip(fresh).for_each(|(v, f)| *v = f / s);
            }
        }
        self.sim.set_state(x).map_err(js_err)
    }
}

/// Energies `E_0 ..= E_steps` of one random system for the named case
/// (`a`, `b` or `asym`).
#[wasm_bindgen]
pub fn lyapunov_trace(case: &str, gamma: f64, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let case: LyapunovCase = case.parse().map_err(js_err)?;
    let cfg = LyapunovConfig {
        case,
        gamma,
        steps,
        seeds: 1,
        seed,
        ..LyapunovConfig::default()
    };
    let sys = lyapunov::sample_system(&cfg, seed).map_err(js_err)?;
    lyapunov::simulate(&sys, gamma, steps).map_err(js_err)
}
