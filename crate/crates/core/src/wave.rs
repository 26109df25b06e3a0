//! Kuramoto oscillators on a 2-D lattice with local convolutional coupling.
//!
//! The state is `[1, 1, H, W, N]`; a stimulus mask sets `c_i` to the all-ones
//! vector on the foreground and zero elsewhere.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{fan_in_normal, Connectivity, ConvCoupling};
use crate::dynamics::{energy_values, kuramoto_step, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Padding, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelSpec {
    /// Isotropic Gaussian with unit sum, applied as a multiple of the identity.
    Gaussian { sigma: f64 },
    /// Fan-in scaled normal `N×N` blocks.
    Random { seed: u64 },
    /// Whitespace-separated `K×K` scalar weights.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MaskSpec {
    None,
    /// Built-in fish silhouette scaled to the lattice.
    Fish,
    /// PGM bitmap; pixels above half the maximum are foreground.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub kernel: KernelSpec,
    pub kernel_size: usize,
    pub mask: MaskSpec,
    pub gamma: f64,
    /// Rotation speed of the shared natural frequency in the first plane; 0 disables it.
    pub omega: f64,
    pub steps: usize,
    /// Emit a frame every `frame_stride` steps, and always after the last one.
    pub frame_stride: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n: 4,
            kernel: KernelSpec::Gaussian { sigma: 2.0 },
            kernel_size: 9,
            mask: MaskSpec::Fish,
            gamma: 0.3,
            omega: 0.0,
            steps: 200,
            frame_stride: 10,
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.height == 0 || self.width == 0 {
            return bad("lattice must be non-empty".into());
        }
        if self.n < 2 {
            return bad(format!("N must be at least 2, got {}", self.n));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(self.gamma > 0.0) || !self.omega.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if let KernelSpec::Gaussian { sigma } = self.kernel {
            if !(sigma > 0.0) {
                return bad(format!("sigma must be positive, got {sigma}"));
            }
        }
        if self.frame_stride == 0 {
            return bad("frame stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Binary foreground bitmap, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// A fish: elliptical body facing right, triangular tail on the left.
    pub fn fish(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        for r in 0..height {
            for c in 0..width {
                let y = (r as f64 + 0.5) / height as f64 - 0.5;
                let x = (c as f64 + 0.5) / width as f64 - 0.5;
                let body = ((x - 0.08) / 0.3).powi(2) + (y / 0.2).powi(2) <= 1.0;
                // Tail wedge widens towards the left edge.
                let tail = (-0.42..=-0.18).contains(&x) && y.abs() <= 0.9 * (-0.18 - x) + 0.02;
                let eye = (x - 0.24).powi(2) + (y + 0.05).powi(2) <= 0.03f64.powi(2);
                m.bits[r * width + c] = (body || tail) && !eye;
            }
        }
        m
    }

    /// Parse a P2 (ASCII) or P5 (binary, 8-bit) PGM image.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("PGM: {msg}"),
        };
        let mut pos = 0;
        let mut token = || -> Option<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token().ok_or_else(|| err("empty file"))?;
        let mut num = |what: &str| -> Result<usize> {
            token()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(&format!("bad {what}")))
        };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval == 0 || maxval > 255 {
            return Err(err("maxval must be 1-255"));
        }
        let values: Vec<usize> = match magic.as_str() {
            "P2" => (0..width * height).map(|_| num("pixel")).collect::<Result<_>>()?,
            "P5" => {
                let data = bytes.get(pos + 1..pos + 1 + width * height).ok_or_else(|| err("truncated raster"))?;
                data.iter().map(|&b| b as usize).collect()
            }
            _ => return Err(err("expected P2 or P5")),
        };
        Ok(Self {
            height,
            width,
            bits: values.iter().map(|&v| 2 * v > maxval).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    /// P5 encoding, foreground white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Unit-sum Gaussian weights on a `size×size` grid.
pub fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|k| {
            let (dy, dx) = ((k / size) as f64 - r, (k % size) as f64 - r);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// `[1, 1, K, K, N, N]` kernel applying each scalar weight times `I_N`.
pub fn scalar_kernel(weights: &[f64], size: usize, n: usize) -> Tensor {
    Tensor::from_fn([1, 1, size, size, n, n], |k| {
        let (blk, p, q) = (k / (n * n), (k / n) % n, k % n);
        if p == q {
            weights[blk]
        } else {
            0.0
        }
    })
}

fn load_kernel_file(path: &Path, size: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let w: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 0,
            msg: format!("kernel file {}: {e}", path.display()),
        })?;
    if w.len() != size * size {
        return Err(Error::Param(format!(
            "kernel file {} holds {} weights, expected {}",
            path.display(),
            w.len(),
            size * size
        )));
    }
    Ok(w)
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// RGBA with opaque alpha, for canvas blitting.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.data.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colour of one oscillator: hue `atan2(x₁, x₀)` in degrees, full saturation,
/// value `0.625 + 0.375·x₂` (1 when `N = 2`).
pub fn orientation_color(x: &[f64]) -> [u8; 3] {
    let hue = x[1].atan2(x[0]).to_degrees();
    let value = if x.len() > 2 { 0.625 + 0.375 * x[2].clamp(-1.0, 1.0) } else { 1.0 };
    hsv_to_rgb(hue, 1.0, value).map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Map a `[.., H, W, N]` state (leading axes of size one) to an image.
pub fn orientation_colormap(state: &Tensor) -> Result<RgbImage> {
    let sh = state.shape();
    let r = sh.len();
    if r < 3 || sh[r - 1] < 2 || sh[..r - 3].iter().any(|&d| d != 1) {
        return Err(Error::Shape {
            op: "orientation_colormap",
            lhs: sh.to_vec(),
            rhs: vec![],
        });
    }
    Ok(RgbImage {
        height: sh[r - 3],
        width: sh[r - 2],
        data: state.rows().flat_map(orientation_color).collect(),
    })
}

/// `‖mean_i x_i‖₂`, 1 for perfect synchrony.
pub fn coherence(state: &Tensor) -> f64 {
    let n = last_dim(state);
    let mut mean = vec![0.0; n];
    let mut count = 0usize;
    for row in state.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        count += 1;
    }
    norm(&mean) / count.max(1) as f64
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// Per-step energies and coherences, index `t` describing the state after `t` steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTrace {
    pub energy: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl CoherenceTrace {
    /// `step,energy,coherence` rows for steps `0..=T`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,energy,coherence")?;
        for (t, (e, c)) in self.energy.iter().zip(&self.coherence).enumerate() {
            writeln!(w, "{t},{e:e},{c:e}")?;
        }
        Ok(())
    }
}

/// A running lattice simulation.
pub struct WaveSim {
    cfg: LatticeConfig,
    store: ParamStore,
    conn: ConvCoupling,
    omega: Option<Tensor>,
    mask: Mask,
    c: Tensor,
    x: Tensor,
    steps_done: usize,
}

impl WaveSim {
    /// Build the lattice; `seed` drives the initial phases (and a random kernel unless it has its own seed).
    pub fn new(cfg: &LatticeConfig, seed: u64) -> Result<Self> {
        let mask = match &cfg.mask {
            MaskSpec::None => Mask::empty(cfg.height, cfg.width),
            MaskSpec::Fish => Mask::fish(cfg.height, cfg.width),
            MaskSpec::File { path } => Mask::load(path)?,
        };
        Self::with_mask(cfg, mask, seed)
    }

    pub fn with_mask(cfg: &LatticeConfig, mask: Mask, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (h, w, n, k) = (cfg.height, cfg.width, cfg.n, cfg.kernel_size);
        if mask.height != h || mask.width != w {
            return Err(Error::Param(format!(
                "mask is {}x{} but the lattice is {h}x{w}",
                mask.height, mask.width
            )));
        }
        let kernel = match &cfg.kernel {
            KernelSpec::Gaussian { sigma } => scalar_kernel(&gaussian_weights(k, *sigma), k, n),
            KernelSpec::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                fan_in_normal(&[1, 1, k, k, n, n], k * k * n, &mut rng)
            }
            KernelSpec::File { path } => scalar_kernel(&load_kernel_file(path, k)?, k, n),
        };
        let mut store = ParamStore::new();
        let conn = ConvCoupling::new(&mut store, "kernel", kernel, Padding::Circular)?;
        let omega = (cfg.omega != 0.0).then(|| {
            Tensor::from_fn([n, n], |i| match (i / n, i % n) {
                (0, 1) => -cfg.omega,
                (1, 0) => cfg.omega,
                _ => 0.0,
            })
        });
        let c = Tensor::from_fn([1, 1, h, w, n], |i| if mask.bits[i / n] { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn([1, 1, h, w, n], &mut rng);
        for row in x.rows_mut() {
            let s = norm(row).max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            conn,
            omega,
            mask,
            c,
            x,
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.cfg
    }

    pub fn state(&self) -> &Tensor {
        &self.x
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn stimulus(&self) -> &Tensor {
        &self.c
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Replace the oscillator state; every row must already be unit length.
    pub fn set_state(&mut self, x: Tensor) -> Result<()> {
        if x.shape() != self.x.shape() {
            return Err(Error::Shape {
                op: "set_state",
                lhs: x.shape().to_vec(),
                rhs: self.x.shape().to_vec(),
            });
        }
        if x.rows().any(|r| (norm(r) - 1.0).abs() > 1e-9) {
            return Err(Error::Param("oscillator state must have unit-norm rows".into()));
        }
        self.x = x;
        Ok(())
    }

    /// Replace the kernel weights (same shape).
    pub fn set_kernel(&mut self, kernel: Tensor) -> Result<()> {
        self.store.set(self.conn.kernel, kernel)
    }

    fn drive(&self, tape: &mut Tape) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
        let xv = tape.constant(self.x.clone());
        let jx = self.conn.coupling(tape, &self.store, &xv)?;
        Ok((xv, jx))
    }

    pub fn energy(&self) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (_, jx) = self.drive(&mut tape)?;
        Ok(energy_values(&self.x, jx.value(), &self.c)?[0])
    }

    pub fn coherence(&self) -> f64 {
        coherence(&self.x)
    }

    /// Advance one step; returns the energy of the state before the step.
    pub fn step(&mut self) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (xv, jx) = self.drive(&mut tape)?;
        let e = energy_values(&self.x, jx.value(), &self.c)?[0];
        let c = tape.constant(self.c.clone());
        let drive = tape.add(&jx, &c)?;
        let omega = self.omega.clone().map(|o| tape.constant(o));
        let gamma = tape.constant(Tensor::scalar(self.cfg.gamma));
        self.x = kuramoto_step(&mut tape, &xv, &drive, omega.as_ref(), &gamma)?.to_tensor();
        self.steps_done += 1;
        Ok(e)
    }

    pub fn frame(&self) -> RgbImage {
        orientation_colormap(&self.x).expect("lattice state has [1, 1, H, W, N] shape")
    }

    /// Mean and maximum angle between foreground oscillators and the stimulus direction.
    pub fn foreground_alignment(&self) -> Option<(f64, f64)> {
        let n = self.cfg.n;
        let dir = vec![1.0 / (n as f64).sqrt(); n];
        let angles: Vec<f64> = self
            .x
            .rows()
            .zip(&self.mask.bits)
            .filter(|(_, &m)| m)
            .map(|(row, _)| dot(row, &dir).clamp(-1.0, 1.0).acos())
            .collect();
        if angles.is_empty() {
            return None;
        }
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        Some((mean, angles.iter().copied().fold(0.0, f64::max)))
    }
}

/// Result of [`simulate`].
pub struct Simulation {
    /// `(step, image)` for every step that is a multiple of the frame stride.
    pub frames: Vec<(usize, RgbImage)>,
    pub trace: CoherenceTrace,
    pub sim: WaveSim,
}

/// Run `cfg.steps` updates from the seeded initial state.
pub fn simulate(cfg: &LatticeConfig, seed: u64) -> Result<Simulation> {
    run(WaveSim::new(cfg, seed)?)
}

/// Run a prepared simulation for its configured number of steps.
pub fn run(mut sim: WaveSim) -> Result<Simulation> {
    let (steps, stride) = (sim.cfg.steps, sim.cfg.frame_stride);
    let mut trace = CoherenceTrace::default();
    let mut frames = Vec::new();
    for t in 1..=steps {
        trace.coherence.push(sim.coherence());
        trace.energy.push(sim.step()?);
        if t % stride == 0 || t == steps {
            frames.push((t, sim.frame()));
        }
    }
    trace.coherence.push(sim.coherence());
    trace.energy.push(sim.energy()?);
    Ok(Simulation { frames, trace, sim })
}

/// Write frames as `frame_00010.ppm` and the trace as `trace.csv` under `dir`.
pub fn write_outputs(sim: &Simulation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, img) in &sim.frames {
        std::fs::write(dir.join(format!("frame_{t:05}.ppm")), img.to_ppm())?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("trace.csv"))?);
    sim.trace.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::max_norm_error;

    fn small(kernel: KernelSpec, mask: MaskSpec) -> LatticeConfig {
        LatticeConfig {
            height: 16,
            width: 16,
            kernel_size: 5,
            kernel,
            mask,
            steps: 30,
            frame_stride: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_kernel_zero_mask_is_frozen() {
        let cfg = small(KernelSpec::Gaussian { sigma: 1.0 }, MaskSpec::None);
        let mut sim = WaveSim::new(&cfg, 0).unwrap();
        sim.set_kernel(Tensor::zeros([1, 1, 5, 5, 4, 4])).unwrap();
        let out = run(sim).unwrap();
        assert!(out.frames.windows(2).all(|w| w[0].1 == w[1].1));
        assert!(out.trace.coherence.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn gaussian_weights_sum_to_one_and_are_symmetric() {
        let w = gaussian_weights(9, 2.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for k in 0..81 {
            assert_eq!(w[k], w[80 - k]);
        }
        assert!(w[40] > w[39]);
    }

    #[test]
    fn unit_norm_energy_descent_and_determinism() {
        let mut cfg = small(KernelSpec::Gaussian { sigma: 2.0 }, MaskSpec::Fish);
        cfg.gamma = 0.01;
        let a = simulate(&cfg, 3).unwrap();
        let b = simulate(&cfg, 3).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.trace, b.trace);
        assert!(max_norm_error(a.sim.state()) < 1e-12);
        assert_eq!(a.trace.energy.len(), cfg.steps + 1);
        for w in a.trace.energy.windows(2) {
            assert!(w[1] - w[0] <= 1e-8, "energy rose by {}", w[1] - w[0]);
        }
    }

    #[test]
    fn set_state_checks_shape_and_norm() {
        let cfg = small(KernelSpec::Gaussian { sigma: 1.0 }, MaskSpec::None);
        let mut sim = WaveSim::new(&cfg, 0).unwrap();
        let aligned = Tensor::from_fn([1, 1, 16, 16, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        sim.set_state(aligned.clone()).unwrap();
        assert_eq!(sim.coherence(), 1.0);
        assert!(sim.set_state(aligned.map(|v| 2.0 * v)).is_err());
        assert!(sim.set_state(Tensor::zeros([1, 1, 4, 4, 4])).is_err());
    }

    #[test]
    fn coherence_bounds() {
        let aligned = Tensor::from_fn([1, 1, 2, 2, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        assert!((coherence(&aligned) - 1.0).abs() < 1e-15);
        let opposed = Tensor::new([1, 1, 1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(coherence(&opposed), 0.0);
    }

    #[test]
    fn colormap_properties() {
        let same = Tensor::from_fn([1, 1, 3, 3, 3], |i| [0.6, 0.0, 0.8][i % 3]);
        let img = orientation_colormap(&same).unwrap();
        assert!(img.data.chunks(3).all(|p| p == &img.data[..3]));

        // Negation moves the hue by 180 degrees.
        let x = [0.8, 0.6];
        let (a, b) = (orientation_color(&x), orientation_color(&[-0.8, -0.6]));
        let hue = |c: [u8; 3]| {
            let f = c.map(|v| v as f64 / 255.0);
            let (mx, mn) = (f.iter().cloned().fold(0.0, f64::max), f.iter().cloned().fold(1.0, f64::min));
            let d = mx - mn;
            let h = if mx == f[0] {
                ((f[1] - f[2]) / d).rem_euclid(6.0)
            } else if mx == f[1] {
                (f[2] - f[0]) / d + 2.0
            } else {
                (f[0] - f[1]) / d + 4.0
            };
            h * 60.0
        };
        let diff = (hue(a) - hue(b)).rem_euclid(360.0);
        assert!((diff - 180.0).abs() < 1.0, "hue difference {diff}");

        let colors: std::collections::HashSet<[u8; 3]> = (0..360)
            .map(|d| {
                let t = (d as f64).to_radians();
                orientation_color(&[t.cos(), t.sin()])
            })
            .collect();
        assert_eq!(colors.len(), 360);
    }

    #[test]
    fn pgm_roundtrip_and_ascii() {
        let m = Mask::fish(20, 30);
        assert!(m.count() > 50);
        assert_eq!(Mask::from_pgm(&m.to_pgm()).unwrap(), m);
        let ascii = b"P2\n# comment\n3 2\n10\n0 6 10\n5 4 0\n";
        let a = Mask::from_pgm(ascii).unwrap();
        assert_eq!(a.bits, vec![false, true, true, false, false, false]);
        assert!(Mask::from_pgm(b"P3\n1 1\n1\n0").is_err());
    }

    #[test]
    fn mismatched_mask_and_even_kernel_rejected() {
        let cfg = small(KernelSpec::Gaussian { sigma: 1.0 }, MaskSpec::None);
        assert!(WaveSim::with_mask(&cfg, Mask::empty(8, 8), 0).is_err());
        let even = LatticeConfig { kernel_size: 4, ..cfg };
        assert!(WaveSim::new(&even, 0).is_err());
    }

    #[test]
    fn one_step_stride_one_gives_one_frame() {
        let cfg = LatticeConfig {
            steps: 1,
            ..small(KernelSpec::Random { seed: 1 }, MaskSpec::Fish)
        };
        let out = simulate(&cfg, 0).unwrap();
        assert_eq!(out.frames.len(), 1);
        assert_eq!(out.frames[0].0, 1);
    }
}
