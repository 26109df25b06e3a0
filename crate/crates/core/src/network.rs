//! Encoder, stacked Kuramoto blocks and classification head.
//!
//! Oscillators use the token layout `[B, L, C, N]`: `L` tokens, each with
//! `C` oscillators of dimension `N` (`D = C·N` features per token).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{fan_in_normal, AttnCoupling, Connectivity, Coupling, DenseCoupling};
use crate::dynamics::{self, softplus_inv, NaturalFrequency, RolloutOpts, NORM_EPS};
use crate::error::{shape_err, Error, Result};
use crate::readout::{affine, GKind, Readout, ReadoutKind};
use crate::tensor::{norm, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderConfig {
    /// Learned table of `vocab` token vectors.
    Embedding { vocab: usize },
    /// Affine map from `features` inputs per token.
    Linear { features: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CouplingConfig {
    Attn { heads: usize, pos_embedding: bool },
    /// All-to-all over the `L·C` oscillators.
    Dense { symmetric: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Gaussian draw projected onto the sphere.
    RandomSphere,
    /// `c_i/‖c_i‖`, random where `‖c_i‖` vanishes.
    FromStimulus,
    /// One learned vector per oscillator index, shared across the batch.
    Learned,
    /// `c_i/‖c_i‖` on tokens marked given, random elsewhere.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    /// Tokens per example (`L`).
    pub tokens: usize,
    /// Features per token (`D = C·N`).
    pub channels: usize,
    /// Oscillator dimension.
    pub n: usize,
    pub coupling: CouplingConfig,
    pub blocks: usize,
    /// Kuramoto steps per block at training time.
    pub steps: usize,
    /// Initial step size.
    pub gamma: f64,
    /// Include the natural-frequency term.
    pub omega: bool,
    pub readout: ReadoutKind,
    pub readout_bias: bool,
    pub g: GKind,
    pub init: InitMode,
    pub classes: usize,
    /// Groups of the normalisation applied to the stimulus between blocks.
    pub norm_groups: usize,
}

impl NetworkConfig {
    /// One attention block over the 81 cells, digits 0-9 in, 9 classes out.
    ///
    /// Starting at γ = 0.5 leaves the copy-the-givens plateau sooner than γ = 1.
    pub fn sudoku(channels: usize, n: usize, steps: usize) -> Self {
        Self {
            encoder: EncoderConfig::Embedding { vocab: 10 },
            tokens: 81,
            channels,
            n,
            coupling: CouplingConfig::Attn {
                heads: 8,
                pos_embedding: true,
            },
            blocks: 1,
            steps,
            gamma: 0.5,
            omega: true,
            readout: ReadoutKind::Full,
            readout_bias: true,
            g: GKind::Identity,
            init: InitMode::Mixed,
            classes: 9,
            norm_groups: n,
        }
    }

    /// Oscillators per token.
    pub fn oscillators(&self) -> usize {
        self.channels / self.n.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.n < 2 || self.channels == 0 || !self.channels.is_multiple_of(self.n) {
            return bad(format!("channels ({}) must be a positive multiple of N ({}), N >= 2", self.channels, self.n));
        }
        if self.steps == 0 {
            return bad("T must be at least 1".into());
        }
        if self.blocks == 0 || self.tokens == 0 || self.classes == 0 {
            return bad("blocks, tokens and classes must be positive".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.norm_groups == 0 || !self.channels.is_multiple_of(self.norm_groups) {
            return bad(format!("norm groups ({}) must divide channels ({})", self.norm_groups, self.channels));
        }
        if let CouplingConfig::Attn { heads, .. } = self.coupling {
            if heads == 0 || !self.oscillators().is_multiple_of(heads) {
                return bad(format!(
                    "heads ({heads}) must divide the oscillators per token ({})",
                    self.oscillators()
                ));
            }
        }
        match self.encoder {
            EncoderConfig::Embedding { vocab: 0 } | EncoderConfig::Linear { features: 0 } => {
                bad("encoder input size must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Kuramoto layer plus readout.
#[derive(Clone, Debug, PartialEq)]
pub struct AkornBlock {
    pub coupling: Coupling,
    pub omega: Option<NaturalFrequency>,
    /// Raw step size `ρ`; `γ = softplus(ρ)`.
    pub gamma_raw: ParamId,
    pub steps: usize,
    pub readout: Readout,
}

/// Output of [`AkornBlock::forward`].
pub struct BlockOut {
    /// Next stimulus, `[B, L, C, N]`.
    pub c: Var,
    /// Final oscillators `x_T`.
    pub x: Var,
    /// `energies[t][b]`.
    pub energies: Vec<Vec<f64>>,
}

impl AkornBlock {
    pub fn gamma(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let raw = tape.param(store, self.gamma_raw);
        tape.softplus(&raw)
    }

    /// Roll out `steps` updates from `x` under stimulus `c`, then read out.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, c: &Var, x: &Var, steps: usize) -> Result<BlockOut> {
        let omega = match &self.omega {
            Some(o) => Some(o.omega(tape, store)?),
            None => None,
        };
        let gamma = self.gamma(tape, store);
        let r = dynamics::rollout(tape, store, &self.coupling, x, c, omega.as_ref(), &gamma, RolloutOpts::steps(steps))?;
        let m = self.readout.forward(tape, store, &r.state)?;
        let c_next = tape.reshape(&m, c.shape())?;
        Ok(BlockOut {
            c: c_next,
            x: r.state,
            energies: r.energies,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderParams {
    Embedding { table: ParamId },
    Linear { w: ParamId, b: ParamId },
}

/// Input to [`Network::forward`].
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    /// `B·L` token ids.
    Tokens(&'a [usize]),
    /// `[B, L, F]` features.
    Features(&'a Tensor),
}

/// Output of [`Network::forward`].
pub struct Forward {
    /// `[B·L, classes]`.
    pub logits: Var,
    /// Per block, `energies[t][b]`.
    pub traces: Vec<Vec<Vec<f64>>>,
    /// Final oscillators of the last block.
    pub state: Var,
}

impl Forward {
    /// `Σ_t E_t` for batch element `b`, summed over blocks.
    pub fn energy_sum(&self, b: usize) -> f64 {
        self.traces.iter().flat_map(|t| t.iter().map(|e| e[b])).sum()
    }
}

/// Parameters and structure of a full model.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
    encoder: EncoderParams,
    pub blocks: Vec<AkornBlock>,
    learned_init: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Network {
    /// Build a freshly initialised network; parameter values depend only on `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, n, c) = (cfg.channels, cfg.n, cfg.oscillators());
        let encoder = match cfg.encoder {
            EncoderConfig::Embedding { vocab } => EncoderParams::Embedding {
                table: store.add("embed", Tensor::randn([vocab, d], &mut rng)),
            },
            EncoderConfig::Linear { features } => EncoderParams::Linear {
                w: store.add("embed.w", fan_in_normal(&[features, d], features, &mut rng)),
                b: store.add("embed.b", Tensor::zeros([d])),
            },
        };
        let learned_init = (cfg.init == InitMode::Learned)
            .then(|| store.add("x0", Tensor::randn([cfg.tokens, c, n], &mut rng)));
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let name = |s: &str| format!("block{l}.{s}");
            let coupling = match cfg.coupling {
                CouplingConfig::Attn { heads, pos_embedding } => Coupling::Attn(AttnCoupling::random(
                    &mut store,
                    &name("attn"),
                    c,
                    n,
                    heads,
                    pos_embedding.then_some(cfg.tokens),
                    &mut rng,
                )?),
                CouplingConfig::Dense { symmetric } => Coupling::Dense(DenseCoupling::random(
                    &mut store,
                    &name("J"),
                    cfg.tokens * c,
                    n,
                    symmetric,
                    &mut rng,
                )),
            };
            let omega = cfg.omega.then(|| NaturalFrequency {
                raw: store.add(name("omega"), fan_in_normal(&[c, n, n], n, &mut rng)),
            });
            let gamma_raw = store.add(name("gamma"), Tensor::scalar(softplus_inv(cfg.gamma)));
            let readout = Readout::random(
                &mut store,
                &name("readout"),
                cfg.readout,
                c,
                n,
                d,
                n,
                cfg.readout_bias,
                cfg.g,
                &mut rng,
            );
            blocks.push(AkornBlock {
                coupling,
                omega,
                gamma_raw,
                steps: cfg.steps,
                readout,
            });
        }
        let head_w = store.add("head.w", fan_in_normal(&[d, cfg.classes], d, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros([cfg.classes]));
        Ok(Self {
            cfg,
            params: store,
            encoder,
            blocks,
            learned_init,
            head_w,
            head_b,
        })
    }

    /// Stimulus `C⁽⁰⁾ [B, L, C, N]`.
    pub fn encode(&self, tape: &mut Tape, input: Input<'_>) -> Result<Var> {
        let (l, c, n) = (self.cfg.tokens, self.cfg.oscillators(), self.cfg.n);
        let flat = match (&self.encoder, input) {
            (EncoderParams::Embedding { table }, Input::Tokens(ids)) => {
                if ids.is_empty() || ids.len() % l != 0 {
                    return shape_err("encode", &[ids.len()], &[l]);
                }
                let t = tape.param(&self.params, *table);
                tape.embedding(&t, ids)?
            }
            (EncoderParams::Linear { w, b }, Input::Features(x)) => {
                if x.rank() != 3 || x.shape()[1] != l {
                    return shape_err("encode", x.shape(), &[l]);
                }
                let xv = tape.constant(x.clone());
                affine(tape, &self.params, &xv, *w, *b)?
            }
            _ => return Err(Error::Param("input kind does not match the encoder".into())),
        };
        let b = flat.value().numel() / (l * c * n);
        tape.reshape(&flat, &[b, l, c, n])
    }

    /// Initial oscillators for stimulus `c [B, L, C, N]`.
    ///
    /// `noise` has the same shape; `given` has one flag per token (`B·L`).
    pub fn init_oscillators(&self, tape: &mut Tape, c: &Var, noise: &Tensor, given: Option<&[bool]>) -> Result<Var> {
        if noise.shape() != c.shape() {
            return shape_err("init_oscillators", noise.shape(), c.shape());
        }
        let sh = c.shape().to_vec();
        let per_token = sh[2] * sh[3];
        let n = sh[3];
        let blend = |tape: &mut Tape, keep: Vec<f64>| -> Result<Var> {
            let m = tape.constant(Tensor::new(sh.clone(), keep.clone())?);
            let inv = Tensor::new(sh.clone(), keep.iter().zip(noise.data()).map(|(k, z)| (1.0 - k) * z).collect())?;
            let inv = tape.constant(inv);
            let kept = tape.mul(c, &m)?;
            let mixed = tape.add(&kept, &inv)?;
            Ok(tape.normalize(&mixed, NORM_EPS))
        };
        match self.cfg.init {
            InitMode::RandomSphere => {
                let z = tape.constant(noise.clone());
                Ok(tape.normalize(&z, NORM_EPS))
            }
            InitMode::FromStimulus => {
                let keep = c
                    .value()
                    .rows()
                    .flat_map(|r| std::iter::repeat_n(if norm(r) < NORM_EPS { 0.0 } else { 1.0 }, n))
                    .collect();
                blend(tape, keep)
            }
            InitMode::Mixed => {
                let given = given.ok_or_else(|| Error::Param("mixed initialisation needs a given-token mask".into()))?;
                if given.len() * per_token != c.value().numel() {
                    return shape_err("init_oscillators", &[given.len()], &sh);
                }
                let keep = given
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(if g { 1.0 } else { 0.0 }, per_token))
                    .collect();
                blend(tape, keep)
            }
            InitMode::Learned => {
                let p = tape.param(&self.params, self.learned_init.expect("learned mode has x0"));
                let zeros = tape.constant(Tensor::zeros(sh.clone()));
                let x = tape.add(&zeros, &p)?;
                Ok(tape.normalize(&x, NORM_EPS))
            }
        }
    }

    /// Full pass with initial-oscillator noise drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: Input<'_>,
        given: Option<&[bool]>,
        steps: Option<usize>,
        rng: &mut R,
    ) -> Result<Forward> {
        let c0 = self.encode(tape, input)?;
        let noise = Tensor::randn(c0.shape().to_vec(), rng);
        self.forward_from(tape, c0, &noise, given, steps)
    }

    /// Full pass with explicit initial-oscillator noise `[B, L, C, N]`.
    pub fn forward_with_noise(
        &self,
        tape: &mut Tape,
        input: Input<'_>,
        noise: &Tensor,
        given: Option<&[bool]>,
        steps: Option<usize>,
    ) -> Result<Forward> {
        let c0 = self.encode(tape, input)?;
        self.forward_from(tape, c0, noise, given, steps)
    }

    fn forward_from(
        &self,
        tape: &mut Tape,
        c0: Var,
        noise: &Tensor,
        given: Option<&[bool]>,
        steps: Option<usize>,
    ) -> Result<Forward> {
        if steps == Some(0) {
            return Err(Error::Param("T must be at least 1".into()));
        }
        let sh = c0.shape().to_vec();
        let (b, l, d) = (sh[0], sh[1], self.cfg.channels);
        let mut x = self.init_oscillators(tape, &c0, noise, given)?;
        let mut c = c0;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(tape, &self.params, &c, &x, steps.unwrap_or(block.steps))?;
            traces.push(out.energies);
            x = out.x;
            c = out.c;
            if i + 1 < self.blocks.len() {
                let flat = tape.reshape(&c, &[b, l, d])?;
                let normed = tape.group_norm(&flat, self.cfg.norm_groups, 1e-5)?;
                c = tape.reshape(&normed, &sh)?;
            }
        }
        let feats = tape.reshape(&c, &[b * l, d])?;
        let h = tape.relu(&feats);
        let logits = affine(tape, &self.params, &h, self.head_w, self.head_b)?;
        Ok(Forward {
            logits,
            traces,
            state: x,
        })
    }

    /// Energy of oscillators `x` under the first block's coupling and stimulus `c`.
    pub fn energy(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        let block = self.blocks.first().ok_or_else(|| Error::Param("network has no blocks".into()))?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let jx = block.coupling.coupling(&mut tape, &self.params, &xv)?;
        dynamics::energy_values(x, jx.value(), c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sudoku() -> NetworkConfig {
        let mut cfg = NetworkConfig::sudoku(16, 4, 3);
        cfg.coupling = CouplingConfig::Attn {
            heads: 2,
            pos_embedding: true,
        };
        cfg
    }

    fn tokens(b: usize) -> (Vec<usize>, Vec<bool>) {
        let ids: Vec<usize> = (0..b * 81).map(|i| (i * 7) % 10).collect();
        let given = ids.iter().map(|&t| t != 0).collect();
        (ids, given)
    }

    #[test]
    fn zero_steps_rejected() {
        let mut cfg = tiny_sudoku();
        cfg.steps = 0;
        assert!(Network::new(cfg, 0).is_err());
        let net = Network::new(tiny_sudoku(), 0).unwrap();
        let (ids, given) = tokens(1);
        let mut tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(net
            .forward(&mut tape, Input::Tokens(&ids), Some(&given), Some(0), &mut rng)
            .is_err());
    }

    #[test]
    fn sudoku_logits_shape_and_reproducible() {
        let net = Network::new(tiny_sudoku(), 1).unwrap();
        let (ids, given) = tokens(2);
        let run = || {
            let mut tape = Tape::no_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            net.forward(&mut tape, Input::Tokens(&ids), Some(&given), None, &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a.logits.shape(), &[162, 9]);
        assert_eq!(a.traces[0].len(), 3);
        assert_eq!(a.logits.value(), run().logits.value());
    }

    #[test]
    fn mixed_init_with_all_given_is_normalised_stimulus() {
        let net = Network::new(tiny_sudoku(), 2).unwrap();
        let ids: Vec<usize> = (0..81).map(|i| 1 + i % 9).collect();
        let given = vec![true; 81];
        let mut tape = Tape::no_grad();
        let c = net.encode(&mut tape, Input::Tokens(&ids)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Tensor::randn(c.shape().to_vec(), &mut rng);
        let x = net.init_oscillators(&mut tape, &c, &noise, Some(&given)).unwrap();
        for (xr, cr) in x.value().rows().zip(c.value().rows()) {
            let nc = norm(cr);
            for (a, b) in xr.iter().zip(cr) {
                assert!((a - b / nc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_sphere_draws_are_unit_and_centred() {
        let mut cfg = tiny_sudoku();
        cfg.init = InitMode::RandomSphere;
        let net = Network::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Tensor::randn([1, 10_000, 1, 4], &mut rng);
        let mut tape = Tape::no_grad();
        let c = tape.constant(Tensor::zeros([1, 10_000, 1, 4]));
        let x = net.init_oscillators(&mut tape, &c, &noise, None).unwrap();
        let mut mean = [0.0; 4];
        for r in x.value().rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / 10_000.0;
            }
        }
        assert!(norm(&mean) < 0.05);
    }

    #[test]
    fn from_stimulus_falls_back_on_zero_rows() {
        let mut cfg = tiny_sudoku();
        cfg.init = InitMode::FromStimulus;
        let net = Network::new(cfg, 5).unwrap();
        let mut stim = Tensor::zeros([1, 1, 2, 2]);
        stim.data_mut()[..2].copy_from_slice(&[3.0, 4.0]);
        let noise = Tensor::new([1, 1, 2, 2], vec![9.0, 9.0, 0.0, -2.0]).unwrap();
        let mut tape = Tape::no_grad();
        let c = tape.constant(stim);
        let x = net.init_oscillators(&mut tape, &c, &noise, None).unwrap();
        assert_eq!(x.data(), &[0.6, 0.8, 0.0, -1.0]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut cfg = tiny_sudoku();
        cfg.blocks = 2;
        cfg.g = GKind::Mlp;
        let net = Network::new(cfg, 6).unwrap();
        let (ids, given) = tokens(2);
        let targets: Vec<usize> = (0..162).map(|i| i % 9).collect();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.forward(&mut tape, Input::Tokens(&ids), Some(&given), None, &mut rng).unwrap();
        let loss = tape.cross_entropy(&out.logits, &targets).unwrap();
        let g = tape.backward(&loss).unwrap();
        for id in net.params.ids() {
            let grad = g.param(id).unwrap_or_else(|| panic!("no gradient for {}", net.params.name(id)));
            assert!(grad.data().iter().any(|v| *v != 0.0), "zero gradient for {}", net.params.name(id));
        }
    }

    #[test]
    fn dense_network_with_features() {
        let cfg = NetworkConfig {
            encoder: EncoderConfig::Linear { features: 3 },
            tokens: 2,
            channels: 8,
            n: 4,
            coupling: CouplingConfig::Dense { symmetric: true },
            blocks: 1,
            steps: 4,
            gamma: 0.5,
            omega: false,
            readout: ReadoutKind::Scalar,
            readout_bias: false,
            g: GKind::Linear,
            init: InitMode::Learned,
            classes: 2,
            norm_groups: 4,
        };
        let net = Network::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([5, 2, 3], &mut rng);
        let mut tape = Tape::no_grad();
        let out = net.forward(&mut tape, Input::Features(&x), None, None, &mut rng).unwrap();
        assert_eq!(out.logits.shape(), &[10, 2]);
    }
}
