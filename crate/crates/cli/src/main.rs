//! `akorn`: lattice simulation, Sudoku training and evaluation, and the
//! Lyapunov verification harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use akorn::checkpoint;
use akorn::lyapunov::{lyapunov_check, LyapunovCase, LyapunovConfig};
use akorn::network::{CouplingConfig, Network, NetworkConfig};
use akorn::sudoku::{evaluate, generate_boards, load_boards, save_boards, sudoku_loss, Board, EvalConfig, EvalReport};
use akorn::train::{train, write_loss_csv, TrainConfig};
use akorn::wave::{self, KernelSpec, LatticeConfig, MaskSpec};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "akorn", version, about = "Artificial Kuramoto oscillatory neurons")]
struct Cli {
    /// File of `key = value` defaults (optionally under `[subcommand]` tables); flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oscillator lattice and write frames plus an energy/coherence trace.
    Simulate(SimulateArgs),
    /// Train the Sudoku network and write a checkpoint and loss CSV.
    TrainSudoku(TrainArgs),
    /// Evaluate a checkpoint on a board file, optionally with energy voting.
    EvalSudoku(EvalArgs),
    /// Check energy monotonicity and commutator structure on random systems.
    LyapunovCheck(LyapunovArgs),
    /// Generate boards with their solutions (unique where the given count allows).
    GenBoards(GenArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Lattice side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// `gaussian`, `random`, or a path to K×K whitespace-separated weights.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    /// Odd convolution kernel side.
    #[arg(long, default_value_t = 9)]
    kernel_size: usize,
    /// `fish`, `none`, or a path to a PGM bitmap.
    #[arg(long, default_value = "fish")]
    mask: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    /// Natural-frequency rotation rate.
    #[arg(long, default_value_t = 0.0)]
    omega: f64,
    /// Oscillator dimension.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Write a frame every this many steps (and after the last).
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long, default_value = "out/simulate")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Boards to generate when `--boards` is not given.
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    /// Train on this board file instead of generating.
    #[arg(long)]
    boards: Option<PathBuf>,
    #[arg(long, default_value_t = 31)]
    min_givens: usize,
    #[arg(long, default_value_t = 42)]
    max_givens: usize,
    /// Features per cell.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Oscillator dimension.
    #[arg(long, default_value_t = 4)]
    n_rot: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Kuramoto steps per forward pass.
    #[arg(long, default_value_t = 16)]
    t_steps: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    /// Global gradient-norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Stop once a step's loss falls below this.
    #[arg(long)]
    target_loss: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sudoku.akrn")]
    out: PathBuf,
    /// Defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Board file; if absent, `--generate` boards are drawn with `--board-seed`.
    #[arg(long)]
    boards: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    generate: usize,
    #[arg(long, default_value_t = 17)]
    min_givens: usize,
    #[arg(long, default_value_t = 25)]
    max_givens: usize,
    #[arg(long, default_value_t = 1)]
    board_seed: u64,
    /// Restarts per board; the lowest-energy candidate wins.
    #[arg(long, default_value_t = 1)]
    k_votes: usize,
    /// Kuramoto steps at evaluation; a comma list reports a curve.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    t_eval: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Boards per forward batch.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LyapunovArgs {
    /// `a` (shared Ω), `b` (Kronecker Ω), or `asym` (control that should fail).
    #[arg(long, default_value = "a")]
    case: String,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    gamma: f64,
    #[arg(long, default_value_t = 8)]
    oscillators: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Largest tolerated per-step energy increase.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 17)]
    min_givens: usize,
    #[arg(long, default_value_t = 25)]
    max_givens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// A failed command and its exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure { code: 2, msg: e.to_string() }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    match parse(argv).and_then(dispatch) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn clap_failure(e: clap::Error) -> Failure {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            std::process::exit(0);
        }
        _ => {
            let _ = e.print();
            Failure {
                code: 1,
                msg: "invalid command line".into(),
            }
        }
    }
}

fn parse(mut argv: Vec<String>) -> Result<Cli, Failure> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv).map_err(clap_failure)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return from_matches(&matches);
    };
    let (sub, sub_matches) = matches.subcommand().expect("subcommand is required");
    argv.extend(config::injected_args(&path, &cmd, sub, sub_matches).map_err(usage)?);
    let merged = cmd.try_get_matches_from(&argv).map_err(clap_failure)?;
    from_matches(&merged)
}

fn from_matches(m: &ArgMatches) -> Result<Cli, Failure> {
    Cli::from_arg_matches(m).map_err(clap_failure)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::TrainSudoku(a) => train_sudoku(a),
        Command::EvalSudoku(a) => eval_sudoku(a),
        Command::LyapunovCheck(a) => lyapunov(a),
        Command::GenBoards(a) => gen_boards(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let kernel = match a.kernel.as_str() {
        "gaussian" => KernelSpec::Gaussian { sigma: a.sigma },
        "random" => KernelSpec::Random { seed: a.seed },
        path => KernelSpec::File { path: path.into() },
    };
    let mask = match a.mask.as_str() {
        "fish" => MaskSpec::Fish,
        "none" => MaskSpec::None,
        path => MaskSpec::File { path: path.into() },
    };
    let cfg = LatticeConfig {
        height: a.size,
        width: a.size,
        n: a.n,
        kernel,
        kernel_size: a.kernel_size,
        mask,
        gamma: a.gamma,
        omega: a.omega,
        steps: a.steps,
        frame_stride: a.stride,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = wave::simulate(&cfg, a.seed).map_err(runtime)?;
    wave::write_outputs(&out, &a.out_dir).map_err(runtime)?;
    let (e0, e1) = (out.trace.energy[0], *out.trace.energy.last().expect("trace has T+1 rows"));
    println!("frames: {} written to {}", out.frames.len(), a.out_dir.display());
    println!("initial energy: {e0:.6}");
    println!("final energy: {e1:.6}");
    println!("final coherence: {:.6}", out.trace.coherence.last().copied().unwrap_or(0.0));
    if let Some((mean, max)) = out.sim.foreground_alignment() {
        println!("foreground angle to stimulus: mean {mean:.4}, max {max:.4}");
    }
    Ok(())
}

fn read_boards(path: &Path) -> Result<Vec<Board>, Failure> {
    load_boards(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn train_sudoku(a: TrainArgs) -> Result<(), Failure> {
    let boards = match &a.boards {
        Some(p) => read_boards(p)?,
        None => generate_boards(a.n_train, a.min_givens, a.max_givens, a.seed).map_err(|e| usage(e.to_string()))?,
    };
    let mut net_cfg = NetworkConfig::sudoku(a.channels, a.n_rot, a.t_steps);
    net_cfg.coupling = CouplingConfig::Attn {
        heads: a.heads,
        pos_embedding: true,
    };
    let mut net = Network::new(net_cfg, a.seed).map_err(|e| usage(e.to_string()))?;
    let cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        grad_clip: a.grad_clip,
        target_loss: a.target_loss,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let per_epoch = boards.len().div_ceil(a.batch);
    let result = train(
        &mut net,
        boards.len(),
        &cfg,
        |tape, net, idx, rng| sudoku_loss(tape, net, &boards, idx, rng),
        |step, loss| {
            if step % per_epoch.max(1) == 0 {
                println!("epoch {:>3}  step {step:>6}  loss {loss:.5}", step / per_epoch.max(1));
            }
        },
    );
    let (report, failure) = match result {
        Ok(r) => (r, None),
        Err(f) => (f.report.clone(), Some(f)),
    };
    let steps = report.step_losses.len() as u64;
    // Written in both cases: on failure the net holds the last finite parameters.
    checkpoint::save(&a.out, &net, a.seed, steps).map_err(runtime)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    write_loss_csv(&csv, &report.step_losses).map_err(runtime)?;
    println!("checkpoint: {}  ({steps} steps)", a.out.display());
    println!("loss curve: {}", csv.display());
    match failure {
        Some(f) => Err(runtime(format!("{f}; partial checkpoint kept at {}", a.out.display()))),
        None => {
            if let Some(l) = report.step_losses.last() {
                println!("final step loss: {l:.6}");
            }
            Ok(())
        }
    }
}

fn eval_sudoku(a: EvalArgs) -> Result<(), Failure> {
    if a.t_eval.is_empty() || a.t_eval.contains(&0) {
        return Err(usage("--t-eval values must be positive"));
    }
    if a.k_votes == 0 || a.threads == 0 || a.batch == 0 {
        return Err(usage("--k-votes, --threads and --batch must be positive"));
    }
    let (net, meta) = checkpoint::load(&a.ckpt).map_err(|e| runtime(format!("{}: {e}", a.ckpt.display())))?;
    let boards = match &a.boards {
        Some(p) => read_boards(p)?,
        None => generate_boards(a.generate, a.min_givens, a.max_givens, a.board_seed).map_err(|e| usage(e.to_string()))?,
    };
    println!("checkpoint {} (step {}), {} boards, K = {}", a.ckpt.display(), meta.step, boards.len(), a.k_votes);
    let mut reports: Vec<EvalReport> = Vec::with_capacity(a.t_eval.len());
    for &t in &a.t_eval {
        let cfg = EvalConfig {
            k: a.k_votes,
            t_eval: t,
            seed: a.seed,
            threads: a.threads,
            batch: a.batch,
        };
        let (rep, _) = evaluate(&net, &boards, &cfg).map_err(runtime)?;
        println!(
            "T_eval {t:>4}: cell {:.4}  blank cell {:.4}  board {:.4}  single {:.4}  majority {:.4}  violations {:.3}",
            rep.cell_acc, rep.blank_cell_acc, rep.board_acc, rep.single_board_acc, rep.majority_board_acc, rep.violations
        );
        reports.push(rep);
    }
    if let Some(path) = &a.json_out {
        let json = match reports.as_slice() {
            [one] => serde_json::to_value(one),
            many => serde_json::to_value(many).map(|curve| {
                serde_json::json!({ "schema": CURVE_SCHEMA, "curve": curve })
            }),
        }
        .map_err(runtime)?;
        let text = serde_json::to_string_pretty(&json).map_err(runtime)?;
        std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Schema tag of the multi-`T_eval` report.
const CURVE_SCHEMA: &str = "akorn.sudoku-eval-curve/1";

fn lyapunov(a: LyapunovArgs) -> Result<(), Failure> {
    let case: LyapunovCase = a.case.parse().map_err(|e: akorn::Error| usage(e.to_string()))?;
    let cfg = LyapunovConfig {
        case,
        oscillators: a.oscillators,
        n: a.n,
        gamma: a.gamma,
        steps: a.steps,
        seeds: a.seeds,
        seed: a.seed,
        tol: a.tol,
        ..LyapunovConfig::default()
    };
    let r = lyapunov_check(&cfg).map_err(runtime)?;
    println!("case: {}", a.case);
    println!("max per-step energy increase: {:e}", r.max_increase);
    println!("commutator norm ||JΩ - ΩJ||_F: {:?}", r.commutator_norm);
    println!("max ||Ω c||: {:e}", r.omega_c_norm);
    println!("mean energy drop: {:.6}", r.mean_energy_drop);
    let structural = case != LyapunovCase::B || r.commutator_norm == 0.0;
    if r.monotone && structural {
        println!("within tolerance");
        Ok(())
    } else {
        Err(runtime(format!(
            "energy rose by {:e} (tolerance {:e}) or the commutator is nonzero",
            r.max_increase, a.tol
        )))
    }
}

fn gen_boards(a: GenArgs) -> Result<(), Failure> {
    let boards = generate_boards(a.n, a.min_givens, a.max_givens, a.seed).map_err(|e| usage(e.to_string()))?;
    save_boards(&a.out, &boards).map_err(runtime)?;
    println!("{} boards written to {}", boards.len(), a.out.display());
    Ok(())
}
