use std::path::Path;
use std::process::{Command, Output};

fn akorn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_akorn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SIM: &[&str] = &["simulate", "--size", "12", "--kernel-size", "5"];

fn ppm_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count()
}

#[test]
fn simulate_single_step_writes_one_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = akorn(&[SMALL_SIM, &["--steps", "1", "--out-dir", s(&out)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ppm_count(&out), 1);
    assert!(out.join("frame_00001.ppm").exists());
    let csv = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(stdout(&o).contains("final energy"));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = akorn(&[SMALL_SIM, &["--steps", "5", "--seed", seed, "--out-dir", s(&out)]].concat());
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("trace.csv")).unwrap()
    };
    assert_eq!(run("a", "4"), run("b", "4"));
    assert_ne!(run("a", "4"), run("c", "5"));
}

#[test]
fn simulate_energy_is_monotone_at_small_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = akorn(&[SMALL_SIM, &["--steps", "40", "--gamma", "0.01", "--out-dir", s(&out)]].concat());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let energy: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(energy.windows(2).all(|w| w[1] - w[0] <= 1e-8));
}

#[test]
fn bad_mask_path_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = akorn(&[SMALL_SIM, &["--mask", "/nonexistent/mask.pgm", "--out-dir", s(dir.path())]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(akorn(&["simulate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(akorn(&["simulate", "--steps", "many"]).status.code(), Some(1));
    assert_eq!(akorn(&[]).status.code(), Some(1));
    assert_eq!(akorn(&["lyapunov-check", "--case", "z"]).status.code(), Some(1));
    assert_eq!(akorn(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_fills_missing_flags_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n\n[simulate]\nsteps = 3\nstride = 1\nkernel_size = 5\nsize = 12\n").unwrap();
    let from_file = dir.path().join("file");
    let o = akorn(&["simulate", "--config", s(&cfg), "--out-dir", s(&from_file)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ppm_count(&from_file), 3);

    let flag_wins = dir.path().join("flag");
    let o = akorn(&["simulate", "--config", s(&cfg), "--steps", "2", "--out-dir", s(&flag_wins)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ppm_count(&flag_wins), 2);

    std::fs::write(&cfg, "[simulate]\nwarp = 9\n").unwrap();
    assert_eq!(akorn(&["simulate", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn lyapunov_cases() {
    let b = akorn(&["lyapunov-check", "--case", "b", "--seeds", "3", "--steps", "50"]);
    assert!(b.status.success(), "{}", stdout(&b));
    assert!(stdout(&b).contains("||JΩ - ΩJ||_F: 0.0"), "{}", stdout(&b));
    let a = akorn(&["lyapunov-check", "--case", "a", "--seeds", "3", "--steps", "50", "--gamma", "0.01"]);
    assert!(a.status.success(), "{}", stdout(&a));
    let asym = akorn(&["lyapunov-check", "--case", "asym", "--seeds", "3", "--steps", "50", "--gamma", "0.5"]);
    assert_eq!(asym.status.code(), Some(2), "{}", stdout(&asym));
}

const TINY_NET: &[&str] = &["--channels", "8", "--n-rot", "4", "--heads", "2", "--t-steps", "2"];

fn train_tiny(dir: &Path, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let boards = dir.join("train.txt");
    let ckpt = dir.join("net.akrn");
    let g = akorn(&["gen-boards", "--n", "4", "--min-givens", "35", "--max-givens", "40", "--out", s(&boards)]);
    assert!(g.status.success(), "{}", stderr(&g));
    let args = [&["train-sudoku", "--boards", s(&boards), "--out", s(&ckpt)], TINY_NET, extra].concat();
    (akorn(&args), ckpt)
}

#[test]
fn untrained_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = akorn(&["eval-sudoku", "--ckpt", s(&ckpt), "--generate", "2", "--t-eval", "2"]);
    assert!(e.status.success(), "{}", stderr(&e));
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "2", "--batch", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(format!("{}.loss.csv", s(&ckpt))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn divergence_keeps_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "3", "--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stderr(&o).contains("partial checkpoint"));
    let e = akorn(&["eval-sudoku", "--ckpt", s(&ckpt), "--generate", "1", "--t-eval", "2"]);
    assert!(e.status.success(), "{}", stderr(&e));
}

#[test]
fn eval_json_is_typed_deterministic_and_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "1", "--batch", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = |name: &str, threads: &str| {
        let json = dir.path().join(name);
        let args = [
            "eval-sudoku", "--ckpt", s(&ckpt), "--generate", "3", "--k-votes", "2", "--t-eval", "2",
            "--threads", threads, "--batch", "2", "--json-out", s(&json),
        ];
        let o = akorn(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(json).unwrap()
    };
    let a = eval("a.json", "1");
    assert_eq!(a, eval("b.json", "1"));
    assert_eq!(a, eval("c.json", "3"));

    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["schema"], "akorn.sudoku-eval/1");
    for key in ["board_acc", "cell_acc", "blank_cell_acc", "violations", "single_board_acc", "majority_board_acc"] {
        assert!(v[key].is_f64(), "{key}: {}", v[key]);
    }
    for key in ["n", "K", "T_eval", "seed"] {
        assert!(v[key].is_u64(), "{key}: {}", v[key]);
    }
    assert_eq!(v["K"], 2);
}

#[test]
fn single_vote_matches_single_sample_and_curve_reports_each_t() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success());
    let json = dir.path().join("curve.json");
    let o = akorn(&[
        "eval-sudoku", "--ckpt", s(&ckpt), "--generate", "2", "--t-eval", "1,2,4", "--json-out", s(&json),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    let curve = v["curve"].as_array().unwrap();
    assert_eq!(curve.iter().map(|r| r["T_eval"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2, 4]);
    for r in curve {
        assert_eq!(r["board_acc"], r["single_board_acc"]);
    }
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (o, ckpt) = train_tiny(dir.path(), &["--epochs", "0"]);
    assert!(o.status.success());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let e = akorn(&["eval-sudoku", "--ckpt", s(&ckpt), "--generate", "1"]);
    assert_eq!(e.status.code(), Some(2));
    assert!(stderr(&e).contains("version 7"), "{}", stderr(&e));
}
