use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vqlcmd::cli::{read_samples, EXIT_NUMERIC, EXIT_OTHER, EXIT_USAGE, METRICS_HEADER};
use vqlcmd::config::RunConfig;
use vqlcmd::data::DataConfig;
use vqlcmd::eval::EvalReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vqlcmd"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::for_data("desk", DataConfig::enumerable(), 4).unwrap();
    cfg.model.layers = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.train.batch = 4;
    cfg.train.steps = 3;
    cfg.train.log_every = 1;
    let path = dir.join("tiny.cfg");
    cfg.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--steps", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = vqlcmd::TrainState32::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(state.step, 0);
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert_eq!(log.trim(), METRICS_HEADER);
}

#[test]
fn train_logs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &Path| std::fs::read(p.join("final.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    let log = std::fs::read_to_string(a.join("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("step={} total=", i + 1)), "{l}");
        assert!(l.contains(" collapse_ratio="));
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--steps", "4", "--out", s(&full)])), 0);
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--steps", "2", "--out", s(&part)])), 0);
    let ckpt = part.join("final.ckpt");
    assert_eq!(code(&run(&["train", "--resume", s(&ckpt), "--steps", "4", "--out", s(&part)])), 0);
    let read = |p: &Path| std::fs::read(p.join("final.ckpt")).unwrap();
    assert_eq!(read(&full), read(&part));
    let log = std::fs::read_to_string(part.join("metrics.log")).unwrap();
    assert_eq!(log, std::fs::read_to_string(full.join("metrics.log")).unwrap());
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("run");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    out.join("final.ckpt")
}

#[test]
fn sample_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let dump = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec!["sample", "--ckpt", s(&ckpt), "--num-samples", "10", "--steps", "5", "--out", s(&path)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(path).unwrap()
    };
    let a = dump("a.txt", &["--seed", "3"]);
    let seqs = read_samples(&a).unwrap();
    assert_eq!(seqs.len(), 10);
    assert!(seqs.iter().all(|q| q.len() == 6 && q.iter().all(|&x| x < 4)));
    assert_eq!(a, dump("b.txt", &["--seed", "3"]));
    assert_ne!(a, dump("c.txt", &["--seed", "4"]));
    let d = dump("d.txt", &["--mode", "ddim", "--decode", "argmax", "--ema"]);
    assert_eq!(read_samples(&d).unwrap().len(), 10);

    let o = run(&["sample", "--ckpt", s(&ckpt), "--num-samples", "2", "--steps", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_samples(&String::from_utf8(o.stdout).unwrap()).unwrap().len(), 2);
}

#[test]
fn eval_writes_a_parsable_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("report.txt");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--num-samples", "50", "--steps", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = EvalReport::from_text(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report.num_samples, 50);
    assert_eq!(report.tv_marginal.len(), 6);
    assert!(report.tv_joint.is_some());
    assert!(report.tv_marginal.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(report.nll_bound.is_finite());
}

#[test]
fn ablate_reports_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablate.txt");
    let o = run(&[
        "ablate", "--preset", "collapse", "--config", s(&cfg), "--steps", "2", "--seeds", "0,1",
        "--num-samples", "20", "--sample-steps", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# vqlcmd-ablate 1 preset=collapse");
    let rows: Vec<&&str> = lines.iter().filter(|l| l.starts_with("run=")).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("run=full seed=0 ") && rows[3].starts_with("run=no-cm seed=1 "));
    assert_eq!(lines.iter().filter(|l| l.starts_with("summary ")).count(), 2);
}

#[test]
fn usage_errors_exit_with_usage_code() {
    assert_eq!(code(&run(&[])), EXIT_USAGE);
    assert_eq!(code(&run(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(code(&run(&["train"])), EXIT_USAGE);
    assert_eq!(code(&run(&["sample", "--ckpt", "x", "--mode", "sideways"])), EXIT_USAGE);
    assert_eq!(code(&run(&["ablate", "--preset", "everything"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[model]\nlayers = 1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", s(&bad)])), EXIT_USAGE);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&run(&["sample", "--ckpt", s(&missing)])), EXIT_OTHER);
    std::fs::write(&missing, b"not a checkpoint").unwrap();
    let o = run(&["eval", "--ckpt", s(&missing)]);
    assert_eq!(code(&o), EXIT_OTHER);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a checkpoint of this version"));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.train.lr = 1e30;
    cfg.train.steps = 20;
    cfg.save(&cfg_path).unwrap();
    let o = run(&["train", "--config", s(&cfg_path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&o.stderr));
}
