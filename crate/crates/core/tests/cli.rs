use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use augsearch::policy::{deserialize_policy, serialize_policy, DepthMode, EvalSettings, MagnitudeDist, PolicyParams};

const TINY: &[&str] = &["--subset", "200", "--epochs", "2", "--batch-size", "8", "--max-depth", "2"];

fn augsearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augsearch")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn search(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let out = dir.join(format!("{name}.json"));
    let metrics = dir.join(format!("{name}.csv"));
    let mut args = vec!["search", "--out", out.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    augsearch(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn search_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&search(dir.path(), "a", &["--seed", "3"])), 0);
    assert_eq!(code(&search(dir.path(), "b", &["--seed", "3", "--workers", "2"])), 0);
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}

#[test]
fn frozen_magnitudes_keep_their_initial_values() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&search(dir.path(), "f", &["--freeze", "mu"])), 0);
    let (p, _) = deserialize_policy(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    let init = PolicyParams::init(2, MagnitudeDist::Uniform, DepthMode::Categorical).unwrap();
    assert_eq!(p.mu_low, init.mu_low);
    assert_eq!(p.mu_high, init.mu_high);
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 1\nbatch_size = 8\nseed = 5\n").unwrap();
    let out = dir.path().join("c.json");
    let metrics = dir.path().join("c.csv");
    let args = [
        "search", "--config", cfg.to_str().unwrap(), "--subset", "200", "--max-depth", "2", "--out",
        out.to_str().unwrap(), "--metrics", metrics.to_str().unwrap(),
    ];
    assert_eq!(code(&augsearch(&args)), 0);
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2);
    // command-line flags win over the file
    let mut over = args.to_vec();
    over.extend(["--epochs", "2"]);
    assert_eq!(code(&augsearch(&over)), 0);
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 3);

    fs::write(&cfg, "epochs 1\n").unwrap();
    assert_eq!(code(&augsearch(&args)), 2);
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&augsearch(&["search", "--no-such-flag"])), 2);
    assert_eq!(code(&augsearch(&["search", "--epochs", "0"])), 2);
    assert_eq!(code(&augsearch(&["inspect", "/nonexistent/policy.json"])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"num_types\": 14}").unwrap();
    assert_eq!(code(&augsearch(&["inspect", bad.to_str().unwrap()])), 2);
    let corrupt = dir.path().join("data.bin");
    fs::write(&corrupt, [0u8; 100]).unwrap();
    let out = dir.path().join("p.json");
    let o = augsearch(&["search", "--dataset", corrupt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
    assert!(!out.exists());
    assert_eq!(code(&augsearch(&["--help"])), 0);
}

#[test]
fn inspect_shows_the_uniform_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.json");
    let p = PolicyParams::init(3, MagnitudeDist::Uniform, DepthMode::Categorical).unwrap();
    let eval = EvalSettings { temperature_eval: 0.1, sinkhorn_iters: 20 };
    fs::write(&path, serialize_policy(&p, eval).unwrap()).unwrap();
    let o = augsearch(&["inspect", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("depth 0: 0.250000"), "{text}");
    assert!(text.contains("layer 1: ShearX 0.071429"), "{text}");
    assert_eq!(text.matches("0.071429").count(), 9);
}

#[test]
fn eval_writes_per_seed_rows_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("p.json");
    let p = PolicyParams::init(2, MagnitudeDist::Uniform, DepthMode::Categorical).unwrap();
    fs::write(&policy, serialize_policy(&p, EvalSettings { temperature_eval: 0.1, sinkhorn_iters: 20 }).unwrap()).unwrap();
    let out = dir.path().join("eval.csv");
    let o = augsearch(&[
        "eval", "--policy", policy.to_str().unwrap(), "--subset", "200", "--epochs", "1", "--batch-size", "16",
        "--seeds", "0,1", "--baseline", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "run,seed,accuracy,mean,ci95_half_width");
    assert_eq!(lines.len(), 7);
    assert!(lines[3].starts_with("policy,all,,"));
    assert!(lines[6].starts_with("baseline,all,,"));
}

#[test]
fn repetition_rate_ablation_writes_both_samplers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep.csv");
    let o = augsearch(&["ablate", "repetition-rate", "--samples", "200", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("sinkhorn,") || l.starts_with("independent,")));
}

#[test]
fn config_lines_and_intervals() {
    use augsearch::cli::{mean_ci95, parse_config_file};
    let kv = parse_config_file("# c\n\n--batch_size = 8\nfreeze=mu\n").unwrap();
    assert_eq!(kv, vec![("batch-size".to_string(), "8".to_string()), ("freeze".to_string(), "mu".to_string())]);
    assert!(parse_config_file("config = x").is_err());
    let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    // t quantile 0.975 with 2 degrees of freedom is 4.302653
    assert!((h.unwrap() - 4.302_652_73 / 3f64.sqrt()).abs() < 1e-6);
    assert_eq!(mean_ci95(&[0.5]), (0.5, None));
}
