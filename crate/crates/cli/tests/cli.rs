use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[loss]
offline_accuracy = 1e-6

[driver]
warmup_samples = 40
warmup_levels = 2
max_level = 6
batch = 16

[experiment]
levels = [1, 2, 3]
samples = 60
tols = [0.2, 0.1]

[oracle]
outer = 200
middle = 4
inner = 4
steps_middle = 2
steps_inner = 2
"#;

fn hmlmc(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_hmlmc"))
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn first_line(text: &str) -> &str {
    text.lines().next().unwrap_or("")
}

#[test]
fn levels_headers_and_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = hmlmc(tmp.path(), SMALL, &["levels", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let levels = read(&out, "levels.csv");
    assert_eq!(first_line(&levels), "level,cost,M,V,kurtosis");
    assert_eq!(levels.lines().count(), 4);
    assert_eq!(first_line(&read(&out, "ell0.csv")), "level,R");
    assert_eq!(read(&out, "ell0.csv").lines().count(), 3);
    assert!(read(&out, "status").starts_with("status=complete\n"));
}

#[test]
fn complexity_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = hmlmc(tmp.path(), SMALL, &["complexity", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let c = read(&out, "complexity.csv");
    assert_eq!(first_line(&c), "tol,cost");
    let tols: Vec<&str> = c.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tols, ["0.2", "0.1"]);
    assert_eq!(read(&out, "complexity_normalized.csv").lines().count(), 3);
}

#[test]
fn output_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |cmd: &str, workers: &str| {
        let out = tmp.path().join(format!("{cmd}-{workers}"));
        let r = hmlmc(tmp.path(), SMALL, &[cmd, "--workers", workers, "--seed", "7", "--tol", "0.05", "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        out
    };
    for (cmd, files) in [("levels", &["levels.csv", "ell0.csv"][..]), ("estimate", &["estimate.csv", "estimate_levels.csv"][..])] {
        let (a, b) = (run(cmd, "1"), run(cmd, "3"));
        for f in files {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{cmd}: {f}");
        }
    }
}

#[test]
fn different_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        let out = tmp.path().join(seed);
        let r = hmlmc(tmp.path(), SMALL, &["levels", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(r.status.success());
        read(&out, "levels.csv")
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn empty_level_list_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = SMALL.replace("levels = [1, 2, 3]", "levels = []");
    let r = hmlmc(tmp.path(), &cfg, &["levels", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(read(&out, "levels.csv"), "level,cost,M,V,kurtosis\n");
    assert_eq!(read(&out, "ell0.csv"), "level,R\n");
}

#[test]
fn failure_marks_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = hmlmc(tmp.path(), SMALL, &["levels", "--mode", "oracle", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    let status = read(&out, "status");
    assert!(status.starts_with("status=partial\n"), "{status}");
    assert!(status.contains("error="));
}

#[test]
fn bad_configuration_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert!(!hmlmc(tmp.path(), "[portfolio]\nspot = 1.0\nbogus = 3\n", &["precompute", "--out", out]).status.success());
    assert!(!hmlmc(tmp.path(), "[portfolio]\nstrikes = [1.0, 1.0]\n", &["precompute", "--out", out]).status.success());
    assert!(!hmlmc(tmp.path(), SMALL, &["estimate", "--tol", "-1", "--out", out]).status.success());
    assert!(!hmlmc(tmp.path(), "[credit]\nlgd = 1.5\n", &["estimate", "--out", out]).status.success());
}

#[test]
fn precompute_lists_offline_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = hmlmc(tmp.path(), SMALL, &["precompute", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = read(&out, "precompute.csv");
    assert_eq!(first_line(&text), "name,value");
    for name in ["weight_0", "strike_1", "e_pre_default", "e_chi", "e_delta", "p_window", "cva_initial"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name},"))), "{name} missing");
    }
}

#[test]
fn oracle_mode_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = hmlmc(tmp.path(), SMALL, &["estimate", "--mode", "oracle", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = read(&out, "oracle.csv");
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((0.0..=1.0).contains(&row[0]));
    assert_eq!(row[2], 200.0);
}
