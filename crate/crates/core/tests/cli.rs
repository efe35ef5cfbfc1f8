use nslame::cli::{parse_tau, RunConfig, CACHE_ENV};
use std::path::Path;
use std::process::{Command, Output};

fn nslame(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nslame")).args(args).env_remove(CACHE_ENV).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn cache_files(dir: &Path) -> Vec<std::path::PathBuf> {
    std::fs::read_dir(dir).map(|r| r.map(|e| e.unwrap().path()).collect()).unwrap_or_default()
}

#[test]
fn constants_at_tau_i() {
    let out = nslame(&["constants", "--tau", "1.0i"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let eta = v["eta1_over_pi"][0].as_f64().unwrap();
    assert!((eta - 0.25 / std::f64::consts::PI).abs() < 1e-14);
    assert_eq!(v["eta1_over_pi"][1].as_f64().unwrap(), 0.0);
    assert!(v["energies"].as_array().unwrap().len() > 1);
}

#[test]
fn tau_parsing() {
    for (s, re, im) in [("1.0i", 0.0, 1.0), ("0.5+2i", 0.5, 2.0), ("-0.25+1e-1i", -0.25, 0.1), ("i", 0.0, 1.0)] {
        let t = parse_tau(s).unwrap();
        assert!((t.re - re).abs() < 1e-15 && (t.im - im).abs() < 1e-15, "{s} -> {t}");
    }
    assert!(parse_tau("0.5-1i").unwrap_err().contains("upper half-plane"));
    assert!(parse_tau("abc").is_err());
}

#[test]
fn exit_codes() {
    // Validation failures: 1.
    assert_eq!(nslame(&["constants", "--tau", "0.5-1i"]).status.code(), Some(1));
    assert_eq!(nslame(&["series-solve", "--n", "-1"]).status.code(), Some(1));
    assert_eq!(nslame(&["transform", "--numb", "2"]).status.code(), Some(1));
    assert_eq!(nslame(&["no-such-command"]).status.code(), Some(1));
    // A failing check: 2.
    let out = nslame(&["verify", "series-residual", "--n", "2", "--g", "1", "--kappa", "1", "--L", "0", "--tau", "0.3i", "--no-cache"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)[0]["passed"], false);
    // I/O: 3.
    assert_eq!(nslame(&["constants", "-o", "/nonexistent/dir/x.json"]).status.code(), Some(3));
    assert_eq!(nslame(&["--help"]).status.code(), Some(0));
}

#[test]
fn kernel_identity_check_passes() {
    let out = nslame(&["verify", "kernel-identity", "--mu", "4", "--g", "1.3", "--kappa", "0.6", "--tau", "1.0i"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &json(&out)[0];
    assert_eq!(r["passed"], true);
    assert!(r["max_deviation"].as_f64().unwrap() < 1e-6);
    assert_eq!(r["tolerance"].as_f64().unwrap(), 1e-6);
}

#[test]
fn series_solve_at_order_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = nslame(&["series-solve", "--n", "2", "--g", "1", "--kappa", "1", "--L", "0", "--cache-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let d = v["d"].as_array().unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!((d[0]["ell"].as_u64(), d[0]["m"].as_u64(), d[0]["value"].as_f64()), (Some(0), Some(2), Some(1.0)));
}

#[test]
fn cache_cold_warm_and_tampered() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let args = ["series-solve", "--n", "2", "--g", "1.5", "--kappa", "0.7", "--L", "3", "--cache-dir", d];
    let cold = nslame(&args);
    assert_eq!(cold.status.code(), Some(0));
    let files = cache_files(dir.path());
    assert_eq!(files.len(), 1);
    let stored = std::fs::read(&files[0]).unwrap();
    let warm = nslame(&args);
    assert_eq!(warm.stdout, cold.stdout);
    assert_eq!(std::fs::read(&files[0]).unwrap(), stored);
    // A corrupt entry is recomputed and rewritten, with a warning.
    std::fs::write(&files[0], b"{\"n\": 2, \"truncated").unwrap();
    let repaired = nslame(&args);
    assert_eq!(repaired.status.code(), Some(0));
    assert_eq!(repaired.stdout, cold.stdout);
    assert!(!repaired.stderr.is_empty());
    assert_eq!(std::fs::read(&files[0]).unwrap(), stored);
    // --no-cache neither reads nor writes.
    let other = tempfile::tempdir().unwrap();
    let mut nc: Vec<&str> = args[..args.len() - 1].to_vec();
    nc.push(other.path().to_str().unwrap());
    nc.push("--no-cache");
    assert_eq!(nslame(&nc).stdout, cold.stdout);
    assert!(cache_files(other.path()).is_empty());
}

#[test]
fn cache_env_overrides_flag() {
    let flag = tempfile::tempdir().unwrap();
    let env = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nslame"))
        .args(["series-solve", "--n", "1", "--L", "1", "--cache-dir", flag.path().to_str().unwrap()])
        .env(CACHE_ENV, env.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(cache_files(flag.path()).is_empty());
    assert_eq!(cache_files(env.path()).len(), 1);
}

#[test]
fn dump_config_round_trips() {
    let out = nslame(&["--dump-config", "iterate", "--numb", "2", "--n", "3", "--tau", "0.1+1.2i", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::from_json(text.trim()).unwrap();
    assert_eq!(cfg.to_canonical_json(), text.trim());
    assert_eq!((cfg.numb, cfg.seed, cfg.tau.re), (2, 5, 0.1));
    cfg.validate().unwrap();
    assert!(RunConfig::from_json(&text.replace("\"seed\"", "\"sede\"")).is_err());
}

#[test]
fn outputs_are_deterministic() {
    let a = nslame(&["iterate", "--numb", "2", "--n", "3", "--tau", "1.2i", "--grid", "9", "--format", "csv"]);
    let b = nslame(&["iterate", "--numb", "2", "--n", "3", "--tau", "1.2i", "--grid", "9", "--format", "csv"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("x,psi_re,psi_im\n"));
    assert_eq!(text.lines().count(), 10);
    assert!(!text.contains("-0.0"));
}

#[test]
fn transform_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("run");
    let out = nslame(&["transform", "--n", "2", "--tau", "1.2i", "--grid", "5", "-o", stem.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stem.with_extension("csv").exists() && stem.with_extension("json").exists());
}
