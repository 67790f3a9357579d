use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use guidance_lab::config::ExperimentConfig;
use guidance_lab::io::CsvTable;
use guidance_lab::target::MixtureSpec;

fn run(kind: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidance-lab"))
        .arg(kind)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sampler.steps = 12;
    c.profile_trajectories = 3;
    c.n_samples = 60;
    c.n_perm = 100;
    c.sweeps.omega = vec![1.0, 7.0];
    c.sweeps.beta = vec![0.1, 1.0, 20.0];
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, c.to_json().unwrap()).unwrap();
    p
}

fn read_table(path: &Path) -> CsvTable {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let mut t = CsvTable::new(lines.next().unwrap().split(','));
    for l in lines {
        t.push(l.split(',').map(String::from).collect());
    }
    t
}

#[test]
fn verify_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("v");
    let o = run("verify", &cfg, &out, &["--threads", "2"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verify_report.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() > 20);
    let gated_fail = checks
        .iter()
        .any(|c| c["gated"].as_bool().unwrap() && !c["passed"].as_bool().unwrap());
    assert_eq!(report["passed"].as_bool().unwrap(), !gated_fail);
    assert_eq!(o.status.success(), !gated_fail);
    let by_name = |n: &str| checks.iter().find(|c| c["name"] == n).unwrap()["passed"].as_bool().unwrap();
    for name in ["guidance.cfg_recovery", "guidance.late_divergence_identity", "guidance.late_divergence_rate", "conservation.rotation"] {
        assert!(by_name(name), "{name}");
    }
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("trace_divergence", &cfg, &a, &["--seed", "11", "--threads", "1"]).status.success());
    assert!(run("trace_divergence", &cfg, &b, &["--seed", "11", "--threads", "3"]).status.success());
    assert!(run("trace_divergence", &cfg, &c, &["--seed", "12"]).status.success());
    let read = |d: &Path| fs::read(d.join("trace_divergence.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn trace_profile_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("t");
    assert!(run("trace_divergence", &cfg, &out, &[]).status.success());
    let t = read_table(&out.join("trace_divergence.csv"));
    assert_eq!(
        t.header,
        ["step", "t", "div_cond", "div_uncond", "div_g_beta_0", "div_g_beta_0.1", "div_g_beta_0.5", "div_g_beta_1"]
    );
    assert_eq!(t.rows.len(), 13);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace_divergence_report.json")).unwrap()).unwrap();
    assert_eq!(report["results"]["labels"]["div_g_beta_1"], "recovers CFG");
}

#[test]
fn equal_targets_give_zero_guidance_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c.targets.conditional = MixtureSpec::isotropic(&[0.5, 0.5], &[vec![1.0, 0.0], vec![-1.0, 0.5]], &[0.3, 0.7]);
    c.targets.unconditional = c.targets.conditional.clone();
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("s");
    assert!(run("sweep_beta", &cfg, &out, &[]).status.success());
    let t = read_table(&out.join("sweep_beta.csv"));
    assert_eq!(t.header, ["beta", "step", "t", "div_g", "div_g_par", "div_g_perp", "div_g_tilde"]);
    assert_eq!(t.rows.len(), 3 * 13);
    for col in ["div_g", "div_g_par", "div_g_perp", "div_g_tilde"] {
        assert!(t.floats(col).unwrap().iter().all(|v| *v == 0.0), "{col}");
    }
    assert!(run("trace_divergence", &cfg, &out, &[]).status.success());
    let t = read_table(&out.join("trace_divergence.csv"));
    for b in ["0", "0.1", "0.5", "1"] {
        assert!(t.floats(&format!("div_g_beta_{b}")).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn sweep_omega_and_sample_compare_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("o");
    assert!(run("sweep_omega", &cfg, &out, &[]).status.success());
    let t = read_table(&out.join("sweep_omega.csv"));
    assert_eq!(t.rows.len(), 4);
    assert!(t.floats("p_value").unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(run("sample_compare", &cfg, &out, &[]).status.success());
    for f in ["samples_oracle.csv", "samples_cfg.csv", "samples_adamag.csv", "sample_compare_report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(read_table(&out.join("samples_cfg.csv")).rows.len(), 60);
}

#[test]
fn malformed_config_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"guidance": {"omega_ref": 2.0, "omega_min": 5.0}}"#).unwrap();
    let o = run("verify", &bad, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("omega_min"));

    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"sampler": {"stepz": 3}}"#).unwrap();
    assert_eq!(run("verify", &typo, &out, &[]).status.code(), Some(2));

    assert_eq!(run("verify", &dir.path().join("missing.json"), &out, &[]).status.code(), Some(2));

    let other = dir.path().join("other.json");
    fs::write(&other, r#"{"kind": "sweep_beta"}"#).unwrap();
    assert_eq!(run("verify", &other, &out, &[]).status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_guidance-lab"))
        .args(["nonsense", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(!out.exists());
}
