//! End-to-end CLI flows at desk scale: run artifacts, paired re-evaluation,
//! sweeps, and the output-directory override.

use std::fs;
use std::path::Path;

use endoshift::cli::{cmd_evaluate, cmd_run, cmd_sweep, RunOverrides};
use endoshift::iterate::Method;

const TINY: &str = r#"
method = "all"
n_agents = 2
cp_aware = "ego"
k_cal = 10
k_tune = 10
tune_budget = 40
bcp_budget = 30
max_iterations = 2
test_episodes = 6
root_seed = 5
save_episodes = 1
out_dir = "unused"
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_artifacts_and_evaluate_pairs_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let summary = cmd_run(
        &config,
        &RunOverrides {
            out_dir: Some(out.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(summary.methods.len(), 4);

    for method in ["ncp", "bcp", "icp", "iscp"] {
        for file in [
            "iterations.csv",
            "misdetection_per_step.csv",
            "q_over_steps.csv",
            "shift.csv",
            "metrics.csv",
            "predictor.json",
            "q_final_agent0.csv",
            "q_final_agent1.csv",
            "test_fingerprints.txt",
            "episode_test_0.jsonl",
        ] {
            assert!(
                out.join(method).join(file).exists(),
                "{method}/{file} missing"
            );
        }
    }
    assert!(out.join("manifest.json").exists());
    assert!(out.join("summary.csv").exists());
    // Calibrating methods persist per-round score matrices for audit.
    assert!(out.join("icp").join("scores_r0_agent0.csv").exists());

    // The uncalibrated baseline reports no misdetection (empty CSV cell).
    let ncp = summary
        .methods
        .iter()
        .find(|m| m.method == Method::Ncp)
        .unwrap();
    assert_eq!(ncp.test_metrics.misdetection_rate, None);
    let ncp_csv = fs::read_to_string(out.join("ncp").join("metrics.csv")).unwrap();
    let row = ncp_csv.lines().nth(1).unwrap();
    assert_eq!(row.split(',').nth(4).unwrap(), "");

    // All methods were tested on identical scenarios.
    let fp = |m: &str| fs::read_to_string(out.join(m).join("test_fingerprints.txt")).unwrap();
    let reference = fp("ncp");
    for m in ["bcp", "icp", "iscp"] {
        assert_eq!(fp(m), reference, "{m} test set diverged");
    }

    // Fresh-seed evaluation is deterministic and shares scenarios across
    // methods.
    let eval_a = cmd_evaluate(&out, 123).unwrap();
    let eval_b = cmd_evaluate(&out, 123).unwrap();
    assert_eq!(eval_a.reports.len(), 4);
    for ((ma, ra), (mb, rb)) in eval_a.reports.iter().zip(&eval_b.reports) {
        assert_eq!(ma, mb);
        assert_eq!(ra, rb);
    }
    assert!(!eval_a.fingerprints.is_empty());
    let ncp_eval = eval_a.reports.iter().find(|(m, _)| *m == Method::Ncp).unwrap();
    assert_eq!(ncp_eval.1.misdetection_rate, None);
    assert!(out.join("icp").join("metrics_eval_seed123.csv").exists());

    // A different seed gives a different test set.
    let eval_c = cmd_evaluate(&out, 124).unwrap();
    assert_ne!(eval_a.fingerprints, eval_c.fingerprints);
}

const SWEEP_BASE: &str = r#"
method = "icp"
n_agents = 2
cp_aware = "ego"
predictor = "constant_velocity"
k_cal = 8
max_iterations = 2
test_episodes = 4
root_seed = 9
save_episodes = 0
out_dir = "unused"
"#;

#[test]
fn single_value_sweep_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SWEEP_BASE);

    let sweep_out = dir.path().join("sweep");
    let sweep = cmd_sweep(
        &config,
        "gamma",
        &[0.8],
        &RunOverrides {
            out_dir: Some(sweep_out.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(sweep.children.len(), 1);
    assert!(sweep_out.join("sweep_comparison.csv").exists());
    let manifest = fs::read_to_string(sweep_out.join("sweep_manifest.json")).unwrap();
    assert!(manifest.contains("gamma_0.8"));

    // The same campaign run directly produces identical artifacts.
    let direct_out = dir.path().join("direct");
    let text = format!("{SWEEP_BASE}\ngamma_icp = 0.8\ngamma_iscp = 0.8\n");
    let direct_config = dir.path().join("direct.cfg");
    fs::write(&direct_config, text).unwrap();
    cmd_run(
        &direct_config,
        &RunOverrides {
            out_dir: Some(direct_out.clone()),
            ..Default::default()
        },
    )
    .unwrap();

    for file in ["iterations.csv", "q_over_steps.csv", "metrics.csv"] {
        let a = fs::read(sweep.children[0].1.join("icp").join(file)).unwrap();
        let b = fs::read(direct_out.join("icp").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between sweep child and direct run");
    }
}

#[test]
fn out_dir_env_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
method = "ncp"
n_agents = 2
predictor = "constant_velocity"
k_cal = 5
test_episodes = 3
root_seed = 2
save_episodes = 0
out_dir = "unused"
"#,
    );
    let env_out = dir.path().join("from_env");
    std::env::set_var(endoshift::cli::OUT_DIR_ENV, &env_out);
    let summary = cmd_run(&config, &RunOverrides::default()).unwrap();
    std::env::remove_var(endoshift::cli::OUT_DIR_ENV);
    assert_eq!(summary.out_dir, env_out);
    assert!(env_out.join("ncp").join("metrics.csv").exists());
}
