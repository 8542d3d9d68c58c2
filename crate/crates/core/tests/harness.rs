use std::path::PathBuf;

use kpz_core::harness::*;
use kpz_core::KpzError;

fn manifest(command: Command, text: &str) -> RunManifest {
    RunManifest::new(command, &FlatConfig::parse(text).unwrap(), None, PathBuf::from("unused")).unwrap()
}

#[test]
fn empty_or_unknown_suite_is_a_usage_error() {
    for text in ["suite=\n", "", "suite=everything\n"] {
        let err = execute(&manifest(Command::Verify, text), 1).unwrap_err();
        assert!(matches!(err, KpzError::Usage(_)), "{text:?}: {err}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let cfg = FlatConfig::parse("seed=5\nrho=0.4\n").unwrap();
    let a = RunManifest::new(Command::Simulate, &cfg, None, PathBuf::new()).unwrap();
    let b = RunManifest::new(Command::Simulate, &cfg, Some(9), PathBuf::new()).unwrap();
    assert_eq!((a.seed, b.seed), (5, 9));
    assert_ne!(a.content_hash(), b.content_hash());
    assert!(!a.parameters.contains_key("seed"));
}

#[test]
fn duplicate_keys_rejected() {
    assert!(FlatConfig::parse("rho=0.4\nrho=0.5\n").is_err());
    assert!(FlatConfig::parse("no equals sign\n").is_err());
}

#[test]
fn simulate_tables_and_records() {
    let m = manifest(Command::Simulate, "rho=0.5\nt_max=12\nn_runs=150\nseed=3\nw_list=0.3\n");
    let out = execute(&m, 1).unwrap();
    let names: Vec<&str> = out.tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["two_point", "two_point_rules", "empirical_fw", "height_moments"]);
    let text = out.tables[0].render(&m);
    let hash_line = format!("# inputs_sha256={}", m.content_hash());
    assert!(text.lines().any(|l| l == hash_line));
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "j,S_hat,stderr,S_laplacian,stderr_laplacian");
    let row = text.lines().filter(|l| !l.starts_with('#')).nth(1).unwrap();
    let real = row.split(',').nth(1).unwrap();
    let mantissa = real.trim_start_matches('-').split('e').next().unwrap();
    assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 15, "{real}");
    let records = out.run_records.unwrap();
    let ens = kpz_core::tasep_sim::read_run_records(records.as_slice()).unwrap();
    assert_eq!(ens.runs.len(), 150);
}

#[test]
fn rerun_is_byte_identical_across_workers() {
    let m = manifest(Command::Simulate, "rho=0.4\nt_max=15\nn_runs=200\nseed=11\n");
    let a = execute(&m, 1).unwrap();
    let b = execute(&m, 3).unwrap();
    for (x, y) in a.tables.iter().zip(&b.tables) {
        assert_eq!(x.render(&m), y.render(&m));
    }
    assert_eq!(a.run_records, b.run_records);
}

#[test]
fn outputs_written_with_manifest() {
    let dir = std::env::temp_dir().join(format!("kpz-harness-{}", std::process::id()));
    let mut m = manifest(Command::FiniteDist, "rho=0.5\nt=50\nw_list=0.4\ns_lo=-1\ns_hi=1\ns_step=0.5\n");
    m.output_dir = dir.clone();
    let out = execute(&m, 1).unwrap();
    let paths = write_outputs(&m, &out).unwrap();
    assert_eq!(paths, vec![dir.join("finite_dist.csv")]);
    let text = std::fs::read_to_string(&paths[0]).unwrap();
    assert!(text.contains("rho,t,w,s,F,g1,g2,g3,G0,Fw_cdf,trace"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 6);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn identities_report_names_failures() {
    let m = manifest(Command::Verify, "suite=identities\nrho=0.5\nt=50\nn_frames=20\n");
    let report = execute(&m, 1).unwrap().report.unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    let checks = json["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    for c in checks {
        for key in ["name", "measured", "tolerance", "pass"] {
            assert!(c.get(key).is_some(), "{key}");
        }
    }
    let failing = report.failing();
    assert_eq!(report.pass, failing.is_empty());
    for name in ["g1_identity", "l_kernel_identity", "widom_chain_excess", "trace_formulas_relative"] {
        assert!(!failing.contains(&name), "{name} failed");
    }
}

#[test]
fn scaling_columns_finite() {
    let m = manifest(
        Command::Scaling,
        "rho=0.5\nt_max=20\nn_runs=200\nseed=1\nw_lo=-1.5\nw_hi=1.5\nw_step=1.5\nh=0.3\n",
    );
    let tables = execute(&m, 1).unwrap().tables;
    let scaling = &tables[0];
    assert_eq!(scaling.rows.len(), 3);
    for col in ["rescaled_S", "limit"] {
        assert!(scaling.column(col).unwrap().iter().all(|v| v.is_finite()), "{col}");
    }
    let limit = scaling.column("limit").unwrap();
    assert_eq!(limit[0], limit[2]);
    let wp = &tables[1];
    assert!(wp.column("lhs").unwrap()[0].is_finite());
    assert!(wp.column("limit").unwrap()[0] > 0.0);
}
