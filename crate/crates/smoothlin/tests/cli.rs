use std::fs;
use std::process::Command as Process;

use smoothlin::cli::{
    run, Command, ConfigError, RunConfig, EXIT_CONDITION, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK,
};

fn binary() -> Process {
    Process::new(env!("CARGO_BIN_EXE_smoothlin"))
}

fn analyze(name: &str) -> smoothlin::cli::Report {
    let dir = tempfile::tempdir().unwrap();
    run(
        &Command::Analyze,
        &RunConfig::builtin(name).unwrap(),
        dir.path(),
        None,
    )
    .unwrap()
    .report
}

#[test]
fn worked_example_builtins_reproduce_the_condition_booleans() {
    let r5 = analyze("dyadic_bands");
    assert_eq!(r5.get("band_condition"), Some("pass"));
    assert_eq!(r5.get("contractive_bands"), Some("3"));
    let r7 = analyze("gap_without_rs");
    assert_eq!(r7.get("band_condition"), Some("pass"));
    assert_eq!(r7.get("gap_condition"), Some("pass"));
    assert_eq!(r7.get("rs_condition"), Some("fail"));
    let r8 = analyze("clustered_gap");
    assert_eq!(r8.get("gap_condition"), Some("pass"));
}

#[test]
fn linear_one_band_builtin_has_exponent_one() {
    let r = analyze("linear1");
    assert_eq!(r.get("beta_overall"), Some("1.0000000000000000e0"));
}

#[test]
fn parse_errors_report_line_and_column() {
    let err = RunConfig::parse("seed = 1\n[map]\ndim = 2\nterms = [[1.0, 0, 1 0]]\n").unwrap_err();
    assert!(
        matches!(
            err,
            ConfigError::Parse {
                line: 4,
                column: 21,
                ..
            }
        ),
        "{err:?}"
    );
    let err =
        RunConfig::parse("[map]\nbuiltin = \"saddle\"\n[grid]\nresolutoin = 3\n").unwrap_err();
    match err {
        ConfigError::Parse { line, message, .. } => {
            assert!(line == 4 && message.contains("resolutoin"), "{message}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_values_name_the_field() {
    let cases = [
        ("[map]\ndim = 2\nterms = [[1.0, 2, 1, 0]]\n", "map.terms[0]"),
        ("[map]\ndim = 2\nterms = [[1.0, 0, 0, 0]]\n", "map.terms[0]"),
        (
            "[map]\nbuiltin = \"saddle\"\n[cutoff]\nr0 = 0.04\nr1 = 0.02\n",
            "cutoff.r1",
        ),
        (
            "[map]\nbuiltin = \"saddle\"\n[lp]\ngamma1 = \"sometimes\"\n",
            "lp.gamma1",
        ),
        (
            "[map]\nbuiltin = \"saddle\"\n[lp]\ngamma1 = 0.7\n",
            "lp.gamma2",
        ),
        ("[map]\nmatrix = [[1.0, 0.0]]\n", "map.matrix"),
        (
            "[map]\nbuiltin = \"saddle\"\n[grid]\npsi_resolution = 2\n",
            "grid.psi_resolution",
        ),
        (
            "[map]\nbuiltin = \"saddle\"\n[spectrum]\nbands = [[2.0, 1.0]]\n",
            "spectrum.bands[0]",
        ),
    ];
    for (text, name) in cases {
        match RunConfig::parse(text) {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, name, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    assert!(matches!(
        RunConfig::builtin("no_such_builtin"),
        Err(ConfigError::UnknownBuiltin(_))
    ));
}

#[test]
fn explicit_sections_override_builtin_defaults() {
    let c =
        RunConfig::parse("seed = 9\n[map]\nbuiltin = \"saddle\"\n[grid]\nreport_radius = 0.005\n")
            .unwrap();
    assert_eq!((c.seed, c.grid.report_radius, c.dim()), (9, 0.005, 2));
    assert_eq!(c.builtin.as_deref(), Some("saddle"));
    assert_eq!(c.cutoff.eta_target, 1.0);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let status = binary()
            .args([
                "linearize",
                "--config",
                "builtin:saddle",
                "--seed",
                "5",
                "--out",
            ])
            .arg(dir.path())
            .output()
            .unwrap()
            .status;
        assert_eq!(status.code(), Some(EXIT_OK));
    }
    for file in ["report.txt", "phi.csv", "chain/manifest.txt"] {
        let (x, y) = (
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
        );
        assert!(!x.is_empty() && x == y, "{file} differs");
    }
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let narrow_gap = write(
        "gap.toml",
        "[map]\nmatrix = [[0.5, 0, 0], [0, 1.5, 0], [0, 0, 4]]\n",
    );
    let bad = write("bad.toml", "[map]\nbogus = 1\n");
    let tiny_eta = write(
        "eta.toml",
        "[map]\nbuiltin = \"saddle\"\n[cutoff]\neta_target = 1e-9\n",
    );
    let out = dir.path().join("out");
    let code = |args: &[&str], config: &std::path::Path| {
        binary()
            .args(args)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(code(&["analyze"], &narrow_gap), Some(EXIT_CONDITION));
    assert!(fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("gap_condition = fail"));
    assert_eq!(code(&["analyze"], &bad), Some(EXIT_CONFIG));
    assert_eq!(code(&["linearize"], &tiny_eta), Some(EXIT_NUMERICAL));
    let missing = binary()
        .args(["verify", "--config", "builtin:saddle", "--chain"])
        .arg(dir.path().join("none"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(EXIT_CONFIG));
    let unknown = binary().args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(EXIT_CONFIG));
    let nonhyperbolic = write("one.toml", "[map]\nmatrix = [[1.0]]\n");
    assert_eq!(code(&["analyze"], &nonhyperbolic), Some(EXIT_CONDITION));
}

#[test]
fn verify_reloads_the_exported_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::builtin("saddle_quadratic").unwrap();
    let lin = run(&Command::Linearize, &config, dir.path(), None).unwrap();
    let ver = run(&Command::Verify { chain: None }, &config, dir.path(), None).unwrap();
    assert_eq!(ver.status, EXIT_OK);
    assert_eq!(
        lin.report.get("conjugacy_residual_max"),
        ver.report.get("conjugacy_residual_max")
    );
    assert_eq!(ver.report.get("holder_lower_bound"), Some("pass"));
}

#[test]
fn foliate_writes_leaf_table_and_convergence_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &Command::Foliate,
        &RunConfig::builtin("saddle").unwrap(),
        dir.path(),
        None,
    )
    .unwrap();
    assert_eq!(out.status, EXIT_OK);
    let b4: f64 = out.report.get("b4_residual").unwrap().parse().unwrap();
    assert!(b4 <= 1e-4);
    let table = fs::read_to_string(dir.path().join("foliation.csv")).unwrap();
    assert!(table.starts_with("x1,x2,y1,h1\n") && table.lines().count() == 1 + 9 * 9 * 9);
    assert!(dir.path().join("convergence.csv").exists());
    let planar = run(
        &Command::Foliate,
        &RunConfig::builtin("planar").unwrap(),
        dir.path(),
        None,
    )
    .unwrap();
    assert_eq!(planar.status, EXIT_CONDITION);
}

#[test]
fn sharpness_needs_its_section() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(
        &Command::Sharpness,
        &RunConfig::builtin("saddle").unwrap(),
        dir.path(),
        None,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}
