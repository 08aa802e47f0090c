use smoothlin_wasm::{analyze, beta_planar, planar_conjugacy};

#[test]
fn analyze_renders_the_gap_without_rs_conditions() {
    let text = analyze("[map]\nbuiltin = \"gap_without_rs\"\n").unwrap();
    assert!(text.contains("gap_condition = pass"), "{text}");
    assert!(text.contains("rs_condition = fail"), "{text}");
}

#[test]
fn planar_exponent_of_the_symmetric_saddle_is_one_half() {
    assert!((beta_planar(0.5, 2.0, 0.0) - 0.5).abs() < 1e-15);
}

#[test]
fn planar_conjugacy_matches_the_quadratic_oracle() {
    let v = planar_conjugacy(0.2, 0.5, 1.0, 0.02, 0.01, 0.015).unwrap();
    assert!((v[0] - v[2]).abs() < 1e-12, "{v:?}");
    assert!((v[1] - 0.015).abs() < 1e-15, "{v:?}");
    assert!(v[3] < 1e-10, "{v:?}");
}
