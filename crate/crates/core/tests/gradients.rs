//! Finite-difference checks of composed forward paths.

#[path = "support/gradchecks.rs"]
mod gradchecks;

const TOL: f64 = 1e-4;

#[test]
fn composed_paths_match_finite_differences() {
    for (name, check) in gradchecks::CASES {
        let err = check();
        assert!(err < TOL, "{name}: {err}");
    }
}
