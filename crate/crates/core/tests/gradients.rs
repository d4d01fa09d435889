mod common;

use common::grads::{gradient_cases, COORDS};

#[test]
fn every_differentiable_block_matches_central_differences() {
    let cases = gradient_cases();
    let mut failures = Vec::new();
    for c in &cases {
        assert!(c.coords >= COORDS.min(100), "{} checks only {} coordinates", c.name, c.coords);
        if !(c.worst_relative_error < 1e-4) {
            failures.push(format!("{}: {:.3e}", c.name, c.worst_relative_error));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
