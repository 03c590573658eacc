mod common;

use common::gradcheck::{check_family, FAMILIES};

const CASES: usize = 40;

#[test]
fn tape_gradients_match_finite_differences() {
    for family in FAMILIES {
        let r = check_family(family, CASES, 11);
        assert!(r.worst_f32 < 1e-4, "{}: f32 relative error {:.3e}", family.name(), r.worst_f32);
        assert!(r.worst_f64 < 1e-7, "{}: f64 relative error {:.3e}", family.name(), r.worst_f64);
    }
}
