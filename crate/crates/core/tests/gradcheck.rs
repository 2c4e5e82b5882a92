mod common;

use common::*;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, case) in PRIMITIVES {
        for seed in 0..GRADCHECK_INSTANCES {
            let err = case(&mut rng(seed));
            assert!(err <= FD_RTOL, "{name} seed {seed}: relative error {err:.3e}");
        }
    }
}

#[test]
fn full_network_matches_central_differences() {
    for seed in 0..GRADCHECK_INSTANCES {
        let err = network_case(seed);
        assert!(err <= FD_RTOL, "network seed {seed}: relative error {err:.3e}");
    }
}
