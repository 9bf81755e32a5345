//! Helpers shared by unit and integration tests.

use crate::operators::OperatorHandle;
use crate::vec_ops::{dot, norm};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect()
}

/// Random-vector adjoint test: |<Ax, y> - <x, A*y>| <= 1e-10 ||Ax|| ||y||.
pub fn adjoint_test(op: &OperatorHandle, trials: usize, seed: u64) {
    let mut rng = seeded_rng(seed);
    for t in 0..trials {
        let x: Vec<f64> = (0..op.domain_len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..op.range_len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let ax = op.apply(&x).unwrap();
        let aty = op.adjoint(&y).unwrap();
        let lhs = dot(&ax, &y);
        let rhs = dot(&x, &aty);
        let scale = norm(&ax) * norm(&y);
        assert!(
            (lhs - rhs).abs() <= 1e-10 * scale.max(1e-300),
            "adjoint test failed at trial {t}: {lhs} vs {rhs} (scale {scale})"
        );
    }
}
