mod common;

use common::{numeric_gradient, random_probe, relative_error};
use halp_core::probe::{init_weights, ProbeArch, ProbeError, ProbeWeights};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Forward pass written out longhand from the stored tensors.
#[allow(clippy::needless_range_loop)]
fn oracle_score(w: &ProbeWeights, x: &[f64]) -> f64 {
    let mut a = x.to_vec();
    for (k, layer) in w.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut s = layer.bias[o];
            for i in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + i] * a[i];
            }
            z[o] = s;
        }
        a = if k < 3 {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z
        };
    }
    1.0 / (1.0 + (-a[0]).exp())
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(2..=6);
        let hidden = [
            rng.random_range(2..=6),
            rng.random_range(2..=5),
            rng.random_range(2..=4),
        ];
        let w = random_probe(&mut rng, dim, hidden);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = rng.random_bool(0.5);
        let analytic: Vec<f64> = w.backward(&w.forward(&x).unwrap(), label).values().collect();
        let numeric = numeric_gradient(&w, &x, label, 1e-6);
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    assert!(worst < 1e-6, "max relative error {worst:e}");
}

#[test]
fn forward_matches_longhand_oracle() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..20 {
        let dim = rng.random_range(1..=40);
        let w = random_probe(&mut rng, dim, [16, 8, 4]);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = w.score(&x).unwrap();
        let o = oracle_score(&w, &x);
        assert!((s - o).abs() < 1e-12, "{s} vs {o}");
    }
}

#[test]
fn default_shape_score_is_a_probability() {
    let w = init_weights(ProbeArch::new(32), 3);
    assert_eq!(w.arch.widths(), [32, 512, 256, 128, 1]);
    let s = w.score(&[0.5; 32]).unwrap();
    assert!(s > 0.0 && s < 1.0);
    assert!(matches!(w.score(&[0.5; 31]), Err(ProbeError::DimensionMismatch { .. })));
    assert!(matches!(
        w.score(&[f64::NAN; 32]),
        Err(ProbeError::NonFiniteInput { .. })
    ));
}

#[test]
fn weights_round_trip_bit_exact() {
    let mut rng = StdRng::seed_from_u64(5);
    let w = random_probe(&mut rng, 9, [7, 5, 3]);
    let bytes = w.to_bytes().unwrap();
    let back = ProbeWeights::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(w.params().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    for cut in [0, 8, 12, bytes.len() - 1] {
        assert!(ProbeWeights::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn same_seed_same_init() {
    let a = init_weights(ProbeArch::new(16), 42).to_bytes().unwrap();
    let b = init_weights(ProbeArch::new(16), 42).to_bytes().unwrap();
    let c = init_weights(ProbeArch::new(16), 43).to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
