use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdserve::fit::fit_basic;
use sdserve::model::{DecodingMode, LatencyColumn, LoadPoint, SweepDataset, WorkloadConfig};

fn noisy_sweep(c1: f64, c2: f64, noise: f64, seed: u64) -> SweepDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..9)
        .map(|i| {
            let rps = (0.05 + 0.85 * f64::from(i) / 8.0) / c2;
            let l = c1 / (1.0 - rps * c2) * (1.0 + noise * rng.random_range(-1.0..=1.0));
            LoadPoint::new(rps, l, 1000)
        })
        .collect();
    let config = WorkloadConfig {
        model_id: "m".into(),
        hardware_id: "h".into(),
        prefill_tokens: 64,
        decode_tokens: 64,
        mode: DecodingMode::Dense,
    };
    SweepDataset::new(config, points)
}

fn cost(ds: &SweepDataset, c1: f64, c2: f64) -> f64 {
    ds.points
        .iter()
        .map(|p| (p.mean_latency - c1 / (1.0 - p.rps * c2)).powi(2))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_vanishes_at_the_fit(
        c1 in 0.05f64..20.0,
        c2 in 1e-3f64..2.0,
        noise in 0.0f64..0.05,
        seed in any::<u64>(),
    ) {
        let ds = noisy_sweep(c1, c2, noise, seed);
        let fit = fit_basic(&ds, LatencyColumn::Mean).unwrap();
        let p = [fit.params.c1, fit.params.c2];
        let scale: f64 = ds.points.iter().map(|q| q.mean_latency.powi(2)).sum();
        for i in 0..2 {
            let h = 1e-6 * p[i];
            let (mut up, mut down) = (p, p);
            up[i] += h;
            down[i] -= h;
            let g = (cost(&ds, up[0], up[1]) - cost(&ds, down[0], down[1])) / (2.0 * h);
            // Relative sensitivity: d cost / d ln p.
            prop_assert!((g * p[i]).abs() < 1e-6 * scale, "param {i}: {} vs {}", g * p[i], scale);
        }
    }

    #[test]
    fn fits_are_deterministic(
        c1 in 0.05f64..20.0,
        c2 in 1e-3f64..2.0,
        seed in any::<u64>(),
    ) {
        let ds = noisy_sweep(c1, c2, 0.02, seed);
        let a = fit_basic(&ds, LatencyColumn::Mean).unwrap();
        let b = fit_basic(&ds, LatencyColumn::Mean).unwrap();
        prop_assert_eq!(a, b);
    }
}
