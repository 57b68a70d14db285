use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankfold::encoder::forward_with_taps;
use rankfold::{collect_stats, synth_calib, synth_weights, ActivationStats, CalibSet, EncoderSpec, Matrix, TapPoint};

fn small_spec() -> EncoderSpec {
    EncoderSpec::new(2, 16, 2, 32, 12)
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Ranks with a 1% eigengap above the numerical-zero floor `1e-9 · λ₁`.
fn gapped_ranks(s: &ActivationStats<f64>) -> Vec<usize> {
    let floor = 1e-9 * s.eigenvalues[0];
    (1..s.dim()).filter(|&k| s.eigenvalues[k - 1] > floor && s.eigenvalues[k - 1] > 1.01 * s.eigenvalues[k]).collect()
}

fn stats_for(spec: &EncoderSpec, calib: &CalibSet<f64>) -> BTreeMap<TapPoint, ActivationStats<f64>> {
    let weights = synth_weights::<f64>(spec, 3).unwrap();
    collect_stats(spec, &weights, calib, &spec.all_taps()).unwrap()
}

#[test]
fn two_dimensional_subspace_gives_two_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let basis = Matrix::from_fn(2, 10, |_, _| rng.random_range(-1.0..1.0));
    let coeffs = Matrix::from_fn(200, 2, |_, _| rng.random_range(-1.0..1.0));
    let offset: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
    let samples = coeffs.matmul(&basis).unwrap().add_row(&offset).unwrap();
    let stats = ActivationStats::from_samples(TapPoint::new(0, rankfold::Site::Fc1), &samples).unwrap();
    let top = stats.eigenvalues[0];
    assert!(stats.eigenvalues[1] > 1e-9 * top);
    assert!(stats.eigenvalues[2..].iter().all(|&v| v < 1e-9 * top));
}

#[test]
fn pooled_scatter_matches_concatenated_activations() {
    let spec = small_spec();
    let weights = synth_weights::<f64>(&spec, 3).unwrap();
    let calib = synth_calib::<f64>(&spec, 9, 5, 0.1, 4).unwrap();
    let taps = spec.all_taps();
    let stats = collect_stats(&spec, &weights, &calib, &taps).unwrap();
    for tap in taps {
        let rows: Vec<Matrix<f64>> = calib
            .clips()
            .iter()
            .map(|c| forward_with_taps(&spec, &weights, c, &[tap]).unwrap().1.remove(&tap).unwrap())
            .collect();
        let y = Matrix::vstack(&rows).unwrap();
        let mean = y.column_means();
        assert!(rel_diff(&mean, &stats[&tap].mean) < 1e-9);
        let centered = y.add_row(&mean.iter().map(|m| -m).collect::<Vec<_>>()).unwrap();
        let scatter = centered.transpose().matmul(&centered).unwrap();
        let s = &stats[&tap];
        let diag: Vec<f64> = s.eigenvalues.clone();
        let rebuilt = s.basis.matmul(&Matrix::diag(&diag)).unwrap().matmul_transposed(&s.basis).unwrap();
        assert!(rebuilt.max_abs_diff(&scatter) <= 1e-9 * scatter.max_abs());
        assert!((s.total_variance() - scatter.trace()).abs() <= 1e-8 * scatter.trace());
        assert_eq!(s.sample_count, 9 * spec.seq_len);
    }
}

#[test]
fn clip_order_does_not_matter() {
    let spec = small_spec();
    let calib = synth_calib::<f64>(&spec, 10, 4, 0.05, 5).unwrap();
    let mut reversed: Vec<Matrix<f64>> = calib.clips().to_vec();
    reversed.reverse();
    reversed.swap(0, 3);
    let a = stats_for(&spec, &calib);
    let b = stats_for(&spec, &CalibSet::new(reversed).unwrap());
    for (tap, sa) in &a {
        let sb = &b[tap];
        assert!(rel_diff(&sa.mean, &sb.mean) < 1e-9, "{tap} mean");
        assert!(rel_diff(&sa.eigenvalues, &sb.eigenvalues) < 1e-9, "{tap} eigenvalues");
    }
}

#[test]
fn duplicated_clips_double_eigenvalues() {
    let spec = small_spec();
    let calib = synth_calib::<f64>(&spec, 5, 4, 0.05, 6).unwrap();
    let doubled: Vec<Matrix<f64>> = calib.clips().iter().chain(calib.clips()).cloned().collect();
    let a = stats_for(&spec, &calib);
    let b = stats_for(&spec, &CalibSet::new(doubled).unwrap());
    for (tap, sa) in &a {
        let sb = &b[tap];
        assert!(rel_diff(&sa.mean, &sb.mean) < 1e-9);
        let twice: Vec<f64> = sa.eigenvalues.iter().map(|v| 2.0 * v).collect();
        assert!(rel_diff(&twice, &sb.eigenvalues) < 1e-9);
        assert!(rel_diff(&sa.normalized_spectrum(usize::MAX), &sb.normalized_spectrum(usize::MAX)) < 1e-9);
        for k in gapped_ranks(sa) {
            assert!(sa.projector(k).unwrap().max_abs_diff(&sb.projector(k).unwrap()) < 1e-7, "{tap} k={k}");
        }
    }
}

#[test]
fn projector_is_stable_across_clip_orders() {
    let spec = small_spec();
    let calib = synth_calib::<f64>(&spec, 8, 6, 0.2, 7).unwrap();
    let mut shuffled = calib.clips().to_vec();
    shuffled.rotate_left(3);
    let a = stats_for(&spec, &calib);
    let b = stats_for(&spec, &CalibSet::new(shuffled).unwrap());
    let mut checked = 0;
    for (tap, sa) in &a {
        for k in gapped_ranks(sa) {
            assert!(sa.projector(k).unwrap().max_abs_diff(&b[tap].projector(k).unwrap()) < 1e-7, "{tap} k={k}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn stats_are_identical_across_thread_counts() {
    let spec = small_spec();
    let calib = synth_calib::<f64>(&spec, 11, 4, 0.1, 8).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| stats_for(&spec, &calib));
    let b = four.install(|| stats_for(&spec, &calib));
    assert_eq!(a, b);
}

#[test]
fn stats_invariants_hold() {
    let spec = small_spec();
    let stats = stats_for(&spec, &synth_calib::<f64>(&spec, 4, 3, 0.1, 2).unwrap());
    for s in stats.values() {
        assert!(s.eigenvalues.iter().all(|&v| v >= 0.0));
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let gram = s.basis.transpose().matmul(&s.basis).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(s.dim())) < 1e-8);
    }
}
