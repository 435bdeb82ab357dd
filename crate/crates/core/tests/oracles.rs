//! Library results checked against slow, independent reimplementations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ptqkit::analysis;
use ptqkit::dgc::{self, FeatureReduce, FeatureVector};
use ptqkit::gps::{self, ScalingVector};
use ptqkit::quantcore::{self, Calibration, GroupAxis};
use ptqkit::sim::QuantSimConfig;
use ptqkit::{load_tensor, save_tensor, Tensor};

fn gaussian(rng: &mut ChaCha8Rng, dims: Vec<usize>) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<FeatureVector> {
    (0..n)
        .map(|_| FeatureVector::new((0..d).map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64)).collect()).unwrap())
        .collect()
}

#[test]
fn covariance_matches_two_pass_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (200, 8);
    let feats = random_features(&mut rng, n, d);
    let stats = dgc::fit_set_stats(&feats, 1e-6).unwrap();

    let mut mean = vec![0f64; d];
    for f in &feats {
        for j in 0..d {
            mean[j] += f.0[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for j in 0..d {
        assert!((stats.mean[j] - mean[j]).abs() <= 1e-6);
        for k in 0..d {
            let mut c = 0.0;
            for f in &feats {
                c += (f.0[j] - mean[j]) * (f.0[k] - mean[k]);
            }
            c /= (n - 1) as f64;
            assert!((stats.cov[(j, k)] - c).abs() <= 1e-6, "cov[{j},{k}] {} vs {c}", stats.cov[(j, k)]);
        }
    }
    let trace: f64 = (0..d).map(|j| stats.cov[(j, j)]).sum();
    assert!((stats.lambda - 1e-6 * trace / d as f64).abs() <= 1e-15);
}

#[test]
fn entropy_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feats = random_features(&mut rng, 60, 5);
    let stats = dgc::fit_set_stats(&feats, 1e-3).unwrap();
    let inv = (stats.cov.clone() + DMatrix::identity(5, 5) * stats.lambda).try_inverse().unwrap();
    for f in &feats {
        let c = nalgebra::DVector::from_column_slice(&f.0) - &stats.mean;
        let expected = (c.transpose() * &inv * &c)[(0, 0)].sqrt();
        let got = dgc::mahalanobis_entropy(f, &stats).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
    }
}

#[test]
fn euclidean_case_with_identity_covariance() {
    let stats = dgc::CalibStats::from_parts(vec![0.0, 0.0], DMatrix::identity(2, 2), 0.0).unwrap();
    let rho = dgc::mahalanobis_entropy(&FeatureVector::new(vec![3.0, 4.0]).unwrap(), &stats).unwrap();
    assert!((rho - 5.0).abs() <= 1e-9);
}

#[test]
fn entropy_is_affine_invariant_without_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let feats = random_features(&mut rng, 80, d);
    let a = DMatrix::<f64>::from_fn(d, d, |i, j| if i == j { 2.0 + i as f64 } else { 0.3 * (i as f64 - j as f64) });
    let b: Vec<f64> = (0..d).map(|i| i as f64 - 1.5).collect();
    let mapped: Vec<FeatureVector> = feats
        .iter()
        .map(|f| {
            let y = &a * nalgebra::DVector::from_column_slice(&f.0);
            FeatureVector::new(y.iter().zip(&b).map(|(v, o)| v + o).collect()).unwrap()
        })
        .collect();
    let r1 = dgc::entropies(&feats, &dgc::fit_set_stats(&feats, 0.0).unwrap()).unwrap();
    let r2 = dgc::entropies(&mapped, &dgc::fit_set_stats(&mapped, 0.0).unwrap()).unwrap();
    for (x, y) in r1.iter().zip(&r2) {
        assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
    }
}

#[test]
fn selection_matches_full_sort() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=256);
        let d = rng.random_range(1..=32);
        let fraction = rng.random_range(0.01..=1.0);
        let feats = random_features(&mut rng, n, d);
        let stats = dgc::fit_set_stats(&feats, 1e-6).unwrap();
        let rho = dgc::entropies(&feats, &stats).unwrap();

        let k = ((fraction * n as f64 - 1e-9).ceil() as usize).max(1);
        let mut pairs: Vec<(f64, usize)> = rho.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expected: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        expected.sort_unstable();

        assert_eq!(dgc::select_calibration(&feats, fraction, &stats).unwrap(), expected, "seed {seed}");
    }
}

#[test]
fn features_match_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian(&mut rng, vec![3, 7, 4]);
    let feats = dgc::extract_features(&x, FeatureReduce::MeanStd).unwrap();
    assert_eq!(feats.len(), 3);
    for s in 0..3 {
        for c in 0..4 {
            let col: Vec<f64> = (0..7).map(|t| x.data()[(s * 7 + t) * 4 + c] as f64).collect();
            let mean = col.iter().sum::<f64>() / 7.0;
            let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0).sqrt();
            assert!((feats[s].0[c] - mean).abs() <= 1e-12);
            assert!((feats[s].0[4 + c] - std).abs() <= 1e-12);
        }
    }
}

#[test]
fn percentile_follows_linear_interpolation() {
    let sorted: Vec<f64> = (1..=1000).map(f64::from).collect();
    let hi = quantcore::percentile(&sorted, 99.9);
    assert!(hi > 999.0 && hi < 1000.0);
    assert!((hi - 999.001).abs() < 1e-9);
}

#[test]
fn percentile_clips_a_lone_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v: Vec<f32> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
    v[17] = 1e4;
    let p = Calibration::Percentile { lo: 1.0, hi: 99.0 }.fit(&v, 8).unwrap();
    let mut sorted: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = 0.99 * (sorted.len() - 1) as f64;
    let (i, frac) = (rank.floor() as usize, rank.fract());
    let expected = sorted[i] + frac * (sorted[i + 1] - sorted[i]);
    assert!(p.range_up < 10.0);
    assert!((p.range_up - expected).abs() <= 1e-12);
}

#[test]
fn remark1_matches_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(&mut rng, vec![40, 12]);
    let s = ScalingVector::new((0..12).map(|_| rng.random_range(0.2f32..5.0)).collect()).unwrap();
    let report = analysis::remark1_check(&x, &s).unwrap();

    let ranges: Vec<f64> = (0..12)
        .map(|c| {
            let col = (0..40).map(|r| x.at2(r, c) as f64);
            let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
            hi - lo
        })
        .collect();
    let sv = s.as_slice();
    let (mut pairs, mut mono, mut kept) = (0u64, 0u64, 0u64);
    for i in 0..12 {
        for j in 0..12 {
            if ranges[i] > ranges[j] {
                pairs += 1;
                mono += u64::from(sv[i] > sv[j]);
                kept += u64::from(ranges[i] / sv[i] as f64 > ranges[j] / sv[j] as f64);
            }
        }
    }
    assert_eq!(report.pair_count, pairs);
    assert!((report.frac_s_monotone - mono as f64 / pairs as f64).abs() <= 1e-12);
    assert!((report.frac_range_preserved - kept as f64 / pairs as f64).abs() <= 1e-12);
}

#[test]
fn range_check_matches_column_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = gaussian(&mut rng, vec![10, 30]);
    let mut s: Vec<f32> = (0..10).map(|_| rng.random_range(0.5f32..1.5)).collect();
    s[3] = 20.0;
    let s = ScalingVector::new(s).unwrap();
    let check = analysis::range_after_scaling_check(&w, &s).unwrap();

    let s_max = s.as_slice().iter().cloned().fold(0f32, f32::max) as f64;
    let mut within = 0;
    for j in 0..30 {
        let range = |f: &dyn Fn(usize) -> f64| {
            let (lo, hi) = (0..10).fold((0f64, 0f64), |(l, h), i| (l.min(f(i)), h.max(f(i))));
            hi - lo
        };
        let before = range(&|i| w.at2(i, j) as f64);
        let after = range(&|i| (w.at2(i, j) * s.as_slice()[i]) as f64);
        if (after - before * s_max).abs() <= 0.05 * before * s_max {
            within += 1;
        }
    }
    assert_eq!(check.channels, 30);
    assert!((check.fraction - within as f64 / 30.0).abs() <= 1e-12);
}

#[test]
fn grid_search_agrees_with_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let s1 = 10f64.powf(rng.random_range(-1.0..1.0));
        let a = 10f64.powf(rng.random_range(-2.0..2.0));
        let b = 10f64.powf(rng.random_range(-2.0..2.0));
        let (s2, _) = analysis::oracle_grid_search(s1, a, b, 2000).unwrap();
        let closed = gps::optimal_factor(s1, a, b);
        assert!((s2 - closed).abs() <= 0.01 * closed);
    }
}

#[test]
fn loss_bound_holds_on_random_layers() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, vec![32, 16]);
        let w = gaussian(&mut rng, vec![16, 8]);
        for bits in [4, 6, 8] {
            let l = analysis::loss_decompose(&x, &w, &QuantSimConfig::with_bits(bits, bits)).unwrap();
            assert!(l.e_total <= l.e_x_hat + l.e_w + 1e-6);
            assert!(l.e_x >= 0.0 && l.e_w >= 0.0);
        }
    }
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = gaussian(&mut rng, vec![2, 3, 5]);
    save_tensor(&t, &path).unwrap();
    assert_eq!(load_tensor(&path).unwrap(), t);
}

#[test]
fn per_out_channel_groups_are_columns() {
    let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -0.5]).unwrap();
    let p = quantcore::calibrate_minmax(&w, GroupAxis::PerOutChannel, 8).unwrap();
    assert_eq!(p.len(), 3);
    assert_eq!((p[0].range_down, p[0].range_up), (0.0, 3.0));
    assert_eq!((p[1].range_down, p[1].range_up), (-2.0, 4.0));
    assert_eq!((p[2].range_down, p[2].range_up), (-0.5, 0.5));
}
