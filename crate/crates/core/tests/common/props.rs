//! Property checks shared by the `properties` and `acceptance` targets.

use ama_core::ama_nn::Tensor;
use ama_core::config::{parse_config_str, ExperimentConfig, Profile};
use ama_core::data::ImageBatch;
use ama_core::eval::{auroc, density_series};
use ama_core::latent::{
    sample_atypical, sample_sipple_negatives, simplex_interpolate, AtypicalConfig, Direction, LatentBatch, SimplexConfig,
};
use ama_core::losses::mirrored_critic_loss;
use ama_core::scoring::{a_score, fit_gaussian, GaussianScoreModel};
use ama_core::train::lr_at;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Scores on a coarse grid so that ties are frequent, with both labels present.
fn labeled_scores(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max_len)
        .prop_flat_map(|n| (prop::collection::vec(-20i32..20, n), prop::collection::vec(any::<bool>(), n)))
        .prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| v as f64 / 4.0).collect(), l)
        })
}

fn ks_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Critical value of the one-sample KS statistic at alpha = 0.01.
fn ks_critical(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

pub fn atypical_band_and_radial_uniformity() -> Check {
    let n = 100_000;
    for (d, delta, direction) in [(32, 1.0, Direction::Outward), (128, 0.5, Direction::Inward), (2, 1.0, Direction::Inward)] {
        let cfg = AtypicalConfig { d, delta, direction };
        let (lo, hi) = cfg.band();
        let z = sample_atypical::<f64>(&cfg, n, &mut ChaCha8Rng::seed_from_u64(d as u64)).map_err(|e| e.to_string())?;
        let mut norms = z.norms();
        ensure(norms.iter().all(|&r| r >= lo - 1e-9 && r <= hi + 1e-9), || format!("d={d}: norm outside [{lo}, {hi}]"))?;
        let stat = ks_uniform(&mut norms, lo, hi);
        ensure(stat < ks_critical(n), || format!("d={d}: KS statistic {stat:.5}"))?;
    }
    Ok(())
}

pub fn atypical_directions_are_isotropic() -> Check {
    let (d, n) = (16, 50_000);
    let cfg = AtypicalConfig {
        d,
        delta: 1.0,
        direction: Direction::Outward,
    };
    let z = sample_atypical::<f64>(&cfg, n, &mut ChaCha8Rng::seed_from_u64(7)).map_err(|e| e.to_string())?;
    let norms = z.norms();
    let mut mean = vec![0.0; d];
    for (i, r) in norms.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(z.codes.row(i)) {
            *m += v / r / n as f64;
        }
    }
    // each unit-vector coordinate has variance 1/d; allow five standard errors
    let bound = 5.0 / ((d * n) as f64).sqrt();
    ensure(mean.iter().all(|m| m.abs() < bound), || format!("mean direction {mean:?}"))
}

pub fn sipple_negatives_fill_the_cube() -> Check {
    let z = sample_sipple_negatives::<f64>(8, 1.5, 20_000, &mut ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
    let mut coords = z.codes.data().to_vec();
    ensure(coords.iter().all(|v| v.abs() <= 1.5), || "coordinate outside the cube".into())?;
    let stat = ks_uniform(&mut coords, -1.5, 1.5);
    ensure(stat < ks_critical(coords.len()), || format!("KS statistic {stat:.5}"))
}

pub fn atypical_band_for_any_configuration() -> Check {
    let strategy = (1usize..64, 0.0f64..3.0, any::<bool>(), any::<u64>());
    run(256, strategy, |(d, delta, outward, seed)| {
        let direction = if outward { Direction::Outward } else { Direction::Inward };
        let cfg = AtypicalConfig { d, delta, direction };
        prop_assume!(cfg.validate().is_ok());
        let (lo, hi) = cfg.band();
        let z = sample_atypical::<f64>(&cfg, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for r in z.norms() {
            prop_assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
        }
        Ok(())
    })
}

pub fn simplex_convex_hull() -> Check {
    run(256, (prop::collection::vec(-10.0f64..10.0, 15), any::<u64>()), |(codes, seed)| {
        let batch = LatentBatch::new(Tensor::from_vec(&[3, 5], codes.clone())).unwrap();
        let out = simplex_interpolate(&batch, None, &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (j, &v) in out.iter().enumerate() {
            let col: Vec<f64> = (0..3).map(|r| codes[r * 5 + j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
        Ok(())
    })
}

pub fn simplex_fixed_point() -> Check {
    run(256, (prop::collection::vec(-10.0f64..10.0, 4), any::<u64>()), |(code, seed)| {
        let rows: Vec<f64> = code.iter().cycle().take(12).copied().collect();
        let batch = LatentBatch::new(Tensor::from_vec(&[3, 4], rows)).unwrap();
        let out = simplex_interpolate(&batch, None, &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in out.iter().zip(&code) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn gaussian_fit_analytic() -> Check {
    let g = fit_gaussian(&[1.0, 2.0, 3.0], 1e-12).map_err(|e| e.to_string())?;
    ensure(g.mu == 2.0 && (g.sigma2 - 2.0 / 3.0).abs() < 1e-15, || format!("{g:?}"))?;
    run(256, prop::collection::vec(-100.0f64..100.0, 2..200), |scores| {
        let g = fit_gaussian(&scores, 1e-12).unwrap();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((g.mu - mean).abs() < 1e-9);
        prop_assert!((g.sigma2 - var.max(1e-12)).abs() < 1e-9 * var.max(1.0));
        Ok(())
    })
}

pub fn a_score_peak_and_symmetry() -> Check {
    let unit = GaussianScoreModel {
        mu: 0.0,
        sigma2: 1.0,
        variance_floor: 1e-12,
        n_fit: 2,
    };
    let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    ensure((a_score(0.0, &unit) - peak).abs() < 1e-15, || "unit peak".into())?;
    run(1024, (-50.0f64..50.0, 1e-3f64..100.0, 0.0f64..20.0), |(mu, sigma2, t)| {
        let g = GaussianScoreModel { mu, sigma2, variance_floor: 1e-12, n_fit: 2 };
        let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma2).sqrt();
        prop_assert!((a_score(mu, &g) - peak).abs() <= 1e-12 * peak);
        let (up, down) = (a_score(mu + t, &g), a_score(mu - t, &g));
        prop_assert!((up - down).abs() <= 1e-12 * peak);
        prop_assert!(up <= a_score(mu, &g));
        Ok(())
    })
}

pub fn neg_log_density_monotone() -> Check {
    run(1024, (-5.0f64..5.0, 1e-2f64..10.0, 0.0f64..10.0, 0.0f64..10.0), |(mu, sigma2, a, b)| {
        let g = GaussianScoreModel { mu, sigma2, variance_floor: 1e-12, n_fit: 2 };
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(g.neg_log_density(mu + near) <= g.neg_log_density(mu - far));
        Ok(())
    })
}

pub fn auroc_matches_oracle() -> Check {
    let exact = |(scores, labels): (Vec<f64>, Vec<bool>)| {
        let fast = auroc(&scores, &labels).unwrap();
        prop_assert!((fast - brute_force_auroc(&scores, &labels)).abs() <= 1e-12);
        Ok(())
    };
    run(10_000, labeled_scores(120), exact)?;
    run(100, labeled_scores(1000), exact)
}

pub fn auroc_monotone_invariance() -> Check {
    run(200, (labeled_scores(300), 0.1f64..5.0, -3.0f64..3.0), |((scores, labels), k, c)| {
        let base = auroc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| k * s + c).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + s).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        for t in [affine, cubic, exp] {
            prop_assert!((auroc(&t, &labels).unwrap() - base).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn auroc_label_swap() -> Check {
    run(200, labeled_scores(300), |(scores, labels)| {
        let swapped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&scores, &swapped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        Ok(())
    })
}

pub fn density_masses_sum_to_one() -> Check {
    let series = prop::collection::vec(-1e3f64..1e3, 1..500);
    run(200, (series.clone(), series, 1usize..80), |(a, b, bins)| {
        let s = density_series(&[("a", &a), ("b", &b)], bins).unwrap();
        prop_assert_eq!(&s[0].edges, &s[1].edges);
        for d in &s {
            prop_assert!((d.masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn mirrored_loss_zero_at_identity() -> Check {
    run(100, (prop::collection::vec(-1.0f64..1.0, 12), 0u64..1000), |(pixels, seed)| {
        let nets = super::tiny_networks(seed % 2 == 0, seed);
        let x = ImageBatch::new(Tensor::from_vec(&[3, 2, 2, 1], pixels)).unwrap();
        prop_assert_eq!(mirrored_critic_loss(&nets.critic, &x, &x.clone()).unwrap(), 0.0);
        Ok(())
    })
}

pub fn lr_schedule_pure_and_non_increasing() -> Check {
    run(100, 0usize..100, |epoch| {
        let cfg = ExperimentConfig::default();
        let a = lr_at(epoch, &cfg).unwrap();
        prop_assert_eq!(a, lr_at(epoch, &cfg).unwrap());
        if epoch > 0 {
            prop_assert!(a <= lr_at(epoch - 1, &cfg).unwrap());
        }
        Ok(())
    })
}

pub fn configs_round_trip() -> Check {
    run(200, (any::<u64>(), 0.0f64..10.0, 2usize..200, any::<bool>()), |(seed, lambda_neg, epochs, desk)| {
        let profile = if desk { Profile::Desk } else { Profile::Paper };
        let mut cfg = ExperimentConfig::for_profile(profile);
        cfg.seed = seed;
        cfg.lambda_neg = lambda_neg;
        cfg.epochs = epochs;
        cfg.warmup_epochs = cfg.warmup_epochs.min(epochs - 1);
        cfg.lr_decay_epochs.retain(|&k| k < epochs);
        prop_assert_eq!(parse_config_str(&cfg.to_json(), profile).unwrap(), cfg);
        Ok(())
    })
}

pub const ALL: &[(&str, fn() -> Check)] = &[
    ("atypical band and radial uniformity", atypical_band_and_radial_uniformity),
    ("atypical isotropy", atypical_directions_are_isotropic),
    ("sipple cube", sipple_negatives_fill_the_cube),
    ("atypical band for any configuration", atypical_band_for_any_configuration),
    ("simplex convex hull", simplex_convex_hull),
    ("simplex fixed point", simplex_fixed_point),
    ("gaussian fit", gaussian_fit_analytic),
    ("a_score peak and symmetry", a_score_peak_and_symmetry),
    ("neg log density monotone", neg_log_density_monotone),
    ("auroc pairwise oracle", auroc_matches_oracle),
    ("auroc monotone invariance", auroc_monotone_invariance),
    ("auroc label swap", auroc_label_swap),
    ("density masses", density_masses_sum_to_one),
    ("mirrored loss at identity", mirrored_loss_zero_at_identity),
    ("lr schedule", lr_schedule_pure_and_non_increasing),
    ("config round trip", configs_round_trip),
];
