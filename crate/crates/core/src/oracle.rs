//! Independent reference computations.
//!
//! Nothing here reuses the engine's or the predictor's numeric code: the
//! log-density, η, and the linear round-trip recurrence are re-derived from
//! the raw schedule coefficients and mixture parameters. Agreement with the
//! main code path is therefore evidence rather than a tautology.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{self, BranchSource, StrategyConfig};
use crate::error::{Error, Result};
use crate::latent::{GridShape, Latent};
use crate::predictor::{Component, GaussianMixture, MeanPattern, PredictorConfig};
use crate::rng;
use crate::schedule::{build_linear_schedule, NoiseSchedule};
use crate::transform::{PoolPreset, TransformSpec};

pub const SCORE_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub discrepancy: f64,
    pub threshold: f64,
    pub samples: usize,
    pub seed: u64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.discrepancy >= 0.0 && self.discrepancy <= self.threshold
    }
}

/// Log-density of an isotropic mixture, evaluated term by term.
fn reference_log_density(means: &[Vec<f64>], sigmas: &[f64], weights: &[f64], x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let terms: Vec<f64> = means
        .iter()
        .zip(sigmas)
        .zip(weights)
        .map(|((mu, s), w)| {
            let mut q = 0.0;
            for (xi, mi) in x.iter().zip(mu) {
                q += (xi - mi) * (xi - mi);
            }
            w.ln() - d * (s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()) - q / (2.0 * s * s)
        })
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Central-difference check of the marginal score at random `(x, t)`.
///
/// Each sample draws `t` uniformly from `1..=T` and `x = √ᾱ x_0 + √(1-ᾱ) z`
/// with `x_0` from the mixture. The discrepancy is
/// `max ‖score - fd‖∞ / (1 + ‖score‖∞)` over samples.
pub fn fd_score_oracle(
    mix: &GaussianMixture,
    sched: &NoiseSchedule,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<OracleReport> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let alpha_bars = sched.alpha_bars();
    let steps = alpha_bars.len() - 1;
    let mut worst = 0.0_f64;
    for k in 0..samples {
        let mut r = rng::substream(rng::derive_seed(seed, rng::purpose::ORACLE, 0), k as u64);
        let t = r.random_range(1..=steps);
        let a = alpha_bars[t];
        let x0 = mix.sample(&mut r);
        let x = x0.map(|v| {
            let z: f64 = r.sample(StandardNormal);
            a.sqrt() * v + (1.0 - a).sqrt() * z
        });

        let means: Vec<Vec<f64>> = mix
            .components()
            .iter()
            .map(|c| c.mean.as_slice().iter().map(|m| a.sqrt() * m).collect())
            .collect();
        let sigmas: Vec<f64> = mix
            .components()
            .iter()
            .map(|c| (a * c.sigma * c.sigma + 1.0 - a).sqrt())
            .collect();
        let weights: Vec<f64> = mix.components().iter().map(|c| c.weight).collect();

        let score = mix.marginal(a)?.score(&x)?;
        let mut probe = x.as_slice().to_vec();
        let mut max_diff = 0.0_f64;
        for i in 0..probe.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = reference_log_density(&means, &sigmas, &weights, &probe);
            probe[i] = orig - h;
            let down = reference_log_density(&means, &sigmas, &weights, &probe);
            probe[i] = orig;
            let fd = (up - down) / (2.0 * h);
            max_diff = max_diff.max((score.as_slice()[i] - fd).abs());
        }
        worst = worst.max(max_diff / (1.0 + score.max_abs()));
    }
    Ok(OracleReport {
        name: "fd-score".into(),
        discrepancy: worst,
        threshold: SCORE_THRESHOLD,
        samples,
        seed,
    })
}

/// Exact reconstruction of `x0` after a naive round trip under the
/// standard-normal predictor `ε(x, t) = √(1-ᾱ_t) x`.
///
/// Each inversion step multiplies by
/// `a_t = √ᾱ_{t+1} (1/√ᾱ_t + η_t √(1-ᾱ_{t+1}))` and each reconstruction step by
/// `b_t = √ᾱ_t (1/√ᾱ_{t+1} - η_t √(1-ᾱ_{t+1}))`, so `x̂_0 = Π_t a_t b_t · x0`.
pub fn gaussian_roundtrip_oracle(sched: &NoiseSchedule, x0: &Latent) -> Latent {
    x0.scaled(gaussian_roundtrip_factor(sched.alpha_bars()))
}

pub fn gaussian_roundtrip_factor(alpha_bars: &[f64]) -> f64 {
    let mut factor = 1.0;
    for w in alpha_bars.windows(2) {
        let (now, next) = (w[0], w[1]);
        let eta = ((1.0 - next) / next).sqrt() - ((1.0 - now) / now).sqrt();
        let slope = (1.0 - next).sqrt();
        let forward = next.sqrt() * (1.0 / now.sqrt() + eta * slope);
        let backward = now.sqrt() * (1.0 / next.sqrt() - eta * slope);
        factor *= forward * backward;
    }
    factor
}

/// Expectation of the one-hot ensemble over all `N ≤ 4` outcomes.
pub fn mc_expectation_oracle(branch_noises: &[Latent]) -> Result<Latent> {
    let n = branch_noises.len();
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("exhaustive enumeration needs 1..=4 branches, got {n}")));
    }
    let shape = branch_noises[0].shape();
    let mut expectation = vec![0.0; shape.len()];
    for chosen in 0..n {
        // One outcome: λ = e_chosen, probability 1/N.
        let weights: Vec<f64> = (0..n).map(|i| if i == chosen { 1.0 } else { 0.0 }).collect();
        for (noise, w) in branch_noises.iter().zip(&weights) {
            for (e, v) in expectation.iter_mut().zip(noise.as_slice()) {
                *e += w * v / n as f64;
            }
        }
    }
    Latent::from_vec(shape, expectation)
}

/// Three structurally different mixtures on `shape` for score checks.
pub fn reference_mixtures(shape: GridShape) -> Result<Vec<GaussianMixture>> {
    let render = |p: MeanPattern| p.render(shape);
    Ok(vec![
        GaussianMixture::new(vec![
            Component { weight: 0.5, mean: render(MeanPattern::CornerBlob { amplitude: 2.0, width: 1.5 })?, sigma: 0.3 },
            Component { weight: 0.3, mean: render(MeanPattern::Stripe { amplitude: -1.0 })?, sigma: 0.5 },
            Component { weight: 0.2, mean: render(MeanPattern::Zero)?, sigma: 1.0 },
        ])?,
        GaussianMixture::new(vec![Component {
            weight: 1.0,
            mean: render(MeanPattern::CornerBlob { amplitude: 1.0, width: 2.0 })?,
            sigma: 0.4,
        }])?
        .symmetrize(&(0..4).map(TransformSpec::rotate).collect::<Vec<_>>())?,
        GaussianMixture::new(vec![
            Component { weight: 0.6, mean: render(MeanPattern::Checker { amplitude: 0.5 })?, sigma: 0.6 },
            Component { weight: 0.4, mean: render(MeanPattern::Checker { amplitude: -0.5 })?, sigma: 0.25 },
        ])?,
    ])
}

/// The eight symmetries of a square grid, each as a sequence of transforms
/// applied left to right.
pub fn square_symmetries() -> Vec<Vec<TransformSpec>> {
    (0..4u8)
        .flat_map(|q| {
            [
                vec![TransformSpec::rotate(q)],
                vec![TransformSpec::FlipHorizontal, TransformSpec::rotate(q)],
            ]
        })
        .collect()
}

fn apply_all(chain: &[TransformSpec], x: &Latent) -> Result<Latent> {
    chain.iter().try_fold(x.clone(), |acc, g| g.apply(&acc))
}

/// Powers `π⁰ … π^{k-1}` of the patch permutation that moves every patch one
/// slot along, as patch-shuffle transforms.
pub fn cyclic_patch_group(shape: GridShape, patch_size: usize) -> Vec<TransformSpec> {
    let patches = (shape.height / patch_size) * (shape.width / patch_size);
    (0..patches)
        .map(|j| TransformSpec::PatchShuffle {
            patch_size,
            permutation: (0..patches).map(|k| (k + j) % patches).collect(),
        })
        .collect()
}

/// Largest `‖ε(g x) - g ε(x)‖∞` over sampled `(x, t)` and every `g` in `group`.
pub fn equivariance_check(
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    group: &[Vec<TransformSpec>],
    samples: usize,
    seed: u64,
) -> Result<OracleReport> {
    let steps = sched.num_steps();
    let mut worst = 0.0_f64;
    for k in 0..samples {
        let mut r = rng::substream(rng::derive_seed(seed, rng::purpose::ORACLE, 1), k as u64);
        let t = r.random_range(1..=steps);
        let x = predictor.mixture.sample(&mut r).map(|v| v + r.sample::<f64, _>(StandardNormal));
        let base = predictor.predict_noise(sched, &x, t)?;
        for chain in group {
            let moved = predictor.predict_noise(sched, &apply_all(chain, &x)?, t)?;
            worst = worst.max(moved.max_abs_diff(&apply_all(chain, &base)?));
        }
    }
    Ok(OracleReport {
        name: "equivariance".into(),
        discrepancy: worst,
        threshold: 1e-9,
        samples,
        seed,
    })
}

fn standard_normal_latent(shape: GridShape, seed: u64, index: u64) -> Latent {
    let mut r = rng::substream(seed, index);
    Latent::from_fn(shape, |_, _, _| r.sample(StandardNormal))
}

/// Every check behind the `verify` command, on a 16×16×1 grid with the
/// 50-step linear schedule.
pub fn verification_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let shape = GridShape::new(16, 16, 1);
    let sched = build_linear_schedule(1000, 1e-4, 0.02, 50)?;
    let mut reports = Vec::new();

    let mut r = fd_score_oracle(&GaussianMixture::standard_normal(shape), &sched, 20, 1e-4, seed)?;
    r.name = "fd-score/standard-normal".into();
    r.threshold = 1e-8;
    reports.push(r);
    for (i, mix) in reference_mixtures(shape)?.iter().enumerate() {
        let mut r = fd_score_oracle(mix, &sched, 100, 1e-4, seed)?;
        r.name = format!("fd-score/mixture-{}", i + 1);
        reports.push(r);
    }

    let gaussian = PredictorConfig::exact(GaussianMixture::standard_normal(shape));
    let naive = StrategyConfig::naive();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let x0 = standard_normal_latent(shape, seed, k);
        let (_, rec) = engine::round_trip(&naive, &gaussian, &sched, &x0)?;
        worst = worst.max(rec.end().max_abs_diff(&gaussian_roundtrip_oracle(&sched, &x0)));
    }
    reports.push(OracleReport {
        name: "gaussian-round-trip".into(),
        discrepancy: worst,
        threshold: 1e-10,
        samples: 20,
        seed,
    });

    let noises: Vec<Latent> = (0..4).map(|k| standard_normal_latent(shape, seed ^ 0x4d43, k)).collect();
    let average = Latent::mean_of(&noises).expect("four noises");
    reports.push(OracleReport {
        name: "mc-expectation/enumeration".into(),
        discrepancy: mc_expectation_oracle(&noises)?.max_abs_diff(&average),
        threshold: 1e-12,
        samples: 4,
        seed,
    });
    // Empirical average of many one-hot draws through the engine.
    let linear = PredictorConfig::exact(GaussianMixture::standard_normal(shape));
    let t = 25;
    let branch_noises: Vec<Latent> = noises
        .iter()
        .map(|b| linear.predict_noise(&sched, b, t))
        .collect::<Result<_>>()?;
    let exact = Latent::mean_of(&branch_noises).expect("four noises");
    let mut mc_rng = rng::substream(rng::derive_seed(seed, rng::purpose::ORACLE, 2), 0);
    let draws = 10_000;
    let empirical = engine::ensemble_noise_mc(&noises, t, &linear, &sched, draws, &mut mc_rng)?;
    reports.push(OracleReport {
        name: "mc-expectation/empirical".into(),
        discrepancy: empirical.sub(&exact).l2_norm() / exact.l2_norm(),
        threshold: 0.02,
        samples: draws,
        seed,
    });

    let blob = MeanPattern::CornerBlob { amplitude: 2.0, width: 2.0 }.render(shape)?;
    let mix = GaussianMixture::new(vec![Component { weight: 1.0, mean: blob, sigma: 0.5 }])?;
    let constant = PredictorConfig::constant(mix.symmetrize(&(0..4).map(TransformSpec::rotate).collect::<Vec<_>>())?, standard_normal_latent(shape, seed ^ 0xc0, 0).scaled(0.7))?;
    let mut worst: f64 = 0.0;
    let strategies = exactness_strategies();
    for k in 0..10 {
        let x0 = standard_normal_latent(shape, seed ^ 0xe1, k);
        for s in &strategies {
            let (_, rec) = engine::round_trip(&s.clone().with_seed(k), &constant, &sched, &x0)?;
            worst = worst.max(rec.end().max_abs_diff(&x0));
        }
    }
    reports.push(OracleReport {
        name: "constant-predictor-exactness".into(),
        discrepancy: worst,
        threshold: 1e-10,
        samples: 10 * strategies.len(),
        seed,
    });

    let dihedral = mix
        .symmetrize(&(0..4).map(TransformSpec::rotate).collect::<Vec<_>>())?
        .symmetrize(&[TransformSpec::Identity, TransformSpec::FlipHorizontal])?;
    let mut r = equivariance_check(&PredictorConfig::exact(dihedral), &sched, &square_symmetries(), 100, seed)?;
    r.name = "equivariance/square-symmetries".into();
    reports.push(r);
    let patch_group = cyclic_patch_group(shape, 4);
    let shuffled = mix.symmetrize(&patch_group)?;
    let chains: Vec<Vec<TransformSpec>> = patch_group.into_iter().map(|g| vec![g]).collect();
    let mut r = equivariance_check(&PredictorConfig::exact(shuffled), &sched, &chains, 100, seed)?;
    r.name = "equivariance/patch-cycle".into();
    reports.push(r);

    Ok(reports)
}

/// One strategy of every kind, for exactness checks.
pub fn exactness_strategies() -> Vec<StrategyConfig> {
    let mut out = vec![
        StrategyConfig::naive(),
        StrategyConfig::mbdi(4, BranchSource::IndependentSamples),
        StrategyConfig::mbdi(4, BranchSource::RotationsOfInput),
        StrategyConfig::mc(4, BranchSource::IndependentSamples, 1),
        StrategyConfig::mc(3, BranchSource::IndependentSamples, 2),
    ];
    out.extend(
        [
            PoolPreset::Identity,
            PoolPreset::Rotations,
            PoolPreset::Flips,
            PoolPreset::PatchShuffle,
            PoolPreset::ValueJitter,
            PoolPreset::Combination,
        ]
        .map(StrategyConfig::freeinv),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;

    #[test]
    fn fd_oracle_standard_normal_is_tight() {
        let shape = GridShape::new(4, 4, 1);
        let sched = build_linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let r = fd_score_oracle(&GaussianMixture::standard_normal(shape), &sched, 20, 1e-4, 3).unwrap();
        assert!(r.discrepancy <= 1e-8, "{}", r.discrepancy);
    }

    #[test]
    fn fd_oracle_rejects_bad_step() {
        let shape = GridShape::new(2, 2, 1);
        let sched = build_linear_schedule(10, 1e-3, 0.02, 5).unwrap();
        let mix = GaussianMixture::standard_normal(shape);
        assert!(fd_score_oracle(&mix, &sched, 1, 0.0, 0).is_err());
        assert!(fd_score_oracle(&mix, &sched, 1, 1e-2, 0).is_err());
        assert!(fd_score_oracle(&mix, &sched, 0, 1e-4, 0).is_err());
    }

    #[test]
    fn roundtrip_oracle_examples() {
        let sched = build_linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let zero = Latent::zeros(GridShape::new(2, 2, 1));
        assert_eq!(gaussian_roundtrip_oracle(&sched, &zero), zero);

        // T = 1 with ᾱ = [1, 0.5]: η = 1, slope √0.5.
        // forward = √0.5 (1 + √0.5), backward = 1 · (√2 - √0.5) = √0.5.
        let f = gaussian_roundtrip_factor(&[1.0, 0.5]);
        let expected = 0.5f64.sqrt() * (1.0 + 0.5f64.sqrt()) * 0.5f64.sqrt();
        assert!((f - expected).abs() <= 1e-15);
    }

    #[test]
    fn mc_expectation_examples() {
        let shape = GridShape::new(1, 2, 1);
        let a = Latent::from_vec(shape, vec![1.0, -2.0]).unwrap();
        let b = Latent::from_vec(shape, vec![3.0, 0.5]).unwrap();
        assert!(mc_expectation_oracle(&[a.clone()]).unwrap().max_abs_diff(&a) <= 1e-15);
        let mean = mc_expectation_oracle(&[a, b]).unwrap();
        assert_eq!(mean.as_slice(), &[2.0, -0.75]);
        assert!(mc_expectation_oracle(&[]).is_err());
    }
}
