//! Mismatch, deviation and fidelity measurements for round trips.

use serde::{Deserialize, Serialize};

use crate::engine::{Direction, Trajectory};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

pub const PSNR_CAP_DB: f64 = 200.0;
pub const PEAK_FLOOR: f64 = 1e-6;
pub const SSIM_WINDOW: usize = 8;
const TRIANGLE_TOLERANCE: f64 = 1e-12;

/// Mean absolute and L2 size of a difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub mean_abs: f64,
    pub l2: f64,
}

impl Gap {
    pub const ZERO: Gap = Gap { mean_abs: 0.0, l2: 0.0 };

    fn between(a: &Latent, b: &Latent) -> Gap {
        let mut abs = 0.0;
        let mut sq = 0.0;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let d = x - y;
            abs += d.abs();
            sq += d * d;
        }
        Gap {
            mean_abs: abs / a.len() as f64,
            l2: sq.sqrt(),
        }
    }
}

/// Per-step noise mismatch between the inversion and reconstruction estimates.
pub fn mismatch(noise_inv: &Latent, noise_rec: &Latent) -> Result<Gap> {
    noise_inv.ensure_same_shape(noise_rec)?;
    Ok(Gap::between(noise_inv, noise_rec))
}

/// One-step reconstruction error implied by a mismatch: `√ᾱ_t η_t · mismatch`.
pub fn step_bound(sched: &NoiseSchedule, t: usize, mismatch_l2: f64) -> Result<f64> {
    let eta = sched.eta(t)?;
    Ok(sched.alpha_bar(t)?.sqrt() * eta * mismatch_l2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleCheck {
    pub holds: bool,
    /// Mean branch mismatch minus ensemble mismatch.
    pub slack: f64,
    pub ensemble_l2: f64,
    pub branch_mean_l2: f64,
}

/// Checks `ensemble ≤ mean(branches)`, with absolute tolerance
/// `1e-12 · max(1, mean)`.
pub fn triangle_check(branch_mismatches_l2: &[f64], ensemble_mismatch_l2: f64) -> Result<TriangleCheck> {
    if branch_mismatches_l2.is_empty() {
        return Err(Error::InvalidArgument("triangle check needs at least one branch".into()));
    }
    let mean = branch_mismatches_l2.iter().sum::<f64>() / branch_mismatches_l2.len() as f64;
    let scale = mean.max(1.0);
    Ok(TriangleCheck {
        holds: ensemble_mismatch_l2 <= mean + TRIANGLE_TOLERANCE * scale,
        slack: mean - ensemble_mismatch_l2,
        ensemble_l2: ensemble_mismatch_l2,
        branch_mean_l2: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Dynamic range used as the PSNR/SSIM peak.
    pub peak: f64,
    /// The reference range fell below the floor and `PEAK_FLOOR` was used.
    pub degenerate_reference: bool,
}

/// MSE, PSNR and SSIM of `candidate` against `reference`.
///
/// The peak is the reference's `max - min` (floored at 1e-6). PSNR is capped at
/// 200 dB. SSIM uses every 8×8 window position per channel with a uniform
/// window and stabilizers `C1 = (0.01 peak)²`, `C2 = (0.03 peak)²`.
pub fn fidelity(reference: &Latent, candidate: &Latent) -> Result<Fidelity> {
    reference.ensure_same_shape(candidate)?;
    let shape = reference.shape();
    if shape.height < SSIM_WINDOW || shape.width < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            expected: format!("grid at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"),
            actual: shape.to_string(),
        });
    }
    let mse = reference
        .as_slice()
        .iter()
        .zip(candidate.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    let (lo, hi) = reference.min_max();
    let range = hi - lo;
    let degenerate_reference = !(range >= PEAK_FLOOR);
    let peak = if degenerate_reference { PEAK_FLOOR } else { range };
    Ok(Fidelity {
        mse,
        psnr: psnr(mse, peak),
        ssim: ssim(reference, candidate, peak),
        peak,
        degenerate_reference,
    })
}

pub fn psnr(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

fn ssim(x: &Latent, y: &Latent, peak: f64) -> f64 {
    let shape = x.shape();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..shape.channels {
        for r0 in 0..=shape.height - SSIM_WINDOW {
            for c0 in 0..=shape.width - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + SSIM_WINDOW {
                    for c in c0..c0 + SSIM_WINDOW {
                        let a = x.get(r, c, ch);
                        let b = y.get(r, c, ch);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let mx = sx / n;
                let my = sy / n;
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// `‖x*_t - x_t‖` for `t = 0..=T`, reconstruction against inversion.
pub fn deviation_curve(inversion: &Trajectory, reconstruction: &Trajectory) -> Result<Vec<Gap>> {
    if inversion.direction != Direction::Inversion || reconstruction.direction != Direction::Reconstruction {
        return Err(Error::InvalidArgument(
            "deviation curve needs an inversion and a reconstruction".into(),
        ));
    }
    if inversion.latents.len() != reconstruction.latents.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            inversion.latents.len(),
            reconstruction.latents.len()
        )));
    }
    inversion
        .latents
        .iter()
        .zip(&reconstruction.latents)
        .map(|(a, b)| mismatch(a, b))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mismatch: Gap,
    pub bound: f64,
    /// Ensemble-vs-branch check for MBDI, and for MC when draws are replayed.
    pub triangle: Option<TriangleCheck>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub inversion_secs: f64,
    pub reconstruction_secs: f64,
    pub metrics_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Indexed by step `t = 0..T`.
    pub steps: Vec<StepMetrics>,
    /// Indexed by `t = 0..=T`; the last entry is 0 by construction.
    pub deviation: Vec<Gap>,
    pub fidelity: Fidelity,
    /// Host-dependent; never serialized.
    #[serde(skip)]
    pub timings: PhaseTimings,
}

/// Timings are host-dependent and take no part in equality.
impl PartialEq for MetricsReport {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.deviation == other.deviation && self.fidelity == other.fidelity
    }
}

impl MetricsReport {
    pub fn from_round_trip(
        sched: &NoiseSchedule,
        inversion: &Trajectory,
        reconstruction: &Trajectory,
    ) -> Result<MetricsReport> {
        let deviation = deviation_curve(inversion, reconstruction)?;
        let steps = (0..inversion.num_steps())
            .map(|t| {
                let gap = mismatch(&inversion.noises[t], &reconstruction.noises[t])?;
                let triangle = match (inversion.ensemble.get(t), reconstruction.ensemble.get(t)) {
                    (Some(inv), Some(rec)) if inv.selection == rec.selection => {
                        let branch_gaps = inv
                            .selection
                            .iter()
                            .map(|&i| match (inv.prediction(i), rec.prediction(i)) {
                                (Some(a), Some(b)) => Ok(Gap::between(a, b).l2),
                                _ => Err(Error::Invariant(format!("missing prediction for branch {i} at step {t}"))),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(triangle_check(&branch_gaps, gap.l2)?)
                    }
                    _ => None,
                };
                Ok(StepMetrics {
                    step: t,
                    mismatch: gap,
                    bound: step_bound(sched, t, gap.l2)?,
                    triangle,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fidelity = fidelity(inversion.start(), reconstruction.end())?;
        Ok(MetricsReport {
            steps,
            deviation,
            fidelity,
            timings: PhaseTimings::default(),
        })
    }

    pub fn triangle_violations(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.triangle.is_some_and(|c| !c.holds))
            .count()
    }

    pub fn triangle_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.triangle.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::GridShape;
    use approx::assert_relative_eq;

    fn line(v: &[f64]) -> Latent {
        Latent::from_vec(GridShape::new(1, v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn mismatch_examples() {
        let a = line(&[1.0, 0.0]);
        assert_eq!(mismatch(&a, &a).unwrap(), Gap::ZERO);
        let g = mismatch(&a, &line(&[0.0, 1.0])).unwrap();
        assert_eq!(g.mean_abs, 1.0);
        assert_relative_eq!(g.l2, 2f64.sqrt());
        assert!(mismatch(&a, &line(&[0.0])).is_err());
    }

    #[test]
    fn step_bound_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        assert_eq!(step_bound(&s, 0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(step_bound(&s, 0, 2.0).unwrap(), 2.0, max_relative = 1e-15);
        assert!(step_bound(&s, 1, 1.0).is_err());
    }

    #[test]
    fn triangle_examples() {
        let one = triangle_check(&[0.3], 0.3).unwrap();
        assert!(one.holds);
        assert_eq!(one.slack, 0.0);
        let same = triangle_check(&[0.5; 4], 0.5).unwrap();
        assert!(same.holds);
        assert!(!triangle_check(&[0.1, 0.1], 0.2).unwrap().holds);
        assert!(triangle_check(&[], 0.0).is_err());
    }

    #[test]
    fn fidelity_identical() {
        let x = Latent::from_fn(GridShape::new(8, 9, 2), |r, c, ch| ((r * 7 + c * 3 + ch) % 5) as f64 * 0.3);
        let f = fidelity(&x, &x).unwrap();
        assert_eq!(f.mse, 0.0);
        assert_eq!(f.psnr, PSNR_CAP_DB);
        assert_relative_eq!(f.ssim, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn constant_offset_psnr() {
        let x = Latent::from_fn(GridShape::new(8, 8, 1), |r, c, _| if (r + c) % 3 == 0 { 1.0 } else { 0.0 });
        let y = x.map(|v| v + 0.1);
        let f = fidelity(&x, &y).unwrap();
        assert_relative_eq!(f.mse, 0.01, max_relative = 1e-12);
        assert_relative_eq!(f.psnr, 20.0, max_relative = 1e-12);
    }

    #[test]
    fn negated_checkerboard_ssim_matches_window_formula() {
        // Every 8x8 window of a ±a checkerboard has mean 0 and variance a², so
        // SSIM(x, -x) = (C2 - 2a²) / (2a² + C2) with peak 2a.
        let a = 0.75;
        let x = Latent::from_fn(GridShape::new(12, 10, 2), |r, c, _| if (r + c) % 2 == 0 { a } else { -a });
        let y = x.scaled(-1.0);
        let f = fidelity(&x, &y).unwrap();
        let c2 = (0.03 * 2.0 * a).powi(2);
        let expected = (c2 - 2.0 * a * a) / (2.0 * a * a + c2);
        assert!((f.ssim - expected).abs() <= 1e-12);
        assert!((f.ssim + 1.0).abs() < 4e-3);
    }

    #[test]
    fn fidelity_rejects_small_and_mismatched_grids() {
        let small = Latent::zeros(GridShape::new(7, 8, 1));
        assert!(fidelity(&small, &small).is_err());
        let a = Latent::zeros(GridShape::new(8, 8, 1));
        let b = Latent::zeros(GridShape::new(8, 8, 2));
        assert!(fidelity(&a, &b).is_err());
    }

    #[test]
    fn degenerate_reference_uses_floor() {
        let x = Latent::filled(GridShape::new(8, 8, 1), 3.0);
        let f = fidelity(&x, &x.map(|v| v + 1e-4)).unwrap();
        assert!(f.degenerate_reference);
        assert_eq!(f.peak, PEAK_FLOOR);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let mut last = f64::INFINITY;
        for k in 1..50 {
            let p = psnr(k as f64 * 1e-3, 1.0);
            assert!(p < last);
            last = p;
        }
    }

    use proptest::prelude::*;

    fn grid(values: Vec<f64>) -> Latent {
        Latent::from_vec(GridShape::new(8, 8, 1), values).unwrap()
    }

    proptest! {
        #[test]
        fn self_fidelity_is_perfect(values in proptest::collection::vec(-10.0f64..10.0, 64)) {
            let x = grid(values);
            let f = fidelity(&x, &x).unwrap();
            prop_assert_eq!(f.mse, 0.0);
            prop_assert_eq!(f.psnr, PSNR_CAP_DB);
            prop_assert!((f.ssim - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn mismatch_is_symmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 64),
            b in proptest::collection::vec(-10.0f64..10.0, 64),
        ) {
            let (a, b) = (grid(a), grid(b));
            prop_assert_eq!(mismatch(&a, &b).unwrap(), mismatch(&b, &a).unwrap());
        }

        #[test]
        fn psnr_strictly_decreases(mse in 1e-12f64..1e3, factor in 1.001f64..100.0, peak in 1e-3f64..1e3) {
            prop_assert!(psnr(mse * factor, peak) < psnr(mse, peak) || psnr(mse, peak) == PSNR_CAP_DB);
        }

        #[test]
        fn averaged_noise_obeys_triangle_bound(
            inv in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 64), 1..6),
            shift in proptest::collection::vec(-5.0f64..5.0, 64),
        ) {
            let inv: Vec<Latent> = inv.into_iter().map(grid).collect();
            let rec: Vec<Latent> = inv
                .iter()
                .enumerate()
                .map(|(i, x)| x.zip_map(&grid(shift.clone()), |a, s| a + s * (i as f64 - 1.5)))
                .collect();
            let branches: Vec<f64> = inv.iter().zip(&rec).map(|(a, b)| mismatch(a, b).unwrap().l2).collect();
            let ensemble = mismatch(&Latent::mean_of(&inv).unwrap(), &Latent::mean_of(&rec).unwrap()).unwrap().l2;
            prop_assert!(triangle_check(&branches, ensemble).unwrap().holds);
        }
    }
}
