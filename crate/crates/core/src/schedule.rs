//! Deterministic DDIM coefficient schedules.
//!
//! A [`NoiseSchedule`] holds `T + 1` cumulative signal-retention coefficients
//! `alpha_bar[0..=T]`, strictly decreasing. The per-step increment
//!
//! ```text
//! eta_t = sqrt((1 - a[t+1]) / a[t+1]) - sqrt((1 - a[t]) / a[t])
//! ```
//!
//! is the change in noise-to-signal ratio across step `t → t+1`, computed on
//! demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a schedule was built. This, not the coefficient dump, is what configs store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Linear beta ramp over `train_steps` training steps, subsampled to
    /// `infer_steps` DDIM steps with a leading even stride.
    Linear {
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        infer_steps: usize,
    },
    /// Coefficients supplied directly (tests and hand-built examples).
    Explicit { alpha_bar: Vec<f64> },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Linear {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            infer_steps: 50,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Linear {
                train_steps,
                beta_start,
                beta_end,
                infer_steps,
            } => build_linear_schedule(*train_steps, *beta_start, *beta_end, *infer_steps),
            ScheduleSpec::Explicit { alpha_bar } => NoiseSchedule::from_alpha_bar(alpha_bar.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    provenance: ScheduleSpec,
}

impl NoiseSchedule {
    /// Validates and wraps explicit coefficients `alpha_bar[0..=T]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        Self::validated(alpha_bar.clone(), ScheduleSpec::Explicit { alpha_bar })
    }

    fn validated(alpha_bar: Vec<f64>, provenance: ScheduleSpec) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule(format!(
                "need at least 2 coefficients (T >= 1), got {}",
                alpha_bar.len()
            )));
        }
        if let Some(&a) = alpha_bar.iter().find(|a| !a.is_finite() || **a <= 0.0 || **a > 1.0) {
            return Err(Error::Schedule(format!("coefficient {a} outside (0, 1]")));
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!(
                "alpha_bar not strictly decreasing at t={t}: {} -> {}",
                alpha_bar[t],
                alpha_bar[t + 1]
            )));
        }
        let schedule = Self {
            alpha_bar,
            provenance,
        };
        // Monotonic alpha_bar implies eta > 0 mathematically; rounding can still
        // collapse two nearly equal coefficients onto the same ratio.
        for t in 0..schedule.num_steps() {
            if !(schedule.eta_unchecked(t) > 0.0) {
                return Err(Error::Schedule(format!("eta_{t} is not strictly positive")));
            }
        }
        Ok(schedule)
    }

    /// Number of DDIM steps `T`.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| Error::StepOutOfRange {
            index: t,
            valid: format!("0..={}", self.num_steps()),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn provenance(&self) -> &ScheduleSpec {
        &self.provenance
    }

    pub fn eta(&self, t: usize) -> Result<f64> {
        if t >= self.num_steps() {
            return Err(Error::StepOutOfRange {
                index: t,
                valid: format!("0..{}", self.num_steps()),
            });
        }
        Ok(self.eta_unchecked(t))
    }

    fn eta_unchecked(&self, t: usize) -> f64 {
        noise_ratio(self.alpha_bar[t + 1]) - noise_ratio(self.alpha_bar[t])
    }
}

fn noise_ratio(alpha_bar: f64) -> f64 {
    ((1.0 - alpha_bar) / alpha_bar).sqrt()
}

/// Linear-beta DDIM schedule.
///
/// Training betas ramp linearly from `beta_start` to `beta_end` over
/// `train_steps` entries. With `stride = train_steps / infer_steps`, the DDIM
/// step `t ≥ 1` sits on training index `(t - 1) * stride` (leading spacing,
/// starting at index 0), so `alpha_bar[t] = prod_{s <= (t-1)*stride} (1 - beta_s)`.
/// `alpha_bar[0] = 1` is the clean state the inversion starts from.
pub fn build_linear_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    infer_steps: usize,
) -> Result<NoiseSchedule> {
    if infer_steps == 0 {
        return Err(Error::Schedule("infer_steps must be positive".into()));
    }
    if train_steps == 0 {
        return Err(Error::Schedule("train_steps must be positive".into()));
    }
    if infer_steps > train_steps {
        return Err(Error::Schedule(format!(
            "infer_steps ({infer_steps}) exceeds train_steps ({train_steps})"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }

    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_start]
    } else {
        let span = (train_steps - 1) as f64;
        (0..train_steps)
            .map(|s| beta_start + (beta_end - beta_start) * s as f64 / span)
            .collect()
    };
    let cumulative: Vec<f64> = betas
        .iter()
        .scan(1.0, |prod, beta| {
            *prod *= 1.0 - beta;
            Some(*prod)
        })
        .collect();

    let stride = train_steps / infer_steps;
    let mut alpha_bar = Vec::with_capacity(infer_steps + 1);
    alpha_bar.push(1.0);
    alpha_bar.extend((0..infer_steps).map(|k| cumulative[k * stride]));

    NoiseSchedule::validated(
        alpha_bar,
        ScheduleSpec::Linear {
            train_steps,
            beta_start,
            beta_end,
            infer_steps,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_matches_direct_products() {
        let s = build_linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.num_steps(), 50);
        assert_eq!(s.alpha_bars().len(), 51);
        // Oracle: multiply the selected prefix factor by factor.
        for t in 1..=50usize {
            let last = (t - 1) * 20;
            let mut prod = 1.0;
            for k in 0..=last {
                let beta = 1e-4 + (0.02 - 1e-4) * k as f64 / 999.0;
                prod *= 1.0 - beta;
            }
            assert_relative_eq!(s.alpha_bar(t).unwrap(), prod, max_relative = 1e-12);
        }
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4, max_relative = 1e-15);
    }

    #[test]
    fn single_training_step() {
        let s = build_linear_schedule(1, 0.5, 0.5, 1).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
        assert_relative_eq!(s.eta(0).unwrap(), 1.0);
    }

    #[test]
    fn stride_one_is_strictly_decreasing() {
        let s = build_linear_schedule(10, 0.01, 0.2, 10).unwrap();
        assert_eq!(s.num_steps(), 10);
    }

    #[test]
    fn rejects_bad_builder_arguments() {
        assert!(build_linear_schedule(1000, 1e-4, 0.02, 0).is_err());
        assert!(build_linear_schedule(10, 1e-4, 0.02, 11).is_err());
        assert!(build_linear_schedule(10, 0.0, 0.02, 5).is_err());
        assert!(build_linear_schedule(10, 0.03, 0.02, 5).is_err());
        assert!(build_linear_schedule(10, 0.01, 1.0, 5).is_err());
    }

    #[test]
    fn eta_closed_form_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        assert_relative_eq!(s.eta(0).unwrap(), 1.0, max_relative = 1e-15);
        let s = NoiseSchedule::from_alpha_bar(vec![0.5, 0.25]).unwrap();
        assert_relative_eq!(s.eta(0).unwrap(), 3f64.sqrt() - 1.0, max_relative = 1e-15);
        assert!((s.eta(0).unwrap() - 0.732051).abs() < 1e-6);
    }

    #[test]
    fn eta_out_of_range() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        assert!(matches!(s.eta(1), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn rejects_non_monotonic_and_degenerate() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.6]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.1, 0.5]).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ScheduleSpec::default();
        let text = toml::to_string(&spec).unwrap();
        let back: ScheduleSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert_eq!(back.build().unwrap(), spec.build().unwrap());
    }

    proptest! {
        #[test]
        fn eta_positive_and_telescopes(
            train in 1usize..400,
            b0 in 1e-5f64..0.01,
            db in 0.0f64..0.05,
            frac in 0.01f64..1.0,
        ) {
            let infer = ((train as f64 * frac).ceil() as usize).clamp(1, train);
            let s = build_linear_schedule(train, b0, b0 + db, infer).unwrap();
            let total: f64 = (0..s.num_steps()).map(|t| s.eta(t).unwrap()).sum();
            for t in 0..s.num_steps() {
                prop_assert!(s.eta(t).unwrap() > 0.0);
            }
            let a0 = s.alpha_bar(0).unwrap();
            let at = s.alpha_bar(s.num_steps()).unwrap();
            let expected = ((1.0 - at) / at).sqrt() - ((1.0 - a0) / a0).sqrt();
            prop_assert!((total - expected).abs() <= 1e-12 * expected.abs().max(1e-300));
        }
    }
}
