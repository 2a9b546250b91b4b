//! Analytic noise predictors.
//!
//! The data distribution is an isotropic Gaussian mixture
//! `q_0 = Σ_k w_k N(μ_k, σ_k² I)`. Under the forward process
//! `x_t = √ᾱ x_0 + √(1-ᾱ) ε`, the marginal stays a mixture with means `√ᾱ μ_k`
//! and variances `ᾱ σ_k² + 1 - ᾱ`, and the minimum-MSE noise estimate is
//! `E[ε | x_t] = -√(1-ᾱ) ∇ log q_t(x_t)`. That exact predictor replaces a
//! trained network. A smooth sinusoidal perturbation `γ sin(ω ⊙ x)` breaks
//! exactness deterministically, and a constant mode ignores `x` entirely.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{GridShape, Latent};
use crate::schedule::NoiseSchedule;
use crate::transform::TransformSpec;

const WEIGHT_TOLERANCE: f64 = 1e-12;
const RESPONSIBILITY_FLOOR: f64 = 1e-300;
const DUPLICATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Latent,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    shape: GridShape,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Mixture("mixture needs at least one component".into()))?;
        let shape = first.mean.shape();
        for (k, c) in components.iter().enumerate() {
            if c.mean.shape() != shape {
                return Err(Error::Mixture(format!(
                    "component {k} has shape {}, expected {shape}",
                    c.mean.shape()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Mixture(format!("component {k} weight {} is not positive", c.weight)));
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(Error::Mixture(format!("component {k} sigma {} is not positive", c.sigma)));
            }
            if !c.mean.is_finite() {
                return Err(Error::Mixture(format!("component {k} mean is not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Mixture(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { shape, components })
    }

    /// Like [`GaussianMixture::new`] but rescales positive weights to sum to 1.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total > 0.0 && total.is_finite() {
            for c in &mut components {
                c.weight /= total;
            }
        }
        Self::new(components)
    }

    /// Standard normal `N(0, I)` on `shape`.
    pub fn standard_normal(shape: GridShape) -> Self {
        Self {
            shape,
            components: vec![Component {
                weight: 1.0,
                mean: Latent::zeros(shape),
                sigma: 1.0,
            }],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Forward-process marginal at `alpha_bar`.
    pub fn marginal(&self, alpha_bar: f64) -> Result<GaussianMixture> {
        check_alpha_bar(alpha_bar)?;
        let root = alpha_bar.sqrt();
        Ok(Self {
            shape: self.shape,
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.scaled(root),
                    sigma: marginal_sigma(c.sigma, alpha_bar),
                })
                .collect(),
        })
    }

    /// `log Σ_k w_k N(x; μ_k, σ_k² I)`.
    pub fn log_density(&self, x: &Latent) -> Result<f64> {
        self.ensure_point(x)?;
        let logs = self.component_log_terms(x, 1.0, |c| c.sigma);
        Ok(log_sum_exp(&logs))
    }

    /// `∇_x log q(x)` for this mixture.
    pub fn score(&self, x: &Latent) -> Result<Latent> {
        self.ensure_point(x)?;
        Ok(self.score_scaled(x, 1.0, |c| c.sigma))
    }

    /// Score of the marginal at `alpha_bar` without materializing it.
    pub(crate) fn marginal_score(&self, x: &Latent, alpha_bar: f64) -> Latent {
        let root = alpha_bar.sqrt();
        self.score_scaled(x, root, |c| marginal_sigma(c.sigma, alpha_bar))
    }

    /// Draws one sample: a component by weight, then `μ_k + σ_k z` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Latent {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        c.mean.map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + c.sigma * z
        })
    }

    fn component_log_terms(&self, x: &Latent, mean_scale: f64, sigma: impl Fn(&Component) -> f64) -> Vec<f64> {
        let d = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let s = sigma(c);
                let sq: f64 = x
                    .as_slice()
                    .iter()
                    .zip(c.mean.as_slice())
                    .map(|(xi, mi)| {
                        let r = xi - mean_scale * mi;
                        r * r
                    })
                    .sum();
                c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s * s).ln() - sq / (2.0 * s * s)
            })
            .collect()
    }

    fn score_scaled(&self, x: &Latent, mean_scale: f64, sigma: impl Fn(&Component) -> f64) -> Latent {
        let logs = self.component_log_terms(x, mean_scale, &sigma);
        let lse = log_sum_exp(&logs);
        let mut out = Latent::zeros(x.shape());
        for (c, log_term) in self.components.iter().zip(&logs) {
            let r = (log_term - lse).exp();
            if r < RESPONSIBILITY_FLOOR {
                continue;
            }
            let s = sigma(c);
            let coef = r / (s * s);
            for ((o, xi), mi) in out
                .as_mut_slice()
                .iter_mut()
                .zip(x.as_slice())
                .zip(c.mean.as_slice())
            {
                *o += coef * (mean_scale * mi - xi);
            }
        }
        out
    }

    fn ensure_point(&self, x: &Latent) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: x.shape().to_string(),
            });
        }
        x.ensure_finite("predictor input")
    }

    /// Orbit closure of the component means under `group`.
    ///
    /// Every `g(μ_k)` receives weight `w_k / |group|`; coincident components
    /// (same sigma, means within 1e-12) are merged. When `group` is closed under
    /// composition the result satisfies `q(g(x)) = q(x)` for every member.
    pub fn symmetrize(&self, group: &[TransformSpec]) -> Result<GaussianMixture> {
        if group.is_empty() {
            return Err(Error::Mixture("symmetry group is empty".into()));
        }
        for g in group {
            if !g.is_value_preserving() {
                return Err(Error::Mixture(format!(
                    "symmetry group members must be value-preserving, got {g:?}"
                )));
            }
            g.check_compatible(self.shape)?;
        }
        let share = 1.0 / group.len() as f64;
        let mut merged: Vec<Component> = Vec::new();
        for c in &self.components {
            for g in group {
                let mean = g.apply(&c.mean)?;
                let weight = c.weight * share;
                match merged
                    .iter_mut()
                    .find(|m| m.sigma == c.sigma && m.mean.max_abs_diff(&mean) <= DUPLICATE_TOLERANCE)
                {
                    Some(existing) => existing.weight += weight,
                    None => merged.push(Component {
                        weight,
                        mean,
                        sigma: c.sigma,
                    }),
                }
            }
        }
        GaussianMixture::normalized(merged)
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1]")));
    }
    Ok(())
}

fn marginal_sigma(sigma: f64, alpha_bar: f64) -> f64 {
    (alpha_bar * sigma * sigma + (1.0 - alpha_bar)).sqrt()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Noise predictor: an exact mixture predictor, optionally perturbed, or a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Data distribution. Also used to draw clean samples, even in constant mode.
    pub mixture: GaussianMixture,
    /// Perturbation amplitude γ ≥ 0.
    pub gamma: f64,
    /// Per-entry perturbation frequency ω.
    pub omega: Vec<f64>,
    /// When set, every prediction returns this grid.
    pub constant: Option<Latent>,
}

impl PredictorConfig {
    pub fn exact(mixture: GaussianMixture) -> Self {
        let len = mixture.shape().len();
        Self {
            mixture,
            gamma: 0.0,
            omega: vec![1.0; len],
            constant: None,
        }
    }

    pub fn perturbed(mixture: GaussianMixture, gamma: f64, omega: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            gamma,
            omega,
            ..Self::exact(mixture)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn constant(mixture: GaussianMixture, value: Latent) -> Result<Self> {
        let cfg = Self {
            constant: Some(value),
            ..Self::exact(mixture)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn shape(&self) -> GridShape {
        self.mixture.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.mixture.shape();
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if self.omega.len() != shape.len() || self.omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "omega must hold {} finite entries, got {}",
                shape.len(),
                self.omega.len()
            )));
        }
        if let Some(c) = &self.constant {
            if c.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_string(),
                    actual: c.shape().to_string(),
                });
            }
            c.ensure_finite("constant predictor")?;
        }
        Ok(())
    }

    /// Noise estimate at latent `x` and schedule index `t ∈ 1..=T`.
    pub fn predict_noise(&self, schedule: &NoiseSchedule, x: &Latent, t: usize) -> Result<Latent> {
        if t == 0 || t > schedule.num_steps() {
            return Err(Error::StepOutOfRange {
                index: t,
                valid: format!("1..={}", schedule.num_steps()),
            });
        }
        self.mixture.ensure_point(x)?;
        if let Some(c) = &self.constant {
            return Ok(c.clone());
        }
        let alpha_bar = schedule.alpha_bar(t)?;
        let scale = -(1.0 - alpha_bar).sqrt();
        let mut noise = self.mixture.marginal_score(x, alpha_bar).scaled(scale);
        if self.gamma > 0.0 {
            for ((n, xi), w) in noise
                .as_mut_slice()
                .iter_mut()
                .zip(x.as_slice())
                .zip(&self.omega)
            {
                *n += self.gamma * (w * xi).sin();
            }
        }
        Ok(noise)
    }
}

/// Named generators for component means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeanPattern {
    Zero,
    /// Gaussian bump of height `amplitude` and radius `width`, centred a quarter
    /// of the way in from the top-left corner.
    CornerBlob { amplitude: f64, width: f64 },
    /// Horizontal bands: rows in the top quarter take `amplitude`, the rest 0.
    Stripe { amplitude: f64 },
    /// `±amplitude` alternating on cells.
    Checker { amplitude: f64 },
    /// `+amplitude` in the top-left and bottom-right quadrants, `-amplitude`
    /// in the other two, 0 on a centre row or column of an odd-sized grid.
    Quadrants { amplitude: f64 },
    /// Explicit row-major, channel-last entries.
    Values { values: Vec<f64> },
}

impl MeanPattern {
    pub fn render(&self, shape: GridShape) -> Result<Latent> {
        match self {
            MeanPattern::Zero => Ok(Latent::zeros(shape)),
            MeanPattern::CornerBlob { amplitude, width } => {
                let cr = 0.25 * (shape.height as f64 - 1.0);
                let cc = 0.25 * (shape.width as f64 - 1.0);
                Ok(Latent::from_fn(shape, |r, c, _| {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    amplitude * (-d2 / (2.0 * width * width)).exp()
                }))
            }
            MeanPattern::Stripe { amplitude } => {
                let rows = shape.height.div_ceil(4);
                Ok(Latent::from_fn(shape, |r, _, _| if r < rows { *amplitude } else { 0.0 }))
            }
            MeanPattern::Checker { amplitude } => Ok(Latent::from_fn(shape, |r, c, _| {
                if (r + c) % 2 == 0 {
                    *amplitude
                } else {
                    -amplitude
                }
            })),
            MeanPattern::Quadrants { amplitude } => {
                let mr = 0.5 * (shape.height as f64 - 1.0);
                let mc = 0.5 * (shape.width as f64 - 1.0);
                let side = |v: f64| if v == 0.0 { 0.0 } else { v.signum() };
                Ok(Latent::from_fn(shape, |r, c, _| {
                    amplitude * side(r as f64 - mr) * side(c as f64 - mc)
                }))
            }
            MeanPattern::Values { values } => Latent::from_vec(shape, values.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;
    use approx::assert_relative_eq;

    fn line(values: &[f64]) -> Latent {
        Latent::from_vec(GridShape::new(1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn two_blob_1d() -> GaussianMixture {
        GaussianMixture::new(vec![
            Component { weight: 0.5, mean: line(&[1.0]), sigma: 1.0 },
            Component { weight: 0.5, mean: line(&[-1.0]), sigma: 1.0 },
        ])
        .unwrap()
    }

    #[test]
    fn marginal_examples() {
        let mix = GaussianMixture::new(vec![Component { weight: 1.0, mean: line(&[2.0, 0.0]), sigma: 1.0 }]).unwrap();
        assert_eq!(mix.marginal(1.0).unwrap(), mix);
        let m = mix.marginal(0.25).unwrap();
        assert_eq!(m.components()[0].mean.as_slice(), &[1.0, 0.0]);
        assert_relative_eq!(m.components()[0].sigma, 1.0, max_relative = 1e-15);

        let std = GaussianMixture::standard_normal(GridShape::new(1, 3, 1));
        let m = std.marginal(0.37).unwrap();
        assert_eq!(m.components()[0].mean.as_slice(), &[0.0; 3]);
        assert_relative_eq!(m.components()[0].sigma, 1.0, max_relative = 1e-15);
        assert!(std.marginal(0.0).is_err());
    }

    #[test]
    fn score_examples() {
        let std = GaussianMixture::standard_normal(GridShape::new(1, 3, 1));
        let x = line(&[0.5, -2.0, 3.0]);
        assert_eq!(std.score(&x).unwrap().as_slice(), &[-0.5, 2.0, -3.0]);

        let single = GaussianMixture::new(vec![Component { weight: 1.0, mean: line(&[0.3, -0.7]), sigma: 0.4 }]).unwrap();
        assert_eq!(single.score(&line(&[0.3, -0.7])).unwrap().max_abs(), 0.0);

        assert_eq!(two_blob_1d().score(&line(&[0.0])).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn score_rejects_non_finite_and_survives_far_points() {
        let mix = two_blob_1d();
        assert!(matches!(mix.score(&line(&[f64::NAN])), Err(Error::NonFinite(_))));
        // Far from both means every unnormalized density underflows; log-space keeps it finite.
        let s = mix.score(&line(&[1e6])).unwrap();
        assert!(s.is_finite());
        assert_relative_eq!(s.as_slice()[0], 1.0 - 1e6, max_relative = 1e-12);
    }

    #[test]
    fn marginal_score_matches_materialized_marginal() {
        let mix = GaussianMixture::new(vec![
            Component { weight: 0.3, mean: line(&[1.0, 2.0, -1.0]), sigma: 0.5 },
            Component { weight: 0.7, mean: line(&[-2.0, 0.5, 0.0]), sigma: 0.2 },
        ])
        .unwrap();
        let x = line(&[0.1, 0.9, -0.4]);
        for a in [0.99, 0.5, 0.01] {
            let direct = mix.marginal(a).unwrap().score(&x).unwrap();
            let fused = mix.marginal_score(&x, a);
            assert!(direct.max_abs_diff(&fused) <= 1e-12 * (1.0 + direct.max_abs()));
        }
    }

    #[test]
    fn standard_normal_predictor_is_linear() {
        let shape = GridShape::new(2, 2, 1);
        let sched = build_linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let p = PredictorConfig::exact(GaussianMixture::standard_normal(shape));
        let x = Latent::from_vec(shape, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        for t in [1, 17, 50] {
            let a = sched.alpha_bar(t).unwrap();
            let eps = p.predict_noise(&sched, &x, t).unwrap();
            let expected = x.scaled((1.0 - a).sqrt());
            assert!(eps.max_abs_diff(&expected) <= 1e-15);
        }
    }

    #[test]
    fn constant_and_perturbed_modes() {
        let shape = GridShape::new(2, 2, 1);
        let sched = build_linear_schedule(1000, 1e-4, 0.02, 50).unwrap();
        let mix = GaussianMixture::standard_normal(shape);
        let x = Latent::from_vec(shape, vec![0.3, -1.2, 2.0, 0.7]).unwrap();

        let zero = PredictorConfig::constant(mix.clone(), Latent::zeros(shape)).unwrap();
        assert_eq!(zero.predict_noise(&sched, &x, 10).unwrap().max_abs(), 0.0);

        let omega = vec![1.0, 2.0, 0.5, -1.0];
        let exact = PredictorConfig::exact(mix.clone());
        let bent = PredictorConfig::perturbed(mix, 0.05, omega.clone()).unwrap();
        let diff = bent.predict_noise(&sched, &x, 10).unwrap().sub(&exact.predict_noise(&sched, &x, 10).unwrap());
        for ((d, xi), w) in diff.as_slice().iter().zip(x.as_slice()).zip(&omega) {
            assert!((d - 0.05 * (w * xi).sin()).abs() <= 1e-15);
        }
    }

    #[test]
    fn predict_noise_rejects_bad_index() {
        let shape = GridShape::new(1, 1, 1);
        let sched = build_linear_schedule(10, 1e-3, 0.02, 5).unwrap();
        let p = PredictorConfig::exact(GaussianMixture::standard_normal(shape));
        let x = Latent::zeros(shape);
        assert!(p.predict_noise(&sched, &x, 0).is_err());
        assert!(p.predict_noise(&sched, &x, 6).is_err());
        assert!(p.predict_noise(&sched, &x, 5).is_ok());
    }

    #[test]
    fn mixture_validation() {
        let m = line(&[0.0]);
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![Component { weight: 0.9, mean: m.clone(), sigma: 1.0 }]).is_err());
        assert!(GaussianMixture::new(vec![Component { weight: 1.0, mean: m.clone(), sigma: 0.0 }]).is_err());
        assert!(GaussianMixture::new(vec![
            Component { weight: 0.5, mean: m.clone(), sigma: 1.0 },
            Component { weight: 0.5, mean: line(&[0.0, 1.0]), sigma: 1.0 },
        ])
        .is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let shape = GridShape::new(4, 4, 1);
        let blob = MeanPattern::CornerBlob { amplitude: 1.0, width: 1.0 }.render(shape).unwrap();
        let mix = GaussianMixture::new(vec![Component { weight: 1.0, mean: blob, sigma: 0.5 }]).unwrap();

        let same = mix.symmetrize(&[TransformSpec::Identity]).unwrap();
        assert_eq!(same, mix);

        let rotations: Vec<_> = (0..4).map(TransformSpec::rotate).collect();
        let sym = mix.symmetrize(&rotations).unwrap();
        assert_eq!(sym.components().len(), 4);
        for c in sym.components() {
            assert_relative_eq!(c.weight, 0.25);
        }

        let center = GaussianMixture::new(vec![Component {
            weight: 1.0,
            mean: Latent::filled(shape, 0.7),
            sigma: 0.5,
        }])
        .unwrap();
        assert_eq!(center.symmetrize(&rotations).unwrap().components().len(), 1);

        let err = mix.symmetrize(&[TransformSpec::ValueJitter { scale: 1.1, shift: 0.0 }]);
        assert!(matches!(err, Err(Error::Mixture(_))));
    }

    #[test]
    fn patterns_render() {
        let shape = GridShape::new(4, 4, 2);
        let stripe = MeanPattern::Stripe { amplitude: 2.0 }.render(shape).unwrap();
        assert_eq!(stripe.get(0, 3, 1), 2.0);
        assert_eq!(stripe.get(1, 0, 0), 0.0);
        let checker = MeanPattern::Checker { amplitude: 1.0 }.render(shape).unwrap();
        assert_eq!(checker.sum(), 0.0);
        assert!(MeanPattern::Values { values: vec![1.0; 3] }.render(shape).is_err());
    }
}
