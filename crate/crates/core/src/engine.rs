//! Inversion and reconstruction trajectories.
//!
//! Inversion walks `t = 0..T` with
//! `x_{t+1} = √ᾱ_{t+1} (x_t / √ᾱ_t + η_t ε)`; reconstruction walks back with
//! `x_t = √ᾱ_t (x_{t+1} / √ᾱ_{t+1} - η_t ε)`. Both query the predictor at
//! schedule index `t + 1`: inversion at the latent it starts from (`x_t`),
//! reconstruction at the latent it starts from (`x_{t+1}`). The difference
//! between those two predictions is the per-step mismatch that makes the
//! round trip inexact.
//!
//! Strategies differ only in how `ε` is formed at each step:
//!
//! * naive: one prediction at the current latent;
//! * MBDI: the uniform average over `N` branch latents, all advanced together
//!   with the shared average;
//! * MC: the average of `m` uniformly drawn branch predictions;
//! * FreeInv: one prediction at `f_t(x_t)` for a per-step random transform `f_t`
//!   that the reconstruction replays at the same step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{GridShape, Latent};
use crate::predictor::PredictorConfig;
use crate::rng::{self, purpose};
use crate::schedule::NoiseSchedule;
use crate::transform::{sample_schedule, PoolPreset, TransformGenerator, TransformSchedule, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchSource {
    /// Auxiliary branches are fresh draws from the data mixture (MB-I).
    IndependentSamples,
    /// The four quarter-turn rotations of the input (MB-R); requires `N = 4`.
    RotationsOfInput,
}

/// A transform pool given by preset name or as an explicit generator list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolSpec {
    Preset(PoolPreset),
    Generators(Vec<TransformGenerator>),
}

impl PoolSpec {
    pub fn generators(&self) -> Vec<TransformGenerator> {
        match self {
            PoolSpec::Preset(p) => p.generators(),
            PoolSpec::Generators(g) => g.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    Naive,
    Mbdi {
        branches: usize,
        source: BranchSource,
    },
    Mc {
        branches: usize,
        source: BranchSource,
        samples_per_step: usize,
        /// Reuse the inversion-side draws at the matching reconstruction step.
        #[serde(default = "default_true")]
        replay_selection: bool,
    },
    Freeinv {
        pool: PoolSpec,
        /// Map the predicted noise back through `f_t^{-1}` before using it.
        /// Without this the noise stays in the transformed frame.
        #[serde(default = "default_true")]
        inverse_noise_transform: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self { variant, seed }
    }

    pub fn naive() -> Self {
        Self::new(Variant::Naive, 0)
    }

    pub fn mbdi(branches: usize, source: BranchSource) -> Self {
        Self::new(Variant::Mbdi { branches, source }, 0)
    }

    pub fn mc(branches: usize, source: BranchSource, samples_per_step: usize) -> Self {
        Self::new(
            Variant::Mc {
                branches,
                source,
                samples_per_step,
                replay_selection: true,
            },
            0,
        )
    }

    pub fn freeinv(pool: PoolPreset) -> Self {
        Self::new(
            Variant::Freeinv {
                pool: PoolSpec::Preset(pool),
                inverse_noise_transform: true,
            },
            0,
        )
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short human-readable name used in tables and file rows.
    pub fn label(&self) -> String {
        let source = |s: &BranchSource| match s {
            BranchSource::IndependentSamples => "I",
            BranchSource::RotationsOfInput => "R",
        };
        match &self.variant {
            Variant::Naive => "naive".to_string(),
            Variant::Mbdi { branches, source: s } => format!("mb-{}{branches}", source(s)),
            Variant::Mc {
                branches,
                source: s,
                samples_per_step,
                replay_selection,
            } => format!(
                "mc{samples_per_step}-{}{branches}{}",
                source(s),
                if *replay_selection { "" } else { "-redraw" }
            ),
            Variant::Freeinv {
                pool,
                inverse_noise_transform,
            } => {
                let name = match pool {
                    PoolSpec::Preset(p) => serde_json::to_value(p)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    PoolSpec::Generators(g) => format!("custom{}", g.len()),
                };
                format!("freeinv-{name}{}", if *inverse_noise_transform { "" } else { "-noinv" })
            }
        }
    }

    pub fn branch_count(&self) -> usize {
        match &self.variant {
            Variant::Mbdi { branches, .. } | Variant::Mc { branches, .. } => *branches,
            _ => 1,
        }
    }

    pub fn validate(&self, shape: GridShape) -> Result<()> {
        let check_branches = |branches: usize, source: BranchSource| -> Result<()> {
            if branches == 0 {
                return Err(Error::Strategy("branch count must be at least 1".into()));
            }
            if source == BranchSource::RotationsOfInput {
                if branches != 4 {
                    return Err(Error::Strategy(format!(
                        "rotations-of-input needs exactly 4 branches, got {branches}"
                    )));
                }
                if !shape.is_square() {
                    return Err(Error::Strategy(format!(
                        "rotations-of-input needs a square grid (H = W), got {shape}"
                    )));
                }
            }
            Ok(())
        };
        match &self.variant {
            Variant::Naive => Ok(()),
            Variant::Mbdi { branches, source } => check_branches(*branches, *source),
            Variant::Mc {
                branches,
                source,
                samples_per_step,
                ..
            } => {
                check_branches(*branches, *source)?;
                if *samples_per_step == 0 {
                    return Err(Error::Strategy("samples_per_step must be at least 1".into()));
                }
                Ok(())
            }
            Variant::Freeinv { pool, .. } => {
                let generators = pool.generators();
                if generators.is_empty() {
                    return Err(Error::Strategy("freeinv pool is empty".into()));
                }
                for g in &generators {
                    g.check_compatible(shape).map_err(|e| Error::Strategy(format!("freeinv pool: {e}")))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Inversion,
    Reconstruction,
}

/// Branch predictions that formed one step's ensemble noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStep {
    /// Branch indices averaged, with multiplicity: `0..N` for MBDI, the `m`
    /// draws for MC.
    pub selection: Vec<usize>,
    /// Prediction per branch; `None` for branches that were not queried.
    pub predictions: Vec<Option<Latent>>,
}

impl EnsembleStep {
    pub fn prediction(&self, branch: usize) -> Option<&Latent> {
        self.predictions.get(branch).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub direction: Direction,
    /// Target latents indexed by schedule step, `x_0..=x_T`.
    pub latents: Vec<Latent>,
    /// Effective noise used on step `t` (between `x_t` and `x_{t+1}`).
    pub noises: Vec<Latent>,
    /// Auxiliary branch latents `[branch - 1][t]`, for multi-branch strategies.
    pub auxiliary: Vec<Vec<Latent>>,
    /// Per-step ensemble details, indexed by `t`, for MBDI/MC.
    pub ensemble: Vec<EnsembleStep>,
    /// Transforms used on each step, for FreeInv.
    pub transforms: Option<TransformSchedule>,
    /// Strategy-derived seed this trajectory ran with.
    pub seed: u64,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.noises.len()
    }

    pub fn start(&self) -> &Latent {
        match self.direction {
            Direction::Inversion => &self.latents[0],
            Direction::Reconstruction => self.latents.last().expect("non-empty trajectory"),
        }
    }

    pub fn end(&self) -> &Latent {
        match self.direction {
            Direction::Inversion => self.latents.last().expect("non-empty trajectory"),
            Direction::Reconstruction => &self.latents[0],
        }
    }

    /// Everything a matching reconstruction needs, taken from an inversion.
    pub fn replay(&self, strategy: &StrategyConfig) -> Result<ReplayRecord> {
        if self.direction != Direction::Inversion {
            return Err(Error::Replay("replay records come from inversion trajectories".into()));
        }
        Ok(ReplayRecord {
            strategy: strategy.clone(),
            steps: self.num_steps(),
            auxiliary_terminals: self
                .auxiliary
                .iter()
                .map(|b| b.last().expect("non-empty branch").clone())
                .collect(),
            transforms: self.transforms.clone(),
            mc_selections: match strategy.variant {
                Variant::Mc { .. } => Some(self.ensemble.iter().map(|e| e.selection.clone()).collect()),
                _ => None,
            },
        })
    }
}

/// State carried from an inversion to its reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub strategy: StrategyConfig,
    pub steps: usize,
    /// `x_T^i` for auxiliary branches `i = 1..N`.
    pub auxiliary_terminals: Vec<Latent>,
    pub transforms: Option<TransformSchedule>,
    /// Inversion-side MC draws per step.
    pub mc_selections: Option<Vec<Vec<usize>>>,
}

fn check_step(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= sched.num_steps() {
        return Err(Error::StepOutOfRange {
            index: t,
            valid: format!("0..{}", sched.num_steps()),
        });
    }
    Ok(())
}

/// One inversion step `x_t → x_{t+1}` with a given noise.
pub fn invert_step(x_t: &Latent, t: usize, noise: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    check_step(sched, t)?;
    x_t.ensure_same_shape(noise)?;
    x_t.ensure_finite("inversion latent")?;
    noise.ensure_finite("inversion noise")?;
    let from = sched.alpha_bar(t)?.sqrt();
    let to = sched.alpha_bar(t + 1)?.sqrt();
    let eta = sched.eta(t)?;
    Ok(x_t.zip_map(noise, |x, n| to * (x / from + eta * n)))
}

/// One reconstruction step `x_{t+1} → x_t` with a given noise.
pub fn reconstruct_step(x_next: &Latent, t: usize, noise: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    check_step(sched, t)?;
    x_next.ensure_same_shape(noise)?;
    x_next.ensure_finite("reconstruction latent")?;
    noise.ensure_finite("reconstruction noise")?;
    let to = sched.alpha_bar(t)?.sqrt();
    let from = sched.alpha_bar(t + 1)?.sqrt();
    let eta = sched.eta(t)?;
    Ok(x_next.zip_map(noise, |x, n| to * (x / from - eta * n)))
}

/// Uniform average of the branch predictions at schedule index `t`.
pub fn ensemble_noise_mbdi(
    branches: &[Latent],
    t: usize,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    Ok(mbdi_step(branches, t, predictor, sched)?.0)
}

fn mbdi_step(
    branches: &[Latent],
    t: usize,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
) -> Result<(Latent, EnsembleStep)> {
    if branches.is_empty() {
        return Err(Error::Strategy("ensemble needs at least one branch".into()));
    }
    let predictions = branches
        .iter()
        .map(|b| predictor.predict_noise(sched, b, t))
        .collect::<Result<Vec<_>>>()?;
    let noise = Latent::mean_of(&predictions).expect("non-empty");
    Ok((
        noise,
        EnsembleStep {
            selection: (0..branches.len()).collect(),
            predictions: predictions.into_iter().map(Some).collect(),
        },
    ))
}

/// Average of `samples` uniformly drawn one-hot branch selections at index `t`.
pub fn ensemble_noise_mc<R: Rng + ?Sized>(
    branches: &[Latent],
    t: usize,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    samples: usize,
    rng: &mut R,
) -> Result<Latent> {
    let selection = draw_selection(branches.len(), samples, rng)?;
    Ok(selected_step(branches, &selection, t, predictor, sched)?.0)
}

fn draw_selection<R: Rng + ?Sized>(branches: usize, samples: usize, rng: &mut R) -> Result<Vec<usize>> {
    if branches == 0 {
        return Err(Error::Strategy("ensemble needs at least one branch".into()));
    }
    if samples == 0 {
        return Err(Error::Strategy("MC needs at least one sample per step".into()));
    }
    Ok((0..samples).map(|_| rng.random_range(0..branches)).collect())
}

fn selected_step(
    branches: &[Latent],
    selection: &[usize],
    t: usize,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
) -> Result<(Latent, EnsembleStep)> {
    let mut predictions: Vec<Option<Latent>> = vec![None; branches.len()];
    for &i in selection {
        let branch = branches
            .get(i)
            .ok_or_else(|| Error::Replay(format!("selected branch {i} of {}", branches.len())))?;
        if predictions[i].is_none() {
            predictions[i] = Some(predictor.predict_noise(sched, branch, t)?);
        }
    }
    let noise = Latent::mean_of(selection.iter().map(|&i| predictions[i].as_ref().expect("computed above")))
        .ok_or_else(|| Error::Strategy("empty MC selection".into()))?;
    Ok((
        noise,
        EnsembleStep {
            selection: selection.to_vec(),
            predictions,
        },
    ))
}

/// Noise predicted at `spec(x)`, optionally mapped back through `spec⁻¹`.
pub fn freeinv_noise(
    x: &Latent,
    t: usize,
    spec: &TransformSpec,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    inverse_noise_transform: bool,
) -> Result<Latent> {
    let noise = predictor.predict_noise(sched, &spec.apply(x)?, t)?;
    if inverse_noise_transform {
        spec.invert().apply(&noise)
    } else {
        Ok(noise)
    }
}

fn check_inputs(strategy: &StrategyConfig, predictor: &PredictorConfig, x: &Latent) -> Result<()> {
    predictor.validate()?;
    if x.shape() != predictor.shape() {
        return Err(Error::ShapeMismatch {
            expected: predictor.shape().to_string(),
            actual: x.shape().to_string(),
        });
    }
    x.ensure_finite("trajectory start")?;
    strategy.validate(x.shape())
}

fn initial_branches(strategy: &StrategyConfig, predictor: &PredictorConfig, x0: &Latent) -> Result<Vec<Latent>> {
    let (branches, source) = match strategy.variant {
        Variant::Mbdi { branches, source } | Variant::Mc { branches, source, .. } => (branches, source),
        _ => return Ok(vec![x0.clone()]),
    };
    let mut out = Vec::with_capacity(branches);
    out.push(x0.clone());
    match source {
        BranchSource::IndependentSamples => {
            let aux_seed = rng::derive_seed(strategy.seed, purpose::AUXILIARY, 0);
            for i in 1..branches {
                let mut r = rng::substream(aux_seed, i as u64);
                out.push(predictor.mixture.sample(&mut r));
            }
        }
        BranchSource::RotationsOfInput => {
            for q in 1..branches {
                out.push(TransformSpec::rotate(q as u8).apply(x0)?);
            }
        }
    }
    Ok(out)
}

fn transform_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, purpose::TRANSFORMS, 0)
}

/// Inverts `x0` to `x_T` under `strategy`.
pub fn run_inversion(
    strategy: &StrategyConfig,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    x0: &Latent,
) -> Result<Trajectory> {
    check_inputs(strategy, predictor, x0)?;
    let steps = sched.num_steps();
    let mut branches = initial_branches(strategy, predictor, x0)?;
    let mut history: Vec<Vec<Latent>> = branches.iter().map(|b| vec![b.clone()]).collect();
    let mut noises = Vec::with_capacity(steps);
    let mut ensemble = Vec::new();

    let transforms = match &strategy.variant {
        Variant::Freeinv { pool, .. } => Some(sample_schedule(
            &pool.generators(),
            x0.shape(),
            steps,
            transform_seed(strategy.seed),
        )?),
        _ => None,
    };
    let mc_seed = rng::derive_seed(strategy.seed, purpose::MC_INVERSION, 0);

    for t in 0..steps {
        let query = t + 1;
        let noise = match &strategy.variant {
            Variant::Naive => predictor.predict_noise(sched, &branches[0], query)?,
            Variant::Mbdi { .. } => {
                let (noise, step) = mbdi_step(&branches, query, predictor, sched)?;
                ensemble.push(step);
                noise
            }
            Variant::Mc { samples_per_step, .. } => {
                let mut r = rng::substream(mc_seed, t as u64);
                let selection = draw_selection(branches.len(), *samples_per_step, &mut r)?;
                let (noise, step) = selected_step(&branches, &selection, query, predictor, sched)?;
                ensemble.push(step);
                noise
            }
            Variant::Freeinv {
                inverse_noise_transform,
                ..
            } => {
                let spec = &transforms.as_ref().expect("sampled above").specs[t];
                freeinv_noise(&branches[0], query, spec, predictor, sched, *inverse_noise_transform)?
            }
        };
        for (branch, past) in branches.iter_mut().zip(history.iter_mut()) {
            *branch = invert_step(branch, t, &noise, sched)?;
            past.push(branch.clone());
        }
        noises.push(noise);
    }

    let mut history = history.into_iter();
    let latents = history.next().expect("target branch");
    Ok(Trajectory {
        direction: Direction::Inversion,
        latents,
        noises,
        auxiliary: history.collect(),
        ensemble,
        transforms,
        seed: strategy.seed,
    })
}

/// Reconstructs from `x_t_final` back to `x_0`, replaying what `replay` recorded.
pub fn run_reconstruction(
    strategy: &StrategyConfig,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    x_t_final: &Latent,
    replay: &ReplayRecord,
) -> Result<Trajectory> {
    check_inputs(strategy, predictor, x_t_final)?;
    let steps = sched.num_steps();
    if replay.strategy != *strategy {
        return Err(Error::Replay("replay record was produced by a different strategy".into()));
    }
    if replay.steps != steps {
        return Err(Error::Replay(format!(
            "replay record covers {} steps, schedule has {steps}",
            replay.steps
        )));
    }
    let branch_count = strategy.branch_count();
    if replay.auxiliary_terminals.len() != branch_count - 1 {
        return Err(Error::Replay(format!(
            "expected {} auxiliary terminal latents, got {}",
            branch_count - 1,
            replay.auxiliary_terminals.len()
        )));
    }
    for aux in &replay.auxiliary_terminals {
        x_t_final.ensure_same_shape(aux)?;
    }

    let transforms = match &strategy.variant {
        Variant::Freeinv { pool, .. } => {
            let recorded = replay
                .transforms
                .as_ref()
                .ok_or_else(|| Error::Replay("FreeInv replay has no transform schedule".into()))?;
            if recorded.pool != pool.generators() || recorded.shape != x_t_final.shape() {
                return Err(Error::Replay("transform schedule pool or shape differs from strategy".into()));
            }
            if recorded.seed != transform_seed(strategy.seed) {
                return Err(Error::Replay("transform schedule seed differs from strategy seed".into()));
            }
            recorded.verify(steps)?;
            Some(recorded)
        }
        _ => None,
    };

    let replayed_selections = match &strategy.variant {
        Variant::Mc {
            replay_selection: true,
            samples_per_step,
            branches,
            ..
        } => {
            let sel = replay
                .mc_selections
                .as_ref()
                .ok_or_else(|| Error::Replay("MC replay has no recorded selections".into()))?;
            if sel.len() != steps
                || sel
                    .iter()
                    .any(|s| s.len() != *samples_per_step || s.iter().any(|&i| i >= *branches))
            {
                return Err(Error::Replay("recorded MC selections are malformed".into()));
            }
            Some(sel)
        }
        _ => None,
    };
    let mc_seed = rng::derive_seed(strategy.seed, purpose::MC_RECONSTRUCTION, 0);

    let mut branches = Vec::with_capacity(branch_count);
    branches.push(x_t_final.clone());
    branches.extend(replay.auxiliary_terminals.iter().cloned());
    // Filled from t = T down; reversed at the end so index = schedule step.
    let mut history: Vec<Vec<Latent>> = branches.iter().map(|b| vec![b.clone()]).collect();
    let mut noises = Vec::with_capacity(steps);
    let mut ensemble = Vec::new();
    let mut consumed = Vec::with_capacity(steps);

    for t in (0..steps).rev() {
        let query = t + 1;
        let noise = match &strategy.variant {
            Variant::Naive => predictor.predict_noise(sched, &branches[0], query)?,
            Variant::Mbdi { .. } => {
                let (noise, step) = mbdi_step(&branches, query, predictor, sched)?;
                ensemble.push(step);
                noise
            }
            Variant::Mc { samples_per_step, .. } => {
                let selection = match replayed_selections {
                    Some(sel) => sel[t].clone(),
                    None => draw_selection(branches.len(), *samples_per_step, &mut rng::substream(mc_seed, t as u64))?,
                };
                let (noise, step) = selected_step(&branches, &selection, query, predictor, sched)?;
                ensemble.push(step);
                noise
            }
            Variant::Freeinv {
                inverse_noise_transform,
                ..
            } => {
                let spec = transforms.expect("checked above").specs[t].clone();
                let noise = freeinv_noise(&branches[0], query, &spec, predictor, sched, *inverse_noise_transform)?;
                consumed.push(spec);
                noise
            }
        };
        for (branch, past) in branches.iter_mut().zip(history.iter_mut()) {
            *branch = reconstruct_step(branch, t, &noise, sched)?;
            past.push(branch.clone());
        }
        noises.push(noise);
    }

    for past in history.iter_mut() {
        past.reverse();
    }
    noises.reverse();
    ensemble.reverse();
    consumed.reverse();

    let transforms = transforms.map(|recorded| TransformSchedule {
        pool: recorded.pool.clone(),
        shape: recorded.shape,
        seed: recorded.seed,
        specs: consumed,
    });
    let mut history = history.into_iter();
    let latents = history.next().expect("target branch");
    Ok(Trajectory {
        direction: Direction::Reconstruction,
        latents,
        noises,
        auxiliary: history.collect(),
        ensemble,
        transforms,
        seed: strategy.seed,
    })
}

/// Inversion followed by the matching reconstruction.
pub fn round_trip(
    strategy: &StrategyConfig,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    x0: &Latent,
) -> Result<(Trajectory, Trajectory)> {
    let inversion = run_inversion(strategy, predictor, sched, x0)?;
    let replay = inversion.replay(strategy)?;
    let reconstruction = run_reconstruction(strategy, predictor, sched, inversion.end(), &replay)?;
    Ok((inversion, reconstruction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::deviation_curve;
    use crate::predictor::{Component, GaussianMixture, MeanPattern};
    use crate::schedule::build_linear_schedule;
    use proptest::prelude::*;

    const SHAPE: GridShape = GridShape::new(8, 8, 1);

    fn sched() -> NoiseSchedule {
        build_linear_schedule(1000, 1e-4, 0.02, 20).unwrap()
    }

    fn mixture() -> GaussianMixture {
        let mean = MeanPattern::CornerBlob { amplitude: 2.0, width: 1.5 }.render(SHAPE).unwrap();
        GaussianMixture::new(vec![Component { weight: 1.0, mean, sigma: 0.8 }])
            .unwrap()
            .symmetrize(&(0..4).map(TransformSpec::rotate).collect::<Vec<_>>())
            .unwrap()
    }

    fn perturbed() -> PredictorConfig {
        let omega = MeanPattern::Quadrants { amplitude: 1.0 }.render(SHAPE).unwrap().into_vec();
        PredictorConfig::perturbed(mixture(), 0.1, omega).unwrap()
    }

    fn x0(seed: u64) -> Latent {
        mixture().sample(&mut rng::substream(seed, 0))
    }

    fn pair(values: [f64; 2]) -> Latent {
        Latent::from_vec(GridShape::new(1, 2, 1), values.to_vec()).unwrap()
    }

    #[test]
    fn single_step_examples() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let up = invert_step(&pair([1.0, 0.0]), 0, &pair([1.0, 1.0]), &s).unwrap();
        assert!((up.as_slice()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((up.as_slice()[1] - 0.5f64.sqrt()).abs() < 1e-15);
        let back = reconstruct_step(&up, 0, &pair([1.0, 1.0]), &s).unwrap();
        assert!(back.max_abs_diff(&pair([1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn zero_noise_is_pure_rescaling() {
        let s = sched();
        let x = x0(1);
        let zero = Latent::zeros(SHAPE);
        let up = invert_step(&x, 3, &zero, &s).unwrap();
        let k = (s.alpha_bar(4).unwrap() / s.alpha_bar(3).unwrap()).sqrt();
        assert!(up.max_abs_diff(&x.scaled(k)) < 1e-15);
        let down = reconstruct_step(&x, 3, &zero, &s).unwrap();
        assert!(down.max_abs_diff(&x.scaled(1.0 / k)) < 1e-15);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let s = sched();
        let x = x0(1);
        assert!(matches!(invert_step(&x, 20, &x, &s), Err(Error::StepOutOfRange { .. })));
        let wrong = Latent::zeros(GridShape::new(2, 2, 1));
        assert!(matches!(reconstruct_step(&x, 0, &wrong, &s), Err(Error::ShapeMismatch { .. })));
        let nan = x.map(|_| f64::NAN);
        assert!(matches!(invert_step(&nan, 0, &x, &s), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn step_pair_is_an_exact_inverse(
            values in proptest::collection::vec(-5.0f64..5.0, 4),
            noise in proptest::collection::vec(-5.0f64..5.0, 4),
            t in 0usize..20,
        ) {
            let shape = GridShape::new(2, 2, 1);
            let x = Latent::from_vec(shape, values).unwrap();
            let n = Latent::from_vec(shape, noise).unwrap();
            let s = sched();
            let back = reconstruct_step(&invert_step(&x, t, &n, &s).unwrap(), t, &n, &s).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        }
    }

    #[test]
    fn ensemble_examples() {
        let s = sched();
        let p = perturbed();
        let a = x0(1);
        let b = x0(2);
        let single = p.predict_noise(&s, &a, 5).unwrap();
        assert!(ensemble_noise_mbdi(&[a.clone()], 5, &p, &s).unwrap().bit_eq(&single));
        assert!(ensemble_noise_mbdi(&[a.clone(), a.clone(), a.clone()], 5, &p, &s)
            .unwrap()
            .max_abs_diff(&single)
            <= 1e-15);
        let c = Latent::filled(SHAPE, 0.25);
        let constant = PredictorConfig::constant(mixture(), c.clone()).unwrap();
        assert!(ensemble_noise_mbdi(&[a.clone(), b.clone()], 5, &constant, &s).unwrap().bit_eq(&c));
        for m in [1, 3, 7] {
            let mut r = rng::substream(9, m as u64);
            assert!(ensemble_noise_mc(&[a.clone()], 5, &p, &s, m, &mut r).unwrap().max_abs_diff(&single) <= 1e-15);
        }
        assert!(ensemble_noise_mbdi(&[], 5, &p, &s).is_err());
        assert!(ensemble_noise_mc(&[a], 5, &p, &s, 0, &mut rng::substream(0, 0)).is_err());
    }

    #[test]
    fn mc_average_converges_to_mbdi() {
        let s = sched();
        let p = perturbed();
        let branches: Vec<Latent> = (1..=4).map(x0).collect();
        let exact = ensemble_noise_mbdi(&branches, 7, &p, &s).unwrap();
        let mut r = rng::substream(5, 0);
        let mc = ensemble_noise_mc(&branches, 7, &p, &s, 10_000, &mut r).unwrap();
        assert!(mc.sub(&exact).l2_norm() <= 0.02 * exact.l2_norm());
    }

    #[test]
    fn freeinv_noise_examples() {
        let s = sched();
        let p = perturbed();
        let x = x0(3);
        let plain = p.predict_noise(&s, &x, 4).unwrap();
        for flag in [false, true] {
            assert!(freeinv_noise(&x, 4, &TransformSpec::Identity, &p, &s, flag).unwrap().bit_eq(&plain));
        }
        let c = Latent::from_fn(SHAPE, |r, col, _| (r * 8 + col) as f64);
        let constant = PredictorConfig::constant(mixture(), c.clone()).unwrap();
        assert!(freeinv_noise(&x, 4, &TransformSpec::rotate(1), &constant, &s, false).unwrap().bit_eq(&c));

        let exact = PredictorConfig::exact(mixture());
        let plain = exact.predict_noise(&s, &x, 4).unwrap();
        for q in 1..4 {
            let back = freeinv_noise(&x, 4, &TransformSpec::rotate(q), &exact, &s, true).unwrap();
            assert!(back.max_abs_diff(&plain) <= 1e-9);
        }
    }

    fn all_strategies() -> Vec<StrategyConfig> {
        vec![
            StrategyConfig::naive(),
            StrategyConfig::mbdi(4, BranchSource::IndependentSamples),
            StrategyConfig::mbdi(4, BranchSource::RotationsOfInput),
            StrategyConfig::mc(4, BranchSource::IndependentSamples, 1),
            StrategyConfig::mc(3, BranchSource::IndependentSamples, 2),
            StrategyConfig::new(
                Variant::Mc {
                    branches: 4,
                    source: BranchSource::IndependentSamples,
                    samples_per_step: 1,
                    replay_selection: false,
                },
                0,
            ),
            StrategyConfig::freeinv(PoolPreset::Rotations),
            StrategyConfig::freeinv(PoolPreset::Combination),
            StrategyConfig::new(
                Variant::Freeinv {
                    pool: PoolSpec::Preset(PoolPreset::Flips),
                    inverse_noise_transform: false,
                },
                0,
            ),
        ]
    }

    #[test]
    fn constant_predictor_round_trips_exactly() {
        let s = sched();
        let c = x0(99).scaled(0.5);
        let constant = PredictorConfig::constant(mixture(), c).unwrap();
        for strategy in all_strategies() {
            for seed in 0..3 {
                let x = x0(seed);
                let (_, rec) = round_trip(&strategy.clone().with_seed(seed), &constant, &s, &x).unwrap();
                assert!(rec.end().max_abs_diff(&x) <= 1e-10, "{}", strategy.label());
            }
        }
    }

    #[test]
    fn zero_constant_inversion_is_a_rescaling_chain() {
        let s = sched();
        let zero = PredictorConfig::constant(mixture(), Latent::zeros(SHAPE)).unwrap();
        let x = x0(4);
        let inv = run_inversion(&StrategyConfig::naive(), &zero, &s, &x).unwrap();
        let k = (s.alpha_bar(20).unwrap() / s.alpha_bar(0).unwrap()).sqrt();
        assert!(inv.end().max_abs_diff(&x.scaled(k)) <= 1e-14);
    }

    fn assert_same_trajectory(a: &Trajectory, b: &Trajectory, what: &str) {
        assert_eq!(a.latents.len(), b.latents.len());
        for (x, y) in a.latents.iter().zip(&b.latents) {
            assert!(x.bit_eq(y), "{what}: latents differ");
        }
        for (x, y) in a.noises.iter().zip(&b.noises) {
            assert!(x.bit_eq(y), "{what}: noises differ");
        }
    }

    #[test]
    fn degenerate_ensembles_equal_naive_bit_for_bit() {
        let s = sched();
        let p = perturbed();
        let x = x0(6);
        let (inv, rec) = round_trip(&StrategyConfig::naive(), &p, &s, &x).unwrap();
        let degenerate = [
            StrategyConfig::mbdi(1, BranchSource::IndependentSamples),
            StrategyConfig::mc(1, BranchSource::IndependentSamples, 1),
            StrategyConfig::mc(1, BranchSource::IndependentSamples, 2),
            StrategyConfig::freeinv(PoolPreset::Identity).with_seed(17),
        ];
        for strategy in degenerate {
            let (i2, r2) = round_trip(&strategy, &p, &s, &x).unwrap();
            assert_same_trajectory(&inv, &i2, &strategy.label());
            assert_same_trajectory(&rec, &r2, &strategy.label());
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let s = sched();
        let p = perturbed();
        let x = x0(7);
        for strategy in all_strategies() {
            let strategy = strategy.with_seed(123);
            let (i1, r1) = round_trip(&strategy, &p, &s, &x).unwrap();
            let (i2, r2) = round_trip(&strategy, &p, &s, &x).unwrap();
            assert_same_trajectory(&i1, &i2, &strategy.label());
            assert_same_trajectory(&r1, &r2, &strategy.label());
            assert_eq!(i1.transforms, i2.transforms);
        }
    }

    #[test]
    fn naive_gaussian_matches_closed_form() {
        let s = sched();
        let p = PredictorConfig::exact(GaussianMixture::standard_normal(SHAPE));
        let x = x0(8);
        let (_, rec) = round_trip(&StrategyConfig::naive(), &p, &s, &x).unwrap();
        let expected = crate::oracle::gaussian_roundtrip_oracle(&s, &x);
        assert!(rec.end().max_abs_diff(&expected) <= 1e-10);
        assert!(rec.end().max_abs_diff(&x) > 0.0);
    }

    #[test]
    fn reconstruction_consumes_the_recorded_schedule() {
        let s = sched();
        let p = perturbed();
        let strategy = StrategyConfig::freeinv(PoolPreset::Combination).with_seed(3);
        let (inv, rec) = round_trip(&strategy, &p, &s, &x0(9)).unwrap();
        assert_eq!(inv.transforms, rec.transforms);
        assert_eq!(inv.transforms.as_ref().unwrap().len(), 20);
    }

    #[test]
    fn a_different_schedule_changes_the_outcome() {
        let s = sched();
        let p = perturbed();
        let x = x0(10);
        let a = round_trip(&StrategyConfig::freeinv(PoolPreset::Rotations).with_seed(1), &p, &s, &x).unwrap();
        let b = round_trip(&StrategyConfig::freeinv(PoolPreset::Rotations).with_seed(2), &p, &s, &x).unwrap();
        assert_ne!(a.0.transforms.as_ref().unwrap().specs, b.0.transforms.as_ref().unwrap().specs);
        assert!(a.1.end().max_abs_diff(b.1.end()) > 1e-9);
    }

    #[test]
    fn corrupted_replay_is_rejected() {
        let s = sched();
        let p = perturbed();
        let strategy = StrategyConfig::freeinv(PoolPreset::Rotations).with_seed(4);
        let inv = run_inversion(&strategy, &p, &s, &x0(11)).unwrap();
        let good = inv.replay(&strategy).unwrap();

        let mut tampered = good.clone();
        let specs = &mut tampered.transforms.as_mut().unwrap().specs;
        specs[5] = match specs[5] {
            TransformSpec::Identity => TransformSpec::rotate(2),
            _ => TransformSpec::Identity,
        };
        assert!(matches!(
            run_reconstruction(&strategy, &p, &s, inv.end(), &tampered),
            Err(Error::Replay(_))
        ));

        let mut short = good.clone();
        short.transforms.as_mut().unwrap().specs.pop();
        assert!(run_reconstruction(&strategy, &p, &s, inv.end(), &short).is_err());

        let mut missing = good.clone();
        missing.transforms = None;
        assert!(run_reconstruction(&strategy, &p, &s, inv.end(), &missing).is_err());

        let other = strategy.clone().with_seed(5);
        assert!(run_reconstruction(&other, &p, &s, inv.end(), &good).is_err());

        let mc = StrategyConfig::mc(4, BranchSource::IndependentSamples, 1);
        let inv = run_inversion(&mc, &p, &s, &x0(12)).unwrap();
        let mut bad = inv.replay(&mc).unwrap();
        bad.mc_selections.as_mut().unwrap()[3] = vec![4];
        assert!(run_reconstruction(&mc, &p, &s, inv.end(), &bad).is_err());
        let mut no_aux = inv.replay(&mc).unwrap();
        no_aux.auxiliary_terminals.pop();
        assert!(run_reconstruction(&mc, &p, &s, inv.end(), &no_aux).is_err());
    }

    #[test]
    fn strategy_validation() {
        let rect = GridShape::new(8, 12, 1);
        assert!(StrategyConfig::mbdi(4, BranchSource::RotationsOfInput).validate(rect).is_err());
        assert!(StrategyConfig::mbdi(3, BranchSource::RotationsOfInput).validate(SHAPE).is_err());
        assert!(StrategyConfig::mbdi(0, BranchSource::IndependentSamples).validate(SHAPE).is_err());
        assert!(StrategyConfig::mc(4, BranchSource::IndependentSamples, 0).validate(SHAPE).is_err());
        assert!(StrategyConfig::freeinv(PoolPreset::Rotations).validate(rect).is_err());
        assert!(StrategyConfig::freeinv(PoolPreset::Flips).validate(rect).is_ok());
        let empty = StrategyConfig::new(
            Variant::Freeinv {
                pool: PoolSpec::Generators(vec![]),
                inverse_noise_transform: true,
            },
            0,
        );
        assert!(empty.validate(SHAPE).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(StrategyConfig::naive().label(), "naive");
        assert_eq!(StrategyConfig::mbdi(4, BranchSource::RotationsOfInput).label(), "mb-R4");
        assert_eq!(StrategyConfig::mc(4, BranchSource::IndependentSamples, 2).label(), "mc2-I4");
        assert_eq!(StrategyConfig::freeinv(PoolPreset::PatchShuffle).label(), "freeinv-patch-shuffle");
    }

    #[test]
    fn deviation_grows_toward_the_clean_end() {
        let s = sched();
        let p = perturbed();
        let (inv, rec) = round_trip(&StrategyConfig::naive(), &p, &s, &x0(13)).unwrap();
        let curve = deviation_curve(&inv, &rec).unwrap();
        assert_eq!(curve[20].l2, 0.0);
        // Trend statistic: most consecutive pairs increase toward t = 0.
        let rising = curve.windows(2).filter(|w| w[0].l2 >= w[1].l2).count();
        assert!(rising * 4 >= 3 * (curve.len() - 1), "rising pairs {rising} of {}", curve.len() - 1);
        assert!(curve[0].l2 > curve[10].l2);
    }
}
