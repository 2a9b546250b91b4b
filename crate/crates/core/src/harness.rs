//! Experiment configuration, execution, ablation presets and result emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{run_inversion, run_reconstruction, BranchSource, StrategyConfig, Trajectory};
use crate::error::{Error, Result};
use crate::latent::{GridShape, Latent};
use crate::metrics::{MetricsReport, PhaseTimings};
use crate::predictor::{Component, GaussianMixture, MeanPattern, PredictorConfig};
use crate::rng::{self, purpose};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::transform::{PoolPreset, TransformSpec};

/// A grid given as one value for every entry, entry by entry, or as a
/// named pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValues {
    Uniform(f64),
    PerEntry(Vec<f64>),
    Pattern(MeanPattern),
}

impl GridValues {
    fn expand(&self, shape: GridShape, field: &str) -> Result<Vec<f64>> {
        match self {
            GridValues::Uniform(v) => Ok(vec![*v; shape.len()]),
            GridValues::PerEntry(v) if v.len() == shape.len() => Ok(v.clone()),
            GridValues::PerEntry(v) => Err(config_error(
                field,
                format!("expected 1 or {} values, got {}", shape.len(), v.len()),
            )),
            GridValues::Pattern(p) => Ok(p
                .render(shape)
                .map_err(|e| config_error(field, e.to_string()))?
                .into_vec()),
        }
    }
}

/// Symmetry group the declared mixture is closed under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    None,
    /// The four quarter-turn rotations.
    #[default]
    Rotations,
    /// Rotations and mirror images (the eight symmetries of the square).
    Dihedral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDecl {
    pub weight: f64,
    pub sigma: f64,
    pub mean: MeanPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDecl {
    #[serde(default)]
    pub symmetry: Symmetry,
    pub components: Vec<ComponentDecl>,
}

impl Default for MixtureDecl {
    fn default() -> Self {
        Self {
            symmetry: Symmetry::Rotations,
            components: vec![ComponentDecl {
                weight: 1.0,
                sigma: 1.0,
                mean: MeanPattern::CornerBlob {
                    amplitude: 2.0,
                    width: 2.0,
                },
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorDecl {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_omega")]
    pub omega: GridValues,
    /// When present, the predictor returns this grid at every query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<GridValues>,
}

impl Default for PredictorDecl {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            omega: default_omega(),
            constant: None,
        }
    }
}

fn default_gamma() -> f64 {
    0.05
}

/// Frequencies of opposite sign in neighbouring quadrants. The resulting
/// perturbation is not rotation-equivariant and averages to zero over the
/// four quarter turns, so it behaves like model error that transforms can
/// average out.
fn default_omega() -> GridValues {
    GridValues::Pattern(MeanPattern::Quadrants { amplitude: 1.0 })
}

fn default_grid() -> GridShape {
    GridShape::new(16, 16, 1)
}

fn default_strategies() -> Vec<StrategyConfig> {
    vec![StrategyConfig::naive(), StrategyConfig::freeinv(PoolPreset::Rotations)]
}

fn default_instances() -> usize {
    50
}

fn default_output_dir() -> String {
    "invlab-out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_grid")]
    pub grid: GridShape,
    #[serde(default)]
    pub mixture: MixtureDecl,
    #[serde(default)]
    pub predictor: PredictorDecl,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub dump_latents: bool,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            grid: default_grid(),
            mixture: MixtureDecl::default(),
            predictor: PredictorDecl::default(),
            instances: default_instances(),
            seed: 0,
            output_dir: default_output_dir(),
            dump_latents: false,
            strategies: default_strategies(),
        }
    }
}

fn config_error(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Largest seed a config file can carry (TOML integers are signed 64-bit).
pub const MAX_CONFIG_SEED: u64 = i64::MAX as u64;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(config_error("instances", "must be at least 1"));
        }
        let g = self.grid;
        if g.channels == 0 {
            return Err(config_error("grid.channels", "must be at least 1"));
        }
        if g.height < 8 || g.width < 8 {
            return Err(config_error(
                "grid",
                format!("{g} is smaller than the 8x8 structural-similarity window"),
            ));
        }
        if self.seed > MAX_CONFIG_SEED {
            return Err(config_error("seed", "must fit in a signed 64-bit integer"));
        }
        self.schedule
            .build()
            .map_err(|e| config_error("schedule", e.to_string()))?;
        self.predictor()?;
        if self.strategies.is_empty() {
            return Err(config_error("strategies", "at least one strategy is required"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if s.seed > MAX_CONFIG_SEED {
                return Err(config_error(format!("strategies[{i}].seed"), "must fit in a signed 64-bit integer"));
            }
            s.validate(g)
                .map_err(|e| config_error(format!("strategies[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        let decl = &self.mixture;
        if decl.components.is_empty() {
            return Err(config_error("mixture.components", "at least one component is required"));
        }
        let components = decl
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mean = c
                    .mean
                    .render(self.grid)
                    .map_err(|e| config_error(format!("mixture.components[{i}].mean"), e.to_string()))?;
                Ok(Component {
                    weight: c.weight,
                    mean,
                    sigma: c.sigma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let base = GaussianMixture::new(components).map_err(|e| config_error("mixture.components", e.to_string()))?;
        let rotations: Vec<TransformSpec> = (0..4).map(TransformSpec::rotate).collect();
        let closed = match decl.symmetry {
            Symmetry::None => Ok(base),
            _ if !self.grid.is_square() => {
                return Err(config_error(
                    "mixture.symmetry",
                    format!("rotation symmetry needs a square grid, got {}", self.grid),
                ))
            }
            Symmetry::Rotations => base.symmetrize(&rotations),
            Symmetry::Dihedral => base
                .symmetrize(&rotations)
                .and_then(|m| m.symmetrize(&[TransformSpec::Identity, TransformSpec::FlipHorizontal])),
        };
        closed.map_err(|e| config_error("mixture.symmetry", e.to_string()))
    }

    pub fn predictor(&self) -> Result<PredictorConfig> {
        let mixture = self.mixture()?;
        let decl = &self.predictor;
        if !(decl.gamma >= 0.0 && decl.gamma.is_finite()) {
            return Err(config_error("predictor.gamma", "must be finite and non-negative"));
        }
        let omega = decl.omega.expand(self.grid, "predictor.omega")?;
        let constant = decl
            .constant
            .as_ref()
            .map(|c| {
                let values = c.expand(self.grid, "predictor.constant")?;
                Latent::from_vec(self.grid, values)
            })
            .transpose()?;
        let cfg = PredictorConfig {
            mixture,
            gamma: decl.gamma,
            omega,
            constant,
        };
        cfg.validate().map_err(|e| config_error("predictor", e.to_string()))?;
        Ok(cfg)
    }

    /// Fully populated TOML rendering of this config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// SHA-256 over the settings that determine results. The output
    /// location and the latent-dump flag are excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = String::new();
        canonical.dump_latents = false;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    McCount,
    BranchType,
    TransformType,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 3] = [
        AblationPreset::McCount,
        AblationPreset::BranchType,
        AblationPreset::TransformType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::McCount => "mc-count",
            AblationPreset::BranchType => "branch-type",
            AblationPreset::TransformType => "transform-type",
        }
    }

    pub fn strategies(self) -> Vec<StrategyConfig> {
        use BranchSource::*;
        match self {
            AblationPreset::McCount => vec![
                StrategyConfig::mbdi(4, IndependentSamples),
                StrategyConfig::mc(4, IndependentSamples, 1),
                StrategyConfig::mc(4, IndependentSamples, 2),
                StrategyConfig::mc(4, IndependentSamples, 4),
            ],
            AblationPreset::BranchType => vec![
                StrategyConfig::naive(),
                StrategyConfig::mbdi(4, IndependentSamples),
                StrategyConfig::mbdi(4, RotationsOfInput),
                StrategyConfig::freeinv(PoolPreset::Rotations),
            ],
            AblationPreset::TransformType => vec![
                StrategyConfig::naive(),
                StrategyConfig::freeinv(PoolPreset::Flips),
                StrategyConfig::freeinv(PoolPreset::PatchShuffle),
                StrategyConfig::freeinv(PoolPreset::ValueJitter),
                StrategyConfig::freeinv(PoolPreset::Rotations),
                StrategyConfig::freeinv(PoolPreset::Combination),
            ],
        }
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset `{s}` (expected mc-count, branch-type or transform-type)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentStamp {
    pub precision: String,
    pub version: String,
}

impl EnvironmentStamp {
    pub fn current() -> Self {
        Self {
            precision: "f64".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// One strategy applied to one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance: usize,
    pub strategy_index: usize,
    pub label: String,
    /// The strategy exactly as configured.
    pub strategy: StrategyConfig,
    /// Seed the strategy actually ran with, derived from the master seed.
    pub run_seed: u64,
    pub x0_checksum: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy_index: usize,
    pub label: String,
    pub strategy: StrategyConfig,
    pub instances: usize,
    pub mse: Summary,
    pub psnr: Summary,
    pub ssim: Summary,
    pub triangle_steps: usize,
    pub triangle_violations: usize,
    /// Mean over instances of the per-step L2 noise mismatch.
    pub mismatch_curve: Vec<f64>,
    /// Mean over instances of the per-step L2 trajectory deviation.
    pub deviation_curve: Vec<f64>,
}

impl Aggregate {
    fn from_rows(strategy_index: usize, strategy: &StrategyConfig, rows: &[&InstanceRow]) -> Aggregate {
        let collect = |f: &dyn Fn(&InstanceRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
        let mean_curve = |f: &dyn Fn(&InstanceRow) -> Vec<f64>| -> Vec<f64> {
            let curves: Vec<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
            let len = curves.first().map_or(0, Vec::len);
            (0..len)
                .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
                .collect()
        };
        Aggregate {
            strategy_index,
            label: strategy.label(),
            strategy: strategy.clone(),
            instances: rows.len(),
            mse: Summary::of(&collect(&|r| r.report.fidelity.mse)),
            psnr: Summary::of(&collect(&|r| r.report.fidelity.psnr)),
            ssim: Summary::of(&collect(&|r| r.report.fidelity.ssim)),
            triangle_steps: rows.iter().map(|r| r.report.triangle_steps()).sum(),
            triangle_violations: rows.iter().map(|r| r.report.triangle_violations()).sum(),
            mismatch_curve: mean_curve(&|r| r.report.steps.iter().map(|s| s.mismatch.l2).collect()),
            deviation_curve: mean_curve(&|r| r.report.deviation.iter().map(|g| g.l2).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub inversion_latent: String,
    pub reconstruction_latent: String,
    pub inversion_noise: Option<String>,
    pub reconstruction_noise: Option<String>,
    pub transform: Option<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDump {
    pub inversion: Vec<Vec<f64>>,
    pub reconstruction: Vec<Vec<f64>>,
}

/// Per-step checksums of one round trip, optionally with the raw latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub instance: usize,
    pub strategy_index: usize,
    pub label: String,
    pub run_seed: u64,
    pub steps: Vec<TraceStep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latents: Option<LatentDump>,
}

impl TrajectoryTrace {
    fn new(row: &InstanceRow, inversion: &Trajectory, reconstruction: &Trajectory, dump: bool) -> Self {
        let steps = (0..=inversion.num_steps())
            .map(|t| TraceStep {
                step: t,
                inversion_latent: inversion.latents[t].checksum(),
                reconstruction_latent: reconstruction.latents[t].checksum(),
                inversion_noise: inversion.noises.get(t).map(Latent::checksum),
                reconstruction_noise: reconstruction.noises.get(t).map(Latent::checksum),
                transform: inversion.transforms.as_ref().and_then(|s| s.specs.get(t).cloned()),
            })
            .collect();
        let latents = dump.then(|| LatentDump {
            inversion: inversion.latents.iter().map(|l| l.as_slice().to_vec()).collect(),
            reconstruction: reconstruction.latents.iter().map(|l| l.as_slice().to_vec()).collect(),
        });
        Self {
            instance: row.instance,
            strategy_index: row.strategy_index,
            label: row.label.clone(),
            run_seed: row.run_seed,
            steps,
            latents,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub preset: Option<AblationPreset>,
    pub environment: EnvironmentStamp,
    pub rows: Vec<InstanceRow>,
    pub aggregates: Vec<Aggregate>,
    /// Set when some runs failed; `rows` then holds only the successful ones.
    pub failure: Option<String>,
    #[serde(skip)]
    pub traces: Vec<TrajectoryTrace>,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

/// Timings are host-dependent and take no part in equality.
impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.config == other.config
            && self.preset == other.preset
            && self.environment == other.environment
            && self.rows == other.rows
            && self.aggregates == other.aggregates
            && self.failure == other.failure
            && self.traces == other.traces
    }
}

impl RunRecord {
    pub fn aggregate(&self, label: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.label == label)
    }

    pub fn triangle_violations(&self) -> usize {
        self.aggregates.iter().map(|a| a.triangle_violations).sum()
    }

    /// Fixed-width comparison of the aggregates, one line per strategy.
    pub fn comparison_table(&self) -> String {
        let naive = self.aggregate("naive").map(|a| a.mse.mean);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>10} {:>9} {:>9} {:>9} {:>10}",
            "strategy", "mse", "mse_std", "psnr", "ssim", "vs_naive", "tri_viol"
        );
        for a in &self.aggregates {
            let ratio = naive.map_or("-".to_string(), |n| format!("{:.4}", a.mse.mean / n));
            let _ = writeln!(
                out,
                "{:<24} {:>12.4e} {:>10.2e} {:>9.3} {:>9.5} {:>9} {:>10}",
                a.label, a.mse.mean, a.mse.std, a.psnr.mean, a.ssim.mean, ratio, a.triangle_violations
            );
        }
        out
    }
}

/// Clean latent for instance `i`.
pub fn draw_instance(mixture: &GaussianMixture, master_seed: u64, instance: usize) -> Latent {
    let mut r = rng::substream(rng::derive_seed(master_seed, purpose::INSTANCE, 0), instance as u64);
    mixture.sample(&mut r)
}

/// Seed strategy `strategy` runs with on instance `instance`.
pub fn run_seed(master_seed: u64, instance: usize, strategy: &StrategyConfig) -> u64 {
    rng::derive_seed(
        rng::derive_seed(master_seed, purpose::STRATEGY, instance as u64),
        strategy.seed,
        0,
    )
}

struct JobOutput {
    row: InstanceRow,
    trace: TrajectoryTrace,
}

fn run_job(
    cfg: &ExperimentConfig,
    predictor: &PredictorConfig,
    sched: &NoiseSchedule,
    x0: &Latent,
    instance: usize,
    strategy_index: usize,
) -> Result<JobOutput> {
    let strategy = &cfg.strategies[strategy_index];
    let seed = run_seed(cfg.seed, instance, strategy);
    let effective = strategy.clone().with_seed(seed);

    let started = Instant::now();
    let inversion = run_inversion(&effective, predictor, sched, x0)?;
    let inversion_secs = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let replay = inversion.replay(&effective)?;
    let reconstruction = run_reconstruction(&effective, predictor, sched, inversion.end(), &replay)?;
    let reconstruction_secs = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let mut report = MetricsReport::from_round_trip(sched, &inversion, &reconstruction)?;
    report.timings = PhaseTimings {
        inversion_secs,
        reconstruction_secs,
        metrics_secs: started.elapsed().as_secs_f64(),
    };

    let row = InstanceRow {
        instance,
        strategy_index,
        label: strategy.label(),
        strategy: strategy.clone(),
        run_seed: seed,
        x0_checksum: x0.checksum(),
        report,
    };
    let trace = TrajectoryTrace::new(&row, &inversion, &reconstruction, cfg.dump_latents);
    Ok(JobOutput { row, trace })
}

/// Runs every configured strategy on every instance.
///
/// Jobs run in parallel but results are collected in (instance, strategy)
/// order, so the record does not depend on scheduling. A failing job does
/// not abort the run: the record keeps the successful rows and a failure
/// marker. Invalid configs are rejected up front.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let sched = cfg.noise_schedule()?;
    let predictor = cfg.predictor()?;
    let x0s: Vec<Latent> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| draw_instance(&predictor.mixture, cfg.seed, i))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.instances)
        .flat_map(|i| (0..cfg.strategies.len()).map(move |s| (i, s)))
        .collect();
    let outputs: Vec<Result<JobOutput>> = jobs
        .par_iter()
        .map(|&(i, s)| run_job(cfg, &predictor, &sched, &x0s[i], i, s))
        .collect();

    let mut rows = Vec::with_capacity(outputs.len());
    let mut traces = Vec::with_capacity(outputs.len());
    let mut failures = Vec::new();
    let mut timings = PhaseTimings::default();
    for ((i, s), out) in jobs.iter().zip(outputs) {
        match out {
            Ok(JobOutput { row, trace }) => {
                timings.inversion_secs += row.report.timings.inversion_secs;
                timings.reconstruction_secs += row.report.timings.reconstruction_secs;
                timings.metrics_secs += row.report.timings.metrics_secs;
                rows.push(row);
                traces.push(trace);
            }
            Err(e) => failures.push(format!("instance {i}, strategy {}: {e}", cfg.strategies[*s].label())),
        }
    }

    let aggregates = cfg
        .strategies
        .iter()
        .enumerate()
        .filter_map(|(s, strategy)| {
            let mine: Vec<&InstanceRow> = rows.iter().filter(|r| r.strategy_index == s).collect();
            (!mine.is_empty()).then(|| Aggregate::from_rows(s, strategy, &mine))
        })
        .collect();

    Ok(RunRecord {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        preset: None,
        environment: EnvironmentStamp::current(),
        rows,
        aggregates,
        failure: (!failures.is_empty()).then(|| failures.join("; ")),
        traces,
        timings,
    })
}

/// Runs `base` with its strategy list replaced by the preset's.
pub fn ablate(preset: AblationPreset, base: &ExperimentConfig) -> Result<RunRecord> {
    base.validate()?;
    let cfg = ExperimentConfig {
        strategies: preset.strategies(),
        ..base.clone()
    };
    let mut record = run_experiment(&cfg)?;
    record.preset = Some(preset);
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}` (expected csv, json or svg)"))),
        }
    }
}

/// Parses a comma-separated format list; an empty string means no formats.
pub fn parse_formats(list: &str) -> Result<Vec<Format>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let f: Format = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    row_kind: &'static str,
    strategy_index: usize,
    label: &'a str,
    instance: Option<usize>,
    instances: usize,
    mse: f64,
    psnr: f64,
    ssim: f64,
    mse_std: Option<f64>,
    psnr_std: Option<f64>,
    ssim_std: Option<f64>,
    triangle_steps: usize,
    triangle_violations: usize,
}

#[derive(Serialize)]
struct StepRow<'a> {
    strategy_index: usize,
    label: &'a str,
    instance: usize,
    step: usize,
    mismatch_mean_abs: Option<f64>,
    mismatch_l2: Option<f64>,
    bound: Option<f64>,
    deviation_mean_abs: f64,
    deviation_l2: f64,
    triangle_holds: Option<bool>,
    triangle_slack: Option<f64>,
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    config_hash: &'a str,
    preset: Option<AblationPreset>,
    environment: &'a EnvironmentStamp,
    failure: Option<&'a str>,
    aggregates: Vec<SummaryEntry<'a>>,
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    label: &'a str,
    strategy: &'a StrategyConfig,
    instances: usize,
    mse: Summary,
    psnr: Summary,
    ssim: Summary,
    triangle_steps: usize,
    triangle_violations: usize,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Serialize(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
}

pub fn results_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let instance_rows = record.rows.iter().map(|r| ResultRow {
        row_kind: "instance",
        strategy_index: r.strategy_index,
        label: &r.label,
        instance: Some(r.instance),
        instances: 1,
        mse: r.report.fidelity.mse,
        psnr: r.report.fidelity.psnr,
        ssim: r.report.fidelity.ssim,
        mse_std: None,
        psnr_std: None,
        ssim_std: None,
        triangle_steps: r.report.triangle_steps(),
        triangle_violations: r.report.triangle_violations(),
    });
    let aggregate_rows = record.aggregates.iter().map(|a| ResultRow {
        row_kind: "aggregate",
        strategy_index: a.strategy_index,
        label: &a.label,
        instance: None,
        instances: a.instances,
        mse: a.mse.mean,
        psnr: a.psnr.mean,
        ssim: a.ssim.mean,
        mse_std: Some(a.mse.std),
        psnr_std: Some(a.psnr.std),
        ssim_std: Some(a.ssim.std),
        triangle_steps: a.triangle_steps,
        triangle_violations: a.triangle_violations,
    });
    csv_bytes(instance_rows.chain(aggregate_rows))
}

pub fn steps_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let rows = record.rows.iter().flat_map(|r| {
        r.report.deviation.iter().enumerate().map(move |(t, dev)| {
            let step = r.report.steps.get(t);
            StepRow {
                strategy_index: r.strategy_index,
                label: &r.label,
                instance: r.instance,
                step: t,
                mismatch_mean_abs: step.map(|s| s.mismatch.mean_abs),
                mismatch_l2: step.map(|s| s.mismatch.l2),
                bound: step.map(|s| s.bound),
                deviation_mean_abs: dev.mean_abs,
                deviation_l2: dev.l2,
                triangle_holds: step.and_then(|s| s.triangle).map(|c| c.holds),
                triangle_slack: step.and_then(|s| s.triangle).map(|c| c.slack),
            }
        })
    });
    csv_bytes(rows)
}

pub fn summary_json(record: &RunRecord) -> Result<Vec<u8>> {
    let summary = JsonSummary {
        config_hash: &record.config_hash,
        preset: record.preset,
        environment: &record.environment,
        failure: record.failure.as_deref(),
        aggregates: record
            .aggregates
            .iter()
            .map(|a| SummaryEntry {
                label: &a.label,
                strategy: &a.strategy,
                instances: a.instances,
                mse: a.mse,
                psnr: a.psnr,
                ssim: a.ssim,
                triangle_steps: a.triangle_steps,
                triangle_violations: a.triangle_violations,
            })
            .collect(),
    };
    pretty_json(&summary)
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub const PLOT_FLOOR: f64 = 1e-16;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of one curve per strategy on a log10 y-axis. Values below
/// [`PLOT_FLOOR`] (including exact zeros) are drawn at the floor.
pub fn curve_svg(title: &str, curves: &[(&str, &[f64])]) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let logs: Vec<Vec<f64>> = curves
        .iter()
        .map(|(_, c)| c.iter().map(|v| v.max(PLOT_FLOOR).log10()).collect())
        .collect();
    let all = logs.iter().flatten();
    let lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b)).floor();
    let hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b)).ceil();
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (-1.0, 0.0) };
    let max_len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let x_span = (max_len.max(2) - 1) as f64;
    let px = |i: usize| left + plot_w * i as f64 / x_span;
    let py = |v: f64| top + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let decades = (hi - lo) as i64;
    let every = (decades / 8).max(1);
    for k in (0..=decades).step_by(every as usize) {
        let v = lo + k as f64;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#dddddd"/>"##,
            left + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{}</text>"#,
            left - 6.0,
            y + 4.0,
            v as i64
        );
    }
    let tick = (max_len / 10).max(1);
    for i in (0..max_len).step_by(tick) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{i}</text>"#,
            px(i),
            top + plot_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#,
        left + plot_w / 2.0,
        height - 10.0
    );
    for (k, ((label, _), ys)) in curves.iter().zip(&logs).enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.6" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// File stem for a record: the preset name, or `roundtrip`.
pub fn record_stem(record: &RunRecord) -> &'static str {
    record.preset.map_or("roundtrip", AblationPreset::name)
}

/// Writes `record` to `dir` in each requested format and returns the paths written.
///
/// `csv` writes `<stem>.csv` (instance and aggregate rows) and
/// `<stem>.steps.csv`; `json` writes `<stem>.json` (summary),
/// `<stem>.record.json` (full record) and, when traces are present,
/// `<stem>.trajectories.json`; `svg` writes the mismatch and deviation plots.
pub fn emit(record: &RunRecord, formats: &[Format], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if formats.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = record_stem(record);
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for format in formats {
        match format {
            Format::Csv => {
                files.push((format!("{stem}.csv"), results_csv(record)?));
                files.push((format!("{stem}.steps.csv"), steps_csv(record)?));
            }
            Format::Json => {
                files.push((format!("{stem}.json"), summary_json(record)?));
                files.push((format!("{stem}.record.json"), pretty_json(record)?));
                if !record.traces.is_empty() {
                    files.push((format!("{stem}.trajectories.json"), pretty_json(&record.traces)?));
                }
            }
            Format::Svg => {
                let mismatch: Vec<(&str, &[f64])> = record
                    .aggregates
                    .iter()
                    .map(|a| (a.label.as_str(), a.mismatch_curve.as_slice()))
                    .collect();
                let deviation: Vec<(&str, &[f64])> = record
                    .aggregates
                    .iter()
                    .map(|a| (a.label.as_str(), a.deviation_curve.as_slice()))
                    .collect();
                files.push((
                    format!("{stem}.mismatch.svg"),
                    curve_svg("mean per-step noise mismatch (L2)", &mismatch).into_bytes(),
                ));
                files.push((
                    format!("{stem}.deviation.svg"),
                    curve_svg("mean trajectory deviation (L2)", &deviation).into_bytes(),
                ));
            }
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a full record previously written by [`emit`].
pub fn load_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
