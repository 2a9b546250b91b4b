//! Invertible latent transformations and their per-step schedules.
//!
//! A transformation stands in for one branch of a multi-branch inversion:
//! predicting noise at `f(x)` instead of at a separately stored latent. All
//! kinds are exactly invertible. Every kind except value jitter is a pure
//! permutation of grid entries, so applying and inverting it is bit-exact and
//! norm-preserving.
//!
//! Rotation convention: clockwise quarter-turns in the (row, col) plane,
//! channels untouched. One clockwise turn maps `[[1,2],[3,4]]` to `[[3,1],[4,2]]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{GridShape, Latent};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    /// `quarter_turns` clockwise quarter-turns, in `1..=3`.
    Rotate { quarter_turns: u8 },
    /// Mirror left-right (reverses columns).
    FlipHorizontal,
    /// Mirror top-bottom (reverses rows).
    FlipVertical,
    /// Square patches of side `patch_size`, indexed row-major over the patch
    /// grid. Output patch `k` is input patch `permutation[k]`.
    PatchShuffle {
        patch_size: usize,
        permutation: Vec<usize>,
    },
    /// `x ↦ scale * x + shift` on every entry.
    ValueJitter { scale: f64, shift: f64 },
}

impl TransformSpec {
    pub fn rotate(quarter_turns: u8) -> Self {
        match quarter_turns % 4 {
            0 => TransformSpec::Identity,
            q => TransformSpec::Rotate { quarter_turns: q },
        }
    }

    /// Permutation kinds are orthogonal and act without changing values.
    pub fn is_value_preserving(&self) -> bool {
        !matches!(self, TransformSpec::ValueJitter { .. })
    }

    pub fn check_compatible(&self, shape: GridShape) -> Result<()> {
        match self {
            TransformSpec::Identity
            | TransformSpec::FlipHorizontal
            | TransformSpec::FlipVertical => Ok(()),
            TransformSpec::Rotate { quarter_turns } => {
                if !(1..=3).contains(quarter_turns) {
                    return Err(Error::Transform(format!(
                        "rotation must be 1..=3 quarter turns, got {quarter_turns}"
                    )));
                }
                if !shape.is_square() {
                    return Err(Error::ShapeMismatch {
                        expected: "square grid (H = W) for rotation".into(),
                        actual: shape.to_string(),
                    });
                }
                Ok(())
            }
            TransformSpec::PatchShuffle {
                patch_size,
                permutation,
            } => {
                check_patch_size(*patch_size, shape)?;
                let count = (shape.height / patch_size) * (shape.width / patch_size);
                if permutation.len() != count {
                    return Err(Error::Transform(format!(
                        "patch permutation has {} entries, grid has {count} patches",
                        permutation.len()
                    )));
                }
                let mut seen = vec![false; count];
                for &p in permutation {
                    if p >= count || std::mem::replace(&mut seen[p], true) {
                        return Err(Error::Transform(
                            "patch permutation is not a bijection".into(),
                        ));
                    }
                }
                Ok(())
            }
            TransformSpec::ValueJitter { scale, shift } => {
                if !(scale.is_finite() && *scale > 0.0 && shift.is_finite()) {
                    return Err(Error::Transform(format!(
                        "value jitter needs finite scale > 0 and finite shift, got ({scale}, {shift})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, x: &Latent) -> Result<Latent> {
        let shape = x.shape();
        self.check_compatible(shape)?;
        let out = match self {
            TransformSpec::Identity => x.clone(),
            TransformSpec::ValueJitter { scale, shift } => x.map(|v| scale * v + shift),
            _ => {
                let (h, w) = (shape.height, shape.width);
                Latent::from_fn(shape, |row, col, ch| {
                    let (r, c) = self.source_cell(h, w, row, col);
                    x.get(r, c, ch)
                })
            }
        };
        Ok(out)
    }

    /// Cell of the input grid that lands on output cell `(row, col)`.
    fn source_cell(&self, h: usize, w: usize, row: usize, col: usize) -> (usize, usize) {
        match self {
            TransformSpec::Identity | TransformSpec::ValueJitter { .. } => (row, col),
            TransformSpec::Rotate { quarter_turns } => match quarter_turns {
                1 => (h - 1 - col, row),
                2 => (h - 1 - row, w - 1 - col),
                _ => (col, w - 1 - row),
            },
            TransformSpec::FlipHorizontal => (row, w - 1 - col),
            TransformSpec::FlipVertical => (h - 1 - row, col),
            TransformSpec::PatchShuffle {
                patch_size,
                permutation,
            } => {
                let per_row = w / patch_size;
                let k = (row / patch_size) * per_row + col / patch_size;
                let src = permutation[k];
                (
                    (src / per_row) * patch_size + row % patch_size,
                    (src % per_row) * patch_size + col % patch_size,
                )
            }
        }
    }

    pub fn invert(&self) -> TransformSpec {
        match self {
            TransformSpec::Identity => TransformSpec::Identity,
            TransformSpec::Rotate { quarter_turns } => TransformSpec::rotate(4 - quarter_turns % 4),
            TransformSpec::FlipHorizontal => TransformSpec::FlipHorizontal,
            TransformSpec::FlipVertical => TransformSpec::FlipVertical,
            TransformSpec::PatchShuffle {
                patch_size,
                permutation,
            } => {
                let mut inverse = vec![0; permutation.len()];
                for (k, &src) in permutation.iter().enumerate() {
                    inverse[src] = k;
                }
                TransformSpec::PatchShuffle {
                    patch_size: *patch_size,
                    permutation: inverse,
                }
            }
            TransformSpec::ValueJitter { scale, shift } => TransformSpec::ValueJitter {
                scale: 1.0 / scale,
                shift: -shift / scale,
            },
        }
    }
}

fn check_patch_size(patch_size: usize, shape: GridShape) -> Result<()> {
    if patch_size == 0 || shape.height % patch_size != 0 || shape.width % patch_size != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("grid divisible by patch size {patch_size}"),
            actual: shape.to_string(),
        });
    }
    Ok(())
}

/// One entry of a transform pool. Sampling picks an entry uniformly, then
/// the entry draws its own parameters uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformGenerator {
    Fixed { spec: TransformSpec },
    /// Uniform over 0, 1, 2, 3 clockwise quarter-turns.
    AnyRotation,
    /// Uniform over identity, horizontal flip, vertical flip.
    AnyFlip,
    /// Uniformly random permutation of `patch_size`-sided patches.
    PatchShuffle { patch_size: usize },
    /// `scale ~ U[1 - max_scale_deviation, 1 + max_scale_deviation]`,
    /// `shift ~ U[-max_shift, max_shift]`.
    ValueJitter {
        max_scale_deviation: f64,
        max_shift: f64,
    },
}

impl TransformGenerator {
    pub fn check_compatible(&self, shape: GridShape) -> Result<()> {
        match self {
            TransformGenerator::Fixed { spec } => spec.check_compatible(shape),
            TransformGenerator::AnyRotation => TransformSpec::rotate(1).check_compatible(shape),
            TransformGenerator::AnyFlip => Ok(()),
            TransformGenerator::PatchShuffle { patch_size } => check_patch_size(*patch_size, shape),
            TransformGenerator::ValueJitter {
                max_scale_deviation,
                max_shift,
            } => {
                if !(0.0..1.0).contains(max_scale_deviation) || !(*max_shift >= 0.0 && max_shift.is_finite()) {
                    return Err(Error::Transform(format!(
                        "value jitter ranges need 0 <= max_scale_deviation < 1 and finite max_shift >= 0, \
                         got ({max_scale_deviation}, {max_shift})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, shape: GridShape, rng: &mut R) -> TransformSpec {
        match self {
            TransformGenerator::Fixed { spec } => spec.clone(),
            TransformGenerator::AnyRotation => TransformSpec::rotate(rng.random_range(0..4u8)),
            TransformGenerator::AnyFlip => match rng.random_range(0..3u8) {
                0 => TransformSpec::Identity,
                1 => TransformSpec::FlipHorizontal,
                _ => TransformSpec::FlipVertical,
            },
            TransformGenerator::PatchShuffle { patch_size } => {
                let count = (shape.height / patch_size) * (shape.width / patch_size);
                let mut permutation: Vec<usize> = (0..count).collect();
                // Fisher-Yates, written out so the draw sequence is explicit.
                for i in (1..count).rev() {
                    let j = rng.random_range(0..=i);
                    permutation.swap(i, j);
                }
                TransformSpec::PatchShuffle {
                    patch_size: *patch_size,
                    permutation,
                }
            }
            TransformGenerator::ValueJitter {
                max_scale_deviation,
                max_shift,
            } => {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                TransformSpec::ValueJitter {
                    scale: 1.0 + max_scale_deviation * (2.0 * u - 1.0),
                    shift: max_shift * (2.0 * v - 1.0),
                }
            }
        }
    }
}

/// Named transform pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolPreset {
    Identity,
    Rotations,
    Flips,
    PatchShuffle,
    ValueJitter,
    Combination,
}

pub const DEFAULT_PATCH_SIZE: usize = 4;
pub const DEFAULT_JITTER_SCALE: f64 = 0.1;
pub const DEFAULT_JITTER_SHIFT: f64 = 0.1;

impl PoolPreset {
    pub fn generators(self) -> Vec<TransformGenerator> {
        let fixed = |spec| TransformGenerator::Fixed { spec };
        let jitter = TransformGenerator::ValueJitter {
            max_scale_deviation: DEFAULT_JITTER_SCALE,
            max_shift: DEFAULT_JITTER_SHIFT,
        };
        let patches = TransformGenerator::PatchShuffle {
            patch_size: DEFAULT_PATCH_SIZE,
        };
        match self {
            PoolPreset::Identity => vec![fixed(TransformSpec::Identity)],
            PoolPreset::Rotations => (0..4).map(|q| fixed(TransformSpec::rotate(q))).collect(),
            PoolPreset::Flips => vec![
                fixed(TransformSpec::Identity),
                fixed(TransformSpec::FlipHorizontal),
                fixed(TransformSpec::FlipVertical),
            ],
            PoolPreset::PatchShuffle => vec![patches],
            PoolPreset::ValueJitter => vec![jitter],
            PoolPreset::Combination => vec![
                TransformGenerator::AnyRotation,
                TransformGenerator::AnyFlip,
                patches,
                jitter,
            ],
        }
    }
}

/// The transforms applied at each step `t = 0..T`, reproducible from
/// `(pool, shape, seed)` alone. One schedule drives both the inversion and the
/// matching reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSchedule {
    pub pool: Vec<TransformGenerator>,
    pub shape: GridShape,
    pub seed: u64,
    pub specs: Vec<TransformSpec>,
}

/// One `(step, spec)` line of a serialized schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub step: usize,
    pub spec: TransformSpec,
}

impl TransformSchedule {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn entries(&self) -> Vec<ScheduleEntry> {
        self.specs
            .iter()
            .enumerate()
            .map(|(step, spec)| ScheduleEntry {
                step,
                spec: spec.clone(),
            })
            .collect()
    }

    /// Checks that the recorded specs are exactly what `(pool, shape, seed)`
    /// regenerates and that the length is `steps`.
    pub fn verify(&self, steps: usize) -> Result<()> {
        if self.specs.len() != steps {
            return Err(Error::Replay(format!(
                "transform schedule has {} steps, trajectory has {steps}",
                self.specs.len()
            )));
        }
        let fresh = sample_schedule(&self.pool, self.shape, steps, self.seed)?;
        if let Some(t) = (0..steps).find(|&t| fresh.specs[t] != self.specs[t]) {
            return Err(Error::Replay(format!(
                "transform at step {t} does not match the schedule regenerated from its seed"
            )));
        }
        Ok(())
    }
}

/// Draws one spec per step, uniformly over the pool. Step `t` draws from
/// substream `t` of `seed`, so each step is independent of the others.
pub fn sample_schedule(
    pool: &[TransformGenerator],
    shape: GridShape,
    steps: usize,
    seed: u64,
) -> Result<TransformSchedule> {
    if pool.is_empty() {
        return Err(Error::Transform("transform pool is empty".into()));
    }
    if steps == 0 {
        return Err(Error::Transform("schedule needs at least one step".into()));
    }
    for generator in pool {
        generator.check_compatible(shape)?;
    }
    let specs = (0..steps)
        .map(|t| {
            let mut rng = rng::substream(seed, t as u64);
            let pick = rng.random_range(0..pool.len());
            pool[pick].sample(shape, &mut rng)
        })
        .collect();
    Ok(TransformSchedule {
        pool: pool.to_vec(),
        shape,
        seed,
        specs,
    })
}
