use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::recipe::{Recipe, RECIPE_SWEEP};
use super::train::{run_recipe, EpochRecord, RunOutputs, RunRecord, TrainContext};
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, Divergence, TargetMask};
use crate::model::{ModelConfig, MultimodalModel, VisualEncoder};
use crate::tensor::Scalar;

/// The recipe every non-recipe axis varies around.
pub const FULL_RECIPE: &str = "DPT-SFT-DFT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Recipes,
    Divergences,
    Targets,
    TeacherSizes,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Recipes,
        AblationAxis::Divergences,
        AblationAxis::Targets,
        AblationAxis::TeacherSizes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Recipes => "recipes",
            AblationAxis::Divergences => "divergences",
            AblationAxis::Targets => "targets",
            AblationAxis::TeacherSizes => "teacher_sizes",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = AblationAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Parse(format!(
                    "unknown ablation axis {s:?}; valid axes: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// One cell of an ablation: a recipe plus the teacher it distills from.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub recipe: Recipe,
    /// Index into the teacher list handed to [`run_ablation`].
    pub teacher: usize,
}

/// The cells of `axis`. `teacher_names` matters only for the teacher-size
/// axis; every other axis distills from the first teacher.
pub fn variants(
    axis: AblationAxis,
    train: &super::TrainConfig,
    base: &DistillConfig,
    teacher_names: &[String],
) -> Result<Vec<Variant>> {
    let cell = |label: String, recipe: &str, distill: &DistillConfig, teacher| {
        Ok(Variant {
            label,
            recipe: Recipe::parse(recipe, train, distill)?,
            teacher,
        })
    };
    match axis {
        AblationAxis::Recipes => RECIPE_SWEEP
            .iter()
            .map(|r| cell(r.to_string(), r, base, 0))
            .collect(),
        AblationAxis::Divergences => Divergence::ALL
            .iter()
            .map(|&d| {
                let distill = DistillConfig {
                    divergence: d,
                    ..base.clone()
                };
                cell(d.to_string(), FULL_RECIPE, &distill, 0)
            })
            .collect(),
        AblationAxis::Targets => {
            let mut out = Vec::new();
            for stage in ["DPT", "DFT"] {
                for mask in TargetMask::SWEEP {
                    let mut distill = base.clone();
                    match stage {
                        "DPT" => distill.dpt.targets = mask,
                        _ => distill.dft.targets = mask,
                    }
                    out.push(cell(format!("{stage} {mask}"), FULL_RECIPE, &distill, 0)?);
                }
            }
            Ok(out)
        }
        AblationAxis::TeacherSizes => {
            if teacher_names.is_empty() {
                return Err(Error::Config(
                    "the teacher_sizes axis needs at least one teacher".into(),
                ));
            }
            teacher_names
                .iter()
                .enumerate()
                .map(|(i, name)| cell(name.clone(), FULL_RECIPE, base, i))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1 is best.
    pub rank: usize,
    pub label: String,
    pub recipe: String,
    pub mean_accuracy: f64,
    pub mean_ce: f64,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    /// Ordered by rank: accuracy descending, then cross-entropy ascending.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut s = String::new();
        let _ = writeln!(s, "ablation: {}", self.axis);
        let _ = writeln!(
            s,
            "{:>4}  {:<width$}  {:>8}  {:>8}  seeds",
            "rank", "variant", "accuracy", "ce"
        );
        for r in &self.rows {
            let seeds: Vec<_> = r.runs.iter().map(|x| x.seed.to_string()).collect();
            let _ = writeln!(
                s,
                "{:>4}  {:<width$}  {:>8.4}  {:>8.4}  {}",
                r.rank,
                r.label,
                r.mean_accuracy,
                r.mean_ce,
                seeds.join(",")
            );
        }
        s
    }
}

pub type CellEpochHook<'a> = &'a mut dyn FnMut(&str, &EpochRecord) -> Result<()>;

/// Sinks for the by-products of an ablation.
#[derive(Default)]
pub struct AblationOutputs<'a> {
    /// Each cell checkpoints into its own subdirectory here.
    pub checkpoint_root: Option<&'a Path>,
    /// Receives every epoch record with the label of its cell.
    pub on_epoch: Option<CellEpochHook<'a>>,
}

/// File-name-safe form of a cell label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every cell for every seed, one isolated student per run, and
/// ranks the cells by mean held-out accuracy.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<S: Scalar>(
    axis: AblationAxis,
    cells: &[Variant],
    student: &ModelConfig,
    encoder: &Arc<VisualEncoder<S>>,
    teachers: &[&MultimodalModel<S>],
    ctx: TrainContext<'_, S>,
    seeds: &[u64],
    outputs: &mut AblationOutputs<'_>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let teacher = match teachers.get(cell.teacher) {
            Some(t) => Some(*t),
            None if cell.recipe.needs_teacher() => {
                return Err(Error::Config(format!("cell {} has no teacher", cell.label)));
            }
            None => None,
        };
        let dir = outputs
            .checkpoint_root
            .map(|root| root.join(slug(&cell.label)));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut forward = |r: &EpochRecord| match outputs.on_epoch.as_mut() {
                Some(f) => f(&cell.label, r),
                None => Ok(()),
            };
            let mut run_out = RunOutputs {
                checkpoint_dir: dir.as_deref(),
                on_epoch: Some(&mut forward),
                on_step: None,
            };
            let (_, record) = run_recipe(
                &cell.recipe,
                student,
                encoder.clone(),
                teacher,
                ctx,
                seed,
                &mut run_out,
            )?;
            runs.push(record);
        }
        let n = runs.len() as f64;
        rows.push(AblationRow {
            rank: 0,
            label: cell.label.clone(),
            recipe: cell.recipe.label(),
            mean_accuracy: runs.iter().map(|r| r.eval.accuracy).sum::<f64>() / n,
            mean_ce: runs.iter().map(|r| r.eval.ce).sum::<f64>() / n,
            runs,
        });
    }
    rows.sort_by(|a, b| {
        b.mean_accuracy
            .total_cmp(&a.mean_accuracy)
            .then(a.mean_ce.total_cmp(&b.mean_ce))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(AblationTable { axis, rows })
}
