use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{train, RunRecord};
use super::HarnessError;
use crate::eval::{clip_score_filter, EvalReport, FilterResult};
use crate::losses::Objective;
use crate::model::DualEncoder;
use crate::toyworld::{concept_subsets, splitmix64, Dataset};

/// Mean and sample standard deviation of per-seed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, values }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.sd)
    }
}

fn final_report(r: &RunRecord) -> Result<&EvalReport, HarnessError> {
    r.final_report().ok_or_else(|| HarnessError::Internal("run finished without an evaluation".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub objective: Objective,
    pub neg_captions: bool,
    pub neg_images: bool,
    pub pairs_seen: Vec<u64>,
    pub compositional: Stat,
    pub retrieval_r5: Stat,
    pub zeroshot_top1: Stat,
    /// Mean image-modality cosine between positive and negative images.
    pub image_pos_neg_cosine: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub pairs_budget: u64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub records: Vec<RunRecord>,
}

impl AblationTable {
    pub const COLUMNS: [&'static str; 3] = ["compositional", "retrieval R@5", "zero-shot top-1"];

    pub fn row(&self, objective: Objective) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.objective == objective)
    }

    /// Markdown table, one row per objective, cells as mean ± sd in percent.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = format!(
            "| objective | neg captions | neg images | {} |\n|---|---|---|---|---|---|\n",
            Self::COLUMNS.join(" | ")
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                r.objective,
                mark(r.neg_captions),
                mark(r.neg_images),
                r.compositional,
                r.retrieval_r5,
                r.zeroshot_top1
            );
        }
        s
    }
}

/// Trains every objective under every seed with a shared budget and eval cadence.
pub fn run_ablation_matrix(
    base: &TrainConfig,
    objectives: &[Objective],
    seeds: &[u64],
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<AblationTable, HarnessError> {
    if objectives.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one objective and one seed".into()));
    }
    for &objective in objectives {
        super::check_compatible(&TrainConfig { objective, ..base.clone() }, train_ds)?;
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &objective in objectives {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { objective, seed, ..base.clone() };
            let dir = out_dir.map(|d| d.join(format!("{objective}_seed{seed}")));
            let (_, record) = train(&cfg, train_ds, Some(eval_ds), dir.as_deref())?;
            runs.push(record);
        }
        let reports: Vec<&EvalReport> = runs.iter().map(final_report).collect::<Result<_, _>>()?;
        let stat = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(reports.iter().map(|r| f(r)).collect());
        rows.push(AblationRow {
            objective,
            neg_captions: objective.needs_txt_neg(),
            neg_images: objective.needs_img_neg(),
            pairs_seen: runs.iter().map(|r| r.ledger.pairs_seen).collect(),
            compositional: stat(&|r| r.binary_acc_overall),
            retrieval_r5: stat(&|r| r.retrieval_r5()),
            zeroshot_top1: stat(&|r| r.zeroshot.top1),
            image_pos_neg_cosine: stat(&|r| r.sim_hist_image.mean),
        });
        records.extend(runs);
    }
    let table = AblationTable {
        pairs_budget: base.pairs_budget,
        batch_size: base.batch_size,
        seeds: seeds.to_vec(),
        rows,
        records,
    };
    if let Some(d) = out_dir {
        std::fs::write(d.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
        std::fs::write(d.join("ablation.md"), table.render())?;
    }
    Ok(table)
}

/// The first `ceil(len / 2)` of `indices` after a seeded shuffle, in ascending order.
pub fn half_of(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed, 0x4841_4c46)));
    v.truncate(indices.len().div_ceil(2));
    v.sort_unstable();
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptPoint {
    pub target: usize,
    pub atoms: Vec<String>,
    pub subset_size: usize,
    pub clip: RunRecord,
    pub tripletclip: RunRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSweep {
    pub targets: Vec<usize>,
    pub points: Vec<ConceptPoint>,
    /// Per target, `[clip, tripletclip]` values of each panel.
    pub compositional: Vec<[f64; 2]>,
    pub retrieval_r5: Vec<[f64; 2]>,
    pub zeroshot_top1: Vec<[f64; 2]>,
}

/// For each concept target: clip on the whole subset against tripletclip on half its
/// positives with their negatives, both under the same pairs budget.
pub fn run_concept_sweep(
    base: &TrainConfig,
    targets: &[usize],
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<ConceptSweep, HarnessError> {
    if !train_ds.has_negatives() {
        return Err(HarnessError::Data("concept sweep needs a dataset with hard negatives".into()));
    }
    let subsets = concept_subsets(&train_ds.examples, targets)?;
    let mut points = Vec::new();
    for s in subsets {
        let half = half_of(&s.indices, base.seed);
        if half.len() < base.batch_size {
            return Err(HarnessError::Data(format!(
                "concept target {} selects {} examples; half of them ({}) is below batch_size {}",
                s.target,
                s.indices.len(),
                half.len(),
                base.batch_size
            )));
        }
        let full = train_ds.select(&s.indices, &format!("concepts={}", s.target)).positives_only();
        let halved = train_ds.select(&half, &format!("concepts={} half", s.target));
        let dir = |name: &str| out_dir.map(|d| d.join(format!("concepts{}_{name}", s.target)));
        let clip_cfg = TrainConfig { objective: Objective::Clip, ..base.clone() };
        let trip_cfg = TrainConfig { objective: Objective::Tripletclip, ..base.clone() };
        let (_, clip) = train(&clip_cfg, &full, Some(eval_ds), dir("clip").as_deref())?;
        let (_, tripletclip) = train(&trip_cfg, &halved, Some(eval_ds), dir("tripletclip").as_deref())?;
        points.push(ConceptPoint { target: s.target, atoms: s.atoms, subset_size: s.indices.len(), clip, tripletclip });
    }
    let panel = |f: &dyn Fn(&EvalReport) -> f64| -> Result<Vec<[f64; 2]>, HarnessError> {
        points.iter().map(|p| Ok([f(final_report(&p.clip)?), f(final_report(&p.tripletclip)?)])).collect()
    };
    let sweep = ConceptSweep {
        targets: targets.to_vec(),
        compositional: panel(&|r| r.binary_acc_overall)?,
        retrieval_r5: panel(&|r| r.retrieval_r5())?,
        zeroshot_top1: panel(&|r| r.zeroshot.top1)?,
        points,
    };
    if let Some(d) = out_dir {
        std::fs::write(d.join("concept_sweep.json"), serde_json::to_vec_pretty(&sweep)?)?;
    }
    Ok(sweep)
}

/// One row of a filtered-versus-unfiltered comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub examples: usize,
    pub pairs_budget: u64,
    pub pairs_seen: u64,
    pub compositional: f64,
    pub retrieval_r5: f64,
    pub zeroshot_top1: f64,
}

impl ComparisonRow {
    pub fn of(label: &str, record: &RunRecord) -> Result<Self, HarnessError> {
        let r = final_report(record)?;
        Ok(Self {
            label: label.to_string(),
            examples: record.train_examples,
            pairs_budget: record.pairs_budget,
            pairs_seen: record.ledger.pairs_seen,
            compositional: r.binary_acc_overall,
            retrieval_r5: r.retrieval_r5(),
            zeroshot_top1: r.zeroshot.top1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRun {
    pub keep_fraction: f64,
    pub filter: FilterResult,
    pub record: RunRecord,
    pub row: ComparisonRow,
}

/// Keeps the best-scoring `keep_fraction` of `train_ds` under `reference` and trains
/// `base` on it with the budget scaled by the same fraction.
pub fn run_filtered(
    base: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    reference: &DualEncoder,
    keep_fraction: f64,
    out_dir: Option<&Path>,
) -> Result<FilterRun, HarnessError> {
    let filter = clip_score_filter(train_ds, reference, keep_fraction)?;
    let kept = train_ds.select(&filter.kept, &format!("filtered keep={keep_fraction}"));
    let budget = (base.pairs_budget as f64 * keep_fraction).round() as u64;
    let cfg = TrainConfig { pairs_budget: budget.max(base.batch_size as u64), ..base.clone() };
    let (_, record) = train(&cfg, &kept, Some(eval_ds), out_dir)?;
    let label = format!("{} (filtered, keep {:.0}%)", cfg.objective, 100.0 * keep_fraction);
    let row = ComparisonRow::of(&label, &record)?;
    let run = FilterRun { keep_fraction, filter, record, row };
    if let Some(d) = out_dir {
        std::fs::write(d.join("filter_run.json"), serde_json::to_vec_pretty(&run)?)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_sd() {
        let s = Stat::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.sd - 1.0).abs() < 1e-12);
        assert_eq!(Stat::of(vec![0.5]).sd, 0.0);
    }

    #[test]
    fn half_rounds_up_and_is_seeded() {
        let idx: Vec<usize> = (0..11).map(|i| i * 3).collect();
        let h = half_of(&idx, 4);
        assert_eq!(h.len(), 6);
        assert!(h.iter().all(|i| idx.contains(i)));
        assert_eq!(h, half_of(&idx, 4));
    }
}
