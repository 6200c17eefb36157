use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Freeze, LedgerPolicy, TrainConfig};
use super::HarnessError;
use crate::eval::{evaluate, EvalMeta, EvalReport};
use crate::losses::{objective_loss, LossBatch, Objective};
use crate::model::{save_checkpoint, DualEncoder, ParamGroup, TrainMeta, TAU_PARAM};
use crate::numerics::{kernels, AdamWState, CosineSchedule, Graph, NumericsError, ParamSlot};
use crate::toyworld::{splitmix64, Dataset, Raster, TripletExample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const LAST_CHECKPOINT: &str = "last.tclp";
pub const FINAL_CHECKPOINT: &str = "final.tclp";

/// Running count of consumed pairs and optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub pairs_seen: u64,
    pub steps: u64,
}

impl ComputeLedger {
    pub fn charge(&mut self, pairs: u64) {
        self.pairs_seen += pairs;
        self.steps += 1;
    }

    pub fn exhausted(&self, budget: u64) -> bool {
        self.pairs_seen >= budget
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub pairs_seen: u64,
    pub lr: f64,
    /// Mean training loss over the steps since the previous point.
    pub train_loss: f64,
    pub tau: f64,
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: Objective,
    pub seed: u64,
    pub batch_size: usize,
    pub ledger_policy: LedgerPolicy,
    pub pairs_budget: u64,
    pub pairs_per_step: u64,
    pub ledger: ComputeLedger,
    /// Examples in the training set handed to the run.
    pub train_examples: usize,
    /// Distinct examples that appeared in at least one batch.
    pub distinct_examples: usize,
    pub freeze: Freeze,
    pub step_losses: Vec<f32>,
    pub points: Vec<EvalPoint>,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.points.last().and_then(|p| p.report.as_ref())
    }

    /// Mean step loss over the first and last `fraction` of steps.
    pub fn loss_ends(&self, fraction: f64) -> (f64, f64) {
        let n = self.step_losses.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.step_losses[..k.min(n)]), mean(&self.step_losses[n - k.min(n)..]))
    }
}

/// Epoch-wise sampling without replacement; a partial batch at an epoch's end is dropped.
struct EpochSampler {
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { seed, epoch: 0, order: (0..n).collect(), pos: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed, self.epoch));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, n: usize) -> &[usize] {
        if self.pos + n > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let b = &self.order[self.pos..self.pos + n];
        self.pos += n;
        b
    }
}

/// Rejects configurations the dataset cannot serve.
pub fn check_compatible(cfg: &TrainConfig, ds: &Dataset) -> Result<(), HarnessError> {
    if ds.len() < cfg.batch_size {
        return Err(HarnessError::Data(format!(
            "dataset has {} examples, fewer than batch_size {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    if cfg.objective.needs_negatives() && !ds.has_negatives() {
        return Err(HarnessError::Data(format!(
            "objective {} needs {}, but the dataset has no hard negatives",
            cfg.objective,
            cfg.objective.requirement()
        )));
    }
    if ds.manifest.image_hw != cfg.encoder.image_hw {
        return Err(HarnessError::Data(format!(
            "dataset images are {}px, encoder expects {}px",
            ds.manifest.image_hw, cfg.encoder.image_hw
        )));
    }
    Ok(())
}

fn frozen_groups(cfg: &TrainConfig) -> BTreeSet<ParamGroup> {
    let mut out = BTreeSet::new();
    match cfg.freeze {
        Freeze::Image => {
            out.insert(ParamGroup::Image);
        }
        Freeze::Text => {
            out.insert(ParamGroup::Text);
        }
        Freeze::None => {}
    }
    if cfg.freeze_tau || !cfg.encoder.train_tau {
        out.insert(ParamGroup::Tau);
    }
    out
}

fn neg_of(e: &TripletExample) -> &crate::toyworld::Sample {
    e.neg.as_ref().expect("negatives checked at startup")
}

/// Loss value and gradients for one batch, by parameter name.
fn forward_backward(
    model: &DualEncoder,
    objective: Objective,
    batch: &[&TripletExample],
) -> Result<(f32, BTreeMap<String, Vec<f32>>), HarnessError> {
    let mut g = Graph::<f32>::new();
    let b = model.bind(&mut g, true)?;
    let neg_imgs = || batch.iter().map(|e| &neg_of(e).image).collect::<Vec<&Raster>>();

    let img_pos = model.encode_images_on(&mut g, &b, &batch.iter().map(|e| &e.pos.image).collect::<Vec<_>>())?;
    let txt: Vec<&[u32]> = batch.iter().map(|e| e.pos.caption.tokens.as_slice()).collect();
    let txt_pos = model.encode_texts_on(&mut g, &b, &txt)?;
    let img_neg = if objective.needs_img_neg() {
        Some(model.encode_images_on(&mut g, &b, &neg_imgs())?)
    } else {
        None
    };
    let txt_neg = if objective.needs_txt_neg() {
        let t: Vec<&[u32]> = batch.iter().map(|e| neg_of(e).caption.tokens.as_slice()).collect();
        Some(model.encode_texts_on(&mut g, &b, &t)?)
    } else {
        None
    };
    let logit_scale = g.exp(b.var(TAU_PARAM))?;
    let loss = objective_loss(&mut g, objective, &LossBatch { img_pos, txt_pos, img_neg, txt_neg, logit_scale })?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { op: "training loss" }.into());
    }
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in b.iter() {
        if let Some(t) = grads.take(var) {
            out.insert(name.to_string(), t.into_data());
        }
    }
    Ok((value, out))
}

/// Owns the model and optimizer state of one run.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: DualEncoder,
    pub ledger: ComputeLedger,
    data: &'a Dataset,
    sampler: EpochSampler,
    schedule: CosineSchedule,
    optim: BTreeMap<ParamGroup, AdamWState>,
    frozen: BTreeSet<ParamGroup>,
    seen: Vec<bool>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self, HarnessError> {
        cfg.validate()?;
        check_compatible(&cfg, data)?;
        if cfg.strict_deterministic {
            kernels::set_intra_op_threads(1);
        }
        let mut model = DualEncoder::new(cfg.encoder.clone(), cfg.seed)?;
        let frozen = frozen_groups(&cfg);
        for group in ParamGroup::ALL {
            model.set_frozen(group, frozen.contains(&group));
        }
        let optim = ParamGroup::ALL
            .iter()
            .filter(|g| !frozen.contains(g))
            .map(|&g| {
                let n: usize = model.group_names(g).iter().map(|k| model.params()[k].numel()).sum();
                (g, AdamWState::new(n, cfg.adamw()))
            })
            .collect();
        let schedule = CosineSchedule::new(cfg.base_lr, cfg.total_steps(), cfg.warmup_steps, cfg.min_lr)?;
        let sampler = EpochSampler::new(data.len(), splitmix64(cfg.seed, u64::MAX));
        Ok(Self {
            cfg,
            model,
            ledger: ComputeLedger::default(),
            data,
            sampler,
            schedule,
            optim,
            frozen,
            seen: vec![false; data.len()],
        })
    }

    /// A final step shrinks its batch to what the budget still allows.
    pub fn done(&self) -> bool {
        self.ledger.exhausted(self.cfg.pairs_budget)
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.ledger.steps)
    }

    pub fn distinct_examples(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f32, HarnessError> {
        let step = self.ledger.steps;
        let per_example = self.cfg.pairs_per_step() / self.cfg.batch_size as u64;
        let remaining = self.cfg.pairs_budget.saturating_sub(self.ledger.pairs_seen);
        let n = (remaining.div_ceil(per_example) as usize).clamp(1, self.cfg.batch_size);
        let idx = self.sampler.next_batch(n).to_vec();
        for &i in &idx {
            self.seen[i] = true;
        }
        let batch: Vec<&TripletExample> = idx.iter().map(|&i| &self.data.examples[i]).collect();
        let (loss, grads) = forward_backward(&self.model, self.cfg.objective, &batch)
            .map_err(|e| e.at_step(step))?;
        let lr = self.schedule.lr_at(step);
        let frozen = &self.frozen;
        let mut by_group: BTreeMap<ParamGroup, Vec<ParamSlot<'_>>> = BTreeMap::new();
        for (name, t) in self.model.params_mut() {
            let group = ParamGroup::of(name);
            if frozen.contains(&group) {
                continue;
            }
            let decay = t.rank() >= 2 && name != TAU_PARAM;
            let g = grads.get(name.as_str()).ok_or_else(|| HarnessError::Internal(format!("no gradient for {name}")))?;
            by_group.entry(group).or_default().push(ParamSlot { name, values: t.data_mut(), grads: g, decay });
        }
        for (group, slots) in by_group.iter_mut() {
            let state = self.optim.get_mut(group).expect("state per trainable group");
            state.apply(group.name(), slots, lr).map_err(|e| HarnessError::from(e).at_step(step))?;
        }
        self.model.clamp_tau();
        self.ledger.charge(per_example * n as u64);
        Ok(loss)
    }

    pub fn meta(&self) -> TrainMeta {
        TrainMeta {
            step: self.ledger.steps,
            pairs_seen: self.ledger.pairs_seen,
            seed: self.cfg.seed,
            objective: self.cfg.objective.name().to_string(),
        }
    }
}

fn dataset_label(ds: &Dataset) -> String {
    let m = &ds.manifest;
    match &m.derived_from {
        Some(from) => format!("m={} seed={} from {from}", m.m, m.seed),
        None => format!("m={} seed={}", m.m, m.seed),
    }
}

fn write_json_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains `cfg` on `train`. With `out_dir`, writes periodic and final checkpoints,
/// one metrics line per eval point and the run record.
pub fn train(
    cfg: &TrainConfig,
    train: &Dataset,
    eval_ds: Option<&Dataset>,
    out_dir: Option<&Path>,
) -> Result<(DualEncoder, RunRecord), HarnessError> {
    train_with_hook(cfg, train, eval_ds, out_dir, &mut |_| {})
}

/// [`train`], calling `hook` after every optimizer step.
pub fn train_with_hook(
    cfg: &TrainConfig,
    train: &Dataset,
    eval_ds: Option<&Dataset>,
    out_dir: Option<&Path>,
    hook: &mut dyn FnMut(&mut Trainer<'_>),
) -> Result<(DualEncoder, RunRecord), HarnessError> {
    if let Some(e) = eval_ds {
        if !e.has_negatives() {
            return Err(HarnessError::Data("evaluation dataset has no hard negatives".into()));
        }
    }
    let mut trainer = Trainer::new(cfg.clone(), train)?;
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let eval_label = eval_ds.map(dataset_label).unwrap_or_default();
    let total = cfg.total_steps();
    let ckpt_every = cfg.checkpoint_interval();
    let mut losses = Vec::with_capacity(total as usize);
    let mut points = Vec::new();
    let mut since = (0.0f64, 0u64);

    while !trainer.done() {
        let lr = trainer.current_lr();
        let loss = trainer.step()?;
        hook(&mut trainer);
        losses.push(loss);
        since = (since.0 + loss as f64, since.1 + 1);
        let step = trainer.ledger.steps;
        let last = trainer.done();
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
            let report = match eval_ds {
                Some(e) => {
                    let meta = EvalMeta {
                        checkpoint_step: step,
                        pairs_seen: trainer.ledger.pairs_seen,
                        objective: cfg.objective.name().to_string(),
                        dataset: eval_label.clone(),
                    };
                    Some(evaluate(&trainer.model, e, meta)?)
                }
                None => None,
            };
            let point = EvalPoint {
                step,
                pairs_seen: trainer.ledger.pairs_seen,
                lr,
                train_loss: since.0 / since.1 as f64,
                tau: trainer.model.tau() as f64,
                report,
            };
            log::info!(
                "{} step {step}/{total} pairs {} loss {:.4}",
                cfg.objective,
                point.pairs_seen,
                point.train_loss
            );
            if let Some(w) = metrics.as_mut() {
                write_json_line(w, &point)?;
            }
            points.push(point);
            since = (0.0, 0);
        }
        if let Some(dir) = out_dir {
            if !last && ckpt_every > 0 && step % ckpt_every == 0 {
                save_checkpoint(&trainer.model, &trainer.meta(), &dir.join(LAST_CHECKPOINT))?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&trainer.model, &trainer.meta(), &path)?;
            Some(path)
        }
        None => None,
    };
    let record = RunRecord {
        objective: cfg.objective,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        ledger_policy: cfg.ledger_policy,
        pairs_budget: cfg.pairs_budget,
        pairs_per_step: cfg.pairs_per_step(),
        ledger: trainer.ledger,
        train_examples: train.len(),
        distinct_examples: trainer.distinct_examples(),
        freeze: cfg.freeze,
        step_losses: losses,
        points,
        final_checkpoint,
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join(RUN_RECORD_FILE), serde_json::to_vec_pretty(&record)?)?;
    }
    Ok((trainer.model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch_without_repeats() {
        let mut s = EpochSampler::new(10, 3);
        let mut a: Vec<usize> = Vec::new();
        for _ in 0..3 {
            a.extend_from_slice(s.next_batch(3));
        }
        let uniq: BTreeSet<_> = a.iter().collect();
        assert_eq!(uniq.len(), 9);
        let next = s.next_batch(3).to_vec();
        assert_eq!(s.epoch, 1);
        assert_eq!(next.len(), 3);
    }

    #[test]
    fn sampler_is_seeded() {
        let take = |seed| {
            let mut s = EpochSampler::new(50, seed);
            (0..20).flat_map(|_| s.next_batch(7).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(take(1), take(1));
        assert_ne!(take(1), take(2));
    }

    #[test]
    fn ledger_halts_at_budget() {
        let mut l = ComputeLedger::default();
        while !l.exhausted(100) {
            l.charge(32);
        }
        assert_eq!((l.steps, l.pairs_seen), (4, 128));
    }
}
