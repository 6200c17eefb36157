//! Metrics computed from embeddings: Winoground-style scores, forced-choice
//! compositional accuracy, retrieval, zero-shot classification, score-based
//! filtering and similarity histograms.
//!
//! Ties count as failures everywhere except retrieval, which ranks ties by index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{DualEncoder, ModelError};
use crate::numerics::Tensor;
use crate::toyworld::{tokenize, Color, Dataset, PerturbationKind, Raster, Shape};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: misaligned inputs ({detail})")]
    Misaligned { op: &'static str, detail: String },
    #[error("retrieval cutoff k={k} needs more than {k} candidates, have {n}")]
    CutoffTooLarge { k: usize, n: usize },
    #[error("label {label} is outside the {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("keep_fraction must lie in (0, 1], got {0}")]
    KeepFraction(f64),
    #[error("{0} needs hard negatives, but the dataset has none")]
    NeedsNegatives(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Dot product accumulated in f64, in index order.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn same_shape(op: &'static str, blocks: &[&Tensor]) -> Result<usize, EvalError> {
    let first = blocks[0].shape();
    if first.len() != 2 {
        return Err(EvalError::Misaligned { op, detail: format!("expected [N, d], got {first:?}") });
    }
    if let Some(b) = blocks.iter().find(|b| b.shape() != first) {
        return Err(EvalError::Misaligned { op, detail: format!("{first:?} vs {:?}", b.shape()) });
    }
    if first[0] == 0 {
        return Err(EvalError::Empty(op));
    }
    Ok(first[0])
}

/// Per-example embeddings of `(x, y, x', y')` with each example's perturbation kind.
#[derive(Clone, Debug)]
pub struct QuadEmbeddings {
    pub img_pos: Tensor,
    pub txt_pos: Tensor,
    pub img_neg: Tensor,
    pub txt_neg: Tensor,
    pub kinds: Vec<PerturbationKind>,
}

impl QuadEmbeddings {
    pub fn new(
        img_pos: Tensor,
        txt_pos: Tensor,
        img_neg: Tensor,
        txt_neg: Tensor,
        kinds: Vec<PerturbationKind>,
    ) -> Result<Self, EvalError> {
        let n = same_shape("quads", &[&img_pos, &txt_pos, &img_neg, &txt_neg])?;
        if kinds.len() != n {
            return Err(EvalError::Misaligned { op: "quads", detail: format!("{} kinds for {n} examples", kinds.len()) });
        }
        for t in [&img_pos, &txt_pos, &img_neg, &txt_neg] {
            for i in 0..n {
                let norm = cosine(t.row(i), t.row(i)).sqrt();
                if (norm - 1.0).abs() > 1e-3 && norm != 0.0 {
                    return Err(EvalError::Misaligned { op: "quads", detail: format!("row {i} has norm {norm}") });
                }
            }
        }
        Ok(Self { img_pos, txt_pos, img_neg, txt_neg, kinds })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
}

pub fn winoground_scores(q: &QuadEmbeddings) -> Result<WinogroundScores, EvalError> {
    let n = q.len();
    if n == 0 {
        return Err(EvalError::Empty("winoground_scores"));
    }
    let (mut text, mut image, mut group) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let s_xy = cosine(q.img_pos.row(i), q.txt_pos.row(i));
        let s_xyn = cosine(q.img_pos.row(i), q.txt_neg.row(i));
        let s_xny = cosine(q.img_neg.row(i), q.txt_pos.row(i));
        let s_xnyn = cosine(q.img_neg.row(i), q.txt_neg.row(i));
        let t = s_xy > s_xyn && s_xnyn > s_xny;
        let im = s_xy > s_xny && s_xnyn > s_xyn;
        text += usize::from(t);
        image += usize::from(im);
        group += usize::from(t && im);
    }
    let f = |c: usize| c as f64 / n as f64;
    Ok(WinogroundScores { text: f(text), image: f(image), group: f(group) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryAccuracy {
    /// Only kinds with at least one example appear.
    pub by_kind: BTreeMap<PerturbationKind, f64>,
    pub counts: BTreeMap<PerturbationKind, usize>,
    /// Unweighted mean over the kinds present.
    pub overall: f64,
}

/// Image-to-text forced choice: correct iff `cos(x, y) > cos(x, y')`.
pub fn binary_comp_accuracy(
    img: &Tensor,
    txt_pos: &Tensor,
    txt_neg: &Tensor,
    kinds: &[PerturbationKind],
) -> Result<BinaryAccuracy, EvalError> {
    let n = same_shape("binary_comp_accuracy", &[img, txt_pos, txt_neg])?;
    if kinds.len() != n {
        return Err(EvalError::Misaligned {
            op: "binary_comp_accuracy",
            detail: format!("{} kinds for {n} examples", kinds.len()),
        });
    }
    let mut hits: BTreeMap<PerturbationKind, (usize, usize)> = BTreeMap::new();
    for (i, &k) in kinds.iter().enumerate() {
        let ok = cosine(img.row(i), txt_pos.row(i)) > cosine(img.row(i), txt_neg.row(i));
        let e = hits.entry(k).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    let by_kind: BTreeMap<_, _> = hits.iter().map(|(&k, &(h, c))| (k, h as f64 / c as f64)).collect();
    let counts = hits.iter().map(|(&k, &(_, c))| (k, c)).collect();
    let overall = by_kind.values().sum::<f64>() / by_kind.len() as f64;
    Ok(BinaryAccuracy { by_kind, counts, overall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub i2t: BTreeMap<usize, f64>,
    pub t2i: BTreeMap<usize, f64>,
}

impl Retrieval {
    /// Average of the two directions at `k`.
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        Some((self.i2t.get(&k)? + self.t2i.get(&k)?) / 2.0)
    }
}

/// Position of `target` after a stable sort of `sims` by descending value.
fn stable_rank(sims: &[f64], target: usize) -> usize {
    let s = sims[target];
    sims.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

/// Recall at each `k`, with row `i` of `img` matching row `i` of `txt`.
pub fn retrieval_at_k(img: &Tensor, txt: &Tensor, ks: &[usize]) -> Result<Retrieval, EvalError> {
    let n = same_shape("retrieval_at_k", &[img, txt])?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(EvalError::CutoffTooLarge { k, n });
    }
    let sims: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cosine(img.row(i), txt.row(j))).collect()).collect();
    let mut i2t_rank = Vec::with_capacity(n);
    let mut t2i_rank = Vec::with_capacity(n);
    for i in 0..n {
        i2t_rank.push(stable_rank(&sims[i], i));
        let col: Vec<f64> = (0..n).map(|j| sims[j][i]).collect();
        t2i_rank.push(stable_rank(&col, i));
    }
    let recall = |ranks: &[usize]| -> BTreeMap<usize, f64> {
        ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)).collect()
    };
    Ok(Retrieval { i2t: recall(&i2t_rank), t2i: recall(&t2i_rank) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub top1: f64,
    /// Absent with fewer than five classes.
    pub top5: Option<f64>,
    pub n_images: usize,
}

/// Predicts the class prompt with the highest cosine. A class tied with the true
/// label counts as ranked ahead of it.
pub fn zeroshot_classify(img: &Tensor, class_embs: &Tensor, labels: &[usize]) -> Result<ZeroShot, EvalError> {
    let n = same_shape("zeroshot_classify", &[img])?;
    if labels.len() != n {
        return Err(EvalError::Misaligned { op: "zeroshot_classify", detail: format!("{} labels for {n} images", labels.len()) });
    }
    if class_embs.rank() != 2 || class_embs.cols() != img.cols() {
        return Err(EvalError::Misaligned {
            op: "zeroshot_classify",
            detail: format!("class prompts {:?} vs images {:?}", class_embs.shape(), img.shape()),
        });
    }
    let classes = class_embs.rows();
    let (mut top1, mut top5) = (0usize, 0usize);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(EvalError::LabelOutOfRange { label, classes });
        }
        let sims: Vec<f64> = (0..classes).map(|c| cosine(img.row(i), class_embs.row(c))).collect();
        let ahead = sims.iter().enumerate().filter(|&(c, &s)| c != label && s >= sims[label]).count();
        top1 += usize::from(ahead < 1);
        top5 += usize::from(ahead < 5);
    }
    let f = |c: usize| c as f64 / n as f64;
    Ok(ZeroShot { top1: f(top1), top5: (classes >= 5).then(|| f(top5)), n_images: n })
}

/// Every `(color, shape)` class in canonical order.
pub fn zeroshot_classes() -> Vec<(Color, Shape)> {
    Color::ALL.iter().flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s))).collect()
}

pub fn class_prompt(color: Color, shape: Shape) -> String {
    format!("a {} {}", color.word(), shape.word())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    /// Indices into the source dataset, in their original order.
    pub kept: Vec<usize>,
    /// Score of every source example.
    pub scores: Vec<f64>,
    pub min_kept: f64,
    pub max_dropped: Option<f64>,
}

/// Keeps the top `ceil(keep_fraction * n)` scores, ties broken by lower id. Returns the
/// kept positions in their original order, the lowest kept score and the highest dropped one.
pub fn select_by_score(
    scores: &[f64],
    ids: &[u64],
    keep_fraction: f64,
) -> Result<(Vec<usize>, f64, Option<f64>), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty("select_by_score"));
    }
    if scores.len() != ids.len() {
        return Err(EvalError::Misaligned {
            op: "select_by_score",
            detail: format!("{} scores for {} ids", scores.len(), ids.len()),
        });
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(EvalError::KeepFraction(keep_fraction));
    }
    let n = scores.len();
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let min_kept = order[..keep].iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
    let max_dropped = order[keep..].iter().map(|&i| scores[i]).reduce(f64::max);
    Ok((kept, min_kept, max_dropped))
}

/// Ranks examples by `(cos(x, y) + cos(x', y')) / 2` under `reference` and keeps the
/// top `ceil(keep_fraction * M)`, ties broken by lower id.
pub fn clip_score_filter(ds: &Dataset, reference: &DualEncoder, keep_fraction: f64) -> Result<FilterResult, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::Empty("clip_score_filter"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(EvalError::KeepFraction(keep_fraction));
    }
    if !ds.has_negatives() {
        return Err(EvalError::NeedsNegatives("clip_score_filter"));
    }
    let e = embed_dataset(reference, ds)?;
    let (img_neg, txt_neg) = (e.img_neg.as_ref().expect("negatives"), e.txt_neg.as_ref().expect("negatives"));
    let scores: Vec<f64> = (0..ds.len())
        .map(|i| (cosine(e.img_pos.row(i), e.txt_pos.row(i)) + cosine(img_neg.row(i), txt_neg.row(i))) / 2.0)
        .collect();
    let ids: Vec<u64> = ds.examples.iter().map(|x| x.id).collect();
    let (kept, min_kept, max_dropped) = select_by_score(&scores, &ids, keep_fraction)?;
    Ok(FilterResult { kept, scores, min_kept, max_dropped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistograms {
    /// `bins + 1` uniform edges over `[-1, 1]`.
    pub edges: Vec<f64>,
    /// Over `cos(x, x')`.
    pub image: Histogram,
    /// Over `cos(y, y')`.
    pub text: Histogram,
}

pub const DEFAULT_BINS: usize = 50;

fn histogram(values: &[f64], bins: usize) -> Histogram {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
    Histogram { counts, mean, median }
}

/// Distributions of positive-vs-negative cosine within each modality.
pub fn similarity_histograms(q: &QuadEmbeddings, bins: usize) -> Result<SimilarityHistograms, EvalError> {
    if q.is_empty() {
        return Err(EvalError::Empty("similarity_histograms"));
    }
    if bins == 0 {
        return Err(EvalError::Empty("similarity_histograms bins"));
    }
    let img: Vec<f64> = (0..q.len()).map(|i| cosine(q.img_pos.row(i), q.img_neg.row(i))).collect();
    let txt: Vec<f64> = (0..q.len()).map(|i| cosine(q.txt_pos.row(i), q.txt_neg.row(i))).collect();
    let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    Ok(SimilarityHistograms { edges, image: histogram(&img, bins), text: histogram(&txt, bins) })
}

/// Embeddings of every block present in a dataset.
pub struct DatasetEmbeddings {
    pub img_pos: Tensor,
    pub txt_pos: Tensor,
    pub img_neg: Option<Tensor>,
    pub txt_neg: Option<Tensor>,
}

pub fn embed_dataset(model: &DualEncoder, ds: &Dataset) -> Result<DatasetEmbeddings, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::Empty("embed_dataset"));
    }
    let imgs: Vec<&Raster> = ds.examples.iter().map(|e| &e.pos.image).collect();
    let txts: Vec<&[u32]> = ds.examples.iter().map(|e| e.pos.caption.tokens.as_slice()).collect();
    let (img_neg, txt_neg) = if ds.has_negatives() {
        let ni: Vec<&Raster> = ds.examples.iter().map(|e| &e.neg.as_ref().expect("negatives").image).collect();
        let nt: Vec<&[u32]> =
            ds.examples.iter().map(|e| e.neg.as_ref().expect("negatives").caption.tokens.as_slice()).collect();
        (Some(model.encode_images(&ni)?), Some(model.encode_texts(&nt)?))
    } else {
        (None, None)
    };
    Ok(DatasetEmbeddings {
        img_pos: model.encode_images(&imgs)?,
        txt_pos: model.encode_texts(&txts)?,
        img_neg,
        txt_neg,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub checkpoint_step: u64,
    pub pairs_seen: u64,
    pub objective: String,
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub text_score: f64,
    pub image_score: f64,
    pub group_score: f64,
    pub binary_acc_by_kind: BTreeMap<PerturbationKind, f64>,
    pub binary_acc_overall: f64,
    pub retrieval: Retrieval,
    /// Number of distinct positive captions used for retrieval.
    pub retrieval_pool: usize,
    pub zeroshot: ZeroShot,
    pub sim_hist_image: Histogram,
    pub sim_hist_text: Histogram,
    pub hist_edges: Vec<f64>,
    pub metadata: EvalMeta,
}

impl EvalReport {
    pub fn retrieval_r5(&self) -> f64 {
        self.retrieval.mean_at(5).unwrap_or(f64::NAN)
    }
}

pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

/// Every metric family on a dataset with hard negatives.
pub fn evaluate(model: &DualEncoder, ds: &Dataset, meta: EvalMeta) -> Result<EvalReport, EvalError> {
    if !ds.has_negatives() {
        return Err(EvalError::NeedsNegatives("evaluation"));
    }
    let e = embed_dataset(model, ds)?;
    let kinds: Vec<PerturbationKind> = ds.examples.iter().map(|x| x.kind.expect("negatives carry a kind")).collect();
    let quads = QuadEmbeddings::new(
        e.img_pos.clone(),
        e.txt_pos.clone(),
        e.img_neg.clone().expect("negatives"),
        e.txt_neg.clone().expect("negatives"),
        kinds,
    )?;
    let wino = winoground_scores(&quads)?;
    let binary = binary_comp_accuracy(&quads.img_pos, &quads.txt_pos, &quads.txt_neg, &quads.kinds)?;
    let hist = similarity_histograms(&quads, DEFAULT_BINS)?;

    // One row per distinct caption so each query has exactly one true partner.
    let mut seen = std::collections::HashSet::new();
    let uniq: Vec<usize> =
        (0..ds.len()).filter(|&i| seen.insert(ds.examples[i].pos.caption.text.as_str())).collect();
    let pick = |t: &Tensor| -> Result<Tensor, EvalError> {
        let data: Vec<f32> = uniq.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Ok(Tensor::new(&[uniq.len(), t.cols()], data).map_err(ModelError::from)?)
    };
    let ks: Vec<usize> = RETRIEVAL_KS.iter().copied().filter(|&k| k < uniq.len()).collect();
    let retrieval = retrieval_at_k(&pick(&e.img_pos)?, &pick(&e.txt_pos)?, &ks)?;

    let zeroshot = zeroshot_on(model, ds, &e.img_pos)?;
    Ok(EvalReport {
        text_score: wino.text,
        image_score: wino.image,
        group_score: wino.group,
        binary_acc_by_kind: binary.by_kind,
        binary_acc_overall: binary.overall,
        retrieval,
        retrieval_pool: uniq.len(),
        zeroshot,
        sim_hist_image: hist.image,
        sim_hist_text: hist.text,
        hist_edges: hist.edges,
        metadata: meta,
    })
}

/// Zero-shot over the one-object positive images, labelled by `(color, shape)`.
fn zeroshot_on(model: &DualEncoder, ds: &Dataset, img_emb: &Tensor) -> Result<ZeroShot, EvalError> {
    let classes = zeroshot_classes();
    let prompts: Vec<Vec<u32>> =
        classes.iter().map(|&(c, s)| tokenize(&class_prompt(c, s)).expect("prompt words are in the vocabulary")).collect();
    let prompt_refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let class_embs = model.encode_texts(&prompt_refs)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        if let [obj] = ex.pos.scene.objects() {
            rows.extend_from_slice(img_emb.row(i));
            labels.push(classes.iter().position(|&(c, s)| c == obj.color && s == obj.shape).expect("every class listed"));
        }
    }
    if labels.is_empty() {
        return Ok(ZeroShot { top1: f64::NAN, top5: None, n_images: 0 });
    }
    let imgs = Tensor::new(&[labels.len(), img_emb.cols()], rows).map_err(ModelError::from)?;
    zeroshot_classify(&imgs, &class_embs, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn winoground_hand_case_and_ties() {
        // Two-dimensional vectors realising s(x,y)=0.9-ish orderings.
        let q = QuadEmbeddings::new(
            t(&[vec![1.0, 0.0]]),
            t(&[vec![1.0, 0.0]]),
            t(&[vec![0.0, 1.0]]),
            t(&[vec![0.0, 1.0]]),
            vec![PerturbationKind::SwapObject],
        )
        .unwrap();
        assert_eq!(winoground_scores(&q).unwrap(), WinogroundScores { text: 1.0, image: 1.0, group: 1.0 });
        let same = t(&[vec![1.0, 0.0]]);
        let q = QuadEmbeddings::new(same.clone(), same.clone(), same.clone(), same, vec![PerturbationKind::SwapObject])
            .unwrap();
        assert_eq!(winoground_scores(&q).unwrap(), WinogroundScores { text: 0.0, image: 0.0, group: 0.0 });
    }

    #[test]
    fn retrieval_cutoff_must_be_below_n() {
        let a = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(retrieval_at_k(&a, &a, &[2]), Err(EvalError::CutoffTooLarge { k: 2, n: 2 })));
        assert_eq!(retrieval_at_k(&a, &a, &[1]).unwrap().i2t[&1], 1.0);
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[1.0, 0.0, -1.0, 0.0], 50);
        assert_eq!(h.counts[49], 1);
        assert_eq!(h.counts[25], 2);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.median, 0.0);
    }
}
