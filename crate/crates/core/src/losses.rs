//! Contrastive objectives over embedding batches.
//!
//! Every loss takes unit-norm embedding rows recorded on a [`Graph`] and a scalar
//! `logit_scale = 1 / tau`. Similarities are dot products scaled by it.

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Symmetric InfoNCE over positive pairs.
    Clip,
    /// Text hard negatives only (the NegCLIP++ baseline).
    Negclip,
    /// Image hard negatives only.
    Negimage,
    /// Hard negatives in both modalities.
    Tripletclip,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Clip, Objective::Negimage, Objective::Negclip, Objective::Tripletclip];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Clip => "clip",
            Objective::Negclip => "negclip",
            Objective::Negimage => "negimage",
            Objective::Tripletclip => "tripletclip",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn needs_txt_neg(self) -> bool {
        matches!(self, Objective::Negclip | Objective::Tripletclip)
    }

    pub fn needs_img_neg(self) -> bool {
        matches!(self, Objective::Negimage | Objective::Tripletclip)
    }

    pub fn needs_negatives(self) -> bool {
        self.needs_txt_neg() || self.needs_img_neg()
    }

    /// What the objective requires of a batch, for error messages.
    pub fn requirement(self) -> &'static str {
        match self {
            Objective::Clip => "positive images and captions",
            Objective::Negclip => "positive pairs plus hard-negative captions",
            Objective::Negimage => "positive pairs plus hard-negative images",
            Objective::Tripletclip => "positive pairs plus hard-negative captions and images",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{objective} needs {requirement}; the batch has no {block}")]
    MissingBlock { objective: Objective, requirement: &'static str, block: &'static str },
    #[error("{op}: embedding blocks {lhs:?} and {rhs:?} are incompatible")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: empty batch")]
    Empty { op: &'static str },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Embedded `(x, y, x', y')` blocks plus the logit scale.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch {
    pub img_pos: Var,
    pub txt_pos: Var,
    pub img_neg: Option<Var>,
    pub txt_neg: Option<Var>,
    pub logit_scale: Var,
}

fn rows_dim<T: Real>(g: &Graph<T>, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    if s.len() == 2 {
        (s[0], s[1])
    } else {
        (0, 0)
    }
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var, same_rows: bool) -> Result<(), LossError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    let ((na, da), (nb, db)) = (rows_dim(g, a), rows_dim(g, b));
    if sa.len() != 2 || sb.len() != 2 || da != db || (same_rows && na != nb) {
        return Err(LossError::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
    }
    Ok(())
}

fn check_scale<T: Real>(g: &Graph<T>, op: &'static str, scale: Var) -> Result<(), LossError> {
    if g.value(scale).numel() != 1 {
        return Err(LossError::Shape { op, lhs: g.shape(scale).to_vec(), rhs: vec![1] });
    }
    Ok(())
}

/// `scale * (a @ b^T)`.
fn scaled_logits<T: Real>(g: &mut Graph<T>, a: Var, b: Var, scale: Var) -> Result<Var, LossError> {
    let bt = g.transpose(b)?;
    let s = g.matmul(a, bt)?;
    Ok(g.mul(s, scale)?)
}

/// Mean cross-entropy of each anchor row against its own candidate row, over all candidates.
pub fn infonce_dir<T: Real>(g: &mut Graph<T>, anchor: Var, cands: Var, scale: Var) -> Result<Var, LossError> {
    check_pair(g, "infonce_dir", anchor, cands, true)?;
    check_scale(g, "infonce_dir", scale)?;
    let n = rows_dim(g, anchor).0;
    if n == 0 {
        return Err(LossError::Empty { op: "infonce_dir" });
    }
    let logits = scaled_logits(g, anchor, cands, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Like [`infonce_dir`], but every anchor also contrasts against all rows of `neg`.
pub fn negcl_dir<T: Real>(g: &mut Graph<T>, anchor: Var, pos: Var, neg: Var, scale: Var) -> Result<Var, LossError> {
    check_pair(g, "negcl_dir", anchor, pos, true)?;
    check_pair(g, "negcl_dir", anchor, neg, false)?;
    check_scale(g, "negcl_dir", scale)?;
    let n = rows_dim(g, anchor).0;
    let cands = g.concat(&[pos, neg])?;
    let logits = scaled_logits(g, anchor, cands, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Text-to-image InfoNCE plus image-to-text contrast with hard-negative captions.
pub fn negclip_loss<T: Real>(
    g: &mut Graph<T>,
    img: Var,
    txt_pos: Var,
    txt_neg: Var,
    scale: Var,
) -> Result<Var, LossError> {
    let t2i = infonce_dir(g, txt_pos, img, scale)?;
    let i2t = negcl_dir(g, img, txt_pos, txt_neg, scale)?;
    Ok(g.add(t2i, i2t)?)
}

fn need(batch_block: Option<Var>, objective: Objective, block: &'static str) -> Result<Var, LossError> {
    batch_block.ok_or(LossError::MissingBlock { objective, requirement: objective.requirement(), block })
}

pub fn clip_loss<T: Real>(g: &mut Graph<T>, b: &LossBatch) -> Result<Var, LossError> {
    let i2t = infonce_dir(g, b.img_pos, b.txt_pos, b.logit_scale)?;
    let t2i = infonce_dir(g, b.txt_pos, b.img_pos, b.logit_scale)?;
    Ok(g.add(i2t, t2i)?)
}

pub fn negclip_batch_loss<T: Real>(g: &mut Graph<T>, b: &LossBatch) -> Result<Var, LossError> {
    let txt_neg = need(b.txt_neg, Objective::Negclip, "hard-negative captions")?;
    negclip_loss(g, b.img_pos, b.txt_pos, txt_neg, b.logit_scale)
}

/// Two NegCLIP terms with the positive and negative roles exchanged in the second.
pub fn tripletclip_loss<T: Real>(g: &mut Graph<T>, b: &LossBatch) -> Result<Var, LossError> {
    let txt_neg = need(b.txt_neg, Objective::Tripletclip, "hard-negative captions")?;
    let img_neg = need(b.img_neg, Objective::Tripletclip, "hard-negative images")?;
    let first = negclip_loss(g, b.img_pos, b.txt_pos, txt_neg, b.logit_scale)?;
    let second = negclip_loss(g, img_neg, txt_neg, b.txt_pos, b.logit_scale)?;
    Ok(g.add(first, second)?)
}

/// NegCLIP with the modalities exchanged: caption anchors contrast against hard-negative images.
pub fn negimage_loss<T: Real>(g: &mut Graph<T>, b: &LossBatch) -> Result<Var, LossError> {
    let img_neg = need(b.img_neg, Objective::Negimage, "hard-negative images")?;
    let i2t = infonce_dir(g, b.img_pos, b.txt_pos, b.logit_scale)?;
    let t2i = negcl_dir(g, b.txt_pos, b.img_pos, img_neg, b.logit_scale)?;
    Ok(g.add(i2t, t2i)?)
}

pub fn objective_loss<T: Real>(g: &mut Graph<T>, objective: Objective, b: &LossBatch) -> Result<Var, LossError> {
    match objective {
        Objective::Clip => clip_loss(g, b),
        Objective::Negclip => negclip_batch_loss(g, b),
        Objective::Negimage => negimage_loss(g, b),
        Objective::Tripletclip => tripletclip_loss(g, b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn leaf(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        g.param(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_example_infonce_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[vec![0.6, 0.8]]);
        let b = leaf(&mut g, &[vec![1.0, 0.0]]);
        let s = g.constant(Tensor::scalar(14.0)).unwrap();
        let l = infonce_dir(&mut g, a, b, s).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn identity_similarity_two_examples() {
        let mut g = Graph::<f64>::new();
        let e = leaf(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = g.constant(Tensor::scalar(1.0)).unwrap();
        let l = infonce_dir(&mut g, e, e, s).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn missing_block_names_requirement() {
        let mut g = Graph::<f64>::new();
        let e = leaf(&mut g, &[vec![1.0, 0.0]]);
        let s = g.constant(Tensor::scalar(1.0)).unwrap();
        let b = LossBatch { img_pos: e, txt_pos: e, img_neg: None, txt_neg: Some(e), logit_scale: s };
        let err = tripletclip_loss(&mut g, &b).unwrap_err().to_string();
        assert!(err.contains("tripletclip") && err.contains("hard-negative images"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[vec![1.0, 0.0]]);
        let b = leaf(&mut g, &[vec![1.0, 0.0, 0.0]]);
        let s = g.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(infonce_dir(&mut g, a, b, s), Err(LossError::Shape { .. })));
    }
}
