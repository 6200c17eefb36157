use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, Pooling, TowerKind};
use super::ModelError;
use crate::numerics::{kernels, Graph, Real, Tensor, Var};
use crate::toyworld::{Raster, PAD_ID};

/// Optimizer parameter group. The temperature belongs to neither tower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Image,
    Text,
    Tau,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Image, ParamGroup::Text, ParamGroup::Tau];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Image => "image",
            ParamGroup::Text => "text",
            ParamGroup::Tau => "tau",
        }
    }

    pub fn of(param: &str) -> ParamGroup {
        if param.starts_with("image.") {
            ParamGroup::Image
        } else if param.starts_with("text.") {
            ParamGroup::Text
        } else {
            ParamGroup::Tau
        }
    }
}

pub const TAU_PARAM: &str = "log_tau_inv";

const INIT_STD: f64 = 0.02;

/// Image tower, text tower, projection heads and a trainable temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    params: BTreeMap<String, Tensor>,
}

/// Graph variables for every parameter, keyed by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs each name with an existing graph variable.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter named '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Truncated at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

fn tower_shapes(cfg: &EncoderConfig, tower: &str, out: &mut Vec<(String, Vec<usize>)>) {
    let (d, h) = (cfg.d_model, cfg.hidden());
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    if tower == "image" {
        push("image.patch_embed.w".into(), vec![cfg.patch_dim(), d]);
        push("image.patch_embed.b".into(), vec![d]);
        push("image.pos".into(), vec![cfg.n_patches(), d]);
    } else {
        push("text.tok_embed".into(), vec![cfg.vocab_size, d]);
        push("text.pos".into(), vec![cfg.max_seq_len, d]);
    }
    for i in 0..cfg.n_blocks {
        let p = format!("{tower}.blocks.{i}");
        if cfg.tower_kind == TowerKind::Transformer {
            push(format!("{p}.ln1.g"), vec![d]);
            push(format!("{p}.ln1.b"), vec![d]);
            push(format!("{p}.attn.qkv.w"), vec![d, 3 * d]);
            push(format!("{p}.attn.qkv.b"), vec![3 * d]);
            push(format!("{p}.attn.out.w"), vec![d, d]);
            push(format!("{p}.attn.out.b"), vec![d]);
        }
        push(format!("{p}.ln2.g"), vec![d]);
        push(format!("{p}.ln2.b"), vec![d]);
        push(format!("{p}.mlp.fc1.w"), vec![d, h]);
        push(format!("{p}.mlp.fc1.b"), vec![h]);
        push(format!("{p}.mlp.fc2.w"), vec![h, d]);
        push(format!("{p}.mlp.fc2.b"), vec![d]);
    }
    push(format!("{tower}.ln_final.g"), vec![d]);
    push(format!("{tower}.ln_final.b"), vec![d]);
    push(format!("{tower}.proj"), vec![d, cfg.d_embed]);
}

/// Every parameter name with its shape, for `cfg`.
pub fn param_shapes(cfg: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
    let mut out = Vec::new();
    tower_shapes(cfg, "image", &mut out);
    tower_shapes(cfg, "text", &mut out);
    out.push((TAU_PARAM.into(), vec![1]));
    out.into_iter().collect()
}

impl DualEncoder {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name == TAU_PARAM {
                vec![(1.0 / config.init_tau).ln() as f32]
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                trunc_normal(&mut rng, n, INIT_STD)
            };
            let mut t = Tensor::new(&shape, data)?;
            t.requires_grad = name != TAU_PARAM || config.train_tau;
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Assembles a model from loaded tensors, checking names and shapes against `config`.
    pub fn from_params(config: EncoderConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        for (name, shape) in &expected {
            let t = params.get_mut(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            t.requires_grad = name != TAU_PARAM || config.train_tau;
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameter names of `group` in lexicographic order.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params.keys().filter(|k| ParamGroup::of(k) == group).cloned().collect()
    }

    /// A frozen group's tensors carry `requires_grad = false` and are skipped by the optimizer.
    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for (name, t) in self.params.iter_mut() {
            if ParamGroup::of(name) == group {
                t.requires_grad = !frozen;
            }
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.params.iter().filter(|(k, _)| ParamGroup::of(k) == group).all(|(_, t)| !t.requires_grad)
    }

    pub fn logit_scale(&self) -> f32 {
        self.params[TAU_PARAM].data()[0].exp()
    }

    pub fn tau(&self) -> f32 {
        1.0 / self.logit_scale()
    }

    /// Keeps `1 / tau` within `[1, max_logit_scale]`.
    pub fn clamp_tau(&mut self) {
        let (lo, hi) = self.config.log_scale_range();
        let t = self.params.get_mut(TAU_PARAM).expect("temperature parameter");
        let v = &mut t.data_mut()[0];
        *v = v.clamp(lo, hi);
    }

    /// Records every parameter as a leaf of `g`. With `track_grads`, trainable
    /// tensors get gradients; otherwise all are constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, track_grads: bool) -> Result<Bound, ModelError> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let mut c = t.cast::<T>();
            c.requires_grad = track_grads && t.requires_grad;
            vars.insert(name.clone(), g.leaf(c)?);
        }
        Ok(Bound { vars })
    }

    fn linear<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let y = g.matmul(x, b.var(&format!("{prefix}.w")))?;
        Ok(g.add(y, b.var(&format!("{prefix}.b")))?)
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, b: &Bound, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let y = g.layer_norm(x)?;
        let y = g.mul(y, b.var(&format!("{prefix}.g")))?;
        Ok(g.add(y, b.var(&format!("{prefix}.b")))?)
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        prefix: &str,
        lengths: Option<&[usize]>,
    ) -> Result<Var, ModelError> {
        let mut x = x;
        if self.config.tower_kind == TowerKind::Transformer {
            let h = self.norm(g, b, x, &format!("{prefix}.ln1"))?;
            let qkv = self.linear(g, b, h, &format!("{prefix}.attn.qkv"))?;
            let a = g.attention(qkv, self.config.n_heads, lengths)?;
            let a = self.linear(g, b, a, &format!("{prefix}.attn.out"))?;
            x = g.add(x, a)?;
        }
        let h = self.norm(g, b, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, b, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.relu(h)?;
        let h = self.linear(g, b, h, &format!("{prefix}.mlp.fc2"))?;
        Ok(g.add(x, h)?)
    }

    /// Blocks, pooling, final norm, projection and L2 normalization over `[N, L, d]`.
    fn head<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        mut x: Var,
        tower: &str,
        lengths: &[usize],
        masked: bool,
    ) -> Result<Var, ModelError> {
        let mask = masked.then_some(lengths);
        for i in 0..self.config.n_blocks {
            x = self.block(g, b, x, &format!("{tower}.blocks.{i}"), mask)?;
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => g.masked_mean_pool(x, lengths)?,
            Pooling::First => g.masked_mean_pool(x, &vec![1; lengths.len()])?,
        };
        let h = self.norm(g, b, pooled, &format!("{tower}.ln_final"))?;
        let z = g.matmul(h, b.var(&format!("{tower}.proj")))?;
        Ok(g.l2_normalize(z)?)
    }

    /// Image embeddings `[N, d_embed]` recorded on `g`.
    pub fn encode_images_on<T: Real>(&self, g: &mut Graph<T>, b: &Bound, images: &[&Raster]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(ModelError::Input("empty image batch".into()));
        }
        let (side, ps, per) = (cfg.image_hw, cfg.patch_size, cfg.patches_per_side());
        let pd = cfg.patch_dim();
        let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * pd);
        for img in images {
            if img.width != side || img.height != side || img.pixels.len() != side * side * Raster::CHANNELS {
                return Err(ModelError::Input(format!(
                    "expected a {side}x{side} image, got {}x{}",
                    img.width, img.height
                )));
            }
            for py in 0..per {
                for px in 0..per {
                    for y in py * ps..(py + 1) * ps {
                        let row = &img.pixels[(y * side + px * ps) * 3..(y * side + (px + 1) * ps) * 3];
                        data.extend(row.iter().map(|&p| T::of(p as f64 / 127.5 - 1.0)));
                    }
                }
            }
        }
        let n = images.len();
        let patches = g.constant(Tensor::new(&[n, cfg.n_patches(), pd], data)?)?;
        let x = self.linear(g, b, patches, "image.patch_embed")?;
        let x = g.add(x, b.var("image.pos"))?;
        self.head(g, b, x, "image", &vec![cfg.n_patches(); n], false)
    }

    /// Text embeddings `[N, d_embed]` recorded on `g`. Trailing pad ids are ignored.
    pub fn encode_texts_on<T: Real>(&self, g: &mut Graph<T>, b: &Bound, texts: &[&[u32]]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if texts.is_empty() {
            return Err(ModelError::Input("empty caption batch".into()));
        }
        let mut lengths = Vec::with_capacity(texts.len());
        for t in texts {
            if t.len() > cfg.max_seq_len {
                return Err(ModelError::Input(format!(
                    "caption of {} tokens exceeds max_seq_len {}",
                    t.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= cfg.vocab_size) {
                return Err(ModelError::Input(format!("token id {bad} is outside the vocabulary of {}", cfg.vocab_size)));
            }
            let len = t.iter().position(|&id| id == PAD_ID).unwrap_or(t.len());
            if len == 0 {
                return Err(ModelError::Input("caption has no tokens".into()));
            }
            if t[len..].iter().any(|&id| id != PAD_ID) {
                return Err(ModelError::Input("tokens after padding".into()));
            }
            lengths.push(len);
        }
        let l = *lengths.iter().max().expect("non-empty batch");
        let mut ids = Vec::with_capacity(texts.len() * l);
        for t in texts {
            ids.extend((0..l).map(|i| t.get(i).copied().unwrap_or(PAD_ID) as usize));
        }
        let tok = g.gather_rows(b.var("text.tok_embed"), &ids)?;
        let tok = g.reshape(tok, &[texts.len(), l, cfg.d_model])?;
        let pos = g.gather_rows(b.var("text.pos"), &(0..l).collect::<Vec<_>>())?;
        let x = g.add(tok, pos)?;
        self.head(g, b, x, "text", &lengths, true)
    }

    /// Inference-only image embeddings, computed in chunks.
    pub fn encode_images(&self, images: &[&Raster]) -> Result<Tensor, ModelError> {
        self.encode_chunked(images, |m, g, b, chunk| m.encode_images_on(g, b, chunk))
    }

    /// Inference-only text embeddings, computed in chunks.
    pub fn encode_texts(&self, texts: &[&[u32]]) -> Result<Tensor, ModelError> {
        self.encode_chunked(texts, |m, g, b, chunk| m.encode_texts_on(g, b, chunk))
    }

    fn encode_chunked<I>(
        &self,
        items: &[I],
        f: impl Fn(&Self, &mut Graph<f32>, &Bound, &[I]) -> Result<Var, ModelError>,
    ) -> Result<Tensor, ModelError> {
        const CHUNK: usize = 512;
        if items.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(items.len() * self.config.d_embed);
        for chunk in items.chunks(CHUNK) {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false)?;
            let out = f(self, &mut g, &b, chunk)?;
            data.extend_from_slice(g.value(out).data());
        }
        Ok(Tensor::new(&[items.len(), self.config.d_embed], data)?)
    }
}

/// `logits[i][j] = dot(img_i, txt_j) / tau`. Entries are computed independently, so
/// `similarity_matrix(a, b, t)` is exactly the transpose of `similarity_matrix(b, a, t)`.
pub fn similarity_matrix(img: &Tensor, txt: &Tensor, tau: f32) -> Result<Tensor, ModelError> {
    if img.rank() != 2 || txt.rank() != 2 || img.cols() != txt.cols() {
        return Err(ModelError::Input(format!(
            "similarity needs [N, d] and [M, d], got {:?} and {:?}",
            img.shape(),
            txt.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(ModelError::Input(format!("temperature must be positive, got {tau}")));
    }
    let (n, m) = (img.rows(), txt.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(kernels::dot(img.row(i), txt.row(j)) / tau);
        }
    }
    Ok(Tensor::new(&[n, m], out)?)
}

/// `n` random rows of unit length.
pub fn random_unit_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(&[n, d], data).expect("positive extents")
}
