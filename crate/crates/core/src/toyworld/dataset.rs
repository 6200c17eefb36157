//! Triplet dataset generation and the JSONL + manifest file format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{caption_of, Caption};
use super::concepts::concept_inventory;
use super::perturb::{perturb, PerturbationKind};
use super::render::{render, Raster};
use super::scene::{sample_background, scene_space, Background, Scene};
use super::ToyError;

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `index`-th output of the splitmix64 stream seeded with `seed`.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative weights over perturbation kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindMix(pub BTreeMap<PerturbationKind, f64>);

impl Default for KindMix {
    fn default() -> Self {
        Self::uniform()
    }
}

impl KindMix {
    pub fn uniform() -> Self {
        Self(PerturbationKind::ALL.iter().map(|&k| (k, 1.0)).collect())
    }

    pub fn only(kinds: &[PerturbationKind]) -> Self {
        Self(kinds.iter().map(|&k| (k, 1.0)).collect())
    }

    fn sampler(&self) -> Result<(Vec<PerturbationKind>, WeightedIndex<f64>), ToyError> {
        let (kinds, weights): (Vec<_>, Vec<_>) = self.0.iter().filter(|(_, &w)| w > 0.0).map(|(&k, &w)| (k, w)).unzip();
        let dist = WeightedIndex::new(&weights).map_err(|e| ToyError::Config(format!("kind mix: {e}")))?;
        Ok((kinds, dist))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scene: Scene,
    pub caption: Caption,
    pub image: Raster,
}

impl Sample {
    pub fn of_scene(scene: Scene, background: Background, side: usize) -> Self {
        let caption = caption_of(&scene);
        let image = render(&scene, background, side);
        Self { scene, caption, image }
    }
}

/// Positive pair `(x, y)` and, when present, its hard negative `(x', y')`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletExample {
    pub id: u64,
    pub seed: u64,
    pub kind: Option<PerturbationKind>,
    pub background: Background,
    pub pos: Sample,
    pub neg: Option<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub m: usize,
    pub seed: u64,
    pub image_hw: usize,
    pub kind_mix: KindMix,
    /// Distinct concept atoms used by any caption, in canonical order.
    pub concepts: Vec<String>,
    pub kind_histogram: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub examples: Vec<TripletExample>,
}

fn kind_pools() -> &'static BTreeMap<PerturbationKind, Vec<usize>> {
    static POOLS: OnceLock<BTreeMap<PerturbationKind, Vec<usize>>> = OnceLock::new();
    POOLS.get_or_init(|| {
        let space = scene_space();
        PerturbationKind::ALL
            .iter()
            .map(|&k| (k, (0..space.len()).filter(|&i| k.applies_to(&space[i])).collect()))
            .collect()
    })
}

/// Draws a kind from `mix`, then a scene uniformly among those the kind applies to.
fn generate_one(id: u64, seed: u64, kinds: &[PerturbationKind], dist: &WeightedIndex<f64>, side: usize) -> TripletExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kinds[dist.sample(&mut rng)];
    let pool = &kind_pools()[&kind];
    let scene = scene_space()[pool[rng.gen_range(0..pool.len())]].clone();
    let neg_scene = perturb(&scene, kind, &mut rng).expect("scene drawn from the kind's applicable pool");
    let background = sample_background(&mut rng);
    TripletExample {
        id,
        seed,
        kind: Some(kind),
        background,
        pos: Sample::of_scene(scene, background, side),
        neg: Some(Sample::of_scene(neg_scene, background, side)),
    }
}

pub fn generate_dataset(m: usize, seed: u64, mix: &KindMix, side: usize) -> Result<Dataset, ToyError> {
    if m == 0 {
        return Err(ToyError::Config("dataset size must be at least 1".into()));
    }
    if side < 8 {
        return Err(ToyError::Config(format!("image side {side} is too small (min 8)")));
    }
    let (kinds, dist) = mix.sampler()?;
    let examples = (0..m as u64).map(|i| generate_one(i, splitmix64(seed, i), &kinds, &dist, side)).collect();
    Ok(Dataset::assemble(seed, side, mix.clone(), examples, None))
}

impl Dataset {
    pub fn assemble(
        seed: u64,
        image_hw: usize,
        kind_mix: KindMix,
        examples: Vec<TripletExample>,
        derived_from: Option<String>,
    ) -> Self {
        let mut kind_histogram = BTreeMap::new();
        for ex in &examples {
            let key = ex.kind.map_or("none", PerturbationKind::name).to_string();
            *kind_histogram.entry(key).or_insert(0) += 1;
        }
        let concepts = concept_inventory(&examples).into_iter().map(|c| c.word().to_string()).collect();
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            m: examples.len(),
            seed,
            image_hw,
            kind_mix,
            concepts,
            kind_histogram,
            derived_from,
        };
        Self { manifest, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_negatives(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.neg.is_some())
    }

    /// Examples at `indices`, in the given order, under a freshly computed manifest.
    pub fn select(&self, indices: &[usize], note: &str) -> Self {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        let from = format!("{} (m={}, seed={})", note, self.manifest.m, self.manifest.seed);
        Self::assemble(self.manifest.seed, self.manifest.image_hw, self.manifest.kind_mix.clone(), examples, Some(from))
    }

    /// Drops the negative half of every example.
    pub fn positives_only(&self) -> Self {
        let examples = self
            .examples
            .iter()
            .map(|e| TripletExample { kind: None, neg: None, ..e.clone() })
            .collect();
        Self::assemble(self.manifest.seed, self.manifest.image_hw, self.manifest.kind_mix.clone(), examples, Some("positives only".into()))
    }

    /// Checks every ground-truth invariant: captions parse back to their scenes and
    /// images are exactly the renders of those scenes.
    pub fn verify(&self) -> Result<(), ToyError> {
        let side = self.manifest.image_hw;
        for ex in &self.examples {
            let check = |s: &Sample, which: &str| -> Result<(), ToyError> {
                let bad = |what: &str| ToyError::Corrupt(format!("example {} {which}: {what}", ex.id));
                if super::caption::parse(&s.caption.text)? != s.scene {
                    return Err(bad("caption does not parse to scene"));
                }
                if caption_of(&s.scene) != s.caption {
                    return Err(bad("caption is not canonical"));
                }
                if render(&s.scene, ex.background, side) != s.image {
                    return Err(bad("image is not the render of its scene"));
                }
                Ok(())
            };
            check(&ex.pos, "positive")?;
            if let Some(neg) = &ex.neg {
                check(neg, "negative")?;
                if neg.scene == ex.pos.scene || neg.caption == ex.pos.caption {
                    return Err(ToyError::Corrupt(format!("example {}: negative equals positive", ex.id)));
                }
            }
        }
        let total: usize = self.manifest.kind_histogram.values().sum();
        if total != self.manifest.m || self.manifest.m != self.examples.len() {
            return Err(ToyError::Corrupt("manifest counts disagree with the examples".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    w: usize,
    h: usize,
    b64: String,
}

impl ImageRecord {
    fn of(r: &Raster) -> Self {
        Self { w: r.width, h: r.height, b64: B64.encode(&r.pixels) }
    }

    fn decode(&self, id: u64) -> Result<Raster, ToyError> {
        let pixels = B64.decode(&self.b64).map_err(|e| ToyError::Corrupt(format!("example {id}: base64: {e}")))?;
        if pixels.len() != self.w * self.h * Raster::CHANNELS {
            return Err(ToyError::Corrupt(format!(
                "example {id}: {} bytes for a {}x{} image",
                pixels.len(),
                self.w,
                self.h
            )));
        }
        Ok(Raster { width: self.w, height: self.h, pixels })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    seed: u64,
    kind: Option<PerturbationKind>,
    background: Background,
    caption_pos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption_neg: Option<String>,
    tokens_pos: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens_neg: Option<Vec<u32>>,
    image_pos: ImageRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_neg: Option<ImageRecord>,
    scene_pos: Scene,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_neg: Option<Scene>,
}

impl Record {
    fn of(ex: &TripletExample) -> Self {
        Self {
            id: ex.id,
            seed: ex.seed,
            kind: ex.kind,
            background: ex.background,
            caption_pos: ex.pos.caption.text.clone(),
            caption_neg: ex.neg.as_ref().map(|n| n.caption.text.clone()),
            tokens_pos: ex.pos.caption.tokens.clone(),
            tokens_neg: ex.neg.as_ref().map(|n| n.caption.tokens.clone()),
            image_pos: ImageRecord::of(&ex.pos.image),
            image_neg: ex.neg.as_ref().map(|n| ImageRecord::of(&n.image)),
            scene_pos: ex.pos.scene.clone(),
            scene_neg: ex.neg.as_ref().map(|n| n.scene.clone()),
        }
    }

    fn into_example(self) -> Result<TripletExample, ToyError> {
        let id = self.id;
        let caption = |text: String, tokens: Vec<u32>| -> Result<Caption, ToyError> {
            let c = Caption::from_tokens(&tokens)?;
            if c.text != text {
                return Err(ToyError::Corrupt(format!("example {id}: tokens do not spell '{text}'")));
            }
            Ok(c)
        };
        let pos = Sample {
            caption: caption(self.caption_pos, self.tokens_pos)?,
            image: self.image_pos.decode(id)?,
            scene: self.scene_pos,
        };
        let neg = match (self.caption_neg, self.tokens_neg, self.image_neg, self.scene_neg) {
            (Some(c), Some(t), Some(i), Some(s)) => {
                Some(Sample { caption: caption(c, t)?, image: i.decode(id)?, scene: s })
            }
            (None, None, None, None) => None,
            _ => return Err(ToyError::Corrupt(format!("example {id}: partial negative"))),
        };
        Ok(TripletExample { id, seed: self.seed, kind: self.kind, background: self.background, pos, neg })
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), ToyError> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
    for ex in &ds.examples {
        serde_json::to_writer(&mut w, &Record::of(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let manifest = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, ToyError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| {
        ToyError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest_path.display())))
    })?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ToyError::Corrupt(format!(
            "dataset format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let file = fs::File::open(dir.join(DATASET_FILE))?;
    let mut examples = Vec::with_capacity(manifest.m);
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let ex = rec.into_example()?;
        if ex.pos.image.width != manifest.image_hw || ex.pos.image.height != manifest.image_hw {
            return Err(ToyError::Corrupt(format!("example {}: image size differs from manifest", ex.id)));
        }
        examples.push(ex);
    }
    if examples.len() != manifest.m {
        return Err(ToyError::Corrupt(format!("manifest says {} examples, file has {}", manifest.m, examples.len())));
    }
    Ok(Dataset { manifest, examples })
}
