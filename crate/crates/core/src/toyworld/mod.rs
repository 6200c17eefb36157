//! Procedural shapes world: scenes, captions, renders, hard negatives and datasets.

mod caption;
mod concepts;
mod dataset;
mod perturb;
mod render;
mod scene;

pub use caption::{
    caption_of, detokenize, parse, parse_tokens, token_id, tokenize, Caption, MAX_CAPTION_TOKENS, PAD_ID, VOCAB,
};
pub use concepts::{
    concept_inventory, concept_subsets, concepts_by_frequency, example_concepts, scene_concepts, subset_with_atoms,
    Concept, ConceptSubset,
};
pub use dataset::{
    generate_dataset, read_dataset, splitmix64, write_dataset, Dataset, DatasetManifest, KindMix, Sample,
    TripletExample, DATASET_FILE, FORMAT_VERSION, MANIFEST_FILE,
};
pub use perturb::{perturb, PerturbationKind};
pub use render::{background_rgb, palette, render, slots, Raster};
pub use scene::{
    sample_background, sample_scene, sample_scene_where, scene_space, Background, Color, Object, Relation, Scene,
    Shape, Size,
};

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("perturbation '{kind}' does not apply to this scene")]
    Inapplicable { kind: &'static str },
    #[error("concept target {target} is unachievable (inventory has {max} atoms; valid targets are 1..={max})")]
    UnachievableTarget { target: usize, max: usize },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
