//! Concept atoms and nested concept-restricted subsets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::dataset::TripletExample;
use super::scene::{Color, Relation, Scene, Shape, Size};
use super::ToyError;

/// One vocabulary concept. Derived order is the canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Concept {
    Shape(Shape),
    Color(Color),
    Size(Size),
    Relation(Relation),
}

impl Concept {
    pub fn word(self) -> &'static str {
        match self {
            Concept::Shape(s) => s.word(),
            Concept::Color(c) => c.word(),
            Concept::Size(s) => s.word(),
            Concept::Relation(r) => r.word(),
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Shape::from_word(w)
            .map(Concept::Shape)
            .or_else(|| Color::from_word(w).map(Concept::Color))
            .or_else(|| Size::from_word(w).map(Concept::Size))
            .or_else(|| Relation::from_word(w).map(Concept::Relation))
    }

    pub fn all() -> Vec<Concept> {
        let mut v: Vec<Concept> = Shape::ALL.iter().map(|&s| Concept::Shape(s)).collect();
        v.extend(Color::ALL.iter().map(|&c| Concept::Color(c)));
        v.extend(Size::ALL.iter().map(|&s| Concept::Size(s)));
        v.extend(Relation::ALL.iter().map(|&r| Concept::Relation(r)));
        v
    }
}

pub fn scene_concepts(scene: &Scene) -> BTreeSet<Concept> {
    let mut out = BTreeSet::new();
    for o in scene.objects() {
        out.insert(Concept::Shape(o.shape));
        out.insert(Concept::Color(o.color));
        out.insert(Concept::Size(o.size));
    }
    if let Some(r) = scene.relation() {
        out.insert(Concept::Relation(r));
    }
    out
}

/// Atoms used by the positive and (if present) negative caption.
pub fn example_concepts(ex: &TripletExample) -> BTreeSet<Concept> {
    let mut out = scene_concepts(&ex.pos.scene);
    if let Some(n) = &ex.neg {
        out.extend(scene_concepts(&n.scene));
    }
    out
}

/// Distinct atoms used anywhere in `examples`, in canonical order.
pub fn concept_inventory(examples: &[TripletExample]) -> Vec<Concept> {
    let mut set = BTreeSet::new();
    for ex in examples {
        set.extend(example_concepts(ex));
    }
    set.into_iter().collect()
}

/// Inventory ordered by the number of examples using each atom, most frequent first.
/// Ties keep canonical order.
pub fn concepts_by_frequency(examples: &[TripletExample]) -> Vec<Concept> {
    let mut counts: BTreeMap<Concept, usize> = BTreeMap::new();
    for ex in examples {
        for c in example_concepts(ex) {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut atoms: Vec<(Concept, usize)> = counts.into_iter().collect();
    atoms.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    atoms.into_iter().map(|(c, _)| c).collect()
}

/// Indices of examples whose captions use only atoms in `allowed`.
pub fn subset_with_atoms(examples: &[TripletExample], allowed: &BTreeSet<Concept>) -> Vec<usize> {
    examples
        .iter()
        .enumerate()
        .filter(|(_, ex)| example_concepts(ex).is_subset(allowed))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSubset {
    pub target: usize,
    pub atoms: Vec<String>,
    pub indices: Vec<usize>,
}

/// One subset per target: the examples restricted to the `target` most frequent atoms.
/// Subsets are nested, so sizes are monotone in the target.
pub fn concept_subsets(examples: &[TripletExample], targets: &[usize]) -> Result<Vec<ConceptSubset>, ToyError> {
    let ordered = concepts_by_frequency(examples);
    targets
        .iter()
        .map(|&t| {
            if t == 0 || t > ordered.len() {
                return Err(ToyError::UnachievableTarget { target: t, max: ordered.len() });
            }
            let allowed: BTreeSet<Concept> = ordered[..t].iter().copied().collect();
            Ok(ConceptSubset {
                target: t,
                atoms: ordered[..t].iter().map(|c| c.word().to_string()).collect(),
                indices: subset_with_atoms(examples, &allowed),
            })
        })
        .collect()
}
