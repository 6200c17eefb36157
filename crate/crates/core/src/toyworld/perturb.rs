//! Minimal-edit rewrites that turn a scene into its hard negative.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, Object, Relation, Scene, Shape, Size};
use super::ToyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ReplaceObject,
    ReplaceAttribute,
    ReplaceRelation,
    SwapObject,
    SwapAttribute,
    AddObject,
    AddAttribute,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        Self::ReplaceObject,
        Self::ReplaceAttribute,
        Self::ReplaceRelation,
        Self::SwapObject,
        Self::SwapAttribute,
        Self::AddObject,
        Self::AddAttribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ReplaceObject => "replace_object",
            Self::ReplaceAttribute => "replace_attribute",
            Self::ReplaceRelation => "replace_relation",
            Self::SwapObject => "swap_object",
            Self::SwapAttribute => "swap_attribute",
            Self::AddObject => "add_object",
            Self::AddAttribute => "add_attribute",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_replace_or_swap(self) -> bool {
        !matches!(self, Self::AddObject | Self::AddAttribute)
    }

    /// Whether the rewrite is defined for `scene`.
    pub fn applies_to(self, scene: &Scene) -> bool {
        let objs = scene.objects();
        match self {
            Self::ReplaceObject | Self::ReplaceAttribute => true,
            Self::ReplaceRelation | Self::SwapObject => objs.len() == 2,
            Self::SwapAttribute => {
                objs.len() == 2 && (objs[0].color != objs[1].color || objs[0].size != objs[1].size)
            }
            Self::AddObject | Self::AddAttribute => objs.len() == 1,
        }
    }
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn other_size(s: Size) -> Size {
    match s {
        Size::Small => Size::Large,
        Size::Large => Size::Small,
    }
}

fn fits(objs: &[Object], idx: usize, cand: &Object) -> bool {
    objs.iter().enumerate().all(|(j, o)| j == idx || !o.clashes(cand))
}

/// Applies `kind` to `scene`; the result is valid and differs from the input.
///
/// Returns [`ToyError::Inapplicable`] when the kind has no valid rewrite for this
/// scene; callers resample the kind in that case.
pub fn perturb<R: Rng + ?Sized>(scene: &Scene, kind: PerturbationKind, rng: &mut R) -> Result<Scene, ToyError> {
    if !kind.applies_to(scene) {
        return Err(ToyError::Inapplicable { kind: kind.name() });
    }
    let mut objs = scene.objects().to_vec();
    let rel = scene.relation();
    let out = match kind {
        PerturbationKind::ReplaceObject => {
            let mut order: Vec<usize> = (0..objs.len()).collect();
            order.shuffle(rng);
            let mut done = false;
            for i in order {
                let cands: Vec<Shape> = Shape::ALL
                    .iter()
                    .copied()
                    .filter(|&s| s != objs[i].shape && fits(&objs, i, &Object { shape: s, ..objs[i] }))
                    .collect();
                if let Some(&s) = cands.choose(rng) {
                    objs[i].shape = s;
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(ToyError::Inapplicable { kind: kind.name() });
            }
            Scene::new(objs, rel)?
        }
        PerturbationKind::ReplaceAttribute => {
            let i = rng.gen_range(0..objs.len());
            let colors: Vec<Color> = Color::ALL
                .iter()
                .copied()
                .filter(|&c| c != objs[i].color && fits(&objs, i, &Object { color: c, ..objs[i] }))
                .collect();
            if colors.is_empty() || rng.gen_bool(0.5) {
                objs[i].size = other_size(objs[i].size);
            } else {
                objs[i].color = *colors.choose(rng).expect("non-empty");
            }
            Scene::new(objs, rel)?
        }
        PerturbationKind::ReplaceRelation => {
            let cur = rel.expect("two-object scene has a relation");
            let cands: Vec<Relation> = Relation::ALL.iter().copied().filter(|&r| r != cur).collect();
            Scene::new(objs, Some(*cands.choose(rng).expect("three alternatives")))?
        }
        PerturbationKind::SwapObject => {
            objs.swap(0, 1);
            Scene::new(objs, rel)?
        }
        PerturbationKind::SwapAttribute => {
            let mut attrs = Vec::new();
            if objs[0].color != objs[1].color {
                attrs.push(0);
            }
            if objs[0].size != objs[1].size {
                attrs.push(1);
            }
            let (a, b) = (objs[0], objs[1]);
            match attrs.choose(rng).expect("applies_to checked a differing attribute") {
                0 => {
                    objs[0].color = b.color;
                    objs[1].color = a.color;
                }
                _ => {
                    objs[0].size = b.size;
                    objs[1].size = a.size;
                }
            }
            Scene::new(objs, rel)?
        }
        PerturbationKind::AddObject => {
            let base = objs[0];
            let cands: Vec<Object> = Shape::ALL
                .iter()
                .flat_map(|&shape| {
                    Color::ALL
                        .iter()
                        .flat_map(move |&color| Size::ALL.iter().map(move |&size| Object::new(shape, color, size)))
                })
                .filter(|o| !o.clashes(&base))
                .collect();
            let extra = *cands.choose(rng).expect("candidates exist");
            let r = *Relation::ALL.choose(rng).expect("relations exist");
            Scene::pair(base, r, extra)?
        }
        PerturbationKind::AddAttribute => {
            objs[0].size = other_size(objs[0].size);
            Scene::new(objs, None)?
        }
    };
    debug_assert_ne!(&out, scene);
    Ok(out)
}
