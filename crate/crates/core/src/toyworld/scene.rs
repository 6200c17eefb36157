use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ToyError;

macro_rules! atom_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }
    };
}

atom_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
atom_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Purple => "purple" });
atom_enum!(Size { Small => "small", Large => "large" });
atom_enum!(
    /// Spatial relation binding the first object to the second.
    Relation { LeftOf => "left of", RightOf => "right of", Above => "above", Below => "below" }
);
atom_enum!(
    /// Canvas shade. Not part of the caption, so it lives beside the scene.
    Background { Dark => "dark", Mid => "mid", Light => "light" }
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl Object {
    pub fn new(shape: Shape, color: Color, size: Size) -> Self {
        Self { shape, color, size }
    }

    /// Two objects in one scene may not share both shape and color.
    pub fn clashes(&self, other: &Object) -> bool {
        self.shape == other.shape && self.color == other.color
    }
}

/// One or two objects; two objects always come with a relation from the first to the second.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScene", into = "RawScene")]
pub struct Scene {
    objects: Vec<Object>,
    relation: Option<Relation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    objects: Vec<Object>,
    relation: Option<Relation>,
}

impl TryFrom<RawScene> for Scene {
    type Error = ToyError;

    fn try_from(raw: RawScene) -> Result<Self, ToyError> {
        Scene::new(raw.objects, raw.relation)
    }
}

impl From<Scene> for RawScene {
    fn from(s: Scene) -> Self {
        RawScene { objects: s.objects, relation: s.relation }
    }
}

impl Scene {
    pub fn new(objects: Vec<Object>, relation: Option<Relation>) -> Result<Self, ToyError> {
        match (objects.len(), relation) {
            (1, None) => {}
            (2, Some(_)) => {
                if objects[0].clashes(&objects[1]) {
                    return Err(ToyError::InvalidScene("objects share both shape and color".into()));
                }
            }
            (1, Some(_)) => return Err(ToyError::InvalidScene("relation needs two objects".into())),
            (2, None) => return Err(ToyError::InvalidScene("two objects need a relation".into())),
            (n, _) => return Err(ToyError::InvalidScene(format!("{n} objects (expected 1 or 2)"))),
        }
        Ok(Self { objects, relation })
    }

    pub fn single(obj: Object) -> Self {
        Self { objects: vec![obj], relation: None }
    }

    pub fn pair(a: Object, relation: Relation, b: Object) -> Result<Self, ToyError> {
        Self::new(vec![a, b], Some(relation))
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn relation(&self) -> Option<Relation> {
        self.relation
    }
}

fn all_objects() -> impl Iterator<Item = Object> {
    Shape::ALL.iter().flat_map(|&shape| {
        Color::ALL
            .iter()
            .flat_map(move |&color| Size::ALL.iter().map(move |&size| Object::new(shape, color, size)))
    })
}

/// Every valid scene, one-object scenes first, in a fixed order.
pub fn scene_space() -> &'static [Scene] {
    static SPACE: OnceLock<Vec<Scene>> = OnceLock::new();
    SPACE.get_or_init(|| {
        let mut out: Vec<Scene> = all_objects().map(Scene::single).collect();
        for a in all_objects() {
            for b in all_objects() {
                if a.clashes(&b) {
                    continue;
                }
                for &rel in Relation::ALL {
                    out.push(Scene { objects: vec![a, b], relation: Some(rel) });
                }
            }
        }
        out
    })
}

/// Uniform draw over all valid scenes.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> Scene {
    let space = scene_space();
    space[rng.gen_range(0..space.len())].clone()
}

/// Uniform draw over valid scenes satisfying `keep`.
pub fn sample_scene_where<R: Rng + ?Sized>(rng: &mut R, keep: impl Fn(&Scene) -> bool) -> Option<Scene> {
    let pool: Vec<&Scene> = scene_space().iter().filter(|s| keep(s)).collect();
    if pool.is_empty() {
        return None;
    }
    Some(pool[rng.gen_range(0..pool.len())].clone())
}

pub fn sample_background<R: Rng + ?Sized>(rng: &mut R) -> Background {
    Background::ALL[rng.gen_range(0..Background::ALL.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn space_size() {
        // 30 single objects; 30*30 ordered pairs minus 60 clashing pairs, times 4 relations.
        assert_eq!(scene_space().len(), 30 + 840 * 4);
    }

    #[test]
    fn invariants_rejected() {
        let o = Object::new(Shape::Circle, Color::Red, Size::Small);
        let o2 = Object::new(Shape::Circle, Color::Red, Size::Large);
        assert!(Scene::new(vec![o, o2], Some(Relation::Above)).is_err());
        assert!(Scene::new(vec![o], Some(Relation::Above)).is_err());
        assert!(Scene::new(vec![], None).is_err());
        let bad = r#"{"objects":[{"shape":"circle","color":"red","size":"small"}],"relation":"above"}"#;
        assert!(serde_json::from_str::<Scene>(bad).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
