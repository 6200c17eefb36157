//! Fixed caption grammar over a closed vocabulary.
//!
//! ```text
//! caption := phrase | phrase relation phrase
//! phrase  := "a" size color shape
//! ```

use serde::{Deserialize, Serialize};

use super::scene::{Color, Object, Relation, Scene, Shape, Size};
use super::ToyError;

/// Token id reserved for padding.
pub const PAD_ID: u32 = 0;

/// Vocabulary, indexed by token id.
pub const VOCAB: &[&str] = &[
    "<pad>", "a", "small", "large", "red", "green", "blue", "yellow", "purple", "circle", "square",
    "triangle", "left", "right", "of", "above", "below",
];

/// Longest caption the grammar can produce.
pub const MAX_CAPTION_TOKENS: usize = 10;

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|&w| w == word).filter(|&i| i != PAD_ID as usize).map(|i| i as u32)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl Caption {
    pub fn from_text(text: &str) -> Result<Self, ToyError> {
        let tokens = tokenize(text)?;
        Ok(Self { text: detokenize(&tokens)?, tokens })
    }

    pub fn from_tokens(tokens: &[u32]) -> Result<Self, ToyError> {
        Ok(Self { text: detokenize(tokens)?, tokens: tokens.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text: &str) -> Result<Vec<u32>, ToyError> {
    text.split_whitespace()
        .map(|w| token_id(w).ok_or_else(|| ToyError::Parse(format!("unknown word '{w}'"))))
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<String, ToyError> {
    let words = tokens
        .iter()
        .map(|&t| match VOCAB.get(t as usize) {
            Some(w) if t != PAD_ID => Ok(*w),
            _ => Err(ToyError::Parse(format!("token id {t} is not a word"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(words.join(" "))
}

fn phrase(o: &Object) -> String {
    format!("a {} {} {}", o.size.word(), o.color.word(), o.shape.word())
}

pub fn caption_of(scene: &Scene) -> Caption {
    let objs = scene.objects();
    let text = match scene.relation() {
        None => phrase(&objs[0]),
        Some(rel) => format!("{} {} {}", phrase(&objs[0]), rel.word(), phrase(&objs[1])),
    };
    let tokens = tokenize(&text).expect("grammar only emits vocabulary words");
    Caption { tokens, text }
}

fn parse_phrase(words: &[&str]) -> Result<(Object, usize), ToyError> {
    let err = |what: &str| ToyError::Parse(format!("expected {what} in '{}'", words.join(" ")));
    if words.first() != Some(&"a") {
        return Err(err("'a'"));
    }
    let size = words.get(1).and_then(|w| Size::from_word(w)).ok_or_else(|| err("a size"))?;
    let color = words.get(2).and_then(|w| Color::from_word(w)).ok_or_else(|| err("a color"))?;
    let shape = words.get(3).and_then(|w| Shape::from_word(w)).ok_or_else(|| err("a shape"))?;
    Ok((Object::new(shape, color, size), 4))
}

/// Inverse of [`caption_of`]. Rejects anything outside the grammar.
pub fn parse(text: &str) -> Result<Scene, ToyError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let (first, used) = parse_phrase(&words)?;
    let rest = &words[used..];
    if rest.is_empty() {
        return Ok(Scene::single(first));
    }
    let (rel, rel_len) = match rest {
        ["left", "of", ..] => (Relation::LeftOf, 2),
        ["right", "of", ..] => (Relation::RightOf, 2),
        ["above", ..] => (Relation::Above, 1),
        ["below", ..] => (Relation::Below, 1),
        _ => return Err(ToyError::Parse(format!("expected a relation in '{text}'"))),
    };
    let tail = &rest[rel_len..];
    if tail.is_empty() {
        return Err(ToyError::Parse(format!("relation without a second object in '{text}'")));
    }
    let (second, used2) = parse_phrase(tail)?;
    if used2 != tail.len() {
        return Err(ToyError::Parse(format!("trailing words in '{text}'")));
    }
    Scene::pair(first, rel, second)
}

pub fn parse_tokens(tokens: &[u32]) -> Result<Scene, ToyError> {
    parse(&detokenize(tokens)?)
}
