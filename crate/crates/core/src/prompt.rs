//! Captions over a fixed template, e.g.
//! `a small red circle at center on white background, dim`.
//! Omitted fields drop their words; an omitted shape reads `object`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AttrError, Result};
use crate::synthdata::{AttrId, AttrScene};

const FUNCTION_WORDS: [&str; 6] = ["a", "object", "at", "on", "background", ","];

/// Caption words: function words, then every value name in attribute order.
pub fn caption_vocab() -> Vec<&'static str> {
    let mut v: Vec<&str> = FUNCTION_WORDS.to_vec();
    for a in AttrId::ALL {
        v.extend((0..a.cardinality()).map(|i| a.value_name(i)));
    }
    v
}

fn word_id(word: &str) -> Option<usize> {
    caption_vocab().iter().position(|w| *w == word)
}

fn value_word(attr: AttrId, value: usize) -> usize {
    let offset: usize = AttrId::ALL[..attr.index()].iter().map(|a| a.cardinality()).sum();
    FUNCTION_WORDS.len() + offset + value
}

/// A subset of scene fields to verbalize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub fields: [Option<usize>; 6],
}

impl PromptSpec {
    pub fn empty() -> Self {
        PromptSpec::default()
    }

    pub fn full(scene: &AttrScene) -> Self {
        PromptSpec { fields: scene.values().map(Some) }
    }

    pub fn from_scene(scene: &AttrScene, attrs: &[AttrId]) -> Self {
        let mut p = PromptSpec::empty();
        for &a in attrs {
            p.fields[a.index()] = Some(scene.value(a));
        }
        p
    }

    pub fn get(&self, attr: AttrId) -> Option<usize> {
        self.fields[attr.index()]
    }

    pub fn with(mut self, attr: AttrId, value: usize) -> Self {
        self.fields[attr.index()] = Some(value);
        self
    }

    pub fn without(mut self, attr: AttrId) -> Self {
        self.fields[attr.index()] = None;
        self
    }

    pub fn specified(&self) -> Vec<AttrId> {
        AttrId::ALL.iter().copied().filter(|a| self.get(*a).is_some()).collect()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        let mut ids = vec![0];
        let field = |a: AttrId| self.get(a).map(|v| value_word(a, v));
        ids.extend(field(AttrId::ObjectSize));
        ids.extend(field(AttrId::ObjectColor));
        ids.push(field(AttrId::ObjectShape).unwrap_or(1));
        if let Some(w) = field(AttrId::ObjectPosition) {
            ids.extend([2, w]);
        }
        if let Some(w) = field(AttrId::BackgroundColor) {
            ids.extend([3, w, 4]);
        }
        if let Some(w) = field(AttrId::ImageBrightness) {
            ids.extend([5, w]);
        }
        ids
    }

    pub fn text(&self) -> String {
        let vocab = caption_vocab();
        let mut out = String::new();
        for id in self.token_ids() {
            let w = vocab[id];
            if !out.is_empty() && w != "," {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spaced = text.replace(',', " , ");
        let ids = spaced
            .split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                word_id(&lower).ok_or_else(|| AttrError::UnknownToken(w.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_token_ids(&ids).map_err(|e| match e {
            AttrError::InvalidInput(msg) => AttrError::InvalidInput(format!("{text:?}: {msg}")),
            other => other,
        })
    }

    pub fn from_token_ids(ids: &[usize]) -> Result<Self> {
        let mut spec = PromptSpec::empty();
        let mut it = ids.iter().copied().peekable();
        if it.next() != Some(0) {
            return Err(malformed("caption must start with \"a\""));
        }
        for attr in [AttrId::ObjectSize, AttrId::ObjectColor] {
            if let Some(v) = it.peek().and_then(|&id| value_of(id, attr)) {
                spec.fields[attr.index()] = Some(v);
                it.next();
            }
        }
        match it.next() {
            Some(1) => {}
            Some(id) => {
                let v = value_of(id, AttrId::ObjectShape).ok_or_else(|| malformed("expected a shape"))?;
                spec.fields[AttrId::ObjectShape.index()] = Some(v);
            }
            None => return Err(malformed("caption ends before the shape")),
        }
        clause(&mut it, &mut spec, 2, AttrId::ObjectPosition, None)?;
        clause(&mut it, &mut spec, 3, AttrId::BackgroundColor, Some(4))?;
        clause(&mut it, &mut spec, 5, AttrId::ImageBrightness, None)?;
        if it.next().is_some() {
            return Err(malformed("unexpected trailing words"));
        }
        Ok(spec)
    }
}

fn malformed(msg: &str) -> AttrError {
    AttrError::InvalidInput(msg.to_string())
}

fn value_of(id: usize, attr: AttrId) -> Option<usize> {
    (0..attr.cardinality()).find(|&v| value_word(attr, v) == id)
}

/// Optional `lead value [trail]` clause.
fn clause(
    it: &mut std::iter::Peekable<impl Iterator<Item = usize>>,
    spec: &mut PromptSpec,
    lead: usize,
    attr: AttrId,
    trail: Option<usize>,
) -> Result<()> {
    if it.peek() != Some(&lead) {
        return Ok(());
    }
    it.next();
    let v = it
        .next()
        .and_then(|id| value_of(id, attr))
        .ok_or_else(|| malformed(&format!("missing {attr}")))?;
    if trail.is_some() && it.next() != trail {
        return Err(malformed(&format!("malformed {attr} clause")));
    }
    spec.fields[attr.index()] = Some(v);
    Ok(())
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

impl Serialize for PromptSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text())
    }
}

impl<'de> Deserialize<'de> for PromptSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptSpec::parse(&s).map_err(serde::de::Error::custom)
    }
}
