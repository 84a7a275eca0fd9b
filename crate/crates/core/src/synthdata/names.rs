use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::scene::AttrId;
use crate::error::{AttrError, Result};

/// Surface forms per attribute, indexed like [`AttrId::ALL`]. The first entry
/// is the canonical name.
pub const SYNONYMS: [&[&str]; 6] = [
    &["object shape", "shape of the object", "foreground form"],
    &["object color", "color of the object", "foreground hue"],
    &["object size", "size of the object", "foreground scale"],
    &["object position", "position of the object", "foreground location"],
    &["background color", "color of the background", "backdrop hue"],
    &["image brightness", "brightness of the image", "overall lighting"],
];

/// An attribute name as written in an annotation: a canonical id plus the
/// synonym used to express it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeName {
    pub id: AttrId,
    form: u8,
}

impl AttributeName {
    pub fn canonical(id: AttrId) -> Self {
        AttributeName { id, form: 0 }
    }

    pub fn new(id: AttrId, form: usize) -> Result<Self> {
        if form >= SYNONYMS[id.index()].len() {
            return Err(AttrError::InvalidInput(format!(
                "{id} has no surface form {form}"
            )));
        }
        Ok(AttributeName { id, form: form as u8 })
    }

    pub fn form(self) -> usize {
        self.form as usize
    }

    pub fn forms(id: AttrId) -> impl Iterator<Item = AttributeName> {
        (0..SYNONYMS[id.index()].len()).map(move |f| AttributeName { id, form: f as u8 })
    }

    /// Every surface form of every attribute.
    pub fn all() -> impl Iterator<Item = AttributeName> {
        AttrId::ALL.iter().flat_map(|&id| Self::forms(id))
    }

    pub fn surface(self) -> &'static str {
        SYNONYMS[self.id.index()][self.form()]
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase();
        Self::all()
            .find(|n| n.surface() == norm)
            .ok_or_else(|| AttrError::UnknownAttribute(s.to_string()))
    }
}

impl fmt::Display for AttributeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.surface())
    }
}

impl Serialize for AttributeName {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.surface())
    }
}

impl<'de> Deserialize<'de> for AttributeName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AttributeName::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_attribute_has_three_synonyms() {
        for id in AttrId::ALL {
            assert!(SYNONYMS[id.index()].len() >= 3);
            assert_eq!(SYNONYMS[id.index()][0], id.name());
        }
    }

    #[test]
    fn surface_forms_map_to_exactly_one_id() {
        let all: Vec<_> = AttributeName::all().collect();
        for n in &all {
            let hits = all.iter().filter(|m| m.surface() == n.surface()).count();
            assert_eq!(hits, 1, "{n}");
            assert_eq!(AttributeName::parse(n.surface()).unwrap(), *n);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(
            AttributeName::parse("texture"),
            Err(AttrError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn parse_ignores_case_and_padding() {
        let n = AttributeName::parse("  Foreground Hue ").unwrap();
        assert_eq!(n.id, AttrId::ObjectColor);
    }
}
