//! Appearance attribute vocabulary shared by providers, debate, and matching.
//!
//! Providers answer description requests with one labeled line per attribute
//! (`clothing: red jacket`). The fixed key set below is the whole attribute
//! namespace; parsing, normalization, and disagreement measures all operate
//! on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The closed set of attribute keys a description may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKey {
    Clothing,
    Accessories,
    Hairstyle,
    FacingDirection,
    Other,
}

impl AttrKey {
    pub const ALL: [AttrKey; 5] = [
        AttrKey::Clothing,
        AttrKey::Accessories,
        AttrKey::Hairstyle,
        AttrKey::FacingDirection,
        AttrKey::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttrKey::Clothing => "clothing",
            AttrKey::Accessories => "accessories",
            AttrKey::Hairstyle => "hairstyle",
            AttrKey::FacingDirection => "facing_direction",
            AttrKey::Other => "other",
        }
    }
}

impl fmt::Display for AttrKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttrKey {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        match folded.as_str() {
            "clothing" => Ok(AttrKey::Clothing),
            "accessories" => Ok(AttrKey::Accessories),
            "hairstyle" => Ok(AttrKey::Hairstyle),
            "facing_direction" | "facing" => Ok(AttrKey::FacingDirection),
            "other" => Ok(AttrKey::Other),
            _ => Err(()),
        }
    }
}

/// Attribute map of one description. Values are stored as the provider wrote
/// them; comparisons go through [`normalize`].
pub type Attributes = BTreeMap<AttrKey, String>;

/// Canonical form used for all attribute comparisons: lowercase, trimmed,
/// internal whitespace collapsed to single spaces.
pub fn normalize(value: &str) -> String {
    value
        .split_whitespace()
        .map(|word| word.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Attribute map with every value normalized.
pub fn normalized_map(attrs: &Attributes) -> BTreeMap<AttrKey, String> {
    attrs.iter().map(|(k, v)| (*k, normalize(v))).collect()
}

/// Extract labeled attribute lines from a provider reply.
///
/// Accepts `key: value` lines, tolerating leading list bullets and mixed
/// case in the key. Lines that do not start with a known key are ignored;
/// empty values are dropped. The last occurrence of a key wins.
pub fn parse_attribute_lines(text: &str) -> Attributes {
    let mut attrs = Attributes::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim_start();
        let Some((key_part, value_part)) = line.split_once(':') else {
            continue;
        };
        let Ok(key) = key_part.parse::<AttrKey>() else {
            continue;
        };
        let value = value_part.trim();
        if !value.is_empty() {
            attrs.insert(key, value.to_string());
        }
    }
    attrs
}

/// Render attributes as the labeled-line sub-format providers are asked for,
/// keys in canonical order.
pub fn format_attribute_lines(attrs: &Attributes) -> String {
    let mut out = String::new();
    for key in AttrKey::ALL {
        if let Some(value) = attrs.get(&key) {
            out.push_str(key.name());
            out.push_str(": ");
            out.push_str(value);
            out.push('\n');
        }
    }
    out
}

/// True when both maps agree exactly after normalization. A key present in
/// one map but missing from the other counts as disagreement.
pub fn maps_agree(a: &Attributes, b: &Attributes) -> bool {
    normalized_map(a) == normalized_map(b)
}

/// Fraction of attribute keys the two maps disagree on, over the union of
/// keys present in either map. Missing-vs-present counts as disagreement;
/// two empty maps are perfectly similar (0.0).
pub fn dissimilarity(a: &Attributes, b: &Attributes) -> f64 {
    let na = normalized_map(a);
    let nb = normalized_map(b);
    let union: BTreeSet<AttrKey> = na.keys().chain(nb.keys()).copied().collect();
    if union.is_empty() {
        return 0.0;
    }
    let disagreements = union
        .iter()
        .filter(|key| na.get(key) != nb.get(key))
        .count();
    disagreements as f64 / union.len() as f64
}
