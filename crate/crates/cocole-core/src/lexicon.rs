//! Concept lexicon: descriptive words grouped by category.
//!
//! The built-in lexicon ships 200 words over seven categories. The category
//! is inert metadata; nothing downstream keys on it.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LexiconEntry {
    pub word: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLexicon {
    entries: Vec<LexiconEntry>,
}

impl ConceptLexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("lexicon must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.word.is_empty() || e.category.is_empty() {
                return Err(Error::Config("lexicon words and categories must be nonempty".into()));
            }
            if !seen.insert(e.word.clone()) {
                return Err(Error::Config(format!("duplicate lexicon word {:?}", e.word)));
            }
        }
        Ok(ConceptLexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn word(&self, i: usize) -> &str {
        &self.entries[i].word
    }

    // ── File format: JSON list of {word, category} ──────────────────

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let entries: Vec<LexiconEntry> = serde_json::from_str(json)?;
        ConceptLexicon::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Built-in desk-scale lexicon: 200 descriptive words.
    pub fn builtin() -> Self {
        let groups: &[(&str, &[&str])] = &[
            ("texture", &[
                "smooth", "rough", "grainy", "silky", "fuzzy", "bumpy", "glossy", "matte",
                "coarse", "velvety", "slippery", "sticky", "prickly", "woolly", "leathery",
                "metallic", "sandy", "pebbly", "crumbly", "feathery", "waxy", "rubbery",
                "scaly", "fibrous", "spongy", "brittle", "powdery", "gritty", "downy",
                "polished",
            ]),
            ("color", &[
                "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown",
                "black", "white", "gray", "crimson", "scarlet", "amber", "golden", "olive",
                "teal", "turquoise", "indigo", "violet", "magenta", "beige", "ivory",
                "charcoal", "silver", "maroon", "navy", "emerald", "lavender", "tan",
            ]),
            ("transparency", &[
                "transparent", "translucent", "opaque", "clear", "cloudy", "misty", "foggy",
                "hazy", "crystalline", "glassy", "murky", "milky", "limpid", "frosted",
                "sheer", "veiled", "smoky", "turbid", "filmy", "gauzy", "watery", "dusky",
                "shadowy", "diaphanous", "pellucid",
            ]),
            ("brightness", &[
                "bright", "dim", "dark", "radiant", "glowing", "shiny", "dull", "brilliant",
                "gleaming", "sparkling", "twinkling", "shimmering", "dazzling", "faded",
                "vivid", "muted", "pale", "deep", "fluorescent", "neon", "sunlit", "moonlit",
                "shaded", "blazing", "flickering",
            ]),
            ("motion", &[
                "spinning", "rolling", "flying", "running", "jumping", "swimming", "floating",
                "falling", "rising", "gliding", "drifting", "racing", "crawling", "leaping",
                "soaring", "diving", "bouncing", "swaying", "twisting", "turning", "flowing",
                "rushing", "tumbling", "sliding", "galloping", "fluttering", "darting",
                "wobbling", "zooming", "marching",
            ]),
            ("emotion", &[
                "happy", "sad", "angry", "calm", "excited", "peaceful", "fierce", "gentle",
                "playful", "serious", "joyful", "gloomy", "cheerful", "serene", "tense",
                "relaxed", "curious", "sleepy", "alert", "timid", "bold", "proud", "shy",
                "friendly", "hostile", "tranquil", "restless", "content", "eager", "weary",
            ]),
            ("pattern", &[
                "striped", "spotted", "dotted", "checkered", "plaid", "floral", "geometric",
                "swirled", "zigzag", "wavy", "mottled", "speckled", "marbled", "banded",
                "latticed", "meshed", "honeycombed", "tessellated", "paisley", "herringbone",
                "pinstriped", "gridded", "ringed", "veined", "streaked", "dappled",
                "brindled", "crosshatched", "chevroned", "netted",
            ]),
        ];
        let entries = groups
            .iter()
            .flat_map(|(cat, words)| {
                words.iter().map(move |w| LexiconEntry {
                    word: (*w).to_string(),
                    category: (*cat).to_string(),
                })
            })
            .collect();
        ConceptLexicon::new(entries).expect("builtin lexicon is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_200_unique_words() {
        let lex = ConceptLexicon::builtin();
        assert_eq!(lex.len(), 200);
        let cats: HashSet<&str> = lex.entries().iter().map(|e| e.category.as_str()).collect();
        assert_eq!(cats.len(), 7);
    }

    #[test]
    fn rejects_duplicates_and_empties() {
        let dup = vec![
            LexiconEntry { word: "red".into(), category: "color".into() },
            LexiconEntry { word: "red".into(), category: "color".into() },
        ];
        assert!(ConceptLexicon::new(dup).is_err());
        assert!(ConceptLexicon::new(vec![]).is_err());
        let empty_cat = vec![LexiconEntry { word: "red".into(), category: "".into() }];
        assert!(ConceptLexicon::new(empty_cat).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let lex = ConceptLexicon::builtin();
        let json = lex.to_json().unwrap();
        let back = ConceptLexicon::from_json(&json).unwrap();
        assert_eq!(lex, back);
    }
}
