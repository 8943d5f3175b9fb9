//! Per-class handcrafted concept prompts and their frozen text features.
//!
//! For every base class: average the class's few-shot image features, use
//! the mean as the retrieval query into the handcrafted cache, hand the
//! retrieved concept words (plus the class name) to the prompt generator,
//! and freeze the encoded text feature. These features are the consistency
//! targets during training and never carry gradients.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::cache::{retrieve_concepts, HandcraftedCache};
use crate::dataset::FewShotDataset;
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::promptgen::{generate_prompt, PromptGenerator, TemplateGenerator};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptEntry {
    pub words: Vec<String>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct HandcraftedPromptSet {
    /// Class name → prompt entry; BTreeMap keeps serialization stable.
    pub entries: BTreeMap<String, PromptEntry>,
}

pub fn build_prompt_set(
    encoders: &Encoders,
    cache: &HandcraftedCache,
    dataset: &FewShotDataset,
    k2: usize,
    generator: &dyn PromptGenerator,
    fallback: &TemplateGenerator,
) -> Result<HandcraftedPromptSet> {
    let by_class = dataset.train_by_class();
    let mut entries = BTreeMap::new();
    for (cls, images) in by_class.iter().enumerate() {
        let name = dataset.class_name(cls).to_string();
        if images.is_empty() {
            return Err(Error::Config(format!("class {name} has no training images")));
        }
        let mut mean = vec![0.0; encoders.dim()];
        for img in images {
            let f = encoders.encode_image_value(img)?;
            for (m, v) in mean.iter_mut().zip(&f) {
                *m += v / images.len() as f64;
            }
        }
        let concepts = retrieve_concepts(cache, &mean, k2)?;
        let words = generate_prompt(&name, &concepts, generator, fallback)?;
        let feature = encoders.encode_prompt_text_value(&words)?;
        entries.insert(name, PromptEntry { words, feature });
    }
    Ok(HandcraftedPromptSet { entries })
}

impl HandcraftedPromptSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature(&self, class_name: &str) -> Option<&[f64]> {
        self.entries.get(class_name).map(|e| e.feature.as_slice())
    }

    /// Features in the order of the given class names; errors when a class
    /// is missing from the set.
    pub fn features_for(&self, class_names: &[String]) -> Result<Vec<&[f64]>> {
        class_names
            .iter()
            .map(|n| {
                self.feature(n).ok_or_else(|| {
                    Error::Config(format!("prompt set is missing class {n}"))
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            what: format!("prompt set at {}", path.display()),
            hint: "gen-prompts".into(),
        })?;
        serde_json::from_str(&json).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{build_cache, CacheOptions};
    use crate::dataset::{synth_dataset, SynthParams};
    use crate::encoders::EncoderConfig;
    use crate::lexicon::ConceptLexicon;
    use crate::tensor::{dot_slice, norm_slice};

    fn setup() -> (Encoders, HandcraftedCache, FewShotDataset) {
        let enc = Encoders::new(EncoderConfig { seed: 3, d_in: 12, d_h: 24, d: 16, l_max: 24 })
            .unwrap();
        let params = SynthParams {
            c_cls: 4,
            h: 4,
            n_concepts: 4,
            sigma_noise: 0.1,
            test_per_class: 2,
            concept_scale: 0.3,
            align_steps: 0,
            align_lr: 0.5,
            scramble_alignment: true,
            context_tokens: 8,
            context_scale: 3.0,
            align_blend: 0.65,
        };
        let ds = synth_dataset(&enc, &params, 11).unwrap();
        let images: Vec<Vec<f64>> = ds.train.iter().map(|i| i.input.clone()).collect();
        let cache =
            build_cache(&enc, &ConceptLexicon::builtin(), &images, &CacheOptions::new(3)).unwrap();
        (enc, cache, ds)
    }

    #[test]
    fn one_entry_per_base_class_with_frozen_unit_features() {
        let (enc, cache, ds) = setup();
        let tpl = TemplateGenerator::default();
        let set = build_prompt_set(&enc, &cache, &ds, 5, &tpl, &tpl).unwrap();
        assert_eq!(set.len(), ds.num_base());
        for name in &ds.base {
            let e = &set.entries[name];
            assert!((norm_slice(&e.feature) - 1.0).abs() < 1e-12);
            // recomputable bit-exactly from the stored words
            let again = enc.encode_prompt_text_value(&e.words).unwrap();
            assert_eq!(again, e.feature);
        }
    }

    #[test]
    fn concept_selection_matches_retrieval_on_class_mean() {
        let (enc, cache, ds) = setup();
        let tpl = TemplateGenerator::default();
        let k2 = 4;
        let set = build_prompt_set(&enc, &cache, &ds, k2, &tpl, &tpl).unwrap();
        let by_class = ds.train_by_class();
        for (cls, images) in by_class.iter().enumerate() {
            // independent recomputation of the class mean and retrieval
            let mut mean = vec![0.0; enc.dim()];
            for img in images {
                let f = enc.encode_image_value(img).unwrap();
                for (m, v) in mean.iter_mut().zip(&f) {
                    *m += v / images.len() as f64;
                }
            }
            let mut scored: Vec<(usize, f64)> = cache
                .pairs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    (i, dot_slice(&mean, &p.key) / (norm_slice(&mean) * norm_slice(&p.key)))
                })
                .collect();
            scored.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)));
            let expect: Vec<String> =
                scored.iter().take(k2).map(|(i, _)| cache.pairs[*i].value.clone()).collect();
            let words = &set.entries[ds.class_name(cls)].words;
            // template is [a photo of <name> which is <concepts...>]
            assert_eq!(&words[words.len() - k2..], expect.as_slice());
        }
    }

    #[test]
    fn roundtrip_preserves_features_bit_exactly() {
        let (enc, cache, ds) = setup();
        let tpl = TemplateGenerator::default();
        let set = build_prompt_set(&enc, &cache, &ds, 3, &tpl, &tpl).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.json");
        set.save(&path).unwrap();
        let back = HandcraftedPromptSet::load(&path).unwrap();
        assert_eq!(set, back);
        assert_eq!(set.to_json().unwrap(), back.to_json().unwrap());
    }

    #[test]
    fn missing_file_names_the_prerequisite() {
        let err = HandcraftedPromptSet::load(Path::new("/nonexistent/prompts.json")).unwrap_err();
        assert!(err.to_string().contains("gen-prompts"));
    }
}
