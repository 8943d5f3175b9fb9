//! Handcrafted concept cache: one (averaged-image-feature key, concept word)
//! pair per lexicon entry, built once from frozen encoders and the few-shot
//! training images. Keys carry no gradients anywhere.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::lexicon::ConceptLexicon;
use crate::retrieval::top_k_indices;
use crate::tensor::{cosine_slice, dot_slice, normalize_slice};

pub const DEFAULT_CACHE_PREFIX: &[&str] = &["the", "photo", "is"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CachePair {
    pub key: Vec<f64>,
    pub value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HandcraftedCache {
    pub encoder_seed: u64,
    pub k1: usize,
    pub pairs: Vec<CachePair>,
}

/// Knobs for cache construction. `renormalize_keys` keeps key similarity a
/// pure cosine; the raw-average mode exists for fidelity experiments.
#[derive(Debug, Clone)]
pub struct CacheOptions {
    pub k1: usize,
    pub renormalize_keys: bool,
    pub prefix: Vec<String>,
}

impl CacheOptions {
    pub fn new(k1: usize) -> Self {
        CacheOptions {
            k1,
            renormalize_keys: true,
            prefix: DEFAULT_CACHE_PREFIX.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// For each concept word: encode the prefixed word, score every training
/// image feature by the dot product of the unit vectors, average the K1
/// best features, store (key, word).
pub fn build_cache(
    encoders: &Encoders,
    lexicon: &ConceptLexicon,
    train_images: &[Vec<f64>],
    opts: &CacheOptions,
) -> Result<HandcraftedCache> {
    if lexicon.is_empty() {
        return Err(Error::Config("cannot build cache from an empty lexicon".into()));
    }
    if opts.k1 == 0 {
        return Err(Error::Config("K1 must be at least 1".into()));
    }
    if opts.k1 > train_images.len() {
        return Err(Error::Config(format!(
            "K1 {} exceeds the {} training images",
            opts.k1,
            train_images.len()
        )));
    }

    let features: Vec<Vec<f64>> = train_images
        .iter()
        .map(|x| encoders.encode_image_value(x))
        .collect::<Result<_>>()?;

    let mut pairs = Vec::with_capacity(lexicon.len());
    for entry in lexicon.entries() {
        let mut words = opts.prefix.clone();
        words.push(entry.word.clone());
        let concept_feat = encoders.encode_prompt_text_value(&words)?;
        let scores: Vec<f64> = features.iter().map(|f| dot_slice(&concept_feat, f)).collect();
        let top = top_k_indices(&scores, opts.k1);
        let d = encoders.dim();
        let mut key = vec![0.0; d];
        for &i in &top {
            for (k, v) in key.iter_mut().zip(&features[i]) {
                *k += v;
            }
        }
        for k in key.iter_mut() {
            *k /= opts.k1 as f64;
        }
        if opts.renormalize_keys {
            key = normalize_slice(&key)?;
        }
        pairs.push(CachePair { key, value: entry.word.clone() });
    }
    Ok(HandcraftedCache { encoder_seed: encoders.config().seed, k1: opts.k1, pairs })
}

/// Words of the K2 cache keys most similar to the query, descending cosine
/// similarity, ties toward lower lexicon index.
pub fn retrieve_concepts(cache: &HandcraftedCache, f_v: &[f64], k2: usize) -> Result<Vec<String>> {
    if k2 > cache.pairs.len() {
        return Err(Error::Config(format!(
            "K2 {} exceeds cache size {}",
            k2,
            cache.pairs.len()
        )));
    }
    let scores: Vec<f64> = cache.pairs.iter().map(|p| cosine_slice(f_v, &p.key)).collect();
    let top = top_k_indices(&scores, k2);
    Ok(top.into_iter().map(|i| cache.pairs[i].value.clone()).collect())
}

impl HandcraftedCache {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            what: format!("concept cache at {}", path.display()),
            hint: "build-cache".into(),
        })?;
        serde_json::from_str(&json).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}
