//! Synthetic few-shot datasets with a base/novel class split.
//!
//! Inputs are raw D_in-vectors. Each class has a prototype; concept offsets
//! are shared across classes (always across the base/novel boundary, so
//! novel classes stay reachable through concepts seen in training). Every
//! image carries a random subset of its class's concepts:
//! `prototype + concept_scale·Σ subset offsets + noise`, so images of one
//! class differ in which concepts they express, the way the same object
//! photographs with different attributes.
//!
//! Prototypes are optionally aligned to the frozen text feature of
//! `a photo of <class>` by gradient ascent through the frozen image encoder.
//! This plays the role of the pretrained image-text alignment a real
//! dual-encoder backbone would bring: without it, class discrimination at
//! inference (which flows only through the class token) carries no signal
//! for classes never seen in training, and zero-shot evaluation cannot beat
//! chance.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tape;

const CLASS_NAMES: &[&str] = &[
    "terrier", "sparrow", "orchid", "beetle", "salmon", "maple", "falcon", "lizard",
    "dahlia", "badger", "heron", "walnut", "cricket", "dolphin", "willow", "magpie",
    "tulip", "marmot", "osprey", "juniper", "gecko", "bison", "petunia", "weasel",
    "condor", "spruce", "mantis", "otter", "zinnia", "ferret", "plover", "cedar",
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Total classes; split evenly into base and novel.
    pub c_cls: usize,
    /// Shots per base class.
    pub h: usize,
    pub n_concepts: usize,
    pub sigma_noise: f64,
    pub test_per_class: usize,
    pub concept_scale: f64,
    /// Gradient-ascent steps aligning each prototype's image feature with
    /// its class text feature; 0 disables alignment.
    pub align_steps: usize,
    pub align_lr: f64,
    /// Align to text features of the class token under a hidden context of
    /// `context_tokens` scaled concept-word embeddings instead of the bare
    /// class embedding. A codebook with near-zero prompts sees a different
    /// context and scores at chance, while learned prompts can recover the
    /// hidden context's effect — for unseen class tokens too. Because the
    /// context is made of real lexicon words, the concept cache can
    /// rediscover them from the training images and the handcrafted
    /// prompts then anchor the consistency loss near the true geometry.
    pub scramble_alignment: bool,
    pub context_tokens: usize,
    /// Norm of each hidden context token. Large enough to push the hidden
    /// text features away from what near-zero prompts produce, small enough
    /// that trained prompt vectors can travel there.
    pub context_scale: f64,
    /// Blend between the plain `a photo of <name>` text feature (0.0) and
    /// the hidden-context feature (1.0) as the alignment target. The
    /// template component keeps handcrafted prompts informative and gives
    /// zero-shot transfer a head start; the hidden component keeps an
    /// untrained codebook near chance.
    pub align_blend: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            c_cls: 8,
            h: 16,
            n_concepts: 16,
            sigma_noise: 0.3,
            test_per_class: 25,
            concept_scale: 0.8,
            align_steps: 120,
            align_lr: 0.5,
            scramble_alignment: true,
            context_tokens: 8,
            context_scale: 3.0,
            align_blend: 0.8,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_cls < 2 || self.c_cls % 2 != 0 {
            return Err(Error::Config("c_cls must be even and at least 2".into()));
        }
        if self.n_concepts < 2 {
            return Err(Error::Config("need at least 2 concepts".into()));
        }
        if self.h == 0 || self.test_per_class == 0 {
            return Err(Error::Config("h and test_per_class must be at least 1".into()));
        }
        if self.sigma_noise < 0.0 || self.concept_scale < 0.0 || self.align_lr <= 0.0 {
            return Err(Error::Config("noise/scale/lr parameters out of range".into()));
        }
        if self.scramble_alignment && self.context_tokens == 0 {
            return Err(Error::Config("scrambled alignment needs at least one context token".into()));
        }
        if !(0.0..=1.0).contains(&self.align_blend) {
            return Err(Error::Config("align_blend must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledImage {
    /// Index into `classes`.
    pub class: usize,
    /// Concept offsets expressed by this image (subset of the class's
    /// assigned concepts).
    pub concepts: Vec<usize>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FewShotDataset {
    pub params: SynthParams,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub concept_offsets: Vec<Vec<f64>>,
    /// Classes each concept offset applies to; every offset covers at least
    /// two classes, one on each side of the split.
    pub concept_assignments: Vec<Vec<usize>>,
    /// Concept words whose scaled embeddings form the hidden alignment
    /// context (empty when alignment is unscrambled or disabled).
    pub context_words: Vec<String>,
    pub base: Vec<String>,
    pub novel: Vec<String>,
    /// Base classes only.
    pub train: Vec<LabeledImage>,
    /// All classes.
    pub test: Vec<LabeledImage>,
}

/// Gradient ascent of cosine(encode_image(x), target) in input space.
fn align_prototype(
    encoders: &Encoders,
    mut x: Vec<f64>,
    target: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    for _ in 0..steps {
        let mut g = Tape::new();
        let xt = g.leaf(x.clone(), vec![x.len()])?;
        let f = encoders.encode_image(&mut g, xt)?;
        let t = g.constant(target.to_vec(), vec![target.len()])?;
        let c = g.cosine_sim(f, t)?;
        g.backward(c)?;
        let grad = g.grad(xt).expect("leaf gradient populated");
        for (xi, gi) in x.iter_mut().zip(grad) {
            *xi += lr * gi;
        }
    }
    Ok(x)
}

pub fn synth_dataset(encoders: &Encoders, params: &SynthParams, seed: u64) -> Result<FewShotDataset> {
    params.validate()?;
    let d_in = encoders.input_dim();
    let c = params.c_cls;
    let b = c / 2;
    let mut r = rng::seeded(seed);

    let names: Vec<String> = (0..c)
        .map(|i| {
            CLASS_NAMES
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{i}"))
        })
        .collect();

    // All random draws happen in one fixed order; alignment is
    // deterministic and consumes no randomness.
    let raw_protos: Vec<Vec<f64>> = (0..c).map(|_| rng::gaussian_vec(&mut r, d_in, 1.0)).collect();
    let concept_offsets: Vec<Vec<f64>> =
        (0..params.n_concepts).map(|_| rng::gaussian_vec(&mut r, d_in, 1.0)).collect();
    // Hidden context: a seeded sample of distinct lexicon words, embedded
    // and scaled. Drawing indices (not vectors) keeps the stream layout
    // independent of the embedding dimension.
    let lexicon = crate::lexicon::ConceptLexicon::builtin();
    let mut context_words: Vec<String> = Vec::new();
    if params.scramble_alignment && params.align_steps > 0 {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < params.context_tokens.min(lexicon.len()) {
            let i = (rand_core::RngCore::next_u64(&mut r) % lexicon.len() as u64) as usize;
            if picked.insert(i) {
                context_words.push(lexicon.word(i).to_string());
            }
        }
    }
    let hidden_context: Vec<Vec<f64>> = context_words
        .iter()
        .map(|w| -> Result<Vec<f64>> {
            let e = encoders.embed_word(w)?;
            Ok(e.into_iter().map(|v| v * params.context_scale).collect())
        })
        .collect::<Result<_>>()?;

    // Alignment target per class: a normalized blend of the plain template
    // text feature and the hidden-context feature of the class token (or
    // the bare class embedding when not scrambled).
    let target_for = |name: &str| -> Result<Vec<f64>> {
        if !params.scramble_alignment {
            return encoders.embed_word(name);
        }
        let mut g = Tape::new();
        let mut tokens = Vec::with_capacity(hidden_context.len() + 1);
        for t in &hidden_context {
            tokens.push(g.constant(t.clone(), vec![t.len()])?);
        }
        let cls = encoders.embed_word(name)?;
        tokens.push(g.constant(cls, vec![encoders.dim()])?);
        let f = encoders.encode_text(&mut g, &tokens)?;
        let hidden = g.data(f).to_vec();
        let template_words: Vec<String> = ["a", "photo", "of"]
            .iter()
            .map(|s| s.to_string())
            .chain([name.to_string()])
            .collect();
        let template = encoders.encode_prompt_text_value(&template_words)?;
        let a = params.align_blend;
        let blended: Vec<f64> = hidden
            .iter()
            .zip(&template)
            .map(|(h, t)| a * h + (1.0 - a) * t)
            .collect();
        crate::tensor::normalize_slice(&blended)
    };

    let mut classes = Vec::with_capacity(c);
    for (name, proto) in names.iter().zip(raw_protos) {
        let prototype = if params.align_steps > 0 {
            let target = target_for(name)?;
            align_prototype(encoders, proto, &target, params.align_steps, params.align_lr)?
        } else {
            proto
        };
        classes.push(ClassSpec { name: name.clone(), prototype });
    }

    // Concept k belongs to base class (k mod b) and its novel counterpart.
    let concept_assignments: Vec<Vec<usize>> =
        (0..params.n_concepts).map(|k| vec![k % b, b + (k % b)]).collect();
    let per_class: Vec<Vec<usize>> = (0..c)
        .map(|cls| {
            concept_assignments
                .iter()
                .enumerate()
                .filter(|(_, a)| a.contains(&cls))
                .map(|(k, _)| k)
                .collect()
        })
        .collect();

    // Per image: a random nonempty subset of the class's concepts, then
    // gaussian noise. Draw counts per image are fixed, so the stream
    // layout (and thus the whole dataset) is reproducible.
    let draw_image = |cls: usize, r: &mut rand_chacha::ChaCha8Rng| -> LabeledImage {
        let assigned = &per_class[cls];
        let mut concepts: Vec<usize> = assigned
            .iter()
            .copied()
            .filter(|_| rng::uniform01(r) < 0.5)
            .collect();
        if concepts.is_empty() {
            concepts.push(assigned[0]);
        }
        let mut x = classes[cls].prototype.clone();
        for &k in &concepts {
            for (xi, oi) in x.iter_mut().zip(&concept_offsets[k]) {
                *xi += params.concept_scale * oi;
            }
        }
        for xi in x.iter_mut() {
            *xi += rng::gaussian(r) * params.sigma_noise;
        }
        LabeledImage { class: cls, concepts, input: x }
    };

    let mut train = Vec::with_capacity(b * params.h);
    for cls in 0..b {
        for _ in 0..params.h {
            train.push(draw_image(cls, &mut r));
        }
    }
    let mut test = Vec::with_capacity(c * params.test_per_class);
    for cls in 0..c {
        for _ in 0..params.test_per_class {
            test.push(draw_image(cls, &mut r));
        }
    }

    Ok(FewShotDataset {
        params: params.clone(),
        seed,
        base: names[..b].to_vec(),
        novel: names[b..].to_vec(),
        classes,
        concept_offsets,
        concept_assignments,
        context_words,
        train,
        test,
    })
}

impl FewShotDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_base(&self) -> usize {
        self.base.len()
    }

    pub fn class_name(&self, idx: usize) -> &str {
        &self.classes[idx].name
    }

    /// Training inputs grouped by base class index.
    pub fn train_by_class(&self) -> Vec<Vec<&Vec<f64>>> {
        let mut by_class = vec![Vec::new(); self.num_base()];
        for img in &self.train {
            by_class[img.class].push(&img.input);
        }
        by_class
    }

    pub fn test_split(&self, novel: bool) -> Vec<&LabeledImage> {
        let b = self.num_base();
        self.test
            .iter()
            .filter(|img| if novel { img.class >= b } else { img.class < b })
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
            what: format!("dataset at {}", path.display()),
            hint: "gen-data".into(),
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
    use crate::encoders::EncoderConfig;
    use crate::tensor::cosine_slice;

    fn enc() -> Encoders {
        Encoders::new(EncoderConfig { seed: 7, d_in: 12, d_h: 24, d: 16, l_max: 16 }).unwrap()
    }

    fn quick_params() -> SynthParams {
        SynthParams {
            c_cls: 4,
            h: 3,
            n_concepts: 4,
            sigma_noise: 0.05,
            test_per_class: 2,
            concept_scale: 0.3,
            align_steps: 20,
            align_lr: 0.5,
            scramble_alignment: true,
            context_tokens: 8,
            context_scale: 3.0,
            align_blend: 0.65,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let e = enc();
        let p = quick_params();
        let a = synth_dataset(&e, &p, 123).unwrap();
        let b = synth_dataset(&e, &p, 123).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = synth_dataset(&e, &p, 124).unwrap();
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn noiseless_images_with_same_concepts_are_identical() {
        let e = enc();
        let mut p = quick_params();
        p.sigma_noise = 0.0;
        p.align_steps = 0;
        p.h = 12;
        let ds = synth_dataset(&e, &p, 9).unwrap();
        let mut groups: std::collections::HashMap<(usize, Vec<usize>), Vec<&Vec<f64>>> =
            std::collections::HashMap::new();
        for img in &ds.train {
            groups.entry((img.class, img.concepts.clone())).or_default().push(&img.input);
        }
        let mut multi = 0;
        for inputs in groups.values() {
            if inputs.len() > 1 {
                multi += 1;
                for i in &inputs[1..] {
                    assert_eq!(*i, inputs[0]);
                }
            }
        }
        assert!(multi > 0, "expected repeated concept assignments at h=12");
        // and different subsets give different images
        assert!(groups.len() > ds.num_base());
    }

    #[test]
    fn counts_follow_the_split_rule() {
        let e = enc();
        let p = SynthParams { c_cls: 8, h: 16, align_steps: 0, ..quick_params() };
        let ds = synth_dataset(&e, &p, 1).unwrap();
        assert_eq!(ds.train.len(), 64); // 4 base classes x 16 shots
        assert_eq!(ds.base.len(), 4);
        assert_eq!(ds.novel.len(), 4);
        assert!(ds.train.iter().all(|img| img.class < 4));
        assert_eq!(ds.test.len(), 8 * p.test_per_class);
    }

    #[test]
    fn splits_are_disjoint_and_cover_all_classes() {
        let e = enc();
        let ds = synth_dataset(&e, &quick_params(), 5).unwrap();
        for n in &ds.novel {
            assert!(!ds.base.contains(n));
        }
        assert_eq!(ds.base.len() + ds.novel.len(), ds.num_classes());
    }

    #[test]
    fn every_concept_spans_the_split_boundary() {
        let e = enc();
        let ds = synth_dataset(&e, &quick_params(), 5).unwrap();
        let b = ds.num_base();
        for assignment in &ds.concept_assignments {
            assert!(assignment.len() >= 2);
            assert!(assignment.iter().any(|&c| c < b));
            assert!(assignment.iter().any(|&c| c >= b));
        }
    }

    #[test]
    fn alignment_raises_image_text_cosine() {
        let e = enc();
        let mut p = quick_params();
        p.scramble_alignment = false; // compare against the unrotated target
        p.align_steps = 0;
        let unaligned = synth_dataset(&e, &p, 33).unwrap();
        p.align_steps = 60;
        let aligned = synth_dataset(&e, &p, 33).unwrap();
        for (ua, al) in unaligned.classes.iter().zip(&aligned.classes) {
            let target = e.embed_word(&ua.name).unwrap();
            let f_u = e.encode_image_value(&ua.prototype).unwrap();
            let f_a = e.encode_image_value(&al.prototype).unwrap();
            assert!(
                cosine_slice(&f_a, &target) > cosine_slice(&f_u, &target),
                "alignment should increase cosine for {}",
                ua.name
            );
        }
    }

    #[test]
    fn hidden_context_words_come_from_the_lexicon() {
        let e = enc();
        let ds = synth_dataset(&e, &quick_params(), 5).unwrap();
        assert_eq!(ds.context_words.len(), 8);
        let lex = crate::lexicon::ConceptLexicon::builtin();
        let mut seen = std::collections::HashSet::new();
        for w in &ds.context_words {
            assert!(lex.entries().iter().any(|e| &e.word == w), "{w} not in lexicon");
            assert!(seen.insert(w.clone()), "duplicate context word {w}");
        }
        // unscrambled alignment uses no hidden context
        let mut p = quick_params();
        p.scramble_alignment = false;
        let plain = synth_dataset(&e, &p, 5).unwrap();
        assert!(plain.context_words.is_empty());
    }

    #[test]
    fn invalid_params_rejected() {
        let e = enc();
        let mut p = quick_params();
        p.c_cls = 5;
        assert!(synth_dataset(&e, &p, 0).is_err());
        p.c_cls = 4;
        p.n_concepts = 1;
        assert!(synth_dataset(&e, &p, 0).is_err());
    }
}
