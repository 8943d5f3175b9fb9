//! Few-shot training loop and base-to-novel evaluation.
//!
//! Per batch: encode images (features are precomputed once, the encoders
//! are frozen), retrieve each image's top-K3 codebook keys, assemble
//! per-class prompt sequences over the seen classes, run the four losses,
//! backprop, and update the codebook with AdamW under cosine-annealed
//! learning rates. Shuffling, initialization, and every random draw are
//! seeded, so a full run is reproducible byte-for-byte.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::cache::{build_cache, CacheOptions, HandcraftedCache};
use crate::codebook::{CodebookCheckpoint, ConceptualCodebook};
use crate::dataset::FewShotDataset;
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::lexicon::ConceptLexicon;
use crate::objectives::{total_loss, BatchItem, LossWeights, ObjectiveContext, Temperature};
use crate::optim::{apply_adamw, cosine_lr, CodebookGrads, OptimizerState};
use crate::promptgen::{PromptGenerator, TemplateGenerator};
use crate::promptset::{build_prompt_set, HandcraftedPromptSet};
use crate::rng;
use crate::tensor::{dot_slice, Tape};

pub const CODEBOOK_SEED_SALT: u64 = 0x636f_6465; // "code"
pub const SHUFFLE_SEED_SALT: u64 = 0x7368_7566; // "shuf"

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to keys as well as prompts.
    pub decay_keys: bool,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub m: usize,
    pub n: usize,
    pub tau: f64,
    pub seed: u64,
    pub d: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub l_max: usize,
    /// Ablation switches; disabling zeroes the term's weight in the total.
    pub loss_ma: bool,
    pub loss_cc: bool,
    pub loss_or: bool,
    pub or_normalized: bool,
    pub raw_average_keys: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-2,
            decay_keys: false,
            k1: 3,
            k2: 10,
            k3: 4,
            m: 8,
            n: 100,
            tau: 0.07,
            seed: 42,
            d: 64,
            d_in: 32,
            d_h: 128,
            l_max: 64,
            loss_ma: true,
            loss_cc: true,
            loss_or: true,
            or_normalized: false,
            raw_average_keys: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        // lr == 0 is allowed as the explicit no-learning case
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.k1 == 0 || self.k2 == 0 || self.k3 == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::Config("K1/K2/K3/M/N must be at least 1".into()));
        }
        if self.k3 > self.n {
            return Err(Error::Config(format!("K3 {} exceeds N {}", self.k3, self.n)));
        }
        if self.tau <= 0.0 || self.tau.is_nan() {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.d == 0 || self.d_in == 0 || self.d_h == 0 || self.l_max == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let seq = self.k3 * self.m + 1;
        if seq > self.l_max {
            return Err(Error::Config(format!(
                "prompt sequence length {seq} exceeds L_max {}",
                self.l_max
            )));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: self.seed,
            d_in: self.d_in,
            d_h: self.d_h,
            d: self.d,
            l_max: self.l_max,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ce: 1.0,
            ma: if self.loss_ma { 1.0 } else { 0.0 },
            or_: if self.loss_or { 1.0 } else { 0.0 },
            cc: if self.loss_cc { 1.0 } else { 0.0 },
            or_normalized: self.or_normalized,
        }
    }

    pub fn cache_options(&self) -> CacheOptions {
        let mut opts = CacheOptions::new(self.k1);
        opts.renormalize_keys = !self.raw_average_keys;
        opts
    }

    /// Stable fingerprint of the configuration, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", rng::fnv1a64(json.as_bytes()))
    }
}

// ── Metrics ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub ce: f64,
    pub ma: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub cc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
}

/// One JSONL line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsLine {
    Step(StepMetrics),
    Summary(RunSummary),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub label: String,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

impl MetricsLine {
    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            MetricsLine::Step(s) => serde_json::to_string(s)?,
            MetricsLine::Summary(s) => {
                serde_json::to_string(&serde_json::json!({ "summary": s }))?
            }
            MetricsLine::Eval(e) => serde_json::to_string(&serde_json::json!({ "eval": e }))?,
        })
    }

    pub fn parse(line: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("step").is_some() {
            Ok(MetricsLine::Step(serde_json::from_value(value)?))
        } else if let Some(s) = value.get("summary") {
            Ok(MetricsLine::Summary(serde_json::from_value(s.clone())?))
        } else if let Some(e) = value.get("eval") {
            Ok(MetricsLine::Eval(serde_json::from_value(e.clone())?))
        } else {
            Err(Error::Contract(format!("unrecognized metrics line: {line}")))
        }
    }
}

pub fn write_metrics(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_json()?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
        what: format!("metrics log at {}", path.display()),
        hint: "train".into(),
    })?;
    text.lines().filter(|l| !l.trim().is_empty()).map(MetricsLine::parse).collect()
}

// ── Training ────────────────────────────────────────────────────────

pub struct TrainOutput {
    pub codebook: ConceptualCodebook,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsLine>,
    pub steps: u64,
    pub train_accuracy: f64,
}

/// Build the frozen artifacts (cache + prompt set) for a dataset.
pub fn prepare_frozen(
    encoders: &Encoders,
    dataset: &FewShotDataset,
    lexicon: &ConceptLexicon,
    cfg: &TrainConfig,
    generator: &dyn PromptGenerator,
) -> Result<(HandcraftedCache, HandcraftedPromptSet)> {
    if lexicon.len() < cfg.k2 {
        return Err(Error::Config(format!(
            "lexicon size {} smaller than K2 {}",
            lexicon.len(),
            cfg.k2
        )));
    }
    let train_images: Vec<Vec<f64>> = dataset.train.iter().map(|i| i.input.clone()).collect();
    let cache = build_cache(encoders, lexicon, &train_images, &cfg.cache_options())?;
    let fallback = TemplateGenerator::default();
    let prompt_set = build_prompt_set(encoders, &cache, dataset, cfg.k2, generator, &fallback)?;
    Ok((cache, prompt_set))
}

/// The training loop proper; cache and prompt set are built once up front.
pub fn train(
    encoders: &Encoders,
    dataset: &FewShotDataset,
    prompt_set: &HandcraftedPromptSet,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("dataset has no training images".into()));
    }
    let by_class = dataset.train_by_class();
    if by_class.iter().any(|imgs| imgs.is_empty()) {
        return Err(Error::Config("every base class needs at least one training image".into()));
    }

    // Frozen per-run constants.
    let features: Vec<Vec<f64>> = dataset
        .train
        .iter()
        .map(|img| encoders.encode_image_value(&img.input))
        .collect::<Result<_>>()?;
    let base_names = dataset.base.clone();
    let class_embeddings: Vec<Vec<f64>> =
        base_names.iter().map(|n| encoders.embed_word(n)).collect::<Result<_>>()?;
    let handcrafted: Vec<Vec<f64>> = prompt_set
        .features_for(&base_names)?
        .into_iter()
        .map(|f| f.to_vec())
        .collect();

    let mut codebook = ConceptualCodebook::init(cfg.n, cfg.m, cfg.d, cfg.seed ^ CODEBOOK_SEED_SALT)?;
    let mut optimizer = OptimizerState::new(&codebook);
    let tau = Temperature::new(cfg.tau)?;
    let weights = cfg.loss_weights();

    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut shuffle_rng = rng::seeded(cfg.seed ^ SHUFFLE_SEED_SALT);
    let mut metrics = Vec::with_capacity(total_steps as usize + 1);
    let mut step: u64 = 0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        rng::shuffle(&mut shuffle_rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let lr_t = cosine_lr(step, total_steps, cfg.lr)?;
            let breakdown = train_step(
                encoders,
                &mut codebook,
                &mut optimizer,
                dataset,
                &features,
                &class_embeddings,
                &handcrafted,
                chunk,
                tau,
                weights,
                lr_t,
                cfg,
            )?;
            metrics.push(MetricsLine::Step(StepMetrics { step, ..breakdown }));
            step += 1;
        }
    }

    // Final training-set accuracy over the base classes.
    let train_pairs: Vec<(Vec<f64>, usize)> =
        dataset.train.iter().map(|img| (img.input.clone(), img.class)).collect();
    let (train_accuracy, _) =
        evaluate_images(encoders, &codebook, &train_pairs, &base_names, cfg.k3, tau)?;
    metrics.push(MetricsLine::Summary(RunSummary {
        steps: step,
        epochs: cfg.epochs,
        train_accuracy,
    }));

    Ok(TrainOutput { codebook, optimizer, metrics, steps: step, train_accuracy })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    encoders: &Encoders,
    codebook: &mut ConceptualCodebook,
    optimizer: &mut OptimizerState,
    dataset: &FewShotDataset,
    features: &[Vec<f64>],
    class_embeddings: &[Vec<f64>],
    handcrafted: &[Vec<f64>],
    chunk: &[usize],
    tau: Temperature,
    weights: LossWeights,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let mut g = Tape::new();
    let binding = codebook.bind(&mut g)?;
    let text = encoders.bind_text(&mut g)?;
    let cls_tensors = class_embeddings
        .iter()
        .map(|e| g.constant(e.clone(), vec![e.len()]))
        .collect::<Result<Vec<_>>>()?;
    let hand_tensors = handcrafted
        .iter()
        .map(|h| g.constant(h.clone(), vec![h.len()]))
        .collect::<Result<Vec<_>>>()?;

    // Retrieval is per image against the current keys; the selection is
    // discrete and fixed for the rest of the step.
    let retrievals = chunk
        .iter()
        .map(|&idx| codebook.retrieve(&features[idx], cfg.k3))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = Vec::with_capacity(chunk.len());
    for (pos, &idx) in chunk.iter().enumerate() {
        let img = &dataset.train[idx];
        let f_v = g.constant(features[idx].clone(), vec![cfg.d])?;
        batch.push(BatchItem { f_v, label: img.class, retrieval: &retrievals[pos] });
    }

    let ctx = ObjectiveContext {
        codebook,
        binding: &binding,
        text: &text,
        class_embeddings: &cls_tensors,
        handcrafted: &hand_tensors,
        tau,
        weights,
    };
    let breakdown = total_loss(&mut g, &ctx, &batch)?;
    let step_metrics = StepMetrics {
        step: 0,
        ce: g.value(breakdown.ce)?,
        ma: g.value(breakdown.ma)?,
        or_: g.value(breakdown.or_)?,
        cc: g.value(breakdown.cc)?,
        total: g.value(breakdown.total)?,
    };
    g.backward(breakdown.total)?;

    let collect = |tensors: &[crate::tensor::Tensor]| -> Result<Vec<Vec<f64>>> {
        tensors
            .iter()
            .map(|&t| {
                let buf = g.grad(t).expect("trainable leaf has gradient").to_vec();
                if !buf.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "train_step gradient" });
                }
                Ok(buf)
            })
            .collect()
    };
    let grads = CodebookGrads { keys: collect(&binding.keys)?, prompts: collect(&binding.prompts)? };
    apply_adamw(codebook, &grads, optimizer, lr_t, cfg.weight_decay, cfg.decay_keys)?;
    Ok(step_metrics)
}

// ── Evaluation ──────────────────────────────────────────────────────

pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}

/// Eq.-style class probabilities from an image feature and per-class text
/// features: stable softmax over cosine similarity / τ.
pub fn class_probabilities(f_v: &[f64], class_feats: &[Vec<f64>], tau: Temperature) -> Vec<f64> {
    let logits: Vec<f64> = class_feats
        .iter()
        .map(|f| crate::tensor::cosine_slice(f_v, f) / tau.value())
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub struct Prediction {
    pub class_index: usize,
    pub probabilities: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Zero-shot style classification of one input among the given class names.
pub fn classify(
    encoders: &Encoders,
    codebook: &ConceptualCodebook,
    input: &[f64],
    class_names: &[String],
    k3: usize,
    tau: Temperature,
) -> Result<Prediction> {
    if class_names.is_empty() {
        return Err(Error::Config("classify needs at least one class".into()));
    }
    let f_v = encoders.encode_image_value(input)?;
    let retrieval = codebook.retrieve(&f_v, k3)?;

    let mut g = Tape::new();
    let binding = codebook.bind(&mut g)?;
    let text = encoders.bind_text(&mut g)?;
    let cls_tensors = class_names
        .iter()
        .map(|n| {
            let e = encoders.embed_word(n)?;
            g.constant(e.clone(), vec![e.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    let feats = codebook.class_text_features(&mut g, &text, &binding, &retrieval, &cls_tensors)?;
    let feat_values: Vec<Vec<f64>> = feats.iter().map(|&f| g.data(f).to_vec()).collect();

    let probabilities = class_probabilities(&f_v, &feat_values, tau);
    let mut best = 0;
    for i in 1..probabilities.len() {
        if probabilities[i] > probabilities[best] {
            best = i;
        }
    }
    Ok(Prediction { class_index: best, probabilities, selected: retrieval.indices })
}

/// Accuracy over (input, global-class-index) pairs classified among
/// `class_names`; the global index must map into that list by offset.
pub fn evaluate_images(
    encoders: &Encoders,
    codebook: &ConceptualCodebook,
    images: &[(Vec<f64>, usize)],
    class_names: &[String],
    k3: usize,
    tau: Temperature,
) -> Result<(f64, BTreeMap<String, f64>)> {
    if images.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    let offset = images.iter().map(|(_, c)| *c).min().unwrap_or(0);
    let mut correct_per_class: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut correct = 0u64;
    for (input, class) in images {
        let local = class - offset;
        if local >= class_names.len() {
            return Err(Error::Config("image class outside the evaluated split".into()));
        }
        let pred = classify(encoders, codebook, input, class_names, k3, tau)?;
        let entry = correct_per_class.entry(class_names[local].clone()).or_insert((0, 0));
        entry.1 += 1;
        if pred.class_index == local {
            entry.0 += 1;
            correct += 1;
        }
    }
    let per_class = correct_per_class
        .into_iter()
        .map(|(name, (c, t))| (name, 100.0 * c as f64 / t as f64))
        .collect();
    Ok((100.0 * correct as f64 / images.len() as f64, per_class))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// Base-to-novel protocol: base test images are classified among base
/// classes, novel test images among novel classes (zero-shot; their labels
/// were never trained on).
pub fn evaluate(
    encoders: &Encoders,
    codebook: &ConceptualCodebook,
    dataset: &FewShotDataset,
    k3: usize,
    tau: Temperature,
) -> Result<EvalReport> {
    let collect = |novel: bool| -> Vec<(Vec<f64>, usize)> {
        dataset
            .test_split(novel)
            .into_iter()
            .map(|img| (img.input.clone(), img.class))
            .collect()
    };
    let base_images = collect(false);
    let novel_images = collect(true);
    let (base_acc, mut per_class) =
        evaluate_images(encoders, codebook, &base_images, &dataset.base, k3, tau)?;
    let (novel_acc, novel_per_class) =
        evaluate_images(encoders, codebook, &novel_images, &dataset.novel, k3, tau)?;
    per_class.extend(novel_per_class);
    Ok(EvalReport { base_acc, novel_acc, hm: harmonic_mean(base_acc, novel_acc), per_class })
}

// ── Full checkpoint (codebook + optimizer + config + step) ─────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainCheckpoint {
    pub codebook: CodebookCheckpoint,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub step: u64,
}

impl TrainCheckpoint {
    pub fn new(output: &TrainOutput, cfg: &TrainConfig) -> Self {
        TrainCheckpoint {
            codebook: output.codebook.to_checkpoint(cfg.seed, cfg.hash()),
            optimizer: output.optimizer.clone(),
            config: cfg.clone(),
            step: output.steps,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            what: format!("checkpoint at {}", path.display()),
            hint: "train".into(),
        })?;
        serde_json::from_str(&json).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn codebook(&self) -> Result<ConceptualCodebook> {
        ConceptualCodebook::from_checkpoint(&self.codebook)
    }
}

// value-level helper used in tests and the report path
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_slice(a, b)
}
