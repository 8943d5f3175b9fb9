//! The four training losses and their unweighted sum.
//!
//! Classification pulls image features toward the right class text feature;
//! matching pulls the selected keys toward the image feature; orthogonality
//! spreads the encoded prompts apart; consistency anchors the learned class
//! features to the handcrafted concept prompts. Keys receive gradients only
//! from the matching loss, prompts only from the other three — the routing
//! is structural (each loss simply never touches the other parameter set)
//! and the test suites assert it exactly.

use crate::codebook::{CodebookBinding, ConceptualCodebook, RetrievalResult};
use crate::encoders::BoundText;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Softmax temperature; frozen, conventionally 0.07.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau <= 0.0 || tau.is_nan() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.07)
    }
}

/// Per-loss coefficients (1.0 everywhere by default; ablations zero a term)
/// plus the orthogonality normalization variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub ma: f64,
    pub or_: f64,
    pub cc: f64,
    /// Divide the orthogonality sum by the pair count N(N-1)/2 instead of
    /// the as-written N(N-1).
    pub or_normalized: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, ma: 1.0, or_: 1.0, cc: 1.0, or_normalized: false }
    }
}

/// All five scalars stay graph-connected for backward.
pub struct LossBreakdown {
    pub ce: Tensor,
    pub ma: Tensor,
    pub or_: Tensor,
    pub cc: Tensor,
    pub total: Tensor,
}

// ── Individual losses ───────────────────────────────────────────────

/// Cross-entropy over cosine logits at temperature τ:
/// −log softmax(⟨f_v, f_t⟩/τ) at the label index.
pub fn loss_ce(
    g: &mut Tape,
    f_v: Tensor,
    class_feats: &[Tensor],
    label: usize,
    tau: Temperature,
) -> Result<Tensor> {
    if class_feats.is_empty() {
        return Err(Error::Config("loss_ce needs at least one class".into()));
    }
    if label >= class_feats.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            class_feats.len()
        )));
    }
    let mut logits = Vec::with_capacity(class_feats.len());
    for &feat in class_feats {
        let c = g.cosine_sim(f_v, feat)?;
        logits.push(g.scale(c, 1.0 / tau.value())?);
    }
    let stacked = g.stack_scalars(&logits)?;
    let lse = g.logsumexp(stacked)?;
    let picked = g.pick(stacked, label)?;
    g.sub(lse, picked)
}

/// Σ over selected keys of (1 − cos(f_v, V)); gradients reach keys only
/// (the image feature has no trainable ancestors).
pub fn loss_ma(g: &mut Tape, f_v: Tensor, selected_keys: &[Tensor]) -> Result<Tensor> {
    if selected_keys.is_empty() {
        return Err(Error::Config("loss_ma needs at least one selected key".into()));
    }
    let mut acc: Option<Tensor> = None;
    for &key in selected_keys {
        let c = g.cosine_sim(f_v, key)?;
        let neg = g.scale(c, -1.0)?;
        let term = g.add_scalar(neg, 1.0)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty key list"))
}

/// Encode every codebook prompt alone (its M tokens, no class token).
pub fn prompt_encodings(
    g: &mut Tape,
    text: &BoundText,
    cb: &ConceptualCodebook,
    binding: &CodebookBinding,
) -> Result<Vec<Tensor>> {
    let mut encodings = Vec::with_capacity(cb.size());
    for &prompt in &binding.prompts {
        let mut tokens = Vec::with_capacity(cb.prompt_len());
        for r in 0..cb.prompt_len() {
            tokens.push(g.row(prompt, r)?);
        }
        encodings.push(text.encode(g, &tokens)?);
    }
    Ok(encodings)
}

/// (1/(N(N−1))) Σ_{i<j} |cos(e_i, e_j)| over the prompt encodings. The
/// denominator is kept as written even though the sum has N(N−1)/2 terms;
/// `normalized` switches to a true pair mean.
pub fn loss_or(g: &mut Tape, encodings: &[Tensor], normalized: bool) -> Result<Tensor> {
    let n = encodings.len();
    if n < 2 {
        return Err(Error::Config("loss_or needs at least two prompts".into()));
    }
    let mut acc: Option<Tensor> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = g.cosine_sim(encodings[i], encodings[j])?;
            let a = g.abs(c)?;
            acc = Some(match acc {
                Some(s) => g.add(s, a)?,
                None => a,
            });
        }
    }
    let denom = if normalized { (n * (n - 1) / 2) as f64 } else { (n * (n - 1)) as f64 };
    g.scale(acc.expect("n >= 2"), 1.0 / denom)
}

/// Convenience: encodings + loss in one call.
pub fn loss_or_full(
    g: &mut Tape,
    text: &BoundText,
    cb: &ConceptualCodebook,
    binding: &CodebookBinding,
    normalized: bool,
) -> Result<Tensor> {
    let encodings = prompt_encodings(g, text, cb, binding)?;
    loss_or(g, &encodings, normalized)
}

/// Mean squared Euclidean distance between learned and handcrafted class
/// features. The handcrafted side must be frozen.
pub fn loss_cc(g: &mut Tape, learned: &[Tensor], handcrafted: &[Tensor]) -> Result<Tensor> {
    if learned.len() != handcrafted.len() {
        return Err(Error::Config(format!(
            "loss_cc list mismatch: {} learned vs {} handcrafted",
            learned.len(),
            handcrafted.len()
        )));
    }
    if learned.is_empty() {
        return Err(Error::Config("loss_cc needs at least one class".into()));
    }
    for &h in handcrafted {
        if g.requires_grad(h) {
            return Err(Error::Contract("handcrafted features must be frozen".into()));
        }
    }
    let mut acc: Option<Tensor> = None;
    for (&l, &h) in learned.iter().zip(handcrafted) {
        let d = g.sq_dist(l, h)?;
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    g.scale(acc.expect("nonempty"), 1.0 / learned.len() as f64)
}

// ── Batch objective ─────────────────────────────────────────────────

/// One training example already placed on the tape: its frozen image
/// feature, its label among the seen classes, and its (fixed) retrieval.
pub struct BatchItem<'r> {
    pub f_v: Tensor,
    pub label: usize,
    pub retrieval: &'r RetrievalResult,
}

pub struct ObjectiveContext<'a> {
    pub codebook: &'a ConceptualCodebook,
    pub binding: &'a CodebookBinding,
    pub text: &'a BoundText,
    /// Frozen class embeddings of the seen classes.
    pub class_embeddings: &'a [Tensor],
    /// Frozen handcrafted prompt features, aligned with `class_embeddings`.
    pub handcrafted: &'a [Tensor],
    pub tau: Temperature,
    pub weights: LossWeights,
}

fn weighted(g: &mut Tape, t: Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        Ok(t)
    } else {
        g.scale(t, w)
    }
}

/// Assemble the four weighted terms into the total.
pub fn combine(
    g: &mut Tape,
    ce: Tensor,
    ma: Tensor,
    or_: Tensor,
    cc: Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let wce = weighted(g, ce, weights.ce)?;
    let wma = weighted(g, ma, weights.ma)?;
    let wor = weighted(g, or_, weights.or_)?;
    let wcc = weighted(g, cc, weights.cc)?;
    let s1 = g.add(wce, wma)?;
    let s2 = g.add(s1, wor)?;
    let total = g.add(s2, wcc)?;
    Ok(LossBreakdown { ce, ma, or_, cc, total })
}

/// Full per-batch objective: ce/ma/cc averaged over the examples,
/// orthogonality computed once, unweighted sum by default.
pub fn total_loss(g: &mut Tape, ctx: &ObjectiveContext, batch: &[BatchItem]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if ctx.class_embeddings.len() != ctx.handcrafted.len() {
        return Err(Error::Config(
            "class embeddings and handcrafted features must align".into(),
        ));
    }
    let mut ce_terms = Vec::with_capacity(batch.len());
    let mut ma_terms = Vec::with_capacity(batch.len());
    let mut cc_terms = Vec::with_capacity(batch.len());
    for item in batch {
        let class_feats = ctx.codebook.class_text_features(
            g,
            ctx.text,
            ctx.binding,
            item.retrieval,
            ctx.class_embeddings,
        )?;
        ce_terms.push(loss_ce(g, item.f_v, &class_feats, item.label, ctx.tau)?);
        let selected: Vec<Tensor> =
            item.retrieval.indices.iter().map(|&i| ctx.binding.keys[i]).collect();
        ma_terms.push(loss_ma(g, item.f_v, &selected)?);
        cc_terms.push(loss_cc(g, &class_feats, ctx.handcrafted)?);
    }
    let ce = batch_mean(g, &ce_terms)?;
    let ma = batch_mean(g, &ma_terms)?;
    let cc = batch_mean(g, &cc_terms)?;
    let or_ = loss_or_full(g, ctx.text, ctx.codebook, ctx.binding, ctx.weights.or_normalized)?;
    combine(g, ce, ma, or_, cc, &ctx.weights)
}

fn batch_mean(g: &mut Tape, terms: &[Tensor]) -> Result<Tensor> {
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    let stacked = g.stack_scalars(terms)?;
    g.mean(stacked)
}
