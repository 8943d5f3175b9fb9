//! The learnable codebook: N (key, prompt) pairs, the system's only
//! trainable state. Keys select prompts per image by top-K3 cosine
//! similarity; selection is a hard discrete choice (no gradient flows
//! through the ranking), while the similarity values themselves stay
//! differentiable for the matching loss.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::retrieval::top_k_indices;
use crate::rng;
use crate::tensor::{cosine_slice, norm_slice, Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const PROMPT_INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptualCodebook {
    n: usize,
    m: usize,
    d: usize,
    /// N key vectors, each [D].
    keys: Vec<Vec<f64>>,
    /// N prompt matrices, each [M, D] flattened row-major.
    prompts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Selected codebook indices, descending similarity, ties by index.
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Codebook parameters entered into a tape as trainable leaves: all N keys
/// and all N prompts, so untouched rows provably receive zero gradients.
pub struct CodebookBinding {
    pub keys: Vec<Tensor>,
    pub prompts: Vec<Tensor>,
}

impl ConceptualCodebook {
    /// Keys start as unit gaussian directions; prompt vectors start small so
    /// early text features stay near the class-token-only baseline.
    pub fn init(n: usize, m: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::Config("codebook dimensions must be positive".into()));
        }
        let mut r = rng::seeded(seed);
        let mut keys = Vec::with_capacity(n);
        for _ in 0..n {
            let v = rng::gaussian_vec(&mut r, d, 1.0);
            keys.push(crate::tensor::normalize_slice(&v)?);
        }
        let prompts = (0..n).map(|_| rng::gaussian_vec(&mut r, m * d, PROMPT_INIT_SIGMA)).collect();
        Ok(ConceptualCodebook { n, m, d, keys, prompts })
    }

    pub fn from_parts(
        n: usize,
        m: usize,
        d: usize,
        keys: Vec<Vec<f64>>,
        prompts: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if keys.len() != n || prompts.len() != n {
            return Err(Error::Config("key/prompt count must equal N".into()));
        }
        if keys.iter().any(|k| k.len() != d) || prompts.iter().any(|p| p.len() != m * d) {
            return Err(Error::Config("key or prompt buffer has wrong length".into()));
        }
        Ok(ConceptualCodebook { n, m, d, keys, prompts })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn prompt_len(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn param_count(&self) -> usize {
        self.n * self.d + self.n * self.m * self.d
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn prompts(&self) -> &[Vec<f64>] {
        &self.prompts
    }

    pub fn keys_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.keys
    }

    pub fn prompts_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.prompts
    }

    // ── Retrieval ───────────────────────────────────────────────────

    /// Top-K3 keys by cosine similarity to the image feature. The returned
    /// index order defines prompt concatenation order.
    pub fn retrieve(&self, f_v: &[f64], k3: usize) -> Result<RetrievalResult> {
        if k3 > self.n {
            return Err(Error::Config(format!("K3 {} exceeds codebook size {}", k3, self.n)));
        }
        if norm_slice(f_v) == 0.0 {
            return Err(Error::degenerate("retrieve", "zero-norm query"));
        }
        for (i, key) in self.keys.iter().enumerate() {
            if norm_slice(key) == 0.0 {
                return Err(Error::degenerate("retrieve", format!("zero-norm key {i}")));
            }
        }
        let scores: Vec<f64> = self.keys.iter().map(|k| cosine_slice(f_v, k)).collect();
        let indices = top_k_indices(&scores, k3);
        let similarities = indices.iter().map(|&i| scores[i]).collect();
        Ok(RetrievalResult { indices, similarities })
    }

    // ── Tape integration ────────────────────────────────────────────

    pub fn bind(&self, g: &mut Tape) -> Result<CodebookBinding> {
        let mut keys = Vec::with_capacity(self.n);
        for k in &self.keys {
            keys.push(g.leaf(k.clone(), vec![self.d])?);
        }
        let mut prompts = Vec::with_capacity(self.n);
        for p in &self.prompts {
            prompts.push(g.leaf(p.clone(), vec![self.m, self.d])?);
        }
        Ok(CodebookBinding { keys, prompts })
    }

    /// Token sequence of length K3·M + 1: the selected prompts' vectors in
    /// retrieval order, then the class embedding. Prompt tokens stay
    /// gradient-connected to the codebook leaves.
    pub fn assemble_prompt(
        &self,
        g: &mut Tape,
        binding: &CodebookBinding,
        result: &RetrievalResult,
        class_embedding: Tensor,
    ) -> Result<Vec<Tensor>> {
        if g.requires_grad(class_embedding) {
            return Err(Error::Contract("class embedding must be frozen".into()));
        }
        let mut tokens = Vec::with_capacity(result.indices.len() * self.m + 1);
        for &idx in &result.indices {
            let prompt = binding.prompts[idx];
            for r in 0..self.m {
                tokens.push(g.row(prompt, r)?);
            }
        }
        tokens.push(class_embedding);
        Ok(tokens)
    }

    /// One text feature per class: the same selected prompts serve every
    /// class, only the trailing class token differs.
    pub fn class_text_features(
        &self,
        g: &mut Tape,
        text: &crate::encoders::BoundText,
        binding: &CodebookBinding,
        result: &RetrievalResult,
        class_embeddings: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        if class_embeddings.is_empty() {
            return Err(Error::Config("need at least one class".into()));
        }
        class_embeddings
            .iter()
            .map(|&cls| {
                let tokens = self.assemble_prompt(g, binding, result, cls)?;
                text.encode(g, &tokens)
            })
            .collect()
    }

    // ── Persistence ─────────────────────────────────────────────────

    pub fn to_checkpoint(&self, encoder_seed: u64, config_hash: String) -> CodebookCheckpoint {
        CodebookCheckpoint {
            version: CHECKPOINT_VERSION,
            n: self.n,
            m: self.m,
            d: self.d,
            keys: self.keys.clone(),
            prompts: self
                .prompts
                .iter()
                .map(|p| p.chunks(self.d).map(|c| c.to_vec()).collect())
                .collect(),
            encoder_seed,
            config_hash,
        }
    }

    pub fn save(&self, path: &Path, encoder_seed: u64, config_hash: String) -> Result<()> {
        let file = self.to_checkpoint(encoder_seed, config_hash);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CodebookCheckpoint)> {
        let json = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            what: format!("codebook checkpoint at {}", path.display()),
            hint: "train".into(),
        })?;
        let file: CodebookCheckpoint =
            serde_json::from_str(&json).map_err(|e| Error::Corrupt {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        let cb = Self::from_checkpoint(&file)?;
        Ok((cb, file))
    }

    pub fn from_checkpoint(file: &CodebookCheckpoint) -> Result<Self> {
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: file.version, expected: CHECKPOINT_VERSION });
        }
        let prompts: Vec<Vec<f64>> = file
            .prompts
            .iter()
            .map(|rows| rows.iter().flatten().copied().collect())
            .collect();
        Self::from_parts(file.n, file.m, file.d, file.keys.clone(), prompts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodebookCheckpoint {
    pub version: u32,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub keys: Vec<Vec<f64>>,
    pub prompts: Vec<Vec<Vec<f64>>>,
    pub encoder_seed: u64,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, Encoders};
    use crate::gradcheck::{finite_diff_grad, max_rel_err};

    #[test]
    fn init_is_deterministic_with_expected_param_count() {
        let a = ConceptualCodebook::init(100, 8, 64, 42).unwrap();
        let b = ConceptualCodebook::init(100, 8, 64, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 57_600); // 100·64 + 100·8·64
        for k in a.keys() {
            assert!((norm_slice(k) - 1.0).abs() < 1e-12);
        }
        let c = ConceptualCodebook::init(100, 8, 64, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn retrieve_identity_and_full() {
        let cb = ConceptualCodebook::init(16, 2, 8, 1).unwrap();
        let q = cb.keys()[7].clone();
        let r = cb.retrieve(&q, 3).unwrap();
        assert_eq!(r.indices[0], 7);
        assert!((r.similarities[0] - 1.0).abs() < 1e-12);

        let full = cb.retrieve(&q, 16).unwrap();
        assert_eq!(full.indices.len(), 16);
        for w in full.similarities.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(cb.retrieve(&q, 17).is_err());
        assert!(cb.retrieve(&vec![0.0; 8], 2).is_err());
    }

    #[test]
    fn retrieve_matches_full_sort_oracle() {
        let cb = ConceptualCodebook::init(32, 2, 8, 9).unwrap();
        let mut r = rng::seeded(100);
        for _ in 0..200 {
            let q = rng::gaussian_vec(&mut r, 8, 1.0);
            let k3 = 1 + (rand_core::RngCore::next_u64(&mut r) % 32) as usize;
            let got = cb.retrieve(&q, k3).unwrap();
            let mut scored: Vec<(usize, f64)> =
                cb.keys().iter().enumerate().map(|(i, k)| (i, cosine_slice(&q, k))).collect();
            scored.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)));
            let expect: Vec<usize> = scored.iter().take(k3).map(|(i, _)| *i).collect();
            assert_eq!(got.indices, expect);
        }
    }

    #[test]
    fn retrieve_breaks_ties_by_lower_index() {
        let mut cb = ConceptualCodebook::init(4, 1, 4, 2).unwrap();
        // duplicate key 0 into slots 1 and 3
        let k0 = cb.keys()[0].clone();
        cb.keys_mut()[1] = k0.clone();
        cb.keys_mut()[3] = k0.clone();
        let r = cb.retrieve(&k0, 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 3]);
    }

    #[test]
    fn retrieve_is_scale_invariant() {
        let cb = ConceptualCodebook::init(12, 2, 8, 3).unwrap();
        let mut r = rng::seeded(4);
        let q = rng::gaussian_vec(&mut r, 8, 1.0);
        let base = cb.retrieve(&q, 4).unwrap();
        for alpha in [0.25, 2.0, 512.0] {
            let scaled: Vec<f64> = q.iter().map(|v| v * alpha).collect();
            let got = cb.retrieve(&scaled, 4).unwrap();
            assert_eq!(got.indices, base.indices);
        }
    }

    #[test]
    fn assemble_minimal_and_length_rule() {
        let enc = Encoders::new(EncoderConfig { seed: 5, d_in: 8, d_h: 16, d: 8, l_max: 40 })
            .unwrap();
        let cb = ConceptualCodebook::init(4, 1, 8, 6).unwrap();
        let mut g = Tape::new();
        let binding = cb.bind(&mut g).unwrap();
        let cls = g.constant(enc.embed_word("terrier").unwrap(), vec![8]).unwrap();
        let r = cb.retrieve(&cb.keys()[2], 1).unwrap();
        let tokens = cb.assemble_prompt(&mut g, &binding, &r, cls).unwrap();
        assert_eq!(tokens.len(), 2); // K3=1, M=1 → [p, cls]
        assert_eq!(g.data(tokens[0]), cb.prompts()[2].as_slice());
        assert_eq!(tokens[1], cls);

        let cb2 = ConceptualCodebook::init(8, 4, 8, 7).unwrap();
        let mut g2 = Tape::new();
        let b2 = cb2.bind(&mut g2).unwrap();
        let cls2 = g2.constant(enc.embed_word("heron").unwrap(), vec![8]).unwrap();
        let r2 = cb2.retrieve(&cb2.keys()[0], 3).unwrap();
        let t2 = cb2.assemble_prompt(&mut g2, &b2, &r2, cls2).unwrap();
        assert_eq!(t2.len(), 3 * 4 + 1);
    }

    #[test]
    fn assemble_rejects_trainable_class_embedding() {
        let cb = ConceptualCodebook::init(4, 1, 8, 6).unwrap();
        let mut g = Tape::new();
        let binding = cb.bind(&mut g).unwrap();
        let cls = g.leaf(vec![1.0; 8], vec![8]).unwrap();
        let r = cb.retrieve(&cb.keys()[0], 1).unwrap();
        assert!(cb.assemble_prompt(&mut g, &binding, &r, cls).is_err());
    }

    #[test]
    fn prompt_order_changes_text_feature() {
        let enc = Encoders::new(EncoderConfig { seed: 5, d_in: 8, d_h: 16, d: 8, l_max: 40 })
            .unwrap();
        let cb = ConceptualCodebook::init(8, 2, 8, 8).unwrap();
        let q = cb.keys()[1].clone();
        let r = cb.retrieve(&q, 2).unwrap();
        let reversed = RetrievalResult {
            indices: r.indices.iter().rev().copied().collect(),
            similarities: r.similarities.iter().rev().copied().collect(),
        };
        let encode = |res: &RetrievalResult| -> Vec<f64> {
            let mut g = Tape::new();
            let binding = cb.bind(&mut g).unwrap();
            let text = enc.bind_text(&mut g).unwrap();
            let cls = g.constant(enc.embed_word("osprey").unwrap(), vec![8]).unwrap();
            let tokens = cb.assemble_prompt(&mut g, &binding, res, cls).unwrap();
            let f = text.encode(&mut g, &tokens).unwrap();
            g.data(f).to_vec()
        };
        let fa = encode(&r);
        let fb = encode(&reversed);
        assert!(cosine_slice(&fa, &fb) < 1.0 - 1e-9);
    }

    #[test]
    fn class_feature_grads_flow_to_selected_prompts_only() {
        let enc = Encoders::new(EncoderConfig { seed: 15, d_in: 8, d_h: 16, d: 8, l_max: 40 })
            .unwrap();
        let cb = ConceptualCodebook::init(4, 2, 8, 16).unwrap();
        let q = cb.keys()[3].clone();
        let result = cb.retrieve(&q, 2).unwrap();
        let target = enc.embed_word("anchor").unwrap();

        let mut g = Tape::new();
        let binding = cb.bind(&mut g).unwrap();
        let text = enc.bind_text(&mut g).unwrap();
        let cls = g.constant(enc.embed_word("willow").unwrap(), vec![8]).unwrap();
        let feats = cb
            .class_text_features(&mut g, &text, &binding, &result, &[cls])
            .unwrap();
        let tgt = g.constant(target.clone(), vec![8]).unwrap();
        let loss = g.cosine_sim(feats[0], tgt).unwrap();
        g.backward(loss).unwrap();

        let selected = result.indices.clone();
        for i in 0..cb.size() {
            let grad = g.grad(binding.prompts[i]).unwrap();
            if selected.contains(&i) {
                assert!(grad.iter().any(|v| *v != 0.0), "selected prompt {i} should get gradient");
                // finite-difference check on this prompt
                let fd = finite_diff_grad(
                    |xs| {
                        let mut cb2 = cb.clone();
                        cb2.prompts_mut()[i] = xs.to_vec();
                        let mut g = Tape::new();
                        let binding = cb2.bind(&mut g)?;
                        let text = enc.bind_text(&mut g)?;
                        let cls =
                            g.constant(enc.embed_word("willow").unwrap(), vec![8])?;
                        let feats = cb2
                            .class_text_features(&mut g, &text, &binding, &result, &[cls])?;
                        let tgt = g.constant(target.clone(), vec![8])?;
                        let c = g.cosine_sim(feats[0], tgt)?;
                        g.value(c)
                    },
                    &cb.prompts()[i],
                    1e-5,
                )
                .unwrap();
                assert!(max_rel_err(grad, &fd) < 1e-4);
            } else {
                assert!(grad.iter().all(|v| *v == 0.0), "unselected prompt {i} must stay zero");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cb = ConceptualCodebook::init(6, 3, 8, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.json");
        cb.save(&path, 42, "abc123".into()).unwrap();
        let (back, meta) = ConceptualCodebook::load(&path).unwrap();
        assert_eq!(cb, back);
        assert_eq!(meta.encoder_seed, 42);
        assert_eq!(meta.config_hash, "abc123");

        // re-saving produces identical bytes
        let first = std::fs::read(&path).unwrap();
        back.save(&path, 42, "abc123".into()).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let cb = ConceptualCodebook::init(4, 2, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.json");
        cb.save(&path, 1, "h".into()).unwrap();

        // truncate
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ConceptualCodebook::load(&path), Err(Error::Corrupt { .. })));

        // version bump
        let mut file = cb.to_checkpoint(1, "h".into());
        file.version = 99;
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(ConceptualCodebook::load(&path), Err(Error::Version { .. })));
    }
}
