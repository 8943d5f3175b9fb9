//! Frozen, seeded stand-ins for a dual-encoder vision-language backbone.
//!
//! The image branch is a two-layer tanh MLP; the text branch is a two-block
//! single-head attention encoder over token vectors with frozen positional
//! offsets (the blocks are otherwise permutation-equivariant, and prompt
//! ordering has to matter). Both branches l2-normalize their output.
//! Weights are drawn once from a seeded stream and never updated; encode
//! operations are differentiable with respect to their *inputs* only,
//! because every weight enters the tape as a frozen constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const TEXT_BLOCKS: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub seed: u64,
    pub d_in: usize,
    pub d_h: usize,
    pub d: usize,
    pub l_max: usize,
}

impl EncoderConfig {
    pub fn new(seed: u64) -> Self {
        EncoderConfig { seed, d_in: 32, d_h: 128, d: 64, l_max: 64 }
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_h == 0 || self.d == 0 || self.l_max == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TextBlock {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wmix: Vec<f64>,
}

/// Frozen encoder pair. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Encoders {
    cfg: EncoderConfig,
    w1: Vec<f64>,   // [d_in, d_h]
    w2: Vec<f64>,   // [d_h, d]
    blocks: Vec<TextBlock>,
    w_out: Vec<f64>, // [d, d]
    pos: Vec<f64>,   // [l_max, d]
}

fn draw_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..rows * cols).map(|_| rng::uniform_sym(rng, s)).collect()
}

impl Encoders {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        // Fixed draw order; (seed, dims) fully determine every entry.
        let mut r = rng::seeded(cfg.seed);
        let w1 = draw_matrix(&mut r, cfg.d_in, cfg.d_h, cfg.d_in);
        let w2 = draw_matrix(&mut r, cfg.d_h, cfg.d, cfg.d_h);
        let blocks = (0..TEXT_BLOCKS)
            .map(|_| TextBlock {
                wq: draw_matrix(&mut r, cfg.d, cfg.d, cfg.d),
                wk: draw_matrix(&mut r, cfg.d, cfg.d, cfg.d),
                wv: draw_matrix(&mut r, cfg.d, cfg.d, cfg.d),
                wmix: draw_matrix(&mut r, cfg.d, cfg.d, cfg.d),
            })
            .collect();
        let w_out = draw_matrix(&mut r, cfg.d, cfg.d, cfg.d);
        let pos = draw_matrix(&mut r, cfg.l_max, cfg.d, cfg.d);
        Ok(Encoders { cfg, w1, w2, blocks, w_out, pos })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.d
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.d_in
    }

    // ── Image branch ────────────────────────────────────────────────

    /// f_v = l2_normalize(W2ᵀ · tanh(W1ᵀ · x)), differentiable w.r.t. x.
    pub fn encode_image(&self, g: &mut Tape, x: Tensor) -> Result<Tensor> {
        if g.shape(x) != [self.cfg.d_in] {
            return Err(Error::shape(
                "encode_image",
                format!("expected [{}], got {:?}", self.cfg.d_in, g.shape(x)),
            ));
        }
        let xr = g.stack_rows(&[x])?;
        let w1 = g.constant(self.w1.clone(), vec![self.cfg.d_in, self.cfg.d_h])?;
        let w2 = g.constant(self.w2.clone(), vec![self.cfg.d_h, self.cfg.d])?;
        let h = g.matmul(xr, w1)?;
        let h = g.tanh(h)?;
        let y = g.matmul(h, w2)?;
        let y = g.row(y, 0)?;
        g.l2_normalize(y)
    }

    /// Value-level convenience: encode on a scratch tape, no gradients kept.
    pub fn encode_image_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Tape::new();
        let xt = g.constant(x.to_vec(), vec![x.len()])?;
        let f = self.encode_image(&mut g, xt)?;
        Ok(g.data(f).to_vec())
    }

    // ── Text branch ─────────────────────────────────────────────────

    /// Enter every text-branch weight into the tape once so repeated
    /// encodes on the same tape share the constants.
    pub fn bind_text(&self, g: &mut Tape) -> Result<BoundText> {
        let d = self.cfg.d;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BoundBlock {
                wq: g.constant(b.wq.clone(), vec![d, d])?,
                wk: g.constant(b.wk.clone(), vec![d, d])?,
                wv: g.constant(b.wv.clone(), vec![d, d])?,
                wmix: g.constant(b.wmix.clone(), vec![d, d])?,
            });
        }
        let w_out = g.constant(self.w_out.clone(), vec![d, d])?;
        Ok(BoundText { d, l_max: self.cfg.l_max, pos: self.pos.clone(), blocks, w_out })
    }

    /// Encode a token sequence (each token a 1-D [D] tensor) into a unit
    /// vector. Differentiable w.r.t. the token vectors.
    pub fn encode_text(&self, g: &mut Tape, tokens: &[Tensor]) -> Result<Tensor> {
        let bound = self.bind_text(g)?;
        bound.encode(g, tokens)
    }

    /// Frozen hash-based word embedding: unit vector, identical across runs
    /// for the same (seed, word).
    pub fn embed_word(&self, word: &str) -> Result<Vec<f64>> {
        if word.is_empty() {
            return Err(Error::degenerate("embed_word", "empty string"));
        }
        let lower = word.to_lowercase();
        let h = rng::fnv1a64(lower.as_bytes()) ^ self.cfg.seed.rotate_left(17);
        let mut r = rng::seeded(h);
        let v = rng::gaussian_vec(&mut r, self.cfg.d, 1.0);
        crate::tensor::normalize_slice(&v)
    }

    /// Embed each word and encode the sequence; serves concept features and
    /// handcrafted prompt features.
    pub fn encode_prompt_text(&self, g: &mut Tape, words: &[String]) -> Result<Tensor> {
        if words.is_empty() {
            return Err(Error::degenerate("encode_prompt_text", "empty word sequence"));
        }
        let mut tokens = Vec::with_capacity(words.len());
        for w in words {
            let v = self.embed_word(w)?;
            tokens.push(g.constant(v, vec![self.cfg.d])?);
        }
        self.encode_text(g, &tokens)
    }

    pub fn encode_prompt_text_value(&self, words: &[String]) -> Result<Vec<f64>> {
        let mut g = Tape::new();
        let f = self.encode_prompt_text(&mut g, words)?;
        Ok(g.data(f).to_vec())
    }

    // ── Weight export / import ──────────────────────────────────────

    pub fn export_weights(&self) -> WeightsFile {
        WeightsFile {
            seed: self.cfg.seed,
            dims: self.cfg.clone(),
            w1: to_nested(&self.w1, self.cfg.d_h),
            w2: to_nested(&self.w2, self.cfg.d),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    wq: to_nested(&b.wq, self.cfg.d),
                    wk: to_nested(&b.wk, self.cfg.d),
                    wv: to_nested(&b.wv, self.cfg.d),
                    wmix: to_nested(&b.wmix, self.cfg.d),
                })
                .collect(),
            w_out: to_nested(&self.w_out, self.cfg.d),
            pos: to_nested(&self.pos, self.cfg.d),
        }
    }

    pub fn import_weights(file: &WeightsFile) -> Result<Self> {
        let cfg = file.dims.clone();
        cfg.validate()?;
        if file.seed != cfg.seed {
            return Err(Error::Config("weight file seed does not match dims.seed".into()));
        }
        let check = |name: &str, m: &[Vec<f64>], rows: usize, cols: usize| -> Result<Vec<f64>> {
            if m.len() != rows || m.iter().any(|r| r.len() != cols) {
                return Err(Error::Config(format!("matrix {name} has wrong dimensions")));
            }
            Ok(m.iter().flatten().copied().collect())
        };
        if file.blocks.len() != TEXT_BLOCKS {
            return Err(Error::Config(format!("expected {TEXT_BLOCKS} text blocks")));
        }
        let mut blocks = Vec::with_capacity(TEXT_BLOCKS);
        for (i, b) in file.blocks.iter().enumerate() {
            blocks.push(TextBlock {
                wq: check(&format!("blocks[{i}].wq"), &b.wq, cfg.d, cfg.d)?,
                wk: check(&format!("blocks[{i}].wk"), &b.wk, cfg.d, cfg.d)?,
                wv: check(&format!("blocks[{i}].wv"), &b.wv, cfg.d, cfg.d)?,
                wmix: check(&format!("blocks[{i}].wmix"), &b.wmix, cfg.d, cfg.d)?,
            });
        }
        Ok(Encoders {
            w1: check("w1", &file.w1, cfg.d_in, cfg.d_h)?,
            w2: check("w2", &file.w2, cfg.d_h, cfg.d)?,
            blocks,
            w_out: check("w_out", &file.w_out, cfg.d, cfg.d)?,
            pos: check("pos", &file.pos, cfg.l_max, cfg.d)?,
            cfg,
        })
    }

    /// Stable fingerprint of every weight entry; used to prove frozenness
    /// across a training run.
    pub fn weight_hash(&self) -> u64 {
        let json = serde_json::to_string(&self.export_weights()).expect("weights serialize");
        rng::fnv1a64(json.as_bytes())
    }
}

/// Text-branch weights already entered into a tape.
pub struct BoundText {
    d: usize,
    l_max: usize,
    pos: Vec<f64>,
    blocks: Vec<BoundBlock>,
    w_out: Tensor,
}

struct BoundBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wmix: Tensor,
}

impl BoundText {
    pub fn encode(&self, g: &mut Tape, tokens: &[Tensor]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::degenerate("encode_text", "empty token sequence"));
        }
        if tokens.len() > self.l_max {
            return Err(Error::shape(
                "encode_text",
                format!("sequence length {} exceeds L_max {}", tokens.len(), self.l_max),
            ));
        }
        for &t in tokens {
            if g.shape(t) != [self.d] {
                return Err(Error::shape(
                    "encode_text",
                    format!("token shape {:?}, expected [{}]", g.shape(t), self.d),
                ));
            }
        }
        let l = tokens.len();
        let mut x = g.stack_rows(tokens)?;
        let pos = g.constant(self.pos[..l * self.d].to_vec(), vec![l, self.d])?;
        x = g.add(x, pos)?;
        let inv_sqrt_d = 1.0 / (self.d as f64).sqrt();
        for block in &self.blocks {
            let q = g.matmul(x, block.wq)?;
            let k = g.matmul(x, block.wk)?;
            let v = g.matmul(x, block.wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt_d)?;
            let attn = g.softmax_rows(scores)?;
            let ctx = g.matmul(attn, v)?;
            let h = g.add(x, ctx)?;
            let mixed = g.matmul(h, block.wmix)?;
            x = g.tanh(mixed)?;
        }
        // mean-pool positions, project, normalize
        let ones = g.constant(vec![1.0 / l as f64; l], vec![1, l])?;
        let pooled = g.matmul(ones, x)?;
        let out = g.matmul(pooled, self.w_out)?;
        let out = g.row(out, 0)?;
        g.l2_normalize(out)
    }
}

// ── Weight file schema ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub seed: u64,
    pub dims: EncoderConfig,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub blocks: Vec<BlockWeights>,
    pub w_out: Vec<Vec<f64>>,
    pub pos: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockWeights {
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub wmix: Vec<Vec<f64>>,
}

fn to_nested(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(|c| c.to_vec()).collect()
}
