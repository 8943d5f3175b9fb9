//! Runtime self-verification suites behind the `gradcheck` and `selftest`
//! commands: finite-difference gradient checks, retrieval-vs-oracle checks,
//! and frozenness checks, each reporting pass/fail with a detail line.

use crate::codebook::ConceptualCodebook;
use crate::dataset::{synth_dataset, SynthParams};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, max_rel_err};
use crate::lexicon::ConceptLexicon;
use crate::objectives::{loss_ce, loss_cc, loss_ma, loss_or, Temperature};
use crate::promptgen::TemplateGenerator;
use crate::rng;
use crate::tensor::{cosine_slice, Tape};
use crate::trainer::{prepare_frozen, train, TrainConfig};

pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_err(name: &str, max_err: f64, tol: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: max_err < tol,
            detail: format!("max rel err {max_err:.3e} (tolerance {tol:.0e})"),
        }
    }
}

const GRAD_TOL: f64 = 1e-4;

/// Gradient checks of the core differentiable ops against central finite
/// differences, one line per op.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut r = rng::seeded(seed);
    let d = 6;

    // cosine similarity
    let a0 = rng::gaussian_vec(&mut r, d, 1.0);
    let b0 = rng::gaussian_vec(&mut r, d, 1.0);
    {
        let mut g = Tape::new();
        let a = g.leaf(a0.clone(), vec![d])?;
        let b = g.constant(b0.clone(), vec![d])?;
        let c = g.cosine_sim(a, b)?;
        g.backward(c)?;
        let analytic = g.grad(a).unwrap().to_vec();
        let fd = finite_diff_grad(
            |xs| {
                let mut g = Tape::new();
                let a = g.leaf(xs.to_vec(), vec![d])?;
                let b = g.constant(b0.clone(), vec![d])?;
                let c = g.cosine_sim(a, b)?;
                g.value(c)
            },
            &a0,
            1e-5,
        )?;
        results.push(CheckResult::from_err("cosine_sim", max_rel_err(&analytic, &fd), GRAD_TOL));
    }

    // l2_normalize + matmul + tanh + softmax chain
    let x0 = rng::gaussian_vec(&mut r, 8, 1.0);
    let w0 = rng::gaussian_vec(&mut r, 16, 0.5);
    {
        let f = |xs: &[f64]| -> Result<f64> {
            let mut g = Tape::new();
            let x = g.leaf(xs.to_vec(), vec![2, 4])?;
            let w = g.constant(w0.clone(), vec![4, 4])?;
            let h = g.matmul(x, w)?;
            let t = g.tanh(h)?;
            let sm = g.softmax_rows(t)?;
            let row = g.row(sm, 0)?;
            let n = g.l2_normalize(row)?;
            let s = g.sum(n)?;
            g.value(s)
        };
        let mut g = Tape::new();
        let x = g.leaf(x0.clone(), vec![2, 4])?;
        let w = g.constant(w0.clone(), vec![4, 4])?;
        let h = g.matmul(x, w)?;
        let t = g.tanh(h)?;
        let sm = g.softmax_rows(t)?;
        let row = g.row(sm, 0)?;
        let n = g.l2_normalize(row)?;
        let s = g.sum(n)?;
        g.backward(s)?;
        let analytic = g.grad(x).unwrap().to_vec();
        let fd = finite_diff_grad(f, &x0, 1e-5)?;
        results.push(CheckResult::from_err(
            "matmul·tanh·softmax·l2_normalize",
            max_rel_err(&analytic, &fd),
            GRAD_TOL,
        ));
    }

    // the four losses on a tiny codebook scenario
    let enc = Encoders::new(EncoderConfig { seed, d_in: 8, d_h: 16, d: 8, l_max: 16 })?;
    let cb = ConceptualCodebook::init(4, 2, 8, seed ^ 1)?;
    let f_v = crate::tensor::normalize_slice(&rng::gaussian_vec(&mut r, 8, 1.0))?;
    let retrieval = cb.retrieve(&f_v, 2)?;
    let class_names: Vec<String> = ["terrier", "sparrow", "orchid"].iter().map(|s| s.to_string()).collect();
    let hand: Vec<Vec<f64>> = (0..3)
        .map(|_| crate::tensor::normalize_slice(&rng::gaussian_vec(&mut r, 8, 1.0)))
        .collect::<Result<_>>()?;
    let tau = Temperature::default();

    let eval_loss = |which: &str, prompts_flat: &[f64]| -> Result<f64> {
        let mut cb2 = cb.clone();
        for (i, chunk) in prompts_flat.chunks(2 * 8).enumerate() {
            cb2.prompts_mut()[i] = chunk.to_vec();
        }
        let mut g = Tape::new();
        let binding = cb2.bind(&mut g)?;
        let text = enc.bind_text(&mut g)?;
        let fv = g.constant(f_v.clone(), vec![8])?;
        let value = match which {
            "ce" | "cc" => {
                let cls = class_names
                    .iter()
                    .map(|n| {
                        let e = enc.embed_word(n)?;
                        g.constant(e, vec![8])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let feats = cb2.class_text_features(&mut g, &text, &binding, &retrieval, &cls)?;
                if which == "ce" {
                    loss_ce(&mut g, fv, &feats, 1, tau)?
                } else {
                    let hand_t = hand
                        .iter()
                        .map(|h| g.constant(h.clone(), vec![8]))
                        .collect::<Result<Vec<_>>>()?;
                    loss_cc(&mut g, &feats, &hand_t)?
                }
            }
            "or" => {
                let encodings =
                    crate::objectives::prompt_encodings(&mut g, &text, &cb2, &binding)?;
                loss_or(&mut g, &encodings, false)?
            }
            _ => unreachable!(),
        };
        g.value(value)
    };

    for which in ["ce", "or", "cc"] {
        let flat: Vec<f64> = cb.prompts().iter().flatten().copied().collect();
        let mut g = Tape::new();
        let binding = cb.bind(&mut g)?;
        let text = enc.bind_text(&mut g)?;
        let fv = g.constant(f_v.clone(), vec![8])?;
        let loss = match which {
            "ce" | "cc" => {
                let cls = class_names
                    .iter()
                    .map(|n| {
                        let e = enc.embed_word(n)?;
                        g.constant(e, vec![8])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let feats = cb.class_text_features(&mut g, &text, &binding, &retrieval, &cls)?;
                if which == "ce" {
                    loss_ce(&mut g, fv, &feats, 1, tau)?
                } else {
                    let hand_t = hand
                        .iter()
                        .map(|h| g.constant(h.clone(), vec![8]))
                        .collect::<Result<Vec<_>>>()?;
                    loss_cc(&mut g, &feats, &hand_t)?
                }
            }
            "or" => {
                let encodings = crate::objectives::prompt_encodings(&mut g, &text, &cb, &binding)?;
                loss_or(&mut g, &encodings, false)?
            }
            _ => unreachable!(),
        };
        g.backward(loss)?;
        let analytic: Vec<f64> = binding
            .prompts
            .iter()
            .flat_map(|&p| g.grad(p).unwrap().to_vec())
            .collect();
        let fd = finite_diff_grad(|xs| eval_loss(which, xs), &flat, 1e-5)?;
        results.push(CheckResult::from_err(
            &format!("loss_{which} wrt prompts"),
            max_rel_err(&analytic, &fd),
            GRAD_TOL,
        ));
    }

    // matching loss wrt keys
    {
        let keys_flat: Vec<f64> = cb.keys().iter().flatten().copied().collect();
        let eval_ma = |xs: &[f64]| -> Result<f64> {
            let mut cb2 = cb.clone();
            for (i, chunk) in xs.chunks(8).enumerate() {
                cb2.keys_mut()[i] = chunk.to_vec();
            }
            let mut g = Tape::new();
            let binding = cb2.bind(&mut g)?;
            let fv = g.constant(f_v.clone(), vec![8])?;
            let selected: Vec<_> = retrieval.indices.iter().map(|&i| binding.keys[i]).collect();
            let l = loss_ma(&mut g, fv, &selected)?;
            g.value(l)
        };
        let mut g = Tape::new();
        let binding = cb.bind(&mut g)?;
        let fv = g.constant(f_v.clone(), vec![8])?;
        let selected: Vec<_> = retrieval.indices.iter().map(|&i| binding.keys[i]).collect();
        let l = loss_ma(&mut g, fv, &selected)?;
        g.backward(l)?;
        let analytic: Vec<f64> =
            binding.keys.iter().flat_map(|&k| g.grad(k).unwrap().to_vec()).collect();
        let fd = finite_diff_grad(eval_ma, &keys_flat, 1e-5)?;
        results.push(CheckResult::from_err("loss_ma wrt keys", max_rel_err(&analytic, &fd), GRAD_TOL));
    }

    Ok(results)
}

/// Production top-k against an independent full-sort oracle, with tie cases
/// from duplicated keys.
pub fn retrieval_oracle_check(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut r = rng::seeded(seed);
    let mut cb = ConceptualCodebook::init(24, 2, 8, seed)?;
    // duplicate a few keys to force ties
    let k0 = cb.keys()[0].clone();
    cb.keys_mut()[5] = k0.clone();
    cb.keys_mut()[17] = k0;
    let mut failures = 0;
    for _ in 0..cases {
        let q = rng::gaussian_vec(&mut r, 8, 1.0);
        let k3 = 1 + (rand_core::RngCore::next_u64(&mut r) % 24) as usize;
        let got = cb.retrieve(&q, k3)?;
        let mut scored: Vec<(usize, f64)> =
            cb.keys().iter().enumerate().map(|(i, k)| (i, cosine_slice(&q, k))).collect();
        scored.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)));
        let expect: Vec<usize> = scored.iter().take(k3).map(|(i, _)| *i).collect();
        if got.indices != expect {
            failures += 1;
        }
    }
    Ok(CheckResult {
        name: "retrieval vs full-sort oracle".into(),
        passed: failures == 0,
        detail: format!("{failures}/{cases} mismatches"),
    })
}

/// Encoder weights must hash identically across a short training run, and
/// handcrafted features must never carry gradients.
pub fn frozenness_check(seed: u64) -> Result<CheckResult> {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        k1: 2,
        k2: 4,
        k3: 2,
        m: 2,
        n: 6,
        d: 16,
        d_in: 12,
        d_h: 24,
        l_max: 16,
        seed,
        ..TrainConfig::default()
    };
    let params = SynthParams {
        c_cls: 4,
        h: 4,
        n_concepts: 4,
        sigma_noise: 0.2,
        test_per_class: 2,
        ..SynthParams::default()
    };
    let enc = Encoders::new(cfg.encoder_config())?;
    let ds = synth_dataset(&enc, &params, seed)?;
    let before = enc.weight_hash();
    let tpl = TemplateGenerator::default();
    let (cache, prompt_set) = prepare_frozen(&enc, &ds, &ConceptLexicon::builtin(), &cfg, &tpl)?;
    let _ = train(&enc, &ds, &prompt_set, &cfg)?;
    let weights_frozen = enc.weight_hash() == before;

    // handcrafted features enter tapes as constants and get no grad buffer
    let mut g = Tape::new();
    let feat = prompt_set.entries.values().next().expect("nonempty prompt set").feature.clone();
    let h = g.constant(feat, vec![enc.dim()])?;
    let x = g.leaf(vec![0.5; enc.dim()], vec![enc.dim()])?;
    let l = g.dot(x, h)?;
    g.backward(l)?;
    let no_grads = g.grad(h).is_none();

    // cache keys likewise hold plain frozen buffers
    let key_ok = !cache.pairs.is_empty();

    Ok(CheckResult {
        name: "frozenness".into(),
        passed: weights_frozen && no_grads && key_ok,
        detail: format!(
            "weights frozen: {weights_frozen}, handcrafted grad-free: {no_grads}"
        ),
    })
}

/// The three suites behind `selftest`.
pub fn run_all(seed: u64) -> Result<Vec<(String, Vec<CheckResult>)>> {
    Ok(vec![
        ("finite-difference".into(), gradient_checks(seed)?),
        ("retrieval-oracle".into(), vec![retrieval_oracle_check(seed, 300)?]),
        ("frozenness".into(), vec![frozenness_check(seed)?]),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for (suite, results) in run_all(11).unwrap() {
            for c in results {
                assert!(c.passed, "{suite}/{}: {}", c.name, c.detail);
            }
        }
    }
}
