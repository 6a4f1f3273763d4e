//! Central-difference gradient verification.
//!
//! [`finite_difference_check`] compares the tape's analytic gradient with
//! `(f(θ+h) − f(θ−h)) / 2h` for every parameter element. [`run_suite`]
//! applies it to each layer type and to the whole model.

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::layers;
use crate::model::{EmotionModel, ModelConfig, ModelInput};
use crate::params::{Init, ParamStore};
use crate::qformer::{self, CrossParity, QFormerConfig, TaskKind};
use crate::tensor::{RngState, Tensor};
use crate::text::Tokens;
use crate::vision::{self, VisionConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the largest error.
    pub worst: Option<(String, usize)>,
    pub elements: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the analytic gradient of the scalar built by `f` against central
/// differences, perturbing every element of every parameter in `params`.
///
/// `f` must build the same computation each time it is called; training
/// graphs should be seeded identically so dropout masks repeat.
pub fn finite_difference_check<F>(params: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_with(params, h, None, None, f)
}

fn new_graph(dropout_seed: Option<u64>) -> Graph {
    match dropout_seed {
        Some(seed) => Graph::training(RngState::new(seed)),
        None => Graph::new(),
    }
}

fn eval<F>(params: &ParamStore, dropout_seed: Option<u64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = new_graph(dropout_seed);
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Oracle(format!("objective has shape {:?}, expected a scalar", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Oracle(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

pub(crate) fn check_with<F>(
    params: &mut ParamStore,
    h: f64,
    corrupt: Option<OpKind>,
    dropout_seed: Option<u64>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Oracle(format!("step size must be positive, got {h}")));
    }
    let analytic = {
        let mut g = new_graph(dropout_seed);
        g.corrupt_backward(corrupt);
        let out = f(&mut g, params)?;
        if !g.value(out).is_finite() {
            return Err(Error::Oracle("objective is not finite".into()));
        }
        g.backward(out)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.tensor(id).len();
        let grad = analytic.get(id).map(<[f64]>::to_vec);
        for i in 0..n {
            let orig = params.tensor(id).data()[i];
            params.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = eval(params, dropout_seed, &f);
            params.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = eval(params, dropout_seed, &f);
            params.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_owned(), i));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }

    /// One line per case: name, verdict, max relative error, worst element.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let worst = c
                .report
                .worst
                .as_ref()
                .map(|(n, i)| format!("{n}[{i}]"))
                .unwrap_or_default();
            s.push_str(&format!(
                "{:<22} {} max_rel_error={:.3e} elements={} worst={}\n",
                c.name,
                if c.passed() { "PASS" } else { "FAIL" },
                c.report.max_rel_error,
                c.report.elements,
                worst
            ));
        }
        s
    }
}

fn rand_tensor(shape: &[usize], rng: &mut RngState, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::new(seed);
    let weights = rand_tensor(g.shape(y), &mut rng, 1.0).into_data();
    let w = g.mul_const(y, weights)?;
    Ok(g.sum(w))
}

fn store_of(entries: &[(&str, Tensor)]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone())?;
    }
    Ok(s)
}

/// Tiny configuration used by the end-to-end checks: 4 queries, 8 text
/// tokens, 2 Q-Former blocks.
pub fn desk_gradcheck_config(task: TaskKind) -> ModelConfig {
    ModelConfig {
        vision: VisionConfig {
            image_height: 8,
            image_width: 8,
            channels: 3,
            patch: 4,
            dim: 12,
            depth: 1,
            heads: 2,
            attn_dropout: 0.3,
        },
        qformer: QFormerConfig {
            num_queries: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
            attn_dropout: 0.4,
            num_classes: 3,
            task,
            cross_parity: CrossParity::Odd,
        },
        max_text_len: 8,
        vocab_size: 12,
    }
}

fn sample_input(cfg: &ModelConfig, frames: usize, rng: &mut RngState) -> ModelInput {
    let v = &cfg.vision;
    let frames = (0..frames)
        .map(|_| {
            let mut t = rand_tensor(&[v.image_height, v.image_width, v.channels], rng, 0.5);
            t.data_mut().iter_mut().for_each(|x| *x += 0.5);
            t
        })
        .collect();
    let l = cfg.max_text_len;
    let real = l - 3;
    let mut ids: Vec<usize> = (0..real).map(|i| 2 + (i * 5) % (cfg.vocab_size - 2)).collect();
    ids.resize(l, crate::text::PAD);
    let mut mask = vec![true; real];
    mask.resize(l, false);
    ModelInput {
        frames,
        tokens: Tokens { ids, mask },
    }
}

type CaseFn = fn(Option<OpKind>) -> Result<GradCheckReport>;

fn case_linear(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(11);
    let x = rand_tensor(&[3, 4], &mut rng, 1.0);
    let mut p = store_of(&[
        ("w", rand_tensor(&[4, 5], &mut rng, 1.0)),
        ("b", rand_tensor(&[5], &mut rng, 1.0)),
    ])?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let x = g.constant(x.clone());
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let y = g.linear(x, w, b)?;
        probe(g, y, 1)
    })
}

fn case_layer_norm(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(12);
    let mut p = store_of(&[
        ("x", rand_tensor(&[3, 6], &mut rng, 2.0)),
        ("gamma", rand_tensor(&[6], &mut rng, 1.5)),
        ("beta", rand_tensor(&[6], &mut rng, 1.0)),
    ])?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let x = g.param(p, "x")?;
        let gamma = g.param(p, "gamma")?;
        let beta = g.param(p, "beta")?;
        let y = g.layer_norm(x, gamma, beta, layers::LN_EPS)?;
        probe(g, y, 2)
    })
}

fn case_softmax(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(13);
    let mut p = store_of(&[("scores", rand_tensor(&[3, 5], &mut rng, 2.0))])?;
    let mask = [true, false, true, true, true];
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let s = g.param(p, "scores")?;
        let y = g.softmax_rows(s, Some(&mask))?;
        probe(g, y, 3)
    })
}

fn case_gelu(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(14);
    let mut p = store_of(&[("x", rand_tensor(&[4, 4], &mut rng, 3.0))])?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let x = g.param(p, "x")?;
        let y = g.gelu(x);
        probe(g, y, 4)
    })
}

fn qformer_case_store(cfg: &QFormerConfig, visual_dim: usize, seed: u64) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    let mut rng = RngState::new(seed);
    qformer::register(&mut s, &mut Init { rng: &mut rng }, cfg, visual_dim)?;
    Ok(s)
}

fn small_qformer(task: TaskKind) -> QFormerConfig {
    desk_gradcheck_config(task).qformer
}

fn case_msa(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let cfg = small_qformer(TaskKind::MultiLabel);
    let mut p = qformer_case_store(&cfg, 12, 15)?;
    let mut rng = RngState::new(16);
    p.insert("z", rand_tensor(&[6, cfg.dim], &mut rng, 1.0))?;
    let mask = [true, true, true, true, false, true];
    // Only block 0's self-attention weights and the input take part.
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let z = g.param(p, "z")?;
        let y = qformer::msa(g, p, &cfg, 0, z, Some(&mask))?;
        probe(g, y, 5)
    })
}

fn case_mca(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let cfg = small_qformer(TaskKind::MultiLabel);
    let mut p = qformer_case_store(&cfg, 12, 17)?;
    let mut rng = RngState::new(18);
    p.insert("q", rand_tensor(&[cfg.num_queries, cfg.dim], &mut rng, 1.0))?;
    p.insert("visual", rand_tensor(&[5, 12], &mut rng, 1.0))?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let q = g.param(p, "q")?;
        let v = g.param(p, "visual")?;
        let y = qformer::mca(g, p, &cfg, 1, q, v)?;
        probe(g, y, 6)
    })
}

fn case_ffn(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(19);
    let mut p = ParamStore::new();
    layers::register_mlp(&mut p, &mut Init { rng: &mut rng }, "ffn", 6, 24)?;
    layers::register_layer_norm(&mut p, "ln", 6)?;
    p.insert("x", rand_tensor(&[3, 6], &mut rng, 1.0))?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let x = g.param(p, "x")?;
        let h = layers::layer_norm(g, p, "ln", x)?;
        let f = layers::mlp(g, p, "ffn", h)?;
        let y = g.add(x, f)?;
        probe(g, y, 7)
    })
}

fn case_vision(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let cfg = desk_gradcheck_config(TaskKind::MultiLabel).vision;
    let mut rng = RngState::new(20);
    let mut p = ParamStore::new();
    vision::register(&mut p, &mut Init { rng: &mut rng }, &cfg)?;
    let a = rand_tensor(&[cfg.image_height, cfg.image_width, cfg.channels], &mut rng, 1.0);
    let b = rand_tensor(&[cfg.image_height, cfg.image_width, cfg.channels], &mut rng, 1.0);
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let ea = vision::encode_image(g, p, &cfg, &a)?;
        let eb = vision::encode_image(g, p, &cfg, &b)?;
        let y = vision::temporal_pool(g, &[ea, eb])?;
        probe(g, y, 8)
    })
}

fn case_text_embedding(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(21);
    let mut p = store_of(&[
        ("text.embed", rand_tensor(&[7, 4], &mut rng, 1.0)),
        ("text.pos", rand_tensor(&[5, 4], &mut rng, 1.0)),
    ])?;
    let ids = [3, 1, 3, 6, 0];
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let y = crate::text::embed_sequence(g, p, &ids)?;
        probe(g, y, 9)
    })
}

fn case_classifier(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(22);
    let mut p = ParamStore::new();
    layers::register_linear(&mut p, &mut Init { rng: &mut rng }, "classifier", 6, 4)?;
    p.insert("q", rand_tensor(&[3, 6], &mut rng, 1.0))?;
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let q = g.param(p, "q")?;
        let y = qformer::classify(g, p, q)?;
        probe(g, y, 10)
    })
}

fn case_bce(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(23);
    let mut p = store_of(&[("logits", rand_tensor(&[2, 4], &mut rng, 3.0))])?;
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let z = g.param(p, "logits")?;
        g.bce_with_logits(z, &targets)
    })
}

fn case_ce(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = RngState::new(24);
    let mut p = store_of(&[("logits", rand_tensor(&[3, 5], &mut rng, 3.0))])?;
    let classes = [4, 0, 2];
    check_with(&mut p, DEFAULT_STEP, corrupt, None, |g, p| {
        let z = g.param(p, "logits")?;
        g.cross_entropy(z, &classes)
    })
}

fn end_to_end(task: TaskKind, frames: usize, dropout: bool, corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let cfg = desk_gradcheck_config(task);
    let model = EmotionModel::new(cfg.clone(), 25)?;
    let mut rng = RngState::new(26);
    let input = sample_input(&cfg, frames, &mut rng);
    let mut params = model.params.clone();
    let objective = |g: &mut Graph, p: &ParamStore| -> Result<Var> {
        let m = EmotionModel {
            config: cfg.clone(),
            params: p.clone(),
        };
        let logits = m.forward(g, &input)?;
        match task {
            TaskKind::SingleLabel => g.cross_entropy(logits, &[1]),
            TaskKind::MultiLabel => g.bce_with_logits(logits, &[1.0, 0.0, 1.0]),
        }
    };
    let dropout_seed = dropout.then_some(27);
    check_with(&mut params, DEFAULT_STEP, corrupt, dropout_seed, objective)
}

fn case_e2e_single(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    end_to_end(TaskKind::SingleLabel, 1, false, corrupt)
}

fn case_e2e_multi_video(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    end_to_end(TaskKind::MultiLabel, 3, false, corrupt)
}

fn case_e2e_dropout(corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    end_to_end(TaskKind::SingleLabel, 1, true, corrupt)
}

const CASES: [(&str, CaseFn); 15] = [
    ("linear", case_linear),
    ("layer_norm", case_layer_norm),
    ("softmax_attention", case_softmax),
    ("gelu", case_gelu),
    ("msa", case_msa),
    ("mca", case_mca),
    ("ffn", case_ffn),
    ("vision_encoder", case_vision),
    ("text_embedding", case_text_embedding),
    ("classifier", case_classifier),
    ("bce_loss", case_bce),
    ("ce_loss", case_ce),
    ("end_to_end_single", case_e2e_single),
    ("end_to_end_multi_video", case_e2e_multi_video),
    ("end_to_end_dropout", case_e2e_dropout),
];

pub fn case_names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(n, _)| *n)
}

/// Runs every case. `corrupt` deliberately breaks one op's backward pass.
pub fn run_suite(corrupt: Option<OpKind>) -> Result<SuiteReport> {
    let cases = CASES
        .iter()
        .map(|(name, f)| {
            Ok(CaseResult {
                name,
                report: f(corrupt)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SuiteReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_matches_central_difference() {
        let mut p = store_of(&[("x", Tensor::new(&[1, 1], vec![3.0]).unwrap())]).unwrap();
        let r = finite_difference_check(&mut p, DEFAULT_STEP, |g, p| {
            let x = g.param(p, "x")?;
            let y = g.matmul(x, x)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut p = store_of(&[("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap())]).unwrap();
        let r = finite_difference_check(&mut p, DEFAULT_STEP, |g, _| Ok(g.constant(Tensor::scalar(4.0))))
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.elements, 2);
    }

    #[test]
    fn non_finite_objective_is_an_oracle_error() {
        let mut p = store_of(&[("x", Tensor::new(&[1], vec![1.0]).unwrap())]).unwrap();
        let err = finite_difference_check(&mut p, DEFAULT_STEP, |g, _| {
            Ok(g.constant(Tensor::scalar(f64::NAN)))
        });
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
