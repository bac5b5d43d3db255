//! Central-difference gradient checks.
//!
//! `(f(θ + h) − f(θ − h)) / 2h` is compared against the tape gradient for
//! every entry. Relative error is `|a − n| / max(|a|, |n|, floor)`, so entries
//! whose true gradient is below `floor` are judged on absolute error.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, RESERVED};
use crate::error::Result;
use crate::nn::{self, AttentionMask, AttentionScale, AttentionWeights, LayerSettings};
use crate::recurrent::{
    rel_err, shared_gradient_accumulation_check, BoundParams, Model, ModelConfig,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Finite-difference agreement required of every check.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Shared-gradient versus clone-and-sum agreement.
pub const CLONE_SUM_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(tensor, entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks `f` (a scalar built on a fresh tape from `params`) against central
/// differences over every entry of every tensor in `params`.
pub fn grad_check<F>(
    name: &str,
    params: &[Tensor],
    h: f64,
    floor: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad_data(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    #[allow(clippy::needless_range_loop)]
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i][j], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of the full model loss over every parameter.
pub fn model_grad_check(
    model: &Model,
    batch: &Batch,
    smoothing: f64,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    grad_check("model", model.params().tensors(), h, floor, |tape, vars| {
        let bound = BoundParams::from_vars(vars.to_vec());
        model.loss(tape, &bound, batch, smoothing, false)
    })
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
    )
    .expect("positive shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output entry matters with a
/// distinct weight.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = Rng::with_stream(rng_seed, 99);
    let r = random(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Finite-difference checks of every differentiable primitive and of the
/// attention, feed-forward and layer blocks on random inputs.
pub fn primitive_checks(seed: u64, h: f64, floor: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    macro_rules! check {
        ($name:expr, [$($t:expr),*], |$tape:ident, $v:ident| $body:expr) => {
            out.push(grad_check($name, &[$($t),*], h, floor, |$tape, $v| {
                let y = $body;
                project($tape, y, seed)
            })?)
        };
    }

    check!(
        "add",
        [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
        |t, v| t.add(v[0], v[1])?
    );
    check!("add_same_operand", [random(&mut rng, &[4])], |t, v| t
        .add(v[0], v[0])?);
    check!(
        "mul",
        [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])],
        |t, v| t.mul(v[0], v[1])?
    );
    check!("square", [random(&mut rng, &[5])], |t, v| t
        .mul(v[0], v[0])?);
    check!(
        "add_bias",
        [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4])],
        |t, v| t.add_bias(v[0], v[1])?
    );
    let c = random(&mut rng, &[3, 2]);
    check!("add_const", [random(&mut rng, &[3, 2])], |t, v| t
        .add_const(v[0], &c)?);
    check!("scale", [random(&mut rng, &[3])], |t, v| t
        .scale(v[0], -2.5));
    check!(
        "matmul",
        [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])],
        |t, v| t.matmul(v[0], v[1])?
    );
    check!(
        "matmul_batched",
        [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 2])],
        |t, v| t.matmul(v[0], v[1])?
    );
    check!(
        "matmul_broadcast",
        [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5])],
        |t, v| t.matmul(v[0], v[1])?
    );
    check!("matmul_self", [random(&mut rng, &[3, 3])], |t, v| t
        .matmul(v[0], v[0])?);
    check!("transpose", [random(&mut rng, &[2, 3, 4])], |t, v| t
        .transpose(v[0])?);
    check!("reshape", [random(&mut rng, &[2, 6])], |t, v| t
        .reshape(v[0], &[3, 4])?);
    check!("permute", [random(&mut rng, &[2, 3, 4])], |t, v| t
        .permute(v[0], &[1, 0, 2])?);
    check!("softmax", [random(&mut rng, &[3, 5])], |t, v| t
        .softmax(v[0]));
    check!(
        "layer_norm",
        [
            random(&mut rng, &[3, 6]),
            random(&mut rng, &[6]),
            random(&mut rng, &[6])
        ],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)?
    );
    check!("relu", [random(&mut rng, &[4, 4])], |t, v| t.relu(v[0]));
    check!("dropout", [random(&mut rng, &[4, 5])], |t, v| t
        .dropout(v[0], 0.3, true)?);
    let ids = [1usize, 3, 1, 0, 2, 1];
    check!("embedding", [random(&mut rng, &[4, 3])], |t, v| t
        .embedding(v[0], &ids, &[2, 3])?);
    check!("sum", [random(&mut rng, &[2, 2])], |t, v| t.sum(v[0]));

    let targets = [2usize, 0, 4, 1];
    out.push(grad_check(
        "cross_entropy",
        &[random(&mut rng, &[2, 2, 5])],
        h,
        floor,
        |t, v| t.cross_entropy(v[0], &targets, 0.1, 0),
    )?);

    // attention blocks: batch 2, length 3, d_model 4, 2 heads
    let s = LayerSettings {
        heads: 2,
        scale: AttentionScale::HeadDim,
        dropout: 0.0,
        training: false,
        ln_eps: 1e-5,
    };
    let pad = [false, false, false, false, false, true];
    let mask = AttentionMask::key_padding(&pad, 2, 3, 3);
    let causal = AttentionMask::causal(&pad, 2, 3);
    let qkv = [
        random(&mut rng, &[2, 3, 4]),
        random(&mut rng, &[2, 3, 4]),
        random(&mut rng, &[2, 3, 4]),
    ];
    let bias = mask.bias().clone();
    out.push(grad_check(
        "scaled_dot_attention",
        &qkv,
        h,
        floor,
        |t, v| {
            let y = nn::scaled_dot_attention(t, v[0], v[1], v[2], Some(&bias), 0.5, 0.0, false)?;
            project(t, y, seed)
        },
    )?);

    let mut attn_params = vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4])];
    attn_params.extend((0..4).map(|_| random(&mut rng, &[4, 4])));
    out.push(grad_check(
        "multi_head_attention",
        &attn_params,
        h,
        floor,
        |t, v| {
            let w = AttentionWeights {
                query: v[2],
                key: v[3],
                value: v[4],
                output: v[5],
            };
            let y = nn::multi_head_attention(t, v[0], v[1], &w, Some(&causal), &s)?;
            project(t, y, seed)
        },
    )?);

    let ffn_params = [
        random(&mut rng, &[2, 3, 4]),
        random(&mut rng, &[4, 6]),
        random(&mut rng, &[6]),
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[4]),
    ];
    out.push(grad_check("ffn", &ffn_params, h, floor, |t, v| {
        let w = nn::FfnWeights {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        let y = nn::ffn(t, v[0], &w)?;
        project(t, y, seed)
    })?);

    Ok(out)
}

/// A small two-sentence batch (different lengths, so padding is exercised).
pub fn toy_batch(vocab_size: usize, seed: u64) -> Result<Batch> {
    let mut rng = Rng::new(seed);
    let symbols = vocab_size.saturating_sub(RESERVED).max(1);
    let mut sent =
        |n: usize| -> Vec<usize> { (0..n).map(|_| RESERVED + rng.below(symbols)).collect() };
    let pairs = vec![(sent(3), sent(4)), (sent(5), sent(2))];
    Batch::from_pairs(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Primitive checks, a full-model check and the clone-and-sum comparison for
/// a freshly initialized model with `config` (dropout forced off).
pub fn run_suite(config: &ModelConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = primitive_checks(seed, DEFAULT_STEP, DEFAULT_FLOOR)?
        .into_iter()
        .map(|r| SuiteEntry {
            name: r.name,
            max_rel_err: r.max_rel_err,
            tolerance: FD_TOLERANCE,
        })
        .collect();
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let model = Model::new(cfg.clone(), seed)?;
    let batch = toy_batch(cfg.vocab_size, seed)?;
    let fd = model_grad_check(&model, &batch, 0.1, DEFAULT_STEP, DEFAULT_FLOOR)?;
    entries.push(SuiteEntry {
        name: format!(
            "model[{} {}x{} / {} {}x{}]",
            cfg.encoder.mode,
            cfg.encoder.layers,
            cfg.encoder.loops,
            cfg.decoder.mode,
            cfg.decoder.layers,
            cfg.decoder.loops
        ),
        max_rel_err: fd.max_rel_err,
        tolerance: FD_TOLERANCE,
    });
    let shared = shared_gradient_accumulation_check(&model, &batch, 0.1, 1e-8)?;
    entries.push(SuiteEntry {
        name: "clone_and_sum".to_string(),
        max_rel_err: shared.max_rel_err,
        tolerance: CLONE_SUM_TOLERANCE,
    });
    Ok(entries)
}
