//! Pre-LN transformer blocks built from tape operations.
//!
//! Activations are `[batch, len, d_model]`. Attention masks are additive
//! biases of shape `[batch, len_q, len_k]` holding `0` or [`MASK_VALUE`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Tape, Tensor, Var, MASK_VALUE};

/// Divisor used inside the attention softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// `1/sqrt(d_model / heads)`.
    #[default]
    HeadDim,
    /// `1/sqrt(d_model)`.
    ModelDim,
}

impl AttentionScale {
    pub fn factor(self, d_model: usize, heads: usize) -> f64 {
        match self {
            AttentionScale::HeadDim => 1.0 / math::sqrt((d_model / heads) as f64),
            AttentionScale::ModelDim => 1.0 / math::sqrt(d_model as f64),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormWeights {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerWeights {
    pub self_attn: AttentionWeights,
    pub ffn: FfnWeights,
    pub norms: [NormWeights; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ffn: FfnWeights,
    pub norms: [NormWeights; 3],
}

/// Per-layer hyperparameters shared by every sublayer.
#[derive(Clone, Copy, Debug)]
pub struct LayerSettings {
    pub heads: usize,
    pub scale: AttentionScale,
    pub dropout: f64,
    pub training: bool,
    pub ln_eps: f64,
}

/// Additive attention bias `[batch, len_q, len_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    bias: Tensor,
}

impl AttentionMask {
    /// Blocks keys flagged in `key_pad` (`[batch, len_k]`, row-major).
    pub fn key_padding(key_pad: &[bool], batch: usize, len_q: usize, len_k: usize) -> Self {
        debug_assert_eq!(key_pad.len(), batch * len_k);
        let mut data = Vec::with_capacity(batch * len_q * len_k);
        for b in 0..batch {
            for _ in 0..len_q {
                data.extend(key_pad[b * len_k..(b + 1) * len_k].iter().map(|&p| {
                    if p {
                        MASK_VALUE
                    } else {
                        0.0
                    }
                }));
            }
        }
        Self {
            bias: Tensor::new(vec![batch, len_q, len_k], data).expect("mask shape"),
        }
    }

    /// Position `i` may attend to `j <= i` that is not padding.
    pub fn causal(key_pad: &[bool], batch: usize, len: usize) -> Self {
        let mut m = Self::key_padding(key_pad, batch, len, len);
        let data = m.bias.data_mut();
        for b in 0..batch {
            for i in 0..len {
                for j in i + 1..len {
                    data[(b * len + i) * len + j] = MASK_VALUE;
                }
            }
        }
        m
    }

    pub fn from_bias(bias: Tensor) -> Result<Self> {
        if bias.shape().len() != 3 {
            return Err(Error::shape("attention mask", bias.shape(), &[0, 0, 0]));
        }
        Ok(Self { bias })
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Repeats each batch entry `heads` times: `[batch * heads, len_q, len_k]`.
    fn expand_heads(&self, heads: usize) -> Tensor {
        let s = self.bias.shape();
        let per = s[1] * s[2];
        let mut data = Vec::with_capacity(self.bias.numel() * heads);
        for chunk in self.bias.data().chunks_exact(per) {
            for _ in 0..heads {
                data.extend_from_slice(chunk);
            }
        }
        Tensor::new(vec![s[0] * heads, s[1], s[2]], data).expect("mask shape")
    }
}

/// `softmax(q · kᵀ · scale + mask) · v` on `[groups, len, width]` inputs, with
/// dropout applied to the attention probabilities.
#[allow(clippy::too_many_arguments)]
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
    scale: f64,
    dropout: f64,
    training: bool,
) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, scale);
    if let Some(m) = mask {
        scores = tape.add_const(scores, m)?;
    }
    let probs = tape.softmax(scores);
    let probs = tape.dropout(probs, dropout, training)?;
    tape.matmul(probs, v)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, l, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (l, dk) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, l, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, l, heads * dk])
}

/// Multi-head attention: project, split into `heads`, attend per head,
/// concatenate the head outputs and apply the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights,
    mask: Option<&AttentionMask>,
    s: &LayerSettings,
) -> Result<Var> {
    let shape = tape.shape(x_q).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "multi_head_attention",
            &shape,
            tape.shape(x_kv),
        ));
    }
    let (batch, d_model) = (shape[0], shape[2]);
    if s.heads == 0 || d_model % s.heads != 0 {
        return Err(Error::Config(format!(
            "{} heads do not divide d_model = {d_model}",
            s.heads
        )));
    }
    let q = tape.matmul(x_q, w.query)?;
    let k = tape.matmul(x_kv, w.key)?;
    let v = tape.matmul(x_kv, w.value)?;
    let q = split_heads(tape, q, s.heads)?;
    let k = split_heads(tape, k, s.heads)?;
    let v = split_heads(tape, v, s.heads)?;
    let expanded = mask.map(|m| m.expand_heads(s.heads));
    let ctx = scaled_dot_attention(
        tape,
        q,
        k,
        v,
        expanded.as_ref(),
        s.scale.factor(d_model, s.heads),
        s.dropout,
        s.training,
    )?;
    let ctx = merge_heads(tape, ctx, batch, s.heads)?;
    tape.matmul(ctx, w.output)
}

/// `max(0, x·W1 + b1)·W2 + b2`
pub fn ffn(tape: &mut Tape, x: Var, w: &FfnWeights) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_bias(h, w.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_bias(o, w.b2)
}

pub fn layer_norm(tape: &mut Tape, x: Var, w: &NormWeights, eps: f64) -> Result<Var> {
    tape.layer_norm(x, w.gain, w.bias, eps)
}

/// `y = x + Drop(SelfAttn(LN(x)))`, then `z = y + Drop(FFN(LN(y)))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    w: &EncoderLayerWeights,
    mask: Option<&AttentionMask>,
    s: &LayerSettings,
) -> Result<Var> {
    let h = layer_norm(tape, x, &w.norms[0], s.ln_eps)?;
    let a = multi_head_attention(tape, h, h, &w.self_attn, mask, s)?;
    let a = tape.dropout(a, s.dropout, s.training)?;
    let y = tape.add(x, a)?;
    let h = layer_norm(tape, y, &w.norms[1], s.ln_eps)?;
    let f = ffn(tape, h, &w.ffn)?;
    let f = tape.dropout(f, s.dropout, s.training)?;
    tape.add(y, f)
}

/// Pre-LN self-attention (causal), cross-attention over `memory`, then FFN.
pub fn decoder_layer(
    tape: &mut Tape,
    y: Var,
    memory: Var,
    w: &DecoderLayerWeights,
    self_mask: &AttentionMask,
    cross_mask: Option<&AttentionMask>,
    s: &LayerSettings,
) -> Result<Var> {
    let h = layer_norm(tape, y, &w.norms[0], s.ln_eps)?;
    let a = multi_head_attention(tape, h, h, &w.self_attn, Some(self_mask), s)?;
    let a = tape.dropout(a, s.dropout, s.training)?;
    let y = tape.add(y, a)?;
    let h = layer_norm(tape, y, &w.norms[1], s.ln_eps)?;
    let c = multi_head_attention(tape, h, memory, &w.cross_attn, cross_mask, s)?;
    let c = tape.dropout(c, s.dropout, s.training)?;
    let y = tape.add(y, c)?;
    let h = layer_norm(tape, y, &w.norms[2], s.ln_eps)?;
    let f = ffn(tape, h, &w.ffn)?;
    let f = tape.dropout(f, s.dropout, s.training)?;
    tape.add(y, f)
}

/// Sinusoidal table `[seq_len, d_model]`: even columns `sin`, odd columns
/// `cos`, with frequency `10000^(-2i/d_model)` for column pair `i`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / math::powf(10000.0, 2.0 * pair / d_model as f64);
            data[pos * d_model + i] = if i % 2 == 0 {
                math::sin(angle)
            } else {
                math::cos(angle)
            };
        }
    }
    Tensor::new(vec![seq_len, d_model], data).expect("positional table shape")
}

/// `Drop(embedding(ids) · sqrt(d_model) + PE)` for a `[batch, len]` id matrix.
pub fn embed_tokens(
    tape: &mut Tape,
    table: Var,
    ids: &[usize],
    batch: usize,
    len: usize,
    s: &LayerSettings,
) -> Result<Var> {
    let d_model = tape.shape(table)[1];
    let e = tape.embedding(table, ids, &[batch, len])?;
    let e = tape.scale(e, math::sqrt(d_model as f64));
    let pe = positional_encoding(len, d_model);
    let mut tiled = Vec::with_capacity(batch * len * d_model);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = Tensor::new(vec![batch, len, d_model], tiled)?;
    let x = tape.add_const(e, &pe)?;
    tape.dropout(x, s.dropout, s.training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn settings(heads: usize) -> LayerSettings {
        LayerSettings {
            heads,
            scale: AttentionScale::HeadDim,
            dropout: 0.0,
            training: false,
            ln_eps: 1e-5,
        }
    }

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn attn(t: &mut Tape, rng: &mut Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            query: t.param(rand_tensor(rng, &[d, d])),
            key: t.param(rand_tensor(rng, &[d, d])),
            value: t.param(rand_tensor(rng, &[d, d])),
            output: t.param(rand_tensor(rng, &[d, d])),
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::new(vec![1, 1, 2], vec![1., 0.]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1, 2], vec![5., 5.]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 1, 2], vec![7., 7.]).unwrap());
        let o = scaled_dot_attention(&mut t, q, k, v, None, 0.5, 0.0, false).unwrap();
        assert_eq!(t.value(o).data(), &[7., 7.]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::new(vec![1, 1, 2], vec![0.3, -1.]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 2, 2], vec![1., 2., 1., 2.]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 1.]).unwrap());
        let o = scaled_dot_attention(&mut t, q, k, v, None, 1.0, 0.0, false).unwrap();
        assert_eq!(t.value(o).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mask_forces_single_unmasked_key() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::new(vec![1, 1, 2], vec![3., 1.]).unwrap());
        let k = t.constant(Tensor::new(vec![1, 3, 2], vec![9., 9., 0., 1., 4., 4.]).unwrap());
        let v = t.constant(Tensor::new(vec![1, 3, 2], vec![1., 1., 2., -3., 5., 5.]).unwrap());
        let mask = AttentionMask::key_padding(&[true, false, true], 1, 1, 3);
        let o = scaled_dot_attention(&mut t, q, k, v, Some(mask.bias()), 1.0, 0.0, false).unwrap();
        assert_eq!(t.value(o).data(), &[2., -3.]);
    }

    #[test]
    fn key_width_mismatch_is_an_error() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[1, 2, 3]));
        let k = t.constant(Tensor::zeros(&[1, 2, 4]));
        let v = t.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(
            scaled_dot_attention(&mut t, q, k, v, None, 1.0, 0.0, false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn one_head_identity_projections_reduce_to_attention() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[1, 3, 4]));
        let id = t.constant(Tensor::identity(4));
        let w = AttentionWeights {
            query: id,
            key: id,
            value: id,
            output: id,
        };
        let mha = multi_head_attention(&mut t, x, x, &w, None, &settings(1)).unwrap();
        let direct = scaled_dot_attention(&mut t, x, x, x, None, 0.5, 0.0, false).unwrap();
        let (a, b) = (
            t.value(mha).data().to_vec(),
            t.value(direct).data().to_vec(),
        );
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    /// Plain per-head loop over sliced projection matrices.
    fn reference_mha(x: &[f64], l: usize, d: usize, h: usize, w: [&[f64]; 4]) -> Vec<f64> {
        let proj = |m: &[f64]| -> Vec<f64> {
            let mut o = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..d {
                    o[i * d + j] = (0..d).map(|p| x[i * d + p] * m[p * d + j]).sum();
                }
            }
            o
        };
        let (q, k, v) = (proj(w[0]), proj(w[1]), proj(w[2]));
        let dk = d / h;
        let mut concat = vec![0.0; l * d];
        for head in 0..h {
            let cols = head * dk..(head + 1) * dk;
            for i in 0..l {
                let mut scores: Vec<f64> = (0..l)
                    .map(|j| {
                        cols.clone()
                            .map(|c| q[i * d + c] * k[j * d + c])
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                scores.iter_mut().for_each(|s| *s = (*s - max).exp() / z);
                for c in cols.clone() {
                    concat[i * d + c] = (0..l).map(|j| scores[j] * v[j * d + c]).sum();
                }
            }
        }
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|p| concat[i * d + p] * w[3][p * d + j]).sum();
            }
        }
        out
    }

    #[test]
    fn two_heads_match_per_head_loop() {
        let mut rng = Rng::new(9);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[1, 2, 4]));
        let w = attn(&mut t, &mut rng, 4);
        let out = multi_head_attention(&mut t, x, x, &w, None, &settings(2)).unwrap();
        let want = reference_mha(
            t.value(x).data(),
            2,
            4,
            2,
            [
                t.value(w.query).data(),
                t.value(w.key).data(),
                t.value(w.value).data(),
                t.value(w.output).data(),
            ],
        );
        for (a, b) in t.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn memory_permutation_leaves_output_unchanged() {
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let xq = t.constant(rand_tensor(&mut rng, &[1, 2, 4]));
        let mem = rand_tensor(&mut rng, &[1, 3, 4]);
        let perm = [2usize, 0, 1];
        let mut permuted = Vec::new();
        for &r in &perm {
            permuted.extend_from_slice(&mem.data()[r * 4..(r + 1) * 4]);
        }
        let m1 = t.constant(mem);
        let m2 = t.constant(Tensor::new(vec![1, 3, 4], permuted).unwrap());
        let w = attn(&mut t, &mut rng, 4);
        let a = multi_head_attention(&mut t, xq, m1, &w, None, &settings(2)).unwrap();
        let b = multi_head_attention(&mut t, xq, m2, &w, None, &settings(2)).unwrap();
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[1, 2, 4]));
        let w = attn(&mut t, &mut rng, 4);
        assert!(matches!(
            multi_head_attention(&mut t, x, x, &w, None, &settings(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ffn_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1., -1.]).unwrap());
        let id = t.constant(Tensor::identity(2));
        let zero = t.constant(Tensor::zeros(&[2]));
        let w = FfnWeights {
            w1: id,
            b1: zero,
            w2: id,
            b2: zero,
        };
        let y = ffn(&mut t, x, &w).unwrap();
        assert_eq!(t.value(y).data(), &[1., 0.]);

        let x0 = t.constant(Tensor::zeros(&[1, 2]));
        let c = t.constant(Tensor::new(vec![2], vec![0.5, -2.]).unwrap());
        let w = FfnWeights { b2: c, ..w };
        let y = ffn(&mut t, x0, &w).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -2.]);
    }

    fn zero_encoder_layer(t: &mut Tape, d: usize, ff: usize) -> EncoderLayerWeights {
        let mut z = |s: &[usize]| t.param(Tensor::zeros(s));
        let att = |z: &mut dyn FnMut(&[usize]) -> Var| AttentionWeights {
            query: z(&[d, d]),
            key: z(&[d, d]),
            value: z(&[d, d]),
            output: z(&[d, d]),
        };
        let self_attn = att(&mut z);
        let ffn = FfnWeights {
            w1: z(&[d, ff]),
            b1: z(&[ff]),
            w2: z(&[ff, d]),
            b2: z(&[d]),
        };
        let norms = [
            NormWeights {
                gain: z(&[d]),
                bias: z(&[d]),
            },
            NormWeights {
                gain: z(&[d]),
                bias: z(&[d]),
            },
        ];
        EncoderLayerWeights {
            self_attn,
            ffn,
            norms,
        }
    }

    #[test]
    fn zero_encoder_layer_is_identity() {
        let mut rng = Rng::new(5);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[2, 3, 4]));
        let w = zero_encoder_layer(&mut t, 4, 8);
        let y = encoder_layer(&mut t, x, &w, None, &settings(2)).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = AttentionMask::causal(&[false, false, true], 1, 3);
        let b = m.bias().data();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[1], MASK_VALUE);
        assert_eq!(b[3], 0.0);
        assert_eq!(b[4], 0.0);
        assert_eq!(b[8], MASK_VALUE);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(50, 6);
        let d = pe.data();
        assert_eq!(&d[..6], &[0., 1., 0., 1., 0., 1.]);
        assert!((d[6] - 0.8414709848078965).abs() < 1e-15);
        assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
