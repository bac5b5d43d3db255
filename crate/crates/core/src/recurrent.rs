//! Depth recurrence with shared weights.
//!
//! A [`LayerSchedule`] maps every virtual layer of the unrolled depth to a
//! physical weight set:
//!
//! - `stacked`: `N·T` distinct layers, nothing shared.
//! - `shared-loop`: one block of `N` layers applied `T` times.
//! - `closed-chain`: the physical layers are walked forward and back
//!   (`0, 1, .., N-1, N-2, .., 0, 1, ..`), giving `T·(N-1)+1` virtual layers.
//!
//! At each block start after the first, the embedded input `x` is added back
//! onto the running state before the next layer runs.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{
    self, AttentionMask, AttentionScale, AttentionWeights, DecoderLayerWeights,
    EncoderLayerWeights, FfnWeights, LayerSettings, NormWeights,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShareMode {
    Stacked,
    SharedLoop,
    ClosedChain,
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareMode::Stacked => "stacked",
            ShareMode::SharedLoop => "shared-loop",
            ShareMode::ClosedChain => "closed-chain",
        })
    }
}

impl FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" => Ok(ShareMode::Stacked),
            "shared-loop" => Ok(ShareMode::SharedLoop),
            "closed-chain" => Ok(ShareMode::ClosedChain),
            other => Err(Error::Config(format!(
                "unknown sharing mode {other:?} (expected stacked, shared-loop or closed-chain)"
            ))),
        }
    }
}

/// Virtual-layer → physical-layer map plus the block starts where the input
/// is re-injected. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSchedule {
    mode: ShareMode,
    layers: usize,
    loops: usize,
    assignment: Vec<usize>,
    block_starts: Vec<usize>,
}

impl LayerSchedule {
    pub fn build(mode: ShareMode, layers: usize, loops: usize) -> Result<Self> {
        if layers == 0 || loops == 0 {
            return Err(Error::Config(format!(
                "layers ({layers}) and loops ({loops}) must be positive"
            )));
        }
        let (assignment, period): (Vec<usize>, usize) = match mode {
            ShareMode::Stacked => ((0..layers * loops).collect(), layers),
            ShareMode::SharedLoop => ((0..layers * loops).map(|i| i % layers).collect(), layers),
            ShareMode::ClosedChain => {
                if layers < 2 {
                    return Err(Error::Config(
                        "closed-chain needs at least 2 layers per block".to_string(),
                    ));
                }
                let cycle = 2 * layers - 2;
                let len = loops * (layers - 1) + 1;
                let a = (0..len)
                    .map(|i| {
                        let r = i % cycle;
                        if r < layers {
                            r
                        } else {
                            cycle - r
                        }
                    })
                    .collect();
                (a, layers - 1)
            }
        };
        let block_starts = (0..assignment.len()).step_by(period).collect();
        Ok(Self {
            mode,
            layers,
            loops,
            assignment,
            block_starts,
        })
    }

    /// One physical layer per virtual layer, keeping the block starts.
    /// Used to build unshared clones of a shared model.
    pub fn unrolled(&self) -> Self {
        Self {
            mode: ShareMode::Stacked,
            layers: self.assignment.len(),
            loops: 1,
            assignment: (0..self.assignment.len()).collect(),
            block_starts: self.block_starts.clone(),
        }
    }

    pub fn mode(&self) -> ShareMode {
        self.mode
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn loops(&self) -> usize {
        self.loops
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn block_starts(&self) -> &[usize] {
        &self.block_starts
    }

    /// Number of virtual layers.
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Number of distinct physical layers referenced.
    pub fn physical_layers(&self) -> usize {
        self.assignment.iter().collect::<BTreeSet<_>>().len()
    }

    /// Whether the input is re-added before virtual layer `i`.
    pub fn reinjects_before(&self, i: usize) -> bool {
        i > 0 && self.block_starts.binary_search(&i).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub mode: ShareMode,
    /// Layers per block (`N`).
    pub layers: usize,
    /// Loop count (`T`).
    pub loops: usize,
}

impl StackConfig {
    pub fn new(mode: ShareMode, layers: usize, loops: usize) -> Self {
        Self {
            mode,
            layers,
            loops,
        }
    }

    pub fn schedule(&self) -> Result<LayerSchedule> {
        LayerSchedule::build(self.mode, self.layers, self.loops)
    }

    pub fn physical_layers(&self) -> usize {
        match self.mode {
            ShareMode::Stacked => self.layers * self.loops,
            ShareMode::SharedLoop | ShareMode::ClosedChain => self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Joint source/target vocabulary; one tied table serves both embeddings
    /// and the output projection.
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub dropout: f64,
    pub reinjection: bool,
    pub attention_scale: AttentionScale,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 512/2048/8 dimensions with a stacked 6/6 layout.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            encoder: StackConfig::new(ShareMode::Stacked, 6, 1),
            decoder: StackConfig::new(ShareMode::Stacked, 6, 1),
            dropout: 0.1,
            reinjection: true,
            attention_scale: AttentionScale::HeadDim,
            ln_eps: 1e-5,
        }
    }

    /// 1024/4096/16 dimensions with a stacked 6/6 layout.
    pub fn big(vocab_size: usize) -> Self {
        Self {
            d_model: 1024,
            d_ff: 4096,
            heads: 16,
            dropout: 0.3,
            ..Self::base(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("dimensions must be positive".to_string()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads = {} must divide d_model = {}",
                self.heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("layer-norm eps must be positive".to_string()));
        }
        self.encoder.schedule()?;
        self.decoder.schedule()?;
        Ok(())
    }
}

/// Exact trainable-parameter accounting for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub encoder_layer: usize,
    pub encoder_physical_layers: usize,
    pub encoder: usize,
    pub decoder_layer: usize,
    pub decoder_physical_layers: usize,
    pub decoder: usize,
    pub final_norms: usize,
    /// All layer-norm gains and biases (already included above).
    pub norms: usize,
    /// All additive biases outside layer norms (already included above).
    pub biases: usize,
    pub total: usize,
}

pub fn param_count(config: &ModelConfig) -> ParamBreakdown {
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let attention = 4 * d * d;
    let ffn = d * ff + ff + ff * d + d;
    let norm = 2 * d;
    let encoder_layer = attention + ffn + 2 * norm;
    let decoder_layer = 2 * attention + ffn + 3 * norm;
    let enc_n = config.encoder.physical_layers();
    let dec_n = config.decoder.physical_layers();
    let embedding = v * d;
    let final_norms = 2 * norm;
    let encoder = enc_n * encoder_layer;
    let decoder = dec_n * decoder_layer;
    ParamBreakdown {
        embedding,
        encoder_layer,
        encoder_physical_layers: enc_n,
        encoder,
        decoder_layer,
        decoder_physical_layers: dec_n,
        decoder,
        final_norms,
        norms: (2 * enc_n + 3 * dec_n) * norm + final_norms,
        biases: (enc_n + dec_n) * (ff + d),
        total: embedding + encoder + decoder + final_norms,
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

const ENCODER_TENSORS: usize = 12;
const DECODER_TENSORS: usize = 18;

enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
}

fn layer_specs(
    prefix: &str,
    d: usize,
    ff: usize,
    decoder: bool,
) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let attns: &[&str] = if decoder {
        &["self_attn", "cross_attn"]
    } else {
        &["self_attn"]
    };
    for a in attns {
        for p in ["query", "key", "value", "output"] {
            out.push((format!("{prefix}.{a}.{p}"), vec![d, d], Init::Xavier));
        }
    }
    out.push((format!("{prefix}.ffn.w1"), vec![d, ff], Init::Xavier));
    out.push((format!("{prefix}.ffn.b1"), vec![ff], Init::Zeros));
    out.push((format!("{prefix}.ffn.w2"), vec![ff, d], Init::Xavier));
    out.push((format!("{prefix}.ffn.b2"), vec![d], Init::Zeros));
    for n in 0..if decoder { 3 } else { 2 } {
        out.push((format!("{prefix}.norm{n}.gain"), vec![d], Init::Ones));
        out.push((format!("{prefix}.norm{n}.bias"), vec![d], Init::Zeros));
    }
    out
}

fn model_specs(
    config: &ModelConfig,
    enc_physical: usize,
    dec_physical: usize,
) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff) = (config.d_model, config.d_ff);
    let mut specs = vec![(
        "embedding".to_string(),
        vec![config.vocab_size, d],
        Init::Embedding,
    )];
    for i in 0..enc_physical {
        specs.extend(layer_specs(&format!("encoder.{i}"), d, ff, false));
    }
    for i in 0..dec_physical {
        specs.extend(layer_specs(&format!("decoder.{i}"), d, ff, true));
    }
    for side in ["encoder", "decoder"] {
        specs.push((format!("{side}.final_norm.gain"), vec![d], Init::Ones));
        specs.push((format!("{side}.final_norm.bias"), vec![d], Init::Zeros));
    }
    specs
}

/// Encoder-decoder transformer whose layers follow shared-weight schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoder_schedule: LayerSchedule,
    decoder_schedule: LayerSchedule,
    params: ParamStore,
}

/// Tape handles for every parameter of a [`Model`], in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Handles in [`ParamStore`] order, e.g. leaves created by a gradient
    /// checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    /// Randomly initialized model: Xavier-uniform projections, embedding
    /// entries uniform with standard deviation `d_model^-1/2`, zero biases,
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder_schedule = config.encoder.schedule()?;
        let decoder_schedule = config.decoder.schedule()?;
        let specs = model_specs(
            &config,
            encoder_schedule.physical_layers(),
            decoder_schedule.physical_layers(),
        );
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let limit = math::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                    (0..n).map(|_| rng.uniform_range(-limit, limit)).collect()
                }
                Init::Embedding => {
                    let limit = math::sqrt(3.0 / config.d_model as f64);
                    (0..n).map(|_| rng.uniform_range(-limit, limit)).collect()
                }
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            encoder_schedule,
            decoder_schedule,
            params,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Names, order
    /// and shapes must match what `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder_schedule = config.encoder.schedule()?;
        let decoder_schedule = config.decoder.schedule()?;
        let specs = model_specs(
            &config,
            encoder_schedule.physical_layers(),
            decoder_schedule.physical_layers(),
        );
        if specs.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "configuration expects {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, got)) in specs.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Incompatible(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self {
            config,
            encoder_schedule,
            decoder_schedule,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder_schedule(&self) -> &LayerSchedule {
        &self.encoder_schedule
    }

    pub fn decoder_schedule(&self) -> &LayerSchedule {
        &self.decoder_schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same computation with one private weight set per virtual layer. Every
    /// clone layer starts as a copy of the physical layer it stood in for.
    /// Returns the clone and, per clone tensor, the index of the tensor it was
    /// copied from.
    pub fn unshared_clone(&self) -> (Model, Vec<usize>) {
        let enc = self.encoder_schedule.unrolled();
        let dec = self.decoder_schedule.unrolled();
        let mut params = ParamStore::new();
        let mut origin = Vec::new();
        let copy = |params: &mut ParamStore, origin: &mut Vec<usize>, from: usize, name: String| {
            params.push(name, self.params.tensors[from].clone());
            origin.push(from);
        };
        copy(&mut params, &mut origin, 0, "embedding".to_string());
        let enc_base = 1;
        let dec_base = enc_base + ENCODER_TENSORS * self.encoder_schedule.physical_layers();
        for (v, &p) in self.encoder_schedule.assignment().iter().enumerate() {
            for k in 0..ENCODER_TENSORS {
                let from = enc_base + p * ENCODER_TENSORS + k;
                let suffix = self.params.names[from]
                    .split_once('.')
                    .unwrap()
                    .1
                    .split_once('.')
                    .unwrap()
                    .1;
                copy(
                    &mut params,
                    &mut origin,
                    from,
                    format!("encoder.{v}.{suffix}"),
                );
            }
        }
        for (v, &p) in self.decoder_schedule.assignment().iter().enumerate() {
            for k in 0..DECODER_TENSORS {
                let from = dec_base + p * DECODER_TENSORS + k;
                let suffix = self.params.names[from]
                    .split_once('.')
                    .unwrap()
                    .1
                    .split_once('.')
                    .unwrap()
                    .1;
                copy(
                    &mut params,
                    &mut origin,
                    from,
                    format!("decoder.{v}.{suffix}"),
                );
            }
        }
        let tail = dec_base + DECODER_TENSORS * self.decoder_schedule.physical_layers();
        for from in tail..self.params.len() {
            copy(
                &mut params,
                &mut origin,
                from,
                self.params.names[from].clone(),
            );
        }
        let mut config = self.config.clone();
        config.encoder = StackConfig::new(ShareMode::Stacked, enc.len(), 1);
        config.decoder = StackConfig::new(ShareMode::Stacked, dec.len(), 1);
        let clone = Model {
            config,
            encoder_schedule: enc,
            decoder_schedule: dec,
            params,
        };
        (clone, origin)
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundParams { vars }
    }

    pub fn settings(&self, training: bool) -> LayerSettings {
        LayerSettings {
            heads: self.config.heads,
            scale: self.config.attention_scale,
            dropout: self.config.dropout,
            training,
            ln_eps: self.config.ln_eps,
        }
    }

    pub fn embedding_var(&self, bound: &BoundParams) -> Var {
        bound.vars[0]
    }

    /// Physical encoder layers bound on the tape.
    pub fn encoder_layers(&self, bound: &BoundParams) -> Vec<EncoderLayerWeights> {
        (0..self.encoder_schedule.physical_layers())
            .map(|i| encoder_weights(&bound.vars[1 + i * ENCODER_TENSORS..]))
            .collect()
    }

    pub fn decoder_layers(&self, bound: &BoundParams) -> Vec<DecoderLayerWeights> {
        let base = 1 + ENCODER_TENSORS * self.encoder_schedule.physical_layers();
        (0..self.decoder_schedule.physical_layers())
            .map(|i| decoder_weights(&bound.vars[base + i * DECODER_TENSORS..]))
            .collect()
    }

    pub fn encoder_final_norm(&self, bound: &BoundParams) -> NormWeights {
        let n = bound.vars.len();
        NormWeights {
            gain: bound.vars[n - 4],
            bias: bound.vars[n - 3],
        }
    }

    pub fn decoder_final_norm(&self, bound: &BoundParams) -> NormWeights {
        let n = bound.vars.len();
        NormWeights {
            gain: bound.vars[n - 2],
            bias: bound.vars[n - 1],
        }
    }

    /// Embedded source through all encoder loops and the final norm.
    /// `src` is `[batch, len]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        src: &[usize],
        batch: usize,
        len: usize,
        training: bool,
    ) -> Result<Var> {
        let s = self.settings(training);
        let pad: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let mask = AttentionMask::key_padding(&pad, batch, len, len);
        let x = nn::embed_tokens(tape, self.embedding_var(bound), src, batch, len, &s)?;
        let layers = self.encoder_layers(bound);
        let norm = self.encoder_final_norm(bound);
        recurrent_encoder_forward(
            tape,
            x,
            &layers,
            &self.encoder_schedule,
            &norm,
            Some(&mask),
            &s,
            self.config.reinjection,
        )
    }

    /// Decoder states (after the final norm) for `tgt_in` `[batch, tgt_len]`
    /// attending to `memory` `[batch, src_len, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        memory: Var,
        src: &[usize],
        tgt_in: &[usize],
        batch: usize,
        tgt_len: usize,
        training: bool,
    ) -> Result<Var> {
        let s = self.settings(training);
        let src_len = tape.shape(memory)[1];
        let src_pad: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let tgt_pad: Vec<bool> = tgt_in.iter().map(|&t| t == PAD).collect();
        let self_mask = AttentionMask::causal(&tgt_pad, batch, tgt_len);
        let cross_mask = AttentionMask::key_padding(&src_pad, batch, tgt_len, src_len);
        let y = nn::embed_tokens(tape, self.embedding_var(bound), tgt_in, batch, tgt_len, &s)?;
        let layers = self.decoder_layers(bound);
        let norm = self.decoder_final_norm(bound);
        recurrent_decoder_forward(
            tape,
            y,
            memory,
            &layers,
            &self.decoder_schedule,
            &norm,
            &self_mask,
            Some(&cross_mask),
            &s,
            self.config.reinjection,
        )
    }

    /// `states · Eᵀ` with the tied embedding table.
    pub fn logits(&self, tape: &mut Tape, bound: &BoundParams, states: Var) -> Result<Var> {
        let et = tape.transpose(self.embedding_var(bound))?;
        tape.matmul(states, et)
    }

    /// Label-smoothed cross-entropy of `batch`, averaged over target tokens.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &Batch,
        smoothing: f64,
        training: bool,
    ) -> Result<Var> {
        let memory = self.encode(tape, bound, &batch.src, batch.size, batch.src_len, training)?;
        let states = self.decode(
            tape,
            bound,
            memory,
            &batch.src,
            &batch.tgt_in,
            batch.size,
            batch.tgt_len,
            training,
        )?;
        let logits = self.logits(tape, bound, states)?;
        tape.cross_entropy(logits, &batch.tgt_out, smoothing, PAD)
    }

    /// Loss and per-parameter gradients (store order) for one batch.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        smoothing: f64,
        training: bool,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::with_dropout_seed(dropout_seed);
        let bound = self.bind(&mut tape, true);
        let loss = self.loss(&mut tape, &bound, batch, smoothing, training)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        let grads = bound
            .vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| {
                tape.grad_data(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, grads))
    }
}

fn attention(v: &[Var]) -> AttentionWeights {
    AttentionWeights {
        query: v[0],
        key: v[1],
        value: v[2],
        output: v[3],
    }
}

fn ffn_weights(v: &[Var]) -> FfnWeights {
    FfnWeights {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

fn norm(v: &[Var]) -> NormWeights {
    NormWeights {
        gain: v[0],
        bias: v[1],
    }
}

fn encoder_weights(v: &[Var]) -> EncoderLayerWeights {
    EncoderLayerWeights {
        self_attn: attention(&v[0..4]),
        ffn: ffn_weights(&v[4..8]),
        norms: [norm(&v[8..10]), norm(&v[10..12])],
    }
}

fn decoder_weights(v: &[Var]) -> DecoderLayerWeights {
    DecoderLayerWeights {
        self_attn: attention(&v[0..4]),
        cross_attn: attention(&v[4..8]),
        ffn: ffn_weights(&v[8..12]),
        norms: [norm(&v[12..14]), norm(&v[14..16]), norm(&v[16..18])],
    }
}

/// Runs the encoder schedule over the embedded input `x`, re-adding `x` at
/// every block start after the first when `reinjection` is on, then applies
/// the final norm.
#[allow(clippy::too_many_arguments)]
pub fn recurrent_encoder_forward(
    tape: &mut Tape,
    x: Var,
    layers: &[EncoderLayerWeights],
    schedule: &LayerSchedule,
    final_norm: &NormWeights,
    mask: Option<&AttentionMask>,
    s: &LayerSettings,
    reinjection: bool,
) -> Result<Var> {
    let mut h = x;
    for (i, &p) in schedule.assignment().iter().enumerate() {
        if reinjection && schedule.reinjects_before(i) {
            h = tape.add(h, x)?;
        }
        h = nn::encoder_layer(tape, h, &layers[p], mask, s)?;
    }
    nn::layer_norm(tape, h, final_norm, s.ln_eps)
}

/// Decoder counterpart of [`recurrent_encoder_forward`]; every virtual layer
/// cross-attends to the same `memory` (the final encoder output).
#[allow(clippy::too_many_arguments)]
pub fn recurrent_decoder_forward(
    tape: &mut Tape,
    y: Var,
    memory: Var,
    layers: &[DecoderLayerWeights],
    schedule: &LayerSchedule,
    final_norm: &NormWeights,
    self_mask: &AttentionMask,
    cross_mask: Option<&AttentionMask>,
    s: &LayerSettings,
    reinjection: bool,
) -> Result<Var> {
    let mut h = y;
    for (i, &p) in schedule.assignment().iter().enumerate() {
        if reinjection && schedule.reinjects_before(i) {
            h = tape.add(h, y)?;
        }
        h = nn::decoder_layer(tape, h, memory, &layers[p], self_mask, cross_mask, s)?;
    }
    nn::layer_norm(tape, h, final_norm, s.ln_eps)
}

/// Outcome of comparing shared-weight gradients against the unshared clone.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries: usize,
}

/// Gradient of every physical tensor of `model` versus the sum of the
/// gradients of its aliases in [`Model::unshared_clone`]. Dropout is off.
///
/// Relative error is `|a - b| / max(|a|, |b|, floor)`.
pub fn shared_gradient_accumulation_check(
    model: &Model,
    batch: &Batch,
    smoothing: f64,
    floor: f64,
) -> Result<SharedGradReport> {
    let (_, shared) = model.loss_and_grads(batch, smoothing, false, 0)?;
    let (clone, origin) = model.unshared_clone();
    let (_, cloned) = clone.loss_and_grads(batch, smoothing, false, 0)?;
    let mut summed: Vec<Vec<f64>> = shared.iter().map(|g| vec![0.0; g.len()]).collect();
    for (g, &from) in cloned.iter().zip(&origin) {
        for (s, v) in summed[from].iter_mut().zip(g) {
            *s += v;
        }
    }
    let mut report = SharedGradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        entries: 0,
    };
    for (i, (a, b)) in shared.iter().zip(&summed).enumerate() {
        for (x, y) in a.iter().zip(b) {
            let err = rel_err(*x, *y, floor);
            report.entries += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = model.params.names[i].clone();
            }
        }
    }
    Ok(report)
}

pub(crate) fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let diff = math::abs(a - b);
    if diff == 0.0 {
        return 0.0;
    }
    diff / math::abs(a).max(math::abs(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = LayerSchedule::build(ShareMode::SharedLoop, 8, 2).unwrap();
        let want: Vec<usize> = (0..8).chain(0..8).collect();
        assert_eq!(s.assignment(), &want[..]);
        assert_eq!(s.block_starts(), &[0, 8]);

        let c = LayerSchedule::build(ShareMode::ClosedChain, 4, 2).unwrap();
        assert_eq!(c.assignment(), &[0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(c.block_starts(), &[0, 3, 6]);

        let v = LayerSchedule::build(ShareMode::Stacked, 6, 1).unwrap();
        assert_eq!(v.assignment(), &[0, 1, 2, 3, 4, 5]);

        let long = LayerSchedule::build(ShareMode::ClosedChain, 8, 5).unwrap();
        assert_eq!(long.len(), 36);
        assert_eq!(long.physical_layers(), 8);
    }

    #[test]
    fn schedule_errors() {
        assert!(LayerSchedule::build(ShareMode::ClosedChain, 1, 3).is_err());
        assert!(LayerSchedule::build(ShareMode::SharedLoop, 0, 3).is_err());
        assert!(LayerSchedule::build(ShareMode::Stacked, 2, 0).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            ShareMode::Stacked,
            ShareMode::SharedLoop,
            ShareMode::ClosedChain,
        ] {
            assert_eq!(m.to_string().parse::<ShareMode>().unwrap(), m);
        }
        assert!("loop".parse::<ShareMode>().is_err());
    }

    fn tiny(enc: StackConfig, dec: StackConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            encoder: enc,
            decoder: dec,
            dropout: 0.0,
            reinjection: true,
            attention_scale: AttentionScale::HeadDim,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn param_count_matches_instantiated_model() {
        for (mode, n, t) in [
            (ShareMode::Stacked, 2, 2),
            (ShareMode::SharedLoop, 3, 4),
            (ShareMode::ClosedChain, 3, 2),
        ] {
            let cfg = tiny(StackConfig::new(mode, n, t), StackConfig::new(mode, n, t));
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(param_count(&cfg).total, m.num_params());
        }
    }

    #[test]
    fn param_count_independent_of_loops_when_sharing() {
        let a = ModelConfig {
            encoder: StackConfig::new(ShareMode::SharedLoop, 8, 1),
            ..ModelConfig::base(32768)
        };
        let b = ModelConfig {
            encoder: StackConfig::new(ShareMode::SharedLoop, 8, 7),
            ..a.clone()
        };
        assert_eq!(param_count(&a), param_count(&b));
    }

    #[test]
    fn from_params_rejects_mismatch() {
        let cfg = tiny(
            StackConfig::new(ShareMode::SharedLoop, 2, 2),
            StackConfig::new(ShareMode::SharedLoop, 1, 2),
        );
        let m = Model::new(cfg.clone(), 3).unwrap();
        assert_eq!(
            Model::from_params(cfg.clone(), m.params().clone()).unwrap(),
            m
        );
        let other = tiny(
            StackConfig::new(ShareMode::Stacked, 2, 2),
            StackConfig::new(ShareMode::SharedLoop, 1, 2),
        );
        assert!(matches!(
            Model::from_params(other, m.params().clone()),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn unshared_clone_tracks_aliases() {
        let cfg = tiny(
            StackConfig::new(ShareMode::ClosedChain, 3, 2),
            StackConfig::new(ShareMode::SharedLoop, 1, 2),
        );
        let m = Model::new(cfg, 5).unwrap();
        let (clone, origin) = m.unshared_clone();
        assert_eq!(clone.encoder_schedule().len(), 5);
        assert_eq!(clone.encoder_schedule().block_starts(), &[0, 2, 4]);
        assert_eq!(clone.params().len(), origin.len());
        for (t, &o) in clone.params().tensors().iter().zip(&origin) {
            assert_eq!(t, &m.params().tensors()[o]);
        }
        // virtual layer 3 of [0,1,2,1,0] aliases physical layer 1
        let name = "encoder.3.ffn.w1";
        assert_eq!(clone.params().get(name), m.params().get("encoder.1.ffn.w1"));
    }
}
