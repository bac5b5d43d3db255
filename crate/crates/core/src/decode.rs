//! Greedy and beam-search decoding.
//!
//! Decoders talk to a model through [`Seq2Seq`], so hand-built scorers with
//! fixed log-probabilities can stand in for a trained network. Padding and
//! bos are never emitted.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::math;
use crate::recurrent::Model;
use crate::tensor::{Tape, Tensor};

pub trait Seq2Seq {
    type Memory;

    fn vocab_size(&self) -> usize;

    /// Prepares the source (ids without eos).
    fn encode_source(&self, src: &[usize]) -> Result<Self::Memory>;

    /// Log-probabilities of the next token after `prefix` (generated tokens,
    /// without bos).
    fn next_log_probs(&self, memory: &Self::Memory, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Encoder output and padded source ids for one sentence.
pub struct ModelMemory {
    states: Tensor,
    src: Vec<usize>,
}

impl Seq2Seq for Model {
    type Memory = ModelMemory;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn encode_source(&self, src: &[usize]) -> Result<ModelMemory> {
        let mut ids = src.to_vec();
        ids.push(EOS);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = self.encode(&mut tape, &bound, &ids, 1, ids.len(), false)?;
        Ok(ModelMemory {
            states: tape.value(z).clone(),
            src: ids,
        })
    }

    fn next_log_probs(&self, memory: &ModelMemory, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tgt = Vec::with_capacity(prefix.len() + 1);
        tgt.push(BOS);
        tgt.extend_from_slice(prefix);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mem = tape.constant(memory.states.clone());
        let states = self.decode(
            &mut tape,
            &bound,
            mem,
            &memory.src,
            &tgt,
            1,
            tgt.len(),
            false,
        )?;
        let logits = self.logits(&mut tape, &bound, states)?;
        let v = self.vocab_size();
        let last = &tape.value(logits).data()[(tgt.len() - 1) * v..];
        Ok(log_softmax(last))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(logits.iter().map(|v| math::exp(v - max)).sum::<f64>());
    logits.iter().map(|v| v - lse).collect()
}

fn emittable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Argmax decoding (ties go to the lowest id). Returns the tokens before eos.
pub fn greedy_decode<M: Seq2Seq>(model: &M, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let memory = model.encode_source(src)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = model.next_log_probs(&memory, &out)?;
        let mut best = None::<(usize, f64)>;
        for (tok, &score) in lp.iter().enumerate() {
            if !emittable(tok) {
                continue;
            }
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((tok, score));
            }
        }
        let (tok, _) =
            best.ok_or_else(|| Error::Contract("vocabulary has no emittable token".into()))?;
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with eos unless the length limit was hit.
    pub tokens: Vec<usize>,
    /// Sum of per-token log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing eos.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

/// `((5 + len) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    math::powf((5.0 + len as f64) / 6.0, alpha)
}

/// Best-first ordering of finished hypotheses: higher score, then shorter,
/// then lexicographically smaller ids.
pub fn compare_finished(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

/// Beam search. Each step keeps the `beam` best expansions by cumulative
/// log-probability; expansions ending in eos (or reaching `max_len`) are
/// set aside as finished. Search stops when no live hypothesis remains or
/// `beam` hypotheses have finished. The result is the finished hypothesis
/// with the best length-normalized score.
pub fn beam_search<M: Seq2Seq>(
    model: &M,
    src: &[usize],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let memory = model.encode_source(src)?;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            let lp = model.next_log_probs(&memory, &h.tokens)?;
            if lp.len() != model.vocab_size() {
                return Err(Error::shape(
                    "beam_search",
                    &[lp.len()],
                    &[model.vocab_size()],
                ));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if emittable(tok) {
                    cands.push((h.log_prob + l, hi, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (score, hi, tok) in cands {
            let mut tokens = alive[hi].tokens.clone();
            tokens.push(tok);
            let done = tok == EOS || step + 1 == max_len;
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam {
            break;
        }
    }
    finished.sort_by(|a, b| compare_finished(a, b, alpha));
    finished.into_iter().next().ok_or_else(|| {
        Error::Contract(format!(
            "beam search produced no hypothesis for beam {beam}"
        ))
    })
}

/// Fraction of reference tokens reproduced at the right position by greedy
/// decoding. Each sentence contributes `max(len(hyp), len(ref))` positions,
/// so missing and surplus tokens both count as errors.
pub fn token_accuracy<M: Seq2Seq>(
    model: &M,
    pairs: &[(Vec<usize>, Vec<usize>)],
    max_len: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (src, tgt) in pairs {
        let out = greedy_decode(model, src, max_len)?;
        hit += out.iter().zip(tgt).filter(|(a, b)| a == b).count();
        total += out.len().max(tgt.len());
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hit as f64 / total as f64)
}
