//! Corpus-level BLEU over whitespace tokens, single reference, no smoothing.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// 0..=100
    pub bleu: f64,
    /// Clipped n-gram precisions, n = 1..=max_n, as fractions.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// hypothesis length / reference length
    pub ratio: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BLEU = {:.2} (", self.bleu)?;
        for (i, p) in self.precisions.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{:.1}", 100.0 * p)?;
        }
        write!(
            f,
            ", BP={:.3}, ratio={:.3})",
            self.brevity_penalty, self.ratio
        )
    }
}

/// Corpus BLEU of tokenized hypotheses against one reference each.
pub fn corpus_bleu_tokens(
    hyps: &[Vec<&str>],
    refs: &[Vec<&str>],
    max_n: usize,
) -> Result<BleuScore> {
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape("corpus_bleu", &[hyps.len()], &[refs.len()]));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = count(h, n);
            let rc = count(rf, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let ratio = if r == 0 { 0.0 } else { c as f64 / r as f64 };
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        math::exp(1.0 - r as f64 / c as f64)
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean = precisions.iter().map(|&p| math::ln(p)).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * math::exp(mean)
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        ratio,
        hyp_len: c,
        ref_len: r,
    })
}

/// Corpus BLEU over whitespace-separated lines.
pub fn corpus_bleu<S: AsRef<str>, T: AsRef<str>>(
    hyps: &[S],
    refs: &[T],
    max_n: usize,
) -> Result<BleuScore> {
    let h: Vec<Vec<&str>> = hyps
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    let r: Vec<Vec<&str>> = refs
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect())
        .collect();
    corpus_bleu_tokens(&h, &r, max_n)
}

fn count<'a>(tokens: &'a [&'a str], n: usize) -> BTreeMap<&'a [&'a str], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}
