//! Vocabularies, parallel corpora, synthetic tasks and token-bounded batches.
//!
//! Conventions: `<s>` (bos) is prepended to the decoder input only, `</s>`
//! (eos) is appended to both the source and the decoder output.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Vocabulary from non-reserved tokens; token `i` gets id `RESERVED + i`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = BTreeMap::new();
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Joint source/target vocabulary ordered by descending frequency, ties
    /// broken lexicographically. `max_size` counts the reserved entries.
    pub fn build(corpus: &ParallelCorpus, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room after {RESERVED} reserved tokens"
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in &corpus.pairs {
            for tok in pair.source.iter().chain(&pair.target) {
                if RESERVED_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Vocab {
            id,
            size: self.len(),
        })
    }

    /// Tokens after the reserved block, in id order (the vocabulary file body).
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Whitespace-joined tokens. Padding, bos and eos are dropped; unknown ids
    /// render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(
                self.tokens
                    .get(id)
                    .map_or(RESERVED_TOKENS[UNK], String::as_str),
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Pairs line `i` of `source` with line `i` of `target`, splitting on
    /// whitespace.
    pub fn from_texts(source: &str, target: &str) -> Result<Self> {
        let src: Vec<&str> = source.lines().collect();
        let tgt: Vec<&str> = target.lines().collect();
        if src.len() != tgt.len() {
            return Err(Error::Range(format!(
                "source has {} lines but target has {}",
                src.len(),
                tgt.len()
            )));
        }
        let pairs = src
            .into_iter()
            .zip(tgt)
            .map(|(s, t)| SentencePair {
                source: s.split_whitespace().map(str::to_string).collect(),
                target: t.split_whitespace().map(str::to_string).collect(),
            })
            .collect();
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_text(&self) -> String {
        join_lines(self.pairs.iter().map(|p| &p.source))
    }

    pub fn target_text(&self) -> String {
        join_lines(self.pairs.iter().map(|p| &p.target))
    }
}

fn join_lines<'a>(rows: impl Iterator<Item = &'a Vec<String>>) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
    /// Each symbol is replaced by the one half an alphabet further on.
    Rot13Digits,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Rot13Digits => "rot13-digits",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "rot13-digits" => Ok(SyntheticTask::Rot13Digits),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy, reverse or rot13-digits)"
            ))),
        }
    }
}

/// Name of the `i`-th synthetic symbol: `a`..`z`, then `ba`, `bb`, ...
pub fn symbol_name(mut i: usize) -> String {
    let mut rev = Vec::new();
    loop {
        rev.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    rev.reverse();
    String::from_utf8(rev).expect("ascii")
}

/// Deterministic synthetic corpus over `vocab_size - RESERVED` symbols.
/// Lengths are drawn uniformly from `min_len..=max_len`.
pub fn gen_synthetic(
    task: SyntheticTask,
    n_samples: usize,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= RESERVED {
        return Err(Error::Range(format!(
            "vocabulary size {vocab_size} must exceed the {RESERVED} reserved ids"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Range(format!(
            "length range {min_len}..={max_len} is empty or starts at zero"
        )));
    }
    let symbols = vocab_size - RESERVED;
    let names: Vec<String> = (0..symbols).map(symbol_name).collect();
    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let len = min_len + rng.below(max_len - min_len + 1);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(symbols)).collect();
        let target_ids: Vec<usize> = match task {
            SyntheticTask::Copy => ids.clone(),
            SyntheticTask::Reverse => ids.iter().rev().copied().collect(),
            SyntheticTask::Rot13Digits => {
                ids.iter().map(|&i| (i + symbols / 2) % symbols).collect()
            }
        };
        pairs.push(SentencePair {
            source: ids.iter().map(|&i| names[i].clone()).collect(),
            target: target_ids.iter().map(|&i| names[i].clone()).collect(),
        });
    }
    Ok(ParallelCorpus { pairs })
}

/// Padded id matrices for one batch.
///
/// `src` is `[size, src_len]` (sentence then eos), `tgt_in` and `tgt_out` are
/// `[size, tgt_len]` (bos then sentence; sentence then eos).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
}

impl Batch {
    /// Builds a batch from unpadded `(source, target)` id sequences without
    /// specials.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len() + 1).max().unwrap_or(1);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            if s.iter().chain(t).any(|&id| id < RESERVED && id != UNK) {
                return Err(Error::Contract(
                    "sentence ids must not contain pad, bos or eos".to_string(),
                ));
            }
            let row = &mut src[b * src_len..(b + 1) * src_len];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS;
            let row = &mut tgt_in[b * tgt_len..(b + 1) * tgt_len];
            row[0] = BOS;
            row[1..=t.len()].copy_from_slice(t);
            let row = &mut tgt_out[b * tgt_len..(b + 1) * tgt_len];
            row[..t.len()].copy_from_slice(t);
            row[t.len()] = EOS;
        }
        Ok(Self {
            size,
            src_len,
            tgt_len,
            src,
            tgt_in,
            tgt_out,
        })
    }

    pub fn src_pad(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t == PAD).collect()
    }

    pub fn tgt_pad(&self) -> Vec<bool> {
        self.tgt_in.iter().map(|&t| t == PAD).collect()
    }

    pub fn encoder_mask(&self) -> AttentionMask {
        AttentionMask::key_padding(&self.src_pad(), self.size, self.src_len, self.src_len)
    }

    pub fn cross_mask(&self) -> AttentionMask {
        AttentionMask::key_padding(&self.src_pad(), self.size, self.tgt_len, self.src_len)
    }

    pub fn decoder_mask(&self) -> AttentionMask {
        AttentionMask::causal(&self.tgt_pad(), self.size, self.tgt_len)
    }

    /// Supervised (non-pad) target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }

    /// Padded footprint used for the token budget.
    pub fn padded_tokens(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batching {
    pub batches: Vec<Batch>,
    /// Pairs dropped because they alone exceed the token budget.
    pub skipped: usize,
}

/// Encodes a corpus once and cuts it into token-bounded batches per epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    max_tokens: usize,
    skipped: usize,
}

impl Batcher {
    pub fn new(corpus: &ParallelCorpus, vocab: &Vocab, max_tokens: usize) -> Self {
        let mut pairs = Vec::with_capacity(corpus.len());
        let mut skipped = 0;
        for p in &corpus.pairs {
            let s = vocab.encode(&p.source);
            let t = vocab.encode(&p.target);
            if footprint(&s, &t) > max_tokens {
                skipped += 1;
                continue;
            }
            pairs.push((s, t));
        }
        Self {
            pairs,
            max_tokens,
            skipped,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn pairs(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.pairs
    }

    /// Length-bucketed batches for one epoch. Order within a length bucket and
    /// the order of batches are shuffled from `(seed, epoch)`.
    pub fn epoch(&self, seed: u64, epoch: u64) -> Vec<Batch> {
        let mut rng = Rng::with_stream(seed, epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        rng.shuffle(&mut order);
        // stable sort keeps the shuffled order inside each length bucket
        order.sort_by_key(|&i| footprint(&self.pairs[i].0, &self.pairs[i].1));

        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut widest = 0;
        for i in order {
            let f = footprint(&self.pairs[i].0, &self.pairs[i].1);
            let w = widest.max(f);
            if !current.is_empty() && (current.len() + 1) * w > self.max_tokens {
                groups.push(core::mem::take(&mut current));
                widest = 0;
            }
            widest = widest.max(f);
            current.push(i);
        }
        if !current.is_empty() {
            groups.push(current);
        }
        rng.shuffle(&mut groups);
        groups
            .into_iter()
            .map(|g| {
                let members: Vec<(Vec<usize>, Vec<usize>)> =
                    g.into_iter().map(|i| self.pairs[i].clone()).collect();
                Batch::from_pairs(&members).expect("non-empty group of valid pairs")
            })
            .collect()
    }
}

fn footprint(src: &[usize], tgt: &[usize]) -> usize {
    src.len().max(tgt.len()) + 1
}

/// First-epoch batches of `corpus`.
pub fn batches(corpus: &ParallelCorpus, vocab: &Vocab, max_tokens: usize, seed: u64) -> Batching {
    let batcher = Batcher::new(corpus, vocab, max_tokens);
    Batching {
        batches: batcher.epoch(seed, 0),
        skipped: batcher.skipped(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn synthetic_tasks() {
        let c = gen_synthetic(SyntheticTask::Copy, 20, 3, 8, 16, 1).unwrap();
        assert!(c.pairs.iter().all(|p| p.source == p.target));
        assert!(c.pairs.iter().all(|p| (3..=8).contains(&p.source.len())));
        let r = gen_synthetic(SyntheticTask::Reverse, 20, 3, 8, 16, 1).unwrap();
        for p in &r.pairs {
            let mut s = p.source.clone();
            s.reverse();
            assert_eq!(s, p.target);
        }
        // same seed, same draws: the reverse corpus has the copy corpus' sources
        assert_eq!(
            c.pairs.iter().map(|p| &p.source).collect::<Vec<_>>(),
            r.pairs.iter().map(|p| &p.source).collect::<Vec<_>>()
        );
        let rot = gen_synthetic(SyntheticTask::Rot13Digits, 5, 2, 4, 30, 9).unwrap();
        for p in &rot.pairs {
            for (s, t) in p.source.iter().zip(&p.target) {
                let si = (s.as_bytes()[0] - b'a') as usize;
                let ti = (t.as_bytes()[0] - b'a') as usize;
                assert_eq!(ti, (si + 13) % 26);
            }
        }
        assert_eq!(
            gen_synthetic(SyntheticTask::Copy, 3, 1, 4, 9, 7),
            gen_synthetic(SyntheticTask::Copy, 3, 1, 4, 9, 7)
        );
        assert!(gen_synthetic(SyntheticTask::Copy, 3, 5, 4, 9, 7).is_err());
        assert!(gen_synthetic(SyntheticTask::Copy, 3, 1, 4, 4, 7).is_err());
    }

    #[test]
    fn explicit_copy_and_reverse_examples() {
        let src = words("a b c");
        let mut rev = src.clone();
        rev.reverse();
        assert_eq!(rev, words("c b a"));
        assert_eq!(
            "reverse".parse::<SyntheticTask>().unwrap(),
            SyntheticTask::Reverse
        );
        assert!("rot26".parse::<SyntheticTask>().is_err());
    }

    #[test]
    fn symbol_names() {
        assert_eq!(symbol_name(0), "a");
        assert_eq!(symbol_name(25), "z");
        assert_eq!(symbol_name(26), "ba");
    }

    #[test]
    fn parallel_text_ingestion() {
        let c = ParallelCorpus::from_texts("a b\nc\n", "x\ny z\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.pairs[1].target, words("y z"));
        let err = ParallelCorpus::from_texts("a\nb\n", "x\n").unwrap_err();
        assert_eq!(
            err,
            Error::Range("source has 2 lines but target has 1".into())
        );
    }

    #[test]
    fn vocab_ordering_and_round_trip() {
        let c = ParallelCorpus::from_texts("b a c\nb a\n", "b\nd\n").unwrap();
        let v = Vocab::build(&c, 100).unwrap();
        assert_eq!(v.content_tokens(), &words("b a c d")[..]);
        assert_eq!(v.id("b"), RESERVED);
        let ids = v.encode(&words("c a b"));
        assert_eq!(v.decode(&ids), "c a b");
        assert_eq!(v.encode_line("c zz"), vec![RESERVED + 2, UNK]);
        assert_eq!(v.decode(&[RESERVED + 2, UNK, EOS, PAD]), "c <unk>");
        let small = Vocab::build(&c, RESERVED + 2).unwrap();
        assert_eq!(small.len(), RESERVED + 2);
        assert!(Vocab::from_tokens(["a", "a"]).is_err());
        assert!(Vocab::from_tokens(["<pad>"]).is_err());
    }

    #[test]
    fn padding_mask_marks_exactly_the_padding() {
        let b = Batch::from_pairs(&[
            (vec![4, 5, 6], vec![4, 5, 6]),
            (vec![4, 5, 6, 7, 8], vec![8, 7, 6, 5, 4]),
        ])
        .unwrap();
        assert_eq!((b.size, b.src_len, b.tgt_len), (2, 6, 6));
        assert_eq!(b.src, vec![4, 5, 6, 2, 0, 0, 4, 5, 6, 7, 8, 2]);
        assert_eq!(b.tgt_in, vec![1, 4, 5, 6, 0, 0, 1, 8, 7, 6, 5, 4]);
        assert_eq!(b.tgt_out, vec![4, 5, 6, 2, 0, 0, 8, 7, 6, 5, 4, 2]);
        let pad = b.src_pad();
        let want: Vec<bool> = [0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0]
            .iter()
            .map(|&x| x == 1)
            .collect();
        assert_eq!(pad, want);
        assert_eq!(b.target_tokens(), 10);
    }

    #[test]
    fn token_budget_and_single_batch() {
        let c = gen_synthetic(SyntheticTask::Copy, 300, 3, 8, 16, 4).unwrap();
        let v = Vocab::build(&c, 16).unwrap();
        let all = batches(&c, &v, 1 << 30, 1);
        assert_eq!(all.batches.len(), 1);
        assert_eq!(all.batches[0].size, 300);
        let bounded = batches(&c, &v, 64, 1);
        assert!(bounded.batches.iter().all(|b| b.padded_tokens() <= 64));
        assert_eq!(bounded.batches.iter().map(|b| b.size).sum::<usize>(), 300);
        assert_eq!(bounded, batches(&c, &v, 64, 1));
        let tight = batches(&c, &v, 6, 1);
        assert!(tight.skipped > 0);
        assert_eq!(
            tight.skipped + tight.batches.iter().map(|b| b.size).sum::<usize>(),
            300
        );
    }
}
