//! Corpus, vocabulary and metrics files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use loopformer_core::data::{ParallelCorpus, Vocab};
use loopformer_core::train::Metrics;

use crate::error::{CliError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Line-aligned source and target files.
pub fn load_parallel(src: &Path, tgt: &Path) -> Result<ParallelCorpus> {
    let s = read_text(src)?;
    let t = read_text(tgt)?;
    ParallelCorpus::from_texts(&s, &t).map_err(|e| CliError::Format {
        path: src.to_path_buf(),
        message: format!("{e} ({})", tgt.display()),
    })
}

/// Writes `<stem>.src` and `<stem>.tgt` in `dir` and returns both paths.
pub fn write_parallel(
    corpus: &ParallelCorpus,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let src = dir.join(format!("{stem}.src"));
    let tgt = dir.join(format!("{stem}.tgt"));
    write_text(&src, &corpus.source_text())?;
    write_text(&tgt, &corpus.target_text())?;
    Ok((src, tgt))
}

/// One token per line; the token on line `i` (from 0) has id `RESERVED + i`.
pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut text = String::new();
    for t in vocab.content_tokens() {
        text.push_str(t);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    Vocab::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty())).map_err(|e| {
        CliError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,tokens_per_step";

/// Append-only metrics CSV. Each row is flushed as it is written.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    pub fn write(&mut self, m: &Metrics) -> Result<()> {
        let row = format!(
            "{},{},{},{},{}",
            m.step, m.loss, m.lr, m.grad_norm, m.tokens
        );
        self.line(&row)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }
}

/// Parsed metrics rows (step, loss, lr, grad_norm, tokens).
pub fn read_metrics(path: &Path) -> Result<Vec<Metrics>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            message: "missing metrics header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || CliError::Format {
                path: path.to_path_buf(),
                message: format!("row {}: {l:?}", i + 1),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(Metrics {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                grad_norm: f[3].parse().map_err(|_| bad())?,
                tokens: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
