//! The work behind each subcommand. Artifacts go under one output directory:
//! `config.resolved`, `vocab.txt`, `metrics.csv`, `ckpt-<step>`,
//! `ckpt-avg` and `translations.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use loopformer_core::bleu::{corpus_bleu, BleuScore};
use loopformer_core::data::{gen_synthetic, Batcher, ParallelCorpus, Vocab};
use loopformer_core::decode::{beam_search, greedy_decode, token_accuracy};
use loopformer_core::gradcheck::{run_suite, SuiteEntry};
use loopformer_core::recurrent::{param_count, ParamBreakdown};
use loopformer_core::rng::{self, split_seed};
use loopformer_core::train::{average_checkpoints, run_epochs, Checkpoint, Control, Trainer};
use loopformer_core::{Model, ModelConfig, StackConfig};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::files::{self, MetricsWriter};

pub const CONFIG_FILE: &str = "config.resolved";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRANSLATIONS_FILE: &str = "translations.txt";
pub const AVERAGED_CHECKPOINT: &str = "ckpt-avg";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step}")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Training corpus, optional held-out corpus and the vocabulary built from
/// the training side.
pub struct Data {
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub valid: Option<ParallelCorpus>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let (train, valid) = match cfg.synthetic_task() {
        Some(task) => {
            let seed = split_seed(cfg.train.seed, rng::DATA);
            let train = gen_synthetic(task, d.samples, d.min_len, d.max_len, d.vocab_size, seed)?;
            let valid = (d.valid_samples > 0)
                .then(|| {
                    gen_synthetic(
                        task,
                        d.valid_samples,
                        d.min_len,
                        d.max_len,
                        d.vocab_size,
                        split_seed(seed, 1),
                    )
                })
                .transpose()?;
            (train, valid)
        }
        None => {
            let train = files::load_parallel(Path::new(&d.train_src), Path::new(&d.train_tgt))?;
            let valid = if d.valid_src.is_empty() {
                None
            } else {
                Some(files::load_parallel(
                    Path::new(&d.valid_src),
                    Path::new(&d.valid_tgt),
                )?)
            };
            (train, valid)
        }
    };
    if train.is_empty() {
        return Err(loopformer_core::Error::EmptyCorpus.into());
    }
    let vocab = Vocab::build(&train, d.vocab_size)?;
    Ok(Data {
        vocab,
        train,
        valid,
    })
}

/// Writes the corpora, vocabulary and resolved config; returns the files.
pub fn make_data(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let data = load_data(cfg)?;
    let mut written = Vec::new();
    let (s, t) = files::write_parallel(&data.train, out_dir, "train")?;
    written.extend([s, t]);
    if let Some(valid) = &data.valid {
        let (s, t) = files::write_parallel(valid, out_dir, "valid")?;
        written.extend([s, t]);
    }
    let vocab = out_dir.join(VOCAB_FILE);
    files::write_vocab(&data.vocab, &vocab)?;
    written.push(vocab);
    let conf = out_dir.join(CONFIG_FILE);
    files::write_text(&conf, &cfg.to_text())?;
    written.push(conf);
    Ok(written)
}

fn encode_pairs(corpus: &ParallelCorpus, vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .pairs
        .iter()
        .map(|p| (vocab.encode(&p.source), vocab.encode(&p.target)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    /// Step checkpoints in the order written.
    pub checkpoints: Vec<PathBuf>,
    pub averaged: Option<PathBuf>,
    /// Held-out greedy token accuracy of the final model.
    pub accuracy: Option<f64>,
    pub skipped: usize,
}

/// Trains from scratch and writes every artifact under `out_dir`. With
/// `average_last = Some(k)` the last `k` step checkpoints are averaged into
/// `ckpt-avg`.
pub fn train(cfg: &RunConfig, out_dir: &Path, average_last: Option<usize>) -> Result<TrainSummary> {
    if average_last == Some(0) {
        return Err(CliError::Usage(
            "--average-last needs at least 1 checkpoint".into(),
        ));
    }
    create_dir(out_dir)?;
    let config_text = cfg.to_text();
    files::write_text(&out_dir.join(CONFIG_FILE), &config_text)?;
    let data = load_data(cfg)?;
    files::write_vocab(&data.vocab, &out_dir.join(VOCAB_FILE))?;

    let model = Model::new(cfg.model_config(), split_seed(cfg.train.seed, rng::INIT))?;
    info!(
        "model: {} parameters, encoder {:?}, decoder {:?}",
        model.num_params(),
        model.encoder_schedule().assignment(),
        model.decoder_schedule().assignment()
    );
    let mut trainer = Trainer::new(model, cfg.train_config());
    let batcher = Batcher::new(&data.train, &data.vocab, cfg.train.max_tokens);
    if batcher.skipped() > 0 {
        warn!(
            "skipped {} pairs longer than train.max_tokens",
            batcher.skipped()
        );
    }
    let valid = data.valid.as_ref().map(|v| encode_pairs(v, &data.vocab));
    let mut metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let mut checkpoints = Vec::new();
    let mut failure: Option<CliError> = None;
    let mut last_loss = f64::NAN;
    let t = &cfg.train;
    let max_len = cfg.eval.max_len;

    let outcome = run_epochs(
        &mut trainer,
        &batcher,
        split_seed(t.seed, rng::SHUFFLE),
        t.max_steps,
        |tr, m| {
            last_loss = m.loss;
            debug!(
                "step {} loss {:.6} lr {:.3e} |g| {:.4}",
                m.step, m.loss, m.lr, m.grad_norm
            );
            if m.step % 100 == 0 {
                info!("step {} loss {:.4} lr {:.3e}", m.step, m.loss, m.lr);
            }
            let step = m.step;
            let io = metrics.write(m).and_then(|_| {
                if t.checkpoint_interval > 0 && step % t.checkpoint_interval == 0 {
                    let path = out_dir.join(checkpoint_name(step));
                    checkpoint::save(&tr.checkpoint(config_text.clone()), &path)?;
                    checkpoints.push(path);
                }
                Ok(())
            });
            if let Err(e) = io {
                failure = Some(e);
                return Ok(Control::Stop);
            }
            if let (Some(v), true) = (&valid, t.eval_interval > 0 && step % t.eval_interval == 0) {
                let acc = token_accuracy(tr.model(), v, max_len)?;
                info!("step {step} held-out token accuracy {acc:.4}");
                if t.stop_accuracy > 0.0 && acc >= t.stop_accuracy {
                    info!("reached {:.4} >= {}, stopping", acc, t.stop_accuracy);
                    return Ok(Control::Stop);
                }
            }
            Ok(Control::Continue)
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    outcome?;

    let steps = trainer.step_count();
    let final_path = out_dir.join(checkpoint_name(steps));
    if checkpoints.last() != Some(&final_path) {
        checkpoint::save(&trainer.checkpoint(config_text.clone()), &final_path)?;
        checkpoints.push(final_path);
    }
    let averaged = match average_last {
        None => None,
        Some(k) => {
            let k = k.min(checkpoints.len());
            let loaded = checkpoints[checkpoints.len() - k..]
                .iter()
                .map(|p| checkpoint::load(p))
                .collect::<Result<Vec<Checkpoint>>>()?;
            let avg = average_checkpoints(&loaded)?;
            let path = out_dir.join(AVERAGED_CHECKPOINT);
            checkpoint::save(&avg, &path)?;
            info!("averaged the last {k} checkpoints into {}", path.display());
            Some(path)
        }
    };
    let accuracy = match &valid {
        Some(v) => Some(token_accuracy(trainer.model(), v, max_len)?),
        None => None,
    };
    Ok(TrainSummary {
        steps,
        final_loss: last_loss,
        checkpoints,
        averaged,
        accuracy,
        skipped: batcher.skipped(),
    })
}

/// Rebuilds the model and its run configuration from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ck = checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: format!("embedded config: {e}"),
    })?;
    let model = Model::from_params(cfg.model_config(), ck.params)?;
    Ok((model, cfg))
}

/// Decodes every line of `input`; beam 1 uses greedy search.
pub fn translate_lines(
    model: &Model,
    vocab: &Vocab,
    input: &str,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<String>> {
    input
        .lines()
        .map(|line| {
            let src = vocab.encode_line(line);
            let out = if beam == 1 {
                greedy_decode(model, &src, max_len)?
            } else {
                beam_search(model, &src, beam, alpha, max_len)?
                    .output()
                    .to_vec()
            };
            Ok(vocab.decode(&out))
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub max_len: Option<usize>,
}

/// Translates `input` into `output` with the checkpoint's model; options
/// left unset come from the checkpoint's `eval.*` settings.
pub fn translate_file(
    ckpt: &Path,
    vocab_path: &Path,
    input: &Path,
    output: &Path,
    opts: &DecodeOptions,
) -> Result<usize> {
    let (model, cfg) = load_model(ckpt)?;
    let vocab = files::read_vocab(vocab_path)?;
    if vocab.len() > cfg.data.vocab_size {
        return Err(CliError::Format {
            path: vocab_path.to_path_buf(),
            message: format!(
                "{} entries but the model has {} embedding rows",
                vocab.len(),
                cfg.data.vocab_size
            ),
        });
    }
    let beam = opts.beam.unwrap_or(cfg.eval.beam);
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let text = files::read_text(input)?;
    let lines = translate_lines(
        &model,
        &vocab,
        &text,
        beam,
        opts.alpha.unwrap_or(cfg.eval.alpha),
        opts.max_len.unwrap_or(cfg.eval.max_len),
    )?;
    let mut out = lines.join("\n");
    if !lines.is_empty() {
        out.push('\n');
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    files::write_text(output, &out)?;
    Ok(lines.len())
}

pub fn score(hyp: &Path, reference: &Path) -> Result<BleuScore> {
    let h = files::read_text(hyp)?;
    let r = files::read_text(reference)?;
    let h: Vec<&str> = h.lines().collect();
    let r: Vec<&str> = r.lines().collect();
    if h.len() != r.len() {
        return Err(CliError::Format {
            path: hyp.to_path_buf(),
            message: format!("{} lines but the reference has {}", h.len(), r.len()),
        });
    }
    Ok(corpus_bleu(&h, &r, 4)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub breakdown: ParamBreakdown,
    pub reference: ParamBreakdown,
    /// `total / reference.total`
    pub ratio: f64,
    pub text: String,
    pub csv: String,
}

fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

fn describe(s: &StackConfig) -> String {
    format!("{} N={} T={}", s.mode, s.layers, s.loops)
}

/// Parameter accounting for `cfg` against Big dimensions (1024/4096/16,
/// stacked 6/6) with the same vocabulary.
pub fn param_report(cfg: &ModelConfig) -> ParamReport {
    let b = param_count(cfg);
    let reference = param_count(&ModelConfig::big(cfg.vocab_size));
    let ratio = b.total as f64 / reference.total as f64;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "d_model={} d_ff={} heads={} vocab={}",
        cfg.d_model, cfg.d_ff, cfg.heads, cfg.vocab_size
    );
    let _ = writeln!(
        text,
        "encoder {} -> {} physical x {}",
        describe(&cfg.encoder),
        b.encoder_physical_layers,
        b.encoder_layer
    );
    let _ = writeln!(
        text,
        "decoder {} -> {} physical x {}",
        describe(&cfg.decoder),
        b.decoder_physical_layers,
        b.decoder_layer
    );
    for (name, n) in [
        ("embedding (tied)", b.embedding),
        ("encoder", b.encoder),
        ("decoder", b.decoder),
        ("final norms", b.final_norms),
    ] {
        let _ = writeln!(text, "  {name:<17}{n:>12}");
    }
    let _ = writeln!(
        text,
        "  {:<17}{:>12}  ({})",
        "total",
        b.total,
        millions(b.total)
    );
    let _ = writeln!(
        text,
        "  norms {} / biases {} (included above)",
        b.norms, b.biases
    );
    let _ = writeln!(
        text,
        "reference (Big dims, stacked 6/6): {} ({})",
        reference.total,
        millions(reference.total)
    );
    let _ = writeln!(text, "ratio vs reference: {:.2}%", 100.0 * ratio);

    let mut csv = String::from("group,params\n");
    for (name, n) in [
        ("embedding", b.embedding),
        ("encoder", b.encoder),
        ("decoder", b.decoder),
        ("final_norms", b.final_norms),
        ("norms", b.norms),
        ("biases", b.biases),
        ("total", b.total),
        ("reference_total", reference.total),
    ] {
        let _ = writeln!(csv, "{name},{n}");
    }
    let _ = writeln!(csv, "ratio,{ratio}");
    ParamReport {
        breakdown: b,
        reference,
        ratio,
        text,
        csv,
    }
}

/// Gradient suites on a tiny model with the configured sharing layout.
pub fn grad_check(cfg: &RunConfig, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut tiny = cfg.model_config();
    tiny.vocab_size = 11;
    tiny.d_model = 8;
    tiny.d_ff = 12;
    tiny.heads = 2;
    tiny.dropout = 0.0;
    Ok(run_suite(&tiny, seed)?)
}
