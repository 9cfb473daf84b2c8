//! Training loop, run directories and the experiment matrix.

pub mod checks;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, noam_lr, Adam, AdamConfig};

use crate::corpus::{
    derive_seed, gen_corpus, gen_language_set, read_dataset, read_language_set, write_dataset,
    write_language_set, CorpusConfig, CorpusError, LanguageSetConfig, LanguageSpec, Split,
    Utterance,
};
use crate::ctc::ctc_greedy_decode;
use crate::decoder::{DecoderConfig, LossBreakdown, LossConfig, LossError, TermWeights};
use crate::encoder::{ConditioningMode, EncoderConfig};
use crate::eval::{
    average_models, char_errors, decode_all, BeamConfig, ErrorCounts, EvalError, EvalReport,
    UtteranceResult,
};
use crate::labels::{detokenize, make_labels, LabelBundle, LabelError, Unit, Vocab};
use crate::model::{achievable_terms, Model, ModelConfig, ModelError};
use crate::numcore::{Graph, Tensor};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LANGUAGES_FILE: &str = "languages.json";
pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const AVERAGED_CHECKPOINT: &str = "averaged.ckpt";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval.txt";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const MATRIX_FILE: &str = "matrix.csv";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss {value} at batch {batch} (epoch {epoch})")]
    NonFinite {
        batch: u64,
        epoch: usize,
        value: f64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub adam: AdamConfig,
    /// global gradient-norm bound
    pub grad_clip: f64,
    /// checkpoints kept (by dev token accuracy) and averaged
    pub keep_best: usize,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub unit: Unit,
    pub beam: BeamConfig,
    /// directory holding the corpus and language files
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// decoding workers for evaluation
    pub threads: usize,
    /// decode the test split after training
    pub evaluate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 12,
            batch_size: 8,
            warmup_steps: 300,
            peak_lr: 2e-3,
            adam: AdamConfig::default(),
            grad_clip: 5.0,
            keep_best: 3,
            loss: LossConfig::default(),
            encoder: EncoderConfig {
                d_model: 32,
                ffn_dim: 64,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                ffn_dim: 64,
                ..DecoderConfig::default()
            },
            unit: Unit::Char,
            beam: BeamConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            threads: 1,
            evaluate: true,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epochs == 0 || self.batch_size == 0 || self.keep_best == 0 {
            return Err(HarnessError::Config(
                "epochs, batch_size and keep_best must be positive".into(),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(HarnessError::Config(format!(
                "peak_lr {} must be positive",
                self.peak_lr
            )));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(HarnessError::Config("grad_clip must be positive".into()));
        }
        self.loss.validate()?;
        self.encoder.validate().map_err(HarnessError::Config)?;
        Ok(())
    }
}

/// Settings of `gen-corpus`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub languages: LanguageSetConfig,
    pub corpus: CorpusConfig,
}

impl DataConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.languages.seed = seed;
        self.corpus.seed = seed;
        self
    }
}

/// Generates languages and utterances and writes both into `dir`.
pub fn generate_data(cfg: &DataConfig, dir: &Path) -> Result<Dataset, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let languages = gen_language_set(&cfg.languages)?;
    let utterances = gen_corpus(&languages, &cfg.corpus)?;
    write_language_set(&dir.join(LANGUAGES_FILE), &languages)?;
    write_dataset(&dir.join(CORPUS_FILE), &utterances)?;
    Ok(Dataset {
        languages,
        utterances,
    })
}

/// Per-split view of a corpus directory.
pub struct Dataset {
    pub languages: Vec<LanguageSpec>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            languages: read_language_set(&dir.join(LANGUAGES_FILE))?,
            utterances: read_dataset(&dir.join(CORPUS_FILE))?,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    /// teacher-forced decoder token accuracy
    pub token_accuracy: f64,
    /// greedy CTC character error rate
    pub cer: f64,
    /// leading language token of the greedy CTC output
    pub lid_accuracy: f64,
}

pub fn dev_metrics(
    model: &Model,
    vocab: &Vocab,
    utts: &[(&Utterance, LabelBundle)],
) -> Result<DevMetrics, HarnessError> {
    let (mut hits, mut total, mut lid_hits) = (0, 0, 0);
    let mut chars = ErrorCounts::default();
    for (u, labels) in utts {
        let enc = model.encode(&u.features)?;
        let (h, n) = model.teacher_forced_hits(&enc.memory, &labels.asr)?;
        hits += h;
        total += n;
        let (lid, text) = detokenize(&ctc_greedy_decode(&enc.ctc_log_post), vocab);
        chars += char_errors(&u.text, &text);
        lid_hits += usize::from(lid.as_deref() == Some(u.lid.as_str()));
    }
    let n = utts.len().max(1) as f64;
    Ok(DevMetrics {
        token_accuracy: hits as f64 / total.max(1) as f64,
        cer: chars.rate(),
        lid_accuracy: lid_hits as f64 / n,
    })
}

struct BatchResult {
    grads: Vec<Tensor>,
    breakdown: LossBreakdown,
    skipped: usize,
}

fn run_batch(
    model: &Model,
    cfg: &LossConfig,
    batch: &[(&Utterance, LabelBundle)],
) -> Result<BatchResult, HarnessError> {
    let enc_cfg = &model.config.encoder;
    let k = enc_cfg.active_taps().len();
    let mut n_ctc = 0;
    let mut n_tap = vec![0; k];
    for (u, labels) in batch {
        let (enc_ok, taps_ok) = achievable_terms(enc_cfg, u.frames(), labels);
        n_ctc += usize::from(enc_ok);
        for (c, ok) in n_tap.iter_mut().zip(taps_ok) {
            *c += usize::from(ok);
        }
    }
    let skipped = (batch.len() - n_ctc) + n_tap.iter().map(|&c| batch.len() - c).sum::<usize>();
    let weights = TermWeights::batch(cfg, k, batch.len(), n_ctc, &n_tap);

    let mut grads: Vec<Tensor> = model
        .params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let (mut att, mut ctc) = (0.0, 0.0);
    let mut taps = vec![0.0; k];
    for (u, labels) in batch {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant_ref(&u.features);
        let (loss, values) = model.utterance_objective(&mut g, &p, x, labels, &weights)?;
        g.backward(loss).map_err(ModelError::from)?;
        for (acc, gr) in grads.iter_mut().zip(model.params.grads(&g, &p)) {
            acc.data_mut()
                .iter_mut()
                .zip(gr.data())
                .for_each(|(a, b)| *a += b);
        }
        att += values.att;
        ctc += values.ctc_enc.unwrap_or(0.0);
        for (s, v) in taps.iter_mut().zip(&values.taps) {
            *s += v.unwrap_or(0.0);
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let tap_means: Vec<f64> = taps.iter().zip(&n_tap).map(|(&s, &n)| mean(s, n)).collect();
    let breakdown = LossBreakdown::compose(
        mean(att, batch.len()),
        mean(ctc, n_ctc),
        &tap_means,
        enc_cfg.mode,
        cfg,
    )?;
    Ok(BatchResult {
        grads,
        breakdown,
        skipped,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best_checkpoints: Vec<PathBuf>,
    pub first_loss: f64,
    pub last_epoch_loss: f64,
    pub first_epoch_loss: f64,
    pub skipped_ctc_terms: usize,
    pub report: Option<EvalReport>,
}

fn loss_header(mode: ConditioningMode, k: usize) -> String {
    let mut h = String::from("step,epoch,lr,l_att,l_ctc_enc,l_lid");
    let n_inter = if mode.is_hierarchical() {
        k.saturating_sub(1)
    } else {
        k
    };
    for i in 1..=n_inter {
        let _ = write!(h, ",l_inter_{i}");
    }
    h.push_str(",l_total\n");
    h
}

fn loss_row(step: u64, epoch: usize, lr: f64, b: &LossBreakdown) -> String {
    let mut r = format!("{step},{epoch},{lr:e},{},{},", b.l_att, b.l_ctc_enc);
    if let Some(l) = b.l_lid {
        let _ = write!(r, "{l}");
    }
    for l in &b.l_inter {
        let _ = write!(r, ",{l}");
    }
    let _ = writeln!(r, ",{}", b.l_total);
    r
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data_dir)?;
    train_on(cfg, &data)
}

/// Trains on an already loaded dataset; `cfg.data_dir` is only recorded.
pub fn train_on<'d>(cfg: &TrainConfig, data: &'d Dataset) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let run = cfg.out_dir.clone();
    fs::create_dir_all(&run).map_err(io_err(&run))?;

    let train_utts = data.split(Split::Train);
    let dev_utts = data.split(Split::Dev);
    if train_utts.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    let vocab = Vocab::build(
        train_utts.iter().map(|u| (u.text.as_str(), u.lid.as_str())),
        cfg.unit,
    )?;
    vocab.save(&run.join(VOCAB_FILE))?;

    let mut resolved = cfg.clone();
    resolved.encoder.input_dim = train_utts[0].features.cols();
    write_file(&run.join(CONFIG_FILE), resolved.to_json())?;
    let model_cfg = ModelConfig {
        encoder: resolved.encoder.clone(),
        decoder: resolved.decoder.clone(),
        vocab_size: vocab.len(),
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    log::info!(
        "mode {} with {} parameters, {} training utterances",
        cfg.encoder.mode,
        model.num_parameters(),
        train_utts.len()
    );

    let label = |utts: &[&'d Utterance]| -> Result<Vec<(&'d Utterance, LabelBundle)>, LabelError> {
        utts.iter()
            .map(|&u| Ok((u, make_labels(&u.text, &u.lid, &vocab)?)))
            .collect()
    };
    let train_set = label(&train_utts)?;
    let dev_set = label(&dev_utts)?;

    let k = model.config.encoder.active_taps().len();
    let mut loss_csv = loss_header(cfg.encoder.mode, k);
    let mut epochs_csv =
        String::from("epoch,train_loss,dev_token_accuracy,dev_cer,dev_lid_accuracy\n");
    let mut adam = Adam::new(cfg.adam, model.params.iter().map(|(_, t)| t));
    let mut best: Vec<(f64, usize, PathBuf)> = Vec::new();
    let mut step = 0u64;
    let mut skipped = 0;
    let (mut first_loss, mut first_epoch_loss, mut last_epoch_loss) =
        (f64::NAN, f64::NAN, f64::NAN);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<(&Utterance, LabelBundle)> =
                idx.iter().map(|&i| train_set[i].clone()).collect();
            let mut res = run_batch(&model, &cfg.loss, &batch)?;
            let total = res.breakdown.l_total;
            if !total.is_finite() || res.grads.iter().any(|g| !g.is_finite()) {
                return Err(HarnessError::NonFinite {
                    batch: step,
                    epoch,
                    value: total,
                });
            }
            skipped += res.skipped;
            clip_grad_norm(&mut res.grads, cfg.grad_clip);
            let lr = noam_lr(step, cfg.warmup_steps, cfg.peak_lr);
            adam.update(model.params.tensors_mut(), &res.grads, lr);
            loss_csv.push_str(&loss_row(step, epoch, lr, &res.breakdown));
            if step == 1 {
                first_loss = total;
            }
            epoch_loss += total;
            batches += 1;
        }
        epoch_loss /= batches as f64;
        if epoch == 1 {
            first_epoch_loss = epoch_loss;
        }
        last_epoch_loss = epoch_loss;

        let dev = dev_metrics(&model, &vocab, &dev_set)?;
        let _ = writeln!(
            epochs_csv,
            "{epoch},{epoch_loss},{},{},{}",
            dev.token_accuracy, dev.cer, dev.lid_accuracy
        );
        log::info!(
            "epoch {epoch}: loss {epoch_loss:.4}, dev acc {:.4}, dev cer {:.4}, dev lid {:.4} ({:.1}s)",
            dev.token_accuracy,
            dev.cer,
            dev.lid_accuracy,
            started.elapsed().as_secs_f64()
        );

        let path = run.join(format!("epoch_{epoch:03}.ckpt"));
        model.save(&path)?;
        best.push((dev.token_accuracy, epoch, path));
        // higher accuracy first, later epoch on ties
        best.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        for (_, _, evicted) in best.drain(cfg.keep_best.min(best.len())..) {
            fs::remove_file(&evicted).map_err(io_err(&evicted))?;
        }
    }
    write_file(&run.join(LOSS_FILE), &loss_csv)?;
    write_file(&run.join(EPOCHS_FILE), &epochs_csv)?;

    let best_paths: Vec<PathBuf> = best.into_iter().map(|(_, _, p)| p).collect();
    let models = best_paths
        .iter()
        .map(|p| Model::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let averaged = average_models(&models)?;
    averaged.save(&run.join(AVERAGED_CHECKPOINT))?;

    let report = if cfg.evaluate {
        let test = data.split(Split::Test);
        let (report, _) = evaluate_model(
            &averaged,
            &vocab,
            &test,
            &data.languages,
            &cfg.beam,
            cfg.threads,
        )?;
        write_report(&run, &report)?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome {
        run_dir: run,
        best_checkpoints: best_paths,
        first_loss,
        first_epoch_loss,
        last_epoch_loss,
        skipped_ctc_terms: skipped,
        report,
    })
}

pub fn evaluate_model(
    model: &Model,
    vocab: &Vocab,
    utts: &[&Utterance],
    languages: &[LanguageSpec],
    beam: &BeamConfig,
    threads: usize,
) -> Result<(EvalReport, Vec<UtteranceResult>), HarnessError> {
    let results = decode_all(model, vocab, utts, beam, threads)?;
    let report = EvalReport::build(&results, languages, model.config.encoder.mode.has_taps())?;
    Ok((report, results))
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), HarnessError> {
    write_file(&dir.join(EVAL_JSON), report.to_json())?;
    write_file(&dir.join(EVAL_TABLE), report.to_table())?;
    write_file(&dir.join(CONFUSION_FILE), report.confusion.to_csv())
}

/// Everything needed to decode with a finished run directory.
pub struct Run {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model,
}

impl Run {
    pub fn open(dir: &Path) -> Result<Self, HarnessError> {
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE), config.unit)?;
        let model = Model::load(&dir.join(AVERAGED_CHECKPOINT))?;
        if model.config.vocab_size != vocab.len() {
            return Err(HarnessError::Config(format!(
                "checkpoint expects {} tokens, vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            config,
            vocab,
            model,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub mode: ConditioningMode,
    pub cer: Option<f64>,
    pub mer: Option<f64>,
    pub lid_accuracy: Option<f64>,
    pub inter_lid_accuracy: Option<f64>,
    /// intermediate-head accuracy on languages without a confusable partner
    pub inter_lid_distinct: Option<f64>,
    pub error: Option<String>,
}

pub fn matrix_csv(rows: &[MatrixRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out =
        String::from("mode,cer,mer,lid_accuracy,inter_lid_accuracy,inter_lid_distinct,status\n");
    for r in rows {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.mode,
            f(r.cer),
            f(r.mer),
            f(r.lid_accuracy),
            f(r.inter_lid_accuracy),
            f(r.inter_lid_distinct),
            status
        );
    }
    out
}

/// Trains and evaluates every mode on the same corpus and seed, each in
/// `out_dir/<mode>`, and writes `out_dir/matrix.csv`. A failing run is
/// recorded in its row and the remaining modes still run.
pub fn run_experiment_matrix(
    base: &TrainConfig,
    modes: &[ConditioningMode],
) -> Result<Vec<MatrixRow>, HarnessError> {
    let data = Dataset::load(&base.data_dir)?;
    run_experiment_matrix_on(base, modes, &data)
}

pub fn run_experiment_matrix_on(
    base: &TrainConfig,
    modes: &[ConditioningMode],
    data: &Dataset,
) -> Result<Vec<MatrixRow>, HarnessError> {
    fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.encoder.mode = mode;
        cfg.evaluate = true;
        cfg.out_dir = base.out_dir.join(mode.name());
        let started = Instant::now();
        let row = match train_on(&cfg, data) {
            Ok(TrainOutcome {
                report: Some(r), ..
            }) => MatrixRow {
                mode,
                cer: Some(r.cer),
                mer: Some(r.mer),
                lid_accuracy: Some(r.lid_accuracy),
                inter_lid_accuracy: r.inter_lid_accuracy,
                inter_lid_distinct: r.inter_lid_accuracy_distinct(),
                error: None,
            },
            Ok(_) => unreachable!("evaluation is forced on"),
            Err(e) => {
                log::warn!("mode {mode} failed: {e}");
                MatrixRow {
                    mode,
                    cer: None,
                    mer: None,
                    lid_accuracy: None,
                    inter_lid_accuracy: None,
                    inter_lid_distinct: None,
                    error: Some(e.to_string()),
                }
            }
        };
        log::info!(
            "mode {mode} finished in {:.1}s",
            started.elapsed().as_secs_f64()
        );
        rows.push(row);
    }
    write_file(&base.out_dir.join(MATRIX_FILE), matrix_csv(&rows))?;
    Ok(rows)
}
