//! Encoder, decoder and their joint objective, plus the checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_node, is_achievable, CtcError};
use crate::decoder::{Decoder, DecoderConfig, LossError, TermWeights};
use crate::encoder::{Encoder, EncoderConfig, TapTarget, TapWiring};
use crate::labels::{LabelBundle, TokenId};
use crate::nn::{Bound, ParamStore};
use crate::numcore::{Graph, NumError, Tensor, Var};

const MAGIC: &[u8; 8] = b"LIDCTC01";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        if self.vocab_size < 2 {
            return Err(ModelError::Config(
                "vocabulary needs at least two entries".into(),
            ));
        }
        if self.decoder.n_heads == 0 || !self.encoder.d_model.is_multiple_of(self.decoder.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by {} decoder heads",
                self.encoder.d_model, self.decoder.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Values of the loss terms of one utterance; `None` marks an unachievable
/// CTC target.
#[derive(Clone, Debug, PartialEq)]
pub struct TermValues {
    pub att: f64,
    pub ctc_enc: Option<f64>,
    pub taps: Vec<Option<f64>>,
}

/// Encoder outputs of a frozen model.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Tensor,
    pub ctc_log_post: Tensor,
    pub taps: Vec<(TapTarget, Tensor)>,
}

pub fn tap_label(labels: &LabelBundle, target: TapTarget) -> &[TokenId] {
    match target {
        TapTarget::Asr => &labels.asr,
        TapTarget::LidUtt => &labels.lid_utt,
        TapTarget::LidTok => &labels.lid_tok,
    }
}

/// Which CTC terms of an utterance with `frames` frames are defined.
pub fn achievable_terms(
    config: &EncoderConfig,
    frames: usize,
    labels: &LabelBundle,
) -> (bool, Vec<bool>) {
    let taps = (0..config.active_taps().len())
        .map(|k| is_achievable(frames, tap_label(labels, config.mode.tap_target(k))))
        .collect();
    (is_achievable(frames, &labels.asr), taps)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(
            &mut params,
            &mut rng,
            config.encoder.clone(),
            config.vocab_size,
        );
        let decoder = Decoder::new(
            &mut params,
            &mut rng,
            config.decoder.clone(),
            config.encoder.d_model,
            config.vocab_size,
        );
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Weighted objective of one utterance. Terms with zero weight or an
    /// unachievable target are left out of the graph.
    pub fn utterance_objective(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        features: Var,
        labels: &LabelBundle,
        weights: &TermWeights,
    ) -> Result<(Var, TermValues), ModelError> {
        let enc = self.encoder.encode(g, p, features, TapWiring::Full)?;
        let att = self
            .decoder
            .attention_loss(g, p, enc.h_final, &labels.asr)?;
        let mut values = TermValues {
            att: g.scalar(att),
            ctc_enc: None,
            taps: Vec::with_capacity(enc.taps.len()),
        };
        let mut terms = vec![(att, weights.att)];

        if let Some(node) = ctc_loss_node(g, enc.ctc_log_post, &labels.asr)? {
            values.ctc_enc = Some(g.scalar(node));
            terms.push((node, weights.ctc_enc));
        }
        for (k, tap) in enc.taps.iter().enumerate() {
            let node = ctc_loss_node(g, tap.log_post, tap_label(labels, tap.target))?;
            values.taps.push(node.map(|n| g.scalar(n)));
            if let Some(node) = node {
                terms.push((node, weights.taps.get(k).copied().unwrap_or(0.0)));
            }
        }
        let mut total: Option<Var> = None;
        for (node, w) in terms.into_iter().filter(|&(_, w)| w != 0.0) {
            let term = g.scale(node, w);
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(0.0)),
        };
        Ok((total, values))
    }

    pub fn encode(&self, features: &Tensor) -> Result<Encoded, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant_ref(features);
        let out = self.encoder.encode(&mut g, &p, x, TapWiring::Full)?;
        Ok(Encoded {
            memory: g.tensor(out.h_final),
            ctc_log_post: g.tensor(out.ctc_log_post),
            taps: out
                .taps
                .iter()
                .map(|t| (t.target, g.tensor(t.log_post)))
                .collect(),
        })
    }

    /// Next-token log probabilities after `prefix` (without the start
    /// sentinel), given encoder memory.
    pub fn next_token_log_probs(
        &self,
        memory: &Tensor,
        prefix: &[TokenId],
    ) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let m = g.constant_ref(memory);
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(crate::decoder::SENTINEL);
        inputs.extend_from_slice(prefix);
        let lp = self.decoder.forward(&mut g, &p, m, &inputs)?;
        let v = self.config.vocab_size;
        let last = g.value(lp);
        Ok(last[last.len() - v..].to_vec())
    }

    /// Teacher-forced accuracy of the decoder on `target + [sentinel]`:
    /// (correct, total).
    pub fn teacher_forced_hits(
        &self,
        memory: &Tensor,
        target: &[TokenId],
    ) -> Result<(usize, usize), ModelError> {
        let (inputs, outputs) = crate::decoder::teacher_forcing_pair(target);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let m = g.constant_ref(memory);
        let lp = self.decoder.forward(&mut g, &p, m, &inputs)?;
        let t = g.tensor(lp);
        let hits = outputs
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(t.row(i)) == y)
            .count();
        Ok((hits, outputs.len()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(MAGIC)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig =
            serde_json::from_slice(&cfg).map_err(|e| bad(format!("config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        let count = read_u64(&mut r)? as usize;
        if count != model.params.len() {
            return Err(bad(format!(
                "{count} tensors, model has {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8".into()))?;
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let target = model.params.get_mut(id);
            if shape != target.shape() {
                return Err(bad(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    target.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in target.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(model)
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
