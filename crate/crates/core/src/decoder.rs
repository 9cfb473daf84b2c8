//! Autoregressive attention decoder and composition of the training objective.
//!
//! The objective is
//!
//! ```text
//! L = (1 − λ)·L_att + λ·((1 − w)·L_ctc_enc + w·L_hier)
//! L_hier = (L_tap_1 + … + L_tap_K) / K
//! ```
//!
//! In hierarchical modes `L_tap_1` is the language loss and the remaining
//! taps are transcript losses; in other tap modes every tap is averaged the
//! same way. Without taps the objective reduces to the plain hybrid loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ConditioningMode;
use crate::labels::{TokenId, BLANK};
use crate::nn::{
    sinusoidal_positions, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore,
};
use crate::numcore::{causal_mask, uniform_init, Graph, NumError, Var};

/// Start and end sentinel of decoder sequences. It shares id 0 with the CTC
/// blank, which never appears in a decoder target.
pub const SENTINEL: TokenId = BLANK;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{name} = {value} outside [0, 1]")]
    Weight { name: &'static str, value: f64 },
    #[error("attention target is empty")]
    EmptyTarget,
    #[error("loss needs at least one tap")]
    NoTaps,
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// CTC weight
    pub lambda: f64,
    /// weight of the intermediate (tap) losses within the CTC branch
    pub w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            w: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [("lambda", self.lambda), ("w", self.w)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Average of the tap losses. In hierarchical modes the first entry is the
/// language loss.
pub fn hier_loss(tap_losses: &[f64], mode: ConditioningMode) -> Result<f64, LossError> {
    let (first, rest) = tap_losses.split_first().ok_or(LossError::NoTaps)?;
    let k = tap_losses.len() as f64;
    Ok(if mode.is_hierarchical() {
        (first + rest.iter().sum::<f64>()) / k
    } else {
        tap_losses.iter().sum::<f64>() / k
    })
}

/// Full objective from its components; `l_hier = None` means no taps.
pub fn total_loss(
    l_att: f64,
    l_ctc_enc: f64,
    l_hier: Option<f64>,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let (lambda, w) = (cfg.lambda, cfg.w);
    Ok(match l_hier {
        Some(h) => (1.0 - lambda) * l_att + lambda * ((1.0 - w) * l_ctc_enc + w * h),
        None => (1.0 - lambda) * l_att + lambda * l_ctc_enc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_att: f64,
    pub l_ctc_enc: f64,
    /// first-tap language loss, hierarchical modes only
    pub l_lid: Option<f64>,
    /// remaining tap losses (all taps outside hierarchical modes)
    pub l_inter: Vec<f64>,
    pub l_hier: Option<f64>,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn compose(
        l_att: f64,
        l_ctc_enc: f64,
        tap_losses: &[f64],
        mode: ConditioningMode,
        cfg: &LossConfig,
    ) -> Result<Self, LossError> {
        let l_hier = if tap_losses.is_empty() {
            None
        } else {
            Some(hier_loss(tap_losses, mode)?)
        };
        let (l_lid, l_inter) = if mode.is_hierarchical() && !tap_losses.is_empty() {
            (Some(tap_losses[0]), tap_losses[1..].to_vec())
        } else {
            (None, tap_losses.to_vec())
        };
        Ok(Self {
            l_att,
            l_ctc_enc,
            l_lid,
            l_inter,
            l_hier,
            l_total: total_loss(l_att, l_ctc_enc, l_hier, cfg)?,
        })
    }

    pub fn tap_losses(&self) -> Vec<f64> {
        self.l_lid
            .iter()
            .copied()
            .chain(self.l_inter.iter().copied())
            .collect()
    }
}

/// Coefficient of every loss term of one utterance inside a batch objective.
///
/// For a single utterance these are `(1−λ)`, `λ(1−w)` and `λw/K`; in a
/// batch each is further divided by the number of utterances whose term is
/// defined, so unachievable CTC targets drop out of the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TermWeights {
    pub att: f64,
    pub ctc_enc: f64,
    pub taps: Vec<f64>,
}

impl TermWeights {
    pub fn single(cfg: &LossConfig, n_taps: usize) -> Self {
        Self::batch(cfg, n_taps, 1, 1, &vec![1; n_taps])
    }

    pub fn batch(
        cfg: &LossConfig,
        n_taps: usize,
        n_utts: usize,
        n_ctc: usize,
        n_tap: &[usize],
    ) -> Self {
        let (lambda, w) = (cfg.lambda, cfg.w);
        let per = |coef: f64, count: usize| if count == 0 { 0.0 } else { coef / count as f64 };
        if n_taps == 0 {
            return Self {
                att: per(1.0 - lambda, n_utts),
                ctc_enc: per(lambda, n_ctc),
                taps: Vec::new(),
            };
        }
        Self {
            att: per(1.0 - lambda, n_utts),
            ctc_enc: per(lambda * (1.0 - w), n_ctc),
            taps: n_tap
                .iter()
                .map(|&c| per(lambda * w / n_taps as f64, c))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    d_model: usize,
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    pub output: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: DecoderConfig,
        d_model: usize,
        vocab_size: usize,
    ) -> Self {
        let d = d_model;
        let embed = store.add("dec.embed", uniform_init(rng, &[vocab_size, d], d));
        let layers = (0..config.n_layers)
            .map(|i| DecoderLayer {
                norm_self: LayerNorm::new(store, &format!("dec.{i}.norm_self"), d),
                self_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("dec.{i}.self_attn"),
                    d,
                    config.n_heads,
                ),
                norm_cross: LayerNorm::new(store, &format!("dec.{i}.norm_cross"), d),
                cross_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("dec.{i}.cross_attn"),
                    d,
                    config.n_heads,
                ),
                norm_ffn: LayerNorm::new(store, &format!("dec.{i}.norm_ffn"), d),
                ffn: FeedForward::new(store, rng, &format!("dec.{i}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let final_norm = LayerNorm::new(store, "dec.final_norm", d);
        let output = Linear::new(store, rng, "dec.output", d, vocab_size);
        Self {
            config,
            d_model,
            embed,
            layers,
            final_norm,
            output,
        }
    }

    /// Next-token log probabilities (`L×V`) for every prefix of `inputs`,
    /// attending causally to `inputs` and fully to `memory`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        memory: Var,
        inputs: &[TokenId],
    ) -> Result<Var, NumError> {
        let len = inputs.len();
        let e = g.embedding(p[self.embed], inputs)?;
        let e = g.scale(e, (self.d_model as f64).sqrt());
        let pe = g.constant(sinusoidal_positions(len, self.d_model));
        let mut x = g.add(e, pe)?;
        let mask = causal_mask(len);
        for layer in &self.layers {
            let n = layer.norm_self.forward(g, p, x)?;
            let a = layer.self_attn.forward(g, p, n, n, Some(&mask))?;
            x = g.add(x, a)?;
            let n = layer.norm_cross.forward(g, p, x)?;
            let c = layer.cross_attn.forward(g, p, n, memory, None)?;
            x = g.add(x, c)?;
            let n = layer.norm_ffn.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, n)?;
            x = g.add(x, f)?;
        }
        let h = self.final_norm.forward(g, p, x)?;
        let logits = self.output.forward(g, p, h)?;
        g.log_softmax(logits)
    }

    /// Teacher-forced negative log-likelihood of `target` followed by the
    /// end sentinel, fed `[sentinel] + target`.
    pub fn attention_loss(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        memory: Var,
        target: &[TokenId],
    ) -> Result<Var, LossError> {
        if target.is_empty() {
            return Err(LossError::EmptyTarget);
        }
        let (inputs, outputs) = teacher_forcing_pair(target);
        let lp = self.forward(g, p, memory, &inputs)?;
        let v = g.shape(lp)[1];
        let idx: Vec<usize> = outputs
            .iter()
            .enumerate()
            .map(|(i, &t)| i * v + t)
            .collect();
        let ll = g.select_sum(lp, &idx)?;
        Ok(g.scale(ll, -1.0))
    }
}

/// Decoder inputs `[sentinel] + target` and outputs `target + [sentinel]`.
pub fn teacher_forcing_pair(target: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(SENTINEL);
    inputs.extend_from_slice(target);
    let mut outputs = target.to_vec();
    outputs.push(SENTINEL);
    (inputs, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_examples() {
        let cfg = LossConfig::default();
        let t = total_loss(1.0, 2.0, Some(4.0), &cfg).unwrap();
        assert!((t - 1.6).abs() < 1e-12);
        let reduced = total_loss(
            1.0,
            2.0,
            Some(4.0),
            &LossConfig {
                lambda: 0.3,
                w: 0.0,
            },
        )
        .unwrap();
        assert!((reduced - 1.3).abs() < 1e-12);
        let none = total_loss(1.0, 2.0, None, &cfg).unwrap();
        assert!((none - 1.3).abs() < 1e-12);
        assert!(matches!(
            total_loss(
                1.0,
                1.0,
                None,
                &LossConfig {
                    lambda: 1.2,
                    w: 0.5
                }
            ),
            Err(LossError::Weight { name: "lambda", .. })
        ));
        assert!(matches!(
            LossConfig {
                lambda: 0.3,
                w: -0.1
            }
            .validate(),
            Err(LossError::Weight { name: "w", .. })
        ));
    }

    #[test]
    fn hier_loss_examples() {
        let hier = ConditioningMode::HierLidUtt;
        assert_eq!(hier_loss(&[2.0], ConditioningMode::ScCtc).unwrap(), 2.0);
        assert_eq!(hier_loss(&[1.0, 3.0, 5.0], hier).unwrap(), 3.0);
        assert_eq!(hier_loss(&[5.0, 0.0, 0.0, 0.0, 0.0], hier).unwrap(), 1.0);
        assert_eq!(
            hier_loss(&[1.0, 2.0, 7.0, 4.0], hier).unwrap(),
            hier_loss(&[1.0, 7.0, 4.0, 2.0], hier).unwrap()
        );
        assert_eq!(hier_loss(&[], hier).unwrap_err(), LossError::NoTaps);
    }

    #[test]
    fn breakdown_splits_language_tap() {
        let cfg = LossConfig::default();
        let b = LossBreakdown::compose(1.0, 2.0, &[3.0, 5.0], ConditioningMode::HierLidTok, &cfg)
            .unwrap();
        assert_eq!(b.l_lid, Some(3.0));
        assert_eq!(b.l_inter, vec![5.0]);
        assert_eq!(b.l_hier, Some(4.0));
        let b =
            LossBreakdown::compose(1.0, 2.0, &[3.0, 5.0], ConditioningMode::ScCtc, &cfg).unwrap();
        assert_eq!(b.l_lid, None);
        assert_eq!(b.tap_losses(), vec![3.0, 5.0]);
    }

    #[test]
    fn term_weights_match_objective() {
        let cfg = LossConfig::default();
        let w = TermWeights::single(&cfg, 2);
        let (att, ctc, taps) = (1.5, 2.5, [3.0, 4.0]);
        let via_weights = w.att * att + w.ctc_enc * ctc + w.taps[0] * taps[0] + w.taps[1] * taps[1];
        let direct = total_loss(att, ctc, Some(3.5), &cfg).unwrap();
        assert!((via_weights - direct).abs() < 1e-12);
        let none = TermWeights::single(&cfg, 0);
        assert_eq!((none.att, none.ctc_enc), (0.7, 0.3));
        let b = TermWeights::batch(&cfg, 1, 4, 3, &[0]);
        assert_eq!(b.taps, vec![0.0]);
        assert!((b.ctc_enc - 0.15 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let (i, o) = teacher_forcing_pair(&[4, 5]);
        assert_eq!(i, vec![SENTINEL, 4, 5]);
        assert_eq!(o, vec![4, 5, SENTINEL]);
    }
}
