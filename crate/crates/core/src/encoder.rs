//! Transformer encoder with intermediate CTC taps.
//!
//! After each tap layer the hidden state is normalised, projected to tap
//! posteriors, and (in every mode except `None`) the next layer receives
//! `Nrm(h) + Lin(P)`, where `P` is the tap's posterior distribution. What
//! the tap is trained to predict depends on the [`ConditioningMode`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    sinusoidal_positions, Bound, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore,
};
use crate::numcore::{Graph, NumError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// plain hybrid CTC/attention, no taps
    None,
    /// every tap predicts the transcript
    ScCtc,
    /// every tap predicts the single language token
    LidUtt,
    /// every tap predicts one language token per output token
    LidTok,
    /// first tap predicts the language token, later taps the transcript
    HierLidUtt,
    /// first tap predicts per-token languages, later taps the transcript
    HierLidTok,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 6] = [
        ConditioningMode::None,
        ConditioningMode::ScCtc,
        ConditioningMode::LidUtt,
        ConditioningMode::LidTok,
        ConditioningMode::HierLidUtt,
        ConditioningMode::HierLidTok,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::ScCtc => "sc_ctc",
            ConditioningMode::LidUtt => "lid_utt",
            ConditioningMode::LidTok => "lid_tok",
            ConditioningMode::HierLidUtt => "hier_lid_utt",
            ConditioningMode::HierLidTok => "hier_lid_tok",
        }
    }

    pub fn has_taps(self) -> bool {
        self != ConditioningMode::None
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(
            self,
            ConditioningMode::HierLidUtt | ConditioningMode::HierLidTok
        )
    }

    /// Target of the `k`-th tap (0-based).
    pub fn tap_target(self, k: usize) -> TapTarget {
        match (self, k) {
            (ConditioningMode::LidUtt, _) | (ConditioningMode::HierLidUtt, 0) => TapTarget::LidUtt,
            (ConditioningMode::LidTok, _) | (ConditioningMode::HierLidTok, 0) => TapTarget::LidTok,
            _ => TapTarget::Asr,
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditioningMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown conditioning mode {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapTarget {
    Asr,
    LidUtt,
    LidTok,
}

impl TapTarget {
    pub fn is_lid(self) -> bool {
        self != TapTarget::Asr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// 1-based layer indices after which a tap sits
    pub tap_layers: Vec<usize>,
    pub mode: ConditioningMode,
    pub share_heads: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            tap_layers: vec![2, 4],
            mode: ConditioningMode::HierLidUtt,
            share_heads: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_layers == 0 || self.d_model == 0 || self.input_dim == 0 || self.ffn_dim == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !self.tap_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err("tap layers must be strictly increasing".into());
        }
        if let Some(&bad) = self
            .tap_layers
            .iter()
            .find(|&&l| l == 0 || l >= self.n_layers)
        {
            return Err(format!(
                "tap layer {bad} outside 1..={}",
                self.n_layers.saturating_sub(1)
            ));
        }
        if self.mode.has_taps() && self.tap_layers.is_empty() {
            return Err(format!("mode {} needs at least one tap layer", self.mode));
        }
        Ok(())
    }

    /// Taps that are actually computed under the configured mode.
    pub fn active_taps(&self) -> &[usize] {
        if self.mode.has_taps() {
            &self.tap_layers
        } else {
            &[]
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Result<Var, NumError> {
        let n = self.norm_attn.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n, n, None)?;
        let x = g.add(x, a)?;
        let n = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(x, f)
    }
}

/// Per-tap parameters: a fresh normalisation and the conditioning projection.
#[derive(Clone, Debug)]
pub struct Tap {
    pub layer: usize,
    pub norm: LayerNorm,
    pub condition: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    input: Linear,
    layers: Vec<EncoderLayer>,
    pub taps: Vec<Tap>,
    pub tap_heads: Vec<Linear>,
    final_norm: LayerNorm,
    pub ctc_head: Linear,
}

/// How tap layers feed the next layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapWiring {
    /// tap heads, tap losses and `Nrm(h) + Lin(P)` conditioning
    Full,
    /// only `Nrm(h)`, no heads: the reference a zero projection must reproduce
    NormalizeOnly,
}

#[derive(Clone, Debug)]
pub struct TapOutput {
    pub layer: usize,
    pub target: TapTarget,
    /// `T×V` log posteriors
    pub log_post: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `T×d_model`
    pub h_final: Var,
    /// final CTC head, `T×V` log posteriors
    pub ctc_log_post: Var,
    pub taps: Vec<TapOutput>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: EncoderConfig,
        vocab_size: usize,
    ) -> Self {
        let d = config.d_model;
        let input = Linear::new(store, rng, "enc.input", config.input_dim, d);
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer {
                norm_attn: LayerNorm::new(store, &format!("enc.{i}.norm_attn"), d),
                attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("enc.{i}.attn"),
                    d,
                    config.n_heads,
                ),
                norm_ffn: LayerNorm::new(store, &format!("enc.{i}.norm_ffn"), d),
                ffn: FeedForward::new(store, rng, &format!("enc.{i}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let taps: Vec<Tap> = config
            .active_taps()
            .iter()
            .enumerate()
            .map(|(k, &layer)| Tap {
                layer,
                norm: LayerNorm::new(store, &format!("enc.tap{k}.norm"), d),
                condition: Linear::new(store, rng, &format!("enc.tap{k}.condition"), vocab_size, d),
            })
            .collect();
        let n_heads = match (taps.len(), config.share_heads) {
            (0, _) => 0,
            (_, true) => 1,
            (n, false) => n,
        };
        let tap_heads = (0..n_heads)
            .map(|k| Linear::new(store, rng, &format!("enc.tap{k}.head"), d, vocab_size))
            .collect();
        let final_norm = LayerNorm::new(store, "enc.final_norm", d);
        let ctc_head = Linear::new(store, rng, "enc.ctc_head", d, vocab_size);
        Self {
            config,
            input,
            layers,
            taps,
            tap_heads,
            final_norm,
            ctc_head,
        }
    }

    /// Log posteriors of tap `k`, computed from its normalised hidden state.
    pub fn tap_head(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        k: usize,
        h: Var,
    ) -> Result<Var, NumError> {
        let head = if self.config.share_heads { 0 } else { k };
        let logits = self.tap_heads[head].forward(g, p, h)?;
        g.log_softmax(logits)
    }

    /// `Nrm_k(h_tap) + Lin_k(exp(z_tap))`.
    pub fn condition_combine(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        k: usize,
        h_tap: Var,
        z_tap: Var,
    ) -> Result<Var, NumError> {
        let n = self.taps[k].norm.forward(g, p, h_tap)?;
        self.combine_normalized(g, p, k, n, z_tap)
    }

    fn combine_normalized(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        k: usize,
        n: Var,
        z_tap: Var,
    ) -> Result<Var, NumError> {
        let probs = g.exp(z_tap);
        let proj = self.taps[k].condition.forward(g, p, probs)?;
        g.add(n, proj)
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        features: Var,
        wiring: TapWiring,
    ) -> Result<EncoderOutput, NumError> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(NumError::Contract(
                "encoder input must have at least one frame".into(),
            ));
        }
        if shape[1] != self.config.input_dim {
            return Err(NumError::Shape {
                op: "encoder input",
                lhs: shape,
                rhs: vec![self.config.input_dim],
            });
        }
        let t = shape[0];
        let x = self.input.forward(g, p, features)?;
        let pe = g.constant(sinusoidal_positions(t, self.config.d_model));
        let mut x = g.add(x, pe)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut next_tap = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if next_tap < self.taps.len() && self.taps[next_tap].layer == i + 1 {
                let k = next_tap;
                next_tap += 1;
                let n = self.taps[k].norm.forward(g, p, x)?;
                x = match wiring {
                    TapWiring::NormalizeOnly => n,
                    TapWiring::Full => {
                        let z = self.tap_head(g, p, k, n)?;
                        taps.push(TapOutput {
                            layer: i + 1,
                            target: self.config.mode.tap_target(k),
                            log_post: z,
                        });
                        self.combine_normalized(g, p, k, n, z)?
                    }
                };
            }
        }
        let h_final = self.final_norm.forward(g, p, x)?;
        let logits = self.ctc_head.forward(g, p, h_final)?;
        let ctc_log_post = g.log_softmax(logits)?;
        Ok(EncoderOutput {
            h_final,
            ctc_log_post,
            taps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: ConditioningMode, taps: Vec<usize>, n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            n_layers,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            tap_layers: taps,
            mode,
            share_heads: false,
        }
    }

    fn build(cfg: EncoderConfig, vocab: usize, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, &mut rng, cfg, vocab);
        (store, enc)
    }

    fn features(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, 3], data).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ConditioningMode::ALL {
            assert_eq!(m.name().parse::<ConditioningMode>().unwrap(), m);
        }
        assert!("lid".parse::<ConditioningMode>().is_err());
    }

    #[test]
    fn tap_kinds_follow_mode() {
        let (store, enc) = build(small(ConditioningMode::None, vec![1], 2), 5, 0);
        assert!(enc.taps.is_empty() && enc.tap_heads.is_empty());
        assert!(store.find("enc.tap0.norm.gain").is_none());

        for (mode, want) in [
            (ConditioningMode::ScCtc, [TapTarget::Asr; 3]),
            (ConditioningMode::LidUtt, [TapTarget::LidUtt; 3]),
            (
                ConditioningMode::HierLidUtt,
                [TapTarget::LidUtt, TapTarget::Asr, TapTarget::Asr],
            ),
            (
                ConditioningMode::HierLidTok,
                [TapTarget::LidTok, TapTarget::Asr, TapTarget::Asr],
            ),
        ] {
            let (store, enc) = build(small(mode, vec![3, 6, 9], 12), 5, 0);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(features(4, 1));
            let out = enc.encode(&mut g, &p, x, TapWiring::Full).unwrap();
            let got: Vec<_> = out.taps.iter().map(|t| t.target).collect();
            assert_eq!(got, want, "{mode}");
            assert_eq!(
                out.taps.iter().map(|t| t.layer).collect::<Vec<_>>(),
                vec![3, 6, 9]
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(small(ConditioningMode::ScCtc, vec![2, 1], 3)
            .validate()
            .is_err());
        assert!(small(ConditioningMode::ScCtc, vec![3], 3)
            .validate()
            .is_err());
        assert!(small(ConditioningMode::ScCtc, vec![], 3)
            .validate()
            .is_err());
        assert!(small(ConditioningMode::None, vec![], 3).validate().is_ok());
        let mut c = small(ConditioningMode::None, vec![], 3);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    fn zero_condition(store: &mut ParamStore, enc: &Encoder) {
        for tap in &enc.taps {
            for id in [tap.condition.weight, tap.condition.bias] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn zero_projection_reduces_to_normalisation() {
        let (mut store, enc) = build(small(ConditioningMode::ScCtc, vec![1], 2), 5, 3);
        zero_condition(&mut store, &enc);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::new(
            vec![4, 8],
            (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let hv = g.constant(h);
        let z = g.constant(Tensor::filled(&[4, 5], (0.2f64).ln()));
        let combined = enc.condition_combine(&mut g, &p, 0, hv, z).unwrap();
        let normed = enc.taps[0].norm.forward(&mut g, &p, hv).unwrap();
        assert_eq!(g.value(combined), g.value(normed));
    }

    #[test]
    fn different_posteriors_give_different_conditioning() {
        let (store, enc) = build(small(ConditioningMode::ScCtc, vec![1], 2), 4, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(Tensor::filled(&[1, 8], 0.5));
        let z1 = g.constant(
            Tensor::new(
                vec![1, 4],
                vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            )
            .unwrap(),
        );
        let z2 = g.constant(
            Tensor::new(
                vec![1, 4],
                vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            )
            .unwrap(),
        );
        let a = enc.condition_combine(&mut g, &p, 0, h, z1).unwrap();
        let b = enc.condition_combine(&mut g, &p, 0, h, z2).unwrap();
        assert_ne!(g.value(a), g.value(b));
    }

    #[test]
    fn wiring_equivalence_with_zero_projection() {
        for mode in [
            ConditioningMode::ScCtc,
            ConditioningMode::LidUtt,
            ConditioningMode::HierLidUtt,
        ] {
            let (mut store, enc) = build(small(mode, vec![1, 2], 3), 6, 11);
            zero_condition(&mut store, &enc);
            for seed in 0..3 {
                let x = features(5, seed);
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let xv = g.constant_ref(&x);
                let full = enc.encode(&mut g, &p, xv, TapWiring::Full).unwrap();
                let base = enc
                    .encode(&mut g, &p, xv, TapWiring::NormalizeOnly)
                    .unwrap();
                assert_eq!(g.value(full.h_final), g.value(base.h_final));
                assert_eq!(g.value(full.ctc_log_post), g.value(base.ctc_log_post));
                assert!(base.taps.is_empty());
            }
        }
    }

    #[test]
    fn shared_heads_use_one_projection() {
        let mut cfg = small(ConditioningMode::ScCtc, vec![1, 2], 3);
        cfg.share_heads = true;
        let (store, enc) = build(cfg, 5, 2);
        assert_eq!(enc.tap_heads.len(), 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(Tensor::filled(&[2, 8], 0.1));
        let a = enc.tap_head(&mut g, &p, 0, h).unwrap();
        let b = enc.tap_head(&mut g, &p, 1, h).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn final_head_gets_no_gradient_from_tap_loss() {
        let (store, enc) = build(small(ConditioningMode::ScCtc, vec![1], 2), 5, 4);
        let x = features(4, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant_ref(&x);
        let out = enc.encode(&mut g, &p, xv, TapWiring::Full).unwrap();
        let loss = g.select_sum(out.taps[0].log_post, &[1, 7]).unwrap();
        g.backward(loss).unwrap();
        let grads = store.grads(&g, &p);
        let ctc_w = grads[enc.ctc_head.weight.index()].clone();
        assert!(ctc_w.data().iter().all(|&v| v == 0.0));
        let tap_w = &grads[enc.tap_heads[0].weight.index()];
        assert!(tap_w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let run = || {
            let (store, enc) = build(small(ConditioningMode::HierLidTok, vec![1], 2), 5, 8);
            let x = features(6, 5);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant_ref(&x);
            let out = enc.encode(&mut g, &p, xv, TapWiring::Full).unwrap();
            g.value(out.ctc_log_post).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (store, enc) = build(small(ConditioningMode::None, vec![], 1), 5, 0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(enc.encode(&mut g, &p, x, TapWiring::Full).is_err());
    }
}
