//! Self-checks exposed on the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_brute_force, ctc_loss, CtcError};
use crate::decoder::{DecoderConfig, LossConfig, TermWeights};
use crate::encoder::{ConditioningMode, EncoderConfig};
use crate::labels::LabelBundle;
use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::Bound;
use crate::numcore::kernels::log_sum_exp;
use crate::numcore::{grad_check, GradCheckReport, NumError, Tensor};

fn random_log_post(rng: &mut impl Rng, t: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * c);
    for _ in 0..t {
        let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = log_sum_exp(&logits);
        data.extend(logits.iter().map(|v| v - lse));
    }
    Tensor::new(vec![t, c], data).expect("sized")
}

/// Largest gap between the lattice loss and path enumeration over `draws`
/// random problems with up to 3 labels, 3 symbols and 5 frames. Pairs where
/// both are infinite count as agreeing.
pub fn ctc_oracle_sweep(seed: u64, draws: usize) -> Result<f64, CtcError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let symbols = rng.gen_range(1..=3);
        let t = rng.gen_range(1..=5);
        let s = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..s).map(|_| rng.gen_range(1..=symbols)).collect();
        let lp = random_log_post(&mut rng, t, symbols + 1);
        let fast = ctc_loss(&lp, &target)?.neg_log_prob;
        let slow = ctc_brute_force(&lp, &target)?;
        let gap = if fast.is_infinite() && slow.is_infinite() {
            0.0
        } else {
            (fast - slow).abs()
        };
        worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
    }
    Ok(worst)
}

/// A two-layer model small enough for coordinate-wise finite differences.
pub fn toy_model_config(mode: ConditioningMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 3,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 8,
            tap_layers: vec![1],
            mode,
            share_heads: false,
        },
        decoder: DecoderConfig {
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 8,
        },
        vocab_size: 6,
    }
}

/// Finite-difference check of the full weighted objective of one random
/// utterance under a toy model.
pub fn full_loss_grad_check(
    mode: ConditioningMode,
    seed: u64,
    loss: &LossConfig,
) -> Result<(usize, GradCheckReport), ModelError> {
    let model = Model::new(toy_model_config(mode), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let frames = 9;
    let features = Tensor::new(
        vec![frames, 3],
        (0..frames * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    // language token 1, text tokens from 3..6
    let labels = LabelBundle {
        asr: vec![1, 3, 5, 4],
        lid_tok: vec![1; 4],
        lid_utt: vec![1],
    };
    let weights = TermWeights::single(loss, model.config.encoder.active_taps().len());
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = g.constant(features.clone());
            model
                .utterance_objective(g, &p, x, &labels, &weights)
                .map(|(l, _)| l)
                .map_err(|e| NumError::Contract(e.to_string()))
        },
        &params,
        1e-6,
    )?;
    Ok((model.num_parameters(), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_agrees_with_enumeration() {
        assert!(ctc_oracle_sweep(1, 50).unwrap() < 1e-9);
    }

    #[test]
    fn toy_model_is_small() {
        let m = Model::new(toy_model_config(ConditioningMode::HierLidTok), 0).unwrap();
        assert!(m.num_parameters() <= 5000, "{}", m.num_parameters());
    }

    #[test]
    fn full_objective_gradient_matches_differences() {
        let (_, r) =
            full_loss_grad_check(ConditioningMode::HierLidTok, 5, &LossConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.coordinates, 2810);
    }
}
