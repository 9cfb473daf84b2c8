//! Label-synchronous joint CTC/attention beam search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::labels::{TokenId, BLANK};
use crate::numcore::kernels::log_add;
use crate::numcore::Tensor;

use super::EvalError;

/// Prefix probabilities of one hypothesis under the CTC posteriors.
///
/// `r_n[t]` / `r_b[t]` are the log probabilities that frames `0..=t`
/// collapse to the prefix and end in a label / a blank.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<TokenId>,
    /// log probability that the collapsed output starts with the prefix
    pub score: f64,
}

impl CtcPrefixState {
    pub fn initial(log_post: &Tensor) -> Self {
        let t = log_post.rows();
        let mut r_b = vec![f64::NEG_INFINITY; t];
        let mut acc = 0.0;
        for (i, slot) in r_b.iter_mut().enumerate() {
            acc += log_post.at(i, BLANK);
            *slot = acc;
        }
        Self {
            r_n: vec![f64::NEG_INFINITY; t],
            r_b,
            last: None,
            score: 0.0,
        }
    }

    pub fn extend(&self, log_post: &Tensor, c: TokenId) -> Self {
        let t_len = log_post.rows();
        let mut r_n = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        if self.last.is_none() {
            r_n[0] = log_post.at(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let y = log_post.at(t, c);
            let phi = if self.last == Some(c) {
                self.r_b[t - 1]
            } else {
                log_add(self.r_b[t - 1], self.r_n[t - 1])
            };
            r_n[t] = log_add(r_n[t - 1], phi) + y;
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + log_post.at(t, BLANK);
            psi = log_add(psi, phi + y);
        }
        Self {
            r_n,
            r_b,
            last: Some(c),
            score: psi,
        }
    }

    /// Log probability that the collapsed output is exactly the prefix.
    pub fn full_score(&self) -> f64 {
        let last = self.r_n.len() - 1;
        log_add(self.r_n[last], self.r_b[last])
    }
}

/// Log probability that the collapsed output of `log_post` begins with
/// `prefix`.
pub fn ctc_prefix_score(log_post: &Tensor, prefix: &[TokenId]) -> f64 {
    prefix
        .iter()
        .fold(CtcPrefixState::initial(log_post), |s, &c| {
            s.extend(log_post, c)
        })
        .score
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    pub lambda_dec: f64,
    /// defaults to the number of frames
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            lambda_dec: 0.3,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_joint: f64,
    /// closed at `max_len` without an end sentinel
    pub forced: bool,
}

fn joint(lambda: f64, att: f64, ctc: f64) -> f64 {
    // keep 0·(−inf) out of the sum at the extremes
    if lambda == 0.0 {
        att
    } else if lambda == 1.0 {
        ctc
    } else {
        (1.0 - lambda) * att + lambda * ctc
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score_joint
        .partial_cmp(&a.score_joint)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    hyp: Hypothesis,
    ctc: CtcPrefixState,
}

/// Beam search over the posteriors `log_post` (`T×V`, blank at 0) and an
/// attention scorer returning next-token log probabilities for a prefix,
/// where index 0 is the end sentinel.
///
/// Both score parts can only decrease as a hypothesis grows, so the search
/// stops once the best finished hypothesis outscores every live one; the
/// top result is final at that point, lower ranks may be incomplete.
pub fn joint_beam_search_with<F, E>(
    log_post: &Tensor,
    mut att: F,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, EvalError>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>, E>,
    EvalError: From<E>,
{
    if cfg.beam == 0 {
        return Err(EvalError::Config("beam must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_dec) {
        return Err(EvalError::Config(format!(
            "lambda_dec = {} outside [0, 1]",
            cfg.lambda_dec
        )));
    }
    let vocab = log_post.cols();
    let max_len = cfg.max_len.unwrap_or(log_post.rows());
    let lambda = cfg.lambda_dec;

    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            score_att: 0.0,
            score_ctc: 0.0,
            score_joint: 0.0,
            forced: false,
        },
        ctc: CtcPrefixState::initial(log_post),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<(Hypothesis, Option<CtcPrefixState>)> = Vec::new();
        for l in &live {
            let lp = att(&l.hyp.tokens)?;
            if lp.len() != vocab {
                return Err(EvalError::Config(format!(
                    "attention scorer returned {} scores for {vocab} tokens",
                    lp.len()
                )));
            }
            let end_att = l.hyp.score_att + lp[BLANK];
            let end_ctc = l.ctc.full_score();
            candidates.push((
                Hypothesis {
                    tokens: l.hyp.tokens.clone(),
                    score_att: end_att,
                    score_ctc: end_ctc,
                    score_joint: joint(lambda, end_att, end_ctc),
                    forced: false,
                },
                None,
            ));
            for (c, &a) in lp.iter().enumerate().skip(1) {
                let state = l.ctc.extend(log_post, c);
                let score_att = l.hyp.score_att + a;
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(c);
                candidates.push((
                    Hypothesis {
                        tokens,
                        score_att,
                        score_ctc: state.score,
                        score_joint: joint(lambda, score_att, state.score),
                        forced: false,
                    },
                    Some(state),
                ));
            }
        }
        candidates.retain(|(h, _)| h.score_joint > f64::NEG_INFINITY);
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        live.clear();
        for (hyp, state) in candidates.into_iter().take(cfg.beam) {
            match state {
                None => finished.push(hyp),
                Some(ctc) => live.push(Live { hyp, ctc }),
            }
        }
        finished.sort_by(rank);
        finished.truncate(cfg.beam);
        let best_live = live.first().map(|l| l.hyp.score_joint);
        match (finished.first(), best_live) {
            (_, None) => break,
            (Some(f), Some(b)) if f.score_joint >= b => break,
            _ => {}
        }
    }

    for l in live {
        // out of length budget: close with the end scores, no att end term
        let score_ctc = l.ctc.full_score();
        finished.push(Hypothesis {
            score_ctc,
            score_joint: joint(lambda, l.hyp.score_att, score_ctc),
            forced: true,
            ..l.hyp
        });
    }
    finished.sort_by(rank);
    finished.truncate(cfg.beam);
    Ok(finished)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{collapse, ctc_loss};
    use crate::numcore::kernels::log_sum_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn random_log_post(rng: &mut impl Rng, t: usize, c: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..t {
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = log_sum_exp(&logits);
            data.extend(logits.iter().map(|v| v - lse));
        }
        Tensor::new(vec![t, c], data).unwrap()
    }

    /// Probability of every collapsed label sequence by path enumeration.
    fn sequence_table(lp: &Tensor) -> Vec<(Vec<TokenId>, f64)> {
        let (t, c) = (lp.rows(), lp.cols());
        let mut table: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for code in 0..c.pow(t as u32) {
            let mut path = Vec::with_capacity(t);
            let mut rest = code;
            let mut logp = 0.0;
            for i in 0..t {
                path.push(rest % c);
                logp += lp.at(i, rest % c);
                rest /= c;
            }
            let y = collapse(&path);
            match table.iter_mut().find(|(s, _)| *s == y) {
                Some(e) => e.1 = log_add(e.1, logp),
                None => table.push((y, logp)),
            }
        }
        table
    }

    #[test]
    fn prefix_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = rng.gen_range(1..=5);
            let lp = random_log_post(&mut rng, t, 3);
            assert_eq!(ctc_prefix_score(&lp, &[]), 0.0);
            let table = sequence_table(&lp);
            for (seq, _) in &table {
                for cut in 0..=seq.len() {
                    let prefix = &seq[..cut];
                    let want = log_sum_exp(
                        &table
                            .iter()
                            .filter(|(s, _)| s.starts_with(prefix))
                            .map(|e| e.1)
                            .collect::<Vec<_>>(),
                    );
                    let got = ctc_prefix_score(&lp, prefix);
                    assert!((got - want).abs() < 1e-9, "{prefix:?}: {got} vs {want}");
                }
                if !seq.is_empty() {
                    let state = seq
                        .iter()
                        .fold(CtcPrefixState::initial(&lp), |s, &c| s.extend(&lp, c));
                    let loss = ctc_loss(&lp, seq).unwrap().neg_log_prob;
                    assert!((state.full_score() + loss).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn prefix_score_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lp = random_log_post(&mut rng, 6, 4);
        let mut prev = 0.0;
        for cut in 1..=5 {
            let prefix: Vec<TokenId> = (0..cut).map(|i| 1 + (i * 7) % 3).collect();
            let s = ctc_prefix_score(&lp, &prefix);
            assert!(s <= prev + 1e-12);
            prev = s;
        }
        assert_eq!(
            ctc_prefix_score(&lp, &[1, 1, 1, 1, 1, 1, 1]),
            f64::NEG_INFINITY
        );
    }

    fn no_attention(v: usize) -> impl FnMut(&[TokenId]) -> Result<Vec<f64>, Infallible> {
        move |_| Ok(vec![0.0; v])
    }

    #[test]
    fn exhaustive_beam_finds_ctc_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let t = rng.gen_range(1..=4);
            let lp = random_log_post(&mut rng, t, 3);
            let cfg = BeamConfig {
                beam: 64,
                lambda_dec: 1.0,
                max_len: None,
            };
            let hyps = joint_beam_search_with(&lp, no_attention(3), &cfg).unwrap();
            let table = sequence_table(&lp);
            let best = table
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
                .unwrap();
            assert_eq!(hyps[0].tokens, best.0);
            assert!((hyps[0].score_ctc - best.1).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_score_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = random_log_post(&mut rng, 5, 4);
        let att = |prefix: &[TokenId]| -> Result<Vec<f64>, Infallible> {
            let raw: Vec<f64> = (0..4).map(|i| ((i + prefix.len()) as f64).sin()).collect();
            let lse = log_sum_exp(&raw);
            Ok(raw.iter().map(|v| v - lse).collect())
        };
        let cfg = BeamConfig::default();
        let hyps = joint_beam_search_with(&lp, att, &cfg).unwrap();
        assert!(!hyps.is_empty());
        for h in &hyps {
            let re = 0.7 * h.score_att + 0.3 * h.score_ctc;
            assert!((h.score_joint - re).abs() < 1e-12);
        }
        assert!(hyps
            .windows(2)
            .all(|w| w[0].score_joint >= w[1].score_joint));
    }

    #[test]
    fn unit_beam_without_ctc_is_greedy_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lp = random_log_post(&mut rng, 6, 4);
        let table: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.gen_range(-3.0..0.0)).collect())
            .collect();
        let att = |prefix: &[TokenId]| -> Result<Vec<f64>, Infallible> {
            Ok(table[prefix.len()].clone())
        };
        let cfg = BeamConfig {
            beam: 1,
            lambda_dec: 0.0,
            max_len: Some(6),
        };
        let hyps = joint_beam_search_with(&lp, att, &cfg).unwrap();
        let mut greedy = Vec::new();
        loop {
            let row = &table[greedy.len()];
            let best = crate::model::argmax(row);
            if best == BLANK || greedy.len() == 6 {
                break;
            }
            greedy.push(best);
        }
        assert_eq!(hyps[0].tokens, greedy);
    }

    #[test]
    fn wider_beam_is_never_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let lp = random_log_post(&mut rng, 5, 4);
            let seed: u64 = rng.gen();
            let att = move |prefix: &[TokenId]| -> Result<Vec<f64>, Infallible> {
                let mut r = ChaCha8Rng::seed_from_u64(
                    seed ^ prefix.iter().fold(17, |h, &t| h * 31 + t as u64),
                );
                let raw: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
                let lse = log_sum_exp(&raw);
                Ok(raw.iter().map(|v| v - lse).collect())
            };
            let narrow = joint_beam_search_with(
                &lp,
                att,
                &BeamConfig {
                    beam: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            let wide = joint_beam_search_with(
                &lp,
                att,
                &BeamConfig {
                    beam: 200,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(wide[0].score_joint >= narrow[0].score_joint - 1e-12);
        }
    }

    #[test]
    fn length_budget_forces_closure() {
        let lp = Tensor::filled(&[4, 3], -(3f64).ln());
        // attention never wants to stop
        let att = |_: &[TokenId]| -> Result<Vec<f64>, Infallible> { Ok(vec![-50.0, -0.01, -5.0]) };
        let cfg = BeamConfig {
            beam: 1,
            lambda_dec: 0.0,
            max_len: Some(2),
        };
        let hyps = joint_beam_search_with(&lp, att, &cfg).unwrap();
        assert_eq!(hyps[0].tokens, vec![1, 1]);
        assert!(hyps[0].forced);
        assert!(joint_beam_search_with(&lp, att, &BeamConfig { beam: 0, ..cfg }).is_err());
    }
}
