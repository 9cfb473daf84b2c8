//! Decoding, checkpoint averaging and evaluation reports.

mod beam;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use beam::{ctc_prefix_score, joint_beam_search_with, BeamConfig, CtcPrefixState, Hypothesis};
pub use metrics::{
    cer, char_errors, edit_distance, lid_accuracy, mer, mixed_errors, wer, word_errors, ErrorCounts,
};

use crate::corpus::{LanguageSpec, Utterance};
use crate::ctc::ctc_greedy_decode;
use crate::labels::{detokenize, Vocab};
use crate::model::{Model, ModelError};
use crate::numcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Config(String),
    #[error("cannot average: {0}")]
    Mismatch(String),
    #[error("no language metadata for {0}")]
    UnknownLanguage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<std::convert::Infallible> for EvalError {
    fn from(e: std::convert::Infallible) -> Self {
        match e {}
    }
}

/// Beam search with the model's decoder as the attention scorer.
pub fn joint_beam_search(
    model: &Model,
    features: &Tensor,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>, EvalError> {
    let enc = model.encode(features)?;
    joint_beam_search_with(
        &enc.ctc_log_post,
        |prefix| model.next_token_log_probs(&enc.memory, prefix),
        cfg,
    )
}

/// Parameter-wise mean of models sharing one configuration.
pub fn average_models(models: &[Model]) -> Result<Model, EvalError> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| EvalError::Mismatch("no checkpoints given".into()))?;
    if let Some(bad) = rest.iter().position(|m| m.config != first.config) {
        return Err(EvalError::Mismatch(format!(
            "checkpoint {} has a different config",
            bad + 1
        )));
    }
    let mut out = first.clone();
    let n = models.len() as f64;
    for (i, t) in out.params.tensors_mut().enumerate() {
        let id = first.params.ids().nth(i).expect("same parameter count");
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            let base = *v;
            // (x + x + x) / 3 need not round back to x
            if rest.iter().any(|m| m.params.get(id).data()[j] != base) {
                *v = models
                    .iter()
                    .map(|m| m.params.get(id).data()[j])
                    .sum::<f64>()
                    / n;
            }
        }
    }
    Ok(out)
}

pub fn checkpoint_average(paths: &[&Path]) -> Result<Model, EvalError> {
    let models = paths
        .iter()
        .map(|p| Model::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    average_models(&models)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub lid: String,
    pub reference: String,
    pub hyp_lid: Option<String>,
    pub hypothesis: String,
    /// first language token the first tap emits under greedy CTC decoding
    pub inter_lid: Option<String>,
}

/// Decodes one utterance with the joint beam and reads the first tap.
pub fn decode_utterance(
    model: &Model,
    vocab: &Vocab,
    utt: &Utterance,
    cfg: &BeamConfig,
) -> Result<UtteranceResult, EvalError> {
    let enc = model.encode(&utt.features)?;
    let hyps = joint_beam_search_with(
        &enc.ctc_log_post,
        |prefix| model.next_token_log_probs(&enc.memory, prefix),
        cfg,
    )?;
    let (hyp_lid, hypothesis) = hyps
        .first()
        .map(|h| detokenize(&h.tokens, vocab))
        .unwrap_or_default();
    let inter_lid = enc.taps.first().and_then(|(_, lp)| {
        ctc_greedy_decode(lp)
            .into_iter()
            .find(|&t| vocab.is_lid(t))
            .and_then(|t| vocab.language_of(t).map(str::to_string))
    });
    Ok(UtteranceResult {
        lid: utt.lid.clone(),
        reference: utt.text.clone(),
        hyp_lid,
        hypothesis,
        inter_lid,
    })
}

/// Decodes `utts` on up to `threads` workers; results keep input order.
pub fn decode_all(
    model: &Model,
    vocab: &Vocab,
    utts: &[&Utterance],
    cfg: &BeamConfig,
    threads: usize,
) -> Result<Vec<UtteranceResult>, EvalError> {
    let threads = threads.clamp(1, utts.len().max(1));
    if threads == 1 {
        return utts
            .iter()
            .map(|u| decode_utterance(model, vocab, u, cfg))
            .collect();
    }
    let chunk = utts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|u| decode_utterance(model, vocab, u, cfg))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(utts.len());
        for h in handles {
            out.extend(h.join().expect("decoder worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageReport {
    pub lid: String,
    pub group: String,
    pub space_delimited: bool,
    pub confusable: bool,
    pub utterances: usize,
    pub chars: ErrorCounts,
    pub words: ErrorCounts,
    pub mixed: ErrorCounts,
    pub cer: f64,
    pub wer: f64,
    pub mer: f64,
    pub lid_hits: usize,
    pub lid_accuracy: f64,
    pub inter_lid_hits: usize,
    pub inter_lid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub utterances: usize,
    pub cer: f64,
    pub mer: f64,
    pub lid_accuracy: f64,
}

/// Rows are reference languages, columns predicted languages plus a final
/// column for hypotheses without a language token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("reference");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push_str(",none\n");
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// how corpus and group rates are pooled
    pub averaging: String,
    pub utterances: usize,
    pub cer: f64,
    pub mer: f64,
    pub lid_accuracy: f64,
    /// `None` when the model has no taps
    pub inter_lid_accuracy: Option<f64>,
    pub languages: Vec<LanguageReport>,
    pub groups: Vec<GroupReport>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn build(
        results: &[UtteranceResult],
        languages: &[LanguageSpec],
        has_taps: bool,
    ) -> Result<Self, EvalError> {
        let mut per: BTreeMap<&str, Vec<&UtteranceResult>> = BTreeMap::new();
        for r in results {
            if !languages.iter().any(|l| l.lid == r.lid) {
                return Err(EvalError::UnknownLanguage(r.lid.clone()));
            }
            per.entry(r.lid.as_str()).or_default().push(r);
        }
        let mut reports = Vec::new();
        for spec in languages {
            let Some(rs) = per.get(spec.lid.as_str()) else {
                continue;
            };
            let chars: ErrorCounts = rs
                .iter()
                .map(|r| char_errors(&r.reference, &r.hypothesis))
                .sum();
            let words: ErrorCounts = rs
                .iter()
                .map(|r| word_errors(&r.reference, &r.hypothesis))
                .sum();
            let mixed = if spec.space_delimited { words } else { chars };
            let lid_hits = rs
                .iter()
                .filter(|r| r.hyp_lid.as_deref() == Some(&r.lid))
                .count();
            let inter_lid_hits = rs
                .iter()
                .filter(|r| r.inter_lid.as_deref() == Some(&r.lid))
                .count();
            let n = rs.len();
            reports.push(LanguageReport {
                lid: spec.lid.clone(),
                group: spec.group.clone(),
                space_delimited: spec.space_delimited,
                confusable: spec.confusable_with.is_some(),
                utterances: n,
                chars,
                words,
                mixed,
                cer: chars.rate(),
                wer: words.rate(),
                mer: mixed.rate(),
                lid_hits,
                lid_accuracy: lid_hits as f64 / n as f64,
                inter_lid_hits,
                inter_lid_accuracy: inter_lid_hits as f64 / n as f64,
            });
        }

        let pool = |rs: &[&LanguageReport]| {
            let n: usize = rs.iter().map(|r| r.utterances).sum();
            let chars: ErrorCounts = rs.iter().map(|r| r.chars).sum();
            let mixed: ErrorCounts = rs.iter().map(|r| r.mixed).sum();
            let hits: usize = rs.iter().map(|r| r.lid_hits).sum();
            (
                n,
                chars.rate(),
                mixed.rate(),
                if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            )
        };
        let mut group_names: Vec<&str> = reports.iter().map(|r| r.group.as_str()).collect();
        group_names.sort_unstable();
        group_names.dedup();
        let groups = group_names
            .into_iter()
            .map(|gname| {
                let rs: Vec<&LanguageReport> =
                    reports.iter().filter(|r| r.group == gname).collect();
                let (utterances, cer, mer, lid_accuracy) = pool(&rs);
                GroupReport {
                    group: gname.to_string(),
                    utterances,
                    cer,
                    mer,
                    lid_accuracy,
                }
            })
            .collect();
        let all: Vec<&LanguageReport> = reports.iter().collect();
        let (utterances, cer, mer, lid_accuracy) = pool(&all);
        let inter_lid_accuracy = (has_taps && utterances > 0).then(|| {
            reports.iter().map(|r| r.inter_lid_hits).sum::<usize>() as f64 / utterances as f64
        });

        let labels: Vec<String> = languages.iter().map(|l| l.lid.clone()).collect();
        let mut counts = vec![vec![0; labels.len() + 1]; labels.len()];
        for r in results {
            let row = labels
                .iter()
                .position(|l| *l == r.lid)
                .expect("checked above");
            let col = r
                .hyp_lid
                .as_ref()
                .and_then(|h| labels.iter().position(|l| l == h))
                .unwrap_or(labels.len());
            counts[row][col] += 1;
        }

        Ok(Self {
            averaging: "micro".into(),
            utterances,
            cer,
            mer,
            lid_accuracy,
            inter_lid_accuracy,
            languages: reports,
            groups,
            confusion: ConfusionMatrix { labels, counts },
        })
    }

    /// Intermediate-head LID accuracy pooled over languages without a
    /// confusable partner.
    pub fn inter_lid_accuracy_distinct(&self) -> Option<f64> {
        self.inter_lid_accuracy?;
        let rs: Vec<&LanguageReport> = self.languages.iter().filter(|r| !r.confusable).collect();
        let n: usize = rs.iter().map(|r| r.utterances).sum();
        (n > 0).then(|| rs.iter().map(|r| r.inter_lid_hits).sum::<usize>() as f64 / n as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "averaging: {} (errors summed over reference length)",
            self.averaging
        );
        let _ = writeln!(
            out,
            "{:<8} {:<9} {:>5} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "lang", "group", "utts", "CER", "WER", "MER", "LID", "inter-LID"
        );
        for r in &self.languages {
            let _ = writeln!(
                out,
                "{:<8} {:<9} {:>5} {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}% {:>8.2}%",
                r.lid,
                r.group,
                r.utterances,
                100.0 * r.cer,
                100.0 * r.wer,
                100.0 * r.mer,
                100.0 * r.lid_accuracy,
                100.0 * r.inter_lid_accuracy
            );
        }
        for gr in &self.groups {
            let _ = writeln!(
                out,
                "{:<8} {:<9} {:>5} {:>6.2}% {:>7} {:>6.2}% {:>6.2}%",
                "group",
                gr.group,
                gr.utterances,
                100.0 * gr.cer,
                "",
                100.0 * gr.mer,
                100.0 * gr.lid_accuracy
            );
        }
        let _ = write!(
            out,
            "{:<8} {:<9} {:>5} {:>6.2}% {:>7} {:>6.2}% {:>6.2}%",
            "all",
            "",
            self.utterances,
            100.0 * self.cer,
            "",
            100.0 * self.mer,
            100.0 * self.lid_accuracy
        );
        if let Some(a) = self.inter_lid_accuracy {
            let _ = write!(out, " {:>8.2}%", 100.0 * a);
        }
        out.push('\n');
        out
    }
}
