//! Synthetic multilingual corpora and their JSON-lines storage.
//!
//! Every language owns one emission vector per character: a language-wide
//! offset plus a character-specific part. An utterance is
//! three frames of silence, `frames_per_char` noisy copies of each
//! character's emission, and three more frames of silence.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;

pub const SILENCE_FRAMES: usize = 3;
/// Upper bound on cosine similarity between emissions of distinct sounds.
pub const MAX_SEPARATED_COSINE: f64 = 0.5;
/// Lower bound on cosine similarity between a confusable pair's emissions.
pub const MIN_CONFUSABLE_COSINE: f64 = 0.95;
/// Cosine the perturbation of a confusable partner is built to hit.
const CONFUSABLE_TARGET_COSINE: f64 = 0.955;
const MAX_DRAWS: usize = 20_000;
/// Scale of the per-language offset shared by all of a language's emissions.
const LANGUAGE_OFFSET_SCALE: f64 = 0.8;
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
const GROUPS: [&str; 4] = ["northern", "southern", "eastern", "western"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("could not separate emissions in {dim} dimensions after {MAX_DRAWS} draws; use a larger feature dimension")]
    Separation { dim: usize },
    #[error("character {ch:?} is not in the alphabet of {lid}")]
    OutsideAlphabet { ch: char, lid: String },
    #[error("dataset line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lid: String,
    /// Characters the language writes, sorted; includes `' '` when the
    /// language separates words with spaces.
    pub alphabet: Vec<char>,
    /// `emission[i]` is the mean feature vector of `alphabet[i]`.
    pub emission: Vec<Vec<f64>>,
    pub group: String,
    pub space_delimited: bool,
    pub confusable_with: Option<String>,
}

impl LanguageSpec {
    pub fn emission_of(&self, ch: char) -> Option<&[f64]> {
        self.alphabet
            .iter()
            .position(|&c| c == ch)
            .map(|i| self.emission[i].as_slice())
    }

    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.alphabet.iter().copied().filter(|&c| c != ' ')
    }

    pub fn dim(&self) -> usize {
        self.emission.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T×D`
    pub features: Tensor,
    pub text: String,
    pub lid: String,
    pub split: Split,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// Frames to spare beyond what a per-token language target of the
    /// language-prefixed transcript needs (`2·S − 1` with `S` = chars + 1),
    /// minus the required margin of 2. Non-negative for valid utterances.
    pub fn achievability_slack(&self) -> isize {
        let s = self.text.chars().count() as isize + 1;
        self.frames() as isize - (2 * s - 1 + 2)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// splitmix64 step; derives independent stream seeds from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageSetConfig {
    pub n_langs: usize,
    pub n_confusable_pairs: usize,
    pub alphabet_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for LanguageSetConfig {
    fn default() -> Self {
        Self {
            n_langs: 8,
            n_confusable_pairs: 1,
            alphabet_size: 6,
            dim: 16,
            seed: 7,
        }
    }
}

/// Generates `n_langs` languages. Languages `2i` and `2i+1` for
/// `i < n_confusable_pairs` form confusable pairs sharing an alphabet.
pub fn gen_language_set(cfg: &LanguageSetConfig) -> Result<Vec<LanguageSpec>, CorpusError> {
    let LanguageSetConfig {
        n_langs,
        n_confusable_pairs,
        alphabet_size,
        dim,
        seed,
    } = *cfg;
    if n_langs < 2 {
        return Err(CorpusError::Invalid("need at least two languages".into()));
    }
    if 2 * n_confusable_pairs > n_langs {
        return Err(CorpusError::Invalid(format!(
            "{n_confusable_pairs} confusable pairs need {} languages, have {n_langs}",
            2 * n_confusable_pairs
        )));
    }
    if alphabet_size < 2 || alphabet_size > LETTERS.len() {
        return Err(CorpusError::Invalid(format!(
            "alphabet size must lie in 2..={}",
            LETTERS.len()
        )));
    }
    if dim < 2 {
        return Err(CorpusError::Separation { dim });
    }
    let pool: Vec<char> = LETTERS.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = if n_langs > 10 { 3 } else { 2 };
    let mut specs: Vec<LanguageSpec> = Vec::with_capacity(n_langs);
    // every accepted vector, tagged with (language, character)
    let mut accepted: Vec<(usize, char, Vec<f64>)> = Vec::new();

    for li in 0..n_langs {
        let partner = (li % 2 == 1 && li < 2 * n_confusable_pairs).then(|| li - 1);
        let space_delimited = (li / 2) % 2 == 0;
        let alphabet = match partner {
            Some(p) => specs[p].alphabet.clone(),
            None => {
                let mut a: Vec<char> = sample(&mut rng, pool.len(), alphabet_size)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                if space_delimited {
                    a.push(' ');
                }
                a.sort_unstable();
                a
            }
        };
        let offset: Vec<f64> = (0..dim)
            .map(|_| LANGUAGE_OFFSET_SCALE * gauss(&mut rng))
            .collect();
        let mut emission = Vec::with_capacity(alphabet.len());
        for &ch in &alphabet {
            let mut draws = 0;
            let vec = loop {
                draws += 1;
                if draws > MAX_DRAWS {
                    return Err(CorpusError::Separation { dim });
                }
                let cand = match partner {
                    Some(p) => {
                        perturb(&mut rng, specs[p].emission_of(ch).expect("shared alphabet"))
                    }
                    None => offset.iter().map(|o| o + gauss(&mut rng)).collect(),
                };
                let clash = accepted.iter().any(|(l, c, v)| {
                    let twin = Some(*l) == partner && *c == ch;
                    !twin && cosine(v, &cand) > MAX_SEPARATED_COSINE
                });
                if !clash {
                    break cand;
                }
            };
            accepted.push((li, ch, vec.clone()));
            emission.push(vec);
        }
        specs.push(LanguageSpec {
            lid: format!("L{li:0width$}"),
            alphabet,
            emission,
            group: GROUPS[(li / 2) % GROUPS.len()].to_string(),
            space_delimited,
            confusable_with: None,
        });
        if let Some(p) = partner {
            specs[li].confusable_with = Some(specs[p].lid.clone());
            specs[p].confusable_with = Some(specs[li].lid.clone());
        }
    }
    Ok(specs)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rotates `base` away from itself by a random orthogonal component so
/// that the cosine to `base` equals the confusable target.
fn perturb(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut dir: Vec<f64> = base.iter().map(|_| gauss(rng)).collect();
    let proj = dir.iter().zip(base).map(|(d, b)| d * b).sum::<f64>() / (norm * norm);
    dir.iter_mut().zip(base).for_each(|(d, b)| *d -= proj * b);
    let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = CONFUSABLE_TARGET_COSINE;
    let len = norm * (1.0 - c * c).sqrt() / c;
    base.iter()
        .zip(&dir)
        .map(|(b, d)| b + d * len / dn)
        .collect()
}

pub fn synthesize_utterance(
    spec: &LanguageSpec,
    text: &str,
    frames_per_char: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Utterance, CorpusError> {
    if frames_per_char < 2 {
        return Err(CorpusError::Invalid(
            "frames_per_char must be at least 2".into(),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(CorpusError::Invalid(
            "noise_sigma must be finite and non-negative".into(),
        ));
    }
    let dim = spec.dim();
    let means: Vec<&[f64]> = text
        .chars()
        .map(|ch| {
            spec.emission_of(ch)
                .ok_or_else(|| CorpusError::OutsideAlphabet {
                    ch,
                    lid: spec.lid.clone(),
                })
        })
        .collect::<Result<_, _>>()?;
    let silence = vec![0.0; dim];
    let rows = std::iter::repeat_n(silence.as_slice(), SILENCE_FRAMES)
        .chain(
            means
                .iter()
                .flat_map(|m| std::iter::repeat_n(*m, frames_per_char)),
        )
        .chain(std::iter::repeat_n(silence.as_slice(), SILENCE_FRAMES));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut data = Vec::new();
    let mut t = 0;
    for mean in rows {
        for &m in mean {
            let n = if noise_sigma == 0.0 {
                0.0
            } else {
                noise.sample(&mut rng)
            };
            data.push(m + n);
        }
        t += 1;
    }
    Ok(Utterance {
        features: Tensor::new(vec![t, dim], data).expect("rows have the feature dimension"),
        text: text.to_string(),
        lid: spec.lid.clone(),
        split: Split::Train,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub utterances_per_lang: usize,
    /// inclusive range of transcript lengths in characters
    pub len_range: (usize, usize),
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances_per_lang: 200,
            len_range: (3, 8),
            frames_per_char: 2,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

/// Random text over the language's letters with no character repeated
/// back to back; space-delimited languages get words of two or more letters.
pub fn random_text(spec: &LanguageSpec, len: usize, rng: &mut impl Rng) -> String {
    let letters: Vec<char> = spec.letters().collect();
    let mut out: Vec<char> = Vec::with_capacity(len);
    let mut word_len = 0;
    for i in 0..len {
        let remaining = len - i;
        let space = spec.space_delimited && word_len >= 2 && remaining >= 3 && rng.gen_bool(0.35);
        if space {
            out.push(' ');
            word_len = 0;
            continue;
        }
        let prev = out.last().copied();
        let ch = loop {
            let c = letters[rng.gen_range(0..letters.len())];
            if Some(c) != prev {
                break c;
            }
        };
        out.push(ch);
        word_len += 1;
    }
    out.into_iter().collect()
}

/// Per-language split sizes: round(80%) train, round(10%) dev, rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let dev = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, dev, n - train - dev)
}

pub fn gen_corpus(
    specs: &[LanguageSpec],
    cfg: &CorpusConfig,
) -> Result<Vec<Utterance>, CorpusError> {
    let (lo, hi) = cfg.len_range;
    if lo > hi {
        return Err(CorpusError::Invalid(format!(
            "empty length range {lo}..={hi}"
        )));
    }
    if cfg.frames_per_char < 2 {
        // 2 frames per character keep every language-token target achievable
        return Err(CorpusError::Invalid(
            "frames_per_char must be at least 2".into(),
        ));
    }
    let mut out = Vec::with_capacity(specs.len() * cfg.utterances_per_lang);
    let (n_train, n_dev, _) = split_sizes(cfg.utterances_per_lang);
    let mut index = 0u64;
    for spec in specs {
        for k in 0..cfg.utterances_per_lang {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index));
            let len = rng.gen_range(lo..=hi);
            let text = random_text(spec, len, &mut rng);
            let noise_seed = rng.gen();
            let mut utt = synthesize_utterance(
                spec,
                &text,
                cfg.frames_per_char,
                cfg.noise_sigma,
                noise_seed,
            )?;
            utt.split = if k < n_train {
                Split::Train
            } else if k < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            debug_assert!(utt.achievability_slack() >= 0);
            out.push(utt);
            index += 1;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Record {
    features: Vec<Vec<f64>>,
    text: String,
    lid: String,
    split: Split,
}

pub fn write_dataset(path: &Path, corpus: &[Utterance]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset_to(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(w: &mut impl Write, corpus: &[Utterance]) -> Result<(), CorpusError> {
    for u in corpus {
        let rec = Record {
            features: u.features.to_rows(),
            text: u.text.clone(),
            lid: u.lid.clone(),
            split: u.split,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    read_dataset_from(BufReader::new(std::fs::File::open(path)?))
}

pub fn read_dataset_from(r: impl BufRead) -> Result<Vec<Utterance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| CorpusError::Malformed { line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let features = Tensor::from_rows(&rec.features).map_err(|e| malformed(e.to_string()))?;
        out.push(Utterance {
            features,
            text: rec.text,
            lid: rec.lid,
            split: rec.split,
        });
    }
    Ok(out)
}

pub fn write_language_set(path: &Path, specs: &[LanguageSpec]) -> Result<(), CorpusError> {
    std::fs::write(path, serde_json::to_string_pretty(specs)?)?;
    Ok(())
}

pub fn read_language_set(path: &Path) -> Result<Vec<LanguageSpec>, CorpusError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn lang_pair_cosine(a: &LanguageSpec, b: &LanguageSpec) -> f64 {
        // mean cosine over characters the two share
        let shared: Vec<f64> = a
            .alphabet
            .iter()
            .filter_map(|&c| Some(cosine(a.emission_of(c)?, b.emission_of(c)?)))
            .collect();
        if shared.is_empty() {
            0.0
        } else {
            shared.iter().sum::<f64>() / shared.len() as f64
        }
    }

    fn all_cross_cosines(specs: &[LanguageSpec]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                for ea in &specs[i].emission {
                    for eb in &specs[j].emission {
                        out.push((i, j, cosine(ea, eb)));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_confusable_pair() {
        let specs = gen_language_set(&LanguageSetConfig::default()).unwrap();
        assert_eq!(specs.len(), 8);
        let mut close = Vec::new();
        for i in 0..8 {
            for j in i + 1..8 {
                if lang_pair_cosine(&specs[i], &specs[j]) >= MIN_CONFUSABLE_COSINE {
                    close.push((i, j));
                }
            }
        }
        assert_eq!(close, vec![(0, 1)]);
        assert_eq!(specs[0].confusable_with.as_deref(), Some("L01"));
        // every char of the pair individually meets the bound
        for &c in &specs[0].alphabet {
            let cs = cosine(
                specs[0].emission_of(c).unwrap(),
                specs[1].emission_of(c).unwrap(),
            );
            assert!(cs >= MIN_CONFUSABLE_COSINE, "{cs}");
        }
    }

    #[test]
    fn no_pairs_means_all_separated() {
        let cfg = LanguageSetConfig {
            n_confusable_pairs: 0,
            ..Default::default()
        };
        let specs = gen_language_set(&cfg).unwrap();
        for (_, _, c) in all_cross_cosines(&specs) {
            assert!(c <= MAX_SEPARATED_COSINE);
        }
        assert!(specs.iter().all(|s| s.confusable_with.is_none()));
    }

    #[test]
    fn two_languages_one_pair() {
        let cfg = LanguageSetConfig {
            n_langs: 2,
            n_confusable_pairs: 1,
            ..Default::default()
        };
        let specs = gen_language_set(&cfg).unwrap();
        assert_eq!(
            specs[0].confusable_with.as_deref(),
            Some(specs[1].lid.as_str())
        );
        assert_eq!(
            specs[1].confusable_with.as_deref(),
            Some(specs[0].lid.as_str())
        );
    }

    #[test]
    fn invalid_requests() {
        let bad = |n_langs, pairs, dim| LanguageSetConfig {
            n_langs,
            n_confusable_pairs: pairs,
            dim,
            ..Default::default()
        };
        assert!(matches!(
            gen_language_set(&bad(1, 0, 16)),
            Err(CorpusError::Invalid(_))
        ));
        assert!(matches!(
            gen_language_set(&bad(4, 3, 16)),
            Err(CorpusError::Invalid(_))
        ));
        assert!(matches!(
            gen_language_set(&bad(8, 1, 2)),
            Err(CorpusError::Separation { .. })
        ));
    }

    #[test]
    fn zero_noise_frames_copy_emissions() {
        let specs = gen_language_set(&LanguageSetConfig::default()).unwrap();
        let spec = &specs[2];
        let a = spec.letters().next().unwrap();
        let b = spec.letters().nth(1).unwrap();
        let text: String = [a, b].iter().collect();
        let u = synthesize_utterance(spec, &text, 2, 0.0, 1).unwrap();
        assert_eq!(u.frames(), 3 + 2 * 2 + 3);
        for r in 3..5 {
            assert_eq!(u.features.row(r), spec.emission_of(a).unwrap());
        }
        for r in 5..7 {
            assert_eq!(u.features.row(r), spec.emission_of(b).unwrap());
        }
        assert!(u.features.row(0).iter().all(|&v| v == 0.0));

        let empty = synthesize_utterance(spec, "", 3, 0.1, 1).unwrap();
        assert_eq!(empty.frames(), 6);
        let long = synthesize_utterance(spec, &text, 5, 0.1, 1).unwrap();
        assert_eq!(long.frames(), 3 + 5 * 2 + 3);
        let outside = LETTERS
            .chars()
            .find(|c| !spec.alphabet.contains(c))
            .unwrap();
        assert!(matches!(
            synthesize_utterance(spec, &outside.to_string(), 2, 0.1, 1),
            Err(CorpusError::OutsideAlphabet { .. })
        ));
    }

    fn small_corpus(per_lang: usize) -> Vec<Utterance> {
        let specs = gen_language_set(&LanguageSetConfig::default()).unwrap();
        gen_corpus(
            &specs,
            &CorpusConfig {
                utterances_per_lang: per_lang,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let corpus: Vec<Utterance> = small_corpus(2).into_iter().take(10).collect();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &corpus).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);
        let mut again = Vec::new();
        write_dataset_to(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let corpus = small_corpus(1);
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &corpus[..2]).unwrap();
        buf.extend_from_slice(b"{\"features\": [[1.0]], \"text\": 3}\n");
        match read_dataset_from(buf.as_slice()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn splits_and_achievability() {
        let corpus = small_corpus(20);
        let mut counts: BTreeMap<(String, Split), usize> = BTreeMap::new();
        for u in &corpus {
            *counts.entry((u.lid.clone(), u.split)).or_default() += 1;
            assert!(u.achievability_slack() >= 0, "{}", u.text);
            // no character repeated back to back; spaces never at the edges
            let chars: Vec<char> = u.text.chars().collect();
            assert!(chars.windows(2).all(|w| w[0] != w[1]));
            assert!(!u.text.starts_with(' ') && !u.text.ends_with(' '));
        }
        for ((_, split), n) in counts {
            let expect = match split {
                Split::Train => 16,
                _ => 2,
            };
            assert!((n as isize - expect).abs() <= 1);
        }
        assert_eq!(split_sizes(200), (160, 20, 20));
        assert_eq!(split_sizes(7), (6, 1, 0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset_to(&mut a, &small_corpus(3)).unwrap();
        write_dataset_to(&mut b, &small_corpus(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_centroid_separates_distinct_languages() {
        let specs = gen_language_set(&LanguageSetConfig::default()).unwrap();
        let corpus = gen_corpus(&specs, &CorpusConfig::default()).unwrap();
        let mean = |u: &Utterance| -> Vec<f64> {
            let d = u.features.cols();
            let mut m = vec![0.0; d];
            for r in 0..u.frames() {
                m.iter_mut()
                    .zip(u.features.row(r))
                    .for_each(|(a, b)| *a += b);
            }
            m.iter().map(|v| v / u.frames() as f64).collect()
        };
        let mut centroids: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for u in corpus.iter().filter(|u| u.split == Split::Train) {
            let m = mean(u);
            let e = centroids
                .entry(u.lid.as_str())
                .or_insert_with(|| (vec![0.0; m.len()], 0));
            e.0.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let centroids: Vec<(&str, Vec<f64>)> = centroids
            .into_iter()
            .map(|(k, (s, n))| (k, s.iter().map(|v| v / n as f64).collect()))
            .collect();
        let confusable: Vec<&str> = specs
            .iter()
            .filter(|s| s.confusable_with.is_some())
            .map(|s| s.lid.as_str())
            .collect();
        let mut total = 0;
        let mut correct = 0;
        for u in corpus.iter().filter(|u| u.split != Split::Train) {
            if confusable.contains(&u.lid.as_str()) {
                continue;
            }
            let m = mean(u);
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.1.iter().zip(&m).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.1.iter().zip(&m).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
                .0;
            total += 1;
            correct += usize::from(best == u.lid);
        }
        assert_eq!(
            correct, total,
            "nearest-centroid accuracy {correct}/{total}"
        );
    }
}
