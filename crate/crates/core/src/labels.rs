//! Vocabulary, tokenisation and the three label schemes (ASR, LID per
//! token, LID per utterance).
//!
//! Id layout is fixed: blank is 0, then one token per language sorted by
//! name, then text units sorted lexically, then `<unk>` last.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;

pub type TokenId = usize;

pub const BLANK: TokenId = 0;
pub const BLANK_SYMBOL: &str = "<blank>";
pub const UNK_SYMBOL: &str = "<unk>";
/// Stands in for a space character in character-unit vocabularies.
pub const SPACE_SYMBOL: &str = "\u{2581}";

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("unknown language id {0:?}")]
    UnknownLanguage(String),
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Char,
    Word,
}

pub fn lid_symbol(lid: &str) -> String {
    format!("[{lid}]")
}

fn parse_lid_symbol(sym: &str) -> Option<&str> {
    sym.strip_prefix('[')?
        .strip_suffix(']')
        .filter(|s| !s.is_empty())
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn text_units(text: &str, unit: Unit) -> Vec<String> {
    let text = normalize(text);
    match unit {
        Unit::Char => text
            .chars()
            .map(|c| {
                if c == ' ' {
                    SPACE_SYMBOL.to_string()
                } else {
                    c.to_string()
                }
            })
            .collect(),
        Unit::Word => text
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_lids: usize,
    unit: Unit,
}

impl Vocab {
    /// Builds the vocabulary from `(text, language)` pairs.
    pub fn build<'s, I>(entries: I, unit: Unit) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = (&'s str, &'s str)>,
    {
        let mut langs = BTreeSet::new();
        let mut units = BTreeSet::new();
        for (text, lid) in entries {
            langs.insert(lid.to_string());
            units.extend(text_units(text, unit));
        }
        if langs.is_empty() {
            return Err(LabelError::EmptyCorpus);
        }
        let mut tokens = vec![BLANK_SYMBOL.to_string()];
        tokens.extend(langs.iter().map(|l| lid_symbol(l)));
        tokens.extend(units);
        tokens.push(UNK_SYMBOL.to_string());
        Ok(Self::from_tokens(tokens, langs.len(), unit))
    }

    pub fn from_corpus(corpus: &[Utterance], unit: Unit) -> Result<Self, LabelError> {
        Self::build(
            corpus.iter().map(|u| (u.text.as_str(), u.lid.as_str())),
            unit,
        )
    }

    fn from_tokens(tokens: Vec<String>, n_lids: usize, unit: Unit) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            n_lids,
            unit,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn unk(&self) -> TokenId {
        self.tokens.len() - 1
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    /// Contiguous id block of the language tokens.
    pub fn lid_range(&self) -> std::ops::Range<TokenId> {
        1..1 + self.n_lids
    }

    pub fn is_lid(&self, id: TokenId) -> bool {
        self.lid_range().contains(&id)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.tokens[self.lid_range()]
            .iter()
            .map(|t| parse_lid_symbol(t).expect("lid block holds bracketed symbols"))
    }

    pub fn lid_token(&self, lid: &str) -> Option<TokenId> {
        self.id(&lid_symbol(lid)).filter(|&id| self.is_lid(id))
    }

    pub fn language_of(&self, id: TokenId) -> Option<&str> {
        if self.is_lid(id) {
            parse_lid_symbol(&self.tokens[id])
        } else {
            None
        }
    }

    /// Text units to ids; units outside the vocabulary become `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text_units(text, self.unit)
            .iter()
            .map(|u| match self.id(u) {
                Some(id) if id > self.lid_range().end - 1 => id,
                _ => self.unk(),
            })
            .collect()
    }

    /// Space-separated symbols, e.g. `[EN_US] ALL YOU NEED`.
    pub fn render(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, unit: Unit) -> Result<Self, LabelError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let fail = |line: usize, msg: &str| LabelError::Format {
            line: line + 1,
            msg: msg.to_string(),
        };
        if tokens.first().map(String::as_str) != Some(BLANK_SYMBOL) {
            return Err(fail(0, "first token must be the blank"));
        }
        if tokens.len() < 3 || tokens.last().map(String::as_str) != Some(UNK_SYMBOL) {
            return Err(fail(
                tokens.len().saturating_sub(1),
                "last token must be <unk>",
            ));
        }
        let n_lids = tokens[1..]
            .iter()
            .take_while(|t| parse_lid_symbol(t).is_some())
            .count();
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if !seen.insert(t) {
                return Err(fail(i, "duplicate token"));
            }
            if i > n_lids && parse_lid_symbol(t).is_some() && t != UNK_SYMBOL {
                return Err(fail(i, "language token outside the contiguous block"));
            }
        }
        Ok(Self::from_tokens(tokens, n_lids, unit))
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, unit: Unit) -> Result<Self, LabelError> {
        Self::from_text(&std::fs::read_to_string(path)?, unit)
    }
}

/// Targets for one utterance under each label scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBundle {
    /// language token followed by the transcript
    pub asr: Vec<TokenId>,
    /// the language token repeated `asr.len()` times
    pub lid_tok: Vec<TokenId>,
    /// the language token alone
    pub lid_utt: Vec<TokenId>,
}

pub fn make_labels(text: &str, lid: &str, vocab: &Vocab) -> Result<LabelBundle, LabelError> {
    let lid_id = vocab
        .lid_token(lid)
        .ok_or_else(|| LabelError::UnknownLanguage(lid.to_string()))?;
    let mut asr = vec![lid_id];
    asr.extend(vocab.tokenize(text));
    Ok(LabelBundle {
        lid_tok: vec![lid_id; asr.len()],
        lid_utt: vec![lid_id],
        asr,
    })
}

/// Splits a decoded sequence into its leading language (if any) and text.
/// Blanks and language tokens past the first position are dropped.
pub fn detokenize(seq: &[TokenId], vocab: &Vocab) -> (Option<String>, String) {
    let (lid, rest) = match seq.first() {
        Some(&first) if vocab.is_lid(first) => {
            (vocab.language_of(first).map(str::to_string), &seq[1..])
        }
        _ => (None, seq),
    };
    let units = rest
        .iter()
        .filter(|&&t| t != BLANK && t < vocab.len() && !vocab.is_lid(t))
        .map(|&t| vocab.symbol(t));
    let text = match vocab.unit() {
        Unit::Char => units
            .map(|u| if u == SPACE_SYMBOL { " " } else { u })
            .collect::<String>(),
        Unit::Word => units.collect::<Vec<_>>().join(" "),
    };
    (lid, text)
}

impl fmt::Display for LabelBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "asr={:?} lid_tok={:?} lid_utt={:?}",
            self.asr, self.lid_tok, self.lid_utt
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_lang() -> Vocab {
        Vocab::build([("ab", "L2"), ("ba", "L1")], Unit::Char).unwrap()
    }

    #[test]
    fn ordering_rule() {
        let v = two_lang();
        let syms: Vec<&str> = (0..v.len()).map(|i| v.symbol(i)).collect();
        assert_eq!(syms, vec!["<blank>", "[L1]", "[L2]", "a", "b", "<unk>"]);
        assert_eq!(v.lid_range(), 1..3);
        assert_eq!(v, two_lang());
    }

    #[test]
    fn unseen_char_maps_to_unk() {
        let v = two_lang();
        assert_eq!(v.tokenize("az"), vec![3, 5]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [(&str, &str); 0] = [];
        assert!(matches!(
            Vocab::build(empty, Unit::Char),
            Err(LabelError::EmptyCorpus)
        ));
    }

    #[test]
    fn table_one_rows() {
        let v = Vocab::build([("ALL YOU NEED", "EN_US")], Unit::Word).unwrap();
        let b = make_labels("ALL YOU NEED", "EN_US", &v).unwrap();
        assert_eq!(v.render(&b.asr), "[EN_US] ALL YOU NEED");
        assert_eq!(v.render(&b.lid_tok), "[EN_US] [EN_US] [EN_US] [EN_US]");
        assert_eq!(v.render(&b.lid_utt), "[EN_US]");
        assert_eq!(
            detokenize(&b.asr, &v),
            (Some("EN_US".into()), "ALL YOU NEED".into())
        );
    }

    #[test]
    fn degenerate_and_single_char() {
        let v = two_lang();
        let b = make_labels("", "L1", &v).unwrap();
        assert_eq!(
            (b.asr.clone(), b.lid_tok.clone(), b.lid_utt.clone()),
            (vec![1], vec![1], vec![1])
        );
        let b = make_labels("a", "L1", &v).unwrap();
        assert_eq!(b.asr, vec![1, 3]);
        assert_eq!(b.lid_tok, vec![1, 1]);
        assert!(matches!(
            make_labels("a", "L9", &v),
            Err(LabelError::UnknownLanguage(_))
        ));
    }

    #[test]
    fn detokenize_edge_cases() {
        let v = two_lang();
        assert_eq!(detokenize(&[], &v), (None, String::new()));
        assert_eq!(detokenize(&[3, 4], &v), (None, "ab".into()));
        // stray language tokens are dropped
        assert_eq!(detokenize(&[3, 2, 4], &v), (None, "ab".into()));
    }

    #[test]
    fn spaces_survive_round_trip() {
        let v = Vocab::build([("ab  ba", "L1")], Unit::Char).unwrap();
        let b = make_labels(" ab ba ", "L1", &v).unwrap();
        assert_eq!(detokenize(&b.asr, &v), (Some("L1".into()), "ab ba".into()));
    }

    #[test]
    fn text_file_round_trip() {
        let v = Vocab::build([("ab c", "X"), ("c", "Y")], Unit::Char).unwrap();
        let back = Vocab::from_text(&v.to_text(), Unit::Char).unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_text("a\n<unk>\n", Unit::Char).is_err());
        assert!(Vocab::from_text("<blank>\n[X]\na\na\n<unk>\n", Unit::Char).is_err());
    }
}
