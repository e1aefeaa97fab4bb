//! Character-level tokenization with explicit word-boundary markers.
//!
//! Every word is spelled as one boundary-marked token for its first character
//! followed by plain tokens for the rest, e.g. `kerry` becomes `▁k e r r y`.
//! Utterances end with a reserved end-of-sequence token.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker prefixed to word-initial tokens.
pub const BOUNDARY: char = '\u{2581}';
pub const EOS: &str = "</s>";
/// Word emitted by [`Vocab::detokenize`] for a run of tokens with no opening boundary token.
pub const MALFORMED_WORD: &str = "<malformed>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    boundary: Vec<bool>,
    eos: TokenId,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    /// Builds the inventory from the characters of `corpus_words`.
    ///
    /// Token strings are sorted lexicographically and EOS is appended last, so
    /// identical word sets always produce identical ids.
    pub fn build<S: AsRef<str>>(corpus_words: &[S]) -> Result<Self> {
        let mut inventory = BTreeSet::new();
        for word in corpus_words {
            let word = word.as_ref().trim().to_lowercase();
            let mut chars = word.chars();
            if let Some(first) = chars.next() {
                inventory.insert(format!("{BOUNDARY}{first}"));
            }
            for ch in chars {
                inventory.insert(ch.to_string());
            }
        }
        if inventory.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut tokens: Vec<String> = inventory.into_iter().collect();
        tokens.push(EOS.to_string());
        Self::from_tokens(tokens)
    }

    /// Reconstructs a vocabulary from its token list (as stored in file headers).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.last().map(String::as_str) != Some(EOS) {
            return Err(Error::format("vocabulary", "last token must be EOS"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut boundary = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let is_eos = i + 1 == tokens.len();
            if !is_eos && tok.trim_start_matches(BOUNDARY).chars().count() != 1 {
                return Err(Error::format("vocabulary", format!("bad token {tok:?}")));
            }
            if index.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::format(
                    "vocabulary",
                    format!("duplicate token {tok:?}"),
                ));
            }
            boundary.push(!is_eos && tok.starts_with(BOUNDARY));
        }
        let eos = TokenId(tokens.len() as u32 - 1);
        Ok(Self {
            tokens,
            index,
            boundary,
            eos,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn is_boundary(&self, id: TokenId) -> bool {
        self.boundary[id.index()]
    }

    /// Token sequence for a single word, without EOS.
    pub fn word_tokens(&self, word: &str) -> Result<Vec<TokenId>> {
        let word = word.to_lowercase();
        let mut out = Vec::with_capacity(word.len());
        for (pos, ch) in word.chars().enumerate() {
            let key = if pos == 0 {
                format!("{BOUNDARY}{ch}")
            } else {
                ch.to_string()
            };
            let id = self.id(&key).ok_or_else(|| Error::UnknownCharacter {
                ch,
                word: word.clone(),
            })?;
            out.push(id);
        }
        Ok(out)
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenizedUtterance> {
        let mut tokens = Vec::new();
        let mut word_spans = Vec::with_capacity(words.len());
        let mut norm_words = Vec::with_capacity(words.len());
        for (w, word) in words.iter().enumerate() {
            let word = word.as_ref().to_lowercase();
            let start = tokens.len();
            tokens.extend(self.word_tokens(&word)?);
            word_spans.push(WordSpan {
                word: w,
                start,
                end: tokens.len(),
            });
            norm_words.push(word);
        }
        tokens.push(self.eos);
        Ok(TokenizedUtterance {
            words: norm_words,
            word_spans,
            tokens,
        })
    }

    /// Splits a token stream into words at boundary-marked tokens, stopping at EOS.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut orphan = false;
        for &id in tokens {
            if id == self.eos {
                break;
            }
            let tok = self.token(id);
            if self.is_boundary(id) {
                orphan = false;
                words.push(tok.trim_start_matches(BOUNDARY).to_string());
            } else if orphan || words.is_empty() {
                if !orphan {
                    words.push(MALFORMED_WORD.to_string());
                    orphan = true;
                }
            } else if let Some(last) = words.last_mut() {
                last.push_str(tok);
            }
        }
        words
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: usize,
    pub start: usize,
    pub end: usize,
}

/// A tokenized word sequence. `tokens` ends with EOS; the word spans cover
/// every position before it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedUtterance {
    pub words: Vec<String>,
    pub word_spans: Vec<WordSpan>,
    pub tokens: Vec<TokenId>,
}

impl TokenizedUtterance {
    /// Number of token positions, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads a one-word-per-line list. Blank lines and surrounding whitespace are ignored;
/// words are lowercased.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut words = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let word = line.trim();
        if !word.is_empty() {
            words.push(word.to_lowercase());
        }
    }
    Ok(words)
}
