//! Synthetic stand-in for a frozen ASR model.
//!
//! Each simulated utterance carries its reference words, a teacher-forced
//! posterior row `p_mdl` per token position, and a synthetic decoder state
//! `h_dec` per position. Decoder states are a fixed encoding of the gold token,
//! the position parity, whether the word is an entity (rare) word, and
//! utterance-level noise; the rendering condition blends in condition-specific
//! noise in proportion to `domain_shift`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::tokenizer::{TokenizedUtterance, Vocab};

pub const CORPUS_FORMAT: &str = "biaslab-corpus";
pub const CORPUS_VERSION: u32 = 1;
const SIZE_WARNING: usize = 10_000;

fn default_entity_signal() -> f64 {
    1.0
}

fn default_state_noise() -> f64 {
    0.5
}

fn default_prefix() -> String {
    "utt".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_utterances: usize,
    /// Inclusive `[min, max]` word count.
    pub words_per_utterance: (usize, usize),
    pub rare_words: Vec<String>,
    pub common_words: Vec<String>,
    pub rare_word_rate: f64,
    pub base_accuracy_common: f64,
    pub base_accuracy_rare: f64,
    #[serde(default)]
    pub confusion_map: BTreeMap<String, String>,
    pub d_h: usize,
    pub domain_shift: f64,
    /// Seed of the token/entity/parity codes. Corpora that must be read by the
    /// same trained module share this seed and their vocabulary words.
    #[serde(default)]
    pub encoding_seed: u64,
    /// Extra words whose characters join the vocabulary.
    #[serde(default)]
    pub vocab_words: Vec<String>,
    /// Per-entry scale of the entity-word direction in `h_dec`.
    #[serde(default = "default_entity_signal")]
    pub entity_signal: f64,
    /// Per-entry standard deviation of the utterance and position noise.
    #[serde(default = "default_state_noise")]
    pub state_noise: f64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {x}")))
            }
        };
        unit("rare_word_rate", self.rare_word_rate)?;
        unit("base_accuracy_common", self.base_accuracy_common)?;
        unit("base_accuracy_rare", self.base_accuracy_rare)?;
        unit("domain_shift", self.domain_shift)?;
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        let (lo, hi) = self.words_per_utterance;
        if lo > hi {
            return Err(Error::Config(format!(
                "words_per_utterance range [{lo}, {hi}] is empty"
            )));
        }
        if self.rare_word_rate > 0.0 && self.rare_words.is_empty() && hi > 0 {
            return Err(Error::Config(
                "rare_word_rate > 0 but the rare word inventory is empty".into(),
            ));
        }
        if self.rare_word_rate < 1.0 && self.common_words.is_empty() && hi > 0 {
            return Err(Error::Config(
                "rare_word_rate < 1 but the common word inventory is empty".into(),
            ));
        }
        let common: BTreeSet<&str> = self.common_words.iter().map(String::as_str).collect();
        if let Some(w) = self.rare_words.iter().find(|w| common.contains(w.as_str())) {
            return Err(Error::Config(format!(
                "word {w:?} is in both the rare and common inventories"
            )));
        }
        for (word, conf) in &self.confusion_map {
            if word.chars().count() != conf.chars().count() {
                return Err(Error::Config(format!(
                    "confusion {word:?} -> {conf:?} must preserve the token length"
                )));
            }
        }
        if !(self.entity_signal.is_finite()
            && self.state_noise.is_finite()
            && self.state_noise >= 0.0)
        {
            return Err(Error::Config(
                "entity_signal/state_noise must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn build_vocab(&self) -> Result<Vocab> {
        let words: Vec<&str> = self
            .common_words
            .iter()
            .chain(&self.rare_words)
            .chain(self.confusion_map.values())
            .chain(&self.vocab_words)
            .map(String::as_str)
            .collect();
        Vocab::build(&words)
    }

    fn accuracy(&self, rare: bool) -> f64 {
        if rare {
            self.base_accuracy_rare
        } else {
            self.base_accuracy_common
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Train,
    Test,
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown condition {other:?}"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimUtterance {
    pub id: String,
    pub ref_words: Vec<String>,
    pub reference: TokenizedUtterance,
    /// U x V teacher-forced base-model posteriors.
    pub p_mdl_seq: Vec<Vec<f64>>,
    /// U x d_h decoder states.
    pub h_dec_seq: Vec<Vec<f64>>,
}

impl SimUtterance {
    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub condition: Condition,
    pub utterances: Vec<SimUtterance>,
}

/// Fixed codes shared by every corpus rendered with the same `encoding_seed`.
struct StateEncoder {
    token_codes: Vec<Vec<f64>>,
    parity: Vec<f64>,
    entity: Vec<f64>,
}

impl StateEncoder {
    fn new(config: &SimConfig, vocab: &Vocab) -> Self {
        let d_h = config.d_h;
        let gaussian = |labels: &[&str], scale: f64| -> Vec<f64> {
            let mut rng = rng_for(config.encoding_seed, labels);
            (0..d_h)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let token_codes = vocab
            .tokens()
            .iter()
            .map(|t| gaussian(&["token", t], 1.0))
            .collect();
        Self {
            token_codes,
            parity: gaussian(&["parity"], 0.5),
            entity: gaussian(&["entity"], config.entity_signal),
        }
    }

    fn clean_states(
        &self,
        config: &SimConfig,
        id: &str,
        reference: &TokenizedUtterance,
        entity_positions: &[bool],
    ) -> Vec<Vec<f64>> {
        let d_h = config.d_h;
        let mut rng = rng_for(config.seed, &["state", id]);
        let sigma = config.state_noise;
        let utt_noise: Vec<f64> = (0..d_h)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        reference
            .tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                let code = &self.token_codes[tok.index()];
                (0..d_h)
                    .map(|k| {
                        let entity = if entity_positions[i] {
                            self.entity[k]
                        } else {
                            0.0
                        };
                        let pos_noise = sigma * rng.sample::<f64, _>(StandardNormal);
                        code[k] + sign * self.parity[k] + entity + utt_noise[k] + pos_noise
                    })
                    .collect()
            })
            .collect()
    }
}

fn render_states(
    encoder: &StateEncoder,
    config: &SimConfig,
    condition: Condition,
    id: &str,
    reference: &TokenizedUtterance,
    entity_positions: &[bool],
) -> Vec<Vec<f64>> {
    let clean = encoder.clean_states(config, id, reference, entity_positions);
    let s = config.domain_shift;
    if s == 0.0 {
        return clean;
    }
    let cond = condition.to_string();
    let mut rng = rng_for(config.seed, &["shift", &cond, id]);
    let spread = 1.0 + config.state_noise;
    clean
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|x| {
                    let fresh = spread * rng.sample::<f64, _>(StandardNormal);
                    (1.0 - s) * x + s * fresh
                })
                .collect()
        })
        .collect()
}

/// Positions whose gold token belongs to a rare-inventory word. EOS is never one.
fn entity_positions(config: &SimConfig, reference: &TokenizedUtterance) -> Vec<bool> {
    let rare: BTreeSet<&str> = config.rare_words.iter().map(String::as_str).collect();
    let mut out = vec![false; reference.len()];
    for span in &reference.word_spans {
        if rare.contains(reference.words[span.word].as_str()) {
            out[span.start..span.end].iter_mut().for_each(|x| *x = true);
        }
    }
    out
}

fn utterance_id(config: &SimConfig, index: usize) -> String {
    format!("{}{:05}", config.id_prefix, index)
}

fn sample_words(config: &SimConfig, id: &str) -> Vec<String> {
    let mut rng = rng_for(config.seed, &["words", id]);
    let (lo, hi) = config.words_per_utterance;
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| {
            let rare = config.rare_word_rate > 0.0 && rng.random::<f64>() < config.rare_word_rate;
            let pool = if rare {
                &config.rare_words
            } else {
                &config.common_words
            };
            pool[rng.random_range(0..pool.len())].clone()
        })
        .collect()
}

fn posterior_rows(
    config: &SimConfig,
    vocab: &Vocab,
    id: &str,
    reference: &TokenizedUtterance,
    entity_positions: &[bool],
) -> Result<Vec<Vec<f64>>> {
    let v = vocab.size();
    let mut targets = reference.tokens.clone();
    for span in &reference.word_spans {
        if let Some(conf) = config.confusion_map.get(&reference.words[span.word]) {
            let conf_tokens = vocab.word_tokens(conf)?;
            targets[span.start..span.end].copy_from_slice(&conf_tokens);
        }
    }
    let mut rng = rng_for(config.seed, &["mdl", id]);
    let rows = targets
        .iter()
        .enumerate()
        .map(|(i, target)| {
            let acc = config.accuracy(entity_positions[i]);
            let mut row = vec![0.0; v];
            if v == 1 {
                row[0] = 1.0;
                return row;
            }
            let weights: Vec<f64> = (0..v - 1).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            let mut others = weights.iter().map(|w| (1.0 - acc) * w / total);
            for (c, slot) in row.iter_mut().enumerate() {
                if c == target.index() {
                    *slot = acc;
                } else {
                    *slot = others.next().unwrap_or(0.0);
                }
            }
            // fold rounding residue into the target so rows sum to 1
            let residue = 1.0 - row.iter().sum::<f64>();
            row[target.index()] += residue;
            row
        })
        .collect();
    Ok(rows)
}

pub fn gen_corpus(config: &SimConfig) -> Result<Corpus> {
    config.validate()?;
    let vocab = config.build_vocab()?;
    let encoder = StateEncoder::new(config, &vocab);
    if config.n_utterances > SIZE_WARNING {
        eprintln!(
            "warning: {} utterances; the JSON-lines corpus format is sized for desk-scale runs",
            config.n_utterances
        );
    }
    let utterances = (0..config.n_utterances)
        .into_par_iter()
        .map(|index| {
            let id = utterance_id(config, index);
            let ref_words = sample_words(config, &id);
            let reference = vocab.tokenize(&ref_words)?;
            let entity = entity_positions(config, &reference);
            let p_mdl_seq = posterior_rows(config, &vocab, &id, &reference, &entity)?;
            let h_dec_seq =
                render_states(&encoder, config, Condition::Train, &id, &reference, &entity);
            Ok(SimUtterance {
                id,
                ref_words,
                reference,
                p_mdl_seq,
                h_dec_seq,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        vocab,
        condition: Condition::Train,
        utterances,
    })
}

/// Re-renders the decoder states of `corpus` under `condition`. References and
/// posteriors are unchanged.
pub fn render_condition(
    corpus: &Corpus,
    condition: Condition,
    config: &SimConfig,
) -> Result<Corpus> {
    config.validate()?;
    let encoder = StateEncoder::new(config, &corpus.vocab);
    let utterances = corpus
        .utterances
        .par_iter()
        .map(|utt| {
            let entity = entity_positions(config, &utt.reference);
            let mut out = utt.clone();
            out.h_dec_seq = render_states(
                &encoder,
                config,
                condition,
                &utt.id,
                &utt.reference,
                &entity,
            );
            out
        })
        .collect();
    Ok(Corpus {
        vocab: corpus.vocab.clone(),
        condition,
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    condition: Condition,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    ref_words: Vec<String>,
    p_mdl_seq: Vec<Vec<f64>>,
    h_dec_seq: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn index_by_id(&self) -> HashMap<&str, &SimUtterance> {
        self.utterances.iter().map(|u| (u.id.as_str(), u)).collect()
    }

    /// Writes the JSON-lines corpus: one header line carrying the vocabulary,
    /// then one line per utterance.
    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            condition: self.condition,
            vocab: self.vocab.tokens().to_vec(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
        for utt in &self.utterances {
            let record = UtteranceRecord {
                id: utt.id.clone(),
                ref_words: utt.ref_words.clone(),
                p_mdl_seq: utt.p_mdl_seq.clone(),
                h_dec_seq: utt.h_dec_seq.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
        }
        out.flush().map_err(|e| Error::io("<corpus>", e))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("corpus", "empty file"))?
            .map_err(|e| Error::io("<corpus>", e))?;
        let header: CorpusHeader = serde_json::from_str(&header_line)?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::format(
                "corpus",
                format!("unsupported header {} v{}", header.format, header.version),
            ));
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        let v = vocab.size();
        let mut utterances = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line)?;
            let reference = vocab.tokenize(&rec.ref_words)?;
            let u = reference.len();
            if rec.p_mdl_seq.len() != u
                || rec.h_dec_seq.len() != u
                || rec.p_mdl_seq.iter().any(|r| r.len() != v)
            {
                return Err(Error::format(
                    "corpus",
                    format!("utterance {} has inconsistent shapes", rec.id),
                ));
            }
            utterances.push(SimUtterance {
                id: rec.id,
                ref_words: rec.ref_words,
                reference,
                p_mdl_seq: rec.p_mdl_seq,
                h_dec_seq: rec.h_dec_seq,
            });
        }
        Ok(Corpus {
            vocab,
            condition: header.condition,
            utterances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}
