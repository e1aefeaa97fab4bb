//! Greedy decoding with optional biasing.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::biastrie::{PrefixTree, TrieCursor};
use crate::error::{Error, Result};
use crate::pointer::{forward_step, interpolate, InterpolationMode, PgParams};
use crate::simulator::SimUtterance;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Base-model argmax only.
    None,
    Scaled,
    Unscaled,
}

impl DecodeMode {
    fn interpolation(self) -> Option<InterpolationMode> {
        match self {
            Self::None => None,
            Self::Scaled => Some(InterpolationMode::Scaled),
            Self::Unscaled => Some(InterpolationMode::Unscaled),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "scaled" => Ok(Self::Scaled),
            "unscaled" => Ok(Self::Unscaled),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Scaled => "scaled",
            Self::Unscaled => "unscaled",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    pub step: usize,
    pub p_gen: f64,
    /// Whether M_i was nonempty at this step.
    pub active: bool,
    pub emitted: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub hyp_words: Vec<String>,
    pub trace: Vec<GateStep>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Decodes one utterance step by step over its posterior rows.
///
/// With `mode` other than `None`, each step computes M_i from the trie cursor,
/// runs the biasing module on the step's decoder state, interpolates and emits
/// the argmax; the cursor then follows the emitted token.
pub fn greedy_decode(
    vocab: &Vocab,
    utt: &SimUtterance,
    biasing: Option<(&PgParams, &PrefixTree)>,
    mode: DecodeMode,
) -> Result<Hypothesis> {
    let interp = match (mode.interpolation(), biasing) {
        (None, _) => None,
        (Some(m), Some(b)) => Some((m, b)),
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "decode mode {mode} needs parameters and a bias trie"
            )))
        }
    };
    let mut cursor = TrieCursor::new();
    let mut tokens = Vec::with_capacity(utt.len());
    let mut trace = Vec::with_capacity(utt.len());
    for (i, p_mdl) in utt.p_mdl_seq.iter().enumerate() {
        let (emitted, p_gen, active) = match interp {
            None => (TokenId(argmax(p_mdl) as u32), 0.0, false),
            Some((m, (params, tree))) => {
                let valid = tree.valid_set(&cursor);
                let step = forward_step(params, &utt.h_dec_seq[i], &valid)?;
                let scores = interpolate(p_mdl, &step, m)?;
                (
                    TokenId(argmax(&scores) as u32),
                    step.p_gen,
                    step.is_active(),
                )
            }
        };
        trace.push(GateStep {
            step: i,
            p_gen,
            active,
            emitted,
        });
        if emitted == vocab.eos() {
            break;
        }
        tokens.push(emitted);
        if let Some((_, (_, tree))) = interp {
            cursor = tree.advance(&cursor, emitted);
        }
    }
    Ok(Hypothesis {
        id: utt.id.clone(),
        hyp_words: vocab.detokenize(&tokens),
        trace,
    })
}

pub fn write_jsonl<W: Write>(hyps: &[Hypothesis], mut out: W) -> Result<()> {
    for h in hyps {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n").map_err(|e| Error::io("<hyps>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<Hypothesis>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<hyps>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
