//! Rare-word extraction and per-utterance biasing lists.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Reference words absent from `common_words`, deduplicated and sorted.
pub fn extract_rarewords<'a, I, S>(
    references: I,
    common_words: &HashSet<String>,
) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    references
        .into_iter()
        .flat_map(|words| words.iter())
        .map(|w| w.as_ref().to_lowercase())
        .filter(|w| !common_words.contains(w))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasList {
    pub id: String,
    pub words: Vec<String>,
    /// Set when fewer than the requested number of distractors were available.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub short: bool,
}

/// The utterance's own rare words followed by `n_distractors` other rare words
/// drawn without replacement. The draw is keyed by `(seed, utt_id)` only.
pub fn build_utterance_list(
    utt_id: &str,
    utt_rarewords: &BTreeSet<String>,
    all_rarewords: &BTreeSet<String>,
    n_distractors: usize,
    seed: u64,
) -> BiasList {
    let candidates: Vec<&String> = all_rarewords
        .iter()
        .filter(|w| !utt_rarewords.contains(*w))
        .collect();
    let mut words: Vec<String> = utt_rarewords.iter().cloned().collect();
    let short = candidates.len() < n_distractors;
    if short {
        words.extend(candidates.into_iter().cloned());
    } else {
        let mut rng = rng_for(seed, &["distractors", utt_id]);
        let mut picked: Vec<&String> = candidates
            .choose_multiple(&mut rng, n_distractors)
            .copied()
            .collect();
        picked.sort();
        words.extend(picked.into_iter().cloned());
    }
    BiasList {
        id: utt_id.to_string(),
        words,
        short,
    }
}

/// Builds a list for every `(id, reference words)` pair.
pub fn build_lists<'a, I>(
    utterances: I,
    common_words: &HashSet<String>,
    all_rarewords: &BTreeSet<String>,
    n_distractors: usize,
    seed: u64,
) -> Vec<BiasList>
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    utterances
        .into_iter()
        .map(|(id, words)| {
            let own = extract_rarewords([words], common_words);
            build_utterance_list(id, &own, all_rarewords, n_distractors, seed)
        })
        .collect()
}

pub fn write_jsonl<W: Write>(lists: &[BiasList], mut out: W) -> Result<()> {
    for list in lists {
        serde_json::to_writer(&mut out, list)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<biaslists>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<BTreeMap<String, BiasList>> {
    let mut out = BTreeMap::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<biaslists>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let list: BiasList = serde_json::from_str(&line)?;
        out.insert(list.id.clone(), list);
    }
    Ok(out)
}

pub fn save(lists: &[BiasList], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_jsonl(lists, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, BiasList>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file))
}
