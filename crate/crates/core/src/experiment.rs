//! End-to-end pipelines on simulated corpora: toy lexicons and setups, bias
//! list construction, decoding a corpus, scoring, and random instances for
//! gradient checks.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biaslist::{build_lists, extract_rarewords, BiasList};
use crate::biastrie::PrefixTree;
use crate::decoder::{greedy_decode, DecodeMode, Hypothesis};
use crate::error::{Error, Result};
use crate::losses::{bias_positions, TrainExample};
use crate::metrics::{align, score, ScoreItem, ScoreReport};
use crate::pointer::PgParams;
use crate::seeding::rng_for;
use crate::simulator::{gen_corpus, render_condition, Condition, Corpus, SimConfig, SimUtterance};
use crate::tokenizer::{Vocab, BOUNDARY, EOS};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Stand-in for a common-word list.
pub const COMMON_WORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "back", "be",
    "because", "but", "by", "can", "come", "could", "day", "do", "even", "first", "for", "from",
    "get", "give", "go", "good", "have", "he", "her", "here", "him", "his", "how", "i", "if", "in",
    "into", "is", "it", "its", "just", "know", "left", "like", "look", "make", "me", "most", "my",
    "name", "near", "new", "no", "not", "now", "of", "on", "one", "only", "or", "other", "our",
    "out", "over", "people", "please", "right", "road", "say", "see", "she", "so", "some",
    "street", "take", "than", "that", "the", "their", "them", "then", "there", "these", "they",
    "think", "this", "time", "to", "turn", "two", "up", "us", "use", "want", "way", "we", "well",
    "what", "when", "where", "which", "who", "will", "with", "work", "would", "year", "you",
    "your",
];

const ONSETS: &[&str] = &[
    "b", "ch", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "sh", "t", "v", "w", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ee", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "ng", "m"];

fn swap_consonant(c: char) -> char {
    match c {
        'b' => 'p',
        'p' => 'b',
        'd' => 't',
        't' => 'd',
        'g' => 'k',
        'k' => 'g',
        'f' => 'v',
        'v' => 'f',
        's' => 'z',
        'z' => 's',
        'm' => 'n',
        'n' => 'm',
        'l' => 'r',
        'r' => 'l',
        'j' => 'y',
        'h' => 'w',
        'w' => 'h',
        'c' => 'g',
        other => other,
    }
}

fn swap_vowel(c: char) -> char {
    match c {
        'a' => 'e',
        'e' => 'a',
        'i' => 'e',
        'o' => 'u',
        'u' => 'o',
        other => other,
    }
}

/// A sound-alike of `word` with the same length: first consonant voicing
/// swapped and first vowel shifted.
pub fn sound_alike(word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if let Some(first) = chars.first_mut() {
        *first = swap_consonant(*first);
    }
    if let Some(v) = chars.iter_mut().skip(1).find(|c| "aeiou".contains(**c)) {
        *v = swap_vowel(*v);
    }
    chars.into_iter().collect()
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

/// Disjoint train/test rare inventories, their sound-alike confusions, and the
/// common list.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLexicon {
    pub common: Vec<String>,
    pub rare_train: Vec<String>,
    pub rare_test: Vec<String>,
    pub confusions: BTreeMap<String, String>,
}

impl ToyLexicon {
    pub fn generate(seed: u64, n_rare_train: usize, n_rare_test: usize) -> Self {
        let common: Vec<String> = COMMON_WORDS.iter().map(|w| w.to_string()).collect();
        let mut taken: HashSet<String> = common.iter().cloned().collect();
        let mut rng = rng_for(seed, &["lexicon"]);
        let mut rare = Vec::with_capacity(n_rare_train + n_rare_test);
        let mut confusions = BTreeMap::new();
        while rare.len() < n_rare_train + n_rare_test {
            let w = pseudo_word(&mut rng);
            let alike = sound_alike(&w);
            if w.len() < 4 || alike == w || taken.contains(&w) || taken.contains(&alike) {
                continue;
            }
            taken.insert(w.clone());
            taken.insert(alike.clone());
            confusions.insert(w.clone(), alike);
            rare.push(w);
        }
        let rare_test = rare.split_off(n_rare_train);
        Self {
            common,
            rare_train: rare,
            rare_test,
            confusions,
        }
    }

    pub fn all_words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.common.clone();
        out.extend(self.rare_train.iter().cloned());
        out.extend(self.rare_test.iter().cloned());
        out.extend(self.confusions.values().cloned());
        out
    }
}

/// A train/test simulation pair sharing one vocabulary and state encoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToySetup {
    pub train: SimConfig,
    pub test: SimConfig,
    pub n_distractors: usize,
    pub list_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_rare_train: usize,
    pub n_rare_test: usize,
    pub rare_word_rate: f64,
    pub base_accuracy_common: f64,
    pub base_accuracy_rare: f64,
    /// Fraction of rare words given a sound-alike confusion.
    pub confusion_fraction: f64,
    /// Whether the training corpus also carries confusions.
    pub confuse_train: bool,
    pub d_h: usize,
    pub domain_shift: f64,
    pub n_distractors: usize,
    pub entity_signal: f64,
    pub state_noise: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            seed: 3,
            n_train: 500,
            n_test: 200,
            n_rare_train: 60,
            n_rare_test: 40,
            rare_word_rate: 0.15,
            base_accuracy_common: 0.9,
            base_accuracy_rare: 0.6,
            confusion_fraction: 1.0,
            confuse_train: true,
            d_h: 48,
            domain_shift: 0.3,
            n_distractors: 10,
            entity_signal: 0.7,
            state_noise: 0.5,
        }
    }
}

impl ToyOptions {
    /// A perfect base model with no confusions on the training corpus.
    pub fn already_fit(self) -> Self {
        Self {
            base_accuracy_common: 1.0,
            base_accuracy_rare: 1.0,
            confuse_train: false,
            ..self
        }
    }
}

impl ToySetup {
    pub fn new(opts: &ToyOptions) -> Self {
        let lex = ToyLexicon::generate(opts.seed, opts.n_rare_train, opts.n_rare_test);
        let mut rng = rng_for(opts.seed, &["confusion-subset"]);
        let confusions: BTreeMap<String, String> = lex
            .confusions
            .iter()
            .filter(|_| rng.random::<f64>() < opts.confusion_fraction)
            .map(|(a, b)| (a.clone(), b.clone()))
            .collect();
        let pick = |inventory: &[String], on: bool| -> BTreeMap<String, String> {
            if !on {
                return BTreeMap::new();
            }
            inventory
                .iter()
                .filter_map(|w| confusions.get(w).map(|c| (w.clone(), c.clone())))
                .collect()
        };
        let base = SimConfig {
            seed: opts.seed,
            n_utterances: opts.n_train,
            words_per_utterance: (4, 10),
            rare_words: lex.rare_train.clone(),
            common_words: lex.common.clone(),
            rare_word_rate: opts.rare_word_rate,
            base_accuracy_common: opts.base_accuracy_common,
            base_accuracy_rare: opts.base_accuracy_rare,
            confusion_map: pick(&lex.rare_train, opts.confuse_train),
            d_h: opts.d_h,
            domain_shift: opts.domain_shift,
            encoding_seed: opts.seed,
            vocab_words: lex.all_words(),
            entity_signal: opts.entity_signal,
            state_noise: opts.state_noise,
            id_prefix: "train".into(),
        };
        let test = SimConfig {
            seed: crate::seeding::derive_seed(opts.seed, &["test-corpus"]),
            n_utterances: opts.n_test,
            rare_words: lex.rare_test.clone(),
            confusion_map: pick(&lex.rare_test, true),
            id_prefix: "test".into(),
            ..base.clone()
        };
        Self {
            train: base,
            test,
            n_distractors: opts.n_distractors,
            list_seed: opts.seed,
        }
    }

    pub fn train_corpus(&self) -> Result<Corpus> {
        gen_corpus(&self.train)
    }

    /// Test corpus rendered under the test condition.
    pub fn test_corpus(&self) -> Result<Corpus> {
        let c = gen_corpus(&self.test)?;
        render_condition(&c, Condition::Test, &self.test)
    }

    pub fn common_set(&self) -> HashSet<String> {
        self.train.common_words.iter().cloned().collect()
    }
}

/// Biasing lists for every utterance: own rare words plus `n_distractors`
/// drawn from the corpus-wide rare set.
pub fn corpus_bias_lists(
    corpus: &Corpus,
    common: &HashSet<String>,
    n_distractors: usize,
    seed: u64,
) -> BTreeMap<String, BiasList> {
    let all = extract_rarewords(
        corpus.utterances.iter().map(|u| u.ref_words.as_slice()),
        common,
    );
    build_lists(
        corpus
            .utterances
            .iter()
            .map(|u| (u.id.as_str(), u.ref_words.as_slice())),
        common,
        &all,
        n_distractors,
        seed,
    )
    .into_iter()
    .map(|l| (l.id.clone(), l))
    .collect()
}

fn list_for<'a>(lists: &'a BTreeMap<String, BiasList>, id: &str) -> Result<&'a BiasList> {
    lists
        .get(id)
        .ok_or_else(|| Error::Config(format!("no biasing list for utterance {id}")))
}

pub fn prepare_examples(
    corpus: &Corpus,
    lists: &BTreeMap<String, BiasList>,
) -> Result<Vec<TrainExample>> {
    corpus
        .utterances
        .par_iter()
        .map(|utt| {
            let list = list_for(lists, &utt.id)?;
            let tree = PrefixTree::build(&corpus.vocab, &list.words)?;
            TrainExample::prepare(utt, &tree, &list.words)
        })
        .collect()
}

pub fn decode_corpus(
    corpus: &Corpus,
    params: Option<&PgParams>,
    lists: &BTreeMap<String, BiasList>,
    mode: DecodeMode,
) -> Result<Vec<Hypothesis>> {
    corpus
        .utterances
        .par_iter()
        .map(|utt| {
            if mode == DecodeMode::None {
                return greedy_decode(&corpus.vocab, utt, None, mode);
            }
            let params =
                params.ok_or_else(|| Error::Config("biased decoding needs parameters".into()))?;
            let list = list_for(lists, &utt.id)?;
            let tree = PrefixTree::build(&corpus.vocab, &list.words)?;
            greedy_decode(&corpus.vocab, utt, Some((params, &tree)), mode)
        })
        .collect()
}

/// Scores hypotheses against the corpus references. Gate positions are matched
/// to reference positions by step index.
pub fn score_corpus(
    utterances: &[SimUtterance],
    hyps: &[Hypothesis],
    lists: &BTreeMap<String, BiasList>,
) -> Result<ScoreReport> {
    let by_id: BTreeMap<&str, &Hypothesis> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    let mut prepared = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let hyp = by_id
            .get(utt.id.as_str())
            .ok_or_else(|| Error::Config(format!("no hypothesis for utterance {}", utt.id)))?;
        let list = list_for(lists, &utt.id)?;
        let alignment = align(&utt.ref_words, &hyp.hyp_words);
        let words: HashSet<String> = list.words.iter().cloned().collect();
        let mask = bias_positions(&utt.reference, &list.words);
        let gates: Vec<(f64, bool)> = hyp.trace.iter().map(|g| (g.p_gen, g.active)).collect();
        prepared.push((alignment, words, gates, mask));
    }
    Ok(score(prepared.iter().map(|(a, w, g, m)| ScoreItem {
        alignment: a,
        bias_words: w,
        gates: g,
        mask: m,
    })))
}

#[derive(Clone, Debug)]
pub struct BiasingRun {
    pub outcome: TrainOutcome,
    pub unbiased: ScoreReport,
    pub biased: ScoreReport,
}

/// Training corpus of a setup together with its prepared examples.
pub fn train_examples(setup: &ToySetup) -> Result<(Corpus, Vec<TrainExample>)> {
    let corpus = setup.train_corpus()?;
    let lists = corpus_bias_lists(
        &corpus,
        &setup.common_set(),
        setup.n_distractors,
        setup.list_seed,
    );
    let examples = prepare_examples(&corpus, &lists)?;
    Ok((corpus, examples))
}

/// Mean teacher-forced p_gen over bias positions; `None` without any.
pub fn mean_gate_on_bias(params: &PgParams, examples: &[TrainExample]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let steps = ex.forward(params)?;
        for &i in ex.mask.positions() {
            sum += steps[i].p_gen;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Trains on the setup's train corpus and scores the test corpus with biasing
/// off and with `mode`.
pub fn run_biasing(setup: &ToySetup, config: &TrainConfig, mode: DecodeMode) -> Result<BiasingRun> {
    let common = setup.common_set();
    let (train_corpus, examples) = train_examples(setup)?;
    let outcome = train(&examples, train_corpus.vocab.size(), config, None)?;

    let test_corpus = setup.test_corpus()?;
    let test_lists = corpus_bias_lists(&test_corpus, &common, setup.n_distractors, setup.list_seed);
    let plain = decode_corpus(&test_corpus, None, &test_lists, DecodeMode::None)?;
    let biased = decode_corpus(&test_corpus, Some(&outcome.params), &test_lists, mode)?;
    Ok(BiasingRun {
        unbiased: score_corpus(&test_corpus.utterances, &plain, &test_lists)?,
        biased: score_corpus(&test_corpus.utterances, &biased, &test_lists)?,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub vocab: usize,
    pub embed: usize,
    pub state: usize,
    pub len: usize,
}

/// A random small instance for finite-difference checks: vocabulary of
/// `dims.vocab` tokens, one utterance of `dims.len` tokens (EOS included) whose
/// biasing list contains at least one of its words plus random others, random
/// posteriors, decoder states and parameters.
pub fn random_instance(
    seed: u64,
    dims: InstanceDims,
) -> Result<(Vocab, PgParams, Vec<TrainExample>)> {
    if dims.vocab < 3 || dims.len < 2 {
        return Err(Error::Config(
            "random instance needs V >= 3 and U >= 2".into(),
        ));
    }
    let mut rng = rng_for(seed, &["fd-instance"]);
    let letters: Vec<char> = ('a'..='z').collect();
    let n_boundary = ((dims.vocab - 1) / 2).max(1);
    let n_plain = dims.vocab - 1 - n_boundary;
    let mut shuffled = letters.clone();
    shuffled.shuffle(&mut rng);
    let starts: Vec<char> = shuffled[..n_boundary].to_vec();
    shuffled.shuffle(&mut rng);
    let inner: Vec<char> = shuffled[..n_plain].to_vec();
    let mut tokens: Vec<String> = starts
        .iter()
        .map(|c| format!("{BOUNDARY}{c}"))
        .chain(inner.iter().map(|c| c.to_string()))
        .collect();
    tokens.sort();
    tokens.push(EOS.to_string());
    let vocab = Vocab::from_tokens(tokens)?;

    let word = |rng: &mut rand_chacha::ChaCha8Rng, len: usize| -> String {
        let mut w = String::new();
        w.push(*starts.choose(rng).unwrap());
        for _ in 1..len {
            match inner.choose(rng) {
                Some(c) => w.push(*c),
                None => break,
            }
        }
        w
    };
    let mut ref_words = Vec::new();
    let mut remaining = dims.len - 1;
    while remaining > 0 {
        let max = if inner.is_empty() {
            1
        } else {
            remaining.min(4)
        };
        let n = rng.random_range(1..=max);
        ref_words.push(word(&mut rng, n));
        remaining -= n;
    }
    let mut bias: Vec<String> = vec![ref_words[rng.random_range(0..ref_words.len())].clone()];
    for _ in 0..rng.random_range(1..=4) {
        let n = rng.random_range(1..=4);
        bias.push(word(&mut rng, n));
    }
    bias.sort();
    bias.dedup();

    let reference = vocab.tokenize(&ref_words)?;
    let v = vocab.size();
    let p_mdl_seq = (0..reference.len())
        .map(|_| {
            let w: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect();
    let h_dec_seq = (0..reference.len())
        .map(|_| {
            (0..dims.state)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let utt = SimUtterance {
        id: format!("fd{seed}"),
        ref_words,
        reference,
        p_mdl_seq,
        h_dec_seq,
    };
    let tree = PrefixTree::build(&vocab, &bias)?;
    let ex = TrainExample::prepare(&utt, &tree, &bias)?;
    let mut params = PgParams::init(seed, v, dims.embed, dims.state)?;
    params.b_g = rng.random_range(-1.5..1.5);
    Ok((vocab, params, vec![ex]))
}

/// Rare words of a corpus relative to a common list, for reporting.
pub fn corpus_rarewords(corpus: &Corpus, common: &HashSet<String>) -> BTreeSet<String> {
    extract_rarewords(
        corpus.utterances.iter().map(|u| u.ref_words.as_slice()),
        common,
    )
}
