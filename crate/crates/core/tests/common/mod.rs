#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use biaslab::metrics::{align, count_errors, ErrorCounts};
use biaslab::tokenizer::{TokenId, Vocab};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Valid next tokens by brute force: first tokens of every word, plus the token
/// after any proper prefix of a word that ends the stream.
pub fn trie_oracle(vocab: &Vocab, words: &[String], stream: &[TokenId]) -> BTreeSet<TokenId> {
    let mut out = BTreeSet::new();
    for w in words {
        let toks = vocab.word_tokens(w).unwrap();
        out.insert(toks[0]);
        for j in 1..toks.len() {
            if stream.len() >= j && stream[stream.len() - j..] == toks[..j] {
                out.insert(toks[j]);
            }
        }
    }
    out
}

pub struct TrieInstance {
    pub vocab: Vocab,
    pub words: Vec<String>,
    pub stream: Vec<TokenId>,
}

/// Up to 50 words over a small alphabet so prefixes overlap, and a token
/// stream mixing word fragments with random tokens.
pub fn random_trie_instance(rng: &mut impl Rng) -> TrieInstance {
    let alphabet: Vec<char> = "abcde".chars().collect();
    let n_words = rng.random_range(1..=50);
    let words: Vec<String> = (0..n_words)
        .map(|_| {
            let len = rng.random_range(1..=5);
            (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
        })
        .collect();
    let vocab = Vocab::build(
        &alphabet
            .iter()
            .map(|c| c.to_string().repeat(2))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let non_eos: Vec<TokenId> = (0..vocab.size() - 1).map(|i| TokenId(i as u32)).collect();
    let mut stream = Vec::new();
    let target = rng.random_range(0..=20);
    while stream.len() < target {
        if rng.random_bool(0.5) {
            let w = words.choose(rng).unwrap();
            let toks = vocab.word_tokens(w).unwrap();
            let cut = rng.random_range(1..=toks.len());
            stream.extend_from_slice(&toks[..cut]);
        } else {
            stream.push(*non_eos.choose(rng).unwrap());
        }
    }
    TrieInstance {
        vocab,
        words,
        stream,
    }
}

pub struct ScorerFixture {
    pub name: &'static str,
    pub reference: &'static str,
    pub hyp: &'static str,
    pub bias: &'static [&'static str],
    /// substitutions, deletions, insertions, bias errors, unbiased errors,
    /// reference bias words, unbiased errors next to a biased error
    pub expect: [usize; 7],
}

/// Hand-aligned utterances with their error attribution.
pub fn scorer_fixtures() -> Vec<ScorerFixture> {
    vec![
        ScorerFixture {
            name: "bias substitution",
            reference: "my name is kerry",
            hyp: "my name is gary",
            bias: &["kerry"],
            expect: [1, 0, 0, 1, 0, 1, 0],
        },
        ScorerFixture {
            name: "exact match",
            reference: "the cat sat",
            hyp: "the cat sat",
            bias: &["cat"],
            expect: [0, 0, 0, 0, 0, 1, 0],
        },
        ScorerFixture {
            name: "bias deletion",
            reference: "call zanthor now",
            hyp: "call now",
            bias: &["zanthor"],
            expect: [0, 1, 0, 1, 0, 1, 0],
        },
        ScorerFixture {
            name: "common deletion",
            reference: "call zanthor now",
            hyp: "call zanthor",
            bias: &["zanthor"],
            expect: [0, 1, 0, 0, 1, 1, 0],
        },
        ScorerFixture {
            name: "bias-word insertion",
            reference: "call me now",
            hyp: "call me zanthor now",
            bias: &["zanthor"],
            expect: [0, 0, 1, 1, 0, 0, 0],
        },
        ScorerFixture {
            name: "non-bias insertion",
            reference: "call me",
            hyp: "call me uh",
            bias: &[],
            expect: [0, 0, 1, 0, 1, 0, 0],
        },
        ScorerFixture {
            name: "common word replaced by bias word",
            reference: "see the doctor",
            hyp: "see zanthor doctor",
            bias: &["zanthor"],
            expect: [1, 0, 0, 0, 1, 0, 0],
        },
        ScorerFixture {
            name: "adjacent unbiased error",
            reference: "my name is kerry smith",
            hyp: "my name is gary smyth",
            bias: &["kerry"],
            expect: [2, 0, 0, 1, 1, 1, 1],
        },
        ScorerFixture {
            name: "distant unbiased error",
            reference: "kerry went to the shop",
            hyp: "gary went to a shop",
            bias: &["kerry"],
            expect: [2, 0, 0, 1, 1, 1, 0],
        },
        ScorerFixture {
            name: "empty reference",
            reference: "",
            hyp: "a",
            bias: &[],
            expect: [0, 0, 1, 0, 1, 0, 0],
        },
        ScorerFixture {
            name: "empty hypothesis",
            reference: "kerry rang",
            hyp: "",
            bias: &["kerry"],
            expect: [0, 2, 0, 1, 1, 1, 1],
        },
        ScorerFixture {
            name: "split bias word",
            reference: "zanthor is here",
            hyp: "zan thor is here",
            bias: &["zanthor"],
            expect: [1, 0, 1, 1, 1, 1, 1],
        },
        ScorerFixture {
            name: "two bias words, trailing insertion",
            reference: "ask amara about oslo",
            hyp: "ask amor about oslo trip",
            bias: &["amara", "oslo"],
            expect: [1, 0, 1, 1, 1, 2, 0],
        },
    ]
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn fixture_counts(f: &ScorerFixture) -> ErrorCounts {
    let bias: HashSet<String> = f.bias.iter().map(|w| w.to_string()).collect();
    count_errors(&align(&words(f.reference), &words(f.hyp)), &bias)
}

/// Checks one fixture; returns a description of the first mismatch.
pub fn check_fixture(f: &ScorerFixture) -> Result<(), String> {
    let c = fixture_counts(f);
    let got = [
        c.substitutions,
        c.deletions,
        c.insertions,
        c.bias_errors,
        c.unbias_errors,
        c.ref_bias_words,
        c.u_we_b,
    ];
    if got != f.expect {
        return Err(format!(
            "{}: expected {:?}, got {:?}",
            f.name, f.expect, got
        ));
    }
    if c.ref_words != words(f.reference).len() {
        return Err(format!("{}: reference word count {}", f.name, c.ref_words));
    }
    Ok(())
}

pub fn biaslab(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_biaslab"))
        .args(args)
        .output()
        .expect("failed to launch biaslab")
}

/// Runs every subcommand on a small toy setup inside `dir` with `--jobs` and
/// returns the produced files by name.
pub fn run_cli_pipeline(
    dir: &std::path::Path,
    jobs: usize,
) -> Result<std::collections::BTreeMap<String, Vec<u8>>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        dir.join("toy.json"),
        serde_json::to_string(&biaslab::experiment::ToyOptions {
            n_train: 60,
            n_test: 30,
            ..Default::default()
        })
        .unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let jobs = jobs.to_string();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "toy-config".into(),
            "--options".into(),
            p("toy.json"),
            "--out-dir".into(),
            p("cfg"),
        ],
        vec![
            "simulate".into(),
            "--config".into(),
            p("cfg/train.json"),
            "--out".into(),
            p("train.jsonl"),
        ],
        vec![
            "simulate".into(),
            "--config".into(),
            p("cfg/test.json"),
            "--out".into(),
            p("test.jsonl"),
            "--condition".into(),
            "test".into(),
        ],
        vec![
            "biaslists".into(),
            "--corpus".into(),
            p("train.jsonl"),
            "--common".into(),
            p("cfg/common.txt"),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p("train_lists.jsonl"),
        ],
        vec![
            "biaslists".into(),
            "--corpus".into(),
            p("test.jsonl"),
            "--common".into(),
            p("cfg/common.txt"),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p("test_lists.jsonl"),
        ],
        vec![
            "train".into(),
            "--corpus".into(),
            p("train.jsonl"),
            "--biaslists".into(),
            p("train_lists.jsonl"),
            "--epochs".into(),
            "3".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            p("model.ckpt"),
            "--log".into(),
            p("train_log.csv"),
            "--trace".into(),
            p("trace.jsonl"),
        ],
        vec![
            "decode".into(),
            "--corpus".into(),
            p("test.jsonl"),
            "--biaslists".into(),
            p("test_lists.jsonl"),
            "--ckpt".into(),
            p("model.ckpt"),
            "--mode".into(),
            "unscaled".into(),
            "--out".into(),
            p("hyps.jsonl"),
        ],
        vec![
            "decode".into(),
            "--corpus".into(),
            p("test.jsonl"),
            "--biaslists".into(),
            p("test_lists.jsonl"),
            "--ckpt".into(),
            p("model.ckpt"),
            "--mode".into(),
            "scaled".into(),
            "--out".into(),
            p("hyps_scaled.jsonl"),
        ],
        vec![
            "score".into(),
            "--refs".into(),
            p("test.jsonl"),
            "--hyps".into(),
            p("hyps.jsonl"),
            "--biaslists".into(),
            p("test_lists.jsonl"),
            "--out".into(),
            p("report.json"),
            "--per-utt".into(),
            p("per_utt.csv"),
        ],
        vec![
            "sweep-alpha".into(),
            "--options".into(),
            p("toy.json"),
            "--alphas".into(),
            "0.3,0.7".into(),
            "--epochs".into(),
            "2".into(),
            "--out".into(),
            p("sweep.csv"),
        ],
        vec![
            "fd-check".into(),
            "--instances".into(),
            "3".into(),
            "--out".into(),
            p("fd.json"),
        ],
    ];
    for step in &steps {
        let mut args: Vec<&str> = vec!["--jobs", &jobs];
        args.extend(step.iter().map(String::as_str));
        let out = biaslab(&args);
        if !out.status.success() {
            return Err(format!(
                "{step:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let mut files = std::collections::BTreeMap::new();
    for entry in walk(dir) {
        let rel = entry
            .strip_prefix(dir)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        files.insert(rel, std::fs::read(&entry).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}
