//! Word alignment and scoring: WER, B-WER, U-WER and gate FAR/TAR.
//!
//! Errors are attributed to the biased side when the reference word (for
//! substitutions and deletions) or the inserted word (for insertions) is on the
//! utterance's biasing list, otherwise to the unbiased side. Rates are pooled
//! over the corpus.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::BiasMask;

pub const GATE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EditOp {
    Match { reference: String, hyp: String },
    Substitution { reference: String, hyp: String },
    Deletion { reference: String },
    Insertion { hyp: String },
}

impl EditOp {
    pub fn is_error(&self) -> bool {
        !matches!(self, EditOp::Match { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.ops.iter().filter(|o| o.is_error()).count()
    }

    pub fn reference(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|o| match o {
                EditOp::Match { reference, .. }
                | EditOp::Substitution { reference, .. }
                | EditOp::Deletion { reference } => Some(reference.as_str()),
                EditOp::Insertion { .. } => None,
            })
            .collect()
    }

    pub fn hypothesis(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter_map(|o| match o {
                EditOp::Match { hyp, .. }
                | EditOp::Substitution { hyp, .. }
                | EditOp::Insertion { hyp } => Some(hyp.as_str()),
                EditOp::Deletion { .. } => None,
            })
            .collect()
    }
}

/// Minimal edit alignment. Among equal-cost alignments the walk from the start
/// prefers match, then substitution, then deletion, then insertion.
pub fn align<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hyp.len());
    let same = |i: usize, j: usize| reference[i].as_ref() == hyp[j].as_ref();
    // cost[i][j]: edit distance between reference[i..] and hyp[j..]
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let diag = cost[i + 1][j + 1] + usize::from(!same(i, j));
                diag.min(cost[i + 1][j] + 1).min(cost[i][j + 1] + 1)
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = cost[i][j];
        if i < n && j < m && same(i, j) && cost[i + 1][j + 1] == here {
            ops.push(EditOp::Match {
                reference: reference[i].as_ref().into(),
                hyp: hyp[j].as_ref().into(),
            });
            i += 1;
            j += 1;
        } else if i < n && j < m && cost[i + 1][j + 1] + 1 == here {
            ops.push(EditOp::Substitution {
                reference: reference[i].as_ref().into(),
                hyp: hyp[j].as_ref().into(),
            });
            i += 1;
            j += 1;
        } else if i < n && cost[i + 1][j] + 1 == here {
            ops.push(EditOp::Deletion {
                reference: reference[i].as_ref().into(),
            });
            i += 1;
        } else {
            ops.push(EditOp::Insertion {
                hyp: hyp[j].as_ref().into(),
            });
            j += 1;
        }
    }
    Alignment { ops }
}

/// Gate decisions against K at the 0.5 boundary, over positions with a
/// nonempty valid set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    /// In K, gate fired.
    pub true_accept: usize,
    /// In K, gate stayed closed.
    pub missed: usize,
    /// Outside K, gate fired.
    pub false_accept: usize,
    /// Outside K, gate stayed closed.
    pub true_reject: usize,
}

impl GateCounts {
    /// `gates` holds `(p_gen, valid set nonempty)` per position.
    pub fn tally(gates: &[(f64, bool)], mask: &BiasMask) -> Self {
        let mut c = Self::default();
        for (i, &(p_gen, active)) in gates.iter().enumerate() {
            if !active {
                continue;
            }
            let fired = p_gen >= GATE_THRESHOLD;
            match (mask.contains(i), fired) {
                (true, true) => c.true_accept += 1,
                (true, false) => c.missed += 1,
                (false, true) => c.false_accept += 1,
                (false, false) => c.true_reject += 1,
            }
        }
        c
    }

    pub fn add(&mut self, other: &Self) {
        self.true_accept += other.true_accept;
        self.missed += other.missed;
        self.false_accept += other.false_accept;
        self.true_reject += other.true_reject;
    }

    pub fn positions(&self) -> usize {
        self.true_accept + self.missed + self.false_accept + self.true_reject
    }

    /// Percentage of non-bias positions where the gate fired.
    pub fn far(&self) -> Option<f64> {
        percent(self.false_accept, self.false_accept + self.true_reject)
    }

    /// Percentage of bias positions where the gate fired.
    pub fn tar(&self) -> Option<f64> {
        percent(self.true_accept, self.true_accept + self.missed)
    }
}

fn percent(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        if num == 0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some(100.0 * num as f64 / den as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub ref_words: usize,
    pub ref_bias_words: usize,
    pub bias_errors: usize,
    pub unbias_errors: usize,
    /// Unbiased errors within one alignment op of a biased error (a proxy for
    /// unbiased errors caused by biased words).
    pub u_we_b: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, o: &Self) {
        self.ref_words += o.ref_words;
        self.ref_bias_words += o.ref_bias_words;
        self.bias_errors += o.bias_errors;
        self.unbias_errors += o.unbias_errors;
        self.u_we_b += o.u_we_b;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Counts errors of one alignment against a biasing list.
pub fn count_errors(alignment: &Alignment, bias_words: &HashSet<String>) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    // Some(true) biased error, Some(false) unbiased error, None correct
    let side: Vec<Option<bool>> = alignment
        .ops
        .iter()
        .map(|op| match op {
            EditOp::Match { .. } => None,
            EditOp::Substitution { reference, .. } | EditOp::Deletion { reference } => {
                Some(bias_words.contains(reference))
            }
            EditOp::Insertion { hyp } => Some(bias_words.contains(hyp)),
        })
        .collect();
    for op in &alignment.ops {
        match op {
            EditOp::Match { reference, .. }
            | EditOp::Substitution { reference, .. }
            | EditOp::Deletion { reference } => {
                c.ref_words += 1;
                c.ref_bias_words += usize::from(bias_words.contains(reference));
            }
            EditOp::Insertion { .. } => {}
        }
        match op {
            EditOp::Substitution { .. } => c.substitutions += 1,
            EditOp::Deletion { .. } => c.deletions += 1,
            EditOp::Insertion { .. } => c.insertions += 1,
            EditOp::Match { .. } => {}
        }
    }
    for (k, s) in side.iter().enumerate() {
        match s {
            Some(true) => c.bias_errors += 1,
            Some(false) => {
                c.unbias_errors += 1;
                let near = |idx: Option<usize>| {
                    idx.and_then(|i| side.get(i)).copied().flatten() == Some(true)
                };
                if near(k.checked_sub(1)) || near(Some(k + 1)) {
                    c.u_we_b += 1;
                }
            }
            None => {}
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Percentages; `None` marks an undefined rate (errors over an empty denominator).
    pub wer: Option<f64>,
    pub b_wer: Option<f64>,
    pub u_wer: Option<f64>,
    pub far: Option<f64>,
    pub tar: Option<f64>,
    pub counts: ErrorCounts,
    pub gates: GateCounts,
    pub n_gate_positions: usize,
    pub n_utterances: usize,
}

/// One utterance's scoring inputs.
pub struct ScoreItem<'a> {
    pub alignment: &'a Alignment,
    pub bias_words: &'a HashSet<String>,
    /// `(p_gen, valid set nonempty)` per step; empty when biasing was off.
    pub gates: &'a [(f64, bool)],
    pub mask: &'a BiasMask,
}

pub fn score<'a>(items: impl IntoIterator<Item = ScoreItem<'a>>) -> ScoreReport {
    let mut counts = ErrorCounts::default();
    let mut gates = GateCounts::default();
    let mut n = 0;
    for item in items {
        counts.add(&count_errors(item.alignment, item.bias_words));
        gates.add(&GateCounts::tally(item.gates, item.mask));
        n += 1;
    }
    ScoreReport::from_counts(counts, gates, n)
}

impl ScoreReport {
    pub fn from_counts(counts: ErrorCounts, gates: GateCounts, n_utterances: usize) -> Self {
        Self {
            wer: percent(counts.errors(), counts.ref_words),
            b_wer: percent(counts.bias_errors, counts.ref_bias_words),
            u_wer: percent(
                counts.unbias_errors,
                counts.ref_words - counts.ref_bias_words,
            ),
            far: gates.far(),
            tar: gates.tar(),
            counts,
            gates,
            n_gate_positions: gates.positions(),
            n_utterances,
        }
    }

    pub const CSV_HEADER: &'static str =
        "wer,b_wer,u_wer,far,tar,u_we_b,ref_words,ref_bias_words,bias_errors,unbias_errors,n_gate_positions";

    pub fn csv_row(&self) -> String {
        let f = |x: Option<f64>| {
            x.map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into())
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            f(self.wer),
            f(self.b_wer),
            f(self.u_wer),
            f(self.far),
            f(self.tar),
            self.counts.u_we_b,
            self.counts.ref_words,
            self.counts.ref_bias_words,
            self.counts.bias_errors,
            self.counts.unbias_errors,
            self.n_gate_positions
        )
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn bias(ws: &[&str]) -> HashSet<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn identical_is_all_matches() {
        let a = align(&words("a b c"), &words("a b c"));
        assert_eq!(a.ops.len(), 3);
        assert_eq!(a.errors(), 0);
    }

    #[test]
    fn single_substitution() {
        let a = align(&words("my name is kerry"), &words("my name is gary"));
        assert_eq!(a.errors(), 1);
        assert_eq!(
            a.ops[3],
            EditOp::Substitution {
                reference: "kerry".into(),
                hyp: "gary".into()
            }
        );
    }

    #[test]
    fn empty_reference() {
        let a = align::<&str, _>(&[], &words("a"));
        assert_eq!(a.ops, [EditOp::Insertion { hyp: "a".into() }]);
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        // "a b" -> "c": sub+del or del+sub; leftmost preference is sub first
        let a = align(&words("a b"), &words("c"));
        assert!(matches!(a.ops[0], EditOp::Substitution { .. }));
        assert!(matches!(a.ops[1], EditOp::Deletion { .. }));
        // "a" -> "b c": sub+ins preferred over ins+sub
        let a = align(&words("a"), &words("b c"));
        assert!(matches!(a.ops[0], EditOp::Substitution { .. }));
        assert!(matches!(a.ops[1], EditOp::Insertion { .. }));
    }

    #[test]
    fn fig2_scenario() {
        let a = align(&words("my name is kerry"), &words("my name is gary"));
        let b = bias(&["kerry"]);
        let mask = BiasMask::from_positions([], 0);
        let r = score([ScoreItem {
            alignment: &a,
            bias_words: &b,
            gates: &[],
            mask: &mask,
        }]);
        assert_eq!(r.wer, Some(25.0));
        assert_eq!(r.b_wer, Some(100.0));
        assert_eq!(r.u_wer, Some(0.0));
    }

    #[test]
    fn gate_rates() {
        let mask = BiasMask::from_positions([1, 2], 4);
        let g = GateCounts::tally(&[(0.6, true), (0.7, true), (0.2, true), (0.1, true)], &mask);
        assert_eq!(g.tar(), Some(50.0));
        assert_eq!(g.far(), Some(50.0));
        // inactive positions are excluded
        let g = GateCounts::tally(
            &[(0.0, false), (0.7, true), (0.2, true), (0.0, false)],
            &mask,
        );
        assert_eq!(g.positions(), 2);
        assert_eq!(g.far(), Some(0.0));
    }

    #[test]
    fn undefined_bias_rate() {
        let c = ErrorCounts {
            ref_words: 3,
            bias_errors: 1,
            insertions: 1,
            ..Default::default()
        };
        let r = ScoreReport::from_counts(c, GateCounts::default(), 1);
        assert_eq!(r.b_wer, None);
        assert!(r.csv_row().contains("undefined"));
    }

    #[test]
    fn adjacency_proxy() {
        // ref: a kerry b ; hyp: x gary b  -> sub(a,x) unbiased next to sub(kerry,gary)
        let a = align(&words("a kerry b"), &words("x gary b"));
        let c = count_errors(&a, &bias(&["kerry"]));
        assert_eq!(c.bias_errors, 1);
        assert_eq!(c.unbias_errors, 1);
        assert_eq!(c.u_we_b, 1);
    }
}
