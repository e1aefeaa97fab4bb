mod common;

use std::collections::HashSet;

use biaslab::losses::BiasMask;
use biaslab::metrics::{align, count_errors, score, EditOp, GateCounts, ScoreItem};
use proptest::prelude::*;

fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, y) in b.iter().enumerate() {
            cur.push(
                (prev[j] + usize::from(x != y))
                    .min(prev[j + 1] + 1)
                    .min(cur[j] + 1),
            );
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn crafted_fixtures_count_exactly() {
    let fixtures = common::scorer_fixtures();
    assert!(fixtures.len() >= 10);
    for f in &fixtures {
        common::check_fixture(f).unwrap();
    }
}

#[test]
fn kerry_fixture_rates() {
    let ref_words = common::words("my name is kerry");
    let bias: HashSet<String> = ["kerry".to_string()].into();
    let a = align(&ref_words, &common::words("my name is gary"));
    let mask = BiasMask::from_positions([], 0);
    let r = score([ScoreItem {
        alignment: &a,
        bias_words: &bias,
        gates: &[],
        mask: &mask,
    }]);
    assert_eq!(r.wer, Some(25.0));
    assert_eq!(r.b_wer, Some(100.0));
    assert_eq!(r.u_wer, Some(0.0));
    assert_eq!(r.far, Some(0.0));
}

#[test]
fn gate_fixture_half_and_half() {
    let gates = [(0.6, true), (0.7, true), (0.2, true), (0.1, true)];
    let mask = BiasMask::from_positions([1, 2], 4);
    let c = GateCounts::tally(&gates, &mask);
    assert_eq!(
        (c.true_accept, c.missed, c.false_accept, c.true_reject),
        (1, 1, 1, 1)
    );
    assert_eq!(c.tar(), Some(50.0));
    assert_eq!(c.far(), Some(50.0));
}

#[test]
fn inactive_positions_are_not_gate_decisions() {
    let gates = [(0.0, false), (0.9, true), (0.0, false)];
    let mask = BiasMask::from_positions([0, 1], 3);
    let c = GateCounts::tally(&gates, &mask);
    assert_eq!(c.positions(), 1);
    assert_eq!(c.tar(), Some(100.0));
    assert_eq!(c.far(), Some(0.0));
}

#[test]
fn bias_insertions_without_bias_references_leave_rate_undefined() {
    let bias: HashSet<String> = ["zanthor".to_string()].into();
    let a = align(&common::words("call me"), &common::words("call zanthor me"));
    let mask = BiasMask::from_positions([], 0);
    let r = score([ScoreItem {
        alignment: &a,
        bias_words: &bias,
        gates: &[],
        mask: &mask,
    }]);
    assert_eq!(r.counts.bias_errors, 1);
    assert_eq!(r.b_wer, None);
    assert!(r.csv_row().contains("undefined"));
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "kay", "zed"]),
        0..7,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn alignment_is_minimal_and_consistent(r in sentence(), h in sentence()) {
        let a = align(&r, &h);
        prop_assert_eq!(a.errors(), levenshtein(&r, &h));
        prop_assert_eq!(a.reference(), r.iter().map(String::as_str).collect::<Vec<_>>());
        prop_assert_eq!(a.hypothesis(), h.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn attribution_matches_recount(corpus in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let bias: HashSet<String> = ["kay".to_string(), "zed".to_string()].into();
        let mut total_bias = 0;
        let mut total_unbias = 0;
        let mut total_ref_bias = 0;
        let mut alignments = Vec::new();
        for (r, h) in &corpus {
            let a = align(r, h);
            for op in &a.ops {
                let word = match op {
                    EditOp::Match { .. } => continue,
                    EditOp::Substitution { reference, .. } | EditOp::Deletion { reference } => reference,
                    EditOp::Insertion { hyp } => hyp,
                };
                if bias.contains(word) { total_bias += 1 } else { total_unbias += 1 }
            }
            total_ref_bias += r.iter().filter(|w| bias.contains(*w)).count();
            let c = count_errors(&a, &bias);
            prop_assert_eq!(c.bias_errors + c.unbias_errors, c.errors());
            prop_assert!(c.u_we_b <= c.unbias_errors);
            alignments.push(a);
        }
        let mask = BiasMask::from_positions([], 0);
        let items = || alignments.iter().map(|a| ScoreItem { alignment: a, bias_words: &bias, gates: &[], mask: &mask });
        let report = score(items());
        prop_assert_eq!(report.counts.bias_errors, total_bias);
        prop_assert_eq!(report.counts.unbias_errors, total_unbias);
        prop_assert_eq!(report.counts.ref_bias_words, total_ref_bias);
        let reversed = score(alignments.iter().rev().map(|a| ScoreItem { alignment: a, bias_words: &bias, gates: &[], mask: &mask }));
        prop_assert_eq!(reversed, report);
    }

    #[test]
    fn gate_rates_ignore_utterance_order(
        traces in prop::collection::vec(prop::collection::vec((0.0f64..1.0, any::<bool>(), any::<bool>()), 1..8), 1..5)
    ) {
        let tallies: Vec<GateCounts> = traces
            .iter()
            .map(|t| {
                let gates: Vec<(f64, bool)> = t.iter().map(|&(p, active, _)| (p, active)).collect();
                let mask = BiasMask::from_positions(t.iter().enumerate().filter(|x| x.1 .2).map(|x| x.0), t.len());
                GateCounts::tally(&gates, &mask)
            })
            .collect();
        let mut fwd = GateCounts::default();
        tallies.iter().for_each(|c| fwd.add(c));
        let mut rev = GateCounts::default();
        tallies.iter().rev().for_each(|c| rev.add(c));
        prop_assert_eq!(fwd.far(), rev.far());
        prop_assert_eq!(fwd.tar(), rev.tar());
    }
}
