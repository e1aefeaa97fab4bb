//! Training objectives for the biasing module and their analytic gradients.
//!
//! * `asr`: cross-entropy of the interpolated distribution at the gold token.
//! * `gen`: alpha-weighted binary cross-entropy teaching the gate to fire on
//!   bias positions K and stay closed elsewhere.
//! * `ptr`: cross-entropy of the copy distribution at the gold token, on K only.
//!
//! Two-loss training minimizes `gen + ptr`; the baseline minimizes `asr`.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biastrie::{teacher_forced_sets, PrefixTree};
use crate::error::{Error, Result};
use crate::pointer::{
    backward_step, forward_step, interpolate, InterpolationMode, PgParams, StepOutput,
};
use crate::simulator::SimUtterance;
use crate::tokenizer::{TokenId, TokenizedUtterance};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 0.7;

#[inline]
fn clamped_ln(x: f64) -> (f64, bool) {
    if x < LOG_FLOOR {
        (LOG_FLOOR.ln(), true)
    } else {
        (x.ln(), false)
    }
}

/// Token positions lying inside biasing-list words (the set K).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiasMask {
    positions: BTreeSet<usize>,
    len: usize,
}

impl BiasMask {
    pub fn contains(&self, i: usize) -> bool {
        self.positions.contains(&i)
    }

    pub fn positions(&self) -> &BTreeSet<usize> {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn from_positions(positions: impl IntoIterator<Item = usize>, len: usize) -> Self {
        let positions: BTreeSet<usize> = positions.into_iter().filter(|&p| p < len).collect();
        Self { positions, len }
    }
}

pub fn bias_positions<S: AsRef<str>>(reference: &TokenizedUtterance, bias_words: &[S]) -> BiasMask {
    let words: HashSet<&str> = bias_words.iter().map(|w| w.as_ref()).collect();
    let positions = reference
        .word_spans
        .iter()
        .filter(|span| words.contains(reference.words[span.word].as_str()))
        .flat_map(|span| span.start..span.end)
        .collect();
    BiasMask {
        positions,
        len: reference.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AsrLoss {
    pub value: f64,
    /// Positions whose gold probability hit the log floor.
    pub clamped: usize,
}

/// Negative log-likelihood of the reference tokens under `p_seq`.
pub fn loss_asr(p_seq: &[Vec<f64>], reference: &TokenizedUtterance) -> Result<AsrLoss> {
    if p_seq.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            got: p_seq.len(),
        });
    }
    let mut out = AsrLoss::default();
    for (row, gold) in p_seq.iter().zip(&reference.tokens) {
        let (ln, clamped) = clamped_ln(row[gold.index()]);
        out.value -= ln;
        out.clamped += clamped as usize;
    }
    Ok(out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

pub fn loss_gen(p_gen_seq: &[f64], mask: &BiasMask, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p_gen_seq.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            got: p_gen_seq.len(),
        });
    }
    Ok(p_gen_seq
        .iter()
        .enumerate()
        .map(|(i, &p)| gen_term(p, mask.contains(i), alpha).0)
        .sum())
}

/// Loss term and its derivative with respect to `p_gen` at one position.
#[inline]
fn gen_term(p_gen: f64, biased: bool, alpha: f64) -> (f64, f64) {
    if biased {
        let (ln, clamped) = clamped_ln(p_gen);
        (-alpha * ln, if clamped { 0.0 } else { -alpha / p_gen })
    } else {
        let (ln, clamped) = clamped_ln(1.0 - p_gen);
        (
            -(1.0 - alpha) * ln,
            if clamped {
                0.0
            } else {
                (1.0 - alpha) / (1.0 - p_gen)
            },
        )
    }
}

pub fn loss_ptr(
    steps: &[StepOutput],
    reference: &TokenizedUtterance,
    mask: &BiasMask,
) -> Result<f64> {
    if steps.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            got: steps.len(),
        });
    }
    let mut total = 0.0;
    for &i in mask.positions() {
        let gold = reference.tokens[i];
        if steps[i].m_i.binary_search(&gold).is_err() {
            return Err(Error::MaskTrieInconsistency(i));
        }
        total -= clamped_ln(steps[i].p_ptr[gold.index()]).0;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    TwoLoss,
    Asr,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_loss" => Ok(Self::TwoLoss),
            "asr" => Ok(Self::Asr),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoLoss => "two_loss",
            Self::Asr => "asr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(mode: LossMode, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { mode, alpha })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_asr: f64,
    pub l_gen: f64,
    pub l_ptr: f64,
    pub total: f64,
    pub clamped: usize,
}

impl LossReport {
    fn accumulate(&mut self, other: &LossReport) {
        self.l_asr += other.l_asr;
        self.l_gen += other.l_gen;
        self.l_ptr += other.l_ptr;
        self.total += other.total;
        self.clamped += other.clamped;
    }
}

/// An utterance prepared for teacher-forced training: gold tokens, the
/// per-step valid sets from a trie walk over the gold prefix, and the mask K.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub reference: TokenizedUtterance,
    pub p_mdl_seq: Vec<Vec<f64>>,
    pub h_dec_seq: Vec<Vec<f64>>,
    pub valid_sets: Vec<BTreeSet<TokenId>>,
    pub mask: BiasMask,
}

impl TrainExample {
    pub fn prepare<S: AsRef<str>>(
        utt: &SimUtterance,
        tree: &PrefixTree,
        bias_words: &[S],
    ) -> Result<Self> {
        let valid_sets = teacher_forced_sets(tree, &utt.reference.tokens);
        let mask = bias_positions(&utt.reference, bias_words);
        for &i in mask.positions() {
            if !valid_sets[i].contains(&utt.reference.tokens[i]) {
                return Err(Error::MaskTrieInconsistency(i));
            }
        }
        Ok(Self {
            id: utt.id.clone(),
            reference: utt.reference.clone(),
            p_mdl_seq: utt.p_mdl_seq.clone(),
            h_dec_seq: utt.h_dec_seq.clone(),
            valid_sets,
            mask,
        })
    }

    pub fn forward(&self, params: &PgParams) -> Result<Vec<StepOutput>> {
        self.h_dec_seq
            .iter()
            .zip(&self.valid_sets)
            .map(|(h, m)| forward_step(params, h, m))
            .collect()
    }
}

/// Loss of one example and, when `grads` is given, its gradient accumulated there.
pub fn example_loss(
    params: &PgParams,
    ex: &TrainExample,
    config: &LossConfig,
    mut grads: Option<&mut PgParams>,
) -> Result<LossReport> {
    check_alpha(config.alpha)?;
    let steps = ex.forward(params)?;
    let mut report = LossReport::default();
    let mut d_ptr: Vec<f64> = Vec::new();

    for (i, step) in steps.iter().enumerate() {
        let gold = ex.reference.tokens[i];
        let biased = ex.mask.contains(i);
        let gold_slot = step.m_i.binary_search(&gold).ok();
        if biased && gold_slot.is_none() {
            return Err(Error::MaskTrieInconsistency(i));
        }

        // asr: always reported, differentiated only in asr mode
        let p_mdl_gold = ex.p_mdl_seq[i][gold.index()];
        let p_ptr_gold = step.p_ptr[gold.index()];
        let mixed = p_mdl_gold * (1.0 - step.p_gen) + p_ptr_gold * step.p_gen;
        let (ln_mixed, asr_clamped) = clamped_ln(mixed);
        report.l_asr -= ln_mixed;
        report.clamped += asr_clamped as usize;

        // gen
        let (gen_loss, gen_grad) = gen_term(step.p_gen, biased, config.alpha);
        let gen_applies = step.is_active();
        if gen_applies {
            report.l_gen += gen_loss;
        }

        // ptr
        let mut ptr_grad = 0.0;
        if biased {
            let (ln, clamped) = clamped_ln(p_ptr_gold);
            report.l_ptr -= ln;
            if !clamped {
                ptr_grad = -1.0 / p_ptr_gold;
            }
        }

        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };
        if !step.is_active() {
            continue;
        }
        d_ptr.clear();
        d_ptr.resize(step.m_i.len(), 0.0);
        let d_gen = match config.mode {
            LossMode::TwoLoss => {
                if let Some(slot) = gold_slot.filter(|_| biased) {
                    d_ptr[slot] = ptr_grad;
                }
                gen_grad
            }
            LossMode::Asr => {
                if asr_clamped {
                    0.0
                } else {
                    if let Some(slot) = gold_slot {
                        d_ptr[slot] = -step.p_gen / mixed;
                    }
                    -(p_ptr_gold - p_mdl_gold) / mixed
                }
            }
        };
        backward_step(params, &ex.h_dec_seq[i], step, &d_ptr, d_gen, grads);
    }

    report.total = match config.mode {
        LossMode::TwoLoss => report.l_gen + report.l_ptr,
        LossMode::Asr => report.l_asr,
    };
    Ok(report)
}

/// Sum of losses over `batch`, without gradients.
pub fn batch_loss<B: Borrow<TrainExample> + Sync>(
    params: &PgParams,
    batch: &[B],
    config: &LossConfig,
) -> Result<LossReport> {
    let reports = batch
        .par_iter()
        .map(|ex| example_loss(params, ex.borrow(), config, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_sum(reports, |mut a, b| {
        a.accumulate(&b);
        a
    })
    .unwrap_or_default())
}

/// Losses and gradients summed over `batch`.
///
/// Per-utterance work fans out across the rayon pool; the reduction is a fixed
/// pairwise tree over batch order, so the result does not depend on thread count.
pub fn grad<B: Borrow<TrainExample> + Sync>(
    params: &PgParams,
    batch: &[B],
    config: &LossConfig,
) -> Result<(PgParams, LossReport)> {
    let parts = batch
        .par_iter()
        .map(|ex| {
            let ex = ex.borrow();
            let mut g = PgParams::zeros_like(params);
            let report = example_loss(params, ex, config, Some(&mut g))?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(ex.id.clone()));
            }
            Ok((g, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let summed = tree_sum(parts, |mut a, b| {
        a.0.add_scaled(&b.0, 1.0);
        a.1.accumulate(&b.1);
        a
    });
    Ok(summed.unwrap_or_else(|| (PgParams::zeros_like(params), LossReport::default())))
}

fn tree_sum<T>(mut items: Vec<T>, combine: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient of the batch total with central differences
/// on every scalar parameter.
pub fn fd_check<B: Borrow<TrainExample> + Sync>(
    params: &PgParams,
    batch: &[B],
    config: &LossConfig,
    h: f64,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    fd_check_any_step(params, batch, config, h)
}

/// [`fd_check`] without the step-size guard, for probing discretization error.
pub fn fd_check_any_step<B: Borrow<TrainExample> + Sync>(
    params: &PgParams,
    batch: &[B],
    config: &LossConfig,
    h: f64,
) -> Result<FdReport> {
    let (analytic, _) = grad(params, batch, config)?;
    let mut worst = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.clone();
    for i in 0..params.num_scalars() {
        let x = params.get(i);
        probe.set(i, x + h);
        let plus = batch_loss(&probe, batch, config)?.total;
        probe.set(i, x - h);
        let minus = batch_loss(&probe, batch, config)?.total;
        probe.set(i, x);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(i);
        let rel = relative_error(a, numeric);
        if rel > worst.max_rel_error {
            worst = FdReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Interpolated distributions along a teacher-forced pass, as consumed by [`loss_asr`].
pub fn mixed_sequence(ex: &TrainExample, steps: &[StepOutput]) -> Result<Vec<Vec<f64>>> {
    ex.p_mdl_seq
        .iter()
        .zip(steps)
        .map(|(p, s)| interpolate(p, s, InterpolationMode::Scaled))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocab;

    fn vocab() -> Vocab {
        Vocab::build(&["my", "name", "is", "kerry", "tom"]).unwrap()
    }

    #[test]
    fn bias_positions_examples() {
        let v = vocab();
        let r = v.tokenize(&["my", "name", "is", "kerry"]).unwrap();
        let k = bias_positions(&r, &["kerry"]);
        assert_eq!(
            k.positions().iter().copied().collect::<Vec<_>>(),
            (8..13).collect::<Vec<_>>()
        );

        let none: [&str; 0] = [];
        assert!(bias_positions(&r, &none).positions().is_empty());

        let r = v.tokenize(&["kerry", "kerry"]).unwrap();
        let k = bias_positions(&r, &["kerry"]);
        assert_eq!(k.positions().len(), 10);
        assert!(!k.contains(10)); // EOS
    }

    #[test]
    fn asr_loss_examples() {
        let v = Vocab::build(&["ab"]).unwrap();
        let r = v.tokenize(&["a"]).unwrap(); // [▁a, EOS]
        let gold = r.tokens[0].index();
        let eos = v.eos().index();
        let mut one = vec![0.0; v.size()];
        one[gold] = 1.0;
        let mut eos_row = vec![0.0; v.size()];
        eos_row[eos] = 1.0;
        assert_eq!(
            loss_asr(&[one.clone(), eos_row.clone()], &r).unwrap().value,
            0.0
        );

        let mut half = vec![0.0; v.size()];
        half[gold] = 0.5;
        half[eos] = 0.5;
        let l = loss_asr(&[half.clone(), eos_row.clone()], &r)
            .unwrap()
            .value;
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let mut half_eos = eos_row.clone();
        half_eos[eos] = 0.5;
        half_eos[gold] = 0.5;
        let l = loss_asr(&[half, half_eos], &r).unwrap().value;
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);

        let zero = vec![0.0; v.size()];
        let rep = loss_asr(&[zero, eos_row], &r).unwrap();
        assert_eq!(rep.clamped, 1);
        assert!((rep.value - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn gen_loss_examples() {
        let k = BiasMask::from_positions([1], 2);
        let l = loss_gen(&[0.2, 0.9], &k, 0.7).unwrap();
        let expect = -(0.3 * 0.8f64.ln() + 0.7 * 0.9f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.140_695_4).abs() < 1e-7);

        assert_eq!(loss_gen(&[0.0, 1.0], &k, 0.7).unwrap(), 0.0);
        let empty = BiasMask::from_positions([], 3);
        for a in [0.1, 0.5, 0.9] {
            assert_eq!(loss_gen(&[0.0; 3], &empty, a).unwrap(), 0.0);
        }
        for bad in [0.0, 1.0, 1.5, -0.2] {
            assert!(matches!(
                loss_gen(&[0.5, 0.5], &k, bad),
                Err(Error::InvalidAlpha(_))
            ));
        }
    }

    fn step_with(p_ptr: Vec<f64>, m: &[u32]) -> StepOutput {
        StepOutput {
            p_ptr,
            p_gen: 0.5,
            m_i: m.iter().map(|&i| TokenId(i)).collect(),
            context: vec![],
            query: vec![],
        }
    }

    #[test]
    fn ptr_loss_examples() {
        let v = Vocab::build(&["ab"]).unwrap();
        let r = v.tokenize(&["ab"]).unwrap(); // [▁a, b, EOS]
        let n = v.size();
        let a = r.tokens[0].0;
        let b = r.tokens[1].0;
        let mut p1 = vec![0.0; n];
        p1[b as usize] = 0.8;
        p1[a as usize] = 0.2;
        let steps = vec![
            step_with(vec![0.0; n], &[]),
            step_with(p1, &[a, b]),
            step_with(vec![0.0; n], &[]),
        ];
        let k = BiasMask::from_positions([1], 3);
        assert!((loss_ptr(&steps, &r, &k).unwrap() - 0.22314).abs() < 1e-5);
        let empty = BiasMask::from_positions([], 3);
        assert_eq!(loss_ptr(&steps, &r, &empty).unwrap(), 0.0);

        let bad = BiasMask::from_positions([0], 3);
        assert!(matches!(
            loss_ptr(&steps, &r, &bad),
            Err(Error::MaskTrieInconsistency(0))
        ));
    }

    #[test]
    fn tree_sum_orders() {
        assert_eq!(tree_sum(vec![1, 2, 3, 4, 5], |a, b| a + b), Some(15));
        assert_eq!(tree_sum(Vec::<i32>::new(), |a, b| a + b), None);
    }
}
