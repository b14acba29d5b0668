//! Cross-entropy, the context-consistency penalty and the time-weighted
//! joint objective, both as plain functions and as tape ops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Tape, Var};
use crate::rules::{ContextVector, ScenarioSet};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How per-step losses are weighted along an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `e^{-(T-t)}`: the last step weighs 1.
    #[default]
    Exponential,
    /// Every step weighs 1.
    Uniform,
}

impl LossWeighting {
    /// Weight of step `t` (1-based) in an episode of length `steps`.
    pub fn weight(self, t: usize, steps: usize) -> f64 {
        match self {
            LossWeighting::Exponential => (-((steps - t) as f64)).exp(),
            LossWeighting::Uniform => 1.0,
        }
    }

    pub fn weights(self, steps: usize) -> Vec<f64> {
        (1..=steps).map(|t| self.weight(t, steps)).collect()
    }
}

fn check_class(probs: &[f64], y: usize) -> Result<()> {
    if y >= probs.len() {
        return Err(Error::contract(format!(
            "class {y} out of range for {} probabilities",
            probs.len()
        )));
    }
    Ok(())
}

/// `-ln max(p_y, 1e-12)`.
pub fn cross_entropy(probs: &[f64], y: usize) -> Result<f64> {
    check_class(probs, y)?;
    Ok(-probs[y].max(PROB_FLOOR).ln())
}

/// `-sum over matched rules of ln max(1 - p_r, 1e-12)`.
pub fn cc_loss(probs: &[f64], c: &ContextVector, set: &ScenarioSet) -> Result<f64> {
    let mut total = 0.0;
    for rule in set.matching(c) {
        let r = rule?.maneuver;
        check_class(probs, r)?;
        total -= (1.0 - probs[r]).max(PROB_FLOOR).ln();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: Vec<f64>,
    pub cc: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_ce(&self) -> f64 {
        self.ce.iter().zip(&self.weights).map(|(c, w)| w * c).sum()
    }

    pub fn weighted_cc(&self) -> f64 {
        self.cc.iter().zip(&self.weights).map(|(c, w)| w * c).sum()
    }
}

/// Per-sample joint loss from per-step `(ce, cc)` pairs, `t = 1..T`.
pub fn joint_loss(per_step: &[(f64, f64)], weighting: LossWeighting) -> Result<LossBreakdown> {
    if per_step.is_empty() {
        return Err(Error::contract("joint loss needs at least one step"));
    }
    let weights = weighting.weights(per_step.len());
    let total = per_step
        .iter()
        .zip(&weights)
        .map(|(&(ce, cc), w)| w * (cc + ce))
        .sum();
    Ok(LossBreakdown {
        ce: per_step.iter().map(|p| p.0).collect(),
        cc: per_step.iter().map(|p| p.1).collect(),
        weights,
        total,
    })
}

/// Batch aggregation: mean of per-sample totals.
pub fn batch_loss(samples: &[LossBreakdown]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("batch loss needs at least one sample"));
    }
    Ok(samples.iter().map(|s| s.total).sum::<f64>() / samples.len() as f64)
}

/// Tape version of [`cross_entropy`] on a `1 x C` probability row.
pub fn cross_entropy_op(tape: &mut Tape, probs: Var, y: usize) -> Result<Var> {
    check_class(tape.value(probs).data(), y)?;
    let p = tape.select(probs, y)?;
    let lp = tape.ln_clamped(p, PROB_FLOOR)?;
    tape.scale(lp, -1.0)
}

/// Tape version of [`cc_loss`]; `None` when no rule matches `c`.
pub fn cc_loss_op(tape: &mut Tape, probs: Var, c: &ContextVector, set: &ScenarioSet) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for rule in set.matching(c) {
        let r = rule?.maneuver;
        check_class(tape.value(probs).data(), r)?;
        let p = tape.select(probs, r)?;
        let q = tape.one_minus(p)?;
        let lq = tape.ln_clamped(q, PROB_FLOOR)?;
        let term = tape.scale(lq, -1.0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Scalar tape nodes of one sample's joint loss plus their plain values.
#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Joint loss over per-step probability rows; `rules = None` disables the
/// context-consistency term.
pub fn episode_loss_op(
    tape: &mut Tape,
    probs: &[Var],
    y: usize,
    c: &ContextVector,
    rules: Option<&ScenarioSet>,
    weighting: LossWeighting,
) -> Result<EpisodeLoss> {
    if probs.is_empty() {
        return Err(Error::contract("joint loss needs at least one step"));
    }
    let steps = probs.len();
    let mut total: Option<Var> = None;
    let mut per_step = Vec::with_capacity(steps);
    for (i, &p) in probs.iter().enumerate() {
        let ce = cross_entropy_op(tape, p, y)?;
        let cc = match rules {
            Some(set) => cc_loss_op(tape, p, c, set)?,
            None => None,
        };
        let ce_v = tape.value(ce).item()?;
        let cc_v = cc.map(|v| tape.value(v).item()).transpose()?.unwrap_or(0.0);
        per_step.push((ce_v, cc_v));
        let step = match cc {
            Some(cc) => tape.add(cc, ce)?,
            None => ce,
        };
        let weighted = tape.scale(step, weighting.weight(i + 1, steps))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(EpisodeLoss {
        total: total.expect("at least one step"),
        breakdown: joint_loss(&per_step, weighting)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;
    use crate::rules::{brain4cars_rules, default_classes, parse_rules};

    fn ctx(s: &str) -> ContextVector {
        ContextVector::from_bits_str(s).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.2; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.25, 0.75], 0).unwrap() - 1.3862943611198906).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0], 0).unwrap(), -(1e-12f64).ln());
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn cc_examples() {
        let classes = default_classes();
        let empty = ScenarioSet::empty(classes.clone(), 3);
        assert_eq!(cc_loss(&[0.2; 5], &ctx("011"), &empty).unwrap(), 0.0);
        let set = parse_rules("left_turn : 1**", &classes, 3).unwrap();
        assert_eq!(cc_loss(&[0.2; 5], &ctx("011"), &set).unwrap(), 0.0);
        let p = [0.1, 0.1, 0.5, 0.2, 0.1];
        assert!((cc_loss(&p, &ctx("100"), &set).unwrap() - 2f64.ln()).abs() < 1e-12);
        let rules = brain4cars_rules();
        let v = cc_loss(&[0.2; 5], &ctx("011"), &rules).unwrap();
        assert!((v - 0.44628710262841953).abs() < 1e-12, "{v}");
        assert!(matches!(cc_loss(&[0.2; 5], &ctx("01"), &rules), Err(Error::Contract(_))));
    }

    #[test]
    fn double_penalty_for_twice_matched_class() {
        // At (0,1,0) left_turn is matched by both 01* and **0.
        let p = [0.2; 5];
        let v = cc_loss(&p, &ctx("010"), &brain4cars_rules()).unwrap();
        // right_lane_change (*1*), left_turn twice, right_turn (**0).
        assert!((v + 4.0 * 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn joint_examples() {
        let one = joint_loss(&[(0.7, 0.2)], LossWeighting::Exponential).unwrap();
        assert_eq!(one.total, 0.7 + 0.2);
        let w = LossWeighting::Exponential.weights(5);
        assert_eq!(w[4], 1.0);
        assert!((w[3] - 0.36787944117144233).abs() < 1e-15);
        assert!(w.windows(2).all(|p| p[0] < p[1]));
        let two = joint_loss(&[(1.0, 0.0), (1.0, 1.0)], LossWeighting::Exponential).unwrap();
        assert!((two.total - 2.367879441171442).abs() < 1e-12);
        assert_eq!(LossWeighting::Uniform.weights(3), vec![1.0; 3]);
        assert!(joint_loss(&[], LossWeighting::Exponential).is_err());
        assert!(batch_loss(&[]).is_err());
        assert_eq!(batch_loss(&[one.clone(), two.clone()]).unwrap(), (one.total + two.total) / 2.0);
    }

    #[test]
    fn breakdown_total_matches_components() {
        let b = joint_loss(&[(0.3, 0.1), (0.2, 0.0), (0.05, 0.4)], LossWeighting::Exponential).unwrap();
        assert!((b.total - (b.weighted_ce() + b.weighted_cc())).abs() < 1e-12);
    }

    #[test]
    fn cc_monotone_along_line() {
        let set = brain4cars_rules();
        let c = ctx("100");
        // left_lane_change is matched; move mass from go_straight onto it.
        let mut last = f64::NEG_INFINITY;
        for i in 0..=50 {
            let a = 0.5 * i as f64 / 50.0;
            let p = [0.5 - a, 0.1 + a, 0.1, 0.2, 0.1];
            let v = cc_loss(&p, &c, &set).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn cc_derivative_is_reciprocal() {
        let set = parse_rules("right_turn : ***", &default_classes(), 3).unwrap();
        let c = ctx("000");
        for &pr in &[0.05, 0.3, 0.6, 0.9] {
            let mut p = vec![0.0; 5];
            p[4] = pr;
            let h = 1e-6;
            let mut hi = p.clone();
            hi[4] += h;
            let mut lo = p.clone();
            lo[4] -= h;
            let fd = (cc_loss(&hi, &c, &set).unwrap() - cc_loss(&lo, &c, &set).unwrap()) / (2.0 * h);
            let exact = 1.0 / (1.0 - pr);
            assert!(((fd - exact) / exact).abs() < 1e-6, "{fd} vs {exact}");
        }
    }

    fn probs_var(tape: &mut Tape, p: &[f64]) -> Var {
        tape.param(Tensor::matrix(1, p.len(), p.to_vec()).unwrap())
    }

    #[test]
    fn tape_ops_match_plain_functions() {
        let set = brain4cars_rules();
        let rows = [
            vec![0.1, 0.3, 0.2, 0.25, 0.15],
            vec![0.05, 0.05, 0.6, 0.2, 0.1],
            vec![0.3, 0.1, 0.1, 0.4, 0.1],
        ];
        for c in ContextVector::enumerate(3) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = rows.iter().map(|r| probs_var(&mut tape, r)).collect();
            let out = episode_loss_op(&mut tape, &vars, 2, &c, Some(&set), LossWeighting::Exponential).unwrap();
            let per: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (cross_entropy(r, 2).unwrap(), cc_loss(r, &c, &set).unwrap()))
                .collect();
            let plain = joint_loss(&per, LossWeighting::Exponential).unwrap();
            assert!((tape.value(out.total).item().unwrap() - plain.total).abs() < 1e-12);
            assert_eq!(out.breakdown, plain);
        }
    }

    #[test]
    fn unmatched_context_is_weighted_ce_bitwise() {
        let set = brain4cars_rules();
        // (0,0,1): no rule matches.
        let c = ctx("001");
        let rows = [vec![0.1, 0.3, 0.2, 0.25, 0.15], vec![0.2, 0.2, 0.2, 0.2, 0.2]];
        let run = |rules: Option<&ScenarioSet>| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = rows.iter().map(|r| probs_var(&mut tape, r)).collect();
            let out = episode_loss_op(&mut tape, &vars, 1, &c, rules, LossWeighting::Exponential).unwrap();
            let g = tape.backward(out.total).unwrap();
            (
                tape.value(out.total).item().unwrap().to_bits(),
                vars.iter().map(|v| g.get(*v).unwrap().clone()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(Some(&set)), run(None));
        let empty = ScenarioSet::empty(default_classes(), 3);
        assert_eq!(run(Some(&empty)), run(None));
    }

    #[test]
    fn tape_cc_gradient_is_reciprocal() {
        let set = brain4cars_rules();
        let p = [0.1, 0.3, 0.2, 0.25, 0.15];
        let mut tape = Tape::new();
        let v = probs_var(&mut tape, &p);
        let cc = cc_loss_op(&mut tape, v, &ctx("100"), &set).unwrap().unwrap();
        let g = tape.backward(cc).unwrap();
        let g = g.get(v).unwrap().data();
        // Matched at (1,0,0): left_lane_change (1**), right_turn (10* and **0), left_turn (**0).
        assert!((g[1] - 1.0 / 0.7).abs() < 1e-12);
        assert!((g[2] - 1.0 / 0.8).abs() < 1e-12);
        assert!((g[4] - 2.0 / 0.85).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.0);
    }
}
