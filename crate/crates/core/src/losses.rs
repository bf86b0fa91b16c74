//! The four training objectives and class-balancing weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probability floor inside the logarithms of the divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// Weight range applied to inverse-frequency class weights.
pub const WEIGHT_CLAMP: (f64, f64) = (0.1, 10.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub concept: f64,
    pub cons: f64,
    pub diag: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Total is the plain sum of the parts.
    pub fn from_parts(align: f64, concept: f64, cons: f64, diag: f64) -> Self {
        LossBreakdown {
            align,
            concept,
            cons,
            diag,
            total: align + concept + cons + diag,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("align", self.align),
            ("concept", self.concept),
            ("cons", self.cons),
            ("diag", self.diag),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Inverse-frequency weights `N / (C · count_c)` clamped to
/// [`WEIGHT_CLAMP`]; a class that never occurs gets the upper clamp.
pub fn class_weights(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    let mut n = 0usize;
    for y in labels {
        if y >= num_classes {
            return Err(Error::Contract(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
        n += 1;
    }
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                WEIGHT_CLAMP.1
            } else {
                (n as f64 / (num_classes as f64 * c as f64)).clamp(WEIGHT_CLAMP.0, WEIGHT_CLAMP.1)
            }
        })
        .collect())
}

/// Confidence target per concept: the largest softmax probability of its
/// logits, read off as plain numbers (no gradient).
pub fn confidence_targets(tape: &Tape, logits: &[Var]) -> Vec<f64> {
    logits
        .iter()
        .map(|&u| {
            let d = tape.value(u).data();
            let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = d.iter().map(|v| (v - max).exp()).sum();
            1.0 / z
        })
        .collect()
}

/// Mean over concepts of `BCE(alpha_k, target_k)`. `alpha` is `1×K`.
/// `targets` defaults to [`confidence_targets`] of `logits`; passing them
/// explicitly pins the targets (used by finite-difference checks).
pub fn align_loss(tape: &mut Tape, alpha: Var, logits: &[Var], targets: Option<&[f64]>) -> Result<(Var, Vec<f64>)> {
    let targets = match targets {
        Some(t) => t.to_vec(),
        None => confidence_targets(tape, logits),
    };
    let a = tape.value(alpha);
    let k = a.numel();
    if targets.len() != k {
        return Err(Error::shape("align_loss", a.shape(), &[targets.len()]));
    }
    if let Some(bad) = a.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::numeric("align_loss", format!("relevance {bad} outside (0, 1)")));
    }
    let shape = a.shape().to_vec();
    let t = tape.constant(Tensor::new(shape.clone(), targets.clone())?);
    let one_minus_t = tape.constant(Tensor::new(shape, targets.iter().map(|v| 1.0 - v).collect())?);
    let log_a = tape.log(alpha)?;
    let neg = tape.scale(alpha, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    let log_comp = tape.log(comp)?;
    let pos_term = tape.mul(t, log_a)?;
    let neg_term = tape.mul(one_minus_t, log_comp)?;
    let both = tape.add(pos_term, neg_term)?;
    let s = tape.sum(both);
    Ok((tape.scale(s, -1.0 / k as f64), targets))
}

/// Mean over concepts of the weighted cross-entropy of `softmax(u_k)`
/// against `labels[k]`; `weights[k][m]` weights value `m` of concept `k`.
pub fn concept_loss(tape: &mut Tape, logits: &[Var], labels: &[usize], weights: &[Vec<f64>]) -> Result<Var> {
    if logits.len() != labels.len() || logits.len() != weights.len() || logits.is_empty() {
        return Err(Error::shape("concept_loss", &[logits.len()], &[labels.len(), weights.len()]));
    }
    let mut picked = Vec::with_capacity(logits.len());
    for ((&u, &a), w) in logits.iter().zip(labels).zip(weights) {
        let width = tape.value(u).numel();
        if a >= width || w.len() != width {
            return Err(Error::Contract(format!("concept label {a} out of range for {width} values")));
        }
        let ls = tape.log_softmax(u, 1)?;
        let lp = tape.index_select(ls, 1, &[a])?;
        picked.push(tape.scale(lp, w[a]));
    }
    let all = tape.concat(&picked, 1)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0 / logits.len() as f64))
}

/// Symmetrized KL between the softmax over concepts of each concept's
/// largest logit and the normalized concept relevance.
pub fn consistency_loss(tape: &mut Tape, logits: &[Var], alpha: Var) -> Result<Var> {
    if logits.len() < 2 {
        return Err(Error::Contract("consistency needs at least two concepts".into()));
    }
    let mut maxes = Vec::with_capacity(logits.len());
    for &u in logits {
        let m = tape.max_axis(u, 1)?;
        maxes.push(tape.reshape(m, &[1, 1])?);
    }
    let scores = tape.concat(&maxes, 1)?;
    let p = tape.softmax(scores, 1)?;
    let q = tape.row_normalize(alpha)?;
    if tape.value(q).data().iter().all(|&v| v == 0.0) {
        return Err(Error::numeric("consistency_loss", "relevance sums to zero"));
    }
    skl_on_tape(tape, p, q)
}

/// `½ Σ (p − q)(ln p − ln q)`, which equals `½[KL(p‖q) + KL(q‖p)]`.
pub fn skl_on_tape(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let pf = tape.clamp_min(p, KL_FLOOR);
    let qf = tape.clamp_min(q, KL_FLOOR);
    let lp = tape.log(pf)?;
    let lq = tape.log(qf)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(dp, dl)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 0.5))
}

/// Cross-entropy of `softmax(o)` against the smoothed target
/// (`1 − s` on `y`, `s / (C − 1)` elsewhere), times the weight of `y`.
pub fn diagnosis_loss(tape: &mut Tape, logits: Var, y: usize, smoothing: f64, weights: &[f64]) -> Result<Var> {
    let c = tape.value(logits).numel();
    if y >= c || weights.len() != c {
        return Err(Error::Contract(format!("diagnosis label {y} out of range for {c} classes")));
    }
    let off = if c > 1 { smoothing / (c - 1) as f64 } else { 0.0 };
    let target: Vec<f64> = (0..c).map(|i| if i == y { 1.0 - smoothing } else { off }).collect();
    let shape = tape.value(logits).shape().to_vec();
    let t = tape.constant(Tensor::new(shape, target)?);
    let ls = tape.log_softmax(logits, 1)?;
    let prod = tape.mul(t, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -weights[y]))
}

/// Plain-number symmetrized KL with the same floor, for reporting/tests.
pub fn skl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| 0.5 * (a - b) * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap())
    }

    #[test]
    fn breakdown_total_is_sum() {
        let b = LossBreakdown::from_parts(1.0, 2.0, 3.0, 4.0);
        assert_eq!(b.total, 10.0);
        assert_eq!(LossBreakdown::from_parts(0.0, 0.0, 0.0, 0.0).total, 0.0);
        assert_eq!(LossBreakdown::from_parts(f64::NAN, 0.0, 0.0, 0.0).non_finite(), Some("align"));
        assert_eq!(b.non_finite(), None);
    }

    #[test]
    fn align_cases() {
        let mut tape = Tape::new();
        let a = row(&mut tape, &[0.5]);
        let (l, _) = align_loss(&mut tape, a, &[], Some(&[0.5])).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);

        let a = row(&mut tape, &[0.8]);
        let (l, _) = align_loss(&mut tape, a, &[], Some(&[1.0])).unwrap();
        assert!((tape.item(l) + 0.8f64.ln()).abs() < 1e-15);

        let a = row(&mut tape, &[1.0 - 1e-9]);
        let (l, _) = align_loss(&mut tape, a, &[], Some(&[1.0])).unwrap();
        assert!(tape.item(l) < 1e-8);

        // Uniform logits give the target 1/M_k.
        let u = row(&mut tape, &[0.3, 0.3, 0.3, 0.3]);
        let a = row(&mut tape, &[0.25]);
        let (l, t) = align_loss(&mut tape, a, &[u], None).unwrap();
        assert!((t[0] - 0.25).abs() < 1e-15);
        assert!(tape.item(l) > 0.0);

        let bad = row(&mut tape, &[1.0]);
        assert!(matches!(align_loss(&mut tape, bad, &[], Some(&[1.0])), Err(Error::Numeric { .. })));
    }

    #[test]
    fn align_target_is_not_differentiated() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::matrix(1, 2, vec![0.2, -0.4]).unwrap().with_requires_grad(true));
        let a = tape.leaf(Tensor::matrix(1, 1, vec![0.3]).unwrap().with_requires_grad(true));
        let (l, _) = align_loss(&mut tape, a, &[u], None).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(u).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
        assert!(tape.grad(a).unwrap()[0] != 0.0);
    }

    #[test]
    fn concept_cases() {
        let mut tape = Tape::new();
        let u = row(&mut tape, &[0.0, 0.0, 0.0, 0.0]);
        let l = concept_loss(&mut tape, &[u], &[2], &[vec![1.0; 4]]).unwrap();
        assert_eq!(tape.item(l), 4f64.ln());

        let u = row(&mut tape, &[60.0, 0.0]);
        let l = concept_loss(&mut tape, &[u], &[0], &[vec![1.0; 2]]).unwrap();
        assert!(tape.item(l) < 1e-20);

        // Two concepts with losses a and b average to (a+b)/2.
        let p1 = 0.2f64;
        let p2 = 0.4f64;
        let u1 = row(&mut tape, &[0.0, (p1.exp() - 1.0).ln()]);
        let u2 = row(&mut tape, &[0.0, (p2.exp() - 1.0).ln()]);
        let l = concept_loss(&mut tape, &[u1, u2], &[0, 0], &[vec![1.0; 2], vec![1.0; 2]]).unwrap();
        assert!((tape.item(l) - 0.3).abs() < 1e-12);

        assert!(concept_loss(&mut tape, &[u1], &[2], &[vec![1.0; 2]]).is_err());
    }

    #[test]
    fn consistency_cases() {
        let mut tape = Tape::new();
        let p = row(&mut tape, &[0.5, 0.5]);
        let q = row(&mut tape, &[0.9, 0.1]);
        let l = skl_on_tape(&mut tape, p, q).unwrap();
        // Independent evaluation of both directed divergences.
        let kl_pq = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl_qp = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((tape.item(l) - 0.5 * (kl_pq + kl_qp)).abs() < 1e-12);
        assert!((tape.item(l) - 0.43945).abs() < 1e-5);

        let l2 = skl_on_tape(&mut tape, q, p).unwrap();
        assert!((tape.item(l) - tape.item(l2)).abs() < 1e-12);

        // Max logits (0, ln 3) -> softmax (0.25, 0.75); relevance (0.1, 0.3)
        // normalizes to the same distribution.
        let u1 = row(&mut tape, &[-1.0, 0.0]);
        let u2 = row(&mut tape, &[3f64.ln(), -2.0]);
        let a = row(&mut tape, &[0.1, 0.3]);
        let l = consistency_loss(&mut tape, &[u1, u2], a).unwrap();
        assert!(tape.item(l).abs() < 1e-10);
        assert!(consistency_loss(&mut tape, &[u1], a).is_err());
    }

    #[test]
    fn diagnosis_cases() {
        let mut tape = Tape::new();
        let o = row(&mut tape, &[0.0; 4]);
        let l = diagnosis_loss(&mut tape, o, 1, 0.0, &[1.0; 4]).unwrap();
        assert_eq!(tape.item(l), 4f64.ln());

        let o = row(&mut tape, &[0.0, 0.0]);
        let l = diagnosis_loss(&mut tape, o, 0, 0.1, &[1.0; 2]).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);

        let o = row(&mut tape, &[0.0, 80.0]);
        let l = diagnosis_loss(&mut tape, o, 1, 0.0, &[1.0; 2]).unwrap();
        assert!(tape.item(l) < 1e-30);

        let o = row(&mut tape, &[0.0; 3]);
        let l = diagnosis_loss(&mut tape, o, 2, 0.0, &[1.0, 1.0, 2.5]).unwrap();
        assert!((tape.item(l) - 2.5 * 3f64.ln()).abs() < 1e-15);
        assert!(diagnosis_loss(&mut tape, o, 3, 0.0, &[1.0; 3]).is_err());
    }

    #[test]
    fn class_weight_cases() {
        let w = class_weights([0, 0, 0, 1], 2).unwrap();
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        let w = class_weights([0; 1000], 2).unwrap();
        assert_eq!(w[1], 10.0);
        assert!(class_weights([5], 2).is_err());
    }
}
