//! Slate-level losses: InfoNCE over a candidate slate, the posterior
//! (teacher) distribution, the KL regularizer and their weighted total.
//!
//! Everything here works on logits; the trainer maps logit gradients back
//! onto encoder parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DocId;
use crate::encoder::EncodedText;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("objective config error: {0}")]
    Config(String),
    #[error("objective contract error: {0}")]
    Contract(String),
}

/// Temperature-scaled inner product of two encodings.
pub fn similarity(u: &EncodedText, v: &EncodedText, temperature: f64) -> Result<f64, ObjectiveError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(ObjectiveError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(u.dot(v) / temperature)
}

/// Candidate documents for one hop of one sample. The same ordered slate is
/// scored by the prior and (for the KL term) by the posterior model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slate {
    pub doc_ids: Vec<DocId>,
    pub positive: usize,
}

impl Slate {
    pub fn new(doc_ids: Vec<DocId>, positive: usize) -> Result<Self, ObjectiveError> {
        if doc_ids.len() < 2 {
            return Err(ObjectiveError::Contract(format!(
                "slate needs at least 2 candidates, got {}",
                doc_ids.len()
            )));
        }
        if positive >= doc_ids.len() {
            return Err(ObjectiveError::Contract(format!(
                "positive index {positive} out of range for {} candidates",
                doc_ids.len()
            )));
        }
        Ok(Self { doc_ids, positive })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

/// A query encoding paired with encoded slate candidates.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSlate<'a> {
    pub query: &'a EncodedText,
    pub candidates: &'a [&'a EncodedText],
    pub positive: usize,
}

impl CandidateSlate<'_> {
    pub fn logits(&self, temperature: f64) -> Result<Vec<f64>, ObjectiveError> {
        self.candidates
            .iter()
            .map(|c| similarity(self.query, c, temperature))
            .collect()
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = max_of(z);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let exps: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| x - lse).collect()
}

/// `-log softmax(z)[positive]` and its gradient `softmax(z) - onehot`.
pub fn infonce(logits: &[f64], positive: usize) -> Result<(f64, Vec<f64>), ObjectiveError> {
    if logits.len() < 2 || positive >= logits.len() {
        return Err(ObjectiveError::Contract(format!(
            "invalid slate: {} logits, positive {positive}",
            logits.len()
        )));
    }
    let loss = log_sum_exp(logits) - logits[positive];
    let mut grad = softmax(logits);
    grad[positive] -= 1.0;
    Ok((loss, grad))
}

/// Teacher distribution over a slate. The teacher must have scored exactly
/// the prior's candidates in the prior's order. The result is treated as a
/// constant target: no gradient flows back through it.
pub fn posterior_dist(
    prior_slate: &[DocId],
    posterior_slate: &[DocId],
    posterior_logits: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    if prior_slate != posterior_slate {
        return Err(ObjectiveError::Contract(
            "posterior slate differs from the paired prior slate".into(),
        ));
    }
    if posterior_logits.len() != posterior_slate.len() {
        return Err(ObjectiveError::Contract(format!(
            "{} posterior logits for {} candidates",
            posterior_logits.len(),
            posterior_slate.len()
        )));
    }
    Ok(softmax(posterior_logits))
}

/// `KL(p_post || softmax(prior_logits))` and its gradient with respect to
/// the prior logits, `softmax(prior) - p_post`. Terms with `p_post = 0`
/// contribute nothing.
pub fn kl_term(p_post: &[f64], prior_logits: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
    if p_post.len() != prior_logits.len() {
        return Err(ObjectiveError::Contract(format!(
            "length mismatch: {} posterior probabilities vs {} prior logits",
            p_post.len(),
            prior_logits.len()
        )));
    }
    let log_prior = log_softmax(prior_logits);
    let kl = p_post
        .iter()
        .zip(&log_prior)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lq)| p * (p.ln() - lq))
        .sum();
    let grad = log_prior
        .iter()
        .zip(p_post)
        .map(|(lq, p)| lq.exp() - p)
        .collect();
    Ok((kl, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub kl: f64,
    pub total: f64,
    /// `infonce / total`, the share of the contrastive term.
    pub ratio: f64,
}

pub fn total_loss(infonce: f64, kl: f64, lambda: f64) -> LossBreakdown {
    let total = infonce + lambda * kl;
    let ratio = if total == 0.0 { 1.0 } else { infonce / total };
    LossBreakdown {
        infonce,
        kl,
        total,
        ratio,
    }
}

/// Weight of the KL term over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LambdaSchedule {
    Fixed { value: f64 },
    /// Linear in `step / total_steps`.
    Linear { start: f64, end: f64 },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = match *self {
            LambdaSchedule::Fixed { value } => value >= 0.0,
            LambdaSchedule::Linear { start, end } => start >= 0.0 && end >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::Config(format!("lambda must be non-negative: {self:?}")))
        }
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, step: usize, total_steps: usize) -> Result<f64, ObjectiveError> {
    match *schedule {
        LambdaSchedule::Fixed { value } => Ok(value),
        LambdaSchedule::Linear { start, end } => {
            if total_steps == 0 {
                return Err(ObjectiveError::Config(
                    "linear lambda schedule needs total_steps > 0".into(),
                ));
            }
            if step >= total_steps {
                return Ok(end);
            }
            Ok(start + (end - start) * step as f64 / total_steps as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncodeCache;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> EncodedText {
        EncodedText {
            vec: v,
            cache: EncodeCache {
                tokens: vec![],
                pooled: vec![],
                norm: 1.0,
                differentiable: true,
            },
        }
    }

    #[test]
    fn similarity_cases() {
        let a = unit(vec![0.6, 0.8]);
        assert!((similarity(&a, &a, 0.05).unwrap() - 20.0).abs() < 1e-12);
        let b = unit(vec![0.8, -0.6]);
        assert_eq!(similarity(&a, &b, 0.05).unwrap(), 0.0);
        let c = unit(vec![-0.6, -0.8]);
        assert!((similarity(&a, &c, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(similarity(&a, &a, 0.0), Err(ObjectiveError::Config(_))));
    }

    #[test]
    fn candidate_slate_logits() {
        let q = unit(vec![1.0, 0.0]);
        let d1 = unit(vec![1.0, 0.0]);
        let d2 = unit(vec![0.0, 1.0]);
        let cands = [&d1, &d2];
        let slate = CandidateSlate { query: &q, candidates: &cands, positive: 0 };
        assert_eq!(slate.logits(0.5).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn infonce_cases() {
        let (loss, grad) = infonce(&[0.7; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
        // ln(1 + e^-10)
        let (loss, _) = infonce(&[10.0, 0.0], 0).unwrap();
        assert!((loss - 4.539889921686465e-5).abs() < 1e-15, "{loss}");
        assert!(infonce(&[1.0], 0).is_err());
    }

    #[test]
    fn slate_validation() {
        assert!(Slate::new(vec![4], 0).is_err());
        assert!(Slate::new(vec![4, 5], 2).is_err());
        assert_eq!(Slate::new(vec![4, 5], 1).unwrap().len(), 2);
    }

    #[test]
    fn posterior_cases() {
        let ids = [3, 1, 4, 1, 5];
        let p = posterior_dist(&ids, &ids, &[0.3; 5]).unwrap();
        assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-15));
        let p = posterior_dist(&ids[..2], &ids[..2], &[50.0, 0.0]).unwrap();
        assert!(p[0] >= 1.0 - 1e-20);
        assert!(matches!(
            posterior_dist(&[1, 2], &[2, 1], &[0.0, 0.0]),
            Err(ObjectiveError::Contract(_))
        ));
    }

    #[test]
    fn kl_cases() {
        let z = [0.1, -2.0, 3.0];
        let (kl, grad) = kl_term(&softmax(&z), &z).unwrap();
        assert!(kl.abs() < 1e-15);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
        let (kl, _) = kl_term(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert!(kl_term(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let b = total_loss(1.0, 0.5, 0.3);
        assert!((b.total - 1.15).abs() < 1e-15);
        assert!((b.ratio - 1.0 / 1.15).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 0.7, 0.0).ratio, 1.0);
        assert_eq!(total_loss(2.0, 0.0, 0.9).ratio, 1.0);
    }

    #[test]
    fn lambda_schedule_cases() {
        let fixed = LambdaSchedule::Fixed { value: 0.3 };
        assert_eq!(lambda_at(&fixed, 17, 200).unwrap(), 0.3);
        let lin = LambdaSchedule::Linear { start: 0.3, end: 0.1 };
        assert!((lambda_at(&lin, 100, 200).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(lambda_at(&lin, 200, 200).unwrap(), 0.1);
        assert!(lambda_at(&lin, 0, 0).is_err());
        assert!(LambdaSchedule::Fixed { value: -1.0 }.validate().is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, z: &[f64], i: usize) -> f64 {
        let eps = 1e-5;
        let mut up = z.to_vec();
        up[i] += eps;
        let mut down = z.to_vec();
        down[i] -= eps;
        (f(&up) - f(&down)) / (2.0 * eps)
    }

    proptest! {
        #[test]
        fn kl_gradient_matches_finite_differences(
            prior in proptest::collection::vec(-3.0f64..3.0, 6),
            post in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let p = softmax(&post);
            let (_, grad) = kl_term(&p, &prior).unwrap();
            for i in 0..6 {
                let num = central_diff(|z| kl_term(&p, z).unwrap().0, &prior, i);
                let denom = grad[i].abs().max(num.abs()).max(1e-3);
                prop_assert!((grad[i] - num).abs() / denom <= 1e-6, "{} vs {}", grad[i], num);
            }
        }

        #[test]
        fn shift_invariance(z in proptest::collection::vec(-20.0f64..20.0, 2..9), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let (a, _) = infonce(&z, 0).unwrap();
            let (b, _) = infonce(&shifted, 0).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
            let p = softmax(&z);
            let q = softmax(&shifted);
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let target = softmax(&z.iter().rev().copied().collect::<Vec<_>>());
            let (k1, _) = kl_term(&target, &z).unwrap();
            let (k2, _) = kl_term(&target, &shifted).unwrap();
            prop_assert!((k1 - k2).abs() <= 1e-9);
        }

        #[test]
        fn stable_for_large_logits(z in proptest::collection::vec(-1.0e4f64..1.0e4, 2..9)) {
            let (loss, grad) = infonce(&z, 1).unwrap();
            prop_assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
            let (kl, g) = kl_term(&softmax(&z), &z.iter().map(|x| -x).collect::<Vec<_>>()).unwrap();
            prop_assert!(kl.is_finite() && kl >= -1e-12 && g.iter().all(|x| x.is_finite()));
        }

        #[test]
        fn posterior_permutation_equivariant(z in proptest::collection::vec(-5.0f64..5.0, 5), rot in 0usize..5) {
            let ids: Vec<DocId> = (0..5).collect();
            let p = posterior_dist(&ids, &ids, &z).unwrap();
            let mut zr = z.clone();
            zr.rotate_left(rot);
            let mut idr = ids.clone();
            idr.rotate_left(rot);
            let pr = posterior_dist(&idr, &idr, &zr).unwrap();
            let mut expect = p.clone();
            expect.rotate_left(rot);
            for (a, b) in pr.iter().zip(&expect) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
