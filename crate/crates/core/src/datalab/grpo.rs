use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least two rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("probability ratio at index {0} is not positive")]
    NonPositiveRatio(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Standardizes rewards within their group using the population standard
/// deviation. A group whose rewards are all equal gets zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::InvalidParameter("rewards must be finite".into()));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-response divergence estimate from the reference-to-policy ratio.
pub fn kl_k3(ref_ratio: f64) -> f64 {
    ref_ratio - ref_ratio.ln() - 1.0
}

fn check_ratios(name: &str, ratios: &[f64], n: usize) -> Result<(), GrpoError> {
    if ratios.len() != n {
        return Err(GrpoError::LengthMismatch(format!("{name} has {} entries, expected {n}", ratios.len())));
    }
    match ratios.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
        Some(i) => Err(GrpoError::NonPositiveRatio(i)),
        None => Ok(()),
    }
}

/// Clipped surrogate objective averaged over the group, minus the weighted
/// divergence penalty. Evaluation only.
pub fn grpo_objective(
    advantages: &[f64],
    ratios: &[f64],
    ref_ratios: Option<&[f64]>,
    epsilon: f64,
    beta: f64,
) -> Result<f64, GrpoError> {
    let n = advantages.len();
    if n == 0 {
        return Err(GrpoError::LengthMismatch("empty group".into()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) || !(beta.is_finite() && beta >= 0.0) {
        return Err(GrpoError::InvalidParameter("epsilon and beta must be finite and non-negative".into()));
    }
    check_ratios("ratios", ratios, n)?;
    if let Some(r) = ref_ratios {
        check_ratios("ref_ratios", r, n)?;
    } else if beta > 0.0 {
        return Err(GrpoError::LengthMismatch("beta > 0 needs ref_ratios".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = advantages[i];
        let ratio = ratios[i];
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
        let surrogate = (ratio * a).min(clipped * a);
        let kl = ref_ratios.map_or(0.0, |r| kl_k3(r[i]));
        total += surrogate - beta * kl;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEvaluation {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_ratios: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    pub epsilon: f64,
    pub beta: f64,
}

/// Advantages for a group and, when ratios are given, the objective.
pub fn evaluate_group(
    rewards: &[f64],
    ratios: Option<&[f64]>,
    ref_ratios: Option<&[f64]>,
    epsilon: f64,
    beta: f64,
) -> Result<GroupEvaluation, GrpoError> {
    let advantages = group_advantages(rewards)?;
    let objective = ratios.map(|r| grpo_objective(&advantages, r, ref_ratios, epsilon, beta)).transpose()?;
    Ok(GroupEvaluation {
        rewards: rewards.to_vec(),
        advantages,
        ratios: ratios.map(<[f64]>::to_vec),
        ref_ratios: ref_ratios.map(<[f64]>::to_vec),
        objective,
        epsilon,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(group_advantages(&[1.0; 5]).unwrap(), vec![0.0; 5]);
        let two = group_advantages(&[1.2, 0.2]).unwrap();
        assert!((two[0] - 1.0).abs() < 1e-12 && (two[1] + 1.0).abs() < 1e-12);
        assert_eq!(group_advantages(&[1.0]), Err(GrpoError::GroupTooSmall(1)));
    }

    #[test]
    fn objective_cases() {
        assert_eq!(grpo_objective(&[1.0], &[1.0], None, 0.2, 0.0).unwrap(), 1.0);
        assert_eq!(grpo_objective(&[1.0], &[2.0], None, 0.2, 0.0).unwrap(), 1.2);
        assert_eq!(grpo_objective(&[-1.0], &[0.5], None, 0.2, 0.0).unwrap(), -0.8);
        assert_eq!(grpo_objective(&[1.0], &[0.0], None, 0.2, 0.0), Err(GrpoError::NonPositiveRatio(0)));
        assert!(matches!(grpo_objective(&[1.0, 2.0], &[1.0], None, 0.2, 0.0), Err(GrpoError::LengthMismatch(_))));
        // k3 is zero at the reference and positive elsewhere.
        assert_eq!(kl_k3(1.0), 0.0);
        let with_kl = grpo_objective(&[1.0], &[1.0], Some(&[2.0]), 0.2, 0.1).unwrap();
        assert!((with_kl - (1.0 - 0.1 * (1.0 - 2f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn negative_advantage_is_not_clipped_above() {
        // The pessimistic min keeps the unclipped term here.
        assert_eq!(grpo_objective(&[-1.0], &[2.0], None, 0.2, 0.0).unwrap(), -2.0);
    }

    proptest! {
        #[test]
        fn objective_is_bounded_above(
            pairs in prop::collection::vec((-3.0f64..3.0, 0.01f64..5.0), 1..16),
            eps in 0.0f64..0.5,
        ) {
            let (adv, ratios): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let j = grpo_objective(&adv, &ratios, None, eps, 0.0).unwrap();
            let bound = (1.0 + eps) * adv.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            prop_assert!(j <= bound + 1e-12);
        }

        #[test]
        fn inside_the_trust_region_nothing_clips(
            pairs in prop::collection::vec((-3.0f64..3.0, -1.0f64..1.0), 1..16),
            eps in 0.01f64..0.5,
        ) {
            let adv: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ratios: Vec<f64> = pairs.iter().map(|p| 1.0 + p.1 * eps).collect();
            let j = grpo_objective(&adv, &ratios, None, eps, 0.0).unwrap();
            let plain = adv.iter().zip(&ratios).map(|(a, r)| a * r).sum::<f64>() / adv.len() as f64;
            prop_assert!((j - plain).abs() < 1e-12);
        }
    }
}
