//! Clipped surrogate and value losses with their parameter gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::head::ActionHead;
use super::mlp::{stack_rows, Mlp};
use crate::error::Result;
use crate::sim::RebalanceAction;

/// One decision epoch collected under the sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSample {
    pub obs: Vec<f64>,
    pub action: RebalanceAction,
    /// Joint log-probability under the sampling policy.
    pub log_prob: f64,
    /// Sampling policy's scores, kept for the KL diagnostic.
    pub old_scores: Vec<f64>,
    /// Reward after training-time scaling.
    pub reward: f64,
    pub value: f64,
    pub advantage: f64,
    pub target: f64,
    /// The episode ended with this epoch.
    pub done: bool,
}

/// Samples gathered in one iteration under a single policy snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoBatch {
    pub samples: Vec<PpoSample>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Samples dropped for a non-finite ratio.
    pub rejected: usize,
    /// Fraction of kept samples on the clipped branch.
    pub clip_fraction: f64,
}

/// `min(r * a, clip(r, 1 - eps, 1 + eps) * a)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean-zero, unit-variance copy; left centred only when the spread is nil.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Negative clipped surrogate over a minibatch, and its gradient with
/// respect to the policy parameters.
pub fn clipped_surrogate_loss(
    policy: &Mlp,
    head: &ActionHead,
    samples: &[&PpoSample],
    clip: f64,
    normalize_advantages: bool,
) -> Result<LossOutput> {
    let width = policy.input_len();
    let x = stack_rows(samples.iter().map(|s| s.obs.as_slice()), width);
    let (scores, cache) = policy.forward(x.view())?;
    let raw: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    let adv = if normalize_advantages { normalize(&raw) } else { raw };

    let mut weights = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    let mut kept = 0usize;
    let mut clipped = 0usize;
    for (b, s) in samples.iter().enumerate() {
        let row = scores.row(b);
        let row = row.as_slice().expect("contiguous row");
        let ratio = (head.joint_log_prob(row, &s.action) - s.log_prob).exp();
        if !ratio.is_finite() {
            weights.push(0.0);
            continue;
        }
        let a = adv[b];
        let unclipped = ratio * a;
        let obj = clipped_objective(ratio, a, clip);
        total += obj;
        kept += 1;
        // d obj / d log-prob; zero on the clipped branch.
        if unclipped <= obj {
            weights.push(unclipped);
        } else {
            clipped += 1;
            weights.push(0.0);
        }
    }
    let rejected = samples.len() - kept;
    if rejected > 0 {
        log::warn!("{rejected} samples rejected for a non-finite ratio");
    }
    if kept == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grads: vec![0.0; policy.params().len()],
            rejected,
            clip_fraction: 0.0,
        });
    }
    let scale = -1.0 / kept as f64;
    let mut grad_scores = Array2::<f64>::zeros(scores.dim());
    for (b, s) in samples.iter().enumerate() {
        if weights[b] == 0.0 {
            continue;
        }
        let row = scores.row(b);
        let mut out = grad_scores.row_mut(b);
        head.accumulate_grad(
            row.as_slice().expect("contiguous row"),
            &s.action,
            scale * weights[b],
            out.as_slice_mut().expect("contiguous row"),
        );
    }
    let grads = policy.backward(&cache, grad_scores.view())?;
    Ok(LossOutput {
        loss: total * scale,
        grads,
        rejected,
        clip_fraction: clipped as f64 / kept as f64,
    })
}

/// Mean squared error between the value net and the stored targets.
pub fn value_loss(value: &Mlp, samples: &[&PpoSample]) -> Result<(f64, Vec<f64>)> {
    let x = stack_rows(samples.iter().map(|s| s.obs.as_slice()), value.input_len());
    let (pred, cache) = value.forward(x.view())?;
    let b = samples.len() as f64;
    let mut grad = Array2::<f64>::zeros(pred.dim());
    let mut loss = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let diff = pred[[i, 0]] - s.target;
        loss += diff * diff / b;
        grad[[i, 0]] = 2.0 * diff / b;
    }
    let grads = value.backward(&cache, grad.view())?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::network::Network;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(net: &Network, policy: &Mlp, rng: &mut ChaCha8Rng, count: usize) -> Vec<PpoSample> {
        let head = ActionHead::new(net);
        (0..count)
            .map(|_| {
                let obs: Vec<f64> = (0..net.n()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let scores = policy.predict_one(&obs).unwrap();
                let (action, lps) = head.sample(&scores, rng);
                PpoSample {
                    obs,
                    action,
                    log_prob: lps.iter().sum(),
                    old_scores: scores,
                    reward: 0.0,
                    value: 0.0,
                    advantage: rng.random_range(-3.0..3.0),
                    target: rng.random_range(-3.0..3.0),
                    done: false,
                }
            })
            .collect()
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_objective(1.1, 2.0, 0.2), 2.2);
    }

    #[test]
    fn unchanged_policy_gives_minus_mean_advantage() {
        let net = fixtures::manhattan_network(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = Mlp::init(&[20, 16, 20], 1.0, &mut rng).unwrap();
        let samples = random_samples(&net, &policy, &mut rng, 12);
        let refs: Vec<&PpoSample> = samples.iter().collect();
        let head = ActionHead::new(&net);
        let raw = clipped_surrogate_loss(&policy, &head, &refs, 0.2, false).unwrap();
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / 12.0;
        assert!((raw.loss + mean_adv).abs() < 1e-9);
        let normed = clipped_surrogate_loss(&policy, &head, &refs, 0.2, true).unwrap();
        assert!(normed.loss.abs() < 1e-9);
        assert_eq!(normed.clip_fraction, 0.0);
    }

    #[test]
    fn clip_inactive_gradient_equals_unclipped() {
        let net = fixtures::manhattan_network(3).unwrap();
        let head = ActionHead::new(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let old = Mlp::init(&[20, 8, 20], 1.0, &mut rng).unwrap();
        let samples = random_samples(&net, &old, &mut rng, 6);
        let refs: Vec<&PpoSample> = samples.iter().collect();
        let mut policy = old.clone();
        for p in policy.params_mut() {
            *p += rng.random_range(-1e-3..1e-3);
        }
        let out = clipped_surrogate_loss(&policy, &head, &refs, 0.2, false).unwrap();
        assert_eq!(out.clip_fraction, 0.0);
        let unclipped = |net: &Mlp| {
            -samples
                .iter()
                .map(|s| {
                    let sc = net.predict_one(&s.obs).unwrap();
                    (head.joint_log_prob(&sc, &s.action) - s.log_prob).exp() * s.advantage
                })
                .sum::<f64>()
                / samples.len() as f64
        };
        let h = 1e-6;
        for k in (0..policy.params().len()).step_by(7) {
            let orig = policy.params()[k];
            policy.params_mut()[k] = orig + h;
            let up = unclipped(&policy);
            policy.params_mut()[k] = orig - h;
            let down = unclipped(&policy);
            policy.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - out.grads[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", out.grads[k]);
        }
    }

    #[test]
    fn clipped_gradient_matches_finite_difference() {
        let net = fixtures::manhattan_network(2).unwrap();
        let head = ActionHead::new(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let old = Mlp::init(&[20, 8, 20], 1.0, &mut rng).unwrap();
        let samples = random_samples(&net, &old, &mut rng, 10);
        let refs: Vec<&PpoSample> = samples.iter().collect();
        let mut policy = old.clone();
        for p in policy.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let out = clipped_surrogate_loss(&policy, &head, &refs, 0.2, true).unwrap();
        let h = 1e-6;
        for k in (0..policy.params().len()).step_by(5) {
            let orig = policy.params()[k];
            policy.params_mut()[k] = orig + h;
            let up = clipped_surrogate_loss(&policy, &head, &refs, 0.2, true).unwrap().loss;
            policy.params_mut()[k] = orig - h;
            let down = clipped_surrogate_loss(&policy, &head, &refs, 0.2, true).unwrap().loss;
            policy.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = out.grads[k];
            assert!((a - fd).abs() / (a.abs() + 1e-8) < 1e-4 || (a - fd).abs() < 1e-8, "param {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn non_finite_ratio_rejected() {
        let net = fixtures::manhattan_network(3).unwrap();
        let head = ActionHead::new(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let policy = Mlp::init(&[20, 8, 20], 1.0, &mut rng).unwrap();
        let mut samples = random_samples(&net, &policy, &mut rng, 4);
        samples[0].log_prob = f64::NEG_INFINITY;
        let refs: Vec<&PpoSample> = samples.iter().collect();
        let out = clipped_surrogate_loss(&policy, &head, &refs, 0.2, false).unwrap();
        assert_eq!(out.rejected, 1);
        assert!(out.loss.is_finite());
        assert!(out.grads.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn value_loss_examples() {
        let zero = Mlp::zeros(&[2, 3, 1]).unwrap();
        let mk = |target: f64| PpoSample {
            obs: vec![0.5, -0.5],
            action: RebalanceAction::hold(2),
            log_prob: 0.0,
            old_scores: vec![],
            reward: 0.0,
            value: 0.0,
            advantage: 0.0,
            target,
            done: false,
        };
        let s = [mk(1.0), mk(-1.0)];
        let (loss, _) = value_loss(&zero, &s.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(loss, 1.0);
        let z = [mk(0.0), mk(0.0)];
        let (loss, grads) = value_loss(&zero, &z.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn value_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = fixtures::manhattan_network(3).unwrap();
        let policy = Mlp::init(&[20, 8, 20], 1.0, &mut rng).unwrap();
        let samples = random_samples(&net, &policy, &mut rng, 7);
        let refs: Vec<&PpoSample> = samples.iter().collect();
        let mut value = Mlp::init(&[20, 6, 6, 1], 1.0, &mut rng).unwrap();
        let (_, grads) = value_loss(&value, &refs).unwrap();
        let h = 1e-5;
        for k in 0..grads.len() {
            let orig = value.params()[k];
            value.params_mut()[k] = orig + h;
            let up = value_loss(&value, &refs).unwrap().0;
            value.params_mut()[k] = orig - h;
            let down = value_loss(&value, &refs).unwrap().0;
            value.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((grads[k] - fd).abs() / (grads[k].abs() + 1e-8) < 1e-4 || (grads[k] - fd).abs() < 1e-9);
        }
    }
}
