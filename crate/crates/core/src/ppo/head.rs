//! Per-station categorical action head.
//!
//! The policy network emits one score per station. Station `i` picks its
//! rebalancing destination from `{i} ∪ neighbors(i)` with probabilities given
//! by the softmax of the scores at those stations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Station};
use crate::sim::RebalanceAction;

/// How network outputs map to per-station choices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One score per station, shared by every station that may pick it.
    #[default]
    Shared,
    /// A separate logit for every (station, option) pair.
    PerStation,
}

impl HeadKind {
    pub fn output_len(self, network: &Network) -> usize {
        match self {
            HeadKind::Shared => network.n(),
            HeadKind::PerStation => network.n() * (network.k() + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionHead {
    kind: HeadKind,
    options: Vec<Vec<Station>>,
    /// Output index feeding each option, parallel to `options`.
    slots: Vec<Vec<usize>>,
    width: usize,
}

fn log_softmax_at(scores: &[f64], slots: &[usize], out: &mut Vec<f64>) {
    out.clear();
    let max = slots.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + slots.iter().map(|&j| (scores[j] - max).exp()).sum::<f64>().ln();
    out.extend(slots.iter().map(|&j| scores[j] - lse));
}

impl ActionHead {
    pub fn new(network: &Network) -> Self {
        Self::with_kind(network, HeadKind::Shared)
    }

    pub fn with_kind(network: &Network, kind: HeadKind) -> Self {
        let options: Vec<Vec<Station>> = (0..network.n()).map(|i| network.options(i).collect()).collect();
        let slots = match kind {
            HeadKind::Shared => options.clone(),
            HeadKind::PerStation => {
                let w = network.k() + 1;
                (0..network.n()).map(|i| (i * w..(i + 1) * w).collect()).collect()
            }
        };
        Self {
            kind,
            options,
            slots,
            width: kind.output_len(network),
        }
    }

    /// Picks the head whose output length matches `len`.
    pub fn for_output_len(network: &Network, len: usize) -> Result<Self> {
        [HeadKind::Shared, HeadKind::PerStation]
            .into_iter()
            .find(|k| k.output_len(network) == len)
            .map(|k| Self::with_kind(network, k))
            .ok_or_else(|| Error::Shape(format!("no action head has {len} outputs for this network")))
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.options.len()
    }

    /// Network outputs consumed.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Destinations open to station `i`, the station itself first.
    pub fn options(&self, i: Station) -> &[Station] {
        &self.options[i]
    }

    /// Log-probabilities over `options(i)`.
    pub fn log_probs(&self, scores: &[f64], i: Station) -> Vec<f64> {
        let mut out = Vec::new();
        log_softmax_at(scores, &self.slots[i], &mut out);
        out
    }

    fn position(&self, i: Station, dest: Station) -> Option<usize> {
        self.options[i].iter().position(|&j| j == dest)
    }

    /// Per-station log-probabilities of `action`.
    pub fn station_log_probs(&self, scores: &[f64], action: &RebalanceAction) -> Vec<f64> {
        let mut buf = Vec::new();
        (0..self.n())
            .map(|i| {
                log_softmax_at(scores, &self.slots[i], &mut buf);
                self.position(i, action.dest[i]).map_or(f64::NEG_INFINITY, |p| buf[p])
            })
            .collect()
    }

    pub fn joint_log_prob(&self, scores: &[f64], action: &RebalanceAction) -> f64 {
        self.station_log_probs(scores, action).iter().sum()
    }

    /// Adds `weight * d(joint log-prob)/d(scores)` into `out`.
    pub fn accumulate_grad(&self, scores: &[f64], action: &RebalanceAction, weight: f64, out: &mut [f64]) {
        let mut buf = Vec::new();
        for i in 0..self.n() {
            log_softmax_at(scores, &self.slots[i], &mut buf);
            for (p, (&j, &slot)) in self.options[i].iter().zip(&self.slots[i]).enumerate() {
                let indicator = if j == action.dest[i] { 1.0 } else { 0.0 };
                out[slot] += weight * (indicator - buf[p].exp());
            }
        }
    }

    /// Draws one destination per station.
    pub fn sample<R: Rng + ?Sized>(&self, scores: &[f64], rng: &mut R) -> (RebalanceAction, Vec<f64>) {
        let mut buf = Vec::new();
        let mut dest = Vec::with_capacity(self.n());
        let mut lps = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let opts = &self.options[i];
            log_softmax_at(scores, &self.slots[i], &mut buf);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = opts.len() - 1;
            for (p, lp) in buf.iter().enumerate() {
                cum += lp.exp();
                if u < cum {
                    pick = p;
                    break;
                }
            }
            dest.push(opts[pick]);
            lps.push(buf[pick]);
        }
        (RebalanceAction { dest }, lps)
    }

    /// Most likely destination per station, earliest option on ties.
    pub fn greedy(&self, scores: &[f64]) -> (RebalanceAction, Vec<f64>) {
        let mut buf = Vec::new();
        let mut dest = Vec::with_capacity(self.n());
        let mut lps = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            log_softmax_at(scores, &self.slots[i], &mut buf);
            let mut best = 0;
            for p in 1..buf.len() {
                if buf[p] > buf[best] {
                    best = p;
                }
            }
            dest.push(self.options[i][best]);
            lps.push(buf[best]);
        }
        (RebalanceAction { dest }, lps)
    }

    /// Sum over stations of KL(old || new) between the categorical choices.
    pub fn kl(&self, old_scores: &[f64], new_scores: &[f64]) -> f64 {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for slots in &self.slots {
            log_softmax_at(old_scores, slots, &mut a);
            log_softmax_at(new_scores, slots, &mut b);
            total += a.iter().zip(&b).map(|(p, q)| p.exp() * (p - q)).sum::<f64>();
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_give_uniform_choice() {
        let net = fixtures::manhattan_network(3).unwrap();
        let head = ActionHead::new(&net);
        let lp = head.log_probs(&vec![0.0; net.n()], 5);
        assert_eq!(lp.len(), 4);
        for v in lp {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_frequencies_follow_probabilities() {
        let net = fixtures::manhattan_network(2).unwrap();
        let head = ActionHead::new(&net);
        let scores: Vec<f64> = (0..net.n()).map(|j| (j as f64 * 0.37).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 40_000;
        let mut counts = vec![0usize; 3];
        for _ in 0..draws {
            let (a, _) = head.sample(&scores, &mut rng);
            let pos = head.options(0).iter().position(|&j| j == a.dest[0]).unwrap();
            counts[pos] += 1;
        }
        let probs: Vec<f64> = head.log_probs(&scores, 0).iter().map(|l| l.exp()).collect();
        for (c, p) in counts.iter().zip(probs) {
            let freq = *c as f64 / draws as f64;
            assert!((freq - p).abs() < 4.0 * (p * (1.0 - p) / draws as f64).sqrt());
        }
    }

    #[test]
    fn per_station_slots_are_disjoint() {
        let net = fixtures::manhattan_network(2).unwrap();
        let head = ActionHead::with_kind(&net, HeadKind::PerStation);
        assert_eq!(head.width(), 60);
        let mut scores = vec![0.0; 60];
        // Only station 1's first option (itself) gets a high logit.
        scores[3] = 10.0;
        let (a, _) = head.greedy(&scores);
        assert_eq!(a.dest[1], 1);
        assert_eq!(head.log_probs(&scores, 0), head.log_probs(&vec![0.0; 60], 0));
        assert_eq!(ActionHead::for_output_len(&net, 60).unwrap().kind(), HeadKind::PerStation);
        assert_eq!(ActionHead::for_output_len(&net, 20).unwrap().kind(), HeadKind::Shared);
        assert!(ActionHead::for_output_len(&net, 21).is_err());
    }

    #[test]
    fn kl_of_identical_scores_is_zero() {
        let net = fixtures::manhattan_network(3).unwrap();
        let head = ActionHead::new(&net);
        let s: Vec<f64> = (0..net.n()).map(|j| j as f64 / 7.0).collect();
        assert_eq!(head.kl(&s, &s), 0.0);
        let t: Vec<f64> = s.iter().map(|x| -x).collect();
        assert!(head.kl(&s, &t) > 0.0);
    }

    proptest! {
        #[test]
        fn factorized_probabilities(
            scores in prop::collection::vec(-20.0f64..20.0, 20),
            seed in any::<u64>(),
            k in 1usize..6,
        ) {
            let net = fixtures::manhattan_network(k).unwrap();
            let head = ActionHead::new(&net);
            for i in 0..net.n() {
                let total: f64 = head.log_probs(&scores, i).iter().map(|l| l.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (action, lps) = head.sample(&scores, &mut rng);
            let per_station: f64 = (0..net.n())
                .map(|i| {
                    let p = head.options(i).iter().position(|&j| j == action.dest[i]).unwrap();
                    head.log_probs(&scores, i)[p]
                })
                .sum();
            prop_assert!((head.joint_log_prob(&scores, &action) - per_station).abs() < 1e-9);
            prop_assert!((lps.iter().sum::<f64>() - per_station).abs() < 1e-9);
        }

        #[test]
        fn log_prob_gradient_matches_finite_difference(
            scores in prop::collection::vec(-3.0f64..3.0, 20),
            seed in any::<u64>(),
            kind in prop_oneof![Just(HeadKind::Shared), Just(HeadKind::PerStation)],
        ) {
            let net = fixtures::manhattan_network(3).unwrap();
            let head = ActionHead::with_kind(&net, kind);
            let scores: Vec<f64> = scores.iter().cycle().take(head.width()).copied().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (action, _) = head.sample(&scores, &mut rng);
            let mut grad = vec![0.0; head.width()];
            head.accumulate_grad(&scores, &action, 1.0, &mut grad);
            let h = 1e-6;
            for j in 0..head.width() {
                let mut up = scores.clone();
                up[j] += h;
                let mut down = scores.clone();
                down[j] -= h;
                let fd = (head.joint_log_prob(&up, &action) - head.joint_log_prob(&down, &action)) / (2.0 * h);
                prop_assert!((fd - grad[j]).abs() < 1e-6);
            }
        }
    }
}
