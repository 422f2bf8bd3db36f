use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decision, RebalancePolicy, RoutedAction};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ppo::{ActionHead, Mlp};
use crate::sim::{observe, FleetState};

/// How the neural policy turns scores into an action.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Draw each station's destination from its categorical distribution.
    #[default]
    Sample,
    /// Take each station's most likely destination.
    Greedy,
}

/// A trained policy network driving per-station routing.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    net: Mlp,
    mode: SampleMode,
}

impl NeuralPolicy {
    pub fn new(net: Mlp, mode: SampleMode) -> Self {
        Self { net, mode }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn act(&self, state: &FleetState, network: &Network, rng: &mut ChaCha8Rng) -> Result<RoutedAction> {
        let n = network.n();
        if self.net.input_len() != n {
            return Err(Error::Shape(format!(
                "network sizes {:?} do not fit {n} stations",
                self.net.sizes()
            )));
        }
        let head = ActionHead::for_output_len(network, self.net.output_len())?;
        let scores = self.net.predict_one(&observe(state))?;
        let (action, lps) = match self.mode {
            SampleMode::Sample => head.sample(&scores, rng),
            SampleMode::Greedy => head.greedy(&scores),
        };
        Ok(RoutedAction {
            action,
            log_probs: Some(lps),
            scores: Some(scores),
        })
    }
}

impl RebalancePolicy for NeuralPolicy {
    fn name(&self) -> String {
        "ppo".into()
    }

    fn decide(&self, state: &FleetState, network: &Network, rng: &mut ChaCha8Rng) -> Result<Decision> {
        self.act(state, network, rng).map(Decision::Route)
    }
}
