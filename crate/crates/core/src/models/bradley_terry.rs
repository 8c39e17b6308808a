use crate::error::{invalid, Result};

use super::{sigmoid, softplus, Model};

/// One match: `outcome = 1` when `player_a` won.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub player_a: usize,
    pub player_b: usize,
    pub outcome: f64,
}

/// Pairwise-comparison model: `P(a beats b) = logit⁻¹(θ_a − θ_b)` with a
/// standard Gaussian prior on the player scores `θ`.
#[derive(Debug, Clone)]
pub struct BradleyTerryModel {
    matches: Vec<Match>,
    players: usize,
}

impl BradleyTerryModel {
    pub fn new(matches: Vec<Match>, players: usize) -> Result<Self> {
        if matches.is_empty() || players < 2 {
            return Err(invalid("bradley-terry: need at least one match and two players"));
        }
        for m in &matches {
            if m.player_a >= players || m.player_b >= players {
                return Err(invalid(format!(
                    "bradley-terry: player index outside 0..{players}"
                )));
            }
            if m.player_a == m.player_b {
                return Err(invalid("bradley-terry: a player cannot play itself"));
            }
            if m.outcome != 0.0 && m.outcome != 1.0 {
                return Err(invalid("bradley-terry: outcome must be 0 or 1"));
            }
        }
        Ok(Self { matches, players })
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }
}

impl Model for BradleyTerryModel {
    fn num_data(&self) -> usize {
        self.matches.len()
    }

    fn dim(&self) -> usize {
        self.players
    }

    fn log_lik(&self, n: usize, z: &[f64]) -> f64 {
        let m = self.matches[n];
        let delta = z[m.player_a] - z[m.player_b];
        m.outcome * delta - softplus(delta)
    }

    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> {
        let m = self.matches[n];
        let r = m.outcome - sigmoid(z[m.player_a] - z[m.player_b]);
        let mut g = vec![0.0; self.players];
        g[m.player_a] = r;
        g[m.player_b] = -r;
        g
    }

    fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64> {
        let m = self.matches[n];
        let s = sigmoid(z[m.player_a] - z[m.player_b]);
        let c = -s * (1.0 - s) * (v[m.player_a] - v[m.player_b]);
        let mut h = vec![0.0; self.players];
        h[m.player_a] = c;
        h[m.player_b] = -c;
        h
    }
}
