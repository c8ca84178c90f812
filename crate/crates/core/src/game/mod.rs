//! Cooperative-game machinery: coalitions, value functions, exact and
//! Monte-Carlo Shapley values, and the momentum-normalized alpha update.

mod exact;
mod montecarlo;
mod update;
mod value;

pub use exact::{exact_shapley, MAX_EXACT_PLAYERS};
pub use montecarlo::{mc_shapley, McConfig, McResult};
pub use update::{alpha_update, psi_min_per_layer, ConvergenceMonitor, MomentumState};
pub use value::ValueEval;

use crate::error::Result;

/// A subset of the player set `{0, .., n-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    members: Vec<bool>,
}

impl Coalition {
    pub fn empty(players: usize) -> Self {
        Self {
            members: vec![false; players],
        }
    }

    pub fn full(players: usize) -> Self {
        Self {
            members: vec![true; players],
        }
    }

    pub fn from_mask(players: usize, mask: u64) -> Self {
        Self {
            members: (0..players).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    pub fn from_members(players: usize, members: &[usize]) -> Self {
        let mut c = Self::empty(players);
        for &m in members {
            c.insert(m);
        }
        c
    }

    pub fn players(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, player: usize) -> bool {
        self.members.get(player).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, player: usize) {
        self.members[player] = true;
    }

    pub fn remove(&mut self, player: usize) {
        self.members[player] = false;
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }
}

/// A cooperative game: a payoff for every coalition of `players()` players.
pub trait ValueFunction: Sync {
    fn players(&self) -> usize;
    fn value(&self, coalition: &Coalition) -> Result<f64>;
}

/// Adapter turning a closure into a [`ValueFunction`].
pub struct FnGame<F> {
    players: usize,
    f: F,
}

impl<F> FnGame<F>
where
    F: Fn(&Coalition) -> f64 + Sync,
{
    pub fn new(players: usize, f: F) -> Self {
        Self { players, f }
    }
}

impl<F> ValueFunction for FnGame<F>
where
    F: Fn(&Coalition) -> f64 + Sync,
{
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: &Coalition) -> Result<f64> {
        Ok((self.f)(coalition))
    }
}

/// Per-player Shapley estimate with a running (Welford) variance of the
/// sampled marginal contributions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShapleyEstimate {
    pub psi: f64,
    pub samples: u64,
    mean: f64,
    m2: f64,
}

impl ShapleyEstimate {
    pub fn exact(psi: f64) -> Self {
        Self {
            psi,
            samples: 0,
            mean: psi,
            m2: 0.0,
        }
    }

    pub fn push(&mut self, marginal: f64) {
        self.samples += 1;
        let delta = marginal - self.mean;
        self.mean += delta / self.samples as f64;
        self.m2 += delta * (marginal - self.mean);
        self.psi = self.mean;
    }

    /// Sample variance of the marginals (zero below two samples).
    pub fn variance(&self) -> f64 {
        if self.samples < 2 {
            0.0
        } else {
            (self.m2 / (self.samples - 1) as f64).max(0.0)
        }
    }

    /// Standard error of `psi`.
    pub fn std_error(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            (self.variance() / self.samples as f64).sqrt()
        }
    }
}

pub fn psi_values(estimates: &[ShapleyEstimate]) -> Vec<f64> {
    estimates.iter().map(|e| e.psi).collect()
}
