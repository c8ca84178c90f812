use crate::error::{Error, Result};

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Momentum accumulator `q_k = beta * q_{k-1} + lambda * psi / ||psi||`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub q: Vec<f64>,
    beta: f64,
    lambda: f64,
    xi: f64,
}

impl MomentumState {
    pub fn new(players: usize, beta: f64, lambda: f64, xi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
        }
        if (beta + lambda - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "beta + lambda must equal 1, got {beta} + {lambda}"
            )));
        }
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
        }
        Ok(Self {
            q: vec![0.0; players],
            beta,
            lambda,
            xi,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Folds in the current round's estimate; a zero `psi` leaves `q` as is.
    pub fn update(&mut self, psi: &[f64]) {
        let norm = l2(psi);
        if norm == 0.0 || !norm.is_finite() {
            return;
        }
        for (q, p) in self.q.iter_mut().zip(psi) {
            *q = self.beta * *q + self.lambda * p / norm;
        }
    }
}

/// `alpha += xi * q / ||q||`; a zero `q` leaves `alpha` unchanged.
pub fn alpha_update(alpha: &mut [f64], state: &MomentumState) {
    let norm = l2(&state.q);
    if norm == 0.0 || !norm.is_finite() {
        return;
    }
    for (a, q) in alpha.iter_mut().zip(&state.q) {
        *a += state.xi * q / norm;
    }
}

/// Smallest player value among each layer's players.
pub fn psi_min_per_layer(psi: &[f64], layer_players: &[Vec<usize>]) -> Vec<f64> {
    layer_players
        .iter()
        .map(|ps| ps.iter().map(|&i| psi[i]).fold(f64::INFINITY, f64::min))
        .map(|m| if m.is_finite() { m } else { 0.0 })
        .collect()
}

/// Stops the search once `sum_i scale * |psi_min_i| < epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceMonitor {
    pub epsilon: f64,
    pub scale: f64,
    pub history: Vec<f64>,
}

impl ConvergenceMonitor {
    pub const DEFAULT_SCALE: f64 = 50.0;

    pub fn new(epsilon: f64, scale: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            scale,
            history: Vec::new(),
        })
    }

    pub fn delta(&self, psi_min_per_layer: &[f64]) -> f64 {
        psi_min_per_layer.iter().map(|p| self.scale * p.abs()).sum()
    }

    /// Records the criterion and reports whether to stop.
    pub fn check(&mut self, psi_min_per_layer: &[f64]) -> bool {
        let d = self.delta(psi_min_per_layer);
        self.history.push(d);
        d < self.epsilon
    }
}
