use super::{Coalition, ShapleyEstimate, ValueFunction};
use crate::error::{Error, Result};

pub const MAX_EXACT_PLAYERS: usize = 20;

/// Exact Shapley values by enumerating all `2^n` coalitions:
/// `psi_i = sum_{S not containing i} |S|! (n - |S| - 1)! / n! * (V(S + i) - V(S))`.
pub fn exact_shapley(vf: &dyn ValueFunction) -> Result<Vec<ShapleyEstimate>> {
    let n = vf.players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::TooManyPlayers {
            players: n,
            max: MAX_EXACT_PLAYERS,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let total = 1usize << n;
    let mut values = Vec::with_capacity(total);
    for mask in 0..total {
        values.push(vf.value(&Coalition::from_mask(n, mask as u64))?);
    }
    // weight[s] = s! (n-s-1)! / n!
    let mut weight = vec![0.0; n];
    weight[0] = 1.0 / n as f64;
    for s in 0..n - 1 {
        weight[s + 1] = weight[s] * (s + 1) as f64 / (n - s - 1) as f64;
    }
    let psi = (0..n)
        .map(|i| {
            let bit = 1usize << i;
            let mut acc = 0.0;
            for mask in 0..total {
                if mask & bit == 0 {
                    let s = mask.count_ones() as usize;
                    acc += weight[s] * (values[mask | bit] - values[mask]);
                }
            }
            ShapleyEstimate::exact(acc)
        })
        .collect();
    Ok(psi)
}
