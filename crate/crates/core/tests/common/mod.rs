#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smpq::game::Coalition;

/// Boxed synthetic game over `n` players.
pub struct Game {
    pub name: String,
    pub n: usize,
    pub v: Box<dyn Fn(&Coalition) -> f64 + Sync>,
}

impl Game {
    pub fn new(name: impl Into<String>, n: usize, v: impl Fn(&Coalition) -> f64 + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            n,
            v: Box::new(v),
        }
    }
}

pub fn majority(n: usize, quota: usize) -> Game {
    Game::new(format!("majority{n}/{quota}"), n, move |s| f64::from(u8::from(s.len() >= quota)))
}

pub fn additive(c: Vec<f64>) -> Game {
    let n = c.len();
    Game::new(format!("additive{n}"), n, move |s| s.members().map(|i| c[i]).sum())
}

/// Weighted voting game plus a pairwise synergy term; player `dummy`
/// never changes the value.
pub fn planted_dummy(n: usize, dummy: usize, seed: u64) -> Game {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|i| if i == dummy { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
    let total: f64 = w.iter().sum();
    Game::new(format!("dummy{n}"), n, move |s| {
        let mass: f64 = s.members().map(|i| w[i]).sum();
        let synergy = if s.contains((dummy + 1) % n) && s.contains((dummy + 2) % n) { 0.3 } else { 0.0 };
        f64::from(u8::from(mass > total / 2.0)) + synergy
    })
}

/// Players `a` and `b` enter symmetrically; everything else is random but
/// a function of the coalition with `a` and `b` exchanged.
pub fn planted_symmetric(n: usize, a: usize, b: usize, seed: u64) -> Game {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<f64> = (0..1usize << n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Game::new(format!("symmetric{n}"), n, move |s| {
        let mask: usize = s.members().map(|i| 1 << i).sum();
        let swapped = {
            let (ba, bb) = (mask >> a & 1, mask >> b & 1);
            (mask & !(1 << a) & !(1 << b)) | (bb << a) | (ba << b)
        };
        // symmetrize over the swap
        0.5 * (table[mask] + table[swapped])
    })
}

/// Arbitrary game: a random value for every coalition, `V(empty) = 0`.
pub fn random_table(n: usize, seed: u64) -> Game {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: Vec<f64> = (0..1usize << n).map(|_| rng.gen_range(-1.0..2.0)).collect();
    table[0] = 0.0;
    Game::new(format!("random{n}"), n, move |s| {
        let mask: usize = s.members().map(|i| 1 << i).sum();
        table[mask]
    })
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}
