//! Brute-force reference computations shared by the integration tests.
//!
//! Everything here is deliberately naive: transition matrices by uniformization,
//! marginals by summing over every clean sequence, AO losses by walking every
//! permutation.

#![allow(dead_code)]

use radd::model::{ConditionalModel, TabularModel, Trainable};
use radd::{ExactJointTable, SequenceState, Vocab};
use rand::Rng;

/// `exp(a Q)` for the absorbing generator on `n + 1` states, by uniformization:
/// `sum_k Poisson(k; a) (I + Q)^k`. `I + Q` sends every real token to the mask.
pub fn transition_matrix(n: usize, a: f64) -> Vec<Vec<f64>> {
    let size = n + 1;
    let mut out = vec![vec![0.0; size]; size];
    // Row vector for each start state, pushed through I + Q repeatedly.
    for start in 0..size {
        let mut v = vec![0.0; size];
        v[start] = 1.0;
        let mut weight = (-a).exp();
        for k in 0..400 {
            for j in 0..size {
                out[start][j] += weight * v[j];
            }
            let mut next = vec![0.0; size];
            for j in 0..n {
                next[n] += v[j];
            }
            next[n] += v[n];
            v = next;
            weight *= a / (k + 1) as f64;
            if weight < 1e-300 {
                break;
            }
        }
    }
    out
}

/// `p_t(x_t) = sum_{x0} p0(x0) prod_i P[x0_i][x_t_i]`.
pub fn marginal(p0: &ExactJointTable, x: &SequenceState, trans: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for idx in 0..p0.n_states() {
        let x0 = p0.decode(idx);
        let mut like = p0.probs()[idx];
        for (a, b) in x0.tokens().iter().zip(x.tokens()) {
            like *= trans[*a as usize][*b as usize];
        }
        total += like;
    }
    total
}

/// Every sequence over `{0..=max_token}^d`.
pub fn all_sequences(max_token: u32, d: usize) -> Vec<SequenceState> {
    let mut out = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::new();
        for prefix in &out {
            for tok in 0..=max_token {
                let mut s: Vec<u32> = prefix.clone();
                s.push(tok);
                next.push(s);
            }
        }
        out = next;
    }
    out.into_iter().map(SequenceState::new).collect()
}

pub fn permutations(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(d - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, d - 1);
            out.push(q);
        }
    }
    out
}

/// AO loss as the mean over all `d!` orders of the chain-rule negative log-likelihood.
pub fn ao_loss_by_orders(model: &dyn ConditionalModel, x0: &SequenceState) -> f64 {
    let vocab = model.vocab();
    let d = x0.len();
    let orders = permutations(d);
    let mut total = 0.0;
    for order in &orders {
        let mut x = SequenceState::all_masked(vocab, d);
        for &pos in order {
            let probs = model.predict(&x).unwrap();
            total -= probs.get(pos, x0.get(pos) as usize).ln();
            x.set(pos, x0.get(pos));
        }
    }
    total / orders.len() as f64
}

pub fn binary_entropy(l: f64) -> f64 {
    -(l * l.ln() + (1.0 - l) * (1.0 - l).ln())
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn random_table<R: Rng>(rng: &mut R, n: usize, d: usize) -> ExactJointTable {
    let vocab = Vocab::new(n).unwrap();
    let count = n.pow(d as u32);
    let w: Vec<f64> = (0..count)
        .map(|_| -rng.gen_range(1e-3f64..1.0).ln())
        .collect();
    let s: f64 = w.iter().sum();
    ExactJointTable::new(vocab, d, w.into_iter().map(|v| v / s).collect()).unwrap()
}

pub fn random_tabular<R: Rng>(rng: &mut R, n: usize, d: usize) -> TabularModel {
    let mut m = TabularModel::zeros(Vocab::new(n).unwrap(), d).unwrap();
    for p in m.params_mut() {
        *p = rng.gen_range(-2.0..2.0);
    }
    m
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    pub fn var(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        (self.var() / self.n).sqrt()
    }
}
