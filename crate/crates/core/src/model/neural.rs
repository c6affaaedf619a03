//! Small MLP conditional model with hand-written backprop.
//!
//! Each masked position `i` sees its own embedding, the mean embedding of the whole
//! sequence, and the raw token embeddings of `window` neighbours on each side.
//! Two tanh layers then a softmax over the `N` real tokens.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{RaddError, Result};
use crate::model::{
    softmax, softmax_backward, Backend, Checkpoint, ConditionalModel, Probs, Trainable,
    CHECKPOINT_FORMAT,
};
use crate::rng::seeded;
use crate::space::{SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    #[serde(default = "default_embed")]
    pub embed: usize,
    #[serde(default = "default_hidden")]
    pub hidden1: usize,
    #[serde(default = "default_hidden")]
    pub hidden2: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_embed() -> usize {
    16
}

fn default_hidden() -> usize {
    96
}

fn default_window() -> usize {
    3
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            embed: default_embed(),
            hidden1: default_hidden(),
            hidden2: default_hidden(),
            window: default_window(),
        }
    }
}

impl NeuralConfig {
    fn input_width(&self) -> usize {
        self.embed * (2 + 2 * self.window)
    }

    fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(RaddError::Shape(
                "neural layer widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: Vocab, d: usize, cfg: &NeuralConfig) -> Self {
        let n = vocab.n_tokens();
        let e = cfg.embed;
        let tok = 0;
        let pos = tok + (n + 1) * e;
        let w1 = pos + d * e;
        let b1 = w1 + cfg.hidden1 * cfg.input_width();
        let w2 = b1 + cfg.hidden1;
        let b2 = w2 + cfg.hidden2 * cfg.hidden1;
        let w3 = b2 + cfg.hidden2;
        let b3 = w3 + n * cfg.hidden2;
        Self {
            tok,
            pos,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: b3 + n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    vocab: Vocab,
    d: usize,
    cfg: NeuralConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations kept for one masked position.
#[derive(Debug, Clone)]
struct Cached {
    position: usize,
    z: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NeuralTape {
    tokens: Vec<u32>,
    probs: Probs,
    cached: Vec<Cached>,
}

impl NeuralModel {
    /// Seeded initialisation: uniform embeddings, Xavier-uniform weights, zero biases.
    pub fn new(vocab: Vocab, d: usize, cfg: NeuralConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if d == 0 {
            return Err(RaddError::Shape("d must be at least 1".into()));
        }
        let layout = Layout::new(vocab, d, &cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = seeded(seed);
        for v in &mut params[layout.tok..layout.w1] {
            *v = rng.gen_range(-0.5..0.5);
        }
        let n = vocab.n_tokens();
        let layers = [
            (layout.w1, cfg.input_width(), cfg.hidden1, 1.0),
            (layout.w2, cfg.hidden1, cfg.hidden2, 1.0),
            // A small output layer starts the softmax close to uniform.
            (layout.w3, cfg.hidden2, n, 0.1),
        ];
        for (start, fan_in, fan_out, scale) in layers {
            let bound = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut params[start..start + fan_in * fan_out] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self {
            vocab,
            d,
            cfg,
            layout,
            params,
        })
    }

    pub fn from_params(
        vocab: Vocab,
        d: usize,
        cfg: NeuralConfig,
        params: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(vocab, d, &cfg);
        if params.len() != layout.total {
            return Err(RaddError::Shape(format!(
                "neural model needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            vocab,
            d,
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.cfg
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            backend: Backend::Neural,
            vocab: self.vocab.n_tokens(),
            d: self.d,
            arch: Some(self.cfg),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.backend != Backend::Neural {
            return Err(RaddError::Incompatible(format!(
                "expected a neural checkpoint, found {:?}",
                ck.backend
            )));
        }
        let cfg = ck
            .arch
            .ok_or_else(|| RaddError::Incompatible("neural checkpoint without arch".into()))?;
        Self::from_params(Vocab::new(ck.vocab)?, ck.d, cfg, ck.params)
    }

    fn tok_row(&self, token: u32) -> &[f64] {
        let e = self.cfg.embed;
        let start = self.layout.tok + token as usize * e;
        &self.params[start..start + e]
    }

    fn pos_row(&self, i: usize) -> &[f64] {
        let e = self.cfg.embed;
        let start = self.layout.pos + i * e;
        &self.params[start..start + e]
    }

    /// Token at `i + offset`, or the mask token outside the sequence.
    fn neighbour(&self, tokens: &[u32], i: usize, offset: isize) -> u32 {
        let j = i as isize + offset;
        if j < 0 || j >= tokens.len() as isize {
            self.vocab.mask_id()
        } else {
            tokens[j as usize]
        }
    }

    fn offsets(&self) -> impl Iterator<Item = isize> {
        (1..=self.cfg.window as isize).flat_map(|o| [-o, o])
    }
}

/// `out = W x + b` with `W` row-major `out.len() x x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * k..(r + 1) * k];
        *o = b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T`, `db += dy`, and returns `W^T dy` in `dx`.
fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let k = x.len();
    dx.iter_mut().for_each(|v| *v = 0.0);
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[r] += g;
        let wrow = &w[r * k..(r + 1) * k];
        let dwrow = &mut dw[r * k..(r + 1) * k];
        for c in 0..k {
            dwrow[c] += g * x[c];
            dx[c] += g * wrow[c];
        }
    }
}

impl ConditionalModel for NeuralModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.d
    }

    fn backend(&self) -> Backend {
        Backend::Neural
    }

    fn predict(&self, x: &SequenceState) -> Result<Probs> {
        Ok(self.forward(x)?.0)
    }
}

impl Trainable for NeuralModel {
    type Tape = NeuralTape;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &SequenceState) -> Result<(Probs, NeuralTape)> {
        self.check_input(x)?;
        let (e, n, l) = (self.cfg.embed, self.vocab.n_tokens(), &self.layout);
        let tokens = x.tokens();
        let mut ctx = vec![0.0; e];
        for (j, &t) in tokens.iter().enumerate() {
            for ((c, a), b) in ctx.iter_mut().zip(self.tok_row(t)).zip(self.pos_row(j)) {
                *c += a + b;
            }
        }
        ctx.iter_mut().for_each(|c| *c /= self.d as f64);

        let mut probs = Probs::zeros(self.d, n);
        let mut cached = Vec::new();
        for i in x.masked_positions(self.vocab) {
            let mut z = Vec::with_capacity(self.cfg.input_width());
            z.extend(
                self.tok_row(tokens[i])
                    .iter()
                    .zip(self.pos_row(i))
                    .map(|(a, b)| a + b),
            );
            z.extend_from_slice(&ctx);
            for o in self.offsets() {
                z.extend_from_slice(self.tok_row(self.neighbour(tokens, i, o)));
            }
            let mut a1 = vec![0.0; self.cfg.hidden1];
            affine(
                &self.params[l.w1..l.b1],
                &self.params[l.b1..l.w2],
                &z,
                &mut a1,
            );
            a1.iter_mut().for_each(|v| *v = v.tanh());
            let mut a2 = vec![0.0; self.cfg.hidden2];
            affine(
                &self.params[l.w2..l.b2],
                &self.params[l.b2..l.w3],
                &a1,
                &mut a2,
            );
            a2.iter_mut().for_each(|v| *v = v.tanh());
            let row = probs.row_mut(i);
            affine(
                &self.params[l.w3..l.b3],
                &self.params[l.b3..l.total],
                &a2,
                row,
            );
            softmax(row);
            cached.push(Cached {
                position: i,
                z,
                a1,
                a2,
            });
        }
        probs.fill_unmasked_one_hot(x, self.vocab);
        let tape = NeuralTape {
            tokens: tokens.to_vec(),
            probs: probs.clone(),
            cached,
        };
        Ok((probs, tape))
    }

    fn backward(&self, tape: &NeuralTape, upstream: &Probs, grad: &mut [f64]) {
        let (e, n, l) = (self.cfg.embed, self.vocab.n_tokens(), self.layout);
        let (h1, h2) = (self.cfg.hidden1, self.cfg.hidden2);
        let mut dctx = vec![0.0; e];
        let mut dlogit = vec![0.0; n];
        let mut da2 = vec![0.0; h2];
        let mut da1 = vec![0.0; h1];
        let mut dz = vec![0.0; self.cfg.input_width()];
        for c in &tape.cached {
            let i = c.position;
            let g = upstream.row(i);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            dlogit.iter_mut().for_each(|v| *v = 0.0);
            softmax_backward(tape.probs.row(i), g, &mut dlogit);

            let (head, tail) = grad.split_at_mut(l.b3);
            affine_backward(
                &self.params[l.w3..l.b3],
                &c.a2,
                &dlogit,
                &mut head[l.w3..],
                &mut tail[..n],
                &mut da2,
            );
            for (d, a) in da2.iter_mut().zip(&c.a2) {
                *d *= 1.0 - a * a;
            }

            let (head, tail) = grad.split_at_mut(l.b2);
            affine_backward(
                &self.params[l.w2..l.b2],
                &c.a1,
                &da2,
                &mut head[l.w2..],
                &mut tail[..h2],
                &mut da1,
            );
            for (d, a) in da1.iter_mut().zip(&c.a1) {
                *d *= 1.0 - a * a;
            }

            let (head, tail) = grad.split_at_mut(l.b1);
            affine_backward(
                &self.params[l.w1..l.b1],
                &c.z,
                &da1,
                &mut head[l.w1..],
                &mut tail[..h1],
                &mut dz,
            );

            let own = tape.tokens[i] as usize;
            for k in 0..e {
                grad[l.tok + own * e + k] += dz[k];
                grad[l.pos + i * e + k] += dz[k];
                dctx[k] += dz[e + k];
            }
            for (slot, o) in self.offsets().enumerate() {
                let t = self.neighbour(&tape.tokens, i, o) as usize;
                let src = &dz[(2 + slot) * e..(3 + slot) * e];
                for k in 0..e {
                    grad[l.tok + t * e + k] += src[k];
                }
            }
        }
        if tape.cached.is_empty() {
            return;
        }
        let scale = 1.0 / self.d as f64;
        for (j, &t) in tape.tokens.iter().enumerate() {
            for k in 0..e {
                grad[l.tok + t as usize * e + k] += dctx[k] * scale;
                grad[l.pos + j * e + k] += dctx[k] * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss_gradient;

    fn small() -> NeuralModel {
        let cfg = NeuralConfig {
            embed: 4,
            hidden1: 8,
            hidden2: 8,
            window: 1,
        };
        let mut m = NeuralModel::new(Vocab::new(3).unwrap(), 4, cfg, 11).unwrap();
        // Non-zero biases and a larger output layer so every block matters.
        let l = m.layout;
        for (k, v) in m.params_mut().iter_mut().enumerate() {
            if k >= l.b1 && k < l.w2 || k >= l.b2 && k < l.w3 || k >= l.b3 {
                *v = 0.1 * (k as f64).sin();
            }
            if k >= l.w3 && k < l.b3 {
                *v *= 10.0;
            }
        }
        m
    }

    /// Scalar loss `sum_i sum_j c_ij * p_ij` over masked rows.
    fn weighted_sum(m: &NeuralModel, x: &SequenceState, c: &Probs) -> f64 {
        let p = m.predict(x).unwrap();
        x.masked_positions(m.vocab())
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(c.row(i))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = small();
        let x = SequenceState::new(vec![3, 1, 3, 0]);
        let weights: Vec<f64> = (0..12).map(|k| (k as f64 * 1.3).cos()).collect();
        let c = Probs::from_vec(4, 3, weights).unwrap();
        let grad = loss_gradient(&m, &x, &c).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..m.num_params() {
            let mut plus = m.clone();
            plus.params_mut()[k] += h;
            let mut minus = m.clone();
            minus.params_mut()[k] -= h;
            let fd = (weighted_sum(&plus, &x, &c) - weighted_sum(&minus, &x, &c)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn rows_are_distributions_and_unmasked_one_hot() {
        let m = small();
        let p = m.predict(&SequenceState::new(vec![3, 2, 3, 3])).unwrap();
        for i in [0, 2, 3] {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.row(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = NeuralConfig::default();
        let vocab = Vocab::bytes();
        let a = NeuralModel::new(vocab, 8, cfg, 5).unwrap();
        let b = NeuralModel::new(vocab, 8, cfg, 5).unwrap();
        let c = NeuralModel::new(vocab, 8, cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = small();
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = NeuralModel::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = SequenceState::new(vec![3, 3, 0, 3]);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn wrong_backend_is_incompatible() {
        let mut ck = small().to_checkpoint();
        ck.backend = Backend::Tabular;
        assert!(matches!(
            NeuralModel::from_checkpoint(ck),
            Err(RaddError::Incompatible(_))
        ));
    }
}
