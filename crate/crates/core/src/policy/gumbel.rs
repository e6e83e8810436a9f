//! Binary Gumbel-Softmax relaxation.
//!
//! A keep/drop decision with keep-probability `p` has logits
//! `(log p, log(1 − p))`. Perturbing both with i.i.d. Gumbel noise and taking
//! a temperature-`τ` softmax gives the relaxed sample. The keep coordinate
//! reduces to `sigmoid((a + G_keep − G_drop) / τ)` with `a = logit(p)`,
//! which is the form the model evaluates on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PolicyError;

/// Standard Gumbel draw `−log(−log U)` with `U ~ Uniform(0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Relaxed binary sample from keep-probability `p`.
///
/// Returns `[keep, drop]`; the coordinates sum to one.
pub fn gumbel_softmax_binary(
    p: f64,
    tau: f64,
    g_keep: f64,
    g_drop: f64,
) -> Result<[f64; 2], PolicyError> {
    if !(tau > 0.0) {
        return Err(PolicyError::Temperature(tau));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(PolicyError::Probability(p));
    }
    let keep = (p.ln() + g_keep) / tau;
    let drop = ((1.0 - p).ln() + g_drop) / tau;
    let max = keep.max(drop);
    let ek = (keep - max).exp();
    let ed = (drop - max).exp();
    let s = ek + ed;
    Ok([ek / s, ed / s])
}

/// [`gumbel_softmax_binary`] drawing its own noise.
pub fn sample_binary(p: f64, tau: f64, noise: &mut GumbelNoise) -> Result<[f64; 2], PolicyError> {
    let g_keep = noise.gumbel();
    let g_drop = noise.gumbel();
    gumbel_softmax_binary(p, tau, g_keep, g_drop)
}

/// Keep coordinate of the relaxed sample from a logit: `σ((a + Δg) / τ)`,
/// where `Δg = G_keep − G_drop`.
pub fn relaxed_keep_from_logit(logit: f64, tau: f64, noise_diff: f64) -> f64 {
    let x = (logit + noise_diff) / tau;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Source {
    Rng(ChaCha8Rng),
    Replay { values: Vec<f64>, cursor: usize },
}

/// Stream of Gumbel variates, either freshly drawn or replayed.
///
/// Every drawn value is logged so a forward pass can be repeated with the
/// exact same noise (finite-difference checks rely on this).
#[derive(Clone, Debug)]
pub struct GumbelNoise {
    source: Source,
    drawn: Vec<f64>,
}

impl GumbelNoise {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            source: Source::Rng(ChaCha8Rng::seed_from_u64(seed)),
            drawn: Vec::new(),
        }
    }

    pub fn replay(values: Vec<f64>) -> Self {
        Self {
            source: Source::Replay { values, cursor: 0 },
            drawn: Vec::new(),
        }
    }

    pub fn gumbel(&mut self) -> f64 {
        let g = match &mut self.source {
            Source::Rng(rng) => {
                // Uniform on the open interval (0, 1).
                let u = loop {
                    let u: f64 = rng.random();
                    if u > 0.0 {
                        break u;
                    }
                };
                gumbel_from_uniform(u)
            }
            Source::Replay { values, cursor } => {
                let g = *values
                    .get(*cursor)
                    .expect("replayed noise stream exhausted");
                *cursor += 1;
                g
            }
        };
        self.drawn.push(g);
        g
    }

    pub fn drawn(&self) -> &[f64] {
        &self.drawn
    }

    pub fn into_drawn(self) -> Vec<f64> {
        self.drawn
    }
}
