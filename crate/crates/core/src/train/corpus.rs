//! Synthetic token streams from a seeded order-k Markov chain.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;

use crate::error::{Error, Result};

/// Dirichlet concentration of the transition rows when none is given.
pub const DEFAULT_CONCENTRATION: f64 = 0.1;

/// Largest transition table we are willing to build.
const MAX_CONTEXTS: usize = 1 << 20;

/// Order-k chain over `vocab` symbols: the next token depends on the last
/// `order` tokens through a row-stochastic table with Dirichlet rows.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    pub vocab: usize,
    pub order: usize,
    /// `vocab^order` rows of `vocab` probabilities.
    pub table: Vec<f64>,
}

impl MarkovChain {
    pub fn new(seed: u64, vocab: usize, order: usize, concentration: f64) -> Result<Self> {
        if vocab < 2 || order < 1 {
            return Err(Error::InvalidArgument(format!(
                "markov chain needs vocab >= 2 and order >= 1, got {vocab} and {order}"
            )));
        }
        let contexts = vocab
            .checked_pow(order as u32)
            .filter(|&c| c <= MAX_CONTEXTS)
            .ok_or_else(|| Error::InvalidArgument(format!("{vocab}^{order} contexts is too many")))?;
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("concentration {concentration}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Vec::with_capacity(contexts * vocab);
        for _ in 0..contexts {
            let row: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                table.extend(row.iter().map(|v| v / total));
            } else {
                // Every gamma draw underflowed; fall back to a uniform row.
                table.extend(std::iter::repeat_n(1.0 / vocab as f64, vocab));
            }
        }
        Ok(Self { vocab, order, table })
    }

    pub fn contexts(&self) -> usize {
        self.table.len() / self.vocab
    }

    /// Row index of the context formed by the last `order` tokens.
    pub fn context_index(&self, history: &[usize]) -> usize {
        history[history.len() - self.order..]
            .iter()
            .fold(0, |acc, &t| acc * self.vocab + t)
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.table[context * self.vocab..(context + 1) * self.vocab]
    }

    /// `length` tokens; the first `order` are uniform.
    pub fn sample<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Vec<usize> {
        let rows: Vec<WeightedIndex<f64>> = (0..self.contexts())
            .map(|c| WeightedIndex::new(self.row(c)).expect("rows are normalized"))
            .collect();
        let mut out = Vec::with_capacity(length);
        for i in 0..length {
            let t = if i < self.order {
                rng.random_range(0..self.vocab)
            } else {
                rows[self.context_index(&out)].sample(rng)
            };
            out.push(t);
        }
        out
    }

    /// Mean negative log-likelihood (nats) of each token after the first
    /// `order`, under the true transition table.
    pub fn cross_entropy(&self, tokens: &[usize]) -> f64 {
        if tokens.len() <= self.order {
            return 0.0;
        }
        let mut total = 0.0;
        for i in self.order..tokens.len() {
            total -= self.row(self.context_index(&tokens[..i]))[tokens[i]].ln();
        }
        total / (tokens.len() - self.order) as f64
    }

    /// Entropy rate in nats: row entropies weighted by the stationary
    /// distribution over contexts (power iteration).
    pub fn entropy_rate(&self) -> f64 {
        let n = self.contexts();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for (c, &p) in pi.iter().enumerate() {
                for (t, &q) in self.row(c).iter().enumerate() {
                    // Drop the oldest token, append `t`.
                    let shifted = (c * self.vocab) % n + t;
                    next[shifted] += p * q;
                }
            }
            pi = next;
        }
        pi.iter()
            .enumerate()
            .map(|(c, &p)| {
                let h: f64 = self.row(c).iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
                p * h
            })
            .sum()
    }
}

/// Token stream of a fresh chain with the default concentration.
pub fn gen_corpus(seed: u64, vocab: usize, order: usize, length: usize) -> Result<Vec<usize>> {
    let chain = MarkovChain::new(seed, vocab, order, DEFAULT_CONCENTRATION)?;
    Ok(chain.sample(length, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1))))
}
