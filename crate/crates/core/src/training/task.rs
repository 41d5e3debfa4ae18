use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mixture of `G` Markov chains over a shared vocabulary. Each sequence is
/// drawn from one chain; which one is latent.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    vocab: usize,
    clusters: usize,
    seq_len: usize,
    seed: u64,
    /// `[G][V][V]`, rows sum to 1.
    tables: Vec<Vec<Vec<f64>>>,
    samplers: Vec<Vec<WeightedIndex<f64>>>,
}

/// `B` sequences laid out back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Chain each sequence was drawn from.
    pub clusters: Vec<usize>,
}

impl SyntheticTask {
    /// Every token gets `branching` distinct successors per chain with random
    /// positive weights; `branching = 1` gives deterministic chains.
    pub fn new(vocab: usize, clusters: usize, seq_len: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || clusters == 0 || seq_len == 0 {
            return Err(Error::Config(format!(
                "task needs vocab >= 2, clusters >= 1, seq_len >= 1 (got {vocab}, {clusters}, {seq_len})"
            )));
        }
        if branching == 0 || branching > vocab {
            return Err(Error::Config(format!("branching {branching} outside 1..={vocab}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tables = Vec::with_capacity(clusters);
        for _ in 0..clusters {
            // Successors of the token at position i of a shuffled ring are the
            // tokens `offset` places further on. Every token then has exactly
            // `branching` predecessors, so no state is starved of visits.
            let mut ring: Vec<usize> = (0..vocab).collect();
            ring.shuffle(&mut rng);
            let mut position = vec![0; vocab];
            for (i, &t) in ring.iter().enumerate() {
                position[t] = i;
            }
            let offsets = rand::seq::index::sample(&mut rng, vocab, branching).into_vec();
            let mut table = Vec::with_capacity(vocab);
            for token in 0..vocab {
                let weights: Vec<f64> = (0..branching).map(|_| rng.gen_range(0.5..1.5)).collect();
                let total: f64 = weights.iter().sum();
                let mut row = vec![0.0; vocab];
                for (o, w) in offsets.iter().zip(&weights) {
                    row[ring[(position[token] + o) % vocab]] = w / total;
                }
                table.push(row);
            }
            tables.push(table);
        }
        let samplers = tables
            .iter()
            .map(|t| t.iter().map(|row| WeightedIndex::new(row).expect("row has positive mass")).collect())
            .collect();
        Ok(Self {
            vocab,
            clusters,
            seq_len,
            seed,
            tables,
            samplers,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Next-token distribution of chain `cluster` after `token`.
    pub fn transition(&self, cluster: usize, token: usize) -> &[f64] {
        &self.tables[cluster][token]
    }

    /// Batch number `step`; the same `(seed, step)` always yields the same batch.
    pub fn generate_batch(&self, batch: usize, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step.wrapping_add(1));
        let l = self.seq_len;
        let mut out = Batch {
            inputs: Vec::with_capacity(batch * l),
            targets: Vec::with_capacity(batch * l),
            clusters: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let c = rng.gen_range(0..self.clusters);
            let mut tok = rng.gen_range(0..self.vocab);
            for _ in 0..l {
                let next = self.samplers[c][tok].sample(&mut rng);
                out.inputs.push(tok);
                out.targets.push(next);
                tok = next;
            }
            out.clusters.push(c);
        }
        out
    }
}
