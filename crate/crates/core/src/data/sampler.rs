use rand::seq::{index::sample, SliceRandom};

use crate::error::{Error, Result};
use crate::rng::keyed;

/// Image indices of one (K+1)-tuple: K sources and a target of one identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TupleIndices {
    pub group: usize,
    pub sources: Vec<usize>,
    pub target: usize,
}

/// Deterministic, random-access tuple stream.
///
/// The stream is cut into epochs. Each epoch visits every eligible identity
/// once in a seeded order and draws K+1 distinct images from it uniformly
/// without replacement. Tuple `i` depends only on `(seed, i)`, so any number of
/// readers see the same stream.
#[derive(Debug, Clone)]
pub struct TupleSampler {
    groups: Vec<(usize, Vec<usize>)>,
    k: usize,
    seed: u64,
}

impl TupleSampler {
    /// `groups[g]` lists the images of identity `g`. Identities with fewer than
    /// `k + 1` images are skipped with a warning.
    pub fn new(groups: &[Vec<usize>], k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Dataset("tuples need at least one source".into()));
        }
        let mut eligible = Vec::new();
        for (g, images) in groups.iter().enumerate() {
            if images.len() < k + 1 {
                log::warn!("identity {g} has {} images, fewer than K+1 = {}; skipped", images.len(), k + 1);
            } else {
                eligible.push((g, images.clone()));
            }
        }
        if eligible.is_empty() {
            return Err(Error::Dataset(format!("no identity has at least {} images", k + 1)));
        }
        Ok(TupleSampler {
            groups: eligible,
            k,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of identities that can form tuples; also the epoch length.
    pub fn eligible(&self) -> usize {
        self.groups.len()
    }

    pub fn tuple(&self, index: u64) -> TupleIndices {
        let n = self.groups.len() as u64;
        let (epoch, pos) = (index / n, index % n);
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut keyed(self.seed, &[0, epoch]));
        let (group, images) = &self.groups[order[pos as usize]];
        let mut rng = keyed(self.seed, &[1, epoch, pos]);
        let picked: Vec<usize> = sample(&mut rng, images.len(), self.k + 1).into_iter().map(|i| images[i]).collect();
        TupleIndices {
            group: *group,
            sources: picked[..self.k].to_vec(),
            target: picked[self.k],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TupleIndices> + '_ {
        (0u64..).map(|i| self.tuple(i))
    }
}

/// Seeded disjoint split of `n` identities into (train, test).
pub fn split_identities(n: usize, test: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(seed, &[2]));
    let test = test.min(n);
    let mut held: Vec<usize> = order[..test].to_vec();
    let mut train: Vec<usize> = order[test..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}
