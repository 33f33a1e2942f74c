use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};

/// One epoch of identity-balanced batches. Each batch holds `I` distinct
/// identities with `K` record indices apiece, grouped by identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    #[serde(rename = "I")]
    pub identities_per_batch: usize,
    #[serde(rename = "K")]
    pub images_per_identity: usize,
    pub seed: u64,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.images_per_identity
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `K` indices drawn from `pool`: a shuffled prefix when the pool is large
/// enough, topped up by sampling with replacement otherwise.
fn draw_chunk<R: Rng>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut idxs = pool.to_vec();
    idxs.shuffle(rng);
    let n = idxs.len();
    while idxs.len() < k {
        idxs.push(pool[rng.random_range(0..n)]);
    }
    idxs.truncate(k);
    idxs
}

/// Builds an epoch of `I × K` batches over train `records`.
///
/// Indices in the plan refer to positions in `records`. The plan is a pure
/// function of its arguments and every identity appears in at least one batch.
pub fn make_batches(records: &[ImageRecord], i: usize, k: usize, seed: u64) -> Result<BatchPlan> {
    if i < 2 || k < 2 {
        return Err(Error::invalid(format!(
            "I={i}, K={k}: triplet loss needs I >= 2 and K >= 2 (a positive and a negative per anchor)"
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        groups.entry(r.identity).or_default().push(pos);
    }
    if groups.len() < i {
        return Err(Error::invalid(format!(
            "need at least I={i} identities, found {}",
            groups.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&id, pool) in &groups {
        let mut idxs = pool.clone();
        idxs.shuffle(&mut rng);
        if idxs.len() < k {
            idxs = draw_chunk(pool, k, &mut rng);
        }
        let mut list: Vec<Vec<usize>> = idxs.chunks_exact(k).map(<[usize]>::to_vec).collect();
        list.reverse();
        chunks.insert(id, list);
    }

    let mut batches = Vec::new();
    let mut seen: BTreeMap<usize, bool> = groups.keys().map(|&id| (id, false)).collect();
    loop {
        let avail: Vec<usize> = chunks
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&id, _)| id)
            .collect();
        if avail.len() < i {
            break;
        }
        let mut batch = Vec::with_capacity(i * k);
        for pick in index::sample(&mut rng, avail.len(), i) {
            let id = avail[pick];
            batch.extend(chunks.get_mut(&id).and_then(Vec::pop).expect("available"));
            seen.insert(id, true);
        }
        batches.push(batch);
    }

    // Identities left out by the draw above get their own batches, topped up
    // with randomly chosen other identities.
    let mut unseen: Vec<usize> = seen.iter().filter(|(_, s)| !**s).map(|(&id, _)| id).collect();
    while !unseen.is_empty() {
        let take = unseen.len().min(i);
        let mut ids: Vec<usize> = unseen.drain(..take).collect();
        if ids.len() < i {
            let others: Vec<usize> = groups.keys().copied().filter(|id| !ids.contains(id)).collect();
            for pick in index::sample(&mut rng, others.len(), i - ids.len()) {
                ids.push(others[pick]);
            }
        }
        let mut batch = Vec::with_capacity(i * k);
        for id in ids {
            batch.extend(draw_chunk(&groups[&id], k, &mut rng));
        }
        batches.push(batch);
    }

    Ok(BatchPlan {
        identities_per_batch: i,
        images_per_identity: k,
        seed,
        batches,
    })
}
