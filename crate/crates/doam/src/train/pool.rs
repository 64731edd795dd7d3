//! The hard-sample pool and its easy/random variants.
//!
//! The pool holds up to `capacity` batches. In hard mode a batch enters
//! only when its loss strictly exceeds the threshold; once full, it
//! replaces the minimum-loss entry only when strictly larger. Equality
//! never inserts or replaces, and on equal losses the earlier-arriving
//! batch is kept. Easy mode mirrors every comparison.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One pooled batch: its id within the epoch, the dataset indices of its
/// samples, and the loss it was pooled at.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub batch_id: usize,
    pub sample_indices: Vec<usize>,
    pub loss: f64,
}

/// Bounded pool of batches selected for replay.
#[derive(Debug, Clone)]
pub struct HardSamplePool {
    capacity: usize,
    entries: Vec<PoolEntry>,
}

impl HardSamplePool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument {
                op: "HardSamplePool::new",
                reason: "capacity must be ≥ 1".into(),
            });
        }
        Ok(HardSamplePool {
            capacity,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in arrival order.
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Is `batch_id` currently pooled?
    pub fn contains(&self, batch_id: usize) -> bool {
        self.entries.iter().any(|e| e.batch_id == batch_id)
    }

    /// Hard-mode update; returns whether the batch was admitted.
    ///
    /// Not full: insert iff `loss > threshold`. Full: replace the
    /// minimum-loss entry iff `loss` strictly exceeds it (among tied
    /// minima the latest-arriving is evicted, so earlier batches win ties).
    pub fn update_hard(
        &mut self,
        batch_id: usize,
        sample_indices: Vec<usize>,
        loss: f64,
        threshold: f64,
    ) -> bool {
        if self.entries.len() < self.capacity {
            if loss > threshold {
                self.entries.push(PoolEntry {
                    batch_id,
                    sample_indices,
                    loss,
                });
                return true;
            }
            return false;
        }
        // The eviction victim among tied minima is the latest arrival, so
        // earlier batches survive ties.
        let mut victim = 0usize;
        for (i, e) in self.entries.iter().enumerate() {
            let v = &self.entries[victim];
            if e.loss < v.loss || (e.loss == v.loss && e.batch_id > v.batch_id) {
                victim = i;
            }
        }
        if loss > self.entries[victim].loss {
            self.entries.remove(victim);
            self.entries.push(PoolEntry {
                batch_id,
                sample_indices,
                loss,
            });
            return true;
        }
        false
    }

    /// Easy-mode update: hard mode with every inequality inverted (insert
    /// iff `loss < threshold`, replace the maximum-loss entry iff strictly
    /// smaller).
    pub fn update_easy(
        &mut self,
        batch_id: usize,
        sample_indices: Vec<usize>,
        loss: f64,
        threshold: f64,
    ) -> bool {
        if self.entries.len() < self.capacity {
            if loss < threshold {
                self.entries.push(PoolEntry {
                    batch_id,
                    sample_indices,
                    loss,
                });
                return true;
            }
            return false;
        }
        let mut victim = 0usize;
        for (i, e) in self.entries.iter().enumerate() {
            let v = &self.entries[victim];
            if e.loss > v.loss || (e.loss == v.loss && e.batch_id > v.batch_id) {
                victim = i;
            }
        }
        if loss < self.entries[victim].loss {
            self.entries.remove(victim);
            self.entries.push(PoolEntry {
                batch_id,
                sample_indices,
                loss,
            });
            return true;
        }
        false
    }
}

/// Uniform sample of `capacity` batches without replacement, deterministic
/// for a given seed; returned sorted by batch id. Asking for more batches
/// than exist returns them all.
pub fn pool_fill_random(batches: &[PoolEntry], capacity: usize, seed: u64) -> HardSamplePool {
    let take = capacity.min(batches.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, batches.len(), take).into_vec();
    picks.sort_unstable();
    HardSamplePool {
        capacity: capacity.max(1),
        entries: picks.into_iter().map(|i| batches[i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn entry(batch_id: usize, loss: f64) -> (usize, Vec<usize>, f64) {
        (batch_id, vec![batch_id], loss)
    }

    #[test]
    fn below_threshold_batches_never_enter() {
        let mut pool = HardSamplePool::new(4).unwrap();
        let (id, s, l) = entry(0, 1.5);
        assert!(pool.update_hard(id, s, l, 1.0));
        let (id, s, l) = entry(1, 0.9);
        assert!(!pool.update_hard(id, s, l, 1.0));
        // Equality with the threshold does not insert.
        let (id, s, l) = entry(2, 1.0);
        assert!(!pool.update_hard(id, s, l, 1.0));
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn full_pool_replaces_only_strictly_smaller_minimum() {
        let mut pool = HardSamplePool::new(2).unwrap();
        for (id, loss) in [(0, 2.0), (1, 3.0)] {
            let (i, s, l) = entry(id, loss);
            pool.update_hard(i, s, l, 0.0);
        }
        // L_i = 1.9 < min 2.0 → unchanged.
        let (i, s, l) = entry(2, 1.9);
        assert!(!pool.update_hard(i, s, l, 0.0));
        // Equality with the minimum → unchanged.
        let (i, s, l) = entry(3, 2.0);
        assert!(!pool.update_hard(i, s, l, 0.0));
        assert!(pool.contains(0));
        // Strictly larger replaces the minimum-loss entry.
        let (i, s, l) = entry(4, 2.5);
        assert!(pool.update_hard(i, s, l, 0.0));
        assert!(!pool.contains(0));
        assert!(pool.contains(1) && pool.contains(4));
    }

    #[test]
    fn easy_mode_mirrors_hard_mode() {
        let mut pool = HardSamplePool::new(2).unwrap();
        let (i, s, l) = entry(0, 0.2);
        assert!(pool.update_easy(i, s, l, 1.0));
        let (i, s, l) = entry(1, 1.1);
        assert!(!pool.update_easy(i, s, l, 1.0));
        let (i, s, l) = entry(2, 0.9);
        assert!(pool.update_easy(i, s, l, 1.0));
        // Full with max 0.9: 1.1 can't replace, 0.5 evicts the 0.9 entry.
        let (i, s, l) = entry(3, 1.1);
        assert!(!pool.update_easy(i, s, l, 1.0));
        let (i, s, l) = entry(4, 0.5);
        assert!(pool.update_easy(i, s, l, 1.0));
        assert!(pool.contains(0) && pool.contains(4));
    }

    /// Brute-force oracle: the admissible batches with the `capacity`
    /// most extreme losses, ties keeping the earlier arrival.
    fn oracle(
        stream: &[(usize, f64)],
        capacity: usize,
        threshold: f64,
        hard: bool,
    ) -> Vec<usize> {
        let mut admissible: Vec<(usize, f64)> = stream
            .iter()
            .copied()
            .filter(|&(_, l)| if hard { l > threshold } else { l < threshold })
            .collect();
        admissible.sort_by(|a, b| {
            let by_loss = if hard {
                b.1.partial_cmp(&a.1).unwrap()
            } else {
                a.1.partial_cmp(&b.1).unwrap()
            };
            by_loss.then(a.0.cmp(&b.0))
        });
        let mut ids: Vec<usize> = admissible.into_iter().take(capacity).map(|(i, _)| i).collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn pool_matches_brute_force_oracle_over_random_streams_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..1000 {
            let capacity = rng.gen_range(1..=8);
            let len = rng.gen_range(0..40);
            // Quantized losses make ties frequent.
            let stream: Vec<(usize, f64)> = (0..len)
                .map(|i| (i, rng.gen_range(0..12) as f64 / 4.0))
                .collect();
            let threshold = rng.gen_range(0..12) as f64 / 4.0;
            for hard in [true, false] {
                let mut pool = HardSamplePool::new(capacity).unwrap();
                for &(id, loss) in &stream {
                    if hard {
                        pool.update_hard(id, vec![id], loss, threshold);
                    } else {
                        pool.update_easy(id, vec![id], loss, threshold);
                    }
                }
                let mut got: Vec<usize> =
                    pool.entries().iter().map(|e| e.batch_id).collect();
                got.sort_unstable();
                let want = oracle(&stream, capacity, threshold, hard);
                assert_eq!(
                    got, want,
                    "trial {trial} hard={hard} capacity={capacity} threshold={threshold} stream={stream:?}"
                );
            }
        }
    }

    #[test]
    fn thousand_batch_stream_keeps_the_top_losses() {
        // The spec's stream size, as a single deterministic instance.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stream: Vec<(usize, f64)> = (0..1000).map(|i| (i, rng.gen_range(0.0..4.0))).collect();
        let mut pool = HardSamplePool::new(8).unwrap();
        for &(id, loss) in &stream {
            pool.update_hard(id, vec![id], loss, 0.5);
        }
        let mut got: Vec<usize> = pool.entries().iter().map(|e| e.batch_id).collect();
        got.sort_unstable();
        assert_eq!(got, oracle(&stream, 8, 0.5, true));
        assert_eq!(pool.len(), 8);
    }

    #[test]
    fn random_fill_is_uniform_deterministic_and_without_replacement() {
        let batches: Vec<PoolEntry> = (0..4)
            .map(|i| PoolEntry {
                batch_id: i,
                sample_indices: vec![i],
                loss: 0.0,
            })
            .collect();
        // capacity = batch count → everything is pooled.
        let all = pool_fill_random(&batches, 4, 1);
        let ids: Vec<usize> = all.entries().iter().map(|e| e.batch_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        // Deterministic single pick.
        let a = pool_fill_random(&batches, 1, 99);
        let b = pool_fill_random(&batches, 1, 99);
        assert_eq!(a.entries(), b.entries());
        assert_eq!(a.len(), 1);
        // Uniformity: 10⁵ draws of one batch out of four; each frequency
        // within 3σ of 0.25 (σ = sqrt(p(1−p)/N) ≈ 0.00137).
        let n = 100_000;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let pick = pool_fill_random(&batches, 1, seed as u64);
            counts[pick.entries()[0].batch_id] += 1;
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 0.25).abs() <= 3.0 * sigma,
                "batch {i}: frequency {freq} outside 0.25 ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(HardSamplePool::new(0).is_err());
    }
}
