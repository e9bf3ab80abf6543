use std::collections::VecDeque;

use rand::Rng;

pub const DEFAULT_BUCKET_CAPACITY: usize = 1024;

/// A state together with the trajectory index it was observed at.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagged<S> {
    pub t: usize,
    pub state: S,
}

/// Visited states bucketed by trajectory timestep. Each bucket is a FIFO
/// ring of bounded capacity.
#[derive(Debug, Clone)]
pub struct TimestepReplayBuffer<S> {
    capacity: usize,
    buckets: Vec<VecDeque<Tagged<S>>>,
}

impl<S: Clone> TimestepReplayBuffer<S> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bucket capacity must be positive");
        Self {
            capacity,
            buckets: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: usize, state: S) {
        if self.buckets.len() <= t {
            self.buckets.resize_with(t + 1, VecDeque::new);
        }
        let bucket = &mut self.buckets[t];
        if bucket.len() == self.capacity {
            bucket.pop_front();
        }
        bucket.push_back(Tagged { t, state });
    }

    /// Number of timesteps with a bucket (possibly empty).
    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, t: usize) -> impl Iterator<Item = &Tagged<S>> {
        self.buckets.get(t).into_iter().flat_map(|b| b.iter())
    }

    pub fn bucket_len(&self, t: usize) -> usize {
        self.buckets.get(t).map_or(0, VecDeque::len)
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform draw from bucket `t`.
    pub fn sample<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Option<&Tagged<S>> {
        let b = self.buckets.get(t)?;
        if b.is_empty() {
            return None;
        }
        b.get(rng.random_range(0..b.len()))
    }

    /// Uniform draw over every stored state regardless of timestep.
    pub fn sample_pooled<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Tagged<S>> {
        let total = self.len();
        if total == 0 {
            return None;
        }
        let mut k = rng.random_range(0..total);
        for b in &self.buckets {
            if k < b.len() {
                return b.get(k);
            }
            k -= b.len();
        }
        None
    }

    /// All states in bucket `t`, or every stored state when that bucket is
    /// empty. The flag is true when the pooled fallback was used.
    pub fn bucket_or_pooled(&self, t: usize) -> (Vec<&S>, bool) {
        match self.buckets.get(t) {
            Some(b) if !b.is_empty() => (b.iter().map(|x| &x.state).collect(), false),
            _ => (
                self.buckets.iter().flat_map(|b| b.iter().map(|x| &x.state)).collect(),
                true,
            ),
        }
    }

    pub fn clear(&mut self) {
        self.buckets.clear();
    }
}

/// Flat FIFO of transitions for off-policy learners.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, tr: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Transition> {
        self.items.iter_mut()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn buckets_keep_timestep_tags() {
        let mut b = TimestepReplayBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ep in 0..10 {
            for t in 0..6 {
                b.push(t, (ep, t));
            }
        }
        for t in 0..6 {
            assert_eq!(b.bucket_len(t), 4);
            for _ in 0..50 {
                let x = b.sample(t, &mut rng).unwrap();
                assert_eq!(x.t, t);
                assert_eq!(x.state.1, t);
                assert!(x.state.0 >= 6, "FIFO keeps the latest episodes");
            }
        }
        assert!(b.sample(9, &mut rng).is_none());
        let (all, pooled) = b.bucket_or_pooled(9);
        assert!(pooled);
        assert_eq!(all.len(), 24);
    }

    #[test]
    fn bucket_sampling_is_uniform() {
        let mut b = TimestepReplayBuffer::new(DEFAULT_BUCKET_CAPACITY);
        for i in 0..4 {
            b.push(0, i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let n = 40_000;
        for _ in 0..n {
            counts[b.sample(0, &mut rng).unwrap().state] += 1;
        }
        for c in counts {
            // Binomial sd at p = 1/4 is about 87.
            assert!((c as f64 - n as f64 / 4.0).abs() < 450.0, "{counts:?}");
        }
    }
}
