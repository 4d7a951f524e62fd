//! Image history buffer for discriminator updates: discriminators train
//! against a rolling pool of past generator outputs instead of only the
//! newest one, which damps oscillation. While the pool is filling, each
//! image is stored and returned as-is. Once full, each query returns the
//! incoming image with probability 1/2, or swaps it against a uniformly
//! chosen stored one. Capacity 0 disables buffering entirely.

use crate::rng::NamedStream;

pub struct ImagePool {
    capacity: usize,
    items: Vec<([usize; 4], Vec<f32>)>,
    rng: NamedStream,
}

impl ImagePool {
    pub fn new(capacity: usize, master_seed: u64, name: &str) -> ImagePool {
        ImagePool { capacity, items: Vec::new(), rng: NamedStream::new(master_seed, name) }
    }

    pub fn query(&mut self, dims: [usize; 4], image: Vec<f32>) -> ([usize; 4], Vec<f32>) {
        if self.capacity == 0 {
            return (dims, image);
        }
        if self.items.len() < self.capacity {
            self.items.push((dims, image.clone()));
            return (dims, image);
        }
        if self.rng.uniform() < 0.5 {
            (dims, image)
        } else {
            let idx = self.rng.below(self.capacity);
            std::mem::replace(&mut self.items[idx], (dims, image))
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    // checkpoint plumbing: exact contents + stream position round-trip

    pub fn stream_name(&self) -> &str {
        &self.rng.name
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.word_pos()
    }

    pub fn items(&self) -> &[([usize; 4], Vec<f32>)] {
        &self.items
    }

    pub fn restore(
        capacity: usize,
        master_seed: u64,
        name: &str,
        word_pos: u128,
        items: Vec<([usize; 4], Vec<f32>)>,
    ) -> ImagePool {
        ImagePool { capacity, items, rng: NamedStream::restore(master_seed, name, word_pos) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> ([usize; 4], Vec<f32>) {
        ([1, 1, 2, 2], vec![v; 4])
    }

    #[test]
    fn passes_through_while_filling() {
        let mut p = ImagePool::new(3, 1, "pool.test");
        for v in 0..3 {
            let (d, got) = img(v as f32);
            let (_, back) = p.query(d, got.clone());
            assert_eq!(back, got);
        }
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn capacity_zero_never_buffers() {
        let mut p = ImagePool::new(0, 1, "pool.test");
        for v in 0..10 {
            let (d, data) = img(v as f32);
            let (_, back) = p.query(d, data.clone());
            assert_eq!(back, data);
        }
        assert!(p.is_empty());
        // disabled pool consumes no randomness
        assert_eq!(p.word_pos(), ImagePool::new(0, 1, "pool.test").word_pos());
    }

    #[test]
    fn full_pool_returns_a_mix_of_old_and_new() {
        let mut p = ImagePool::new(5, 2, "pool.test");
        for v in 0..5 {
            let (d, data) = img(v as f32);
            p.query(d, data);
        }
        let (mut old, mut new) = (0, 0);
        for v in 5..200 {
            let (_, back) = p.query([1, 1, 2, 2], vec![v as f32; 4]);
            if back[0] == v as f32 {
                new += 1;
            } else {
                old += 1;
            }
        }
        assert!(old > 50 && new > 50, "old {old} new {new}");
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn restore_resumes_the_exact_sequence() {
        let mut a = ImagePool::new(4, 3, "pool.test");
        for v in 0..20 {
            a.query([1, 1, 2, 2], vec![v as f32; 4]);
        }
        let mut b = ImagePool::restore(4, 3, "pool.test", a.word_pos(), a.items().to_vec());
        for v in 20..60 {
            let ra = a.query([1, 1, 2, 2], vec![v as f32; 4]);
            let rb = b.query([1, 1, 2, 2], vec![v as f32; 4]);
            assert_eq!(ra, rb);
        }
    }
}
