use std::collections::VecDeque;

use crate::numerics::Tensor;

/// Bounded first-in first-out image store.
#[derive(Clone, Debug)]
pub struct FifoBuffer {
    capacity: usize,
    items: VecDeque<Tensor>,
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, t: Tensor) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.items.iter()
    }
}

/// Positive (unaccelerated) and negative (accelerated) image sets.
#[derive(Clone, Debug)]
pub struct DiscDatasets {
    origin: Vec<Tensor>,
    accele: FifoBuffer,
}

impl DiscDatasets {
    pub fn new(origin: Vec<Tensor>, capacity: usize) -> Self {
        Self { origin, accele: FifoBuffer::new(capacity) }
    }

    pub fn origin(&self) -> &[Tensor] {
        &self.origin
    }

    pub fn accele(&self) -> &FifoBuffer {
        &self.accele
    }

    pub fn push_accele(&mut self, images: impl IntoIterator<Item = Tensor>) {
        for im in images {
            self.accele.push(im);
        }
    }
}
