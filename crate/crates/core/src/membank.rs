//! FIFO bank of past robust features used as contrastive negatives. Slots
//! are unit vectors; writes renormalize and overwrite the oldest entries.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_slice, RngState, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    /// Row-major [capacity, dim], every row unit norm.
    data: Vec<f32>,
    /// Next slot to overwrite.
    cursor: usize,
    /// Total rows ever pushed; monotone, never wraps.
    pushed_total: u64,
}

impl MemoryBank {
    /// A bank starts full: every slot holds an independent uniform unit
    /// vector so the contrastive denominator is well defined from step one.
    pub fn init_bank(capacity: usize, dim: usize, rng: &RngState) -> Result<MemoryBank> {
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(Error::config(format!(
                "bank capacity {capacity} must be a power of two >= 2"
            )));
        }
        if dim == 0 {
            return Err(Error::config("bank dim must be positive".to_string()));
        }
        let mut st = *rng;
        let mut data = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            data.extend(st.unit_vector(dim).into_iter().map(|v| v as f32));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            data,
            cursor: 0,
            pushed_total: 0,
        })
    }

    /// Rebuild from checkpointed parts. Slots are trusted to be unit rows.
    pub fn from_parts(
        slots: Tensor<f32>,
        cursor: usize,
        pushed_total: u64,
    ) -> Result<MemoryBank> {
        if slots.shape().len() != 2 {
            return Err(Error::shape(format!(
                "bank slots must be rank 2, got {:?}",
                slots.shape()
            )));
        }
        let capacity = slots.shape()[0];
        let dim = slots.shape()[1];
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(Error::config(format!(
                "bank capacity {capacity} must be a power of two >= 2"
            )));
        }
        if cursor >= capacity {
            return Err(Error::config(format!(
                "bank cursor {cursor} out of range for capacity {capacity}"
            )));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            data: slots.into_data(),
            cursor,
            pushed_total,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pushed_total(&self) -> u64 {
        self.pushed_total
    }

    /// Insert a batch of feature rows oldest-first at the cursor, wrapping.
    /// Rows are renormalized on entry; a zero row is an error, not a slot.
    pub fn push_batch(&mut self, feats: &Tensor<f32>) -> Result<()> {
        if feats.shape().len() != 2 || feats.shape()[1] != self.dim {
            return Err(Error::shape(format!(
                "bank push expects [*, {}], got {:?}",
                self.dim,
                feats.shape()
            )));
        }
        let b = feats.shape()[0];
        // Validate every row before touching the bank so a bad batch leaves
        // it unchanged.
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let mut row = feats.row(i).to_vec();
            l2_normalize_slice(&mut row)?;
            rows.push(row);
        }
        for row in rows {
            let slot = self.cursor * self.dim;
            self.data[slot..slot + self.dim].copy_from_slice(&row);
            self.cursor = (self.cursor + 1) & (self.capacity - 1);
        }
        self.pushed_total += b as u64;
        Ok(())
    }

    /// Snapshot of every slot as a [capacity, dim] tensor. The whole bank
    /// serves as negatives regardless of age.
    pub fn negatives(&self) -> Tensor<f32> {
        Tensor::from_vec(vec![self.capacity, self.dim], self.data.clone())
            .expect("bank invariant: data length = capacity * dim")
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}
