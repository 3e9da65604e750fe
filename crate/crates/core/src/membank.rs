//! Strategy-specific memory bank: one bounded FIFO matrix of pattern vectors per strategy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BANK_SNAPSHOT_VERSION: u32 = 1;

/// Row-major `rows x dim` copy of one strategy's stored vectors, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl MemoryMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// Ring buffer of at most `capacity` rows. `head` is the slot of the oldest row.
#[derive(Debug, Clone, PartialEq)]
struct Ring {
    data: Vec<f32>,
    len: usize,
    head: usize,
    inserted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    rings: Vec<Ring>,
    capacity: usize,
    dim: usize,
}

impl MemoryBank {
    pub fn new(strategies: usize, capacity: usize, dim: usize) -> Result<Self> {
        if strategies == 0 || capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "memory bank needs positive sizes, got G={strategies}, N_m={capacity}, d={dim}"
            )));
        }
        let ring = Ring {
            data: vec![0.0; capacity * dim],
            len: 0,
            head: 0,
            inserted: 0,
        };
        Ok(MemoryBank {
            rings: vec![ring; strategies],
            capacity,
            dim,
        })
    }

    pub fn strategies(&self) -> usize {
        self.rings.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn ring(&self, g: usize) -> Result<&Ring> {
        self.rings.get(g).ok_or(Error::OutOfRange {
            index: g,
            len: self.rings.len(),
        })
    }

    pub fn rows(&self, g: usize) -> Result<usize> {
        Ok(self.ring(g)?.len)
    }

    /// Appends `r` as the newest row of strategy `g`, evicting the oldest row when full.
    pub fn store(&mut self, g: usize, r: &[f32]) -> Result<()> {
        if r.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: r.len(),
            });
        }
        let (cap, dim) = (self.capacity, self.dim);
        let len = self.rings.len();
        let ring = self.rings.get_mut(g).ok_or(Error::OutOfRange { index: g, len })?;
        let slot = if ring.len < cap {
            let s = (ring.head + ring.len) % cap;
            ring.len += 1;
            s
        } else {
            let s = ring.head;
            ring.head = (ring.head + 1) % cap;
            s
        };
        ring.data[slot * dim..(slot + 1) * dim].copy_from_slice(r);
        ring.inserted += 1;
        Ok(())
    }

    /// Snapshot of strategy `g`'s rows in insertion order.
    pub fn read(&self, g: usize) -> Result<MemoryMatrix> {
        let ring = self.ring(g)?;
        let mut data = Vec::with_capacity(ring.len * self.dim);
        for i in 0..ring.len {
            let slot = (ring.head + i) % self.capacity;
            data.extend_from_slice(&ring.data[slot * self.dim..(slot + 1) * self.dim]);
        }
        Ok(MemoryMatrix {
            rows: ring.len,
            dim: self.dim,
            data,
        })
    }

    pub fn snapshot(&self) -> BankSnapshot {
        BankSnapshot {
            version: BANK_SNAPSHOT_VERSION,
            capacity: self.capacity,
            dim: self.dim,
            strategies: (0..self.rings.len())
                .map(|g| {
                    let m = self.read(g).expect("index in range");
                    StrategySnapshot {
                        rows: m.rows,
                        data: m.data,
                        inserted: self.rings[g].inserted,
                    }
                })
                .collect(),
        }
    }

    pub fn restore(snap: &BankSnapshot) -> Result<Self> {
        if snap.version != BANK_SNAPSHOT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported memory bank snapshot version {}",
                snap.version
            )));
        }
        let mut bank = MemoryBank::new(snap.strategies.len(), snap.capacity, snap.dim)?;
        for (g, s) in snap.strategies.iter().enumerate() {
            if s.rows > snap.capacity || s.data.len() != s.rows * snap.dim {
                return Err(Error::Checkpoint(format!(
                    "memory bank snapshot for strategy {g} is inconsistent"
                )));
            }
            for row in s.data.chunks(snap.dim) {
                bank.store(g, row)?;
            }
            bank.rings[g].inserted = s.inserted;
        }
        Ok(bank)
    }
}

/// Checkpoint form: per strategy the row count, flattened rows (oldest first) and the
/// total number of insertions so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub version: u32,
    pub capacity: usize,
    pub dim: usize,
    pub strategies: Vec<StrategySnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySnapshot {
    pub rows: usize,
    pub data: Vec<f32>,
    pub inserted: u64,
}
