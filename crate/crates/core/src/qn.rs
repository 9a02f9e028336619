//! U(1) quantum-number algebra.
//!
//! A [`Charge`] is a tuple of integers, one per conserved quantity. Fusion is
//! componentwise addition. A [`QNIndex`] partitions a tensor mode into charge
//! sectors and carries a [`Direction`]; the flux of a block is the sum of its
//! inward charges minus the sum of its outward charges.

use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{structural, Result};

/// A tuple of U(1) charges. Ordering is lexicographic.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Charge(SmallVec<[i32; 2]>);

impl Charge {
    pub fn new(values: &[i32]) -> Self {
        Charge(SmallVec::from_slice(values))
    }

    /// The identity element with `len` components.
    pub fn zero(len: usize) -> Self {
        Charge(SmallVec::from_elem(0, len))
    }

    pub fn values(&self) -> &[i32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    pub fn neg(&self) -> Charge {
        Charge(self.0.iter().map(|v| -v).collect())
    }

    fn zip_with(&self, other: &Charge, f: impl Fn(i32, i32) -> Option<i32>) -> Result<Charge> {
        if self.len() != other.len() {
            return Err(structural(format!("charge length mismatch: {} vs {}", self.len(), other.len())));
        }
        let out = self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(&a, &b)| {
                let v = f(a, b);
                debug_assert!(v.is_some(), "charge overflow");
                v.unwrap_or(i32::MAX)
            })
            .collect();
        Ok(Charge(out))
    }

    pub fn sub(&self, other: &Charge) -> Result<Charge> {
        self.zip_with(other, i32::checked_sub)
    }
}

impl fmt::Debug for Charge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Charge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Componentwise sum of two charges.
pub fn fuse(a: &Charge, b: &Charge) -> Result<Charge> {
    a.zip_with(b, i32::checked_add)
}

/// Flux arrow of a tensor mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Inward,
    Outward,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Inward => Direction::Outward,
            Direction::Outward => Direction::Inward,
        }
    }
}

/// A charge sector with its degeneracy dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sector {
    pub charge: Charge,
    pub dim: usize,
}

impl Sector {
    pub fn new(charge: Charge, dim: usize) -> Self {
        Sector { charge, dim }
    }
}

/// A tensor mode split into charge sectors, kept sorted by charge.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QNIndex {
    sectors: Vec<Sector>,
    offsets: Vec<usize>,
    direction: Direction,
}

impl QNIndex {
    /// Builds an index, sorting sectors canonically. Duplicate charges,
    /// zero-dimensional sectors and mixed charge lengths are rejected.
    pub fn new(mut sectors: Vec<Sector>, direction: Direction) -> Result<Self> {
        sectors.sort_by(|a, b| a.charge.cmp(&b.charge));
        for w in sectors.windows(2) {
            if w[0].charge == w[1].charge {
                return Err(structural(format!("duplicate sector charge {}", w[0].charge)));
            }
            if w[0].charge.len() != w[1].charge.len() {
                return Err(structural("sectors with different charge lengths"));
            }
        }
        if let Some(s) = sectors.iter().find(|s| s.dim == 0) {
            return Err(structural(format!("sector {} has zero dimension", s.charge)));
        }
        let mut offsets = Vec::with_capacity(sectors.len());
        let mut acc = 0;
        for s in &sectors {
            offsets.push(acc);
            acc += s.dim;
        }
        Ok(QNIndex { sectors, offsets, direction })
    }

    /// A one-sector index of dimension 1 carrying `charge`.
    pub fn trivial(charge: Charge, direction: Direction) -> Self {
        QNIndex::new(vec![Sector::new(charge, 1)], direction).expect("single sector is valid")
    }

    pub fn sectors(&self) -> &[Sector] {
        &self.sectors
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn dim(&self) -> usize {
        self.sectors.iter().map(|s| s.dim).sum()
    }

    pub fn num_sectors(&self) -> usize {
        self.sectors.len()
    }

    /// Charge tuple length, or `None` for an index without sectors.
    pub fn charge_len(&self) -> Option<usize> {
        self.sectors.first().map(|s| s.charge.len())
    }

    fn position(&self, charge: &Charge) -> Option<usize> {
        self.sectors.binary_search_by(|s| s.charge.cmp(charge)).ok()
    }

    pub fn sector_dim(&self, charge: &Charge) -> Option<usize> {
        self.position(charge).map(|p| self.sectors[p].dim)
    }

    /// Offset of the sector inside the densified mode.
    pub fn sector_offset(&self, charge: &Charge) -> Option<usize> {
        self.position(charge).map(|p| self.offsets[p])
    }

    /// Sector containing dense position `pos`, with the position inside it.
    pub fn locate(&self, pos: usize) -> Option<(&Charge, usize)> {
        let p = self.offsets.partition_point(|&o| o <= pos).checked_sub(1)?;
        let local = pos - self.offsets[p];
        (local < self.sectors[p].dim).then(|| (&self.sectors[p].charge, local))
    }

    /// Same sectors, opposite direction.
    pub fn dual(&self) -> QNIndex {
        QNIndex { sectors: self.sectors.clone(), offsets: self.offsets.clone(), direction: self.direction.flip() }
    }

    /// True if `other` has identical sectors and the opposite direction.
    pub fn is_dual_of(&self, other: &QNIndex) -> bool {
        self.direction != other.direction && self.sectors == other.sectors
    }

    /// The equivalent index with reversed arrow and negated charges. Flux
    /// contributions are unchanged.
    pub fn flipped(&self) -> QNIndex {
        let sectors = self.sectors.iter().map(|s| Sector::new(s.charge.neg(), s.dim)).collect();
        QNIndex::new(sectors, self.direction.flip()).expect("negation keeps sectors distinct")
    }

    /// Signed contribution of `charge` on this index to a block's flux.
    pub fn signed(&self, charge: &Charge) -> Charge {
        match self.direction {
            Direction::Inward => charge.clone(),
            Direction::Outward => charge.neg(),
        }
    }
}

/// Sum of inward charges minus sum of outward charges.
pub fn flux(indices: &[QNIndex], charges: &[Charge]) -> Result<Charge> {
    if indices.len() != charges.len() {
        return Err(structural(format!("flux arity mismatch: {} indices, {} charges", indices.len(), charges.len())));
    }
    let Some(first) = charges.first() else {
        return Err(structural("flux of an empty charge list"));
    };
    let mut acc = Charge::zero(first.len());
    for (idx, q) in indices.iter().zip(charges) {
        acc = fuse(&acc, &idx.signed(q))?;
    }
    Ok(acc)
}
