//! Flux-conserving block-sparse tensors.
//!
//! A [`BlockTensor`] stores only the blocks whose charge tuple satisfies
//! `flux(indices, charges) == total_charge`. The same logical tensor can be
//! held in one of three storage formats:
//!
//! * [`Format::List`]: one dense array per block, keyed by charge tuple.
//! * [`Format::SparseDense`]: all blocks embedded in a single dense array at
//!   the offsets given by the sector layout of each index.
//! * [`Format::SparseSparse`]: coordinate-format nonzeros grouped by block.
//!
//! Element values never depend on the format; [`BlockTensor::convert`] moves
//! between them losslessly.

mod contract;
mod decomp;
pub(crate) mod dense;
mod snapshot;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, IxDyn, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};
use crate::qn::{fuse, Charge, QNIndex};

pub use contract::{contract, contraction_flops, ContractionSpec};
pub use decomp::{block_qr, block_svd, BondSpectrum, CutoffMode, QrResult, SvdResult, Truncation};
pub use snapshot::{read_snapshot, write_snapshot};

/// One charge per mode.
pub type BlockKey = Vec<Charge>;

/// Storage strategy of a [`BlockTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    List,
    SparseDense,
    SparseSparse,
}

impl Format {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Format::List => 0,
            Format::SparseDense => 1,
            Format::SparseSparse => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Format> {
        match tag {
            0 => Some(Format::List),
            1 => Some(Format::SparseDense),
            2 => Some(Format::SparseSparse),
            _ => None,
        }
    }
}

/// A dense block together with its charge tuple.
#[derive(Clone, Debug)]
pub struct Block {
    pub charges: BlockKey,
    pub data: ArrayD<f64>,
}

/// Coordinate-format nonzeros of one block. Coordinates are row-major
/// offsets inside the block and are strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct SparseBlock {
    pub shape: Vec<usize>,
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseBlock {
    fn from_dense(data: &ArrayD<f64>) -> Self {
        let mut coords = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in data.iter().enumerate() {
            if v != 0.0 {
                coords.push(i);
                values.push(v);
            }
        }
        SparseBlock { shape: data.shape().to_vec(), coords, values }
    }

    fn to_dense(&self) -> ArrayD<f64> {
        let mut out = ArrayD::zeros(IxDyn(&self.shape));
        let flat = out.as_slice_mut().expect("fresh array is contiguous");
        for (&c, &v) in self.coords.iter().zip(&self.values) {
            flat[c] = v;
        }
        out
    }

    fn get(&self, offset: usize) -> f64 {
        match self.coords.binary_search(&offset) {
            Ok(p) => self.values[p],
            Err(_) => 0.0,
        }
    }

    fn scaled(&self, alpha: f64) -> SparseBlock {
        let mut out = SparseBlock { shape: self.shape.clone(), ..Default::default() };
        for (&c, &v) in self.coords.iter().zip(&self.values) {
            let s = alpha * v;
            if s != 0.0 {
                out.coords.push(c);
                out.values.push(s);
            }
        }
        out
    }

    /// `alpha * a + beta * b` by merging sorted coordinates.
    fn axpby(a: &SparseBlock, b: &SparseBlock, alpha: f64, beta: f64) -> SparseBlock {
        let mut out = SparseBlock { shape: a.shape.clone(), ..Default::default() };
        let (mut i, mut j) = (0, 0);
        let mut push = |c: usize, v: f64| {
            if v != 0.0 {
                out.coords.push(c);
                out.values.push(v);
            }
        };
        while i < a.coords.len() || j < b.coords.len() {
            let ca = a.coords.get(i).copied().unwrap_or(usize::MAX);
            let cb = b.coords.get(j).copied().unwrap_or(usize::MAX);
            if ca == cb {
                push(ca, alpha * a.values[i] + beta * b.values[j]);
                i += 1;
                j += 1;
            } else if ca < cb {
                push(ca, alpha * a.values[i]);
                i += 1;
            } else {
                push(cb, beta * b.values[j]);
                j += 1;
            }
        }
        out
    }

    fn dot(a: &SparseBlock, b: &SparseBlock) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < a.coords.len() && j < b.coords.len() {
            match a.coords[i].cmp(&b.coords[j]) {
                std::cmp::Ordering::Equal => {
                    acc += a.values[i] * b.values[j];
                    i += 1;
                    j += 1;
                }
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Storage {
    List(BTreeMap<BlockKey, ArrayD<f64>>),
    SparseDense { keys: BTreeSet<BlockKey>, data: ArrayD<f64> },
    SparseSparse(BTreeMap<BlockKey, SparseBlock>),
}

/// A flux-conserving block-sparse tensor.
#[derive(Clone, Debug)]
pub struct BlockTensor {
    indices: Vec<QNIndex>,
    total: Charge,
    storage: Storage,
}

impl BlockTensor {
    /// An empty tensor (no stored blocks) in the given format.
    pub fn new(indices: Vec<QNIndex>, total: Charge, format: Format) -> Result<Self> {
        for (m, idx) in indices.iter().enumerate() {
            if let Some(len) = idx.charge_len() {
                if len != total.len() {
                    return Err(structural(format!(
                        "index {m} has charges of length {len}, total charge has length {}",
                        total.len()
                    )));
                }
            }
        }
        let storage = match format {
            Format::List => Storage::List(BTreeMap::new()),
            Format::SparseDense => {
                let shape: Vec<usize> = indices.iter().map(QNIndex::dim).collect();
                Storage::SparseDense { keys: BTreeSet::new(), data: ArrayD::zeros(IxDyn(&shape)) }
            }
            Format::SparseSparse => Storage::SparseSparse(BTreeMap::new()),
        };
        Ok(BlockTensor { indices, total, storage })
    }

    /// Builds a list-format tensor from explicit blocks.
    pub fn from_blocks(
        indices: Vec<QNIndex>,
        total: Charge,
        blocks: impl IntoIterator<Item = (BlockKey, ArrayD<f64>)>,
    ) -> Result<Self> {
        let mut t = BlockTensor::new(indices, total, Format::List)?;
        let Storage::List(map) = &mut t.storage else { unreachable!() };
        let mut staged = BTreeMap::new();
        for (key, data) in blocks {
            if staged.contains_key(&key) {
                return Err(structural(format!("duplicate block {key:?}")));
            }
            staged.insert(key, data);
        }
        *map = staged;
        t.validate()?;
        Ok(t)
    }

    /// Every admissible block filled with zeros.
    pub fn zeros(indices: Vec<QNIndex>, total: Charge, format: Format) -> Result<Self> {
        let keys = admissible_keys(&indices, &total)?;
        let shapes: Vec<Vec<usize>> = keys.iter().map(|k| block_shape_of(&indices, k)).collect();
        let blocks = keys.into_iter().zip(shapes).map(|(k, s)| (k, ArrayD::zeros(IxDyn(&s))));
        Ok(BlockTensor::from_blocks(indices, total, blocks)?.convert(format))
    }

    /// Every admissible block filled with values uniform in `[-0.5, 0.5)`.
    /// Blocks are filled in lexicographic key order, elements row-major.
    pub fn random<R: Rng + ?Sized>(indices: Vec<QNIndex>, total: Charge, format: Format, rng: &mut R) -> Result<Self> {
        let keys = admissible_keys(&indices, &total)?;
        let mut blocks = Vec::with_capacity(keys.len());
        for key in keys {
            let shape = block_shape_of(&indices, &key);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            blocks.push((key, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("block size")));
        }
        Ok(BlockTensor::from_blocks(indices, total, blocks)?.convert(format))
    }

    /// Identity on a pair of modes `(index.dual(), index)`: one identity
    /// block per sector. The result has zero total charge.
    pub fn identity(index: &QNIndex, format: Format) -> Result<Self> {
        let len = index.charge_len().unwrap_or(0);
        let blocks = index.sectors().iter().map(|s| {
            (
                vec![s.charge.clone(), s.charge.clone()],
                ArrayD::from_shape_fn(IxDyn(&[s.dim, s.dim]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 }),
            )
        });
        Ok(BlockTensor::from_blocks(vec![index.dual(), index.clone()], Charge::zero(len), blocks)?.convert(format))
    }

    pub fn indices(&self) -> &[QNIndex] {
        &self.indices
    }

    pub fn index(&self, mode: usize) -> &QNIndex {
        &self.indices[mode]
    }

    pub fn total_charge(&self) -> &Charge {
        &self.total
    }

    pub fn order(&self) -> usize {
        self.indices.len()
    }

    pub fn format(&self) -> Format {
        match self.storage {
            Storage::List(_) => Format::List,
            Storage::SparseDense { .. } => Format::SparseDense,
            Storage::SparseSparse(_) => Format::SparseSparse,
        }
    }

    /// Dense dimensions of every mode.
    pub fn shape(&self) -> Vec<usize> {
        self.indices.iter().map(QNIndex::dim).collect()
    }

    pub fn num_blocks(&self) -> usize {
        match &self.storage {
            Storage::List(m) => m.len(),
            Storage::SparseDense { keys, .. } => keys.len(),
            Storage::SparseSparse(m) => m.len(),
        }
    }

    /// Stored block keys in lexicographic order.
    pub fn block_keys(&self) -> Vec<BlockKey> {
        match &self.storage {
            Storage::List(m) => m.keys().cloned().collect(),
            Storage::SparseDense { keys, .. } => keys.iter().cloned().collect(),
            Storage::SparseSparse(m) => m.keys().cloned().collect(),
        }
    }

    pub fn has_block(&self, key: &BlockKey) -> bool {
        match &self.storage {
            Storage::List(m) => m.contains_key(key),
            Storage::SparseDense { keys, .. } => keys.contains(key),
            Storage::SparseSparse(m) => m.contains_key(key),
        }
    }

    pub fn block_shape(&self, key: &BlockKey) -> Vec<usize> {
        block_shape_of(&self.indices, key)
    }

    /// Dense data of a stored block.
    pub fn block(&self, key: &BlockKey) -> Option<Cow<'_, ArrayD<f64>>> {
        match &self.storage {
            Storage::List(m) => m.get(key).map(Cow::Borrowed),
            Storage::SparseDense { keys, data } => {
                keys.contains(key).then(|| Cow::Owned(extract_block(&self.indices, data, key)))
            }
            Storage::SparseSparse(m) => m.get(key).map(|b| Cow::Owned(b.to_dense())),
        }
    }

    /// All stored blocks in key order.
    pub fn blocks(&self) -> Vec<Block> {
        self.block_keys()
            .into_iter()
            .map(|k| {
                let data = self.block(&k).expect("stored key").into_owned();
                Block { charges: k, data }
            })
            .collect()
    }

    /// Logical element at dense position `pos`.
    pub fn get(&self, pos: &[usize]) -> f64 {
        assert_eq!(pos.len(), self.order(), "element position arity");
        if let Storage::SparseDense { data, .. } = &self.storage {
            return data[IxDyn(pos)];
        }
        let mut key = Vec::with_capacity(pos.len());
        let mut local = Vec::with_capacity(pos.len());
        for (idx, &p) in self.indices.iter().zip(pos) {
            let Some((q, l)) = idx.locate(p) else { return 0.0 };
            key.push(q.clone());
            local.push(l);
        }
        match &self.storage {
            Storage::List(m) => m.get(&key).map_or(0.0, |b| b[IxDyn(&local)]),
            Storage::SparseSparse(m) => m.get(&key).map_or(0.0, |b| {
                let off: usize = dense::strides(&b.shape).iter().zip(&local).map(|(s, l)| s * l).sum();
                b.get(off)
            }),
            Storage::SparseDense { .. } => unreachable!(),
        }
    }

    /// Checks index/charge consistency and flux conservation of every block.
    pub fn validate(&self) -> Result<()> {
        for key in self.block_keys() {
            check_key(&self.indices, &self.total, &key)?;
            if let Storage::List(m) = &self.storage {
                let data = &m[&key];
                if data.shape() != block_shape_of(&self.indices, &key).as_slice() {
                    return Err(structural(format!("block {key:?} has shape {:?}", data.shape())));
                }
            }
        }
        Ok(())
    }

    /// Logically identical tensor in another storage format.
    pub fn convert(&self, target: Format) -> BlockTensor {
        if self.format() == target {
            return self.clone();
        }
        let storage = match target {
            Format::List => Storage::List(self.blocks().into_iter().map(|b| (b.charges, b.data)).collect()),
            Format::SparseSparse => Storage::SparseSparse(match &self.storage {
                Storage::List(m) => m.iter().map(|(k, d)| (k.clone(), SparseBlock::from_dense(d))).collect(),
                _ => self.blocks().into_iter().map(|b| (b.charges, SparseBlock::from_dense(&b.data))).collect(),
            }),
            Format::SparseDense => {
                let mut data = ArrayD::zeros(IxDyn(&self.shape()));
                let mut keys = BTreeSet::new();
                for b in self.blocks() {
                    embed_block(&self.indices, &mut data, &b.charges, &b.data);
                    keys.insert(b.charges);
                }
                Storage::SparseDense { keys, data }
            }
        };
        BlockTensor { indices: self.indices.clone(), total: self.total.clone(), storage }
    }

    pub fn scale(&self, alpha: f64) -> BlockTensor {
        let storage = match &self.storage {
            Storage::List(m) => Storage::List(m.iter().map(|(k, d)| (k.clone(), d * alpha)).collect()),
            Storage::SparseDense { keys, data } => Storage::SparseDense { keys: keys.clone(), data: data * alpha },
            Storage::SparseSparse(m) => {
                Storage::SparseSparse(m.iter().map(|(k, b)| (k.clone(), b.scaled(alpha))).collect())
            }
        };
        BlockTensor { indices: self.indices.clone(), total: self.total.clone(), storage }
    }

    /// `alpha * a + beta * b`; blocks present in one operand only are scaled
    /// copies. The result takes the format of `a`.
    pub fn add(a: &BlockTensor, b: &BlockTensor, alpha: f64, beta: f64) -> Result<BlockTensor> {
        if a.indices != b.indices {
            return Err(structural("add: operands have different indices"));
        }
        if a.total != b.total {
            return Err(structural(format!("add: total charges differ ({} vs {})", a.total, b.total)));
        }
        let b = b.convert(a.format());
        let storage = match (&a.storage, &b.storage) {
            (Storage::List(ma), Storage::List(mb)) => {
                let keys: BTreeSet<&BlockKey> = ma.keys().chain(mb.keys()).collect();
                Storage::List(
                    keys.into_iter()
                        .map(|k| {
                            let d = match (ma.get(k), mb.get(k)) {
                                (Some(x), Some(y)) => {
                                    let mut out = x * alpha;
                                    Zip::from(&mut out).and(y).for_each(|o, &v| *o += beta * v);
                                    out
                                }
                                (Some(x), None) => x * alpha,
                                (None, Some(y)) => y * beta,
                                (None, None) => unreachable!(),
                            };
                            (k.clone(), d)
                        })
                        .collect(),
                )
            }
            (Storage::SparseDense { keys: ka, data: da }, Storage::SparseDense { keys: kb, data: db }) => {
                let mut data = da * alpha;
                Zip::from(&mut data).and(db).for_each(|o, &v| *o += beta * v);
                Storage::SparseDense { keys: ka.union(kb).cloned().collect(), data }
            }
            (Storage::SparseSparse(ma), Storage::SparseSparse(mb)) => {
                let keys: BTreeSet<&BlockKey> = ma.keys().chain(mb.keys()).collect();
                Storage::SparseSparse(
                    keys.into_iter()
                        .map(|k| {
                            let blk = match (ma.get(k), mb.get(k)) {
                                (Some(x), Some(y)) => SparseBlock::axpby(x, y, alpha, beta),
                                (Some(x), None) => x.scaled(alpha),
                                (None, Some(y)) => y.scaled(beta),
                                (None, None) => unreachable!(),
                            };
                            (k.clone(), blk)
                        })
                        .collect(),
                )
            }
            _ => unreachable!("operands converted to a common format"),
        };
        Ok(BlockTensor { indices: a.indices.clone(), total: a.total.clone(), storage })
    }

    /// Sum over shared blocks of elementwise products.
    pub fn inner(a: &BlockTensor, b: &BlockTensor) -> Result<f64> {
        if a.indices != b.indices {
            return Err(structural("inner: operands have different indices"));
        }
        if a.total != b.total {
            return Ok(0.0);
        }
        let b = b.convert(a.format());
        Ok(match (&a.storage, &b.storage) {
            (Storage::List(ma), Storage::List(mb)) => ma
                .iter()
                .filter_map(|(k, x)| mb.get(k).map(|y| Zip::from(x).and(y).fold(0.0, |acc, &p, &q| acc + p * q)))
                .sum(),
            (Storage::SparseDense { data: da, .. }, Storage::SparseDense { data: db, .. }) => {
                Zip::from(da).and(db).fold(0.0, |acc, &p, &q| acc + p * q)
            }
            (Storage::SparseSparse(ma), Storage::SparseSparse(mb)) => {
                ma.iter().filter_map(|(k, x)| mb.get(k).map(|y| SparseBlock::dot(x, y))).sum()
            }
            _ => unreachable!("operands converted to a common format"),
        })
    }

    pub fn norm(&self) -> f64 {
        BlockTensor::inner(self, self).expect("same indices").sqrt()
    }

    /// Conjugate tensor: every index dualized, total charge negated. Real
    /// scalars make the data unchanged.
    pub fn conj(&self) -> BlockTensor {
        BlockTensor {
            indices: self.indices.iter().map(QNIndex::dual).collect(),
            total: self.total.neg(),
            storage: self.storage.clone(),
        }
    }

    /// Reorders modes: mode `i` of the result is mode `perm[i]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Result<BlockTensor> {
        check_permutation(perm, self.order())?;
        let indices: Vec<QNIndex> = perm.iter().map(|&p| self.indices[p].clone()).collect();
        let permute_key = |k: &BlockKey| -> BlockKey { perm.iter().map(|&p| k[p].clone()).collect() };
        let storage = match &self.storage {
            Storage::List(m) => {
                Storage::List(m.iter().map(|(k, d)| (permute_key(k), dense::permute(d.view(), perm))).collect())
            }
            Storage::SparseDense { keys, data } => Storage::SparseDense {
                keys: keys.iter().map(permute_key).collect(),
                data: dense::permute(data.view(), perm),
            },
            Storage::SparseSparse(m) => Storage::SparseSparse(
                m.iter()
                    .map(|(k, b)| {
                        let d = dense::permute(b.to_dense().view(), perm);
                        (permute_key(k), SparseBlock::from_dense(&d))
                    })
                    .collect(),
            ),
        };
        Ok(BlockTensor { indices, total: self.total.clone(), storage })
    }

    /// Replaces index `mode` by its flipped equivalent (reversed arrow,
    /// negated charges). Flux and element values are unchanged, although
    /// dense positions along `mode` follow the new sector order.
    pub fn flip_mode(&self, mode: usize) -> BlockTensor {
        let mut indices = self.indices.clone();
        indices[mode] = indices[mode].flipped();
        let flip_key = |k: &BlockKey| -> BlockKey {
            let mut k = k.clone();
            k[mode] = k[mode].neg();
            k
        };
        let storage = match &self.storage {
            Storage::List(m) => Storage::List(m.iter().map(|(k, d)| (flip_key(k), d.clone())).collect()),
            Storage::SparseSparse(m) => {
                Storage::SparseSparse(m.iter().map(|(k, b)| (flip_key(k), b.clone())).collect())
            }
            Storage::SparseDense { .. } => {
                let list = self.convert(Format::List);
                return list.flip_mode(mode).convert(Format::SparseDense);
            }
        };
        BlockTensor { indices, total: self.total.clone(), storage }
    }

    /// Σ_ℓ Π_i d_i^ℓ over stored blocks.
    pub fn stored_elements(&self) -> usize {
        self.block_keys().iter().map(|k| self.block_shape(k).iter().product::<usize>()).sum()
    }

    /// Π_i dims.
    pub fn dense_size(&self) -> usize {
        self.shape().iter().product()
    }

    /// Full dense array with every block placed at its sector offsets.
    pub fn to_dense(&self) -> ArrayD<f64> {
        match self.convert(Format::SparseDense).storage {
            Storage::SparseDense { data, .. } => data,
            _ => unreachable!(),
        }
    }

    /// Blocks a dense array. Admissible blocks holding a nonzero are stored;
    /// a nonzero outside every admissible block is a structural error.
    pub fn from_dense(indices: Vec<QNIndex>, total: Charge, dense: &ArrayD<f64>, format: Format) -> Result<Self> {
        let shape: Vec<usize> = indices.iter().map(QNIndex::dim).collect();
        if dense.shape() != shape.as_slice() {
            return Err(structural(format!("dense shape {:?} does not match indices {shape:?}", dense.shape())));
        }
        let keys = admissible_keys(&indices, &total)?;
        let mut rest = dense.clone();
        let mut blocks = Vec::new();
        for key in keys {
            let info = block_slice_info(&indices, &key);
            let block = dense.slice(info.as_slice()).to_owned();
            rest.slice_mut(info.as_slice()).fill(0.0);
            if block.iter().any(|&v| v != 0.0) {
                blocks.push((key, block));
            }
        }
        if let Some(v) = rest.iter().find(|&&v| v != 0.0) {
            return Err(structural(format!("dense array has nonzero {v} outside the admissible blocks")));
        }
        Ok(BlockTensor::from_blocks(indices, total, blocks)?.convert(format))
    }

    /// `1 - stored / dense`; an index-less or zero-size tensor counts as
    /// fully sparse.
    pub fn sparsity(&self) -> f64 {
        let dense = self.dense_size();
        if dense == 0 || self.num_blocks() == 0 {
            return 1.0;
        }
        1.0 - self.stored_elements() as f64 / dense as f64
    }

    /// Multiplies the slices of `mode` belonging to each listed sector by
    /// the given weights (used to absorb singular values into a factor).
    pub fn scale_mode(&self, mode: usize, weights: &[(Charge, Vec<f64>)]) -> Result<BlockTensor> {
        let lookup: BTreeMap<&Charge, &Vec<f64>> = weights.iter().map(|(q, w)| (q, w)).collect();
        let list = self.convert(Format::List);
        let mut blocks = Vec::with_capacity(list.num_blocks());
        for b in list.blocks() {
            let w = lookup
                .get(&b.charges[mode])
                .ok_or_else(|| structural(format!("scale_mode: no weights for sector {}", b.charges[mode])))?;
            if w.len() != b.data.shape()[mode] {
                return Err(structural("scale_mode: weight length differs from sector dimension"));
            }
            let mut data = b.data;
            for (i, mut lane) in data.axis_iter_mut(ndarray::Axis(mode)).enumerate() {
                lane *= w[i];
            }
            blocks.push((b.charges, data));
        }
        Ok(BlockTensor::from_blocks(self.indices.clone(), self.total.clone(), blocks)?.convert(self.format()))
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.storage
    }

    pub(crate) fn from_parts(indices: Vec<QNIndex>, total: Charge, storage: Storage) -> BlockTensor {
        BlockTensor { indices, total, storage }
    }
}

pub(crate) fn block_shape_of(indices: &[QNIndex], key: &BlockKey) -> Vec<usize> {
    indices.iter().zip(key).map(|(idx, q)| idx.sector_dim(q).unwrap_or(0)).collect()
}

pub(crate) fn block_flux(indices: &[QNIndex], key: &BlockKey, len: usize) -> Result<Charge> {
    let mut acc = Charge::zero(len);
    for (idx, q) in indices.iter().zip(key) {
        acc = fuse(&acc, &idx.signed(q))?;
    }
    Ok(acc)
}

fn check_key(indices: &[QNIndex], total: &Charge, key: &BlockKey) -> Result<()> {
    if key.len() != indices.len() {
        return Err(structural(format!("block {key:?} has {} charges for {} modes", key.len(), indices.len())));
    }
    for (m, (idx, q)) in indices.iter().zip(key).enumerate() {
        if idx.sector_dim(q).is_none() {
            return Err(structural(format!("block {key:?}: charge {q} is not a sector of mode {m}")));
        }
    }
    let f = block_flux(indices, key, total.len())?;
    if &f != total {
        return Err(structural(format!("block {key:?} has flux {f}, expected {total}")));
    }
    Ok(())
}

/// All charge tuples with flux equal to `total`, in lexicographic order.
pub fn admissible_keys(indices: &[QNIndex], total: &Charge) -> Result<Vec<BlockKey>> {
    let len = total.len();
    if indices.is_empty() {
        return Ok(if total.is_zero() { vec![vec![]] } else { vec![] });
    }
    let last = indices.len() - 1;
    let mut out = Vec::new();
    let mut key: BlockKey = Vec::with_capacity(indices.len());
    fn rec(
        indices: &[QNIndex],
        total: &Charge,
        mode: usize,
        partial: Charge,
        key: &mut BlockKey,
        out: &mut Vec<BlockKey>,
        last: usize,
    ) -> Result<()> {
        if mode == last {
            // Remaining charge is fixed by conservation.
            let need = total.sub(&partial)?;
            let q = indices[last].signed(&need);
            if indices[last].sector_dim(&q).is_some() {
                key.push(q);
                out.push(key.clone());
                key.pop();
            }
            return Ok(());
        }
        for s in indices[mode].sectors() {
            let next = fuse(&partial, &indices[mode].signed(&s.charge))?;
            key.push(s.charge.clone());
            rec(indices, total, mode + 1, next, key, out, last)?;
            key.pop();
        }
        Ok(())
    }
    rec(indices, total, 0, Charge::zero(len), &mut key, &mut out, last)?;
    out.sort();
    Ok(out)
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(structural(format!("permutation of length {} for {n} modes", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(structural(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn block_slice_info(indices: &[QNIndex], key: &BlockKey) -> Vec<ndarray::SliceInfoElem> {
    indices
        .iter()
        .zip(key)
        .map(|(idx, q)| {
            let off = idx.sector_offset(q).expect("valid key");
            let dim = idx.sector_dim(q).expect("valid key");
            ndarray::SliceInfoElem::Slice { start: off as isize, end: Some((off + dim) as isize), step: 1 }
        })
        .collect()
}

fn extract_block(indices: &[QNIndex], data: &ArrayD<f64>, key: &BlockKey) -> ArrayD<f64> {
    let info = block_slice_info(indices, key);
    data.slice(info.as_slice()).to_owned()
}

fn embed_block(indices: &[QNIndex], data: &mut ArrayD<f64>, key: &BlockKey, block: &ArrayD<f64>) {
    let info = block_slice_info(indices, key);
    data.slice_mut(info.as_slice()).assign(block);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qn::{Direction, Sector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(v: i32) -> Charge {
        Charge::new(&[v])
    }

    fn idx(secs: &[(i32, usize)], dir: Direction) -> QNIndex {
        QNIndex::new(secs.iter().map(|&(c, d)| Sector::new(q(c), d)).collect(), dir).unwrap()
    }

    fn sample(format: Format, seed: u64) -> BlockTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = idx(&[(-1, 2), (0, 1), (1, 3)], Direction::Inward);
        let j = idx(&[(-1, 1), (1, 2)], Direction::Inward);
        let k = idx(&[(-2, 2), (0, 2), (2, 1)], Direction::Outward);
        BlockTensor::random(vec![i, j, k], q(0), format, &mut rng).unwrap()
    }

    fn all_positions(shape: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for &d in shape {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..d).map(move |x| {
                        let mut p = p.clone();
                        p.push(x);
                        p
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn admissible_blocks_conserve_flux() {
        let t = sample(Format::List, 1);
        assert!(t.num_blocks() > 0);
        t.validate().unwrap();
        for k in t.block_keys() {
            assert_eq!(block_flux(t.indices(), &k, 1).unwrap(), q(0));
        }
    }

    #[test]
    fn formats_agree_elementwise() {
        let t = sample(Format::List, 2);
        let sd = t.convert(Format::SparseDense);
        let ss = t.convert(Format::SparseSparse);
        for p in all_positions(&t.shape()) {
            assert_eq!(t.get(&p), sd.get(&p));
            assert_eq!(t.get(&p), ss.get(&p));
        }
        let back = ss.convert(Format::List);
        for (x, y) in t.blocks().iter().zip(back.blocks()) {
            assert_eq!(x.charges, y.charges);
            assert_eq!(x.data, y.data);
        }
        assert_eq!(sd.convert(Format::SparseSparse).convert(Format::List).block_keys(), t.block_keys());
    }

    #[test]
    fn empty_and_single_sector_conversions() {
        let i = idx(&[(0, 2)], Direction::Inward);
        let o = idx(&[(0, 3)], Direction::Outward);
        let empty = BlockTensor::new(vec![i.clone(), o.clone()], q(0), Format::List).unwrap();
        for f in [Format::SparseDense, Format::SparseSparse, Format::List] {
            let c = empty.convert(f);
            assert_eq!(c.num_blocks(), 0);
            assert_eq!(c.sparsity(), 1.0);
        }
        let full = BlockTensor::random(vec![i, o], q(0), Format::List, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let sd = full.convert(Format::SparseDense);
        let Storage::SparseDense { data, .. } = sd.storage() else { panic!() };
        assert_eq!(data, &*full.block(&vec![q(0), q(0)]).unwrap());
        assert_eq!(full.sparsity(), 0.0);
    }

    #[test]
    fn sparsity_of_two_diagonal_blocks() {
        let i = idx(&[(-1, 2), (1, 2)], Direction::Inward);
        let t = BlockTensor::zeros(vec![i.clone(), i.dual()], q(0), Format::List).unwrap();
        assert_eq!(t.num_blocks(), 2);
        assert!((t.sparsity() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn add_examples() {
        for f in [Format::List, Format::SparseDense, Format::SparseSparse] {
            let t = sample(f, 4);
            let z = BlockTensor::add(&t, &t, 1.0, -1.0).unwrap();
            assert_eq!(z.norm(), 0.0);
            let zero = BlockTensor::new(t.indices().to_vec(), q(0), f).unwrap();
            let two = BlockTensor::add(&t, &zero, 2.0, 1.0).unwrap();
            for p in all_positions(&t.shape()) {
                assert_eq!(two.get(&p), 2.0 * t.get(&p));
            }
        }
        let t = sample(Format::List, 5);
        let other = BlockTensor::new(vec![t.index(0).clone()], q(0), Format::List).unwrap();
        assert!(BlockTensor::add(&t, &other, 1.0, 1.0).is_err());
    }

    #[test]
    fn add_and_inner_match_elementwise_sums() {
        let a = sample(Format::List, 6);
        let b = sample(Format::List, 7);
        let positions = all_positions(&a.shape());
        let dot: f64 = positions.iter().map(|p| a.get(p) * b.get(p)).sum();
        for f in [Format::List, Format::SparseDense, Format::SparseSparse] {
            let (af, bf) = (a.convert(f), b.convert(f));
            assert!((BlockTensor::inner(&af, &bf).unwrap() - dot).abs() < 1e-13);
            let c = BlockTensor::add(&af, &bf, 0.5, -1.5).unwrap();
            for p in &positions {
                assert!((c.get(p) - (0.5 * a.get(p) - 1.5 * b.get(p))).abs() < 1e-15);
            }
        }
        assert!(BlockTensor::inner(&a, &a).unwrap() >= 0.0);
    }

    #[test]
    fn inner_of_disjoint_blocks_is_zero() {
        let i = idx(&[(-1, 1), (1, 1)], Direction::Inward);
        let a = BlockTensor::from_blocks(
            vec![i.clone(), i.dual()],
            q(0),
            [(vec![q(-1), q(-1)], ArrayD::ones(IxDyn(&[1, 1])))],
        )
        .unwrap();
        let b = BlockTensor::from_blocks(
            vec![i.clone(), i.dual()],
            q(0),
            [(vec![q(1), q(1)], ArrayD::ones(IxDyn(&[1, 1])))],
        )
        .unwrap();
        assert_eq!(BlockTensor::inner(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_conserving_blocks() {
        let i = idx(&[(-1, 1), (1, 1)], Direction::Inward);
        let bad = BlockTensor::from_blocks(
            vec![i.clone(), i.dual()],
            q(0),
            [(vec![q(-1), q(1)], ArrayD::ones(IxDyn(&[1, 1])))],
        );
        assert!(matches!(bad, Err(crate::Error::Structural(_))));
        let dup = BlockTensor::from_blocks(
            vec![i.clone(), i.dual()],
            q(0),
            [(vec![q(1), q(1)], ArrayD::ones(IxDyn(&[1, 1]))), (vec![q(1), q(1)], ArrayD::ones(IxDyn(&[1, 1])))],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn permute_and_flip_preserve_values() {
        let t = sample(Format::List, 8);
        let p = t.permute(&[2, 0, 1]).unwrap();
        p.validate().unwrap();
        for pos in all_positions(&t.shape()) {
            assert_eq!(p.get(&[pos[2], pos[0], pos[1]]), t.get(&pos));
        }
        let f = t.flip_mode(1);
        f.validate().unwrap();
        assert!((f.norm() - t.norm()).abs() < 1e-14);
        for fmt in [Format::SparseDense, Format::SparseSparse] {
            let g = t.convert(fmt).flip_mode(1);
            assert_eq!(g.block_keys(), f.block_keys());
        }
    }
}
