//! Pairwise contraction of block tensors.
//!
//! All three formats share the same planning step: enumerate every pair of
//! stored blocks that agree on the contracted charges and group the pairs by
//! output charge tuple. That grouping is the output sparsity, known before
//! any arithmetic happens. The kernels then differ only in how the grouped
//! pairs are evaluated:
//!
//! * list: one GEMM per block pair, accumulated into the output block;
//! * sparse-dense: a single dense contraction of the embedded operands;
//! * sparse-sparse: a coordinate join of the nonzeros of each pair.
//!
//! Contributions to an output block are always summed in lexicographic order
//! of the contributing `(a, b)` keys and each output block is reduced by a
//! single worker, so results do not depend on the size of the thread pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;

use super::dense::{self, gemm_acc, matricize, strides};
use super::{check_permutation, BlockKey, BlockTensor, Format, SparseBlock, Storage};
use crate::error::{structural, Result};
use crate::perf::{self, FlopClass};
use crate::qn::{fuse, Charge, QNIndex};

/// Which modes to contract and how to order the surviving ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionSpec {
    /// `(mode of a, mode of b)` pairs; each pair must join an index with its dual.
    pub pairs: Vec<(usize, usize)>,
    /// Permutation of the free modes `[free a..., free b...]`; `None` keeps them in order.
    pub output_order: Option<Vec<usize>>,
}

impl ContractionSpec {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        ContractionSpec { pairs, output_order: None }
    }

    pub fn with_output_order(mut self, order: Vec<usize>) -> Self {
        self.output_order = Some(order);
        self
    }
}

struct Plan {
    a_contracted: Vec<usize>,
    b_contracted: Vec<usize>,
    a_free: Vec<usize>,
    b_free: Vec<usize>,
    order: Vec<usize>,
    out_indices: Vec<QNIndex>,
    out_total: Charge,
    /// Output key (already permuted) -> contributing (a key, b key) pairs.
    groups: Vec<(BlockKey, Vec<(usize, usize)>)>,
    a_keys: Vec<BlockKey>,
    b_keys: Vec<BlockKey>,
    flops: u64,
}

impl Plan {
    fn new(a: &BlockTensor, b: &BlockTensor, spec: &ContractionSpec) -> Result<Plan> {
        if a.total_charge().len() != b.total_charge().len() {
            return Err(structural("contract: operands have different charge lengths"));
        }
        let mut seen_a = BTreeSet::new();
        let mut seen_b = BTreeSet::new();
        for &(ia, ib) in &spec.pairs {
            if ia >= a.order() || ib >= b.order() {
                return Err(structural(format!("contract: pair ({ia},{ib}) out of range")));
            }
            if !seen_a.insert(ia) || !seen_b.insert(ib) {
                return Err(structural(format!("contract: mode repeated in pair ({ia},{ib})")));
            }
            if !a.index(ia).is_dual_of(b.index(ib)) {
                return Err(structural(format!("contract: mode {ia} of a and mode {ib} of b are not mutually dual")));
            }
        }
        let a_contracted: Vec<usize> = spec.pairs.iter().map(|p| p.0).collect();
        let b_contracted: Vec<usize> = spec.pairs.iter().map(|p| p.1).collect();
        let a_free: Vec<usize> = (0..a.order()).filter(|m| !seen_a.contains(m)).collect();
        let b_free: Vec<usize> = (0..b.order()).filter(|m| !seen_b.contains(m)).collect();
        let nfree = a_free.len() + b_free.len();
        let order = match &spec.output_order {
            Some(o) => {
                check_permutation(o, nfree)?;
                o.clone()
            }
            None => (0..nfree).collect(),
        };
        let raw_indices: Vec<QNIndex> =
            a_free.iter().map(|&m| a.index(m).clone()).chain(b_free.iter().map(|&m| b.index(m).clone())).collect();
        let out_indices = order.iter().map(|&p| raw_indices[p].clone()).collect();
        let out_total = fuse(a.total_charge(), b.total_charge())?;

        let a_keys = a.block_keys();
        let b_keys = b.block_keys();
        let mut b_by_charge: HashMap<Vec<&Charge>, Vec<usize>> = HashMap::new();
        for (j, k) in b_keys.iter().enumerate() {
            b_by_charge.entry(b_contracted.iter().map(|&m| &k[m]).collect()).or_default().push(j);
        }
        let dims = |t: &BlockTensor, k: &BlockKey, modes: &[usize]| -> u64 {
            modes.iter().map(|&m| t.index(m).sector_dim(&k[m]).unwrap_or(0) as u64).product()
        };
        let mut grouped: BTreeMap<BlockKey, Vec<(usize, usize)>> = BTreeMap::new();
        let mut flops = 0u64;
        for (i, ka) in a_keys.iter().enumerate() {
            let probe: Vec<&Charge> = a_contracted.iter().map(|&m| &ka[m]).collect();
            let Some(partners) = b_by_charge.get(&probe) else { continue };
            let fa = dims(a, ka, &a_free);
            let ca = dims(a, ka, &a_contracted);
            for &j in partners {
                let kb = &b_keys[j];
                let raw: BlockKey =
                    a_free.iter().map(|&m| ka[m].clone()).chain(b_free.iter().map(|&m| kb[m].clone())).collect();
                let key: BlockKey = order.iter().map(|&p| raw[p].clone()).collect();
                flops += 2 * fa * ca * dims(b, kb, &b_free);
                grouped.entry(key).or_default().push((i, j));
            }
        }
        Ok(Plan {
            a_contracted,
            b_contracted,
            a_free,
            b_free,
            order,
            out_indices,
            out_total,
            groups: grouped.into_iter().collect(),
            a_keys,
            b_keys,
            flops,
        })
    }

    fn raw_shape(&self, a: &BlockTensor, b: &BlockTensor, ka: &BlockKey, kb: &BlockKey) -> Vec<usize> {
        self.a_free
            .iter()
            .map(|&m| a.index(m).sector_dim(&ka[m]).expect("valid key"))
            .chain(self.b_free.iter().map(|&m| b.index(m).sector_dim(&kb[m]).expect("valid key")))
            .collect()
    }
}

/// Result format when combining operands of the given formats.
pub(crate) fn result_format(a: Format, b: Format) -> Format {
    use Format::*;
    match (a, b) {
        (SparseDense, _) | (_, SparseDense) => SparseDense,
        (SparseSparse, _) | (_, SparseSparse) => SparseSparse,
        (List, List) => List,
    }
}

/// Multiply-add count of a contraction (2 flops per multiply-add), summed
/// over the block pairs that would be executed.
pub fn contraction_flops(a: &BlockTensor, b: &BlockTensor, spec: &ContractionSpec) -> Result<u64> {
    Ok(Plan::new(a, b, spec)?.flops)
}

/// Contracts `a` with `b`. For every admissible output charge tuple the
/// output block is the sum of the dense contractions of all block pairs that
/// agree on the contracted charges. The flop count of those pairs is added to
/// the calling thread's [`perf`] counter regardless of format.
pub fn contract(a: &BlockTensor, b: &BlockTensor, spec: &ContractionSpec) -> Result<BlockTensor> {
    let plan = Plan::new(a, b, spec)?;
    perf::record(FlopClass::Contract, plan.flops);
    let storage = match result_format(a.format(), b.format()) {
        Format::List => list_kernel(&plan, a, b),
        Format::SparseDense => sparse_dense_kernel(&plan, a, b),
        Format::SparseSparse => sparse_sparse_kernel(&plan, a, b),
    };
    Ok(BlockTensor::from_parts(plan.out_indices, plan.out_total, storage))
}

fn list_kernel(plan: &Plan, a: &BlockTensor, b: &BlockTensor) -> Storage {
    let (Storage::List(ma), Storage::List(mb)) = (a.storage(), b.storage()) else {
        unreachable!("list kernel requires list operands")
    };
    let a_mats: Vec<Array2<f64>> =
        plan.a_keys.par_iter().map(|k| matricize(ma[k].view(), &plan.a_free, &plan.a_contracted)).collect();
    let b_mats: Vec<Array2<f64>> =
        plan.b_keys.par_iter().map(|k| matricize(mb[k].view(), &plan.b_contracted, &plan.b_free)).collect();
    let blocks: Vec<(BlockKey, ArrayD<f64>)> = plan
        .groups
        .par_iter()
        .map(|(key, pairs)| {
            let (i0, j0) = pairs[0];
            let raw_shape = plan.raw_shape(a, b, &plan.a_keys[i0], &plan.b_keys[j0]);
            let mut acc = Array2::zeros((a_mats[i0].nrows(), b_mats[j0].ncols()));
            for &(i, j) in pairs {
                gemm_acc(&mut acc, &a_mats[i], &b_mats[j]);
            }
            let raw = dense::from_matrix(acc, &raw_shape);
            (key.clone(), dense::permute(raw.view(), &plan.order))
        })
        .collect();
    Storage::List(blocks.into_iter().collect())
}

fn sparse_dense_kernel(plan: &Plan, a: &BlockTensor, b: &BlockTensor) -> Storage {
    let a = a.convert(Format::SparseDense);
    let b = b.convert(Format::SparseDense);
    let (Storage::SparseDense { data: da, .. }, Storage::SparseDense { data: db, .. }) = (a.storage(), b.storage())
    else {
        unreachable!()
    };
    let raw = dense::tensordot(da.view(), db.view(), &plan.a_contracted, &plan.b_contracted);
    let data = dense::permute(raw.view(), &plan.order);
    let keys = plan.groups.iter().map(|(k, _)| k.clone()).collect();
    Storage::SparseDense { keys, data }
}

/// Nonzeros of one block split into (row, column) coordinates of its
/// matricization.
struct MatricizedEntries {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

fn split_entries(block: &SparseBlock, row_modes: &[usize], col_modes: &[usize]) -> MatricizedEntries {
    let st = strides(&block.shape);
    let sub_strides = |modes: &[usize]| -> Vec<usize> {
        let dims: Vec<usize> = modes.iter().map(|&m| block.shape[m]).collect();
        strides(&dims)
    };
    let rs = sub_strides(row_modes);
    let cs = sub_strides(col_modes);
    let rows = row_modes.iter().map(|&m| block.shape[m]).product();
    let cols = col_modes.iter().map(|&m| block.shape[m]).product();
    let mut entries = Vec::with_capacity(block.coords.len());
    for (&c, &v) in block.coords.iter().zip(&block.values) {
        let digit = |m: usize| (c / st[m]) % block.shape[m];
        let r: usize = row_modes.iter().zip(&rs).map(|(&m, s)| digit(m) * s).sum();
        let k: usize = col_modes.iter().zip(&cs).map(|(&m, s)| digit(m) * s).sum();
        entries.push((r, k, v));
    }
    MatricizedEntries { rows, cols, entries }
}

fn sparse_sparse_kernel(plan: &Plan, a: &BlockTensor, b: &BlockTensor) -> Storage {
    let a = a.convert(Format::SparseSparse);
    let b = b.convert(Format::SparseSparse);
    let (Storage::SparseSparse(ma), Storage::SparseSparse(mb)) = (a.storage(), b.storage()) else { unreachable!() };
    let a_entries: Vec<MatricizedEntries> =
        plan.a_keys.par_iter().map(|k| split_entries(&ma[k], &plan.a_free, &plan.a_contracted)).collect();
    // B entries bucketed by contracted coordinate.
    let b_rows: Vec<(usize, Vec<Vec<(usize, f64)>>)> = plan
        .b_keys
        .par_iter()
        .map(|k| {
            let m = split_entries(&mb[k], &plan.b_contracted, &plan.b_free);
            let mut by_row = vec![Vec::new(); m.rows];
            for (r, c, v) in m.entries {
                by_row[r].push((c, v));
            }
            (m.cols, by_row)
        })
        .collect();
    let blocks: Vec<(BlockKey, SparseBlock)> = plan
        .groups
        .par_iter()
        .map(|(key, pairs)| {
            let (i0, j0) = pairs[0];
            let rows = a_entries[i0].rows;
            let cols = b_rows[j0].0;
            let mut acc = vec![0.0; rows * cols];
            for &(i, j) in pairs {
                let by_row = &b_rows[j].1;
                for &(r, k, va) in &a_entries[i].entries {
                    for &(c, vb) in &by_row[k] {
                        acc[r * cols + c] += va * vb;
                    }
                }
            }
            debug_assert_eq!(a_entries[i0].cols, b_rows[j0].1.len());
            let raw_shape = plan.raw_shape(&a, &b, &plan.a_keys[i0], &plan.b_keys[j0]);
            let raw = ArrayD::from_shape_vec(IxDyn(&raw_shape), acc).expect("block size");
            let out = dense::permute(raw.view(), &plan.order);
            (key.clone(), SparseBlock::from_dense(&out))
        })
        .collect();
    Storage::SparseSparse(blocks.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qn::{Direction, Sector};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(v: i32) -> Charge {
        Charge::new(&[v])
    }

    #[test]
    fn single_block_reduces_to_gemm() {
        let i = QNIndex::trivial(q(0), Direction::Inward);
        let mid = QNIndex::new(vec![Sector::new(q(0), 3)], Direction::Outward).unwrap();
        let rows = QNIndex::new(vec![Sector::new(q(0), 2)], Direction::Inward).unwrap();
        let cols = QNIndex::new(vec![Sector::new(q(0), 4)], Direction::Outward).unwrap();
        let _ = i;
        let am = Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as f64 + 1.0);
        let bm = Array2::from_shape_fn((3, 4), |(r, c)| (r as f64) - 0.5 * (c as f64));
        let a = BlockTensor::from_blocks(vec![rows, mid.clone()], q(0), [(vec![q(0), q(0)], am.clone().into_dyn())])
            .unwrap();
        let b = BlockTensor::from_blocks(vec![mid.dual(), cols], q(0), [(vec![q(0), q(0)], bm.clone().into_dyn())])
            .unwrap();
        let spec = ContractionSpec::new(vec![(1, 0)]);
        assert_eq!(contraction_flops(&a, &b, &spec).unwrap(), 48);
        let c = contract(&a, &b, &spec).unwrap();
        assert_eq!(c.num_blocks(), 1);
        let expect = am.dot(&bm).into_dyn();
        assert_eq!(&*c.block(&vec![q(0), q(0)]).unwrap(), &expect);
    }

    #[test]
    fn result_format_policy() {
        use Format::*;
        assert_eq!(result_format(List, List), List);
        assert_eq!(result_format(List, SparseSparse), SparseSparse);
        assert_eq!(result_format(SparseSparse, SparseDense), SparseDense);
    }

    #[test]
    fn rejects_non_dual_pairs() {
        let i = QNIndex::new(vec![Sector::new(q(-1), 1), Sector::new(q(1), 2)], Direction::Inward).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = BlockTensor::random(vec![i.clone(), i.dual()], q(0), Format::List, &mut rng).unwrap();
        let same_dir = contract(&a, &a, &ContractionSpec::new(vec![(0, 0)]));
        assert!(matches!(same_dir, Err(crate::Error::Structural(_))));
        let two = BlockTensor::random(vec![i.clone(), i.dual()], Charge::new(&[0, 0]), Format::List, &mut rng);
        assert!(two.is_err());
    }

    #[test]
    fn identity_contraction_is_exact() {
        let i =
            QNIndex::new(vec![Sector::new(q(-2), 2), Sector::new(q(0), 3), Sector::new(q(2), 1)], Direction::Inward)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for f in [Format::List, Format::SparseDense, Format::SparseSparse] {
            let t = BlockTensor::random(vec![i.clone(), i.dual()], q(0), f, &mut rng).unwrap();
            let id = BlockTensor::identity(&i.dual(), f).unwrap();
            let c = contract(&t, &id, &ContractionSpec::new(vec![(1, 0)])).unwrap();
            assert_eq!(c.indices(), t.indices());
            for blk in t.blocks() {
                assert_eq!(&*c.block(&blk.charges).unwrap(), &blk.data);
            }
            // k blocks of n x n: sum of 2 n^3.
            let flops = contraction_flops(&t, &id, &ContractionSpec::new(vec![(1, 0)])).unwrap();
            assert_eq!(flops, 2 * (8 + 27 + 1));
        }
    }
}
