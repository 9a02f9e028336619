//! Block-wise SVD and QR.
//!
//! The tensor is wrapped into a matrix with `row_modes` as rows and
//! `col_modes` as columns. Blocks sharing the same row flux form one
//! independent matrix group, which is decomposed on its own. The new bond
//! index carries one sector per surviving group, labelled by that row flux:
//! the left factor always has zero total charge and the right factor carries
//! the full charge of the input.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use ndarray::{ArrayD, Dimension, IxDyn};
use rayon::prelude::*;

use super::dense::matricize;
use super::{BlockKey, BlockTensor, Format};
use crate::error::{structural, Error, Result};
use crate::perf::{self, FlopClass};
use crate::qn::{fuse, Charge, Direction, QNIndex, Sector};

/// Singular values per bond sector, each list sorted descending.
pub type BondSpectrum = Vec<(Charge, Vec<f64>)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffMode {
    /// Discard every singular value below `cutoff`.
    Absolute,
    /// Discard the smallest singular values while their summed squares stay
    /// within `cutoff` times the total squared norm.
    RelativeWeight,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation {
    pub max_rank: usize,
    pub cutoff: f64,
    pub mode: CutoffMode,
}

impl Truncation {
    pub fn absolute(max_rank: usize, cutoff: f64) -> Self {
        Truncation { max_rank, cutoff, mode: CutoffMode::Absolute }
    }

    pub fn relative_weight(max_rank: usize, cutoff: f64) -> Self {
        Truncation { max_rank, cutoff, mode: CutoffMode::RelativeWeight }
    }

    pub fn none() -> Self {
        Truncation::absolute(usize::MAX, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Modes `(row modes..., bond)`, bond outward, zero total charge.
    pub u: BlockTensor,
    pub s: BondSpectrum,
    /// Modes `(bond, col modes...)`, bond inward.
    pub v: BlockTensor,
    /// Sum of squares of the discarded singular values.
    pub trunc_error: f64,
}

#[derive(Clone, Debug)]
pub struct QrResult {
    pub q: BlockTensor,
    pub r: BlockTensor,
}

struct Slot {
    key: BlockKey,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

struct Group {
    rows: Vec<Slot>,
    cols: Vec<Slot>,
    mat: DMatrix<f64>,
}

fn slots(keys: BTreeSet<BlockKey>, t: &BlockTensor, modes: &[usize]) -> Vec<Slot> {
    let mut offset = 0;
    keys.into_iter()
        .map(|key| {
            let dims: Vec<usize> =
                modes.iter().zip(&key).map(|(&m, q)| t.index(m).sector_dim(q).expect("stored charge")).collect();
            let len = dims.iter().product();
            let s = Slot { key, dims, offset, len };
            offset += len;
            s
        })
        .collect()
}

fn check_modes(t: &BlockTensor, rows: &[usize], cols: &[usize]) -> Result<()> {
    let mut seen = vec![false; t.order()];
    for &m in rows.iter().chain(cols) {
        if m >= t.order() || seen[m] {
            return Err(structural(format!(
                "row modes {rows:?} and col modes {cols:?} must partition {} modes",
                t.order()
            )));
        }
        seen[m] = true;
    }
    if seen.iter().any(|s| !s) || rows.is_empty() || cols.is_empty() {
        return Err(structural(format!(
            "row modes {rows:?} and col modes {cols:?} must partition {} modes",
            t.order()
        )));
    }
    Ok(())
}

fn build_groups(t: &BlockTensor, rows: &[usize], cols: &[usize]) -> Result<BTreeMap<Charge, Group>> {
    check_modes(t, rows, cols)?;
    let len = t.total_charge().len();
    let list = t.convert(Format::List);
    let mut keysets: BTreeMap<Charge, (BTreeSet<BlockKey>, BTreeSet<BlockKey>)> = BTreeMap::new();
    let mut members: Vec<(Charge, BlockKey, BlockKey, BlockKey)> = Vec::new();
    for key in list.block_keys() {
        let mut flux = Charge::zero(len);
        for &m in rows {
            flux = fuse(&flux, &t.index(m).signed(&key[m]))?;
        }
        let rk: BlockKey = rows.iter().map(|&m| key[m].clone()).collect();
        let ck: BlockKey = cols.iter().map(|&m| key[m].clone()).collect();
        let entry = keysets.entry(flux.clone()).or_default();
        entry.0.insert(rk.clone());
        entry.1.insert(ck.clone());
        members.push((flux, rk, ck, key));
    }
    let mut groups: BTreeMap<Charge, Group> = keysets
        .into_iter()
        .map(|(g, (rk, ck))| {
            let rows_ = slots(rk, t, rows);
            let cols_ = slots(ck, t, cols);
            let nr = rows_.iter().map(|s| s.len).sum();
            let nc = cols_.iter().map(|s| s.len).sum();
            (g, Group { rows: rows_, cols: cols_, mat: DMatrix::zeros(nr, nc) })
        })
        .collect();
    for (g, rk, ck, key) in members {
        let group = groups.get_mut(&g).expect("group exists");
        let r = group.rows.iter().find(|s| s.key == rk).expect("row slot");
        let c = group.cols.iter().find(|s| s.key == ck).expect("col slot");
        let (ro, co) = (r.offset, c.offset);
        let data = list.block(&key).expect("stored");
        let m = matricize(data.view(), rows, cols);
        for ((i, j), &v) in m.indexed_iter() {
            group.mat[(ro + i, co + j)] = v;
        }
    }
    Ok(groups)
}

fn svd_flops(r: usize, c: usize) -> u64 {
    let (m, n) = (r.max(c) as u64, r.min(c) as u64);
    4 * m * n * n + 8 * n * n * n
}

fn qr_flops(r: usize, c: usize) -> u64 {
    let (m, n) = (r.max(c) as u64, r.min(c) as u64);
    2 * m * n * n - (2 * n * n * n) / 3
}

fn bond_index(kept: &[(Charge, usize)], direction: Direction) -> Result<QNIndex> {
    QNIndex::new(kept.iter().map(|(q, d)| Sector::new(q.clone(), *d)).collect(), direction)
}

/// Emits the left factor blocks `(row key..., g)` and right factor blocks
/// `(g, col key...)` of one group.
#[allow(clippy::too_many_arguments)]
fn factor_blocks(
    g: &Charge,
    group: &Group,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    rank: usize,
    u_blocks: &mut Vec<(BlockKey, ArrayD<f64>)>,
    v_blocks: &mut Vec<(BlockKey, ArrayD<f64>)>,
) {
    for slot in &group.rows {
        let mut shape = slot.dims.clone();
        shape.push(rank);
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
            let ix = ix.slice();
            let mut flat = 0;
            for (d, &i) in slot.dims.iter().zip(ix) {
                flat = flat * d + i;
            }
            left[(slot.offset + flat, ix[ix.len() - 1])]
        });
        let mut key = slot.key.clone();
        key.push(g.clone());
        u_blocks.push((key, data));
    }
    for slot in &group.cols {
        let mut shape = vec![rank];
        shape.extend(&slot.dims);
        let data = ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
            let ix = ix.slice();
            let mut flat = 0;
            for (d, &i) in slot.dims.iter().zip(&ix[1..]) {
                flat = flat * d + i;
            }
            right[(ix[0], slot.offset + flat)]
        });
        let mut key = vec![g.clone()];
        key.extend(slot.key.iter().cloned());
        v_blocks.push((key, data));
    }
}

fn factor_indices(t: &BlockTensor, rows: &[usize], cols: &[usize], bond: &QNIndex) -> (Vec<QNIndex>, Vec<QNIndex>) {
    let mut ui: Vec<QNIndex> = rows.iter().map(|&m| t.index(m).clone()).collect();
    ui.push(bond.clone());
    let mut vi = vec![bond.dual()];
    vi.extend(cols.iter().map(|&m| t.index(m).clone()));
    (ui, vi)
}

/// Truncated block SVD. Singular values of all groups are pooled, sorted
/// descending (ties keep the lexicographically smaller bond charge first)
/// and kept up to `trunc.max_rank` subject to the cutoff rule.
pub fn block_svd(t: &BlockTensor, rows: &[usize], cols: &[usize], trunc: Truncation) -> Result<SvdResult> {
    let groups = build_groups(t, rows, cols)?;
    let entries: Vec<(&Charge, &Group)> = groups.iter().collect();
    perf::record(FlopClass::Svd, entries.iter().map(|(_, g)| svd_flops(g.mat.nrows(), g.mat.ncols())).sum());
    // (U, sigma sorted descending, V^T) per group.
    let decomposed: Vec<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> = entries
        .par_iter()
        .map(|(_, g)| {
            let (nr, nc) = g.mat.shape();
            let m = faer::Mat::<f64>::from_fn(nr, nc, |r, c| g.mat[(r, c)]);
            let svd = m.thin_svd().map_err(|e| Error::Resource(format!("SVD did not converge: {e:?}")))?;
            let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
            let mut order: Vec<usize> = (0..s.nrows()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            let sigma: Vec<f64> = order.iter().map(|&i| s[i]).collect();
            let u = DMatrix::from_fn(nr, order.len(), |r, c| u[(r, order[c])]);
            let vt = DMatrix::from_fn(order.len(), nc, |r, c| v[(c, order[r])]);
            Ok((u, sigma, vt))
        })
        .collect::<Result<_>>()?;

    let mut pool: Vec<(f64, usize, usize)> = decomposed
        .iter()
        .enumerate()
        .flat_map(|(gi, (_, s, _))| s.iter().enumerate().map(move |(i, &v)| (v, gi, i)))
        .collect();
    // Groups are enumerated in charge order, so the group position breaks ties.
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let keep = match trunc.mode {
        CutoffMode::Absolute => pool.iter().take(trunc.max_rank).take_while(|(v, _, _)| *v >= trunc.cutoff).count(),
        CutoffMode::RelativeWeight => {
            let total: f64 = pool.iter().map(|p| p.0 * p.0).sum();
            let mut discarded = 0.0;
            let mut n = pool.len();
            while n > 0 {
                let w = pool[n - 1].0 * pool[n - 1].0;
                if discarded + w > trunc.cutoff * total {
                    break;
                }
                discarded += w;
                n -= 1;
            }
            n.min(trunc.max_rank)
        }
    };
    if keep == 0 {
        return Err(Error::DegenerateTruncation);
    }
    let trunc_error = pool[keep..].iter().fold(0.0, |acc, p| acc + p.0 * p.0);
    let mut kept_per_group = vec![0usize; decomposed.len()];
    for p in &pool[..keep] {
        kept_per_group[p.1] += 1;
    }

    let mut kept = Vec::new();
    let mut spectrum = Vec::new();
    let mut u_blocks = Vec::new();
    let mut v_blocks = Vec::new();
    for (gi, ((g, group), (u, sigma, vt))) in entries.iter().zip(&decomposed).enumerate() {
        let rank = kept_per_group[gi];
        if rank == 0 {
            continue;
        }
        kept.push(((*g).clone(), rank));
        spectrum.push(((*g).clone(), sigma[..rank].to_vec()));
        factor_blocks(g, group, u, vt, rank, &mut u_blocks, &mut v_blocks);
    }
    let bond = bond_index(&kept, Direction::Outward)?;
    let (ui, vi) = factor_indices(t, rows, cols, &bond);
    let len = t.total_charge().len();
    let u = BlockTensor::from_blocks(ui, Charge::zero(len), u_blocks)?.convert(t.format());
    let v = BlockTensor::from_blocks(vi, t.total_charge().clone(), v_blocks)?.convert(t.format());
    Ok(SvdResult { u, s: spectrum, v, trunc_error })
}

/// Thin block QR with the diagonal of every R block made nonnegative.
pub fn block_qr(t: &BlockTensor, rows: &[usize], cols: &[usize]) -> Result<QrResult> {
    let groups = build_groups(t, rows, cols)?;
    let entries: Vec<(&Charge, &Group)> = groups.iter().collect();
    perf::record(FlopClass::Qr, entries.iter().map(|(_, g)| qr_flops(g.mat.nrows(), g.mat.ncols())).sum());
    let decomposed: Vec<(DMatrix<f64>, DMatrix<f64>)> = entries
        .par_iter()
        .map(|(_, g)| {
            let qr = g.mat.clone().qr();
            let mut q = qr.q();
            let mut r = qr.r();
            for i in 0..r.nrows() {
                if r[(i, i)] < 0.0 {
                    r.row_mut(i).neg_mut();
                    q.column_mut(i).neg_mut();
                }
            }
            (q, r)
        })
        .collect();
    let mut kept = Vec::new();
    let mut q_blocks = Vec::new();
    let mut r_blocks = Vec::new();
    for ((g, group), (q, r)) in entries.iter().zip(&decomposed) {
        let rank = q.ncols();
        kept.push(((*g).clone(), rank));
        factor_blocks(g, group, q, r, rank, &mut q_blocks, &mut r_blocks);
    }
    let bond = bond_index(&kept, Direction::Outward)?;
    let (qi, ri) = factor_indices(t, rows, cols, &bond);
    let len = t.total_charge().len();
    let q = BlockTensor::from_blocks(qi, Charge::zero(len), q_blocks)?.convert(t.format());
    let r = BlockTensor::from_blocks(ri, t.total_charge().clone(), r_blocks)?.convert(t.format());
    Ok(QrResult { q, r })
}
