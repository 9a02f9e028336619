//! Dense reference implementations and random generators shared by the
//! integration tests. Nothing here calls into the block-sparse kernels.
#![allow(dead_code)]

use dmrg_core::btensor::{BlockTensor, ContractionSpec, Format};
use dmrg_core::qn::{Charge, Direction, QNIndex, Sector};
use ndarray::{Array2, ArrayD, Dimension, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

pub const FORMATS: [Format; 3] = [Format::List, Format::SparseDense, Format::SparseSparse];

/// Places every stored block at its sector offsets.
pub fn dense(t: &BlockTensor) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&t.shape()));
    for b in t.blocks() {
        let offs: Vec<usize> =
            b.charges.iter().enumerate().map(|(m, q)| t.index(m).sector_offset(q).unwrap()).collect();
        for (ix, &v) in b.data.indexed_iter() {
            let pos: Vec<usize> = ix.slice().iter().zip(&offs).map(|(i, o)| i + o).collect();
            out[IxDyn(&pos)] = v;
        }
    }
    out
}

/// Plain tensordot: free modes of `a`, then free modes of `b`, then the
/// optional output permutation.
pub fn einsum(a: &ArrayD<f64>, b: &ArrayD<f64>, spec: &ContractionSpec) -> ArrayD<f64> {
    let ca: Vec<usize> = spec.pairs.iter().map(|p| p.0).collect();
    let cb: Vec<usize> = spec.pairs.iter().map(|p| p.1).collect();
    let fa: Vec<usize> = (0..a.ndim()).filter(|m| !ca.contains(m)).collect();
    let fb: Vec<usize> = (0..b.ndim()).filter(|m| !cb.contains(m)).collect();
    let dim = |x: &ArrayD<f64>, ms: &[usize]| ms.iter().map(|&m| x.shape()[m]).product::<usize>();
    let (rows, inner, cols) = (dim(a, &fa), dim(a, &ca), dim(b, &fb));
    let pa: Vec<usize> = fa.iter().chain(&ca).copied().collect();
    let pb: Vec<usize> = cb.iter().chain(&fb).copied().collect();
    let am = a.view().permuted_axes(IxDyn(&pa)).as_standard_layout().into_owned();
    let bm = b.view().permuted_axes(IxDyn(&pb)).as_standard_layout().into_owned();
    let am = am.into_shape_with_order((rows, inner)).unwrap();
    let bm = bm.into_shape_with_order((inner, cols)).unwrap();
    let mut c = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        for k in 0..inner {
            let x = am[[i, k]];
            if x != 0.0 {
                for j in 0..cols {
                    c[[i, j]] += x * bm[[k, j]];
                }
            }
        }
    }
    let mut shape: Vec<usize> = fa.iter().map(|&m| a.shape()[m]).collect();
    shape.extend(fb.iter().map(|&m| b.shape()[m]));
    let out = c.into_shape_with_order(IxDyn(&shape)).unwrap();
    match &spec.output_order {
        Some(o) => out.permuted_axes(IxDyn(o)).as_standard_layout().into_owned(),
        None => out,
    }
}

pub fn max_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn charge<R: Rng>(rng: &mut R, len: usize) -> Charge {
    let v: Vec<i32> = (0..len).map(|_| rng.random_range(-2..=2)).collect();
    Charge::new(&v)
}

pub fn random_index<R: Rng>(rng: &mut R, len: usize, sectors: usize, max_dim: usize) -> QNIndex {
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < sectors {
        seen.insert(charge(rng, len));
    }
    let dir = if rng.random::<bool>() { Direction::Inward } else { Direction::Outward };
    let s = seen.into_iter().map(|q| Sector::new(q, rng.random_range(1..=max_dim))).collect();
    QNIndex::new(s, dir).unwrap()
}

/// A total charge reached by some sector combination, so the tensor has at
/// least one block.
pub fn reachable_total<R: Rng>(rng: &mut R, indices: &[QNIndex]) -> Charge {
    let len = indices[0].sectors()[0].charge.len();
    let mut acc = Charge::zero(len);
    for idx in indices {
        let s = &idx.sectors()[rng.random_range(0..idx.num_sectors())];
        acc = dmrg_core::qn::fuse(&acc, &idx.signed(&s.charge)).unwrap();
    }
    acc
}

pub fn random_tensor<R: Rng>(rng: &mut R, indices: Vec<QNIndex>, format: Format) -> BlockTensor {
    let total = reachable_total(rng, &indices);
    BlockTensor::random(indices, total, format, rng).unwrap()
}

/// Random contractible pair with dense sizes at most `max_dense`.
pub fn random_pair<R: Rng>(rng: &mut R, max_dense: usize) -> (BlockTensor, BlockTensor, ContractionSpec) {
    loop {
        let len = rng.random_range(1..=2);
        let (oa, ob) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let nc = rng.random_range(1..=oa.min(ob));
        let ia: Vec<QNIndex> = (0..oa)
            .map(|_| {
                let k = rng.random_range(1..=4);
                random_index(rng, len, k, 4)
            })
            .collect();
        let mut a_modes: Vec<usize> = (0..oa).collect();
        a_modes.shuffle(rng);
        let mut b_modes: Vec<usize> = (0..ob).collect();
        b_modes.shuffle(rng);
        let pairs: Vec<(usize, usize)> = a_modes[..nc].iter().zip(&b_modes[..nc]).map(|(&x, &y)| (x, y)).collect();
        let mut ib: Vec<Option<QNIndex>> = vec![None; ob];
        for &(x, y) in &pairs {
            ib[y] = Some(ia[x].dual());
        }
        let ib: Vec<QNIndex> = ib
            .into_iter()
            .map(|i| {
                i.unwrap_or_else(|| {
                    let k = rng.random_range(1..=4);
                    random_index(rng, len, k, 4)
                })
            })
            .collect();
        let size = |v: &[QNIndex]| v.iter().map(QNIndex::dim).product::<usize>();
        let free = oa + ob - 2 * nc;
        let out: usize = ia
            .iter()
            .enumerate()
            .filter(|(m, _)| !pairs.iter().any(|p| p.0 == *m))
            .map(|x| x.1.dim())
            .product::<usize>()
            * ib.iter()
                .enumerate()
                .filter(|(m, _)| !pairs.iter().any(|p| p.1 == *m))
                .map(|x| x.1.dim())
                .product::<usize>();
        if size(&ia) > max_dense || size(&ib) > max_dense || out > max_dense {
            continue;
        }
        let fa = FORMATS[rng.random_range(0..3)];
        let fb = FORMATS[rng.random_range(0..3)];
        let a = random_tensor(rng, ia, fa);
        let b = random_tensor(rng, ib, fb);
        let mut spec = ContractionSpec::new(pairs);
        if free > 1 && rng.random::<bool>() {
            let mut o: Vec<usize> = (0..free).collect();
            o.shuffle(rng);
            spec = spec.with_output_order(o);
        }
        return (a, b, spec);
    }
}

/// Lowest eigenvalue of a dense symmetric matrix.
pub fn dense_lowest(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let f = faer::Mat::<f64>::from_fn(n, n, |i, j| m[[i, j]]);
    let ev = f.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
    ev.into_iter().fold(f64::INFINITY, f64::min)
}

/// Matricizes a dense tensor as rows `rows`, columns `cols`.
pub fn matrix(t: &ArrayD<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    let perm: Vec<usize> = rows.iter().chain(cols).copied().collect();
    let r: usize = rows.iter().map(|&m| t.shape()[m]).product();
    let c: usize = cols.iter().map(|&m| t.shape()[m]).product();
    t.view().permuted_axes(IxDyn(&perm)).as_standard_layout().into_owned().into_shape_with_order((r, c)).unwrap()
}

/// Least-squares slope of y against x.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
