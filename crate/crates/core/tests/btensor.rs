mod common;

use common::{dense, einsum, matrix, max_diff, random_index, random_pair, random_tensor, FORMATS};
use dmrg_core::btensor::{
    block_qr, block_svd, contract, read_snapshot, write_snapshot, BlockTensor, ContractionSpec, Format, Truncation,
};
use dmrg_core::qn::{fuse, Charge, Direction, QNIndex, Sector};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn contraction_matches_dense_einsum() {
    let mut r = rng(11);
    for _ in 0..300 {
        let (a, b, spec) = random_pair(&mut r, 20_000);
        let c = contract(&a, &b, &spec).unwrap();
        c.validate().unwrap();
        assert_eq!(c.total_charge(), &fuse(a.total_charge(), b.total_charge()).unwrap());
        let expect = einsum(&dense(&a), &dense(&b), &spec);
        assert!(max_diff(&dense(&c), &expect) <= 1e-12);
    }
}

#[test]
fn order_three_with_four_sectors_per_index() {
    let mut r = rng(3);
    for _ in 0..20 {
        let ia: Vec<QNIndex> = (0..3).map(|_| random_index(&mut r, 1, 4, 3)).collect();
        let ib = vec![ia[2].dual(), random_index(&mut r, 1, 4, 3), random_index(&mut r, 1, 4, 3)];
        for &f in &FORMATS {
            let a = random_tensor(&mut r, ia.clone(), f);
            let b = random_tensor(&mut r, ib.clone(), f);
            let spec = ContractionSpec::new(vec![(2, 0)]);
            let c = contract(&a, &b, &spec).unwrap();
            assert!(max_diff(&dense(&c), &einsum(&dense(&a), &dense(&b), &spec)) <= 1e-13);
        }
    }
}

#[test]
fn single_block_flops() {
    let q0 = Charge::new(&[0]);
    let idx = |d: usize, dir| QNIndex::new(vec![Sector::new(q0.clone(), d)], dir).unwrap();
    let a = BlockTensor::from_blocks(
        vec![idx(2, Direction::Inward), idx(3, Direction::Outward)],
        q0.clone(),
        [(vec![q0.clone(), q0.clone()], ArrayD::from_elem(IxDyn(&[2, 3]), 1.0))],
    )
    .unwrap();
    let b = BlockTensor::from_blocks(
        vec![idx(3, Direction::Inward), idx(4, Direction::Outward)],
        q0.clone(),
        [(vec![q0.clone(), q0.clone()], ArrayD::from_elem(IxDyn(&[3, 4]), 1.0))],
    )
    .unwrap();
    for &f in &FORMATS {
        let (c, flops) =
            dmrg_core::perf::counted_contract(&a.convert(f), &b.convert(f), &ContractionSpec::new(vec![(1, 0)]))
                .unwrap();
        assert_eq!(flops, 48);
        assert!(c.to_dense().iter().all(|&v| v == 3.0));
    }
}

#[test]
fn mismatched_modes_are_rejected() {
    let mut r = rng(5);
    let i = random_index(&mut r, 1, 2, 2);
    let a = random_tensor(&mut r, vec![i.clone(), i.dual()], Format::List);
    // Same direction on both sides.
    assert!(contract(&a, &a, &ContractionSpec::new(vec![(0, 0)])).is_err());
    assert!(contract(&a, &a, &ContractionSpec::new(vec![(2, 0)])).is_err());
    assert!(contract(&a, &a, &ContractionSpec::new(vec![(1, 0), (1, 1)])).is_err());
}

#[test]
fn add_and_inner_match_dense() {
    let mut r = rng(8);
    for _ in 0..50 {
        let idx: Vec<QNIndex> = (0..3).map(|_| random_index(&mut r, 1, 3, 3)).collect();
        let total = common::reachable_total(&mut r, &idx);
        for &f in &FORMATS {
            let a = BlockTensor::random(idx.clone(), total.clone(), f, &mut r).unwrap();
            let b = BlockTensor::random(idx.clone(), total.clone(), FORMATS[(f as usize + 1) % 3], &mut r).unwrap();
            let s = BlockTensor::add(&a, &b, 0.5, -2.0).unwrap();
            let expect = dense(&a) * 0.5 - dense(&b) * 2.0;
            assert!(max_diff(&dense(&s), &expect) <= 1e-14);
            let ip = BlockTensor::inner(&a, &b).unwrap();
            let dip: f64 = dense(&a).iter().zip(dense(&b).iter()).map(|(x, y)| x * y).sum();
            assert!((ip - dip).abs() <= 1e-12);
        }
    }
}

fn frobenius_sq(x: &ArrayD<f64>) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn svd_reconstruction_within_truncation_error() {
    let mut r = rng(21);
    for case in 0..60 {
        let idx: Vec<QNIndex> = (0..4).map(|_| random_index(&mut r, 1, 3, 3)).collect();
        let t = random_tensor(&mut r, idx, FORMATS[case % 3]);
        let max_rank = if case % 2 == 0 { usize::MAX } else { 1 + case % 5 };
        let Ok(svd) = block_svd(&t, &[0, 1], &[2, 3], Truncation::absolute(max_rank, 1e-12)) else {
            continue;
        };
        assert!(svd.trunc_error >= 0.0);
        let us = svd.u.scale_mode(2, &svd.s).unwrap();
        let back = contract(&us, &svd.v, &ContractionSpec::new(vec![(2, 0)])).unwrap();
        let err = frobenius_sq(&(dense(&back) - dense(&t)));
        assert!(err <= svd.trunc_error + 1e-12, "case {case}: {err} > {}", svd.trunc_error);
        for (_, s) in &svd.s {
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

#[test]
fn qr_single_block_matches_dense_qr() {
    let mut r = rng(2);
    let q0 = Charge::new(&[0]);
    let rows = QNIndex::new(vec![Sector::new(q0.clone(), 7)], Direction::Inward).unwrap();
    let cols = QNIndex::new(vec![Sector::new(q0.clone(), 4)], Direction::Outward).unwrap();
    let t = BlockTensor::random(vec![rows, cols], q0, Format::List, &mut r).unwrap();
    let qr = block_qr(&t, &[0], &[1]).unwrap();
    let m = dense(&t);
    let f = faer::Mat::<f64>::from_fn(7, 4, |i, j| m[[i, j]]);
    let fq = f.qr();
    let (rq, rr) = (fq.compute_thin_Q(), fq.thin_R());
    let (q, rd) = (dense(&qr.q), dense(&qr.r));
    for j in 0..4 {
        let sign = if rr[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..7 {
            assert!((q[[i, j]] - sign * rq[(i, j)]).abs() < 1e-12);
        }
        for k in j..4 {
            assert!((rd[[j, k]] - sign * rr[(j, k)]).abs() < 1e-12);
        }
    }
}

#[test]
fn qr_orthogonality_and_reconstruction() {
    let mut r = rng(4);
    for case in 0..40 {
        let idx: Vec<QNIndex> = (0..3).map(|_| random_index(&mut r, 1, 2, 4)).collect();
        let t = random_tensor(&mut r, idx, FORMATS[case % 3]);
        let qr = block_qr(&t, &[0, 1], &[2]).unwrap();
        let back = contract(&qr.q, &qr.r, &ContractionSpec::new(vec![(2, 0)])).unwrap();
        assert!(max_diff(&dense(&back), &dense(&t)) <= 1e-12);
        let g = contract(&qr.q, &qr.q.conj(), &ContractionSpec::new(vec![(0, 0), (1, 1)])).unwrap();
        let g = matrix(&dense(&g), &[0], &[1]);
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                assert!((g[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn snapshot_round_trip_every_format() {
    let mut r = rng(9);
    for &f in &FORMATS {
        let idx: Vec<QNIndex> = (0..3).map(|_| random_index(&mut r, 2, 3, 2)).collect();
        let t = random_tensor(&mut r, idx, f);
        let mut buf = Vec::new();
        write_snapshot(&t, &mut buf).unwrap();
        let back = read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.format(), f);
        assert_eq!(back.indices(), t.indices());
        assert_eq!(dense(&back), dense(&t));
        buf[0] ^= 0xff;
        assert!(read_snapshot(&mut buf.as_slice()).is_err());
    }
}
