//! Exact diagonalization and densification references.
//!
//! The exact-diagonalization path works on occupation bit strings and never
//! touches the local operator matrices or the MPO code: spin site `j` is bit
//! `j` (set = up); electron site `j` uses bit `2j` for up and `2j+1` for
//! down, with creation operators ordered by bit position. A fermion
//! operator on bit `m` picks up `(-1)^(occupied bits below m)`.
//!
//! Dense orderings put site 0 in the most significant digit, matching
//! [`densify_mps`] and [`densify_mpo`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::btensor::BlockTensor;
use crate::error::{argument, Error, Result};
use crate::models::{LocalOp, ModelSpec, OpTerm, SiteKind};
use crate::netops::{Mpo, Mps};
use crate::qn::Charge;

const MAX_DENSE: usize = 10_000_000;
const MAX_MPS: usize = 2_000_000;
const MAX_SECTOR: usize = 2_000_000;

fn resource(msg: String) -> Error {
    Error::Resource(msg)
}

/// Dense array of a block tensor.
pub fn densify(t: &BlockTensor) -> Result<ArrayD<f64>> {
    let size = t.shape().iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match size {
        Some(s) if s <= MAX_DENSE => Ok(t.to_dense()),
        _ => Err(resource(format!("dense size of shape {:?} exceeds {MAX_DENSE}", t.shape()))),
    }
}

/// Full state vector of an MPS.
pub fn densify_mps(psi: &Mps) -> Result<Array1<f64>> {
    let mut acc = Array2::from_elem((1, 1), 1.0);
    for t in psi.sites() {
        let dense = densify(t)?;
        let (l, d, r) = (dense.shape()[0], dense.shape()[1], dense.shape()[2]);
        if acc.nrows().saturating_mul(d) > MAX_MPS {
            return Err(resource(format!("state vector exceeds {MAX_MPS} entries")));
        }
        let site = dense.into_shape_with_order((l, d * r)).expect("site reshape");
        let next = acc.dot(&site);
        let rows = acc.nrows() * d;
        acc = next.into_shape_with_order((rows, r)).expect("state reshape");
    }
    Ok(acc.index_axis(Axis(1), 0).to_owned())
}

/// Full matrix `<sigma|H|nu>` of an MPO.
pub fn densify_mpo(h: &Mpo) -> Result<Array2<f64>> {
    let mut acc = ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0);
    for w in h.sites() {
        let dense = densify(w)?;
        let (k, d, kr) = (dense.shape()[0], dense.shape()[1], dense.shape()[3]);
        let (r, c) = (acc.shape()[0], acc.shape()[1]);
        if (r * d).saturating_mul(c * d) > MAX_DENSE {
            return Err(resource(format!("operator matrix exceeds {MAX_DENSE} entries")));
        }
        let a = acc.into_shape_with_order((r * c, k)).expect("acc reshape");
        let b = dense.into_shape_with_order((k, d * d * kr)).expect("site reshape");
        let prod = a.dot(&b).into_shape_with_order(IxDyn(&[r, c, d, d, kr])).expect("product reshape");
        acc = prod
            .permuted_axes(IxDyn(&[0, 2, 1, 3, 4]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[r * d, c * d, kr]))
            .expect("merge reshape");
    }
    let (r, c) = (acc.shape()[0], acc.shape()[1]);
    Ok(acc.into_shape_with_order((r, c)).expect("final reshape"))
}

fn kind_of(sector: &Charge) -> Result<SiteKind> {
    match sector.len() {
        1 => Ok(SiteKind::Spin),
        2 => Ok(SiteKind::Electron),
        l => Err(argument(format!("sector charge of length {l} matches no model"))),
    }
}

fn mode(site: usize, up: bool) -> u32 {
    (2 * site + usize::from(!up)) as u32
}

fn sign_below(bits: u64, m: u32) -> f64 {
    if (bits & ((1u64 << m) - 1)).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn create(bits: u64, m: u32) -> Option<(u64, f64)> {
    (bits >> m & 1 == 0).then(|| (bits | 1 << m, sign_below(bits, m)))
}

fn annihilate(bits: u64, m: u32) -> Option<(u64, f64)> {
    (bits >> m & 1 == 1).then(|| (bits & !(1 << m), sign_below(bits, m)))
}

fn occupied(bits: u64, m: u32) -> bool {
    bits >> m & 1 == 1
}

/// Applies one local operator to a basis state.
fn apply_op(kind: SiteKind, site: usize, op: LocalOp, bits: u64) -> Result<Option<(u64, f64)>> {
    use LocalOp::*;
    let unsupported = || argument(format!("operator {op:?} has no exact-diagonalization rule for {kind:?}"));
    Ok(match kind {
        SiteKind::Spin => {
            let b = site as u32;
            let up = occupied(bits, b);
            match op {
                Id => Some((bits, 1.0)),
                Sz => Some((bits, if up { 0.5 } else { -0.5 })),
                SPlus => (!up).then(|| (bits | 1 << b, 1.0)),
                SMinus => up.then(|| (bits & !(1 << b), 1.0)),
                _ => return Err(unsupported()),
            }
        }
        SiteKind::Electron => {
            let (u, d) = (mode(site, true), mode(site, false));
            let (nu, nd) = (occupied(bits, u), occupied(bits, d));
            let diag = |v: f64| Some((bits, v));
            match op {
                Id => diag(1.0),
                CdagUp => create(bits, u),
                CdagDn => create(bits, d),
                CUp => annihilate(bits, u),
                CDn => annihilate(bits, d),
                NUp => diag(f64::from(u8::from(nu))),
                NDn => diag(f64::from(u8::from(nd))),
                NUpDn => diag(f64::from(u8::from(nu && nd))),
                F => diag(if nu ^ nd { -1.0 } else { 1.0 }),
                Sz => diag(0.5 * (f64::from(u8::from(nu)) - f64::from(u8::from(nd)))),
                // c+_up c_dn and c+_dn c_up
                SPlus => annihilate(bits, d).and_then(|(b, s)| create(b, u).map(|(b, t)| (b, s * t))),
                SMinus => annihilate(bits, u).and_then(|(b, s)| create(b, d).map(|(b, t)| (b, s * t))),
            }
        }
    })
}

/// `term |bits>` as `(bits', amplitude)` (rightmost factor acts first).
fn apply_term(kind: SiteKind, term: &OpTerm, bits: u64) -> Result<Option<(u64, f64)>> {
    let mut state = bits;
    let mut amp = term.coefficient;
    for &(site, op) in term.factors.iter().rev() {
        match apply_op(kind, site, op, state)? {
            Some((b, a)) => {
                state = b;
                amp *= a;
            }
            None => return Ok(None),
        }
    }
    Ok(Some((state, amp)))
}

fn check_sites(terms: &[OpTerm], n: usize, kind: SiteKind) -> Result<()> {
    let limit = match kind {
        SiteKind::Spin => 64,
        SiteKind::Electron => 32,
    };
    if n > limit {
        return Err(resource(format!("{n} sites exceed the bit-string limit of {limit}")));
    }
    for t in terms {
        if t.factors.iter().any(|f| f.0 >= n) {
            return Err(argument(format!("term {:?} outside {n} sites", t.factors)));
        }
    }
    Ok(())
}

/// Basis states of a charge sector in ascending bit order.
pub fn sector_basis(n: usize, sector: &Charge) -> Result<Vec<u64>> {
    let kind = kind_of(sector)?;
    let masks = |count: i32| -> Vec<u64> {
        if count < 0 || count as usize > n {
            return Vec::new();
        }
        (0u64..1u64 << n).filter(|m| m.count_ones() as i32 == count).collect()
    };
    let states: Vec<u64> = match kind {
        SiteKind::Spin => {
            let sz2 = sector.values()[0];
            if (sz2 + n as i32) % 2 != 0 {
                return Ok(Vec::new());
            }
            masks((sz2 + n as i32) / 2)
        }
        SiteKind::Electron => {
            let (ne, sz2) = (sector.values()[0], sector.values()[1]);
            if (ne + sz2) % 2 != 0 {
                return Ok(Vec::new());
            }
            let (ups, dns) = (masks((ne + sz2) / 2), masks((ne - sz2) / 2));
            if ups.len().saturating_mul(dns.len()) > MAX_SECTOR {
                return Err(resource(format!("sector dimension {} exceeds {MAX_SECTOR}", ups.len() * dns.len())));
            }
            let spread = |m: u64, shift: u32| -> u64 {
                (0..n).filter(|&j| m >> j & 1 == 1).map(|j| 1u64 << (2 * j as u32 + shift)).sum()
            };
            let mut v: Vec<u64> =
                ups.iter().flat_map(|&u| dns.iter().map(move |&d| spread(u, 0) | spread(d, 1))).collect();
            v.sort_unstable();
            v
        }
    };
    if states.len() > MAX_SECTOR {
        return Err(resource(format!("sector dimension {} exceeds {MAX_SECTOR}", states.len())));
    }
    Ok(states)
}

/// Sparse Hamiltonian restricted to one sector, one row per basis state.
pub struct SectorHamiltonian {
    pub basis: Vec<u64>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SectorHamiltonian {
    pub fn new(terms: &[OpTerm], n: usize, sector: &Charge) -> Result<Self> {
        let kind = kind_of(sector)?;
        check_sites(terms, n, kind)?;
        let basis = sector_basis(n, sector)?;
        let lookup: HashMap<u64, usize> = basis.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let rows = basis
            .par_iter()
            .map(|&b| -> Result<Vec<(usize, f64)>> {
                let mut out: BTreeMap<usize, f64> = BTreeMap::new();
                for t in terms {
                    if let Some((b2, amp)) = apply_term(kind, t, b)? {
                        let col = *lookup
                            .get(&b2)
                            .ok_or_else(|| argument(format!("term {:?} leaves the charge sector", t.factors)))?;
                        *out.entry(col).or_insert(0.0) += amp;
                    }
                }
                Ok(out.into_iter().filter(|e| e.1 != 0.0).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        // Rows were filled with H|b>, i.e. columns; transpose explicitly.
        let mut t_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); basis.len()];
        for (col, entries) in rows.into_iter().enumerate() {
            for (row, v) in entries {
                t_rows[row].push((col, v));
            }
        }
        Ok(SectorHamiltonian { basis, rows: t_rows })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows.par_iter().map(|row| row.iter().map(|&(c, v)| v * x[c]).sum()).collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.dim(), self.dim()));
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[[r, c]] = v;
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct EdResult {
    pub energy: f64,
    /// Unit-norm ground state over [`EdResult::basis`].
    pub vector: Vec<f64>,
    pub basis: Vec<u64>,
    pub lanczos_steps: usize,
}

/// Lowest eigenpair of the Hamiltonian restricted to a charge sector.
pub fn ed_ground_state(terms: &[OpTerm], n: usize, sector: &Charge) -> Result<EdResult> {
    let h = SectorHamiltonian::new(terms, n, sector)?;
    if h.dim() == 0 {
        return Err(argument(format!("sector {sector} is empty on {n} sites")));
    }
    let (energy, vector, steps) = lanczos(|x| h.matvec(x), h.dim(), 7);
    Ok(EdResult { energy, vector, basis: h.basis, lanczos_steps: steps })
}

pub fn ed_for_spec(spec: &ModelSpec) -> Result<EdResult> {
    spec.validate()?;
    ed_ground_state(&spec.terms()?, spec.n_sites(), &spec.target_charge())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lowest(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i + 1];
            t[(i + 1, i)] = beta[i + 1];
        }
    }
    let eig = SymmetricEigen::new(t);
    let i = (0..k).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
    (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())
}

/// Plain Lanczos without reorthogonalization or restarts. The first pass
/// builds the tridiagonal matrix; the second regenerates the Krylov vectors
/// to assemble the eigenvector. Returns `(eigenvalue, vector, steps)`.
pub fn lanczos<F: Fn(&[f64]) -> Vec<f64>>(apply: F, dim: usize, seed: u64) -> (f64, Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v0: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let n0 = dot(&v0, &v0).sqrt();
    v0.iter_mut().for_each(|x| *x /= n0);
    let max_steps = dim.min(2000);

    let step = |v: &[f64], prev: &[f64], beta: f64| -> (Vec<f64>, f64) {
        let mut w = apply(v);
        for (wi, pi) in w.iter_mut().zip(prev) {
            *wi -= beta * pi;
        }
        let a = dot(&w, v);
        for (wi, vi) in w.iter_mut().zip(v) {
            *wi -= a * vi;
        }
        (w, a)
    };

    let mut alpha = Vec::new();
    let mut beta = vec![0.0];
    let (mut prev, mut v) = (vec![0.0; dim], v0.clone());
    let mut last = f64::INFINITY;
    loop {
        let (w, a) = step(&v, &prev, *beta.last().unwrap());
        alpha.push(a);
        let b = dot(&w, &w).sqrt();
        let k = alpha.len();
        let (theta, s) = lowest(&alpha, &beta);
        let residual = b * s[k - 1].abs();
        let settled = (theta - last).abs() <= 1e-14 * theta.abs().max(1.0);
        last = theta;
        if k >= max_steps || b < 1e-12 || (residual < 1e-10 * theta.abs().max(1.0) && settled) {
            break;
        }
        beta.push(b);
        prev = std::mem::replace(&mut v, w.iter().map(|x| x / b).collect());
    }
    let (theta, s) = lowest(&alpha, &beta);

    let mut x = vec![0.0; dim];
    let (mut prev, mut v) = (vec![0.0; dim], v0);
    for (k, &sk) in s.iter().enumerate() {
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += sk * vi;
        }
        if k + 1 == s.len() {
            break;
        }
        let (w, _) = step(&v, &prev, beta[k]);
        let b = beta[k + 1];
        prev = std::mem::replace(&mut v, w.iter().map(|x| x / b).collect());
    }
    let nx = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|xi| *xi /= nx);
    (theta, x, alpha.len())
}

fn local_to_bits(kind: SiteKind, site: usize, sigma: usize) -> u64 {
    match kind {
        SiteKind::Spin => (sigma as u64) << site,
        SiteKind::Electron => {
            let up = u64::from(sigma >= 2) << mode(site, true);
            let dn = u64::from(sigma == 1 || sigma == 3) << mode(site, false);
            up | dn
        }
    }
}

/// Bit string of the dense basis position `pos` (site 0 most significant).
pub fn dense_position_to_bits(kind: SiteKind, n: usize, mut pos: usize) -> u64 {
    let d = match kind {
        SiteKind::Spin => 2,
        SiteKind::Electron => 4,
    };
    let mut bits = 0;
    for site in (0..n).rev() {
        bits |= local_to_bits(kind, site, pos % d);
        pos /= d;
    }
    bits
}

/// Full-space Hamiltonian in the dense ordering of [`densify_mpo`].
pub fn dense_hamiltonian(terms: &[OpTerm], kind: SiteKind, n: usize) -> Result<Array2<f64>> {
    check_sites(terms, n, kind)?;
    let d: usize = match kind {
        SiteKind::Spin => 2,
        SiteKind::Electron => 4,
    };
    let dim = d
        .checked_pow(n as u32)
        .filter(|&x| x * x <= MAX_DENSE)
        .ok_or_else(|| resource(format!("full Hilbert space of {n} sites is too large for a dense matrix")))?;
    let lookup: HashMap<u64, usize> = (0..dim).map(|p| (dense_position_to_bits(kind, n, p), p)).collect();
    let mut h = Array2::zeros((dim, dim));
    for col in 0..dim {
        let bits = dense_position_to_bits(kind, n, col);
        for t in terms {
            if let Some((b2, amp)) = apply_term(kind, t, bits)? {
                h[[lookup[&b2], col]] += amp;
            }
        }
    }
    Ok(h)
}

/// Stored reference energies keyed by [`ModelSpec::hash`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldenStore {
    #[serde(default)]
    pub entries: BTreeMap<String, GoldenEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub energy: f64,
    pub model: ModelSpec,
}

impl GoldenStore {
    /// Reads a store; a missing file is an empty store.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(GoldenStore::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn get(&self, spec: &ModelSpec) -> Option<f64> {
        self.entries.get(&spec.hash()).map(|e| e.energy)
    }

    pub fn insert(&mut self, spec: &ModelSpec, energy: f64) {
        self.entries.insert(spec.hash(), GoldenEntry { energy, model: spec.clone() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_heisenberg_j1j2, build_triangular_hubbard, Lattice};

    #[test]
    fn two_site_anchors() {
        let h = build_heisenberg_j1j2(&Lattice::chain(2).unwrap(), 1.0, 0.0).unwrap();
        let r = ed_ground_state(&h, 2, &Charge::new(&[0])).unwrap();
        assert!((r.energy + 0.75).abs() < 1e-12);

        let (t, u) = (1.0, 8.5);
        let h = build_triangular_hubbard(&Lattice::triangular_xc(2, 1).unwrap(), t, u).unwrap();
        let r = ed_ground_state(&h, 2, &Charge::new(&[2, 0])).unwrap();
        let exact = (u - f64::sqrt(u * u + 16.0 * t * t)) / 2.0;
        assert!((r.energy - exact).abs() < 1e-10);
    }

    #[test]
    fn sector_sizes() {
        assert_eq!(sector_basis(4, &Charge::new(&[0])).unwrap().len(), 6);
        assert_eq!(sector_basis(3, &Charge::new(&[3, 1])).unwrap().len(), 9);
        assert!(sector_basis(3, &Charge::new(&[0])).unwrap().is_empty());
    }

    #[test]
    fn open_chain_of_four() {
        let h = build_heisenberg_j1j2(&Lattice::chain(4).unwrap(), 1.0, 0.0).unwrap();
        let r = ed_ground_state(&h, 4, &Charge::new(&[0])).unwrap();
        let dense = dense_hamiltonian(&h, SiteKind::Spin, 4).unwrap();
        let eig = SymmetricEigen::new(DMatrix::from_fn(16, 16, |i, j| dense[[i, j]]));
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((r.energy - min).abs() < 1e-12);
    }
}
