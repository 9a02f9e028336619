//! Lattices, model Hamiltonians as operator strings, and MPO assembly.
//!
//! Sites are numbered column by column: site `(x, y)` of a cylinder with
//! circumference `W` is `x * W + y`, so column `x` is the contiguous range
//! `x*W .. (x+1)*W`. Only `y` wraps.
//!
//! Local bases follow the sorted sector order of the physical index:
//!
//! * spin: `0 = down (2Sz = -1)`, `1 = up (2Sz = +1)`;
//! * electron, charges `(N, 2Sz)`: `0 = empty`, `1 = down`, `2 = up`,
//!   `3 = up-down` with `|3> = c+_up c+_dn |0>`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::btensor::{block_qr, block_svd, contract, BlockTensor, ContractionSpec, Format, Truncation};
use crate::error::{argument, Result};
use crate::netops::{basis_index, Mpo};
use crate::qn::{fuse, Charge, Direction, QNIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatticeKind {
    SquareCylinder,
    TriangularCylinderXC,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Coupling {
    NN,
    NNN,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub kind: LatticeKind,
    pub length: usize,
    pub width: usize,
    /// `(i, j, tag)` with `i < j`, sorted, no duplicates.
    pub bonds: Vec<(usize, usize, Coupling)>,
}

impl Lattice {
    /// `length` columns of `width` sites, periodic around the width.
    /// Square cylinders carry nearest-neighbour and diagonal
    /// next-nearest-neighbour bonds.
    pub fn square_cylinder(length: usize, width: usize) -> Result<Self> {
        Self::build(LatticeKind::SquareCylinder, length, width)
    }

    /// Square cylinder plus one diagonal `(x, y)-(x+1, y+1)` per plaquette,
    /// all nearest neighbours.
    pub fn triangular_xc(length: usize, width: usize) -> Result<Self> {
        Self::build(LatticeKind::TriangularCylinderXC, length, width)
    }

    pub fn chain(n: usize) -> Result<Self> {
        Self::square_cylinder(n, 1)
    }

    fn build(kind: LatticeKind, length: usize, width: usize) -> Result<Self> {
        if length == 0 || width == 0 {
            return Err(argument(format!("lattice needs positive length and width (got {length}x{width})")));
        }
        let w = width;
        let site = |x: usize, y: usize| x * w + (y % w);
        let mut bonds = BTreeSet::new();
        let mut add = |a: usize, b: usize, tag: Coupling| {
            if a != b {
                bonds.insert((a.min(b), a.max(b), tag));
            }
        };
        for x in 0..length {
            for y in 0..w {
                add(site(x, y), site(x, y + 1), Coupling::NN);
                if x + 1 < length {
                    add(site(x, y), site(x + 1, y), Coupling::NN);
                    if w > 1 {
                        match kind {
                            LatticeKind::SquareCylinder => {
                                add(site(x, y), site(x + 1, y + 1), Coupling::NNN);
                                add(site(x, y), site(x + 1, y + w - 1), Coupling::NNN);
                            }
                            LatticeKind::TriangularCylinderXC => {
                                add(site(x, y), site(x + 1, y + 1), Coupling::NN);
                            }
                        }
                    }
                }
            }
        }
        // A pair tagged both ways (possible on very thin cylinders) keeps
        // the nearest-neighbour tag.
        let mut seen = BTreeSet::new();
        let bonds = bonds.into_iter().filter(|&(a, b, _)| seen.insert((a, b))).collect();
        Ok(Lattice { kind, length, width, bonds })
    }

    pub fn n_sites(&self) -> usize {
        self.length * self.width
    }

    pub fn site(&self, x: usize, y: usize) -> usize {
        x * self.width + y
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    pub fn column(&self, i: usize) -> usize {
        i / self.width
    }

    /// Sites in chain order.
    pub fn site_order(&self) -> Vec<usize> {
        (0..self.n_sites()).collect()
    }

    pub fn bonds_with(&self, tag: Coupling) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bonds.iter().filter(move |b| b.2 == tag).map(|b| (b.0, b.1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    Spin,
    Electron,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LocalOp {
    Id,
    Sz,
    SPlus,
    SMinus,
    CdagUp,
    CdagDn,
    CUp,
    CDn,
    NUp,
    NDn,
    NUpDn,
    /// Fermion parity `(-1)^n`.
    F,
}

impl LocalOp {
    pub fn is_fermionic(self) -> bool {
        matches!(self, LocalOp::CdagUp | LocalOp::CdagDn | LocalOp::CUp | LocalOp::CDn)
    }

    /// Matrix `<sigma|op|nu>` in the local basis, `None` if the operator
    /// does not act on this kind of site.
    pub fn matrix(self, kind: SiteKind) -> Option<Array2<f64>> {
        use LocalOp::*;
        let mut m;
        match kind {
            SiteKind::Spin => {
                m = Array2::zeros((2, 2));
                match self {
                    Id => m.diag_mut().fill(1.0),
                    Sz => {
                        m[[0, 0]] = -0.5;
                        m[[1, 1]] = 0.5;
                    }
                    SPlus => m[[1, 0]] = 1.0,
                    SMinus => m[[0, 1]] = 1.0,
                    _ => return None,
                }
            }
            SiteKind::Electron => {
                m = Array2::zeros((4, 4));
                match self {
                    Id => m.diag_mut().fill(1.0),
                    CdagUp => {
                        m[[2, 0]] = 1.0;
                        m[[3, 1]] = 1.0;
                    }
                    CdagDn => {
                        m[[1, 0]] = 1.0;
                        m[[3, 2]] = -1.0;
                    }
                    CUp => return CdagUp.matrix(kind).map(|a| a.reversed_axes()),
                    CDn => return CdagDn.matrix(kind).map(|a| a.reversed_axes()),
                    NUp => {
                        m[[2, 2]] = 1.0;
                        m[[3, 3]] = 1.0;
                    }
                    NDn => {
                        m[[1, 1]] = 1.0;
                        m[[3, 3]] = 1.0;
                    }
                    NUpDn => m[[3, 3]] = 1.0,
                    F => m.diag_mut().assign(&ndarray::arr1(&[1.0, -1.0, -1.0, 1.0])),
                    Sz => m.diag_mut().assign(&ndarray::arr1(&[0.0, -0.5, 0.5, 0.0])),
                    SPlus => m[[2, 1]] = 1.0,
                    SMinus => m[[1, 2]] = 1.0,
                }
            }
        }
        Some(m)
    }

    /// Charge added by the operator: `charge(sigma) - charge(nu)` for any
    /// nonzero element.
    pub fn charge(self, kind: SiteKind) -> Charge {
        use LocalOp::*;
        match kind {
            SiteKind::Spin => Charge::new(&[match self {
                SPlus => 2,
                SMinus => -2,
                _ => 0,
            }]),
            SiteKind::Electron => Charge::new(match self {
                CdagUp => &[1, 1],
                CdagDn => &[1, -1],
                CUp => &[-1, -1],
                CDn => &[-1, 1],
                SPlus => &[0, 2],
                SMinus => &[0, -2],
                _ => &[0, 0],
            }),
        }
    }
}

/// Physical index: spins `{(-1), (+1)}`, electrons
/// `{(0,0), (1,-1), (1,1), (2,0)}`, every sector of dimension one.
pub fn physical_index_for(kind: SiteKind) -> QNIndex {
    let charges: Vec<Charge> = match kind {
        SiteKind::Spin => vec![Charge::new(&[-1]), Charge::new(&[1])],
        SiteKind::Electron => {
            vec![Charge::new(&[0, 0]), Charge::new(&[1, -1]), Charge::new(&[1, 1]), Charge::new(&[2, 0])]
        }
    };
    basis_index(&charges).expect("distinct charges")
}

fn site_kind_of(phys: &QNIndex) -> Result<SiteKind> {
    [SiteKind::Spin, SiteKind::Electron]
        .into_iter()
        .find(|&k| &physical_index_for(k) == phys)
        .ok_or_else(|| argument("physical index is neither the spin nor the electron basis"))
}

/// `coefficient * prod_k op_k(site_k)` with the lowest site leftmost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpTerm {
    pub coefficient: f64,
    pub factors: Vec<(usize, LocalOp)>,
}

impl OpTerm {
    pub fn new(coefficient: f64, factors: Vec<(usize, LocalOp)>) -> Self {
        OpTerm { coefficient, factors }
    }

    pub fn fermion_parity(&self) -> usize {
        self.factors.iter().filter(|f| f.1.is_fermionic()).count() % 2
    }
}

fn spin_exchange(terms: &mut Vec<OpTerm>, i: usize, j: usize, j_coupling: f64) {
    terms.push(OpTerm::new(0.5 * j_coupling, vec![(i, LocalOp::SPlus), (j, LocalOp::SMinus)]));
    terms.push(OpTerm::new(0.5 * j_coupling, vec![(i, LocalOp::SMinus), (j, LocalOp::SPlus)]));
    terms.push(OpTerm::new(j_coupling, vec![(i, LocalOp::Sz), (j, LocalOp::Sz)]));
}

/// `J1 sum_NN S_i.S_j + J2 sum_NNN S_i.S_j` on a square cylinder.
pub fn build_heisenberg_j1j2(lattice: &Lattice, j1: f64, j2: f64) -> Result<Vec<OpTerm>> {
    if lattice.kind != LatticeKind::SquareCylinder {
        return Err(argument("the J1-J2 model needs a square cylinder"));
    }
    let mut terms = Vec::new();
    for &(i, j, tag) in &lattice.bonds {
        match tag {
            Coupling::NN => spin_exchange(&mut terms, i, j, j1),
            Coupling::NNN if j2 != 0.0 => spin_exchange(&mut terms, i, j, j2),
            Coupling::NNN => {}
        }
    }
    Ok(terms)
}

/// `-t sum_<ij>,s (c+_is c_js + h.c.) + U sum_i n_i,up n_i,dn` on a
/// triangular XC cylinder.
pub fn build_triangular_hubbard(lattice: &Lattice, t: f64, u: f64) -> Result<Vec<OpTerm>> {
    if lattice.kind != LatticeKind::TriangularCylinderXC {
        return Err(argument("the triangular Hubbard model needs a triangular XC cylinder"));
    }
    let mut terms = Vec::new();
    for &(i, j, _) in &lattice.bonds {
        for (cdag, c) in [(LocalOp::CdagUp, LocalOp::CUp), (LocalOp::CdagDn, LocalOp::CDn)] {
            // c+_i c_j, and c+_j c_i = -c_j c+_i written in site order.
            terms.push(OpTerm::new(-t, vec![(i, cdag), (j, c)]));
            terms.push(OpTerm::new(t, vec![(i, c), (j, cdag)]));
        }
    }
    for i in 0..lattice.n_sites() {
        terms.push(OpTerm::new(u, vec![(i, LocalOp::NUpDn)]));
    }
    Ok(terms)
}

/// `sum_i S^z_i` (spins) or `sum_i n_i` (electrons).
pub fn total_charge_terms(kind: SiteKind, n: usize) -> Vec<OpTerm> {
    (0..n)
        .flat_map(|i| match kind {
            SiteKind::Spin => vec![OpTerm::new(1.0, vec![(i, LocalOp::Sz)])],
            SiteKind::Electron => {
                vec![OpTerm::new(1.0, vec![(i, LocalOp::NUp)]), OpTerm::new(1.0, vec![(i, LocalOp::NDn)])]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum State {
    Ready,
    Done,
    /// Factors placed so far, each with the parity string already folded in.
    Prefix(Vec<(usize, LocalOp, bool)>),
}

struct Transition {
    from: usize,
    to: usize,
    op: Array2<f64>,
}

/// Operator on one site: `op`, right-multiplied by `F` when `with_f`.
fn dressed(op: LocalOp, with_f: bool, kind: SiteKind) -> Result<Array2<f64>> {
    let m = op.matrix(kind).ok_or_else(|| argument(format!("operator {op:?} does not act on {kind:?} sites")))?;
    Ok(if with_f { m.dot(&LocalOp::F.matrix(kind).expect("parity exists")) } else { m })
}

fn check_term(term: &OpTerm, n: usize, kind: SiteKind) -> Result<()> {
    if term.factors.is_empty() {
        return Err(argument("operator term without factors"));
    }
    for w in term.factors.windows(2) {
        if w[0].0 >= w[1].0 {
            return Err(argument(format!("term sites must be strictly increasing: {:?}", term.factors)));
        }
    }
    if term.factors.last().unwrap().0 >= n {
        return Err(argument(format!("term {:?} outside a chain of {n} sites", term.factors)));
    }
    if term.fermion_parity() == 1 {
        return Err(argument(format!("term {:?} has odd fermion parity", term.factors)));
    }
    let mut q = Charge::zero(physical_index_for(kind).charge_len().unwrap());
    for &(_, op) in &term.factors {
        op.matrix(kind).ok_or_else(|| argument(format!("operator {op:?} does not act on {kind:?} sites")))?;
        q = fuse(&q, &op.charge(kind))?;
    }
    if !q.is_zero() {
        return Err(argument(format!("term {:?} changes the conserved charge by {q}", term.factors)));
    }
    Ok(())
}

/// Finite-state-machine MPO of a sum of operator strings. Bond states are
/// "nothing placed yet", "term complete", and one state per distinct
/// partially placed operator string. Strings sharing a prefix share states.
pub fn fsm_mpo(terms: &[OpTerm], phys: &QNIndex, n: usize, format: Format) -> Result<Mpo> {
    let kind = site_kind_of(phys)?;
    if n == 0 {
        return Err(argument("MPO needs at least one site"));
    }
    let qlen = phys.charge_len().unwrap();
    let d = phys.dim();
    for t in terms {
        check_term(t, n, kind)?;
    }
    // Bond states per cut c (between site c and c+1), c = -1..n-1 shifted by one.
    let mut cuts: Vec<BTreeSet<State>> = vec![BTreeSet::new(); n + 1];
    cuts[0].insert(State::Ready);
    cuts[n].insert(State::Done);
    let dressed_factors = |t: &OpTerm| -> Vec<(usize, LocalOp, bool)> {
        let mut right = t.fermion_parity();
        t.factors
            .iter()
            .map(|&(s, op)| {
                if op.is_fermionic() {
                    right ^= 1;
                }
                (s, op, right == 1)
            })
            .collect()
    };
    for t in terms {
        let f = dressed_factors(t);
        let first = f[0].0;
        let last = f[f.len() - 1].0;
        for c in 0..=first {
            cuts[c].insert(State::Ready);
        }
        for c in last + 1..=n {
            cuts[c].insert(State::Done);
        }
        for k in 1..f.len() {
            let p = State::Prefix(f[..k].to_vec());
            for c in f[k - 1].0 + 1..=f[k].0 {
                cuts[c].insert(p.clone());
            }
        }
    }
    let positions: Vec<BTreeMap<State, usize>> =
        cuts.iter().map(|s| s.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect()).collect();

    let parity = |f: &[(usize, LocalOp, bool)]| f.iter().filter(|x| x.1.is_fermionic()).count() % 2 == 1;
    let id = LocalOp::Id.matrix(kind).unwrap();
    let fmat = LocalOp::F.matrix(kind).unwrap_or_else(|| id.clone());
    let mut site_transitions: Vec<Vec<Transition>> = (0..n).map(|_| Vec::new()).collect();
    for j in 0..n {
        let (l, r) = (&positions[j], &positions[j + 1]);
        for state in l.keys() {
            if let Some(&to) = r.get(state) {
                let op = match state {
                    State::Prefix(f) if parity(f) => fmat.clone(),
                    _ => id.clone(),
                };
                site_transitions[j].push(Transition { from: l[state], to, op });
            }
        }
    }
    for t in terms {
        let f = dressed_factors(t);
        for k in 0..f.len() {
            let (s, op, with_f) = f[k];
            let from = if k == 0 { State::Ready } else { State::Prefix(f[..k].to_vec()) };
            let last = k + 1 == f.len();
            let to = if last { State::Done } else { State::Prefix(f[..=k].to_vec()) };
            let mut m = dressed(op, with_f, kind)?;
            if last {
                m *= t.coefficient;
            }
            let (a, b) = (positions[s][&from], positions[s + 1][&to]);
            if let Some(tr) = site_transitions[s].iter_mut().find(|tr| tr.from == a && tr.to == b) {
                if last {
                    tr.op = &tr.op + &m;
                }
                // Shared prefixes are created once.
            } else {
                site_transitions[s].push(Transition { from: a, to: b, op: m });
            }
        }
    }

    let state_charge = |s: &State| -> Charge {
        match s {
            State::Ready | State::Done => Charge::zero(qlen),
            State::Prefix(f) => {
                f.iter().fold(Charge::zero(qlen), |acc, x| fuse(&acc, &x.1.charge(kind)).expect("same length"))
            }
        }
    };
    // Bond index and dense position of each state on each cut.
    let mut bond_indices = Vec::with_capacity(n + 1);
    let mut dense_pos: Vec<Vec<usize>> = Vec::with_capacity(n + 1);
    for states in &cuts {
        let charges: Vec<Charge> = states.iter().map(state_charge).collect();
        let mut counts: BTreeMap<Charge, usize> = BTreeMap::new();
        let mut within = Vec::with_capacity(charges.len());
        for q in &charges {
            let c = counts.entry(q.clone()).or_insert(0);
            within.push(*c);
            *c += 1;
        }
        let idx = QNIndex::new(
            counts.iter().map(|(q, &dim)| crate::qn::Sector::new(q.clone(), dim)).collect(),
            Direction::Inward,
        )?;
        dense_pos.push(charges.iter().zip(&within).map(|(q, &w)| idx.sector_offset(q).unwrap() + w).collect());
        bond_indices.push(idx);
    }
    let mut sites = Vec::with_capacity(n);
    for j in 0..n {
        let (kl, kr) = (&bond_indices[j], &bond_indices[j + 1]);
        let mut dense = ArrayD::zeros(IxDyn(&[kl.dim(), d, d, kr.dim()]));
        for tr in &site_transitions[j] {
            let (a, b) = (dense_pos[j][tr.from], dense_pos[j + 1][tr.to]);
            for s in 0..d {
                for nu in 0..d {
                    dense[[a, s, nu, b]] += tr.op[[s, nu]];
                }
            }
        }
        let indices = vec![kl.clone(), phys.clone(), phys.dual(), kr.dual()];
        sites.push(BlockTensor::from_dense(indices, Charge::zero(qlen), &dense, format)?);
    }
    Mpo::new(sites)
}

/// Left-to-right QR sweep followed by a right-to-left SVD sweep that drops
/// singular values carrying at most `cutoff` of the squared weight at each
/// bond. The overall scale is then spread evenly over the sites.
pub fn compress_mpo(h: &Mpo, cutoff: f64) -> Result<Mpo> {
    let n = h.len();
    let mut sites = h.sites().to_vec();
    for j in 0..n - 1 {
        let qr = block_qr(&sites[j], &[0, 1, 2], &[3])?;
        sites[j] = qr.q;
        sites[j + 1] = contract(&qr.r, &sites[j + 1], &ContractionSpec::new(vec![(1, 0)]))?;
    }
    for j in (1..n).rev() {
        let svd = block_svd(&sites[j], &[0], &[1, 2, 3], Truncation::relative_weight(usize::MAX, cutoff))?;
        sites[j] = svd.v;
        let us = svd.u.scale_mode(1, &svd.s)?;
        sites[j - 1] = contract(&sites[j - 1], &us, &ContractionSpec::new(vec![(3, 0)]))?;
    }
    let scale = sites[0].norm();
    if scale > 0.0 {
        let per_site = scale.powf(1.0 / n as f64);
        sites[0] = sites[0].scale(1.0 / scale);
        for s in &mut sites {
            *s = s.scale(per_site);
        }
    }
    Mpo::new(sites)
}

/// FSM assembly followed by compression at `cutoff` (no compression when
/// `cutoff` is `None`).
pub fn terms_to_mpo(terms: &[OpTerm], phys: &QNIndex, n: usize, cutoff: Option<f64>, format: Format) -> Result<Mpo> {
    let raw = fsm_mpo(terms, phys, n, format)?;
    match cutoff {
        Some(c) => compress_mpo(&raw, c),
        None => Ok(raw),
    }
}

/// Serializable model description used by configs and the golden store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// J1-J2 Heisenberg model on a square cylinder; `sz2` is twice the
    /// total S^z.
    Heisenberg {
        length: usize,
        width: usize,
        j1: f64,
        j2: f64,
        #[serde(default)]
        sz2: i32,
    },
    /// Hubbard model on a triangular XC cylinder with `n_up` and `n_dn`
    /// electrons.
    Hubbard { length: usize, width: usize, t: f64, u: f64, n_up: i32, n_dn: i32 },
}

impl ModelSpec {
    pub fn site_kind(&self) -> SiteKind {
        match self {
            ModelSpec::Heisenberg { .. } => SiteKind::Spin,
            ModelSpec::Hubbard { .. } => SiteKind::Electron,
        }
    }

    pub fn lattice(&self) -> Result<Lattice> {
        match *self {
            ModelSpec::Heisenberg { length, width, .. } => Lattice::square_cylinder(length, width),
            ModelSpec::Hubbard { length, width, .. } => Lattice::triangular_xc(length, width),
        }
    }

    pub fn n_sites(&self) -> usize {
        match *self {
            ModelSpec::Heisenberg { length, width, .. } | ModelSpec::Hubbard { length, width, .. } => length * width,
        }
    }

    pub fn terms(&self) -> Result<Vec<OpTerm>> {
        let lattice = self.lattice()?;
        match *self {
            ModelSpec::Heisenberg { j1, j2, .. } => build_heisenberg_j1j2(&lattice, j1, j2),
            ModelSpec::Hubbard { t, u, .. } => build_triangular_hubbard(&lattice, t, u),
        }
    }

    pub fn physical_index(&self) -> QNIndex {
        physical_index_for(self.site_kind())
    }

    /// Target charge: `(2Sz)` for spins, `(N, 2Sz)` for electrons.
    pub fn target_charge(&self) -> Charge {
        match *self {
            ModelSpec::Heisenberg { sz2, .. } => Charge::new(&[sz2]),
            ModelSpec::Hubbard { n_up, n_dn, .. } => Charge::new(&[n_up + n_dn, n_up - n_dn]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_sites() as i32;
        if n == 0 {
            return Err(argument("model lattice has no sites"));
        }
        match *self {
            ModelSpec::Heisenberg { sz2, .. } => {
                if sz2.abs() > n || (sz2 + n) % 2 != 0 {
                    return Err(argument(format!("sz2 = {sz2} is not reachable with {n} spins")));
                }
            }
            ModelSpec::Hubbard { n_up, n_dn, .. } => {
                if !(0..=n).contains(&n_up) || !(0..=n).contains(&n_dn) {
                    return Err(argument(format!("n_up = {n_up}, n_dn = {n_dn} not reachable on {n} sites")));
                }
            }
        }
        Ok(())
    }

    /// Stable content hash (hex SHA-256 of the JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
