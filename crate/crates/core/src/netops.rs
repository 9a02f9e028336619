//! Matrix product states and operators, canonical forms, environments and
//! the two-site effective Hamiltonian.
//!
//! Mode conventions:
//!
//! * MPS site: `(left bond In, physical In, right bond Out)`.
//! * MPO site: `(k In, sigma In, nu Out, k' Out)`; `sigma` pairs with the
//!   bra, `nu` with the ket, so the site is the matrix `<sigma|O|nu>`.
//! * Environment: `(bra, mpo, ket)`. A left environment at cut `j` has
//!   `bra == T[j].index(0)`; a right environment at cut `j` has
//!   `bra == T[j-1].index(2)`.
//!
//! The MPS total charge equals the sum of the site tensor charges. Boundary
//! bonds always carry the single zero-charge sector of dimension one, so the
//! total sits on whichever site factor holds it (usually the center).

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::btensor::{block_qr, contract, read_snapshot, write_snapshot, BlockTensor, ContractionSpec, Format};
use crate::error::{argument, structural, Error, Result};
use crate::qn::{Charge, Direction, QNIndex, Sector};

#[derive(Clone, Debug)]
pub struct Mps {
    sites: Vec<BlockTensor>,
    center: Option<usize>,
    total: Charge,
}

fn check_boundary(idx: &QNIndex, what: &str) -> Result<()> {
    let s = idx.sectors();
    if s.len() != 1 || s[0].dim != 1 || !s[0].charge.is_zero() {
        return Err(structural(format!("{what} must be a single zero-charge sector of dimension 1")));
    }
    Ok(())
}

fn check_chain(sites: &[BlockTensor], order: usize, left: usize, right: usize, what: &str) -> Result<()> {
    if sites.is_empty() {
        return Err(argument(format!("{what} needs at least one site")));
    }
    for (j, s) in sites.iter().enumerate() {
        if s.order() != order {
            return Err(structural(format!("{what} site {j} has order {}, expected {order}", s.order())));
        }
        s.validate()?;
    }
    for j in 0..sites.len() - 1 {
        if !sites[j].index(right).is_dual_of(sites[j + 1].index(left)) {
            return Err(structural(format!("{what} bond between sites {j} and {} is not dual", j + 1)));
        }
    }
    check_boundary(sites[0].index(left), &format!("{what} left boundary"))?;
    check_boundary(sites[sites.len() - 1].index(right), &format!("{what} right boundary"))?;
    Ok(())
}

impl Mps {
    pub fn new(sites: Vec<BlockTensor>, center: Option<usize>) -> Result<Self> {
        check_chain(&sites, 3, 0, 2, "MPS")?;
        for (j, s) in sites.iter().enumerate() {
            if s.index(0).direction() != Direction::Inward
                || s.index(1).direction() != Direction::Inward
                || s.index(2).direction() != Direction::Outward
            {
                return Err(structural(format!("MPS site {j} must have modes (In, In, Out)")));
            }
        }
        if let Some(c) = center {
            if c >= sites.len() {
                return Err(argument(format!("center {c} outside chain of {} sites", sites.len())));
            }
        }
        let mut total = Charge::zero(sites[0].total_charge().len());
        for s in &sites {
            total = crate::qn::fuse(&total, s.total_charge())?;
        }
        Ok(Mps { sites, center, total })
    }

    /// A product state with one basis vector per site; `states[j]` is the
    /// dense position in `phys[j]`.
    pub fn product_state(phys: &[QNIndex], states: &[usize], format: Format) -> Result<Self> {
        if phys.len() != states.len() || phys.is_empty() {
            return Err(argument("product state needs one state per site"));
        }
        let len = phys[0].charge_len().unwrap_or(0);
        let zero = Charge::zero(len);
        let mut left = QNIndex::trivial(zero.clone(), Direction::Inward);
        let mut sites = Vec::with_capacity(phys.len());
        let mut acc = zero.clone();
        for (j, (p, &s)) in phys.iter().zip(states).enumerate() {
            let (q, local) = p.locate(s).ok_or_else(|| argument(format!("state {s} outside site {j}")))?;
            let (q, local) = (q.clone(), local);
            let lq = acc.clone();
            acc = crate::qn::fuse(&acc, &q)?;
            let last = j + 1 == phys.len();
            let rq = if last { zero.clone() } else { acc.clone() };
            let right = QNIndex::trivial(rq.clone(), Direction::Outward);
            let site_total = if last { acc.clone() } else { zero.clone() };
            let sd = p.sector_dim(&q).expect("located");
            let data = ArrayD::from_shape_fn(IxDyn(&[1, sd, 1]), |ix| if ix[1] == local { 1.0 } else { 0.0 });
            let t = BlockTensor::from_blocks(
                vec![left.clone(), p.clone(), right.clone()],
                site_total,
                [(vec![lq, q, rq], data)],
            )?;
            sites.push(t.convert(format));
            left = right.dual();
        }
        Mps::new(sites, None)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, j: usize) -> &BlockTensor {
        &self.sites[j]
    }

    pub fn sites(&self) -> &[BlockTensor] {
        &self.sites
    }

    pub fn center(&self) -> Option<usize> {
        self.center
    }

    pub fn total_charge(&self) -> &Charge {
        &self.total
    }

    pub fn physical_indices(&self) -> Vec<QNIndex> {
        self.sites.iter().map(|s| s.index(1).clone()).collect()
    }

    /// Dimension of the bond to the right of each site except the last.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.sites.len() - 1].iter().map(|s| s.index(2).dim()).collect()
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn convert(&self, format: Format) -> Mps {
        Mps {
            sites: self.sites.iter().map(|s| s.convert(format)).collect(),
            center: self.center,
            total: self.total.clone(),
        }
    }

    /// Replaces sites `j` and `j+1` after a two-site update.
    pub(crate) fn set_pair(&mut self, j: usize, a: BlockTensor, b: BlockTensor, center: usize) {
        self.sites[j] = a;
        self.sites[j + 1] = b;
        self.center = Some(center);
    }

    pub fn norm_squared(&self) -> Result<f64> {
        let t0 = &self.sites[0];
        let len = self.total.len();
        let zero = Charge::zero(len);
        let mut env = BlockTensor::from_blocks(
            vec![t0.index(0).clone(), t0.index(0).dual()],
            zero.clone(),
            [(vec![zero.clone(), zero], ArrayD::from_elem(IxDyn(&[1, 1]), 1.0))],
        )?
        .convert(t0.format());
        for t in &self.sites {
            let et = contract(&env, t, &ContractionSpec::new(vec![(1, 0)]))?;
            env = contract(&et, &t.conj(), &ContractionSpec::new(vec![(0, 0), (1, 1)]).with_output_order(vec![1, 0]))?;
        }
        Ok(env.get(&[0, 0]))
    }

    pub fn norm(&self) -> Result<f64> {
        Ok(self.norm_squared()?.max(0.0).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Mpo {
    sites: Vec<BlockTensor>,
}

impl Mpo {
    pub fn new(sites: Vec<BlockTensor>) -> Result<Self> {
        check_chain(&sites, 4, 0, 3, "MPO")?;
        for (j, s) in sites.iter().enumerate() {
            if !s.total_charge().is_zero() {
                return Err(structural(format!("MPO site {j} has nonzero charge {}", s.total_charge())));
            }
            if !s.index(1).is_dual_of(s.index(2)) {
                return Err(structural(format!("MPO site {j} physical modes are not dual")));
            }
        }
        Ok(Mpo { sites })
    }

    /// Identity operator on the given physical indices.
    pub fn identity(phys: &[QNIndex], format: Format) -> Result<Self> {
        let len = phys.first().and_then(QNIndex::charge_len).unwrap_or(0);
        let zero = Charge::zero(len);
        let k = QNIndex::trivial(zero.clone(), Direction::Inward);
        let sites =
            phys.iter()
                .map(|p| {
                    let blocks =
                        p.sectors().iter().map(|s| {
                            let data = ArrayD::from_shape_fn(IxDyn(&[1, s.dim, s.dim, 1]), |ix| {
                                if ix[1] == ix[2] {
                                    1.0
                                } else {
                                    0.0
                                }
                            });
                            (vec![zero.clone(), s.charge.clone(), s.charge.clone(), zero.clone()], data)
                        });
                    BlockTensor::from_blocks(vec![k.clone(), p.clone(), p.dual(), k.dual()], zero.clone(), blocks)
                        .map(|t| t.convert(format))
                })
                .collect::<Result<Vec<_>>>()?;
        Mpo::new(sites)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, j: usize) -> &BlockTensor {
        &self.sites[j]
    }

    pub fn sites(&self) -> &[BlockTensor] {
        &self.sites
    }

    /// Largest internal bond dimension `k`.
    pub fn bond_dim(&self) -> usize {
        self.sites.iter().map(|s| s.index(3).dim()).max().unwrap_or(1).max(self.sites[0].index(0).dim())
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.sites.len() - 1].iter().map(|s| s.index(3).dim()).collect()
    }

    pub fn physical_indices(&self) -> Vec<QNIndex> {
        self.sites.iter().map(|s| s.index(1).clone()).collect()
    }

    pub fn convert(&self, format: Format) -> Mpo {
        Mpo { sites: self.sites.iter().map(|s| s.convert(format)).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub side: Side,
    pub tensor: BlockTensor,
}

fn scalar_env(side: Side, bra: QNIndex, mpo: QNIndex, format: Format) -> Result<Environment> {
    let len = bra.charge_len().unwrap_or(0);
    let zero = Charge::zero(len);
    let ket = bra.dual();
    let blocks = [(vec![zero.clone(); 3], ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0))];
    let tensor = BlockTensor::from_blocks(vec![bra, mpo, ket], zero, blocks)?.convert(format);
    Ok(Environment { side, tensor })
}

/// Environment left of site 0.
pub fn left_boundary(t0: &BlockTensor, h0: &BlockTensor) -> Result<Environment> {
    scalar_env(Side::Left, t0.index(0).clone(), h0.index(0).dual(), t0.format())
}

/// Environment right of the last site.
pub fn right_boundary(tn: &BlockTensor, hn: &BlockTensor) -> Result<Environment> {
    scalar_env(Side::Right, tn.index(2).clone(), hn.index(3).dual(), tn.format())
}

/// Extends a left environment across one site: `E x T`, then `x H`, then
/// `x conj(T)`.
pub fn build_left_env(prev: &Environment, t: &BlockTensor, h: &BlockTensor) -> Result<Environment> {
    if prev.side != Side::Left {
        return Err(structural("build_left_env needs a left environment"));
    }
    // (bra, mpo, sigma, r)
    let et = contract(&prev.tensor, t, &ContractionSpec::new(vec![(2, 0)]))?;
    // (bra, r, sigma_bra, k')
    let eth = contract(&et, h, &ContractionSpec::new(vec![(1, 0), (2, 2)]))?;
    // (r, k', r*) -> (r*, k', r)
    let tensor =
        contract(&eth, &t.conj(), &ContractionSpec::new(vec![(0, 0), (2, 1)]).with_output_order(vec![2, 1, 0]))?;
    Ok(Environment { side: Side::Left, tensor })
}

/// Extends a right environment across one site, mirroring [`build_left_env`].
pub fn build_right_env(prev: &Environment, t: &BlockTensor, h: &BlockTensor) -> Result<Environment> {
    if prev.side != Side::Right {
        return Err(structural("build_right_env needs a right environment"));
    }
    // (bra, mpo, l, sigma)
    let et = contract(&prev.tensor, t, &ContractionSpec::new(vec![(2, 2)]))?;
    // (bra, l, k, sigma_bra)
    let eth = contract(&et, h, &ContractionSpec::new(vec![(1, 3), (3, 2)]))?;
    // (l, k, l*) -> (l*, k, l)
    let tensor =
        contract(&eth, &t.conj(), &ContractionSpec::new(vec![(0, 2), (3, 1)]).with_output_order(vec![2, 1, 0]))?;
    Ok(Environment { side: Side::Right, tensor })
}

/// Two-site tensor `(l, sigma_j, sigma_j+1, r)` from adjacent sites.
pub fn merge_two_site(a: &BlockTensor, b: &BlockTensor) -> Result<BlockTensor> {
    contract(a, b, &ContractionSpec::new(vec![(2, 0)]))
}

/// `K x` for the two-site tensor `x`, contracted left first:
/// `((L x) H_j) H_j+1) R`.
pub fn apply_effective_h(
    left: &Environment,
    right: &Environment,
    hj: &BlockTensor,
    hj1: &BlockTensor,
    x: &BlockTensor,
) -> Result<BlockTensor> {
    if left.side != Side::Left || right.side != Side::Right {
        return Err(structural("apply_effective_h needs a left and a right environment"));
    }
    // (bra, mpo, s1, s2, b)
    let lx = contract(&left.tensor, x, &ContractionSpec::new(vec![(2, 0)]))?;
    // (bra, s2, b, s1', k')
    let lxh = contract(&lx, hj, &ContractionSpec::new(vec![(1, 0), (2, 2)]))?;
    // (bra, b, s1', s2', k'')
    let lxhh = contract(&lxh, hj1, &ContractionSpec::new(vec![(4, 0), (1, 2)]))?;
    // (bra, s1', s2', bra_r)
    contract(&lxhh, &right.tensor, &ContractionSpec::new(vec![(1, 2), (4, 1)]))
}

/// Moves the orthogonality center to `center` with QR steps from both ends
/// and normalizes the center site.
pub fn canonicalize(psi: &Mps, center: usize) -> Result<Mps> {
    let n = psi.len();
    if center >= n {
        return Err(argument(format!("center {center} outside chain of {n} sites")));
    }
    let mut sites = psi.sites.clone();
    for j in 0..center {
        let (q, r) = left_qr_step(&sites[j])?;
        sites[j] = q;
        sites[j + 1] = contract(&r, &sites[j + 1], &ContractionSpec::new(vec![(1, 0)]))?;
    }
    for j in (center + 1..n).rev() {
        let (q, r) = right_qr_step(&sites[j])?;
        sites[j] = q;
        sites[j - 1] = contract(&sites[j - 1], &r, &ContractionSpec::new(vec![(2, 0)]))?;
    }
    let norm = sites[center].norm();
    if norm == 0.0 {
        return Err(argument("cannot normalize a zero MPS"));
    }
    sites[center] = sites[center].scale(1.0 / norm);
    Ok(Mps { sites, center: Some(center), total: psi.total.clone() })
}

/// Left-orthogonal factor `(l, sigma, bond)` and remainder `(bond, r)`.
pub fn left_qr_step(t: &BlockTensor) -> Result<(BlockTensor, BlockTensor)> {
    let qr = block_qr(t, &[0, 1], &[2])?;
    Ok((qr.q, qr.r))
}

/// Right-orthogonal factor `(bond, sigma, r)` and remainder `(l, bond)` with
/// the bond arrows arranged to match the MPS conventions.
pub fn right_qr_step(t: &BlockTensor) -> Result<(BlockTensor, BlockTensor)> {
    let qr = block_qr(t, &[1, 2], &[0])?;
    let q = qr.q.flip_mode(2).permute(&[2, 0, 1])?;
    let r = qr.r.flip_mode(0).permute(&[1, 0])?;
    Ok((q, r))
}

/// Largest deviation from the identity of `T^dagger T` over (left, physical)
/// for `Side::Left`, or over (physical, right) for `Side::Right`.
pub fn orthogonality_residual(t: &BlockTensor, side: Side) -> Result<f64> {
    let spec = match side {
        Side::Left => ContractionSpec::new(vec![(0, 0), (1, 1)]),
        Side::Right => ContractionSpec::new(vec![(1, 1), (2, 2)]),
    };
    let m = contract(t, &t.conj(), &spec)?;
    let n = m.index(0).dim();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m.get(&[i, j]) - expect).abs());
        }
    }
    Ok(worst)
}

/// `<psi|H|psi> / <psi|psi>` by left-to-right environment accumulation.
pub fn expectation(psi: &Mps, h: &Mpo) -> Result<f64> {
    Ok(sandwich(psi, h)? / psi.norm_squared()?)
}

/// Unnormalized `<psi|H|psi>`.
pub fn sandwich(psi: &Mps, h: &Mpo) -> Result<f64> {
    if psi.len() != h.len() {
        return Err(structural(format!("MPS has {} sites, MPO has {}", psi.len(), h.len())));
    }
    for j in 0..psi.len() {
        if psi.site(j).index(1) != h.site(j).index(1) {
            return Err(structural(format!("physical index mismatch at site {j}")));
        }
    }
    let mut env = left_boundary(psi.site(0), h.site(0))?;
    for j in 0..psi.len() {
        env = build_left_env(&env, psi.site(j), h.site(j))?;
    }
    Ok(env.tensor.get(&[0, 0, 0]))
}

const CHAIN_MAGIC: u32 = 0x4B43_5350;
const CHAIN_VERSION: u16 = 1;

fn write_header<W: Write>(w: &mut W, kind: u8, n: usize, center: Option<usize>, total: &Charge) -> Result<()> {
    w.write_u32::<LE>(CHAIN_MAGIC)?;
    w.write_u16::<LE>(CHAIN_VERSION)?;
    w.write_u8(kind)?;
    w.write_u32::<LE>(n as u32)?;
    w.write_i64::<LE>(center.map_or(-1, |c| c as i64))?;
    w.write_u32::<LE>(total.len() as u32)?;
    for &v in total.values() {
        w.write_i32::<LE>(v)?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, kind: u8) -> Result<(usize, Option<usize>, Charge)> {
    if r.read_u32::<LE>()? != CHAIN_MAGIC {
        return Err(Error::Format("bad checkpoint magic number".into()));
    }
    let version = r.read_u16::<LE>()?;
    if version != CHAIN_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let got = r.read_u8()?;
    if got != kind {
        return Err(Error::Format(format!("checkpoint holds kind {got}, expected {kind}")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let center = r.read_i64::<LE>()?;
    let qlen = r.read_u32::<LE>()? as usize;
    let mut q = Vec::with_capacity(qlen);
    for _ in 0..qlen {
        q.push(r.read_i32::<LE>()?);
    }
    Ok((n, (center >= 0).then_some(center as usize), Charge::new(&q)))
}

pub fn write_mps<W: Write>(psi: &Mps, w: &mut W) -> Result<()> {
    write_header(w, 0, psi.len(), psi.center, &psi.total)?;
    for s in &psi.sites {
        write_snapshot(s, w)?;
    }
    Ok(())
}

pub fn read_mps<R: Read>(r: &mut R) -> Result<Mps> {
    let (n, center, total) = read_header(r, 0)?;
    let sites = (0..n).map(|_| read_snapshot(r)).collect::<Result<Vec<_>>>()?;
    let psi = Mps::new(sites, center)?;
    if psi.total != total {
        return Err(Error::Format(format!("checkpoint total {total} disagrees with sites {}", psi.total)));
    }
    Ok(psi)
}

pub fn write_mpo<W: Write>(h: &Mpo, w: &mut W) -> Result<()> {
    let len = h.sites[0].total_charge().len();
    write_header(w, 1, h.len(), None, &Charge::zero(len))?;
    for s in &h.sites {
        write_snapshot(s, w)?;
    }
    Ok(())
}

pub fn read_mpo<R: Read>(r: &mut R) -> Result<Mpo> {
    let (n, _, _) = read_header(r, 1)?;
    let sites = (0..n).map(|_| read_snapshot(r)).collect::<Result<Vec<_>>>()?;
    Mpo::new(sites)
}

/// Physical index with one dimension-1 sector per charge.
pub fn basis_index(charges: &[Charge]) -> Result<QNIndex> {
    QNIndex::new(charges.iter().map(|q| Sector::new(q.clone(), 1)).collect(), Direction::Inward)
}
