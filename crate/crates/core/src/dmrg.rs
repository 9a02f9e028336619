//! Two-site DMRG sweeps.
//!
//! Environments for every cut are cached: `left[j]` covers sites `0..j` and
//! `right[j]` covers sites `j..N`. An update of the bond `(j, j+1)` needs
//! `left[j]` and `right[j+2]`. A sweep runs left to right over the bonds of
//! the active range and back, so it starts and ends with the center on the
//! first site of the range.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::btensor::{block_svd, BlockTensor, Format, Truncation};
use crate::error::{argument, Error, Result};
use crate::netops::{
    apply_effective_h, build_left_env, build_right_env, canonicalize, expectation, left_boundary, merge_two_site,
    right_boundary, Environment, Mpo, Mps,
};
use crate::perf::{self, block_stats, BlockStats, FlopCounts};
use crate::qn::{fuse, Charge, Direction, QNIndex, Sector};
use crate::solver::{davidson, DavidsonConfig};

/// One bond-dimension stage of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub max_bond_dim: usize,
    #[serde(default = "default_cutoff")]
    pub svd_cutoff: f64,
    #[serde(default = "default_davidson_tol")]
    pub davidson_tol: f64,
    pub num_sweeps: usize,
}

fn default_cutoff() -> f64 {
    1e-12
}

fn default_davidson_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SweepSchedule {
    pub stages: Vec<Stage>,
}

impl SweepSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(argument("schedule has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.max_bond_dim == 0 || s.num_sweeps == 0 {
                return Err(argument(format!("stage {i}: max_bond_dim and num_sweeps must be positive")));
            }
            if !(s.svd_cutoff >= 0.0) || !(s.davidson_tol > 0.0) {
                return Err(argument(format!("stage {i}: svd_cutoff must be >= 0 and davidson_tol > 0")));
            }
            if i > 0 && s.max_bond_dim < self.stages[i - 1].max_bond_dim {
                return Err(argument(format!("stage {i}: max_bond_dim decreases")));
            }
        }
        Ok(())
    }
}

/// Storage strategy for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    List,
    SparseDense,
    SparseSparse,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::List, Backend::SparseDense, Backend::SparseSparse];

    /// Format of the MPS, MPO and environments.
    pub fn storage(self) -> Format {
        match self {
            Backend::List => Format::List,
            Backend::SparseDense | Backend::SparseSparse => Format::SparseSparse,
        }
    }

    /// Format of the Davidson vectors and their intermediates.
    pub fn vectors(self) -> Format {
        match self {
            Backend::List => Format::List,
            Backend::SparseDense => Format::SparseDense,
            Backend::SparseSparse => Format::SparseSparse,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::List => "list",
            Backend::SparseDense => "sparse-dense",
            Backend::SparseSparse => "sparse-sparse",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Backend::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown backend '{s}' (expected list, sparse-dense or sparse-sparse)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmrgConfig {
    pub schedule: SweepSchedule,
    pub backend: Backend,
    pub seed: u64,
    pub davidson_max_iter: usize,
    /// Bonds `(j, j+1)` with `lo <= j < hi` are optimized; `None` is the
    /// whole chain.
    pub site_range: Option<(usize, usize)>,
}

impl DmrgConfig {
    pub fn new(schedule: SweepSchedule, backend: Backend) -> Self {
        DmrgConfig { schedule, backend, seed: 0, davidson_max_iter: 4, site_range: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepDirection {
    LeftToRight,
    RightToLeft,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteRecord {
    /// Left site of the optimized bond.
    pub bond: usize,
    pub energy: f64,
    pub trunc_error: f64,
    pub bond_dim: usize,
    pub davidson_iterations: usize,
    pub flops: u64,
    pub seconds: f64,
    /// Statistics of the site tensor left behind by the update.
    pub stats: BlockStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub stage: usize,
    pub sweep: usize,
    pub direction: SweepDirection,
    pub max_bond_dim: usize,
    pub energy: f64,
    pub max_trunc_error: f64,
    pub flops: FlopCounts,
    pub seconds: f64,
    pub unconverged: usize,
    pub sites: Vec<SiteRecord>,
}

#[derive(Clone, Debug)]
pub struct DmrgResult {
    pub psi: Mps,
    /// `<psi|H|psi>` of the returned state.
    pub energy: f64,
    pub reports: Vec<SweepReport>,
}

/// Outcome of one two-site update.
#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub energy: f64,
    pub trunc_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sweep state: an MPS with cached environments.
pub struct Sweeper {
    psi: Mps,
    h: Mpo,
    backend: Backend,
    left: Vec<Option<Environment>>,
    right: Vec<Option<Environment>>,
}

impl Sweeper {
    /// Canonicalizes `psi` to `center` and builds the environments needed
    /// for an update of bond `(center, center+1)`.
    pub fn new(psi: &Mps, h: &Mpo, backend: Backend, center: usize) -> Result<Self> {
        let n = psi.len();
        if h.len() != n {
            return Err(Error::Structural(format!("MPS has {n} sites, MPO has {}", h.len())));
        }
        if n < 2 {
            return Err(argument("two-site DMRG needs at least two sites"));
        }
        let fmt = backend.storage();
        let psi = canonicalize(&psi.convert(fmt), center)?;
        let h = h.convert(fmt);
        let mut left = vec![None; n + 1];
        let mut right = vec![None; n + 1];
        left[0] = Some(left_boundary(psi.site(0), h.site(0))?);
        right[n] = Some(right_boundary(psi.site(n - 1), h.site(n - 1))?);
        for j in 0..center {
            left[j + 1] = Some(build_left_env(left[j].as_ref().unwrap(), psi.site(j), h.site(j))?);
        }
        for j in (center + 1..n).rev() {
            right[j] = Some(build_right_env(right[j + 1].as_ref().unwrap(), psi.site(j), h.site(j))?);
        }
        Ok(Sweeper { psi, h, backend, left, right })
    }

    pub fn psi(&self) -> &Mps {
        &self.psi
    }

    pub fn into_psi(self) -> Mps {
        self.psi
    }

    /// Optimizes bond `(j, j+1)` and moves the center one step in
    /// `direction`, absorbing the singular values into the site that is
    /// optimized next.
    pub fn update(
        &mut self,
        j: usize,
        direction: SweepDirection,
        stage: &Stage,
        davidson_cfg: &DavidsonConfig,
    ) -> Result<UpdateOutcome> {
        let n = self.psi.len();
        if j + 1 >= n {
            return Err(argument(format!("bond {j} outside a chain of {n} sites")));
        }
        let stale = || Error::Structural(format!("environments for bond {j} are not available"));
        let left = self.left[j].as_ref().ok_or_else(stale)?;
        let right = self.right[j + 2].as_ref().ok_or_else(stale)?;
        let (hj, hj1) = (self.h.site(j), self.h.site(j + 1));
        let x0 = merge_two_site(self.psi.site(j), self.psi.site(j + 1))?.convert(self.backend.vectors());
        let sol = davidson(|x| apply_effective_h(left, right, hj, hj1, x), &x0, davidson_cfg)?;
        let trunc = Truncation::absolute(stage.max_bond_dim, stage.svd_cutoff);
        let svd = block_svd(&sol.eigenvector, &[0, 1], &[2, 3], trunc)?;
        let fmt = self.backend.storage();
        match direction {
            SweepDirection::LeftToRight => {
                let a = svd.u.convert(fmt);
                let b = svd.v.scale_mode(0, &svd.s)?.convert(fmt);
                let env = build_left_env(left, &a, hj)?;
                self.psi.set_pair(j, a, b, j + 1);
                self.left[j + 1] = Some(env);
            }
            SweepDirection::RightToLeft => {
                let a = svd.u.scale_mode(2, &svd.s)?.convert(fmt);
                let b = svd.v.convert(fmt);
                let env = build_right_env(right, &b, hj1)?;
                self.psi.set_pair(j, a, b, j);
                self.right[j + 1] = Some(env);
            }
        }
        Ok(UpdateOutcome {
            energy: sol.eigenvalue,
            trunc_error: svd.trunc_error,
            iterations: sol.iterations,
            converged: sol.converged,
        })
    }

    /// One half-sweep over the bonds `lo..hi`.
    pub fn half_sweep(
        &mut self,
        (lo, hi): (usize, usize),
        direction: SweepDirection,
        stage: &Stage,
        davidson_cfg: &DavidsonConfig,
    ) -> Result<(Vec<SiteRecord>, usize)> {
        let bonds: Vec<usize> = match direction {
            SweepDirection::LeftToRight => (lo..hi).collect(),
            SweepDirection::RightToLeft => (lo..hi).rev().collect(),
        };
        let mut records = Vec::with_capacity(bonds.len());
        let mut unconverged = 0;
        for j in bonds {
            let mut cfg = *davidson_cfg;
            cfg.seed = mix_seed(davidson_cfg.seed, j as u64, direction as u64);
            let start = Instant::now();
            let (out, flops) = perf::measure(|| self.update(j, direction, stage, &cfg));
            let out = out?;
            let seconds = start.elapsed().as_secs_f64();
            if !out.converged {
                unconverged += 1;
            }
            let (site, bond_dim) = match direction {
                SweepDirection::LeftToRight => (self.psi.site(j), self.psi.site(j).index(2).dim()),
                SweepDirection::RightToLeft => (self.psi.site(j + 1), self.psi.site(j + 1).index(0).dim()),
            };
            records.push(SiteRecord {
                bond: j,
                energy: out.energy,
                trunc_error: out.trunc_error,
                bond_dim,
                davidson_iterations: out.iterations,
                flops: flops.total(),
                seconds,
                stats: block_stats(site),
            });
        }
        Ok((records, unconverged))
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the schedule. `observer` sees every half-sweep report together with
/// the MPS at that point.
pub fn run_dmrg_with(
    psi0: &Mps,
    h: &Mpo,
    cfg: &DmrgConfig,
    mut observer: impl FnMut(&SweepReport, &Mps) -> Result<()>,
) -> Result<DmrgResult> {
    cfg.schedule.validate()?;
    let n = psi0.len();
    let (lo, hi) = cfg.site_range.unwrap_or((0, n.saturating_sub(1)));
    if lo >= hi || hi > n.saturating_sub(1) {
        return Err(argument(format!("site range ({lo}, {hi}) is not a nonempty range of bonds in 0..{}", n - 1)));
    }
    let mut sweeper = Sweeper::new(psi0, h, cfg.backend, lo)?;
    let mut reports = Vec::new();
    let mut counter = 0u64;
    for (si, stage) in cfg.schedule.stages.iter().enumerate() {
        for sweep in 0..stage.num_sweeps {
            for direction in [SweepDirection::LeftToRight, SweepDirection::RightToLeft] {
                let dcfg = DavidsonConfig {
                    max_subspace: 2,
                    max_iter: cfg.davidson_max_iter,
                    residual_tol: stage.davidson_tol,
                    reorth_tol: 1e-14,
                    seed: mix_seed(cfg.seed, counter, 0x5eed),
                };
                counter += 1;
                let start = Instant::now();
                let ((sites, unconverged), flops) =
                    perf::measure(|| sweeper.half_sweep((lo, hi), direction, stage, &dcfg)).map_result()?;
                let report = SweepReport {
                    stage: si,
                    sweep,
                    direction,
                    max_bond_dim: sweeper.psi().max_bond_dim(),
                    energy: sites.last().map_or(f64::NAN, |s| s.energy),
                    max_trunc_error: sites.iter().map(|s| s.trunc_error).fold(0.0, f64::max),
                    flops,
                    seconds: start.elapsed().as_secs_f64(),
                    unconverged,
                    sites,
                };
                observer(&report, sweeper.psi())?;
                reports.push(report);
            }
        }
    }
    let psi = sweeper.into_psi();
    let energy = expectation(&psi, &h.convert(cfg.backend.storage()))?;
    Ok(DmrgResult { psi, energy, reports })
}

trait MapResult<T> {
    fn map_result(self) -> Result<(T, FlopCounts)>;
}

impl<T> MapResult<T> for (Result<T>, FlopCounts) {
    fn map_result(self) -> Result<(T, FlopCounts)> {
        Ok((self.0?, self.1))
    }
}

pub fn run_dmrg(psi0: &Mps, h: &Mpo, cfg: &DmrgConfig) -> Result<DmrgResult> {
    run_dmrg_with(psi0, h, cfg, |_, _| Ok(()))
}

/// Counts of local basis strings reaching each charge, per cut.
fn path_counts(phys: &[QNIndex], from_left: bool) -> Vec<BTreeMap<Charge, u128>> {
    let n = phys.len();
    let len = phys[0].charge_len().unwrap_or(0);
    let mut out = vec![BTreeMap::new(); n + 1];
    let start = if from_left { 0 } else { n };
    out[start].insert(Charge::zero(len), 1u128);
    let order: Vec<usize> = if from_left { (0..n).collect() } else { (0..n).rev().collect() };
    for j in order {
        let (src, dst) = if from_left { (j, j + 1) } else { (j + 1, j) };
        let mut next: BTreeMap<Charge, u128> = BTreeMap::new();
        for (q, &c) in &out[src] {
            for s in phys[j].sectors() {
                let q2 = fuse(q, &s.charge).expect("uniform charge length");
                *next.entry(q2).or_insert(0) += c * s.dim as u128;
            }
        }
        out[dst] = next;
    }
    out
}

/// Random flux-conserving MPS with bond dimensions at most `m0`,
/// normalized and canonicalized to center 0. The bond left of site `j`
/// carries the charges of the first `j` sites; the total charge sits on the
/// last site. Sector dimensions follow the number of basis strings through
/// each charge.
pub fn init_random_mps(phys: &[QNIndex], total: &Charge, m0: usize, seed: u64, format: Format) -> Result<Mps> {
    let n = phys.len();
    if n == 0 || m0 == 0 {
        return Err(argument("random MPS needs at least one site and m0 >= 1"));
    }
    let len = total.len();
    if phys.iter().any(|p| p.charge_len() != Some(len)) {
        return Err(argument(format!("total charge {total} does not match the physical charges")));
    }
    let left = path_counts(phys, true);
    let right = path_counts(phys, false);
    if !left[n].contains_key(total) {
        return Err(argument(format!("total charge {total} is not reachable on {n} sites")));
    }
    // Candidate sectors on cut j: (charge, weight, cap).
    let mut cuts: Vec<BTreeMap<Charge, usize>> = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let mut cands: Vec<(Charge, u128, u128)> = left[j]
            .iter()
            .filter_map(|(q, &cl)| {
                let need = total.sub(q).expect("uniform charge length");
                right[j].get(&need).map(|&cr| (q.clone(), cl.saturating_mul(cr), cl.min(cr)))
            })
            .collect();
        cands.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(m0);
        let wsum: f64 = cands.iter().map(|c| c.1 as f64).sum();
        let dims = cands
            .into_iter()
            .map(|(q, w, cap)| {
                let share = (m0 as f64 * w as f64 / wsum).round().max(1.0) as u128;
                (q, share.min(cap).min(m0 as u128) as usize)
            })
            .collect();
        cuts.push(dims);
    }
    // Drop charges that cannot connect to a neighbouring cut.
    loop {
        let mut changed = false;
        for j in 1..=n {
            let prev: Vec<Charge> = cuts[j - 1].keys().cloned().collect();
            let before = cuts[j].len();
            cuts[j].retain(|q, _| {
                prev.iter().any(|p| phys[j - 1].sectors().iter().any(|s| &fuse(p, &s.charge).unwrap() == q))
            });
            changed |= cuts[j].len() != before;
        }
        for j in (0..n).rev() {
            let next: Vec<Charge> = cuts[j + 1].keys().cloned().collect();
            let before = cuts[j].len();
            cuts[j].retain(|q, _| phys[j].sectors().iter().any(|s| next.contains(&fuse(q, &s.charge).unwrap())));
            changed |= cuts[j].len() != before;
        }
        if !changed {
            break;
        }
    }
    if cuts.iter().any(BTreeMap::is_empty) {
        return Err(argument(format!("m0 = {m0} leaves no connected charge path")));
    }
    let bond = |j: usize| -> Result<QNIndex> {
        let sectors: Vec<Sector> = if j == n {
            vec![Sector::new(Charge::zero(len), 1)]
        } else {
            cuts[j].iter().map(|(q, &d)| Sector::new(q.clone(), d)).collect()
        };
        QNIndex::new(sectors, Direction::Inward)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::with_capacity(n);
    for j in 0..n {
        let l = bond(j)?;
        let r = bond(j + 1)?.dual();
        let site_total = if j + 1 == n { total.clone() } else { Charge::zero(len) };
        let t = BlockTensor::random(vec![l, phys[j].clone(), r], site_total, format, &mut rng)?;
        sites.push(t);
    }
    canonicalize(&Mps::new(sites, None)?, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_heisenberg_j1j2, physical_index_for, terms_to_mpo, Lattice, SiteKind};

    fn schedule(m: usize, sweeps: usize) -> SweepSchedule {
        SweepSchedule {
            stages: vec![Stage { max_bond_dim: m, svd_cutoff: 1e-12, davidson_tol: 1e-10, num_sweeps: sweeps }],
        }
    }

    #[test]
    fn two_site_singlet() {
        let p = physical_index_for(SiteKind::Spin);
        let terms = build_heisenberg_j1j2(&Lattice::chain(2).unwrap(), 1.0, 0.0).unwrap();
        let h = terms_to_mpo(&terms, &p, 2, None, Format::List).unwrap();
        let psi = init_random_mps(&[p.clone(), p], &Charge::new(&[0]), 1, 5, Format::List).unwrap();
        let r = run_dmrg(&psi, &h, &DmrgConfig::new(schedule(4, 1), Backend::List)).unwrap();
        assert!((r.energy + 0.75).abs() < 1e-12);
        assert_eq!(r.psi.center(), Some(0));
    }

    #[test]
    fn schedule_validation() {
        assert!(SweepSchedule { stages: vec![] }.validate().is_err());
        let mut s = schedule(8, 1);
        s.stages.push(Stage { max_bond_dim: 4, ..s.stages[0].clone() });
        assert!(s.validate().is_err());
    }

    #[test]
    fn unreachable_charge() {
        let p = physical_index_for(SiteKind::Spin);
        let r = init_random_mps(&[p.clone(), p], &Charge::new(&[1]), 4, 0, Format::List);
        assert!(r.is_err());
    }
}
