//! Davidson eigensolver without preconditioning.
//!
//! The subspace grows by the orthogonalized residual and collapses onto the
//! current Ritz vector whenever it reaches `max_subspace`. A residual that
//! vanishes under Gram-Schmidt is replaced by a seeded random tensor with the
//! same block structure.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::btensor::BlockTensor;
use crate::error::{argument, structural, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DavidsonConfig {
    pub max_subspace: usize,
    pub max_iter: usize,
    pub residual_tol: f64,
    pub reorth_tol: f64,
    pub seed: u64,
}

impl Default for DavidsonConfig {
    fn default() -> Self {
        DavidsonConfig { max_subspace: 2, max_iter: 4, residual_tol: 1e-8, reorth_tol: 1e-14, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub eigenvalue: f64,
    /// Unit-norm Ritz vector.
    pub eigenvector: BlockTensor,
    /// `||A x - lambda x||` for the returned pair.
    pub residual_norm: f64,
    pub iterations: usize,
    pub matvecs: usize,
    pub converged: bool,
    /// Ritz value after every iteration.
    pub ritz_values: Vec<f64>,
}

fn lincomb(vs: &[BlockTensor], s: &[f64]) -> Result<BlockTensor> {
    let mut acc = vs[0].scale(s[0]);
    for (v, &c) in vs.iter().zip(s).skip(1) {
        acc = BlockTensor::add(&acc, v, 1.0, c)?;
    }
    Ok(acc)
}

/// Two passes of modified Gram-Schmidt against an orthonormal basis.
fn orthogonalize(mut q: BlockTensor, basis: &[BlockTensor]) -> Result<BlockTensor> {
    for _ in 0..2 {
        for v in basis {
            let c = BlockTensor::inner(v, &q)?;
            q = BlockTensor::add(&q, v, 1.0, -c)?;
        }
    }
    Ok(q)
}

/// Smallest eigenpair of the symmetric operator `apply` starting from `x0`.
pub fn davidson<F>(mut apply: F, x0: &BlockTensor, cfg: &DavidsonConfig) -> Result<SolveResult>
where
    F: FnMut(&BlockTensor) -> Result<BlockTensor>,
{
    if cfg.max_subspace < 2 {
        return Err(argument(format!("max_subspace must be at least 2 (got {})", cfg.max_subspace)));
    }
    if !(cfg.residual_tol > 0.0 && cfg.reorth_tol > 0.0) {
        return Err(argument("Davidson tolerances must be positive"));
    }
    let n0 = x0.norm();
    if n0 == 0.0 || !n0.is_finite() {
        return Err(argument("Davidson start vector is zero"));
    }
    let mut matvecs = 0;
    let mut apply_checked = |v: &BlockTensor| -> Result<BlockTensor> {
        let av = apply(v)?;
        matvecs += 1;
        if av.indices() != v.indices() || av.total_charge() != v.total_charge() {
            return Err(structural("Davidson operator changed the indices of its argument"));
        }
        Ok(av.convert(v.format()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v0 = x0.scale(1.0 / n0);
    let av0 = apply_checked(&v0)?;
    let mut vs = vec![v0];
    let mut avs = vec![av0];
    let mut ritz_values = Vec::new();
    let mut iterations = 0;
    loop {
        let n = vs.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mij = BlockTensor::inner(&avs[j], &vs[i])?;
                m[(i, j)] = mij;
                m[(j, i)] = mij;
            }
        }
        let eig = SymmetricEigen::new(m);
        let lowest =
            (0..n).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("nonempty subspace");
        let lambda = eig.eigenvalues[lowest];
        let s: Vec<f64> = eig.eigenvectors.column(lowest).iter().copied().collect();
        let x = lincomb(&vs, &s)?;
        let ax = lincomb(&avs, &s)?;
        let q = BlockTensor::add(&ax, &x, 1.0, -lambda)?;
        let xn = x.norm();
        let residual = q.norm() / xn;
        iterations += 1;
        ritz_values.push(lambda);

        let done = residual <= cfg.residual_tol || iterations >= cfg.max_iter;
        if done {
            return Ok(SolveResult {
                eigenvalue: lambda,
                eigenvector: x.scale(1.0 / xn),
                residual_norm: residual,
                iterations,
                matvecs,
                converged: residual <= cfg.residual_tol,
                ritz_values,
            });
        }
        if vs.len() >= cfg.max_subspace {
            vs = vec![x.scale(1.0 / xn)];
            avs = vec![ax.scale(1.0 / xn)];
        }
        let mut q = orthogonalize(q, &vs)?;
        if q.norm() < cfg.reorth_tol {
            let fresh = BlockTensor::random(x.indices().to_vec(), x.total_charge().clone(), x.format(), &mut rng)?;
            q = orthogonalize(fresh, &vs)?;
            if q.norm() < cfg.reorth_tol {
                // The subspace already spans every admissible direction.
                return Ok(SolveResult {
                    eigenvalue: lambda,
                    eigenvector: x.scale(1.0 / xn),
                    residual_norm: residual,
                    iterations,
                    matvecs,
                    converged: residual <= cfg.residual_tol,
                    ritz_values,
                });
            }
        }
        let q = q.scale(1.0 / q.norm());
        let aq = apply_checked(&q)?;
        vs.push(q);
        avs.push(aq);
    }
}
