//! Flop counting, block statistics and the analytic cost model.
//!
//! Counters are per thread: every counted kernel records into the counter
//! of the thread that called it, so concurrent tests and runs never see
//! each other's work. Worker threads used inside a kernel do not record.

use std::cell::Cell;
use std::io::Write;

use serde::Serialize;

use crate::btensor::{contract, BlockTensor, ContractionSpec, Format};
use crate::error::{argument, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopClass {
    Contract,
    Svd,
    Qr,
}

/// Cumulative flop counts (one multiply-add is two flops).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub contract: u64,
    pub svd: u64,
    pub qr: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.contract + self.svd + self.qr
    }

    fn since(&self, start: &FlopCounts) -> FlopCounts {
        FlopCounts { contract: self.contract - start.contract, svd: self.svd - start.svd, qr: self.qr - start.qr }
    }
}

thread_local! {
    static COUNTS: Cell<FlopCounts> = const { Cell::new(FlopCounts { contract: 0, svd: 0, qr: 0 }) };
}

pub fn record(class: FlopClass, flops: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        match class {
            FlopClass::Contract => v.contract += flops,
            FlopClass::Svd => v.svd += flops,
            FlopClass::Qr => v.qr += flops,
        }
        c.set(v);
    });
}

/// Totals recorded on this thread since it started.
pub fn counts() -> FlopCounts {
    COUNTS.with(Cell::get)
}

/// Runs `f` and returns the flops it recorded. Scopes nest freely since the
/// counter itself is never reset.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, FlopCounts) {
    let start = counts();
    let out = f();
    (out, counts().since(&start))
}

/// `contract` together with the flops it performed.
pub fn counted_contract(a: &BlockTensor, b: &BlockTensor, spec: &ContractionSpec) -> Result<(BlockTensor, u64)> {
    let (r, c) = measure(|| contract(a, b, spec));
    Ok((r?, c.contract))
}

/// Geometric block-size model: block `l` has dimension `floor((m/q) r^l)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockModel {
    pub q: f64,
    pub r: f64,
    pub m: u64,
    pub n_b: u32,
}

impl BlockModel {
    /// Uses every block with dimension at least one.
    pub fn new(q: f64, r: f64, m: u64) -> Result<Self> {
        if !(q > 0.0) || !(r > 0.0 && r < 1.0) || m == 0 {
            return Err(argument(format!("block model needs q > 0, 0 < r < 1, m > 0 (got q={q}, r={r}, m={m})")));
        }
        let mut n_b = 0;
        while ((m as f64 / q) * r.powi(n_b as i32)).floor() >= 1.0 {
            n_b += 1;
        }
        if n_b == 0 {
            return Err(argument(format!("m/q = {} leaves no block of dimension one", m as f64 / q)));
        }
        let bm = BlockModel { q, r, m, n_b };
        if bm.blocks().iter().sum::<u64>() > m {
            return Err(argument("block dimensions exceed m"));
        }
        Ok(bm)
    }

    pub fn blocks(&self) -> Vec<u64> {
        (0..self.n_b).map(|l| ((self.m as f64 / self.q) * self.r.powi(l as i32)).floor() as u64).collect()
    }

    pub fn largest_block(&self) -> f64 {
        self.m as f64 / self.q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub flops: f64,
    pub davidson_memory: f64,
    pub env_memory: f64,
    pub supersteps: f64,
    pub comm: f64,
}

/// Leading-order cost of one DMRG step with unit constants.
pub fn model_cost(alg: Format, bm: &BlockModel, k: u64, d: u64, n: u64, p: u64) -> CostReport {
    let (k, d, n, p) = (k as f64, d as f64, n as f64, p as f64);
    let b = bm.largest_block();
    let m = bm.m as f64;
    let (flops, davidson_memory) = match alg {
        Format::List | Format::SparseSparse => (b * b * b * k * d * d, b * b * k * d * d),
        Format::SparseDense => (m * m * m * k * d * d, m * m * k * d * d),
    };
    let env_memory = n * b * b * k;
    let (supersteps, comm) = match alg {
        Format::List => (bm.n_b as f64, davidson_memory / p.powf(2.0 / 3.0)),
        Format::SparseSparse | Format::SparseDense => (1.0, davidson_memory / p.powf(0.5)),
    };
    CostReport { flops, davidson_memory, env_memory, supersteps, comm }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockStats {
    pub num_blocks: usize,
    /// Largest single-mode dimension over all stored blocks.
    pub largest_block_dim: usize,
    pub sparsity: f64,
}

pub fn block_stats(t: &BlockTensor) -> BlockStats {
    let largest_block_dim = t.block_keys().iter().flat_map(|k| t.block_shape(k)).max().unwrap_or(0);
    BlockStats { num_blocks: t.num_blocks(), largest_block_dim, sparsity: t.sparsity() }
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes() {
        let (_, outer) = measure(|| {
            record(FlopClass::Contract, 5);
            let (_, inner) = measure(|| record(FlopClass::Svd, 7));
            assert_eq!(inner, FlopCounts { contract: 0, svd: 7, qr: 0 });
            record(FlopClass::Qr, 1);
        });
        assert_eq!(outer.total(), 13);
    }

    #[test]
    fn block_model_sizes() {
        let bm = BlockModel::new(4.0, 0.6, 64).unwrap();
        assert_eq!(bm.blocks(), vec![16, 9, 5, 3, 2, 1]);
        assert_eq!(bm.n_b, 6);
        assert!(BlockModel::new(4.0, 1.5, 64).is_err());
    }

    #[test]
    fn unit_processor_comm_is_memory() {
        let bm = BlockModel::new(10.0, 0.65, 4096).unwrap();
        for alg in [Format::List, Format::SparseSparse, Format::SparseDense] {
            let c = model_cost(alg, &bm, 26, 4, 36, 1);
            assert_eq!(c.comm, c.davidson_memory);
        }
    }

    #[test]
    fn csv_has_header() {
        let bm = BlockModel::new(4.0, 0.6, 64).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[model_cost(Format::List, &bm, 5, 2, 8, 4)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("flops,davidson_memory,env_memory,supersteps,comm\n"));
    }
}
