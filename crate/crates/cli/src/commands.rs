use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dmrg_core::btensor::Format;
use dmrg_core::dmrg::{
    init_random_mps, run_dmrg, run_dmrg_with, Backend, DmrgConfig, SweepDirection, SweepReport, Sweeper,
};
use dmrg_core::models::terms_to_mpo;
use dmrg_core::netops::{read_mps, write_mps, Mpo, Mps};
use dmrg_core::oracle::{ed_for_spec, GoldenStore};
use dmrg_core::perf::{self, model_cost, write_csv, BlockModel};
use dmrg_core::solver::DavidsonConfig;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::{BenchArgs, CostArgs, OracleArgs, RunArgs};

pub const SCHEMA: &str = "dmrg-report/1";
const VERIFY_TOL: f64 = 1e-6;
const COMPARE_TOL: f64 = 1e-9;
const GOLDEN_TOL: f64 = 1e-10;

pub enum Failure {
    /// The reader went away (e.g. output piped into `head`).
    Closed,
    Config(String),
    Mismatch(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Closed => 0,
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Mismatch(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Closed => "",
            Failure::Config(m) | Failure::Mismatch(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<dmrg_core::Error> for Failure {
    fn from(e: dmrg_core::Error) -> Self {
        match e {
            dmrg_core::Error::Io(e) => e.into(),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::Closed;
        }
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

/// JSON-lines writer; every record carries the schema tag and a type.
struct Emitter {
    out: Box<dyn Write>,
}

impl Emitter {
    fn emit(&mut self, kind: &str, body: Value) -> Outcome {
        let mut rec = json!({ "schema": SCHEMA, "type": kind });
        if let (Value::Object(dst), Value::Object(src)) = (&mut rec, body) {
            dst.extend(src);
        }
        serde_json::to_writer(&mut self.out, &rec).map_err(|e| Failure::Runtime(e.to_string()))?;
        writeln!(self.out)?;
        self.out.flush()?;
        Ok(())
    }
}

fn load(path: &Path) -> Result<Config, Failure> {
    Config::load(path).map_err(Failure::Config)
}

fn hamiltonian(cfg: &Config, format: Format) -> Result<Mpo, Failure> {
    let n = cfg.model.n_sites();
    Ok(terms_to_mpo(&cfg.model.terms()?, &cfg.model.physical_index(), n, cfg.mpo_cutoff(), format)?)
}

fn initial_state(cfg: &Config, format: Format) -> Result<Mps, Failure> {
    let phys = vec![cfg.model.physical_index(); cfg.model.n_sites()];
    Ok(init_random_mps(&phys, &cfg.model.target_charge(), cfg.m0, cfg.seed, format)?)
}

fn dmrg_config(cfg: &Config, backend: Backend) -> DmrgConfig {
    let mut d = DmrgConfig::new(cfg.schedule(), backend);
    d.seed = cfg.seed;
    d.davidson_max_iter = cfg.davidson_max_iter;
    d
}

fn write_checkpoint(path: &Path, psi: &Mps) -> dmrg_core::Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        write_mps(psi, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn report_json(backend: Backend, r: &SweepReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report serializes");
    v["backend"] = json!(backend.name());
    v
}

pub fn run(a: &RunArgs) -> Outcome {
    let cfg = load(&a.config)?;
    let mut backends = a.backends.clone();
    if backends.is_empty() {
        backends.push(Backend::List);
    }
    if a.compare && backends.len() < 2 {
        backends = Backend::ALL.to_vec();
    }
    let mut seen = Vec::new();
    backends.retain(|b| {
        !seen.contains(b) && {
            seen.push(*b);
            true
        }
    });
    let resume = match &a.resume {
        Some(p) => {
            let mut f = File::open(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            let psi = read_mps(&mut f)?;
            if psi.len() != cfg.model.n_sites() || psi.total_charge() != &cfg.model.target_charge() {
                return Err(Failure::Config(format!("resume: {} does not match the model", p.display())));
            }
            Some(psi)
        }
        None => None,
    };
    let mut em = Emitter { out: sink(a.output.as_deref())? };
    let names: Vec<&str> = backends.iter().map(|b| b.name()).collect();
    em.emit("config", json!({ "config": cfg, "backends": names }))?;

    let mut energies = Vec::new();
    for &backend in &backends {
        let fmt = backend.storage();
        let h = hamiltonian(&cfg, fmt)?;
        let psi0 = match &resume {
            Some(p) => p.convert(fmt),
            None => initial_state(&cfg, fmt)?,
        };
        let ckpt: Option<PathBuf> = a.checkpoint.as_ref().map(|p| {
            if backends.len() > 1 {
                PathBuf::from(format!("{}.{}", p.display(), backend.name()))
            } else {
                p.clone()
            }
        });
        let start = Instant::now();
        let mut emit_err = None;
        let (res, flops) = perf::measure(|| {
            run_dmrg_with(&psi0, &h, &dmrg_config(&cfg, backend), |rep, psi| {
                if let Err(e) = em.emit("sweep", report_json(backend, rep)) {
                    emit_err.get_or_insert(e);
                }
                if let Some(p) = &ckpt {
                    write_checkpoint(p, psi)?;
                }
                Ok(())
            })
        });
        if let Some(e) = emit_err {
            return Err(e);
        }
        let res = res?;
        em.emit(
            "result",
            json!({
                "backend": backend.name(),
                "energy": res.energy,
                "max_bond_dim": res.psi.max_bond_dim(),
                "half_sweeps": res.reports.len(),
                "flops": flops,
                "seconds": start.elapsed().as_secs_f64(),
            }),
        )?;
        eprintln!("E = {:.12} ({})", res.energy, backend.name());
        energies.push((backend, res.energy));
    }

    let mut mismatch = Vec::new();
    if a.compare {
        let lo = energies.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        let hi = energies.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let by_name: serde_json::Map<String, Value> =
            energies.iter().map(|(b, e)| (b.name().to_string(), json!(e))).collect();
        let diff = hi - lo;
        em.emit("compare", json!({ "energies": by_name, "max_abs_diff": diff, "tolerance": COMPARE_TOL }))?;
        eprintln!("backend spread = {diff:.3e}");
        if !(diff < COMPARE_TOL) {
            mismatch.push(format!("backend energies differ by {diff:.3e}"));
        }
    }
    if a.verify {
        let golden = match &a.golden {
            Some(p) => GoldenStore::load(p)?.get(&cfg.model),
            None => None,
        };
        let (reference, source) = match golden {
            Some(e) => (e, "golden"),
            None => (ed_for_spec(&cfg.model)?.energy, "ed"),
        };
        for &(b, e) in &energies {
            let rel = ((e - reference) / reference).abs();
            let passed = rel <= VERIFY_TOL;
            em.emit(
                "verify",
                json!({
                    "backend": b.name(), "energy": e, "reference": reference, "source": source,
                    "rel_error": rel, "tolerance": VERIFY_TOL, "passed": passed,
                }),
            )?;
            eprintln!("verify {}: rel error {rel:.3e} against {source}", b.name());
            if !passed {
                mismatch.push(format!("{} energy {e} vs reference {reference} (rel {rel:.3e})", b.name()));
            }
        }
    }
    if mismatch.is_empty() {
        Ok(())
    } else {
        Err(Failure::Mismatch(mismatch.join("; ")))
    }
}

#[derive(Serialize)]
struct BenchRow {
    backend: &'static str,
    repetition: usize,
    bond: usize,
    column: usize,
    seconds: f64,
    flops: u64,
    flops_per_second: f64,
    bond_dim: usize,
    davidson_iterations: usize,
    num_blocks: usize,
    largest_block_dim: usize,
    sparsity: f64,
}

pub fn bench(a: &BenchArgs) -> Outcome {
    let cfg = load(&a.config)?;
    let Some(bc) = cfg.bench.clone() else {
        return Err(Failure::Config("bench: section is required for the bench command".into()));
    };
    let backends = if a.backends.is_empty() { Backend::ALL.to_vec() } else { a.backends.clone() };
    let lattice = cfg.model.lattice()?;
    let stage = cfg.schedule.last().expect("validated schedule is nonempty").clone();

    // The state is prepared once; every backend times updates on it.
    let psi = {
        let psi0 = initial_state(&cfg, Format::List)?;
        if bc.prepare {
            let h = hamiltonian(&cfg, Format::List)?;
            run_dmrg(&psi0, &h, &dmrg_config(&cfg, Backend::List))?.psi
        } else {
            psi0
        }
    };
    let dcfg = DavidsonConfig {
        max_subspace: 2,
        max_iter: cfg.davidson_max_iter,
        residual_tol: stage.davidson_tol,
        reorth_tol: 1e-14,
        seed: cfg.seed,
    };
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &backend in &backends {
        let h = hamiltonian(&cfg, backend.storage())?;
        let mut total = 0u64;
        let mut seconds = 0.0;
        for rep in 0..bc.repetitions {
            let mut sw = Sweeper::new(&psi, &h, backend, bc.site_range[0])?;
            let (out, fc) = perf::measure(|| {
                sw.half_sweep((bc.site_range[0], bc.site_range[1]), SweepDirection::LeftToRight, &stage, &dcfg)
            });
            let (records, _) = out?;
            total += fc.total();
            for r in records {
                seconds += r.seconds;
                rows.push(BenchRow {
                    backend: backend.name(),
                    repetition: rep,
                    bond: r.bond,
                    column: lattice.column(r.bond),
                    seconds: r.seconds,
                    flops: r.flops,
                    flops_per_second: if r.seconds > 0.0 { r.flops as f64 / r.seconds } else { 0.0 },
                    bond_dim: r.bond_dim,
                    davidson_iterations: r.davidson_iterations,
                    num_blocks: r.stats.num_blocks,
                    largest_block_dim: r.stats.largest_block_dim,
                    sparsity: r.stats.sparsity,
                });
            }
        }
        summaries.push(json!({
            "backend": backend.name(), "repetitions": bc.repetitions, "flops_total": total, "seconds": seconds,
        }));
    }
    write_csv(sink(a.output.as_deref())?, &rows)?;
    let mut em = Emitter { out: Box::new(io::stderr()) };
    for s in summaries {
        em.emit("bench", s)?;
    }
    Ok(())
}

pub fn verify_oracle(a: &OracleArgs) -> Outcome {
    let cfg = load(&a.config)?;
    let mut store = GoldenStore::load(&a.golden)?;
    let ed = ed_for_spec(&cfg.model)?;
    let mut em = Emitter { out: Box::new(io::stdout().lock()) };
    match store.get(&cfg.model) {
        Some(stored) => {
            let diff = (stored - ed.energy).abs();
            let passed = diff <= GOLDEN_TOL * ed.energy.abs().max(1.0);
            em.emit(
                "oracle",
                json!({ "hash": cfg.model.hash(), "energy": ed.energy, "stored": stored, "passed": passed }),
            )?;
            if !passed {
                return Err(Failure::Mismatch(format!("stored {stored} vs recomputed {}", ed.energy)));
            }
        }
        None => {
            store.insert(&cfg.model, ed.energy);
            store.save(&a.golden)?;
            em.emit(
                "oracle",
                json!({ "hash": cfg.model.hash(), "energy": ed.energy, "stored": null, "written": true }),
            )?;
        }
    }
    eprintln!("E_ed = {:.12} (dim {})", ed.energy, ed.basis.len());
    Ok(())
}

#[derive(Serialize)]
struct CostRow {
    q: f64,
    r: f64,
    m: u64,
    n_b: u32,
    k: u64,
    d: u64,
    n: u64,
    p: u64,
    algorithm: &'static str,
    flops: f64,
    davidson_memory: f64,
    env_memory: f64,
    supersteps: f64,
    comm: f64,
}

/// Block-model parameters for spins and electrons with their local
/// dimension.
pub const COST_PARAMS: [(f64, f64, u64); 2] = [(4.0, 0.6, 2), (10.0, 0.65, 4)];

pub fn cost_model(a: &CostArgs) -> Outcome {
    if a.k == 0 || a.sites == 0 || a.procs.contains(&0) {
        return Err(Failure::Config("cost-model: k, sites and procs must be positive".into()));
    }
    let mut rows = Vec::new();
    for (q, r, d) in COST_PARAMS {
        for e in 12..=15 {
            let bm = BlockModel::new(q, r, 1 << e)?;
            for &p in &a.procs {
                for backend in Backend::ALL {
                    let c = model_cost(backend.vectors(), &bm, a.k, d, a.sites, p);
                    rows.push(CostRow {
                        q,
                        r,
                        m: bm.m,
                        n_b: bm.n_b,
                        k: a.k,
                        d,
                        n: a.sites,
                        p,
                        algorithm: backend.name(),
                        flops: c.flops,
                        davidson_memory: c.davidson_memory,
                        env_memory: c.env_memory,
                        supersteps: c.supersteps,
                        comm: c.comm,
                    });
                }
            }
        }
    }
    write_csv(sink(a.output.as_deref())?, &rows)?;
    Ok(())
}
