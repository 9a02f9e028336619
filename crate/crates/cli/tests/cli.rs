use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;

use dmrg_core::btensor::Format;
use dmrg_core::perf::{model_cost, BlockModel};
use serde_json::Value;

// Tests spawn the binary; running them one at a time keeps the timing
// comparisons meaningful.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn dmrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmrg")).args(args).env_remove("DMRG_THREADS").output().unwrap()
}

fn lines(out: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn of_type<'a>(recs: &'a [Value], kind: &str) -> Vec<&'a Value> {
    recs.iter().filter(|r| r["type"] == kind).collect()
}

/// Drops wall-clock fields.
fn untimed(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| !matches!(k.as_str(), "seconds" | "flops_per_second"))
                .map(|(k, v)| (k.clone(), untimed(v)))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(untimed).collect()),
        other => other.clone(),
    }
}

#[test]
fn two_site_singlet() {
    let _g = serial();
    let out = dmrg(&["run", config("heis_2site.toml").to_str().unwrap()]);
    assert!(out.status.success());
    let recs = lines(&out.stdout);
    assert!(recs.iter().all(|r| r["schema"] == "dmrg-report/1"));
    let e = of_type(&recs, "result")[0]["energy"].as_f64().unwrap();
    assert!((e + 0.75).abs() <= 1e-12);
    assert!(String::from_utf8_lossy(&out.stderr).contains("E = -0.75"));
}

#[test]
fn verify_against_ed() {
    let _g = serial();
    let out = dmrg(&["run", "--verify", config("heis_4x2.toml").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = lines(&out.stdout);
    let v = of_type(&recs, "verify")[0];
    assert_eq!(v["source"], "ed");
    assert!(v["rel_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn backend_cross_check() {
    let _g = serial();
    let cfg = config("heis_4x2.toml");
    let out = dmrg(&["run", "--backend", "sparse-sparse", "--backend", "list", "--compare", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let recs = lines(&out.stdout);
    assert_eq!(of_type(&recs, "result").len(), 2);
    let c = of_type(&recs, "compare")[0];
    assert!(c["max_abs_diff"].as_f64().unwrap() < 1e-9);
    assert_eq!(c["energies"].as_object().unwrap().len(), 2);
}

#[test]
fn bad_configs_exit_two_naming_the_field() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(config("heis_2site.toml")).unwrap();
    let cases = [
        (base.replace("max_bond_dim = 4", "max_bond_dim = 0"), "schedule"),
        (base.replace("m0 = 2", "m0 = 0"), "m0"),
        (base.replace("seed = 1", "seeed = 1"), "seeed"),
        (base.replace("j2 = 0.0\n", ""), "j2"),
        (base.replace("length = 2", "length = \"two\""), "length"),
        (base.replace("kind = \"heisenberg\"", "kind = \"ising\""), "ising"),
        (format!("{base}\n[bench]\nsite_range = [1, 1]\n"), "bench.site_range"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let p = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&p, text).unwrap();
        let out = dmrg(&["run", p.to_str().unwrap()]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "case {i}: {err}");
        assert!(err.contains(field), "case {i}: '{field}' not in {err}");
    }
    let out = dmrg(&["run", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = dmrg(&["--threads", "0", "run", config("heis_2site.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_mismatch_exits_three() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let golden = dir.path().join("golden.toml");
    let cfg = config("heis_2site.toml");
    let (cfg, golden_s) = (cfg.to_str().unwrap(), golden.to_str().unwrap());
    assert!(dmrg(&["verify-oracle", cfg, "--golden", golden_s]).status.success());
    assert!(dmrg(&["verify-oracle", cfg, "--golden", golden_s]).status.success());
    let ok = dmrg(&["run", "--verify", "--golden", golden_s, cfg]);
    assert!(ok.status.success());
    assert_eq!(of_type(&lines(&ok.stdout), "verify")[0]["source"], "golden");

    let text = std::fs::read_to_string(&golden).unwrap();
    let mut doc: toml::Table = toml::from_str(&text).unwrap();
    for (_, e) in doc["entries"].as_table_mut().unwrap().iter_mut() {
        e.as_table_mut().unwrap().insert("energy".into(), toml::Value::Float(-0.5));
    }
    std::fs::write(&golden, toml::to_string(&doc).unwrap()).unwrap();
    assert_eq!(dmrg(&["run", "--verify", "--golden", golden_s, cfg]).status.code(), Some(3));
    assert_eq!(dmrg(&["verify-oracle", cfg, "--golden", golden_s]).status.code(), Some(3));
}

#[test]
fn config_echo_reproduces_the_run() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let first = dmrg(&["run", config("heis_4x2.toml").to_str().unwrap()]);
    assert!(first.status.success());
    let recs = lines(&first.stdout);
    let echo = dir.path().join("echo.json");
    std::fs::write(&echo, serde_json::to_string(&recs[0]["config"]).unwrap()).unwrap();
    let second = dmrg(&["run", echo.to_str().unwrap()]);
    assert!(second.status.success());
    let a: Vec<Value> = recs.iter().map(untimed).collect();
    let b: Vec<Value> = lines(&second.stdout).iter().map(untimed).collect();
    assert_eq!(a, b);
}

#[test]
fn identical_output_across_thread_counts() {
    let _g = serial();
    let cfg = config("hubbard_2x2.toml");
    let mut outputs = Vec::new();
    for threads in ["1", "2", "8"] {
        let out = Command::new(env!("CARGO_BIN_EXE_dmrg"))
            .args(["run", "--backend", "sparse-sparse", cfg.to_str().unwrap()])
            .env("DMRG_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(lines(&out.stdout).iter().map(untimed).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn checkpoint_and_resume() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("state.mps");
    let cfg = config("heis_4x2.toml");
    let out = dmrg(&["run", "--checkpoint", ckpt.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let e0 = of_type(&lines(&out.stdout), "result")[0]["energy"].as_f64().unwrap();
    assert!(ckpt.exists());
    let psi = dmrg_core::netops::read_mps(&mut std::fs::File::open(&ckpt).unwrap()).unwrap();
    assert_eq!(psi.len(), 8);
    let out = dmrg(&["run", "--resume", ckpt.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let e1 = of_type(&lines(&out.stdout), "result")[0]["energy"].as_f64().unwrap();
    assert!((e1 - e0).abs() <= 1e-9);
    let mismatch = dmrg(&["run", "--resume", ckpt.to_str().unwrap(), config("heis_2site.toml").to_str().unwrap()]);
    assert_eq!(mismatch.status.code(), Some(2));
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut it = text.lines();
    let header: Vec<&str> = it.next().unwrap().split(',').collect();
    it.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect()).collect()
}

#[test]
fn single_step_bench_flops() {
    let _g = serial();
    let out = dmrg(&["bench", config("bench_chain8.toml").to_str().unwrap()]);
    assert!(out.status.success());
    let rows = csv_rows(&String::from_utf8_lossy(&out.stdout));
    let summaries = lines(&out.stderr);
    assert_eq!(rows.len(), 3);
    for (row, s) in rows.iter().zip(&summaries) {
        assert_eq!(row["backend"], s["backend"].as_str().unwrap());
        assert_eq!(row["bond"], "3");
        assert_eq!(row["flops"].parse::<u64>().unwrap(), s["flops_total"].as_u64().unwrap());
    }
    assert!(rows.iter().all(|r| r["flops"] == rows[0]["flops"]));
}

#[test]
fn interior_columns_take_similar_time() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = dmrg(&[
        "bench",
        "--backend",
        "list",
        "-o",
        csv.to_str().unwrap(),
        config("bench_cyl8x4.toml").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let rows = csv_rows(&std::fs::read_to_string(&csv).unwrap());
    // Per column: sum over its bonds, minimum over repetitions.
    let mut per: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in &rows {
        let (c, rep) = (r["column"].parse().unwrap(), r["repetition"].parse().unwrap());
        *per.entry(c).or_default().entry(rep).or_insert(0.0) += r["seconds"].parse::<f64>().unwrap();
    }
    let last = *per.keys().max().unwrap();
    let interior: Vec<f64> = per
        .iter()
        .filter(|(c, _)| **c != 0 && **c != last)
        .map(|(_, reps)| reps.values().copied().fold(f64::INFINITY, f64::min))
        .collect();
    assert_eq!(interior.len(), 6);
    let (lo, hi) = interior.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    assert!(hi <= 2.0 * lo, "interior column times {interior:?}");
}

#[test]
fn cost_model_table() {
    let _g = serial();
    let out = dmrg(&["cost-model", "--k", "26", "--procs", "1,64"]);
    assert!(out.status.success());
    let rows = csv_rows(&String::from_utf8_lossy(&out.stdout));
    assert_eq!(rows.len(), 2 * 4 * 2 * 3);
    for r in &rows {
        let f = |k: &str| r[k].parse::<f64>().unwrap();
        let u = |k: &str| r[k].parse::<u64>().unwrap();
        let bm = BlockModel::new(f("q"), f("r"), u("m")).unwrap();
        let alg = match r["algorithm"].as_str() {
            "list" => Format::List,
            "sparse-dense" => Format::SparseDense,
            _ => Format::SparseSparse,
        };
        let c = model_cost(alg, &bm, u("k"), u("d"), u("n"), u("p"));
        assert_eq!(
            [f("flops"), f("davidson_memory"), f("env_memory"), f("supersteps"), f("comm")],
            [c.flops, c.davidson_memory, c.env_memory, c.supersteps, c.comm]
        );
        assert_eq!(u("n_b"), bm.n_b as u64);
        if u("p") == 1 {
            assert_eq!(f("comm"), f("davidson_memory"));
        }
    }
    let ms: std::collections::BTreeSet<u64> = rows.iter().map(|r| r["m"].parse().unwrap()).collect();
    assert_eq!(ms.into_iter().collect::<Vec<_>>(), vec![4096, 8192, 16384, 32768]);
}
