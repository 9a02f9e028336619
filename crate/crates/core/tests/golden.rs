use std::path::Path;

use dmrg_core::dmrg::{init_random_mps, run_dmrg, Backend, DmrgConfig, Stage, SweepSchedule};
use dmrg_core::models::{terms_to_mpo, ModelSpec};
use dmrg_core::oracle::{ed_for_spec, GoldenStore};

fn store() -> GoldenStore {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.toml");
    let s = GoldenStore::load(&path).unwrap();
    assert!(s.entries.len() >= 5, "golden store at {} is missing entries", path.display());
    s
}

#[test]
fn stored_keys_match_their_models() {
    for (key, e) in &store().entries {
        assert_eq!(key, &e.model.hash());
    }
}

#[test]
fn oracle_reproduces_frozen_values() {
    for e in store().entries.values() {
        let fresh = ed_for_spec(&e.model).unwrap().energy;
        assert!((fresh - e.energy).abs() <= 1e-10 * e.energy.abs().max(1.0), "{:?}: {fresh} vs {}", e.model, e.energy);
    }
}

#[test]
fn dmrg_reaches_frozen_cylinder_energy() {
    let spec = ModelSpec::Heisenberg { length: 4, width: 2, j1: 1.0, j2: 0.5, sz2: 0 };
    let golden = store().get(&spec).expect("4x2 cylinder is stored");
    let p = spec.physical_index();
    let h = terms_to_mpo(&spec.terms().unwrap(), &p, 8, Some(1e-13), Backend::List.storage()).unwrap();
    let psi = init_random_mps(&vec![p; 8], &spec.target_charge(), 8, 1, Backend::List.storage()).unwrap();
    let stages =
        [16, 32, 64].map(|m| Stage { max_bond_dim: m, svd_cutoff: 1e-12, davidson_tol: 1e-10, num_sweeps: 2 }).to_vec();
    let mut cfg = DmrgConfig::new(SweepSchedule { stages }, Backend::List);
    cfg.davidson_max_iter = 20;
    let r = run_dmrg(&psi, &h, &cfg).unwrap();
    assert!(((r.energy - golden) / golden).abs() <= 1e-6);
}
