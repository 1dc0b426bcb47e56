use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use homogenize::harness::suite::builtin;
use homogenize::harness::{run_scenario, with_workers, ScenarioConfig};

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_reiterated(seed: u64) -> ScenarioConfig {
    let mut c = builtin("reiterated-1d", seed).unwrap();
    c.samples = 8;
    c.save_fields = true;
    c
}

#[test]
fn artifacts_are_bit_identical_across_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut fields = builtin("elliptic-1d", 5).unwrap();
    fields.save_fields = true;
    let run = |dir: &Path, workers| {
        [small_reiterated(5), fields.clone()].map(|mut c| {
            c.output = Some(dir.to_path_buf());
            with_workers(workers, || run_scenario(&c)).unwrap().unwrap()
        })
    };
    assert_eq!(run(a.path(), 1), run(b.path(), 3));
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.keys().any(|k| k.contains("fields")), "{:?}", sa.keys());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs");
    }
}

#[test]
fn manifest_lists_written_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = builtin("elliptic-1d", 1).unwrap();
    c.output = Some(dir.path().to_path_buf());
    let m = run_scenario(&c).unwrap();
    assert!(m.pass);
    for name in ["config.toml", "manifest.json", "study.csv"] {
        assert!(m.artifacts.iter().any(|a| a == name), "{name} missing");
    }
    let root = dir.path().join(&c.name);
    for a in &m.artifacts {
        assert!(root.join(a).is_file(), "{a} not written");
    }
    // The stored config reproduces the hash.
    let back = ScenarioConfig::load(&root.join("config.toml")).unwrap();
    assert_eq!(back.hash(), m.config_hash);
}

#[test]
fn different_seeds_change_random_results() {
    let a = run_scenario(&small_reiterated(1)).unwrap();
    let b = run_scenario(&small_reiterated(2)).unwrap();
    assert_ne!(a.summary, b.summary);
}

#[test]
fn failing_task_is_recorded_not_fatal() {
    let mut c = builtin("monotone-1d", 42).unwrap();
    c.monotone.max_iter = 1;
    let m = run_scenario(&c).unwrap();
    assert!(!m.pass);
    let recorded = m.failure.is_some() || m.tasks.iter().any(|t| t.error.is_some());
    assert!(recorded, "{m:?}");
}
