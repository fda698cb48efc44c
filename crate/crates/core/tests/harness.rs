//! Configuration files, persistence and small end-to-end pipeline runs.

mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use randmark::attacks::{sample_model_population, PopulationConfig, PopulationKind};
use randmark::harness::manifest::{StageStatus, MANIFEST_FILE};
use randmark::harness::persistence::{
    load_bundle, load_checkpoint_dir, save_bundle, save_population, BUNDLE_FILES,
};
use randmark::harness::pipeline::{build_triggers, pretrain_backbone, train_bundle, STAGES};
use randmark::harness::{run_pipeline, ExperimentConfig, RunManifest};
use randmark::nn::checkpoint::encode;
use randmark::Bundle;

fn tiny_bundle() -> (ExperimentConfig, Bundle) {
    let cfg = tiny_config();
    let triggers = build_triggers(&cfg).unwrap();
    let (bundle, _) = train_bundle(&cfg, pretrain_backbone(&cfg).unwrap(), &triggers).unwrap();
    (cfg, bundle)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry
            .strip_prefix(dir)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        if rel.ends_with(".csv") || rel.ends_with(".json") && rel != MANIFEST_FILE {
            out.push((rel, fs::read(&entry).unwrap()));
        }
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn config_file_loads_with_attack_sections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.ini");
    fs::write(
        &path,
        "# desk variant\n[model]\nn = 16\n[verify]\ntau = auto\n[attack.light]\nkind = prune\nfraction = 0.1\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.n, 16);
    assert_eq!(cfg.tau, None);
    assert_eq!(cfg.attacks.len(), 1);
    assert_eq!(cfg.attacks[0].name, "light");
    assert_eq!(cfg.attacks[0].spec.prune_fraction, 0.1);
    assert_eq!(cfg.to_ini().parse::<ExperimentConfig>().unwrap(), cfg);
}

#[test]
fn bundle_round_trips_through_a_directory() {
    let (_, bundle) = tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    for f in BUNDLE_FILES {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let back: Bundle = load_bundle(dir.path()).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn bundle_with_mismatched_manifest_is_rejected() {
    let (_, bundle) = tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replace("\nn=8\n", "\nn=9\n");
    assert!(text.contains("\nn=9\n"));
    fs::write(&manifest, text).unwrap();
    assert!(load_bundle::<f64>(dir.path()).is_err());
}

#[test]
fn population_directory_round_trips() {
    let (_, bundle) = tiny_bundle();
    let config = PopulationConfig {
        heldout: 20,
        ..PopulationConfig::default()
    };
    let pop = sample_model_population(&bundle, PopulationKind::Omega, 3, 5, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_population(&pop, PopulationKind::Omega, dir.path()).unwrap();
    let loaded = load_checkpoint_dir::<f64>(dir.path()).unwrap();
    assert_eq!(loaded.len(), pop.len());
    for ((stem, net), member) in loaded.iter().zip(&pop) {
        assert_eq!(stem, &format!("omega_{:04}", member.index));
        assert_eq!(encode(net), encode(&member.backbone));
    }
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("index,population,kind,seed,parameters"));
    assert_eq!(lines.count(), pop.len());
}

#[test]
fn pipeline_without_attacks_reports_only_baselines() {
    let mut cfg = tiny_config();
    cfg.attacks.clear();
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, dir.path()).unwrap();
    let ids: Vec<&str> = out.summary.suspects.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["watermarked", "independent0", "independent1"]);
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    for line in sweep.lines().skip(1) {
        let id = line.split(',').next().unwrap();
        assert!(
            id == "watermarked" || id.starts_with("independent"),
            "{line}"
        );
    }
    assert!(out.summary.covariance.dependent_mean_delta.is_none());
}

#[test]
fn pipeline_manifest_covers_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&tiny_config(), dir.path()).unwrap();
    let names: Vec<&str> = out
        .manifest
        .stages
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    assert_eq!(names, STAGES);
    assert!(out
        .manifest
        .stages
        .iter()
        .all(|s| s.status == StageStatus::Ok));
    let loaded = RunManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, out.manifest);
    assert!(loaded.verify(dir.path()).unwrap().is_empty());
    let listed: Vec<&str> = loaded.files.iter().map(|f| f.path.as_str()).collect();
    for expected in [
        "config.ini",
        "summary.json",
        "bounds.json",
        "sweep.csv",
        "covariance.csv",
        "bundle/encoder.rmk",
    ] {
        assert!(
            listed.contains(&expected),
            "{expected} missing from manifest"
        );
    }
    fs::write(dir.path().join("sweep.csv"), "tampered\n").unwrap();
    assert_eq!(loaded.verify(dir.path()).unwrap(), ["sweep.csv"]);
}

#[test]
fn failing_stage_is_recorded_and_later_stages_skipped() {
    let mut cfg = tiny_config();
    cfg.population.max_relative_error = -1.0;
    let dir = tempfile::tempdir().unwrap();
    assert!(run_pipeline(&cfg, dir.path()).is_err());
    let manifest = RunManifest::load(dir.path()).unwrap();
    let status = |name: &str| manifest.stages.iter().find(|s| s.name == name).unwrap();
    assert_eq!(status("embed").status, StageStatus::Ok);
    assert_eq!(status("population").status, StageStatus::Failed);
    assert!(status("population").error.is_some());
    for later in ["verify", "covariance", "bounds", "report"] {
        assert_eq!(status(later).status, StageStatus::Skipped, "{later}");
    }
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn invalid_config_is_refused_before_any_output() {
    let mut cfg = tiny_config();
    cfg.k = cfg.s;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run_pipeline(&cfg, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config();
    let ra = run_pipeline(&cfg, a.path()).unwrap();
    let rb = run_pipeline(&cfg, b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ra.manifest.without_timings(), rb.manifest.without_timings());
}
