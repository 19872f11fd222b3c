use std::path::Path;

use unlearn_core::experiment::{audit, ExperimentConfig, ModelSection, Runner, TrainSection, WorldSection};
use unlearn_core::{Error, Exec};

fn tiny(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        world: WorldSection {
            n_entities: 16,
            n_facts: 40,
            aux_entities: 8,
            aux_facts: 8,
            ..Default::default()
        },
        model: ModelSection {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            context_len: 64,
        },
        train: TrainSection {
            epochs: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.methods = ["ga+gdr", "permu+gdr", "whp", "icl"].iter().map(|m| m.parse().unwrap()).collect();
    cfg.unlearn.insert("epochs".into(), toml::Value::Integer(1));
    cfg.unlearn.insert("reinforce_epochs".into(), toml::Value::Integer(1));
    cfg.probe.trials = 30;
    cfg.probe.samples = 2;
    cfg.ablate.values = vec![toml::Value::Float(0.2), toml::Value::Float(0.8)];
    cfg
}

fn runner(cfg: ExperimentConfig, dir: &Path, force: bool) -> Runner {
    Runner::new(cfg, dir.to_path_buf(), force, Exec::Parallel)
}

#[test]
fn full_pipeline_leaves_a_clean_manifest_trail() {
    let dir = tempfile::tempdir().unwrap();
    let r = runner(tiny(0), dir.path(), false);
    r.gen_corpus().unwrap();
    r.train().unwrap();
    r.unlearn(&r.config.methods.clone()).unwrap();
    r.eval().unwrap();
    r.ablate().unwrap();
    r.probe(None).unwrap();
    r.probe(Some(&"permu+gdr".parse().unwrap())).unwrap();
    let report = r.report().unwrap();
    assert!(report.contains("permu+gdr"), "{report}");

    let a = audit(dir.path()).unwrap();
    assert!(a.is_clean(), "{a:?}");
    assert!(a.manifests >= 6);

    std::fs::write(dir.path().join("eval").join("stray.txt"), "x").unwrap();
    assert!(!audit(dir.path()).unwrap().is_clean());
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    runner(tiny(0), dir.path(), false).gen_corpus().unwrap();
    let err = runner(tiny(0), dir.path(), false).gen_corpus().unwrap_err();
    assert!(matches!(err, Error::OutputExists(_)), "{err}");
    runner(tiny(0), dir.path(), true).gen_corpus().unwrap();
}

#[test]
fn checkpoint_from_another_world_is_rejected() {
    let a = tempfile::tempdir().unwrap();
    let r = runner(tiny(0), a.path(), false);
    r.gen_corpus().unwrap();
    r.train().unwrap();

    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(7);
    cfg.world.n_entities = 24;
    cfg.target_checkpoint = Some(a.path().join("models").join("target"));
    let r = runner(cfg, b.path(), false);
    r.gen_corpus().unwrap();
    let err = r.unlearn(&["ga+gdr".parse().unwrap()]).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { .. }), "{err}");
}

#[test]
fn small_forget_fraction_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(3);
    cfg.world.forget_fraction = 0.05;
    let r = runner(cfg, dir.path(), false);
    r.gen_corpus().unwrap();
    let lab = r.lab().unwrap();
    assert_eq!(lab.forget_set().len(), 2);
}

#[test]
fn corpus_config_drift_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    runner(tiny(0), dir.path(), false).gen_corpus().unwrap();
    let mut cfg = tiny(0);
    cfg.world.n_facts = 44;
    let err = runner(cfg, dir.path(), false).lab().err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn shipped_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}
