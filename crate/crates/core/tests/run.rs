use std::path::Path;

use cil_core::data::{split_path, synth_generate, Split, SynthSpec};
use cil_core::metrics::{emit_report, matrix_csv};
use cil_core::run::{independent_model_seed, run_scenario, RunError, ScenarioConfig};
use cil_core::strategies::Variant;

fn write_synth(dir: &Path, classes: usize) {
    let (train, test) = synth_generate(&SynthSpec {
        classes,
        per_class: 6,
        test_per_class: 3,
        difficulty: 1.0,
        seed: 2,
    })
    .unwrap();
    let stem = dir.join("synth");
    train.save(&split_path(&stem, Split::Train)).unwrap();
    test.save(&split_path(&stem, Split::Test)).unwrap();
}

fn config(episodes: usize, variant: &str) -> ScenarioConfig {
    let eps: Vec<String> = (0..episodes)
        .map(|e| {
            format!(
                r#"{{"dataset": "synth", "classes": [{}, {}], "epochs": 1}}"#,
                2 * e,
                2 * e + 1
            )
        })
        .collect();
    let text = format!(
        r#"{{
            "name": "tiny",
            "seed": 4,
            "episodes": [{}],
            "strategy": {{"variant": "{variant}"}},
            "optimizer": {{"batch_size": 4}},
            "backbone": {{"channels": [4, 4, 4, 4, 8]}}
        }}"#,
        eps.join(",")
    );
    ScenarioConfig::from_json(&text, Path::new("tiny.json")).unwrap()
}

#[test]
fn echo_resolves_every_default() {
    let cfg = config(1, "der_pp");
    let echo = cfg.echo(11);
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["strategy"]["buffer_capacity"], 200);
    assert_eq!(echo["strategy"]["selection"], "reservoir");
    assert_eq!(
        echo["optimizer"]["learning_rate"].as_f64().unwrap() as f32,
        0.01
    );
    assert_eq!(echo["optimizer"]["batch_size"], 4);
    assert_eq!(echo["episodes"][0]["epochs"], 1);
    assert_eq!(echo["shared_classes"], serde_json::json!([]));
    let back: ScenarioConfig = serde_json::from_value(echo).unwrap();
    assert_eq!(back.strategy, cfg.strategy);
}

#[test]
fn bad_configs_are_rejected() {
    let p = Path::new("x.json");
    let cases = [
        r#"{"name": "x", "episodes": []}"#,
        r#"{"name": "x", "episodes": [{"dataset": "a"}], "extra": 1}"#,
        r#"{"name": "x", "episodes": [{"dataset": "a"}], "strategy": {"mas_lambda": -1}}"#,
        r#"{"name": "x", "episodes": [{"dataset": "a"}], "optimizer": {"learning_rate": -0.1}}"#,
        r#"{"name": "x", "episodes": [{"dataset": "a", "epochs": 0}]}"#,
        r#"{"name": "x", "episodes": [{"dataset": "a"}], "strategy": {"variant": "ewc"}}"#,
    ];
    for text in cases {
        let err = ScenarioConfig::from_json(text, p).unwrap_err();
        assert!(
            matches!(err, RunError::Config(_) | RunError::Parse { .. }),
            "{text}: {err}"
        );
    }
    assert!(matches!(
        ScenarioConfig::load(Path::new("/nonexistent/cfg.json")),
        Err(RunError::Io { .. })
    ));
}

#[test]
fn runs_are_deterministic_and_reports_complete() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 4);
    let cfg = config(2, "der_pp");
    let scenario = cfg.build(dir.path()).unwrap();
    let a = run_scenario(&cfg, &scenario, 4).unwrap();
    let b = run_scenario(&cfg, &scenario, 4).unwrap();
    assert_eq!(matrix_csv(&a.report.matrix), matrix_csv(&b.report.matrix));
    assert_eq!(a.models[0].checksum(), b.models[0].checksum());
    let r = &a.report;
    assert_eq!(r.matrix.episodes(), 2);
    assert_eq!(
        r.registry,
        vec![
            "synth#class0",
            "synth#class1",
            "synth#class2",
            "synth#class3"
        ]
    );
    assert_eq!(r.losses.len(), 2);
    assert!(r.backward_transfer.is_some());
    let buf = r.buffer.as_ref().unwrap();
    assert!(buf.size <= 200);
    assert_eq!(buf.seen, 24);
    assert_eq!(r.config, cfg.echo(4));
    let out = dir.path().join("out");
    emit_report(r, &out).unwrap();
    assert!(out.join("matrix.csv").is_file());
}

#[test]
fn single_episode_independent_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 4);
    let naive = config(1, "naive_sequential");
    let indep = config(1, "naive_independent");
    let scenario = naive.build(dir.path()).unwrap();
    let a = run_scenario(&naive, &scenario, 8).unwrap();
    let b = run_scenario(&indep, &scenario, 8).unwrap();
    assert_eq!(a.models[0].checksum(), b.models[0].checksum());
    assert_eq!(a.report.matrix, b.report.matrix);
    assert!(b.report.task_oracle);
    assert_eq!(b.report.label(), "naive_independent (task oracle)");
    assert!(!a.report.task_oracle);

    let two = config(2, "naive_independent");
    let scenario = two.build(dir.path()).unwrap();
    let out = run_scenario(&two, &scenario, 8).unwrap();
    assert_eq!(out.models.len(), 2);
    assert_eq!(out.models[0].seed(), 8);
    assert_eq!(out.models[1].seed(), independent_model_seed(8, 1));
    assert_ne!(out.models[0].seed(), out.models[1].seed());
    assert_eq!(out.models[1].head_classes(), &[2, 3]);
    let r = &out.report.matrix;
    assert_eq!(r.get(2, 1), r.get(1, 1));
}

#[test]
fn joint_reports_its_final_model_in_every_row() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 6);
    let cfg = config(3, "joint");
    let scenario = cfg.build(dir.path()).unwrap();
    let out = run_scenario(&cfg, &scenario, 1).unwrap();
    let r = &out.report.matrix;
    assert_eq!(r.get(3, 1), r.get(1, 1));
    assert_eq!(r.get(3, 2), r.get(2, 2));
    assert_eq!(out.report.backward_transfer, Some(0.0));
    assert_eq!(out.models[0].class_count(), 6);
    assert_eq!(out.report.strategy, Variant::Joint.name());
    assert!(!out.report.notes.is_empty());
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(1, "naive_sequential");
    assert!(matches!(
        cfg.build(dir.path()),
        Err(RunError::Data(
            cil_core::data::DataError::UnknownDataset { .. }
        ))
    ));
}
