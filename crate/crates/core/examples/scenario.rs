use cil_core::data::{synth_generate, ClassRef, EpisodeConfig, Scenario, SourceDataset, SynthSpec};
use cil_core::run::{run_scenario, ScenarioConfig};
use cil_core::strategies::{StrategyConfig, Variant};

fn main() {
    let variant = std::env::var("VARIANT").unwrap_or_else(|_| "naive_sequential".into());
    let seed: u64 = std::env::var("SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let epochs: usize = std::env::var("EPOCHS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let difficulty: f32 = std::env::var("DIFFICULTY")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);
    let (train, test) = synth_generate(&SynthSpec {
        classes: 6,
        per_class: 500,
        test_per_class: 200,
        difficulty,
        seed,
    })
    .unwrap();
    let episodes: Vec<EpisodeConfig> = (0..3u16)
        .map(|e| EpisodeConfig {
            dataset: "synth".into(),
            classes: Some(vec![ClassRef::Index(2 * e), ClassRef::Index(2 * e + 1)]),
            epochs,
        })
        .collect();
    let ds = SourceDataset {
        stem: "synth".into(),
        train,
        test,
    };
    let scenario = Scenario::from_datasets("probe", seed, vec![ds], &episodes, &[]).unwrap();
    let mut cfg = ScenarioConfig {
        name: "probe".into(),
        seed,
        episodes,
        shared_classes: vec![],
        strategy: StrategyConfig::for_variant(Variant::parse(&variant).expect("variant")),
        optimizer: Default::default(),
        backbone: Default::default(),
    };
    if let Ok(l) = std::env::var("LAMBDA") {
        cfg.strategy.mas_lambda = l.parse().unwrap();
    }
    let out = run_scenario(&cfg, &scenario, seed).unwrap();
    let r = &out.report;
    for t in 1..=r.matrix.episodes() {
        let row: Vec<String> = r
            .matrix
            .row(t)
            .iter()
            .map(|c| format!("{:.1}", c.accuracy))
            .collect();
        println!("R[{t}] = {}", row.join(" "));
    }
    println!(
        "{} seed {seed}: A = {:.2} BWT = {:?} in {:.1}s",
        r.strategy,
        r.final_average_accuracy(),
        r.backward_transfer,
        r.wall_clock_secs
    );
    for l in &r.losses {
        print!("{:.3} ", l.loss);
    }
    println!();
}
