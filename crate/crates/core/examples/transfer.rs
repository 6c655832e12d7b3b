//! Synthetic few-shot transfer with the four ablation settings.
//!
//! `cargo run --release --example transfer -- [seeds] [config.json]`

use std::time::Instant;

use lst_core::data::{generate, greedy_sample, SynthSpec};
use lst_core::pipeline::{aggregate, evaluate, finetune, train_source, TrainConfig};

fn main() -> lst_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().expect("seed count"));
    let base = match args.get(2) {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let spec: SynthSpec = match std::env::var("LST_SYNTH") {
        Ok(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        Err(_) => SynthSpec::default(),
    };
    let k: usize = std::env::var("LST_K").ok().map_or(20, |v| v.parse().unwrap());
    let start = Instant::now();
    let corpora = generate(&spec)?;
    let (source, _) = train_source(&corpora.source_train, &base)?;
    println!("source trained in {:.1}s", start.elapsed().as_secs_f64());

    let settings = [("full", false, false), ("w/o aux", true, false), ("w/o gw", false, true), ("w/o both", true, true)];
    let mut scores = vec![Vec::new(); settings.len()];
    for seed in 0..seeds {
        let train = greedy_sample(&corpora.target_train, k, seed);
        for (i, (_, ablate_aux, ablate_gw)) in settings.iter().enumerate() {
            let config = TrainConfig {
                seed,
                ablate_aux: *ablate_aux,
                ablate_gw: *ablate_gw,
                ..base.clone()
            };
            let out = finetune(&source.tagger, &train, &config)?;
            scores[i].push(100.0 * evaluate(&out.checkpoint.tagger, &corpora.target_test)?.f1);
        }
        println!("seed {seed}: {:?}", scores.iter().map(|s| s[s.len() - 1]).collect::<Vec<_>>());
    }
    for ((name, _, _), s) in settings.iter().zip(&scores) {
        let a = aggregate(s);
        println!("{name:>9}: {:.2} +- {:.2}", a.mean, a.std);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
