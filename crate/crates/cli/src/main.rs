use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lst_core::data::{generate, greedy_sample, parse_conll, SynthSpec, TaggedCorpus};
use lst_core::graph::target_graph_from_batch;
use lst_core::gw::gromov_wasserstein_distances;
use lst_core::pipeline::{
    aggregate, build_source_graph, evaluate, finetune, sweep, train_source, Checkpoint,
    EmbeddingStore, EncoderMode, SweepParam, SweepRow, TrainConfig, TrainLog,
};
use lst_core::{Matrix, ProbabilisticTagger};

#[derive(Parser)]
#[command(name = "lst", version, about = "Label structure transfer for few-shot NER")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override values from the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_p: Option<usize>,
    #[arg(long)]
    embedding_file: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source tagger (token cross-entropy only).
    TrainSource {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-batch and per-epoch training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune a target tagger from a source checkpoint.
    Finetune {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablate_gw: bool,
        #[arg(long)]
        ablate_aux: bool,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Micro P/R/F1 of a checkpoint, printed as JSON.
    Evaluate {
        /// Checkpoint path; with --seeds, `{seed}` is replaced by 0..N-1.
        #[arg(long)]
        model: String,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Greedy few-shot sample with at least K entities per type.
    Sample {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the source label graph, and optionally the transport plan to a
    /// fine-tuned model's label graph.
    ExportGraph {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Fine-tuned checkpoint whose predictions give the target graph.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune and evaluate over a list of values of one hyperparameter.
    Sweep {
        /// temperature | edge_threshold | lambda1 | lambda2
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write synthetic source/target corpora.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<TrainConfig> {
    let mut c = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var("LST_SEED") {
        c.seed = seed.trim().parse().context("LST_SEED must be an unsigned integer")?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v; } )* };
    }
    set!(seed, epochs, learning_rate, batch_size, temperature, edge_threshold, lambda1, lambda2, epsilon, d_h, d_p);
    if let Some(f) = &o.embedding_file {
        c.embedding_file = Some(f.clone());
    }
    c.validate()?;
    Ok(c)
}

fn read_corpus(path: &Path) -> Result<TaggedCorpus> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let corpus = parse_conll(&text).with_context(|| format!("parsing {}", path.display()))?;
    if corpus.repairs > 0 {
        eprintln!("{}: repaired {} orphan I- tags", path.display(), corpus.repairs);
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn report(log: &TrainLog, path: Option<&Path>) -> Result<()> {
    for e in &log.epochs {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>3}  total {:.4}  cls {:.4}  aux {}  gw {}  gw-skipped {}  train-f1 {:.4}",
            e.epoch + 1,
            e.mean_total,
            e.mean_cls,
            opt(e.mean_aux),
            opt(e.mean_gw),
            e.gw_skipped_batches,
            e.train_f1
        );
    }
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(log)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource {
            train,
            config,
            out,
            log,
            overrides,
        } => {
            let config = load_config(config.as_deref(), &overrides)?;
            let corpus = read_corpus(&train)?;
            let (ck, train_log) = train_source(&corpus, &config)?;
            report(&train_log, log.as_deref())?;
            ck.save(&out)?;
            eprintln!("wrote {} (sha256 {})", out.display(), ck.sha256()?);
        }
        Command::Finetune {
            source_model,
            train,
            config,
            out,
            ablate_gw,
            ablate_aux,
            log,
            overrides,
        } => {
            let mut config = load_config(config.as_deref(), &overrides)?;
            config.ablate_gw |= ablate_gw;
            config.ablate_aux |= ablate_aux;
            let source = load_checkpoint(&source_model)?;
            let corpus = read_corpus(&train)?;
            let outcome = finetune(&source.tagger, &corpus, &config)?;
            report(&outcome.log, log.as_deref())?;
            outcome.checkpoint.save(&out)?;
            eprintln!("wrote {} (sha256 {})", out.display(), outcome.checkpoint.sha256()?);
        }
        Command::Evaluate { model, test, seeds } => {
            let corpus = read_corpus(&test)?;
            match seeds {
                None => {
                    let ck = load_checkpoint(Path::new(&model))?;
                    println!("{}", serde_json::to_string_pretty(&evaluate(&ck.tagger, &corpus)?)?);
                }
                Some(n) => {
                    if !model.contains("{seed}") {
                        bail!("--seeds needs a model path containing {{seed}}");
                    }
                    let mut runs = Vec::new();
                    for s in 0..n {
                        let path = model.replace("{seed}", &s.to_string());
                        let ck = load_checkpoint(Path::new(&path))?;
                        runs.push(evaluate(&ck.tagger, &corpus)?);
                    }
                    let f1: Vec<f64> = runs.iter().map(|m| m.f1).collect();
                    let agg = aggregate(&f1);
                    let out = json!({"runs": runs, "n": agg.n, "f1_mean": agg.mean, "f1_std": agg.std});
                    println!("{}", serde_json::to_string_pretty(&out)?);
                }
            }
        }
        Command::Sample { train, k, seed, out } => {
            let corpus = read_corpus(&train)?;
            let sampled = greedy_sample(&corpus, k, seed);
            fs::write(&out, sampled.to_conll())?;
            eprintln!("sampled {} of {} sentences", sampled.len(), corpus.len());
        }
        Command::ExportGraph {
            source_model,
            train,
            config,
            out,
            plan,
            model,
            overrides,
        } => {
            let config = load_config(config.as_deref(), &overrides)?;
            let mut source = load_checkpoint(&source_model)?;
            if config.encoder_mode == EncoderMode::File {
                let path = config.embedding_file.as_ref().expect("validated");
                source.tagger.embeddings = Some(EmbeddingStore::load(path)?);
            }
            let corpus = read_corpus(&train)?;
            let (graph, _) = build_source_graph(&source.tagger, &corpus, &config)?;
            fs::write(&out, graph.to_export_json())?;
            if let Some(plan_path) = plan {
                let Some(model_path) = model else {
                    bail!("--plan needs --model (a fine-tuned checkpoint)");
                };
                let target = load_checkpoint(&model_path)?.tagger;
                let mut rows = Vec::new();
                let mut gold = Vec::new();
                for s in &corpus.sentences {
                    rows.extend(target.token_logits(&s.tokens)?.to_rows());
                    for ty in s.token_types() {
                        gold.push(ty.and_then(|t| target.tag_set.label_index(&t)));
                    }
                }
                let logits = Matrix::from_rows(&rows)?;
                let Some(tg) = target_graph_from_batch(
                    &logits,
                    target.class_types(),
                    target.labels(),
                    &gold,
                    config.temperature,
                    config.edge_threshold,
                )?
                else {
                    bail!("target graph is degenerate; no plan to export");
                };
                let sub = graph.restrict(tg.labels())?;
                let res = gromov_wasserstein_distances(sub.distances(), tg.distances(), &config.gw_settings())?;
                fs::write(&plan_path, res.plan.to_csv(sub.labels(), tg.labels()))?;
                eprintln!("gw distance {:.6}", res.value);
            }
        }
        Command::Sweep {
            param,
            values,
            source_model,
            train,
            test,
            config,
            seeds,
            overrides,
        } => {
            let param: SweepParam = param.parse()?;
            if values.is_empty() {
                bail!("--values must not be empty");
            }
            let config = load_config(config.as_deref(), &overrides)?;
            let source = load_checkpoint(&source_model)?;
            let train = read_corpus(&train)?;
            let test = read_corpus(&test)?;
            let rows = sweep(param, &values, &config, &source.tagger, &train, &test, seeds)?;
            println!("{}", SweepRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.to_csv(param));
            }
        }
        Command::Synth { spec, out_dir } => {
            let spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SynthSpec::default(),
            };
            let c = generate(&spec)?;
            fs::create_dir_all(&out_dir)?;
            for (name, corpus) in [
                ("source_train", &c.source_train),
                ("target_train", &c.target_train),
                ("target_dev", &c.target_dev),
                ("target_test", &c.target_test),
            ] {
                fs::write(out_dir.join(format!("{name}.conll")), corpus.to_conll())?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
