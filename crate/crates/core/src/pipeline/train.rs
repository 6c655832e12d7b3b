use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::config::{EncoderMode, TrainConfig};
use super::eval::evaluate;
use super::model::{EmbeddingStore, Tagger, Vocab};
use crate::data::{Sentence, TagSet, TaggedCorpus};
use crate::error::{input_err, Error, Result};
use crate::fusion::{
    auxiliary_loss, classification_loss, forward_sentence, sentence_vector, BoundModel,
    FusionParams, Linear, ModelParams, ToyEncoder,
};
use crate::graph::{
    estimate_conditionals, target_graph_on_tape, ConditionalTable, LabelGraph, ProbabilisticTagger,
};
use crate::gw::{gromov_wasserstein_distances, GwResult};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// How the transport plan of the graph-matching term is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum GwPlanMode {
    /// Run the solver on the current target graph.
    Solve,
    /// Use this plan (source labels x target labels of the batch).
    Fixed(Matrix),
}

/// One batch's objective recorded on a tape.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub cls: Var,
    pub aux: Option<Var>,
    pub gw: Option<Var>,
    pub gw_result: Option<GwResult>,
    /// Graph matching was enabled but the batch graph was unusable.
    pub gw_skipped: bool,
    pub target_graph: Option<LabelGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub cls: f64,
    pub aux: Option<f64>,
    pub gw: Option<f64>,
    pub total: f64,
    pub gw_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_cls: f64,
    pub mean_aux: Option<f64>,
    pub mean_gw: Option<f64>,
    pub mean_total: f64,
    pub gw_skipped_batches: usize,
    /// Micro-F1 on the training corpus after the epoch.
    pub train_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub source_table: ConditionalTable,
}

/// Gold entity type index per token, flattened over `batch`.
fn gold_type_indices(tag_set: &TagSet, batch: &[&Sentence]) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::new();
    for s in batch {
        for ty in s.token_types() {
            out.push(match ty {
                None => None,
                Some(t) => Some(
                    tag_set
                        .label_index(&t)
                        .ok_or_else(|| Error::Input(format!("label {t} outside the tag set")))?,
                ),
            });
        }
    }
    Ok(out)
}

/// `L_cls + lambda1 L_aux + lambda2 D_gw` for one batch.
///
/// Token cross-entropy is averaged over all tokens of the batch and the
/// auxiliary loss over sentences and labels. A term is left out when its
/// weight is zero, its ablation flag is set, or (for graph matching) the
/// batch has fewer than two gold types or a degenerate graph.
pub fn batch_objective(
    tape: &mut Tape,
    tagger: &Tagger,
    bound: &BoundModel,
    batch: &[&Sentence],
    adjacency: Option<&Matrix>,
    plan_mode: &GwPlanMode,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return input_err("empty batch");
    }
    let config = &tagger.config;
    let labels = tagger.labels();
    let mut logits = Vec::with_capacity(batch.len());
    let mut sentence_vecs = Vec::with_capacity(batch.len());
    let mut gold = Vec::new();
    for s in batch {
        let input = tagger.encoder_input(&s.tokens)?;
        let fwd = forward_sentence(tape, bound, &input, adjacency)?;
        logits.push(fwd.logits);
        sentence_vecs.push(sentence_vector(tape, fwd.h_prime));
        gold.extend(tagger.tag_set.encode(&s.tags)?);
    }
    let all_logits = tape.concat_rows(&logits)?;
    let cls = classification_loss(tape, all_logits, &gold)?;
    let mut total = cls;

    let mut aux = None;
    if config.uses_aux() {
        if let Some(head) = bound.fc_aux {
            let mut present = Matrix::zeros(batch.len(), labels.len());
            for (i, s) in batch.iter().enumerate() {
                for t in s.token_types().into_iter().flatten() {
                    if let Some(l) = tagger.tag_set.label_index(&t) {
                        present.set(i, l, 1.0);
                    }
                }
            }
            let pooled = tape.concat_rows(&sentence_vecs)?;
            let z = head.apply(tape, pooled)?;
            let l = auxiliary_loss(tape, z, &present)?;
            let weighted = tape.scale(l, config.lambda1);
            total = tape.add(total, weighted)?;
            aux = Some(l);
        }
    }

    let mut gw = None;
    let mut gw_result = None;
    let mut gw_skipped = false;
    let mut target_graph = None;
    if config.uses_gw() {
        if let Some(source) = &tagger.source_graph {
            let gold_types = gold_type_indices(&tagger.tag_set, batch)?;
            let tg = target_graph_on_tape(
                tape,
                all_logits,
                tagger.class_types(),
                labels,
                &gold_types,
                config.temperature,
                config.edge_threshold,
            )?;
            let sub = match &tg {
                Some(tg) => Some(source.restrict(tg.graph.labels())?),
                None => None,
            };
            match (tg, sub) {
                (Some(tg), Some(sub)) if !sub.is_degenerate() => {
                    let plan = match plan_mode {
                        GwPlanMode::Solve => {
                            let res = gromov_wasserstein_distances(
                                sub.distances(),
                                tape.value(tg.distances),
                                &config.gw_settings(),
                            )?;
                            let plan = res.plan.matrix.clone();
                            gw_result = Some(res);
                            plan
                        }
                        GwPlanMode::Fixed(m) => m.clone(),
                    };
                    let d = tape.gw_fixed_plan(tg.distances, sub.distances(), &plan)?;
                    let weighted = tape.scale(d, config.lambda2);
                    total = tape.add(total, weighted)?;
                    gw = Some(d);
                    target_graph = Some(tg.graph);
                }
                _ => gw_skipped = true,
            }
        }
    }

    Ok(BatchLoss {
        total,
        cls,
        aux,
        gw,
        gw_result,
        gw_skipped,
        target_graph,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Plain SGD over seeded shuffles of `corpus`.
fn run_epochs(tagger: &mut Tagger, corpus: &TaggedCorpus, rng: &mut ChaCha8Rng) -> Result<TrainLog> {
    let config = tagger.config.clone();
    let adjacency = tagger.fusion_adjacency()?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let first = log.batches.len();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &corpus.sentences[i]).collect();
            let mut tape = Tape::new();
            let bound = tagger.params.bind(&mut tape);
            let loss = batch_objective(
                &mut tape,
                tagger,
                &bound,
                &batch,
                adjacency.as_ref(),
                &GwPlanMode::Solve,
            )?;
            let total = tape.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = tape.backward(loss.total);
            for (param, var) in tagger.params.tensors_mut().into_iter().zip(bound.vars()) {
                if let Some(g) = grads.get(var) {
                    param.add_assign(&g.scale(-config.learning_rate));
                }
            }
            if !tagger.params.all_finite() {
                return Err(Error::Numeric(format!("non-finite parameters in epoch {epoch}")));
            }
            log.batches.push(BatchRecord {
                epoch,
                cls: tape.scalar(loss.cls),
                aux: loss.aux.map(|v| tape.scalar(v)),
                gw: loss.gw.map(|v| tape.scalar(v)),
                total,
                gw_skipped: loss.gw_skipped,
            });
        }
        let records = &log.batches[first..];
        let f1 = evaluate(tagger, corpus)?.f1;
        log.epochs.push(EpochRecord {
            epoch,
            mean_cls: mean(records.iter().map(|r| r.cls)).unwrap_or(0.0),
            mean_aux: mean(records.iter().filter_map(|r| r.aux)),
            mean_gw: mean(records.iter().filter_map(|r| r.gw)),
            mean_total: mean(records.iter().map(|r| r.total)).unwrap_or(0.0),
            gw_skipped_batches: records.iter().filter(|r| r.gw_skipped).count(),
            train_f1: f1,
        });
    }
    Ok(log)
}

fn check_corpus(corpus: &TaggedCorpus, what: &str) -> Result<()> {
    if corpus.is_empty() {
        return input_err(format!("{what} corpus is empty"));
    }
    if corpus.label_set.is_empty() {
        return input_err(format!("{what} corpus has no entities"));
    }
    Ok(())
}

fn file_embeddings(config: &TrainConfig) -> Result<Option<EmbeddingStore>> {
    match (config.encoder_mode, &config.embedding_file) {
        (EncoderMode::Toy, _) => Ok(None),
        (EncoderMode::File, Some(path)) => Ok(Some(EmbeddingStore::load(path)?)),
        (EncoderMode::File, None) => input_err("file encoder mode needs embedding_file"),
    }
}

/// Trains the source tagger with token cross-entropy only.
pub fn train_source(corpus: &TaggedCorpus, config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    check_corpus(corpus, "source")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tag_set = TagSet::new(&corpus.label_set);
    let embeddings = file_embeddings(config)?;
    let (vocab, encoder, d_h) = match &embeddings {
        Some(store) => (Vocab::default(), None, store.dim()),
        None => {
            let vocab = Vocab::from_sentences(&corpus.sentences);
            let enc = ToyEncoder::init(vocab.len(), config.d_h, &mut rng);
            (vocab, Some(enc), config.d_h)
        }
    };
    let params = ModelParams {
        encoder,
        fusion: None,
        fc_cls: Linear::init(d_h, tag_set.len(), &mut rng),
        fc_aux: None,
    };
    let mut tagger = Tagger::new(config.clone(), tag_set, vocab, params, None);
    tagger.embeddings = embeddings;
    let log = run_epochs(&mut tagger, corpus, &mut rng)?;
    Ok((
        Checkpoint {
            kind: CheckpointKind::Source,
            tagger,
        },
        log,
    ))
}

/// Source label graph over the target labels: conditional distributions of
/// the source tagger's predictions on target tokens of each gold type.
pub fn build_source_graph(
    source: &Tagger,
    corpus: &TaggedCorpus,
    config: &TrainConfig,
) -> Result<(LabelGraph, ConditionalTable)> {
    config.validate()?;
    check_corpus(corpus, "target")?;
    let sentences: Vec<Vec<String>> = corpus.sentences.iter().map(|s| s.tokens.clone()).collect();
    let gold: Vec<Vec<Option<String>>> = corpus.sentences.iter().map(|s| s.token_types()).collect();
    let table = estimate_conditionals(source, &sentences, &gold, config.temperature, &corpus.label_set)?;
    let graph = LabelGraph::from_table(&table, config.edge_threshold)?;
    Ok((graph, table))
}

/// Fine-tunes a target tagger from the source tagger and a (few-shot)
/// target corpus.
///
/// The encoder starts from the source tagger's, with fresh rows for target
/// tokens it has not seen; fusion layers and both heads are newly
/// initialised. The source label graph is estimated once and frozen.
pub fn finetune(
    source: &Tagger,
    corpus: &TaggedCorpus,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    check_corpus(corpus, "target")?;
    let mut source = source.clone();
    let embeddings = file_embeddings(config)?;
    if embeddings.is_some() {
        source.embeddings = embeddings.clone();
    }
    if source.params.encoder.is_none() && source.embeddings.is_none() {
        return input_err("source tagger uses file embeddings but none were given");
    }
    let (graph, table) = build_source_graph(&source, corpus, config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vocab = source.vocab.clone();
    let mut encoder = source.params.encoder.clone();
    let d_h = match &mut encoder {
        Some(enc) => {
            vocab.extend(&corpus.sentences);
            enc.grow_vocab(vocab.len(), &mut rng);
            enc.d_h()
        }
        None => source.embeddings.as_ref().map(|s| s.dim()).unwrap_or(config.d_h),
    };
    let tag_set = TagSet::new(&corpus.label_set);
    let n_labels = tag_set.labels().len();
    let params = ModelParams {
        encoder,
        fusion: Some(FusionParams::init(n_labels, d_h, config.d_p, &mut rng)),
        fc_cls: Linear::init(d_h, tag_set.len(), &mut rng),
        fc_aux: Some(Linear::init(d_h, n_labels, &mut rng)),
    };
    let mut tagger = Tagger::new(config.clone(), tag_set, vocab, params, Some(graph));
    tagger.embeddings = source.embeddings.clone();
    let log = run_epochs(&mut tagger, corpus, &mut rng)?;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            kind: CheckpointKind::Target,
            tagger,
        },
        log,
        source_table: table,
    })
}
