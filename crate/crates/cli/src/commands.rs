use std::path::{Path, PathBuf};

use candle_core::Device;
use serde_json::{json, Value};
use supportmem::artifacts::{load_graph, load_reasoner, load_tokenizer, save_frequency, PreparedLayout};
use supportmem::concepts::{ConceptGraph, FrequencyTable, MentionScanner};
use supportmem::corpus::{
    load_corpus, read_samples_ndjson, split_corpus, split_from_file, write_samples_ndjson, build_all_samples,
    Conversation, SplitFile, StrategyTaxonomy,
};
use supportmem::emotion::{build_detector, EmotionCache, EmotionDetector};
use supportmem::evalsuite::{evaluate_decoded, evaluate_files, DecodedOutput, DecodedSample};
use supportmem::netcore::pretrained::{config_from_json, load_bart_weights};
use supportmem::trainer::checkpoint::load_for_inference;
use supportmem::trainer::{checkpoint_dir, decode_all, perplexity, Ablation, Trainer};
use supportmem::{
    ConceptReasoner, ContextAssembler, ContextPipeline, EncodedSample, Error, EscSample, StrategyMemoryModel,
    SystemConfig, TextTokenizer, WordVocab,
};

use crate::{Command, ConceptsAction, Failure, ENV_RUNS_DIR};

/// Resolved config written into every run directory.
pub const RUN_CONFIG: &str = "config.json";
pub const DECODED: &str = "decoded.json";
pub const METRICS: &str = "metrics.json";

type Outcome = Result<Value, Failure>;

pub fn dispatch(command: Command, cfg: SystemConfig) -> Outcome {
    match command {
        Command::Prepare { .. } => prepare(&cfg),
        Command::Concepts {
            action: ConceptsAction::BuildCache { input, dump, .. },
        } => build_cache(&cfg, input, &dump),
        Command::Train { run, ablation, resume } => train(cfg, run, ablation.as_deref(), resume),
        Command::Decode {
            run,
            split,
            checkpoint,
            out,
        } => decode(&cfg, &run, &split, &checkpoint, out),
        Command::Evaluate { run, hyp, refs } => evaluate(&cfg, run, hyp, refs),
        Command::Serve { run, .. } => serve(cfg, run),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn layout(cfg: &SystemConfig) -> Result<PreparedLayout, Failure> {
    cfg.data
        .prepared_dir
        .clone()
        .map(PreparedLayout::new)
        .ok_or_else(|| usage(format!("data.prepared_dir is not set (use --set data.prepared_dir=..., or {})", crate::ENV_PREPARED_DIR)))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(io(path))
}

fn texts_of(convs: &[Conversation]) -> Vec<&str> {
    convs
        .iter()
        .flat_map(|c| std::iter::once(c.situation.as_str()).chain(c.utterances.iter().map(|u| u.text.as_str())))
        .collect()
}

fn ids(convs: &[Conversation]) -> Vec<usize> {
    convs.iter().map(|c| c.id).collect()
}

fn prepare(cfg: &SystemConfig) -> Outcome {
    let corpus = cfg
        .data
        .corpus
        .as_ref()
        .ok_or_else(|| usage("data.corpus is not set (use --corpus)"))?;
    let layout = layout(cfg)?;
    std::fs::create_dir_all(&layout.root).map_err(io(&layout.root))?;

    let taxonomy = StrategyTaxonomy::esconv();
    let report = load_corpus(corpus, &taxonomy, &cfg.data.load_options())?;
    for e in &report.errors {
        tracing::warn!("skipped {e}");
    }
    if report.conversations.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no usable conversations", corpus.display())).into());
    }
    let split = match &cfg.data.split_file {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(io(p))?;
            split_from_file(&report.conversations, &serde_json::from_slice::<SplitFile>(&bytes).map_err(Error::from)?)?
        }
        None => split_corpus(&report.conversations, cfg.data.split_seed, &cfg.data.split_ratio)?,
    };
    write_json(
        &layout.split(),
        &SplitFile {
            train: ids(&split.train),
            valid: ids(&split.valid),
            test: ids(&split.test),
        },
    )?;

    let mut sample_counts = serde_json::Map::new();
    for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        let samples = build_all_samples(part);
        write_samples_ndjson(layout.samples(name), &samples)?;
        sample_counts.insert(name.into(), json!(samples.len()));
    }

    let detector = build_detector(&cfg.emotion)?;
    let cache = EmotionCache::default();
    for c in &report.conversations {
        for (turn, u) in c.utterances.iter().enumerate() {
            cache.get_or_detect(c.id, turn, &u.text, detector.as_ref())?;
        }
    }
    cache.save(layout.emotions())?;

    let train_texts = texts_of(&split.train);
    let vocab_size = match &cfg.model.pretrained {
        Some(_) => None,
        None => {
            let vocab = WordVocab::build(train_texts.iter().copied(), cfg.data.min_word_count);
            vocab.save(layout.vocab())?;
            Some(vocab.tokens().len())
        }
    };
    let concepts = match &cfg.concepts.graph_path {
        Some(p) => {
            let graph = load_graph(p, &cfg.concepts.lang)?;
            let scanner = MentionScanner::default().with_lemmatize(cfg.concepts.lemmatize);
            let table = FrequencyTable::build(train_texts.iter().copied(), &graph, &scanner, cfg.concepts.top_k);
            save_frequency(&layout.frequency(), &table)?;
            Some(table.counts.len())
        }
        None => None,
    };

    let summary = json!({
        "prepared_dir": layout.root,
        "conversations": report.conversations.len(),
        "skipped_records": report.errors.len(),
        "utterances": report.utterance_count(),
        "split": { "train": split.train.len(), "valid": split.valid.len(), "test": split.test.len() },
        "samples": sample_counts,
        "emotion_labels": cache.len(),
        "vocab_size": vocab_size,
        "training_concepts": concepts,
    });
    write_json(&layout.report(), &summary)?;
    cfg.save(&layout.root.join(RUN_CONFIG))?;
    Ok(summary)
}

fn build_cache(cfg: &SystemConfig, input: Option<PathBuf>, dump: &Path) -> Outcome {
    let input = input
        .or_else(|| cfg.concepts.graph_path.clone())
        .ok_or_else(|| usage("no assertions file (use --input or concepts.graph_path)"))?;
    let (graph, stats) = ConceptGraph::ingest_file(&input, &cfg.concepts.lang)?;
    graph.save_cache(dump)?;
    Ok(json!({
        "cache": dump,
        "nodes": graph.node_count(),
        "edges": graph.edge_count(),
        "ingest": stats,
    }))
}

/// Emotion labels, concepts and tokenization for a list of samples.
struct Encoder {
    tokenizer: Box<dyn TextTokenizer>,
    detector: Box<dyn EmotionDetector>,
    reasoner: Option<ConceptReasoner>,
    cache: Option<EmotionCache>,
    features: supportmem::FeatureConfig,
}

impl Encoder {
    fn new(cfg: &SystemConfig, layout: &PreparedLayout) -> Result<Self, Error> {
        let cache_path = layout.emotions();
        Ok(Encoder {
            tokenizer: load_tokenizer(cfg, layout)?,
            detector: build_detector(&cfg.emotion)?,
            reasoner: load_reasoner(cfg, layout)?,
            cache: if cache_path.exists() {
                Some(EmotionCache::load(&cache_path)?)
            } else {
                None
            },
            features: cfg.feature_config(),
        })
    }

    fn encode(&self, samples: &[EscSample]) -> Result<Vec<EncodedSample>, Error> {
        let pipeline = ContextPipeline {
            detector: self.detector.as_ref(),
            reasoner: self.reasoner.as_ref(),
            assembler: ContextAssembler {
                tokenizer: self.tokenizer.as_ref(),
                config: &self.features,
            },
        };
        samples.iter().map(|s| pipeline.encode_sample(s, self.cache.as_ref())).collect()
    }

    fn split(&self, layout: &PreparedLayout, name: &str) -> Result<Vec<EncodedSample>, Error> {
        self.encode(&read_samples_ndjson(layout.samples(name))?)
    }
}

fn default_run_dir(ablation: Option<Ablation>) -> PathBuf {
    let base = std::env::var_os(ENV_RUNS_DIR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    base.join(ablation.map_or("full", Ablation::name))
}

fn train(mut cfg: SystemConfig, run: Option<PathBuf>, ablation: Option<&str>, resume: bool) -> Outcome {
    let ablation = ablation.map(str::parse::<Ablation>).transpose()?;
    if let Some(a) = ablation {
        a.apply(&mut cfg.trainer);
    }
    let run = run.unwrap_or_else(|| default_run_dir(ablation));
    let layout = layout(&cfg)?;
    let encoder = Encoder::new(&cfg, &layout)?;

    cfg.model = match &cfg.model.pretrained {
        Some(dir) => config_from_json(&dir.join("config.json"), &cfg.model)?,
        None => supportmem::ModelConfig {
            vocab_size: encoder.tokenizer.vocab_size(),
            ..cfg.model.clone()
        },
    };
    std::fs::create_dir_all(&run).map_err(io(&run))?;
    cfg.save(&run.join(RUN_CONFIG))?;

    let model = StrategyMemoryModel::new(cfg.model.clone(), &Device::Cpu)?;
    if let Some(dir) = &cfg.model.pretrained {
        let report = load_bart_weights(&model, &dir.join("model.safetensors"))?;
        tracing::info!(loaded = report.loaded.len(), "pretrained weights");
    }
    let train = encoder.split(&layout, "train")?;
    let valid = encoder.split(&layout, "valid")?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()).into());
    }
    let steps_per_epoch = train.len().div_ceil(cfg.trainer.batch_size);
    let mut trainer = Trainer::new(&model, cfg.trainer.clone(), encoder.tokenizer.specials(), steps_per_epoch)?;
    let last = checkpoint_dir(&run, "last");
    if resume && last.join("meta.json").exists() {
        trainer.resume(&last)?;
        tracing::info!(epoch = trainer.state.epoch, "resumed");
    }
    let report = trainer.fit(&train, &valid, Some(&run))?;
    Ok(json!({
        "run": run,
        "ablation": ablation.map(Ablation::name),
        "epochs": trainer.state.epoch,
        "steps": report.steps,
        "best_valid_ppl": report.best_valid_ppl,
        "best_epoch": report.best_epoch,
        "last_train_loss": report.epochs.last().map(|e| e.train_loss),
    }))
}

fn decode(cfg: &SystemConfig, run: &Path, split: &str, which: &str, out: Option<PathBuf>) -> Outcome {
    let layout = layout(cfg)?;
    let mut ckpt = checkpoint_dir(run, which);
    if !ckpt.exists() && which == "best" {
        ckpt = checkpoint_dir(run, "last");
    }
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", ckpt.display())).into());
    }
    let (model, bank, _) = load_for_inference(&ckpt, &Device::Cpu)?;
    let encoder = Encoder::new(cfg, &layout)?;
    let raw = read_samples_ndjson(layout.samples(split))?;
    let encoded = encoder.encode(&raw)?;
    if encoded.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} has no samples")).into());
    }
    let specials = encoder.tokenizer.specials();
    let bank = (!cfg.trainer.no_mem).then_some(&bank);
    let batch = cfg.trainer.batch_size;
    let ppl = perplexity(&model, bank, &encoded, specials, batch)?;
    let decoded = decode_all(&model, bank, &encoded, &cfg.decode, specials, batch)?;

    let taxonomy = StrategyTaxonomy::esconv();
    let name = |g: usize| taxonomy.name(supportmem::StrategyId(g)).unwrap_or("?").to_string();
    let samples: Vec<DecodedSample> = raw
        .iter()
        .zip(&decoded)
        .map(|(s, d)| DecodedSample {
            conv_id: s.conv_id,
            turn: s.turn,
            reference: s.response.clone(),
            hypothesis: encoder.tokenizer.decode(&d.ids),
            gold_strategy: name(s.strategy.0),
            predicted_strategy: name(d.predicted),
        })
        .collect();
    let correct = samples.iter().filter(|s| s.gold_strategy == s.predicted_strategy).count();
    let path = out.unwrap_or_else(|| run.join(DECODED));
    write_json(&path, &DecodedOutput { ppl: Some(ppl), samples })?;
    Ok(json!({
        "decoded": path,
        "checkpoint": ckpt,
        "samples": decoded.len(),
        "ppl": ppl,
        "strategy_accuracy": correct as f64 / decoded.len() as f64,
    }))
}

fn evaluate(cfg: &SystemConfig, run: Option<PathBuf>, hyp: Option<PathBuf>, refs: Option<PathBuf>) -> Outcome {
    let report = match (run, hyp, refs) {
        (_, Some(h), Some(r)) => evaluate_files(&h, &r)?,
        (Some(run), _, _) => {
            let path = run.join(DECODED);
            if !path.exists() {
                decode(cfg, &run, "test", "best", None)?;
            }
            let report = evaluate_decoded(&path)?;
            write_json(&run.join(METRICS), &report)?;
            report
        }
        _ => return Err(usage("evaluate needs --run <dir> or --hyp <file> --ref <file>")),
    };
    Ok(serde_json::to_value(report).map_err(Error::from)?)
}

fn serve(mut cfg: SystemConfig, run: Option<PathBuf>) -> Outcome {
    if let Some(run) = &run {
        if cfg.gateway.checkpoint.is_none() {
            let best = checkpoint_dir(run, "best");
            cfg.gateway.checkpoint = Some(if best.exists() { best } else { checkpoint_dir(run, "last") });
        }
    }
    let rt = tokio::runtime::Runtime::new().map_err(io(Path::new("tokio runtime")))?;
    rt.block_on(supportmem::gateway::serve(&cfg))?;
    Ok(json!({ "stopped": true }))
}
