//! The five subcommands. Everything numeric runs at single precision;
//! checkpoints store `f32` payloads regardless, so artifacts stay
//! interchangeable with double-precision library runs.

use crate::config::{self};
use crate::{fail, Fail, Phase, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_EVAL};
use clap::Args;
use dmf::corpus::load_corpus;
use dmf::metrics::{corpus_report, ReferenceSet};
use dmf::model::{score_clips, score_sequence, GenMode, Model, Variant};
use dmf::synth;
use dmf::vocab::Vocabulary;
use dmf::{Error, Rng};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

type P = f32;

#[derive(Args)]
pub struct DatasetGenArgs {
    /// JSON run configuration; missing fields fall back to defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory to create
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed override
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_videos: Option<usize>,
    /// Trailing videos held out as the test split
    #[arg(long)]
    pub test_videos: Option<usize>,
    /// Seconds per video; frames render at 1 fps
    #[arg(long)]
    pub video_length_s: Option<usize>,
    /// Frames per clip
    #[arg(long)]
    pub n: Option<usize>,
    /// Context comments per clip
    #[arg(long)]
    pub m: Option<usize>,
}

pub fn dataset_gen(args: DatasetGenArgs) -> Result<(), Fail> {
    let mut cfg = config::load(args.config.as_deref())?;
    let scene = &mut cfg.scene;
    if let Some(v) = args.seed {
        scene.seed = v;
    }
    if let Some(v) = args.num_videos {
        scene.num_videos = v;
    }
    if let Some(v) = args.test_videos {
        scene.test_videos = v;
    }
    if let Some(v) = args.video_length_s {
        scene.video_length_s = v;
    }
    if let Some(v) = args.n {
        scene.n = v;
    }
    if let Some(v) = args.m {
        scene.m = v;
    }
    cfg.scene.validate().phase(EXIT_CONFIG)?;
    let out = args
        .out
        .or(cfg.out)
        .ok_or_else(|| fail(EXIT_CONFIG, "--out (or `out` in the config file) is required"))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| fail(EXIT_DATA, format!("cannot create {}: {e}", out.display())))?;
    let summary = synth::generate_corpus(&cfg.scene, &out).phase(EXIT_DATA)?;
    config::echo_json(&cfg.scene, &out.join("scene_spec.json"))?;

    println!("videos       {}", summary.videos);
    println!("frames       {}", summary.frames);
    println!("train clips  {}", summary.train_clips);
    println!("test clips   {}", summary.test_clips);
    println!("vocab        {}", summary.vocab_size);
    if summary.skipped_short_window + summary.skipped_few_comments > 0 {
        println!(
            "skipped      {} short-window, {} few-comments",
            summary.skipped_short_window, summary.skipped_few_comments
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct BuildVocabArgs {
    /// Text file of comments, one per line, whitespace tokenized
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Keep at most this many distinct tokens
    #[arg(long, default_value_t = 34_100)]
    pub max_size: usize,
}

pub fn build_vocab(args: BuildVocabArgs) -> Result<(), Fail> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| fail(EXIT_DATA, format!("cannot read {}: {e}", args.input.display())))?;
    let vocab = Vocabulary::build(text.lines(), args.max_size).phase(EXIT_DATA)?;
    vocab.save(&args.out).phase(EXIT_DATA)?;
    println!("{} tokens -> {}", vocab.size(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; missing fields fall back to defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory for checkpoints, logs, and the resolved config
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validation manifest; defaults to test.jsonl next to the corpus
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// proposal, f2c, m2c, or c2c
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate every this many steps; 0 validates at epoch ends
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Probability of feeding gold tokens while decoding
    #[arg(long)]
    pub teacher_forcing: Option<f64>,
}

pub fn train(args: TrainArgs) -> Result<(), Fail> {
    let mut cfg = config::load(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = &args.variant {
        t.variant = Variant::parse(v).phase(EXIT_CONFIG)?;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.teacher_forcing {
        t.teacher_forcing_ratio = v;
    }
    cfg.train.validate().phase(EXIT_CONFIG)?;
    let corpus = args
        .corpus
        .or(cfg.corpus)
        .ok_or_else(|| fail(EXIT_CONFIG, "--corpus (or `corpus` in the config file) is required"))?;
    let out = args
        .out
        .or(cfg.out)
        .ok_or_else(|| fail(EXIT_CONFIG, "--out (or `out` in the config file) is required"))?;

    let (train_clips, vocab) = load_corpus(&corpus).phase(EXIT_DATA)?;
    let val_path = args.val.or_else(|| {
        let sibling = corpus.with_file_name("test.jsonl");
        (sibling != corpus && sibling.exists()).then_some(sibling)
    });
    let val_clips = match &val_path {
        Some(p) => load_corpus(p).phase(EXIT_DATA)?.0,
        None => Vec::new(),
    };

    std::fs::create_dir_all(&out)
        .map_err(|e| fail(EXIT_DATA, format!("cannot create {}: {e}", out.display())))?;
    config::echo_json(&cfg.train, &out.join("train_config.json"))?;

    let outcome =
        dmf::train::run_training::<P>(&train_clips, &val_clips, &vocab, &cfg.train).phase(EXIT_DATA)?;

    outcome
        .model
        .save(&out.join("checkpoint.dmf"))
        .phase(EXIT_CHECKPOINT)?;
    if let Some((_, best)) = &outcome.best {
        best.save(&out.join("best.dmf")).phase(EXIT_CHECKPOINT)?;
    }
    write_text(&out.join("train_log.csv"), &outcome.log.train_csv())?;
    write_text(&out.join("eval_log.csv"), &outcome.log.eval_csv())?;

    println!(
        "{} {} clips, {} steps",
        cfg.train.variant.name(),
        train_clips.len(),
        outcome.log.steps.len()
    );
    if let Some(last) = outcome.log.steps.last() {
        println!("final loss   {:.6}", last.loss);
    }
    if let Some((ppl, _)) = &outcome.best {
        println!("best val ppl {ppl:.4}");
    }
    println!("checkpoint   {}", out.join("checkpoint.dmf").display());
    Ok(())
}

fn parse_mode(s: &str) -> dmf::Result<GenMode> {
    if s == "greedy" {
        return Ok(GenMode::Greedy);
    }
    if let Some(k) = s.strip_prefix("beam:") {
        let width = k
            .parse()
            .map_err(|_| Error::Config(format!("beam width {k:?} is not an integer")))?;
        return Ok(GenMode::Beam(width));
    }
    if let Some(t) = s.strip_prefix("sample:") {
        let temp = t
            .parse()
            .map_err(|_| Error::Config(format!("temperature {t:?} is not a number")))?;
        return Ok(GenMode::Sample(temp));
    }
    Err(Error::Config(format!(
        "unknown mode {s:?}; use greedy, beam:K, or sample:T"
    )))
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Checkpoint to decode with
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest providing clips and the vocabulary
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Generations file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration used to size the model; must match training
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// greedy, beam:K, or sample:T
    #[arg(long, default_value = "greedy")]
    pub mode: String,
    /// Generation ceiling in tokens
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Teacher-forced gold log-probabilities; defaults next to --out
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Sampling seed; defaults to the training seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct GenLine<'a> {
    clip: usize,
    tokens: Vec<&'a str>,
    logprob: f64,
}

pub fn generate(args: GenerateArgs) -> Result<(), Fail> {
    let cfg = config::load(args.config.as_deref())?;
    let mode = parse_mode(&args.mode).phase(EXIT_CONFIG)?;
    let corpus = args
        .corpus
        .or(cfg.corpus)
        .ok_or_else(|| fail(EXIT_CONFIG, "--corpus (or `corpus` in the config file) is required"))?;

    let (clips, vocab) = load_corpus(&corpus).phase(EXIT_DATA)?;
    let dims = cfg.train.resolved_dims(vocab.size()).phase(EXIT_CONFIG)?;
    let model = Model::<P>::load(&args.checkpoint, &dims).phase(EXIT_CHECKPOINT)?;

    let mut rng = Rng::derive(args.seed.unwrap_or(cfg.train.seed), 0x67656e);
    let mut lines = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let ids = dmf::model::generate(&model, clip, mode, args.max_len, &mut rng).phase(EXIT_DATA)?;
        let tokens = ids
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<dmf::Result<Vec<_>>>()
            .phase(EXIT_DATA)?;
        let logprob = score_sequence(&model, clip, &ids).phase(EXIT_DATA)?.iter().sum();
        let line = GenLine {
            clip: i,
            tokens,
            logprob,
        };
        writeln!(lines, "{}", serde_json::to_string(&line).expect("line serializes")).unwrap();
    }
    write_text(&args.out, &lines)?;

    // Teacher-forced log-probabilities of the gold targets, for the
    // perplexity half of `evaluate`.
    let probs_path = args
        .probs
        .unwrap_or_else(|| args.out.with_extension("probs.jsonl"));
    let mut probs = String::new();
    for scored in score_clips(&model, &clips).phase(EXIT_DATA)? {
        writeln!(probs, "{}", serde_json::to_string(&scored.ln_probs).expect("floats serialize"))
            .unwrap();
    }
    write_text(&probs_path, &probs)?;

    println!("{} comments -> {}", clips.len(), args.out.display());
    println!("gold log-probs -> {}", probs_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Generations file from `generate`
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference pools, one JSON array of token arrays per line
    #[arg(long)]
    pub refs: PathBuf,
    /// Gold log-probability streams, one JSON array per line
    #[arg(long)]
    pub probs: PathBuf,
    /// Report JSON destination
    #[arg(long)]
    pub out: PathBuf,
    /// Mean of per-sentence perplexities instead of token pooling
    #[arg(long)]
    pub per_sentence: bool,
}

#[derive(Deserialize)]
struct CandLine {
    tokens: Vec<String>,
}

/// BLEU is invariant under one-to-one token relabeling, so the scorer
/// interns words on the fly instead of needing the vocabulary file.
#[derive(Default)]
struct Interner(HashMap<String, usize>);

impl Interner {
    fn id(&mut self, word: &str) -> usize {
        if let Some(&id) = self.0.get(word) {
            return id;
        }
        let id = self.0.len();
        self.0.insert(word.to_string(), id);
        id
    }
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Fail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_DATA, format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                fail(
                    EXIT_DATA,
                    format!("parse error in {} at line {}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), Fail> {
    let cand_words: Vec<CandLine> = parse_jsonl(&args.candidates)?;
    let ref_words: Vec<Vec<Vec<String>>> = parse_jsonl(&args.refs)?;
    let streams: Vec<Vec<f64>> = parse_jsonl(&args.probs)?;

    let mut intern = Interner::default();
    let candidates: Vec<Vec<usize>> = cand_words
        .iter()
        .map(|c| c.tokens.iter().map(|w| intern.id(w)).collect())
        .collect();
    let refs = ref_words
        .iter()
        .map(|pool| {
            let ids = pool
                .iter()
                .map(|r| r.iter().map(|w| intern.id(w)).collect())
                .collect();
            ReferenceSet::indexed(ids)
        })
        .collect::<dmf::Result<Vec<_>>>()
        .phase(EXIT_EVAL)?;

    let report = corpus_report(&candidates, &streams, &refs, args.per_sentence).phase(EXIT_EVAL)?;

    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_text(&args.out, &json)?;

    println!(
        "{:>8}  {:>10}  {:>14}  {:>5}",
        "BLEU-4", "Perplexity", "Average Length", "N"
    );
    println!(
        "{:>8.2}  {:>10.3}  {:>14.2}  {:>5}",
        report.bleu4, report.perplexity, report.avg_length, report.num_candidates
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text)
        .map_err(|e| fail(EXIT_DATA, format!("cannot write {}: {e}", path.display())))
}
