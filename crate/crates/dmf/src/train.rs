//! The training loop: seeded shuffling, batching with padded decoding,
//! Adam updates, per-sequence teacher forcing, validation perplexity,
//! and best-checkpoint tracking.
//!
//! Loss curves and validation numbers land in a [`TrainLog`] that
//! serializes to two small CSV streams. Wall-clock times are recorded
//! for humans; determinism comparisons must ignore that column.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::model::{build_variant, decode, forward_h0, score_clips, Model, ModelDims, Variant};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vocab::Vocabulary;

/// Everything a training run depends on. Defaults are sized for a CPU
/// run over the synthetic corpus; `paper()` holds the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Probability that a sequence is fed gold tokens while decoding.
    pub teacher_forcing_ratio: f64,
    pub seed: u64,
    /// Validate every this many steps; 0 validates at epoch ends only.
    pub eval_every: usize,
    /// Global gradient-norm ceiling; unset trains unclipped.
    pub grad_clip: Option<f64>,
    /// Report the mean of per-sentence perplexities instead of pooling
    /// over tokens.
    pub per_sentence_ppl: bool,
    /// Model sizes; unset means the CPU preset sized to the vocabulary.
    pub dims: Option<ModelDims>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Proposal,
            batch_size: 32,
            epochs: 30,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            teacher_forcing_ratio: 0.5,
            seed: 17,
            eval_every: 0,
            grad_clip: None,
            per_sentence_ppl: false,
            dims: None,
        }
    }
}

impl TrainConfig {
    /// The full-scale configuration: batch 512, everything else shared.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 512,
            dims: Some(ModelDims::paper()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return Err(Error::Config(
                "teacher_forcing_ratio must lie in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Some(dims) = &self.dims {
            dims.validate()?;
        }
        Ok(())
    }

    /// The dimensions this run trains at, given the corpus vocabulary.
    /// Explicit dims must agree with the vocabulary size.
    pub fn resolved_dims(&self, vocab_size: usize) -> Result<ModelDims> {
        match &self.dims {
            Some(dims) => {
                if dims.vocab != vocab_size {
                    return Err(Error::CorpusMismatch(format!(
                        "model vocab {} but corpus vocabulary has {} entries",
                        dims.vocab, vocab_size
                    )));
                }
                Ok(dims.clone())
            }
            None => Ok(ModelDims::desk(vocab_size)),
        }
    }
}

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// One validation pass's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub val_ppl: f64,
}

/// Loss curve plus validation curve, steps strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn record_step(&mut self, step: u64, loss: f64, wall_ms: u64) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if step <= last.step {
                return Err(Error::Config(format!(
                    "step {step} does not follow {}",
                    last.step
                )));
            }
        }
        self.steps.push(StepRecord { step, loss, wall_ms });
        Ok(())
    }

    pub fn record_eval(&mut self, step: u64, val_ppl: f64) -> Result<()> {
        if let Some(last) = self.evals.last() {
            if step <= last.step {
                return Err(Error::Config(format!(
                    "eval step {step} does not follow {}",
                    last.step
                )));
            }
        }
        self.evals.push(EvalRecord { step, val_ppl });
        Ok(())
    }

    /// The loss curve as `step,loss,wall_ms` CSV.
    pub fn train_csv(&self) -> String {
        let mut out = String::from("step,loss,wall_ms\n");
        for r in &self.steps {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.wall_ms));
        }
        out
    }

    /// The validation curve as `step,val_ppl` CSV.
    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,val_ppl\n");
        for r in &self.evals {
            out.push_str(&format!("{},{}\n", r.step, r.val_ppl));
        }
        out
    }
}

/// A finished run: the final model, the best-validation snapshot when a
/// validation split was given, and the full log.
pub struct TrainOutcome<P: Scalar> {
    pub model: Model<P>,
    pub best: Option<(f64, Model<P>)>,
    pub log: TrainLog,
}

fn check_tokens(clips: &[Clip], vocab_size: usize) -> Result<()> {
    for clip in clips {
        for comment in clip.context.iter().chain(Some(&clip.target)) {
            if let Some(&id) = comment.tokens.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::CorpusMismatch(format!(
                    "token id {id} outside the {vocab_size}-entry vocabulary"
                )));
            }
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `ceiling`.
fn clip_global_norm<P: Scalar>(model: &mut Model<P>, ceiling: f64) {
    let mut sq = 0.0f64;
    for (_, t) in model.params.iter() {
        if let Some(grad) = t.grad() {
            sq += grad
                .iter()
                .map(|&g| {
                    let v = g.to_f64();
                    v * v
                })
                .sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > ceiling {
        let scale = P::from_f64(ceiling / norm);
        for (_, t) in model.params.iter_mut() {
            if let Some(grad) = t.grad() {
                let scaled: Vec<P> = grad.iter().map(|&g| g * scale).collect();
                t.set_grad(scaled);
            }
        }
    }
}

/// Teacher-forced corpus perplexity of a split, batched at `batch_size`.
/// Pooled over tokens by default; `per_sentence` averages per-sentence
/// perplexities instead.
pub fn evaluate_perplexity<P: Scalar>(
    model: &Model<P>,
    clips: &[Clip],
    batch_size: usize,
    per_sentence: bool,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut streams = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size) {
        for seq in score_clips(model, chunk)? {
            streams.push(seq.ln_probs);
        }
    }
    if per_sentence {
        metrics::perplexity_per_sentence(&streams)
    } else {
        metrics::perplexity(&streams)
    }
}

/// Trains a model over the corpus.
///
/// Each epoch shuffles the clips with the run's seeded stream, batches
/// them, and takes one Adam step per batch; each sequence in a batch
/// independently draws whether it is teacher-forced. With a non-empty
/// validation split, perplexity is measured every `eval_every` steps (or
/// at each epoch end) and the best-scoring parameters are kept. Zero
/// epochs returns the freshly initialized model untouched.
pub fn run_training<P: Scalar>(
    train: &[Clip],
    val: &[Clip],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<P>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training clips"));
    }
    let dims = cfg.resolved_dims(vocab.size())?;
    check_tokens(train, dims.vocab)?;
    check_tokens(val, dims.vocab)?;

    let mut model = build_variant::<P>(cfg.variant, &dims, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.epsilon;

    let mut rng = Rng::derive(cfg.seed, 0x7472);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model<P>)> = None;
    let mut step: u64 = 0;
    let started = Instant::now();

    let validate = |model: &Model<P>,
                        step: u64,
                        log: &mut TrainLog,
                        best: &mut Option<(f64, Model<P>)>|
     -> Result<()> {
        let ppl = evaluate_perplexity(model, val, cfg.batch_size, cfg.per_sentence_ppl)?;
        log.record_eval(step, ppl)?;
        if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
            *best = Some((ppl, model.clone()));
        }
        Ok(())
    };

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Clip> = chunk.iter().map(|&i| train[i].clone()).collect();
            let forced: Vec<bool> = batch
                .iter()
                .map(|_| rng.bernoulli(cfg.teacher_forcing_ratio))
                .collect();
            let mut g: Graph<P> = Graph::new();
            let fwd = forward_h0(&mut g, &model, &batch)?;
            let out = decode(&mut g, &model, fwd.h0, &batch, &forced)?;
            let loss = g.scalar_value(out.loss).to_f64();
            g.backward(out.loss)?;
            model.params.clear_grads();
            g.grads_into(&mut model.params);
            if let Some(ceiling) = cfg.grad_clip {
                clip_global_norm(&mut model, ceiling);
            }
            adam.step(&mut model.params);
            step += 1;
            log.record_step(step, loss, started.elapsed().as_millis() as u64)?;
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every as u64) && !val.is_empty() {
                validate(&model, step, &mut log, &mut best)?;
            }
        }
        if cfg.eval_every == 0 && !val.is_empty() {
            validate(&model, step, &mut log, &mut best)?;
        }
    }
    model.params.clear_grads();
    if let Some((_, m)) = &mut best {
        m.params.clear_grads();
    }
    Ok(TrainOutcome { model, best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Comment, Frame};
    use crate::model::{generate, GenMode};
    use crate::tensor::Tensor;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..16).map(|i| format!("w{i}")))
    }

    fn tiny_corpus(seed: u64, count: usize) -> Vec<Clip> {
        let dims = ModelDims::tiny(20);
        let mut rng = Rng::derive(seed, 7);
        (0..count)
            .map(|_| {
                let frames = (0..2)
                    .map(|t| {
                        let (c, h, w) = dims.frame;
                        let px =
                            Tensor::from_fn(vec![c, h, w], |_| rng.uniform(0.0, 1.0) as f32);
                        Frame::new(t as f64, px).unwrap()
                    })
                    .collect();
                let mut comment = |t: f64| {
                    let len = 1 + rng.below(3);
                    Comment::new(t, (0..len).map(|_| 4 + rng.below(16)).collect()).unwrap()
                };
                let context = vec![comment(0.2), comment(1.4)];
                let target = comment(1.0);
                Clip::new(frames, context, target).unwrap()
            })
            .collect()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            dims: Some(ModelDims::tiny(20)),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let base = TrainConfig::default();
        for cfg in [
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { teacher_forcing_ratio: 1.5, ..base.clone() },
            TrainConfig { teacher_forcing_ratio: -0.1, ..base.clone() },
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { beta1: 1.0, ..base.clone() },
            TrainConfig { grad_clip: Some(0.0), ..base.clone() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        assert!(base.validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        assert_eq!(TrainConfig::paper().batch_size, 512);
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str("{\"epochs\": 3}").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.variant, Variant::Proposal);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn logs_insist_on_increasing_steps() {
        let mut log = TrainLog::default();
        log.record_step(1, 0.5, 3).unwrap();
        log.record_step(2, 0.4, 6).unwrap();
        assert!(log.record_step(2, 0.3, 9).is_err());
        log.record_eval(2, 8.0).unwrap();
        assert!(log.record_eval(1, 7.0).is_err());
        assert_eq!(log.train_csv(), "step,loss,wall_ms\n1,0.5,3\n2,0.4,6\n");
        assert_eq!(log.eval_csv(), "step,val_ppl\n2,8\n");
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let corpus = tiny_corpus(1, 3);
        let cfg = tiny_config(0);
        let out = run_training::<f32>(&corpus, &[], &tiny_vocab(), &cfg).unwrap();
        let fresh = build_variant::<f32>(cfg.variant, &ModelDims::tiny(20), cfg.seed).unwrap();
        for (name, t) in fresh.params.iter() {
            let trained = out.model.params.get(name).unwrap();
            assert_eq!(trained.data(), t.data(), "{name} changed");
        }
        assert!(out.log.steps.is_empty());
        assert!(out.best.is_none());
    }

    #[test]
    fn same_seed_same_curves() {
        let corpus = tiny_corpus(2, 5);
        let val = tiny_corpus(3, 2);
        let mut cfg = tiny_config(2);
        cfg.eval_every = 2;
        let a = run_training::<f32>(&corpus, &val, &tiny_vocab(), &cfg).unwrap();
        let b = run_training::<f32>(&corpus, &val, &tiny_vocab(), &cfg).unwrap();
        assert_eq!(a.log.steps.len(), b.log.steps.len());
        for (x, y) in a.log.steps.iter().zip(&b.log.steps) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(a.log.evals, b.log.evals);
        for (name, t) in a.model.params.iter() {
            assert_eq!(t.data(), b.model.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let corpus = tiny_corpus(4, 4);
        let cfg = tiny_config(1);
        let other = TrainConfig { seed: cfg.seed + 1, ..cfg.clone() };
        let a = run_training::<f32>(&corpus, &[], &tiny_vocab(), &cfg).unwrap();
        let b = run_training::<f32>(&corpus, &[], &tiny_vocab(), &other).unwrap();
        assert_ne!(
            a.log.steps[0].loss.to_bits(),
            b.log.steps[0].loss.to_bits()
        );
    }

    #[test]
    fn one_clip_is_memorized_within_three_hundred_steps() {
        let corpus = tiny_corpus(5, 1);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..tiny_config(300)
        };
        let out = run_training::<f32>(&corpus, &[], &tiny_vocab(), &cfg).unwrap();
        let final_loss = out.log.steps.last().unwrap().loss;
        assert!(final_loss < 0.01, "loss stuck at {final_loss}");
        let ppl = evaluate_perplexity(&out.model, &corpus, 1, false).unwrap();
        assert!(ppl < 1.05, "perplexity {ppl}");
        let mut rng = Rng::new(0);
        let target = &corpus[0].target.tokens;
        let decoded = generate(
            &out.model,
            &corpus[0],
            GenMode::Greedy,
            target.len() + 4,
            &mut rng,
        )
        .unwrap();
        assert_eq!(&decoded, target);
    }

    #[test]
    fn uniform_output_perplexity_is_the_vocabulary_size() {
        let corpus = tiny_corpus(6, 3);
        let dims = ModelDims::tiny(20);
        let mut model = build_variant::<f64>(Variant::Proposal, &dims, 1).unwrap();
        for v in model.params.get_mut("dec.w_o").unwrap().data_mut() {
            *v = 0.0;
        }
        let ppl = evaluate_perplexity(&model, &corpus, 2, false).unwrap();
        assert!((ppl - 20.0).abs() <= 1e-9 * 20.0, "{ppl}");
    }

    #[test]
    fn batch_padding_leaves_perplexity_alone() {
        let corpus = tiny_corpus(7, 8);
        let dims = ModelDims::tiny(20);
        let model = build_variant::<f32>(Variant::Proposal, &dims, 2).unwrap();
        let solo = evaluate_perplexity(&model, &corpus, 1, false).unwrap();
        let padded = evaluate_perplexity(&model, &corpus, 8, false).unwrap();
        assert!((solo - padded).abs() < 1e-6, "{solo} vs {padded}");
    }

    #[test]
    fn training_perplexity_matches_the_metrics_module_exactly() {
        let corpus = tiny_corpus(8, 4);
        let dims = ModelDims::tiny(20);
        let model = build_variant::<f32>(Variant::Proposal, &dims, 3).unwrap();
        let from_train = evaluate_perplexity(&model, &corpus, 4, false).unwrap();
        let streams: Vec<Vec<f64>> = score_clips(&model, &corpus)
            .unwrap()
            .into_iter()
            .map(|s| s.ln_probs)
            .collect();
        let from_metrics = metrics::perplexity(&streams).unwrap();
        assert!((from_train - from_metrics).abs() < 1e-9);
    }

    #[test]
    fn perplexity_counts_the_end_marker() {
        // A model memorizing "a" must still spend probability on EOS, so
        // two scored tokens exist per clip.
        let corpus = tiny_corpus(9, 2);
        let dims = ModelDims::tiny(20);
        let model = build_variant::<f32>(Variant::Proposal, &dims, 4).unwrap();
        let streams: Vec<Vec<f64>> = score_clips(&model, &corpus)
            .unwrap()
            .into_iter()
            .map(|s| s.ln_probs)
            .collect();
        for (clip, stream) in corpus.iter().zip(&streams) {
            assert_eq!(stream.len(), clip.target.tokens.len() + 1);
        }
    }

    #[test]
    fn out_of_vocabulary_corpora_are_refused() {
        let mut corpus = tiny_corpus(10, 2);
        corpus[0].target.tokens[0] = 25;
        let cfg = tiny_config(1);
        match run_training::<f32>(&corpus, &[], &tiny_vocab(), &cfg) {
            Err(Error::CorpusMismatch(_)) => {}
            other => panic!("expected CorpusMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn resolved_dims_must_match_the_vocabulary() {
        let cfg = tiny_config(1);
        assert!(cfg.resolved_dims(20).is_ok());
        assert!(matches!(
            cfg.resolved_dims(21),
            Err(Error::CorpusMismatch(_))
        ));
        let auto = TrainConfig::default();
        assert_eq!(auto.resolved_dims(40).unwrap(), ModelDims::desk(40));
    }

    #[test]
    fn best_checkpoint_tracks_the_lowest_validation_score() {
        let corpus = tiny_corpus(11, 4);
        let val = tiny_corpus(12, 2);
        let mut cfg = tiny_config(3);
        cfg.eval_every = 1;
        cfg.learning_rate = 0.01;
        let out = run_training::<f32>(&corpus, &val, &tiny_vocab(), &cfg).unwrap();
        let (best_ppl, best_model) = out.best.as_ref().unwrap();
        let min_logged = out
            .log
            .evals
            .iter()
            .map(|e| e.val_ppl)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(*best_ppl, min_logged);
        let rescored =
            evaluate_perplexity(best_model, &val, cfg.batch_size, false).unwrap();
        assert!((rescored - best_ppl).abs() < 1e-9);
    }

    #[test]
    fn gradient_clipping_changes_the_path_but_still_trains() {
        let corpus = tiny_corpus(13, 3);
        let cfg = tiny_config(2);
        let clipped = TrainConfig {
            grad_clip: Some(1e-3),
            ..cfg.clone()
        };
        let a = run_training::<f32>(&corpus, &[], &tiny_vocab(), &cfg).unwrap();
        let b = run_training::<f32>(&corpus, &[], &tiny_vocab(), &clipped).unwrap();
        assert_eq!(a.log.steps[0].loss.to_bits(), b.log.steps[0].loss.to_bits());
        let last_a = a.log.steps.last().unwrap().loss;
        let last_b = b.log.steps.last().unwrap().loss;
        assert_ne!(last_a.to_bits(), last_b.to_bits());
        assert!(last_b.is_finite());
    }
}
