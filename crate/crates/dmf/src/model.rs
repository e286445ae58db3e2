//! The joint model and its three ablated baselines.
//!
//! Four parts share one parameter pool: a CNN-plus-GRU video encoder, a
//! hierarchical (word then sentence) comment encoder, a gated fusion that
//! softmax-weighs the two modality vectors into the decoder's initial
//! hidden state, and a GRU decoder read out through a single output
//! matrix. The baselines reuse the same pieces wired differently: `F2c`
//! sees only the anchor frame, `M2c` the anchor frame plus one nearby
//! comment, `C2c` both full context vectors concatenated without the
//! gate. One embedding matrix is shared by every token lookup, encoder
//! and decoder alike.
//!
//! The fused vector follows the printed form: the comment branch's score
//! weighs the comment vector in the first slot. `gate_swapped` flips the
//! pairing for experiments.
//!
//! Everything is generic over the scalar so f64 builds can be checked
//! against finite differences while training runs in f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, Comment, Frame};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::conv_out_dim;
use crate::nn::{conv_layer, gru_step, gru_step_masked, linear};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// Name of the embedding table shared by the text encoder and decoder.
pub const EMBEDDING: &str = "shared.embedding";

/// Which wiring of the shared parts a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Proposal,
    F2c,
    M2c,
    C2c,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Proposal, Variant::F2c, Variant::M2c, Variant::C2c];

    /// Stable code stored in checkpoint headers.
    pub fn code(self) -> u8 {
        match self {
            Variant::Proposal => 0,
            Variant::F2c => 1,
            Variant::M2c => 2,
            Variant::C2c => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::UnknownVariant(format!("checkpoint code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposal => "proposal",
            Variant::F2c => "f2c",
            Variant::M2c => "m2c",
            Variant::C2c => "c2c",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariant(name.to_string()))
    }

    fn uses_video_gru(self) -> bool {
        matches!(self, Variant::Proposal | Variant::C2c)
    }

    fn uses_word_gru(self) -> bool {
        !matches!(self, Variant::F2c)
    }

    fn uses_sentence_gru(self) -> bool {
        matches!(self, Variant::Proposal | Variant::C2c)
    }
}

/// Every size the model depends on. The decoder hidden state is the
/// concatenation of two encoder vectors, so `dec_hidden == 2 * enc_hidden`
/// is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub gate_dim: usize,
    /// (channels, height, width) of the frames this model accepts.
    pub frame: (usize, usize, usize),
    pub conv_channels: [usize; 3],
    pub fc_widths: [usize; 2],
    /// Swap which branch score multiplies which vector in the fusion.
    pub gate_swapped: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab: 34_100,
            embed: 300,
            enc_hidden: 300,
            dec_hidden: 600,
            gate_dim: 300,
            frame: (3, 72, 128),
            conv_channels: [16, 32, 64],
            fc_widths: [512, 384],
            gate_swapped: false,
        }
    }
}

impl ModelDims {
    /// Full-size configuration (the default).
    pub fn paper() -> Self {
        ModelDims::default()
    }

    /// Small configuration for CPU experiments on the synthetic corpus.
    pub fn desk(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 64,
            enc_hidden: 64,
            dec_hidden: 128,
            gate_dim: 64,
            frame: (3, 18, 32),
            conv_channels: [8, 16, 24],
            fc_widths: [128, 96],
            gate_swapped: false,
        }
    }

    /// Minimal configuration for finite-difference checks.
    pub fn tiny(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 8,
            enc_hidden: 8,
            dec_hidden: 16,
            gate_dim: 8,
            frame: (1, 6, 8),
            conv_channels: [2, 3, 4],
            fc_widths: [6, 5],
            gate_swapped: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Config(format!("model dims: {detail}"));
        if self.vocab < 5 {
            return Err(bad("vocab must cover the 4 specials plus a word".into()));
        }
        for (name, v) in [
            ("embed", self.embed),
            ("enc_hidden", self.enc_hidden),
            ("gate_dim", self.gate_dim),
        ] {
            if v == 0 {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        if self.dec_hidden != 2 * self.enc_hidden {
            return Err(bad(format!(
                "dec_hidden {} must be twice enc_hidden {}",
                self.dec_hidden, self.enc_hidden
            )));
        }
        let (c, _, _) = self.frame;
        if c != 1 && c != 3 {
            return Err(bad("frame channels must be 1 or 3".into()));
        }
        self.conv_flat()?;
        Ok(())
    }

    /// Flattened width after the three stride-2 convolutions.
    pub fn conv_flat(&self) -> Result<usize> {
        let (_, mut h, mut w) = self.frame;
        for _ in 0..3 {
            match (conv_out_dim(h, 3, 2, 1), conv_out_dim(w, 3, 2, 1)) {
                (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "model dims: frame {}x{} too small for three stride-2 convolutions",
                        self.frame.1, self.frame.2
                    )))
                }
            }
        }
        Ok(self.conv_channels[2] * h * w)
    }
}

fn gru_specs(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, inp: usize, hidden: usize) {
    for gate in ["z", "r", "h"] {
        out.push((format!("{prefix}.w{gate}"), vec![inp, hidden]));
        out.push((format!("{prefix}.u{gate}"), vec![hidden, hidden]));
        out.push((format!("{prefix}.b{gate}"), vec![hidden]));
    }
}

/// The exact tensor set of a variant, in registration order. Both the
/// builder and the checkpoint loader derive from this one list, so a
/// checkpoint matches a configuration if and only if it matches here.
pub fn tensor_specs(variant: Variant, dims: &ModelDims) -> Result<Vec<(String, Vec<usize>)>> {
    dims.validate()?;
    let mut specs = vec![(EMBEDDING.to_string(), vec![dims.vocab, dims.embed])];
    let chans = [
        dims.frame.0,
        dims.conv_channels[0],
        dims.conv_channels[1],
        dims.conv_channels[2],
    ];
    for i in 1..=3 {
        specs.push((format!("video_enc.conv{i}.k"), vec![chans[i], chans[i - 1], 3, 3]));
        specs.push((format!("video_enc.conv{i}.b"), vec![chans[i]]));
    }
    let widths = [
        dims.conv_flat()?,
        dims.fc_widths[0],
        dims.fc_widths[1],
        dims.enc_hidden,
    ];
    for i in 1..=3 {
        specs.push((format!("video_enc.fc{i}.w"), vec![widths[i - 1], widths[i]]));
        specs.push((format!("video_enc.fc{i}.b"), vec![widths[i]]));
    }
    if variant.uses_video_gru() {
        gru_specs(&mut specs, "video_enc.gru", dims.enc_hidden, dims.enc_hidden);
    }
    if variant.uses_word_gru() {
        gru_specs(&mut specs, "text_enc.word_gru", dims.embed, dims.enc_hidden);
    }
    if variant.uses_sentence_gru() {
        gru_specs(&mut specs, "text_enc.sent_gru", dims.enc_hidden, dims.enc_hidden);
    }
    if variant == Variant::Proposal {
        specs.push(("gate.wv".into(), vec![dims.enc_hidden, dims.gate_dim]));
        specs.push(("gate.bv".into(), vec![dims.gate_dim]));
        specs.push(("gate.wc".into(), vec![dims.enc_hidden, dims.gate_dim]));
        specs.push(("gate.bc".into(), vec![dims.gate_dim]));
        specs.push(("gate.u".into(), vec![dims.gate_dim, 1]));
    }
    if variant == Variant::F2c {
        specs.push(("f2c.bridge.w".into(), vec![dims.enc_hidden, dims.dec_hidden]));
        specs.push(("f2c.bridge.b".into(), vec![dims.dec_hidden]));
    }
    gru_specs(&mut specs, "dec.gru", dims.embed, dims.dec_hidden);
    specs.push(("dec.w_o".into(), vec![dims.dec_hidden, dims.vocab]));
    Ok(specs)
}

/// A variant plus its parameters and sizes.
#[derive(Clone, Debug)]
pub struct Model<P: Scalar> {
    pub dims: ModelDims,
    pub variant: Variant,
    pub params: ParamSet<P>,
}

/// Initializes a fresh model: Glorot weights, zero biases, one shared
/// RNG stream in tensor order so the same seed rebuilds the same model.
pub fn build_variant<P: Scalar>(variant: Variant, dims: &ModelDims, seed: u64) -> Result<Model<P>> {
    let mut rng = Rng::derive(seed, 0x6d6f64);
    let mut params = ParamSet::new();
    for (name, shape) in tensor_specs(variant, dims)? {
        let last = name.rsplit('.').next().unwrap_or("");
        let tensor = if last.starts_with('b') {
            Tensor::zeros(shape)
        } else {
            Tensor::glorot_uniform(shape, &mut rng)
        };
        params.insert(name, tensor);
    }
    Ok(Model {
        dims: dims.clone(),
        variant,
        params,
    })
}

impl<P: Scalar> Model<P> {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, self.variant.code())
    }

    /// Loads a checkpoint and checks it against `dims` tensor by tensor.
    pub fn load(path: &Path, dims: &ModelDims) -> Result<Model<P>> {
        let (code, params) = ParamSet::<P>::load(path)?;
        let variant = Variant::from_code(code)?;
        let model = Model {
            dims: dims.clone(),
            variant,
            params,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let specs = tensor_specs(self.variant, &self.dims)?;
        if self.params.len() != specs.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors stored, {} expected for {}",
                self.params.len(),
                specs.len(),
                self.variant.name()
            )));
        }
        for (name, shape) in &specs {
            match self.params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::CheckpointMismatch(format!("{name} missing")));
                }
            }
        }
        Ok(())
    }
}

fn argmax_row<P: Scalar>(row: &[P]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Checks a batch against the model and returns (frames per clip,
/// context size). All clips in a batch must agree on both.
fn check_batch<P: Scalar>(model: &Model<P>, clips: &[Clip]) -> Result<(usize, usize)> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("clip batch"));
    }
    let n = clips[0].frames.len();
    let m = clips[0].context.len();
    let (c, h, w) = model.dims.frame;
    for clip in clips {
        if clip.frames.len() != n || clip.context.len() != m {
            return Err(Error::CorpusMismatch(
                "clips in a batch must share n and m".into(),
            ));
        }
        for frame in &clip.frames {
            if frame.pixels.shape() != [c, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "frame batch",
                    lhs: frame.pixels.shape().to_vec(),
                    rhs: vec![c, h, w],
                });
            }
        }
        for comment in clip.context.iter().chain(Some(&clip.target)) {
            if let Some(&id) = comment.tokens.iter().find(|&&id| id >= model.dims.vocab) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: model.dims.vocab,
                });
            }
        }
    }
    if model.variant.uses_word_gru() && m == 0 {
        return Err(Error::EmptyInput("context comments"));
    }
    Ok((n, m))
}

/// Stacks frames into one `[rows, c, h, w]` leaf, casting to the graph
/// scalar. `last_only` keeps just each clip's anchor frame.
fn frame_leaf<P: Scalar>(g: &mut Graph<P>, clips: &[Clip], last_only: bool) -> Result<NodeId> {
    let (c, h, w) = {
        let s = clips[0].frames[0].pixels.shape();
        (s[0], s[1], s[2])
    };
    let mut rows = 0;
    let mut data = Vec::new();
    for clip in clips {
        let take: &[Frame] = if last_only {
            std::slice::from_ref(clip.frames.last().expect("validated non-empty"))
        } else {
            &clip.frames
        };
        for frame in take {
            data.extend(frame.pixels.data().iter().map(|&v| P::from_f64(v as f64)));
            rows += 1;
        }
    }
    g.leaf_from(vec![rows, c, h, w], data)
}

/// The convolutional tower: three stride-2 ReLU convolutions, then three
/// linear layers with ReLU between (none after the last).
fn cnn<P: Scalar>(g: &mut Graph<P>, params: &ParamSet<P>, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for i in 1..=3 {
        let y = conv_layer(g, params, &format!("video_enc.conv{i}"), h, 2, 1)?;
        h = g.relu(y);
    }
    let s = g.shape(h).to_vec();
    let mut v = g.reshape(h, vec![s[0], s[1] * s[2] * s[3]])?;
    for i in 1..=2 {
        let y = linear(g, params, &format!("video_enc.fc{i}"), v)?;
        v = g.relu(y);
    }
    linear(g, params, "video_enc.fc3", v)
}

/// Runs the frame GRU over CNN features; returns the last hidden state.
fn video_vector<P: Scalar>(
    g: &mut Graph<P>,
    model: &Model<P>,
    clips: &[Clip],
    n: usize,
) -> Result<NodeId> {
    let frames = frame_leaf(g, clips, false)?;
    let feats = cnn(g, &model.params, frames)?;
    let b = clips.len();
    let mut h = g.leaf(&Tensor::zeros(vec![b, model.dims.enc_hidden]));
    for t in 0..n {
        let idx: Vec<usize> = (0..b).map(|i| i * n + t).collect();
        let x = g.gather_rows(feats, &idx)?;
        h = gru_step(g, &model.params, "video_enc.gru", x, h)?;
    }
    Ok(h)
}

/// Encodes each comment (one per row) through the word GRU; masked steps
/// freeze finished rows, so the result is each row's last real hidden.
fn word_vectors<P: Scalar>(
    g: &mut Graph<P>,
    model: &Model<P>,
    comments: &[&Comment],
) -> Result<NodeId> {
    let rows = comments.len();
    let lmax = comments.iter().map(|c| c.tokens.len()).max().unwrap_or(0);
    let emb = g.param(&model.params, EMBEDDING);
    let mut h = g.leaf(&Tensor::zeros(vec![rows, model.dims.enc_hidden]));
    for t in 0..lmax {
        let ids: Vec<usize> = comments
            .iter()
            .map(|c| c.tokens.get(t).copied().unwrap_or(PAD))
            .collect();
        let x = g.gather_rows(emb, &ids)?;
        let mask: Vec<P> = comments
            .iter()
            .map(|c| if t < c.tokens.len() { P::one() } else { P::zero() })
            .collect();
        let mk = g.leaf_from(vec![rows, 1], mask)?;
        h = gru_step_masked(g, &model.params, "text_enc.word_gru", x, h, mk)?;
    }
    Ok(h)
}

/// Word GRU over every context comment, then the sentence GRU across the
/// m per-comment vectors; returns the last sentence hidden state.
fn context_vector<P: Scalar>(
    g: &mut Graph<P>,
    model: &Model<P>,
    clips: &[Clip],
    m: usize,
) -> Result<NodeId> {
    let refs: Vec<&Comment> = clips.iter().flat_map(|c| c.context.iter()).collect();
    let per_comment = word_vectors(g, model, &refs)?;
    let b = clips.len();
    let mut h = g.leaf(&Tensor::zeros(vec![b, model.dims.enc_hidden]));
    for j in 0..m {
        let idx: Vec<usize> = (0..b).map(|i| i * m + j).collect();
        let x = g.gather_rows(per_comment, &idx)?;
        h = gru_step(g, &model.params, "text_enc.sent_gru", x, h)?;
    }
    Ok(h)
}

/// The fused vector plus both gate weights.
pub struct GateOut {
    pub h: NodeId,
    pub g_c: NodeId,
    pub g_v: NodeId,
}

/// Scores each branch through its ReLU MLP and the shared `u`, softmaxes
/// the two scores, and concatenates the weighted vectors, comment slot
/// first. With `swapped` the weights trade places.
pub fn gate_fuse<P: Scalar>(
    g: &mut Graph<P>,
    params: &ParamSet<P>,
    v_c: NodeId,
    v_v: NodeId,
    swapped: bool,
) -> Result<GateOut> {
    let u = g.param(params, "gate.u");
    let score = |g: &mut Graph<P>, w: &str, b: &str, x: NodeId| -> Result<NodeId> {
        let wn = g.param(params, w);
        let bn = g.param(params, b);
        let xw = g.matmul(x, wn)?;
        let pre = g.add_bias(xw, bn)?;
        let act = g.relu(pre);
        g.matmul(act, u)
    };
    let s_c = score(g, "gate.wc", "gate.bc", v_c)?;
    let s_v = score(g, "gate.wv", "gate.bv", v_v)?;
    let pair = g.concat_cols(s_c, s_v)?;
    let soft = g.softmax_rows(pair)?;
    let g_c = g.slice_cols(soft, 0, 1)?;
    let g_v = g.slice_cols(soft, 1, 1)?;
    let (first, second) = if swapped { (g_v, g_c) } else { (g_c, g_v) };
    let left = g.mul_col(v_c, first)?;
    let right = g.mul_col(v_v, second)?;
    let h = g.concat_cols(left, right)?;
    Ok(GateOut { h, g_c, g_v })
}

/// Index of the context comment nearest the target's timestamp, earlier
/// comment on ties. Context is stored sorted by time, so a strict `<`
/// keeps the first of any tied pair.
fn nearest_context(clip: &Clip) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in clip.context.iter().enumerate() {
        let d = (c.t - clip.target.t).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// The encoder side of one batch: the decoder's initial hidden state and,
/// for the gated variant, the two gate weights.
pub struct Forward {
    pub h0: NodeId,
    pub gates: Option<(NodeId, NodeId)>,
}

/// Builds the variant's encoder stack over a batch of clips.
pub fn forward_h0<P: Scalar>(
    g: &mut Graph<P>,
    model: &Model<P>,
    clips: &[Clip],
) -> Result<Forward> {
    let (n, m) = check_batch(model, clips)?;
    match model.variant {
        Variant::Proposal => {
            let v_v = video_vector(g, model, clips, n)?;
            let v_c = context_vector(g, model, clips, m)?;
            let gate = gate_fuse(g, &model.params, v_c, v_v, model.dims.gate_swapped)?;
            Ok(Forward {
                h0: gate.h,
                gates: Some((gate.g_c, gate.g_v)),
            })
        }
        Variant::F2c => {
            let frames = frame_leaf(g, clips, true)?;
            let feats = cnn(g, &model.params, frames)?;
            let h0 = linear(g, &model.params, "f2c.bridge", feats)?;
            Ok(Forward { h0, gates: None })
        }
        Variant::M2c => {
            let frames = frame_leaf(g, clips, true)?;
            let feats = cnn(g, &model.params, frames)?;
            let nearest: Vec<&Comment> = clips
                .iter()
                .map(|c| &c.context[nearest_context(c)])
                .collect();
            let words = word_vectors(g, model, &nearest)?;
            let h0 = g.concat_cols(feats, words)?;
            Ok(Forward { h0, gates: None })
        }
        Variant::C2c => {
            let v_v = video_vector(g, model, clips, n)?;
            let v_c = context_vector(g, model, clips, m)?;
            let h0 = g.concat_cols(v_c, v_v)?;
            Ok(Forward { h0, gates: None })
        }
    }
}

/// Decoder rollout over one batch.
pub struct DecodeOut {
    /// Mean negative log-likelihood per scored token (the training loss).
    pub loss: NodeId,
    /// Per-clip sums of scored log-probabilities, shape [b, 1].
    pub per_clip_logprob: NodeId,
    /// Unmasked per-step gold log-probabilities, each [b, 1].
    pub picked_steps: Vec<NodeId>,
    /// Scored tokens in the batch (targets plus one end marker each).
    pub token_count: usize,
}

/// Rolls the decoder over the batch, scoring each clip's target plus the
/// end marker. Rows with `forced` true read the gold token back in;
/// others feed their own argmax forward. Positions past a clip's end are
/// masked out of every sum.
pub fn decode<P: Scalar>(
    g: &mut Graph<P>,
    model: &Model<P>,
    h0: NodeId,
    clips: &[Clip],
    forced: &[bool],
) -> Result<DecodeOut> {
    let b = clips.len();
    if forced.len() != b {
        return Err(Error::Misaligned {
            what: "teacher-forcing flags",
            lhs: forced.len(),
            rhs: b,
        });
    }
    let lens: Vec<usize> = clips.iter().map(|c| c.target.tokens.len()).collect();
    let tmax = lens.iter().max().copied().unwrap_or(0) + 1;
    let emb = g.param(&model.params, EMBEDDING);
    let w_o = g.param(&model.params, "dec.w_o");
    let mut h = h0;
    let mut inputs = vec![BOS; b];
    let mut picked_steps = Vec::with_capacity(tmax);
    let mut masked_steps = Vec::with_capacity(tmax);
    for t in 0..tmax {
        let x = g.gather_rows(emb, &inputs)?;
        h = gru_step(g, &model.params, "dec.gru", x, h)?;
        let logits = g.matmul(h, w_o)?;
        let logp = g.log_softmax_rows(logits)?;
        let gold: Vec<usize> = (0..b)
            .map(|i| match t.cmp(&lens[i]) {
                std::cmp::Ordering::Less => clips[i].target.tokens[t],
                std::cmp::Ordering::Equal => EOS,
                std::cmp::Ordering::Greater => PAD,
            })
            .collect();
        let picked = g.pick_per_row(logp, &gold)?;
        let mask: Vec<P> = (0..b)
            .map(|i| if t <= lens[i] { P::one() } else { P::zero() })
            .collect();
        let mk = g.leaf_from(vec![b, 1], mask)?;
        let masked = g.mul_col(picked, mk)?;
        picked_steps.push(picked);
        masked_steps.push(masked);

        let vals = g.value(logits);
        let v = model.dims.vocab;
        inputs = (0..b)
            .map(|i| {
                if t >= lens[i] {
                    PAD
                } else if forced[i] {
                    clips[i].target.tokens[t]
                } else {
                    argmax_row(&vals[i * v..(i + 1) * v])
                }
            })
            .collect();
    }
    let per_clip_logprob = g.add_n(&masked_steps)?;
    let total = g.sum_all(per_clip_logprob);
    let token_count: usize = lens.iter().map(|l| l + 1).sum();
    let loss = g.affine(total, -1.0 / token_count as f64, 0.0);
    Ok(DecodeOut {
        loss,
        per_clip_logprob,
        picked_steps,
        token_count,
    })
}

/// Teacher-forced log-probabilities of one clip's target tokens plus the
/// end marker, in natural log.
#[derive(Clone, Debug)]
pub struct ScoredSeq {
    pub ln_probs: Vec<f64>,
}

impl ScoredSeq {
    pub fn total(&self) -> f64 {
        self.ln_probs.iter().sum()
    }
}

/// Scores a batch of clips under teacher forcing.
pub fn score_clips<P: Scalar>(model: &Model<P>, clips: &[Clip]) -> Result<Vec<ScoredSeq>> {
    let mut g: Graph<P> = Graph::new();
    let fwd = forward_h0(&mut g, model, clips)?;
    let forced = vec![true; clips.len()];
    let out = decode(&mut g, model, fwd.h0, clips, &forced)?;
    let mut scored: Vec<ScoredSeq> = clips
        .iter()
        .map(|c| ScoredSeq {
            ln_probs: Vec::with_capacity(c.target.tokens.len() + 1),
        })
        .collect();
    for (t, &step) in out.picked_steps.iter().enumerate() {
        let vals = g.value(step);
        for (i, clip) in clips.iter().enumerate() {
            if t <= clip.target.tokens.len() {
                scored[i].ln_probs.push(vals[i].to_f64());
            }
        }
    }
    Ok(scored)
}

/// Teacher-forced log-probabilities of an arbitrary token sequence under
/// one clip's context, end marker included. Unlike [`score_clips`] the
/// sequence may be empty, in which case only the end marker is scored;
/// this is what generation reports for its own output.
pub fn score_sequence<P: Scalar>(
    model: &Model<P>,
    clip: &Clip,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    if let Some(&id) = tokens.iter().find(|&&id| id >= model.dims.vocab) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: model.dims.vocab,
        });
    }
    let mut g: Graph<P> = Graph::new();
    let fwd = forward_h0(&mut g, model, std::slice::from_ref(clip))?;
    let emb = g.param(&model.params, EMBEDDING);
    let w_o = g.param(&model.params, "dec.w_o");
    let mut h = fwd.h0;
    let mut input = BOS;
    let mut out = Vec::with_capacity(tokens.len() + 1);
    for t in 0..=tokens.len() {
        let x = g.gather_rows(emb, &[input])?;
        h = gru_step(&mut g, &model.params, "dec.gru", x, h)?;
        let logits = g.matmul(h, w_o)?;
        let logp = g.log_softmax_rows(logits)?;
        let gold = if t < tokens.len() { tokens[t] } else { EOS };
        let picked = g.pick_per_row(logp, &[gold])?;
        out.push(g.value(picked)[0].to_f64());
        input = gold;
    }
    Ok(out)
}

/// Decoding strategy for generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GenMode {
    Greedy,
    Beam(usize),
    Sample(f64),
}

/// Generates a comment for one clip. Starts from the begin marker, stops
/// at the end marker or `max_len` tokens. Greedy and beam search are
/// deterministic; sampling draws from the temperature-scaled softmax and
/// collapses to greedy as the temperature approaches zero. Beam search
/// ranks finished hypotheses by length-normalized log-probability.
pub fn generate<P: Scalar>(
    model: &Model<P>,
    clip: &Clip,
    mode: GenMode,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    match mode {
        GenMode::Greedy => walk(model, clip, max_len, |row, _| argmax_row(row), rng),
        GenMode::Sample(temp) => {
            if temp < 0.0 {
                return Err(Error::Config("temperature must be non-negative".into()));
            }
            walk(model, clip, max_len, |row, rng| sample_row(row, temp, rng), rng)
        }
        GenMode::Beam(width) => {
            if width == 0 {
                return Err(Error::Config("beam width must be at least 1".into()));
            }
            beam_search(model, clip, width, max_len)
        }
    }
}

/// Single-path decoding loop shared by greedy and sampling.
fn walk<P: Scalar>(
    model: &Model<P>,
    clip: &Clip,
    max_len: usize,
    mut pick: impl FnMut(&[P], &mut Rng) -> usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut g: Graph<P> = Graph::new();
    let fwd = forward_h0(&mut g, model, std::slice::from_ref(clip))?;
    let emb = g.param(&model.params, EMBEDDING);
    let w_o = g.param(&model.params, "dec.w_o");
    let mut h = fwd.h0;
    let mut input = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let x = g.gather_rows(emb, &[input])?;
        h = gru_step(&mut g, &model.params, "dec.gru", x, h)?;
        let logits = g.matmul(h, w_o)?;
        let next = pick(g.value(logits), &mut *rng);
        if next == EOS {
            break;
        }
        out.push(next);
        input = next;
    }
    Ok(out)
}

/// Draws from softmax(logits / temp); a vanishing temperature is argmax.
fn sample_row<P: Scalar>(row: &[P], temp: f64, rng: &mut Rng) -> usize {
    if temp < 1e-6 {
        return argmax_row(row);
    }
    let mx = row[argmax_row(row)].to_f64();
    let weights: Vec<f64> = row
        .iter()
        .map(|&v| ((v.to_f64() - mx) / temp).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn beam_search<P: Scalar>(
    model: &Model<P>,
    clip: &Clip,
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    struct Hyp {
        h: NodeId,
        tokens: Vec<usize>,
        sum: f64,
    }
    let mut g: Graph<P> = Graph::new();
    let fwd = forward_h0(&mut g, model, std::slice::from_ref(clip))?;
    let emb = g.param(&model.params, EMBEDDING);
    let w_o = g.param(&model.params, "dec.w_o");
    let mut live = vec![Hyp {
        h: fwd.h0,
        tokens: Vec::new(),
        sum: 0.0,
    }];
    // (tokens, length-normalized score); the end marker counts as scored.
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut next_h = Vec::with_capacity(live.len());
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let input = hyp.tokens.last().copied().unwrap_or(BOS);
            let x = g.gather_rows(emb, &[input])?;
            let nh = gru_step(&mut g, &model.params, "dec.gru", x, hyp.h)?;
            let logits = g.matmul(nh, w_o)?;
            let logp = g.log_softmax_rows(logits)?;
            next_h.push(nh);
            let row = g.value(logp);
            for tok in top_k(row, width) {
                cands.push((hi, tok, row[tok].to_f64()));
            }
        }
        cands.sort_by(|a, b| {
            let sa = live[a.0].sum + a.2;
            let sb = live[b.0].sum + b.2;
            sb.total_cmp(&sa)
        });
        // The top `width` continuations fill the next beam; a finished
        // hypothesis keeps its slot, so a width-1 beam walks exactly the
        // greedy path.
        let mut next_live = Vec::with_capacity(width);
        for (hi, tok, lp) in cands.into_iter().take(width) {
            let sum = live[hi].sum + lp;
            if tok == EOS {
                let norm = sum / (live[hi].tokens.len() + 1) as f64;
                done.push((live[hi].tokens.clone(), norm));
            } else {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next_live.push(Hyp {
                    h: next_h[hi],
                    tokens,
                    sum,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    for hyp in live {
        if !hyp.tokens.is_empty() {
            let norm = hyp.sum / hyp.tokens.len() as f64;
            done.push((hyp.tokens, norm));
        }
    }
    let mut best = 0;
    for i in 1..done.len() {
        if done[i].1 > done[best].1 {
            best = i;
        }
    }
    Ok(done.into_iter().nth(best).map(|(t, _)| t).unwrap_or_default())
}

/// Indices of the k largest entries, in descending value order; equal
/// values keep their index order.
fn top_k<P: Scalar>(row: &[P], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Encodes a single frame through the CNN; returns a vector of
/// `enc_hidden` values.
pub fn encode_frame<P: Scalar>(model: &Model<P>, frame: &Frame) -> Result<Tensor<P>> {
    let (c, h, w) = model.dims.frame;
    if frame.pixels.shape() != [c, h, w] {
        return Err(Error::ShapeMismatch {
            op: "encode_frame",
            lhs: frame.pixels.shape().to_vec(),
            rhs: vec![c, h, w],
        });
    }
    let mut g: Graph<P> = Graph::new();
    let data: Vec<P> = frame
        .pixels
        .data()
        .iter()
        .map(|&v| P::from_f64(v as f64))
        .collect();
    let x = g.leaf_from(vec![1, c, h, w], data)?;
    let y = cnn(&mut g, &model.params, x)?;
    g.tensor(y).reshaped(vec![model.dims.enc_hidden])
}

/// Encodes a frame sequence: CNN per frame, then the frame GRU; returns
/// the last hidden state.
pub fn encode_video<P: Scalar>(model: &Model<P>, frames: &[Frame]) -> Result<Tensor<P>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    let mut g: Graph<P> = Graph::new();
    let (c, h, w) = model.dims.frame;
    let mut data = Vec::new();
    for frame in frames {
        if frame.pixels.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "encode_video",
                lhs: frame.pixels.shape().to_vec(),
                rhs: vec![c, h, w],
            });
        }
        data.extend(frame.pixels.data().iter().map(|&v| P::from_f64(v as f64)));
    }
    let x = g.leaf_from(vec![frames.len(), c, h, w], data)?;
    let feats = cnn(&mut g, &model.params, x)?;
    let mut hid = g.leaf(&Tensor::zeros(vec![1, model.dims.enc_hidden]));
    for t in 0..frames.len() {
        let step = g.gather_rows(feats, &[t])?;
        hid = gru_step(&mut g, &model.params, "video_enc.gru", step, hid)?;
    }
    g.tensor(hid).reshaped(vec![model.dims.enc_hidden])
}

/// Encodes one comment through the word GRU; returns its last hidden.
pub fn encode_comment<P: Scalar>(model: &Model<P>, comment: &Comment) -> Result<Tensor<P>> {
    let mut g: Graph<P> = Graph::new();
    let out = word_vectors(&mut g, model, &[comment])?;
    g.tensor(out).reshaped(vec![model.dims.enc_hidden])
}

/// Encodes a comment list: word GRU per comment, then the sentence GRU;
/// returns the last sentence-level hidden state.
pub fn encode_context<P: Scalar>(model: &Model<P>, comments: &[Comment]) -> Result<Tensor<P>> {
    if comments.is_empty() {
        return Err(Error::EmptyInput("context comments"));
    }
    let mut g: Graph<P> = Graph::new();
    let refs: Vec<&Comment> = comments.iter().collect();
    let per = word_vectors(&mut g, model, &refs)?;
    let mut hid = g.leaf(&Tensor::zeros(vec![1, model.dims.enc_hidden]));
    for j in 0..comments.len() {
        let x = g.gather_rows(per, &[j])?;
        hid = gru_step(&mut g, &model.params, "text_enc.sent_gru", x, hid)?;
    }
    g.tensor(hid).reshaped(vec![model.dims.enc_hidden])
}

/// Probe clearance for [`check_gradients`]: every ReLU input must sit at
/// least this far from the hinge before a configuration is accepted for
/// finite differencing. Four probe half-widths covers the influence any
/// single parameter nudge has on a pre-activation in this model.
pub const RELU_CLEARANCE: f64 = 4e-5;

fn probe_clip(rng: &mut Rng, dims: &ModelDims) -> Result<Clip> {
    let (c, h, w) = dims.frame;
    let frames = (0..2)
        .map(|t| {
            let px = Tensor::from_fn(vec![c, h, w], |_| rng.uniform(0.0, 1.0) as f32);
            Frame::new(t as f64, px)
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = dims.vocab;
    let comment = |rng: &mut Rng, t: f64| {
        let len = 1 + rng.below(3);
        Comment::new(t, (0..len).map(|_| 4 + rng.below(vocab - 4)).collect())
    };
    let context = vec![comment(rng, 0.25)?, comment(rng, 1.25)?];
    let target = comment(rng, 1.0)?;
    Clip::new(frames, context, target)
}

/// Central-difference check of every parameter of the small gated model.
///
/// Builds the full variant at the reduced dims from `seed`, draws a
/// two-clip batch from the same stream, and compares backprop against
/// central differences (step 1e-5, denominator floor 1e-6) under full
/// teacher forcing. A configuration whose forward pass leaves any ReLU
/// input within [`RELU_CLEARANCE`] of zero is rejected as `None`: a probe
/// there can cross the hinge, and the comparison stops meaning anything.
/// Rejection is decided from the forward values alone, before any
/// gradient is compared, so a broken backward pass cannot hide behind it.
pub fn check_gradients(seed: u64) -> Result<Option<crate::gradcheck::FdReport>> {
    let dims = ModelDims::tiny(20);
    let donor = build_variant::<f64>(Variant::Proposal, &dims, seed)?;
    let mut rng = Rng::derive(seed, 0x6664);
    let clips = vec![probe_clip(&mut rng, &dims)?, probe_clip(&mut rng, &dims)?];
    let variant = donor.variant;
    let build_dims = dims.clone();
    let mut ps = donor.params;
    let build = move |ps: &ParamSet<f64>| -> Result<(Graph<f64>, NodeId)> {
        let m = Model {
            dims: build_dims.clone(),
            variant,
            params: ps.clone(),
        };
        let mut g: Graph<f64> = Graph::new();
        let fwd = forward_h0(&mut g, &m, &clips)?;
        let out = decode(&mut g, &m, fwd.h0, &clips, &[true, true])?;
        Ok((g, out.loss))
    };
    let (g, _) = build(&ps)?;
    if g.relu_margin() < RELU_CLEARANCE {
        return Ok(None);
    }
    drop(g);
    Ok(Some(crate::gradcheck::check(&mut ps, build, 1e-5, 1e-6)?))
}
