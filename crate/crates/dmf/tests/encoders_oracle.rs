//! Plain nested-loop re-implementations of the encoder arithmetic,
//! checked against the graph path. The oracles here share nothing with
//! the engine: convolutions, linear layers, and GRU cells are written as
//! scalar loops over the raw parameter slices.

use dmf::data::{Comment, Frame};
use dmf::gradcheck;
use dmf::graph::Graph;
use dmf::model::{build_variant, encode_comment, encode_context, encode_frame, encode_video};
use dmf::model::{Model, ModelDims, Variant};
use dmf::nn::{conv_layer, linear};
use dmf::ParamSet;
use dmf::Rng;
use dmf::Tensor;

fn param(model: &Model<f64>, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = model.params.get(name).expect(name);
    (t.shape().to_vec(), t.data().to_vec())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// y = x W + b with W stored input-major ([in, out]).
fn linear_loop(x: &[f64], w: &(Vec<usize>, Vec<f64>), b: &[f64]) -> Vec<f64> {
    let (ins, outs) = (w.0[0], w.0[1]);
    assert_eq!(x.len(), ins);
    (0..outs)
        .map(|o| {
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w.1[i * outs + o];
            }
            acc + b[o]
        })
        .collect()
}

/// One GRU step from the named parameter block, scalar loops throughout.
fn gru_loop(model: &Model<f64>, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |w: &str, u: &str, b: &str, hh: &[f64]| -> Vec<f64> {
        let wt = param(model, &format!("{prefix}.{w}"));
        let ut = param(model, &format!("{prefix}.{u}"));
        let bt = param(model, &format!("{prefix}.{b}")).1;
        let xw = linear_loop(x, &wt, &bt);
        let hu = linear_loop(hh, &ut, &vec![0.0; bt.len()]);
        xw.iter().zip(&hu).map(|(a, b)| a + b).collect()
    };
    let z: Vec<f64> = gate("wz", "uz", "bz", h).iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = gate("wr", "ur", "br", h).iter().map(|&v| sigmoid(v)).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = gate("wh", "uh", "bh", &rh).iter().map(|&v| v.tanh()).collect();
    (0..h.len()).map(|j| z[j] * h[j] + (1.0 - z[j]) * c[j]).collect()
}

/// Stride-2, padding-1 cross-correlation plus channel bias.
fn conv_loop(
    x: &[f64],
    dims: (usize, usize, usize),
    k: &(Vec<usize>, Vec<f64>),
    b: &[f64],
) -> (Vec<f64>, (usize, usize, usize)) {
    let (ic, ih, iw) = dims;
    let (oc, kc, kh, kw) = (k.0[0], k.0[1], k.0[2], k.0[3]);
    assert_eq!(ic, kc);
    let oh = (ih + 2 - kh) / 2 + 1;
    let ow = (iw + 2 - kw) / 2 + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..ic {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * 2 + dy) as isize - 1;
                            let x0 = (ox * 2 + dx) as isize - 1;
                            if y < 0 || x0 < 0 || y >= ih as isize || x0 >= iw as isize {
                                continue;
                            }
                            let xi = (c * ih + y as usize) * iw + x0 as usize;
                            let ki = ((o * kc + c) * kh + dy) * kw + dx;
                            acc += x[xi] * k.1[ki];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, (oc, oh, ow))
}

/// Frame pixels -> feature vector: three ReLU convolutions, flatten,
/// three linear layers with ReLU between (none after the last).
fn cnn_loop(model: &Model<f64>, frame: &Frame) -> Vec<f64> {
    let mut data: Vec<f64> = frame.pixels.data().iter().map(|&v| v as f64).collect();
    let mut dims = model.dims.frame;
    for i in 1..=3 {
        let k = param(model, &format!("video_enc.conv{i}.k"));
        let b = param(model, &format!("video_enc.conv{i}.b")).1;
        let (y, next) = conv_loop(&data, dims, &k, &b);
        data = y.iter().map(|&v| v.max(0.0)).collect();
        dims = next;
    }
    for i in 1..=2 {
        let w = param(model, &format!("video_enc.fc{i}.w"));
        let b = param(model, &format!("video_enc.fc{i}.b")).1;
        data = linear_loop(&data, &w, &b).iter().map(|&v| v.max(0.0)).collect();
    }
    let w = param(model, "video_enc.fc3.w");
    let b = param(model, "video_enc.fc3.b").1;
    linear_loop(&data, &w, &b)
}

fn embedding_row(model: &Model<f64>, token: usize) -> Vec<f64> {
    let (shape, data) = param(model, "shared.embedding");
    data[token * shape[1]..(token + 1) * shape[1]].to_vec()
}

fn comment_loop(model: &Model<f64>, comment: &Comment) -> Vec<f64> {
    let mut h = vec![0.0; model.dims.enc_hidden];
    for &t in &comment.tokens {
        h = gru_loop(model, "text_enc.word_gru", &embedding_row(model, t), &h);
    }
    h
}

fn rand_frame(rng: &mut Rng, dims: (usize, usize, usize), t: f64) -> Frame {
    let (c, h, w) = dims;
    let px = Tensor::from_fn(vec![c, h, w], |_| rng.uniform(0.0, 1.0) as f32);
    Frame::new(t, px).unwrap()
}

fn rand_comment(rng: &mut Rng, vocab: usize, len: usize, t: f64) -> Comment {
    Comment::new(t, (0..len).map(|_| 4 + rng.below(vocab - 4)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn video_encoder_matches_a_scalar_loop() {
    let dims = ModelDims::desk(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 41).unwrap();
    let mut rng = Rng::new(5);
    let frames: Vec<Frame> = (0..3).map(|t| rand_frame(&mut rng, dims.frame, t as f64)).collect();

    let mut h = vec![0.0; dims.enc_hidden];
    for frame in &frames {
        h = gru_loop(&model, "video_enc.gru", &cnn_loop(&model, frame), &h);
    }
    let got = encode_video(&model, &frames).unwrap();
    assert!(max_diff(got.data(), &h) < 1e-12);

    // n = 1 is a single cell step from the zero state.
    let one = encode_video(&model, &frames[..1]).unwrap();
    let step = gru_loop(
        &model,
        "video_enc.gru",
        &cnn_loop(&model, &frames[0]),
        &vec![0.0; dims.enc_hidden],
    );
    assert!(max_diff(one.data(), &step) < 1e-12);
}

#[test]
fn frame_encoder_matches_the_convolution_loop() {
    let dims = ModelDims::desk(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 43).unwrap();
    let mut rng = Rng::new(6);
    let frame = rand_frame(&mut rng, dims.frame, 0.0);
    let got = encode_frame(&model, &frame).unwrap();
    assert_eq!(got.shape(), [dims.enc_hidden]);
    assert!(max_diff(got.data(), &cnn_loop(&model, &frame)) < 1e-12);
}

#[test]
fn comment_encoder_matches_a_scalar_loop() {
    let dims = ModelDims::desk(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 47).unwrap();
    let mut rng = Rng::new(9);
    let comment = rand_comment(&mut rng, dims.vocab, 4, 1.0);
    let got = encode_comment(&model, &comment).unwrap();
    assert!(max_diff(got.data(), &comment_loop(&model, &comment)) < 1e-12);

    let single = rand_comment(&mut rng, dims.vocab, 1, 2.0);
    let got = encode_comment(&model, &single).unwrap();
    assert!(max_diff(got.data(), &comment_loop(&model, &single)) < 1e-12);
}

#[test]
fn context_encoder_matches_a_scalar_loop() {
    let dims = ModelDims::desk(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 53).unwrap();
    let mut rng = Rng::new(11);
    // Five comments of uneven length, the default context size.
    let comments: Vec<Comment> = (0..5)
        .map(|j| {
            let len = 1 + rng.below(4);
            rand_comment(&mut rng, dims.vocab, len, j as f64)
        })
        .collect();

    let mut h = vec![0.0; dims.enc_hidden];
    for comment in &comments {
        h = gru_loop(&model, "text_enc.sent_gru", &comment_loop(&model, comment), &h);
    }
    let got = encode_context(&model, &comments).unwrap();
    assert!(max_diff(got.data(), &h) < 1e-12);

    // m = 1: the sentence GRU takes one step over one comment vector.
    let first = encode_context(&model, &comments[..1]).unwrap();
    let step = gru_loop(
        &model,
        "text_enc.sent_gru",
        &comment_loop(&model, &comments[0]),
        &vec![0.0; dims.enc_hidden],
    );
    assert!(max_diff(first.data(), &step) < 1e-12);
}

#[test]
fn identical_comments_encode_identically() {
    let dims = ModelDims::desk(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 59).unwrap();
    let a = Comment::new(3.0, vec![5, 9, 12]).unwrap();
    let b = Comment::new(7.5, vec![5, 9, 12]).unwrap();
    let va = encode_comment(&model, &a).unwrap();
    let vb = encode_comment(&model, &b).unwrap();
    // Same tokens, different timestamps: time is not an encoder input.
    assert_eq!(va.data(), vb.data());
    let again = encode_comment(&model, &a).unwrap();
    assert_eq!(va.data(), again.data());
}

#[test]
fn a_pixel_nudge_matches_the_cnn_gradient() {
    let dims = ModelDims::tiny(20);
    let model = build_variant::<f64>(Variant::Proposal, &dims, 61).unwrap();
    let (c, h, w) = dims.frame;
    let mut rng = Rng::new(13);

    // Pixels join the parameter set so the checker probes them like any
    // weight; the closure mirrors the model's convolution tower exactly.
    let mut ps: ParamSet<f64> = ParamSet::new();
    // Drawn at f32 precision so the frame round trip below is exact.
    ps.insert(
        "pixels",
        Tensor::from_fn(vec![1, c, h, w], |_| rng.uniform(0.0, 1.0) as f32 as f64),
    );
    for (name, t) in model.params.iter() {
        if name.starts_with("video_enc.conv") || name.starts_with("video_enc.fc") {
            ps.insert(name.to_string(), t.clone());
        }
    }
    let tower = |ps: &ParamSet<f64>| -> dmf::Result<(Graph<f64>, dmf::NodeId)> {
        let mut g: Graph<f64> = Graph::new();
        let mut x = g.param(ps, "pixels");
        for i in 1..=3 {
            let y = conv_layer(&mut g, ps, &format!("video_enc.conv{i}"), x, 2, 1)?;
            x = g.relu(y);
        }
        let s = g.shape(x).to_vec();
        let mut v = g.reshape(x, vec![s[0], s[1] * s[2] * s[3]])?;
        for i in 1..=2 {
            let y = linear(&mut g, ps, &format!("video_enc.fc{i}"), v)?;
            v = g.relu(y);
        }
        let out = linear(&mut g, ps, "video_enc.fc3", v)?;
        let loss = g.sum_all(out);
        Ok((g, loss))
    };

    // Pin the wiring first: the tower must be the frame encoder.
    let px32: Vec<f32> = ps.get("pixels").unwrap().data().iter().map(|&v| v as f32).collect();
    let frame = Frame::new(0.0, Tensor::from_vec(vec![c, h, w], px32).unwrap()).unwrap();
    let via_model: f64 = encode_frame(&model, &frame).unwrap().data().iter().sum();
    let (g, loss) = tower(&ps).unwrap();
    // The f32 round trip of the pixels must be exact for that comparison.
    for (&a, &b) in ps.get("pixels").unwrap().data().iter().zip(frame.pixels.data()) {
        assert_eq!(a, b as f64);
    }
    assert!((g.scalar_value(loss) - via_model).abs() < 1e-9);

    let report = gradcheck::check(&mut ps, tower, 1e-5, 1e-6).unwrap();
    assert!(
        report.max_rel < 1e-4,
        "worst {} at {:.3e}",
        report.worst,
        report.max_rel
    );
}

#[test]
fn glorot_encoders_stay_bounded() {
    for seed in [3, 17, 88] {
        let dims = ModelDims::desk(20);
        let model = build_variant::<f64>(Variant::Proposal, &dims, seed).unwrap();
        let mut rng = Rng::derive(seed, 1);
        let frames: Vec<Frame> =
            (0..4).map(|t| rand_frame(&mut rng, dims.frame, t as f64)).collect();
        let comments: Vec<Comment> = (0..3)
            .map(|j| {
                let len = 1 + rng.below(5);
                rand_comment(&mut rng, dims.vocab, len, j as f64)
            })
            .collect();
        let outputs = [
            encode_video(&model, &frames).unwrap(),
            encode_comment(&model, &comments[0]).unwrap(),
            encode_context(&model, &comments).unwrap(),
        ];
        // GRU states are convex mixtures of tanh values and the zero
        // start, so every component stays inside [-1, 1].
        for out in &outputs {
            assert!(out.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
}
