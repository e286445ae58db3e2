//! Deterministic synthetic corpus with two complementary signal channels.
//!
//! Each video shows a bright square drifting over a dark noisy canvas. The
//! square's hue walks through four buckets (red, green, blue, gold) and
//! picks the color word of screen-reactive comments; an occasional jump
//! cut makes stale context misleading about the current color. A
//! two-state chatter chain (calm vs hype) rides alongside and picks the
//! flavor word of conversational comments; it is invisible in the pixels.
//! The target comment at an anchor mixes both processes, so frames alone
//! cannot supply the thread mood and context comments alone lag the hue.
//! A model that fuses both channels has a designed, measurable edge.
//!
//! The generator is a pure function of [`SceneSpec`]: the same spec
//! yields byte-identical files on every run and platform.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::save_corpus_splits;
use crate::data::{assemble_clips, Clip, Comment, Frame};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Color word per hue bucket, in bucket order.
pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "gold"];
/// Flavor words of the calm chatter state.
pub const CALM_WORDS: [&str; 4] = ["calm", "slow", "quiet", "gentle"];
/// Flavor words of the hype chatter state.
pub const HYPE_WORDS: [&str; 4] = ["wow", "hype", "fast", "loud"];
/// Neutral fillers carrying no signal from either channel.
pub const FILLER_WORDS: [&str; 12] = [
    "stream", "video", "chat", "frame", "scene", "clip", "shot", "note", "song", "day", "vibe",
    "pixel",
];

/// Probability that the chatter chain keeps its state across one second.
pub const STATE_PERSISTENCE: f64 = 0.85;

/// Everything the generator needs; equal specs give equal corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_videos: usize,
    /// Trailing videos held out as the test split.
    pub test_videos: usize,
    /// Seconds per video; frames are rendered at 1 fps.
    pub video_length_s: usize,
    /// (channels, height, width); channels 1 or 3.
    pub frame_size: (usize, usize, usize),
    /// Frames per clip.
    pub n: usize,
    /// Context comments per clip.
    pub m: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        // 40 train videos x 50 anchors and 4 test videos x 50 anchors.
        SceneSpec {
            seed: 17,
            num_videos: 44,
            test_videos: 4,
            video_length_s: 54,
            frame_size: (3, 18, 32),
            n: 5,
            m: 5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Error::Config(format!("scene spec: {detail}"));
        if self.num_videos == 0 {
            return Err(bad("num_videos must be at least 1"));
        }
        if self.test_videos >= self.num_videos {
            return Err(bad("test_videos must leave at least one training video"));
        }
        let (c, h, w) = self.frame_size;
        if c != 1 && c != 3 {
            return Err(bad("frame channels must be 1 or 3"));
        }
        if h < 12 || w < 12 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(bad("frame sides must lie in [12, 65535]"));
        }
        if self.n == 0 {
            return Err(bad("n must be at least 1"));
        }
        if self.video_length_s < self.n || self.video_length_s < self.m + 1 {
            return Err(bad("videos too short for the requested n and m"));
        }
        Ok(())
    }
}

/// Per-second latent state of one video, for oracle-style tests.
#[derive(Clone, Debug)]
pub struct VideoTrace {
    pub hue_bucket: Vec<usize>,
    pub state: Vec<usize>,
}

/// One rendered video before tokenization.
pub struct VideoGen {
    pub frames: Vec<Frame>,
    /// (timestamp, words); one comment per second at t + 0.25.
    pub comments: Vec<(f64, Vec<&'static str>)>,
    pub trace: VideoTrace,
}

fn flavor(state: usize, rng: &mut Rng) -> &'static str {
    let set = if state == 0 { &CALM_WORDS } else { &HYPE_WORDS };
    set[rng.below(set.len())]
}

fn filler(rng: &mut Rng) -> &'static str {
    FILLER_WORDS[rng.below(FILLER_WORDS.len())]
}

/// Draws one comment conditioned on the current hue bucket and state.
///
/// Half the comments react to the screen (and name the color), a quarter
/// chat in the thread's mood, and a quarter are pure filler.
fn draw_comment(bucket: usize, state: usize, rng: &mut Rng) -> Vec<&'static str> {
    let u = rng.next_f64();
    if u < 0.5 {
        vec!["look", COLOR_WORDS[bucket], flavor(state, rng)]
    } else if u < 0.75 {
        vec![filler(rng), filler(rng), flavor(state, rng)]
    } else if rng.bernoulli(0.5) {
        vec![filler(rng), filler(rng), filler(rng)]
    } else {
        vec![filler(rng), filler(rng)]
    }
}

fn hue_bucket(theta: f64) -> usize {
    (theta.rem_euclid(TAU) / FRAC_PI_2) as usize % 4
}

fn render_frame(
    size: (usize, usize, usize),
    bucket: usize,
    cx: f64,
    cy: f64,
    rng: &mut Rng,
) -> Tensor<f32> {
    const RGB: [[f64; 3]; 4] = [
        [0.95, 0.15, 0.10],
        [0.10, 0.90, 0.15],
        [0.15, 0.20, 0.95],
        [0.95, 0.80, 0.10],
    ];
    const GRAY: [f64; 4] = [0.25, 0.48, 0.70, 0.92];
    let (c, h, w) = size;
    let hs = half_side(h, w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    let squares: Vec<f64> = if c == 3 {
        RGB[bucket].to_vec()
    } else {
        vec![GRAY[bucket]]
    };
    for square in squares {
        for y in 0..h {
            for x in 0..w {
                let inside = (y as f64 - cy).abs() <= hs && (x as f64 - cx).abs() <= hs;
                let base = if inside { square } else { 0.10 };
                let v = base + rng.uniform(-0.04, 0.04);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], data).expect("sized to shape")
}

fn half_side(h: usize, w: usize) -> usize {
    (h.min(w) / 6).max(2)
}

/// Renders one video and its comment stream. Pure function of the spec
/// and index: video `i` draws from the RNG stream `derive(seed, i)`.
pub fn generate_video(spec: &SceneSpec, index: usize) -> Result<VideoGen> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, index as u64);
    let len = spec.video_length_s;
    let (_, h, w) = spec.frame_size;
    let hs = half_side(h, w) as f64;

    let mut theta = rng.uniform(0.0, TAU);
    let mut dir = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let mut state = rng.below(2);
    let phase_x = rng.uniform(0.0, TAU);
    let phase_y = rng.uniform(0.0, TAU);
    let omega_x = rng.uniform(0.15, 0.45);
    let omega_y = rng.uniform(0.15, 0.45);

    let mut out = VideoGen {
        frames: Vec::with_capacity(len),
        comments: Vec::with_capacity(len),
        trace: VideoTrace {
            hue_bucket: Vec::with_capacity(len),
            state: Vec::with_capacity(len),
        },
    };
    for t in 0..len {
        let bucket = hue_bucket(theta);
        out.trace.hue_bucket.push(bucket);
        out.trace.state.push(state);

        let fx = ((omega_x * t as f64 + phase_x).sin() + 1.0) / 2.0;
        let fy = ((omega_y * t as f64 + phase_y).sin() + 1.0) / 2.0;
        let cx = hs + fx * (w as f64 - 1.0 - 2.0 * hs);
        let cy = hs + fy * (h as f64 - 1.0 - 2.0 * hs);
        let pixels = render_frame(spec.frame_size, bucket, cx, cy, &mut rng);
        out.frames.push(Frame::new(t as f64, pixels)?);

        out.comments
            .push((t as f64 + 0.25, draw_comment(bucket, state, &mut rng)));

        theta += dir * rng.uniform(0.08, 0.30);
        if rng.bernoulli(0.10) {
            dir = -dir;
        }
        if rng.bernoulli(0.05) {
            // Jump cut: context comments go stale on the color channel.
            theta += dir * rng.uniform(FRAC_PI_2, PI);
        }
        if !rng.bernoulli(STATE_PERSISTENCE) {
            state = 1 - state;
        }
    }
    Ok(out)
}

/// What [`generate_corpus`] wrote, for summaries and sanity checks.
#[derive(Clone, Debug, Serialize)]
pub struct CorpusSummary {
    pub videos: usize,
    pub frames: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub vocab_size: usize,
    pub skipped_short_window: usize,
    pub skipped_few_comments: usize,
}

/// Generates the full corpus into `out_dir`.
///
/// Writes `train.jsonl` and `test.jsonl` (the last `test_videos` videos),
/// a shared `frames/` pool, and `vocab.txt` built from the training
/// comments only. At the default spec no clip is skipped.
pub fn generate_corpus(spec: &SceneSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    let videos: Vec<VideoGen> = (0..spec.num_videos)
        .map(|i| generate_video(spec, i))
        .collect::<Result<_>>()?;
    let train_videos = spec.num_videos - spec.test_videos;

    let lines: Vec<String> = videos[..train_videos]
        .iter()
        .flat_map(|v| v.comments.iter().map(|(_, words)| words.join(" ")))
        .collect();
    let vocab = Vocabulary::build(&lines, 256)?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut skipped_short_window = 0;
    let mut skipped_few_comments = 0;
    for (i, video) in videos.iter().enumerate() {
        let comments = video
            .comments
            .iter()
            .map(|(t, words)| Comment::new(*t, words.iter().map(|w| vocab.id(w)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let assembly = assemble_clips(&video.frames, &comments, spec.n, spec.m)?;
        skipped_short_window += assembly.skipped_short_window;
        skipped_few_comments += assembly.skipped_few_comments;
        let split: &mut Vec<Clip> = if i < train_videos { &mut train } else { &mut test };
        split.extend(assembly.clips);
    }

    save_corpus_splits(
        out_dir,
        &[("train.jsonl", &train), ("test.jsonl", &test)],
        &vocab,
    )?;
    Ok(CorpusSummary {
        videos: spec.num_videos,
        frames: spec.num_videos * spec.video_length_s,
        train_clips: train.len(),
        test_clips: test.len(),
        vocab_size: vocab.size(),
        skipped_short_window,
        skipped_few_comments,
    })
}
