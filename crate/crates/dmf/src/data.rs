//! Comments, frames, clips, and clip assembly.
//!
//! A clip pairs the `n` video frames ending at an anchor frame with the
//! `m` comments nearest that anchor in time (the context) and one more
//! nearest comment held out as the generation target. Timestamps on
//! comments are seconds from video start; frame timestamps are 1 s apart
//! by construction. Clip equality ignores absolute frame timestamps,
//! which the corpus format does not persist.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default context size: the five nearest comments.
pub const DEFAULT_M: usize = 5;
/// Default frames per clip.
pub const DEFAULT_N: usize = 5;

/// A tokenized live comment. Token ids never include BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Comment {
    pub t: f64,
    pub tokens: Vec<usize>,
}

impl Comment {
    pub fn new(t: f64, tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("comment tokens"));
        }
        Ok(Comment { t, tokens })
    }
}

/// One video frame: `[C, H, W]` pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub pixels: Tensor<f32>,
}

impl Frame {
    pub fn new(t: f64, pixels: Tensor<f32>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
            return Err(Error::InvalidShape {
                op: "frame",
                shape: shape.to_vec(),
                detail: "expected [c, h, w] with c in {1, 3}".into(),
            });
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::CorpusMismatch("frame pixel outside [0, 1]".into()));
        }
        Ok(Frame { t, pixels })
    }
}

/// An anchored training example.
#[derive(Clone, Debug)]
pub struct Clip {
    /// The n frames ending at the anchor, timestamps 1 s apart.
    pub frames: Vec<Frame>,
    /// The m context comments, ordered by timestamp.
    pub context: Vec<Comment>,
    /// The held-out comment nearest the anchor; never in the context.
    pub target: Comment,
}

impl Clip {
    pub fn new(frames: Vec<Frame>, mut context: Vec<Comment>, target: Comment) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("clip frames"));
        }
        for pair in frames.windows(2) {
            let dt = pair[1].t - pair[0].t;
            if (dt - 1.0).abs() > 1e-6 {
                return Err(Error::CorpusMismatch(format!(
                    "frame spacing {dt} is not 1 s"
                )));
            }
        }
        context.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Clip {
            frames,
            context,
            target,
        })
    }

    /// Timestamp of the anchor (last) frame.
    pub fn anchor_t(&self) -> f64 {
        self.frames.last().expect("non-empty").t
    }
}

impl PartialEq for Clip {
    fn eq(&self, other: &Self) -> bool {
        self.context == other.context
            && self.target == other.target
            && self.frames.len() == other.frames.len()
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.pixels == b.pixels)
    }
}

/// Output of [`assemble_clips`], with skip accounting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assembly {
    pub clips: Vec<Clip>,
    /// Anchors dropped because fewer than n frames precede them.
    pub skipped_short_window: usize,
    /// Anchors dropped because fewer than m + 1 comments exist.
    pub skipped_few_comments: usize,
}

/// Builds one clip per eligible anchor frame.
///
/// An anchor frame is one that ends a full window of `n` frames, so the
/// first `n - 1` frames of a video only ever appear as history. A stream
/// shorter than `n` yields no anchors at all and reports every frame as
/// skipped; an anchor without `m + 1` comments to draw on is skipped and
/// counted separately. The target is the comment nearest the anchor by
/// |Δt|, the context the `m` next nearest; ties break toward the earlier
/// comment. Delivery order of `frames` and `comments` does not matter:
/// both are sorted internally, so the function is a pure function of the
/// sets.
pub fn assemble_clips(
    frames: &[Frame],
    comments: &[Comment],
    n: usize,
    m: usize,
) -> Result<Assembly> {
    if n == 0 {
        return Err(Error::EmptyInput("assemble_clips n"));
    }
    let mut frames: Vec<Frame> = frames.to_vec();
    frames.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut comments: Vec<Comment> = comments.to_vec();
    comments.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.tokens.cmp(&b.tokens)));

    let mut out = Assembly::default();
    if frames.len() < n {
        out.skipped_short_window = frames.len();
        return Ok(out);
    }
    for anchor in (n - 1)..frames.len() {
        if comments.len() < m + 1 {
            out.skipped_few_comments += 1;
            continue;
        }
        let at = frames[anchor].t;
        // Stable sort by |Δt| keeps earlier comments first on ties,
        // because the list is already in time order.
        let mut order: Vec<usize> = (0..comments.len()).collect();
        order.sort_by(|&a, &b| (comments[a].t - at).abs().total_cmp(&(comments[b].t - at).abs()));
        let target = comments[order[0]].clone();
        let mut context: Vec<Comment> = order[1..=m].iter().map(|&i| comments[i].clone()).collect();
        context.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.tokens.cmp(&b.tokens)));
        out.clips.push(Clip::new(
            frames[anchor + 1 - n..=anchor].to_vec(),
            context,
            target,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: f64) -> Frame {
        Frame::new(t, Tensor::full(vec![1, 2, 2], 0.5)).unwrap()
    }

    fn comment(t: f64, first: usize) -> Comment {
        Comment::new(t, vec![first, 9]).unwrap()
    }

    fn toy() -> (Vec<Frame>, Vec<Comment>) {
        let frames = (0..5).map(|i| frame(i as f64)).collect();
        let comments = [0.1, 0.9, 1.1, 2.0, 2.2, 3.5]
            .iter()
            .enumerate()
            .map(|(i, &t)| comment(t, i + 4))
            .collect();
        (frames, comments)
    }

    #[test]
    fn toy_timeline_enumerated_by_hand() {
        let (frames, comments) = toy();
        let out = assemble_clips(&frames, &comments, 3, 5).unwrap();
        // Frames t=0 and t=1 are history only; anchors t=2, 3, 4 each use
        // the 6 comments as 1 target + 5 context.
        assert_eq!(out.skipped_short_window, 0);
        assert_eq!(out.skipped_few_comments, 0);
        assert_eq!(out.clips.len(), 3);

        // Anchor t=2: nearest comment is 2.0; context is everything else.
        let c2 = &out.clips[0];
        assert_eq!(c2.target.t, 2.0);
        let ctx_t: Vec<f64> = c2.context.iter().map(|c| c.t).collect();
        assert_eq!(ctx_t, vec![0.1, 0.9, 1.1, 2.2, 3.5]);
        assert_eq!(c2.frames.len(), 3);
        assert_eq!(c2.anchor_t(), 2.0);

        // Anchor t=4: nearest is 3.5.
        assert_eq!(out.clips[2].target.t, 3.5);
    }

    #[test]
    fn five_comments_cannot_fill_five_plus_target() {
        let (frames, mut comments) = toy();
        comments.pop();
        let out = assemble_clips(&frames, &comments, 3, 5).unwrap();
        assert!(out.clips.is_empty());
        assert_eq!(out.skipped_few_comments, 3);
        assert_eq!(out.skipped_short_window, 0);
    }

    #[test]
    fn a_stream_shorter_than_the_window_reports_every_frame() {
        let (_, comments) = toy();
        let frames = vec![frame(0.0), frame(1.0)];
        let out = assemble_clips(&frames, &comments, 3, 2).unwrap();
        assert!(out.clips.is_empty());
        assert_eq!(out.skipped_short_window, 2);
        assert_eq!(out.skipped_few_comments, 0);
    }

    #[test]
    fn degenerate_f2c_pairs() {
        let (frames, comments) = toy();
        let out = assemble_clips(&frames, &comments, 1, 0).unwrap();
        assert_eq!(out.clips.len(), 5);
        for clip in &out.clips {
            assert_eq!(clip.frames.len(), 1);
            assert!(clip.context.is_empty());
        }
        // Anchor t=1 ties between 0.9 and 1.1: the earlier comment wins.
        assert_eq!(out.clips[1].target.t, 0.9);
    }

    #[test]
    fn delivery_order_does_not_matter() {
        let (frames, comments) = toy();
        let baseline = assemble_clips(&frames, &comments, 2, 3).unwrap();

        let mut rf = frames.clone();
        rf.reverse();
        let mut rc = comments.clone();
        rc.rotate_left(2);
        rc.swap(0, 3);
        let shuffled = assemble_clips(&rf, &rc, 2, 3).unwrap();
        assert_eq!(baseline, shuffled);
    }

    #[test]
    fn clip_rejects_gapped_frames() {
        let frames = vec![frame(0.0), frame(2.5)];
        let err = Clip::new(frames, vec![], comment(0.0, 4));
        assert!(err.is_err());
    }

    #[test]
    fn frame_validates_shape_and_range() {
        assert!(Frame::new(0.0, Tensor::full(vec![2, 2, 2], 0.5)).is_err());
        assert!(Frame::new(0.0, Tensor::full(vec![4, 4], 0.5)).is_err());
        assert!(Frame::new(0.0, Tensor::full(vec![1, 2, 2], 1.5)).is_err());
        assert!(Frame::new(0.0, Tensor::full(vec![3, 2, 2], 1.0)).is_ok());
    }

    #[test]
    fn comment_must_have_tokens() {
        assert!(Comment::new(1.0, vec![]).is_err());
    }
}
