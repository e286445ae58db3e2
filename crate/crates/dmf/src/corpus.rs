//! On-disk corpus format: a JSONL manifest, frame blobs, and a vocabulary.
//!
//! The manifest holds one clip per line with comment tokens spelled out as
//! strings; frame pixels live in sibling `frames/*.dmfr` blobs referenced
//! by relative path, and `vocab.txt` next to the manifest fixes the token
//! ids. Identical frames are written once and shared. A save followed by
//! a load reproduces the clips bit for bit, except that frame timestamps
//! are not persisted: loaded clips number their frames 0, 1, 2, ... s.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, Comment, Frame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Leading bytes of every frame blob.
pub const FRAME_MAGIC: [u8; 4] = *b"DMFR";

#[derive(Serialize, Deserialize)]
struct ManifestComment {
    t: f64,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestClip {
    frames: Vec<String>,
    context: Vec<ManifestComment>,
    target: ManifestComment,
}

fn read_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::FileRead {
        path: path.to_path_buf(),
        source,
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::FileWrite {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes one frame to blob bytes: magic, u16 c/h/w, then f32 LE pixels.
pub fn encode_frame(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "encode_frame",
            shape: shape.to_vec(),
            detail: "expected [c, h, w]".into(),
        });
    }
    let mut out = Vec::with_capacity(10 + 4 * pixels.numel());
    out.extend_from_slice(&FRAME_MAGIC);
    for &dim in shape {
        let dim = u16::try_from(dim).map_err(|_| Error::InvalidShape {
            op: "encode_frame",
            shape: shape.to_vec(),
            detail: "dimension exceeds u16".into(),
        })?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in pixels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses blob bytes produced by [`encode_frame`].
pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let truncated = || Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: "frame blob truncated".into(),
    };
    if bytes.len() < 10 {
        if bytes.len() >= 4 && bytes[..4] != FRAME_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: FRAME_MAGIC,
                found,
            });
        }
        return Err(truncated());
    }
    if bytes[..4] != FRAME_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FRAME_MAGIC,
            found,
        });
    }
    let dim = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let numel: usize = shape.iter().product();
    let payload = &bytes[10..];
    if payload.len() != 4 * numel {
        return Err(if payload.len() < 4 * numel {
            truncated()
        } else {
            Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail: format!("{} trailing bytes", payload.len() - 4 * numel),
            }
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Writes one frame blob to `path`.
pub fn write_frame(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_frame(pixels)?).map_err(write_err(path))
}

/// Reads one frame blob from `path`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(read_err(path))?;
    decode_frame(&bytes, path)
}

fn comment_out(c: &Comment, vocab: &Vocabulary) -> Result<ManifestComment> {
    let tokens = c
        .tokens
        .iter()
        .map(|&id| vocab.token(id).map(str::to_owned))
        .collect::<Result<_>>()?;
    Ok(ManifestComment { t: c.t, tokens })
}

fn comment_in(c: ManifestComment, vocab: &Vocabulary) -> Result<Comment> {
    Comment::new(c.t, c.tokens.iter().map(|tok| vocab.id(tok)).collect())
}

/// Writes several manifests into one directory with shared frames.
///
/// Each `(file_name, clips)` pair becomes a JSONL manifest in `dir`; all
/// of them reference one `frames/` pool and one `vocab.txt`, and a frame
/// appearing in several clips or several splits is written exactly once.
/// The layout is a pure function of the inputs, so repeated saves are
/// byte-identical.
pub fn save_corpus_splits(
    dir: &Path,
    splits: &[(&str, &[Clip])],
    vocab: &Vocabulary,
) -> Result<()> {
    let frame_dir = dir.join("frames");
    fs::create_dir_all(&frame_dir).map_err(write_err(&frame_dir))?;
    vocab.save(&dir.join("vocab.txt"))?;

    let mut seen: HashMap<Vec<u8>, String> = HashMap::new();
    for (name, clips) in splits {
        let mut manifest = Vec::new();
        for clip in *clips {
            let mut frames = Vec::with_capacity(clip.frames.len());
            for frame in &clip.frames {
                let blob = encode_frame(&frame.pixels)?;
                let next = format!("frames/f{:06}.dmfr", seen.len());
                let rel = seen.entry(blob.clone()).or_insert(next);
                let full = dir.join(rel.as_str());
                if !full.exists() {
                    fs::write(&full, &blob).map_err(write_err(&full))?;
                }
                frames.push(rel.clone());
            }
            let line = ManifestClip {
                frames,
                context: clip
                    .context
                    .iter()
                    .map(|c| comment_out(c, vocab))
                    .collect::<Result<_>>()?,
                target: comment_out(&clip.target, vocab)?,
            };
            let json = serde_json::to_string(&line).expect("manifest line serializes");
            manifest.extend_from_slice(json.as_bytes());
            manifest.push(b'\n');
        }
        let path = dir.join(name);
        let mut file = fs::File::create(&path).map_err(write_err(&path))?;
        file.write_all(&manifest).map_err(write_err(&path))?;
    }
    Ok(())
}

/// Writes `clips` as a single manifest beside its `vocab.txt` and frames.
pub fn save_corpus(manifest_path: &Path, clips: &[Clip], vocab: &Vocabulary) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parse {
            path: manifest_path.to_path_buf(),
            line: 0,
            detail: "manifest path has no file name".into(),
        })?;
    save_corpus_splits(dir, &[(name, clips)], vocab)
}

/// Loads a corpus written by [`save_corpus`].
///
/// The vocabulary is read from `vocab.txt` beside the manifest; frame
/// blobs are cached by path, so shared frames hit the disk once.
pub fn load_corpus(manifest_path: &Path) -> Result<(Vec<Clip>, Vocabulary)> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let text = fs::read_to_string(manifest_path).map_err(read_err(manifest_path))?;

    let mut cache: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parsed: ManifestClip = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: manifest_path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        let mut frames = Vec::with_capacity(parsed.frames.len());
        for (k, rel) in parsed.frames.iter().enumerate() {
            let pixels = match cache.get(rel) {
                Some(hit) => hit.clone(),
                None => {
                    let loaded = read_frame(&dir.join(rel))?;
                    cache.insert(rel.clone(), loaded.clone());
                    loaded
                }
            };
            // Timestamps are not persisted; keep the 1 s spacing.
            frames.push(Frame::new(k as f64, pixels)?);
        }
        let context = parsed
            .context
            .into_iter()
            .map(|c| comment_in(c, &vocab))
            .collect::<Result<_>>()?;
        let target = comment_in(parsed.target, &vocab)?;
        clips.push(Clip::new(frames, context, target)?);
    }
    Ok((clips, vocab))
}
