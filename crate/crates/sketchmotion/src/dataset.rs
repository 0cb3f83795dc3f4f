//! On-disk clip corpus: `DIR/<shape>_<motion>_<seed>/frame_NN.pgm` plus a
//! `labels.txt` with one `dir shape motion seed` line per clip.

use std::fs;
use std::path::Path;

use sketchmotion_core::{corpus, ClipSample, Motion, Shape, Tensor};

use crate::error::{Error, Result};
use crate::pgm;

pub const LABELS: &str = "labels.txt";

pub fn clip_dir(clip: &ClipSample) -> String {
    format!("{}_{}_{}", clip.shape, clip.motion, clip.seed)
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:02}.pgm")
}

/// Write every (shape, motion) pair for seeds `0..seeds`.
pub fn generate(dir: &Path, seeds: u64) -> Result<Vec<ClipSample>> {
    let clips = corpus::corpus(seeds);
    write(dir, &clips)?;
    Ok(clips)
}

pub fn write(dir: &Path, clips: &[ClipSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut labels = String::new();
    for clip in clips {
        let name = clip_dir(clip);
        let sub = dir.join(&name);
        fs::create_dir_all(&sub).map_err(Error::io(&sub))?;
        for i in 0..clip.frames.shape()[0] {
            pgm::write(&sub.join(frame_name(i)), &clip.frames.slice_outer(i, 1)?)?;
        }
        labels.push_str(&format!(
            "{name} {} {} {}\n",
            clip.shape, clip.motion, clip.seed
        ));
    }
    let path = dir.join(LABELS);
    fs::write(&path, labels).map_err(Error::io(&path))
}

pub fn read(dir: &Path) -> Result<Vec<ClipSample>> {
    let path = dir.join(LABELS);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, motion, seed] = fields[..] else {
            return Err(err(format!(
                "expected `dir shape motion seed`, got `{line}`"
            )));
        };
        let shape: Shape = shape
            .parse()
            .map_err(|e: sketchmotion_core::Error| err(e.to_string()))?;
        let motion: Motion = motion
            .parse()
            .map_err(|e: sketchmotion_core::Error| err(e.to_string()))?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| err(format!("bad seed `{seed}`")))?;
        let sub = dir.join(name);
        let mut frames = Vec::new();
        while sub.join(frame_name(frames.len())).exists() {
            frames.push(pgm::read(&sub.join(frame_name(frames.len())))?);
        }
        if frames.is_empty() {
            return Err(Error::Io {
                path: sub.join(frame_name(0)),
                source: std::io::ErrorKind::NotFound.into(),
            });
        }
        let [h, w, c] = [
            frames[0].shape()[0],
            frames[0].shape()[1],
            frames[0].shape()[2],
        ];
        let refs: Vec<Tensor> = frames
            .iter()
            .map(|f| f.reshape(&[1, h, w, c]))
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&Tensor> = refs.iter().collect();
        clips.push(ClipSample {
            frames: Tensor::concat_outer(&refs)?,
            shape,
            motion,
            seed,
        });
    }
    if clips.is_empty() {
        return Err(Error::format(
            "dataset",
            format!("{} lists no clips", path.display()),
        ));
    }
    Ok(clips)
}
