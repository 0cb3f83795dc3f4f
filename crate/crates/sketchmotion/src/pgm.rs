//! Binary (P5) greymaps with maxval 255. A value `v ∈ [-1, 1]` is stored as
//! `round((v + 1)·127.5)` and read back as `p / 127.5 − 1`.

use std::fs;
use std::path::Path;

use sketchmotion_core::Tensor;

use crate::error::{Error, Result};

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Encode a `[H, W, 1]` (or `[1, H, W, 1]`) frame.
pub fn encode(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *frame.shape() {
        [h, w, 1] | [1, h, w, 1] => (h, w),
        _ => {
            return Err(Error::format(
                "frame",
                format!("expected [H, W, 1], got {:?}", frame.shape()),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Decode a P5 image into a `[H, W, 1]` frame. Comments (`#` to end of
/// line) are allowed between header fields.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut field = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if field()? != "P5" {
        return Err(Error::format("pgm", "not a binary greymap (P5)"));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pgm", format!("bad header number `{s}`")))
    };
    let w = num(field()?)?;
    let h = num(field()?)?;
    let maxval = num(field()?)?;
    if maxval != 255 {
        return Err(Error::format("pgm", format!("maxval {maxval} (need 255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::format("pgm", "raster shorter than header says"))?;
    Ok(Tensor::new(
        &[h, w, 1],
        raster.iter().map(|&p| from_byte(p)).collect(),
    )?)
}

pub fn write(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, encode(frame)?).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}

/// Frames `[M, H, W, 1]` side by side, separated by one mid-grey column.
pub fn contact_sheet(frames: &Tensor) -> Result<Tensor> {
    let (m, h, w) = match *frames.shape() {
        [m, h, w, 1] if m > 0 => (m, h, w),
        _ => {
            return Err(Error::format(
                "frames",
                format!("expected [M, H, W, 1], got {:?}", frames.shape()),
            ))
        }
    };
    let sheet_w = m * w + (m - 1);
    let mut data = vec![0.0; h * sheet_w];
    for y in 0..h {
        for f in 0..m {
            let src = &frames.data()[(f * h + y) * w..(f * h + y + 1) * w];
            let x0 = f * (w + 1);
            data[y * sheet_w + x0..y * sheet_w + x0 + w].copy_from_slice(src);
        }
    }
    Ok(Tensor::new(&[h, sheet_w, 1], data)?)
}
