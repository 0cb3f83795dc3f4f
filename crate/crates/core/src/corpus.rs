//! Procedural sketch animations and a geometric motion classifier.
//!
//! Frames are `16 × 16 × 1` in `[-1, 1]`: white (`+1`) canvas, black (`-1`)
//! one-pixel strokes. A pixel is stroked when its centre lies within half a
//! pixel of the outline.

use alloc::vec::Vec;
use core::f32::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::noise;
use crate::tensor::Tensor;
use crate::vocab::{Motion, Shape};

pub const SIDE: usize = 16;
pub const CLIP_FRAMES: usize = 10;
/// Per-frame scale factor for grow; shrink uses its inverse.
pub const SCALE_STEP: f32 = 1.06;
pub const ROTATE_STEP_DEG: f32 = 9.0;
/// Start half-size and sub-pixel centre offset of scaling clips. At this
/// size and offset a square outline gains pixels on every frame.
const SCALE_START: f32 = 3.8;
const SCALE_OFFSET: (f32, f32) = (0.35, 0.15);

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    /// `[M, 16, 16, 1]`.
    pub frames: Tensor,
    pub shape: Shape,
    pub motion: Motion,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f32,
    cy: f32,
    size: f32,
    angle: f32,
}

/// Render one clip. The seed shifts the start pose by whole pixels
/// (at most two per axis).
pub fn gen_clip(shape: Shape, motion: Motion, seed: u64) -> ClipSample {
    let mut rng = noise::stream(seed, 0x5eed_c11b + (shape as u64) * 16 + motion as u64);
    let (jx, jy) = (rng.gen_range(0..=2i32), rng.gen_range(-2..=2i32));
    let jitter_along = jx as f32;
    let jitter_across = jy as f32;
    let centre = SIDE as f32 / 2.0;
    let start = match motion {
        Motion::Right => Pose {
            cx: 2.5 + jitter_along,
            cy: centre + jitter_across,
            size: 2.0,
            angle: 0.0,
        },
        Motion::Left => Pose {
            cx: 13.5 - jitter_along,
            cy: centre + jitter_across,
            size: 2.0,
            angle: 0.0,
        },
        Motion::Down => Pose {
            cx: centre + jitter_across,
            cy: 2.5 + jitter_along,
            size: 2.0,
            angle: 0.0,
        },
        Motion::Up => Pose {
            cx: centre + jitter_across,
            cy: 13.5 - jitter_along,
            size: 2.0,
            angle: 0.0,
        },
        Motion::Grow => Pose {
            cx: centre + SCALE_OFFSET.0 + (jx - 1) as f32,
            cy: centre + SCALE_OFFSET.1 + (jy / 2) as f32,
            size: SCALE_START,
            angle: 0.0,
        },
        Motion::Shrink => Pose {
            cx: centre + SCALE_OFFSET.0 + (jx - 1) as f32,
            cy: centre + SCALE_OFFSET.1 + (jy / 2) as f32,
            size: SCALE_START * libm::powf(SCALE_STEP, (CLIP_FRAMES - 1) as f32),
            angle: 0.0,
        },
        Motion::Rotate => Pose {
            cx: centre + (jx - 1) as f32,
            cy: centre + jitter_across / 2.0,
            size: 3.5,
            angle: 0.0,
        },
    };
    let mut data = Vec::with_capacity(CLIP_FRAMES * SIDE * SIDE);
    for i in 0..CLIP_FRAMES {
        let k = i as f32;
        let pose = match motion {
            Motion::Right => Pose {
                cx: start.cx + k,
                ..start
            },
            Motion::Left => Pose {
                cx: start.cx - k,
                ..start
            },
            Motion::Down => Pose {
                cy: start.cy + k,
                ..start
            },
            Motion::Up => Pose {
                cy: start.cy - k,
                ..start
            },
            Motion::Grow => Pose {
                size: start.size * libm::powf(SCALE_STEP, k),
                ..start
            },
            Motion::Shrink => Pose {
                size: start.size / libm::powf(SCALE_STEP, k),
                ..start
            },
            Motion::Rotate => Pose {
                angle: k * ROTATE_STEP_DEG * PI / 180.0,
                ..start
            },
        };
        render(shape, pose, &mut data);
    }
    ClipSample {
        frames: Tensor::new(&[CLIP_FRAMES, SIDE, SIDE, 1], data).expect("frame buffer"),
        shape,
        motion,
        seed,
    }
}

fn render(shape: Shape, pose: Pose, out: &mut Vec<f32>) {
    let segments = outline(shape, pose);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let on_stroke = match shape {
                Shape::Circle => {
                    let r = libm::hypotf(px - pose.cx, py - pose.cy);
                    (r - pose.size).abs() <= 0.5
                        || segments.iter().any(|s| seg_dist(px, py, s) <= 0.5)
                }
                _ => segments.iter().any(|s| seg_dist(px, py, s) <= 0.5),
            };
            out.push(if on_stroke { -1.0 } else { 1.0 });
        }
    }
}

type Segment = [f32; 4];

/// Polyline outline; the circle contributes only its radial spoke (the
/// ring itself is tested analytically) so that rotation is visible.
fn outline(shape: Shape, p: Pose) -> Vec<Segment> {
    let (c, s) = (libm::cosf(p.angle), libm::sinf(p.angle));
    let place = |u: f32, v: f32| {
        (
            p.cx + p.size * (u * c - v * s),
            p.cy + p.size * (u * s + v * c),
        )
    };
    let polygon = |pts: &[(f32, f32)]| {
        (0..pts.len())
            .map(|i| {
                let a = place(pts[i].0, pts[i].1);
                let b = place(pts[(i + 1) % pts.len()].0, pts[(i + 1) % pts.len()].1);
                [a.0, a.1, b.0, b.1]
            })
            .collect::<Vec<_>>()
    };
    match shape {
        Shape::Circle => {
            let b = place(1.0, 0.0);
            alloc::vec![[p.cx, p.cy, b.0, b.1]]
        }
        Shape::Square => polygon(&[(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]),
        Shape::Triangle => {
            let r = 1.15;
            let pts: Vec<(f32, f32)> = [-90.0f32, 30.0, 150.0]
                .iter()
                .map(|deg| {
                    let a = deg * PI / 180.0;
                    (r * libm::cosf(a), r * libm::sinf(a))
                })
                .collect();
            polygon(&pts)
        }
        Shape::Line => {
            let a = place(-1.0, 0.0);
            let b = place(1.0, 0.0);
            alloc::vec![[a.0, a.1, b.0, b.1]]
        }
    }
}

fn seg_dist(px: f32, py: f32, s: &Segment) -> f32 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    libm::hypotf(px - (s[0] + t * dx), py - (s[1] + t * dy))
}

/// Every (shape, motion) pair for seeds `0..seeds`, shape-major.
pub fn corpus(seeds: u64) -> Vec<ClipSample> {
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for motion in Motion::ALL {
            for seed in 0..seeds {
                out.push(gen_clip(shape, motion, seed));
            }
        }
    }
    out
}

/// Stroke statistics of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub count: usize,
    pub cx: f32,
    pub cy: f32,
    /// Root-mean-square distance of stroke pixels from the centroid.
    pub spread: f32,
}

/// Black-pixel statistics of frame `i` of `[M, H, W, C]` frames (channel 0).
pub fn frame_stats(frames: &Tensor, i: usize) -> Option<FrameStats> {
    let pts = stroke_points(frames, i);
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f32;
    let cx = pts.iter().map(|p| p.0).sum::<f32>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f32>() / n;
    let spread = libm::sqrtf(
        pts.iter()
            .map(|p| (p.0 - cx) * (p.0 - cx) + (p.1 - cy) * (p.1 - cy))
            .sum::<f32>()
            / n,
    );
    Some(FrameStats {
        count: pts.len(),
        cx,
        cy,
        spread,
    })
}

fn stroke_points(frames: &Tensor, i: usize) -> Vec<(f32, f32)> {
    let [_, h, w, c] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    let base = i * h * w * c;
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if frames.data()[base + (y * w + x) * c] < 0.0 {
                pts.push((x as f32 + 0.5, y as f32 + 0.5));
            }
        }
    }
    pts
}

/// Classify the dominant motion of `[M, H, W, C]` frames.
///
/// Net centroid travel of at least 3 px decides a translation. Otherwise a
/// fitted stroke-spread change beyond ±15 % over the clip decides
/// grow/shrink. Otherwise a fitted rotation of at least 4° per frame
/// against frame 0 decides rotate.
/// `Ok(None)` means no motion was found.
pub fn motion_oracle(frames: &Tensor) -> Result<Option<Motion>> {
    if frames.rank() != 4 || frames.shape()[0] < 2 {
        return Err(Error::Shape {
            shape: frames.shape().to_vec(),
            reason: "motion needs at least two [H, W, C] frames",
        });
    }
    let m = frames.shape()[0];
    let stats = (0..m)
        .map(|i| frame_stats(frames, i))
        .collect::<Option<Vec<_>>>()
        .ok_or(Error::Undecidable("a frame has no strokes"))?;
    let (first, last) = (stats[0], stats[m - 1]);
    let (dx, dy) = (last.cx - first.cx, last.cy - first.cy);
    if libm::hypotf(dx, dy) >= 3.0 {
        return Ok(Some(if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Motion::Right
            } else {
                Motion::Left
            }
        } else if dy > 0.0 {
            Motion::Down
        } else {
            Motion::Up
        }));
    }
    // Least-squares slopes over all frames, so single-frame pixelation
    // noise does not decide the label.
    let denom: f32 = (0..m).map(|i| (i as f32 - (m - 1) as f32 / 2.0).powi(2)).sum();
    let log_spread: Vec<f32> = stats.iter().map(|s| libm::logf(s.spread.max(1e-3))).collect();
    let mean_log = log_spread.iter().sum::<f32>() / m as f32;
    let slope = (0..m)
        .map(|i| (i as f32 - (m - 1) as f32 / 2.0) * (log_spread[i] - mean_log))
        .sum::<f32>()
        / denom;
    let ratio = libm::expf(slope * (m - 1) as f32);
    if ratio > 1.15 {
        return Ok(Some(Motion::Grow));
    }
    if ratio < 1.0 / 1.15 {
        return Ok(Some(Motion::Shrink));
    }
    let angles = track_rotation(frames, &stats);
    let (num, den) = angles
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(n, d), (i, &a)| (n + i as f32 * a, d + (i * i) as f32));
    if libm::fabsf(num / den) >= 4.0 {
        return Ok(Some(Motion::Rotate));
    }
    Ok(None)
}

/// Rotation of every frame relative to frame 0, in degrees.
///
/// Frame 0's strokes are rotated about its centroid and placed on frame
/// `i`'s centroid, which is exact for a rigid rotation about any point. The
/// angle minimizing the symmetric mean nearest-point distance is searched on
/// a 1° grid within 44° of the previous frame's angle, so shapes with
/// rotational symmetry are tracked continuously.
fn track_rotation(frames: &Tensor, stats: &[FrameStats]) -> Vec<f32> {
    let chamfer = |from: &[(f32, f32)], to: &[(f32, f32)]| {
        from.iter()
            .map(|&(x, y)| {
                let d = to
                    .iter()
                    .map(|&(qx, qy)| (qx - x) * (qx - x) + (qy - y) * (qy - y))
                    .fold(f32::INFINITY, f32::min);
                libm::sqrtf(d)
            })
            .sum::<f32>()
            / from.len() as f32
    };
    let base = stroke_points(frames, 0);
    let mut angles = alloc::vec![0.0f32];
    for (i, st) in stats.iter().enumerate().skip(1) {
        let target = stroke_points(frames, i);
        let prev = angles[i - 1];
        let mut best = (f32::INFINITY, prev);
        for step in -44i32..=44 {
            let deg = prev + step as f32;
            let (c, s) = (libm::cosf(deg * PI / 180.0), libm::sinf(deg * PI / 180.0));
            let rotated: Vec<(f32, f32)> = base
                .iter()
                .map(|&(x, y)| {
                    let (u, v) = (x - stats[0].cx, y - stats[0].cy);
                    (st.cx + u * c - v * s, st.cy + u * s + v * c)
                })
                .collect();
            let cost = chamfer(&rotated, &target) + chamfer(&target, &rotated);
            if cost < best.0 - 1e-6
                || (libm::fabsf(cost - best.0) <= 1e-6 && libm::fabsf(deg) < libm::fabsf(best.1))
            {
                best = (cost, deg);
            }
        }
        angles.push(best.1);
    }
    angles
}
