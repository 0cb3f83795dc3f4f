//! Generated clips against the motion oracle and the evaluation metrics
//! against direct loop oracles.

use sketchmotion_core::corpus::{self, frame_stats, CLIP_FRAMES, SIDE};
use sketchmotion_core::{eval_identity, eval_motion, gen_clip, motion_oracle, Motion, Shape, Tensor};

#[test]
fn oracle_agrees_with_generator_over_label_grid() {
    let (mut agree, mut total) = (0, 0);
    let mut misses = Vec::new();
    for shape in Shape::ALL {
        for motion in Motion::ALL {
            for seed in 0..10 {
                let clip = gen_clip(shape, motion, seed);
                let got = motion_oracle(&clip.frames).ok().flatten();
                total += 1;
                if got == Some(motion) {
                    agree += 1;
                } else {
                    misses.push(format!("{shape} {motion} {seed}: {got:?}"));
                }
            }
        }
    }
    let rate = agree as f64 / total as f64;
    println!("oracle agreement {agree}/{total}; misses: {misses:?}");
    assert!(rate >= 0.95, "agreement {rate:.3}: {misses:?}");
}

#[test]
fn triangle_up_and_circle_grow_examples() {
    for seed in 0..5 {
        let up = gen_clip(Shape::Triangle, Motion::Up, seed);
        assert_eq!(motion_oracle(&up.frames).unwrap(), Some(Motion::Up));
        let grow = gen_clip(Shape::Circle, Motion::Grow, seed);
        assert_eq!(motion_oracle(&grow.frames).unwrap(), Some(Motion::Grow));
    }
}

#[test]
fn corpus_covers_the_grid() {
    let clips = corpus::corpus(2);
    assert_eq!(clips.len(), 2 * 28);
    for c in &clips {
        assert_eq!(c.frames.shape(), &[CLIP_FRAMES, SIDE, SIDE, 1]);
        assert!(c.frames.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }
}

#[test]
fn circle_right_centroid_oracle() {
    for seed in 0..10 {
        let clip = gen_clip(Shape::Circle, Motion::Right, seed);
        // Centroid of black pixels computed here from scratch.
        let xs: Vec<f64> = (0..CLIP_FRAMES)
            .map(|f| {
                let (mut sum, mut n) = (0.0, 0.0);
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        if clip.frames.data()[(f * SIDE + y) * SIDE + x] < 0.0 {
                            sum += x as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                sum / n
            })
            .collect();
        for w in xs.windows(2) {
            let step = w[1] - w[0];
            assert!((0.5..=1.5).contains(&step), "seed {seed}: step {step}");
        }
        let stats = frame_stats(&clip.frames, 0).unwrap();
        assert!((stats.cx as f64 - xs[0]).abs() < 1e-4);
    }
}

#[test]
fn square_grow_count_strictly_increases() {
    for seed in 0..10 {
        let clip = gen_clip(Shape::Square, Motion::Grow, seed);
        let counts: Vec<usize> = (0..CLIP_FRAMES)
            .map(|f| frame_stats(&clip.frames, f).unwrap().count)
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {counts:?}");
    }
}

#[test]
fn static_clip_is_not_labelled() {
    let clip = gen_clip(Shape::Line, Motion::Left, 3);
    let first = clip.frames.slice_outer(0, 1).unwrap();
    let still = first.tile_outer(CLIP_FRAMES).unwrap();
    assert_eq!(motion_oracle(&still).unwrap(), None);
}

/// Mean |frame_i − frame_{i−1}| by two explicit loops.
fn motion_oracle_loops(frames: &Tensor) -> f64 {
    let m = frames.shape()[0];
    let per = frames.numel() / m;
    let mut total = 0.0;
    for i in 1..m {
        for j in 0..per {
            total += (frames.data()[i * per + j] as f64 - frames.data()[(i - 1) * per + j] as f64)
                .abs();
        }
    }
    total / ((m - 1) * per) as f64
}

#[test]
fn eval_motion_matches_loop_oracle() {
    for seed in 0..10 {
        let clip = gen_clip(Shape::Circle, Motion::Right, seed);
        let got = eval_motion(&clip.frames).unwrap() as f64;
        assert!((got - motion_oracle_loops(&clip.frames)).abs() <= 1e-6);
    }
    let raw = sketchmotion_core::noise::normal(&[5, 4, 4, 1], 1, 0);
    assert!((eval_motion(&raw).unwrap() as f64 - motion_oracle_loops(&raw)).abs() <= 1e-6);
}

#[test]
fn eval_motion_analytic_cases() {
    let black = Tensor::full(&[1, 4, 4, 1], -1.0);
    let white = Tensor::full(&[1, 4, 4, 1], 1.0);
    let alt = Tensor::concat_outer(&[&black, &white, &black, &white]).unwrap();
    assert_eq!(eval_motion(&alt).unwrap(), 2.0);
    assert_eq!(eval_motion(&black.tile_outer(3).unwrap()).unwrap(), 0.0);
    assert!(eval_motion(&black).is_err());
}

#[test]
fn eval_identity_cases() {
    let clip = gen_clip(Shape::Square, Motion::Up, 0);
    let sketch = clip.frames.slice_outer(0, 1).unwrap();
    let inverted = sketch.map(|v| -v);
    assert_eq!(eval_identity(&inverted, &sketch).unwrap(), 0.0);
    assert_eq!(eval_identity(&sketch.tile_outer(4).unwrap(), &sketch).unwrap(), 1.0);

    // Black pixels at {0,1,2} and {1,2,3}: |A∩B| = 2, |A∪B| = 4.
    let a = Tensor::new(&[1, 1, 4, 1], vec![-1.0, -1.0, -1.0, 1.0]).unwrap();
    let b = Tensor::new(&[1, 4, 1], vec![1.0, -1.0, -1.0, -1.0]).unwrap();
    assert_eq!(eval_identity(&a, &b).unwrap(), 0.5);

    let blank = Tensor::full(&[2, 4, 4, 1], 1.0);
    assert_eq!(
        eval_identity(&blank, &Tensor::full(&[4, 4, 1], 1.0)).unwrap(),
        1.0
    );
    assert!(eval_identity(&blank, &Tensor::full(&[3, 3, 1], 1.0)).is_err());
}
