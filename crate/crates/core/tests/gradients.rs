//! Reverse-mode VJPs against central differences of f64 oracles.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use gradcheck::{input, matrix, run_all, silu, Arr, H, SEEDS, TOL};
use sketchmotion_core::{GradientRequest, Tape, Var};

#[test]
fn vjps_match_central_differences() {
    let summary = run_all(SEEDS);
    assert!(summary.cases >= 100, "only {} cases", summary.cases);
    assert!(summary.failures.is_empty(), "{}", summary.failures.join("\n"));
}

#[test]
fn unrequested_slots_get_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(input(&[2, 3], 1, 0));
    let b = tape.leaf(input(&[2, 3], 1, 1));
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.gradient(&GradientRequest::scalar(s, vec![a])).unwrap();
    assert_eq!(g.get(a).unwrap(), tape.value(b));
    assert!(g.get(b).is_none());
}

#[test]
fn two_layer_mlp_matches_elementwise() {
    let (mut checked, mut worst) = (0, 0.0f64);
    for seed in 0..10 {
        let x = input(&[3, 4], seed, 40);
        let w1 = input(&[4, 5], seed, 41).scale(0.5);
        let b1 = input(&[5], seed, 42);
        let w2 = input(&[5, 2], seed, 43).scale(0.5);
        let cot = input(&[3, 2], seed, 44);

        let mut tape = Tape::new();
        let vars: Vec<Var> = [&x, &w1, &b1, &w2]
            .iter()
            .map(|t| tape.leaf((*t).clone()))
            .collect();
        let h = tape.linear(vars[0], vars[1]).unwrap();
        let h = tape.add_broadcast(h, vars[2]).unwrap();
        let h = tape.silu(h).unwrap();
        let y = tape.linear(h, vars[3]).unwrap();
        let c = tape.leaf(cot.clone());
        let p = tape.mul(y, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape
            .gradient(&GradientRequest::scalar(loss, vars.clone()))
            .unwrap();

        let f = |xs: &[Arr]| -> f64 {
            let h: Vec<f64> = matrix(&xs[0], &xs[1])
                .iter()
                .enumerate()
                .map(|(i, v)| silu(v + xs[2].data[i % 5]))
                .collect();
            let h = Arr {
                shape: vec![3, 5],
                data: h,
            };
            matrix(&h, &xs[3])
                .iter()
                .zip(cot.data())
                .map(|(y, &c)| y * c as f64)
                .sum()
        };
        let base: Vec<Arr> = [&x, &w1, &b1, &w2].iter().map(|t| Arr::of(t)).collect();
        for (i, v) in vars.iter().enumerate() {
            let fds: Vec<f64> = (0..base[i].data.len())
                .map(|j| {
                    let central = |h: f64| {
                        let mut plus = base.clone();
                        plus[i].data[j] += h;
                        let mut minus = base.clone();
                        minus[i].data[j] -= h;
                        (f(&plus) - f(&minus)) / (2.0 * h)
                    };
                    // Silu makes the h² truncation term of a single central
                    // difference visible at 1e-4 elementwise; Richardson over
                    // h and h/2 cancels it.
                    (4.0 * central(H / 2.0) - central(H)) / 3.0
                })
                .collect();
            // An entry that cancels to near zero keeps the absolute f32
            // rounding of its O(1) partial sums, so the denominator never
            // drops below 1e-3 of the tensor's RMS gradient.
            let rms = (fds.iter().map(|v| v * v).sum::<f64>() / fds.len() as f64).sqrt();
            for (j, &fd) in fds.iter().enumerate() {
                let ad = g.get(*v).unwrap().data()[j] as f64;
                let rel = (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-3 * rms);
                worst = worst.max(rel);
                assert!(rel <= TOL, "seed {seed} input {i}[{j}]: {ad} vs {fd} ({rel:.2e})");
                checked += 1;
            }
        }
    }
    println!("mlp entries checked {checked}, worst relative error {worst:.2e}");
}
