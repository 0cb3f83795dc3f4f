//! Shared finite-difference gradient oracle.
//!
//! Every case records an op (or a small composite) on the tape, contracts
//! its output with a random cotangent and differentiates. The reference
//! gradient comes from central differences (h = 1e-3) of an independent
//! f64 implementation of the same function, so f32 cancellation never
//! enters the comparison.

#![allow(dead_code)]

use rand::Rng;
use sketchmotion_core::noise;
use sketchmotion_core::{GradientRequest, Tape, Tensor, Var};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 5;

/// Flat f64 values with their shape.
#[derive(Clone)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn of(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> sketchmotion_core::Result<Var>;
pub type Oracle = dyn Fn(&[Arr]) -> Vec<f64>;

/// Relative L2 error between the tape gradient and the f64 difference
/// quotient, over all inputs.
pub fn check(inputs: &[Tensor], build: &Build, oracle: &Oracle, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let cot = noise::normal(tape.value(out).shape(), seed, 999);
    let c = tape.leaf(cot.clone());
    let prod = tape.mul(out, c).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape
        .gradient(&GradientRequest::scalar(loss, vars.clone()))
        .unwrap();

    let cot: Vec<f64> = cot.data().iter().map(|&v| v as f64).collect();
    let f = |xs: &[Arr]| -> f64 { oracle(xs).iter().zip(&cot).map(|(y, c)| y * c).sum() };
    let base: Vec<Arr> = inputs.iter().map(Arr::of).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.get(*v).expect("gradient for every input");
        for j in 0..base[i].data.len() {
            let mut plus = base.clone();
            plus[i].data[j] += H;
            let mut minus = base.clone();
            minus[i].data[j] -= H;
            let fd = (f(&plus) - f(&minus)) / (2.0 * H);
            let diff = ad.data()[j] as f64 - fd;
            num += diff * diff;
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-6)
}

pub fn dims(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=4)).collect()
}

pub fn input(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    noise::normal(shape, seed, stream)
}

pub fn bmm(a: &Arr, b: &Arr, transpose_b: bool) -> Vec<f64> {
    let (p, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = if transpose_b { b.shape[1] } else { b.shape[2] };
    let mut out = vec![0.0; p * m * n];
    for q in 0..p {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    let bv = if transpose_b {
                        b.data[(q * n + j) * k + l]
                    } else {
                        b.data[(q * k + l) * n + j]
                    };
                    acc += a.data[(q * m + i) * k + l] * bv;
                }
                out[(q * m + i) * n + j] = acc;
            }
        }
    }
    out
}

pub fn rows(x: &[f64], n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks(n).flat_map(f).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `[a, b, c] -> [b, a, c]`.
pub fn swap(x: &Arr) -> Vec<f64> {
    let (a, b, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; x.data.len()];
    for i in 0..a {
        for j in 0..b {
            for l in 0..c {
                out[(j * a + i) * c + l] = x.data[(i * b + j) * c + l];
            }
        }
    }
    out
}

pub fn matrix(a: &Arr, w: &Arr) -> Vec<f64> {
    let (k, n) = (w.shape[0], w.shape[1]);
    let rows = a.data.len() / k;
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = (0..k).map(|l| a.data[r * k + l] * w.data[l * n + j]).sum();
        }
    }
    out
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
    pub oracle: Box<Oracle>,
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = noise::stream(seed, 7);
    let mut out = Vec::new();
    let mut push = |name, inputs, build: Box<Build>, oracle: Box<Oracle>| {
        out.push(Case {
            name,
            inputs,
            build,
            oracle,
        })
    };

    let s = dims(&mut rng, 3);
    push(
        "add",
        vec![input(&s, seed, 0), input(&s, seed, 1)],
        Box::new(|t, v| t.add(v[0], v[1])),
        Box::new(|x| x[0].data.iter().zip(&x[1].data).map(|(a, b)| a + b).collect()),
    );
    let s = dims(&mut rng, 2);
    push(
        "sub",
        vec![input(&s, seed, 2), input(&s, seed, 3)],
        Box::new(|t, v| t.sub(v[0], v[1])),
        Box::new(|x| x[0].data.iter().zip(&x[1].data).map(|(a, b)| a - b).collect()),
    );
    let s = dims(&mut rng, 3);
    push(
        "mul",
        vec![input(&s, seed, 4), input(&s, seed, 5)],
        Box::new(|t, v| t.mul(v[0], v[1])),
        Box::new(|x| x[0].data.iter().zip(&x[1].data).map(|(a, b)| a * b).collect()),
    );
    let c = rng.gen_range(-2.0f32..2.0);
    let s = dims(&mut rng, 2);
    push(
        "scale",
        vec![input(&s, seed, 6)],
        Box::new(move |t, v| t.scale(v[0], c)),
        Box::new(move |x| x[0].data.iter().map(|a| a * c as f64).collect()),
    );
    let s = dims(&mut rng, 3);
    push(
        "add_broadcast",
        vec![input(&s, seed, 7), input(&s[1..], seed, 8)],
        Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        Box::new(|x| {
            let n = x[1].data.len();
            x[0].data
                .iter()
                .enumerate()
                .map(|(i, a)| a + x[1].data[i % n])
                .collect()
        }),
    );
    let s = dims(&mut rng, 3);
    let n = rng.gen_range(1..=4);
    push(
        "linear",
        vec![input(&s, seed, 9), input(&[s[2], n], seed, 10)],
        Box::new(|t, v| t.linear(v[0], v[1])),
        Box::new(|x| matrix(&x[0], &x[1])),
    );
    let s = dims(&mut rng, 3);
    push(
        "matmul",
        vec![input(&s[..2], seed, 11), input(&[s[1], s[2]], seed, 12)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
        Box::new(|x| matrix(&x[0], &x[1])),
    );
    let s = dims(&mut rng, 4);
    push(
        "batch_matmul",
        vec![
            input(&[s[0], s[1], s[2]], seed, 13),
            input(&[s[0], s[2], s[3]], seed, 14),
        ],
        Box::new(|t, v| t.batch_matmul(v[0], v[1], false)),
        Box::new(|x| bmm(&x[0], &x[1], false)),
    );
    let s = dims(&mut rng, 4);
    push(
        "batch_matmul_transposed",
        vec![
            input(&[s[0], s[1], s[2]], seed, 15),
            input(&[s[0], s[3], s[2]], seed, 16),
        ],
        Box::new(|t, v| t.batch_matmul(v[0], v[1], true)),
        Box::new(|x| bmm(&x[0], &x[1], true)),
    );
    let s = dims(&mut rng, 3);
    push(
        "softmax",
        vec![input(&s, seed, 17).scale(2.0)],
        Box::new(|t, v| t.softmax(v[0])),
        Box::new(|x| rows(&x[0].data, *x[0].shape.last().unwrap(), softmax)),
    );
    // Two-wide rows normalize to ±1 whatever the input, leaving a
    // near-zero gradient that no relative measure can resolve.
    let mut s = dims(&mut rng, 2);
    s[1] += 2;
    push(
        "layer_norm",
        vec![input(&s, seed, 18)],
        Box::new(|t, v| t.layer_norm(v[0], 1e-5)),
        Box::new(|x| rows(&x[0].data, x[0].shape[1], |r| layer_norm(r, 1e-5))),
    );
    let s = dims(&mut rng, 3);
    push(
        "silu",
        vec![input(&s, seed, 19).scale(2.0)],
        Box::new(|t, v| t.silu(v[0])),
        Box::new(|x| x[0].data.iter().map(|&a| silu(a)).collect()),
    );
    let s = dims(&mut rng, 3);
    let flat = s.iter().product::<usize>();
    push(
        "reshape",
        vec![input(&s, seed, 20), input(&[flat], seed, 21)],
        Box::new(move |t, v| {
            let r = t.reshape(v[0], &[flat])?;
            t.mul(r, v[1])
        }),
        Box::new(|x| x[0].data.iter().zip(&x[1].data).map(|(a, b)| a * b).collect()),
    );
    let s = dims(&mut rng, 3);
    push(
        "swap_outer",
        vec![input(&s, seed, 22)],
        Box::new(|t, v| t.swap_outer(v[0])),
        Box::new(|x| swap(&x[0])),
    );
    let s = dims(&mut rng, 3);
    let lead2 = rng.gen_range(1..=3);
    push(
        "concat_outer",
        vec![
            input(&s, seed, 23),
            input(&[lead2, s[1], s[2]], seed, 24),
        ],
        Box::new(|t, v| t.concat_outer(&[v[0], v[1]])),
        Box::new(|x| x[0].data.iter().chain(&x[1].data).cloned().collect()),
    );
    let mut s = dims(&mut rng, 2);
    s[0] += 2;
    let start = rng.gen_range(0..s[0]);
    let len = rng.gen_range(1..=s[0] - start);
    let inner = s[1];
    push(
        "slice_outer",
        vec![input(&s, seed, 25)],
        Box::new(move |t, v| t.slice_outer(v[0], start, len)),
        Box::new(move |x| x[0].data[start * inner..(start + len) * inner].to_vec()),
    );
    let s = dims(&mut rng, 3);
    push(
        "sum",
        vec![input(&s, seed, 26)],
        Box::new(|t, v| t.sum(v[0])),
        Box::new(|x| vec![x[0].data.iter().sum()]),
    );
    let mut s = dims(&mut rng, 2);
    s[0] += 1;
    let index = rng.gen_range(0..s[0]);
    let cols = s[1];
    push(
        "row",
        vec![input(&s, seed, 27)],
        Box::new(move |t, v| t.row(v[0], index)),
        Box::new(move |x| x[0].data[index * cols..(index + 1) * cols].to_vec()),
    );
    let s = dims(&mut rng, 3);
    let numel = s.iter().product::<usize>();
    let mask: Vec<bool> = (0..numel).map(|_| rng.gen_bool(0.4)).collect();
    let replacement = input(&s, seed, 28);
    let rep64 = Arr::of(&replacement);
    let mask2 = mask.clone();
    push(
        "substitute",
        vec![input(&s, seed, 29)],
        Box::new(move |t, v| t.substitute(v[0], &replacement, mask.clone())),
        Box::new(move |x| {
            x[0].data
                .iter()
                .zip(&rep64.data)
                .zip(&mask2)
                .map(|((&a, &r), &m)| if m { r } else { a })
                .collect()
        }),
    );

    let [b, m, d] = [rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(1..=4)];
    let scale = 1.0 / (d as f32).sqrt();
    push(
        "attention",
        vec![
            input(&[b, m, d], seed, 30),
            input(&[b, m, d], seed, 31),
            input(&[b, m, d], seed, 32),
        ],
        Box::new(move |t, v| {
            let s = t.batch_matmul(v[0], v[1], true)?;
            let s = t.scale(s, scale)?;
            let p = t.softmax(s)?;
            t.batch_matmul(p, v[2], false)
        }),
        Box::new(move |x| {
            let s: Vec<f64> = bmm(&x[0], &x[1], true)
                .iter()
                .map(|v| v * scale as f64)
                .collect();
            let p = Arr {
                shape: vec![b, m, m],
                data: rows(&s, m, softmax),
            };
            bmm(&p, &x[2], false)
        }),
    );

    let [r, d, h] = [rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(1..=4)];
    push(
        "residual_mlp",
        vec![
            input(&[r, d], seed, 33),
            input(&[d, h], seed, 34),
            input(&[h], seed, 35),
            input(&[h, d], seed, 36),
        ],
        Box::new(|t, v| {
            let n = t.layer_norm(v[0], 1e-5)?;
            let a = t.linear(n, v[1])?;
            let a = t.add_broadcast(a, v[2])?;
            let a = t.silu(a)?;
            let o = t.linear(a, v[3])?;
            t.add(v[0], o)
        }),
        Box::new(move |x| {
            let n = Arr {
                shape: x[0].shape.clone(),
                data: rows(&x[0].data, d, |row| layer_norm(row, 1e-5)),
            };
            let a: Vec<f64> = matrix(&n, &x[1])
                .iter()
                .enumerate()
                .map(|(i, v)| silu(v + x[2].data[i % h]))
                .collect();
            let a = Arr {
                shape: vec![r, h],
                data: a,
            };
            matrix(&a, &x[3])
                .iter()
                .zip(&x[0].data)
                .map(|(o, x0)| o + x0)
                .collect()
        }),
    );

    out
}

/// Outcome of running every case over `seeds` seeds.
pub struct Summary {
    pub cases: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

pub fn run_all(seeds: u64) -> Summary {
    let mut summary = Summary {
        cases: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for seed in 0..seeds {
        for case in cases(seed) {
            let err = check(&case.inputs, &*case.build, &*case.oracle, seed);
            summary.cases += 1;
            summary.worst = summary.worst.max(err);
            if !(err <= TOL) {
                summary
                    .failures
                    .push(format!("{} (seed {seed}): relative error {err:.3e}", case.name));
            }
        }
    }
    summary
}
