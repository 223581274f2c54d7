//! Finite-difference checks for every differentiable tape operation.
//!
//! Inputs for kinked ops (relu, abs, min/max) are sampled away from the
//! kink so the central difference is valid.

use attnconv_core::gradcheck;
use attnconv_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 10;

fn smooth(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::rand_uniform(shape, -2.0, 2.0, rng)
}

/// Uniform magnitudes in [0.2, 2], random sign: keeps relu/abs inputs off 0.
fn kink_safe(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = rng.gen_range(0.2..2.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.3, 3.0, rng)
}

/// Random fixed projection to a scalar so every output element matters.
fn spread_loss(tape: &mut Tape, out: attnconv_core::NodeId, seed: u64) -> attnconv_core::NodeId {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xabcd_1234);
    let w = Tensor::rand_uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let wid = tape.constant(&w);
    let prod = tape.mul(out, wid).unwrap();
    tape.sum(prod)
}

fn run(name: &str, inputs: &[Tensor], seed: u64, build: impl Fn(&mut Tape, &[attnconv_core::NodeId]) -> attnconv_core::NodeId) {
    let report = gradcheck::check(inputs, STEP, build);
    assert!(
        report.max_rel_error < TOL,
        "{name} seed {seed}: max rel error {} over {} entries",
        report.max_rel_error,
        report.checked
    );
}

#[test]
fn grad_matmul() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[3, 4], &mut rng);
        let b = smooth(&[4, 2], &mut rng);
        run("matmul", &[a, b], seed, |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_transpose() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[3, 5], &mut rng);
        run("transpose", &[a], seed, |tape, ids| {
            let t = tape.transpose(ids[0]).unwrap();
            spread_loss(tape, t, seed)
        });
    }
}

#[test]
fn grad_elementwise_binaries() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[2, 3], &mut rng);
        let b = smooth(&[2, 3], &mut rng);
        run("add", &[a.clone(), b.clone()], seed, |tape, ids| {
            let c = tape.add(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
        run("sub", &[a.clone(), b.clone()], seed, |tape, ids| {
            let c = tape.sub(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
        run("mul", &[a, b], seed, |tape, ids| {
            let c = tape.mul(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });

        let num = smooth(&[2, 3], &mut rng);
        let den = positive(&[2, 3], &mut rng);
        run("div", &[num, den], seed, |tape, ids| {
            let c = tape.div(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_min_max() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Keep the two operands separated so ties never straddle the step.
        let a = Tensor::rand_uniform(&[2, 4], -1.0, -0.1, &mut rng);
        let b = Tensor::rand_uniform(&[2, 4], 0.1, 1.0, &mut rng);
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (x, y) in a.data().iter().zip(b.data()) {
            if rng.gen::<bool>() {
                lo.push(*x);
                hi.push(*y);
            } else {
                lo.push(*y);
                hi.push(*x);
            }
        }
        let a = Tensor::new(vec![2, 4], lo).unwrap();
        let b = Tensor::new(vec![2, 4], hi).unwrap();
        run("min", &[a.clone(), b.clone()], seed, |tape, ids| {
            let c = tape.min_elem(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
        run("max", &[a, b], seed, |tape, ids| {
            let c = tape.max_elem(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_broadcasts() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[3, 4], &mut rng);
        let bias = smooth(&[4], &mut rng);
        run("add_row_broadcast", &[a, bias], seed, |tape, ids| {
            let c = tape.add_row_broadcast(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });

        let img = smooth(&[3, 2, 2], &mut rng);
        let cb = smooth(&[3], &mut rng);
        run("add_channel_bias", &[img, cb], seed, |tape, ids| {
            let c = tape.add_channel_bias(ids[0], ids[1]).unwrap();
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_unaries() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[2, 5], &mut rng);
        run("neg", &[a.clone()], seed, |tape, ids| {
            let c = tape.neg(ids[0]);
            spread_loss(tape, c, seed)
        });
        run("scale", &[a.clone()], seed, |tape, ids| {
            let c = tape.scale(ids[0], -1.7);
            spread_loss(tape, c, seed)
        });
        run("add_scalar", &[a.clone()], seed, |tape, ids| {
            let c = tape.add_scalar(ids[0], 0.3);
            spread_loss(tape, c, seed)
        });
        run("sigmoid", &[a], seed, |tape, ids| {
            let c = tape.sigmoid(ids[0]);
            spread_loss(tape, c, seed)
        });

        let k = kink_safe(&[2, 5], &mut rng);
        run("relu", &[k.clone()], seed, |tape, ids| {
            let c = tape.relu(ids[0]);
            spread_loss(tape, c, seed)
        });
        run("abs", &[k], seed, |tape, ids| {
            let c = tape.abs(ids[0]);
            spread_loss(tape, c, seed)
        });

        let p = positive(&[2, 5], &mut rng);
        run("log", &[p], seed, |tape, ids| {
            let c = tape.log(ids[0]);
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[3, 4], &mut rng);
        run("softmax_lastdim", &[a], seed, |tape, ids| {
            let c = tape.softmax_lastdim(ids[0]);
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let img = smooth(&[2, 5, 5], &mut rng);
            let ker = smooth(&[3, 2, 3, 3], &mut rng);
            run("conv2d", &[img, ker], seed, |tape, ids| {
                let c = tape.conv2d(ids[0], ids[1], stride, padding).unwrap();
                spread_loss(tape, c, seed)
            });
        }
    }
}

#[test]
fn grad_reductions_and_gathers() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = smooth(&[3, 4], &mut rng);
        run("sum", &[a.clone()], seed, |tape, ids| tape.sum(ids[0]));
        run("mean", &[a.clone()], seed, |tape, ids| tape.mean(ids[0]));

        // Repeated indices exercise gradient accumulation in the scatter.
        let indices = vec![0usize, 5, 5, 11, 3];
        run("pick", &[a.clone()], seed, |tape, ids| {
            let c = tape.pick(ids[0], indices.clone(), vec![5]).unwrap();
            spread_loss(tape, c, seed)
        });

        run("slice+concat", &[a.clone()], seed, |tape, ids| {
            let left = tape.slice_cols(ids[0], 0, 2).unwrap();
            let right = tape.slice_cols(ids[0], 2, 2).unwrap();
            let joined = tape.concat_cols(&[right, left]).unwrap();
            spread_loss(tape, joined, seed)
        });

        run("reshape", &[a], seed, |tape, ids| {
            let r = tape.reshape(ids[0], vec![2, 6]).unwrap();
            spread_loss(tape, r, seed)
        });
    }
}

#[test]
fn grad_layer_norm() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = smooth(&[3, 6], &mut rng);
        let gamma = positive(&[6], &mut rng);
        let beta = smooth(&[6], &mut rng);
        run("layer_norm", &[x, gamma, beta], seed, |tape, ids| {
            let c = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            spread_loss(tape, c, seed)
        });
    }
}

#[test]
fn grad_dropout_fixed_mask() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = smooth(&[4, 4], &mut rng);
        run("dropout", &[x], seed, |tape, ids| {
            // Same seed on every rebuild keeps the mask constant across
            // finite-difference evaluations.
            let mut mask_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
            let d = tape.dropout(ids[0], 0.4, &mut mask_rng, true);
            spread_loss(tape, d, seed)
        });
    }
}

#[test]
fn grad_attention_composite() {
    // softmax(QK^T / sqrt(dk)) V built from primitive ops.
    for seed in 0..SEEDS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let q_in = smooth(&[3, 4], &mut rng);
        let kv_in = smooth(&[5, 4], &mut rng);
        let wq = smooth(&[4, 2], &mut rng);
        let wk = smooth(&[4, 2], &mut rng);
        let wv = smooth(&[4, 2], &mut rng);
        run(
            "attention",
            &[q_in, kv_in, wq, wk, wv],
            seed,
            |tape, ids| {
                let q = tape.matmul(ids[0], ids[2]).unwrap();
                let k = tape.matmul(ids[1], ids[3]).unwrap();
                let v = tape.matmul(ids[1], ids[4]).unwrap();
                let kt = tape.transpose(k).unwrap();
                let scores = tape.matmul(q, kt).unwrap();
                let scaled = tape.scale(scores, 1.0 / (2.0f64).sqrt());
                let attn = tape.softmax_lastdim(scaled);
                let out = tape.matmul(attn, v).unwrap();
                spread_loss(tape, out, seed)
            },
        );
    }
}
