//! Finite-difference verification of every differentiable op, every
//! transform's parameter gradient, and the schedule-matrix gradient through
//! the surrogate composition.
//!
//! The central difference runs on the engine's f32 forwards, so each check
//! is constructed for oracle precision as well as smoothness: inputs keep a
//! margin of several h from every kink (clip edges, HSV sector boundaries,
//! max/min ties), loss heads are centered at the evaluation point to kill
//! magnitude rounding, and derivative floors are built in so the relative
//! error denominator cannot collapse. Rotation keeps its looser tolerance
//! because bilinear sampling has dense micro-kinks in the angle.

use caa_core::attack::{self, AttackComponent, AttackObjective, CompPgdConfig};
use caa_core::autodiff::{Graph, NodeId};
use caa_core::kernels::HUE_MAX;
use caa_core::model::{Cnn, Model};
use caa_core::scheduler;
use caa_core::tensor::Tensor;
use caa_core::transforms::{self, PerturbationInterval, PerturbationKind, PerturbationState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const SECTOR: f32 = std::f32::consts::PI / 3.0;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec<R: Rng>(n: usize, lo: f32, hi: f32, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Projection head centered at the current value: forward once, subtract the
/// op output as a constant, then take a weighted sum. The derivative is
/// unchanged while the loss magnitude near the evaluation point vanishes.
fn centered_head(g: &mut Graph, node: NodeId, weights: &[f32]) -> NodeId {
    g.forward().expect("centering forward");
    let center = g.value(node).unwrap().clone();
    let c = g.input(center);
    let diff = g.sub(node, c);
    let flat = g.flatten(diff);
    let w = g.input(Tensor::from_vec(&[weights.len(), 1], weights.to_vec()).unwrap());
    g.matmul(flat, w)
}

/// Centered head for 2-D matrices: ones * (X - X0) * r.
fn centered_head_2d(g: &mut Graph, node: NodeId, n: usize, rng: &mut ChaCha8Rng) -> NodeId {
    g.forward().expect("centering forward");
    let center = g.value(node).unwrap().clone();
    let m = center.shape()[0];
    let c = g.input(center);
    let diff = g.sub(node, c);
    let left = g.input(Tensor::filled(&[1, m], 1.0));
    let prod = g.matmul(left, diff);
    let right = g.input(Tensor::from_vec(&[n, 1], rand_vec(n, 0.5, 1.5, rng)).unwrap());
    g.matmul(prod, right)
}

/// Pixels built in HSV with sector-interior hue bands, moderate saturation
/// and value: no max/min ties, and S * delta stays inside (0, 1) for
/// saturation factors in [0.7, 1.3].
fn smooth_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    hsv_image(shape, rng, None, (0.25, 0.7), (0.3, 0.85), 0.15)
}

/// Like `smooth_image` but every pixel shares one hue sector, so per-pixel
/// hue derivatives share a sign pattern and their sum cannot cancel.
fn single_sector_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let sector = rng.gen_range(0..6);
    hsv_image(shape, rng, Some(sector), (0.4, 0.8), (0.5, 0.9), 0.15)
}

fn hsv_image(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    sector: Option<usize>,
    s_range: (f32, f32),
    v_range: (f32, f32),
    hue_margin: f32,
) -> Tensor {
    let n: usize = shape.iter().product();
    let plane = shape[2] * shape[3];
    let mut hsv = vec![0.0f32; n];
    for b in 0..shape[0] {
        for p in 0..plane {
            let s = sector.unwrap_or_else(|| rng.gen_range(0..6)) as f32;
            hsv[(b * 3) * plane + p] = s * SECTOR + rng.gen_range(hue_margin..SECTOR - hue_margin);
            hsv[(b * 3 + 1) * plane + p] = rng.gen_range(s_range.0..s_range.1);
            hsv[(b * 3 + 2) * plane + p] = rng.gen_range(v_range.0..v_range.1);
        }
    }
    let mut rgb = vec![0.0f32; n];
    caa_core::kernels::hsv_to_rgb(&hsv, shape[0], plane, &mut rgb);
    Tensor::from_vec(shape, rgb).unwrap()
}

// ---------------------------------------------------------------------------
// elementary ops
// ---------------------------------------------------------------------------

#[test]
fn fd_elementwise_and_scalar_ops() {
    let shape = [1usize, 1, 2, 3];
    let dims = 6usize;
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(seed);
        // Centered inputs keep loss magnitudes small; b stays away from 0
        // for div and a away from 0 for log.
        let a0 = Tensor::from_vec(&shape, rand_vec(dims, -0.5, 0.5, &mut rng)).unwrap();
        let log_a = Tensor::from_vec(&shape, rand_vec(dims, 0.3, 2.0, &mut rng)).unwrap();
        let b0 = Tensor::from_vec(&shape, rand_vec(dims, 0.5, 1.5, &mut rng)).unwrap();
        type BuildFn = Box<dyn Fn(&mut Graph, NodeId, NodeId) -> NodeId>;
        let cases: Vec<(&str, bool, BuildFn)> = vec![
            ("add", false, Box::new(|g, a, b| g.add(a, b))),
            ("sub", false, Box::new(|g, a, b| g.sub(a, b))),
            ("mul", false, Box::new(|g, a, b| g.mul(a, b))),
            ("div", false, Box::new(|g, a, b| g.div(a, b))),
            ("add_scalar", false, Box::new(|g, a, _| g.add_scalar(a, 0.37))),
            ("mul_scalar", false, Box::new(|g, a, _| g.mul_scalar(a, -1.3))),
            ("exp", false, Box::new(|g, a, _| g.exp(a))),
            ("log", true, Box::new(|g, a, _| g.log(a))),
        ];
        for (name, use_log_input, build) in &cases {
            let mut g = Graph::new();
            let a = g.param(if *use_log_input { log_a.clone() } else { a0.clone() });
            let b = g.input(b0.clone());
            let out = build(&mut g, a, b);
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(a, 1e-3).unwrap();
            assert!(err < 1e-3, "{} seed {}: {}", name, seed, err);
        }
        // Broadcast ops: the scalar's derivative is a full-tensor reduction.
        for mul in [false, true] {
            let mut g = Graph::new();
            let base = g.input(if mul { b0.clone() } else { a0.clone() });
            let s = g.param(Tensor::scalar(if mul { 1.2 } else { 0.1 }));
            let out = if mul {
                g.broadcast_mul(base, s)
            } else {
                g.broadcast_add(base, s)
            };
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(s, 1e-3).unwrap();
            assert!(err < 1e-3, "broadcast mul={} seed {}: {}", mul, seed, err);
        }
    }
}

#[test]
fn fd_relu_clamp_minmax_away_from_kinks() {
    let shape = [1usize, 1, 2, 3];
    let dims = 6usize;
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(100 + seed);
        let a_data: Vec<f32> = (0..dims)
            .map(|_| {
                let m = rng.gen_range(0.05..1.0f32);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let a0 = Tensor::from_vec(&shape, a_data).unwrap();
        let c_data: Vec<f32> = (0..dims)
            .map(|_| match rng.gen_range(0..3) {
                0 => rng.gen_range(-0.5..-0.05),
                1 => rng.gen_range(0.05..0.95),
                _ => rng.gen_range(1.05..1.5),
            })
            .collect();
        let c0 = Tensor::from_vec(&shape, c_data).unwrap();
        let p_data: Vec<f32> = rand_vec(dims, 0.0, 1.0, &mut rng);
        let q_data: Vec<f32> = p_data
            .iter()
            .map(|v| {
                if rng.gen_bool(0.5) {
                    v + rng.gen_range(0.05..0.5)
                } else {
                    v - rng.gen_range(0.05..0.5)
                }
            })
            .collect();
        let p0 = Tensor::from_vec(&shape, p_data).unwrap();
        let q0 = Tensor::from_vec(&shape, q_data).unwrap();

        {
            let mut g = Graph::new();
            let a = g.param(a0.clone());
            let out = g.relu(a);
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(a, 1e-3).unwrap();
            assert!(err < 1e-3, "relu seed {}: {}", seed, err);
        }
        {
            let mut g = Graph::new();
            let c = g.param(c0.clone());
            let out = g.clamp(c, 0.0, 1.0);
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(c, 1e-3).unwrap();
            assert!(err < 1e-3, "clamp seed {}: {}", seed, err);
        }
        for maximum in [false, true] {
            let mut g = Graph::new();
            let p = g.param(p0.clone());
            let q = g.input(q0.clone());
            let out = if maximum { g.maximum(p, q) } else { g.minimum(p, q) };
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(p, 1e-3).unwrap();
            assert!(err < 1e-3, "minmax seed {}: {}", seed, err);
        }
        {
            // Unique extrema with a wide margin.
            let mut data = rand_vec(dims, 0.2, 0.8, &mut rng);
            data[seed as usize % dims] = 1.2;
            data[(seed as usize + 1) % dims] = -0.4;
            let t = Tensor::from_vec(&shape, data).unwrap();
            for is_max in [true, false] {
                let mut g = Graph::new();
                let a = g.param(t.clone());
                if is_max {
                    g.reduce_max(a);
                } else {
                    g.reduce_min(a);
                }
                let err = g.finite_difference_check(a, 1e-3).unwrap();
                assert!(err < 1e-3, "reduce seed {}: {}", seed, err);
            }
        }
    }
}

#[test]
fn fd_select_weighted_sum_stack_slice() {
    let shape = [1usize, 1, 2, 2];
    let dims = 4usize;
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(200 + seed);
        {
            let mut g = Graph::new();
            let a = g.param(Tensor::from_vec(&shape, rand_vec(dims, -1.0, 1.0, &mut rng)).unwrap());
            let s = g.select(a, seed as usize % dims);
            g.mul_scalar(s, 2.0);
            let err = g.finite_difference_check(a, 1e-3).unwrap();
            assert!(err < 1e-3, "select seed {}: {}", seed, err);
        }
        {
            // Positive term tensors give each weight's inner-product
            // derivative a floor.
            let mut g = Graph::new();
            let terms: Vec<NodeId> = (0..3)
                .map(|_| g.input(Tensor::from_vec(&shape, rand_vec(dims, 0.3, 1.0, &mut rng)).unwrap()))
                .collect();
            let w = g.param(Tensor::from_vec(&[3], rand_vec(3, 0.1, 1.0, &mut rng)).unwrap());
            let weights: Vec<NodeId> = (0..3).map(|i| g.select(w, i)).collect();
            let ws = g.weighted_sum(&terms, &weights);
            let r = rand_vec(dims, 0.5, 1.5, &mut rng);
            centered_head(&mut g, ws, &r);
            let err = g.finite_difference_check(w, 1e-3).unwrap();
            assert!(err < 1e-3, "weighted_sum seed {}: {}", seed, err);
        }
        {
            let mut g = Graph::new();
            let img = g.param(single_sector_image(&[1, 3, 2, 2], &mut rng));
            let c0 = g.channel_slice(img, 0);
            let c1 = g.channel_slice(img, 1);
            let c2 = g.channel_slice(img, 2);
            let st = g.channel_stack(&[c2, c0, c1]);
            let r = rand_vec(12, 0.5, 1.5, &mut rng);
            centered_head(&mut g, st, &r);
            let err = g.finite_difference_check(img, 1e-3).unwrap();
            assert!(err < 1e-3, "stack/slice seed {}: {}", seed, err);
        }
    }
}

#[test]
fn fd_matmul_bias_conv_pool() {
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(300 + seed);
        {
            // Positive operands floor every entry's derivative.
            let (m, k, n) = (2usize, 3usize, 2usize);
            let mut g = Graph::new();
            let a = g.param(Tensor::from_vec(&[m, k], rand_vec(m * k, 0.2, 1.0, &mut rng)).unwrap());
            let b = g.param(Tensor::from_vec(&[k, n], rand_vec(k * n, 0.3, 1.0, &mut rng)).unwrap());
            let mm = g.matmul(a, b);
            let bias = g.param(Tensor::from_vec(&[n], rand_vec(n, -0.5, 0.5, &mut rng)).unwrap());
            let out = g.bias_add_row(mm, bias);
            centered_head_2d(&mut g, out, n, &mut rng);
            for (name, p) in [("matmul_a", a), ("matmul_b", b), ("bias", bias)] {
                let err = g.finite_difference_check(p, 1e-3).unwrap();
                assert!(err < 1e-3, "{} seed {}: {}", name, seed, err);
            }
        }
        {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[1, 1, 4, 4], rand_vec(16, 0.2, 0.8, &mut rng)).unwrap());
            let w = g.param(Tensor::from_vec(&[1, 1, 3, 3], rand_vec(9, 0.25, 0.6, &mut rng)).unwrap());
            let b = g.param(Tensor::from_vec(&[1], rand_vec(1, -0.2, 0.2, &mut rng)).unwrap());
            let c = g.conv2d(x, w, b, 1);
            let r = rand_vec(16, 0.5, 1.5, &mut rng);
            centered_head(&mut g, c, &r);
            for (name, p) in [("conv_x", x), ("conv_w", w), ("conv_b", b)] {
                let err = g.finite_difference_check(p, 1e-3).unwrap();
                assert!(err < 1e-3, "{} seed {}: {}", name, seed, err);
            }
        }
        {
            // Distinct values inside each pooling window.
            let mut data = rand_vec(16, 0.0, 1.0, &mut rng);
            for w in 0..4 {
                let base = (w / 2) * 8 + (w % 2) * 2;
                let cells = [base, base + 1, base + 4, base + 5];
                for (j, &c) in cells.iter().enumerate() {
                    data[c] = data[c] * 0.2 + 0.25 * j as f32 + 0.05;
                }
            }
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[1, 1, 4, 4], data).unwrap());
            let p = g.maxpool2(x);
            let r = rand_vec(4, 0.5, 1.5, &mut rng);
            centered_head(&mut g, p, &r);
            let err = g.finite_difference_check(x, 1e-3).unwrap();
            assert!(err < 1e-3, "maxpool seed {}: {}", seed, err);
        }
    }
}

#[test]
fn fd_loss_heads() {
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(400 + seed);
        {
            // Two classes with logits in [-0.4, 0.4]: every entry's gradient
            // magnitude is |p - y| >= 0.3.
            let mut g = Graph::new();
            let logits =
                g.param(Tensor::from_vec(&[2, 2], rand_vec(4, -0.4, 0.4, &mut rng)).unwrap());
            g.softmax_cross_entropy(logits, vec![seed as usize % 2, (seed as usize + 1) % 2]);
            let err = g.finite_difference_check(logits, 1e-3).unwrap();
            assert!(err < 1e-3, "ce seed {}: {}", seed, err);
        }
        {
            // Opposite logit gaps keep both dKL/dp and dKL/dq bounded away
            // from zero.
            let gp = rng.gen_range(1.2..1.8f32);
            let gq = -rng.gen_range(1.2..1.8f32);
            let p0 = Tensor::from_vec(&[1, 2], vec![gp / 2.0, -gp / 2.0]).unwrap();
            let q0 = Tensor::from_vec(&[1, 2], vec![gq / 2.0, -gq / 2.0]).unwrap();
            for side in 0..2 {
                let mut g = Graph::new();
                let p = g.param(p0.clone());
                let q = g.param(q0.clone());
                g.kl_div_logits(p, q);
                let target = if side == 0 { p } else { q };
                let err = g.finite_difference_check(target, 1e-3).unwrap();
                assert!(err < 1e-3, "kl side {} seed {}: {}", side, seed, err);
            }
        }
    }
}

#[test]
fn fd_hsv_conversions() {
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(500 + seed);
        {
            // Hue in the upper half of each sector plus an H-dominant head:
            // the hue term outweighs the S/V terms in every input entry.
            let mut hsv = vec![0.0f32; 12];
            for p in 0..4 {
                let s = rng.gen_range(0..6) as f32;
                hsv[p] = (s + rng.gen_range(0.52..0.84)) * SECTOR;
                hsv[4 + p] = rng.gen_range(0.4..0.8);
                hsv[8 + p] = rng.gen_range(0.5..0.9);
            }
            let mut rgb = vec![0.0f32; 12];
            caa_core::kernels::hsv_to_rgb(&hsv, 1, 4, &mut rgb);
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[1, 3, 2, 2], rgb).unwrap());
            let out = g.rgb_to_hsv(x);
            let mut w = vec![0.35f32; 12];
            for p in 0..4 {
                w[p] = 2.0;
            }
            centered_head(&mut g, out, &w);
            let err = g.finite_difference_check(x, 1e-3).unwrap();
            assert!(err < 1e-3, "rgb_to_hsv seed {}: {}", seed, err);
        }
        {
            let mut hsv = vec![0.0f32; 12];
            for p in 0..4 {
                let s = rng.gen_range(0..6) as f32;
                hsv[p] = s * SECTOR + rng.gen_range(0.15..SECTOR - 0.15);
                hsv[4 + p] = rng.gen_range(0.4..0.8);
                hsv[8 + p] = rng.gen_range(0.5..0.9);
            }
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(&[1, 3, 2, 2], hsv).unwrap());
            let out = g.hsv_to_rgb(x);
            let r = rand_vec(12, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(x, 1e-3).unwrap();
            assert!(err < 1e-3, "hsv_to_rgb seed {}: {}", seed, err);
        }
    }
}

// ---------------------------------------------------------------------------
// transform parameter gradients
// ---------------------------------------------------------------------------

#[test]
fn fd_transform_parameters() {
    for kind in PerturbationKind::SEMANTIC {
        let tol = if kind == PerturbationKind::Rotation {
            1e-2
        } else {
            1e-3
        };
        for seed in 0..POINTS as u64 {
            let mut rng = rng_for(1000 + seed);
            let (image, delta) = match kind {
                PerturbationKind::Hue => (
                    single_sector_image(&[1, 3, 8, 8], &mut rng),
                    rng.gen_range(-0.1..0.1),
                ),
                PerturbationKind::Saturation => {
                    (smooth_image(&[1, 3, 8, 8], &mut rng), rng.gen_range(0.7..1.3))
                }
                PerturbationKind::Brightness => (
                    Tensor::from_vec(&[1, 3, 8, 8], rand_vec(192, 0.21, 0.79, &mut rng)).unwrap(),
                    rng.gen_range(-0.2..0.2),
                ),
                PerturbationKind::Contrast => (
                    Tensor::from_vec(&[1, 3, 8, 8], rand_vec(192, 0.05, 0.74, &mut rng)).unwrap(),
                    rng.gen_range(0.7..1.3),
                ),
                PerturbationKind::Rotation => (
                    single_sector_image(&[1, 3, 8, 8], &mut rng),
                    rng.gen_range(-10.0..10.0),
                ),
                PerturbationKind::Linf => unreachable!(),
            };
            let mut g = Graph::new();
            let x = g.input(image);
            let d = g.param(Tensor::scalar(delta));
            let out = transforms::apply_in_graph(&mut g, kind, x, d);
            let r = rand_vec(192, 0.5, 1.5, &mut rng);
            centered_head(&mut g, out, &r);
            let err = g.finite_difference_check(d, 1e-3).unwrap();
            assert!(err < tol, "{} seed {}: {}", kind.name(), seed, err);
        }
    }
}

#[test]
fn fd_linf_per_pixel() {
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(2000 + seed);
        let image = Tensor::from_vec(&[1, 3, 8, 8], rand_vec(192, 0.25, 0.75, &mut rng)).unwrap();
        let eps = 8.0 / 255.0;
        let delta =
            Tensor::from_vec(&[1, 3, 8, 8], rand_vec(192, -eps * 0.9, eps * 0.9, &mut rng)).unwrap();
        let mut g = Graph::new();
        let x = g.input(image);
        let d = g.param(delta);
        let out = transforms::apply_in_graph(&mut g, PerturbationKind::Linf, x, d);
        let r = rand_vec(192, 0.5, 1.5, &mut rng);
        centered_head(&mut g, out, &r);
        let entries: Vec<usize> = (0..8).map(|i| (seed as usize * 13 + i * 29) % 192).collect();
        let err = g
            .finite_difference_check_entries(d, &entries, 1e-3)
            .unwrap();
        assert!(err < 1e-3, "linf seed {}: {}", seed, err);
    }
}

/// CNN with a deliberate mean-intensity pathway: logit 0 minus logit 1
/// responds strongly to global brightness, keeping the finite-difference
/// oracle well above its f32 noise floor.
fn brightness_sensitive_cnn() -> Cnn {
    let mut rng = rng_for(123);
    let mut m = Cnn::init(4, &mut rng);
    for (_, t) in m.named_params_mut() {
        for v in t.data_mut() {
            *v *= 0.05;
        }
    }
    for ci in 0..3 {
        for t in 0..9 {
            m.conv1_w.data_mut()[ci * 9 + t] = 0.05;
        }
    }
    for t in 0..9 {
        m.conv2_w.data_mut()[t] = 0.05;
    }
    for p in 0..64 {
        m.fc1_w.data_mut()[p * 64] = 0.02;
    }
    m.fc2_w.data_mut()[0] = 2.0;
    m.fc2_w.data_mut()[1] = -2.0;
    m
}

#[test]
fn fd_brightness_through_model_loss() {
    let model = brightness_sensitive_cnn();
    for seed in 0..20u64 {
        let mut rng = rng_for(4000 + seed);
        let image = smooth_image(&[1, 3, 32, 32], &mut rng);
        let delta = rng.gen_range(-0.19f32..0.19);
        let mut g = Graph::new();
        let x = g.input(image);
        let d = g.param(Tensor::scalar(delta));
        let out = transforms::apply_in_graph(&mut g, PerturbationKind::Brightness, x, d);
        let logits = model.build_logits(&mut g, out);
        g.softmax_cross_entropy(logits, vec![1]);
        let err = g.finite_difference_check(d, 1e-3).unwrap();
        assert!(err < 1e-3, "brightness/CNN seed {}: {}", seed, err);
    }
}

// ---------------------------------------------------------------------------
// schedule-matrix gradient through the surrogate composition
// ---------------------------------------------------------------------------

#[test]
fn fd_surrogate_z_gradient() {
    let kinds = [
        PerturbationKind::Hue,
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
    ];
    for seed in 0..POINTS as u64 {
        let mut rng = rng_for(5000 + seed);
        let image = single_sector_image(&[1, 3, 8, 8], &mut rng);
        let states: Vec<PerturbationState> = kinds
            .iter()
            .map(|k| {
                let delta = match k {
                    PerturbationKind::Hue => rng.gen_range(-0.08..0.08),
                    PerturbationKind::Brightness => rng.gen_range(-0.1..0.1),
                    _ => rng.gen_range(0.85..1.15),
                };
                PerturbationState::scalar(*k, delta)
            })
            .collect();
        let z = scheduler::init_schedule(3, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(image);
        let z_node = g.param(z.to_tensor());
        let stages = scheduler::build_surrogate_nodes(&mut g, z_node, &states, x);
        let last = *stages.last().unwrap();
        let r = rand_vec(192, 0.5, 1.5, &mut rng);
        centered_head(&mut g, last, &r);
        let err = g.finite_difference_check(z_node, 1e-3).unwrap();
        assert!(err < 1e-2, "surrogate seed {}: {}", seed, err);
    }
}

#[test]
fn fd_training_parameter_spot_checks() {
    // 20 sampled weights across all parameter tensors. Perturbing a deep
    // conv weight routinely flips some ReLU/maxpool selection inside +-h,
    // where a central difference measures the wrong slope; a Richardson
    // consistency filter (FD at h and h/2 must agree) keeps only entries
    // where the quadratic model holds, then the analytic gradient must match.
    let mut rng = rng_for(91);
    let mut model = Cnn::init(4, &mut rng);
    for v in model.fc2_w.data_mut() {
        *v *= 10.0;
    }
    let images = smooth_image(&[2, 3, 32, 32], &mut rng);
    let mut g = Graph::new();
    let x = g.input(images);
    let (logits, nodes) = model.build_logits_trainable(&mut g, x);
    g.softmax_cross_entropy(logits, vec![0, 2]);
    g.forward().unwrap();
    let grads = g.backward().unwrap();

    let mut checked = 0;
    let mut skipped = 0;
    'outer: for node in nodes.all() {
        let grad = grads.get(node).unwrap().clone();
        let n = grad.numel();
        for _ in 0..64 {
            let idx = rng.gen_range(0..n);
            if grad.data()[idx].abs() < 0.1 {
                continue;
            }
            let fd1 = g.central_difference(node, idx, 2e-3).unwrap();
            let fd2 = g.central_difference(node, idx, 1e-3).unwrap();
            if (fd1 - fd2).abs() / (fd2.abs() + 1e-8) > 2e-3 {
                skipped += 1;
                continue; // a kink or the noise floor sits inside the probes
            }
            let analytic = grad.data()[idx];
            let rel = (analytic - fd2).abs() / (fd2.abs() + 1e-8);
            assert!(rel < 1e-2, "param node {:?} entry {}: {}", node, idx, rel);
            checked += 1;
            if checked >= 20 {
                break 'outer;
            }
        }
    }
    assert!(
        checked >= 20,
        "only {} usable spot checks ({} kink-skipped)",
        checked,
        skipped
    );
}

// ---------------------------------------------------------------------------
// behavioural invariants tied to gradients
// ---------------------------------------------------------------------------

#[test]
fn pgd_keeps_state_inside_interval_all_kinds() {
    let mut rng = rng_for(31);
    let model = Cnn::init(4, &mut rng);
    let image = smooth_image(&[1, 3, 32, 32], &mut rng);
    let cfg = CompPgdConfig {
        steps: 4,
        restarts: 1,
        early_stop: false,
    };
    for kind in PerturbationKind::ALL {
        let interval = PerturbationInterval::default_for(kind);
        let mut comp = AttackComponent::new(kind, interval);
        comp.state = attack::init_delta(kind, &interval, image.shape(), &mut rng);
        let out = attack::run_comp_pgd(
            &comp,
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        assert!(
            out.states[0].within(&interval),
            "{} escaped its interval",
            kind.name()
        );
        for v in out.image.data() {
            assert!((0.0..=1.0).contains(v), "{} output out of range", kind.name());
        }
    }
}

#[test]
fn hue_boundary_clip_is_subgradient_zero_outside() {
    // A pixel near the hue wheel edge shifted beyond it: the clip zeroes the
    // parameter gradient (outside region of the pass-through subgradient).
    let mut hsv = vec![0.0f32; 3];
    hsv[0] = HUE_MAX - 0.05;
    hsv[1] = 0.6;
    hsv[2] = 0.7;
    let mut rgb = vec![0.0f32; 3];
    caa_core::kernels::hsv_to_rgb(&hsv, 1, 1, &mut rgb);
    let image = Tensor::from_vec(&[1, 3, 1, 1], rgb).unwrap();
    let mut g = Graph::new();
    let x = g.input(image);
    let d = g.param(Tensor::scalar(0.5)); // pushes hue past 2*pi -> clipped
    let out = transforms::apply_in_graph(&mut g, PerturbationKind::Hue, x, d);
    let r = [1.0f32, 1.0, 1.0];
    centered_head(&mut g, out, &r);
    g.forward().unwrap();
    let grads = g.backward().unwrap();
    assert_eq!(grads.get(d).unwrap().item(), 0.0);
}
