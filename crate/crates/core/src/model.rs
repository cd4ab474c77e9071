//! The desk-scale classifier: conv(3->16) + ReLU + 2x2 maxpool,
//! conv(16->32) + ReLU + 2x2 maxpool, dense(->64) + ReLU, dense(->classes),
//! over 32x32 RGB inputs.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Anything that can stamp a logits head onto a graph.
///
/// Implementations add their parameters as constants, so attack graphs do not
/// spend backward time on weight gradients.
pub trait Model: Sync {
    fn build_logits(&self, g: &mut Graph, x: NodeId) -> NodeId;
    fn num_classes(&self) -> usize;

    /// Eager logits for a batch.
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        self.build_logits(&mut g, x);
        g.forward()
    }

    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let d = self.num_classes();
        Ok(logits
            .data()
            .chunks(d)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect())
    }

    fn predict_one(&self, image: &Tensor) -> Result<usize> {
        Ok(self.predict(image)?[0])
    }
}

pub const INPUT_SIDE: usize = 32;
const C1: usize = 16;
const C2: usize = 32;
const HIDDEN: usize = 64;
const FLAT: usize = C2 * (INPUT_SIDE / 4) * (INPUT_SIDE / 4);

/// Parameters theta_F of the fixed CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub num_classes: usize,
}

/// Node ids of the trainable parameters inside one graph.
pub struct CnnNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

impl CnnNodes {
    pub fn all(&self) -> [NodeId; 8] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl Cnn {
    /// He-initialized parameters; the output layer starts near zero so the
    /// initial loss sits at ln(num_classes).
    pub fn init<R: Rng>(num_classes: usize, rng: &mut R) -> Self {
        let out_dist = Normal::new(0.0f32, 0.01).unwrap();
        Cnn {
            conv1_w: he_normal(&[C1, 3, 3, 3], 3 * 9, rng),
            conv1_b: Tensor::zeros(&[C1]),
            conv2_w: he_normal(&[C2, C1, 3, 3], C1 * 9, rng),
            conv2_b: Tensor::zeros(&[C2]),
            fc1_w: he_normal(&[FLAT, HIDDEN], FLAT, rng),
            fc1_b: Tensor::zeros(&[HIDDEN]),
            fc2_w: Tensor::from_vec(
                &[HIDDEN, num_classes],
                (0..HIDDEN * num_classes)
                    .map(|_| out_dist.sample(rng))
                    .collect(),
            )
            .unwrap(),
            fc2_b: Tensor::zeros(&[num_classes]),
            num_classes,
        }
    }

    fn make_leaves(&self, g: &mut Graph, trainable: bool) -> CnnNodes {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        };
        CnnNodes {
            conv1_w: leaf(g, &self.conv1_w),
            conv1_b: leaf(g, &self.conv1_b),
            conv2_w: leaf(g, &self.conv2_w),
            conv2_b: leaf(g, &self.conv2_b),
            fc1_w: leaf(g, &self.fc1_w),
            fc1_b: leaf(g, &self.fc1_b),
            fc2_w: leaf(g, &self.fc2_w),
            fc2_b: leaf(g, &self.fc2_b),
        }
    }

    fn stamp(&self, g: &mut Graph, x: NodeId, n: &CnnNodes) -> NodeId {
        let c1 = g.conv2d(x, n.conv1_w, n.conv1_b, 1);
        let r1 = g.relu(c1);
        let p1 = g.maxpool2(r1);
        let c2 = g.conv2d(p1, n.conv2_w, n.conv2_b, 1);
        let r2 = g.relu(c2);
        let p2 = g.maxpool2(r2);
        let flat = g.flatten(p2);
        let h = g.matmul(flat, n.fc1_w);
        let hb = g.bias_add_row(h, n.fc1_b);
        let hr = g.relu(hb);
        let o = g.matmul(hr, n.fc2_w);
        g.bias_add_row(o, n.fc2_b)
    }

    fn build(&self, g: &mut Graph, x: NodeId, trainable: bool) -> (NodeId, Option<CnnNodes>) {
        let nodes = self.make_leaves(g, trainable);
        let logits = self.stamp(g, x, &nodes);
        (logits, trainable.then_some(nodes))
    }

    /// Forward with parameters registered as differentiable leaves.
    pub fn build_logits_trainable(&self, g: &mut Graph, x: NodeId) -> (NodeId, CnnNodes) {
        let (logits, nodes) = self.build(g, x, true);
        (logits, nodes.unwrap())
    }

    /// Second forward sharing already-registered parameter leaves; gradients
    /// accumulate across both passes.
    pub fn build_logits_reusing(&self, g: &mut Graph, x: NodeId, nodes: &CnnNodes) -> NodeId {
        self.stamp(g, x, nodes)
    }

    /// Named views of the parameter tensors, in checkpoint order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("fc1_w", &mut self.fc1_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc2_w", &mut self.fc2_w),
            ("fc2_b", &mut self.fc2_b),
        ]
    }

    /// Hash of the architecture descriptor; checkpoints refuse to load into a
    /// different architecture.
    pub fn arch_hash(&self) -> String {
        let descriptor = format!(
            "cnn32: conv{}x3x3x3 pool2 conv{}x{}x3x3 pool2 fc{}x{} fc{}x{}",
            C1, C2, C1, FLAT, HIDDEN, HIDDEN, self.num_classes
        );
        let mut hasher = Sha256::new();
        hasher.update(descriptor.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Mean accuracy over a labeled batch, evaluated in chunks.
    pub fn accuracy(&self, images: &Tensor, labels: &[u8]) -> Result<f64> {
        let n = images.shape()[0];
        debug_assert_eq!(n, labels.len());
        let chunk = 256usize;
        let img_len = images.numel() / n.max(1);
        let mut correct = 0usize;
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let sub = Tensor::from_vec(
                &[end - start, 3, INPUT_SIDE, INPUT_SIDE],
                images.data()[start * img_len..end * img_len].to_vec(),
            )?;
            let preds = self.predict(&sub)?;
            correct += preds
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, y)| **p == **y as usize)
                .count();
        }
        Ok(correct as f64 / n as f64)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

impl Model for Cnn {
    fn build_logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
        self.build(g, x, false).0
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}
