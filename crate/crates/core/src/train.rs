//! Training regimes: standard, generalized adversarial training with the
//! min-max loss, the TRADES variant, and the random-semantic-perturbation
//! baseline. SGD with momentum, linear warm-up then exponential decay,
//! best-model selection by clean test accuracy.

use crate::attack::AttackObjective;
use crate::caa::{self, AttackPool, CaaConfig};
use crate::data::{Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::model::{Cnn, Model};
use crate::tensor::Tensor;
use crate::transforms::PerturbationState;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear ramp epochs: lr(e) = base * (e+1) / warmup for e < warmup.
    pub warmup_epochs: usize,
    /// Per-epoch exponential decay factor applied after warm-up.
    pub decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 0.05,
            warmup_epochs: 2,
            decay: 0.95,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.warmup_epochs > self.epochs && self.epochs > 0 {
            return Err(Error::InvalidArgument(
                "warm-up cannot exceed the epoch count".into(),
            ));
        }
        Ok(())
    }
}

/// Warm-up then exponential decay.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.learning_rate * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.learning_rate * cfg.decay.powi((epoch - cfg.warmup_epochs) as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best clean test accuracy seen.
    pub model: Cnn,
    pub best_test_acc: f64,
    pub history: Vec<EpochStats>,
}

enum Regime<'a> {
    Standard,
    Gat {
        pool: &'a AttackPool,
        attack: &'a CaaConfig,
    },
    Trades {
        pool: &'a AttackPool,
        attack: &'a CaaConfig,
        beta: f32,
    },
}

/// Standard training on clean inputs.
pub fn train_standard(start: Cnn, ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_loop(start, ds, cfg, Regime::Standard, seed)
}

/// Min-max training: the inner maximization runs the composite attack in
/// training mode (shared per-batch order, no early stop), the outer step
/// descends the cross-entropy on the adversarial batch. An empty component
/// list degenerates to standard training.
pub fn train_gat(
    start: Cnn,
    ds: &Dataset,
    components: &[crate::attack::AttackComponent],
    attack: &CaaConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if components.is_empty() {
        return train_standard(start, ds, cfg, seed);
    }
    let pool = AttackPool::new(components.to_vec())?;
    let attack = training_attack_config(attack);
    train_loop(start, ds, cfg, Regime::Gat { pool: &pool, attack: &attack }, seed)
}

/// TRADES-style training: clean cross-entropy plus beta times the KL
/// between clean and adversarial predictions; the inner maximization drives
/// the KL term. beta = 0 reduces to standard training on clean inputs.
pub fn train_trades(
    start: Cnn,
    ds: &Dataset,
    components: &[crate::attack::AttackComponent],
    attack: &CaaConfig,
    cfg: &TrainConfig,
    beta: f32,
    seed: u64,
) -> Result<TrainOutcome> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("bad trades beta {}", beta)));
    }
    if beta == 0.0 || components.is_empty() {
        return train_standard(start, ds, cfg, seed);
    }
    let pool = AttackPool::new(components.to_vec())?;
    let attack = training_attack_config(attack);
    train_loop(
        start,
        ds,
        cfg,
        Regime::Trades { pool: &pool, attack: &attack, beta },
        seed,
    )
}

fn training_attack_config(attack: &CaaConfig) -> CaaConfig {
    let mut cfg = attack.clone();
    cfg.training_mode = true;
    cfg
}

fn mix_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(batch as u64 + 1);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

fn train_loop(
    start: Cnn,
    ds: &Dataset,
    cfg: &TrainConfig,
    regime: Regime<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = start;
    let mut best = model.clone();
    let mut best_acc = model.accuracy(&ds.test.images, &ds.test.labels)?;
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity: Vec<Tensor> = model
        .named_params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch) as f32;
        let mut indices: Vec<usize> = (0..ds.train.len()).collect();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;

        for (batch_idx, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let batch = ds.train.subset(chunk);
            let labels: Vec<usize> = batch.labels.iter().map(|l| *l as usize).collect();
            let loss = match &regime {
                Regime::Standard => {
                    step_standard(&mut model, &batch.images, &labels, lr, cfg, &mut velocity)?
                }
                Regime::Gat { pool, attack } => {
                    let adv = attack_batch(pool, &batch, &model, attack, seed, epoch, batch_idx, None)?;
                    step_standard(&mut model, &adv, &labels, lr, cfg, &mut velocity)?
                }
                Regime::Trades { pool, attack, beta } => {
                    let clean_logits = model.logits(&batch.images)?;
                    let d = model.num_classes;
                    let objectives: Vec<AttackObjective> = (0..batch.len())
                        .map(|i| AttackObjective::KlFromClean {
                            clean_logits: Tensor::from_vec(
                                &[1, d],
                                clean_logits.data()[i * d..(i + 1) * d].to_vec(),
                            )
                            .unwrap(),
                        })
                        .collect();
                    let adv = attack_batch(
                        pool,
                        &batch,
                        &model,
                        attack,
                        seed,
                        epoch,
                        batch_idx,
                        Some(&objectives),
                    )?;
                    step_trades(&mut model, &batch.images, &adv, &labels, *beta, lr, cfg, &mut velocity)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {} batch {}", epoch, batch_idx),
                });
            }
            loss_sum += loss as f64;
            batches += 1;
        }

        let test_acc = model.accuracy(&ds.test.images, &ds.test.labels)?;
        history.push(EpochStats {
            epoch,
            lr: lr as f64,
            mean_loss: loss_sum / batches.max(1) as f64,
            test_acc,
        });
        if test_acc > best_acc {
            best_acc = test_acc;
            best = model.clone();
        }
    }

    Ok(TrainOutcome {
        model: best,
        best_test_acc: best_acc,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn attack_batch(
    pool: &AttackPool,
    batch: &ImageBatch,
    model: &Cnn,
    attack: &CaaConfig,
    seed: u64,
    epoch: usize,
    batch_idx: usize,
    objectives: Option<&[AttackObjective]>,
) -> Result<Tensor> {
    let results = caa::run_caa_batch_with_objectives(
        pool,
        batch,
        model,
        attack,
        objectives,
        mix_seed(seed, epoch, batch_idx),
    )?;
    // The inner maximization must stay inside the perturbation budget.
    for r in &results {
        audit_states(&r.final_states, pool)?;
    }
    let shape = batch.images.shape();
    let mut data = Vec::with_capacity(batch.images.numel());
    for r in &results {
        data.extend_from_slice(r.image.data());
    }
    Tensor::from_vec(shape, data)
}

fn audit_states(states: &[PerturbationState], pool: &AttackPool) -> Result<()> {
    for s in states {
        let comp = pool
            .components()
            .iter()
            .find(|c| c.kind == s.kind)
            .ok_or_else(|| Error::InvalidArgument("state for unknown component".into()))?;
        if !s.within(&comp.interval) {
            return Err(Error::InvalidArgument(format!(
                "{} parameter escaped its interval",
                s.kind.name()
            )));
        }
    }
    Ok(())
}

fn step_standard(
    model: &mut Cnn,
    images: &Tensor,
    labels: &[usize],
    lr: f32,
    cfg: &TrainConfig,
    velocity: &mut [Tensor],
) -> Result<f32> {
    let mut g = crate::autodiff::Graph::new();
    let x = g.input(images.clone());
    let (logits, nodes) = model.build_logits_trainable(&mut g, x);
    g.softmax_cross_entropy(logits, labels.to_vec());
    let loss = g.forward()?.item();
    let grads = g.backward()?;
    apply_sgd(model, &nodes.all(), &grads, lr, cfg, velocity);
    Ok(loss)
}

#[allow(clippy::too_many_arguments)]
fn step_trades(
    model: &mut Cnn,
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    beta: f32,
    lr: f32,
    cfg: &TrainConfig,
    velocity: &mut [Tensor],
) -> Result<f32> {
    let mut g = crate::autodiff::Graph::new();
    let xc = g.input(clean.clone());
    let xa = g.input(adv.clone());
    let (logits_clean, nodes) = model.build_logits_trainable(&mut g, xc);
    let logits_adv = model.build_logits_reusing(&mut g, xa, &nodes);
    let ce = g.softmax_cross_entropy(logits_clean, labels.to_vec());
    let kl = g.kl_div_logits(logits_clean, logits_adv);
    let scaled = g.mul_scalar(kl, beta);
    g.add(ce, scaled);
    let loss = g.forward()?.item();
    let grads = g.backward()?;
    apply_sgd(model, &nodes.all(), &grads, lr, cfg, velocity);
    Ok(loss)
}

fn apply_sgd(
    model: &mut Cnn,
    nodes: &[crate::autodiff::NodeId; 8],
    grads: &crate::autodiff::GradientMap,
    lr: f32,
    cfg: &TrainConfig,
    velocity: &mut [Tensor],
) {
    let momentum = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    for ((node, vel), (_, param)) in nodes
        .iter()
        .zip(velocity.iter_mut())
        .zip(model.named_params_mut())
    {
        if let Some(grad) = grads.get(*node) {
            for ((v, g), w) in vel
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(param.data_mut())
            {
                *v = momentum * *v + *g + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// Pre-generates a training set perturbed once per image with a uniformly
/// random order and uniformly random parameters (no optimization). The test
/// split is left clean. An empty pool returns the dataset unchanged.
pub fn generate_rsp_dataset(
    ds: &Dataset,
    components: &[crate::attack::AttackComponent],
    seed: u64,
) -> Result<Dataset> {
    if components.is_empty() {
        return Ok(ds.clone());
    }
    if components.iter().any(|c| !c.kind.is_semantic()) {
        return Err(Error::InvalidArgument(
            "random semantic perturbation uses semantic components only".into(),
        ));
    }
    let n = ds.train.len();
    let shape = ds.train.images.shape().to_vec();
    let img_len: usize = shape[1..].iter().product();
    let mut data = vec![0.0f32; ds.train.images.numel()];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut order: Vec<usize> = (0..components.len()).collect();
        order.shuffle(&mut rng);
        let mut cur = ds.train.image(i);
        for &k in &order {
            let c = &components[k];
            let state = crate::attack::init_delta(c.kind, &c.interval, cur.shape(), &mut rng);
            cur = crate::transforms::apply_state(&cur, &state)?;
        }
        data[i * img_len..(i + 1) * img_len].copy_from_slice(cur.data());
    }
    Ok(Dataset {
        train: ImageBatch {
            images: Tensor::from_vec(&shape, data)?,
            labels: ds.train.labels.clone(),
        },
        test: ds.test.clone(),
        num_classes: ds.num_classes,
    })
}
