//! The composite adversarial attack driver: sequences Comp-PGD over an
//! attack pool, with fixed, random, or scheduled ordering, for M scheduling
//! iterations. Each iteration restarts from the clean image and the stored
//! initial perturbations; scheduled mode updates the scheduling matrix from
//! the surrogate-composition gradient and re-extracts the order.

use crate::attack::{
    self, AttackComponent, AttackObjective, CompPgdConfig, PgdOutcome,
};
use crate::autodiff::Graph;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scheduler::{self, OrderAssignment, ScheduleMatrix};
use crate::tensor::Tensor;
use crate::transforms::{self, PerturbationKind, PerturbationState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// The ordered attack set; kinds are unique and 1 <= n <= 6.
#[derive(Debug, Clone)]
pub struct AttackPool {
    components: Vec<AttackComponent>,
}

impl AttackPool {
    pub fn new(components: Vec<AttackComponent>) -> Result<Self> {
        let n = components.len();
        if n == 0 || n > 6 {
            return Err(Error::InvalidArgument(format!(
                "attack pool needs 1..=6 components, got {}",
                n
            )));
        }
        for (i, a) in components.iter().enumerate() {
            for b in &components[..i] {
                if a.kind == b.kind {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate component kind {}",
                        a.kind.name()
                    )));
                }
            }
        }
        Ok(AttackPool { components })
    }

    /// Pool with the default budget per kind.
    pub fn from_kinds(kinds: &[PerturbationKind]) -> Result<Self> {
        Self::new(
            kinds
                .iter()
                .map(|k| AttackComponent::with_default_interval(*k))
                .collect(),
        )
    }

    pub fn components(&self) -> &[AttackComponent] {
        &self.components
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone)]
pub enum ScheduleMode {
    /// A caller-supplied permutation reused every iteration.
    Fixed(Vec<usize>),
    /// A fresh shuffle per scheduling iteration.
    Random,
    /// Sinkhorn-normalized scheduling matrix plus Hungarian extraction.
    Scheduled,
}

#[derive(Debug, Clone)]
pub struct CaaConfig {
    pub mode: ScheduleMode,
    /// Scheduling iterations M.
    pub sched_iters: usize,
    pub comp_pgd: CompPgdConfig,
    /// Training mode: early stop disabled, one restart, batches share orders.
    pub training_mode: bool,
    pub sinkhorn_iters: usize,
    /// Step applied to the schedule gradient (the update is written with a
    /// unit step; this is a config extension, default 1).
    pub schedule_step: f64,
}

impl CaaConfig {
    pub fn new(mode: ScheduleMode) -> Self {
        CaaConfig {
            mode,
            sched_iters: 5,
            comp_pgd: CompPgdConfig::default(),
            training_mode: false,
            sinkhorn_iters: scheduler::SINKHORN_ITERS,
            schedule_step: 1.0,
        }
    }

    pub fn validate(&self, pool_n: usize) -> Result<()> {
        self.comp_pgd.validate()?;
        if self.sched_iters < 1 {
            return Err(Error::InvalidArgument("need M >= 1".into()));
        }
        if let ScheduleMode::Fixed(order) = &self.mode {
            OrderAssignment::new(order.clone())?;
            if order.len() != pool_n {
                return Err(Error::InvalidPermutation(format!(
                    "fixed order {:?} over {} components",
                    order, pool_n
                )));
            }
        }
        Ok(())
    }

    fn inner_pgd(&self) -> CompPgdConfig {
        CompPgdConfig {
            steps: self.comp_pgd.steps,
            restarts: if self.training_mode {
                1
            } else {
                self.comp_pgd.restarts
            },
            early_stop: self.comp_pgd.early_stop && !self.training_mode,
        }
    }
}

/// Losses per completed Comp-PGD step of one component in one iteration.
#[derive(Debug, Clone)]
pub struct ComponentTrace {
    pub sched_iter: usize,
    pub position: usize,
    pub component: usize,
    pub kind: PerturbationKind,
    pub losses: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub image: Tensor,
    pub success: bool,
    /// Realized order of the returning iteration (pool indices).
    pub order: Vec<usize>,
    pub traces: Vec<ComponentTrace>,
    /// Scheduling iteration (1-based) at which the attack succeeded.
    pub success_iteration: Option<usize>,
    /// Final parameter per pool component in the returning iteration.
    pub final_states: Vec<PerturbationState>,
}

/// Sequentially applies each component's current parameter in `order`.
pub fn compose_in_order(pool: &AttackPool, order: &[usize], images: &Tensor) -> Result<Tensor> {
    OrderAssignment::new(order.to_vec())?;
    if order.len() != pool.n() {
        return Err(Error::InvalidPermutation(format!(
            "order {:?} over {} components",
            order,
            pool.n()
        )));
    }
    let mut cur = images.clone();
    for &k in order {
        cur = transforms::apply_state(&cur, &pool.components[k].state)?;
    }
    Ok(cur)
}

fn random_order<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// dL(F(x_surr), y)/dZ at the given (post-Sinkhorn) schedule matrix with
/// component parameters frozen.
fn schedule_gradient(
    z: &ScheduleMatrix,
    states: &[PerturbationState],
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    objective: &AttackObjective,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let z_node = g.param(z.to_tensor());
    let stages = scheduler::build_surrogate_nodes(&mut g, z_node, states, x);
    let last = *stages.last().expect("non-empty pool");
    let logits = model.build_logits(&mut g, last);
    match objective {
        AttackObjective::CrossEntropy => {
            g.softmax_cross_entropy(logits, vec![label]);
        }
        AttackObjective::KlFromClean { clean_logits } => {
            let p = g.input(clean_logits.clone());
            g.kl_div_logits(p, logits);
        }
    }
    g.forward()?;
    let grads = g.backward()?;
    Ok(grads
        .get(z_node)
        .map(|t| t.data().iter().map(|v| *v as f64).collect())
        .unwrap_or_else(|| vec![0.0; z.n() * z.n()]))
}

struct ChainRun {
    image: Tensor,
    states: Vec<PerturbationState>,
    traces: Vec<ComponentTrace>,
    early_success: bool,
}

/// One pass over the chain in `order`, each component optimized by Comp-PGD
/// starting from its stored initial perturbation.
#[allow(clippy::too_many_arguments)]
fn run_chain<R: Rng>(
    pool: &AttackPool,
    order: &[usize],
    delta0: &[PerturbationState],
    image: &Tensor,
    label: usize,
    model: &dyn Model,
    inner: &CompPgdConfig,
    objective: &AttackObjective,
    sched_iter: usize,
    rng: &mut R,
) -> Result<ChainRun> {
    let mut states = delta0.to_vec();
    let mut traces = Vec::with_capacity(pool.n());
    let mut cur = image.clone();
    for (pos, &k) in order.iter().enumerate() {
        let comp = AttackComponent {
            kind: pool.components[k].kind,
            interval: pool.components[k].interval,
            state: delta0[k].clone(),
        };
        let out: PgdOutcome =
            attack::run_comp_pgd(&comp, &cur, model, label, inner, objective, rng)?;
        traces.push(ComponentTrace {
            sched_iter,
            position: pos,
            component: k,
            kind: comp.kind,
            losses: out.trace,
        });
        states[k] = out.states.into_iter().next().unwrap();
        cur = out.image;
        if inner.early_stop && out.success {
            return Ok(ChainRun {
                image: cur,
                states,
                traces,
                early_success: true,
            });
        }
    }
    Ok(ChainRun {
        image: cur,
        states,
        traces,
        early_success: false,
    })
}

/// Composite adversarial attack on a single image.
pub fn run_caa<R: Rng>(
    pool: &AttackPool,
    image: &Tensor,
    label: usize,
    model: &dyn Model,
    config: &CaaConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    run_caa_with_objective(
        pool,
        image,
        label,
        model,
        config,
        &AttackObjective::CrossEntropy,
        rng,
    )
}

pub fn run_caa_with_objective<R: Rng>(
    pool: &AttackPool,
    image: &Tensor,
    label: usize,
    model: &dyn Model,
    config: &CaaConfig,
    objective: &AttackObjective,
    rng: &mut R,
) -> Result<AttackResult> {
    config.validate(pool.n())?;
    let n = pool.n();
    let inner = config.inner_pgd();

    let delta0: Vec<PerturbationState> = pool
        .components
        .iter()
        .map(|c| attack::init_delta(c.kind, &c.interval, image.shape(), rng))
        .collect();

    let mut z: Option<ScheduleMatrix> = None;
    let mut order = match &config.mode {
        ScheduleMode::Fixed(o) => o.clone(),
        ScheduleMode::Random => random_order(n, rng),
        ScheduleMode::Scheduled => {
            let m = scheduler::init_schedule(n, rng)?;
            let o = scheduler::hungarian_assign(&m);
            z = Some(m);
            o.as_slice().to_vec()
        }
    };

    let mut traces = Vec::new();
    let mut last: Option<ChainRun> = None;
    let mut last_order = order.clone();
    for i in 1..=config.sched_iters {
        let run = run_chain(
            pool, &order, &delta0, image, label, model, &inner, objective, i, rng,
        )?;
        traces.extend(run.traces.iter().cloned());
        if run.early_success {
            return Ok(AttackResult {
                image: run.image,
                success: true,
                order,
                traces,
                success_iteration: Some(i),
                final_states: run.states,
            });
        }
        last_order = order.clone();
        if i < config.sched_iters {
            match &config.mode {
                ScheduleMode::Fixed(_) => {}
                ScheduleMode::Random => order = random_order(n, rng),
                ScheduleMode::Scheduled => {
                    let grad = schedule_gradient(
                        z.as_ref().unwrap(),
                        &run.states,
                        image,
                        model,
                        label,
                        objective,
                    )?;
                    let updated = scheduler::update_schedule(
                        z.as_ref().unwrap(),
                        &grad,
                        config.schedule_step,
                        config.sinkhorn_iters,
                    )?;
                    order = scheduler::hungarian_assign(&updated).as_slice().to_vec();
                    z = Some(updated);
                }
            }
        }
        last = Some(run);
    }

    let run = last.expect("M >= 1");
    let pred = model.predict_one(&run.image)?;
    let success = pred != label;
    Ok(AttackResult {
        image: run.image,
        success,
        order: last_order,
        traces,
        success_iteration: if success { Some(config.sched_iters) } else { None },
        final_states: run.states,
    })
}

/// Batch driver. Evaluation mode attacks samples independently (parallel,
/// per-sample seed streams). Training mode shares one order per batch per
/// scheduling iteration, disables early stop, and runs every step.
pub fn run_caa_batch(
    pool: &AttackPool,
    batch: &ImageBatch,
    model: &dyn Model,
    config: &CaaConfig,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    run_caa_batch_with_objectives(pool, batch, model, config, None, seed)
}

/// Like [`run_caa_batch`] with an optional per-sample objective (used by the
/// TRADES inner maximization).
pub fn run_caa_batch_with_objectives(
    pool: &AttackPool,
    batch: &ImageBatch,
    model: &dyn Model,
    config: &CaaConfig,
    objectives: Option<&[AttackObjective]>,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    config.validate(pool.n())?;
    let n_samples = batch.len();
    if n_samples == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(objs) = objectives {
        if objs.len() != n_samples {
            return Err(Error::DimensionMismatch(format!(
                "{} objectives for {} samples",
                objs.len(),
                n_samples
            )));
        }
    }
    let objective_of = |i: usize| -> AttackObjective {
        objectives
            .map(|o| o[i].clone())
            .unwrap_or(AttackObjective::CrossEntropy)
    };

    if !config.training_mode {
        return (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                run_caa_with_objective(
                    pool,
                    &batch.image(i),
                    batch.labels[i] as usize,
                    model,
                    config,
                    &objective_of(i),
                    &mut rng,
                )
            })
            .collect();
    }

    // Training mode: one shared order per scheduling iteration.
    let n = pool.n();
    let inner = config.inner_pgd();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);

    let delta0: Vec<Vec<PerturbationState>> = (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            pool.components
                .iter()
                .map(|c| attack::init_delta(c.kind, &c.interval, batch.image(i).shape(), &mut rng))
                .collect()
        })
        .collect();

    let mut z: Option<ScheduleMatrix> = None;
    let mut order = match &config.mode {
        ScheduleMode::Fixed(o) => o.clone(),
        ScheduleMode::Random => random_order(n, &mut batch_rng),
        ScheduleMode::Scheduled => {
            let m = scheduler::init_schedule(n, &mut batch_rng)?;
            let o = scheduler::hungarian_assign(&m);
            z = Some(m);
            o.as_slice().to_vec()
        }
    };

    let mut runs: Vec<ChainRun> = Vec::new();
    let mut last_order = order.clone();
    let mut all_traces: Vec<Vec<ComponentTrace>> = vec![Vec::new(); n_samples];
    for i in 1..=config.sched_iters {
        runs = (0..n_samples)
            .into_par_iter()
            .map(|s| {
                // Training mode draws nothing further; a fresh stream keeps
                // the signature satisfied without touching shared state.
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                rng.set_stream(s as u64 + 1);
                run_chain(
                    pool,
                    &order,
                    &delta0[s],
                    &batch.image(s),
                    batch.labels[s] as usize,
                    model,
                    &inner,
                    &objective_of(s),
                    i,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, run) in runs.iter().enumerate() {
            all_traces[s].extend(run.traces.iter().cloned());
        }
        last_order = order.clone();
        if i < config.sched_iters {
            match &config.mode {
                ScheduleMode::Fixed(_) => {}
                ScheduleMode::Random => order = random_order(n, &mut batch_rng),
                ScheduleMode::Scheduled => {
                    // Batch-mean surrogate gradient keeps the order shared.
                    let grads: Vec<Vec<f64>> = (0..n_samples)
                        .into_par_iter()
                        .map(|s| {
                            schedule_gradient(
                                z.as_ref().unwrap(),
                                &runs[s].states,
                                &batch.image(s),
                                model,
                                batch.labels[s] as usize,
                                &objective_of(s),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut mean = vec![0.0f64; n * n];
                    for g in &grads {
                        for (m, v) in mean.iter_mut().zip(g) {
                            *m += v;
                        }
                    }
                    for m in &mut mean {
                        *m /= n_samples as f64;
                    }
                    let updated = scheduler::update_schedule(
                        z.as_ref().unwrap(),
                        &mean,
                        config.schedule_step,
                        config.sinkhorn_iters,
                    )?;
                    order = scheduler::hungarian_assign(&updated).as_slice().to_vec();
                    z = Some(updated);
                }
            }
        }
    }

    let mut results = Vec::with_capacity(n_samples);
    for (s, run) in runs.into_iter().enumerate() {
        let pred = model.predict_one(&run.image)?;
        let success = pred != batch.labels[s] as usize;
        results.push(AttackResult {
            image: run.image,
            success,
            order: last_order.clone(),
            traces: std::mem::take(&mut all_traces[s]),
            success_iteration: if success {
                Some(config.sched_iters)
            } else {
                None
            },
            final_states: run.states,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NodeId;
    use crate::transforms::PerturbationInterval;

    struct MeanModel {
        w: f32,
    }

    impl Model for MeanModel {
        fn build_logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
            let d = 3 * 8 * 8;
            let flat = g.flatten(x);
            let mut wcol = Vec::with_capacity(d * 2);
            for _ in 0..d {
                wcol.push(self.w / d as f32);
                wcol.push(-self.w / d as f32);
            }
            let w = g.input(Tensor::from_vec(&[d, 2], wcol).unwrap());
            g.matmul(flat, w)
        }

        fn num_classes(&self) -> usize {
            2
        }
    }

    fn flat_image(v: f32) -> Tensor {
        Tensor::filled(&[1, 3, 8, 8], v)
    }

    fn bc_pool() -> AttackPool {
        AttackPool::new(vec![
            AttackComponent::new(
                PerturbationKind::Brightness,
                PerturbationInterval::new(PerturbationKind::Brightness, -0.2, 0.2).unwrap(),
            ),
            AttackComponent::new(
                PerturbationKind::Contrast,
                PerturbationInterval::new(PerturbationKind::Contrast, 0.7, 1.3).unwrap(),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn pool_rejects_duplicates_and_empty() {
        assert!(AttackPool::from_kinds(&[]).is_err());
        assert!(AttackPool::from_kinds(&[PerturbationKind::Hue, PerturbationKind::Hue]).is_err());
    }

    #[test]
    fn compose_single_component() {
        let mut pool = bc_pool();
        pool.components[0].state = PerturbationState::scalar(PerturbationKind::Brightness, 0.1);
        let single = AttackPool::new(vec![pool.components[0].clone()]).unwrap();
        let img = flat_image(0.4);
        let out = compose_in_order(&single, &[0], &img).unwrap();
        let expect = transforms::apply_brightness(&img, 0.1).unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn compose_identity_parameters_is_identity() {
        let pool = AttackPool::from_kinds(&[
            PerturbationKind::Brightness,
            PerturbationKind::Contrast,
            PerturbationKind::Rotation,
            PerturbationKind::Linf,
        ])
        .unwrap();
        let img = flat_image(0.42);
        let out = compose_in_order(&pool, &[0, 1, 2, 3], &img).unwrap();
        assert!(out.max_abs_diff(&img) < 4.0 * 1e-5);
    }

    #[test]
    fn compose_order_changes_output() {
        // all-0.4 image: brightness +0.2 then contrast x1.3 gives 0.78;
        // contrast then brightness gives 0.72.
        let mut pool = bc_pool();
        pool.components[0].state = PerturbationState::scalar(PerturbationKind::Brightness, 0.2);
        pool.components[1].state = PerturbationState::scalar(PerturbationKind::Contrast, 1.3);
        let img = flat_image(0.4);
        let bc = compose_in_order(&pool, &[0, 1], &img).unwrap();
        let cb = compose_in_order(&pool, &[1, 0], &img).unwrap();
        assert!((bc.data()[0] - 0.78).abs() < 1e-6);
        assert!((cb.data()[0] - 0.72).abs() < 1e-6);
    }

    #[test]
    fn compose_rejects_bad_order() {
        let pool = bc_pool();
        let img = flat_image(0.4);
        assert!(compose_in_order(&pool, &[0, 0], &img).is_err());
        assert!(compose_in_order(&pool, &[0], &img).is_err());
    }

    #[test]
    fn caa_already_misclassified_early_returns() {
        let model = MeanModel { w: 5.0 };
        let image = flat_image(0.6); // predicts class 0, label 1 -> wrong
        let pool = bc_pool();
        let cfg = CaaConfig::new(ScheduleMode::Random);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_caa(&pool, &image, 1, &model, &cfg, &mut rng).unwrap();
        assert!(out.success);
        assert_eq!(out.success_iteration, Some(1));
        assert_eq!(out.image.data(), image.data());
    }

    #[test]
    fn caa_m1_fixed_equals_sequential_comp_pgd() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let pool = bc_pool();
        let mut cfg = CaaConfig::new(ScheduleMode::Fixed(vec![1, 0]));
        cfg.sched_iters = 1;
        cfg.comp_pgd.early_stop = false;
        cfg.comp_pgd.steps = 4;

        let seed = 99;
        let out = run_caa(&pool, &image, 0, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();

        // Replicate by hand with the same rng stream.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d0: Vec<PerturbationState> = pool
            .components
            .iter()
            .map(|c| attack::init_delta(c.kind, &c.interval, image.shape(), &mut rng))
            .collect();
        let inner = CompPgdConfig {
            steps: 4,
            restarts: 1,
            early_stop: false,
        };
        let mut cur = image.clone();
        for &k in &[1usize, 0] {
            let comp = AttackComponent {
                kind: pool.components[k].kind,
                interval: pool.components[k].interval,
                state: d0[k].clone(),
            };
            let o = attack::run_comp_pgd(
                &comp,
                &cur,
                &model,
                0,
                &inner,
                &AttackObjective::CrossEntropy,
                &mut rng,
            )
            .unwrap();
            cur = o.image;
        }
        assert_eq!(out.image.data(), cur.data());
        assert_eq!(out.order, vec![1, 0]);
    }

    #[test]
    fn caa_n1_pool_reproduces_comp_pgd() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let comp = AttackComponent::new(
            PerturbationKind::Brightness,
            PerturbationInterval::new(PerturbationKind::Brightness, -0.2, 0.2).unwrap(),
        );
        let pool = AttackPool::new(vec![comp.clone()]).unwrap();
        let mut cfg = CaaConfig::new(ScheduleMode::Fixed(vec![0]));
        cfg.sched_iters = 1;
        cfg.comp_pgd.steps = 5;
        cfg.comp_pgd.early_stop = false;

        let seed = 5;
        let caa_out =
            run_caa(&pool, &image, 0, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = comp;
        c.state = attack::init_delta(c.kind, &c.interval, image.shape(), &mut rng);
        let pgd_out = attack::run_comp_pgd(
            &c,
            &image,
            &model,
            0,
            &CompPgdConfig {
                steps: 5,
                restarts: 1,
                early_stop: false,
            },
            &AttackObjective::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(caa_out.image.data(), pgd_out.image.data());
        assert_eq!(caa_out.final_states[0], pgd_out.states[0]);
    }

    #[test]
    fn caa_scheduled_orders_are_valid_permutations() {
        let model = MeanModel { w: -3.0 };
        let image = flat_image(0.5);
        let pool = AttackPool::from_kinds(&[
            PerturbationKind::Brightness,
            PerturbationKind::Contrast,
            PerturbationKind::Saturation,
        ])
        .unwrap();
        let mut cfg = CaaConfig::new(ScheduleMode::Scheduled);
        cfg.sched_iters = 3;
        cfg.comp_pgd.steps = 2;
        cfg.comp_pgd.early_stop = false;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = run_caa(&pool, &image, 0, &model, &cfg, &mut rng).unwrap();
        OrderAssignment::new(out.order.clone()).unwrap();
        for s in &out.final_states {
            let k = pool
                .components
                .iter()
                .position(|c| c.kind == s.kind)
                .unwrap();
            assert!(s.within(&pool.components[k].interval));
        }
    }

    #[test]
    fn batch_of_one_matches_run_caa() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let pool = bc_pool();
        let mut cfg = CaaConfig::new(ScheduleMode::Fixed(vec![0, 1]));
        cfg.sched_iters = 1;
        cfg.comp_pgd.steps = 3;
        cfg.comp_pgd.early_stop = false;

        let seed = 7;
        let batch = ImageBatch {
            images: image.clone(),
            labels: vec![0],
        };
        let batch_out = run_caa_batch(&pool, &batch, &model, &cfg, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let single = run_caa(&pool, &image, 0, &model, &cfg, &mut rng).unwrap();
        assert_eq!(batch_out[0].image.data(), single.image.data());
        assert_eq!(batch_out[0].success, single.success);
    }

    #[test]
    fn training_batch_shares_order() {
        let model = MeanModel { w: -5.0 };
        let mut images = Tensor::filled(&[3, 3, 8, 8], 0.5);
        images.data_mut()[0] = 0.4;
        let batch = ImageBatch {
            images,
            labels: vec![0, 0, 0],
        };
        let pool = bc_pool();
        let mut cfg = CaaConfig::new(ScheduleMode::Random);
        cfg.sched_iters = 2;
        cfg.comp_pgd.steps = 2;
        cfg.training_mode = true;
        let out = run_caa_batch(&pool, &batch, &model, &cfg, 11).unwrap();
        let first = &out[0].order;
        for r in &out {
            assert_eq!(&r.order, first);
            // No early stop in training mode: every component ran all steps.
            assert_eq!(r.traces.len(), 2 * pool.n());
            for t in &r.traces {
                assert_eq!(t.losses.len(), 2);
            }
        }
    }
}
