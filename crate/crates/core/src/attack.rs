//! Component-wise PGD (sign-gradient ascent on one component's parameter,
//! clipped to its interval), the joint Ensemble-PGD variant, and the
//! grid-search baseline.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::transforms::{
    self, DeltaValue, PerturbationInterval, PerturbationKind, PerturbationState,
};
use rand::Rng;

/// One attack component: its kind, power budget, and current parameter.
#[derive(Debug, Clone)]
pub struct AttackComponent {
    pub kind: PerturbationKind,
    pub interval: PerturbationInterval,
    pub state: PerturbationState,
}

impl AttackComponent {
    /// Component at its identity parameter.
    pub fn new(kind: PerturbationKind, interval: PerturbationInterval) -> Self {
        AttackComponent {
            kind,
            interval,
            state: PerturbationState::scalar(kind, kind.identity_delta()),
        }
    }

    pub fn with_default_interval(kind: PerturbationKind) -> Self {
        Self::new(kind, PerturbationInterval::default_for(kind))
    }
}

/// Comp-PGD settings. The step size follows 2.5 * (beta - alpha) / (2 T).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompPgdConfig {
    pub steps: usize,
    pub restarts: usize,
    pub early_stop: bool,
}

impl Default for CompPgdConfig {
    fn default() -> Self {
        CompPgdConfig {
            steps: 10,
            restarts: 1,
            early_stop: true,
        }
    }
}

impl CompPgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.restarts < 1 {
            return Err(Error::InvalidArgument(
                "Comp-PGD needs steps >= 1 and restarts >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// PGD step size for a component interval.
pub fn step_size(interval: &PerturbationInterval, steps: usize) -> f32 {
    2.5 * interval.width() / (2.0 * steps as f32)
}

/// What the inner maximization drives up.
#[derive(Debug, Clone)]
pub enum AttackObjective {
    /// Cross-entropy of the prediction against the true label.
    CrossEntropy,
    /// KL(softmax(clean logits) || softmax(adversarial logits)); the clean
    /// side is frozen. Used by the TRADES inner loop.
    KlFromClean { clean_logits: Tensor },
}

/// Uniform draw of the initial parameter from its interval
/// (l-inf: per-pixel uniform within [-eps, eps]).
pub fn init_delta<R: Rng>(
    kind: PerturbationKind,
    interval: &PerturbationInterval,
    image_shape: &[usize],
    rng: &mut R,
) -> PerturbationState {
    match kind {
        PerturbationKind::Linf => {
            let n: usize = image_shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| rng.gen_range(interval.low..=interval.high))
                .collect();
            PerturbationState {
                kind,
                delta: DeltaValue::PerPixel(Tensor::from_vec(image_shape, data).unwrap()),
            }
        }
        _ => PerturbationState::scalar(kind, rng.gen_range(interval.low..=interval.high)),
    }
}

/// The paper's three-branch clip.
pub fn clip_interval(value: f32, interval: &PerturbationInterval) -> f32 {
    if value < interval.low {
        interval.low
    } else if value > interval.high {
        interval.high
    } else {
        value
    }
}

/// sign with sign(0) = 0, so zero-gradient components stall rather than drift.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stepped(state: &PerturbationState, grad: &Tensor, step: f32, interval: &PerturbationInterval) -> PerturbationState {
    match &state.delta {
        DeltaValue::Scalar(v) => {
            PerturbationState::scalar(state.kind, clip_interval(v + step * sign(grad.item()), interval))
        }
        DeltaValue::PerPixel(t) => {
            let data: Vec<f32> = t
                .data()
                .iter()
                .zip(grad.data())
                .map(|(v, g)| clip_interval(v + step * sign(*g), interval))
                .collect();
            PerturbationState {
                kind: state.kind,
                delta: DeltaValue::PerPixel(Tensor::from_vec(t.shape(), data).unwrap()),
            }
        }
    }
}

fn delta_node(g: &mut Graph, state: &PerturbationState) -> crate::autodiff::NodeId {
    match &state.delta {
        DeltaValue::Scalar(v) => g.param(Tensor::scalar(*v)),
        DeltaValue::PerPixel(t) => g.param(t.clone()),
    }
}

fn attach_loss(
    g: &mut Graph,
    model: &dyn Model,
    x: crate::autodiff::NodeId,
    label: usize,
    objective: &AttackObjective,
) -> crate::autodiff::NodeId {
    let logits = model.build_logits(g, x);
    match objective {
        AttackObjective::CrossEntropy => {
            g.softmax_cross_entropy(logits, vec![label]);
        }
        AttackObjective::KlFromClean { clean_logits } => {
            let p = g.input(clean_logits.clone());
            g.kl_div_logits(p, logits);
        }
    }
    logits
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

/// Loss and prediction of a single image under the objective.
pub fn loss_and_pred(
    model: &dyn Model,
    image: &Tensor,
    label: usize,
    objective: &AttackObjective,
) -> Result<(f32, usize)> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let logits = attach_loss(&mut g, model, x, label, objective);
    let loss = g.forward()?.item();
    let pred = argmax(g.value(logits).unwrap().data());
    Ok((loss, pred))
}

/// Result of one PGD attack run (Comp-PGD or Ensemble-PGD).
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub image: Tensor,
    pub success: bool,
    pub early_stopped: bool,
    /// Loss at each completed update step.
    pub trace: Vec<f32>,
    /// Final parameter of each optimized component.
    pub states: Vec<PerturbationState>,
    /// Loss of the returned image.
    pub final_loss: f32,
}

/// One Eq.-style PGD update of a single component on a fixed base image:
/// delta <- clip(delta + alpha * sign(grad)). Returns the new state and the
/// loss evaluated at the incoming state.
pub fn pgd_step(
    component: &AttackComponent,
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    objective: &AttackObjective,
    step: f32,
) -> Result<(PerturbationState, f32)> {
    let (state, loss, _pred, grad) = pgd_forward_backward(component, image, model, label, objective)?;
    let next = stepped(&state, &grad, step, &component.interval);
    Ok((next, loss))
}

fn pgd_forward_backward(
    component: &AttackComponent,
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    objective: &AttackObjective,
) -> Result<(PerturbationState, f32, usize, Tensor)> {
    let mut g = Graph::new();
    let x = g.input(image.clone());
    let d = delta_node(&mut g, &component.state);
    let out = transforms::apply_in_graph(&mut g, component.kind, x, d);
    let logits = attach_loss(&mut g, model, out, label, objective);
    let loss = g.forward()?.item();
    let pred = argmax(g.value(logits).unwrap().data());
    let grads = g.backward()?;
    let grad = grads
        .get(d)
        .cloned()
        .ok_or_else(|| Error::NonFinite {
            context: "missing PGD gradient".into(),
        })?;
    Ok((component.state.clone(), loss, pred, grad))
}

/// Comp-PGD on one component over a fixed base image.
///
/// The component's stored state is the first restart's starting point;
/// further restarts draw fresh uniform starts from `rng`. The first
/// successful restart is returned; if none succeed, the restart with the
/// highest final loss wins.
pub fn run_comp_pgd<R: Rng>(
    component: &AttackComponent,
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    config: &CompPgdConfig,
    objective: &AttackObjective,
    rng: &mut R,
) -> Result<PgdOutcome> {
    config.validate()?;
    let mut best: Option<PgdOutcome> = None;
    for restart in 0..config.restarts {
        let start = if restart == 0 {
            component.state.clone()
        } else {
            init_delta(component.kind, &component.interval, image.shape(), rng)
        };
        let comp = AttackComponent {
            kind: component.kind,
            interval: component.interval,
            state: start,
        };
        let outcome = comp_pgd_single(&comp, image, model, label, config, objective)?;
        if outcome.success {
            return Ok(outcome);
        }
        match &best {
            Some(b) if b.final_loss >= outcome.final_loss => {}
            _ => best = Some(outcome),
        }
    }
    Ok(best.unwrap())
}

fn comp_pgd_single(
    component: &AttackComponent,
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    config: &CompPgdConfig,
    objective: &AttackObjective,
) -> Result<PgdOutcome> {
    // Step-0 early stop: an input that is already misclassified comes back
    // unchanged with an empty trace.
    if config.early_stop {
        let (loss, pred) = loss_and_pred(model, image, label, objective)?;
        if pred != label {
            return Ok(PgdOutcome {
                image: image.clone(),
                success: true,
                early_stopped: true,
                trace: Vec::new(),
                states: vec![component.state.clone()],
                final_loss: loss,
            });
        }
    }

    let alpha = step_size(&component.interval, config.steps);
    let mut comp = component.clone();
    let mut trace = Vec::with_capacity(config.steps);
    for _t in 0..config.steps {
        let (state, loss, pred, grad) =
            pgd_forward_backward(&comp, image, model, label, objective)?;
        if config.early_stop && pred != label {
            // The forward already evaluated the current composite image.
            let cur = transforms::apply_state(image, &state)?;
            return Ok(PgdOutcome {
                image: cur,
                success: true,
                early_stopped: true,
                trace,
                states: vec![state],
                final_loss: loss,
            });
        }
        trace.push(loss);
        comp.state = stepped(&state, &grad, alpha, &comp.interval);
    }

    let final_image = transforms::apply_state(image, &comp.state)?;
    let (final_loss, pred) = loss_and_pred(model, &final_image, label, objective)?;
    Ok(PgdOutcome {
        image: final_image,
        success: pred != label,
        early_stopped: false,
        trace,
        states: vec![comp.state],
        final_loss,
    })
}

/// Ensemble-PGD: jointly optimize every component's parameter at a fixed
/// order, updating all of them simultaneously each step.
pub fn run_ensemble_pgd<R: Rng>(
    components: &[AttackComponent],
    order: &[usize],
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    config: &CompPgdConfig,
    objective: &AttackObjective,
    rng: &mut R,
) -> Result<PgdOutcome> {
    config.validate()?;
    check_order(order, components.len())?;
    let mut best: Option<PgdOutcome> = None;
    for restart in 0..config.restarts {
        let states: Vec<PerturbationState> = if restart == 0 {
            components.iter().map(|c| c.state.clone()).collect()
        } else {
            components
                .iter()
                .map(|c| init_delta(c.kind, &c.interval, image.shape(), rng))
                .collect()
        };
        let outcome =
            ensemble_single(components, order, states, image, model, label, config, objective)?;
        if outcome.success {
            return Ok(outcome);
        }
        match &best {
            Some(b) if b.final_loss >= outcome.final_loss => {}
            _ => best = Some(outcome),
        }
    }
    Ok(best.unwrap())
}

#[allow(clippy::too_many_arguments)]
fn ensemble_single(
    components: &[AttackComponent],
    order: &[usize],
    mut states: Vec<PerturbationState>,
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    config: &CompPgdConfig,
    objective: &AttackObjective,
) -> Result<PgdOutcome> {
    if config.early_stop {
        let (loss, pred) = loss_and_pred(model, image, label, objective)?;
        if pred != label {
            return Ok(PgdOutcome {
                image: image.clone(),
                success: true,
                early_stopped: true,
                trace: Vec::new(),
                states,
                final_loss: loss,
            });
        }
    }

    let alphas: Vec<f32> = components
        .iter()
        .map(|c| step_size(&c.interval, config.steps))
        .collect();
    let mut trace = Vec::with_capacity(config.steps);
    for _t in 0..config.steps {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let nodes: Vec<crate::autodiff::NodeId> =
            states.iter().map(|s| delta_node(&mut g, s)).collect();
        let mut cur = x;
        for &k in order {
            cur = transforms::apply_in_graph(&mut g, components[k].kind, cur, nodes[k]);
        }
        let logits = attach_loss(&mut g, model, cur, label, objective);
        let loss = g.forward()?.item();
        let pred = argmax(g.value(logits).unwrap().data());
        if config.early_stop && pred != label {
            let img = apply_chain(&states, order, image)?;
            return Ok(PgdOutcome {
                image: img,
                success: true,
                early_stopped: true,
                trace,
                states,
                final_loss: loss,
            });
        }
        trace.push(loss);
        let grads = g.backward()?;
        for (k, node) in nodes.iter().enumerate() {
            if let Some(grad) = grads.get(*node) {
                states[k] = stepped(&states[k], grad, alphas[k], &components[k].interval);
            }
        }
    }

    let final_image = apply_chain(&states, order, image)?;
    let (final_loss, pred) = loss_and_pred(model, &final_image, label, objective)?;
    Ok(PgdOutcome {
        image: final_image,
        success: pred != label,
        early_stopped: false,
        trace,
        states,
        final_loss,
    })
}

fn apply_chain(states: &[PerturbationState], order: &[usize], image: &Tensor) -> Result<Tensor> {
    let mut cur = image.clone();
    for &k in order {
        cur = transforms::apply_state(&cur, &states[k])?;
    }
    Ok(cur)
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "order {:?} over {} components",
            order, n
        )));
    }
    for &k in order {
        if k >= n || seen[k] {
            return Err(Error::InvalidPermutation(format!("{:?}", order)));
        }
        seen[k] = true;
    }
    Ok(())
}

/// Grid-search baseline: exhaustively evaluates K uniformly spaced parameter
/// values per semantic component at a fixed order.
#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub image: Tensor,
    pub success: bool,
    /// Cross-entropy loss of the returned grid point.
    pub loss: f32,
    /// Chosen parameter per component (pool order).
    pub deltas: Vec<f32>,
    pub evaluations: usize,
}

/// Evaluates the full K^N grid. If any point misclassifies, the
/// highest-loss misclassifying point is returned (success); otherwise the
/// highest-loss point overall (mirrors the restart selection rule).
pub fn grid_search_attack(
    components: &[AttackComponent],
    order: &[usize],
    image: &Tensor,
    model: &dyn Model,
    label: usize,
    k: usize,
) -> Result<GridSearchOutcome> {
    if k < 2 {
        return Err(Error::InvalidArgument("grid needs K >= 2".into()));
    }
    if components.iter().any(|c| c.kind == PerturbationKind::Linf) {
        return Err(Error::InvalidArgument(
            "grid search covers semantic components only".into(),
        ));
    }
    check_order(order, components.len())?;
    let n = components.len();
    let grids: Vec<Vec<f32>> = components
        .iter()
        .map(|c| linspace(c.interval.low, c.interval.high, k))
        .collect();

    let total = k.pow(n as u32);
    let classes = model.num_classes();
    let mut best_any: (f32, usize) = (f32::NEG_INFINITY, 0);
    let mut best_success: Option<(f32, usize)> = None;

    // Batch composed images through the model to keep forwards cheap.
    const CHUNK: usize = 64;
    let img_len = image.numel();
    let mut combo = 0usize;
    while combo < total {
        let end = (combo + CHUNK).min(total);
        let mut batch = Vec::with_capacity((end - combo) * img_len);
        for idx in combo..end {
            let composed = compose_combo(components, order, &grids, idx, k, image)?;
            batch.extend_from_slice(composed.data());
        }
        let shape = [end - combo, image.shape()[1], image.shape()[2], image.shape()[3]];
        let logits = model.logits(&Tensor::from_vec(&shape, batch)?)?;
        for (row_idx, row) in logits.data().chunks(classes).enumerate() {
            let idx = combo + row_idx;
            let loss = kernels::softmax_cross_entropy(row, &[label], classes);
            let pred = argmax(row);
            if loss > best_any.0 {
                best_any = (loss, idx);
            }
            if pred != label && best_success.map_or(true, |(l, _)| loss > l) {
                best_success = Some((loss, idx));
            }
        }
        combo = end;
    }

    let (loss, idx, success) = match best_success {
        Some((l, i)) => (l, i, true),
        None => (best_any.0, best_any.1, false),
    };
    let image_out = compose_combo(components, order, &grids, idx, k, image)?;
    let deltas = combo_deltas(&grids, idx, k);
    Ok(GridSearchOutcome {
        image: image_out,
        success,
        loss,
        deltas,
        evaluations: total,
    })
}

fn linspace(lo: f32, hi: f32, k: usize) -> Vec<f32> {
    let step = (hi - lo) / (k - 1) as f32;
    (0..k).map(|i| lo + step * i as f32).collect()
}

fn combo_deltas(grids: &[Vec<f32>], mut idx: usize, k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(grids.len());
    for grid in grids {
        out.push(grid[idx % k]);
        idx /= k;
    }
    out
}

fn compose_combo(
    components: &[AttackComponent],
    order: &[usize],
    grids: &[Vec<f32>],
    idx: usize,
    k: usize,
    image: &Tensor,
) -> Result<Tensor> {
    let deltas = combo_deltas(grids, idx, k);
    let states: Vec<PerturbationState> = components
        .iter()
        .zip(&deltas)
        .map(|(c, d)| PerturbationState::scalar(c.kind, *d))
        .collect();
    apply_chain(&states, order, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NodeId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-class toy model over 3x8x8 images: logits = [w * mean, -w * mean].
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

    fn brightness_component() -> AttackComponent {
        AttackComponent::new(
            PerturbationKind::Brightness,
            PerturbationInterval::new(PerturbationKind::Brightness, -0.2, 0.2).unwrap(),
        )
    }

    #[test]
    fn init_delta_degenerate_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let interval = PerturbationInterval::new(PerturbationKind::Brightness, 0.05, 0.05).unwrap();
        let s = init_delta(PerturbationKind::Brightness, &interval, &[1, 3, 4, 4], &mut rng);
        assert_eq!(s, PerturbationState::scalar(PerturbationKind::Brightness, 0.05));
    }

    #[test]
    fn init_delta_deterministic_under_seed() {
        let interval = PerturbationInterval::default_for(PerturbationKind::Hue);
        let a = init_delta(
            PerturbationKind::Hue,
            &interval,
            &[1, 3, 4, 4],
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let b = init_delta(
            PerturbationKind::Hue,
            &interval,
            &[1, 3, 4, 4],
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn init_delta_uniform_ks_test() {
        // Kolmogorov-Smirnov against U[-pi, pi], 10^4 draws, alpha = 0.01.
        let interval = PerturbationInterval::default_for(PerturbationKind::Hue);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut draws: Vec<f32> = (0..n)
            .map(|_| match init_delta(PerturbationKind::Hue, &interval, &[1], &mut rng) {
                PerturbationState {
                    delta: DeltaValue::Scalar(v),
                    ..
                } => v,
                _ => unreachable!(),
            })
            .collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let width = interval.width();
        let mut d_stat = 0.0f64;
        for (i, v) in draws.iter().enumerate() {
            let cdf = ((v - interval.low) / width) as f64;
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d_stat < critical, "KS statistic {} >= {}", d_stat, critical);
    }

    #[test]
    fn clip_three_branches() {
        let i = PerturbationInterval::new(PerturbationKind::Brightness, 0.0, 1.0).unwrap();
        assert_eq!(clip_interval(0.5, &i), 0.5);
        assert_eq!(clip_interval(-2.0, &i), 0.0);
        assert_eq!(clip_interval(7.0, &i), 1.0);
    }

    #[test]
    fn pgd_step_zero_gradient_stalls() {
        let comp = brightness_component();
        let model = MeanModel { w: 0.0 };
        let image = flat_image(0.5);
        let alpha = step_size(&comp.interval, 10);
        let mut c = comp.clone();
        c.state = PerturbationState::scalar(PerturbationKind::Brightness, 0.07);
        let (next, _) = pgd_step(&c, &image, &model, 0, &AttackObjective::CrossEntropy, alpha).unwrap();
        assert_eq!(next, c.state);
    }

    #[test]
    fn pgd_monotone_loss_reaches_upper_boundary() {
        // Loss increases in mean brightness for label 0 when w < 0, so PGD
        // drives delta to the upper edge from any start.
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let cfg = CompPgdConfig {
            steps: 7,
            restarts: 1,
            early_stop: false,
        };
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut comp = brightness_component();
            comp.state = init_delta(comp.kind, &comp.interval, image.shape(), &mut rng);
            let out = run_comp_pgd(
                &comp,
                &image,
                &model,
                0,
                &cfg,
                &AttackObjective::CrossEntropy,
                &mut rng,
            )
            .unwrap();
            match &out.states[0].delta {
                DeltaValue::Scalar(v) => assert!((v - 0.2).abs() < 1e-6, "seed {}: {}", seed, v),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn pgd_step_boundary_fixpoint() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let mut comp = brightness_component();
        comp.state = PerturbationState::scalar(PerturbationKind::Brightness, 0.2);
        let alpha = step_size(&comp.interval, 10);
        let (next, _) =
            pgd_step(&comp, &image, &model, 0, &AttackObjective::CrossEntropy, alpha).unwrap();
        assert_eq!(next, comp.state);
    }

    #[test]
    fn comp_pgd_already_misclassified_early_stop() {
        // Mean 0.6 with w > 0 predicts class 0; label 1 means initially wrong.
        let model = MeanModel { w: 5.0 };
        let image = flat_image(0.6);
        let comp = brightness_component();
        let cfg = CompPgdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_comp_pgd(
            &comp,
            &image,
            &model,
            1,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        assert!(out.success && out.early_stopped);
        assert!(out.trace.is_empty());
        assert_eq!(out.image.data(), image.data());
    }

    #[test]
    fn comp_pgd_trace_has_exactly_t_entries() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let comp = brightness_component();
        let cfg = CompPgdConfig {
            steps: 10,
            restarts: 1,
            early_stop: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_comp_pgd(
            &comp,
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.trace.len(), 10);
        assert!(!out.early_stopped);
    }

    #[test]
    fn comp_pgd_state_stays_in_interval() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let comp = brightness_component();
        let cfg = CompPgdConfig {
            steps: 10,
            restarts: 3,
            early_stop: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = run_comp_pgd(
            &comp,
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut rng,
        )
        .unwrap();
        assert!(out.states[0].within(&comp.interval));
    }

    #[test]
    fn ensemble_single_component_matches_comp_pgd() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.45);
        let cfg = CompPgdConfig {
            steps: 6,
            restarts: 2,
            early_stop: false,
        };
        let mut comp = brightness_component();
        comp.state = PerturbationState::scalar(PerturbationKind::Brightness, -0.1);
        let a = run_comp_pgd(
            &comp,
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        let b = run_ensemble_pgd(
            std::slice::from_ref(&comp),
            &[0],
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.image.data(), b.image.data());
    }

    #[test]
    fn ensemble_zero_gradient_keeps_all_states() {
        let model = MeanModel { w: 0.0 };
        let image = flat_image(0.5);
        let comps = vec![
            brightness_component(),
            AttackComponent::with_default_interval(PerturbationKind::Contrast),
        ];
        let cfg = CompPgdConfig {
            steps: 3,
            restarts: 1,
            early_stop: false,
        };
        let before: Vec<PerturbationState> = comps.iter().map(|c| c.state.clone()).collect();
        let out = run_ensemble_pgd(
            &comps,
            &[0, 1],
            &image,
            &model,
            0,
            &cfg,
            &AttackObjective::CrossEntropy,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.states, before);
    }

    #[test]
    fn grid_search_single_component_grid() {
        let model = MeanModel { w: -5.0 };
        let image = flat_image(0.5);
        let comp = brightness_component();
        let out = grid_search_attack(std::slice::from_ref(&comp), &[0], &image, &model, 0, 3).unwrap();
        assert_eq!(out.evaluations, 3);
        // Monotone loss in delta: the upper endpoint wins.
        assert_eq!(out.deltas, vec![0.2]);
    }

    #[test]
    fn grid_search_rejects_linf_and_small_k() {
        let model = MeanModel { w: 1.0 };
        let image = flat_image(0.5);
        let linf = AttackComponent::with_default_interval(PerturbationKind::Linf);
        assert!(grid_search_attack(&[linf], &[0], &image, &model, 0, 3).is_err());
        let comp = brightness_component();
        assert!(grid_search_attack(&[comp], &[0], &image, &model, 0, 1).is_err());
    }
}
