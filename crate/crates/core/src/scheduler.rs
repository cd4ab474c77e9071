//! Attack-order optimization: the doubly stochastic scheduling matrix, its
//! Sinkhorn-normalized gradient update, the surrogate composition that makes
//! the order differentiable, and permutation extraction.
//!
//! Row i of the matrix weights the components mixed into surrogate stage i,
//! so an extracted permutation maps stage -> component. Matrix arithmetic is
//! kept in f64; values are cast to f32 only where they enter a compute graph.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::{self, DeltaValue, PerturbationState};
use rand::Rng;

/// Fixed Sinkhorn iteration count used throughout.
pub const SINKHORN_ITERS: usize = 20;

/// An n-by-n nonnegative matrix driven toward doubly stochastic form.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMatrix {
    n: usize,
    z: Vec<f64>,
}

impl ScheduleMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(
                "schedule matrix must be square and non-empty".into(),
            ));
        }
        Ok(ScheduleMatrix {
            n,
            z: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.z
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.z[i * self.n..(i + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    /// Max deviation of any row or column sum from 1.
    pub fn doubly_stochastic_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            worst = worst.max((self.row_sum(i) - 1.0).abs());
            worst = worst.max((self.col_sum(i) - 1.0).abs());
        }
        worst
    }

    /// f32 tensor view for graph consumption.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.n, self.n], self.z.iter().map(|v| *v as f32).collect())
            .expect("square matrix")
    }
}

/// A permutation of {0, .., n-1}; `order[k]` is the component applied k-th.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderAssignment(Vec<usize>);

impl OrderAssignment {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidPermutation(format!("{:?}", perm)));
            }
            seen[p] = true;
        }
        Ok(OrderAssignment(perm))
    }

    pub fn identity(n: usize) -> Self {
        OrderAssignment((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniform 1/n entries plus a little uniform noise, then Sinkhorn. The noise
/// breaks assignment ties on the otherwise constant matrix.
pub fn init_schedule<R: Rng>(n: usize, rng: &mut R) -> Result<ScheduleMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("schedule needs n >= 1".into()));
    }
    let base = 1.0 / n as f64;
    let z: Vec<f64> = (0..n * n)
        .map(|_| base + rng.gen_range(0.0..0.01 * base))
        .collect();
    sinkhorn_normalize(&ScheduleMatrix { n, z }, SINKHORN_ITERS)
}

/// Alternating row/column normalization for a fixed iteration count.
/// Every entry must be strictly positive.
pub fn sinkhorn_normalize(m: &ScheduleMatrix, iterations: usize) -> Result<ScheduleMatrix> {
    let n = m.n;
    for i in 0..n {
        for j in 0..n {
            let v = m.get(i, j);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    let mut z = m.z.clone();
    for _ in 0..iterations {
        for i in 0..n {
            let s: f64 = z[i * n..(i + 1) * n].iter().sum();
            for v in &mut z[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
        for j in 0..n {
            let s: f64 = (0..n).map(|i| z[i * n + j]).sum();
            for i in 0..n {
                z[i * n + j] /= s;
            }
        }
    }
    Ok(ScheduleMatrix { n, z })
}

/// One scheduling-matrix step: exponentiate (Z + dL/dZ) with per-row max
/// subtraction (the Sinkhorn fixed point is invariant to row scaling), then
/// renormalize.
pub fn update_schedule(
    z: &ScheduleMatrix,
    grad: &[f64],
    step: f64,
    sinkhorn_iterations: usize,
) -> Result<ScheduleMatrix> {
    let n = z.n;
    if grad.len() != n * n {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries, expected {}",
            grad.len(),
            n * n
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "schedule gradient".into(),
        });
    }
    let mut raw = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &mut raw[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] = z.get(i, j) + step * grad[i * n + j];
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
        }
    }
    sinkhorn_normalize(&ScheduleMatrix { n, z: raw }, sinkhorn_iterations)
}

/// Maximum-weight perfect matching via the O(n^3) Hungarian algorithm with
/// potentials; returns the stage -> component permutation.
pub fn hungarian_assign(z: &ScheduleMatrix) -> OrderAssignment {
    OrderAssignment(hungarian_max(&z.z, z.n))
}

fn hungarian_max(weights: &[f64], n: usize) -> Vec<usize> {
    // Shortest augmenting paths on the negated matrix (minimization form),
    // 1-indexed buffers; p[j] is the row matched to column j.
    let cost = |i: usize, j: usize| -weights[i * n + j];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Exhaustive assignment over all n! permutations (n <= 8); ties broken by
/// the lexicographically smallest permutation. Test oracle for
/// [`hungarian_assign`].
pub fn brute_force_assign(z: &ScheduleMatrix) -> Result<OrderAssignment> {
    let n = z.n;
    if n > 8 {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to n <= 8, got {}",
            n
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    // Lexicographic enumeration; strict improvement keeps the first optimum.
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| z.get(i, j)).sum();
        match &best {
            Some((b, _)) if total <= *b => {}
            _ => best = Some((total, perm.clone())),
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(OrderAssignment(best.unwrap().1))
}

pub fn assignment_value(z: &ScheduleMatrix, order: &OrderAssignment) -> f64 {
    order
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &j)| z.get(i, j))
        .sum()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// The surrogate image and its per-stage intermediates.
#[derive(Debug, Clone)]
pub struct SurrogateComposition {
    /// stages[0] is the clean input; stages[i] is x_surr^i.
    pub stages: Vec<Tensor>,
    pub x_surr: Tensor,
}

/// Builds the surrogate chain in `g`: stage i is the z_i-weighted sum of all
/// components applied to stage i-1, with component parameters frozen as
/// constants. Returns the stage-output nodes (excluding the input).
pub fn build_surrogate_nodes(
    g: &mut Graph,
    z_node: NodeId,
    states: &[PerturbationState],
    image: NodeId,
) -> Vec<NodeId> {
    let n = states.len();
    let delta_nodes: Vec<NodeId> = states
        .iter()
        .map(|s| match &s.delta {
            DeltaValue::Scalar(v) => g.input(Tensor::scalar(*v)),
            DeltaValue::PerPixel(t) => g.input(t.clone()),
        })
        .collect();
    let mut prev = image;
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let terms: Vec<NodeId> = states
            .iter()
            .zip(&delta_nodes)
            .map(|(s, d)| transforms::apply_in_graph(g, s.kind, prev, *d))
            .collect();
        let weights: Vec<NodeId> = (0..n).map(|j| g.select(z_node, i * n + j)).collect();
        prev = g.weighted_sum(&terms, &weights);
        outputs.push(prev);
    }
    outputs
}

/// Evaluates the surrogate composition for a frozen set of component states.
pub fn compute_surrogate(
    z: &ScheduleMatrix,
    states: &[PerturbationState],
    images: &Tensor,
) -> Result<SurrogateComposition> {
    if z.n != states.len() {
        return Err(Error::DimensionMismatch(format!(
            "schedule is {}x{} but pool has {} components",
            z.n,
            z.n,
            states.len()
        )));
    }
    let mut g = Graph::new();
    let image = g.input(images.clone());
    let z_node = g.input(z.to_tensor());
    let stage_nodes = build_surrogate_nodes(&mut g, z_node, states, image);
    g.forward()?;
    let mut stages = vec![images.clone()];
    for node in &stage_nodes {
        stages.push(g.value(*node).unwrap().clone());
    }
    Ok(SurrogateComposition {
        x_surr: stages.last().unwrap().clone(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::PerturbationKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> ScheduleMatrix {
        ScheduleMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn init_n1_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = init_schedule(1, &mut rng).unwrap();
        assert_eq!(z.entries(), &[1.0]);
    }

    #[test]
    fn init_is_doubly_stochastic_with_valid_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = init_schedule(3, &mut rng).unwrap();
        assert!(z.doubly_stochastic_residual() < 1e-6);
        let order = hungarian_assign(&z);
        OrderAssignment::new(order.as_slice().to_vec()).unwrap();
    }

    #[test]
    fn init_zero_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(init_schedule(0, &mut rng).is_err());
    }

    #[test]
    fn sinkhorn_fixed_point() {
        let z = mat(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let out = sinkhorn_normalize(&z, SINKHORN_ITERS).unwrap();
        for (a, b) in out.entries().iter().zip(z.entries()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_symmetric_two_by_two() {
        let z = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let out = sinkhorn_normalize(&z, SINKHORN_ITERS).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (a, b) in out.entries().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{:?}", out.entries());
        }
    }

    #[test]
    fn sinkhorn_near_permutation_stays_near() {
        let e = 1e-9;
        let z = mat(&[&[e, 1.0, e], &[1.0, e, e], &[e, e, 1.0]]);
        let out = sinkhorn_normalize(&z, SINKHORN_ITERS).unwrap();
        assert!(out.get(0, 1) > 0.99);
        assert!(out.get(1, 0) > 0.99);
        assert!(out.get(2, 2) > 0.99);
    }

    #[test]
    fn sinkhorn_rejects_nonpositive() {
        let z = mat(&[&[1.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            sinkhorn_normalize(&z, 5),
            Err(Error::NonPositiveEntry { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn update_zero_gradient_is_doubly_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = init_schedule(4, &mut rng).unwrap();
        let out = update_schedule(&z, &vec![0.0; 16], 1.0, SINKHORN_ITERS).unwrap();
        assert!(out.doubly_stochastic_residual() < 1e-9);
    }

    #[test]
    fn update_large_gradient_dominates_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = init_schedule(3, &mut rng).unwrap();
        let mut grad = vec![0.0f64; 9];
        grad[0 * 3 + 2] = 50.0; // push stage 0 toward component 2
        let out = update_schedule(&z, &grad, 1.0, SINKHORN_ITERS).unwrap();
        assert!(out.get(0, 2) > out.get(0, 0));
        assert!(out.get(0, 2) > out.get(0, 1));
    }

    #[test]
    fn update_rejects_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = init_schedule(2, &mut rng).unwrap();
        let grad = vec![f64::NAN; 4];
        assert!(update_schedule(&z, &grad, 1.0, SINKHORN_ITERS).is_err());
    }

    #[test]
    fn hungarian_identity_dominant() {
        let z = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(hungarian_assign(&z).as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn hungarian_anti_diagonal() {
        let z = mat(&[&[0.1, 0.9], &[0.8, 0.2]]);
        let order = hungarian_assign(&z);
        assert_eq!(order.as_slice(), &[1, 0]);
        assert!((assignment_value(&z, &order) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn brute_force_ties_pick_lexicographic() {
        let z = mat(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(brute_force_assign(&z).unwrap().as_slice(), &[0, 1]);
        assert_eq!(
            brute_force_assign(&mat(&[&[1.0]])).unwrap().as_slice(),
            &[0]
        );
    }

    #[test]
    fn brute_force_rejects_large() {
        let n = 9;
        let z = ScheduleMatrix {
            n,
            z: vec![1.0; n * n],
        };
        assert!(brute_force_assign(&z).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 2..=7 {
            for _ in 0..200 {
                let z = ScheduleMatrix {
                    n,
                    z: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                };
                let h = hungarian_assign(&z);
                let b = brute_force_assign(&z).unwrap();
                let (hv, bv) = (assignment_value(&z, &h), assignment_value(&z, &b));
                assert!(
                    (hv - bv).abs() < 1e-9,
                    "n={} hungarian {} vs brute {}",
                    n,
                    hv,
                    bv
                );
            }
        }
    }

    #[test]
    fn hungarian_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..=6);
            let z = ScheduleMatrix {
                n,
                z: (0..n * n).map(|_| rng.gen_range(0.01..1.0)).collect(),
            };
            let base = hungarian_assign(&z);
            for c in [0.5f64, 2.0, 4.0, 3.0] {
                let scaled = ScheduleMatrix {
                    n,
                    z: z.z.iter().map(|v| v * c).collect(),
                };
                assert_eq!(hungarian_assign(&scaled).as_slice(), base.as_slice());
            }
        }
    }

    fn test_image() -> Tensor {
        Tensor::from_vec(
            &[1, 3, 8, 8],
            (0..192).map(|i| 0.15 + ((i * 23) % 67) as f32 / 100.0).collect(),
        )
        .unwrap()
    }

    fn semantic_states() -> Vec<PerturbationState> {
        vec![
            PerturbationState::scalar(PerturbationKind::Brightness, 0.08),
            PerturbationState::scalar(PerturbationKind::Contrast, 1.15),
            PerturbationState::scalar(PerturbationKind::Hue, 0.4),
        ]
    }

    fn sequential(states: &[PerturbationState], order: &[usize], image: &Tensor) -> Tensor {
        let mut cur = image.clone();
        for &j in order {
            cur = transforms::apply_state(&cur, &states[j]).unwrap();
        }
        cur
    }

    #[test]
    fn surrogate_with_permutation_matrix_matches_sequential() {
        let states = semantic_states();
        let img = test_image();
        // Identity permutation.
        let z = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let surr = compute_surrogate(&z, &states, &img).unwrap();
        let seq = sequential(&states, &[0, 1, 2], &img);
        assert!(surr.x_surr.max_abs_diff(&seq) < 1e-6);
        assert_eq!(surr.stages[0].data(), img.data());

        // Swapped two-component case.
        let states2 = &states[..2];
        let z2 = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let surr2 = compute_surrogate(&z2, states2, &img).unwrap();
        let seq2 = sequential(states2, &[1, 0], &img);
        assert!(surr2.x_surr.max_abs_diff(&seq2) < 1e-6);
    }

    #[test]
    fn surrogate_single_component() {
        let states = vec![PerturbationState::scalar(PerturbationKind::Brightness, 0.1)];
        let img = test_image();
        let z = mat(&[&[1.0]]);
        let surr = compute_surrogate(&z, &states, &img).unwrap();
        let expect = transforms::apply_brightness(&img, 0.1).unwrap();
        assert!(surr.x_surr.max_abs_diff(&expect) < 1e-7);
    }

    #[test]
    fn surrogate_dimension_mismatch() {
        let states = semantic_states();
        let z = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(compute_surrogate(&z, &states, &test_image()).is_err());
    }

    #[test]
    fn surrogate_stages_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let states = semantic_states();
        let z = init_schedule(3, &mut rng).unwrap();
        let surr = compute_surrogate(&z, &states, &test_image()).unwrap();
        for stage in &surr.stages {
            for v in stage.data() {
                assert!((-1e-6..=1.0 + 1e-6).contains(v));
            }
        }
    }
}
