//! Evaluation harness: named attack suites, robust-accuracy / attack-success
//! metrics, loss-landscape sweeps, the paired comparison test, and report
//! emission.
//!
//! ASR counts samples that were initially classified correctly and were
//! flipped by the attack; RA is defined as CleanAcc * (1 - ASR), which under
//! early-stop evaluation (initially-wrong samples return unchanged) equals
//! the fraction classified correctly after attack.

use crate::caa::{self, AttackPool, CaaConfig, ScheduleMode};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::scheduler;
use crate::transforms::{self, PerturbationInterval, PerturbationKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::path::Path;

/// Perturbation budgets for all six components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub hue: (f32, f32),
    pub saturation: (f32, f32),
    pub rotation: (f32, f32),
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub linf_eps: f32,
}

impl Default for IntervalSet {
    fn default() -> Self {
        IntervalSet {
            hue: (-transforms::PI, transforms::PI),
            saturation: (0.7, 1.3),
            rotation: (-10.0, 10.0),
            brightness: (-0.2, 0.2),
            contrast: (0.7, 1.3),
            linf_eps: 8.0 / 255.0,
        }
    }
}

impl IntervalSet {
    pub fn interval(&self, kind: PerturbationKind) -> Result<PerturbationInterval> {
        let (lo, hi) = match kind {
            PerturbationKind::Hue => self.hue,
            PerturbationKind::Saturation => self.saturation,
            PerturbationKind::Rotation => self.rotation,
            PerturbationKind::Brightness => self.brightness,
            PerturbationKind::Contrast => self.contrast,
            PerturbationKind::Linf => (-self.linf_eps, self.linf_eps),
        };
        PerturbationInterval::new(kind, lo, hi)
    }

    /// Budgets that force every parameter to its identity value.
    pub fn identity() -> Self {
        IntervalSet {
            hue: (0.0, 0.0),
            saturation: (1.0, 1.0),
            rotation: (0.0, 0.0),
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            linf_eps: 0.0,
        }
    }
}

/// Evaluation-time attack settings (early stop is always on in evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub intervals: IntervalSet,
    /// Comp-PGD steps per component.
    pub steps: usize,
    pub restarts: usize,
    /// Scheduling iterations M.
    pub sched_iters: usize,
    pub sinkhorn_iters: usize,
    pub schedule_step: f64,
    /// Evaluation subset size (seeded shuffle of the split).
    pub samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            intervals: IntervalSet::default(),
            steps: 10,
            restarts: 1,
            sched_iters: 5,
            sinkhorn_iters: scheduler::SINKHORN_ITERS,
            schedule_step: 1.0,
            samples: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    Fixed,
    Random,
    Scheduled,
}

impl OrderMode {
    pub fn name(&self) -> &'static str {
        match self {
            OrderMode::Fixed => "fixed",
            OrderMode::Random => "random",
            OrderMode::Scheduled => "scheduled",
        }
    }
}

/// A named attack composition with its order mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSuite {
    pub name: String,
    pub kinds: Vec<PerturbationKind>,
    pub mode: OrderMode,
}

impl AttackSuite {
    fn new(name: &str, kinds: &[PerturbationKind], mode: OrderMode) -> Self {
        AttackSuite {
            name: name.to_string(),
            kinds: kinds.to_vec(),
            mode,
        }
    }
}

/// The named suites mirrored from the evaluation protocol: singles,
/// two-attack pairs in both orders, the three-attack combinations, the
/// growing caa1..caa6 chain, and semantic/full in random and scheduled modes.
pub fn builtin_suites() -> Vec<AttackSuite> {
    use PerturbationKind::*;
    let mut suites = Vec::new();
    for k in PerturbationKind::ALL {
        suites.push(AttackSuite::new(k.name(), &[k], OrderMode::Fixed));
    }
    for k in PerturbationKind::SEMANTIC {
        suites.push(AttackSuite::new(
            &format!("{}_linf", k.name()),
            &[k, Linf],
            OrderMode::Fixed,
        ));
        suites.push(AttackSuite::new(
            &format!("linf_{}", k.name()),
            &[Linf, k],
            OrderMode::Fixed,
        ));
    }
    suites.push(AttackSuite::new("caa3a", &[Hue, Saturation, Linf], OrderMode::Scheduled));
    suites.push(AttackSuite::new("caa3b", &[Hue, Rotation, Linf], OrderMode::Scheduled));
    suites.push(AttackSuite::new(
        "caa3c",
        &[Brightness, Contrast, Linf],
        OrderMode::Scheduled,
    ));
    let chain = [Hue, Saturation, Rotation, Brightness, Contrast, Linf];
    for n in 1..=6 {
        suites.push(AttackSuite::new(
            &format!("caa{}", n),
            &chain[..n],
            OrderMode::Scheduled,
        ));
    }
    suites.push(AttackSuite::new(
        "semantic_rand",
        &PerturbationKind::SEMANTIC,
        OrderMode::Random,
    ));
    suites.push(AttackSuite::new(
        "semantic_sched",
        &PerturbationKind::SEMANTIC,
        OrderMode::Scheduled,
    ));
    suites.push(AttackSuite::new("full_rand", &chain, OrderMode::Random));
    suites.push(AttackSuite::new("full_sched", &chain, OrderMode::Scheduled));
    suites
}

pub fn suite_by_name(name: &str) -> Option<AttackSuite> {
    builtin_suites().into_iter().find(|s| s.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub suite: String,
    pub order_mode: String,
    pub clean_acc: f64,
    pub ra: f64,
    pub asr: f64,
    pub n: usize,
    pub seed: u64,
    pub config: EvalSettings,
}

pub fn pool_for(suite: &AttackSuite, settings: &EvalSettings) -> Result<AttackPool> {
    let components = suite
        .kinds
        .iter()
        .map(|k| {
            Ok(crate::attack::AttackComponent::new(
                *k,
                settings.intervals.interval(*k)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    AttackPool::new(components)
}

pub fn caa_config_for(suite: &AttackSuite, settings: &EvalSettings) -> CaaConfig {
    let mode = match suite.mode {
        OrderMode::Fixed => ScheduleMode::Fixed((0..suite.kinds.len()).collect()),
        OrderMode::Random => ScheduleMode::Random,
        OrderMode::Scheduled => ScheduleMode::Scheduled,
    };
    let mut cfg = CaaConfig::new(mode);
    cfg.sched_iters = settings.sched_iters;
    cfg.sinkhorn_iters = settings.sinkhorn_iters;
    cfg.schedule_step = settings.schedule_step;
    cfg.comp_pgd.steps = settings.steps;
    cfg.comp_pgd.restarts = settings.restarts;
    cfg.comp_pgd.early_stop = true;
    cfg
}

/// Seeded-shuffle subset of the split used for evaluation.
pub fn evaluation_subset(data: &ImageBatch, samples: usize, seed: u64) -> ImageBatch {
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_a5a5_0f0f_f0f0);
    indices.shuffle(&mut rng);
    indices.truncate(samples.min(data.len()));
    data.subset(&indices)
}

/// Runs the suite in evaluation mode (early stop, per-sample independence)
/// and aggregates clean accuracy, RA and ASR.
pub fn evaluate_suite(
    model: &dyn Model,
    data: &ImageBatch,
    suite: &AttackSuite,
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation dataset".into()));
    }
    let subset = evaluation_subset(data, settings.samples, seed);
    let pool = pool_for(suite, settings)?;
    let config = caa_config_for(suite, settings);

    let clean_preds = predict_chunked(model, &subset)?;
    let results = caa::run_caa_batch(&pool, &subset, model, &config, seed)?;

    let n = subset.len();
    let mut correct = 0usize;
    let mut flipped = 0usize;
    for i in 0..n {
        let initially_correct = clean_preds[i] == subset.labels[i] as usize;
        if initially_correct {
            correct += 1;
            if results[i].success {
                flipped += 1;
            }
        }
    }
    let clean_acc = correct as f64 / n as f64;
    let asr = if correct > 0 {
        flipped as f64 / correct as f64
    } else {
        0.0
    };
    let ra = clean_acc * (1.0 - asr);
    Ok(MetricsReport {
        suite: suite.name.clone(),
        order_mode: suite.mode.name().to_string(),
        clean_acc,
        ra,
        asr,
        n,
        seed,
        config: settings.clone(),
    })
}

fn predict_chunked(model: &dyn Model, data: &ImageBatch) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let chunk = 256usize;
    let mut i = 0;
    while i < data.len() {
        let hi = (i + chunk).min(data.len());
        let indices: Vec<usize> = (i..hi).collect();
        preds.extend(model.predict(&data.subset(&indices).images)?);
        i = hi;
    }
    Ok(preds)
}

/// Cross-entropy loss of one semantic component swept over a uniform
/// parameter grid, per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: PerturbationKind,
    pub grid: Vec<f32>,
    /// losses[sample][grid point]
    pub losses: Vec<Vec<f32>>,
}

pub fn loss_landscape_sweep(
    model: &dyn Model,
    samples: &ImageBatch,
    kind: PerturbationKind,
    grid_points: usize,
    interval: &PerturbationInterval,
) -> Result<SweepResult> {
    if !kind.is_semantic() {
        return Err(Error::InvalidArgument(
            "loss sweep needs a scalar (semantic) component".into(),
        ));
    }
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid needs >= 2 points".into()));
    }
    let step = interval.width() / (grid_points - 1) as f32;
    let grid: Vec<f32> = (0..grid_points)
        .map(|i| interval.low + step * i as f32)
        .collect();
    let classes = model.num_classes();
    let mut losses = vec![Vec::with_capacity(grid.len()); samples.len()];
    for &delta in &grid {
        let state = transforms::PerturbationState::scalar(kind, delta);
        let perturbed = transforms::apply_state(&samples.images, &state)?;
        let logits = model.logits(&perturbed)?;
        for (i, row) in logits.data().chunks(classes).enumerate() {
            losses[i].push(kernels::softmax_cross_entropy(
                row,
                &[samples.labels[i] as usize],
                classes,
            ));
        }
    }
    Ok(SweepResult { kind, grid, losses })
}

pub fn write_sweep_csv(sweep: &SweepResult, path: &Path) -> Result<()> {
    let mut out = String::from("sample,delta,loss\n");
    for (i, row) in sweep.losses.iter().enumerate() {
        for (g, loss) in sweep.grid.iter().zip(row) {
            out.push_str(&format!("{},{},{}\n", i, sig6(*g as f64), sig6(*loss as f64)));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Two-sided paired t-test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub p_value: f64,
    /// Zero variance of the differences; p is 1 for identical vectors and 0
    /// for a constant nonzero shift rather than dividing by zero.
    pub degenerate: bool,
}

pub fn paired_comparison_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "paired runs of length {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::InvalidArgument("need at least 5 pairs".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(PairedTest {
            mean_diff: mean,
            p_value: if mean == 0.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {}", e)))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTest {
        mean_diff: mean,
        p_value: p.clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format {}",
                other
            ))),
        }
    }
}

/// Six significant digits, '.' decimal separator.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.6}", x);
    }
    let exp = x.abs().log10().floor() as i32;
    let prec = (5 - exp).clamp(0, 17) as usize;
    format!("{:.*}", prec, x)
}

pub fn render_report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("suite,order_mode,clean_acc,ra,asr,n,seed\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.suite,
            r.order_mode,
            sig6(r.clean_acc),
            sig6(r.ra),
            sig6(r.asr),
            r.n,
            r.seed
        ));
    }
    out
}

pub fn write_report(reports: &[MetricsReport], path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => render_report_csv(reports),
        ReportFormat::Json => serde_json::to_string_pretty(reports)? + "\n",
    };
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<Vec<MetricsReport>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_names_resolve() {
        for name in [
            "hue",
            "linf",
            "hue_linf",
            "linf_hue",
            "caa3a",
            "caa3b",
            "caa3c",
            "caa1",
            "caa6",
            "semantic_rand",
            "semantic_sched",
            "full_rand",
            "full_sched",
        ] {
            let s = suite_by_name(name).unwrap_or_else(|| panic!("missing suite {}", name));
            assert!(!s.kinds.is_empty());
        }
        assert!(suite_by_name("nope").is_none());
        assert_eq!(suite_by_name("caa3a").unwrap().kinds.len(), 3);
        assert_eq!(suite_by_name("full_sched").unwrap().kinds.len(), 6);
    }

    #[test]
    fn paired_test_identical_vectors() {
        let a = vec![0.4, 0.5, 0.6, 0.7, 0.8];
        let out = paired_comparison_test(&a, &a).unwrap();
        assert_eq!(out.mean_diff, 0.0);
        assert_eq!(out.p_value, 1.0);
        assert!(out.degenerate);
    }

    #[test]
    fn paired_test_constant_shift_is_degenerate_zero_p() {
        let a = vec![0.4, 0.5, 0.6, 0.7, 0.8];
        let b: Vec<f64> = a.iter().map(|x| x - 0.1).collect();
        let out = paired_comparison_test(&a, &b).unwrap();
        assert!((out.mean_diff - 0.1).abs() < 1e-12);
        assert_eq!(out.p_value, 0.0);
        assert!(out.degenerate);
    }

    #[test]
    fn paired_test_significant_direction() {
        let a = vec![0.52, 0.61, 0.55, 0.58, 0.60, 0.57, 0.54, 0.59];
        let b: Vec<f64> = a.iter().map(|x| x - 0.05).collect();
        let jitter = [0.01, -0.005, 0.003, -0.002, 0.004, -0.001, 0.002, -0.003];
        let b: Vec<f64> = b.iter().zip(&jitter).map(|(x, j)| x + j).collect();
        let out = paired_comparison_test(&a, &b).unwrap();
        assert!(out.mean_diff > 0.0);
        assert!(out.p_value < 0.05, "p {}", out.p_value);
        assert!(!out.degenerate);
    }

    #[test]
    fn paired_test_rejects_bad_input() {
        assert!(paired_comparison_test(&[1.0, 2.0], &[1.0]).is_err());
        assert!(paired_comparison_test(&[1.0; 4], &[1.0; 4]).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(123.4564), "123.456");
        assert_eq!(sig6(0.0), "0.000000");
        assert_eq!(sig6(0.000123456049), "0.000123456");
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(
            render_report_csv(&[]),
            "suite,order_mode,clean_acc,ra,asr,n,seed\n"
        );
    }

    #[test]
    fn report_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let reports = vec![MetricsReport {
            suite: "hue".into(),
            order_mode: "fixed".into(),
            clean_acc: 0.96,
            ra: 0.5,
            asr: 0.479166666,
            n: 250,
            seed: 7,
            config: EvalSettings::default(),
        }];
        write_report(&reports, &path, ReportFormat::Json).unwrap();
        let back = read_report_json(&path).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn identity_budgets_force_identity_parameters() {
        let ident = IntervalSet::identity();
        for k in PerturbationKind::ALL {
            let iv = ident.interval(k).unwrap();
            assert_eq!(iv.low, iv.high);
            assert_eq!(iv.clip(5.0), k.identity_delta());
        }
    }
}
