//! The six differentiable attack components — hue, saturation, rotation,
//! brightness, contrast, l-inf — plus RGB<->HSV conversion.
//!
//! Conventions: hue shifts are radians added on the HSV color wheel and the
//! shifted channel is clipped to [0, 2*pi] (not wrapped); saturation and
//! contrast are multiplicative factors; brightness and l-inf are additive in
//! pixel space; rotation is in degrees about the image center (c, c) with
//! c = (side-1)/2, bilinear sampling and zero fill.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::HUE_MAX;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const PI: f32 = std::f32::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    Hue,
    Saturation,
    Rotation,
    Brightness,
    Contrast,
    Linf,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::Hue,
        PerturbationKind::Saturation,
        PerturbationKind::Rotation,
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
        PerturbationKind::Linf,
    ];

    pub const SEMANTIC: [PerturbationKind; 5] = [
        PerturbationKind::Hue,
        PerturbationKind::Saturation,
        PerturbationKind::Rotation,
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::Hue => "hue",
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::Rotation => "rotation",
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::Linf => "linf",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Parameter value that leaves the image unchanged.
    pub fn identity_delta(&self) -> f32 {
        match self {
            PerturbationKind::Saturation | PerturbationKind::Contrast => 1.0,
            _ => 0.0,
        }
    }

    pub fn is_semantic(&self) -> bool {
        !matches!(self, PerturbationKind::Linf)
    }
}

/// Admissible range [low, high] of a component's parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInterval {
    pub low: f32,
    pub high: f32,
}

impl PerturbationInterval {
    /// Validates kind-specific bounds: hue within [-pi, pi], saturation and
    /// contrast non-negative, brightness within [-1, 1].
    pub fn new(kind: PerturbationKind, low: f32, high: f32) -> Result<Self> {
        if !(low.is_finite() && high.is_finite()) || low > high {
            return Err(Error::InvalidArgument(format!(
                "bad interval [{}, {}] for {}",
                low,
                high,
                kind.name()
            )));
        }
        let ok = match kind {
            PerturbationKind::Hue => low >= -PI && high <= PI,
            PerturbationKind::Saturation | PerturbationKind::Contrast => low >= 0.0,
            PerturbationKind::Brightness => low >= -1.0 && high <= 1.0,
            PerturbationKind::Rotation => true,
            PerturbationKind::Linf => low == -high && high >= 0.0,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "interval [{}, {}] violates {} bounds",
                low,
                high,
                kind.name()
            )));
        }
        Ok(PerturbationInterval { low, high })
    }

    /// Default budget for each component (CIFAR-scale: l-inf eps = 8/255).
    pub fn default_for(kind: PerturbationKind) -> Self {
        let (low, high) = match kind {
            PerturbationKind::Hue => (-PI, PI),
            PerturbationKind::Saturation => (0.7, 1.3),
            PerturbationKind::Rotation => (-10.0, 10.0),
            PerturbationKind::Brightness => (-0.2, 0.2),
            PerturbationKind::Contrast => (0.7, 1.3),
            PerturbationKind::Linf => (-8.0 / 255.0, 8.0 / 255.0),
        };
        PerturbationInterval { low, high }
    }

    pub fn width(&self) -> f32 {
        self.high - self.low
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.low && v <= self.high
    }

    pub fn clip(&self, v: f32) -> f32 {
        v.clamp(self.low, self.high)
    }
}

/// Current parameter of one component: a scalar for the five semantic kinds,
/// a per-pixel tensor for l-inf.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaValue {
    Scalar(f32),
    PerPixel(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    pub kind: PerturbationKind,
    pub delta: DeltaValue,
}

impl PerturbationState {
    pub fn scalar(kind: PerturbationKind, delta: f32) -> Self {
        PerturbationState {
            kind,
            delta: DeltaValue::Scalar(delta),
        }
    }

    pub fn within(&self, interval: &PerturbationInterval) -> bool {
        match &self.delta {
            DeltaValue::Scalar(v) => interval.contains(*v),
            DeltaValue::PerPixel(t) => t.data().iter().all(|v| interval.contains(*v)),
        }
    }
}

/// HSV planes of an image batch: hue in [0, 2*pi], saturation and value in [0, 1].
#[derive(Debug, Clone)]
pub struct HsvImage(pub Tensor);

fn check_rgb_range(images: &Tensor) -> Result<()> {
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "image values must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn check_nchw3(images: &Tensor) -> Result<()> {
    match images.shape() {
        [_, 3, _, _] => Ok(()),
        s => Err(Error::DimensionMismatch(format!(
            "expected [N,3,H,W] image batch, got {:?}",
            s
        ))),
    }
}

/// Standard RGB -> HSV conversion with hue scaled to [0, 2*pi].
pub fn rgb_to_hsv(images: &Tensor) -> Result<HsvImage> {
    check_nchw3(images)?;
    check_rgb_range(images)?;
    let mut g = Graph::new();
    let x = g.input(images.clone());
    g.rgb_to_hsv(x);
    Ok(HsvImage(g.forward()?))
}

/// Inverse conversion. Errors if the hue channel leaves [0, 2*pi].
pub fn hsv_to_rgb(hsv: &HsvImage) -> Result<Tensor> {
    check_nchw3(&hsv.0)?;
    let shape = hsv.0.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let plane = h * w;
    for b in 0..n {
        let hue = &hsv.0.data()[b * 3 * plane..b * 3 * plane + plane];
        if hue.iter().any(|v| *v < 0.0 || *v > HUE_MAX) {
            return Err(Error::InvalidArgument(
                "hue channel out of [0, 2*pi]".into(),
            ));
        }
    }
    let mut g = Graph::new();
    let x = g.input(hsv.0.clone());
    g.hsv_to_rgb(x);
    g.forward()
}

/// Builds the transform subgraph `kind(image; delta)` and returns its output.
///
/// `delta` is a `[1]` node for the semantic kinds and an image-shaped node
/// for l-inf. The caller is responsible for keeping delta inside its interval.
pub fn apply_in_graph(
    g: &mut Graph,
    kind: PerturbationKind,
    image: NodeId,
    delta: NodeId,
) -> NodeId {
    match kind {
        PerturbationKind::Hue => {
            let hsv = g.rgb_to_hsv(image);
            let h = g.channel_slice(hsv, 0);
            let s = g.channel_slice(hsv, 1);
            let v = g.channel_slice(hsv, 2);
            let shifted = g.broadcast_add(h, delta);
            let clipped = g.clamp(shifted, 0.0, HUE_MAX);
            let stacked = g.channel_stack(&[clipped, s, v]);
            g.hsv_to_rgb(stacked)
        }
        PerturbationKind::Saturation => {
            let hsv = g.rgb_to_hsv(image);
            let h = g.channel_slice(hsv, 0);
            let s = g.channel_slice(hsv, 1);
            let v = g.channel_slice(hsv, 2);
            let scaled = g.broadcast_mul(s, delta);
            let clipped = g.clamp(scaled, 0.0, 1.0);
            let stacked = g.channel_stack(&[h, clipped, v]);
            g.hsv_to_rgb(stacked)
        }
        PerturbationKind::Brightness => {
            let shifted = g.broadcast_add(image, delta);
            g.clamp(shifted, 0.0, 1.0)
        }
        PerturbationKind::Contrast => {
            let scaled = g.broadcast_mul(image, delta);
            g.clamp(scaled, 0.0, 1.0)
        }
        PerturbationKind::Rotation => g.rotate(image, delta),
        PerturbationKind::Linf => {
            let shifted = g.add(image, delta);
            g.clamp(shifted, 0.0, 1.0)
        }
    }
}

fn apply_scalar(images: &Tensor, kind: PerturbationKind, delta: f32) -> Result<Tensor> {
    check_nchw3(images)?;
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let d = g.input(Tensor::scalar(delta));
    apply_in_graph(&mut g, kind, x, d);
    g.forward()
}

/// Shift hue by `delta` radians; `delta` must lie in [-pi, pi].
pub fn apply_hue(images: &Tensor, delta: f32) -> Result<Tensor> {
    if !(-PI..=PI).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "hue delta {} outside [-pi, pi]",
            delta
        )));
    }
    check_rgb_range(images)?;
    apply_scalar(images, PerturbationKind::Hue, delta)
}

/// Scale saturation by a non-negative factor.
pub fn apply_saturation(images: &Tensor, delta: f32) -> Result<Tensor> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "saturation factor {} must be non-negative",
            delta
        )));
    }
    check_rgb_range(images)?;
    apply_scalar(images, PerturbationKind::Saturation, delta)
}

/// Add `delta` in [-1, 1] to every pixel, clipped to [0, 1].
pub fn apply_brightness(images: &Tensor, delta: f32) -> Result<Tensor> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "brightness delta {} outside [-1, 1]",
            delta
        )));
    }
    apply_scalar(images, PerturbationKind::Brightness, delta)
}

/// Multiply every pixel by a non-negative factor, clipped to [0, 1].
pub fn apply_contrast(images: &Tensor, delta: f32) -> Result<Tensor> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "contrast factor {} must be non-negative",
            delta
        )));
    }
    apply_scalar(images, PerturbationKind::Contrast, delta)
}

/// Rotate square images by `theta` degrees.
pub fn apply_rotation(images: &Tensor, theta: f32) -> Result<Tensor> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument("rotation angle must be finite".into()));
    }
    apply_scalar(images, PerturbationKind::Rotation, theta)
}

/// Per-pixel additive perturbation, clipped to [0, 1].
pub fn apply_linf(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if images.shape() != delta.shape() {
        return Err(Error::DimensionMismatch(format!(
            "delta shape {:?} vs image shape {:?}",
            delta.shape(),
            images.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let d = g.input(delta.clone());
    apply_in_graph(&mut g, PerturbationKind::Linf, x, d);
    g.forward()
}

/// Applies a component's current state eagerly. A scalar l-inf state is
/// broadcast as a constant per-pixel shift (identity when zero).
pub fn apply_state(images: &Tensor, state: &PerturbationState) -> Result<Tensor> {
    match (&state.kind, &state.delta) {
        (PerturbationKind::Linf, DeltaValue::PerPixel(d)) => apply_linf(images, d),
        (PerturbationKind::Linf, DeltaValue::Scalar(v)) => {
            apply_linf(images, &Tensor::filled(images.shape(), *v))
        }
        (kind, DeltaValue::Scalar(v)) => match kind {
            PerturbationKind::Hue => apply_hue(images, *v),
            PerturbationKind::Saturation => apply_saturation(images, *v),
            PerturbationKind::Brightness => apply_brightness(images, *v),
            PerturbationKind::Contrast => apply_contrast(images, *v),
            PerturbationKind::Rotation => apply_rotation(images, *v),
            PerturbationKind::Linf => unreachable!(),
        },
        (kind, DeltaValue::PerPixel(_)) => Err(Error::InvalidArgument(format!(
            "{} takes a scalar delta",
            kind.name()
        ))),
    }
}
