//! Recurrent saliency transformation training: crop boxes, the soft Dice
//! loss, iteration weights, the unrolled coarse-to-fine step and the
//! two-phase training loop.

mod check;
pub(crate) mod step;
pub(crate) mod train;

pub use check::{gradcheck_fixture, unrolled_gradcheck, FD_STEP, FIXTURE_SIZE};
pub use step::{unrolled_step, StepOutput, UnrollState};
pub use train::{
    sample_slices, train, train_viewpoint, SliceSample, StepRecord, TrainedModel, TrainingLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensorcore::{Graph, Tensor, Var};

/// Smoothing added to both sides of the soft Dice ratio.
pub const DSC_EPSILON: f64 = 1e-6;

/// Inclusive pixel rectangle on a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl CropBox {
    pub fn whole(rows: usize, cols: usize) -> Self {
        Self {
            min_row: 0,
            min_col: 0,
            max_row: rows - 1,
            max_col: cols - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn is_whole(&self, rows: usize, cols: usize) -> bool {
        *self == Self::whole(rows, cols)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.min_row..=self.max_row).contains(&row) && (self.min_col..=self.max_col).contains(&col)
    }

    /// Grow symmetrically (shifting at the borders) until both sides reach
    /// `min`, or the image size if that is smaller.
    pub fn at_least(self, min: usize, rows: usize, cols: usize) -> Self {
        let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
            let want = min.min(n);
            let have = hi - lo + 1;
            if have >= want {
                return (lo, hi);
            }
            let extra = want - have;
            let lo = lo.saturating_sub(extra.div_ceil(2));
            let hi = (lo + want - 1).min(n - 1);
            (hi + 1 - want, hi)
        };
        let (min_row, max_row) = grow(self.min_row, self.max_row, rows);
        let (min_col, max_col) = grow(self.min_col, self.max_col, cols);
        Self {
            min_row,
            min_col,
            max_row,
            max_col,
        }
    }
}

/// Minimal rectangle covering every pixel of `reference` at or above 0.5,
/// widened by `margin` on each side and clamped to the image. `None` when
/// no pixel is activated.
pub fn activated_box(
    reference: &[f64],
    rows: usize,
    cols: usize,
    margin: usize,
) -> Option<CropBox> {
    assert_eq!(reference.len(), rows * cols, "reference size");
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..rows {
        let row = &reference[r * cols..(r + 1) * cols];
        let mut first = None;
        let mut last = 0;
        for (c, &v) in row.iter().enumerate() {
            if v >= 0.5 {
                first.get_or_insert(c);
                last = c;
            }
        }
        if let Some(f) = first {
            r0 = r0.min(r);
            r1 = r;
            c0 = c0.min(f);
            c1 = c1.max(last);
        }
    }
    (r0 != usize::MAX).then(|| CropBox {
        min_row: r0.saturating_sub(margin),
        min_col: c0.saturating_sub(margin),
        max_row: (r1 + margin).min(rows - 1),
        max_col: (c1 + margin).min(cols - 1),
    })
}

/// Box for `reference` with the whole image as the fallback when it is empty.
pub fn crop_box(reference: &[f64], rows: usize, cols: usize, margin: usize) -> CropBox {
    activated_box(reference, rows, cols, margin).unwrap_or_else(|| CropBox::whole(rows, cols))
}

fn crop_tensor(t: &Tensor, b: CropBox) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if b.max_row >= h || b.max_col >= w {
        return Err(shape_err!("box {b:?} outside {h}x{w}"));
    }
    let mut out = Vec::with_capacity(c * b.height() * b.width());
    for ch in 0..c {
        for r in b.min_row..=b.max_row {
            let start = (ch * h + r) * w;
            out.extend_from_slice(&t.data()[start + b.min_col..=start + b.max_col]);
        }
    }
    Tensor::new(vec![c, b.height(), b.width()], out)
}

/// Crop a `[C,H,W]` image by the box of a `[1,H,W]` reference map.
pub fn crop(image: &Tensor, reference: &Tensor, margin: usize) -> Result<(Tensor, CropBox)> {
    let (_, h, w) = image.chw()?;
    if reference.shape() != [1, h, w] {
        return Err(shape_err!(
            "reference {:?} does not match image {h}x{w}",
            reference.shape()
        ));
    }
    let b = crop_box(reference.data(), h, w, margin);
    Ok((crop_tensor(image, b)?, b))
}

/// Soft Dice loss `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)` recorded on `g`.
pub fn soft_dsc_loss(g: &mut Graph, y: Var, p: Var) -> Result<Var> {
    if g.value(y).shape() != g.value(p).shape() {
        return Err(shape_err!(
            "soft dice operands {:?} and {:?} differ",
            g.value(y).shape(),
            g.value(p).shape()
        ));
    }
    let yp = g.mul(y, p)?;
    let inter = g.sum(yp);
    let num = g.affine(inter, 2.0, DSC_EPSILON);
    let sy = g.sum(y);
    let sp = g.sum(p);
    let den = g.add(sy, sp)?;
    let den = g.affine(den, 1.0, DSC_EPSILON);
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -1.0, 1.0))
}

/// Iteration weights: `lambda_0 = 1/(2T+1)` and `lambda_t = 2/(2T+1)` for `t >= 1`.
pub fn loss_weights(t: usize) -> Result<Vec<f64>> {
    if t < 1 {
        return Err(invalid!("need at least one fine iteration, got T = {t}"));
    }
    let d = (2 * t + 1) as f64;
    Ok(std::iter::once(1.0 / d)
        .chain(std::iter::repeat_n(2.0 / d, t))
        .collect())
}

/// Source of the crop box for fine iterations during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    GroundTruth,
    Predicted,
}

/// Training phase: 1 crops by the ground truth, 2 by the previous prediction
/// (under the default reference modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

pub const MAX_TRAIN_ITERATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Unrolled fine iterations `T`.
    pub iterations: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub momentum: f64,
    pub phase1_reference: ReferenceMode,
    pub phase2_reference: ReferenceMode,
    /// Crop margin `K` in pixels.
    pub margin: usize,
    /// Probability of drawing a slice without any target pixel.
    pub background_slice_rate: f64,
    /// Per-network cap on the gradient's L2 norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            phase1_steps: 3000,
            phase2_steps: 1500,
            lr1: 0.001,
            lr2: 0.00025,
            momentum: 0.9,
            phase1_reference: ReferenceMode::GroundTruth,
            phase2_reference: ReferenceMode::Predicted,
            margin: 20,
            background_slice_rate: 0.0,
            clip_norm: Some(2.0),
        }
    }
}

impl TrainConfig {
    /// Split a step budget so phase 1 gets two thirds (rounded up).
    pub fn with_budget(self, total_steps: usize) -> Self {
        let phase1_steps = (2 * total_steps).div_ceil(3);
        Self {
            phase1_steps,
            phase2_steps: total_steps - phase1_steps,
            ..self
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_TRAIN_ITERATIONS).contains(&self.iterations) {
            return Err(invalid!(
                "training iterations T = {} must lie in 1..={MAX_TRAIN_ITERATIONS}",
                self.iterations
            ));
        }
        if !(self.lr1 > 0.0 && self.lr2 > 0.0 && self.lr1.is_finite()) {
            return Err(invalid!("learning rates must be positive"));
        }
        if self.lr2 >= self.lr1 {
            return Err(invalid!(
                "phase-2 learning rate {} must be below phase-1 rate {}",
                self.lr2,
                self.lr1
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.background_slice_rate) {
            return Err(invalid!(
                "background slice rate {} must lie in [0, 1]",
                self.background_slice_rate
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid!("clip norm {c} must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.phase1_steps {
            Phase::One
        } else {
            Phase::Two
        }
    }

    pub fn reference(&self, phase: Phase) -> ReferenceMode {
        match phase {
            Phase::One => self.phase1_reference,
            Phase::Two => self.phase2_reference,
        }
    }

    pub fn lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::One => self.lr1,
            Phase::Two => self.lr2,
        }
    }
}

#[cfg(test)]
mod tests;
