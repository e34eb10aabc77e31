//! Iterative coarse-to-fine testing: per-view refinement, three-view fusion
//! and termination on the Dice overlap between consecutive predictions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{BackboneParams, ModelBundle, SaliencyParams};
use crate::rstn::{activated_box, CropBox};
use crate::tensorcore::Tensor;
use crate::volume::{
    dsc, fuse_and_binarize, reassemble, slice_stack, Axis, LabelMask, ProbVolume, Volume,
};

/// What a fine iteration does on a slice whose reference map has no
/// activated pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyReference {
    /// Run the fine network on the whole slice.
    WholeImage,
    /// Predict background for the slice. When the whole reference volume is
    /// empty every slice falls back to [`EmptyReference::WholeImage`].
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Maximum number of fine iterations `T`.
    pub max_iterations: usize,
    /// Stop once the Dice overlap of consecutive masks reaches this value.
    pub threshold: f64,
    /// Crop margin `K` in pixels.
    pub margin: usize,
    /// Crop by the ground-truth box of each slice instead of the prediction.
    pub oracle_boxes: bool,
    pub empty_reference: EmptyReference,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            threshold: 0.99,
            margin: 20,
            oracle_boxes: false,
            empty_reference: EmptyReference::Zero,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(invalid!("max iterations must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid!("threshold {} must lie in (0, 1]", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Threshold,
    MaxIterations,
}

/// Per-view crop boxes of one fine iteration, indexed by slice. `None`
/// marks a slice predicted as background without running the fine network.
pub type ViewBoxes = Vec<Option<CropBox>>;

/// Record of one testing run.
///
/// Index `t` of `masks`, `probs` and `voxel_counts` is iteration `t`, with
/// `t = 0` the coarse stage. `iterations` counts fine iterations only, so
/// `d[t - 1]` is the overlap between `masks[t - 1]` and `masks[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub oracle: bool,
    pub iterations: usize,
    pub d: Vec<f64>,
    pub termination: Termination,
    pub voxel_counts: Vec<usize>,
    /// Fine iterations that ran on whole slices because the reference volume was empty.
    pub fallback_iterations: Vec<usize>,
    /// `boxes[t - 1][view]`, views ordered as given to the pipeline.
    pub boxes: Vec<[ViewBoxes; 3]>,
    pub masks: Vec<LabelMask>,
    pub probs: Vec<ProbVolume>,
}

/// On-disk summary of an [`IterationTrace`].
///
/// `iterations` counts fine iterations (`t >= 1`); `voxel_counts[0]` is the coarse stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub oracle: bool,
    pub iterations: usize,
    pub d_sequence: Vec<f64>,
    pub termination: Termination,
    pub voxel_counts: Vec<usize>,
    pub fallback_iterations: Vec<usize>,
}

impl IterationTrace {
    pub fn final_mask(&self) -> &LabelMask {
        self.masks.last().expect("trace holds the coarse mask")
    }

    pub fn coarse_mask(&self) -> &LabelMask {
        &self.masks[0]
    }

    pub fn summary(&self) -> TraceFile {
        TraceFile {
            oracle: self.oracle,
            iterations: self.iterations,
            d_sequence: self.d.clone(),
            termination: self.termination,
            voxel_counts: self.voxel_counts.clone(),
            fallback_iterations: self.fallback_iterations.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(&self.summary())?)
            .map_err(|e| Error::io(path, e))
    }
}

/// The networks one viewpoint contributes to testing. Without a saliency
/// transform the fine input is the plain crop.
#[derive(Debug, Clone, Copy)]
pub struct ViewModel<'a> {
    pub viewpoint: Axis,
    pub coarse: &'a BackboneParams,
    pub fine: &'a BackboneParams,
    pub saliency: Option<&'a SaliencyParams>,
}

impl ModelBundle {
    pub fn view(&self) -> ViewModel<'_> {
        ViewModel {
            viewpoint: self.viewpoint,
            coarse: &self.coarse,
            fine: &self.fine,
            saliency: Some(&self.saliency),
        }
    }
}

fn check_views(views: &[ViewModel; 3]) -> Result<()> {
    for axis in Axis::ALL {
        if views.iter().filter(|v| v.viewpoint == axis).count() != 1 {
            return Err(invalid!(
                "need exactly one model per viewpoint, {axis} is missing or repeated"
            ));
        }
    }
    Ok(())
}

fn to_prob(t: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    t.reshape(vec![rows, cols])
}

/// Coarse stage of one view: every full slice through the coarse network.
fn coarse_view(view: &ViewModel, x: &Volume) -> Result<ProbVolume> {
    let axis = view.viewpoint;
    let (rows, cols) = axis.slice_dims(x.extents());
    let maps = (0..axis.extent(x.extents()))
        .map(|i| {
            to_prob(
                view.coarse.forward(&slice_stack(x, axis, i)?.to_tensor())?,
                rows,
                cols,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    reassemble(&maps, axis, x.extents())
}

/// Iteration 0: coarse networks on full slices, fused.
pub fn coarse_stage(views: &[ViewModel; 3], x: &Volume) -> Result<(ProbVolume, LabelMask)> {
    check_views(views)?;
    let p: Vec<ProbVolume> = views
        .iter()
        .map(|v| coarse_view(v, x))
        .collect::<Result<_>>()?;
    fuse_and_binarize(&p[0], &p[1], &p[2])
}

/// Box source for a fine iteration.
#[derive(Debug, Clone, Copy)]
pub enum BoxSource<'a> {
    /// Boxes from the previous fused probability map.
    Previous,
    /// Boxes from the ground truth of each slice.
    Oracle(&'a LabelMask),
}

fn fine_view(
    view: &ViewModel,
    x: &Volume,
    prev: &ProbVolume,
    source: BoxSource,
    cfg: &InferenceConfig,
    whole_fallback: bool,
) -> Result<(ProbVolume, ViewBoxes)> {
    let axis = view.viewpoint;
    let e = x.extents();
    let (rows, cols) = axis.slice_dims(e);
    let min_extent = view.fine.architecture().min_extent;
    let mut maps = Vec::with_capacity(axis.extent(e));
    let mut boxes = Vec::with_capacity(axis.extent(e));
    for i in 0..axis.extent(e) {
        let prev_slice = prev.slice(axis, i)?;
        let found = match source {
            BoxSource::Previous => activated_box(&prev_slice, rows, cols, cfg.margin),
            BoxSource::Oracle(y) => {
                let r: Vec<f64> = y.slice(axis, i)?.into_iter().map(f64::from).collect();
                activated_box(&r, rows, cols, cfg.margin)
            }
        };
        let b = match found {
            Some(b) => b.at_least(min_extent, rows, cols),
            None if whole_fallback || cfg.empty_reference == EmptyReference::WholeImage => {
                CropBox::whole(rows, cols)
            }
            None => {
                maps.push(Tensor::zeros(&[rows, cols]));
                boxes.push(None);
                continue;
            }
        };
        let stack = slice_stack(x, axis, i)?.to_tensor();
        let input = match view.saliency {
            Some(s) => {
                let w = s.forward(&Tensor::new(vec![1, rows, cols], prev_slice)?)?;
                let data = stack
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .collect();
                Tensor::new(vec![3, rows, cols], data)?
            }
            None => stack,
        };
        let cropped = crop_chw(&input, b)?;
        let p = view.fine.forward(&cropped)?;
        let mut full = vec![0.0; rows * cols];
        for r in 0..b.height() {
            let dst = (b.min_row + r) * cols + b.min_col;
            full[dst..dst + b.width()]
                .copy_from_slice(&p.data()[r * b.width()..(r + 1) * b.width()]);
        }
        maps.push(Tensor::new(vec![rows, cols], full)?);
        boxes.push(Some(b));
    }
    Ok((reassemble(&maps, axis, e)?, boxes))
}

fn crop_chw(t: &Tensor, b: CropBox) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(c * b.height() * b.width());
    for ch in 0..c {
        for r in b.min_row..=b.max_row {
            let start = (ch * h + r) * w;
            out.extend_from_slice(&t.data()[start + b.min_col..=start + b.max_col]);
        }
    }
    Tensor::new(vec![c, b.height(), b.width()], out)
}

/// Output of one fine iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub prob: ProbVolume,
    pub mask: LabelMask,
    pub boxes: [ViewBoxes; 3],
    /// The reference was empty everywhere, so whole slices were used.
    pub fallback: bool,
}

/// One fine iteration from the previous fused probability map `prev`.
///
/// Each view weights its slices by the saliency of `prev` and crops by the
/// box source; outside the box the view predicts 0. The three views are then
/// fused and binarized.
pub fn refine(
    views: &[ViewModel; 3],
    x: &Volume,
    prev: &ProbVolume,
    source: BoxSource,
    cfg: &InferenceConfig,
) -> Result<Refinement> {
    check_views(views)?;
    if prev.extents() != x.extents() {
        return Err(invalid!("reference map extents differ from the volume"));
    }
    let fallback = match source {
        BoxSource::Previous => prev.data().iter().all(|&v| v < 0.5),
        BoxSource::Oracle(y) => y.is_empty(),
    };
    let mut probs = Vec::with_capacity(3);
    let mut boxes = Vec::with_capacity(3);
    for v in views {
        let (p, b) = fine_view(v, x, prev, source, cfg, fallback)?;
        probs.push(p);
        boxes.push(b);
    }
    let (prob, mask) = fuse_and_binarize(&probs[0], &probs[1], &probs[2])?;
    Ok(Refinement {
        prob,
        mask,
        boxes: boxes.try_into().expect("three views"),
        fallback,
    })
}

/// The full testing loop for any set of per-view networks.
pub fn run_pipeline(
    views: &[ViewModel; 3],
    x: &Volume,
    cfg: &InferenceConfig,
    oracle: Option<&LabelMask>,
) -> Result<(LabelMask, IterationTrace)> {
    cfg.validate()?;
    check_views(views)?;
    if let Some(y) = oracle {
        if y.extents() != x.extents() {
            return Err(invalid!("ground truth extents differ from the volume"));
        }
    }
    let source = oracle.map_or(BoxSource::Previous, BoxSource::Oracle);
    let (p0, z0) = coarse_stage(views, x)?;
    let mut trace = IterationTrace {
        oracle: oracle.is_some(),
        iterations: 0,
        d: Vec::new(),
        termination: Termination::MaxIterations,
        voxel_counts: vec![z0.count()],
        fallback_iterations: Vec::new(),
        boxes: Vec::new(),
        masks: vec![z0],
        probs: vec![p0],
    };
    for t in 1..=cfg.max_iterations {
        let r = refine(views, x, trace.probs.last().expect("nonempty"), source, cfg)?;
        let d = inter_iteration_dsc(trace.final_mask(), &r.mask)?;
        if r.fallback {
            trace.fallback_iterations.push(t);
        }
        trace.iterations = t;
        trace.d.push(d);
        trace.voxel_counts.push(r.mask.count());
        trace.boxes.push(r.boxes);
        trace.masks.push(r.mask);
        trace.probs.push(r.prob);
        if d >= cfg.threshold {
            trace.termination = Termination::Threshold;
            break;
        }
    }
    Ok((trace.final_mask().clone(), trace))
}

/// Dice overlap between consecutive predictions.
pub fn inter_iteration_dsc(z_prev: &LabelMask, z_cur: &LabelMask) -> Result<f64> {
    dsc(z_prev, z_cur)
}

fn bundle_views(bundles: &[ModelBundle; 3]) -> [ViewModel<'_>; 3] {
    [bundles[0].view(), bundles[1].view(), bundles[2].view()]
}

/// Test a jointly trained model on one volume.
pub fn segment_volume(
    bundles: &[ModelBundle; 3],
    x: &Volume,
    cfg: &InferenceConfig,
) -> Result<(LabelMask, IterationTrace)> {
    run_pipeline(&bundle_views(bundles), x, cfg, None)
}

/// As [`segment_volume`], cropping every iteration by the ground-truth box of each slice.
pub fn segment_with_oracle_boxes(
    bundles: &[ModelBundle; 3],
    x: &Volume,
    y: &LabelMask,
    cfg: &InferenceConfig,
) -> Result<(LabelMask, IterationTrace)> {
    run_pipeline(&bundle_views(bundles), x, cfg, Some(y))
}

#[cfg(test)]
mod tests;
