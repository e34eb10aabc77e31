//! Two-phase training loop shared by the joint and stage-wise methods.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::step::unrolled_step;
use super::{Phase, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthgen::Case;
use crate::tensorcore::{Sgd, Tensor};
use crate::volume::{slice_stack, Axis};

/// One slice of one training case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSample {
    pub case: usize,
    pub index: usize,
}

/// Slices along `axis` that contain target voxels, and those that do not.
pub fn sample_slices(cases: &[Case], axis: Axis) -> (Vec<SliceSample>, Vec<SliceSample>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (ci, c) in cases.iter().enumerate() {
        let occupied = c.mask.occupied_slices(axis);
        let mut it = occupied.iter().peekable();
        for index in 0..axis.extent(c.mask.extents()) {
            let s = SliceSample { case: ci, index };
            if it.peek() == Some(&&index) {
                it.next();
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    (pos, neg)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: u8,
    pub viewpoint: Axis,
    /// Weighted terms `lambda_t * L_t`.
    pub loss_terms: Vec<f64>,
    pub total: f64,
    /// L2 norm of the full gradient, before any clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    /// Records of one viewpoint and phase, in step order.
    pub fn phase_records(&self, viewpoint: Axis, phase: u8) -> Vec<&StepRecord> {
        self.records
            .iter()
            .filter(|r| r.viewpoint == viewpoint && r.phase == phase)
            .collect()
    }
}

/// Joint models for all three viewpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    /// Indexed like [`Axis::ALL`].
    pub bundles: [ModelBundle; 3],
    pub log: TrainingLog,
}

pub(crate) struct StepResult {
    pub loss_terms: Vec<f64>,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

/// Run `cfg.total_steps()` SGD steps on slices drawn along `axis`.
///
/// `step` evaluates the loss and gradients for one `(stack, label)` pair;
/// `params` exposes the trainable tensors grouped by network, flattened in the
/// same order as the gradients. With `cfg.clip_norm` set, each network's
/// gradient is rescaled on its own to that L2 norm at most.
pub(crate) fn fit<M>(
    cases: &[Case],
    axis: Axis,
    cfg: &TrainConfig,
    seed: u64,
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<Vec<&mut Tensor>>,
    step: impl Fn(&M, &Tensor, &Tensor, Phase) -> Result<StepResult>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(invalid!("training needs at least one case"));
    }
    let (pos, neg) = sample_slices(cases, axis);
    if pos.is_empty() {
        return Err(invalid!(
            "no training slice along {axis} contains the target"
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let (mut sgd, groups) = {
        let p = params(model);
        let groups: Vec<usize> = p.iter().map(Vec::len).collect();
        let refs: Vec<&Tensor> = p.iter().flatten().map(|t| &**t).collect();
        (Sgd::new(cfg.lr1, cfg.momentum, &refs), groups)
    };
    let mut records = Vec::with_capacity(cfg.total_steps());
    for i in 0..cfg.total_steps() {
        let phase = cfg.phase_at(i);
        let take_neg = !neg.is_empty() && rng.next_f64() < cfg.background_slice_rate;
        let s = if take_neg {
            neg[rng.below(neg.len())]
        } else {
            pos[rng.below(pos.len())]
        };
        let case = &cases[s.case];
        let stack = slice_stack(&case.volume, axis, s.index)?.to_tensor();
        let y = case.mask.slice_tensor(axis, s.index)?;

        let mut out = step(model, &stack, &y, phase).map_err(|e| match e {
            Error::NonFinite(reason) => Error::Diverged { step: i, reason },
            other => other,
        })?;
        if !out.total.is_finite() {
            return Err(Error::Diverged {
                step: i,
                reason: format!("loss {}", out.total),
            });
        }
        let grad_norm = sq_norm(&out.grads).sqrt();
        if let Some(max) = cfg.clip_norm {
            clip_groups(&mut out.grads, &groups, max);
        }
        sgd.lr = cfg.lr(phase);
        let mut p: Vec<&mut Tensor> = params(model).into_iter().flatten().collect();
        let rejected = sgd.step(&mut p, &out.grads)?;
        if !rejected.is_empty() {
            return Err(Error::Diverged {
                step: i,
                reason: format!("non-finite gradients on tensors {rejected:?}"),
            });
        }
        if i % 500 == 0 {
            log::info!("{axis} step {i}: loss {:.4}", out.total);
        }
        records.push(StepRecord {
            step: i,
            phase: phase.number(),
            viewpoint: axis,
            loss_terms: out.loss_terms,
            total: out.total,
            grad_norm,
        });
    }
    Ok(records)
}

fn sq_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum()
}

/// Scale each consecutive group of gradients down to L2 norm `max`.
pub(crate) fn clip_groups(grads: &mut [Tensor], groups: &[usize], max: f64) {
    let mut start = 0;
    for &n in groups {
        let group = &mut grads[start..start + n];
        start += n;
        let norm = sq_norm(group).sqrt();
        if norm > max {
            let k = max / norm;
            for g in group {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

/// Train the joint model of one viewpoint.
pub fn train_viewpoint(
    cases: &[Case],
    axis: Axis,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelBundle, Vec<StepRecord>)> {
    let view_seed = derive_seed(seed, axis.dim() as u64);
    let mut bundle = ModelBundle::init(axis, model_cfg, derive_seed(view_seed, 1))?;
    let records = fit(
        cases,
        axis,
        cfg,
        derive_seed(view_seed, 2),
        &mut bundle,
        |b| {
            vec![
                b.coarse.tensors_mut(),
                b.fine.tensors_mut(),
                b.saliency.tensors_mut(),
            ]
        },
        |b, stack, y, phase| {
            let out = unrolled_step(b, stack, y, cfg, phase)?;
            Ok(StepResult {
                loss_terms: out.loss_terms,
                total: out.total,
                grads: out.grads,
            })
        },
    )?;
    Ok((bundle, records))
}

/// Train joint models for all three viewpoints.
pub fn train(
    cases: &[Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let mut log = TrainingLog::default();
    let mut bundles = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let (b, records) = train_viewpoint(cases, axis, model_cfg, cfg, seed)?;
        log.records.extend(records);
        bundles.push(b);
    }
    let bundles: [ModelBundle; 3] = bundles.try_into().expect("three viewpoints");
    Ok(TrainedModel { bundles, log })
}
