//! The stage-wise coarse-to-fine baseline: independently trained coarse and
//! fine networks, bounding-box hand-off only, plus coarse/fine mix-and-match.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inference::{run_pipeline, InferenceConfig, IterationTrace, ViewModel};
use crate::model::weights::{conv_count, BundleKind, WeightFile};
use crate::model::{BackboneParams, ModelBundle, ModelConfig};
use crate::rng::derive_seed;
use crate::rstn::step::{collect_grads, record_unroll, Nets};
use crate::rstn::train::{fit, StepResult};
use crate::rstn::{ReferenceMode, StepRecord, TrainConfig, TrainingLog};
use crate::synthgen::Case;
use crate::tensorcore::{Graph, Tensor};
use crate::volume::{dsc, Axis, LabelMask, Volume};

/// Coarse and fine networks of one viewpoint, trained without coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct StagewiseBundle {
    pub viewpoint: Axis,
    pub coarse: BackboneParams,
    pub fine: BackboneParams,
}

impl StagewiseBundle {
    pub fn view(&self) -> ViewModel<'_> {
        ViewModel {
            viewpoint: self.viewpoint,
            coarse: &self.coarse,
            fine: &self.fine,
            saliency: None,
        }
    }

    /// The coarse and fine networks of a joint bundle, without its saliency transform.
    pub fn from_joint(b: &ModelBundle) -> Self {
        Self {
            viewpoint: b.viewpoint,
            coarse: b.coarse.clone(),
            fine: b.fine.clone(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.coarse.tensors_mut();
        out.extend(self.fine.tensors_mut());
        out
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut wf = WeightFile {
            kind: BundleKind::Stagewise,
            viewpoint: self.viewpoint,
            architecture: self.coarse.architecture().clone(),
            saliency: None,
            tensors: Vec::new(),
        };
        wf.push_convs("coarse", self.coarse.convs());
        wf.push_convs("fine", self.fine.convs());
        wf
    }

    pub fn from_weight_file(mut wf: WeightFile) -> Result<Self> {
        if wf.kind != BundleKind::Stagewise {
            return Err(Error::Format("expected a stagewise bundle".into()));
        }
        let n = conv_count(&wf.architecture);
        let coarse = wf.take_convs("coarse", n)?;
        let fine = wf.take_convs("fine", n)?;
        wf.ensure_consumed()?;
        Ok(Self {
            viewpoint: wf.viewpoint,
            coarse: BackboneParams::from_parts(wf.architecture.clone(), coarse)?,
            fine: BackboneParams::from_parts(wf.architecture, fine)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weight_file(WeightFile::load(path)?)
    }
}

/// Train the stage-wise networks of one viewpoint.
///
/// Initialization, slice order, loss weights, optimizer and step budget match
/// [`crate::rstn::train_viewpoint`] for the same seed; the fine network always
/// sees ground-truth crops and no saliency weighting.
pub fn stagewise_train_viewpoint(
    cases: &[Case],
    axis: Axis,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StagewiseBundle, Vec<StepRecord>)> {
    let view_seed = derive_seed(seed, axis.dim() as u64);
    let init = ModelBundle::init(axis, model_cfg, derive_seed(view_seed, 1))?;
    let mut bundle = StagewiseBundle::from_joint(&init);
    let records = fit(
        cases,
        axis,
        cfg,
        derive_seed(view_seed, 2),
        &mut bundle,
        |b| vec![b.coarse.tensors_mut(), b.fine.tensors_mut()],
        |b, stack, y, _phase| {
            let mut g = Graph::new();
            let nets = Nets::register(&mut g, &b.coarse, &b.fine, None);
            let rec = record_unroll(
                &mut g,
                &nets,
                stack,
                y,
                cfg.iterations,
                cfg.margin,
                ReferenceMode::GroundTruth,
            )?;
            let total = g.value(rec.total).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("stage-wise loss is {total}")));
            }
            Ok(StepResult {
                grads: collect_grads(&g, rec.total, &nets.param_vars())?,
                loss_terms: rec.state.loss_terms,
                total,
            })
        },
    )?;
    Ok((bundle, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagewiseModel {
    /// Indexed like [`Axis::ALL`].
    pub bundles: [StagewiseBundle; 3],
    pub log: TrainingLog,
}

/// Train stage-wise networks for all three viewpoints.
pub fn stagewise_train(
    cases: &[Case],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StagewiseModel> {
    let mut log = TrainingLog::default();
    let mut bundles = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let (b, records) = stagewise_train_viewpoint(cases, axis, model_cfg, cfg, seed)?;
        log.records.extend(records);
        bundles.push(b);
    }
    Ok(StagewiseModel {
        bundles: bundles.try_into().expect("three viewpoints"),
        log,
    })
}

/// Iterative testing with plain bounding-box crops.
pub fn stagewise_infer(
    bundles: &[StagewiseBundle; 3],
    x: &Volume,
    cfg: &InferenceConfig,
) -> Result<(LabelMask, IterationTrace)> {
    let views = [bundles[0].view(), bundles[1].view(), bundles[2].view()];
    run_pipeline(&views, x, cfg, None)
}

/// Origin of a network in a mix-and-match evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Stagewise,
    Joint,
}

/// Models of one cross-validation fold, tagged with the cases they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels<B> {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub bundles: [B; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub coarse: Source,
    pub fine: Source,
    pub case_ids: Vec<String>,
    pub dsc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub entries: Vec<MixEntry>,
}

impl MixReport {
    pub fn entry(&self, coarse: Source, fine: Source) -> Option<&MixEntry> {
        self.entries
            .iter()
            .find(|e| e.coarse == coarse && e.fine == fine)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-view networks for a coarse/fine combination. The saliency transform
/// travels with a jointly trained fine network.
pub fn mixed_views<'a>(
    joint: &'a [ModelBundle; 3],
    stagewise: &'a [StagewiseBundle; 3],
    coarse: Source,
    fine: Source,
) -> Result<[ViewModel<'a>; 3]> {
    let mut out = Vec::with_capacity(3);
    for (j, s) in joint.iter().zip(stagewise) {
        if j.viewpoint != s.viewpoint {
            return Err(invalid!(
                "joint and stage-wise bundles list viewpoints in different orders"
            ));
        }
        out.push(ViewModel {
            viewpoint: j.viewpoint,
            coarse: match coarse {
                Source::Joint => &j.coarse,
                Source::Stagewise => &s.coarse,
            },
            fine: match fine {
                Source::Joint => &j.fine,
                Source::Stagewise => &s.fine,
            },
            saliency: (fine == Source::Joint).then_some(&j.saliency),
        });
    }
    out.try_into()
        .map_err(|_| invalid!("expected three viewpoints"))
}

/// Evaluate all four coarse/fine combinations on each fold's test cases.
pub fn mix_and_match(
    joint: &[FoldModels<ModelBundle>],
    stagewise: &[FoldModels<StagewiseBundle>],
    cases: &[Case],
    cfg: &InferenceConfig,
) -> Result<MixReport> {
    if joint.len() != stagewise.len() {
        return Err(invalid!(
            "{} joint folds but {} stage-wise folds",
            joint.len(),
            stagewise.len()
        ));
    }
    for (j, s) in joint.iter().zip(stagewise) {
        if j.fold != s.fold || j.train_ids != s.train_ids || j.test_ids != s.test_ids {
            return Err(invalid!(
                "fold {} was trained on different cases by the two methods",
                j.fold
            ));
        }
    }
    let combos = [
        (Source::Stagewise, Source::Stagewise),
        (Source::Stagewise, Source::Joint),
        (Source::Joint, Source::Stagewise),
        (Source::Joint, Source::Joint),
    ];
    let mut entries = Vec::with_capacity(4);
    for (coarse, fine) in combos {
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for (j, s) in joint.iter().zip(stagewise) {
            let views = mixed_views(&j.bundles, &s.bundles, coarse, fine)?;
            for id in &j.test_ids {
                let case = cases
                    .iter()
                    .find(|c| &c.id == id)
                    .ok_or_else(|| invalid!("test case {id} is not in the corpus"))?;
                let (z, _) = run_pipeline(&views, &case.volume, cfg, None)?;
                ids.push(id.clone());
                scores.push(dsc(&z, &case.mask)?);
            }
        }
        let (mean, std) = mean_std(&scores);
        entries.push(MixEntry {
            coarse,
            fine,
            case_ids: ids,
            dsc: scores,
            mean,
            std,
        });
    }
    Ok(MixReport { entries })
}

#[cfg(test)]
mod tests;
