//! One unrolled forward/backward pass over a slice stack.

use super::{
    crop_box, crop_tensor, loss_weights, soft_dsc_loss, CropBox, Phase, ReferenceMode, TrainConfig,
};
use crate::error::{shape_err, Error, Result};
use crate::model::{BackboneParams, ModelBundle, ParamVars, SaliencyParams};
use crate::tensorcore::{Graph, Tensor, Var};

/// Intermediate values of one unrolled pass, indexed by iteration `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollState {
    /// Network inputs: the full stack at `t = 0`, the cropped weighted stack after.
    pub inputs: Vec<Tensor>,
    /// Probability maps at full slice size (zero outside the crop for `t >= 1`).
    pub probs: Vec<Tensor>,
    /// `probs` binarized at 0.5.
    pub masks: Vec<Tensor>,
    /// Crop box per iteration; `None` at `t = 0`.
    pub boxes: Vec<Option<CropBox>>,
    /// Weighted loss terms `lambda_t * L_t`.
    pub loss_terms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss_terms: Vec<f64>,
    pub total: f64,
    /// One gradient per trainable tensor, in the owner's `tensors()` order.
    pub grads: Vec<Tensor>,
    pub state: UnrollState,
}

/// Networks registered on a graph for one pass.
pub(crate) struct Nets<'a> {
    pub coarse: (&'a BackboneParams, ParamVars),
    pub fine: (&'a BackboneParams, ParamVars),
    pub saliency: Option<(&'a SaliencyParams, ParamVars)>,
}

impl<'a> Nets<'a> {
    pub fn register(
        g: &mut Graph,
        coarse: &'a BackboneParams,
        fine: &'a BackboneParams,
        saliency: Option<&'a SaliencyParams>,
    ) -> Self {
        Self {
            coarse: (coarse, coarse.register(g, true)),
            fine: (fine, fine.register(g, true)),
            saliency: saliency.map(|s| (s, s.register(g, true))),
        }
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for pv in [
            Some(&self.coarse.1),
            Some(&self.fine.1),
            self.saliency.as_ref().map(|s| &s.1),
        ]
        .into_iter()
        .flatten()
        {
            out.extend(pv.0.iter().flat_map(|&(k, b)| [k, b]));
        }
        out
    }
}

pub(crate) struct Recorded {
    pub total: Var,
    pub terms: Vec<Var>,
    pub state: UnrollState,
}

fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Record the weighted loss of `iterations` unrolled fine passes on `g`.
///
/// Without saliency parameters the fine input is the plain crop of the stack,
/// which is the stage-wise pipeline.
pub(crate) fn record_unroll(
    g: &mut Graph,
    nets: &Nets,
    stack: &Tensor,
    y: &Tensor,
    iterations: usize,
    margin: usize,
    reference: ReferenceMode,
) -> Result<Recorded> {
    let (c, h, w) = stack.chw()?;
    if c != 3 || y.shape() != [1, h, w] {
        return Err(shape_err!(
            "expected a [3,H,W] stack and [1,H,W] label, got {:?} and {:?}",
            stack.shape(),
            y.shape()
        ));
    }
    let lambda = loss_weights(iterations)?;
    let min_extent = nets.fine.0.architecture().min_extent;

    let x = g.constant(stack.clone());
    let y_full = g.constant(y.clone());
    let p0 = nets.coarse.0.apply(g, &nets.coarse.1, x)?;
    let l0 = soft_dsc_loss(g, y_full, p0)?;

    let mut state = UnrollState {
        inputs: vec![stack.clone()],
        probs: vec![g.value(p0).clone()],
        masks: vec![binarize(g.value(p0))],
        boxes: vec![None],
        loss_terms: Vec::with_capacity(iterations + 1),
    };
    let mut terms = vec![g.affine(l0, lambda[0], 0.0)];
    let mut prev = p0;
    for lambda_t in &lambda[1..] {
        let weighted = match &nets.saliency {
            Some((s, vars)) => {
                let wmap = s.apply(g, vars, prev)?;
                g.mul(x, wmap)?
            }
            None => x,
        };
        let reference_map = match reference {
            ReferenceMode::GroundTruth => y.data(),
            ReferenceMode::Predicted => g.value(prev).data(),
        };
        let b = crop_box(reference_map, h, w, margin).at_least(min_extent, h, w);
        let input = g.crop(weighted, b.min_row, b.min_col, b.height(), b.width())?;
        let p = nets.fine.0.apply(g, &nets.fine.1, input)?;
        let y_crop = g.constant(crop_tensor(y, b)?);
        let l = soft_dsc_loss(g, y_crop, p)?;
        terms.push(g.affine(l, *lambda_t, 0.0));

        let full = g.pad(p, b.min_row, b.min_col, h, w)?;
        state.inputs.push(g.value(input).clone());
        state.probs.push(g.value(full).clone());
        state.masks.push(binarize(g.value(full)));
        state.boxes.push(Some(b));
        prev = full;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    state.loss_terms = terms.iter().map(|&t| g.value(t).data()[0]).collect();
    Ok(Recorded {
        total,
        terms,
        state,
    })
}

/// Gradients of the loss with respect to `vars`, zeros where it does not depend on them.
pub(crate) fn collect_grads(g: &Graph, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| grads.get_or_zeros(v, g.value(v).shape()))
        .collect())
}

/// Unrolled joint pass for one slice stack, with gradients for
/// the coarse, fine and saliency parameters together.
pub fn unrolled_step(
    bundle: &ModelBundle,
    stack: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let nets = Nets::register(&mut g, &bundle.coarse, &bundle.fine, Some(&bundle.saliency));
    let rec = record_unroll(
        &mut g,
        &nets,
        stack,
        y,
        cfg.iterations,
        cfg.margin,
        cfg.reference(phase),
    )?;
    let total = g.value(rec.total).data()[0];
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("unrolled loss is {total}")));
    }
    let grads = collect_grads(&g, rec.total, &nets.param_vars())?;
    debug_assert_eq!(rec.terms.len(), cfg.iterations + 1);
    Ok(StepOutput {
        loss_terms: rec.state.loss_terms.clone(),
        total,
        grads,
        state: rec.state,
    })
}
