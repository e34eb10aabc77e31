//! Finite-difference check of the full unrolled loss on a small fixture.

use super::step::{record_unroll, Nets};
use super::ReferenceMode;
use crate::error::Result;
use crate::model::{Architecture, ModelBundle, ModelConfig, ParamVars, SaliencyConfig};
use crate::rng::SplitMix64;
use crate::tensorcore::{check_gradients, GradCheckReport, Tensor, Var};
use crate::volume::Axis;

/// Side of the square fixture slice.
pub const FIXTURE_SIZE: usize = 9;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A tiny-backbone bundle with a randomized (non-identity) saliency
/// transform, a random slice stack and a rectangular label.
pub fn gradcheck_fixture(seed: u64) -> Result<(ModelBundle, Tensor, Tensor)> {
    let cfg = ModelConfig {
        architecture: Architecture::tiny(),
        saliency: SaliencyConfig {
            kernel: 3,
            layers: 2,
        },
    };
    let mut bundle = ModelBundle::init(Axis::Axial, &cfg, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    for t in bundle.saliency.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    for t in bundle
        .coarse
        .tensors_mut()
        .into_iter()
        .chain(bundle.fine.tensors_mut())
    {
        for v in t.data_mut() {
            *v += rng.uniform(-0.05, 0.05);
        }
    }
    let n = FIXTURE_SIZE;
    let stack = Tensor::from_fn(&[3, n, n], |_| rng.next_f64());
    let y = Tensor::from_fn(&[1, n, n], |i| {
        let (r, c) = (i / n, i % n);
        f64::from((3..6).contains(&r) && (2..6).contains(&c))
    });
    Ok((bundle, stack, y))
}

/// Check every parameter gradient of the `iterations`-step unrolled loss
/// (coarse, fine and saliency together) with crop margin 1.
pub fn unrolled_gradcheck(
    iterations: usize,
    reference: ReferenceMode,
    seed: u64,
) -> Result<GradCheckReport> {
    let (bundle, stack, y) = gradcheck_fixture(seed)?;
    let params: Vec<Tensor> = bundle.tensors().into_iter().cloned().collect();
    let nc = bundle.coarse.tensors().len();
    let nf = bundle.fine.tensors().len();
    let pairs = |v: &[Var]| ParamVars(v.chunks(2).map(|c| (c[0], c[1])).collect());
    check_gradients(
        |g, v| {
            let nets = Nets {
                coarse: (&bundle.coarse, pairs(&v[..nc])),
                fine: (&bundle.fine, pairs(&v[nc..nc + nf])),
                saliency: Some((&bundle.saliency, pairs(&v[nc + nf..]))),
            };
            Ok(record_unroll(g, &nets, &stack, &y, iterations, 1, reference)?.total)
        },
        &params,
        FD_STEP,
        None,
    )
}
