use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// SGD with classical momentum: `v <- momentum * v - lr * g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, params: &[&Tensor]) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0,1)");
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. Tensors whose gradient is not finite are left
    /// untouched (velocity included); their indices are returned.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<Vec<usize>> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(shape_err!(
                    "tensor {i}: param {:?}, grad {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ));
            }
        }
        let mut rejected = Vec::new();
        for (i, ((p, g), v)) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .enumerate()
        {
            if !g.all_finite() {
                log::warn!("sgd: non-finite gradient on tensor {i}, update skipped");
                rejected.push(i);
                continue;
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv - self.lr * gv;
                *pv += *vv;
            }
        }
        Ok(rejected)
    }
}
