use std::collections::BTreeMap;

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with decoupled weight decay. Holds first and second moments for
/// the student parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(params: &DetectorParams, weight_decay: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> =
            params.iter().map(|(name, t)| (name.clone(), Tensor::zeros(t.shape()))).collect();
        AdamW { weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    /// One update. Gradients are clipped to global norm `clip` first.
    /// Returns the pre-clip norm.
    pub fn step(
        &mut self,
        params: &mut DetectorParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        clip: f64,
    ) -> Result<f64> {
        for name in grads.keys() {
            if !self.m.contains_key(name) {
                return Err(Error::Contract(format!("gradient for {name}, which the optimizer does not own")));
            }
        }
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / (norm + 1e-6) } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("same keys as m");
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gv = gv as f64 * scale;
                let m_new = BETA1 * *mv as f64 + (1.0 - BETA1) * gv;
                let v_new = BETA2 * *vv as f64 + (1.0 - BETA2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let mut x = *pv as f64;
                x -= lr * self.weight_decay * x;
                x -= lr * (m_new / bc1) / ((v_new / bc2).sqrt() + EPSILON);
                *pv = x as f32;
            }
        }
        Ok(norm)
    }
}
