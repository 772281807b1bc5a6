use indexmap::IndexMap;

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from gradients keyed by parameter name. Parameters without
    /// a gradient keep their moments and values.
    pub fn step(&mut self, params: &mut DecoderParams, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, g) in grads {
            let n = params.get(name)?.numel();
            if g.len() != n {
                return Err(Error::dim("adam", format!("gradient for {name} has {} values", g.len())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            }
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&*m, &*v);
            params.update(name, |p| {
                for i in 0..n {
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }

    /// Moments as named tensors (`adam.m:<name>`, `adam.v:<name>`) shaped like
    /// their parameters.
    pub fn export(&self, params: &DecoderParams) -> Result<IndexMap<String, Tensor>> {
        let mut out = IndexMap::new();
        for (prefix, map) in [("adam.m:", &self.m), ("adam.v:", &self.v)] {
            for (name, data) in map {
                let shape = params.get(name)?.shape().to_vec();
                out.insert(format!("{prefix}{name}"), Tensor::new(shape, data.clone())?);
            }
        }
        Ok(out)
    }

    pub fn import(lr: f64, step: u64, tensors: &IndexMap<String, Tensor>) -> Self {
        let mut a = Self::new(lr);
        a.step = step;
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("adam.m:") {
                a.m.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = key.strip_prefix("adam.v:") {
                a.v.insert(name.to_string(), t.data().to_vec());
            }
        }
        a
    }
}
