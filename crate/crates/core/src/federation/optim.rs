use super::config::AdamConfig;
use crate::segnet::{EntryKind, ParamSet};

/// Adam over the trainable entries of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update with learning rate `lr`. `grads` is aligned with the
    /// entries of `params`; buffers and `None` gradients are skipped.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, e)| vec![0.0; e.tensor.len()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let entry = params.get_index_mut(i).expect("aligned gradients");
            if entry.kind != EntryKind::Param {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
