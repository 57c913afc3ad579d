use serde::{Deserialize, Serialize};

use crate::config::{AdamConfig, ScheduleConfig};
use crate::model::{Model, ModelError};
use crate::real::Real;

/// Adam with the inverse square root schedule. Moments are kept in f32
/// whatever the model precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub schedule: ScheduleConfig,
    /// Optional global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, schedule: ScheduleConfig) -> Self {
        Adam {
            cfg: AdamConfig::default(),
            schedule,
            clip_norm: None,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.t.max(1))
    }

    /// Applies one update; a non-finite gradient rejects the step and leaves
    /// model and moments untouched. Returns the learning rate used.
    pub fn step<R: Real>(&mut self, model: &mut Model<R>, grads: &[R]) -> Result<f64, ModelError> {
        assert_eq!(grads.len(), model.params.len());
        let bad = model.non_finite_blocks(grads);
        if !bad.is_empty() {
            return Err(ModelError::NonFinite(bad.join(", ")));
        }
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let norm = grads.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        self.t += 1;
        let lr = self.schedule.lr(self.t);
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for i in 0..grads.len() {
            let g = (grads[i].to_f64().unwrap() * scale) as f32;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] as f64 / bc1;
            let vh = self.v[i] as f64 / bc2;
            let upd = lr * mh / (vh.sqrt() + eps);
            model.params[i] = model.params[i] - R::of(upd);
        }
        model.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn identical_steps_give_identical_parameters() {
        let cfg = ModelConfig { vocab: 8, max_len: 8, ..ModelConfig::tiny() };
        let mut a: Model<f32> = Model::new(cfg.clone(), 1).unwrap();
        let mut b = a.clone();
        let g: Vec<f32> = (0..a.params.len()).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
        let sched = ScheduleConfig::new(0.5, 16);
        let (mut oa, mut ob) = (Adam::new(a.params.len(), sched), Adam::new(b.params.len(), sched));
        oa.step(&mut a, &g).unwrap();
        ob.step(&mut b, &g).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let cfg = ModelConfig { vocab: 8, max_len: 8, ..ModelConfig::tiny() };
        let mut m: Model<f32> = Model::new(cfg, 1).unwrap();
        let before = m.params.clone();
        let mut g = vec![0.0f32; m.params.len()];
        g[3] = f32::NAN;
        let mut opt = Adam::new(g.len(), ScheduleConfig::new(0.5, 16));
        let err = opt.step(&mut m, &g).unwrap_err();
        assert!(err.to_string().contains("embed"));
        assert_eq!(m.params, before);
        assert_eq!(opt.t, 0);
    }
}
