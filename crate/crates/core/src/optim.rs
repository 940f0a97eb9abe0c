//! AdamW with decoupled weight decay and a per-step cosine schedule.

use thiserror::Error;

use crate::heads::{Gradients, HeadState};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient buffers do not match the parameters: {0}")]
    Shape(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::Config(format!("betas {} {}", self.beta1, self.beta2)));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(OptimError::Config(format!(
                "lr {} wd {} eps {}",
                self.lr, self.weight_decay, self.eps
            )));
        }
        Ok(())
    }
}

/// One AdamW step on a flat buffer. `t` is the 1-based step count and `lr`
/// the scheduled learning rate for this step.
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * theta[i];
    }
}

/// Plain Adam followed by a separate decay pass; used to cross-check the
/// fused update.
pub fn adam_then_decay(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let decayed: Vec<f64> = theta.iter().map(|x| lr * cfg.weight_decay * x).collect();
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..*cfg
    };
    adamw_update(theta, grad, m, v, t, lr, &adam);
    for (x, d) in theta.iter_mut().zip(decayed) {
        *x -= d;
    }
}

/// Moment buffers for every tensor of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(head: &HeadState, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = head.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Applies one update at learning rate `lr`. A non-finite gradient aborts
    /// before any tensor is touched.
    pub fn step(&mut self, head: &mut HeadState, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.bufs.len() != head.params.len() {
            return Err(OptimError::Shape(format!(
                "{} gradient buffers for {} tensors",
                grads.bufs.len(),
                head.params.len()
            )));
        }
        for (p, g) in head.params.iter().zip(&grads.bufs) {
            if g.len() != p.tensor.len() {
                return Err(OptimError::Shape(format!("{}: {} vs {}", p.name, g.len(), p.tensor.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient(p.name.to_string()));
            }
        }
        self.step += 1;
        for (i, p) in head.params.iter_mut().enumerate() {
            let mut theta = p.tensor.to_f64();
            adamw_update(&mut theta, &grads.bufs[i], &mut self.m[i], &mut self.v[i], self.step, lr, &self.cfg);
            for (dst, src) in p.tensor.data_mut().iter_mut().zip(&theta) {
                *dst = *src as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, total_steps: u64) -> Self {
        Self {
            lr_max,
            lr_min: 0.0,
            total_steps: total_steps.max(1),
        }
    }
}

pub fn cosine_lr(step: u64, sched: &CosineSchedule) -> f64 {
    let t = step.min(sched.total_steps) as f64 / sched.total_steps as f64;
    sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadDims, HeadHyper, HeadKind};
    use crate::numerics::RngStream;

    #[test]
    fn pure_decay() {
        let cfg = AdamWConfig::new(0.1, 0.01);
        let mut theta = vec![2.0, -3.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, cfg.lr, &cfg);
        assert_eq!(theta, vec![2.0 * (1.0 - 0.001), -3.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamWConfig::new(0.01, 0.0);
        for g in [0.3, -2.0, 1e-3] {
            let mut theta = vec![0.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adamw_update(&mut theta, &[g], &mut m, &mut v, 1, cfg.lr, &cfg);
            let expect = -g.signum() * cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!((theta[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn three_scalar_steps_match_hand_recurrence() {
        let cfg = AdamWConfig::new(0.1, 0.01);
        let mut theta = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        // independent recurrence
        let (mut th, mut mm, mut vv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = th;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            let mh = mm / (1.0 - 0.9f64.powi(t));
            let vh = vv / (1.0 - 0.999f64.powi(t));
            th = th - 0.1 * mh / (vh.sqrt() + 1e-8) - 0.1 * 0.01 * th;
            let grad = [theta[0]];
            adamw_update(&mut theta, &grad, &mut m, &mut v, t as u64, cfg.lr, &cfg);
        }
        assert!((theta[0] - th).abs() < 1e-10);
    }

    #[test]
    fn fused_matches_adam_plus_decay() {
        let cfg = AdamWConfig::new(0.03, 3e-4);
        let mut rng = RngStream::new(2, 0);
        let mut a: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
        let mut b = a.clone();
        let (mut ma, mut va, mut mb, mut vb) = (vec![0.0; 16], vec![0.0; 16], vec![0.0; 16], vec![0.0; 16]);
        for t in 1..=10 {
            let g: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
            adamw_update(&mut a, &g, &mut ma, &mut va, t, cfg.lr, &cfg);
            adam_then_decay(&mut b, &g, &mut mb, &mut vb, t, cfg.lr, &cfg);
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn sign_flip_mirrors_first_step() {
        let cfg = AdamWConfig::new(0.05, 0.0);
        let g = [0.7, -1.2, 3.0];
        let (mut a, mut b) = (vec![0.0; 3], vec![0.0; 3]);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        adamw_update(&mut a, &g, &mut vec![0.0; 3], &mut vec![0.0; 3], 1, cfg.lr, &cfg);
        adamw_update(&mut b, &neg, &mut vec![0.0; 3], &mut vec![0.0; 3], 1, cfg.lr, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let dims = HeadDims::new(4, 1, 1, 2);
        let mut head = HeadState::init(HeadKind::Linear, dims, HeadHyper::default(), &mut RngStream::new(0, 0)).unwrap();
        let before = head.clone();
        let mut state = AdamWState::new(&head, AdamWConfig::new(0.1, 0.0)).unwrap();
        let mut grads = head.zero_grads();
        grads.bufs[1][0] = f64::NAN;
        assert_eq!(
            state.step(&mut head, &grads, 0.1),
            Err(OptimError::NonFiniteGradient("b".into()))
        );
        assert_eq!(head, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = CosineSchedule {
            lr_max: 0.1,
            lr_min: 0.01,
            total_steps: 100,
        };
        assert_eq!(cosine_lr(0, &s), 0.1);
        assert!((cosine_lr(100, &s) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(50, &s) - 0.055).abs() < 1e-15);
        assert_eq!(cosine_lr(500, &s), cosine_lr(100, &s));
        for t in 0..100 {
            assert!(cosine_lr(t + 1, &s) <= cosine_lr(t, &s));
        }
    }
}
