use super::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Linear learning-rate warmup length in steps (0 = none).
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(0.2),
            warmup_steps: 100,
        }
    }
}

/// Moment accumulators for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * step as f64 / w as f64
        }
    }
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.grad.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Scales trainable gradients so their global norm is at most `threshold`.
/// Returns the factor applied.
pub fn clip_grad_norm(store: &mut ParamStore, threshold: f64) -> f64 {
    let norm = grad_norm(store);
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let k = threshold / norm;
    for p in store.iter_mut().filter(|p| p.trainable) {
        for g in p.grad.data_mut() {
            *g *= k;
        }
    }
    k
}

/// One Adam update with bias correction on the trainable parameters, after
/// global-norm clipping. Gradients are zeroed afterwards. Frozen parameters
/// are never touched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> StepReport {
    if state.m.len() != store.len() {
        state.m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        state.v = state.m.clone();
    }
    let norm = grad_norm(store);
    let clip_scale = match state.config.clip {
        Some(c) => clip_grad_norm(store, c),
        None => 1.0,
    };
    state.step += 1;
    let lr = state.lr_at(state.step);
    let c = &state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..g.len() {
            md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g[i];
            vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g[i] * g[i];
        }
        let x = p.value.data_mut();
        for i in 0..x.len() {
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            x[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    store.zero_grad();
    StepReport {
        grad_norm: norm,
        clip_scale,
        lr,
    }
}
