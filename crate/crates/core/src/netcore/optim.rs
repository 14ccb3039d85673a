use super::{shape_err, NetError, ParamGrads, ParamStore, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub(crate) m: Vec<Tensor<F>>,
    pub(crate) v: Vec<Tensor<F>>,
    pub(crate) t: u64,
}

/// `1 / (1 − βᵗ)`.
pub fn bias_correction(beta: f64, t: u64) -> f64 {
    1.0 / (1.0 - beta.powi(t as i32))
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) -> Result<()> {
        if grads.values.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err("AdamW::step", "parameter count"));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = bias_correction(c.beta1, self.t);
        let bc2 = bias_correction(c.beta2, self.t);
        let decay = F::from_f64(1.0 - lr * c.weight_decay);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let step = F::from_f64(lr * bc1);
        let bc2 = F::from_f64(bc2);
        let eps = F::from_f64(c.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.values[i];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(shape_err("AdamW::step", format!("{:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then half-cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(peak.is_finite() && peak > 0.0) || total == 0 || warmup > total {
            return Err(NetError::BadConfig(format!(
                "cosine schedule peak={peak} warmup={warmup} total={total}"
            )));
        }
        Ok(CosineSchedule {
            peak,
            warmup,
            total,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub power: f64,
    pub max_decay: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            power: 0.75,
            max_decay: 0.9999,
        }
    }
}

/// Shadow copy of parameters with a warmup-shaped decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<F> {
    pub config: EmaConfig,
    pub shadow: ParamStore<F>,
    pub(crate) step: u64,
}

impl<F: Real> Ema<F> {
    pub fn new(config: EmaConfig, store: &ParamStore<F>) -> Result<Self> {
        if !(config.power.is_finite() && config.power > 0.0) {
            return Err(NetError::BadConfig(format!(
                "ema power must be positive, got {}",
                config.power
            )));
        }
        if !(0.0..1.0).contains(&config.max_decay) {
            return Err(NetError::BadConfig(format!(
                "ema max_decay must lie in [0, 1), got {}",
                config.max_decay
            )));
        }
        Ok(Ema {
            config,
            shadow: store.clone(),
            step: 0,
        })
    }

    /// Decay used at update number `step` (0-based).
    pub fn decay(&self, step: u64) -> f64 {
        let d = 1.0 - (1.0 + step as f64).powf(-self.config.power);
        d.clamp(0.0, self.config.max_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &ParamStore<F>) {
        let d = F::from_f64(self.decay(self.step));
        let od = F::one() - d;
        for id in store.ids() {
            let src = store.get(id).data();
            for (s, &p) in self.shadow.get_mut(id).data_mut().iter_mut().zip(src) {
                *s = d * *s + od * p;
            }
        }
        self.step += 1;
    }
}
