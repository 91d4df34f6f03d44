//! Adam with pluggable weight decay.

use std::sync::{Arc, LazyLock};

use crate::error::{Error, Result};
use crate::numerics::ParamSet;
use crate::registry::{named_trait_object, Named, Registry};

/// How weight decay enters the Adam update.
pub trait WeightDecay: Named {
    /// Gradient fed into the moment estimates.
    fn gradient(&self, grad: f64, param: f64, weight_decay: f64) -> f64;
    /// Amount subtracted from the parameter outside the adaptive step.
    fn shrink(&self, param: f64, lr: f64, weight_decay: f64) -> f64;
}
named_trait_object!(WeightDecay);

/// Classic L2: `g + wd·θ` goes through the moments.
pub struct Coupled;
/// AdamW: `θ ← θ − lr·wd·θ` applied separately.
pub struct Decoupled;

impl Named for Coupled {
    fn name(&self) -> &'static str {
        "coupled"
    }
}

impl WeightDecay for Coupled {
    fn gradient(&self, grad: f64, param: f64, weight_decay: f64) -> f64 {
        grad + weight_decay * param
    }

    fn shrink(&self, _param: f64, _lr: f64, _weight_decay: f64) -> f64 {
        0.0
    }
}

impl Named for Decoupled {
    fn name(&self) -> &'static str {
        "decoupled"
    }
}

impl WeightDecay for Decoupled {
    fn gradient(&self, grad: f64, _param: f64, _weight_decay: f64) -> f64 {
        grad
    }

    fn shrink(&self, param: f64, lr: f64, weight_decay: f64) -> f64 {
        lr * weight_decay * param
    }
}

pub fn weight_decays() -> &'static Registry<dyn WeightDecay> {
    static REG: LazyLock<Registry<dyn WeightDecay>> = LazyLock::new(|| {
        Registry::new("weight decay")
            .with(Arc::new(Coupled) as _)
            .with(Arc::new(Decoupled) as _)
    });
    &REG
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: Arc<dyn WeightDecay>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decay: Arc::new(Coupled),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam epsilon must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be finite and >= 0"));
        }
        Ok(())
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
}

fn zeroed<P: ParamSet>(params: &P) -> P {
    let mut z = params.clone();
    for (_, t) in z.tensors_mut() {
        t.fill(0.0);
    }
    z
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: zeroed(params),
            v: zeroed(params),
            t: 0,
        }
    }
}

fn check_layout<P: ParamSet>(a: &P, b: &P, what: &'static str) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: ta.len(),
            actual: tb.len(),
        });
    }
    for ((na, xa), (nb, xb)) in ta.iter().zip(&tb) {
        if na != nb || xa.len() != xb.len() {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: xa.len(),
                actual: xb.len(),
            });
        }
    }
    Ok(())
}

/// One Adam update in place. `t` is incremented before bias correction.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState<P>, cfg: &AdamConfig) -> Result<()> {
    check_layout(params, grads, "adam gradients")?;
    check_layout(params, &state.m, "adam state")?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.tensors_mut().into_iter().zip(grads).zip(moments) {
        for i in 0..p.len() {
            let gi = cfg.decay.gradient(g[i], p[i], cfg.weight_decay);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let shrink = cfg.decay.shrink(p[i], cfg.lr, cfg.weight_decay);
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + shrink;
        }
    }
    Ok(())
}
