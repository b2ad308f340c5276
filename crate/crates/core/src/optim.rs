//! Adam, an exponential learning-rate schedule and a finite-difference
//! gradient checker.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update with a shared learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        self.step_with(params, grads, |_| lr)
    }

    /// One update where parameter `i` uses learning rate `lr(i)`.
    pub fn step_with(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index, value });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// `lr(t) = lr_init * (lr_final / lr_init)^(t / total_steps)`, held at
/// `lr_final` past the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_init: f64, lr_final: f64, total_steps: usize) -> Result<Self> {
        if !(lr_init > 0.0 && lr_final > 0.0) || total_steps == 0 {
            return Err(Error::InvalidConfig(format!(
                "learning-rate schedule needs positive rates and steps ({lr_init}, {lr_final}, {total_steps})"
            )));
        }
        Ok(Self {
            lr_init,
            lr_final,
            total_steps,
        })
    }

    /// Decay to `fraction` of the initial rate over `total_steps`.
    pub fn decaying(lr_init: f64, fraction: f64, total_steps: usize) -> Result<Self> {
        Self::new(lr_init, lr_init * fraction, total_steps)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.lr_init * (self.lr_final / self.lr_init).powf(t)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// `max_i |g_fd - g| / max(1, |g_fd|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences with step `h` on every coordinate.
///
/// Callers choose evaluation points away from the declared kinks of their
/// losses (the Huber corner `|r| = δ`, hinge corners, L1 zeros, ReLU zeros);
/// at a kink the one-sided slopes differ and no single analytic value can
/// match.
pub fn check_gradient<F>(f: F, params: &[f64], h: f64) -> Result<GradientCheck>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..params.len()).collect();
    check_gradient_coords(f, params, h, &coords)
}

/// Like [`check_gradient`] restricted to the listed coordinates.
pub fn check_gradient_coords<F>(f: F, params: &[f64], h: f64, coords: &[usize]) -> Result<GradientCheck>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch {
            params: params.len(),
            grads: analytic.len(),
        });
    }
    let mut x = params.to_vec();
    let mut out = GradientCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x).0;
        x[i] = orig - h;
        let fm = f(&x).0;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(1.0);
        if err > out.max_rel_error {
            out = GradientCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(out)
}
