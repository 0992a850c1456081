use crate::error::{ensure, Result};
use crate::nd::ParamSet;

/// SGD with Nesterov momentum and inverse-time learning-rate decay.
///
/// Callers evaluate gradients at [`Nesterov::lookahead`] and pass them to
/// [`Nesterov::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Nesterov {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    step: u64,
    velocity: ParamSet,
}

impl Nesterov {
    pub fn new(lr0: f64, momentum: f64, decay: f64) -> Result<Self> {
        ensure!(lr0 > 0.0 && lr0.is_finite(), Contract, "lr0 must be positive");
        ensure!((0.0..1.0).contains(&momentum), Contract, "momentum must lie in [0, 1)");
        ensure!(decay >= 0.0 && decay.is_finite(), Contract, "decay must be non-negative");
        Ok(Self {
            lr0,
            momentum,
            decay,
            step: 0,
            velocity: ParamSet::new(),
        })
    }

    /// lr₀ = 0.1, momentum 0.9, decay 1e-6.
    pub fn standard() -> Self {
        Self::new(0.1, 0.9, 1e-6).expect("valid constants")
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr0 / (1.0 + self.decay * self.step as f64)
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }

    /// `params + momentum · velocity` for the trainable tensors.
    pub fn lookahead(&self, params: &ParamSet) -> ParamSet {
        let mut ahead = params.clone();
        if !self.velocity.is_empty() {
            ahead
                .add_scaled(&self.velocity, self.momentum as f32)
                .expect("velocity mirrors the parameters");
        }
        ahead
    }

    /// `v ← μv − lr_t·g; θ ← θ + v`. Trainable tensors missing from `grads`
    /// take a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            ensure!(
                p.shape() == g.shape(),
                Contract,
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            );
            ensure!(p.requires_grad(), Contract, "gradient supplied for frozen `{name}`");
        }
        if self.velocity.is_empty() {
            for (name, p) in params.iter() {
                if p.requires_grad() {
                    self.velocity.insert(name, crate::nd::Tensor::zeros(p.shape()));
                }
            }
        }
        let lr = self.learning_rate() as f32;
        let mu = self.momentum as f32;
        for (name, v) in self.velocity.iter_mut() {
            let p = params.get_mut(name)?;
            ensure!(p.shape() == v.shape(), Contract, "parameter `{name}` changed shape");
            let g = grads.get(name).ok();
            for (i, (vi, pi)) in v.data_mut().iter_mut().zip(p.data_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *vi = mu * *vi - lr * gi;
                *pi += *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}
