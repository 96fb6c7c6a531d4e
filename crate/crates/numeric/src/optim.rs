//! RMSProp with a per-parameter running mean of squared gradients.

use crate::error::NumericError;
use crate::params::ParamSet;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct RmsProp<R: Real> {
    pub lr: R,
    pub decay: R,
    pub eps: R,
    /// Running mean of squared gradients, lazily sized to the parameter set.
    v: Vec<Vec<R>>,
    pub step_count: u64,
}

impl<R: Real> RmsProp<R> {
    pub fn new(lr: R, decay: R, eps: R) -> Result<Self, NumericError> {
        if lr <= R::zero() {
            return Err(NumericError::InvalidArgument("rmsprop lr must be > 0".into()));
        }
        if decay < R::zero() || decay >= R::one() {
            return Err(NumericError::InvalidArgument("rmsprop decay must be in [0, 1)".into()));
        }
        if eps <= R::zero() {
            return Err(NumericError::InvalidArgument("rmsprop eps must be > 0".into()));
        }
        Ok(RmsProp {
            lr,
            decay,
            eps,
            v: Vec::new(),
            step_count: 0,
        })
    }

    /// Apply one update from the gradients stored in `params`.
    /// Parameters without a gradient buffer are left unchanged.
    pub fn step(&mut self, params: &mut ParamSet<R>) -> Result<(), NumericError> {
        if self.v.len() != params.len() {
            self.v = params
                .ids()
                .map(|id| vec![R::zero(); params.get(id).numel()])
                .collect();
        }
        let one = R::one();
        for id in params.ids() {
            let t = params.get_mut(id);
            let Some(grad) = t.grad.as_ref() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(NumericError::NonFinite(format!(
                    "gradient of parameter index {}",
                    id.0
                )));
            }
            let v = &mut self.v[id.0];
            for ((p, &g), vi) in t.data.iter_mut().zip(grad).zip(v.iter_mut()) {
                *vi = self.decay * *vi + (one - self.decay) * g * g;
                *p = *p - self.lr * g / (vi.sqrt() + self.eps);
            }
        }
        self.step_count += 1;
        Ok(())
    }

    pub fn state(&self) -> (&[Vec<R>], u64) {
        (&self.v, self.step_count)
    }

    pub fn restore_state(&mut self, v: Vec<Vec<R>>, step_count: u64) {
        self.v = v;
        self.step_count = step_count;
    }
}
