use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_params(p: &PolicyParams) -> Self {
        Self::new(p.len())
    }
}

/// Updates `values` in place against the gradient `grad`.
pub fn adam_update(values: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if values.len() != grad.len() || state.m.len() != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            values.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..values.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub fn adam_step(params: &mut PolicyParams, grad: &Gradient, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_update(params.as_mut_slice(), &grad.0, state, lr)?;
    if !params.is_finite() {
        return Err(Error::NumericOverflow);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut x = vec![1.5, -2.0];
        let mut s = AdamState::new(2);
        adam_update(&mut x, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_update(&mut x, &[0.3, -7.0, 1e-3], &mut s, 1e-2).unwrap();
        for (v, sign) in x.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 1e-2).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2
        let mut x = vec![-4.0, 5.0];
        let mut s = AdamState::new(2);
        let mut steps = 0;
        while steps < 5000 {
            let g = [2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)];
            let lr = if steps < 3000 { 0.05 } else { 0.005 };
            adam_update(&mut x, &g, &mut s, lr).unwrap();
            steps += 1;
        }
        assert!((x[0] - 3.0).abs() < 1e-6 && (x[1] + 1.0).abs() < 1e-6, "{x:?}");
    }
}
