//! Adam optimizer with bias correction.

use super::{NumericsError, Tensor};

/// Optimizer state: first/second moment accumulators aligned one-to-one with
/// the parameter list it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Defaults beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    pub fn moments_mut(&mut self, i: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.m[i], &mut self.v[i])
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }
}

/// One Adam update over the whole parameter set; increments `step_count` by
/// exactly 1.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![grads[i].len()],
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = &grads[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(vals: Vec<f64>) -> Tensor {
        Tensor::new(vec![vals.len()], vals).unwrap().with_grad()
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        let mut p = one_param(vec![1.0, -2.0, 0.5]);
        let before = p.data().to_vec();
        let mut st = AdamState::new(0.01, &[3]);
        let g = vec![vec![0.3, -7.0, 1e-4]];
        adam_step(&mut [&mut p], &g, &mut st).unwrap();
        for (w0, w1) in before.iter().zip(p.data()) {
            let step = (w1 - w0).abs();
            assert!(step <= 0.01 * (1.0 + 1e-6), "step {step}");
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = one_param(vec![0.25, -0.75]);
        let before = p.data().to_vec();
        let mut st = AdamState::new(0.1, &[2]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(p.data(), &before[..]);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w.
        let mut p = one_param(vec![3.0]);
        let mut st = AdamState::new(0.1, &[1]);
        for _ in 0..500 {
            let g = vec![vec![2.0 * p.data()[0]]];
            adam_step(&mut [&mut p], &g, &mut st).unwrap();
        }
        assert!(p.data()[0].abs() < 0.01, "w = {}", p.data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = one_param(vec![1.0, 2.0]);
        let mut st = AdamState::new(0.1, &[2]);
        let err = adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut st);
        assert!(matches!(err, Err(NumericsError::ShapeMismatch { .. })));
    }
}
