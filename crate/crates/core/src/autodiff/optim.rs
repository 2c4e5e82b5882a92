use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Velocity buffers for SGD with momentum, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One step of `v <- momentum·v + grad; p <- p - lr·v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
    {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(steps: &[f64], lr: f64, momentum: f64) -> f64 {
        let mut p = Tensor::scalar(1.0);
        let mut state = MomentumState::new();
        for &g in steps {
            let grad = Tensor::scalar(g);
            sgd_momentum_step(&mut [&mut p], &[&grad], &mut state, lr, momentum).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn plain_sgd_without_momentum() {
        assert!((run(&[0.5], 0.1, 0.0) - (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        assert_eq!(run(&[0.0, 0.0], 0.1, 0.9), 1.0);
    }

    #[test]
    fn two_momentum_steps_match_closed_form() {
        let g = 0.3;
        let expected = 1.0 - 0.1 * g - 0.19 * g;
        assert!((run(&[g, g], 0.1, 0.9) - expected).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = MomentumState::new();
        assert!(sgd_momentum_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.9).is_err());
    }
}
