//! Adam optimizer step with bias correction.

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamState {
    /// Number of updates applied so far (bias-correction exponent).
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update in place. Parameters and moments are snapped back to
/// the f32 grid after the update so optimizer state serializes exactly.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: "params, grads and moments with identical layout".into(),
            actual: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);

    for ((_, p), ((_, g), ((_, m), (_, v)))) in params.iter_mut().zip(
        grads
            .iter()
            .zip(state.m.iter_mut().zip(state.v.iter_mut())),
    ) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.quantize_f32();
        m.quantize_f32();
        v.quantize_f32();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn one_param(vals: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = vals.len();
        p.insert("w", Tensor::new(vec![n], vals).unwrap()).unwrap();
        p.quantize_f32();
        p
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = one_param(vec![0.5, -1.25, 3.0]);
        let before = params.get("w").clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w"), &before);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        let cfg = AdamConfig::default();
        let mut params = one_param(vec![1.0, 1.0]);
        let mut grads = params.zeros_like();
        grads.get_mut("w").data_mut().copy_from_slice(&[0.3, -0.7]);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        // First step with bias correction: update = -lr * g / (|g| + eps').
        let w = params.get("w").data();
        assert!((w[0] - (1.0 - cfg.lr)).abs() < 1e-6, "w[0] = {}", w[0]);
        assert!((w[1] - (1.0 + cfg.lr)).abs() < 1e-6, "w[1] = {}", w[1]);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut params = one_param(vec![0.1, 0.2, 0.3]);
            let mut grads = params.zeros_like();
            grads
                .get_mut("w")
                .data_mut()
                .copy_from_slice(&[0.01, -0.5, 2.0]);
            let mut state = AdamState::new(&params);
            for _ in 0..10 {
                adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            }
            params.get("w").data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut params = one_param(vec![1.0]);
        let grads = one_param(vec![1.0, 2.0]);
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
    }
}
