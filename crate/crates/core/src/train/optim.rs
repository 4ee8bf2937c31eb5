use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// `lr0 * (1 - t/T)^0.9`.
pub fn poly_lr(lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Usage("total iterations must be >= 1".into()));
    }
    if t > total {
        return Err(Error::Usage(format!("iteration {t} exceeds total {total}")));
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64).powf(0.9))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p -= lr * wd * p` before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |_: ()| {
            params
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0f32; t.numel()]))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before any parameter changes.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::NameSetMismatch(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::config(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
        if state.m.get(name).map(Vec::len) != Some(p.numel()) {
            return Err(Error::NameSetMismatch(format!("optimizer state lacks `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let step_size = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    let decay = (lr * cfg.weight_decay) as f32;
    for (name, p) in params.iter_mut() {
        let g = grads[name.as_str()].data();
        let m = state.m.get_mut(name.as_str()).expect("checked above");
        let v = state.v.get_mut(name.as_str()).expect("checked above");
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            *w -= decay * *w;
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            *w -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> ModelParams {
        let mut map = IndexMap::new();
        map.insert("w".to_string(), Tensor::full(vec![3], value));
        ModelParams::from_map(map)
    }

    fn grad(value: f32) -> IndexMap<String, Tensor<f32>> {
        let mut map = IndexMap::new();
        map.insert("w".to_string(), Tensor::full(vec![3], value));
        map
    }

    #[test]
    fn poly_lr_values() {
        assert_eq!(poly_lr(1e-4, 0, 100).unwrap(), 1e-4);
        assert_eq!(poly_lr(1e-4, 100, 100).unwrap(), 0.0);
        assert!((poly_lr(1e-4, 50, 100).unwrap() - 5.358_867_312_681_466e-5).abs() < 1e-15);
        assert!(matches!(poly_lr(1e-4, 101, 100), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = one_param(0.7);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adam_step(&mut p, &grad(0.0), &mut s, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p, one_param(0.7));
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 1e-3;
        let mut last = 0.0f32;
        for _ in 0..1000 {
            last = p.get("w").unwrap().data()[0];
            adam_step(&mut p, &grad(0.25), &mut s, lr, &cfg).unwrap();
        }
        let step = (last - p.get("w").unwrap().data()[0]) as f64;
        assert!((step - lr).abs() / lr < 0.01, "step {step}");
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_params() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &grad(f32::NAN), &mut s, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "w"));
        assert_eq!(p, one_param(1.0));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = one_param(2.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut p, &grad(0.0), &mut s, 0.1, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0 - 0.1 * 0.5 * 2.0);
    }
}
