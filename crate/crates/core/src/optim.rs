//! AdamW, global-norm clipping and the learning-rate schedule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::encoder::names;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a single tensor, in place.
///
/// Follows the decoupled formulation: the parameter is first shrunk by
/// `lr · weight_decay` (when `decay` is set), then moved by the
/// bias-corrected Adam direction. `step` counts updates from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    hp: &AdamHyper,
    decay: bool,
) {
    debug_assert!(step >= 1);
    let t = step as f64;
    let bc1 = (1.0 - libm::pow(hp.beta1 as f64, t)) as f32;
    let bc2_sqrt = libm::sqrt(1.0 - libm::pow(hp.beta2 as f64, t)) as f32;
    let step_size = lr / bc1;
    let shrink = 1.0 - lr * hp.weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        if decay {
            *p *= shrink;
        }
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let denom = libm::sqrtf(*v) / bc2_sqrt + hp.eps;
        *p -= step_size * (*m / denom);
    }
}

/// First and second moments for every trainable tensor, keyed like the
/// gradients passed to [`AdamW::step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl AdamW {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    /// Applies one update. `params` yields `(name, tensor)` for every
    /// trainable tensor and `grads` holds a gradient under the same name.
    /// Decay is skipped for names that [`names::is_no_decay`] matches.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &ParamStore,
        step: u64,
        lr: f32,
    ) -> Result<()> {
        if step == 0 {
            return Err(Error::Contract("optimizer steps count from 1".to_string()));
        }
        for (name, param) in params {
            let grad = grads.require(name)?;
            if grad.shape() != param.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if !self.first.contains(name) {
                self.first.insert(name, Tensor::zeros(param.shape()))?;
                self.second.insert(name, Tensor::zeros(param.shape()))?;
            }
            let m = self.first.get_mut(name).expect("inserted above");
            let v = self.second.get_mut(name).expect("inserted above");
            adamw_update(
                param.data_mut(),
                grad.data(),
                m.data_mut(),
                v.data_mut(),
                step,
                lr,
                &self.hyper,
                !names::is_no_decay(name),
            );
        }
        Ok(())
    }
}

/// Rejects the first non-finite gradient, naming its parameter.
pub fn check_finite(grads: &ParamStore) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "{name} (element {i} is {})",
                g.data()[i]
            )));
        }
    }
    Ok(())
}

/// L2 norm over every gradient, accumulated in `f64` in store order.
pub fn global_norm(grads: &ParamStore) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .fold(0.0, |acc, &x| acc + (x as f64) * (x as f64));
    libm::sqrt(total)
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> Result<f64> {
    check_finite(grads)?;
    let norm = global_norm(grads);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        let coef = coef as f32;
        let names: Vec<String> = grads.names().map(String::from).collect();
        for name in names {
            let g = grads.get_mut(&name).expect("name from store");
            for x in g.data_mut() {
                *x *= coef;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then linear decay
/// to 0 at `max_steps`.
pub fn lr_schedule(step: u64, base_lr: f32, warmup: u64, max_steps: u64) -> f32 {
    let step = step.min(max_steps);
    let base = base_lr as f64;
    let lr = if step < warmup {
        base * step as f64 / warmup as f64
    } else if max_steps == warmup {
        base
    } else {
        base * (max_steps - step) as f64 / (max_steps - warmup) as f64
    };
    lr as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use alloc::vec;

    /// Straight-line scalar AdamW in f64, written from the update equations.
    fn reference(p0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        let mut out = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
            out.push(p);
        }
        out
    }

    fn scalar_store(name: &str, x: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn matches_scalar_reference_for_ten_steps() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed, 0);
            let grads: Vec<f64> = (0..10).map(|_| (rng.uniform() * 4.0 - 2.0) as f32 as f64).collect();
            let p0 = (rng.uniform() * 2.0 - 1.0) as f32;
            let lr = 1e-3;
            let expected = reference(p0 as f64, &grads, lr as f64, 0.01);

            let mut opt = AdamW::new(AdamHyper::default());
            let mut params = scalar_store("w", p0);
            for (i, &g) in grads.iter().enumerate() {
                let gs = scalar_store("w", g as f32);
                let p = params.get_mut("w").unwrap();
                opt.step([("w", p)], &gs, i as u64 + 1, lr).unwrap();
                let got = params.get("w").unwrap().data()[0] as f64;
                assert!(
                    (got - expected[i]).abs() < 1e-6,
                    "seed {seed} step {}: {got} vs {}",
                    i + 1,
                    expected[i]
                );
            }
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let hp = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut p = vec![0.3f32, -1.5, 2.0];
        let before = p.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=5 {
            adamw_update(&mut p, &[0.0; 3], &mut m, &mut v, t, 1e-2, &hp, true);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps) ≈ lr · sign(g).
        let hp = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        for g in [1e3f32, -50.0, 7.0] {
            let mut p = [0.0f32];
            adamw_update(&mut p, &[g], &mut [0.0], &mut [0.0], 1, 1e-3, &hp, true);
            assert!((p[0] + 1e-3 * g.signum()).abs() < 1e-8, "{g}: {}", p[0]);
        }
    }

    #[test]
    fn decay_skipped_for_bias_and_norm_parameters() {
        let mut opt = AdamW::new(AdamHyper {
            weight_decay: 0.5,
            ..AdamHyper::default()
        });
        let names = ["a.weight", "a.bias", "ln.gamma", "ln.beta"];
        let mut owned: Vec<(String, Tensor)> = names
            .iter()
            .map(|n| (n.to_string(), Tensor::scalar(1.0)))
            .collect();
        let mut grads = ParamStore::new();
        for name in names {
            grads.insert(name, Tensor::scalar(0.0)).unwrap();
        }
        opt.step(owned.iter_mut().map(|(n, t)| (n.as_str(), t)), &grads, 1, 0.1)
            .unwrap();
        let value = |n: &str| owned.iter().find(|(k, _)| k == n).unwrap().1.data()[0];
        assert!((value("a.weight") - 0.95).abs() < 1e-7);
        for n in ["a.bias", "ln.gamma", "ln.beta"] {
            assert_eq!(value(n), 1.0, "{n}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut grads = scalar_store("layer.0.ffn.up.weight", f32::NAN);
        let err = clip_global_norm(&mut grads, 1.0).unwrap_err();
        match err {
            Error::NonFiniteGradient(msg) => assert!(msg.contains("layer.0.ffn.up.weight")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut grads = ParamStore::new();
        grads.insert("a", Tensor::from_fn(&[2], |_| 3.0)).unwrap();
        grads.insert("b", Tensor::from_fn(&[1], |_| 4.0)).unwrap();
        let before = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((before - 34f64.sqrt()).abs() < 1e-9);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-5);

        let mut small = scalar_store("a", 0.5);
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small.get("a").unwrap().data()[0], 0.5);
    }

    #[test]
    fn schedule_reference_points() {
        assert_eq!(lr_schedule(0, 1e-3, 100, 1100), 0.0);
        assert_eq!(lr_schedule(100, 1e-3, 100, 1100), 1e-3);
        assert_eq!(lr_schedule(600, 1e-3, 100, 1100), 5e-4);
        assert_eq!(lr_schedule(1100, 1e-3, 100, 1100), 0.0);
        assert_eq!(lr_schedule(50, 2e-3, 100, 1100), 1e-3);
        assert_eq!(lr_schedule(0, 1e-3, 0, 10), 1e-3);
    }
}
