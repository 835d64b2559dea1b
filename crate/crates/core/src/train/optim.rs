use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// AdamW with weight decay decoupled from the adaptive step:
/// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .params()
            .map(|(name, p)| {
                let shape = p.value().shape().to_vec();
                (name.to_string(), (Tensor::zeros(shape.clone()), Tensor::zeros(shape)))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// One update from the gradients held in `store`. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (name, p) in store.params() {
            match p.grad() {
                Some(g) if !g.is_finite() => {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                Some(_) => {}
                None => return Err(Error::Contract(format!("no gradient for `{name}`"))),
            }
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1, b2, one) = (T::of(b1), T::of(b2), T::one());
        let (c1, c2, eps) = (T::of(c1), T::of(c2), T::of(self.config.eps));
        let lr_t = T::of(lr);
        let decay = T::of(lr * self.config.weight_decay);
        let moments = &mut self.moments;
        store.for_each_mut(|name, value, grad| {
            let grad = grad.expect("checked above");
            let (m, v) = moments
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer has no state for `{name}`")))?;
            if m.shape() != value.shape() {
                return Err(Error::Contract(format!("optimizer state for `{name}` has the wrong shape")));
            }
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *p = *p - decay * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            Ok(())
        })
    }
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
    store
        .params()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for g in store.grads_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        s.zero_grad();
        s.accumulate_grad("p", &Tensor::new(vec![g.len()], g.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn first_step_closed_form() {
        let lr = 1e-3;
        for wd in [0.0, 0.05] {
            let mut s = store(&[1.0]);
            let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..Default::default() }, &s);
            set_grad(&mut s, &[1.0]);
            opt.step(&mut s, lr).unwrap();
            let expected = 1.0 - lr * wd - lr / (1.0 + 1e-8);
            assert!((s.value("p").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradients() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        set_grad(&mut s, &[0.0, 0.0]);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value("p").unwrap().data(), &[1.0, -2.0]);

        let (lr, wd) = (0.1, 0.05);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: wd, ..Default::default() }, &s);
        for k in 1..=5 {
            set_grad(&mut s, &[0.0, 0.0]);
            opt.step(&mut s, lr).unwrap();
            let f = (1.0f64 - lr * wd).powi(k);
            assert!((s.value("p").unwrap().data()[0] - f).abs() < 1e-15);
        }
    }

    /// Textbook Adam, kept independent of the implementation above.
    fn adam_reference(p0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p = p0.to_vec();
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        p
    }

    #[test]
    fn zero_decay_is_plain_adam_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..25).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut s = store(&p0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        for g in &grads {
            set_grad(&mut s, g);
            opt.step(&mut s, 3e-3).unwrap();
        }
        assert_eq!(s.value("p").unwrap().data(), adam_reference(&p0, &grads, 3e-3).as_slice());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        set_grad(&mut s, &[f64::NAN, 0.0]);
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("`p`")));
        assert_eq!(s.value("p").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping() {
        let mut s = store(&[0.0, 0.0]);
        set_grad(&mut s, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.grad("p").unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        set_grad(&mut s, &[0.3, 0.4]);
        clip_grad_norm(&mut s, 1.0);
        assert_eq!(s.grad("p").unwrap().data(), &[0.3, 0.4]);
    }
}
