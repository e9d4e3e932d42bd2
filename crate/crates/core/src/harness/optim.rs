use std::collections::BTreeMap;

use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with bias-corrected moment estimates. Each parameter counts its own
/// updates, so a parameter that first receives gradients late starts with
/// fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient; the rest
    /// are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f32>>) {
        self.step += 1;
        for (name, g) in grads {
            let Ok(p) = params.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            st.step += 1;
            let t = st.step.min(i32::MAX as u64) as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                let gi = gi as f64;
                let m_new = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let v_new = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = self.lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        params.insert("frozen", Tensor::from_f64(&[1], &[7.0]).unwrap());
        let grads = BTreeMap::from([("w".to_string(), vec![0.3f32, -4.0, 0.0])]);
        let mut adam = Adam::new(0.01);
        adam.update(&mut params, &grads);
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
        assert_eq!(params.get("frozen").unwrap().data(), &[7.0]);
    }

    #[test]
    fn late_parameters_get_a_fresh_first_step() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::from_f64(&[1], &[0.0]).unwrap());
        params.insert("b", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let mut adam = Adam::new(0.01);
        for _ in 0..50 {
            adam.update(&mut params, &BTreeMap::from([("a".to_string(), vec![1.0f32])]));
        }
        adam.update(&mut params, &BTreeMap::from([("b".to_string(), vec![-0.2f32])]));
        assert!((params.get("b").unwrap().data()[0] - 0.01).abs() < 1e-7);
        assert_eq!(adam.steps(), 51);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap());
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let x = params.get("x").unwrap().data().to_vec();
            let grads = BTreeMap::from([("x".to_string(), x.iter().map(|v| 2.0 * v).collect())]);
            adam.update(&mut params, &grads);
        }
        assert!(params.get("x").unwrap().data().iter().all(|v| v.abs() < 0.05));
        assert_eq!(adam.steps(), 500);
    }

    #[test]
    fn clipping_rescales_to_bound() {
        let mut grads = BTreeMap::from([("a".to_string(), vec![3.0f32]), ("b".to_string(), vec![4.0f32])]);
        assert_eq!(clip_grad_norm(&mut grads, 10.0), 5.0);
        assert_eq!(grads["a"], vec![3.0]);
        clip_grad_norm(&mut grads, 1.0);
        assert!((grads["a"][0] - 0.6).abs() < 1e-6 && (grads["b"][0] - 0.8).abs() < 1e-6);
    }
}
