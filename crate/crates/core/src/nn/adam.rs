use super::model::{CnnModel, Grads};
use super::scalar::Scalar;
use super::train::TrainConfig;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Grads<T>,
    pub v: Grads<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &CnnModel<T>) -> Self {
        Self {
            m: model.zero_grads(),
            v: model.zero_grads(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(model: &mut CnnModel<T>, grads: &Grads<T>, state: &mut AdamState<T>, cfg: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step = T::from_f64(cfg.learning_rate / c1);
    let inv_c2 = T::from_f64(1.0 / c2);
    let eps = T::from_f64(cfg.epsilon);
    for (p, ((g, m), v)) in model.params.iter_mut().zip(grads.iter().zip(&mut state.m).zip(&mut state.v)) {
        for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1t * *m + one_b1 * g;
            *v = b2t * *v + one_b2 * g * g;
            *w = *w - step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::arch::{ArchSpec, LayerSpec};
    use super::*;

    fn tiny() -> CnnModel<f64> {
        let arch = ArchSpec {
            height: 3,
            width: 3,
            channels: 1,
            layers: vec![LayerSpec::Dense { units: 2 }],
        };
        CnnModel::build(&arch, 5).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut m = tiny();
        let before = m.clone();
        let mut st = AdamState::new(&m);
        let zero = m.zero_grads();
        adam_step(&mut m, &zero, &mut st, &TrainConfig::default());
        assert_eq!(m, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut m = tiny();
        let before = m.clone();
        let cfg = TrainConfig::default();
        let mut g = m.zero_grads();
        let mags = [3.0, -0.5, 1e3, -2e-2];
        for (k, v) in g[0].iter_mut().enumerate() {
            *v = mags[k % mags.len()];
        }
        let mut st = AdamState::new(&m);
        adam_step(&mut m, &g, &mut st, &cfg);
        for ((a, b), g) in m.params[0].data.iter().zip(&before.params[0].data).zip(&g[0]) {
            let expected = -cfg.learning_rate * g.signum();
            assert!(((a - b) - expected).abs() <= 1e-6 * cfg.learning_rate);
        }
    }

    #[test]
    fn equal_histories_equal_updates() {
        let mut m = tiny();
        m.params[0].data[0] = 0.25;
        m.params[0].data[7] = 0.25;
        let mut st = AdamState::new(&m);
        for s in 0..5 {
            let mut g = m.zero_grads();
            g[0][0] = 0.1 * s as f64 - 0.2;
            g[0][7] = 0.1 * s as f64 - 0.2;
            adam_step(&mut m, &g, &mut st, &TrainConfig::default());
        }
        assert_eq!(m.params[0].data[0], m.params[0].data[7]);
        assert_ne!(m.params[0].data[0], 0.25);
    }
}
