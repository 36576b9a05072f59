use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter. `grads` must hold a
/// tensor for each parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => {
                return Err(Error::Shape(format!(
                    "adam: gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::Shape(format!("adam: no gradient for {name}"))),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let items = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pi, &gi), (mi, vi)) in items {
            let gi = gi.as_f64();
            let m_new = BETA1 * mi.as_f64() + (1.0 - BETA1) * gi;
            let v_new = BETA2 * vi.as_f64() + (1.0 - BETA2) * gi * gi;
            *mi = T::from_f64(m_new);
            *vi = T::from_f64(v_new);
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + EPSILON);
            *pi = T::from_f64(pi.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()).unwrap();
        p
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(&[values.len()], values.to_vec()).unwrap())])
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = single(&[1.0, -2.0]);
        let mut s = AdamState::new();
        adam_step(&mut p, &grads(&[0.0, 0.0]), &mut s, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data(), [1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(&[0.0; 4]);
        let mut s = AdamState::new();
        adam_step(&mut p, &grads(&[1.0; 4]), &mut s, 1e-3).unwrap();
        for &v in p.get("w").unwrap().data() {
            assert!((v + 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let gs = [[0.3, -1.2], [-0.7, 2.5]];
        let lr = 0.01;
        let mut p = single(&[0.5, 0.25]);
        let mut s = AdamState::new();
        for g in gs {
            adam_step(&mut p, &grads(&g), &mut s, lr).unwrap();
        }
        for (i, &x0) in [0.5, 0.25].iter().enumerate() {
            let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
            for (t, g) in gs.iter().enumerate() {
                let g = g[i];
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
                x -= lr * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p.get("w").unwrap().data()[i] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_or_misshaped_gradient() {
        let mut p = single(&[1.0]);
        let mut s = AdamState::new();
        assert!(adam_step(&mut p, &BTreeMap::new(), &mut s, 0.1).is_err());
        assert!(adam_step(&mut p, &grads(&[1.0, 2.0]), &mut s, 0.1).is_err());
        assert_eq!(s.t, 0);
    }

    proptest! {
        #[test]
        fn zero_lr_is_identity(
            x in proptest::collection::vec(-10.0f64..10.0, 1..16),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::Rng64::new(seed);
            let g: Vec<f64> = x.iter().map(|_| rng.next_f64() * 4.0 - 2.0).collect();
            let mut p = single(&x);
            let mut s = AdamState::new();
            for _ in 0..3 {
                adam_step(&mut p, &grads(&g), &mut s, 0.0).unwrap();
            }
            prop_assert_eq!(p.get("w").unwrap().data(), x.as_slice());
        }
    }
}
