use crate::error::{Error, Result};

use super::{Gradients, ParamStore};

/// Hyperparameters of SGD with classic momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
        }
    }
}

/// One momentum step:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·param
/// param ← param − lr·v
/// ```
///
/// All gradients are checked for finiteness before any buffer is touched, so a
/// failed step leaves `params` exactly as it was.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, opt: Sgd) -> Result<()> {
    if !(opt.lr >= 0.0) || !opt.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {}", opt.lr)));
    }
    if grads.len() != params.len() {
        return Err(Error::dim(
            "sgd_step gradient count",
            params.len(),
            grads.len(),
        ));
    }
    for i in 0..params.len() {
        let (p, g) = (params.value(i), grads.get(i));
        if p.shape() != g.shape() {
            return Err(Error::dim(
                format!("gradient of {}", params.name(i)),
                p.shape_str(),
                g.shape_str(),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
        }
    }
    for i in 0..params.len() {
        let g = grads.get(i).data();
        let (value, velocity) = params.value_and_velocity_mut(i);
        for ((p, v), &g) in value.data_mut().iter_mut().zip(velocity.data_mut()).zip(g) {
            *v = opt.momentum * *v + g + opt.weight_decay * *p;
            *p -= opt.lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(v)).unwrap();
        s
    }

    fn grad(v: f64) -> Gradients {
        Gradients::from_tensors(vec![Matrix::scalar(v)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(1.25);
        sgd_step(&mut s, &grad(0.0), Sgd::new(0.1, 0.9, 0.0)).unwrap();
        assert_eq!(s.value(0).item().unwrap(), 1.25);
    }

    #[test]
    fn one_step_by_hand() {
        let mut s = single(1.0);
        sgd_step(&mut s, &grad(0.5), Sgd::new(0.1, 0.9, 0.0)).unwrap();
        assert!((s.velocity(0).item().unwrap() - 0.5).abs() < 1e-15);
        assert!((s.value(0).item().unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (lr, mu, wd, g) = (0.1, 0.9, 5e-4, 0.5);
        let mut s = single(1.0);
        let opt = Sgd::new(lr, mu, wd);
        sgd_step(&mut s, &grad(g), opt).unwrap();
        sgd_step(&mut s, &grad(g), opt).unwrap();

        let p0 = 1.0;
        let v1 = g + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((s.value(0).item().unwrap() - p2).abs() < 1e-15);
        assert!((s.velocity(0).item().unwrap() - v2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut s = single(2.0);
        s.insert("b", Matrix::scalar(1.0)).unwrap();
        let g = Gradients::from_tensors(vec![Matrix::scalar(1.0), Matrix::scalar(f64::NAN)]);
        let before = s.clone();
        assert!(matches!(
            sgd_step(&mut s, &g, Sgd::new(0.1, 0.9, 0.0)),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn zero_lr_keeps_values() {
        let mut s = single(-0.3);
        sgd_step(&mut s, &grad(123.0), Sgd::new(0.0, 0.9, 5e-4)).unwrap();
        assert_eq!(s.value(0).item().unwrap(), -0.3);
    }
}
