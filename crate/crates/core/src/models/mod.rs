//! Probabilistic models behind a uniform per-datum contract.
//!
//! A model exposes `log p(x_n | z)` with its latent-space gradient and
//! Hessian-vector product, plus the same three quantities for the prior.
//! The estimators only ever see the per-datum log-joint
//!
//! ```text
//! k_n(z) = N · log p(x_n | z) + log p(z)
//! ```
//!
//! whose average over `n` is the full log-joint.

mod bradley_terry;
mod linear_gaussian;
mod logistic;

pub use bradley_terry::{BradleyTerryModel, Match};
pub use linear_gaussian::LinearGaussianModel;
pub use logistic::{LogisticRegressionModel, MulticlassLogisticModel};

use std::sync::Arc;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub trait Model: Send + Sync {
    /// Number of data `N`.
    fn num_data(&self) -> usize;

    /// Latent dimension `d`.
    fn dim(&self) -> usize;

    fn log_lik(&self, n: usize, z: &[f64]) -> f64;

    fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64>;

    fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64>;

    /// Standard Gaussian prior unless overridden.
    fn log_prior(&self, z: &[f64]) -> f64 {
        -0.5 * z.len() as f64 * LN_2PI - 0.5 * z.iter().map(|x| x * x).sum::<f64>()
    }

    fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|x| -x).collect()
    }

    fn hvp_log_prior(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| -x).collect()
    }
}

macro_rules! forward_model {
    ($($ty:ty),*) => {$(
        impl<M: Model + ?Sized> Model for $ty {
            fn num_data(&self) -> usize { (**self).num_data() }
            fn dim(&self) -> usize { (**self).dim() }
            fn log_lik(&self, n: usize, z: &[f64]) -> f64 { (**self).log_lik(n, z) }
            fn grad_log_lik(&self, n: usize, z: &[f64]) -> Vec<f64> { (**self).grad_log_lik(n, z) }
            fn hvp_log_lik(&self, n: usize, z: &[f64], v: &[f64]) -> Vec<f64> { (**self).hvp_log_lik(n, z, v) }
            fn log_prior(&self, z: &[f64]) -> f64 { (**self).log_prior(z) }
            fn grad_log_prior(&self, z: &[f64]) -> Vec<f64> { (**self).grad_log_prior(z) }
            fn hvp_log_prior(&self, z: &[f64], v: &[f64]) -> Vec<f64> { (**self).hvp_log_prior(z, v) }
        }
    )*};
}

forward_model!(&M, Box<M>, Arc<M>);

fn check<M: Model + ?Sized>(model: &M, n: usize, z: &[f64]) -> Result<()> {
    if n >= model.num_data() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: model.num_data(),
        });
    }
    if z.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: z.len(),
        });
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent point"));
    }
    Ok(())
}

/// `k_n(z) = N · log p(x_n | z) + log p(z)`.
pub fn k_n<M: Model + ?Sized>(model: &M, n: usize, z: &[f64]) -> Result<f64> {
    check(model, n, z)?;
    Ok(model.num_data() as f64 * model.log_lik(n, z) + model.log_prior(z))
}

pub fn grad_k_n<M: Model + ?Sized>(model: &M, n: usize, z: &[f64]) -> Result<Vec<f64>> {
    check(model, n, z)?;
    let scale = model.num_data() as f64;
    let mut g = model.grad_log_prior(z);
    for (gi, li) in g.iter_mut().zip(model.grad_log_lik(n, z)) {
        *gi += scale * li;
    }
    Ok(g)
}

/// `∇²k_n(z) · v`, never forming the Hessian.
pub fn hvp_k_n<M: Model + ?Sized>(model: &M, n: usize, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check(model, n, z)?;
    if v.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: v.len(),
        });
    }
    let scale = model.num_data() as f64;
    let mut h = model.hvp_log_prior(z, v);
    for (hi, li) in h.iter_mut().zip(model.hvp_log_lik(n, z, v)) {
        *hi += scale * li;
    }
    Ok(h)
}

/// Full log-joint `Σ_n log p(x_n | z) + log p(z)`.
pub fn log_joint<M: Model + ?Sized>(model: &M, z: &[f64]) -> f64 {
    (0..model.num_data()).map(|n| model.log_lik(n, z)).sum::<f64>() + model.log_prior(z)
}

/// Numerically stable `log(1 + e^a)`.
pub(crate) fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Finite-difference checks shared by the model tests.

    use super::*;
    use crate::rng::RngStream;

    pub fn central_grad(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
        let mut zp = z.to_vec();
        (0..z.len())
            .map(|i| {
                let orig = zp[i];
                zp[i] = orig + h;
                let fp = f(&zp);
                zp[i] = orig - h;
                let fm = f(&zp);
                zp[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
        num / den
    }

    /// Gradient and HVP against central differences at 20 random triples,
    /// plus HVP linearity and symmetry.
    pub fn check_contract<M: Model>(model: &M, seed: u64, z_scale: f64) {
        let d = model.dim();
        let root = RngStream::new(seed, 99);
        for t in 0..20u64 {
            let s = root.child(t);
            let n = (s.child(0).rng().next_u64_mod(model.num_data() as u64)) as usize;
            let z: Vec<f64> = s.child(1).standard_normal(d).unwrap().iter().map(|x| x * z_scale).collect();
            let v = s.child(2).standard_normal(d).unwrap();
            let u = s.child(3).standard_normal(d).unwrap();

            let g = grad_k_n(model, n, &z).unwrap();
            let fd = central_grad(|zz| k_n(model, n, zz).unwrap(), &z, 1e-5);
            assert!(rel_err(&g, &fd) <= 1e-5, "grad rel err {}", rel_err(&g, &fd));

            let hv = hvp_k_n(model, n, &z, &v).unwrap();
            let fd_h: Vec<f64> = {
                let h = 1e-5;
                let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                let gp = grad_k_n(model, n, &zp).unwrap();
                let gm = grad_k_n(model, n, &zm).unwrap();
                gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            };
            assert!(rel_err(&hv, &fd_h) <= 1e-5, "hvp rel err {}", rel_err(&hv, &fd_h));

            // linearity
            let (a, b) = (1.7, -0.6);
            let comb: Vec<f64> = v.iter().zip(&u).map(|(x, y)| a * x + b * y).collect();
            let lhs = hvp_k_n(model, n, &z, &comb).unwrap();
            let hu = hvp_k_n(model, n, &z, &u).unwrap();
            let rhs: Vec<f64> = hv.iter().zip(&hu).map(|(x, y)| a * x + b * y).collect();
            assert!(rel_err(&lhs, &rhs) <= 1e-10);

            // symmetry
            let uhv = crate::types::dot(&u, &hv);
            let vhu = crate::types::dot(&v, &hu);
            assert!((uhv - vhu).abs() <= 1e-10 * uhv.abs().max(vhu.abs()).max(1.0));
        }
    }

    trait NextMod {
        fn next_u64_mod(&mut self, m: u64) -> u64;
    }

    impl<R: rand::RngCore> NextMod for R {
        fn next_u64_mod(&mut self, m: u64) -> u64 {
            self.next_u64() % m
        }
    }

    /// The average over all `n` of `∇k_n(z)` is the gradient of the full
    /// log-joint.
    pub fn check_enumeration<M: Model>(model: &M, z: &[f64]) {
        let nn = model.num_data();
        let mut avg = vec![0.0; model.dim()];
        for n in 0..nn {
            let g = grad_k_n(model, n, z).unwrap();
            for (a, gi) in avg.iter_mut().zip(g) {
                *a += gi / nn as f64;
            }
        }
        let fd = central_grad(|zz| log_joint(model, zz), z, 1e-5);
        assert!(rel_err(&avg, &fd) <= 1e-6, "enumeration rel err {}", rel_err(&avg, &fd));
    }
}
