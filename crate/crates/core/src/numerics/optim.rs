use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    /// `β₁ᵏ` and `β₂ᵏ` kept as running products so the bias correction is
    /// the same in every build profile.
    beta_pows: (f64, f64),
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
            beta_pows: (1.0, 1.0),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. The decay is applied to the pre-update weights:
    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        self.beta_pows = (self.beta_pows.0 * c.beta1, self.beta_pows.1 * c.beta2);
        let (bc1, bc2) = (1.0 - self.beta_pows.0, 1.0 - self.beta_pows.1);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv *= 1.0 - c.lr * c.weight_decay;
                *pv -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = store(&[1.0, -2.0, 3.5]);
        let before = params.clone();
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        for _ in 0..3 {
            opt.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // From m=v=0 at t=1: m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        // after the decay factor (1 − lr·wd).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut params = store(&[2.0, -1.0]);
        let mut opt = AdamW::new(&params, cfg);
        let g = [0.5, -4.0];
        opt.step(&mut params, &[Tensor::new(vec![2], g.to_vec()).unwrap()]).unwrap();
        let got = params.get(params.ids().next().unwrap()).data().to_vec();
        let expect: Vec<f64> = [2.0f64, -1.0]
            .iter()
            .zip(g)
            .map(|(&p, g)| p * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8))
            .collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        // Second step, hand-rolled moments.
        let g2 = [0.25, 1.0];
        opt.step(&mut params, &[Tensor::new(vec![2], g2.to_vec()).unwrap()]).unwrap();
        let got2 = params.get(params.ids().next().unwrap()).data().to_vec();
        for i in 0..2 {
            let m = 0.9 * (0.1 * g[i]) + 0.1 * g2[i];
            let v = 0.999 * (0.001 * g[i] * g[i]) + 0.001 * g2[i] * g2[i];
            let mh = m / (1.0 - 0.81);
            let vh = v / (1.0 - 0.999f64 * 0.999);
            let e = expect[i] * (1.0 - 0.001) - 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((got2[i] - e).abs() < 1e-14, "{} vs {e}", got2[i]);
        }
    }

    #[test]
    fn decay_only_shrinks_monotonically() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut params = store(&[1.0, -1.0]);
        let mut opt = AdamW::new(&params, cfg);
        let id = params.ids().next().unwrap();
        let mut prev = params.get(id).data().to_vec();
        for _ in 0..2 {
            opt.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
            let now = params.get(id).data().to_vec();
            for (a, b) in now.iter().zip(&prev) {
                assert!(a.abs() < b.abs());
                assert_eq!(a.signum(), b.signum());
            }
            prev = now;
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-15);
    }
}
