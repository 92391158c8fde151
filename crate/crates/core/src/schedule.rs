//! Continuous-time variance-preserving schedule, closed-form forward noising
//! and the data-prediction multistep solver used at inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest diffusion time used anywhere: the weak-noise level of frozen
/// far-term groups and the solver's terminal time.
pub const WEAK_NOISE_T: f64 = 0.001;

/// `β(t) = β₀ + (β₁ − β₀)·t` on normalized time `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    /// `ᾱ(t) = exp(−β₀t − ½(β₁−β₀)t²)`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok((-self.beta_min * t - 0.5 * (self.beta_max - self.beta_min) * t * t).exp())
    }

    /// Signal scale `√ᾱ(t)`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// Noise scale `√(1 − ᾱ(t))`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok((-self.log_alpha_bar(t)?.exp_m1()).max(0.0).sqrt())
    }

    /// `ln ᾱ(t)`, exact for small `t`.
    pub fn log_alpha_bar(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(-self.beta_min * t - 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    /// Half log-SNR `λ(t) = ln(α/σ)`. Infinite at `t = 0`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let la = self.log_alpha_bar(t)?;
        // ln α − ln σ = ½ ln ᾱ − ½ ln(1 − ᾱ)
        Ok(0.5 * la - 0.5 * (-la.exp_m1()).ln())
    }
}

/// `√ᾱ(t)·x₀ + √(1−ᾱ(t))·ε`, element-wise.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Dimension(format!(
            "segment has {} values, noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    let a = schedule.alpha(t)?;
    let s = schedule.sigma(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Previous data prediction and the time it was made at, for the
/// second-order multistep correction.
#[derive(Clone, Copy, Debug)]
pub struct PreviousPrediction<'a> {
    pub x0: &'a [f64],
    pub t: f64,
}

/// One data-prediction solver step from `t_from` to `t_to`.
///
/// First order: `x_to = (σ_to/σ_from)·x_t − α_to·(e^{−h} − 1)·x̂₀` with
/// `h = λ(t_to) − λ(t_from)`. With a previous prediction the x̂₀ term is
/// replaced by its linear extrapolation in λ:
/// `x̂₀ + (x̂₀ − x̂₀_prev)/(2r)`, `r = (λ_from − λ_prev)/h`.
pub fn solver_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    x0_hat: &[f64],
    t_from: f64,
    t_to: f64,
    prev: Option<PreviousPrediction<'_>>,
) -> Result<Vec<f64>> {
    if t_from <= t_to {
        return Err(Error::Domain(format!(
            "solver must move backwards in time, got {t_from} -> {t_to}"
        )));
    }
    if x_t.len() != x0_hat.len() {
        return Err(Error::Dimension("state and prediction lengths differ".into()));
    }
    let (l_from, l_to) = (schedule.log_snr(t_from)?, schedule.log_snr(t_to)?);
    let h = l_to - l_from;
    let ratio = schedule.sigma(t_to)? / schedule.sigma(t_from)?;
    let coef = -schedule.alpha(t_to)? * (-h).exp_m1();
    let data: Vec<f64> = match prev {
        None => x_t.iter().zip(x0_hat).map(|(x, d)| ratio * x + coef * d).collect(),
        Some(p) => {
            if p.x0.len() != x0_hat.len() {
                return Err(Error::Dimension("previous prediction length".into()));
            }
            if p.t <= t_from {
                return Err(Error::Domain(format!(
                    "previous prediction time {} must precede {t_from}",
                    p.t
                )));
            }
            let r = (l_from - schedule.log_snr(p.t)?) / h;
            let k = 0.5 / r;
            x_t.iter()
                .zip(x0_hat)
                .zip(p.x0)
                .map(|((x, d), dp)| ratio * x + coef * (d + k * (d - dp)))
                .collect()
        }
    };
    Ok(data)
}

/// Decreasing inference time grid; one model evaluation per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverPlan {
    pub grid: Vec<f64>,
    /// Use the multistep correction from the second step on.
    pub second_order: bool,
}

impl Default for SolverPlan {
    fn default() -> Self {
        Self {
            grid: vec![1.0, 0.5, WEAK_NOISE_T],
            second_order: true,
        }
    }
}

impl SolverPlan {
    pub fn new(grid: Vec<f64>, second_order: bool) -> Result<Self> {
        let plan = Self { grid, second_order };
        plan.validate()?;
        Ok(plan)
    }

    /// `steps` evaluations on a grid uniform in `t` from 1 to the weak-noise floor.
    pub fn uniform(steps: usize, second_order: bool) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("at least one solver step".into()));
        }
        let grid = (0..=steps)
            .map(|i| {
                if i == steps {
                    WEAK_NOISE_T
                } else {
                    1.0 - i as f64 / steps as f64
                }
            })
            .collect();
        Self::new(grid, second_order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(Error::Config("solver grid needs at least two times".into()));
        }
        if self.grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "solver grid {:?} is not strictly decreasing",
                self.grid
            )));
        }
        if self.grid[0] > 1.0 || *self.grid.last().unwrap() < WEAK_NOISE_T {
            return Err(Error::Config(format!(
                "solver grid {:?} must lie in [{WEAK_NOISE_T}, 1]",
                self.grid
            )));
        }
        Ok(())
    }

    /// Number of model evaluations.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn order(&self, step: usize) -> usize {
        if self.second_order && step > 0 {
            2
        } else {
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_vec, stream, Purpose};

    /// Composite Simpson on `∫₀ᵗ β(s) ds`, independent of the closed form.
    fn alpha_bar_quadrature(s: &NoiseSchedule, t: f64) -> f64 {
        let n = 2000;
        let h = t / n as f64;
        let beta = |x: f64| s.beta_min + (s.beta_max - s.beta_min) * x;
        let mut acc = beta(0.0) + beta(t);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * beta(i as f64 * h);
        }
        (-(acc * h / 3.0)).exp()
    }

    #[test]
    fn alpha_bar_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0.0).unwrap(), 1.0);
        let a1 = s.alpha_bar(1.0).unwrap();
        let q1 = alpha_bar_quadrature(&s, 1.0);
        assert!(((a1 - q1) / q1).abs() < 1e-7);
        assert!((a1 - (-10.05f64).exp()).abs() < 1e-18);
        assert!((a1 - 4.32e-5).abs() < 1e-7);
        let a = s.alpha_bar(0.001).unwrap();
        assert!(((a - alpha_bar_quadrature(&s, 0.001)) / a).abs() < 1e-12);
        assert!((a - 0.99989).abs() < 1e-5);
        assert!(matches!(s.alpha_bar(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha_bar(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn derived_quantities_are_monotone() {
        let s = NoiseSchedule::default();
        let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        for w in grid.windows(2) {
            assert!(s.alpha_bar(w[1]).unwrap() < s.alpha_bar(w[0]).unwrap());
            assert!(s.sigma(w[1]).unwrap() > s.sigma(w[0]).unwrap());
            assert!(s.log_snr(w[1]).unwrap() < s.log_snr(w[0]).unwrap());
        }
        for &t in &grid {
            let (a, sg) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
            assert!((a * a + sg * sg - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::new(0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::default();
        let x = [0.3, -1.2, 4.0];
        let e = [1.0, 2.0, -0.5];
        assert_eq!(forward_noise(&s, &x, 0.0, &e).unwrap(), x.to_vec());
        let z = forward_noise(&s, &[0.0; 3], 0.7, &e).unwrap();
        let sg = (1.0 - s.alpha_bar(0.7).unwrap()).sqrt();
        for (zi, ei) in z.iter().zip(e) {
            assert!((zi - sg * ei).abs() < 1e-15);
        }
        let ab = (-0.1 * 0.5 - 0.5 * 19.9 * 0.25f64).exp();
        let got = forward_noise(&s, &[1.0; 3], 0.5, &e).unwrap();
        for (g, ei) in got.iter().zip(e) {
            assert!((g - (ab.sqrt() + (1.0 - ab).sqrt() * ei)).abs() < 1e-14);
        }
        assert!(matches!(forward_noise(&s, &x, 0.5, &e[..2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_noise_is_affine() {
        let s = NoiseSchedule::default();
        let mut rng = stream(5, Purpose::Test, 0);
        let (x1, x2) = (normal_vec(&mut rng, 6), normal_vec(&mut rng, 6));
        let (e1, e2) = (normal_vec(&mut rng, 6), normal_vec(&mut rng, 6));
        let t = 0.37;
        let (a, b) = (0.3, -1.9);
        let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
        let lhs = forward_noise(&s, &mix(&x1, &x2), t, &mix(&e1, &e2)).unwrap();
        let rhs = mix(
            &forward_noise(&s, &x1, t, &e1).unwrap(),
            &forward_noise(&s, &x2, t, &e2).unwrap(),
        );
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-13);
        }
        let zeros = vec![0.0; 6];
        let only_signal = forward_noise(&s, &x1, t, &zeros).unwrap();
        let only_noise = forward_noise(&s, &zeros, t, &e1).unwrap();
        let (al, sg) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
        for i in 0..6 {
            assert!((only_signal[i] - al * x1[i]).abs() < 1e-15);
            assert!((only_noise[i] - sg * e1[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn variance_is_preserved() {
        let s = NoiseSchedule::default();
        let mut rng = stream(9, Purpose::Test, 1);
        for &t in &[0.0, 0.001, 0.2, 0.5, 0.9, 1.0] {
            let x = normal_vec(&mut rng, 100_000);
            let e = normal_vec(&mut rng, 100_000);
            let y = forward_noise(&s, &x, t, &e).unwrap();
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
            assert!((0.9..=1.1).contains(&var), "t={t} var={var}");
        }
    }

    #[test]
    fn step_with_exact_prediction_lands_on_forward_marginal() {
        let s = NoiseSchedule::default();
        let mut rng = stream(2, Purpose::Test, 2);
        let x0 = normal_vec(&mut rng, 12);
        let eps = normal_vec(&mut rng, 12);
        let x1 = forward_noise(&s, &x0, 0.8, &eps).unwrap();
        let x2 = solver_step(&s, &x1, &x0, 0.8, WEAK_NOISE_T, None).unwrap();
        let expect = forward_noise(&s, &x0, WEAK_NOISE_T, &eps).unwrap();
        for (a, b) in x2.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // Distance to the clean signal decomposes into the noise term and
        // the (1 − α) shrinkage of the signal.
        let err: f64 = x2.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bound = s.sigma(WEAK_NOISE_T).unwrap() * norm(&eps)
            + (1.0 - s.alpha(WEAK_NOISE_T).unwrap()) * norm(&x0);
        assert!(err <= bound + 1e-12);
    }

    #[test]
    fn zero_length_step_is_continuous() {
        let s = NoiseSchedule::default();
        let x = [0.5, -0.25, 2.0];
        let d = [1.0, 1.0, -1.0];
        let y = solver_step(&s, &x, &d, 0.5, 0.5 - 1e-12, None).unwrap();
        for (a, b) in y.iter().zip(x) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            solver_step(&s, &x, &d, 0.4, 0.5, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn second_order_step_is_exact_for_constant_prediction() {
        let s = NoiseSchedule::default();
        let plan = SolverPlan::default();
        let mut rng = stream(4, Purpose::Test, 3);
        let x0 = normal_vec(&mut rng, 9);
        let eps = normal_vec(&mut rng, 9);
        let mut x = forward_noise(&s, &x0, plan.grid[0], &eps).unwrap();
        let mut prev: Option<(Vec<f64>, f64)> = None;
        for i in 0..plan.steps() {
            let p = prev.as_ref().filter(|_| plan.order(i) == 2).map(|(v, t)| PreviousPrediction { x0: v, t: *t });
            x = solver_step(&s, &x, &x0, plan.grid[i], plan.grid[i + 1], p).unwrap();
            prev = Some((x0.clone(), plan.grid[i]));
        }
        let expect = forward_noise(&s, &x0, WEAK_NOISE_T, &eps).unwrap();
        for (a, b) in x.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multistep_correction_extrapolates_linearly_in_log_snr() {
        // For x̂₀(λ) linear in λ, the corrected term equals the prediction
        // extrapolated to the midpoint λ_from + h/2.
        let s = NoiseSchedule::default();
        let (tp, tf, tt) = (0.9, 0.5, 0.1);
        let (lp, lf, lt) = (s.log_snr(tp).unwrap(), s.log_snr(tf).unwrap(), s.log_snr(tt).unwrap());
        let line = |l: f64| 0.3 + 0.7 * l;
        let x = [0.0];
        let got = solver_step(&s, &x, &[line(lf)], tf, tt, Some(PreviousPrediction { x0: &[line(lp)], t: tp })).unwrap();
        let first = solver_step(&s, &x, &[line(lf + 0.5 * (lt - lf))], tf, tt, None).unwrap();
        assert!((got[0] - first[0]).abs() < 1e-12);
    }

    #[test]
    fn plan_validation() {
        assert!(SolverPlan::new(vec![1.0, 0.5, 0.001], true).is_ok());
        assert!(SolverPlan::new(vec![1.0, 1.0, 0.001], true).is_err());
        assert!(SolverPlan::new(vec![1.0, 0.0], true).is_err());
        assert!(SolverPlan::new(vec![1.0], true).is_err());
        let u = SolverPlan::uniform(2, true).unwrap();
        assert_eq!(u.grid, vec![1.0, 0.5, WEAK_NOISE_T]);
        assert_eq!((u.order(0), u.order(1)), (1, 2));
    }
}
