use serde::{Deserialize, Serialize};

use crate::gaussian_model::{GaussianCloud, ParamGroup};
use crate::{Error, Real, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, in units of the scene extent.
    pub position: f64,
    /// Position rate at the last iteration relative to `position`; the decay
    /// in between is exponential.
    pub position_final_factor: f64,
    pub sh: f64,
    pub opacity: f64,
    pub log_scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            sh: 2.5e-3,
            opacity: 5e-2,
            log_scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.position_final_factor,
            self.sh,
            self.opacity,
            self.log_scale,
            self.rotation,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Concrete rates at `iteration` of a run of `iterations`, with positions
    /// scaled by `extent`.
    pub fn at(&self, iteration: u32, iterations: u32, extent: f64) -> GroupRates {
        let frac = if iterations == 0 {
            0.0
        } else {
            (iteration as f64 / iterations as f64).clamp(0.0, 1.0)
        };
        let start = self.position * extent;
        let position = if self.position_final_factor > 0.0 {
            (start.ln() * (1.0 - frac) + (start * self.position_final_factor).ln() * frac).exp()
        } else {
            start * (1.0 - frac)
        };
        GroupRates([position, self.log_scale, self.rotation, self.opacity, self.sh])
    }
}

/// Rates in [`ParamGroup::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates(pub [f64; 5]);

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self([lr; 5])
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        self.0[ParamGroup::ALL.iter().position(|&x| x == g).expect("listed group")]
    }
}

/// First and second moments, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: GaussianCloud<T>,
    pub v: GaussianCloud<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &GaussianCloud<T>) -> Self {
        let z = params.zeros_like();
        Self { m: z.clone(), v: z }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        Self {
            m: self.m.gather(rows),
            v: self.v.gather(rows),
        }
    }

    pub fn push_zero_row(&mut self) {
        self.m.push_zero_row();
        self.v.push_zero_row();
    }

    pub fn push_row_from(&mut self, src: &Self, i: usize) {
        self.m.push_row_from(&src.m, i);
        self.v.push_row_from(&src.v, i);
    }
}

/// Adam update of one flat slice. `step` counts from 1.
pub fn adam_update<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], lr: f64, step: u64) {
    let b1 = T::lit(BETA1);
    let b2 = T::lit(BETA2);
    let c1 = T::lit(1.0 - BETA1);
    let c2 = T::lit(1.0 - BETA2);
    let bias1 = T::lit(1.0 - BETA1.powf(step as f64));
    let bias2 = T::lit(1.0 - BETA2.powf(step as f64));
    let lr = T::lit(lr);
    let eps = T::lit(EPSILON);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam step on every parameter group.
pub fn adam_step<T: Real>(
    params: &mut GaussianCloud<T>,
    grads: &GaussianCloud<T>,
    state: &mut AdamState<T>,
    step: u64,
    rates: &GroupRates,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("Adam steps count from 1".into()));
    }
    for g in ParamGroup::ALL {
        let n = params.group(g).len();
        if grads.group(g).len() != n || state.m.group(g).len() != n || state.v.group(g).len() != n {
            return Err(Error::Dimension(format!(
                "{} has {n} values but gradient/state have {}/{}/{}",
                g.name(),
                grads.group(g).len(),
                state.m.group(g).len(),
                state.v.group(g).len()
            )));
        }
    }
    for g in ParamGroup::ALL {
        adam_update(
            params.group_mut(g),
            grads.group(g),
            state.m.group_mut(g),
            state.v.group_mut(g),
            rates.get(g),
            step,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(vals: f64) -> GaussianCloud<f64> {
        GaussianCloud::from_parts(
            vec![vals; 3],
            vec![vals; 3],
            vec![1.0, vals, vals, vals],
            vec![vals],
            vec![vals; 3],
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = cloud(0.3);
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut s, 1, &GroupRates::uniform(0.1)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[0.5], &mut m, &mut v, 0.01, 1);
        assert!((p[0] - (1.0 - 0.01 * (0.5 / (0.5 + 1e-15)))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = cloud(0.3);
        let mut s = AdamState::zeros_like(&p);
        let mut g = cloud(0.0);
        g.push_row_from(&cloud(0.0), 0);
        assert!(adam_step(&mut p, &g, &mut s, 1, &GroupRates::uniform(0.1)).is_err());
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut p = cloud(0.3);
            let mut s = AdamState::zeros_like(&p);
            for step in 1..=50 {
                let g = cloud((step as f64 * 0.7).sin());
                adam_step(&mut p, &g, &mut s, step, &GroupRates::uniform(0.01)).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn position_rate_decays_to_final_factor() {
        let lr = LearningRates::default();
        assert!((lr.at(0, 100, 2.0).get(ParamGroup::Position) - 3.2e-4).abs() < 1e-18);
        assert!((lr.at(100, 100, 2.0).get(ParamGroup::Position) - 3.2e-6).abs() < 1e-15);
        assert_eq!(lr.at(50, 100, 2.0).get(ParamGroup::Sh), 2.5e-3);
    }
}
