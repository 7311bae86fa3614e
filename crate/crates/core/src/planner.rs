//! Closed-form parameters for the iterated MLMC Picard scheme.
//!
//! Given a target accuracy `ε < e⁻¹` and the theory constant `c`:
//!
//! * `M* = ⌊ln ε⁻¹⌋` Picard steps,
//! * weights `w_m = max{(M*−m−2)!/c^{M*−m−2}, 1}` for `m ≤ M*−2`, else `1`,
//! * per-step accuracies `ε_m = √w_m·ε`,
//! * `L*_m = |⌊ln ε_m⁻¹⌋|` if `ε_m ≤ e`, else `1`; `L* = max_m L*_m`,
//! * `N*_{m,ℓ} = ⌈ε_m⁻²(L*+1)h_ℓ⌉` with `h_ℓ = T·2^{−ℓ}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CostMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub epsilon: f64,
    pub c: f64,
    pub horizon: f64,
    #[serde(rename = "M_star")]
    pub m_star: usize,
    #[serde(rename = "L_star")]
    pub l_star: usize,
    /// `L*_m` for `m = 1..=M*`.
    #[serde(rename = "L_star_m")]
    pub l_star_m: Vec<usize>,
    pub weights: Vec<f64>,
    pub eps_m: Vec<f64>,
    /// `samples[m-1][ℓ] = N*_{m,ℓ}`.
    pub samples: Vec<Vec<u64>>,
    pub predicted_cost: PredictedCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedCost {
    pub interacting: f64,
    pub moment: f64,
}

impl PredictedCost {
    pub fn get(&self, mode: CostMode) -> f64 {
        match mode {
            CostMode::Interacting => self.interacting,
            CostMode::Moment => self.moment,
        }
    }
}

impl Plan {
    /// Step width `h_ℓ`.
    pub fn step(&self, level: usize) -> f64 {
        self.horizon * (-(level as f64)).exp2()
    }

    pub fn predicted_cost(&self, mode: CostMode) -> f64 {
        self.predicted_cost.get(mode)
    }

    pub fn total_particles(&self) -> u64 {
        self.samples.iter().flatten().sum()
    }
}

/// `k!/c^k`, accumulated as a product to stay finite for moderate `k`.
fn factorial_over_power(k: usize, c: f64) -> f64 {
    (1..=k).fold(1.0, |acc, j| acc * j as f64 / c)
}

/// `c^k/k!`.
fn power_over_factorial(k: usize, c: f64) -> f64 {
    (1..=k).fold(1.0, |acc, j| acc * c / j as f64)
}

/// Weight sequence `w_1..w_{M*}`.
pub fn weights(m_star: usize, c: f64) -> Vec<f64> {
    (1..=m_star)
        .map(|m| {
            if m + 2 <= m_star {
                factorial_over_power(m_star - m - 2, c).max(1.0)
            } else {
                1.0
            }
        })
        .collect()
}

pub fn plan(epsilon: f64, c: f64, horizon: f64) -> Result<Plan> {
    let threshold = (-1.0f64).exp();
    if !(epsilon > 0.0 && epsilon < threshold) {
        return Err(Error::parameter(format!(
            "epsilon must lie in (0, e^-1) = (0, {threshold:.6}), got {epsilon}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::parameter(format!("theory constant c must be positive, got {c}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::parameter(format!("horizon must be positive, got {horizon}")));
    }
    let m_star = (1.0 / epsilon).ln().floor() as usize;
    let w = weights(m_star, c);
    let eps_m: Vec<f64> = w.iter().map(|wm| wm.sqrt() * epsilon).collect();
    let e = 1.0f64.exp();
    let l_star_m: Vec<usize> = eps_m
        .iter()
        .map(|&em| {
            if em <= e {
                (1.0 / em).ln().floor().abs() as usize
            } else {
                1
            }
        })
        .collect();
    let l_star = *l_star_m.iter().max().expect("M* >= 1");
    let samples: Vec<Vec<u64>> = w
        .iter()
        .map(|&wm| {
            let inv_eps2 = 1.0 / (wm * epsilon * epsilon);
            (0..=l_star)
                .map(|l| {
                    let h = horizon * (-(l as f64)).exp2();
                    ((inv_eps2 * (l_star + 1) as f64 * h).ceil() as u64).max(1)
                })
                .collect()
        })
        .collect();
    let levels: Vec<usize> = (0..=l_star).collect();
    let predicted_cost = PredictedCost {
        interacting: predicted_cost(&samples, &levels, horizon, CostMode::Interacting),
        moment: predicted_cost(&samples, &levels, horizon, CostMode::Moment),
    };
    Ok(Plan {
        epsilon,
        c,
        horizon,
        m_star,
        l_star,
        l_star_m,
        weights: w,
        eps_m,
        samples,
        predicted_cost,
    })
}

/// Predicted cost of a Picard run with `samples[m-1][j]` particles on the
/// grid of level `levels[j]`.
///
/// Interacting: `Σ_j h_j⁻¹N_{1,j} + Σ_{m≥2} (Σ_j h_j⁻¹N_{m,j})·(Σ_j N_{m−1,j})`.
/// Moment: `Σ_j h_j⁻¹N_{1,j} + Σ_{m≥2} (Σ_j h_j⁻¹N_{m,j} + Σ_j h_j⁻¹N_{m−1,j})`.
pub fn predicted_cost(samples: &[Vec<u64>], levels: &[usize], horizon: f64, mode: CostMode) -> f64 {
    let weighted = |row: &[u64]| -> f64 {
        row.iter()
            .zip(levels)
            .map(|(&n, &l)| n as f64 * (l as f64).exp2() / horizon)
            .sum()
    };
    let mut total = 0.0;
    for (m, row) in samples.iter().enumerate() {
        let own = weighted(row);
        if m == 0 {
            total += own;
            continue;
        }
        let prev = &samples[m - 1];
        total += match mode {
            CostMode::Interacting => own * prev.iter().map(|&n| n as f64).sum::<f64>(),
            CostMode::Moment => own + weighted(prev),
        };
    }
    total
}

/// Predicted cost of the classical particle system: `h⁻¹N²` interacting,
/// `2h⁻¹N` in moment form (one simulation and one moment pass per step).
pub fn classical_predicted_cost(particles: u64, level: usize, horizon: f64, mode: CostMode) -> f64 {
    let steps = (level as f64).exp2() / horizon;
    let n = particles as f64;
    match mode {
        CostMode::Interacting => steps * n * n,
        CostMode::Moment => 2.0 * steps * n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    /// `w_m ≥ w_{M*} = 1`.
    pub minimum: bool,
    pub weighted_sum: f64,
    pub weighted_bound: f64,
    /// `Σ c^{M*−m}/(M*−m)!·w_m ≤ e^c + c²`.
    pub weight: bool,
    pub inverse_sum: f64,
    pub inverse_bound: f64,
    /// `Σ w_m⁻¹ ≤ e^c + 2`.
    pub cost: bool,
}

impl WeightReport {
    pub fn all_pass(&self) -> bool {
        self.minimum && self.weight && self.cost
    }
}

pub fn verify_weights(w: &[f64], c: f64) -> WeightReport {
    let m_star = w.len();
    let minimum = w.last().is_some_and(|&last| last == 1.0) && w.iter().all(|&x| x >= 1.0);
    let weighted_sum: f64 = w
        .iter()
        .enumerate()
        .map(|(i, &wm)| power_over_factorial(m_star - (i + 1), c) * wm)
        .sum();
    let inverse_sum: f64 = w.iter().map(|&wm| 1.0 / wm).sum();
    let weighted_bound = c.exp() + c * c;
    let inverse_bound = c.exp() + 2.0;
    WeightReport {
        minimum,
        weighted_sum,
        weighted_bound,
        weight: weighted_sum <= weighted_bound,
        inverse_sum,
        inverse_bound,
        cost: inverse_sum <= inverse_bound,
    }
}

/// Left side of the error budget divided by `ε²`:
/// `[Σ_m c^{M*−m}/(M*−m)!·(h_{L*}² + Σ_ℓ h_ℓ/N*_{m,ℓ}) + c^{M*−1}/M*!] / ε²`.
pub fn error_budget_ratio(plan: &Plan) -> f64 {
    let m_star = plan.m_star;
    let c = plan.c;
    let h_l = plan.step(plan.l_star);
    let mut total = 0.0;
    for (i, row) in plan.samples.iter().enumerate() {
        let m = i + 1;
        let variance: f64 = row
            .iter()
            .enumerate()
            .map(|(l, &n)| plan.step(l) / n as f64)
            .sum();
        total += power_over_factorial(m_star - m, c) * (h_l * h_l + variance);
    }
    total += power_over_factorial(m_star - 1, c) / m_star as f64;
    total / (plan.epsilon * plan.epsilon)
}

/// Whether `h_{L*} ≤ max(T, T/(2e), 2)·ε_m` for every `m`.
pub fn level_bound_holds(plan: &Plan) -> bool {
    let t = plan.horizon;
    let k = t.max(t / (2.0 * 1.0f64.exp())).max(2.0);
    let h = plan.step(plan.l_star);
    plan.eps_m.iter().all(|&em| h <= k * em)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_epsilon() {
        let p = plan((-1.0f64).exp() - 1e-9, 1.0, 1.0).unwrap();
        assert_eq!(p.m_star, 1);
        assert_eq!(p.weights, vec![1.0]);
    }

    #[test]
    fn epsilon_005() {
        let p = plan(0.05, 1.0, 1.0).unwrap();
        assert_eq!(p.m_star, 2);
        assert_eq!(p.l_star, 2);
        assert_eq!(p.samples, vec![vec![1200, 600, 300]; 2]);
    }

    #[test]
    fn weights_for_five_steps() {
        assert_eq!(weights(5, 1.0), vec![2.0, 1.0, 1.0, 1.0, 1.0]);
        // c = 2: w_1 = max(2!/2^2, 1) = 1; c = 0.5: w_1 = 2!·4 = 8, w_2 = 2.
        assert_eq!(weights(5, 2.0), vec![1.0; 5]);
        assert_eq!(weights(5, 0.5), vec![8.0, 2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_large_epsilon() {
        let err = plan(0.5, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Parameter(ref m) if m.contains("e^-1")));
        assert!(plan(0.1, 0.0, 1.0).is_err());
        assert!(plan(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn large_weights_give_unit_levels() {
        // c small makes early weights huge so ε_m > e and L*_m falls back to 1.
        let p = plan(1e-4, 0.05, 1.0).unwrap();
        assert_eq!(p.m_star, 9);
        assert!(p.eps_m[0] > 1.0f64.exp());
        assert_eq!(p.l_star_m[0], 1);
        assert_eq!(p.l_star, 9);
    }

    #[test]
    fn cost_examples() {
        let n = vec![vec![2, 1], vec![4, 2]];
        assert_eq!(predicted_cost(&n, &[0, 1], 1.0, CostMode::Interacting), 28.0);
        assert_eq!(predicted_cost(&n, &[0, 1], 1.0, CostMode::Moment), 16.0);
        let one = vec![vec![2, 1]];
        assert_eq!(predicted_cost(&one, &[0, 1], 1.0, CostMode::Interacting), 4.0);
        assert_eq!(predicted_cost(&one, &[0, 1], 1.0, CostMode::Moment), 4.0);
    }

    #[test]
    fn weight_report_examples() {
        let r = verify_weights(&[1.0], 1.0);
        assert!(r.all_pass());
        assert_eq!(r.weighted_sum, 1.0);
        assert!(verify_weights(&weights(5, 1.0), 1.0).all_pass());
        let bad = verify_weights(&[0.5, 1.0], 1.0);
        assert!(!bad.minimum);
    }

    #[test]
    fn plan_round_trips_through_json() {
        let p = plan(0.03, 1.5, 2.0).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"M_star\":3"));
        let back: Plan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plan_invariants(log_eps in 1.0f64..12.0, c in 0.2f64..4.0, horizon in 0.25f64..4.0) {
                let eps = (-log_eps).exp() * 0.999_999;
                let p = plan(eps, c, horizon).unwrap();
                prop_assert_eq!(p.m_star, (1.0 / eps).ln().floor() as usize);
                prop_assert_eq!(p.weights.len(), p.m_star);
                prop_assert_eq!(*p.weights.last().unwrap(), 1.0);
                prop_assert!(p.weights.iter().all(|&w| w >= 1.0));
                for (m, row) in p.samples.iter().enumerate() {
                    prop_assert_eq!(row.len(), p.l_star + 1);
                    for (l, &n) in row.iter().enumerate() {
                        let exact = (p.l_star + 1) as f64 * p.step(l) / (p.weights[m] * eps * eps);
                        prop_assert!(n >= 1);
                        prop_assert!((n as f64) >= exact - 1e-9 * exact);
                        prop_assert!((n as f64) < exact + 1.0 + 1e-9 * exact);
                    }
                }
            }
        }
    }
}
