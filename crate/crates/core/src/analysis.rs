//! Reference values, MSE studies, conditional variance decay and slope fits.

use serde::{Deserialize, Serialize};

use crate::config::ReferenceSettings;
use crate::error::{Error, Result};
use crate::models::{model_by_name, Model, Payoff};
use crate::planner;
use crate::schemes::{simulate, InitialMeasure, SchemeConfig, SchemeKind, SimulationOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClosedForm,
    MomentOde,
    FineClassical,
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub model: String,
    pub payoff: String,
    pub t: f64,
    pub value: f64,
    /// Statistical error bar; zero for deterministic references.
    pub std_error: f64,
    pub provenance: Provenance,
}

/// `ln Φ(z)` for the standard normal CDF, accurate in both tails.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > 0.0 {
        (-0.5 * libm::erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > -30.0 {
        (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        // Mills-ratio series: Φ(z) ≈ φ(z)/|z|·(1 − z⁻² + 3z⁻⁴ − 15z⁻⁶ + 105z⁻⁸).
        let r = 1.0 / (z * z);
        let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
        -0.5 * z * z - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `F̄_t(x) = P(X_t ≥ x)` for the Burgers model, via the Cole–Hopf solution
/// `Φ(a) / (e^{16x−8t}Φ(b) + Φ(a))`, `a = (4t−4x)/√t`, `b = 4x/√t`, written as
/// a logistic function of a log-domain exponent.
pub fn burgers_cdf(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!(
            "the Burgers closed form needs t > 0, got {t} (at t = 0 the law is a point mass)"
        )));
    }
    if x.is_nan() {
        return Err(Error::domain("x is NaN"));
    }
    let s = t.sqrt();
    let a = (4.0 * t - 4.0 * x) / s;
    let b = 4.0 * x / s;
    let exponent = 16.0 * x - 8.0 * t + log_normal_cdf(b) - log_normal_cdf(a);
    Ok(1.0 / (1.0 + exponent.exp()))
}

/// Right-hand side of the moment system of the polynomial-drift model
/// `dX = (2X + E[X] − X·E[X²])dt + X dW`:
/// `m1' = 3m1 − m1·m2`, `m2' = 5m2 + 2m1² − 2m2²`.
pub fn polynomial_moment_rhs(m: [f64; 2]) -> [f64; 2] {
    let [m1, m2] = m;
    [3.0 * m1 - m1 * m2, 5.0 * m2 + 2.0 * m1 * m1 - 2.0 * m2 * m2]
}

/// `(E[X_t], E[X_t²])` on a uniform grid of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentOdePath {
    pub step: f64,
    pub values: Vec<[f64; 2]>,
}

impl MomentOdePath {
    /// Linear interpolation between grid values.
    pub fn at(&self, t: f64) -> Result<[f64; 2]> {
        let horizon = self.step * (self.values.len() - 1) as f64;
        if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::domain(format!("time {t} outside [0, {horizon}]")));
        }
        let pos = (t / self.step).min((self.values.len() - 1) as f64);
        let k = (pos.floor() as usize).min(self.values.len() - 2);
        let w = pos - k as f64;
        let (a, b) = (self.values[k], self.values[k + 1]);
        Ok([a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])])
    }

    pub fn terminal(&self) -> [f64; 2] {
        *self.values.last().expect("path is never empty")
    }
}

/// Heun's method (second order) on `[0, 1]` from `E[X_0] = E[X_0²] = 1`.
pub fn moment_ode_reference(h_ref: f64) -> Result<MomentOdePath> {
    if !(h_ref > 0.0 && h_ref <= 1e-3) {
        return Err(Error::parameter(format!("h_ref must lie in (0, 1e-3], got {h_ref}")));
    }
    let steps = (1.0 / h_ref).round() as usize;
    if ((steps as f64) * h_ref - 1.0).abs() > 1e-9 {
        return Err(Error::parameter(format!("1/h_ref must be an integer, got h_ref = {h_ref}")));
    }
    let h = 1.0 / steps as f64;
    let f = polynomial_moment_rhs;
    let axpy = |y: [f64; 2], a: f64, k: [f64; 2]| [y[0] + a * k[0], y[1] + a * k[1]];
    let mut y = [1.0, 1.0];
    let mut values = Vec::with_capacity(steps + 1);
    values.push(y);
    for k in 0..steps {
        let k1 = f(y);
        let k2 = f(axpy(y, h, k1));
        for c in 0..2 {
            y[c] += h / 2.0 * (k1[c] + k2[c]);
        }
        if !(y[0].abs() <= 1e10 && y[1].abs() <= 1e10) {
            return Err(Error::Instability(format!(
                "moment ODE left |value| <= 1e10 at t = {}",
                (k + 1) as f64 * h
            )));
        }
        values.push(y);
    }
    Ok(MomentOdePath { step: h, values })
}

/// Classical-scheme reference `⟨μ^N_T, P⟩` with error bar `sd(P)/√N`.
pub fn fine_classical_reference(
    model: &Model,
    particles: u64,
    level: usize,
    payoff: &Payoff,
    seed: u64,
    workers: usize,
) -> Result<ReferenceValue> {
    if particles < 100_000 || level < 8 {
        return Err(Error::parameter(format!(
            "a fine classical reference needs N >= 1e5 and level >= 8, got N = {particles}, level = {level}"
        )));
    }
    let model = model.clone().with_payoff(payoff.clone());
    let config = SchemeConfig::classical(particles, level, seed).record_level(0).workers(workers);
    let out = simulate(&model, &config)?;
    let cloud = &out.measure.terms()[0].fine;
    let values: Vec<f64> = (0..cloud.count()).map(|i| payoff.eval(cloud.terminal(i))).collect();
    let (mean, var) = mean_and_variance(&values);
    Ok(ReferenceValue {
        model: model.name.clone(),
        payoff: payoff.descriptor().unwrap_or_else(|| "custom".into()),
        t: model.horizon,
        value: mean,
        std_error: (var / values.len() as f64).sqrt(),
        provenance: Provenance::FineClassical,
    })
}

/// The most accurate available reference for `⟨μ_T, P⟩`: the supplied value,
/// a closed form or the
/// moment ODE when the model keeps its default initial law and the payoff has
/// one, otherwise a fine classical run.
pub fn default_reference(model: &Model, settings: &ReferenceSettings, workers: usize) -> Result<ReferenceValue> {
    let t = model.horizon;
    let payoff = &model.payoff;
    let descriptor = payoff.descriptor().unwrap_or_else(|| "custom".into());
    let stock = model_by_name(&model.name).ok();
    let default_law = stock.as_ref().is_some_and(|m| m.kernel.initial_law() == model.kernel.initial_law());
    let exact = |value: f64, provenance: Provenance| ReferenceValue {
        model: model.name.clone(),
        payoff: descriptor.clone(),
        t,
        value,
        std_error: 0.0,
        provenance,
    };
    if let Some(v) = settings.value {
        return Ok(exact(v, Provenance::Supplied));
    }
    if let Payoff::Constant(c) = payoff {
        return Ok(exact(*c, Provenance::ClosedForm));
    }
    if default_law {
        match (model.name.as_str(), payoff) {
            ("burgers", Payoff::IndicatorGe(a)) => return Ok(exact(burgers_cdf(t, *a)?, Provenance::ClosedForm)),
            ("polynomial", Payoff::Identity | Payoff::Square) if t <= 1.0 => {
                let m = moment_ode_reference(settings.h_ref)?.at(t)?;
                let value = if *payoff == Payoff::Identity { m[0] } else { m[1] };
                return Ok(exact(value, Provenance::MomentOde));
            }
            ("ou", Payoff::Identity) => return Ok(exact((-t).exp(), Provenance::ClosedForm)),
            ("ou", Payoff::Square) => {
                let decay = (-2.0 * t).exp();
                return Ok(exact(decay + (1.0 - decay) / 2.0, Provenance::ClosedForm));
            }
            _ => {}
        }
    }
    fine_classical_reference(model, settings.particles, settings.level, payoff, settings.seed, workers)
}

/// Sample mean and unbiased sample variance (zero for fewer than two values).
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `(1/R)·Σ (estimate_r − reference)²`.
pub fn mse(estimates: &[f64], reference: f64) -> f64 {
    estimates.iter().map(|e| (e - reference) * (e - reference)).sum::<f64>() / estimates.len() as f64
}

/// Seed of replication `r`, decorrelated from neighbouring base seeds.
pub fn replication_seed(base: u64, replication: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(replication.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Accuracy-driven sizing of each method.
///
/// * `picard-mlmc`: the planned `N*_{m,ℓ}`;
/// * `picard-mc`: `M*` steps with `N_m = ⌈ε_m⁻²⌉` particles on level `⌈log₂(T/ε)⌉`;
/// * `classical`: `N = ⌈ε⁻²⌉` particles on level `⌈log₂(T/ε)⌉`.
pub fn method_config(kind: SchemeKind, epsilon: f64, c: f64, horizon: f64, seed: u64) -> Result<SchemeConfig> {
    let plan = planner::plan(epsilon, c, horizon)?;
    let level = (horizon / epsilon).log2().ceil().max(0.0) as usize;
    Ok(match kind {
        SchemeKind::PicardMlmc => SchemeConfig::from_plan(&plan, seed),
        SchemeKind::PicardMc => SchemeConfig::picard_mc(
            plan.eps_m.iter().map(|e| (1.0 / (e * e)).ceil() as u64).collect(),
            level,
            seed,
        ),
        SchemeKind::Classical => SchemeConfig::classical((1.0 / (epsilon * epsilon)).ceil() as u64, level, seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub seed: u64,
    pub estimate: f64,
    pub predicted_cost: f64,
    pub measured_cost: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub method: SchemeKind,
    pub epsilon: f64,
    pub replications: Vec<Replication>,
    pub reference: ReferenceValue,
    pub mse: f64,
    /// Mean measured kernel evaluations per replication.
    pub cost: f64,
    pub predicted_cost: f64,
    pub wall_seconds: f64,
}

impl MseReport {
    pub fn estimates(&self) -> Vec<f64> {
        self.replications.iter().map(|r| r.estimate).collect()
    }
}

/// Settings shared by all runs of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySettings {
    pub method: SchemeKind,
    pub c: f64,
    pub seed: u64,
    pub initial_measure: InitialMeasure,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub reports: Vec<MseReport>,
    /// First failure; reports up to it are kept.
    pub failure: Option<Error>,
}

/// Runs `replications` independently seeded estimates of `⟨μ_T, P⟩` per `ε`.
pub fn mse_study(
    model: &Model,
    settings: &StudySettings,
    epsilons: &[f64],
    replications: usize,
    reference: &ReferenceValue,
) -> StudyOutcome {
    let mut reports = Vec::new();
    if replications < 5 {
        return StudyOutcome {
            reports,
            failure: Some(Error::parameter("an MSE study needs at least 5 replications")),
        };
    }
    for &eps in epsilons {
        let mut reps = Vec::with_capacity(replications);
        for r in 0..replications {
            let seed = replication_seed(settings.seed, r as u64);
            let run = method_config(settings.method, eps, settings.c, model.horizon, seed).and_then(|cfg| {
                simulate(
                    model,
                    &cfg.initial_measure(settings.initial_measure).workers(settings.workers),
                )
            });
            match run {
                Ok(out) => reps.push(replication_from(seed, &out)),
                Err(e) => {
                    if !reps.is_empty() {
                        reports.push(report(settings.method, eps, reps, reference));
                    }
                    return StudyOutcome {
                        reports,
                        failure: Some(e),
                    };
                }
            }
        }
        reports.push(report(settings.method, eps, reps, reference));
    }
    StudyOutcome { reports, failure: None }
}

pub fn replication_from(seed: u64, out: &SimulationOutput) -> Replication {
    Replication {
        seed,
        estimate: out.terminal_estimate(),
        predicted_cost: out.cost.predicted,
        measured_cost: out.cost.measured,
        wall_seconds: out.wall_seconds,
    }
}

fn report(method: SchemeKind, epsilon: f64, replications: Vec<Replication>, reference: &ReferenceValue) -> MseReport {
    let n = replications.len() as f64;
    let estimates: Vec<f64> = replications.iter().map(|r| r.estimate).collect();
    MseReport {
        method,
        epsilon,
        mse: mse(&estimates, reference.value),
        cost: replications.iter().map(|r| r.measured_cost as f64).sum::<f64>() / n,
        predicted_cost: replications.iter().map(|r| r.predicted_cost).sum::<f64>() / n,
        wall_seconds: replications.iter().map(|r| r.wall_seconds).sum(),
        reference: reference.clone(),
        replications,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub picard_step: usize,
    pub level: usize,
    /// Sample variance of `P(Y_T^ℓ)` given the previous Picard measure.
    pub var_fine: f64,
    /// Sample variance of `P(Y_T^ℓ) − P(Y_T^{ℓ−1})`; equals `var_fine` on
    /// level 0, where the coarse member is zero.
    pub var_diff: f64,
}

/// Per-step, per-level conditional variances of an MLMC run. Within one run
/// the particles of step `m` are i.i.d. given `M^(m−1)`, so their sample
/// variances are conditional on the replayed previous measure.
pub fn variance_decay(model: &Model, config: &SchemeConfig, payoff: &Payoff) -> Result<Vec<VarianceRow>> {
    if config.kind() != SchemeKind::PicardMlmc {
        return Err(Error::Contract("variance decay needs a picard-mlmc configuration".into()));
    }
    let out = simulate(model, &config.clone().keep_history(true))?;
    Ok(variance_rows(&out, payoff))
}

pub fn variance_rows(output: &SimulationOutput, payoff: &Payoff) -> Vec<VarianceRow> {
    let mut rows = Vec::new();
    for measure in &output.history {
        for term in measure.terms() {
            let fine = &term.fine;
            let fine_values: Vec<f64> = (0..fine.count()).map(|i| payoff.eval(fine.terminal(i))).collect();
            let var_fine = mean_and_variance(&fine_values).1;
            let var_diff = match &term.coarse {
                Some(coarse) => {
                    let diffs: Vec<f64> = fine_values
                        .iter()
                        .enumerate()
                        .map(|(i, f)| f - payoff.eval(coarse.terminal(i)))
                        .collect();
                    mean_and_variance(&diffs).1
                }
                None => var_fine,
            };
            rows.push(VarianceRow {
                picard_step: measure.picard_index(),
                level: fine.level(),
                var_fine,
                var_diff,
            });
        }
    }
    rows
}

/// Ordinary least-squares slope.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::parameter("a slope fit needs at least 3 points"));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::parameter("slope fit points must be finite"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * n {
        return Err(Error::parameter("slope fit needs distinct x values"));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}
