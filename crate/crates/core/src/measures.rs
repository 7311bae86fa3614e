//! Empirical, time-interpolated and multilevel signed measures.
//!
//! A [`ParticleCloud`] holds `N` trajectories sampled on the points of one
//! dyadic grid. Between grid points it is read as the linear interpolation
//! in time of the two neighbouring empirical measures (not of the particle
//! positions). An [`MlmcMeasure`] is the telescoping sum
//! `Σ_ℓ (μ̃^ℓ − μ̃^{ℓ−1})` of level pairs that share particle count and noise,
//! with no coarse part on the base level.
//!
//! Summation order is fixed: particles ascending within a cloud, then levels
//! ascending. Scalar averages use compensated summation.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{InteractingKernelModel, KernelModel, MomentKernelModel};
use crate::time_grid::TimeGrid;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Trajectories of `count` particles on the points of a dyadic grid.
///
/// Layout is particle-major: particle `i`, column `k`, component `c` lives at
/// `(i * columns + k) * dim + c`. A time-constant cloud has a single column
/// that is used for every `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    grid: TimeGrid,
    dim: usize,
    count: usize,
    time_constant: bool,
    states: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(grid: TimeGrid, dim: usize, count: usize, states: Vec<f64>) -> Result<Self> {
        Self::build(grid, dim, count, false, states)
    }

    /// A cloud frozen in time, e.g. the initial samples held for all `t`.
    pub fn constant(horizon: f64, dim: usize, samples: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::parameter("dimension must be positive"));
        }
        let count = samples.len() / dim;
        Self::build(TimeGrid::new(0, horizon)?, dim, count, true, samples)
    }

    fn build(grid: TimeGrid, dim: usize, count: usize, time_constant: bool, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(Error::parameter("a cloud needs a positive dimension and particle count"));
        }
        let columns = if time_constant { 1 } else { grid.len() };
        if states.len() != count * columns * dim {
            return Err(Error::parameter(format!(
                "cloud of {count} particles, {columns} columns, dimension {dim} needs {} values, got {}",
                count * columns * dim,
                states.len()
            )));
        }
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            let particle = pos / (columns * dim);
            let column = (pos / dim) % columns;
            return Err(Error::NonFinite {
                picard_step: 0,
                level: grid.level(),
                particle: particle as u64 + 1,
                time_index: column,
            });
        }
        Ok(Self {
            grid,
            dim,
            count,
            time_constant,
            states,
        })
    }

    pub fn level(&self) -> usize {
        self.grid.level()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_time_constant(&self) -> bool {
        self.time_constant
    }

    pub fn columns(&self) -> usize {
        if self.time_constant {
            1
        } else {
            self.grid.len()
        }
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// State of particle `i` (0-based) at grid column `k`.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let k = if self.time_constant { 0 } else { k };
        let start = (i * self.columns() + k) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn trajectory(&self, i: usize) -> &[f64] {
        let len = self.columns() * self.dim;
        &self.states[i * len..(i + 1) * len]
    }

    pub fn terminal(&self, i: usize) -> &[f64] {
        self.state(i, self.columns() - 1)
    }

    /// Locates point `index` of the level-`level` grid: `(column, λ)`.
    pub(crate) fn locate_dyadic(&self, level: usize, index: usize) -> (usize, f64) {
        if self.time_constant {
            (0, 0.0)
        } else {
            self.grid.locate_dyadic(level, index)
        }
    }

    pub(crate) fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if self.time_constant {
            if !(0.0..=self.horizon()).contains(&t) {
                return Err(Error::domain(format!("time {t} outside [0, {}]", self.horizon())));
            }
            Ok((0, 0.0))
        } else {
            self.grid.locate(t)
        }
    }

    /// Plain empirical average of `test` at column `k`.
    pub fn column_mean<F: Fn(&[f64]) -> f64>(&self, k: usize, test: F) -> f64 {
        let mut acc = CompensatedSum::default();
        for i in 0..self.count {
            acc.add(test(self.state(i, k)));
        }
        acc.value() / self.count as f64
    }

    /// Empirical averages of `test` at every column.
    pub fn column_means<F: Fn(&[f64]) -> f64 + Sync>(&self, test: F) -> Vec<f64> {
        (0..self.columns())
            .into_par_iter()
            .map(|k| self.column_mean(k, &test))
            .collect()
    }

    pub fn interpolated(&self) -> InterpolatedEmpirical<'_> {
        InterpolatedEmpirical { cloud: self }
    }

    /// Writes `particle,time_index,x0,..,x{d-1}` rows, particles 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "particle,time_index")?;
        for c in 0..self.dim {
            write!(w, ",x{c}")?;
        }
        writeln!(w)?;
        for i in 0..self.count {
            for k in 0..self.columns() {
                write!(w, "{},{}", i + 1, k)?;
                for v in self.state(i, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// `a + λ(b − a)`; exact when `a == b`.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * (b - a)
    }
}

/// Read-only view of a cloud as the time-interpolated empirical measure.
#[derive(Debug, Clone, Copy)]
pub struct InterpolatedEmpirical<'a> {
    cloud: &'a ParticleCloud,
}

impl<'a> InterpolatedEmpirical<'a> {
    pub fn cloud(&self) -> &'a ParticleCloud {
        self.cloud
    }

    pub fn eval<F: Fn(&[f64]) -> f64>(&self, test: F, t: f64) -> Result<f64> {
        let (k, w) = self.cloud.locate(t)?;
        Ok(self.eval_located(&test, k, w))
    }

    pub(crate) fn eval_located<F: Fn(&[f64]) -> f64>(&self, test: &F, k: usize, w: f64) -> f64 {
        let a = self.cloud.column_mean(k, test);
        if w == 0.0 {
            a
        } else {
            lerp(a, self.cloud.column_mean(k + 1, test), w)
        }
    }
}

/// One summand of the multilevel telescope.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTerm {
    pub fine: ParticleCloud,
    pub coarse: Option<ParticleCloud>,
}

impl LevelTerm {
    pub fn base(cloud: ParticleCloud) -> Self {
        Self {
            fine: cloud,
            coarse: None,
        }
    }

    pub fn pair(fine: ParticleCloud, coarse: ParticleCloud) -> Result<Self> {
        if fine.count() != coarse.count() {
            return Err(Error::parameter(format!(
                "level pair has {} fine but {} coarse particles",
                fine.count(),
                coarse.count()
            )));
        }
        if fine.dim() != coarse.dim() || fine.horizon() != coarse.horizon() {
            return Err(Error::parameter("level pair members disagree on dimension or horizon"));
        }
        if coarse.level() > fine.level() {
            return Err(Error::parameter("coarse member is finer than the fine member"));
        }
        Ok(Self {
            fine,
            coarse: Some(coarse),
        })
    }

    fn clouds(&self) -> impl Iterator<Item = (&ParticleCloud, f64)> {
        std::iter::once((&self.fine, 1.0)).chain(self.coarse.iter().map(|c| (c, -1.0)))
    }
}

/// The multilevel signed measure built from one Picard step.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmcMeasure {
    picard_index: usize,
    terms: Vec<LevelTerm>,
}

impl MlmcMeasure {
    pub fn new(picard_index: usize, terms: Vec<LevelTerm>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::parameter("a multilevel measure needs at least one level"))?;
        let (dim, horizon) = (first.fine.dim(), first.fine.horizon());
        for t in &terms {
            if t.fine.dim() != dim || t.fine.horizon() != horizon {
                return Err(Error::parameter("levels disagree on dimension or horizon"));
            }
        }
        Ok(Self { picard_index, terms })
    }

    /// A single-level measure: the interpolated empirical measure of `cloud`.
    pub fn single(picard_index: usize, cloud: ParticleCloud) -> Self {
        Self {
            picard_index,
            terms: vec![LevelTerm::base(cloud)],
        }
    }

    pub fn picard_index(&self) -> usize {
        self.picard_index
    }

    pub fn terms(&self) -> &[LevelTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.terms[0].fine.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.terms[0].fine.horizon()
    }

    /// Finest level present.
    pub fn max_level(&self) -> usize {
        self.terms.iter().map(|t| t.fine.level()).max().unwrap_or(0)
    }

    /// Total number of stored particle samples, fine and coarse.
    pub fn sample_count(&self) -> usize {
        self.terms.iter().flat_map(|t| t.clouds()).map(|(c, _)| c.count()).sum()
    }

    /// `⟨M_t, test⟩`.
    pub fn eval_scalar<F: Fn(&[f64]) -> f64>(&self, test: F, t: f64) -> Result<f64> {
        check_time(t, self.horizon())?;
        let mut total = 0.0;
        for term in &self.terms {
            let mut contribution = 0.0;
            for (cloud, sign) in term.clouds() {
                let (k, w) = cloud.locate(t)?;
                contribution += sign * cloud.interpolated().eval_located(&test, k, w);
            }
            total += contribution;
        }
        Ok(total)
    }

    /// `⟨M_t, test⟩` at every point of the level-`level` grid.
    pub fn eval_path<F: Fn(&[f64]) -> f64 + Sync>(&self, test: F, level: usize) -> Vec<f64> {
        let n = (1usize << level) + 1;
        let mut totals = vec![0.0; n];
        for term in &self.terms {
            let mut contribution = vec![0.0; n];
            for (cloud, sign) in term.clouds() {
                let means = cloud.column_means(&test);
                for (j, c) in contribution.iter_mut().enumerate() {
                    let (k, w) = cloud.locate_dyadic(level, j);
                    let v = if w == 0.0 { means[k] } else { lerp(means[k], means[k + 1], w) };
                    *c += sign * v;
                }
            }
            for (t, c) in totals.iter_mut().zip(contribution) {
                *t += c;
            }
        }
        totals
    }

    /// Mean-field drift `⟨M_t, b(x, ·)⟩` and diffusion `⟨M_t, σ(x, ·)⟩`,
    /// componentwise.
    pub fn eval_field(&self, model: &KernelModel, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let kernel = match model {
            KernelModel::Interacting(k) => k,
            KernelModel::Moment(_) => {
                return Err(Error::Contract(
                    "moment-form models are evaluated through eval_moments".into(),
                ))
            }
        };
        check_time(t, self.horizon())?;
        let mut drift = vec![0.0; kernel.dim];
        let mut diffusion = vec![0.0; kernel.dim * kernel.noise_dim];
        let mut scratch = FieldScratch::new(kernel);
        self.accumulate_field(kernel, x, |c| c.locate(t), &mut drift, &mut diffusion, &mut scratch)?;
        Ok((drift, diffusion))
    }

    /// As [`eval_field`](Self::eval_field) at point `index` of the level-`level`
    /// grid. Returns the number of kernel evaluations performed.
    pub(crate) fn field_at_dyadic(
        &self,
        kernel: &InteractingKernelModel,
        x: &[f64],
        level: usize,
        index: usize,
        drift: &mut [f64],
        diffusion: &mut [f64],
        scratch: &mut FieldScratch,
    ) -> u64 {
        self.accumulate_field(
            kernel,
            x,
            |c| Ok(c.locate_dyadic(level, index)),
            drift,
            diffusion,
            scratch,
        )
        .expect("dyadic location cannot fail")
    }

    fn accumulate_field(
        &self,
        kernel: &InteractingKernelModel,
        x: &[f64],
        locate: impl Fn(&ParticleCloud) -> Result<(usize, f64)>,
        drift: &mut [f64],
        diffusion: &mut [f64],
        s: &mut FieldScratch,
    ) -> Result<u64> {
        drift.fill(0.0);
        diffusion.fill(0.0);
        let mut evals = 0u64;
        for term in &self.terms {
            for (cloud, sign) in term.clouds() {
                let (k, w) = locate(cloud)?;
                s.sum_b.fill(0.0);
                s.sum_s.fill(0.0);
                evals += s.column_sums(kernel, cloud, x, k, false);
                if w != 0.0 {
                    evals += s.column_sums(kernel, cloud, x, k + 1, true);
                }
                let n = cloud.count() as f64;
                for (o, (&a, &b)) in drift.iter_mut().zip(s.sum_b.iter().zip(&s.next_b)) {
                    *o += sign * lerp(a / n, if w == 0.0 { 0.0 } else { b / n }, w);
                }
                for (o, (&a, &b)) in diffusion.iter_mut().zip(s.sum_s.iter().zip(&s.next_s)) {
                    *o += sign * lerp(a / n, if w == 0.0 { 0.0 } else { b / n }, w);
                }
            }
        }
        Ok(evals)
    }

    /// `⟨M_t, (f, g)⟩` for a moment-form model.
    pub fn eval_moments(&self, model: &MomentKernelModel, t: f64) -> Result<Vec<f64>> {
        check_time(t, self.horizon())?;
        let q = model.features();
        let mut out = vec![0.0; q];
        let mut buf = vec![0.0; q];
        for term in &self.terms {
            let mut contribution = vec![0.0; q];
            for (cloud, sign) in term.clouds() {
                let (k, w) = cloud.locate(t)?;
                let a = feature_mean(model, cloud, k, &mut buf);
                let b = if w != 0.0 { feature_mean(model, cloud, k + 1, &mut buf) } else { a.clone() };
                for j in 0..q {
                    contribution[j] += sign * lerp(a[j], b[j], w);
                }
            }
            for (o, c) in out.iter_mut().zip(contribution) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Feature moments `⟨M_t, (f, g)⟩` cached at every point of the
    /// level-`level` grid.
    pub fn moment_path(&self, model: &MomentKernelModel, level: usize) -> MomentPath {
        let q = model.features();
        let n = (1usize << level) + 1;
        let mut values = vec![0.0; n * q];
        let mut evals = 0u64;
        for term in &self.terms {
            let mut contribution = vec![0.0; n * q];
            for (cloud, sign) in term.clouds() {
                let means: Vec<Vec<f64>> = (0..cloud.columns())
                    .into_par_iter()
                    .map(|k| {
                        let mut buf = vec![0.0; q];
                        feature_mean(model, cloud, k, &mut buf)
                    })
                    .collect();
                evals += (cloud.count() * cloud.columns()) as u64;
                for j in 0..n {
                    let (k, w) = cloud.locate_dyadic(level, j);
                    for c in 0..q {
                        let a = means[k][c];
                        let v = if w == 0.0 { a } else { lerp(a, means[k + 1][c], w) };
                        contribution[j * q + c] += sign * v;
                    }
                }
            }
            for (o, c) in values.iter_mut().zip(contribution) {
                *o += c;
            }
        }
        MomentPath {
            level,
            features: q,
            values,
            evaluations: evals,
        }
    }
}

fn check_time(t: f64, horizon: f64) -> Result<()> {
    if (0.0..=horizon).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(format!("time {t} outside [0, {horizon}]")))
    }
}

fn feature_mean(model: &MomentKernelModel, cloud: &ParticleCloud, k: usize, buf: &mut [f64]) -> Vec<f64> {
    let q = buf.len();
    let mut acc = vec![CompensatedSum::default(); q];
    for i in 0..cloud.count() {
        model.eval_features(cloud.state(i, k), buf);
        for (a, &v) in acc.iter_mut().zip(buf.iter()) {
            a.add(v);
        }
    }
    let n = cloud.count() as f64;
    acc.iter().map(|a| a.value() / n).collect()
}

/// Cached `⟨M_t, (f, g)⟩` on a dyadic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPath {
    level: usize,
    features: usize,
    values: Vec<f64>,
    evaluations: u64,
}

impl MomentPath {
    /// A path that holds the same moments at every point.
    pub fn constant(level: usize, moments: Vec<f64>) -> Self {
        let n = (1usize << level) + 1;
        let features = moments.len();
        let values = (0..n).flat_map(|_| moments.iter().copied()).collect();
        Self {
            level,
            features,
            values,
            evaluations: 0,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Moments at point `index` of the level-`level` grid (`level <= self.level`).
    pub fn at_dyadic(&self, level: usize, index: usize) -> &[f64] {
        debug_assert!(level <= self.level);
        let j = index << (self.level - level);
        &self.values[j * self.features..(j + 1) * self.features]
    }

    /// Feature-map evaluations spent building the cache.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }
}

/// Reusable buffers for interacting-kernel field sums.
pub(crate) struct FieldScratch {
    b: Vec<f64>,
    s: Vec<f64>,
    sum_b: Vec<f64>,
    sum_s: Vec<f64>,
    next_b: Vec<f64>,
    next_s: Vec<f64>,
}

impl FieldScratch {
    pub(crate) fn new(kernel: &InteractingKernelModel) -> Self {
        let (d, r) = (kernel.dim, kernel.noise_dim);
        Self {
            b: vec![0.0; d],
            s: vec![0.0; d * r],
            sum_b: vec![0.0; d],
            sum_s: vec![0.0; d * r],
            next_b: vec![0.0; d],
            next_s: vec![0.0; d * r],
        }
    }

    fn column_sums(
        &mut self,
        kernel: &InteractingKernelModel,
        cloud: &ParticleCloud,
        x: &[f64],
        k: usize,
        next: bool,
    ) -> u64 {
        let (sb, ss) = if next {
            self.next_b.fill(0.0);
            self.next_s.fill(0.0);
            (&mut self.next_b, &mut self.next_s)
        } else {
            (&mut self.sum_b, &mut self.sum_s)
        };
        for i in 0..cloud.count() {
            let y = cloud.state(i, k);
            kernel.drift(x, y, &mut self.b);
            kernel.diffusion(x, y, &mut self.s);
            for (a, v) in sb.iter_mut().zip(&self.b) {
                *a += v;
            }
            for (a, v) in ss.iter_mut().zip(&self.s) {
                *a += v;
            }
        }
        cloud.count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{burgers_model, kuramoto_interacting_model, kuramoto_model, Payoff};
    use rand::{Rng, SeedableRng};

    fn cloud(level: usize, count: usize, f: impl Fn(usize, usize) -> f64) -> ParticleCloud {
        let grid = TimeGrid::new(level, 1.0).unwrap();
        let mut states = Vec::new();
        for i in 0..count {
            for k in 0..grid.len() {
                states.push(f(i, k));
            }
        }
        ParticleCloud::new(grid, 1, count, states).unwrap()
    }

    fn random_cloud(level: usize, count: usize, seed: u64) -> ParticleCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::new(level, 1.0).unwrap();
        let states = (0..count * grid.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        ParticleCloud::new(grid, 1, count, states).unwrap()
    }

    fn random_measure(levels: usize, seed: u64) -> MlmcMeasure {
        let mut terms = vec![LevelTerm::base(random_cloud(0, 40, seed))];
        for l in 1..=levels {
            let n = 40 >> l.min(3);
            terms.push(
                LevelTerm::pair(
                    random_cloud(l, n, seed + 100 * l as u64),
                    random_cloud(l - 1, n, seed + 100 * l as u64 + 1),
                )
                .unwrap(),
            );
        }
        MlmcMeasure::new(3, terms).unwrap()
    }

    fn moment(model: &crate::models::Model) -> &MomentKernelModel {
        match &model.kernel {
            KernelModel::Moment(k) => k,
            _ => unreachable!(),
        }
    }

    #[test]
    fn mass_is_one() {
        let m = random_measure(4, 1);
        for t in [0.0, 0.1, 0.3333, 0.5, 0.77, 1.0] {
            assert_eq!(m.eval_scalar(|_| 1.0, t).unwrap(), 1.0);
        }
        assert!(m.eval_path(|_| 1.0, 6).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_level_is_empirical_mean() {
        let c = random_cloud(0, 17, 3);
        let m = MlmcMeasure::single(0, c.clone());
        let p = Payoff::SqrtOnePlusSquare;
        for k in 0..2 {
            let direct: f64 = (0..17).map(|i| p.eval(c.state(i, k))).sum::<f64>() / 17.0;
            let got = m.eval_scalar(|x| p.eval(x), k as f64).unwrap();
            assert!((got - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn midpoint_interpolation() {
        // One particle at level 1: values at t = 0, 0.5, 1.
        let (p, q) = (0.7, -1.9);
        let c = cloud(1, 1, |_, k| [0.0, p, q][k]);
        let m = MlmcMeasure::single(0, c);
        let got = m.eval_scalar(|x| x[0], 0.75).unwrap();
        assert!((got - (p + q) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn interpolated_view_is_affine_between_points() {
        let c = random_cloud(2, 9, 11);
        let view = c.interpolated();
        let f = |x: &[f64]| x[0] * x[0];
        let a = view.eval(f, 0.25).unwrap();
        let b = view.eval(f, 0.5).unwrap();
        for s in [0.0, 0.2, 0.5, 0.9] {
            let t = 0.25 + 0.25 * s;
            assert!((view.eval(f, t).unwrap() - (a + s * (b - a))).abs() < 1e-13);
        }
        assert_eq!(view.eval(f, 0.25).unwrap(), c.column_mean(1, f));
        assert!(matches!(view.eval(f, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn out_of_horizon_is_a_domain_error() {
        let m = random_measure(2, 2);
        assert!(matches!(m.eval_scalar(|_| 1.0, 1.01), Err(Error::Domain(_))));
        assert!(matches!(m.eval_scalar(|_| 1.0, -0.01), Err(Error::Domain(_))));
    }

    #[test]
    fn identical_pair_contributes_nothing() {
        let base = random_cloud(0, 10, 5);
        let twin = random_cloud(3, 10, 6);
        let with = MlmcMeasure::new(
            0,
            vec![LevelTerm::base(base.clone()), LevelTerm::pair(twin.clone(), twin).unwrap()],
        )
        .unwrap();
        let without = MlmcMeasure::single(0, base);
        for t in [0.0, 0.1, 0.45, 1.0] {
            let f = |x: &[f64]| x[0].sin() + 3.0;
            assert_eq!(
                with.eval_scalar(f, t).unwrap().to_bits(),
                without.eval_scalar(f, t).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn linear_test_matches_brute_force_sum() {
        let m = random_measure(3, 8);
        let t = 0.6;
        // Oracle: per cloud, interpolate each particle's position and average.
        let mut oracle = 0.0;
        for term in m.terms() {
            let mut part = 0.0;
            for (cloud, sign) in [(Some(&term.fine), 1.0), (term.coarse.as_ref(), -1.0)] {
                let Some(cloud) = cloud else { continue };
                let h = cloud.grid().step();
                let k = (t / h).floor() as usize;
                let w = (t - k as f64 * h) / h;
                let mut s = 0.0;
                for i in 0..cloud.count() {
                    let a = cloud.state(i, k)[0];
                    let b = cloud.state(i, (k + 1).min(cloud.columns() - 1))[0];
                    s += (1.0 - w) * a + w * b;
                }
                part += sign * s / cloud.count() as f64;
            }
            oracle += part;
        }
        let got = m.eval_scalar(|x| x[0], t).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn point_mass_field_is_the_kernel() {
        let model = kuramoto_interacting_model();
        let c = ParticleCloud::constant(1.0, 1, vec![0.2]).unwrap();
        let m = MlmcMeasure::single(0, c);
        let (b, s) = m.eval_field(&model.kernel, &[0.5], 0.3).unwrap();
        assert_eq!(b, vec![0.3f64.sin()]);
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn burgers_field_counts_particles_ahead() {
        let model = burgers_model();
        let c = cloud(0, 3, |i, _| [-1.0, 0.0, 1.0][i]);
        let m = MlmcMeasure::single(0, c);
        let (b, s) = m.eval_field(&model.kernel, &[0.0], 1.0).unwrap();
        assert_eq!(b[0], 2.0 / 3.0);
        assert_eq!(s[0], 0.25);
    }

    #[test]
    fn moment_model_rejected_by_eval_field() {
        let m = random_measure(1, 4);
        assert!(matches!(
            m.eval_field(&kuramoto_model().kernel, &[0.0], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kuramoto_dual_forms_agree_on_random_measures() {
        let mi = kuramoto_interacting_model();
        let mm = kuramoto_model();
        let km = moment(&mm);
        for seed in 0..5 {
            let m = random_measure(3, seed);
            for &t in &[0.0, 0.3, 0.625, 1.0] {
                for &x in &[-2.0, 0.1, 1.3] {
                    let (b, _) = m.eval_field(&mi.kernel, &[x], t).unwrap();
                    let f = m.eval_moments(km, t).unwrap();
                    let mut reduced = [0.0];
                    km.drift(&[x], &f, &mut reduced);
                    // sin(x − y) versus its expansion, summed over a few dozen
                    // particles per level: a handful of ulps of O(1) terms.
                    assert!((b[0] - reduced[0]).abs() < 1e-13, "{} vs {}", b[0], reduced[0]);
                }
            }
        }
    }

    #[test]
    fn kuramoto_moments_of_point_mass() {
        let mm = kuramoto_model();
        let m = MlmcMeasure::single(0, ParticleCloud::constant(1.0, 1, vec![0.0]).unwrap());
        assert_eq!(m.eval_moments(moment(&mm), 0.4).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn moments_of_centered_base_cloud() {
        // f = (1, identity) via a custom moment model.
        use std::sync::Arc;
        let model = MomentKernelModel::new(
            1,
            1,
            2,
            0,
            Arc::new(|y, o| {
                o[0] = 1.0;
                o[1] = y[0];
            }),
            Arc::new(|_, _| {}),
            Arc::new(|_, _, o| o[0] = 0.0),
            Arc::new(|_, _, o| o[0] = 1.0),
            crate::models::InitialLaw::point(0.0),
        );
        let c = cloud(2, 4, |i, _| [-1.5, -0.5, 0.5, 1.5][i]);
        let m = MlmcMeasure::single(0, c);
        assert_eq!(m.eval_moments(&model, 0.3).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn moment_path_matches_direct_evaluation() {
        let mm = kuramoto_model();
        let km = moment(&mm);
        let m = random_measure(3, 21);
        let path = m.moment_path(km, 5);
        let grid = TimeGrid::new(5, 1.0).unwrap();
        for j in 0..grid.len() {
            let direct = m.eval_moments(km, grid.point(j)).unwrap();
            for (a, b) in path.at_dyadic(5, j).iter().zip(&direct) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert_eq!(path.at_dyadic(2, 1), path.at_dyadic(5, 8));
        let cost: usize = m
            .terms()
            .iter()
            .map(|t| t.fine.count() * t.fine.columns() + t.coarse.as_ref().map_or(0, |c| c.count() * c.columns()))
            .sum();
        assert_eq!(path.evaluations(), cost as u64);
    }

    #[test]
    fn eval_path_matches_pointwise_evaluation() {
        let m = random_measure(3, 30);
        let f = |x: &[f64]| (1.0 + x[0] * x[0]).sqrt();
        let path = m.eval_path(f, 4);
        let grid = TimeGrid::new(4, 1.0).unwrap();
        for (j, v) in path.iter().enumerate() {
            assert!((v - m.eval_scalar(f, grid.point(j)).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn constructor_checks() {
        let grid = TimeGrid::new(1, 1.0).unwrap();
        assert!(ParticleCloud::new(grid, 1, 2, vec![0.0; 5]).is_err());
        assert!(matches!(
            ParticleCloud::new(grid, 1, 1, vec![0.0, f64::NAN, 1.0]),
            Err(Error::NonFinite { time_index: 1, .. })
        ));
        let a = random_cloud(2, 5, 1);
        let b = random_cloud(1, 4, 2);
        assert!(LevelTerm::pair(a.clone(), b).is_err());
        assert!(LevelTerm::pair(random_cloud(1, 5, 3), a).is_err());
        assert!(MlmcMeasure::new(0, vec![]).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let c = cloud(1, 2, |i, k| (10 * i + k) as f64);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "particle,time_index,x0");
        assert_eq!(lines[1], "1,0,0");
        assert_eq!(lines[6], "2,2,12");
        assert_eq!(lines.len(), 7);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mass_conserved_for_any_measure(seed in 0u64..1000, levels in 0usize..5, u in 0.0f64..=1.0) {
                let m = random_measure(levels, seed);
                prop_assert_eq!(m.eval_scalar(|_| 1.0, u).unwrap(), 1.0);
            }

            #[test]
            fn grid_points_use_plain_averages(seed in 0u64..1000, level in 0usize..5, k in 0usize..33) {
                let c = random_cloud(level, 7, seed);
                let k = k % c.columns();
                let f = |x: &[f64]| x[0].cos();
                let t = c.grid().point(k);
                prop_assert_eq!(c.interpolated().eval(f, t).unwrap(), c.column_mean(k, f));
            }
        }
    }
}
