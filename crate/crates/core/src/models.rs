//! McKean–Vlasov coefficient models.
//!
//! Two kernel shapes are supported:
//!
//! * interacting: `b[x, μ] = ∫ b(x, y) μ(dy)` and likewise for `σ`;
//! * moment: `b(x, ⟨μ, f⟩)`, `σ(x, ⟨μ, g⟩)` for finite feature maps `f`, `g`.
//!
//! Moment models make the per-step cost of a measure evaluation independent
//! of the particle count once the feature moments are cached.
//!
//! Matrices are stored row-major; a diffusion coefficient is `d × r`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y, out)`: kernel of two states, or reduced coefficient of a state and a moment vector.
pub type PairFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(y, out)`: a feature map.
pub type FeatureFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Law of `X_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    PointMass {
        at: Vec<f64>,
    },
    /// Covariance is `d × d`, row-major, symmetric positive semi-definite.
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<f64>,
    },
    /// One-dimensional law given by its quantile function, linearly
    /// interpolated between the listed `(probability, value)` knots.
    QuantileTable {
        probabilities: Vec<f64>,
        values: Vec<f64>,
    },
}

impl InitialLaw {
    pub fn point(at: f64) -> Self {
        InitialLaw::PointMass { at: vec![at] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass { at } => at.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::QuantileTable { .. } => 1,
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, InitialLaw::PointMass { .. })
    }

    /// Parses and validates a JSON descriptor such as
    /// `{"kind":"gaussian","mean":[0],"covariance":[1]}`.
    pub fn parse(json: &str) -> Result<Self> {
        let law: InitialLaw = serde_json::from_str(json).map_err(|e| Error::Parse(format!("initial law: {e}")))?;
        law.sampler()?;
        Ok(law)
    }

    /// Checks the descriptor and prepares it for sampling.
    pub fn sampler(&self) -> Result<InitialSampler> {
        match self {
            InitialLaw::PointMass { at } => {
                if at.is_empty() || at.iter().any(|v| !v.is_finite()) {
                    return Err(Error::parameter("point mass needs a finite, non-empty location"));
                }
                Ok(InitialSampler::Point(at.clone()))
            }
            InitialLaw::Gaussian { mean, covariance } => {
                let d = mean.len();
                if d == 0 || covariance.len() != d * d {
                    return Err(Error::parameter(format!(
                        "gaussian law: mean has {d} entries but covariance has {}",
                        covariance.len()
                    )));
                }
                if mean.iter().chain(covariance).any(|v| !v.is_finite()) {
                    return Err(Error::parameter("gaussian law has non-finite entries"));
                }
                let chol = cholesky(covariance, d)?;
                Ok(InitialSampler::Gaussian {
                    mean: mean.clone(),
                    chol,
                })
            }
            InitialLaw::QuantileTable {
                probabilities,
                values,
            } => {
                let n = probabilities.len();
                if n < 2 || values.len() != n {
                    return Err(Error::parameter(
                        "quantile table needs at least two knots and matching lengths",
                    ));
                }
                if probabilities[0] != 0.0 || probabilities[n - 1] != 1.0 {
                    return Err(Error::parameter("quantile table must span probabilities 0 to 1"));
                }
                if probabilities.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::parameter("quantile probabilities must be strictly increasing"));
                }
                if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] > w[1]) {
                    return Err(Error::parameter("quantile values must be finite and non-decreasing"));
                }
                Ok(InitialSampler::Quantile {
                    probabilities: probabilities.clone(),
                    values: values.clone(),
                })
            }
        }
    }
}

/// Validated, ready-to-sample form of an [`InitialLaw`].
#[derive(Debug, Clone)]
pub enum InitialSampler {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, chol: Vec<f64> },
    Quantile { probabilities: Vec<f64>, values: Vec<f64> },
}

impl InitialSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitialSampler::Point(at) => at.len(),
            InitialSampler::Gaussian { mean, .. } => mean.len(),
            InitialSampler::Quantile { .. } => 1,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialSampler::Point(at) => out.copy_from_slice(at),
            InitialSampler::Gaussian { mean, chol } => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..d {
                    let mut acc = mean[i];
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        acc += chol[i * d + j] * zj;
                    }
                    out[i] = acc;
                }
            }
            InitialSampler::Quantile {
                probabilities,
                values,
            } => {
                let u: f64 = rng.gen();
                let j = probabilities.partition_point(|&p| p <= u).clamp(1, probabilities.len() - 1);
                let (p0, p1) = (probabilities[j - 1], probabilities[j]);
                let (v0, v1) = (values[j - 1], values[j]);
                out[0] = v0 + (u - p0) / (p1 - p0) * (v1 - v0);
            }
        }
    }
}

/// Lower-triangular factor of a symmetric PSD matrix. Zero pivots are allowed
/// so degenerate Gaussians are accepted.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 * (1.0 + a[i * d + j].abs()) {
                return Err(Error::parameter("covariance must be symmetric"));
            }
        }
    }
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if s < -1e-12 {
            return Err(Error::parameter("covariance must be positive semi-definite"));
        }
        let pivot = s.max(0.0).sqrt();
        l[j * d + j] = pivot;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = if pivot > 0.0 { s / pivot } else { 0.0 };
        }
    }
    Ok(l)
}

/// Scalar test function `P: R^d → R`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payoff {
    Constant(f64),
    /// First component.
    Identity,
    /// Squared Euclidean norm.
    Square,
    /// `sqrt(1 + |x|^2)`.
    SqrtOnePlusSquare,
    /// `1{x_0 >= a}`.
    IndicatorGe(f64),
    #[serde(skip)]
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Payoff {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Payoff::Constant(c) => *c,
            Payoff::Identity => x[0],
            Payoff::Square => x.iter().map(|v| v * v).sum(),
            Payoff::SqrtOnePlusSquare => (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            Payoff::IndicatorGe(a) => {
                if x[0] >= *a {
                    1.0
                } else {
                    0.0
                }
            }
            Payoff::Custom(f) => f(x),
        }
    }

    /// Parses the textual descriptor used on the command line and in
    /// configuration files: `identity`, `square`, `sqrt1p2`, `const:<c>`,
    /// `indicator_ge:<a>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (s, None),
        };
        let number = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::Parse(format!("payoff `{head}` needs a numeric argument")))?;
            let v: f64 = a
                .parse()
                .map_err(|_| Error::Parse(format!("invalid number `{a}` in payoff `{s}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("non-finite number in payoff `{s}`")))
            }
        };
        let no_arg = |p: Payoff| -> Result<Payoff> {
            match arg {
                None => Ok(p),
                Some(_) => Err(Error::Parse(format!("payoff `{head}` takes no argument"))),
            }
        };
        match head {
            "identity" | "x" => no_arg(Payoff::Identity),
            "square" | "x2" => no_arg(Payoff::Square),
            "sqrt1p2" => no_arg(Payoff::SqrtOnePlusSquare),
            "const" => Ok(Payoff::Constant(number(arg)?)),
            "indicator_ge" => Ok(Payoff::IndicatorGe(number(arg)?)),
            _ => Err(Error::Parse(format!("unknown payoff `{s}`"))),
        }
    }

    /// Inverse of [`Payoff::parse`]; `None` for custom closures.
    pub fn descriptor(&self) -> Option<String> {
        Some(match self {
            Payoff::Constant(c) => format!("const:{c}"),
            Payoff::Identity => "identity".into(),
            Payoff::Square => "square".into(),
            Payoff::SqrtOnePlusSquare => "sqrt1p2".into(),
            Payoff::IndicatorGe(a) => format!("indicator_ge:{a}"),
            Payoff::Custom(_) => return None,
        })
    }
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.descriptor() {
            Some(d) => write!(f, "Payoff({d})"),
            None => write!(f, "Payoff(custom)"),
        }
    }
}

impl PartialEq for Payoff {
    fn eq(&self, other: &Self) -> bool {
        match (self.descriptor(), other.descriptor()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone)]
pub struct InteractingKernelModel {
    pub dim: usize,
    pub noise_dim: usize,
    drift: PairFn,
    diffusion: PairFn,
    pub initial_law: InitialLaw,
}

impl InteractingKernelModel {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: PairFn,
        diffusion: PairFn,
        initial_law: InitialLaw,
    ) -> Self {
        Self {
            dim,
            noise_dim,
            drift,
            diffusion,
            initial_law,
        }
    }

    pub fn drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.drift)(x, y, out)
    }

    pub fn diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, y, out)
    }
}

#[derive(Clone)]
pub struct MomentKernelModel {
    pub dim: usize,
    pub noise_dim: usize,
    /// Length of `f`.
    pub drift_features: usize,
    /// Length of `g`.
    pub diffusion_features: usize,
    f: FeatureFn,
    g: FeatureFn,
    drift: PairFn,
    diffusion: PairFn,
    pub initial_law: InitialLaw,
}

impl MomentKernelModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift_features: usize,
        diffusion_features: usize,
        f: FeatureFn,
        g: FeatureFn,
        drift: PairFn,
        diffusion: PairFn,
        initial_law: InitialLaw,
    ) -> Self {
        Self {
            dim,
            noise_dim,
            drift_features,
            diffusion_features,
            f,
            g,
            drift,
            diffusion,
            initial_law,
        }
    }

    pub fn features(&self) -> usize {
        self.drift_features + self.diffusion_features
    }

    /// Writes `(f(y), g(y))` into `out`.
    pub fn eval_features(&self, y: &[f64], out: &mut [f64]) {
        let (fo, go) = out.split_at_mut(self.drift_features);
        if !fo.is_empty() {
            (self.f)(y, fo);
        }
        if !go.is_empty() {
            (self.g)(y, go);
        }
    }

    /// Reduced drift `b(x, F)`.
    pub fn drift(&self, x: &[f64], moments: &[f64], out: &mut [f64]) {
        (self.drift)(x, moments, out)
    }

    /// Reduced diffusion `σ(x, G)`.
    pub fn diffusion(&self, x: &[f64], moments: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, moments, out)
    }

    /// Evaluates both reduced coefficients from the joint moment vector `(F, G)`.
    pub fn coefficients(&self, x: &[f64], moments: &[f64], drift: &mut [f64], diffusion: &mut [f64]) {
        let (fm, gm) = moments.split_at(self.drift_features);
        (self.drift)(x, fm, drift);
        (self.diffusion)(x, gm, diffusion);
    }
}

#[derive(Clone)]
pub enum KernelModel {
    Interacting(InteractingKernelModel),
    Moment(MomentKernelModel),
}

impl KernelModel {
    pub fn dim(&self) -> usize {
        match self {
            KernelModel::Interacting(k) => k.dim,
            KernelModel::Moment(k) => k.dim,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            KernelModel::Interacting(k) => k.noise_dim,
            KernelModel::Moment(k) => k.noise_dim,
        }
    }

    pub fn initial_law(&self) -> &InitialLaw {
        match self {
            KernelModel::Interacting(k) => &k.initial_law,
            KernelModel::Moment(k) => &k.initial_law,
        }
    }

    pub fn mode(&self) -> CostMode {
        match self {
            KernelModel::Interacting(_) => CostMode::Interacting,
            KernelModel::Moment(_) => CostMode::Moment,
        }
    }
}

/// How measure evaluations are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Interacting,
    Moment,
}

/// Time-dependent law used as the zeroth Picard iterate: `x0 + scale·W_t`,
/// i.e. marginals `N(x0, scale²·t·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorLaw {
    pub start: Vec<f64>,
    pub scale: f64,
}

/// Whether the model meets the Lipschitz/smoothness assumptions of the
/// convergence theory. Violating models are still simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Satisfied,
    Violated,
}

/// A McKean–Vlasov SDE together with its experiment defaults.
#[derive(Clone)]
pub struct Model {
    pub name: String,
    pub horizon: f64,
    pub kernel: KernelModel,
    pub payoff: Payoff,
    pub prior: Option<PriorLaw>,
    pub regularity: Regularity,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("mode", &self.kernel.mode())
            .field("payoff", &self.payoff)
            .field("regularity", &self.regularity)
            .finish()
    }
}

impl Model {
    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.kernel.noise_dim()
    }

    pub fn with_payoff(mut self, payoff: Payoff) -> Self {
        self.payoff = payoff;
        self
    }

    pub fn with_initial_law(mut self, law: InitialLaw) -> Self {
        match &mut self.kernel {
            KernelModel::Interacting(k) => k.initial_law = law,
            KernelModel::Moment(k) => k.initial_law = law,
        }
        self
    }

    /// Largest observed ratio `|b(x1,y1) - b(x2,y2)| / (|x1-x2| + |y1-y2|)`
    /// over random pairs in `[-radius, radius]^d`. Advisory only; moment
    /// models are probed through their reduced coefficients.
    pub fn lipschitz_probe(&self, pairs: usize, radius: f64, seed: u64) -> f64 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let r = self.noise_dim();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-radius..=radius)).collect() };
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let ratio = match &self.kernel {
                KernelModel::Interacting(k) => {
                    let (x1, y1, x2, y2) = (draw(d), draw(d), draw(d), draw(d));
                    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
                    let (mut s1, mut s2) = (vec![0.0; d * r], vec![0.0; d * r]);
                    k.drift(&x1, &y1, &mut b1);
                    k.drift(&x2, &y2, &mut b2);
                    k.diffusion(&x1, &y1, &mut s1);
                    k.diffusion(&x2, &y2, &mut s2);
                    let num = dist(&b1, &b2) + dist(&s1, &s2);
                    num / (dist(&x1, &x2) + dist(&y1, &y2)).max(f64::MIN_POSITIVE)
                }
                KernelModel::Moment(k) => {
                    let q = k.features();
                    let (x1, m1, x2, m2) = (draw(d), draw(q), draw(d), draw(q));
                    let (mut b1, mut b2) = (vec![0.0; d], vec![0.0; d]);
                    let (mut s1, mut s2) = (vec![0.0; d * r], vec![0.0; d * r]);
                    k.coefficients(&x1, &m1, &mut b1, &mut s1);
                    k.coefficients(&x2, &m2, &mut b2, &mut s2);
                    let num = dist(&b1, &b2) + dist(&s1, &s2);
                    num / (dist(&x1, &x2) + dist(&m1, &m2)).max(f64::MIN_POSITIVE)
                }
            };
            if ratio.is_finite() {
                worst = worst.max(ratio);
            } else {
                return f64::INFINITY;
            }
        }
        worst
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Kuramoto-type model on the line, in moment form:
/// `dX = (sin X·⟨μ,cos⟩ − cos X·⟨μ,sin⟩) dt + dW`, `X_0 = 0`, `T = 1`,
/// payoff `sqrt(1 + x²)`, prior `N(0, t)`.
pub fn kuramoto_model() -> Model {
    let kernel = MomentKernelModel::new(
        1,
        1,
        2,
        0,
        Arc::new(|y, out| {
            out[0] = y[0].cos();
            out[1] = y[0].sin();
        }),
        Arc::new(|_, _| {}),
        Arc::new(|x, m, out| out[0] = x[0].sin() * m[0] - x[0].cos() * m[1]),
        Arc::new(|_, _, out| out[0] = 1.0),
        InitialLaw::point(0.0),
    );
    Model {
        name: "kuramoto".into(),
        horizon: 1.0,
        kernel: KernelModel::Moment(kernel),
        payoff: Payoff::SqrtOnePlusSquare,
        prior: Some(PriorLaw {
            start: vec![0.0],
            scale: 1.0,
        }),
        regularity: Regularity::Satisfied,
    }
}

/// The Kuramoto model in interacting form, `b(x, y) = sin(x − y)`, `σ = 1`.
pub fn kuramoto_interacting_model() -> Model {
    let kernel = InteractingKernelModel::new(
        1,
        1,
        Arc::new(|x, y, out| out[0] = (x[0] - y[0]).sin()),
        Arc::new(|_, _, out| out[0] = 1.0),
        InitialLaw::point(0.0),
    );
    Model {
        kernel: KernelModel::Interacting(kernel),
        name: "kuramoto-interacting".into(),
        ..kuramoto_model()
    }
}

/// `dX = (2X + E[X] − X·E[X²]) dt + X dW`, `X_0 = 1`, `T = 1`, payoff `x`.
pub fn polynomial_model() -> Model {
    let kernel = MomentKernelModel::new(
        1,
        1,
        2,
        0,
        Arc::new(|y, out| {
            out[0] = y[0];
            out[1] = y[0] * y[0];
        }),
        Arc::new(|_, _| {}),
        Arc::new(|x, m, out| out[0] = 2.0 * x[0] + m[0] - x[0] * m[1]),
        Arc::new(|x, _, out| out[0] = x[0]),
        InitialLaw::point(1.0),
    );
    Model {
        name: "polynomial".into(),
        horizon: 1.0,
        kernel: KernelModel::Moment(kernel),
        payoff: Payoff::Identity,
        prior: None,
        regularity: Regularity::Violated,
    }
}

/// `dX = P(X_t ≥ x)|_{x = X_t} dt + dW/4`, `X_0 = 0`, `T = 1`, kernel
/// `b(x, y) = 1{y ≥ x}`, payoff `1{x ≥ 0.5}`.
pub fn burgers_model() -> Model {
    let kernel = InteractingKernelModel::new(
        1,
        1,
        Arc::new(|x, y, out| out[0] = if y[0] >= x[0] { 1.0 } else { 0.0 }),
        Arc::new(|_, _, out| out[0] = 0.25),
        InitialLaw::point(0.0),
    );
    Model {
        name: "burgers".into(),
        horizon: 1.0,
        kernel: KernelModel::Interacting(kernel),
        payoff: Payoff::IndicatorGe(0.5),
        prior: None,
        regularity: Regularity::Violated,
    }
}

/// Measure-independent Ornstein–Uhlenbeck process `dX = −X dt + dW`,
/// `X_0 = x0`, `T = 1`, payoff `x`. `E[X_T] = x0·e^{−T}`.
pub fn ornstein_uhlenbeck_model(x0: f64) -> Model {
    let kernel = MomentKernelModel::new(
        1,
        1,
        0,
        0,
        Arc::new(|_, _| {}),
        Arc::new(|_, _| {}),
        Arc::new(|x, _, out| out[0] = -x[0]),
        Arc::new(|_, _, out| out[0] = 1.0),
        InitialLaw::point(x0),
    );
    Model {
        name: "ou".into(),
        horizon: 1.0,
        kernel: KernelModel::Moment(kernel),
        payoff: Payoff::Identity,
        prior: None,
        regularity: Regularity::Satisfied,
    }
}

/// The same OU process written with an interacting kernel that ignores `y`.
pub fn ornstein_uhlenbeck_interacting_model(x0: f64) -> Model {
    let kernel = InteractingKernelModel::new(
        1,
        1,
        Arc::new(|x, _, out| out[0] = -x[0]),
        Arc::new(|_, _, out| out[0] = 1.0),
        InitialLaw::point(x0),
    );
    Model {
        kernel: KernelModel::Interacting(kernel),
        name: "ou-interacting".into(),
        ..ornstein_uhlenbeck_model(x0)
    }
}

pub const MODEL_NAMES: &[&str] = &["kuramoto", "kuramoto-interacting", "polynomial", "burgers", "ou"];

pub fn model_by_name(name: &str) -> Result<Model> {
    match name {
        "kuramoto" => Ok(kuramoto_model()),
        "kuramoto-interacting" => Ok(kuramoto_interacting_model()),
        "polynomial" => Ok(polynomial_model()),
        "burgers" => Ok(burgers_model()),
        "ou" => Ok(ornstein_uhlenbeck_model(1.0)),
        other => Err(Error::parameter(format!(
            "unknown model `{other}` (expected one of {})",
            MODEL_NAMES.join(", ")
        ))),
    }
}
