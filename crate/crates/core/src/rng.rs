//! Keyed random streams and coupled Brownian increments.
//!
//! Every stream is a ChaCha8 keystream whose 256-bit key is the packed
//! [`StreamKey`], so a stream is a pure function of `(key, counter)`. Packing
//! is injective: distinct keys never share a keystream, whichever thread
//! asks for them and in whichever order.
//!
//! Gaussian variates come from `rand_distr::StandardNormal` (ziggurat method)
//! drawn from that keystream. The crate versions are pinned in `Cargo.lock`,
//! which fixes the variates for a given key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::InitialLaw;
use crate::time_grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamRole {
    InitialCondition = 1,
    Brownian = 2,
    /// Samples of the zeroth Picard iterate when it is drawn from a prior.
    Prior = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamKey {
    pub experiment_seed: u64,
    pub picard_step: u32,
    pub level_pair: u32,
    /// 1-based particle index.
    pub particle: u64,
    pub role: StreamRole,
}

impl StreamKey {
    pub fn new(
        experiment_seed: u64,
        picard_step: usize,
        level_pair: usize,
        particle: u64,
        role: StreamRole,
    ) -> Self {
        Self {
            experiment_seed,
            picard_step: picard_step as u32,
            level_pair: level_pair as u32,
            particle,
            role,
        }
    }

    pub fn with_role(mut self, role: StreamRole) -> Self {
        self.role = role;
        self
    }

    /// The 256-bit ChaCha key: seed ‖ picard step ‖ level ‖ particle ‖ role.
    pub fn to_seed_bytes(&self) -> [u8; 32] {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.experiment_seed.to_le_bytes());
        seed[8..12].copy_from_slice(&self.picard_step.to_le_bytes());
        seed[12..16].copy_from_slice(&self.level_pair.to_le_bytes());
        seed[16..24].copy_from_slice(&self.particle.to_le_bytes());
        seed[24] = self.role as u8;
        seed
    }

    pub fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.to_seed_bytes())
    }
}

/// Draws `count` i.i.d. samples of `law` from the stream of `key`; the result
/// is `count` consecutive `d`-vectors.
pub fn draw_initial(key: StreamKey, law: &InitialLaw, count: usize) -> Result<Vec<f64>> {
    let sampler = law.sampler()?;
    let d = sampler.dim();
    let mut rng = key.stream();
    let mut out = vec![0.0; count * d];
    for chunk in out.chunks_exact_mut(d) {
        sampler.sample(&mut rng, chunk);
    }
    Ok(out)
}

/// Brownian increments of an `r`-dimensional path on a dyadic grid; step `k`
/// occupies `increments[k*r .. (k+1)*r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPath {
    level: usize,
    noise_dim: usize,
    increments: Vec<f64>,
}

impl IncrementPath {
    pub fn from_increments(level: usize, noise_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if noise_dim == 0 || increments.len() != (1usize << level) * noise_dim {
            return Err(Error::parameter(format!(
                "a level-{level} path of dimension {noise_dim} needs {} increments, got {}",
                (1usize << level) * noise_dim,
                increments.len()
            )));
        }
        Ok(Self {
            level,
            noise_dim,
            increments,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    /// `W_T − W_0`, reduced pairwise along the dyadic tree. Because the first
    /// reduction round is exactly [`coarsen`], the result is bit-identical for
    /// a path and all of its coarsenings.
    pub fn terminal(&self) -> Vec<f64> {
        let mut path = self.clone();
        while path.level > 0 {
            path = coarsen(&path).expect("level checked above");
        }
        path.increments
    }
}

/// Fills `out` with the `2^level` increments of the stream's path, each
/// `N(0, h·I_r)`.
pub fn fill_increments<R: rand::Rng + ?Sized>(rng: &mut R, step: f64, out: &mut [f64]) {
    let scale = step.sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}

/// The Brownian path of `key` on the level-`level` grid of `[0, horizon]`.
pub fn fine_path(key: StreamKey, level: usize, horizon: f64, noise_dim: usize) -> Result<IncrementPath> {
    let grid = TimeGrid::new(level, horizon)?;
    if noise_dim == 0 {
        return Err(Error::parameter("noise dimension must be positive"));
    }
    let mut rng = key.with_role(StreamRole::Brownian).stream();
    let mut inc = vec![0.0; grid.steps() * noise_dim];
    fill_increments(&mut rng, grid.step(), &mut inc);
    IncrementPath::from_increments(level, noise_dim, inc)
}

/// Pairwise sums of consecutive increments: the same path on the next
/// coarser grid.
pub fn coarsen(path: &IncrementPath) -> Result<IncrementPath> {
    if path.level == 0 {
        return Err(Error::domain("cannot coarsen a level-0 path"));
    }
    let r = path.noise_dim;
    let mut out = Vec::with_capacity(path.increments.len() / 2);
    for pair in path.increments.chunks_exact(2 * r) {
        for j in 0..r {
            out.push(pair[j] + pair[r + j]);
        }
    }
    Ok(IncrementPath {
        level: path.level - 1,
        noise_dim: r,
        increments: out,
    })
}

/// In-place variant of [`coarsen`] over a flat increment buffer.
pub(crate) fn coarsen_into(fine: &[f64], noise_dim: usize, out: &mut [f64]) {
    for (k, pair) in fine.chunks_exact(2 * noise_dim).enumerate() {
        for j in 0..noise_dim {
            out[k * noise_dim + j] = pair[j] + pair[noise_dim + j];
        }
    }
}
