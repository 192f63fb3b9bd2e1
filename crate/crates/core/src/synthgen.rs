//! Seeded synthetic tensors from the two latent factor models.
//!
//! `SingleLatent`: `m_ij[d] = <U_i[d, :], v_j>` with one factor vector per B element.
//! `MultiLatent`:  `m_ij[d] = <U_i[d, :], V_j[d, :]>` with per-dimension factors on both sides.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IncompleteTensor;

const MASK_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleLatent,
    MultiLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub model: ModelKind,
    pub n_a: usize,
    pub n_b: usize,
    pub dim: usize,
    pub rank: usize,
    pub noise_std: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_b == 0 || self.dim == 0 || self.rank == 0 {
            return Err(Error::InvalidInput(
                "counts, dimension and rank must be at least 1".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidInput("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::InvalidInput("missing_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Latent factors, the complete clean tensor, and the noisy masked observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub spec: SyntheticSpec,
    /// `n_a x dim x rank`, row-major.
    pub u_factors: Vec<f64>,
    /// `n_b x dim x rank` for `MultiLatent`, `n_b x rank` for `SingleLatent`.
    pub v_factors: Vec<f64>,
    /// `n_a x n_b x dim`, row-major.
    pub clean: Vec<f64>,
    pub observed_tensor: IncompleteTensor,
}

impl SyntheticInstance {
    pub fn u(&self, i: usize, d: usize, rho: usize) -> f64 {
        let s = &self.spec;
        self.u_factors[(i * s.dim + d) * s.rank + rho]
    }

    /// Factor of B element `j` for dimension `d`; `d` is ignored under `SingleLatent`.
    pub fn v(&self, j: usize, d: usize, rho: usize) -> f64 {
        let s = &self.spec;
        match s.model {
            ModelKind::MultiLatent => self.v_factors[(j * s.dim + d) * s.rank + rho],
            ModelKind::SingleLatent => self.v_factors[j * s.rank + rho],
        }
    }

    /// Clean value of cell `(i, j)`; never looks at the observed tensor.
    pub fn ground_truth(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        let s = &self.spec;
        if i >= s.n_a || j >= s.n_b {
            return Err(Error::IndexOutOfBounds {
                a: i,
                b: j,
                n_a: s.n_a,
                n_b: s.n_b,
            });
        }
        let start = (i * s.n_b + j) * s.dim;
        Ok(self.clean[start..start + s.dim].to_vec())
    }

    /// The clean tensor with every cell observed.
    pub fn clean_tensor(&self) -> IncompleteTensor {
        let s = &self.spec;
        IncompleteTensor::from_parts(s.n_a, s.n_b, s.dim, self.clean.clone(), vec![true; s.n_a * s.n_b])
            .expect("clean values are finite")
    }

    /// Builds a noiseless instance from explicit factors and mask.
    pub fn from_factors(
        model: ModelKind,
        (n_a, n_b, dim, rank): (usize, usize, usize, usize),
        u_factors: Vec<f64>,
        v_factors: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let v_len = match model {
            ModelKind::MultiLatent => n_b * dim * rank,
            ModelKind::SingleLatent => n_b * rank,
        };
        if u_factors.len() != n_a * dim * rank || v_factors.len() != v_len {
            return Err(Error::InvalidInput("factor buffer lengths do not match the shape".into()));
        }
        let missing = observed.iter().filter(|o| !**o).count();
        let spec = SyntheticSpec {
            model,
            n_a,
            n_b,
            dim,
            rank,
            noise_std: 0.0,
            missing_fraction: missing as f64 / observed.len().max(1) as f64,
            seed: 0,
        };
        spec.validate()?;
        let mut inst = Self {
            spec,
            u_factors,
            v_factors,
            clean: Vec::new(),
            observed_tensor: IncompleteTensor::new(n_a, n_b, dim)?,
        };
        inst.clean = inst.contract();
        inst.observed_tensor =
            IncompleteTensor::from_parts(n_a, n_b, dim, inst.clean.clone(), observed)?;
        Ok(inst)
    }

    /// Same data written in the multi-latent form, with `v` repeated per dimension.
    pub fn to_multi_latent(&self) -> Self {
        let s = self.spec;
        if s.model == ModelKind::MultiLatent {
            return self.clone();
        }
        let mut v = Vec::with_capacity(s.n_b * s.dim * s.rank);
        for j in 0..s.n_b {
            for _ in 0..s.dim {
                v.extend_from_slice(&self.v_factors[j * s.rank..(j + 1) * s.rank]);
            }
        }
        let mut out = self.clone();
        out.spec.model = ModelKind::MultiLatent;
        out.v_factors = v;
        out.clean = out.contract();
        out
    }

    fn contract(&self) -> Vec<f64> {
        let s = &self.spec;
        let mut clean = vec![0.0; s.n_a * s.n_b * s.dim];
        for i in 0..s.n_a {
            for j in 0..s.n_b {
                for d in 0..s.dim {
                    clean[(i * s.n_b + j) * s.dim + d] =
                        (0..s.rank).map(|r| self.u(i, d, r) * self.v(j, d, r)).sum();
                }
            }
        }
        clean
    }
}

fn covers(mask: &[bool], n_a: usize, n_b: usize) -> bool {
    let rows = (0..n_a).all(|i| (0..n_b).any(|j| mask[i * n_b + j]));
    let cols = (0..n_b).all(|j| (0..n_a).any(|i| mask[i * n_b + j]));
    rows && cols
}

/// Draws factors, an MCAR mask and additive Gaussian noise, all from one
/// ChaCha stream seeded by `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    spec.validate()?;
    let s = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut normal = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let u_factors = normal(s.n_a * s.dim * s.rank);
    let v_factors = match s.model {
        ModelKind::MultiLatent => normal(s.n_b * s.dim * s.rank),
        ModelKind::SingleLatent => normal(s.n_b * s.rank),
    };

    let cells = s.n_a * s.n_b;
    let n_missing = (s.missing_fraction * cells as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    let mut mask = None;
    for _ in 0..MASK_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut m = vec![true; cells];
        for &c in &order[..n_missing] {
            m[c] = false;
        }
        if covers(&m, s.n_a, s.n_b) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or(Error::InfeasibleMask {
        attempts: MASK_ATTEMPTS,
    })?;

    let mut inst = SyntheticInstance {
        spec: s,
        u_factors,
        v_factors,
        clean: Vec::new(),
        observed_tensor: IncompleteTensor::new(s.n_a, s.n_b, s.dim)?,
    };
    inst.clean = inst.contract();
    let mut values = inst.clean.clone();
    if s.noise_std > 0.0 {
        for (cell, &obs) in mask.iter().enumerate() {
            if obs {
                for d in 0..s.dim {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    values[cell * s.dim + d] += s.noise_std * e;
                }
            }
        }
    }
    inst.observed_tensor = IncompleteTensor::from_parts(s.n_a, s.n_b, s.dim, values, mask)?;
    Ok(inst)
}
