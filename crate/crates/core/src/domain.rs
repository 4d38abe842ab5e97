//! Partitioned parameter space `X^n × U`.
//!
//! Each owner `j` has a personalized block `x_j ∈ R^k` and all owners share
//! `u ∈ R^ell`. Both `X` and `U` are Euclidean balls centered at the origin,
//! so projection is a radial rescale and only the diameters matter.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Number of owners.
    pub n: usize,
    /// Personalized block dimension (may be zero).
    pub k: usize,
    /// Shared block dimension.
    pub ell: usize,
    /// Diameter of `X`.
    pub d_x: f64,
    /// Diameter of `U`.
    pub d_u: f64,
}

impl DomainSpec {
    pub fn new(n: usize, k: usize, ell: usize, d_x: f64, d_u: f64) -> Result<Self> {
        let spec = Self { n, k, ell, d_x, d_u };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("domain: n must be at least 1"));
        }
        if self.ell == 0 {
            return Err(config_err("domain: ell must be at least 1"));
        }
        if !(self.d_x.is_finite() && self.d_x >= 0.0) {
            return Err(config_err(format!("domain: d_x must be finite and >= 0, got {}", self.d_x)));
        }
        if !(self.d_u.is_finite() && self.d_u > 0.0) {
            return Err(config_err(format!("domain: d_u must be finite and > 0, got {}", self.d_u)));
        }
        Ok(())
    }

    /// Radius bound `R = sqrt(n·d_x² + d_u²)` of the whole parameter space.
    pub fn radius(&self) -> f64 {
        radius(self)
    }

    pub fn x_radius(&self) -> f64 {
        self.d_x / 2.0
    }

    pub fn u_radius(&self) -> f64 {
        self.d_u / 2.0
    }

    /// Total coordinate count `n·k + ell`.
    pub fn total_dim(&self) -> usize {
        self.n * self.k + self.ell
    }

    /// The same domain restricted to a single owner.
    pub fn single_owner(&self) -> Self {
        Self { n: 1, ..*self }
    }
}

pub fn radius(spec: &DomainSpec) -> f64 {
    (spec.n as f64 * spec.d_x * spec.d_x + spec.d_u * spec.d_u).sqrt()
}

/// Concatenated parameters `[x_1, .., x_n, u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedParams {
    pub personalized: Vec<Vec<f64>>,
    pub shared: Vec<f64>,
}

impl PartitionedParams {
    pub fn zeros(spec: &DomainSpec) -> Self {
        Self {
            personalized: vec![vec![0.0; spec.k]; spec.n],
            shared: vec![0.0; spec.ell],
        }
    }

    pub fn n(&self) -> usize {
        self.personalized.len()
    }

    pub fn check_dims(&self, spec: &DomainSpec) -> Result<()> {
        check_dim("owner count", spec.n, self.personalized.len())?;
        for x in &self.personalized {
            check_dim("personalized block", spec.k, x.len())?;
        }
        check_dim("shared block", spec.ell, self.shared.len())
    }

    /// True when every block lies in its ball, up to `tol` in norm.
    pub fn in_domain(&self, spec: &DomainSpec, tol: f64) -> bool {
        self.check_dims(spec).is_ok()
            && self.personalized.iter().all(|x| norm(x) <= spec.x_radius() + tol)
            && norm(&self.shared) <= spec.u_radius() + tol
    }

    /// Flattened `[x_1, .., x_n, u]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.personalized.iter().map(Vec::len).sum::<usize>() + self.shared.len());
        for x in &self.personalized {
            out.extend_from_slice(x);
        }
        out.extend_from_slice(&self.shared);
        out
    }

    /// Euclidean distance between two parameter vectors of equal shape.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut s = sq_dist(&self.shared, &other.shared);
        for (a, b) in self.personalized.iter().zip(&other.personalized) {
            s += sq_dist(a, b);
        }
        s.sqrt()
    }

    /// Convex combination `λ·self + (1−λ)·other`.
    pub fn lerp(&self, other: &Self, lambda: f64) -> Self {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect()
        };
        Self {
            personalized: self
                .personalized
                .iter()
                .zip(&other.personalized)
                .map(|(a, b)| mix(a, b))
                .collect(),
            shared: mix(&self.shared, &other.shared),
        }
    }

    /// In-place projected block step on `(x_j, u)`; other blocks are untouched.
    pub(crate) fn step_owner(&mut self, owner: usize, grad_x: &[f64], grad_u: &[f64], eta: f64, spec: &DomainSpec) {
        let x = &mut self.personalized[owner];
        for (p, g) in x.iter_mut().zip(grad_x) {
            *p -= eta * g;
        }
        project_ball(x, spec.x_radius());
        for (p, g) in self.shared.iter_mut().zip(grad_u) {
            *p -= eta * g;
        }
        project_ball(&mut self.shared, spec.u_radius());
    }
}

/// Which personalized blocks a gradient touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OwnerIndex {
    Single(usize),
    All,
}

/// Gradient with respect to `(x_j, u)` or, for `OwnerIndex::All`, to the
/// full concatenated vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGradient {
    pub owner: OwnerIndex,
    pub grad_x: Vec<f64>,
    pub grad_u: Vec<f64>,
}

impl BlockGradient {
    pub fn single(owner: usize, grad_x: Vec<f64>, grad_u: Vec<f64>) -> Self {
        Self {
            owner: OwnerIndex::Single(owner),
            grad_x,
            grad_u,
        }
    }

    pub fn zeros(owner: usize, spec: &DomainSpec) -> Self {
        Self::single(owner, vec![0.0; spec.k], vec![0.0; spec.ell])
    }

    /// The implied full-space gradient, zero on every untouched block.
    pub fn embed(&self, spec: &DomainSpec) -> Vec<f64> {
        let mut out = vec![0.0; spec.total_dim()];
        match self.owner {
            OwnerIndex::Single(j) => out[j * spec.k..(j + 1) * spec.k].copy_from_slice(&self.grad_x),
            OwnerIndex::All => out[..spec.n * spec.k].copy_from_slice(&self.grad_x),
        }
        out[spec.n * spec.k..].copy_from_slice(&self.grad_u);
        out
    }

    pub fn norm(&self) -> f64 {
        (dot(&self.grad_x, &self.grad_x) + dot(&self.grad_u, &self.grad_u)).sqrt()
    }

    fn check_dims(&self, spec: &DomainSpec) -> Result<()> {
        match self.owner {
            OwnerIndex::Single(j) => {
                if j >= spec.n {
                    return Err(Error::Index {
                        what: "owner",
                        index: j,
                        limit: spec.n,
                    });
                }
                check_dim("gradient x block", spec.k, self.grad_x.len())?;
            }
            OwnerIndex::All => check_dim("gradient x blocks", spec.n * spec.k, self.grad_x.len())?,
        }
        check_dim("gradient u block", spec.ell, self.grad_u.len())
    }
}

/// Project every block onto its ball.
pub fn project(params: &PartitionedParams, spec: &DomainSpec) -> Result<PartitionedParams> {
    params.check_dims(spec)?;
    let mut out = params.clone();
    for x in &mut out.personalized {
        project_ball(x, spec.x_radius());
    }
    project_ball(&mut out.shared, spec.u_radius());
    Ok(out)
}

/// `project(params − eta·grad)`, with the gradient embedded into the full space.
pub fn apply_step(params: &PartitionedParams, grad: &BlockGradient, eta: f64, spec: &DomainSpec) -> Result<PartitionedParams> {
    params.check_dims(spec)?;
    grad.check_dims(spec)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(config_err(format!("step size must be finite and >= 0, got {eta}")));
    }
    let mut out = params.clone();
    match grad.owner {
        OwnerIndex::Single(j) => out.step_owner(j, &grad.grad_x, &grad.grad_u, eta, spec),
        OwnerIndex::All => {
            let k = spec.k;
            for (j, x) in out.personalized.iter_mut().enumerate() {
                for (p, g) in x.iter_mut().zip(&grad.grad_x[j * k..(j + 1) * k]) {
                    *p -= eta * g;
                }
                project_ball(x, spec.x_radius());
            }
            for (p, g) in out.shared.iter_mut().zip(&grad.grad_u) {
                *p -= eta * g;
            }
            project_ball(&mut out.shared, spec.u_radius());
        }
    }
    Ok(out)
}

/// Radially rescale `v` into the origin-centered ball of radius `r`.
pub fn project_ball(v: &mut [f64], r: f64) {
    let nrm = norm(v);
    if nrm > r {
        if r == 0.0 {
            v.iter_mut().for_each(|c| *c = 0.0);
        } else {
            let s = r / nrm;
            v.iter_mut().for_each(|c| *c *= s);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
