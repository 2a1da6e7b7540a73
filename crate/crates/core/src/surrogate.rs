//! Heteroskedastic simulator surrogate. One GP models replicate means, a
//! second models replicate standard deviations, and the two are combined
//! into stochastic-kriging style predictive moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covkernel::{DesignMatrix, Hyperparams, ScaledPoints};
use crate::densegp::{mean, PredictiveMoments, VarianceScale};
use crate::error::{contract, Error, Result};
use crate::gp::{FitOptions, Gp};
use crate::linalg::cholesky_with_jitter;
use crate::optim::HyperBounds;
use crate::repstats::ReplicateSet;

/// Standard-normal 95th percentile.
pub const Q95_MULT: f64 = 1.6449;

/// Largest design `sk_reference` accepts.
pub const SK_REFERENCE_MAX_N: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkMode {
    /// Variance of the surrogate mean (replicate variance divided by `n_i`).
    Ci,
    /// Variance of a new simulator run.
    Pi,
}

/// Per-point ingredients of the surrogate moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParts {
    pub mean: Vec<f64>,
    /// CI-scale variance of the mean GP.
    pub mean_var: Vec<f64>,
    /// Back-transformed 95th percentile of the variance GP mean.
    pub v95: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HetSurrogate {
    pub mean_gp: Gp,
    pub var_gp: Gp,
    pub rep_count: usize,
    pub q95_mult: f64,
}

fn check_replicates(rs: &ReplicateSet) -> Result<usize> {
    if rs.len() < 10 {
        return Err(contract!(
            "surrogate needs at least 10 unique inputs, got {}",
            rs.len()
        ));
    }
    let n = rs.uniform_count().ok_or_else(|| {
        Error::Data("surrogate requires uniform replication across inputs".into())
    })?;
    if n < 2 {
        return Err(contract!("replicate count must be at least 2"));
    }
    Ok(n)
}

/// `T(s²) = √s²`.
fn transformed(rs: &ReplicateSet) -> Vec<f64> {
    rs.s2.iter().map(|s| s.max(0.0).sqrt()).collect()
}

/// Fits both GPs. `warm` supplies previous `(mean, variance)` hyperparameters.
pub fn fit_surrogate(
    rs: &ReplicateSet,
    bounds: &HyperBounds,
    seed: u64,
    opts: &FitOptions,
    warm: Option<(&Hyperparams, &Hyperparams)>,
) -> Result<HetSurrogate> {
    let rep_count = check_replicates(rs)?;
    let mean_gp = Gp::fit(&rs.xbar, &rs.ybar, bounds, seed, opts, warm.map(|w| w.0))?;
    let var_gp = Gp::fit(
        &rs.xbar,
        &transformed(rs),
        bounds,
        seed.wrapping_add(1),
        opts,
        warm.map(|w| w.1),
    )?;
    Ok(HetSurrogate {
        mean_gp,
        var_gp,
        rep_count,
        q95_mult: Q95_MULT,
    })
}

/// Rebuilds a surrogate on `rs` with fixed hyperparameters.
pub fn condition_surrogate(
    rs: &ReplicateSet,
    mean_hp: Hyperparams,
    var_hp: Hyperparams,
    opts: &FitOptions,
) -> Result<HetSurrogate> {
    let rep_count = check_replicates(rs)?;
    let mean_gp = Gp::condition(rs.xbar.clone(), &rs.ybar, mean_hp, opts)?;
    let var_gp = Gp::condition(rs.xbar.clone(), &transformed(rs), var_hp, opts)?;
    Ok(HetSurrogate {
        mean_gp,
        var_gp,
        rep_count,
        q95_mult: Q95_MULT,
    })
}

impl HetSurrogate {
    pub fn parts(&self, xnew: &DesignMatrix) -> Result<SurrogateParts> {
        let m = self.mean_gp.predict(xnew, VarianceScale::Ci)?;
        let v = self.var_gp.predict(xnew, VarianceScale::Ci)?;
        let v95 = v
            .mean
            .iter()
            .zip(&v.var)
            .map(|(mu, var)| (mu + self.q95_mult * var.sqrt()).max(0.0).powi(2))
            .collect();
        Ok(SurrogateParts {
            mean: m.mean,
            mean_var: m.var,
            v95,
        })
    }

    /// `V95/n_i + σ²m` in CI mode and `V95 + σ²m` in PI mode.
    pub fn predict(&self, xnew: &DesignMatrix, mode: SkMode) -> Result<PredictiveMoments> {
        let p = self.parts(xnew)?;
        let n = self.rep_count as f64;
        let var = p
            .v95
            .iter()
            .zip(&p.mean_var)
            .map(|(v, s)| match mode {
                SkMode::Ci => v / n + s,
                SkMode::Pi => v + s,
            })
            .collect();
        let scale = match mode {
            SkMode::Ci => VarianceScale::Ci,
            SkMode::Pi => VarianceScale::Pi,
        };
        Ok(PredictiveMoments {
            mean: p.mean,
            var,
            scale,
        })
    }

    /// Back-transformed variance-GP mean `T⁻¹(μ^(v))`.
    pub fn replicate_variance(&self, xnew: &DesignMatrix) -> Result<Vec<f64>> {
        let v = self.var_gp.predict(xnew, VarianceScale::Ci)?;
        Ok(v.mean.iter().map(|m| m * m).collect())
    }

    /// Exact stochastic-kriging moments using this surrogate's mean-GP
    /// hyperparameters and smoothed variances from the variance GP.
    pub fn sk_reference(
        &self,
        rs: &ReplicateSet,
        xnew: &DesignMatrix,
        scale: VarianceScale,
    ) -> Result<PredictiveMoments> {
        let s_train = self.replicate_variance(&rs.xbar)?;
        let s_new = self.replicate_variance(xnew)?;
        sk_reference(
            rs,
            self.mean_gp.hyperparams(),
            &s_train,
            &s_new,
            xnew,
            scale,
        )
    }
}

/// Dense stochastic kriging with noise matrix `S = Diag(s_train / n)`:
/// `μ = τ²kᵀ(τ²K + S)⁻¹ȳ` and `σ² = τ² − τ²kᵀ(τ²K + S)⁻¹τ²k`, plus `s_new`
/// on the PI scale. `s_train` and `s_new` are replicate variances.
pub fn sk_reference(
    rs: &ReplicateSet,
    hp: &Hyperparams,
    s_train: &[f64],
    s_new: &[f64],
    xnew: &DesignMatrix,
    scale: VarianceScale,
) -> Result<PredictiveMoments> {
    let n = rs.len();
    if n > SK_REFERENCE_MAX_N {
        return Err(contract!(
            "sk_reference is limited to {SK_REFERENCE_MAX_N} inputs, got {n}"
        ));
    }
    if n == 0 || s_train.len() != n || s_new.len() != xnew.nrows() || rs.counts.len() != n {
        return Err(contract!("sk_reference inputs have inconsistent lengths"));
    }
    rs.xbar.check_roles_match(xnew)?;
    hp.check_design(&rs.xbar)?;
    let pts = ScaledPoints::new(&rs.xbar, &hp.gamma)?;
    let q = ScaledPoints::new(xnew, &hp.gamma)?;
    let tau2 = hp.tau2;
    let mut sigma = DMatrix::from_fn(n, n, |i, j| tau2 * pts.corr(i, j));
    for i in 0..n {
        sigma[(i, i)] += s_train[i].max(0.0) / rs.counts[i] as f64;
    }
    let chol = cholesky_with_jitter(sigma, tau2)?;
    let y_mean = mean(&rs.ybar);
    let yc = DVector::from_iterator(n, rs.ybar.iter().map(|v| v - y_mean));
    let alpha = chol.solve(&yc);
    let k = DMatrix::from_fn(n, q.len(), |i, j| tau2 * pts.corr_to(i, q.point(j)));
    let mu = k.transpose() * alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let mut means = Vec::with_capacity(q.len());
    let mut vars = Vec::with_capacity(q.len());
    for j in 0..q.len() {
        means.push(mu[j] + y_mean);
        let ci = (tau2 - v.column(j).norm_squared()).max(0.0);
        vars.push(match scale {
            VarianceScale::Ci => ci,
            VarianceScale::Pi => ci + s_new[j].max(0.0),
        });
    }
    Ok(PredictiveMoments {
        mean: means,
        var: vars,
        scale,
    })
}
