//! Exact GP likelihood, maximum-likelihood fitting and kriging.
//!
//! Used directly for small designs (the bias GP on short windows, tests) and
//! as the reference the Vecchia approximation is checked against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covkernel::{corr_matrix, DesignMatrix, Hyperparams, ScaledPoints};
use crate::error::{contract, Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::optim::{latin_hypercube, nelder_mead, HyperBounds, OptimizerSettings};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower limit for the profiled scale, so constant responses still yield a
/// valid (tiny) `τ²`.
pub(crate) const TAU2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceScale {
    /// Variance of the latent mean; no nugget at the prediction point.
    Ci,
    /// Variance of a new noisy observation.
    Pi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub scale: VarianceScale,
}

impl PredictiveMoments {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

/// A fitted exact GP with its covariance factor cached.
#[derive(Debug, Clone)]
pub struct DenseGp {
    x: DesignMatrix,
    y: Vec<f64>,
    y_mean: f64,
    hp: Hyperparams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pts: ScaledPoints,
}

impl DenseGp {
    /// Conditions a GP with fixed hyperparameters on `(x, y)`. `y` is
    /// centered on its sample mean.
    pub fn new(x: DesignMatrix, y: &[f64], hp: Hyperparams) -> Result<Self> {
        let y_mean = mean(y);
        Self::with_centering(x, y, y_mean, hp)
    }

    pub fn with_centering(
        x: DesignMatrix,
        y: &[f64],
        y_mean: f64,
        hp: Hyperparams,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
        }
        if x.is_empty() {
            return Err(contract!("cannot condition a GP on zero observations"));
        }
        hp.check_design(&x)?;
        let pts = ScaledPoints::new(&x, &hp.gamma)?;
        let sigma = corr_matrix(&pts, hp.g) * hp.tau2;
        let chol = cholesky_with_jitter(sigma, hp.tau2)?;
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let alpha = chol.solve(&DVector::from_column_slice(&yc));
        Ok(Self {
            x,
            y: yc,
            y_mean,
            hp,
            chol,
            alpha,
            pts,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn inputs(&self) -> &DesignMatrix {
        &self.x
    }

    /// Centered responses.
    pub fn centered_responses(&self) -> &[f64] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Kriging mean and pointwise variance at `xnew`.
    pub fn predict(&self, xnew: &DesignMatrix, scale: VarianceScale) -> Result<PredictiveMoments> {
        self.x.check_roles_match(xnew)?;
        let q = ScaledPoints::new(xnew, &self.hp.gamma)?;
        let (n, m) = (self.pts.len(), q.len());
        let tau2 = self.hp.tau2;
        let kx = DMatrix::from_fn(n, m, |i, j| tau2 * self.pts.corr_to(i, q.point(j)));
        let mean_c = kx.transpose() * &self.alpha;
        let l = self.chol.l();
        let v = l
            .solve_lower_triangular(&kx)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let mut mean = Vec::with_capacity(m);
        let mut var = Vec::with_capacity(m);
        for j in 0..m {
            mean.push(mean_c[j] + self.y_mean);
            let ci = (tau2 - v.column(j).norm_squared()).max(0.0);
            var.push(match scale {
                VarianceScale::Ci => ci,
                VarianceScale::Pi => ci + tau2 * self.hp.g,
            });
        }
        Ok(PredictiveMoments { mean, var, scale })
    }

    /// Log-likelihood of the stored (centered) responses.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let logdet = 2.0
            * self
                .chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let quad = DVector::from_column_slice(&self.y).dot(&self.alpha);
        -0.5 * logdet - 0.5 * quad - 0.5 * n * LN_2PI
    }
}

pub(crate) fn mean(y: &[f64]) -> f64 {
    if y.is_empty() {
        0.0
    } else {
        y.iter().sum::<f64>() / y.len() as f64
    }
}

/// `−½ log|Σθ| − ½ yᵀΣθ⁻¹y − (n/2) log 2π` with `Σθ = τ²(K + gI)`.
pub fn log_likelihood(x: &DesignMatrix, y: &[f64], hp: &Hyperparams) -> Result<f64> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
    }
    hp.check_design(x)?;
    let pts = ScaledPoints::new(x, &hp.gamma)?;
    let chol = cholesky_with_jitter(corr_matrix(&pts, hp.g) * hp.tau2, hp.tau2)?;
    let n = y.len() as f64;
    let yv = DVector::from_column_slice(y);
    let logdet = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let quad = yv.dot(&chol.solve(&yv));
    Ok(-0.5 * logdet - 0.5 * quad - 0.5 * n * LN_2PI)
}

/// Log-likelihood with `τ²` replaced by its closed-form maximizer
/// `yᵀR⁻¹y / n`. Returns `(loglik, τ̂²)`.
pub(crate) fn profiled_log_likelihood(
    pts: &ScaledPoints,
    y: &DVector<f64>,
    g: f64,
) -> Result<(f64, f64)> {
    let chol = cholesky_with_jitter(corr_matrix(pts, g), 1.0)?;
    let n = y.len() as f64;
    let logdet = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let quad = y.dot(&chol.solve(y));
    let tau2 = (quad / n).max(TAU2_FLOOR);
    let ll = -0.5 * n * tau2.ln() - 0.5 * logdet - 0.5 * quad / tau2 - 0.5 * n * LN_2PI;
    Ok((ll, tau2))
}

pub(crate) fn unpack(theta: &[f64]) -> (Vec<f64>, f64) {
    let p = theta.len() - 1;
    (theta[..p].iter().map(|v| v.exp()).collect(), theta[p].exp())
}

pub(crate) fn pack(hp: &Hyperparams, bounds: &HyperBounds) -> Vec<f64> {
    hp.gamma
        .iter()
        .zip(&bounds.gamma)
        .map(|(g, b)| g.clamp(b.0, b.1).ln())
        .chain([hp.g.clamp(bounds.g.0, bounds.g.1).ln()])
        .collect()
}

/// Multi-start maximum likelihood with default optimizer settings.
pub fn fit_mle(x: &DesignMatrix, y: &[f64], bounds: &HyperBounds, seed: u64) -> Result<DenseGp> {
    fit_mle_with(x, y, bounds, seed, &OptimizerSettings::default())
}

pub fn fit_mle_with(
    x: &DesignMatrix,
    y: &[f64],
    bounds: &HyperBounds,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<DenseGp> {
    if x.nrows() != y.len() {
        return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
    }
    if y.len() < 3 {
        return Err(contract!(
            "need at least 3 observations to fit, got {}",
            y.len()
        ));
    }
    let p = x.active_columns().len();
    bounds.validate(p)?;
    let hp = optimize_dense(x, y, bounds, seed, settings, None)?;
    DenseGp::new(x.clone(), y, hp)
}

/// Returns the best hyperparameters over Latin-hypercube starts, plus an
/// optional extra warm start evaluated first.
pub(crate) fn optimize_dense(
    x: &DesignMatrix,
    y: &[f64],
    bounds: &HyperBounds,
    seed: u64,
    settings: &OptimizerSettings,
    warm: Option<&Hyperparams>,
) -> Result<Hyperparams> {
    let y_mean = mean(y);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let (lo, hi) = (bounds.log_lower(), bounds.log_upper());
    let (slo, shi) = bounds.start_box();
    let mut starts = Vec::new();
    if let Some(w) = warm {
        starts.push(pack(w, bounds));
    }
    starts.extend(latin_hypercube(settings.restarts, &slo, &shi, seed));

    let objective = |theta: &[f64]| -> f64 {
        let (gamma, g) = unpack(theta);
        let Ok(pts) = ScaledPoints::new(x, &gamma) else {
            return f64::INFINITY;
        };
        match profiled_log_likelihood(&pts, &yc, g) {
            Ok((ll, _)) => -ll,
            Err(_) => f64::INFINITY,
        }
    };

    let results: Vec<_> = starts
        .par_iter()
        .map(|s| nelder_mead(objective, s, &lo, &hi, settings))
        .collect();
    let best = results
        .iter()
        .enumerate()
        .filter(|(_, m)| m.fx.is_finite())
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, f)) if f <= m.fx => acc,
            _ => Some((i, m.fx)),
        })
        .ok_or_else(|| Error::Fit("every optimizer start failed numerically".into()))?;
    let (gamma, g) = unpack(&results[best.0].x);
    let pts = ScaledPoints::new(x, &gamma)?;
    let (_, tau2) = profiled_log_likelihood(&pts, &yc, g)?;
    Hyperparams::new(gamma, tau2, g)
}
