//! Size-based dispatch between the exact and the Vecchia GP.

use serde::{Deserialize, Serialize};

use crate::covkernel::{DesignMatrix, Hyperparams};
use crate::densegp::{mean, optimize_dense, DenseGp, PredictiveMoments, VarianceScale};
use crate::error::{contract, Result};
use crate::optim::{HyperBounds, OptimizerSettings};
use crate::vecchia::{fit_vecchia_with, VecchiaFitOptions, VecchiaGp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Largest training set handled by the exact GP.
    pub dense_max_n: usize,
    pub dense: OptimizerSettings,
    pub vecchia: VecchiaFitOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            dense_max_n: 500,
            dense: OptimizerSettings::default(),
            vecchia: VecchiaFitOptions::default(),
        }
    }
}

impl FitOptions {
    pub fn uses_vecchia(&self, n: usize) -> bool {
        n > self.dense_max_n
    }
}

#[derive(Debug, Clone)]
pub enum Gp {
    Dense(DenseGp),
    Vecchia(VecchiaGp),
}

impl Gp {
    /// Estimates hyperparameters and conditions on all of `(x, y)`.
    pub fn fit(
        x: &DesignMatrix,
        y: &[f64],
        bounds: &HyperBounds,
        seed: u64,
        opts: &FitOptions,
        warm: Option<&Hyperparams>,
    ) -> Result<Gp> {
        if x.nrows() != y.len() {
            return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
        }
        if y.len() < 3 {
            return Err(contract!(
                "need at least 3 observations to fit, got {}",
                y.len()
            ));
        }
        bounds.validate(x.active_columns().len())?;
        if opts.uses_vecchia(y.len()) {
            Ok(Gp::Vecchia(fit_vecchia_with(
                x,
                y,
                bounds,
                seed,
                &opts.vecchia,
                warm,
            )?))
        } else {
            let hp = optimize_dense(x, y, bounds, seed, &opts.dense, warm)?;
            Ok(Gp::Dense(DenseGp::new(x.clone(), y, hp)?))
        }
    }

    /// Conditions on `(x, y)` with fixed hyperparameters.
    pub fn condition(x: DesignMatrix, y: &[f64], hp: Hyperparams, opts: &FitOptions) -> Result<Gp> {
        Self::condition_centered(x, y, mean(y), hp, opts)
    }

    pub fn condition_centered(
        x: DesignMatrix,
        y: &[f64],
        y_mean: f64,
        hp: Hyperparams,
        opts: &FitOptions,
    ) -> Result<Gp> {
        if opts.uses_vecchia(y.len()) {
            Ok(Gp::Vecchia(VecchiaGp::with_centering(
                x,
                y,
                y_mean,
                hp,
                opts.vecchia.m,
            )?))
        } else {
            Ok(Gp::Dense(DenseGp::with_centering(x, y, y_mean, hp)?))
        }
    }

    pub fn predict(&self, xnew: &DesignMatrix, scale: VarianceScale) -> Result<PredictiveMoments> {
        match self {
            Gp::Dense(g) => g.predict(xnew, scale),
            Gp::Vecchia(g) => g.predict(xnew, scale),
        }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        match self {
            Gp::Dense(g) => g.hyperparams(),
            Gp::Vecchia(g) => g.hyperparams(),
        }
    }

    pub fn y_mean(&self) -> f64 {
        match self {
            Gp::Dense(g) => g.y_mean(),
            Gp::Vecchia(g) => g.y_mean(),
        }
    }

    pub fn inputs(&self) -> &DesignMatrix {
        match self {
            Gp::Dense(g) => g.inputs(),
            Gp::Vecchia(g) => g.inputs(),
        }
    }

    pub fn centered_responses(&self) -> &[f64] {
        match self {
            Gp::Dense(g) => g.centered_responses(),
            Gp::Vecchia(g) => g.centered_responses(),
        }
    }

    pub fn n(&self) -> usize {
        self.centered_responses().len()
    }

    pub fn is_vecchia(&self) -> bool {
        matches!(self, Gp::Vecchia(_))
    }

    /// Raw (uncentered) training responses.
    pub fn responses(&self) -> Vec<f64> {
        let m = self.y_mean();
        self.centered_responses().iter().map(|v| v + m).collect()
    }
}
