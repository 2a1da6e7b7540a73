//! Derivative-free hyperparameter search: a bounded Nelder–Mead simplex and
//! Latin-hypercube start points, both on log-parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covkernel::DesignMatrix;
use crate::error::{contract, Result};

/// Box bounds for `(γ_1..γ_p, g)` on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub gamma: Vec<(f64, f64)>,
    pub g: (f64, f64),
}

impl HyperBounds {
    /// `γℓ ∈ [1e-4, 1e6]·range²`, `g ∈ [1e-8, 10]`. Constant columns use range 1.
    pub fn default_for(x: &DesignMatrix) -> Self {
        let gamma = x
            .active_ranges()
            .into_iter()
            .map(|r| {
                let r2 = if r > 0.0 { r * r } else { 1.0 };
                (1e-4 * r2, 1e6 * r2)
            })
            .collect();
        Self {
            gamma,
            g: (1e-8, 10.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len() + 1
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.gamma.len() != p {
            return Err(contract!(
                "bounds cover {} lengthscales, design has {p}",
                self.gamma.len()
            ));
        }
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if !self.gamma.iter().all(|b| ok(*b)) || !ok(self.g) {
            return Err(contract!("bounds must be finite, positive and ordered"));
        }
        Ok(())
    }

    pub(crate) fn log_lower(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|b| b.0.ln())
            .chain([self.g.0.ln()])
            .collect()
    }

    pub(crate) fn log_upper(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|b| b.1.ln())
            .chain([self.g.1.ln()])
            .collect()
    }

    /// Narrower box used to draw start points: `γ` between 1% and 100% of
    /// range², nugget in `[1e-3, 0.5]`.
    pub(crate) fn start_box(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self
            .gamma
            .iter()
            .map(|b| (b.0 * 1e2).ln().min(b.1.ln()))
            .chain([(1e-3f64).max(self.g.0).min(self.g.1).ln()])
            .collect();
        let hi = self
            .gamma
            .iter()
            .map(|b| (b.0 * 1e4).ln().min(b.1.ln()))
            .chain([(0.5f64).min(self.g.1).max(self.g.0).ln()])
            .collect();
        (lo, hi)
    }
}

/// Settings shared by the dense and Vecchia fitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub restarts: usize,
    pub max_evals: usize,
    pub ftol: f64,
    pub xtol: f64,
    pub initial_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_evals: 300,
            ftol: 1e-7,
            xtol: 1e-4,
            initial_step: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes `f` inside the box `[lo, hi]`. Trial points are projected onto
/// the box; non-finite objective values count as `+∞`.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    s: &OptimizerSettings,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    clamp_into(&mut start, lo, hi);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..d {
        let mut v = start.clone();
        let step = s.initial_step;
        v[i] = if v[i] + step <= hi[i] {
            v[i] + step
        } else {
            v[i] - step
        };
        clamp_into(&mut v, lo, hi);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

    loop {
        // Stable sort keeps index order among ties.
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fv = idx.iter().map(|&i| fv[i]).collect();

        let spread = fv[d] - fv[0];
        let diam = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let flat = spread.is_finite() && spread <= s.ftol * (1.0 + fv[0].abs());
        if evals >= s.max_evals || (flat && diam <= s.xtol) {
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp_into(&mut p, lo, hi);
            p
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < fv[0] {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[d] = xe;
                fv[d] = fe;
            } else {
                simplex[d] = xr;
                fv[d] = fr;
            }
            continue;
        }
        if fr < fv[d - 1] {
            simplex[d] = xr;
            fv[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < fv[d] {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fv[d].min(fr) {
            simplex[d] = xc;
            fv[d] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        for i in 1..=d {
            let v: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            fv[i] = eval(&v, &mut evals);
            simplex[i] = v;
        }
    }

    let best = (0..=d).fold(0, |b, i| if fv[i] < fv[b] { i } else { b });
    Minimum {
        x: simplex[best].clone(),
        fx: fv[best],
        evals,
    }
}

/// `n` Latin-hypercube points in `[lo, hi]`, deterministic in `seed`.
pub fn latin_hypercube(n: usize, lo: &[f64], hi: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = lo.len();
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            pts[i][j] = lo[j] + u * (hi[j] - lo[j]);
        }
    }
    pts
}
