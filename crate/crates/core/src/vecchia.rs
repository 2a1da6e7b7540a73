//! Scaled Vecchia approximation: the joint Gaussian density is replaced by a
//! product of univariate conditionals, each given at most `m` previously
//! ordered neighbors in lengthscale-scaled input space.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covkernel::{DesignMatrix, Hyperparams, ScaledPoints};
use crate::densegp::{
    mean, optimize_dense, pack, unpack, PredictiveMoments, VarianceScale, LN_2PI, TAU2_FLOOR,
};
use crate::error::{contract, Error, Result};
use crate::kdtree::KdTree;
use crate::linalg::{forward_solve, small_chol_with_jitter};
use crate::optim::{nelder_mead, HyperBounds, OptimizerSettings};

pub const DEFAULT_M: usize = 30;

/// Floor on unit-scale conditional variances.
const VAR_FLOOR: f64 = 1e-12;

/// Maximin ordering and nearest-predecessor conditioning sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecchiaPlan {
    order: Vec<usize>,
    nbr_start: Vec<usize>,
    nbrs: Vec<usize>,
    m: usize,
    scaling: Vec<f64>,
    /// Rows in kd-tree leaf order. Conditionals are evaluated slot by slot
    /// so that consecutive targets reuse cached neighbor points.
    slots: Vec<u32>,
    slot_start: Vec<usize>,
    /// Conditioning sets of each slot, as slots.
    slot_nbrs: Vec<u32>,
}

impl VecchiaPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `order()[i]` is the row of the design placed at position `i`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Positions (not rows) of the conditioning set for position `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbrs[self.nbr_start[i]..self.nbr_start[i + 1]]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Inverse root-lengthscales the ordering was computed under.
    pub fn scaling(&self) -> &[f64] {
        &self.scaling
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Far {
    d2: f64,
    i: usize,
}

impl Eq for Far {}

impl Ord for Far {
    // Max-heap on distance; among equal distances the lowest index wins.
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.total_cmp(&o.d2).then(o.i.cmp(&self.i))
    }
}

impl PartialOrd for Far {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Greedy maximin ordering: each next point maximizes its distance to the
/// points already chosen.
pub(crate) fn maximin_order(pts: &ScaledPoints, tree: &KdTree, first: usize) -> Vec<usize> {
    let n = pts.len();
    let mut order = Vec::with_capacity(n);
    let mut chosen = vec![false; n];
    let mut d2: Vec<f64> = (0..n).map(|j| pts.dist2_to(j, pts.point(first))).collect();
    chosen[first] = true;
    order.push(first);
    let mut heap: BinaryHeap<Far> = (0..n)
        .filter(|&j| j != first)
        .map(|j| Far { d2: d2[j], i: j })
        .collect();
    while let Some(Far { d2: dist, i }) = heap.pop() {
        if chosen[i] || dist != d2[i] {
            continue;
        }
        chosen[i] = true;
        order.push(i);
        tree.within(pts.point(i), dist, |j, dj| {
            if !chosen[j] && dj < d2[j] {
                d2[j] = dj;
                heap.push(Far { d2: dj, i: j });
            }
        });
    }
    order
}

/// The `m` rows nearest to row `order[i]` among rows at earlier positions,
/// returned as ascending positions. Distance ties go to the lower row index.
fn predecessors(
    pts: &ScaledPoints,
    tree: &KdTree,
    order: &[usize],
    rank: &[usize],
    i: usize,
    m: usize,
    brute_below: usize,
) -> Vec<usize> {
    let q = pts.point(order[i]);
    let mut out: Vec<usize> = if i <= m {
        (0..i).collect()
    } else if i < brute_below {
        let mut c: Vec<(f64, usize)> = order[..i]
            .iter()
            .map(|&r| (pts.dist2_to(r, q), r))
            .collect();
        c.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c[..m].iter().map(|&(_, r)| rank[r]).collect()
    } else {
        tree.knn(q, m, |r| rank[r] < i)
            .into_iter()
            .map(|(r, _)| rank[r])
            .collect()
    };
    out.sort_unstable();
    out
}

fn plan_from_points(pts: &ScaledPoints, scaling: Vec<f64>, m: usize, first: usize) -> VecchiaPlan {
    let n = pts.len();
    let tree = KdTree::new(pts.dim(), pts.coords().to_vec());
    let order = maximin_order(pts, &tree, first);
    let mut rank = vec![0; n];
    for (pos, &r) in order.iter().enumerate() {
        rank[r] = pos;
    }
    // Below this position an exhaustive scan beats a filtered tree search.
    let brute_below = ((m * n) as f64).sqrt().max(256.0) as usize;
    let sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| predecessors(pts, &tree, &order, &rank, i, m, brute_below))
        .collect();
    let total = sets.iter().map(Vec::len).sum();
    let mut nbr_start = Vec::with_capacity(n + 1);
    let mut nbrs = Vec::with_capacity(total);
    nbr_start.push(0);
    for s in &sets {
        nbrs.extend_from_slice(s);
        nbr_start.push(nbrs.len());
    }

    let slots: Vec<u32> = tree.leaf_order().iter().map(|&r| r as u32).collect();
    let mut slot_of_row = vec![0u32; n];
    for (s, &r) in slots.iter().enumerate() {
        slot_of_row[r as usize] = s as u32;
    }
    let mut slot_start = Vec::with_capacity(n + 1);
    let mut slot_nbrs = Vec::with_capacity(total);
    slot_start.push(0);
    for &r in &slots {
        let set = &sets[rank[r as usize]];
        slot_nbrs.extend(set.iter().map(|&p| slot_of_row[order[p]]));
        slot_start.push(slot_nbrs.len());
    }
    VecchiaPlan {
        order,
        nbr_start,
        nbrs,
        m,
        scaling,
        slots,
        slot_start,
        slot_nbrs,
    }
}

/// Orders `x` by maximin in the space scaled by `1/√γ` and assigns each
/// position its `m` nearest predecessors. The first point is drawn from `seed`.
pub fn build_plan(x: &DesignMatrix, hp: &Hyperparams, m: usize, seed: u64) -> Result<VecchiaPlan> {
    if m == 0 {
        return Err(contract!("conditioning-set size must be at least 1"));
    }
    if x.is_empty() {
        return Err(contract!("cannot plan over an empty design"));
    }
    hp.check_design(x)?;
    let pts = ScaledPoints::new(x, &hp.gamma)?;
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..pts.len());
    let scaling = hp.gamma.iter().map(|g| 1.0 / g.sqrt()).collect();
    Ok(plan_from_points(&pts, scaling, m, first))
}

/// Scratch buffers for one small conditional solve.
struct Work {
    r: Vec<f64>,
    l: Vec<f64>,
    k: Vec<f64>,
    z: Vec<f64>,
}

impl Work {
    fn new(m: usize) -> Self {
        Self {
            r: vec![0.0; m * m],
            l: vec![0.0; m * m],
            k: vec![0.0; m],
            z: vec![0.0; m],
        }
    }

    /// Unit-scale kriging weights of target `q` on rows `nb`: on return
    /// `k = L⁻¹ k(nb, q)` and `z = L⁻¹ y(nb)`.
    fn condition(
        &mut self,
        pts: &ScaledPoints,
        nb: &[usize],
        q: &[f64],
        y: &[f64],
        g: f64,
    ) -> Result<usize> {
        let k = nb.len();
        if self.k.len() < k {
            *self = Work::new(k);
        }
        let r = &mut self.r[..k * k];
        for a in 0..k {
            r[a * k + a] = 1.0 + g;
            for b in 0..a {
                r[a * k + b] = pts.corr(nb[a], nb[b]);
            }
            self.k[a] = pts.corr_to(nb[a], q);
            self.z[a] = y[nb[a]];
        }
        let l = &mut self.l[..k * k];
        small_chol_with_jitter(r, l, k)?;
        forward_solve(l, k, &mut self.k[..k]);
        forward_solve(l, k, &mut self.z[..k]);
        Ok(k)
    }

    fn moments(&self, k: usize) -> (f64, f64) {
        let mu = self.k[..k]
            .iter()
            .zip(&self.z[..k])
            .map(|(a, b)| a * b)
            .sum();
        let ss: f64 = self.k[..k].iter().map(|a| a * a).sum();
        (mu, ss)
    }
}

/// Unit-scale residual and conditional variance for every row, in slot order.
fn conditionals(
    pts: &ScaledPoints,
    y: &[f64],
    g: f64,
    plan: &VecchiaPlan,
) -> Result<Vec<(f64, f64)>> {
    let pts = pts.gather(&plan.slots);
    let y: Vec<f64> = plan.slots.iter().map(|&r| y[r as usize]).collect();
    (0..plan.len())
        .into_par_iter()
        .map_init(
            || (Work::new(plan.m.min(plan.len())), Vec::new()),
            |(w, nb), s| {
                nb.clear();
                nb.extend(
                    plan.slot_nbrs[plan.slot_start[s]..plan.slot_start[s + 1]]
                        .iter()
                        .map(|&j| j as usize),
                );
                if nb.is_empty() {
                    return Ok((y[s], 1.0 + g));
                }
                let k = w.condition(&pts, nb, pts.point(s), &y, g)?;
                let (mu, ss) = w.moments(k);
                Ok((y[s] - mu, (1.0 + g - ss).max(VAR_FLOOR)))
            },
        )
        .collect()
}

fn check_plan(x: &DesignMatrix, y: &[f64], plan: &VecchiaPlan) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
    }
    if plan.len() != y.len() {
        return Err(contract!(
            "plan covers {} rows, data has {}",
            plan.len(),
            y.len()
        ));
    }
    Ok(())
}

/// Sum of the log conditional densities `log N(y_o(i); μ_i, τ² v_i)`.
pub fn vecchia_loglik(
    x: &DesignMatrix,
    y: &[f64],
    hp: &Hyperparams,
    plan: &VecchiaPlan,
) -> Result<f64> {
    check_plan(x, y, plan)?;
    hp.check_design(x)?;
    let pts = ScaledPoints::new(x, &hp.gamma)?;
    let terms = conditionals(&pts, y, hp.g, plan)?;
    Ok(terms
        .iter()
        .map(|&(r, v)| {
            let s = hp.tau2 * v;
            -0.5 * (LN_2PI + s.ln()) - 0.5 * r * r / s
        })
        .sum())
}

/// Vecchia log-likelihood with `τ²` profiled out. Returns `(loglik, τ̂²)`.
pub(crate) fn profiled_vecchia_loglik(
    pts: &ScaledPoints,
    y: &[f64],
    g: f64,
    plan: &VecchiaPlan,
) -> Result<(f64, f64)> {
    let terms = conditionals(pts, y, g, plan)?;
    let n = y.len() as f64;
    let logdet: f64 = terms.iter().map(|t| t.1.ln()).sum();
    let quad: f64 = terms.iter().map(|&(r, v)| r * r / v).sum();
    let tau2 = (quad / n).max(TAU2_FLOOR);
    Ok((
        -0.5 * logdet - 0.5 * n * tau2.ln() - 0.5 * quad / tau2 - 0.5 * n * LN_2PI,
        tau2,
    ))
}

/// A GP conditioned on all training data, predicting from nearest neighbors.
#[derive(Debug, Clone)]
pub struct VecchiaGp {
    x: DesignMatrix,
    y: Vec<f64>,
    y_mean: f64,
    hp: Hyperparams,
    m: usize,
    pts: ScaledPoints,
    tree: KdTree,
}

impl VecchiaGp {
    /// Conditions on `(x, y)` with fixed hyperparameters; `y` is centered on
    /// its sample mean.
    pub fn new(x: DesignMatrix, y: &[f64], hp: Hyperparams, m: usize) -> Result<Self> {
        let y_mean = mean(y);
        Self::with_centering(x, y, y_mean, hp, m)
    }

    pub fn with_centering(
        x: DesignMatrix,
        y: &[f64],
        y_mean: f64,
        hp: Hyperparams,
        m: usize,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
        }
        if x.is_empty() {
            return Err(contract!("cannot condition a GP on zero observations"));
        }
        if m == 0 {
            return Err(contract!("conditioning-set size must be at least 1"));
        }
        hp.check_design(&x)?;
        let pts = ScaledPoints::new(&x, &hp.gamma)?;
        let tree = KdTree::new(pts.dim(), pts.coords().to_vec());
        let y = y.iter().map(|v| v - y_mean).collect();
        Ok(Self {
            x,
            y,
            y_mean,
            hp,
            m,
            pts,
            tree,
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

    pub fn centered_responses(&self) -> &[f64] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Plan over all training rows under the fitted scaling.
    pub fn plan(&self, seed: u64) -> Result<VecchiaPlan> {
        build_plan(&self.x, &self.hp, self.m, seed)
    }

    /// Approximate log-likelihood of the centered responses.
    pub fn log_likelihood(&self, seed: u64) -> Result<f64> {
        vecchia_loglik(&self.x, &self.y, &self.hp, &self.plan(seed)?)
    }

    /// Kriging on the `m` nearest training rows of each new point.
    pub fn predict(&self, xnew: &DesignMatrix, scale: VarianceScale) -> Result<PredictiveMoments> {
        self.x.check_roles_match(xnew)?;
        let q = ScaledPoints::new(xnew, &self.hp.gamma)?;
        let k = self.m.min(self.n());
        let (tau2, g) = (self.hp.tau2, self.hp.g);
        let out: Vec<(f64, f64)> = (0..q.len())
            .into_par_iter()
            .map_init(
                || (Work::new(k), Vec::new()),
                |(w, rows), j| {
                    let p = q.point(j);
                    rows.clear();
                    rows.extend(self.tree.knn(p, k, |_| true).into_iter().map(|(r, _)| r));
                    let k = w.condition(&self.pts, rows, p, &self.y, g)?;
                    let (mu, ss) = w.moments(k);
                    let ci = tau2 * (1.0 - ss).max(0.0);
                    let var = match scale {
                        VarianceScale::Ci => ci,
                        VarianceScale::Pi => ci + tau2 * g,
                    };
                    Ok((mu + self.y_mean, var))
                },
            )
            .collect::<Result<_>>()?;
        let (mean, var) = out.into_iter().unzip();
        Ok(PredictiveMoments { mean, var, scale })
    }
}

/// Tuning for the two-stage fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecchiaFitOptions {
    pub m: usize,
    /// Rows in the exact-likelihood pilot fit.
    pub pilot_size: usize,
    /// Most rows the Vecchia likelihood is optimized over.
    pub opt_cap: usize,
    pub pilot: OptimizerSettings,
    pub refine: OptimizerSettings,
}

impl Default for VecchiaFitOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            pilot_size: 300,
            opt_cap: 4000,
            pilot: OptimizerSettings {
                restarts: 3,
                max_evals: 200,
                ..OptimizerSettings::default()
            },
            refine: OptimizerSettings {
                restarts: 1,
                max_evals: 120,
                ftol: 1e-6,
                xtol: 1e-3,
                initial_step: 0.3,
            },
        }
    }
}

/// Sorted random subset of `k` out of `n` rows, or all rows when `k ≥ n`.
pub(crate) fn subsample(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

pub fn fit_vecchia(
    x: &DesignMatrix,
    y: &[f64],
    m: usize,
    bounds: &HyperBounds,
    seed: u64,
) -> Result<VecchiaGp> {
    fit_vecchia_with(
        x,
        y,
        bounds,
        seed,
        &VecchiaFitOptions {
            m,
            ..Default::default()
        },
        None,
    )
}

/// Two-stage fit. A pilot exact-likelihood fit on a random subsample gives
/// preliminary lengthscales, the plan is built under that scaling, and all
/// hyperparameters are refined under the Vecchia likelihood. A `warm` start
/// replaces the pilot fit.
pub fn fit_vecchia_with(
    x: &DesignMatrix,
    y: &[f64],
    bounds: &HyperBounds,
    seed: u64,
    opts: &VecchiaFitOptions,
    warm: Option<&Hyperparams>,
) -> Result<VecchiaGp> {
    if x.nrows() != y.len() {
        return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
    }
    if y.len() < 3 {
        return Err(contract!(
            "need at least 3 observations to fit, got {}",
            y.len()
        ));
    }
    if opts.m == 0 {
        return Err(contract!("conditioning-set size must be at least 1"));
    }
    bounds.validate(x.active_columns().len())?;
    let n = y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pilot = match warm {
        Some(w) => {
            w.check_design(x)?;
            w.clone()
        }
        None => {
            let rows = subsample(n, opts.pilot_size, &mut rng);
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            optimize_dense(&x.select_rows(&rows), &ys, bounds, seed, &opts.pilot, None)?
        }
    };

    let rows = subsample(n, opts.opt_cap, &mut rng);
    let xs = x.select_rows(&rows);
    let y_mean = mean(y);
    let ys: Vec<f64> = rows.iter().map(|&i| y[i] - y_mean).collect();
    let plan = build_plan(&xs, &pilot, opts.m, rng.random())?;
    let objective = |theta: &[f64]| -> f64 {
        let (gamma, g) = unpack(theta);
        let Ok(pts) = ScaledPoints::new(&xs, &gamma) else {
            return f64::INFINITY;
        };
        match profiled_vecchia_loglik(&pts, &ys, g, &plan) {
            Ok((ll, _)) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    let start = pack(&pilot, bounds);
    let best = nelder_mead(
        objective,
        &start,
        &bounds.log_lower(),
        &bounds.log_upper(),
        &opts.refine,
    );
    if !best.fx.is_finite() {
        return Err(Error::Fit(
            "Vecchia likelihood was non-finite at every trial point".into(),
        ));
    }
    let (gamma, g) = unpack(&best.x);
    let (_, tau2) = profiled_vecchia_loglik(&ScaledPoints::new(&xs, &gamma)?, &ys, g, &plan)?;
    let hp = Hyperparams::new(gamma, tau2, g)?;
    log::debug!(
        "vecchia fit on {} of {n} rows: {hp:?} after {} evals",
        rows.len(),
        best.evals
    );
    VecchiaGp::with_centering(x.clone(), y, y_mean, hp, opts.m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::ColumnRole;
    use crate::densegp::{self, DenseGp};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DesignMatrix {
        let roles = [
            ColumnRole::Day,
            ColumnRole::Depth,
            ColumnRole::Horizon,
            ColumnRole::Phi,
        ][..p]
            .to_vec();
        let vals = (0..n * p).map(|_| rng.random::<f64>()).collect();
        DesignMatrix::new(roles, vals).unwrap()
    }

    fn sample_gp(x: &DesignMatrix, hp: &Hyperparams, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = crate::covkernel::cov_matrix(x, hp, true).unwrap();
        let l = crate::linalg::cholesky_with_jitter(k, hp.tau2).unwrap().l();
        let z = nalgebra::DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (l * z).iter().copied().collect()
    }

    fn brute_maximin(pts: &ScaledPoints, first: usize) -> Vec<usize> {
        let n = pts.len();
        let mut order = vec![first];
        let mut chosen = vec![false; n];
        chosen[first] = true;
        while order.len() < n {
            let mut best: Option<(f64, usize)> = None;
            for j in (0..n).filter(|&j| !chosen[j]) {
                let d = order
                    .iter()
                    .map(|&o| pts.dist2_to(j, pts.point(o)))
                    .fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, j));
                }
            }
            let j = best.unwrap().1;
            chosen[j] = true;
            order.push(j);
        }
        order
    }

    fn brute_neighbors(pts: &ScaledPoints, order: &[usize], i: usize, m: usize) -> Vec<usize> {
        let q = pts.point(order[i]);
        let mut c: Vec<(f64, usize, usize)> = (0..i)
            .map(|p| (pts.dist2_to(order[p], q), order[p], p))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = c.into_iter().take(m).map(|t| t.2).collect();
        out.sort();
        out
    }

    fn check_plan_against_oracle(x: &DesignMatrix, hp: &Hyperparams, m: usize, seed: u64) {
        let plan = build_plan(x, hp, m, seed).unwrap();
        let pts = ScaledPoints::new(x, &hp.gamma).unwrap();
        let first = plan.order()[0];
        assert_eq!(plan.order(), brute_maximin(&pts, first).as_slice());
        for i in 0..plan.len() {
            assert_eq!(
                plan.neighbors(i),
                brute_neighbors(&pts, plan.order(), i, m).as_slice(),
                "position {i}"
            );
        }
    }

    #[test]
    fn plan_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_design(&mut rng, 150, 3);
        let hp = Hyperparams::new(vec![0.1, 0.5, 2.0], 1.0, 0.01).unwrap();
        check_plan_against_oracle(&x, &hp, 7, 1);

        // 1-d equispaced grid: many exact distance ties.
        let grid: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let x = DesignMatrix::new(vec![ColumnRole::Day], grid).unwrap();
        let hp = Hyperparams::new(vec![4.0], 1.0, 0.01).unwrap();
        check_plan_against_oracle(&x, &hp, 2, 9);
    }

    #[test]
    fn neighbors_match_exhaustive_search_past_brute_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_design(&mut rng, 3000, 2);
        let hp = Hyperparams::new(vec![0.3, 1.0], 1.0, 0.01).unwrap();
        let plan = build_plan(&x, &hp, 10, 3).unwrap();
        let pts = ScaledPoints::new(&x, &hp.gamma).unwrap();
        for i in (0..3000).step_by(37).chain([2999]) {
            assert_eq!(
                plan.neighbors(i),
                brute_neighbors(&pts, plan.order(), i, 10).as_slice()
            );
        }
    }

    #[test]
    fn plan_small_cases() {
        let x = DesignMatrix::new(vec![ColumnRole::Day], vec![0.0, 1.0]).unwrap();
        let hp = Hyperparams::new(vec![1.0], 1.0, 0.1).unwrap();
        let plan = build_plan(&x, &hp, 3, 0).unwrap();
        assert!(plan.neighbors(0).is_empty());
        assert_eq!(plan.neighbors(1), &[0]);
        assert!(build_plan(&x, &hp, 0, 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_design(&mut rng, 30, 2);
        let hp = Hyperparams::new(vec![0.2, 0.2], 1.0, 0.1).unwrap();
        let plan = build_plan(&x, &hp, 40, 4).unwrap();
        for i in 0..30 {
            assert_eq!(plan.neighbors(i), (0..i).collect::<Vec<_>>().as_slice());
        }
        assert_eq!(plan, build_plan(&x, &hp, 40, 4).unwrap());
    }

    #[test]
    fn single_observation_loglik() {
        let x = DesignMatrix::new(vec![ColumnRole::Day], vec![0.3]).unwrap();
        let hp = Hyperparams::new(vec![1.0], 2.0, 0.5).unwrap();
        let plan = build_plan(&x, &hp, 5, 0).unwrap();
        let y = 1.3;
        let s = 2.0 * 1.5;
        let want = -0.5 * (2.0 * std::f64::consts::PI * s).ln() - y * y / (2.0 * s);
        assert!((vecchia_loglik(&x, &[y], &hp, &plan).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn saturated_plan_reproduces_dense_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = rng.random_range(20..120);
            let x = random_design(&mut rng, n, 3);
            let hp = Hyperparams::new(vec![0.3, 0.5, 0.8], 1.7, 0.05).unwrap();
            let y = sample_gp(&x, &hp, &mut rng);
            let plan = build_plan(&x, &hp, n - 1, 2).unwrap();
            let ll = vecchia_loglik(&x, &y, &hp, &plan).unwrap();
            let exact = densegp::log_likelihood(&x, &y, &hp).unwrap();
            assert!(((ll - exact) / exact).abs() < 1e-6, "{ll} vs {exact}");

            let xnew = random_design(&mut rng, 40, 3);
            let v = VecchiaGp::new(x.clone(), &y, hp.clone(), n).unwrap();
            let d = DenseGp::new(x.clone(), &y, hp.clone()).unwrap();
            for scale in [VarianceScale::Ci, VarianceScale::Pi] {
                let (a, b) = (
                    v.predict(&xnew, scale).unwrap(),
                    d.predict(&xnew, scale).unwrap(),
                );
                for j in 0..40 {
                    assert!((a.mean[j] - b.mean[j]).abs() <= 1e-6 * (1.0 + b.mean[j].abs()));
                    assert!((a.var[j] - b.var[j]).abs() <= 1e-6 * (1.0 + b.var[j]));
                }
            }
        }
    }

    #[test]
    fn likelihood_error_shrinks_with_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ok = 0;
        for _ in 0..50 {
            let x = random_design(&mut rng, 300, 4);
            let hp = Hyperparams::new(vec![0.5; 4], 1.0, 0.05).unwrap();
            let y = sample_gp(&x, &hp, &mut rng);
            let exact = densegp::log_likelihood(&x, &y, &hp).unwrap();
            let errs: Vec<f64> = [1, 5, 10, 30]
                .iter()
                .map(|&m| {
                    let plan = build_plan(&x, &hp, m, 1).unwrap();
                    (vecchia_loglik(&x, &y, &hp, &plan).unwrap() - exact).abs()
                })
                .collect();
            if errs.windows(2).all(|w| w[1] <= w[0]) {
                ok += 1;
            }
        }
        assert!(ok >= 48, "{ok}/50 monotone");
    }

    #[test]
    fn prediction_interpolates_and_reverts() {
        let x = DesignMatrix::new(vec![ColumnRole::Day], vec![0.0, 0.4, 1.0, 1.3]).unwrap();
        let y = [1.0, -2.0, 0.5, 3.0];
        let hp = Hyperparams::new(vec![0.1], 2.0, 0.0).unwrap();
        let gp = VecchiaGp::new(x.clone(), &y, hp.clone(), 2).unwrap();
        let at = gp.predict(&x, VarianceScale::Ci).unwrap();
        for i in 0..4 {
            assert!((at.mean[i] - y[i]).abs() < 1e-6);
        }
        let hp = Hyperparams::new(vec![0.1], 2.0, 0.3).unwrap();
        let gp = VecchiaGp::new(x, &y, hp, 2).unwrap();
        let far = DesignMatrix::new(vec![ColumnRole::Day], vec![1e3]).unwrap();
        let p = gp.predict(&far, VarianceScale::Pi).unwrap();
        assert!((p.mean[0] - 0.625).abs() < 1e-9);
        assert!((p.var[0] - 2.0 * 1.3).abs() < 1e-9);
    }

    #[test]
    fn fit_with_saturated_plan_matches_dense_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_design(&mut rng, 60, 2);
        let hp = Hyperparams::new(vec![0.1, 0.4], 1.0, 0.05).unwrap();
        let y = sample_gp(&x, &hp, &mut rng);
        let bounds = HyperBounds::default_for(&x);
        let opts = VecchiaFitOptions {
            m: 59,
            pilot_size: 60,
            ..Default::default()
        };
        let v = fit_vecchia_with(&x, &y, &bounds, 3, &opts, None).unwrap();
        let d = densegp::fit_mle(&x, &y, &bounds, 3).unwrap();
        let (a, b) = (v.hyperparams(), d.hyperparams());
        for (ga, gb) in a.gamma.iter().zip(&b.gamma) {
            assert!((ga.ln() - gb.ln()).abs() < 0.05, "{a:?} vs {b:?}");
        }
        assert!((a.g.ln() - b.g.ln()).abs() < 0.05 && (a.tau2.ln() - b.tau2.ln()).abs() < 0.05);
        let again = fit_vecchia_with(&x, &y, &bounds, 3, &opts, None).unwrap();
        assert_eq!(v.hyperparams(), again.hyperparams());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn plan_is_a_valid_structure(n in 1usize..80, m in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_design(&mut rng, n, 2);
            let hp = Hyperparams::new(vec![0.5, 0.1], 1.0, 0.1).unwrap();
            let plan = build_plan(&x, &hp, m, seed).unwrap();
            let mut seen = plan.order().to_vec();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for i in 0..n {
                let nb = plan.neighbors(i);
                prop_assert_eq!(nb.len(), m.min(i));
                prop_assert!(nb.iter().all(|&p| p < i));
            }
        }
    }
}
