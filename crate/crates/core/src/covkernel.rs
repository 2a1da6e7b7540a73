//! Scaled distances, the Matérn 7/2 kernel and covariance assembly.
//!
//! Every GP in the crate shares this module. A [`DesignMatrix`] carries its
//! columns together with a [`ColumnRole`] per column; only the
//! distance-active roles (day, depth, horizon, phi) enter the kernel, while the
//! year and ensemble-member columns ride along for bookkeeping.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

const SQRT7: f64 = 2.645_751_311_064_590_6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ColumnRole {
    /// Day of year of the reference date, 1..=366.
    Day,
    /// Depth in metres.
    Depth,
    /// Forecast horizon in days.
    Horizon,
    /// Five-day near-surface temperature state.
    Phi,
    /// Calendar year. Bookkeeping only.
    Year,
    /// Ensemble member index. Bookkeeping only.
    Member,
}

impl ColumnRole {
    pub fn is_active(self) -> bool {
        matches!(
            self,
            ColumnRole::Day | ColumnRole::Depth | ColumnRole::Horizon | ColumnRole::Phi
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ColumnRole::Day => "day",
            ColumnRole::Depth => "depth",
            ColumnRole::Horizon => "horizon",
            ColumnRole::Phi => "phi",
            ColumnRole::Year => "year",
            ColumnRole::Member => "member",
        }
    }
}

/// Row-major input matrix with a role per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    roles: Vec<ColumnRole>,
    nrows: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(roles: Vec<ColumnRole>, values: Vec<f64>) -> Result<Self> {
        let ncols = roles.len();
        if ncols == 0 {
            return Err(contract!("design matrix needs at least one column"));
        }
        if !values.len().is_multiple_of(ncols) {
            return Err(contract!(
                "{} values do not fill rows of {} columns",
                values.len(),
                ncols
            ));
        }
        for (i, r) in roles.iter().enumerate() {
            if roles[..i].contains(r) {
                return Err(contract!("duplicate column role {}", r.name()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(contract!(
                "non-finite value at row {} column {}",
                pos / ncols,
                pos % ncols
            ));
        }
        Ok(Self {
            nrows: values.len() / ncols,
            roles,
            values,
        })
    }

    pub fn empty(roles: Vec<ColumnRole>) -> Self {
        Self {
            roles,
            nrows: 0,
            values: Vec::new(),
        }
    }

    pub fn from_rows(roles: Vec<ColumnRole>, rows: &[Vec<f64>]) -> Result<Self> {
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        if rows.iter().any(|r| r.len() != roles.len()) {
            return Err(contract!("row length differs from {} roles", roles.len()));
        }
        Self::new(roles, values)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nrows == 0
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.ncols())
    }

    pub fn column_index(&self, role: ColumnRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    pub fn column(&self, role: ColumnRole) -> Option<Vec<f64>> {
        let j = self.column_index(role)?;
        Some(self.rows().map(|r| r[j]).collect())
    }

    pub fn value(&self, i: usize, role: ColumnRole) -> Option<f64> {
        self.column_index(role).map(|j| self.row(i)[j])
    }

    /// Indices of the distance-active columns, in column order.
    pub fn active_columns(&self) -> Vec<usize> {
        (0..self.ncols())
            .filter(|&j| self.roles[j].is_active())
            .collect()
    }

    pub fn active_roles(&self) -> Vec<ColumnRole> {
        self.roles
            .iter()
            .copied()
            .filter(|r| r.is_active())
            .collect()
    }

    /// Ranges (max - min) of the active columns; used to scale default bounds.
    pub fn active_ranges(&self) -> Vec<f64> {
        self.active_columns()
            .into_iter()
            .map(|j| {
                let (lo, hi) = self
                    .rows()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r[j]), hi.max(r[j]))
                    });
                if self.nrows == 0 {
                    0.0
                } else {
                    hi - lo
                }
            })
            .collect()
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.ncols() {
            return Err(contract!(
                "row has {} values, expected {}",
                row.len(),
                self.ncols()
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(contract!("non-finite value in appended row"));
        }
        self.values.extend_from_slice(row);
        self.nrows += 1;
        Ok(())
    }

    pub fn append(&mut self, other: &DesignMatrix) -> Result<()> {
        if other.roles != self.roles {
            return Err(contract!(
                "cannot append design with different column roles"
            ));
        }
        self.values.extend_from_slice(&other.values);
        self.nrows += other.nrows;
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.ncols());
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        DesignMatrix {
            roles: self.roles.clone(),
            nrows: idx.len(),
            values,
        }
    }

    /// Appends a column. Fails if the role already exists or lengths differ.
    pub fn with_column(&self, role: ColumnRole, col: &[f64]) -> Result<DesignMatrix> {
        if self.column_index(role).is_some() {
            return Err(contract!("column {} already present", role.name()));
        }
        if col.len() != self.nrows {
            return Err(contract!(
                "column has {} values for {} rows",
                col.len(),
                self.nrows
            ));
        }
        let mut roles = self.roles.clone();
        roles.push(role);
        let mut values = Vec::with_capacity(self.nrows * roles.len());
        for (r, v) in self.rows().zip(col) {
            values.extend_from_slice(r);
            values.push(*v);
        }
        DesignMatrix::new(roles, values)
    }

    pub fn without_column(&self, role: ColumnRole) -> DesignMatrix {
        let Some(drop) = self.column_index(role) else {
            return self.clone();
        };
        let roles: Vec<_> = self.roles.iter().copied().filter(|&r| r != role).collect();
        let values = self
            .rows()
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != drop)
                    .map(|(_, v)| *v)
            })
            .collect();
        DesignMatrix {
            roles,
            nrows: self.nrows,
            values,
        }
    }

    /// Checks that `other` carries the same active roles in the same order.
    pub fn check_roles_match(&self, other: &DesignMatrix) -> Result<()> {
        if self.active_roles() != other.active_roles() {
            return Err(contract!(
                "active column roles differ: {:?} vs {:?}",
                self.active_roles(),
                other.active_roles()
            ));
        }
        Ok(())
    }
}

/// Kernel hyperparameters: per-dimension squared lengthscales, scale and nugget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: Vec<f64>,
    pub tau2: f64,
    pub g: f64,
}

impl Hyperparams {
    pub fn new(gamma: Vec<f64>, tau2: f64, g: f64) -> Result<Self> {
        let hp = Self { gamma, tau2, g };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_empty() {
            return Err(contract!("gamma must have at least one entry"));
        }
        if let Some(g) = self.gamma.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(contract!(
                "lengthscale gamma must be positive and finite, got {g}"
            ));
        }
        if !(self.tau2.is_finite() && self.tau2 > 0.0) {
            return Err(contract!(
                "tau2 must be positive and finite, got {}",
                self.tau2
            ));
        }
        if !(self.g.is_finite() && self.g >= 0.0) {
            return Err(contract!(
                "nugget g must be nonnegative and finite, got {}",
                self.g
            ));
        }
        Ok(())
    }

    pub fn check_design(&self, x: &DesignMatrix) -> Result<()> {
        self.validate()?;
        let p = x.active_columns().len();
        if p != self.gamma.len() {
            return Err(contract!(
                "gamma has {} entries but the design has {} active columns",
                self.gamma.len(),
                p
            ));
        }
        Ok(())
    }
}

/// `( Σ_ℓ |x1ℓ − x2ℓ|² / γℓ )^{1/2}` over rows restricted to active columns.
pub fn scaled_distance(x1: &[f64], x2: &[f64], gamma: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() || x1.len() != gamma.len() {
        return Err(contract!(
            "dimension mismatch: rows of length {} and {} with {} lengthscales",
            x1.len(),
            x2.len(),
            gamma.len()
        ));
    }
    let s: f64 = x1
        .iter()
        .zip(x2)
        .zip(gamma)
        .map(|((a, b), g)| (a - b) * (a - b) / g)
        .sum();
    Ok(s.sqrt())
}

/// Matérn kernel with smoothness 7/2 as a function of scaled distance.
pub fn matern35(q: f64) -> Result<f64> {
    if q.is_nan() || q < 0.0 {
        return Err(contract!("kernel distance must be nonnegative, got {q}"));
    }
    Ok(matern35_unchecked(q))
}

#[inline]
pub(crate) fn matern35_unchecked(q: f64) -> f64 {
    let a = SQRT7 * q;
    (1.0 + a + 0.4 * a * a + a * a * a / 15.0) * (-a).exp()
}

/// Active coordinates of a design divided by `√γ`, so that Euclidean distance
/// between two stored points equals [`scaled_distance`].
#[derive(Debug, Clone)]
pub(crate) struct ScaledPoints {
    dim: usize,
    coords: Vec<f64>,
}

impl ScaledPoints {
    pub fn new(x: &DesignMatrix, gamma: &[f64]) -> Result<Self> {
        let active = x.active_columns();
        if active.len() != gamma.len() {
            return Err(contract!(
                "gamma has {} entries but the design has {} active columns",
                gamma.len(),
                active.len()
            ));
        }
        let inv: Vec<f64> = gamma.iter().map(|g| 1.0 / g.sqrt()).collect();
        let mut coords = Vec::with_capacity(x.nrows() * active.len());
        for r in x.rows() {
            coords.extend(active.iter().zip(&inv).map(|(&j, s)| r[j] * s));
        }
        Ok(Self {
            dim: active.len(),
            coords,
        })
    }

    /// The points at `rows`, in that order.
    pub fn gather(&self, rows: &[u32]) -> Self {
        let mut coords = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            coords.extend_from_slice(self.point(r as usize));
        }
        Self { dim: self.dim, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn dist2_to(&self, i: usize, q: &[f64]) -> f64 {
        self.point(i)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    #[inline]
    pub fn corr(&self, i: usize, j: usize) -> f64 {
        matern35_unchecked(self.dist2_to(i, self.point(j)).sqrt())
    }

    #[inline]
    pub fn corr_to(&self, i: usize, q: &[f64]) -> f64 {
        matern35_unchecked(self.dist2_to(i, q).sqrt())
    }
}

/// `τ²(k(q(xi,xj)) + g·1{i=j})`, with the nugget only when `add_nugget`.
pub fn cov_matrix(x: &DesignMatrix, hp: &Hyperparams, add_nugget: bool) -> Result<DMatrix<f64>> {
    if x.is_empty() {
        return Err(contract!("covariance of an empty design"));
    }
    hp.check_design(x)?;
    let pts = ScaledPoints::new(x, &hp.gamma)?;
    Ok(corr_matrix(&pts, if add_nugget { hp.g } else { 0.0 }) * hp.tau2)
}

/// Nugget-free cross covariance `τ² k(X, Xnew)` of shape `n × n'`.
pub fn cross_cov(x: &DesignMatrix, xnew: &DesignMatrix, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    x.check_roles_match(xnew)?;
    hp.check_design(x)?;
    let a = ScaledPoints::new(x, &hp.gamma)?;
    let b = ScaledPoints::new(xnew, &hp.gamma)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        hp.tau2 * a.corr_to(i, b.point(j))
    }))
}

/// Correlation matrix `k(X) + g I` (unit scale).
pub(crate) fn corr_matrix(pts: &ScaledPoints, g: f64) -> DMatrix<f64> {
    let n = pts.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0 + g;
        for j in 0..i {
            let c = pts.corr(i, j);
            k[(i, j)] = c;
            k[(j, i)] = c;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn design(rows: &[Vec<f64>]) -> DesignMatrix {
        let roles = [
            ColumnRole::Day,
            ColumnRole::Depth,
            ColumnRole::Horizon,
            ColumnRole::Phi,
        ];
        DesignMatrix::from_rows(roles[..rows[0].len()].to_vec(), rows).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(
            scaled_distance(&[1.5, 2.0], &[1.5, 2.0], &[0.3, 7.0]).unwrap(),
            0.0
        );
        assert_eq!(scaled_distance(&[0.0], &[2.0], &[4.0]).unwrap(), 1.0);
        let d = scaled_distance(&[1.0, 3.0], &[2.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!((d - 1.732_050_807_568_877_2).abs() < 1e-12);
        assert!(matches!(
            scaled_distance(&[1.0], &[1.0, 2.0], &[1.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn matern_examples() {
        assert_eq!(matern35(0.0).unwrap(), 1.0);
        assert!(matern35(200.0).unwrap() < 1e-200);
        // mpmath, 30 digits.
        assert!((matern35(1.0).unwrap() - 0.544_942_447_112_874_8).abs() < 1e-14);
        assert!((matern35(2.0).unwrap() - 0.137_780_618_556_620_08).abs() < 1e-14);
        assert!((matern35(0.5).unwrap() - 0.846_308_066_553_340_3).abs() < 1e-14);
        assert!(matern35(-1e-9).is_err());
        assert!(matern35(f64::NAN).is_err());
    }

    #[test]
    fn cov_matrix_examples() {
        let x = design(&[vec![3.0]]);
        let hp = Hyperparams::new(vec![1.0], 2.0, 0.1).unwrap();
        let k = cov_matrix(&x, &hp, true).unwrap();
        assert!((k[(0, 0)] - 2.2).abs() < 1e-15);

        let x = design(&[vec![0.0], vec![1.0], vec![2.0]]);
        let hp = Hyperparams::new(vec![4.0], 1.5, 0.0).unwrap();
        let k = cov_matrix(&x, &hp, true).unwrap();
        for i in 0..3 {
            assert_eq!(k[(i, i)], 1.5);
        }
        // Toeplitz: equal spacing gives equal off-diagonals.
        assert!((k[(0, 1)] - k[(1, 2)]).abs() < 1e-15);
        let q12 = 0.5; // |1|/√4
        assert!((k[(0, 2)] - 1.5 * matern35(2.0 * q12).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn cross_cov_examples() {
        let x = design(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0]]);
        let hp = Hyperparams::new(vec![2.0, 0.5], 1.3, 0.0).unwrap();
        let kx = cross_cov(&x, &x, &hp).unwrap();
        let k = cov_matrix(&x, &hp, false).unwrap();
        assert!((kx - k).abs().max() < 1e-15);

        let far = design(&[vec![1e4, 1e4]]);
        let kf = cross_cov(&x, &far, &hp).unwrap();
        assert!(kf.iter().all(|v| v.abs() < 1e-300));

        // 2×2 elementwise oracle, nugget never enters.
        let a = design(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let b = design(&[vec![0.5, -0.5], vec![3.0, 1.0]]);
        let hp = Hyperparams::new(vec![1.0, 4.0], 2.0, 0.7).unwrap();
        let kab = cross_cov(&a, &b, &hp).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let q = scaled_distance(a.row(i), b.row(j), &hp.gamma).unwrap();
                assert!((kab[(i, j)] - 2.0 * matern35(q).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bookkeeping_columns_do_not_enter_distance() {
        let roles = vec![
            ColumnRole::Day,
            ColumnRole::Year,
            ColumnRole::Depth,
            ColumnRole::Member,
        ];
        let x = DesignMatrix::from_rows(
            roles,
            &[vec![1.0, 2020.0, 0.0, 1.0], vec![1.0, 2021.0, 0.0, 7.0]],
        )
        .unwrap();
        let hp = Hyperparams::new(vec![1.0, 1.0], 1.0, 0.0).unwrap();
        let k = cov_matrix(&x, &hp, false).unwrap();
        assert_eq!(k[(0, 1)], 1.0);
        assert_eq!(x.active_columns(), vec![0, 2]);
    }

    #[test]
    fn design_rejects_bad_input() {
        assert!(DesignMatrix::new(vec![ColumnRole::Day], vec![f64::NAN]).is_err());
        assert!(DesignMatrix::new(vec![ColumnRole::Day, ColumnRole::Day], vec![1.0, 2.0]).is_err());
        assert!(DesignMatrix::new(vec![ColumnRole::Day, ColumnRole::Depth], vec![1.0]).is_err());
        assert!(Hyperparams::new(vec![0.0], 1.0, 0.0).is_err());
        assert!(Hyperparams::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(Hyperparams::new(vec![1.0], 1.0, -1e-3).is_err());
    }

    #[test]
    fn positive_definite_over_random_designs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for draw in 0..100 {
            let n = rng.random_range(2..=200);
            let p = rng.random_range(1..=4);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..p).map(|_| rng.random::<f64>() * 10.0).collect())
                .collect();
            let x = design(&rows);
            let gamma = (0..p)
                .map(|_| 10f64.powf(rng.random_range(-1.0..2.0)))
                .collect();
            let hp = Hyperparams::new(gamma, rng.random_range(0.1..5.0), 1e-8).unwrap();
            let k = cov_matrix(&x, &hp, true).unwrap();
            assert!(
                crate::linalg::cholesky_with_jitter(k, hp.tau2).is_ok(),
                "draw {draw} (n={n}, p={p}) not positive definite"
            );
        }
    }

    proptest! {
        #[test]
        fn cov_matrix_is_symmetric(
            pts in prop::collection::vec((0.0f64..50.0, 0.0f64..9.0), 1..30),
            g1 in 0.01f64..100.0, g2 in 0.01f64..100.0, tau2 in 0.01f64..10.0, g in 0.0f64..1.0,
        ) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|(a, b)| vec![*a, *b]).collect();
            let x = design(&rows);
            let hp = Hyperparams::new(vec![g1, g2], tau2, g).unwrap();
            let k = cov_matrix(&x, &hp, true).unwrap();
            prop_assert_eq!(k.clone(), k.transpose());
        }

        #[test]
        fn kernel_bounded_and_decreasing(q in 0.0f64..50.0, dq in 1e-6f64..5.0) {
            let a = matern35(q).unwrap();
            let b = matern35(q + dq).unwrap();
            prop_assert!(a > 0.0 || q > 20.0);
            prop_assert!(a <= 1.0);
            prop_assert!(b <= a);
        }

        #[test]
        fn scaling_equivariance(
            pts in prop::collection::vec((0.0f64..50.0, 0.0f64..9.0), 2..20),
            c in 0.01f64..100.0, g1 in 0.1f64..100.0, g2 in 0.1f64..100.0,
        ) {
            let rows: Vec<Vec<f64>> = pts.iter().map(|(a, b)| vec![*a, *b]).collect();
            let scaled: Vec<Vec<f64>> = pts.iter().map(|(a, b)| vec![*a * c, *b]).collect();
            let hp = Hyperparams::new(vec![g1, g2], 1.0, 0.0).unwrap();
            let hps = Hyperparams::new(vec![g1 * c * c, g2], 1.0, 0.0).unwrap();
            let k = cov_matrix(&design(&rows), &hp, false).unwrap();
            let ks = cov_matrix(&design(&scaled), &hps, false).unwrap();
            prop_assert!((k - ks).abs().max() <= 1e-12);
        }
    }
}
