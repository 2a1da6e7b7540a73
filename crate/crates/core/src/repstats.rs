//! Replicate collapsing: raw ensemble rows become one row per unique input
//! carrying the sample mean, sample variance and replicate count.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::covkernel::{ColumnRole, DesignMatrix};
use crate::error::{contract, Error, Result};

/// Unique inputs with their first two sample moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSet {
    pub xbar: DesignMatrix,
    pub ybar: Vec<f64>,
    pub s2: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ReplicateSet {
    pub fn len(&self) -> usize {
        self.ybar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }

    /// The common replicate count, if every row shares one.
    pub fn uniform_count(&self) -> Option<usize> {
        let first = *self.counts.first()?;
        self.counts.iter().all(|&c| c == first).then_some(first)
    }
}

/// Sort priority of a column when ordering collapsed rows.
fn role_rank(r: ColumnRole) -> usize {
    match r {
        ColumnRole::Year => 0,
        ColumnRole::Day => 1,
        ColumnRole::Horizon => 2,
        ColumnRole::Depth => 3,
        ColumnRole::Phi => 4,
        ColumnRole::Member => 5,
    }
}

/// Groups rows of `x` that agree exactly on every column except the member
/// column. Output rows are sorted by (year, day, horizon, depth).
pub fn collapse(x: &DesignMatrix, y: &[f64]) -> Result<ReplicateSet> {
    if x.nrows() != y.len() {
        return Err(contract!("{} inputs but {} responses", x.nrows(), y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(contract!("non-finite response"));
    }
    let xbar_all = x.without_column(ColumnRole::Member);
    let mut keys: Vec<usize> = (0..xbar_all.ncols()).collect();
    keys.sort_by_key(|&j| role_rank(xbar_all.roles()[j]));

    let cmp = |a: usize, b: usize| -> Ordering {
        let (ra, rb) = (xbar_all.row(a), xbar_all.row(b));
        keys.iter()
            .map(|&j| ra[j].total_cmp(&rb[j]))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| cmp(a, b).then(a.cmp(&b)));

    let mut rows = Vec::new();
    let (mut ybar, mut s2, mut counts) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && cmp(idx[start], idx[end]).is_eq() {
            end += 1;
        }
        let group = &idx[start..end];
        if group.len() < 2 {
            let desc: Vec<String> = xbar_all
                .roles()
                .iter()
                .zip(xbar_all.row(group[0]))
                .map(|(r, v)| format!("{}={v}", r.name()))
                .collect();
            return Err(Error::Data(format!(
                "input ({}) has a single replicate",
                desc.join(", ")
            )));
        }
        let k = group.len() as f64;
        let m = group.iter().map(|&i| y[i]).sum::<f64>() / k;
        let ss = group.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>();
        rows.push(group[0]);
        ybar.push(m);
        s2.push(ss / (k - 1.0));
        counts.push(group.len());
        start = end;
    }
    Ok(ReplicateSet {
        xbar: xbar_all.select_rows(&rows),
        ybar,
        s2,
        counts,
    })
}

/// Squared standard errors `s²ᵢ / nᵢ`.
pub fn standard_errors(rs: &ReplicateSet) -> Vec<f64> {
    rs.s2
        .iter()
        .zip(&rs.counts)
        .map(|(s, &n)| s / n as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn raw(rows: &[(f64, f64, f64)]) -> (DesignMatrix, Vec<f64>) {
        // (day, member, y)
        let vals = rows.iter().flat_map(|r| [r.0, r.1]).collect();
        let x = DesignMatrix::new(vec![ColumnRole::Day, ColumnRole::Member], vals).unwrap();
        (x, rows.iter().map(|r| r.2).collect())
    }

    #[test]
    fn textbook_moments() {
        let (x, y) = raw(&[(1.0, 0.0, 1.0), (1.0, 1.0, 2.0), (1.0, 2.0, 3.0)]);
        let rs = collapse(&x, &y).unwrap();
        assert_eq!((rs.ybar[0], rs.s2[0], rs.counts[0]), (2.0, 1.0, 3));
        assert_eq!(rs.xbar.roles(), &[ColumnRole::Day]);

        let rows: Vec<_> = (0..31).map(|k| (4.0, k as f64, 5.0)).collect();
        let (x, y) = raw(&rows);
        let rs = collapse(&x, &y).unwrap();
        assert_eq!(
            (rs.ybar[0], rs.s2[0], rs.uniform_count()),
            (5.0, 0.0, Some(31))
        );
    }

    #[test]
    fn singleton_is_rejected_by_name() {
        let (x, y) = raw(&[(1.0, 0.0, 1.0), (1.0, 1.0, 2.0), (7.0, 0.0, 3.0)]);
        let err = collapse(&x, &y).unwrap_err().to_string();
        assert!(err.contains("day=7"), "{err}");
    }

    #[test]
    fn rows_sorted_by_year_day_horizon_depth() {
        let roles = vec![
            ColumnRole::Depth,
            ColumnRole::Horizon,
            ColumnRole::Day,
            ColumnRole::Year,
            ColumnRole::Member,
        ];
        let mut vals = Vec::new();
        let keys = [
            (1.0, 2.0, 10.0, 2021.0),
            (0.0, 1.0, 10.0, 2021.0),
            (0.0, 1.0, 3.0, 2022.0),
            (5.0, 1.0, 10.0, 2021.0),
        ];
        for k in keys {
            for m in 0..2 {
                vals.extend([k.0, k.1, k.2, k.3, m as f64]);
            }
        }
        let x = DesignMatrix::new(roles, vals).unwrap();
        let rs = collapse(&x, &[1.0; 8]).unwrap();
        let got: Vec<Vec<f64>> = rs.xbar.rows().map(|r| r.to_vec()).collect();
        assert_eq!(
            got,
            vec![
                vec![0.0, 1.0, 10.0, 2021.0],
                vec![5.0, 1.0, 10.0, 2021.0],
                vec![1.0, 2.0, 10.0, 2021.0],
                vec![0.0, 1.0, 3.0, 2022.0],
            ]
        );
    }

    #[test]
    fn standard_errors_match_loop() {
        let rs = ReplicateSet {
            xbar: DesignMatrix::new(vec![ColumnRole::Day], vec![1.0, 2.0, 3.0]).unwrap(),
            ybar: vec![0.0; 3],
            s2: vec![31.0, 0.0, 2.5],
            counts: vec![31, 31, 5],
        };
        let se = standard_errors(&rs);
        let mut want = Vec::new();
        for i in 0..3 {
            want.push(rs.s2[i] / rs.counts[i] as f64);
        }
        assert_eq!(se, want);
        assert_eq!(se[0], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn moments_are_preserved(
            groups in 1usize..20,
            reps in 2usize..6,
            vals in proptest::collection::vec(-50.0f64..50.0, 120),
            perm_seed in 0u64..100,
        ) {
            let mut rows = Vec::new();
            for g in 0..groups {
                for r in 0..reps {
                    rows.push((g as f64, r as f64, vals[(g * reps + r) % vals.len()]));
                }
            }
            // Input order must not matter.
            let k = rows.len();
            rows.rotate_left(perm_seed as usize % k);
            let (x, y) = raw(&rows);
            let rs = collapse(&x, &y).unwrap();
            let total: f64 = y.iter().sum();
            let total2: f64 = y.iter().map(|v| v * v).sum();
            let m1: f64 = rs.ybar.iter().zip(&rs.counts).map(|(m, &c)| m * c as f64).sum();
            let m2: f64 = (0..rs.len())
                .map(|i| (rs.counts[i] as f64 - 1.0) * rs.s2[i] + rs.counts[i] as f64 * rs.ybar[i].powi(2))
                .sum();
            prop_assert!((m1 - total).abs() <= 1e-10 * total.abs().max(1.0));
            prop_assert!((m2 - total2).abs() <= 1e-10 * total2.max(1.0));
            prop_assert!(rs.s2.iter().all(|&s| s >= 0.0));
        }

        #[test]
        fn member_labels_are_exchangeable(shift in 1usize..5) {
            let rows: Vec<_> = (0..12).map(|i| ((i % 3) as f64, (i / 3) as f64, i as f64 * 0.7)).collect();
            let relabeled: Vec<_> = rows.iter().map(|r| (r.0, ((r.1 as usize + shift) % 4) as f64, r.2)).collect();
            let (a, ya) = raw(&rows);
            let (b, yb) = raw(&relabeled);
            let (ra, rb) = (collapse(&a, &ya).unwrap(), collapse(&b, &yb).unwrap());
            prop_assert!(ra.xbar == rb.xbar && ra.counts == rb.counts);
            for i in 0..ra.len() {
                prop_assert!((ra.ybar[i] - rb.ybar[i]).abs() < 1e-12 && (ra.s2[i] - rb.s2[i]).abs() < 1e-12);
            }
        }
    }
}
