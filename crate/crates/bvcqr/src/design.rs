//! Stacked regression design for the longitudinal mixture model.
//!
//! For n subjects with visit ages `a_ij` (centered and year-scaled) the
//! model's mean is `X beta + W h + U b`:
//!
//! ```text
//! X  (N x (p+2))  dense:   row (i,j) = (1, a_ij, x_i1 .. x_ip)
//! W  (N x 2n)     sparse:  row (i,j) has 1 in column i, a_ij in column n+i
//! U  (N x 2n)     sparse:  row (i,j) has 1 in column 2i, a_ij in column 2i+1
//! ```
//!
//! so `h` stacks the per-subject mixture intercepts (first n entries) then
//! the mixture slopes, while `b` interleaves each subject's random intercept
//! and slope. W and U never materialize: every row touches exactly one
//! subject, so products use the row's subject index and age directly. The
//! same structure can be dumped as sparse triplets for auditing.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::ExposurePanel;
use crate::preprocess::QuantizedExposures;

/// Age handling: raw panel ages are in months; the model centers them at
/// `baseline_age` and divides by `age_divisor`, so the default turns a
/// 12/24/36-month visit grid into ages -1, 0, 1 (years from baseline).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub baseline_age: f64,
    pub age_divisor: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig { baseline_age: 24.0, age_divisor: 12.0 }
    }
}

/// The assembled design: outcome, dense covariate block, quartile indices,
/// and the implicit sparse structure of W and U.
#[derive(Debug, Clone)]
pub struct QuantizedDesign {
    pub y: Array1<f64>,
    /// Dense block, first two columns are the global intercept and age trend.
    pub x: Array2<f64>,
    /// Quartile indices as floats, n x M.
    pub q: Array2<f64>,
    /// Subject index of each stacked row.
    pub subject_of_row: Vec<usize>,
    /// Centered, scaled age of each stacked row.
    pub age_of_row: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub chemical_names: Vec<String>,
    pub n_covariates: usize,
    /// False when X^T X is numerically rank deficient.
    pub x_full_rank: bool,
    pub config: DesignConfig,
}

impl QuantizedDesign {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_chemicals(&self) -> usize {
        self.chemical_names.len()
    }

    /// Columns of X: intercept, age, covariates.
    pub fn k(&self) -> usize {
        self.n_covariates + 2
    }

    /// `X beta + W h + U b` in one pass over the stacked rows.
    pub fn predict(&self, beta: &[f64], h: &[f64], b: &[f64], out: &mut [f64]) {
        let n = self.n_subjects();
        debug_assert_eq!(beta.len(), self.k());
        debug_assert_eq!(h.len(), 2 * n);
        debug_assert_eq!(b.len(), 2 * n);
        debug_assert_eq!(out.len(), self.n_obs());
        for (r, out_r) in out.iter_mut().enumerate() {
            let s = self.subject_of_row[r];
            let a = self.age_of_row[r];
            let mut v = 0.0;
            for (c, &bc) in beta.iter().enumerate() {
                v += self.x[(r, c)] * bc;
            }
            v += h[s] + a * h[n + s];
            v += b[2 * s] + a * b[2 * s + 1];
            *out_r = v;
        }
    }

    /// Accumulates `W^T v` into `out` (length 2n).
    pub fn w_transpose_accumulate(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n_subjects();
        for (r, &vr) in v.iter().enumerate() {
            let s = self.subject_of_row[r];
            out[s] += vr;
            out[n + s] += self.age_of_row[r] * vr;
        }
    }

    /// Accumulates `U^T v` into `out` (length 2n).
    pub fn u_transpose_accumulate(&self, v: &[f64], out: &mut [f64]) {
        for (r, &vr) in v.iter().enumerate() {
            let s = self.subject_of_row[r];
            out[2 * s] += vr;
            out[2 * s + 1] += self.age_of_row[r] * vr;
        }
    }

    /// Structural triplets `(row, col, value)` of W, two per row. Entries
    /// whose age value is zero are still emitted: the structure is fixed by
    /// the subject, not by the value.
    pub fn w_triplets(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n_subjects();
        let mut t = Vec::with_capacity(2 * self.n_obs());
        for r in 0..self.n_obs() {
            let s = self.subject_of_row[r];
            t.push((r, s, 1.0));
            t.push((r, n + s, self.age_of_row[r]));
        }
        t
    }

    /// Structural triplets of U, two per row.
    pub fn u_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::with_capacity(2 * self.n_obs());
        for r in 0..self.n_obs() {
            let s = self.subject_of_row[r];
            t.push((r, 2 * s, 1.0));
            t.push((r, 2 * s + 1, self.age_of_row[r]));
        }
        t
    }

    /// Prior mean of `h`: `(Q theta1, Q theta2)` stacked to match W's column
    /// ordering.
    pub fn mixture_mean(&self, theta1: &[f64], theta2: &[f64]) -> Array1<f64> {
        mixture_mean(&self.q, theta1, theta2)
    }
}

/// `(Q theta1 stacked over subjects, then Q theta2)` for an n x M index
/// matrix Q.
pub fn mixture_mean(q: &Array2<f64>, theta1: &[f64], theta2: &[f64]) -> Array1<f64> {
    let n = q.nrows();
    let m = q.ncols();
    assert_eq!(theta1.len(), m);
    assert_eq!(theta2.len(), m);
    let mut out = Array1::zeros(2 * n);
    for i in 0..n {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..m {
            let qij = q[(i, j)];
            s1 += qij * theta1[j];
            s2 += qij * theta2[j];
        }
        out[i] = s1;
        out[n + i] = s2;
    }
    out
}

/// Builds the stacked design from a preprocessed panel and its quartile
/// indices.
pub fn build_design(
    panel: &ExposurePanel,
    quantized: &QuantizedExposures,
    config: DesignConfig,
) -> Result<QuantizedDesign> {
    panel.validate()?;
    if config.age_divisor <= 0.0 || !config.age_divisor.is_finite() {
        return Err(Error::Config(format!(
            "age_divisor must be positive, got {}",
            config.age_divisor
        )));
    }
    if !config.baseline_age.is_finite() {
        return Err(Error::Config("baseline_age must be finite".into()));
    }
    let n = panel.n_subjects();
    if quantized.q.nrows() != n {
        return Err(Error::Data(format!(
            "quartile matrix has {} rows for {} subjects",
            quantized.q.nrows(),
            n
        )));
    }
    if quantized.chemical_names != panel.chemical_names {
        return Err(Error::Data(
            "quartile matrix chemicals do not match the panel".into(),
        ));
    }
    let p = panel.n_covariates();
    let k = p + 2;
    let n_obs = panel.n_obs();

    let mut y = Array1::zeros(n_obs);
    let mut x = Array2::zeros((n_obs, k));
    let mut subject_of_row = Vec::with_capacity(n_obs);
    let mut age_of_row = Vec::with_capacity(n_obs);
    let mut r = 0;
    for (i, s) in panel.subjects.iter().enumerate() {
        for (&age_months, &yv) in s.ages.iter().zip(&s.y) {
            let a = (age_months - config.baseline_age) / config.age_divisor;
            y[r] = yv;
            x[(r, 0)] = 1.0;
            x[(r, 1)] = a;
            for (c, &xv) in s.covariates.iter().enumerate() {
                x[(r, 2 + c)] = xv;
            }
            subject_of_row.push(i);
            age_of_row.push(a);
            r += 1;
        }
    }

    let q = quantized.q.mapv(|v| v as f64);
    let x_full_rank = gram_full_rank(&x);

    Ok(QuantizedDesign {
        y,
        x,
        q,
        subject_of_row,
        age_of_row,
        subject_ids: panel.subjects.iter().map(|s| s.id.clone()).collect(),
        chemical_names: panel.chemical_names.clone(),
        n_covariates: p,
        x_full_rank,
        config,
    })
}

/// Numerical rank check on X^T X via Cholesky pivot magnitudes.
fn gram_full_rank(x: &Array2<f64>) -> bool {
    let k = x.ncols();
    if x.nrows() < k {
        return false;
    }
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for r in 0..x.nrows() {
                s += x[(r, i)] * x[(r, j)];
            }
            gram[i * k + j] = s;
        }
    }
    let max_diag = (0..k).map(|i| gram[i * k + i]).fold(0.0f64, f64::max);
    match crate::math::cholesky_lower(&gram, k) {
        Err(_) => false,
        Ok(l) => {
            let tol = 1e-10 * max_diag.max(1.0);
            (0..k).all(|i| l[i * k + i] * l[i * k + i] > tol)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::SubjectRecord;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_subject_panel() -> ExposurePanel {
        ExposurePanel {
            subjects: vec![
                SubjectRecord {
                    id: "s1".into(),
                    covariates: vec![0.5],
                    exposures: vec![1.0, 2.0],
                    ages: vec![12.0, 24.0],
                    y: vec![1.0, 2.0],
                },
                SubjectRecord {
                    id: "s2".into(),
                    covariates: vec![-1.0],
                    exposures: vec![3.0, 4.0],
                    ages: vec![36.0],
                    y: vec![3.0],
                },
            ],
            chemical_names: vec!["z_1".into(), "z_2".into()],
            detect_flags: None,
            lod: None,
        }
    }

    fn quartiles_for(panel: &ExposurePanel) -> QuantizedExposures {
        // Hand-set indices; build_design only checks the shape.
        let n = panel.n_subjects();
        let m = panel.n_chemicals();
        QuantizedExposures {
            q: Array2::from_shape_fn((n, m), |(i, j)| ((i + j) % 4) as u8),
            breakpoints: vec![[0.0, 0.0, 0.0]; m],
            chemical_names: panel.chemical_names.clone(),
        }
    }

    fn dense_from_triplets(triplets: &[(usize, usize, f64)], rows: usize, cols: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, cols));
        for &(r, c, v) in triplets {
            m[(r, c)] += v;
        }
        m
    }

    #[test]
    fn w_layout_matches_subject_blocks() {
        let panel = two_subject_panel();
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        // ages 12,24 -> -1,0 for s1; 36 -> 1 for s2
        let w = dense_from_triplets(&d.w_triplets(), 3, 4);
        let expect = [
            [1.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
        ];
        for r in 0..3 {
            for c in 0..4 {
                assert_abs_diff_eq!(w[(r, c)], expect[r][c], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn u_layout_interleaves_intercept_and_slope() {
        let panel = two_subject_panel();
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        let u = dense_from_triplets(&d.u_triplets(), 3, 4);
        let expect = [
            [1.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
        ];
        for r in 0..3 {
            for c in 0..4 {
                assert_abs_diff_eq!(u[(r, c)], expect[r][c], epsilon = 1e-15);
            }
        }
        // Structural count: exactly two entries per row, in the subject's pair.
        let t = d.u_triplets();
        assert_eq!(t.len(), 6);
        for r in 0..3 {
            let row: Vec<_> = t.iter().filter(|(tr, _, _)| *tr == r).collect();
            assert_eq!(row.len(), 2);
            let s = d.subject_of_row[r];
            assert_eq!(row[0].1, 2 * s);
            assert_eq!(row[1].1, 2 * s + 1);
        }
    }

    #[test]
    fn x_rows_are_intercept_age_covariates() {
        let panel = two_subject_panel();
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        assert_eq!(d.x.shape(), &[3, 3]);
        // Baseline-age visit has a zero age entry.
        assert_abs_diff_eq!(d.x[(1, 0)], 1.0);
        assert_abs_diff_eq!(d.x[(1, 1)], 0.0);
        assert_abs_diff_eq!(d.x[(0, 1)], -1.0);
        assert_abs_diff_eq!(d.x[(2, 1)], 1.0);
        assert_abs_diff_eq!(d.x[(0, 2)], 0.5);
        assert_abs_diff_eq!(d.x[(2, 2)], -1.0);
        assert!(d.x_full_rank);
    }

    #[test]
    fn predict_matches_dense_multiply() {
        let panel = two_subject_panel();
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        let n = d.n_subjects();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta: Vec<f64> = (0..d.k()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let w = dense_from_triplets(&d.w_triplets(), d.n_obs(), 2 * n);
        let u = dense_from_triplets(&d.u_triplets(), d.n_obs(), 2 * n);
        let mut expect = vec![0.0; d.n_obs()];
        for r in 0..d.n_obs() {
            for (c, bc) in beta.iter().enumerate() {
                expect[r] += d.x[(r, c)] * bc;
            }
            for c in 0..2 * n {
                expect[r] += w[(r, c)] * h[c] + u[(r, c)] * b[c];
            }
        }
        let mut got = vec![0.0; d.n_obs()];
        d.predict(&beta, &h, &b, &mut got);
        for (g, e) in got.iter().zip(&expect) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn transpose_accumulate_matches_dense_transpose() {
        let panel = two_subject_panel();
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        let n = d.n_subjects();
        let v = vec![0.7, -0.3, 1.1];
        let w = dense_from_triplets(&d.w_triplets(), d.n_obs(), 2 * n);
        let u = dense_from_triplets(&d.u_triplets(), d.n_obs(), 2 * n);
        let mut wt = vec![0.0; 2 * n];
        let mut ut = vec![0.0; 2 * n];
        d.w_transpose_accumulate(&v, &mut wt);
        d.u_transpose_accumulate(&v, &mut ut);
        for c in 0..2 * n {
            let mut we = 0.0;
            let mut ue = 0.0;
            for r in 0..d.n_obs() {
                we += w[(r, c)] * v[r];
                ue += u[(r, c)] * v[r];
            }
            assert_abs_diff_eq!(wt[c], we, epsilon = 1e-12);
            assert_abs_diff_eq!(ut[c], ue, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_mean_single_chemical() {
        let q = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        let out = mixture_mean(&q, &[2.0], &[0.0]);
        assert_eq!(out.len(), 8);
        for i in 0..4 {
            assert_abs_diff_eq!(out[i], 2.0 * i as f64);
            assert_abs_diff_eq!(out[4 + i], 0.0);
        }
    }

    #[test]
    fn mixture_mean_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let m = 5;
        let q = Array2::from_shape_fn((n, m), |_| rng.random_range(0..4) as f64);
        let t1: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t2: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = mixture_mean(&q, &t1, &t2);
        for i in 0..n {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for j in 0..m {
                s1 += q[(i, j)] * t1[j];
                s2 += q[(i, j)] * t2[j];
            }
            assert_abs_diff_eq!(got[i], s1, epsilon = 1e-12);
            assert_abs_diff_eq!(got[n + i], s2, epsilon = 1e-12);
        }
    }

    #[test]
    fn rank_check_flags_duplicate_covariate() {
        let mut panel = two_subject_panel();
        // Second covariate identical to the first makes X rank deficient.
        for s in &mut panel.subjects {
            let c0 = s.covariates[0];
            s.covariates.push(c0);
        }
        // Need at least k rows; add a visit.
        panel.subjects[1].ages.push(48.0);
        panel.subjects[1].y.push(1.0);
        let d = build_design(&panel, &quartiles_for(&panel), DesignConfig::default()).unwrap();
        assert!(!d.x_full_rank);
    }

    #[test]
    fn mismatched_quartile_matrix_is_data_error() {
        let panel = two_subject_panel();
        let mut qz = quartiles_for(&panel);
        qz.q = Array2::zeros((5, 2));
        assert!(matches!(
            build_design(&panel, &qz, DesignConfig::default()),
            Err(Error::Data(_))
        ));
    }
}
