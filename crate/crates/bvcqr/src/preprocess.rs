//! Exposure preprocessing: detection filtering, below-LOD imputation,
//! scaling, and quartile indexing.
//!
//! The full pipeline runs in a fixed order: drop chemicals measured in too
//! few subjects, impute the remaining below-LOD gaps at `LOD / sqrt(2)`,
//! divide each chemical by twice its sample standard deviation, then replace
//! concentrations with quartile indices 0..3. Each step is also exposed on
//! its own. Quartile indexing is invariant under strictly increasing
//! transforms of a column, so the scaling step changes reported breakpoints
//! but never the indices the model sees.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::quantile_sorted;
use crate::panel::ExposurePanel;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Quartile-indexed exposures: `q[(subject, chem)]` in {0,1,2,3}.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedExposures {
    pub q: Array2<u8>,
    /// Q1, Q2, Q3 per chemical, on the scale the values had when indexed.
    pub breakpoints: Vec<[f64; 3]>,
    pub chemical_names: Vec<String>,
}

/// Per-chemical record of what preprocessing did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChemicalReport {
    pub name: String,
    /// Fraction of subjects at or above the detection limit; `None` when the
    /// panel carries no detectability flags.
    pub detection_fraction: Option<f64>,
    pub kept: bool,
    pub n_imputed: usize,
    /// Divisor applied by the scaling step (twice the sample SD).
    pub scale_constant: Option<f64>,
    /// Quartile breakpoints used for indexing (post-scaling scale).
    pub breakpoints: Option<[f64; 3]>,
}

/// Summary of a full preprocessing run, serialized alongside every fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub n_subjects: usize,
    pub detect_filter: bool,
    pub min_detect_frac: f64,
    pub lod_impute: bool,
    pub scale: bool,
    pub chemicals: Vec<ChemicalReport>,
}

/// Pipeline switches; defaults run every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub detect_filter: bool,
    pub min_detect_frac: f64,
    pub lod_impute: bool,
    pub scale: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            detect_filter: true,
            min_detect_frac: 0.20,
            lod_impute: true,
            scale: true,
        }
    }
}

/// Detection fraction per chemical, `None` when flags are absent.
pub fn detection_fractions(panel: &ExposurePanel) -> Option<Vec<f64>> {
    let flags = panel.detect_flags.as_ref()?;
    let n = panel.n_subjects() as f64;
    Some(flags.iter().map(|f| f.iter().filter(|&&d| d).count() as f64 / n).collect())
}

/// Drops chemicals whose detection fraction is below `min_detect_frac`.
///
/// Requires detectability flags; panels without them cannot be filtered.
/// Idempotent: the surviving chemicals' fractions are unchanged, so a second
/// pass drops nothing.
pub fn filter_by_detection(
    panel: &ExposurePanel,
    min_detect_frac: f64,
) -> Result<(ExposurePanel, Vec<(String, f64)>)> {
    if !(0.0..=1.0).contains(&min_detect_frac) {
        return Err(Error::Config(format!(
            "min_detect_frac must lie in [0,1], got {min_detect_frac}"
        )));
    }
    let fractions = detection_fractions(panel).ok_or_else(|| {
        Error::Config("detection filtering requested but panel has no detectability flags".into())
    })?;
    let keep: Vec<bool> = fractions.iter().map(|&f| f >= min_detect_frac).collect();
    let dropped: Vec<(String, f64)> = panel
        .chemical_names
        .iter()
        .zip(&fractions)
        .zip(&keep)
        .filter(|(_, &k)| !k)
        .map(|((name, &f), _)| (name.clone(), f))
        .collect();
    if keep.iter().all(|&k| k) {
        return Ok((panel.clone(), dropped));
    }
    let mut out = panel.clone();
    out.chemical_names =
        select(&panel.chemical_names, &keep).into_iter().cloned().collect();
    out.detect_flags = panel
        .detect_flags
        .as_ref()
        .map(|flags| select(flags, &keep).into_iter().cloned().collect());
    out.lod = panel.lod.as_ref().map(|l| select(l, &keep).into_iter().cloned().collect());
    for s in &mut out.subjects {
        s.exposures = select(&s.exposures, &keep).into_iter().cloned().collect();
    }
    if out.chemical_names.is_empty() {
        return Err(Error::Data(format!(
            "no chemical reaches detection fraction {min_detect_frac}"
        )));
    }
    Ok((out, dropped))
}

fn select<'a, T>(items: &'a [T], keep: &[bool]) -> Vec<&'a T> {
    items.iter().zip(keep).filter(|(_, &k)| k).map(|(t, _)| t).collect()
}

/// Replaces every below-LOD measurement with `LOD / sqrt(2)`.
///
/// Detectability flags are left untouched (they record measurement status,
/// not missingness), which makes the operation idempotent. Returns the
/// per-chemical imputation counts.
pub fn impute_below_lod(panel: &ExposurePanel) -> Result<(ExposurePanel, Vec<usize>)> {
    let m = panel.n_chemicals();
    let mut counts = vec![0usize; m];
    let Some(flags) = panel.detect_flags.as_ref() else {
        // Nothing is flagged below the limit; nothing to impute.
        return Ok((panel.clone(), counts));
    };
    let mut out = panel.clone();
    for c in 0..m {
        let n_below = flags[c].iter().filter(|&&d| !d).count();
        if n_below == 0 {
            continue;
        }
        let lod = out
            .lod
            .as_ref()
            .and_then(|l| l[c])
            .ok_or_else(|| {
                Error::Data(format!(
                    "chemical {} has below-LOD measurements but no detection limit",
                    out.chemical_names[c]
                ))
            })?;
        let fill = lod / SQRT_2;
        for (i, s) in out.subjects.iter_mut().enumerate() {
            if !flags[c][i] {
                s.exposures[c] = fill;
                counts[c] += 1;
            }
        }
    }
    Ok((out, counts))
}

/// Divides each chemical's concentrations (and its detection limit, to keep
/// the panel self-consistent) by twice the sample standard deviation across
/// subjects. Errors on columns with zero variance.
pub fn scale_by_2sd(panel: &ExposurePanel) -> Result<(ExposurePanel, Vec<f64>)> {
    let m = panel.n_chemicals();
    let n = panel.n_subjects();
    if n < 2 {
        return Err(Error::Data("scaling needs at least two subjects".into()));
    }
    let mut out = panel.clone();
    let mut constants = Vec::with_capacity(m);
    for c in 0..m {
        let values = exposure_column(panel, c)?;
        let sd = crate::math::variance(&values).sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            return Err(Error::Data(format!(
                "chemical {} has zero variance; cannot scale",
                panel.chemical_names[c]
            )));
        }
        let k = 2.0 * sd;
        constants.push(k);
        for s in &mut out.subjects {
            s.exposures[c] /= k;
        }
        if let Some(lod) = out.lod.as_mut() {
            if let Some(v) = lod[c].as_mut() {
                *v /= k;
            }
        }
    }
    Ok((out, constants))
}

/// One chemical's values across subjects; errors on missing entries.
fn exposure_column(panel: &ExposurePanel, c: usize) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(panel.n_subjects());
    for s in &panel.subjects {
        let z = s.exposures[c];
        if !z.is_finite() {
            return Err(Error::Data(format!(
                "chemical {} has a missing value for subject {}; impute or complete the data first",
                panel.chemical_names[c], s.id
            )));
        }
        v.push(z);
    }
    Ok(v)
}

/// Replaces concentrations with quartile indices.
///
/// Breakpoints are the per-chemical sample quartiles (order-statistic
/// interpolation). A value lands in index 0 when `z <= Q1`, 1 when
/// `Q1 < z <= Q2`, 2 when `Q2 < z <= Q3`, and 3 otherwise, so ties go to the
/// lower index. Needs at least 4 subjects.
pub fn quantize(panel: &ExposurePanel) -> Result<QuantizedExposures> {
    let n = panel.n_subjects();
    let m = panel.n_chemicals();
    if n < 4 {
        return Err(Error::Data(format!("quartile indexing needs at least 4 subjects, got {n}")));
    }
    let mut q = Array2::<u8>::zeros((n, m));
    let mut breakpoints = Vec::with_capacity(m);
    for c in 0..m {
        let values = exposure_column(panel, c)?;
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let bp = [
            quantile_sorted(&sorted, 0.25),
            quantile_sorted(&sorted, 0.50),
            quantile_sorted(&sorted, 0.75),
        ];
        for (i, &z) in values.iter().enumerate() {
            q[(i, c)] = index_for(z, &bp);
        }
        breakpoints.push(bp);
    }
    Ok(QuantizedExposures { q, breakpoints, chemical_names: panel.chemical_names.clone() })
}

fn index_for(z: f64, bp: &[f64; 3]) -> u8 {
    if z <= bp[0] {
        0
    } else if z <= bp[1] {
        1
    } else if z <= bp[2] {
        2
    } else {
        3
    }
}

/// Runs the configured steps in order and assembles the report.
pub fn run_pipeline(
    panel: &ExposurePanel,
    opts: &PreprocessOptions,
) -> Result<(ExposurePanel, QuantizedExposures, PreprocessReport)> {
    panel.validate()?;
    let all_fractions = detection_fractions(panel);
    let original_names = panel.chemical_names.clone();

    let (filtered, _dropped) = if opts.detect_filter {
        filter_by_detection(panel, opts.min_detect_frac)?
    } else {
        (panel.clone(), Vec::new())
    };

    let (imputed, impute_counts) = if opts.lod_impute {
        impute_below_lod(&filtered)?
    } else {
        // Leaving gaps in place is only legal when there are none.
        if let Some(flags) = &filtered.detect_flags {
            if flags.iter().any(|f| f.iter().any(|&d| !d)) {
                return Err(Error::Data(
                    "below-LOD measurements present but imputation is disabled".into(),
                ));
            }
        }
        (filtered.clone(), vec![0; filtered.n_chemicals()])
    };

    let (scaled, scale_constants) = if opts.scale {
        let (s, k) = scale_by_2sd(&imputed)?;
        (s, Some(k))
    } else {
        (imputed.clone(), None)
    };

    let quantized = quantize(&scaled)?;

    // Assemble per-chemical rows over the original chemical list.
    let kept_index: std::collections::HashMap<&str, usize> = scaled
        .chemical_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let chemicals = original_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let kept = kept_index.get(name.as_str()).copied();
            ChemicalReport {
                name: name.clone(),
                detection_fraction: all_fractions.as_ref().map(|f| f[c]),
                kept: kept.is_some(),
                n_imputed: kept.map_or(0, |i| impute_counts[i]),
                scale_constant: kept
                    .and_then(|i| scale_constants.as_ref().map(|k| k[i])),
                breakpoints: kept.map(|i| quantized.breakpoints[i]),
            }
        })
        .collect();

    let report = PreprocessReport {
        n_subjects: panel.n_subjects(),
        detect_filter: opts.detect_filter,
        min_detect_frac: opts.min_detect_frac,
        lod_impute: opts.lod_impute,
        scale: opts.scale,
        chemicals,
    };
    Ok((scaled, quantized, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::SubjectRecord;
    use approx::assert_abs_diff_eq;

    /// Panel with one visit per subject and the given exposure columns
    /// (`columns[c][i]`, NaN = below LOD).
    fn panel_from_columns(columns: &[Vec<f64>], lod: Option<Vec<Option<f64>>>) -> ExposurePanel {
        let n = columns[0].len();
        let m = columns.len();
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                covariates: vec![],
                exposures: (0..m).map(|c| columns[c][i]).collect(),
                ages: vec![24.0],
                y: vec![0.0],
            })
            .collect();
        let flags = (0..m)
            .map(|c| (0..n).map(|i| columns[c][i].is_finite()).collect())
            .collect();
        ExposurePanel {
            subjects,
            chemical_names: (0..m).map(|c| format!("z_{}", c + 1)).collect(),
            detect_flags: Some(flags),
            lod,
        }
    }

    #[test]
    fn quantize_eight_distinct_values() {
        let panel = panel_from_columns(&[(1..=8).map(|v| v as f64).collect()], None);
        let qz = quantize(&panel).unwrap();
        let got: Vec<u8> = (0..8).map(|i| qz.q[(i, 0)]).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_abs_diff_eq!(qz.breakpoints[0][0], 2.75);
        assert_abs_diff_eq!(qz.breakpoints[0][1], 4.5);
        assert_abs_diff_eq!(qz.breakpoints[0][2], 6.25);
    }

    #[test]
    fn quantize_constant_column_is_all_zero() {
        let panel = panel_from_columns(&[vec![7.5; 6]], None);
        let qz = quantize(&panel).unwrap();
        assert!((0..6).all(|i| qz.q[(i, 0)] == 0));
    }

    #[test]
    fn quantize_balanced_on_strictly_increasing_column() {
        let panel = panel_from_columns(&[(0..100).map(|v| v as f64).collect()], None);
        let qz = quantize(&panel).unwrap();
        let mut counts = [0usize; 4];
        for i in 0..100 {
            counts[qz.q[(i, 0)] as usize] += 1;
        }
        assert_eq!(counts, [25, 25, 25, 25]);
    }

    #[test]
    fn quantize_needs_four_subjects() {
        let panel = panel_from_columns(&[vec![1.0, 2.0, 3.0]], None);
        assert!(matches!(quantize(&panel), Err(Error::Data(_))));
    }

    #[test]
    fn detection_filter_drops_low_fraction_chemicals() {
        // 50 chemicals over 10 subjects: 14 detected once (fraction 0.10),
        // the other 36 detected everywhere.
        let mut columns = Vec::new();
        for c in 0..50 {
            if c < 14 {
                let mut col = vec![f64::NAN; 10];
                col[0] = 1.0;
                columns.push(col);
            } else {
                columns.push((0..10).map(|i| (i + c) as f64).collect());
            }
        }
        let panel = panel_from_columns(&columns, None);
        let (kept, dropped) = filter_by_detection(&panel, 0.20).unwrap();
        assert_eq!(kept.n_chemicals(), 36);
        assert_eq!(dropped.len(), 14);
        assert!(dropped.iter().all(|(_, f)| (*f - 0.1).abs() < 1e-12));
        // Idempotent: nothing else to drop.
        let (again, dropped2) = filter_by_detection(&kept, 0.20).unwrap();
        assert_eq!(again, kept);
        assert!(dropped2.is_empty());
    }

    #[test]
    fn detection_filter_without_flags_is_config_error() {
        let mut panel = panel_from_columns(&[vec![1.0, 2.0, 3.0, 4.0]], None);
        panel.detect_flags = None;
        assert!(matches!(filter_by_detection(&panel, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn impute_fills_lod_over_sqrt2_and_is_idempotent() {
        let panel = panel_from_columns(
            &[vec![f64::NAN, 2.0, 3.0, 4.0]],
            Some(vec![Some(0.5)]),
        );
        let (once, counts) = impute_below_lod(&panel).unwrap();
        assert_eq!(counts, vec![1]);
        assert_abs_diff_eq!(once.subjects[0].exposures[0], 0.5 / SQRT_2, epsilon = 1e-15);
        let (twice, counts2) = impute_below_lod(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(counts2, vec![1]);
    }

    #[test]
    fn impute_without_limit_names_the_chemical() {
        let panel = panel_from_columns(&[vec![f64::NAN, 2.0, 3.0, 4.0]], None);
        let err = impute_below_lod(&panel).unwrap_err();
        assert!(err.to_string().contains("z_1"), "{err}");
    }

    #[test]
    fn scale_divides_by_twice_sd() {
        let values = vec![0.0, 1.0, 2.0, 3.0];
        let sd = crate::math::variance(&values).sqrt();
        let panel = panel_from_columns(std::slice::from_ref(&values), None);
        let (scaled, constants) = scale_by_2sd(&panel).unwrap();
        assert_abs_diff_eq!(constants[0], 2.0 * sd, epsilon = 1e-15);
        for (i, v) in values.iter().enumerate() {
            assert_abs_diff_eq!(scaled.subjects[i].exposures[0], v / (2.0 * sd), epsilon = 1e-15);
        }
    }

    #[test]
    fn scale_fixed_point_at_sd_half() {
        // SD exactly 0.5 means the divisor is 1.0 and values are unchanged.
        let base = vec![0.0, 1.0, 2.0, 3.0];
        let sd = crate::math::variance(&base).sqrt();
        let adjusted: Vec<f64> = base.iter().map(|v| v * 0.5 / sd).collect();
        assert_abs_diff_eq!(crate::math::variance(&adjusted).sqrt(), 0.5, epsilon = 1e-12);
        let panel = panel_from_columns(std::slice::from_ref(&adjusted), None);
        let (scaled, constants) = scale_by_2sd(&panel).unwrap();
        assert_abs_diff_eq!(constants[0], 1.0, epsilon = 1e-12);
        for (i, v) in adjusted.iter().enumerate() {
            assert_abs_diff_eq!(scaled.subjects[i].exposures[0], *v, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_zero_variance_names_chemical() {
        let panel = panel_from_columns(&[vec![2.0; 5]], None);
        let err = scale_by_2sd(&panel).unwrap_err();
        assert!(err.to_string().contains("z_1"));
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn pipeline_reports_dropped_and_kept_chemicals() {
        let mut low_detect = vec![f64::NAN; 10];
        low_detect[0] = 5.0;
        let columns = vec![
            (0..10).map(|i| i as f64).collect::<Vec<_>>(),
            low_detect,
            (0..10).map(|i| (i * i) as f64).collect(),
        ];
        let panel = panel_from_columns(&columns, Some(vec![None, Some(1.0), None]));
        let (_, qz, report) = run_pipeline(&panel, &PreprocessOptions::default()).unwrap();
        assert_eq!(qz.chemical_names, vec!["z_1", "z_3"]);
        assert_eq!(report.chemicals.len(), 3);
        assert!(report.chemicals[0].kept);
        assert!(!report.chemicals[1].kept);
        assert!(report.chemicals[2].kept);
        assert_eq!(report.chemicals[1].detection_fraction, Some(0.1));
        assert!(report.chemicals[0].breakpoints.is_some());
        assert!(report.chemicals[1].breakpoints.is_none());
    }

    #[test]
    fn pipeline_rejects_gaps_when_imputation_disabled() {
        let mut col = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        col[2] = f64::NAN;
        let panel = panel_from_columns(&[col], Some(vec![Some(0.1)]));
        let opts = PreprocessOptions { lod_impute: false, detect_filter: false, ..Default::default() };
        assert!(matches!(run_pipeline(&panel, &opts), Err(Error::Data(_))));
    }

    #[test]
    fn scaling_does_not_change_indices() {
        let columns = vec![
            vec![3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0],
            vec![0.1, 0.2, 0.15, 0.4, 0.35, 0.05, 0.25, 0.3],
        ];
        let panel = panel_from_columns(&columns, None);
        let direct = quantize(&panel).unwrap();
        let (scaled, _) = scale_by_2sd(&panel).unwrap();
        let after = quantize(&scaled).unwrap();
        assert_eq!(direct.q, after.q);
    }
}
