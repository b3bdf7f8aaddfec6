//! Image, segmentation and agreement statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume3D};

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Geometry(format!("inputs have {} and {} elements", a.len(), b.len())));
    }
    Ok(())
}

/// RMSE over the (masked) voxels divided by the reference range there.
pub fn nrmse(pred: &[f64], reference: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    same_len(pred, reference)?;
    if let Some(m) = mask {
        same_len(pred, m)?;
    }
    let mut n = 0usize;
    let mut se = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..pred.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        n += 1;
        se += (pred[i] - reference[i]).powi(2);
        lo = lo.min(reference[i]);
        hi = hi.max(reference[i]);
    }
    if mask.is_some() && n < 2 {
        return Err(Error::UndefinedMetric(format!("NRMSE needs at least 2 masked voxels, got {n}")));
    }
    if n == 0 || hi - lo <= 0.0 {
        return Err(Error::UndefinedMetric("reference range is zero".into()));
    }
    Ok((se / n as f64).sqrt() / (hi - lo))
}

pub fn nrmse_volumes(pred: &Volume3D, reference: &Volume3D) -> Result<f64> {
    pred.geometry().ensure_same(reference.geometry(), "prediction vs reference")?;
    nrmse(&pred.to_f64(), &reference.to_f64(), None)
}

/// NRMSE restricted to voxels of `class` in `labels`.
pub fn class_nrmse(pred: &Volume3D, reference: &Volume3D, labels: &LabelVolume, class: usize) -> Result<f64> {
    pred.geometry().ensure_same(reference.geometry(), "prediction vs reference")?;
    pred.geometry().ensure_same(labels.geometry(), "image vs labels")?;
    let mask: Vec<bool> = labels.data().iter().map(|&l| l as usize == class).collect();
    nrmse(&pred.to_f64(), &reference.to_f64(), Some(&mask))
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks give 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn class_dice(pred: &LabelVolume, reference: &LabelVolume, class: usize) -> Result<f64> {
    pred.geometry().ensure_same(reference.geometry(), "prediction vs reference labels")?;
    let a: Vec<bool> = pred.data().iter().map(|&l| l as usize == class).collect();
    let b: Vec<bool> = reference.data().iter().map(|&l| l as usize == class).collect();
    dice(&a, &b)
}

/// `100·(est − gt)/gt`.
pub fn percent_bias(est: f64, gt: f64) -> Result<f64> {
    if gt == 0.0 || !gt.is_finite() {
        return Err(Error::UndefinedMetric(format!("percent bias against reference {gt}")));
    }
    Ok(100.0 * (est - gt) / gt)
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Degenerate("mean of no values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    Ok(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n: usize,
    /// Set when `y` is constant and `r_squared` was fixed to 0.
    pub constant_y: bool,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn ols_regression(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    same_len(x, y)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("regression needs n >= 2, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("regression on constant x".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (slope * a + intercept)).powi(2)).sum();
    let (r_squared, constant_y) = if ss_tot == 0.0 { (0.0, true) } else { ((1.0 - ss_res / ss_tot).clamp(0.0, 1.0), false) };
    Ok(RegressionResult { slope, intercept, r_squared, n, constant_y })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a − b`.
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Non-zero differences.
    pub n_effective: usize,
    pub exact: bool,
    /// All differences were zero.
    pub degenerate: bool,
}

/// Largest effective sample size that uses the exact distribution.
pub const WILCOXON_EXACT_MAX: usize = 15;

/// Mid-ranks of `|d|`, doubled so they are integers.
fn doubled_ranks(d: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 share (i+1 + j+1)/2; doubled: i + j + 2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Paired two-sided signed-rank test; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Degenerate("signed-rank test on no pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_two_sided: 1.0, n_effective: 0, exact: true, degenerate: true });
    }
    let r2 = doubled_ranks(&d);
    let w2: u64 = d.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| *r).sum();
    let total2: u64 = r2.iter().sum();
    let statistic = w2 as f64 / 2.0;
    if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign assignments with doubled W+ = s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &r2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let dev = (2 * w2 as i64 - total2 as i64).abs();
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (2 * *s as i64 - total2 as i64).abs() >= dev)
            .map(|(_, c)| *c)
            .sum();
        let p = extreme as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonResult { statistic, p_two_sided: p.min(1.0), n_effective: n, exact: true, degenerate: false });
    }
    let mu = total2 as f64 / 4.0;
    let var: f64 = r2.iter().map(|&r| (r as f64 / 2.0).powi(2)).sum::<f64>() / 4.0;
    let z = ((statistic - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult { statistic, p_two_sided: p, n_effective: n, exact: false, degenerate: false })
}

/// Rows are methods, columns are classes or metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub values: Vec<Option<MeanStd>>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Table { title: title.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<MeanStd>>) {
        assert_eq!(values.len(), self.columns.len(), "row width must match columns");
        self.rows.push(TableRow { label: label.into(), values });
    }

    /// Fixed-width text rendering with `mean ± std` cells.
    pub fn to_text(&self) -> String {
        let cell = |v: &Option<MeanStd>| match v {
            Some(m) => format!("{:.3} ± {:.3}", m.mean, m.std),
            None => "-".to_string(),
        };
        let label_w = self.rows.iter().map(|r| r.label.chars().count()).chain([6]).max().unwrap_or(6);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| self.rows.iter().map(|r| cell(&r.values[i]).chars().count()).chain([c.chars().count()]).max().unwrap_or(1))
            .collect();
        let mut out = format!("{}\n", self.title);
        out.push_str(&format!("{:<label_w$}", "method"));
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<label_w$}", r.label));
            for (v, w) in r.values.iter().zip(&widths) {
                out.push_str(&format!("  {:>w$}", cell(v)));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_examples() {
        let r = [0.0, 10.0, 0.0, 10.0];
        assert_eq!(nrmse(&r, &r, None).unwrap(), 0.0);
        let p: Vec<f64> = r.iter().map(|v| v + 1.0).collect();
        assert!((nrmse(&p, &r, None).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(nrmse(&[1.0, 2.0], &[3.0, 3.0], None), Err(Error::UndefinedMetric(_))));
        assert!(nrmse(&r, &r, Some(&[true, false, false, false])).is_err());
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        let b = [true, true, true, true];
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bias_examples() {
        assert_eq!(percent_bias(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(percent_bias(1.5, 3.0).unwrap(), -50.0);
        assert!(percent_bias(1.0, 0.0).is_err());
        let m = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.n), (2.0, 2));
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ols_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = ols_regression(&x, &y).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12 && (r.intercept - 1.0).abs() < 1e-12 && (r.r_squared - 1.0).abs() < 1e-12);
        let c = ols_regression(&x, &[5.0; 4]).unwrap();
        assert_eq!(c.r_squared, 0.0);
        assert!(c.constant_y);
        assert!(ols_regression(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0];
        let same = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(same.degenerate && same.p_two_sided == 1.0);
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.p_two_sided, 0.0625);
        assert_eq!(r.statistic, 15.0);
    }

    #[test]
    fn mid_ranks() {
        assert_eq!(doubled_ranks(&[1.0, -1.0, 3.0, 2.0]), vec![3, 3, 8, 6]);
    }

    #[test]
    fn table_text_aligns() {
        let mut t = Table::new("NRMSE", vec!["lesion".into(), "liver".into()]);
        t.push("full", vec![Some(MeanStd { mean: 0.1, std: 0.02, n: 2 }), None]);
        t.push("w/o revision", vec![Some(MeanStd { mean: 0.2, std: 0.0, n: 2 }), Some(MeanStd { mean: 0.3, std: 0.1, n: 2 })]);
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].chars().count(), lines[2].chars().count());
        assert_eq!(lines[2].chars().count(), lines[3].chars().count());
    }
}
