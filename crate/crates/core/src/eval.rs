//! Affine-aligned depth metrics and report files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::normalize::Mask;

/// Floor applied to aligned disparity before inversion.
pub const DISPARITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignSpace {
    /// Fit `s·pred + t ≈ 1/gt`, then invert.
    #[default]
    Disparity,
    /// Fit `s·(1/pred) + t ≈ gt` directly in depth.
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage of pixels with `max(d̂/d*, d*/d̂) < 1.25`.
    pub delta1: f64,
    /// Mean `|d* − d̂| / d*`, times 100.
    pub absrel: f64,
    pub n_pixels: usize,
    pub scale: f64,
    pub shift: f64,
    /// Pixels whose aligned value hit the floor.
    pub n_clamped: usize,
}

/// Least-squares `(s, t)` minimizing `Σ (s·x + t − y)²` over paired samples.
pub fn fit_affine(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Numeric(format!("alignment needs >= 2 pixels, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if !(sxx > 1e-18 * n * (1.0 + mx * mx)) {
        return Err(Error::Numeric("degenerate alignment: constant prediction".into()));
    }
    let s = sxy / sxx;
    Ok((s, my - s * mx))
}

fn gather_valid(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<Vec<usize>> {
    if pred.shape() != gt.shape() || valid.data.len() != gt.numel() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok((0..gt.numel())
        .filter(|&i| valid.data[i] && gt.data()[i].is_finite() && gt.data()[i] > 0.0 && pred.data()[i].is_finite())
        .collect())
}

/// Disparity-space alignment of `pred` to `1/gt` over valid pixels.
pub fn align_lsq(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<(f64, f64)> {
    let idx = gather_valid(pred, gt, valid)?;
    let x: Vec<f64> = idx.iter().map(|&i| pred.data()[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| 1.0 / gt.data()[i]).collect();
    fit_affine(&x, &y)
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<MetricsReport> {
    compute_metrics_with(pred, gt, valid, AlignSpace::Disparity)
}

pub fn compute_metrics_with(pred: &Tensor, gt: &Tensor, valid: &Mask, space: AlignSpace) -> Result<MetricsReport> {
    let idx = gather_valid(pred, gt, valid)?;
    let p: Vec<f64> = idx.iter().map(|&i| pred.data()[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| gt.data()[i]).collect();
    let mut n_clamped = 0;
    let (scale, shift, depth): (f64, f64, Vec<f64>) = match space {
        AlignSpace::Disparity => {
            let y: Vec<f64> = g.iter().map(|d| 1.0 / d).collect();
            let (s, t) = fit_affine(&p, &y)?;
            let depth = p
                .iter()
                .map(|v| {
                    let a = s * v + t;
                    if a < DISPARITY_FLOOR {
                        n_clamped += 1;
                    }
                    1.0 / a.max(DISPARITY_FLOOR)
                })
                .collect();
            (s, t, depth)
        }
        AlignSpace::Depth => {
            let x: Vec<f64> = p.iter().map(|v| 1.0 / v.max(DISPARITY_FLOOR)).collect();
            let (s, t) = fit_affine(&x, &g)?;
            let depth = x
                .iter()
                .map(|v| {
                    let a = s * v + t;
                    if a < DISPARITY_FLOOR {
                        n_clamped += 1;
                    }
                    a.max(DISPARITY_FLOOR)
                })
                .collect();
            (s, t, depth)
        }
    };
    let (delta1, absrel) = depth_metrics(&depth, &g);
    Ok(MetricsReport {
        delta1,
        absrel,
        n_pixels: g.len(),
        scale,
        shift,
        n_clamped,
    })
}

/// `(δ1, AbsRel)` in percent for already aligned depths.
pub fn depth_metrics(depth: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = gt.len() as f64;
    let good = depth
        .iter()
        .zip(gt)
        .filter(|(d, t)| (*d / *t).max(*t / *d) < 1.25)
        .count();
    let absrel = depth.iter().zip(gt).map(|(d, t)| (t - d).abs() / t).sum::<f64>() / n;
    (100.0 * good as f64 / n, 100.0 * absrel)
}

/// Pools several images: pixel-weighted means of δ1 and AbsRel.
pub fn pool_reports(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let total: usize = reports.iter().map(|r| r.n_pixels).sum();
    if total == 0 {
        return None;
    }
    let w = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / total as f64;
    Some(MetricsReport {
        delta1: w(|r| r.delta1),
        absrel: w(|r| r.absrel),
        n_pixels: total,
        scale: w(|r| r.scale),
        shift: w(|r| r.shift),
        n_clamped: reports.iter().map(|r| r.n_clamped).sum(),
    })
}

pub const REPORT_CSV_HEADER: &str = "split,delta1,absrel,n_pixels,scale,shift,n_clamped";

/// Writes `path` as JSON and a CSV twin next to it (same stem, `.csv`).
pub fn emit_report(reports: &BTreeMap<String, MetricsReport>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(reports)?;
    std::fs::write(path, json + "\n")?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for (split, r) in reports {
        csv.push_str(&format!(
            "{split},{},{},{},{},{},{}\n",
            r.delta1, r.absrel, r.n_pixels, r.scale, r.shift, r.n_clamped
        ));
    }
    std::fs::write(path.with_extension("csv"), csv)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BTreeMap<String, MetricsReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, n], v).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let gt = map(vec![1.0, 2.0, 4.0, 5.0]);
        let valid = Mask::all_valid(1, 4);
        let pred = gt.map(|d| 2.0 / d + 1.0);
        let (s, t) = align_lsq(&pred, &gt, &valid).unwrap();
        assert!((s - 0.5).abs() < 1e-12 && (t + 0.5).abs() < 1e-12);
        let (s, t) = align_lsq(&gt.map(|d| 1.0 / d), &gt, &valid).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
        assert!(matches!(
            align_lsq(&map(vec![3.0; 4]), &gt, &valid),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn metric_examples() {
        let gt = map(vec![1.0, 2.0, 3.0, 8.0]);
        let valid = Mask::all_valid(1, 4);
        for c in [1.0, 0.3, 7.0] {
            let r = compute_metrics(&gt.map(|d| c / d), &gt, &valid).unwrap();
            assert_eq!(r.delta1, 100.0);
            assert!(r.absrel < 1e-10);
        }
    }

    #[test]
    fn aligned_depth_metrics() {
        let (d1, rel) = depth_metrics(&[1.3], &[1.0]);
        assert_eq!(d1, 0.0);
        assert!((rel - 30.0).abs() < 1e-12);
        for x in [0.1, 0.2] {
            let gt = [1.0, 2.0, 0.5];
            let pred = gt.map(|d| (1.0 + x) * d);
            let (d1, rel) = depth_metrics(&pred, &gt);
            assert_eq!(d1, 100.0);
            assert!((rel - 100.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn report_round_trip_and_stability() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.json");
        let empty = BTreeMap::new();
        emit_report(&empty, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), "{}");
        assert_eq!(
            std::fs::read_to_string(path.with_extension("csv")).unwrap(),
            format!("{REPORT_CSV_HEADER}\n")
        );

        let mut reports = BTreeMap::new();
        reports.insert(
            "test".to_string(),
            MetricsReport {
                delta1: 87.5,
                absrel: 12.25,
                n_pixels: 4096,
                scale: 0.3,
                shift: -0.01,
                n_clamped: 0,
            },
        );
        emit_report(&reports, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        emit_report(&reports, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        assert_eq!(read_report(&path).unwrap(), reports);
    }
}
