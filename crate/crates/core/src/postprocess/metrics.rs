use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::TargetMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub rpd: f64,
    pub ede_cm: f64,
    pub pixel_size_cm: f64,
}

fn same_shape(a: &TargetMask, b: &TargetMask) -> Result<()> {
    Error::check_dim("mask side", a.side(), b.side())
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &TargetMask, b: &TargetMask) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Relative pixel difference `|#est - #gt| / #gt`.
pub fn rpd(est: &TargetMask, gt: &TargetMask) -> Result<f64> {
    same_shape(est, gt)?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::InvalidArgument("rpd is undefined for an empty ground truth".into()));
    }
    Ok(est.count().abs_diff(g) as f64 / g as f64)
}

/// Equivalent diameter error: diameter of the circle whose area equals the
/// absolute area difference, in cm.
pub fn ede(est: &TargetMask, gt: &TargetMask, pixel_size_cm: f64) -> Result<f64> {
    same_shape(est, gt)?;
    let area = est.count().abs_diff(gt.count()) as f64 * pixel_size_cm * pixel_size_cm;
    Ok(2.0 * (area / PI).sqrt())
}

pub fn evaluate(est: &TargetMask, gt: &TargetMask, pixel_size_cm: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        iou: iou(est, gt)?,
        rpd: rpd(est, gt)?,
        ede_cm: ede(est, gt, pixel_size_cm)?,
        pixel_size_cm,
    })
}

/// Writes `sample,iou,rpd,ede_cm` rows.
pub fn write_metric_rows(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut out = String::from("sample,iou,rpd,ede_cm\n");
    for (name, m) in rows {
        out.push_str(&format!("{name},{},{},{}\n", m.iou, m.rpd, m.ede_cm));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_n(side: usize, n: usize) -> TargetMask {
        TargetMask::from_fn(side, |r, c| r * side + c < n)
    }

    #[test]
    fn iou_cases() {
        let a = first_n(20, 100);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = TargetMask::from_fn(20, |r, c| r * 20 + c >= 300);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &first_n(20, 50)).unwrap(), 0.5);
        assert_eq!(iou(&TargetMask::empty(4), &TargetMask::empty(4)).unwrap(), 1.0);
        assert!(iou(&a, &TargetMask::empty(4)).is_err());
    }

    #[test]
    fn rpd_cases() {
        let gt = first_n(20, 100);
        assert_eq!(rpd(&first_n(20, 100), &gt).unwrap(), 0.0);
        assert!((rpd(&first_n(20, 110), &gt).unwrap() - 0.10).abs() < 1e-15);
        assert!((rpd(&first_n(20, 70), &gt).unwrap() - 0.30).abs() < 1e-15);
        assert!(rpd(&gt, &TargetMask::empty(20)).is_err());
    }

    #[test]
    fn ede_cases() {
        let gt = first_n(20, 100);
        assert_eq!(ede(&first_n(20, 100), &gt, 2.0).unwrap(), 0.0);
        // area difference of pi cm^2: one pixel of side sqrt(pi)
        let d = ede(&first_n(20, 101), &gt, PI.sqrt()).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // 20 px * 4 cm^2 = 80 cm^2
        let d = ede(&first_n(20, 120), &gt, 2.0).unwrap();
        assert!((d - 10.0925).abs() < 1e-4, "{d}");
    }

    #[test]
    fn self_comparison_is_perfect() {
        let m = first_n(10, 37);
        let r = evaluate(&m, &m, 2.0).unwrap();
        assert_eq!((r.iou, r.rpd, r.ede_cm), (1.0, 0.0, 0.0));
    }
}
