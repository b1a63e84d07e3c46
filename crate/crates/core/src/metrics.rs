//! Trajectory displacement errors and saliency-style hotspot metrics.

use serde::{Deserialize, Serialize};

use crate::error::{BotError, Result};
use crate::geometry::{HeatmapGrid, Point2D};

pub const HOTSPOT_GRID: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ade,
    Fde,
}

/// Field order is the JSON key order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade: f64,
    pub fde: f64,
    pub sim: f64,
    pub auc_j: f64,
    pub nss: f64,
    pub k: usize,
    pub n: usize,
}

fn norm_dist(p: &Point2D, q: &Point2D, w: f64, l: f64) -> f64 {
    ((p.x - q.x) / w).hypot((p.y - q.y) / l)
}

fn check_traj(pred: &[Vec<Point2D>], gt: &[Vec<Point2D>], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(BotError::Shape(format!(
            "{} predicted hands, {} ground-truth hands, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(BotError::Empty("no hand present in mask".into()));
    }
    for (p, g) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m).map(|(pg, _)| pg) {
        if p.len() != g.len() || p.is_empty() {
            return Err(BotError::Shape(format!(
                "trajectory lengths {} vs {}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Mean normalized displacement over every point of every present hand.
pub fn ade(pred: &[Vec<Point2D>], gt: &[Vec<Point2D>], mask: &[bool], w: f64, l: f64) -> Result<f64> {
    check_traj(pred, gt, mask)?;
    let (mut total, mut count) = (0.0, 0usize);
    for ((p, g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        for (a, b) in p.iter().zip(g) {
            total += norm_dist(a, b, w, l);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean normalized displacement of the final trajectory point over present hands.
pub fn fde(pred: &[Vec<Point2D>], gt: &[Vec<Point2D>], mask: &[bool], w: f64, l: f64) -> Result<f64> {
    check_traj(pred, gt, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        total += norm_dist(p.last().unwrap(), g.last().unwrap(), w, l);
        count += 1;
    }
    Ok(total / count as f64)
}

pub fn trajectory_metric(
    metric: Metric,
    pred: &[Vec<Point2D>],
    gt: &[Vec<Point2D>],
    mask: &[bool],
    w: f64,
    l: f64,
) -> Result<f64> {
    match metric {
        Metric::Ade => ade(pred, gt, mask, w, l),
        Metric::Fde => fde(pred, gt, mask, w, l),
    }
}

/// Best metric value over `samples`, each a per-hand set of trajectories.
pub fn min_of_k(
    samples: &[Vec<Vec<Point2D>>],
    gt: &[Vec<Point2D>],
    mask: &[bool],
    metric: Metric,
    w: f64,
    l: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(BotError::Empty("min_of_k needs K >= 1".into()));
    }
    samples.iter().try_fold(f64::INFINITY, |best, s| {
        Ok(best.min(trajectory_metric(metric, s, gt, mask, w, l)?))
    })
}

/// Area-weighted average pooling onto an `out_rows x out_cols` grid covering
/// the same image extent.
pub fn downsample_heatmap(hm: &HeatmapGrid, out_rows: usize, out_cols: usize) -> Result<HeatmapGrid> {
    if out_rows == 0 || out_cols == 0 || hm.rows() < out_rows || hm.cols() < out_cols {
        return Err(BotError::Shape(format!(
            "cannot downsample {}x{} to {out_rows}x{out_cols}",
            hm.rows(),
            hm.cols()
        )));
    }
    let wr = overlap_weights(hm.rows(), out_rows);
    let wc = overlap_weights(hm.cols(), out_cols);
    let cell_area = (hm.rows() as f64 / out_rows as f64) * (hm.cols() as f64 / out_cols as f64);
    let mut out = vec![0.0; out_rows * out_cols];
    for (o_r, rw) in wr.iter().enumerate() {
        for (o_c, cw) in wc.iter().enumerate() {
            let mut acc = 0.0;
            for &(r, a) in rw {
                for &(c, b) in cw {
                    acc += a * b * hm.at(r, c);
                }
            }
            out[o_r * out_cols + o_c] = acc / cell_area;
        }
    }
    let (sx, sy) = hm.scale();
    HeatmapGrid::new(
        out_rows,
        out_cols,
        out,
        sx * hm.cols() as f64 / out_cols as f64,
        sy * hm.rows() as f64 / out_rows as f64,
    )
}

/// For each output bin, the source indices it overlaps and the overlap length.
fn overlap_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let ov = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (ov > 0.0).then_some((i, ov))
                })
                .collect()
        })
        .collect()
}

fn check_same_dims(a: &HeatmapGrid, b: &HeatmapGrid) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(BotError::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Histogram intersection of the two maps normalized to unit mass.
pub fn sim(pred: &HeatmapGrid, gt: &HeatmapGrid) -> Result<f64> {
    check_same_dims(pred, gt)?;
    let (sp, sg) = (pred.sum(), gt.sum());
    if !(sp > 0.0 && sg > 0.0) {
        return Err(BotError::Empty("sim needs positive mass in both maps".into()));
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| (p / sp).min(g / sg))
        .sum())
}

/// Judd AUC for a single fixation: fraction of other cells ranked below the
/// fixation cell, ties counted half.
pub fn auc_j(pred: &HeatmapGrid, fixation: &Point2D) -> Result<f64> {
    let (r, c) = pred.cell_of(fixation)?;
    let n = pred.values().len();
    if n < 2 {
        return Err(BotError::Shape("auc_j needs at least two cells".into()));
    }
    let fi = r * pred.cols() + c;
    let fv = pred.values()[fi];
    let (mut below, mut ties) = (0usize, 0usize);
    for (i, &v) in pred.values().iter().enumerate() {
        if i == fi {
            continue;
        }
        if v < fv {
            below += 1;
        } else if v == fv {
            ties += 1;
        }
    }
    Ok((below as f64 + 0.5 * ties as f64) / (n - 1) as f64)
}

/// Z-scored (population std) value at the fixation; 0 for constant maps.
pub fn nss(pred: &HeatmapGrid, fixation: &Point2D) -> Result<f64> {
    let (r, c) = pred.cell_of(fixation)?;
    let v = pred.values();
    if v.iter().all(|&x| x == v[0]) {
        return Ok(0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((pred.at(r, c) - mean) / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point2D {
        Point2D::new(x, y)
    }

    fn grid(rows: usize, cols: usize, v: Vec<f64>) -> HeatmapGrid {
        HeatmapGrid::new(rows, cols, v, 1.0, 1.0).unwrap()
    }

    #[test]
    fn ade_fde_examples() {
        let pred = vec![vec![p(0.0, 0.0), p(1.0, 0.0)]];
        let gt = vec![vec![p(0.0, 0.0), p(0.0, 0.0)]];
        assert_eq!(ade(&pred, &gt, &[true], 1.0, 1.0).unwrap(), 0.5);
        assert_eq!(fde(&pred, &gt, &[true], 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(ade(&gt, &gt, &[true], 1.0, 1.0).unwrap(), 0.0);
        assert!(ade(&pred, &gt, &[false], 1.0, 1.0).is_err());
    }

    #[test]
    fn absent_hand_is_ignored() {
        let pred = vec![vec![p(9.0, 9.0)], vec![p(3.0, 4.0)]];
        let gt = vec![vec![p(0.0, 0.0)], vec![p(0.0, 0.0)]];
        assert_eq!(ade(&pred, &gt, &[false, true], 1.0, 1.0).unwrap(), 5.0);
        assert_relative_eq!(ade(&pred, &gt, &[false, true], 3.0, 4.0).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn min_of_k_examples() {
        let gt = vec![vec![p(0.0, 0.0)]];
        let samples: Vec<_> = [0.3, 0.1, 0.2].iter().map(|&d| vec![vec![p(d, 0.0)]]).collect();
        assert_relative_eq!(min_of_k(&samples, &gt, &[true], Metric::Ade, 1.0, 1.0).unwrap(), 0.1);
        assert_relative_eq!(min_of_k(&samples[..1], &gt, &[true], Metric::Ade, 1.0, 1.0).unwrap(), 0.3);
        assert!(min_of_k(&[], &gt, &[true], Metric::Ade, 1.0, 1.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let c = grid(64, 64, vec![0.7; 64 * 64]);
        let d = downsample_heatmap(&c, 32, 32).unwrap();
        assert!(d.values().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let v: Vec<f64> = (0..64 * 64).map(|i| (i % 17) as f64).collect();
        let src = grid(64, 64, v);
        let d = downsample_heatmap(&src, 32, 32).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let m = (src.at(2 * r, 2 * c) + src.at(2 * r + 1, 2 * c) + src.at(2 * r, 2 * c + 1) + src.at(2 * r + 1, 2 * c + 1)) / 4.0;
                assert_relative_eq!(d.at(r, c), m, epsilon = 1e-12);
            }
        }
        assert_eq!(d.scale(), (2.0, 2.0));
        assert!(downsample_heatmap(&grid(16, 40, vec![1.0; 640]), 32, 32).is_err());
    }

    #[test]
    fn downsample_preserves_mean_for_fractional_ratio() {
        let v: Vec<f64> = (0..32 * 57).map(|i| ((i * 31) % 11) as f64 * 0.1).collect();
        let src = HeatmapGrid::new(32, 57, v, 8.0, 8.0).unwrap();
        let d = downsample_heatmap(&src, 32, 32).unwrap();
        assert_relative_eq!(d.sum() / 1024.0, src.sum() / (32.0 * 57.0), epsilon = 1e-9);
        assert_relative_eq!(d.scale().0, 8.0 * 57.0 / 32.0);
    }

    #[test]
    fn sim_examples() {
        let a = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(sim(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let x = grid(1, 4, vec![1.0, 1.0, 0.0, 0.0]);
        let y = grid(1, 4, vec![0.0, 0.0, 2.0, 0.0]);
        assert_eq!(sim(&x, &y).unwrap(), 0.0);
        assert!(sim(&x, &grid(1, 4, vec![0.0; 4])).is_err());
    }

    #[test]
    fn auc_and_nss_examples() {
        let mut v = vec![0.1; 16];
        v[5] = 1.0;
        let m = grid(4, 4, v);
        assert_eq!(auc_j(&m, &p(1.5, 1.5)).unwrap(), 1.0);
        let c = grid(4, 4, vec![0.3; 16]);
        assert_eq!(auc_j(&c, &p(2.5, 0.5)).unwrap(), 0.5);
        assert_eq!(nss(&c, &p(2.5, 0.5)).unwrap(), 0.0);
        let two = grid(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(nss(&two, &p(0.5, 0.5)).unwrap(), 3f64.sqrt(), epsilon = 1e-12);
        assert!(auc_j(&c, &p(4.5, 0.5)).is_err());
        assert!(nss(&c, &p(-0.5, 0.5)).is_err());
    }

    #[test]
    fn report_key_order() {
        let r = MetricsReport { ade: 0.1, fde: 0.2, sim: 0.3, auc_j: 0.4, nss: 0.5, k: 20, n: 3 };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"ade":0.1,"fde":0.2,"sim":0.3,"auc_j":0.4,"nss":0.5,"k":20,"n":3}"#);
    }

    fn map8() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 64)
    }

    proptest! {
        #[test]
        fn sim_symmetric_and_bounded(a in map8(), b in map8()) {
            let (a, b) = (grid(8, 8, a), grid(8, 8, b));
            let s = sim(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((s - sim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn nss_affine_invariant(a in map8(), k in 0.1f64..10.0, d in 0.0f64..5.0, fx in 0usize..8, fy in 0usize..8) {
            let m = grid(8, 8, a);
            let f = p(fx as f64 + 0.5, fy as f64 + 0.5);
            let t = m.map(|v| k * v + d).unwrap();
            prop_assert!((nss(&m, &f).unwrap() - nss(&t, &f).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn auc_monotone_invariant(a in map8(), fx in 0usize..8, fy in 0usize..8) {
            let m = grid(8, 8, a);
            let f = p(fx as f64 + 0.5, fy as f64 + 0.5);
            let t = m.map(|v| v.powi(3) + 2.0 * v).unwrap();
            let auc = auc_j(&m, &f).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
            prop_assert_eq!(auc, auc_j(&t, &f).unwrap());
        }

        #[test]
        fn ade_symmetric(xs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 8)) {
            let a = vec![xs[..4].iter().map(|&(x, y)| p(x, y)).collect::<Vec<_>>()];
            let b = vec![xs[4..].iter().map(|&(x, y)| p(x, y)).collect::<Vec<_>>()];
            prop_assert_eq!(ade(&a, &b, &[true], 1.0, 1.0).unwrap(), ade(&b, &a, &[true], 1.0, 1.0).unwrap());
            prop_assert_eq!(ade(&a, &a, &[true], 1.0, 1.0).unwrap(), 0.0);
        }

        #[test]
        fn min_of_k_nested(ds in proptest::collection::vec(0.0f64..1.0, 20)) {
            let gt = vec![vec![p(0.0, 0.0)]];
            let s: Vec<_> = ds.iter().map(|&d| vec![vec![p(d, d)]]).collect();
            let m = |k: usize| min_of_k(&s[..k], &gt, &[true], Metric::Ade, 1.0, 1.0).unwrap();
            prop_assert!(m(20) <= m(10) && m(10) <= m(1));
        }
    }
}
