//! Gaussian heatmap encoding, argmax decoding, and the elliptical uncertain
//! regions used to perturb decoded trajectory points at inference.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BotError, Result};

pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_BETA: f64 = 2.0;
/// Rejection-sampling budget before falling back to the region center.
pub const MAX_REJECTION_ITERS: usize = 10_000;

/// Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point2D {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point2D> for [f64; 2] {
    fn from(p: Point2D) -> Self {
        [p.x, p.y]
    }
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: &Point2D) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn in_bounds(&self, w: f64, l: f64) -> bool {
        self.x >= 0.0 && self.x < w && self.y >= 0.0 && self.y < l
    }

    pub fn clamp_to(&self, w: f64, l: f64) -> Point2D {
        Point2D::new(self.x.clamp(0.0, w.next_down()), self.y.clamp(0.0, l.next_down()))
    }
}

/// Nonnegative `rows x cols` grid; cell `(r, c)` covers image pixels
/// `[c*sx, (c+1)*sx) x [r*sy, (r+1)*sy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    sx: f64,
    sy: f64,
}

impl HeatmapGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, sx: f64, sy: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(BotError::Shape(format!(
                "heatmap {rows}x{cols} with {} values",
                values.len()
            )));
        }
        if !(sx > 0.0 && sy > 0.0) {
            return Err(BotError::Config(format!("heatmap scale ({sx}, {sy}) must be positive")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(BotError::NonFinite(format!("heatmap value {v} (must be finite, >= 0)")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            sx,
            sy,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&self) -> (f64, f64) {
        (self.sx, self.sy)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point2D {
        Point2D::new((c as f64 + 0.5) * self.sx, (r as f64 + 0.5) * self.sy)
    }

    /// Grid cell containing an image point.
    pub fn cell_of(&self, p: &Point2D) -> Result<(usize, usize)> {
        let c = (p.x / self.sx).floor();
        let r = (p.y / self.sy).floor();
        if !(c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows) {
            return Err(BotError::OutOfGrid(format!(
                "({}, {}) on {}x{} grid",
                p.x, p.y, self.rows, self.cols
            )));
        }
        Ok((r as usize, c as usize))
    }

    /// Pointwise transform; the result must stay finite and nonnegative.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<HeatmapGrid> {
        HeatmapGrid::new(
            self.rows,
            self.cols,
            self.values.iter().map(|&v| f(v)).collect(),
            self.sx,
            self.sy,
        )
    }
}

/// `exp(-d^2 / (2 sigma^2))` with `d` the distance from `p` to each cell
/// center, measured in cells.
pub fn gaussian_heatmap(
    p: &Point2D,
    sigma_g: f64,
    rows: usize,
    cols: usize,
    sx: f64,
    sy: f64,
) -> Result<HeatmapGrid> {
    if !(sigma_g > 0.0) {
        return Err(BotError::Config(format!("sigma_g must be positive, got {sigma_g}")));
    }
    let (px, py) = (p.x / sx, p.y / sy);
    let denom = 2.0 * sigma_g * sigma_g;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let dy = r as f64 + 0.5 - py;
        for c in 0..cols {
            let dx = c as f64 + 0.5 - px;
            values.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    HeatmapGrid::new(rows, cols, values, sx, sy)
}

/// Row-major index of the maximum; ties go to the lowest index.
pub fn argmax_cell(hm: &HeatmapGrid) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in hm.values.iter().enumerate() {
        if v > hm.values[best] {
            best = i;
        }
    }
    (best / hm.cols, best % hm.cols)
}

/// Image-space center of the maximum cell.
pub fn decode_point(hm: &HeatmapGrid) -> Result<Point2D> {
    if hm.values.iter().any(|v| !v.is_finite()) {
        return Err(BotError::NonFinite("heatmap passed to decode_point".into()));
    }
    let (r, c) = argmax_cell(hm);
    Ok(hm.cell_center(r, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Point2D,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn is_degenerate(&self) -> bool {
        self.a == 0.0 || self.b == 0.0
    }

    /// Quadratic-form value of `p`; `<= 1` means inside. The major axis runs
    /// along direction `theta`.
    pub fn level(&self, p: &Point2D) -> f64 {
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        if self.is_degenerate() {
            return if dx == 0.0 && dy == 0.0 { 0.0 } else { f64::INFINITY };
        }
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        self.level(p) <= 1.0
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        ((a2 * c * c + b2 * s * s).sqrt(), (a2 * s * s + b2 * c * c).sqrt())
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// Segment angle in `(-pi/2, pi/2]`; vertical segments give `pi/2`, a zero-length
/// segment gives 0.
pub fn segment_angle(p: &Point2D, q: &Point2D) -> f64 {
    let (dx, dy) = (q.x - p.x, q.y - p.y);
    if dx == 0.0 {
        if dy == 0.0 {
            0.0
        } else {
            FRAC_PI_2
        }
    } else {
        (dy / dx).atan()
    }
}

/// Semi-axes `a = alpha * beta^(t-1) * sqrt(d)`, `b = sqrt(L/W) * a`, tilt along the segment.
#[allow(clippy::too_many_arguments)]
pub fn ellipse_params(
    t: usize,
    seg_start: &Point2D,
    seg_end: &Point2D,
    alpha: f64,
    beta: f64,
    w: f64,
    l: f64,
    center: &Point2D,
) -> Ellipse {
    let d = seg_start.dist(seg_end);
    let a = alpha * beta.powi(t as i32 - 1) * d.sqrt();
    Ellipse {
        center: *center,
        a,
        b: (l / w).sqrt() * a,
        theta: segment_angle(seg_start, seg_end),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainRegion {
    pub e1: Ellipse,
    pub e2: Ellipse,
}

impl UncertainRegion {
    pub fn center(&self) -> Point2D {
        self.e1.center
    }

    pub fn is_degenerate(&self) -> bool {
        self.e1.is_degenerate() || self.e2.is_degenerate()
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        self.e1.contains(p) && self.e2.contains(p)
    }

    fn smaller(&self) -> &Ellipse {
        if self.e1.area() <= self.e2.area() {
            &self.e1
        } else {
            &self.e2
        }
    }

    /// Monte-Carlo area estimate from `n` uniform draws in the smaller ellipse's box.
    pub fn area_mc<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        if self.is_degenerate() || n == 0 {
            return 0.0;
        }
        let e = self.smaller();
        let (hx, hy) = e.half_extents();
        let c = self.center();
        let hits = (0..n)
            .filter(|_| {
                let p = Point2D::new(
                    c.x + rng.random_range(-hx..=hx),
                    c.y + rng.random_range(-hy..=hy),
                );
                self.contains(&p)
            })
            .count();
        4.0 * hx * hy * hits as f64 / n as f64
    }
}

/// Region at step `t` around `h_t`: one ellipse from `(h_prev, h_t)`, one from `(h_t, h_next)`.
#[allow(clippy::too_many_arguments)]
pub fn uncertain_region(
    t: usize,
    h_prev: &Point2D,
    h_t: &Point2D,
    h_next: &Point2D,
    alpha: f64,
    beta: f64,
    w: f64,
    l: f64,
) -> UncertainRegion {
    UncertainRegion {
        e1: ellipse_params(t, h_prev, h_t, alpha, beta, w, l, h_t),
        e2: ellipse_params(t, h_t, h_next, alpha, beta, w, l, h_t),
    }
}

/// Uniform draw from the region restricted to the image, by rejection from
/// the smaller ellipse's bounding box.
pub fn sample_region<R: Rng + ?Sized>(
    region: &UncertainRegion,
    w: f64,
    l: f64,
    rng: &mut R,
) -> Point2D {
    let c = region.center();
    if region.is_degenerate() {
        return c.clamp_to(w, l);
    }
    let (hx, hy) = region.smaller().half_extents();
    for _ in 0..MAX_REJECTION_ITERS {
        let p = Point2D::new(
            c.x + rng.random_range(-hx..=hx),
            c.y + rng.random_range(-hy..=hy),
        );
        if p.in_bounds(w, l) && region.contains(&p) {
            return p;
        }
    }
    c.clamp_to(w, l)
}

/// Perturbs each decoded point inside its uncertain region. `observed` is the
/// last observed hand position and `contact` closes the final segment.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectory<R: Rng + ?Sized>(
    decoded: &[Point2D],
    contact: &Point2D,
    observed: &Point2D,
    alpha: f64,
    beta: f64,
    w: f64,
    l: f64,
    rng: &mut R,
) -> Vec<Point2D> {
    if alpha == 0.0 {
        return decoded.to_vec();
    }
    let n = decoded.len();
    (0..n)
        .map(|i| {
            let prev = if i == 0 { observed } else { &decoded[i - 1] };
            let next = if i + 1 == n { contact } else { &decoded[i + 1] };
            let region = uncertain_region(i + 1, prev, &decoded[i], next, alpha, beta, w, l);
            sample_region(&region, w, l, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const W: f64 = 456.0;
    const L: f64 = 256.0;

    /// `x^T M x` with `M = R diag(1/a^2, 1/b^2) R^T`, built as a matrix.
    fn quadratic_form(e: &Ellipse, p: &Point2D) -> f64 {
        let (c, s) = (e.theta.cos(), e.theta.sin());
        let r = [[c, -s], [s, c]];
        let d = [1.0 / (e.a * e.a), 1.0 / (e.b * e.b)];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = (0..2).map(|k| r[i][k] * d[k] * r[j][k]).sum();
            }
        }
        let x = [p.x - e.center.x, p.y - e.center.y];
        (0..2)
            .map(|i| (0..2).map(|j| x[i] * m[i][j] * x[j]).sum::<f64>())
            .sum()
    }

    #[test]
    fn gaussian_examples() {
        let hm = gaussian_heatmap(&Point2D::new(10.5, 7.5), 4.0, 16, 16, 1.0, 1.0).unwrap();
        assert_eq!(hm.at(7, 10), 1.0);
        assert_relative_eq!(hm.at(7, 14), (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(hm.at(3, 10), 0.6065306597126334, epsilon = 1e-12);
        for c in 10..15 {
            assert!(hm.at(7, c) > hm.at(7, c + 1));
        }
        assert!(gaussian_heatmap(&Point2D::new(1.0, 1.0), 0.0, 4, 4, 1.0, 1.0).is_err());
    }

    #[test]
    fn far_point_still_valid() {
        let hm = gaussian_heatmap(&Point2D::new(-500.0, 900.0), 1.0, 8, 8, 1.0, 1.0).unwrap();
        assert!(hm.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn decode_examples() {
        let mut v = vec![0.0; 16 * 16];
        v[7 * 16 + 10] = 2.0;
        let hm = HeatmapGrid::new(16, 16, v, 8.0, 4.0).unwrap();
        assert_eq!(decode_point(&hm).unwrap(), Point2D::new(10.5 * 8.0, 7.5 * 4.0));

        let flat = HeatmapGrid::new(4, 5, vec![0.3; 20], 1.0, 1.0).unwrap();
        assert_eq!(argmax_cell(&flat), (0, 0));

        let mut v = vec![0.0; 8 * 8];
        v[2 * 8 + 3] = 1.0;
        v[5 * 8 + 1] = 1.0;
        let hm = HeatmapGrid::new(8, 8, v, 1.0, 1.0).unwrap();
        assert_eq!(argmax_cell(&hm), (2, 3));
    }

    #[test]
    fn heatmap_rejects_negative_and_nan() {
        assert!(HeatmapGrid::new(1, 2, vec![0.0, -1.0], 1.0, 1.0).is_err());
        assert!(HeatmapGrid::new(1, 2, vec![0.0, f64::NAN], 1.0, 1.0).is_err());
        assert!(HeatmapGrid::new(1, 2, vec![0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn ellipse_examples() {
        let o = Point2D::new(0.0, 0.0);
        let p = Point2D::new(4.0, 3.0);
        let e = ellipse_params(1, &o, &p, 1.5, 2.0, W, L, &p);
        assert_relative_eq!(e.a, 3.3541019662496847, epsilon = 1e-12);
        assert_relative_eq!(e.b / e.a, 0.7492686492653552, epsilon = 1e-12);
        assert_relative_eq!(e.b, 2.5131, epsilon = 1e-3);
        assert_relative_eq!(e.theta, 0.6435011087932844, epsilon = 1e-12);
        let e3 = ellipse_params(3, &o, &p, 1.5, 2.0, W, L, &p);
        assert_relative_eq!(e3.a, 13.416407864998739, epsilon = 1e-12);

        let h = ellipse_params(1, &o, &Point2D::new(5.0, 0.0), 1.5, 2.0, W, L, &o);
        assert_eq!(h.theta, 0.0);
        let v = ellipse_params(1, &o, &Point2D::new(0.0, -5.0), 1.5, 2.0, W, L, &o);
        assert_eq!(v.theta, FRAC_PI_2);
    }

    #[test]
    fn major_axis_follows_segment() {
        let o = Point2D::new(100.0, 100.0);
        let e = ellipse_params(2, &o, &Point2D::new(136.0, 127.0), 1.5, 2.0, W, L, &o);
        let (s, c) = e.theta.sin_cos();
        let tip = Point2D::new(o.x + 0.999 * e.a * c, o.y + 0.999 * e.a * s);
        assert!(e.contains(&tip));
        let side = Point2D::new(o.x - 0.999 * e.a * s, o.y + 0.999 * e.a * c);
        assert!(!e.contains(&side));
    }

    #[test]
    fn region_center_and_degenerate() {
        let (p, h, n) = (Point2D::new(50.0, 60.0), Point2D::new(80.0, 70.0), Point2D::new(95.0, 100.0));
        let r = uncertain_region(2, &p, &h, &n, 1.5, 2.0, W, L);
        assert_eq!(r.e1.level(&h), 0.0);
        assert!(r.contains(&h));

        let d = uncertain_region(1, &h, &h, &n, 1.5, 2.0, W, L);
        assert!(d.is_degenerate());
        assert!(d.contains(&h));
        assert!(!d.contains(&Point2D::new(80.0 + 1e-9, 70.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_region(&d, W, L, &mut rng), h);
    }

    #[test]
    fn samples_lie_in_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, h, n) = (Point2D::new(50.0, 60.0), Point2D::new(120.0, 90.0), Point2D::new(160.0, 70.0));
        let r = uncertain_region(3, &p, &h, &n, 1.5, 2.0, W, L);
        for _ in 0..10_000 {
            let s = sample_region(&r, W, L, &mut rng);
            assert!(r.contains(&s) && s.in_bounds(W, L));
        }
    }

    #[test]
    fn alpha_zero_returns_decoded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec: Vec<Point2D> = (0..4).map(|i| Point2D::new(10.0 + 30.0 * i as f64, 40.0)).collect();
        let out = sample_trajectory(&dec, &Point2D::new(200.0, 50.0), &Point2D::new(0.0, 30.0), 0.0, 2.0, W, L, &mut rng);
        assert_eq!(out, dec);
    }

    #[test]
    fn sampling_is_seeded() {
        let dec: Vec<Point2D> = (0..4).map(|i| Point2D::new(100.0 + 30.0 * i as f64, 40.0 + 5.0 * i as f64)).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_trajectory(&dec, &Point2D::new(260.0, 80.0), &Point2D::new(70.0, 30.0), 1.5, 2.0, W, L, &mut rng)
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    fn pt() -> impl Strategy<Value = Point2D> {
        (0.0..W, 0.0..L).prop_map(|(x, y)| Point2D::new(x, y))
    }

    proptest! {
        #[test]
        fn membership_matches_quadratic_form(s in pt(), e in pt(), t in 1usize..5, q in pt()) {
            let el = ellipse_params(t, &s, &e, 1.5, 2.0, W, L, &e);
            prop_assume!(!el.is_degenerate());
            let lhs = el.level(&q);
            let rhs = quadratic_form(&el, &q);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn axis_ratio_and_scaling(s in pt(), e in pt(), t in 1usize..4, alpha in 0.1f64..4.0) {
            let el = ellipse_params(t, &s, &e, alpha, 2.0, W, L, &e);
            prop_assume!(el.a > 0.0);
            prop_assert!((el.b / el.a - (L / W).sqrt()).abs() < 1e-9);
            let next = ellipse_params(t + 1, &s, &e, alpha, 2.0, W, L, &e);
            prop_assert_eq!(next.a / el.a, 2.0);
            let dbl = ellipse_params(t, &s, &e, 2.0 * alpha, 2.0, W, L, &e);
            prop_assert!((dbl.a / el.a - 2.0).abs() < 1e-12);
            prop_assert!(el.theta > -FRAC_PI_2 && el.theta <= FRAC_PI_2);
        }

        #[test]
        fn gaussian_argmax_is_nearest_cell(x in 0.0f64..57.0, y in 0.0f64..32.0, sigma in 0.5f64..4.0) {
            let p = Point2D::new(x * 8.0, y * 8.0);
            let hm = gaussian_heatmap(&p, sigma, 32, 57, 8.0, 8.0).unwrap();
            prop_assert_eq!(argmax_cell(&hm), hm.cell_of(&p).unwrap());
        }

        #[test]
        fn decode_invariant_under_monotone_map(vals in proptest::collection::vec(0.0f64..10.0, 12)) {
            let hm = HeatmapGrid::new(3, 4, vals, 2.0, 2.0).unwrap();
            let mapped = hm.map(|v| (3.0 * v + 1.0).ln() + v * v).unwrap();
            prop_assert_eq!(decode_point(&hm).unwrap(), decode_point(&mapped).unwrap());
        }

        #[test]
        fn region_samples_pass_membership(h in pt(), p in pt(), n in pt(), seed in 0u64..1000) {
            let r = uncertain_region(2, &p, &h, &n, 1.5, 2.0, W, L);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(r.contains(&r.center()));
            for _ in 0..20 {
                let s = sample_region(&r, W, L, &mut rng);
                prop_assert!(r.contains(&s));
            }
        }
    }
}
