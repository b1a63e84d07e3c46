//! Synthetic egocentric interaction sequences: hands follow quadratic Bezier
//! paths to a contact point on an object, rendered as grayscale frames.
//! Long reaches end on peripheral objects, short reaches on central ones.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BotError, Result};
use crate::geometry::Point2D;

const MAX_RETRIES: usize = 100;
const HAND_TRIES: usize = 25;
const BOUNDS_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Long,
    Medium,
    Short,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Long, Category::Medium, Category::Short];

    /// Arc-length band as fractions of the image diagonal, `[lo, hi)`.
    pub fn band(self) -> (f64, f64) {
        match self {
            Category::Short => (0.12, 1.0 / 3.0),
            Category::Medium => (1.0 / 3.0, 2.0 / 3.0),
            Category::Long => (2.0 / 3.0, 0.9),
        }
    }

    /// Allowed range of the object's normalized distance from the image center
    /// (Chebyshev, 0 = center, 1 = border).
    fn radial_band(self) -> (f64, f64) {
        match self {
            Category::Short => (0.0, 0.4),
            Category::Medium => (0.3, 0.75),
            Category::Long => (0.6, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Long => "long",
            Category::Medium => "medium",
            Category::Short => "short",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub long: usize,
    pub medium: usize,
    pub short: usize,
    pub width: usize,
    pub height: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub n_obs: usize,
    pub horizon: usize,
    /// Standard deviation of per-point jitter, pixels.
    pub noise: f64,
    pub seed: u64,
    pub p_left: f64,
    pub p_right: f64,
    /// Hand blob standard deviation, pixels.
    pub blob_sigma: f64,
    pub left_amp: f64,
    pub right_amp: f64,
    pub object_amp: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            long: 100,
            medium: 100,
            short: 100,
            width: 456,
            height: 256,
            frame_w: 57,
            frame_h: 32,
            n_obs: 8,
            horizon: 5,
            noise: 1.5,
            seed: 0,
            p_left: 0.5,
            p_right: 0.8,
            blob_sigma: 10.0,
            left_amp: 0.7,
            right_amp: 1.0,
            object_amp: 0.4,
        }
    }
}

impl GeneratorConfig {
    /// Splits `num` sequences as evenly as possible, remainder to long then medium.
    pub fn with_total(mut self, num: usize) -> Self {
        self.long = num / 3 + usize::from(num % 3 > 0);
        self.medium = num / 3 + usize::from(num % 3 > 1);
        self.short = num / 3;
        self
    }

    pub fn total(&self) -> usize {
        self.long + self.medium + self.short
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs < 2 {
            return Err(BotError::Config("n_obs must be at least 2".into()));
        }
        if self.horizon < 3 {
            return Err(BotError::Config("horizon must be at least 3".into()));
        }
        if self.width == 0 || self.height == 0 || self.frame_w == 0 || self.frame_h == 0 {
            return Err(BotError::Config("image and frame dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_left) || !(0.0..=1.0).contains(&self.p_right) {
            return Err(BotError::Config("presence probabilities must lie in [0, 1]".into()));
        }
        if self.p_left == 0.0 && self.p_right == 0.0 {
            return Err(BotError::Config("at least one hand must be able to appear".into()));
        }
        if !(self.noise >= 0.0 && self.blob_sigma > 0.0) {
            return Err(BotError::Config("noise must be >= 0 and blob_sigma > 0".into()));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Category of every sequence index, interleaved so any prefix is mixed.
    pub fn schedule(&self) -> Vec<Category> {
        let mut left = [self.long, self.medium, self.short];
        let mut out = Vec::with_capacity(self.total());
        while left.iter().any(|&n| n > 0) {
            for (i, cat) in Category::ALL.iter().enumerate() {
                if left[i] > 0 {
                    left[i] -= 1;
                    out.push(*cat);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandPath {
    pub start: Point2D,
    pub control: Point2D,
    pub contact: Point2D,
}

impl HandPath {
    pub fn at(&self, u: f64) -> Point2D {
        let v = 1.0 - u;
        Point2D::new(
            v * v * self.start.x + 2.0 * v * u * self.control.x + u * u * self.contact.x,
            v * v * self.start.y + 2.0 * v * u * self.control.y + u * u * self.contact.y,
        )
    }

    /// Polyline length with 512 segments.
    pub fn arc_length(&self) -> f64 {
        let n = 512;
        (0..n)
            .map(|i| self.at(i as f64 / n as f64).dist(&self.at((i + 1) as f64 / n as f64)))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub object_center: Point2D,
    pub object_radius: f64,
    /// Index 0 = left, 1 = right.
    pub hands: [HandPath; 2],
    pub present: [bool; 2],
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandTrack {
    pub present: bool,
    pub obs: Vec<Point2D>,
    pub future: Vec<Point2D>,
    pub contact: Point2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hands {
    pub left: HandTrack,
    pub right: HandTrack,
}

impl Hands {
    pub fn get(&self, i: usize) -> &HandTrack {
        if i == 0 {
            &self.left
        } else {
            &self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub w: usize,
    pub h: usize,
    pub n_obs: usize,
    pub category: Category,
    /// `n_obs` frames, each `frame_h` rows of `frame_w` values in `[0, 1]`.
    pub frames: Vec<Vec<Vec<f64>>>,
    pub hands: Hands,
}

impl SequenceRecord {
    pub fn frame_dims(&self) -> (usize, usize) {
        let rows = self.frames.first().map_or(0, Vec::len);
        let cols = self.frames.first().and_then(|f| f.first()).map_or(0, Vec::len);
        (rows, cols)
    }

    /// Number of future trajectory points.
    pub fn future_len(&self) -> usize {
        self.hands.right.future.len()
    }
}

fn radial_pos(p: &Point2D, w: f64, l: f64) -> f64 {
    ((p.x - w / 2.0).abs() / (w / 2.0)).max((p.y - l / 2.0).abs() / (l / 2.0))
}

fn inside(p: &Point2D, w: f64, l: f64) -> bool {
    p.x >= BOUNDS_MARGIN && p.x < w - BOUNDS_MARGIN && p.y >= BOUNDS_MARGIN && p.y < l - BOUNDS_MARGIN
}

fn place_object<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig, cat: Category) -> Option<(Point2D, f64)> {
    let (w, l) = (cfg.width as f64, cfg.height as f64);
    // 12..24 px at 456x256
    let radius = cfg.diagonal() * rng.random_range(0.023..0.046);
    let (lo, hi) = cat.radial_band();
    for _ in 0..HAND_TRIES {
        let p = Point2D::new(
            rng.random_range(radius..w - radius),
            rng.random_range(radius..l - radius),
        );
        let rho = radial_pos(&p, w, l);
        if rho >= lo && rho <= hi {
            return Some((p, radius));
        }
    }
    None
}

fn place_hand<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GeneratorConfig,
    cat: Category,
    center: &Point2D,
    radius: f64,
) -> Option<HandPath> {
    let (w, l) = (cfg.width as f64, cfg.height as f64);
    let diag = cfg.diagonal();
    let (lo, hi) = cat.band();
    // shrink by half a pixel so independent arc-length estimates agree on the band
    let (lo_px, hi_px) = (lo * diag + 0.5, hi * diag - 0.5);
    let toward_center = (l / 2.0 - center.y).atan2(w / 2.0 - center.x);
    for _ in 0..HAND_TRIES {
        let rr = radius * 0.8 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let contact = Point2D::new(center.x + rr * phi.cos(), center.y + rr * phi.sin());
        let target = rng.random_range(lo_px..hi_px);
        let bend = rng.random_range(-0.15..0.15);
        let chord = target / (1.0 + 2.0 * bend * bend);
        let ang = toward_center + rng.random_range(-0.9..0.9);
        let start = Point2D::new(contact.x + chord * ang.cos(), contact.y + chord * ang.sin());
        let mid = Point2D::new((start.x + contact.x) / 2.0, (start.y + contact.y) / 2.0);
        let control = Point2D::new(mid.x - bend * chord * ang.sin(), mid.y + bend * chord * ang.cos());
        let path = HandPath {
            start,
            control,
            contact,
        };
        let len = path.arc_length();
        if len < lo_px || len >= hi_px {
            continue;
        }
        if (0..=32).all(|i| inside(&path.at(i as f64 / 32.0), w, l)) {
            return Some(path);
        }
    }
    None
}

pub fn generate_scenario<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GeneratorConfig,
    category: Category,
) -> Result<Scenario> {
    cfg.validate()?;
    for _ in 0..MAX_RETRIES {
        let Some((center, radius)) = place_object(rng, cfg, category) else {
            continue;
        };
        let Some(left) = place_hand(rng, cfg, category, &center, radius) else {
            continue;
        };
        let Some(right) = place_hand(rng, cfg, category, &center, radius) else {
            continue;
        };
        let mut present = [rng.random_bool(cfg.p_left), rng.random_bool(cfg.p_right)];
        if !present[0] && !present[1] {
            let i = if cfg.p_right > 0.0 { 1 } else { 0 };
            present[i] = true;
        }
        return Ok(Scenario {
            object_center: center,
            object_radius: radius,
            hands: [left, right],
            present,
            category,
        });
    }
    Err(BotError::Generation(format!(
        "no feasible {} scenario after {MAX_RETRIES} retries",
        category.as_str()
    )))
}

/// Renders `n` frames; step `k` shows each present hand at `positions[hand][k]`.
pub fn render_frames(
    scenario: &Scenario,
    positions: &[Vec<Point2D>; 2],
    cfg: &GeneratorConfig,
    n: usize,
) -> Vec<Vec<Vec<f64>>> {
    let sx = cfg.width as f64 / cfg.frame_w as f64;
    let sy = cfg.height as f64 / cfg.frame_h as f64;
    let amps = [cfg.left_amp, cfg.right_amp];
    let denom = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    (0..n)
        .map(|k| {
            (0..cfg.frame_h)
                .map(|r| {
                    (0..cfg.frame_w)
                        .map(|c| {
                            let p = Point2D::new((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
                            let mut v = if p.dist(&scenario.object_center) <= scenario.object_radius {
                                cfg.object_amp
                            } else {
                                0.0
                            };
                            for h in 0..2 {
                                if scenario.present[h] {
                                    let d = p.dist(&positions[h][k]);
                                    v = f64::max(v, amps[h] * (-d * d / denom).exp());
                                }
                            }
                            v.clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `N - 1` absolute differences of consecutive frames.
pub fn frame_difference(frames: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
    if frames.len() < 2 {
        return Err(BotError::Shape(format!(
            "frame_difference needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    Ok(frames
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x).abs()).collect())
                .collect()
        })
        .collect())
}

/// Generates sequence `index` of the dataset from its own rng stream.
pub fn generate_sequence(cfg: &GeneratorConfig, index: usize, category: Category) -> Result<(SequenceRecord, Scenario)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    generate_sequence_with(&mut rng, cfg, &format!("seq{index:05}"), category)
}

pub fn generate_sequence_with<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GeneratorConfig,
    id: &str,
    category: Category,
) -> Result<(SequenceRecord, Scenario)> {
    let scenario = generate_scenario(rng, cfg, category)?;
    let (w, l) = (cfg.width as f64, cfg.height as f64);
    let steps = cfg.n_obs + cfg.horizon - 1;
    let jitter = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| BotError::Config(e.to_string()))?;
    let mut tracks = Vec::with_capacity(2);
    let mut positions: [Vec<Point2D>; 2] = [Vec::new(), Vec::new()];
    for (h, path) in scenario.hands.iter().enumerate() {
        let pts: Vec<Point2D> = (0..steps)
            .map(|k| {
                let p = path.at(k as f64 / steps as f64);
                let (jx, jy) = if cfg.noise > 0.0 {
                    (jitter.sample(rng), jitter.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                Point2D::new(p.x + jx, p.y + jy).clamp_to(w, l)
            })
            .collect();
        positions[h] = pts.clone();
        tracks.push(HandTrack {
            present: scenario.present[h],
            obs: pts[..cfg.n_obs].to_vec(),
            future: pts[cfg.n_obs..].to_vec(),
            contact: path.contact,
        });
    }
    let frames = render_frames(&scenario, &positions, cfg, cfg.n_obs);
    let right = tracks.pop().unwrap();
    let left = tracks.pop().unwrap();
    Ok((
        SequenceRecord {
            id: id.to_string(),
            w: cfg.width,
            h: cfg.height,
            n_obs: cfg.n_obs,
            category,
            frames,
            hands: Hands { left, right },
        },
        scenario,
    ))
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<SequenceRecord>> {
    cfg.validate()?;
    cfg.schedule()
        .into_iter()
        .enumerate()
        .map(|(i, cat)| generate_sequence(cfg, i, cat).map(|(r, _)| r))
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[SequenceRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| BotError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
