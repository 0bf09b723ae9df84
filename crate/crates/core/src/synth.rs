//! Procedural narrow-road tiles: textured ground, smooth stroked roads,
//! low-contrast surfaces and background-coloured occluders.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RasterSample, MIN_EXTENT};
use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Square tile edge in pixels.
    pub size: usize,
    /// Inclusive range of roads per tile.
    pub roads: (usize, usize),
    /// Inclusive stroke width range in pixels.
    pub width_px: (usize, usize),
    /// Fraction of road length hidden under occluders.
    pub occlusion_rate: f64,
    /// Road/background separation; `0` paints roads with the local
    /// background mean, `1` with the full road colour.
    pub contrast: f64,
    /// Amplitude of the per-pixel texture noise, in `[0,1]` intensity units.
    pub noise: f64,
    /// Largest heading change between random-walk control points, radians.
    pub curvature: f64,
    /// Fixed road heading in radians; random when `None`.
    pub heading: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 96,
            roads: (1, 3),
            width_px: (1, 5),
            occlusion_rate: 0.1,
            contrast: 0.5,
            noise: 0.06,
            curvature: 0.6,
            heading: None,
            seed: 0,
        }
    }
}

pub const SYNTH_KEYS: [&str; 11] = [
    "size",
    "roads_min",
    "roads_max",
    "width_min",
    "width_max",
    "occlusion_rate",
    "contrast",
    "noise",
    "curvature",
    "heading",
    "seed",
];

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(alloc::format!("{key}: cannot parse {value:?}")))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < MIN_EXTENT || !self.size.is_multiple_of(INPUT_MULTIPLE) {
            return bad(alloc::format!("size {} must be a multiple of {INPUT_MULTIPLE} and at least {MIN_EXTENT}", self.size));
        }
        if self.roads.0 > self.roads.1 {
            return bad(alloc::format!("roads range {:?} is empty", self.roads));
        }
        if self.width_px.0 < 1 || self.width_px.0 > self.width_px.1 {
            return bad(alloc::format!("width range {:?} must satisfy 1 <= min <= max", self.width_px));
        }
        for (name, v) in [("occlusion_rate", self.occlusion_rate), ("contrast", self.contrast)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(alloc::format!("{name} {v} outside [0,1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(alloc::format!("noise {} must be finite and nonnegative", self.noise));
        }
        if !(self.curvature >= 0.0 && self.curvature.is_finite()) {
            return bad(alloc::format!("curvature {} must be finite and nonnegative", self.curvature));
        }
        Ok(())
    }

    /// Flat key/value pairs in [`SYNTH_KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let heading = self.heading.map_or_else(|| "random".to_string(), |h| h.to_string());
        let values = [
            self.size.to_string(),
            self.roads.0.to_string(),
            self.roads.1.to_string(),
            self.width_px.0.to_string(),
            self.width_px.1.to_string(),
            self.occlusion_rate.to_string(),
            self.contrast.to_string(),
            self.noise.to_string(),
            self.curvature.to_string(),
            heading,
            self.seed.to_string(),
        ];
        SYNTH_KEYS.iter().copied().zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "size" => self.size = parse(key, value)?,
            "roads_min" => self.roads.0 = parse(key, value)?,
            "roads_max" => self.roads.1 = parse(key, value)?,
            "width_min" => self.width_px.0 = parse(key, value)?,
            "width_max" => self.width_px.1 = parse(key, value)?,
            "occlusion_rate" => self.occlusion_rate = parse(key, value)?,
            "contrast" => self.contrast = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "curvature" => self.curvature = parse(key, value)?,
            "heading" => {
                self.heading = match value.trim() {
                    "random" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(alloc::format!("unknown synth key {key:?}"))),
        }
        Ok(())
    }
}

/// Smooth scalar field from bilinearly interpolated lattice values.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, size: usize, cell: f64) -> Self {
        let cols = (size as f64 / cell).ceil() as usize + 2;
        let lattice = (0..cols * cols).map(|_| rng.random::<f64>()).collect();
        Self { cell, cols, lattice }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (gy, gx) = (y / self.cell, x / self.cell);
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(gy - gy.floor()), smooth(gx - gx.floor()));
        let v = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

type Point = (f64, f64);

/// Distance from `p` to the segment `a-b`.
fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Marks every pixel whose centre lies within `width / 2` of the polyline.
/// Points are `(x, y)` in pixel units with pixel `(r, c)` centred at
/// `(c + 0.5, r + 0.5)`.
pub fn stroke_polyline(mask: &mut [u8], height: usize, width: usize, points: &[Point], stroke: f64) {
    let half = stroke / 2.0;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - half - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + half + 1.0).ceil().max(0.0) as usize).min(width);
        let y0 = (a.1.min(b.1) - half - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + half + 1.0).ceil().max(0.0) as usize).min(height);
        for r in y0..y1 {
            for c in x0..x1 {
                if segment_distance((c as f64 + 0.5, r as f64 + 0.5), a, b) <= half {
                    mask[r * width + c] = 1;
                }
            }
        }
    }
}

/// Quadratic B-spline through the midpoints of a control polygon, sampled
/// densely; end points are kept.
fn smooth_polyline(ctrl: &[Point], samples: usize) -> Vec<Point> {
    if ctrl.len() < 3 {
        return ctrl.to_vec();
    }
    let mid = |a: Point, b: Point| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    let mut out = Vec::from([ctrl[0]]);
    let mut start = ctrl[0];
    for i in 1..ctrl.len() - 1 {
        let c = ctrl[i];
        let end = if i == ctrl.len() - 2 { ctrl[i + 1] } else { mid(c, ctrl[i + 1]) };
        for s in 1..=samples {
            let t = s as f64 / samples as f64;
            let u = 1.0 - t;
            out.push((
                u * u * start.0 + 2.0 * u * t * c.0 + t * t * end.0,
                u * u * start.1 + 2.0 * u * t * c.1 + t * t * end.1,
            ));
        }
        start = end;
    }
    out
}

/// Random-walk control points crossing the whole tile: the walk starts at an
/// interior point and is extended both ways until it leaves the tile.
fn road_controls<R: Rng>(rng: &mut R, size: f64, curvature: f64, heading: Option<f64>) -> Vec<Point> {
    let step = size / 5.0;
    let start = (rng.random_range(0.0..size), rng.random_range(0.0..size));
    let theta = heading.unwrap_or_else(|| rng.random_range(0.0..PI));
    let margin = step;
    let outside = |p: Point| p.0 < -margin || p.1 < -margin || p.0 > size + margin || p.1 > size + margin;
    let mut walk = |dir: f64| {
        let mut pts = Vec::new();
        let mut p = start;
        let mut th = theta + dir;
        for _ in 0..64 {
            if curvature > 0.0 {
                th += rng.random_range(-curvature..=curvature);
            }
            p = (p.0 + step * th.cos(), p.1 + step * th.sin());
            pts.push(p);
            if outside(p) {
                break;
            }
        }
        pts
    };
    let forward = walk(0.0);
    let mut backward = walk(PI);
    backward.reverse();
    backward.push(start);
    backward.extend(forward);
    backward
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic tile number `index` of the configured family.
pub fn generate_sample(cfg: &SynthConfig, index: u64) -> Result<RasterSample> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    // ground: earthy base colour modulated by two octaves of value noise
    let base = [
        rng.random_range(0.30..0.55),
        rng.random_range(0.32..0.55),
        rng.random_range(0.22..0.45),
    ];
    let tint = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
    let coarse = ValueNoise::new(&mut rng, n, 24.0);
    let fine = ValueNoise::new(&mut rng, n, 6.0);
    let mut ground = alloc::vec![[0.0f64; 3]; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let a = coarse.at(y, x) - 0.5;
            let b = fine.at(y, x) - 0.5;
            for ch in 0..3 {
                ground[r * n + c][ch] = base[ch] + 0.35 * a + 0.15 * b + tint[ch] * a * 2.0;
            }
        }
    }

    // roads: labels are the union of strokes, fixed before occlusion
    let road_colour = [
        rng.random_range(0.70..0.90),
        rng.random_range(0.70..0.90),
        rng.random_range(0.68..0.88),
    ];
    let roads = rng.random_range(cfg.roads.0..=cfg.roads.1);
    let mut mask = alloc::vec![0u8; n * n];
    let mut paths = Vec::with_capacity(roads);
    for _ in 0..roads {
        let ctrl = road_controls(&mut rng, n as f64, cfg.curvature, cfg.heading);
        let path = smooth_polyline(&ctrl, 8);
        let w = rng.random_range(cfg.width_px.0..=cfg.width_px.1) as f64;
        stroke_polyline(&mut mask, n, n, &path, w);
        paths.push((path, w));
    }

    // local background mean: ground smoothed by the coarse octave only
    let mut rgb = ground.clone();
    for (i, px) in rgb.iter_mut().enumerate() {
        if mask[i] == 1 {
            let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
            let local = coarse.at(y, x) - 0.5;
            for ch in 0..3 {
                let bg = base[ch] + 0.35 * local + tint[ch] * local * 2.0;
                px[ch] = bg + cfg.contrast * (road_colour[ch] - bg);
            }
        }
    }

    // occluders: discs centred on road samples, painted with ground colour,
    // until the requested share of road length is covered
    let mut occluded = alloc::vec![0u8; n * n];
    for (path, w) in &paths {
        let inside: Vec<Point> = path
            .iter()
            .copied()
            .filter(|p| p.0 >= 0.0 && p.1 >= 0.0 && p.0 < n as f64 && p.1 < n as f64)
            .collect();
        if inside.len() < 2 || cfg.occlusion_rate == 0.0 {
            continue;
        }
        let length: f64 = inside
            .windows(2)
            .map(|s| ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt())
            .sum();
        let mut covered = 0.0;
        let mut guard = 0;
        while covered < cfg.occlusion_rate * length && guard < 64 {
            guard += 1;
            let centre = inside[rng.random_range(0..inside.len())];
            let radius = rng.random_range(w.max(2.0)..w.max(2.0) * 2.0 + 2.0);
            covered += 2.0 * radius;
            stroke_polyline(&mut occluded, n, n, &[centre, centre], 2.0 * radius);
        }
    }
    for (i, px) in rgb.iter_mut().enumerate() {
        if occluded[i] == 1 {
            *px = ground[i];
        }
    }

    let mut image = Vec::with_capacity(n * n * 3);
    for px in &rgb {
        let grain = cfg.noise * (rng.random::<f64>() * 2.0 - 1.0);
        for ch in 0..3 {
            let jitter = cfg.noise * 0.5 * (rng.random::<f64>() * 2.0 - 1.0);
            image.push(to_u8(px[ch] + grain + jitter));
        }
    }
    RasterSample::new(alloc::format!("synth_{index:05}"), n, n, image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_roads_gives_empty_mask() {
        let cfg = SynthConfig {
            roads: (0, 0),
            ..Default::default()
        };
        assert_eq!(generate_sample(&cfg, 3).unwrap().road_pixels(), 0);
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_sample(&cfg, 4).unwrap(), generate_sample(&cfg, 4).unwrap());
        assert_ne!(generate_sample(&cfg, 4).unwrap(), generate_sample(&cfg, 5).unwrap());
    }

    #[test]
    fn straight_horizontal_unit_road_fills_one_row() {
        let cfg = SynthConfig {
            roads: (1, 1),
            width_px: (1, 1),
            curvature: 0.0,
            heading: Some(0.0),
            ..Default::default()
        };
        for index in 0..10 {
            let s = generate_sample(&cfg, index).unwrap();
            let n = cfg.size;
            let rows: Vec<usize> = (0..n).map(|r| s.mask()[r * n..(r + 1) * n].iter().map(|&v| v as usize).sum()).collect();
            let full: Vec<_> = rows.iter().filter(|&&v| v > 0).collect();
            assert_eq!(full, [&n], "index {index}");
        }
    }

    #[test]
    fn occlusion_never_changes_labels() {
        let a = SynthConfig {
            occlusion_rate: 0.0,
            ..Default::default()
        };
        let b = SynthConfig {
            occlusion_rate: 0.8,
            ..Default::default()
        };
        for i in 0..5 {
            let (sa, sb) = (generate_sample(&a, i).unwrap(), generate_sample(&b, i).unwrap());
            assert_eq!(sa.mask(), sb.mask());
        }
    }

    #[test]
    fn stroke_distance_rule() {
        let mut m = alloc::vec![0u8; 16 * 16];
        stroke_polyline(&mut m, 16, 16, &[(8.5, 8.5), (8.5, 8.5)], 2.0);
        // centre plus its four neighbours at distance 1; diagonals are at sqrt 2
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), 5);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut cfg = SynthConfig::default();
        let mut copy = SynthConfig {
            seed: 99,
            heading: Some(1.0),
            ..Default::default()
        };
        for (k, v) in cfg.pairs() {
            copy.set(k, &v).unwrap();
        }
        assert_eq!(copy, cfg);
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("size", "abc").is_err());
        cfg.contrast = 1.5;
        assert!(cfg.validate().is_err());
        cfg.contrast = 0.5;
        cfg.size = 100;
        assert!(cfg.validate().is_err());
    }
}
