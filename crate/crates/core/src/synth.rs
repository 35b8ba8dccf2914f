//! Procedural two-modality road scenes with exact ground truth.
//!
//! A scene is a perspective road on a textured ground plane under a sky. The
//! appearance image carries colour and texture; the range image carries a
//! surface-normal field in which the road is flat and the verges are tilted.
//! Each modality can be corrupted independently: cast shadows darken the
//! appearance image until road and verge look alike, and the far part of the
//! range image receives distance-dependent noise and a jagged road edge.
//! Every scene is rendered clean first and corrupted second, so the clean and
//! corrupted images differ only inside the recorded corruption masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Norm bound of a corrupted range-normal vector.
pub const MAX_NOISY_NORM: f64 = 1.5;

/// Largest share of the road area a corruption mask may cover.
pub const MAX_ROAD_COVERAGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub shadow_probability: f64,
    pub range_noise_probability: f64,
    /// Horizon row as a fraction of the height, drawn from this range.
    pub horizon: [f64; 2],
    /// Horizontal jitter of the vanishing point, as a fraction of the width.
    pub vanishing_jitter: f64,
    /// Road half-width at the bottom row, as a fraction of the width.
    pub road_half_width: [f64; 2],
    /// Peak lateral bend of the road centre line, as a fraction of the width.
    pub curvature: f64,
    /// Per-pixel standard deviation of the appearance texture.
    pub texture_noise: f64,
    pub max_shadows: usize,
    /// How far shadows pull pixels towards the common shadow tone.
    pub shadow_strength: [f64; 2],
    /// Standard deviation of the range noise at the farthest corrupted row.
    pub range_noise_scale: f64,
    /// Largest per-row displacement of the corrupted road edge, in pixels.
    pub erosion_px: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 96,
            width: 160,
            shadow_probability: 0.7,
            range_noise_probability: 0.7,
            horizon: [0.3, 0.4],
            vanishing_jitter: 0.12,
            road_half_width: [0.22, 0.36],
            curvature: 0.08,
            texture_noise: 0.04,
            max_shadows: 3,
            shadow_strength: [0.85, 0.95],
            range_noise_scale: 0.6,
            erosion_px: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 || self.height % INPUT_MULTIPLE != 0 || self.width % INPUT_MULTIPLE != 0 {
            return bad(format!(
                "scene extents {}x{} must be positive multiples of {INPUT_MULTIPLE}",
                self.height, self.width
            ));
        }
        for (name, p) in [("shadow_probability", self.shadow_probability), ("range_noise_probability", self.range_noise_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let ordered = |r: [f64; 2], lo: f64, hi: f64| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
        if !ordered(self.horizon, 0.05, 0.9) {
            return bad(format!("horizon range {:?} must be ordered within [0.05, 0.9]", self.horizon));
        }
        if !ordered(self.road_half_width, 0.01, 1.0) {
            return bad(format!("road_half_width range {:?} must be ordered within [0.01, 1]", self.road_half_width));
        }
        if !ordered(self.shadow_strength, 0.0, 1.0) {
            return bad(format!("shadow_strength range {:?} must be ordered within [0, 1]", self.shadow_strength));
        }
        for (name, v) in [
            ("vanishing_jitter", self.vanishing_jitter),
            ("curvature", self.curvature),
            ("texture_noise", self.texture_noise),
            ("range_noise_scale", self.range_noise_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// One rendered scene. Images are row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// `H×W×3` colour in `[0, 1]`.
    pub appearance: Vec<f64>,
    /// `H×W×3` surface normals; zero where there is no surface (sky).
    pub range: Vec<f64>,
    /// Road ground truth, 0 or 1.
    pub mask: Vec<u8>,
    /// Where the appearance image is corrupted.
    pub corrupt_a: Vec<u8>,
    /// Where the range image is corrupted.
    pub corrupt_b: Vec<u8>,
}

fn interleaved_to_planar(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c];
        }
    }
    out
}

fn planar_to_interleaved(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..h * w {
        for c in 0..3 {
            out[3 * i + c] = data[c * h * w + i];
        }
    }
    out
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Appearance as a `1×3×H×W` tensor.
    pub fn appearance_tensor(&self) -> Tensor {
        let data = interleaved_to_planar(&self.appearance, self.height, self.width);
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent extents")
    }

    /// Range normals as a `1×3×H×W` tensor.
    pub fn range_tensor(&self) -> Tensor {
        let data = interleaved_to_planar(&self.range, self.height, self.width);
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent extents")
    }

    /// Road mask as a `1×1×H×W` tensor of zeros and ones.
    pub fn mask_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| m as f64).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("consistent extents")
    }

    /// Builds a sample from planar `3×H×W` images, checking every invariant.
    pub fn from_planar(
        appearance: &Tensor,
        range: &Tensor,
        mask: Vec<u8>,
        corrupt_a: Vec<u8>,
        corrupt_b: Vec<u8>,
    ) -> Result<Self> {
        let dims = |t: &Tensor| -> Result<(usize, usize)> {
            match t.shape() {
                [3, h, w] | [1, 3, h, w] => Ok((*h, *w)),
                other => Err(Error::Shape(format!("expected a 3-channel image, got shape {other:?}"))),
            }
        };
        let (h, w) = dims(appearance)?;
        if dims(range)? != (h, w) {
            return Err(Error::Shape(format!(
                "appearance is {h}x{w} but range is {:?}",
                range.shape()
            )));
        }
        for (name, m) in [("mask", &mask), ("corrupt_a", &corrupt_a), ("corrupt_b", &corrupt_b)] {
            if m.len() != h * w {
                return Err(Error::Shape(format!("{name} has {} pixels, expected {}", m.len(), h * w)));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Domain(format!("{name} must hold only 0 and 1")));
            }
        }
        Ok(SceneSample {
            height: h,
            width: w,
            appearance: planar_to_interleaved(appearance.data(), h, w),
            range: planar_to_interleaved(range.data(), h, w),
            mask,
            corrupt_a,
            corrupt_b,
        })
    }

    pub fn road_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.pixels() as f64
    }
}

/// Stacks samples into `N×3×H×W` appearance, range and `N×1×H×W` mask tensors.
pub fn batch_tensors(samples: &[&SceneSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let n = samples.len();
    let (mut a, mut r, mut m) = (Vec::with_capacity(n * 3 * h * w), Vec::with_capacity(n * 3 * h * w), Vec::with_capacity(n * h * w));
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{} scenes", s.height, s.width)));
        }
        a.extend(interleaved_to_planar(&s.appearance, h, w));
        r.extend(interleaved_to_planar(&s.range, h, w));
        m.extend(s.mask.iter().map(|&v| v as f64));
    }
    Ok((Tensor::new(vec![n, 3, h, w], a)?, Tensor::new(vec![n, 3, h, w], r)?, Tensor::new(vec![n, 1, h, w], m)?))
}

/// Road outline: centre and half-width per row below the horizon.
struct Road {
    horizon: f64,
    vanish_x: f64,
    bottom_x: f64,
    half_width: f64,
    bend: f64,
    height: f64,
}

impl Road {
    /// Depth parameter of a pixel-centre row: 0 at the horizon, 1 at the bottom.
    fn t(&self, y: usize) -> f64 {
        (y as f64 + 0.5 - self.horizon) / (self.height - self.horizon)
    }

    fn centre(&self, t: f64) -> f64 {
        self.vanish_x + (self.bottom_x - self.vanish_x) * t + self.bend * t * (1.0 - t)
    }

    /// Signed lateral distance from the road edge; positive inside the road.
    fn inside_by(&self, x: usize, y: usize) -> f64 {
        let t = self.t(y);
        if t <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.half_width * t - (x as f64 + 0.5 - self.centre(t)).abs()
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        v
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Smooth noise: uniform values on a coarse lattice, bilinearly interpolated.
fn value_noise(rng: &mut CounterRng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) + tx * (at(y0, x0 + 1) - at(y0, x0));
            let bottom = at(y0 + 1, x0) + tx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

/// Even-odd rule for a pixel centre against a closed polygon.
fn inside_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

// Stream ids, so each part of a scene draws from its own sequence.
const GEOMETRY: u64 = 1;
const APPEARANCE: u64 = 2;
const RANGE: u64 = 3;
const SHADOW: u64 = 4;
const RANGE_NOISE: u64 = 5;

/// Renders the scene determined by `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let root = CounterRng::new(seed);

    let mut geo = root.derive(GEOMETRY);
    let horizon = hf * geo.uniform(cfg.horizon[0], cfg.horizon[1]);
    let road = Road {
        horizon,
        vanish_x: wf * (0.5 + geo.uniform(-cfg.vanishing_jitter, cfg.vanishing_jitter)),
        bottom_x: wf * (0.5 + geo.uniform(-0.08, 0.08)),
        half_width: wf * geo.uniform(cfg.road_half_width[0], cfg.road_half_width[1]),
        bend: 4.0 * wf * geo.uniform(-cfg.curvature, cfg.curvature),
        height: hf,
    };
    let mask: Vec<u8> = (0..h * w).map(|i| (road.inside_by(i % w, i / w) > 0.0) as u8).collect();
    let is_sky = |y: usize| road.t(y) <= 0.0;

    // Appearance: sky gradient, verge and road albedo with texture and haze.
    let mut rng = root.derive(APPEARANCE);
    let jitter = |rng: &mut CounterRng, base: [f64; 3], amount: f64| base.map(|c| c + rng.uniform(-amount, amount));
    let verge = jitter(&mut rng, [0.34, 0.46, 0.22], 0.06);
    let asphalt = {
        let grey = rng.uniform(0.42, 0.56);
        jitter(&mut rng, [grey, grey, grey + 0.02], 0.02)
    };
    let sky = jitter(&mut rng, [0.55, 0.7, 0.92], 0.04);
    let haze = [0.72, 0.76, 0.82];
    let blotches = value_noise(&mut rng, h, w, 12);
    let mut appearance = vec![0.0; h * w * 3];
    for y in 0..h {
        let t = road.t(y);
        for x in 0..w {
            let i = y * w + x;
            let px = &mut appearance[3 * i..3 * i + 3];
            if is_sky(y) {
                let lift = 0.15 * (1.0 - (y as f64 + 0.5) / horizon);
                for c in 0..3 {
                    px[c] = sky[c] + lift + 0.01 * rng.normal();
                }
                continue;
            }
            let (albedo, texture) = if mask[i] == 1 { (asphalt, 0.6) } else { (verge, 1.0) };
            let shade = 0.08 * blotches[i];
            let fog = 0.35 * (1.0 - t).powi(2);
            for c in 0..3 {
                let surface = albedo[c] + shade + texture * cfg.texture_noise * rng.normal();
                px[c] = surface + fog * (haze[c] - surface);
            }
        }
    }

    // Range: flat road, tilted verges, slow undulation; no surface in the sky.
    let mut rng = root.derive(RANGE);
    let tilt_left = rng.uniform(0.35, 0.7);
    let tilt_right = rng.uniform(0.35, 0.7);
    let lean = rng.uniform(-0.25, 0.25);
    let swell = value_noise(&mut rng, h, w, 24);
    let range_at = |x: usize, y: usize, on_road: bool| -> [f64; 3] {
        if is_sky(y) {
            return [0.0; 3];
        }
        let i = y * w + x;
        let base = if on_road {
            [0.0, 1.0, 0.0]
        } else if (x as f64 + 0.5) < road.centre(road.t(y)) {
            [tilt_left, 1.0, lean]
        } else {
            [-tilt_right, 1.0, lean]
        };
        unit([base[0] + 0.08 * swell[i], base[1], base[2] + 0.08 * swell[(i + w / 2) % (h * w)]])
    };
    let mut range = vec![0.0; h * w * 3];
    for i in 0..h * w {
        range[3 * i..3 * i + 3].copy_from_slice(&range_at(i % w, i / w, mask[i] == 1));
    }
    let road_pixels = mask.iter().filter(|&&m| m == 1).count();
    let coverage_ok = |region: &[u8]| {
        let covered = region.iter().zip(&mask).filter(|(&r, &m)| r == 1 && m == 1).count();
        covered as f64 <= MAX_ROAD_COVERAGE * road_pixels as f64
    };

    // Cast shadows across the road edge, appearance only.
    let mut rng = root.derive(SHADOW);
    let mut corrupt_a = vec![0u8; h * w];
    if rng.bernoulli(cfg.shadow_probability) && cfg.max_shadows > 0 {
        let count = 1 + rng.below(cfg.max_shadows);
        let tone = [0.09, 0.09, 0.11];
        for _ in 0..count {
            let t = rng.uniform(0.3, 1.0);
            let y = horizon + t * (hf - horizon);
            let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let cx = road.centre(t) + side * road.half_width * t;
            let (rx, ry) = (wf * rng.uniform(0.06, 0.15), hf * rng.uniform(0.05, 0.1));
            let poly: Vec<(f64, f64)> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                .iter()
                .map(|&(sx, sy)| {
                    (cx + sx * rx * rng.uniform(0.75, 1.25), y + sy * ry * rng.uniform(0.75, 1.25))
                })
                .collect();
            let mut region = corrupt_a.clone();
            for yy in 0..h {
                if is_sky(yy) {
                    continue;
                }
                for xx in 0..w {
                    if inside_polygon(xx as f64 + 0.5, yy as f64 + 0.5, &poly) {
                        region[yy * w + xx] = 1;
                    }
                }
            }
            if coverage_ok(&region) {
                corrupt_a = region;
            }
        }
        let strength = rng.uniform(cfg.shadow_strength[0], cfg.shadow_strength[1]);
        for i in (0..h * w).filter(|&i| corrupt_a[i] == 1) {
            let grain = 0.03 * rng.normal();
            for c in 0..3 {
                let v = &mut appearance[3 * i + c];
                *v += strength * (tone[c] + grain - *v);
            }
        }
    }
    for v in &mut appearance {
        *v = v.clamp(0.0, 1.0);
    }

    // Far-field range corruption: jagged road edge plus distance-dependent noise.
    let mut rng = root.derive(RANGE_NOISE);
    let mut corrupt_b = vec![0u8; h * w];
    if rng.bernoulli(cfg.range_noise_probability) {
        let first = (horizon.floor() as usize).min(h);
        let first = (first..h).find(|&y| !is_sky(y)).unwrap_or(h);
        let band = (h - first).div_ceil(3);
        let mut region = vec![0u8; h * w];
        for y in first..first + band {
            region[y * w..(y + 1) * w].fill(1);
        }
        if band > 0 && coverage_ok(&region) {
            corrupt_b = region;
            let coarse = value_noise(&mut rng, h, w, 3);
            let reach = cfg.erosion_px as f64;
            for y in first..first + band {
                let depth = 1.0 - (y - first) as f64 / band as f64;
                let sigma = cfg.range_noise_scale * (0.4 + 0.6 * depth);
                let shift = rng.uniform(-reach, reach);
                for x in 0..w {
                    let i = y * w + x;
                    let on_road = road.inside_by(x, y) + shift > 0.0;
                    let mut n = range_at(x, y, on_road);
                    for (c, v) in n.iter_mut().enumerate() {
                        *v += sigma * (0.7 * coarse[(i + c * 7) % (h * w)] + 0.5 * rng.normal());
                    }
                    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    if norm > MAX_NOISY_NORM {
                        n = n.map(|v| v * (MAX_NOISY_NORM / norm));
                    }
                    range[3 * i..3 * i + 3].copy_from_slice(&n);
                }
            }
        }
    }

    Ok(SceneSample { height: h, width: w, appearance, range, mask, corrupt_a, corrupt_b })
}

/// Scenes for seeds `seed, seed + 1, …, seed + n − 1`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| generate_scene(cfg, seed.wrapping_add(i))).collect()
}
