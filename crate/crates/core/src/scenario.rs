//! Seeded procedural scenarios: Perlin density fields, pebble layouts, vessel spawns.
//!
//! Every function here is pure in its seeds. Regenerating a scenario from the same
//! [`ScenarioSpec`] is bit-exact, which is what makes the train/test split (y-shift
//! 0 versus 200) reproducible.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::{self, tags};
use crate::{Error, Result};

/// Consecutive rejections after which pebble spawning gives up.
pub const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000_000;

/// Minimum pairwise distance between freshly spawned vessels, in meters.
pub const MIN_VESSEL_SEPARATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub octaves: u32,
    /// Base frequency in noise cycles per area side.
    pub frequency: f64,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    /// Grid cells per axis.
    pub resolution: usize,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            frequency: 2.0,
            persistence: 0.5,
            resolution: 100,
        }
    }
}

/// The reproducible recipe for one world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Noise-field offset along y, in meters.
    pub y_shift: f64,
    pub area_size: f64,
    pub pebble_count: usize,
    pub comm_range: f64,
    pub max_steps: u32,
    pub noise: NoiseParams,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            y_shift: 0.0,
            area_size: 200.0,
            pebble_count: 400,
            comm_range: 100.0,
            max_steps: 5000,
            noise: NoiseParams::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn with_seed(self, seed: u64, y_shift: f64) -> Self {
        Self {
            seed,
            y_shift,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.area_size > 0.0 && self.area_size.is_finite()) {
            return bad("area_size must be positive");
        }
        if !(self.comm_range > 0.0) {
            return bad("comm_range must be positive");
        }
        if self.max_steps < 1 {
            return bad("max episode steps must be at least 1");
        }
        if self.noise.octaves < 1 {
            return bad("octaves must be at least 1");
        }
        if self.noise.resolution < 1 {
            return bad("field resolution must be at least 1");
        }
        if !self.y_shift.is_finite() {
            return bad("y_shift must be finite");
        }
        Ok(())
    }
}

/// Classic gradient noise over a seeded permutation table.
#[derive(Clone)]
pub struct Perlin {
    perm: [u8; 512],
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut table: Vec<u8> = (0..=255u8).collect();
        let mut rng = seeding::rng_for(seed, tags::PERMUTATION);
        table.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = table[i & 255];
        }
        Self { perm }
    }

    pub fn noise(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let xi = (x0 as i64 & 255) as usize;
        let yi = (y0 as i64 & 255) as usize;
        let dx = x - x0;
        let dy = y - y0;
        let u = fade(dx);
        let v = fade(dy);

        let p = &self.perm;
        let a = p[xi] as usize + yi;
        let b = p[xi + 1] as usize + yi;
        let g00 = grad(p[a], dx, dy);
        let g10 = grad(p[b], dx - 1.0, dy);
        let g01 = grad(p[a + 1], dx, dy - 1.0);
        let g11 = grad(p[b + 1], dx - 1.0, dy - 1.0);

        lerp(v, lerp(u, g00, g10), lerp(u, g01, g11))
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(t: f64, a: f64, b: f64) -> f64 {
    a + t * (b - a)
}

// Eight lattice gradients: the four diagonals and the four axes.
fn grad(hash: u8, x: f64, y: f64) -> f64 {
    match hash & 7 {
        0 => x + y,
        1 => -x + y,
        2 => x - y,
        3 => -x - y,
        4 => x,
        5 => -x,
        6 => y,
        _ => -y,
    }
}

/// One-off noise evaluation. Builds the permutation table on every call; use
/// [`Perlin`] directly for bulk sampling.
pub fn perlin2(x: f64, y: f64, seed: u64) -> f64 {
    Perlin::new(seed).noise(x, y)
}

/// Spawn likelihood per grid cell, row-major with row index along y.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn uniform(resolution: usize, value: f64) -> Self {
        Self {
            resolution,
            values: vec![value.clamp(0.0, 1.0); resolution * resolution],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.resolution + col]
    }

    /// Cell index containing world position `(x, y)` in an area of side `area_size`.
    pub fn cell_of(&self, x: f64, y: f64, area_size: f64) -> (usize, usize) {
        let n = self.resolution;
        let to_cell = |v: f64| (((v / area_size) * n as f64).floor().max(0.0) as usize).min(n - 1);
        (to_cell(x), to_cell(y))
    }

    pub fn value_at(&self, x: f64, y: f64, area_size: f64) -> f64 {
        let (c, r) = self.cell_of(x, y, area_size);
        self.get(c, r)
    }
}

/// Fractal Perlin field over the area, min-max rescaled to `[0, 1]`.
///
/// Cell centres are sampled at `(x * f, (y + y_shift) * f)` with `f` the per-meter
/// frequency of the octave, so the y-shift moves the whole sampling window before
/// scaling. A constant field (e.g. zero frequency) maps to 0.5 everywhere.
pub fn density_field(spec: &ScenarioSpec, noise: &NoiseParams) -> DensityField {
    let n = noise.resolution;
    let perlin = Perlin::new(spec.seed);
    let cell = spec.area_size / n as f64;
    let base = noise.frequency / spec.area_size;

    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        let y = (row as f64 + 0.5) * cell + spec.y_shift;
        for col in 0..n {
            let x = (col as f64 + 0.5) * cell;
            let mut sum = 0.0;
            let mut amp = 1.0;
            let mut freq = base;
            for _ in 0..noise.octaves {
                sum += amp * perlin.noise(x * freq, y * freq);
                amp *= noise.persistence;
                freq *= 2.0;
            }
            values.push(sum);
        }
    }

    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 1e-12 {
        for v in &mut values {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.5);
    }
    DensityField {
        resolution: n,
        values,
    }
}

pub fn scenario_field(spec: &ScenarioSpec) -> DensityField {
    density_field(spec, &spec.noise)
}

/// Draws a coordinate uniformly from the open interval `(0, size)`.
fn interior<R: Rng>(rng: &mut R, size: f64) -> f64 {
    loop {
        let v = rng.random::<f64>() * size;
        if v > 0.0 && v < size {
            return v;
        }
    }
}

/// Rejection-samples `spec.pebble_count` positions against the density field.
pub fn spawn_pebbles(field: &DensityField, spec: &ScenarioSpec) -> Result<Vec<[f64; 2]>> {
    let mut rng = seeding::rng_for(spec.seed, tags::PEBBLES);
    let mut out = Vec::with_capacity(spec.pebble_count);
    let mut misses = 0u64;
    while out.len() < spec.pebble_count {
        let x = interior(&mut rng, spec.area_size);
        let y = interior(&mut rng, spec.area_size);
        let p = field.value_at(x, y, spec.area_size);
        if rng.random::<f64>() < p {
            out.push([x, y]);
            misses = 0;
        } else {
            misses += 1;
            if misses >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::SpawnStall { attempts: misses });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 2],
    /// Heading angle in radians, `[0, 2π)`.
    pub heading: f64,
}

/// Uniform vessel poses with at least [`MIN_VESSEL_SEPARATION`] between every pair.
pub fn spawn_vessels(spec: &ScenarioSpec, episode_seed: u64, count: usize) -> Vec<Pose> {
    let mut rng = seeding::rng_for(seeding::derive(spec.seed, episode_seed), tags::VESSELS);
    loop {
        let poses: Vec<Pose> = (0..count)
            .map(|_| Pose {
                position: [interior(&mut rng, spec.area_size), interior(&mut rng, spec.area_size)],
                heading: rng.random::<f64>() * TAU,
            })
            .collect();
        let separated = poses.iter().enumerate().all(|(i, a)| {
            poses[i + 1..].iter().all(|b| {
                let dx = a.position[0] - b.position[0];
                let dy = a.position[1] - b.position[1];
                (dx * dx + dy * dy).sqrt() >= MIN_VESSEL_SEPARATION
            })
        });
        if separated {
            return poses;
        }
    }
}

/// Text dump: a `seed=<i> y_shift=<f> count=<n>` header then one `x,y` line per pebble.
pub fn dump_scenario(spec: &ScenarioSpec, pebbles: &[[f64; 2]]) -> String {
    let mut s = String::with_capacity(24 * pebbles.len() + 48);
    let _ = writeln!(s, "seed={} y_shift={} count={}", spec.seed, spec.y_shift, pebbles.len());
    for p in pebbles {
        let _ = writeln!(s, "{:.6},{:.6}", p[0], p[1]);
    }
    s
}

/// Parses the output of [`dump_scenario`] back into `(seed, y_shift, pebbles)`.
pub fn parse_scenario_dump(text: &str) -> Result<(u64, f64, Vec<[f64; 2]>)> {
    let bad = |m: &str| Error::ReplayFormat(format!("scenario dump: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty"))?;
    let mut seed = None;
    let mut shift = None;
    let mut count = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            Some(("y_shift", v)) => shift = v.parse::<f64>().ok(),
            Some(("count", v)) => count = v.parse::<usize>().ok(),
            _ => return Err(bad("unknown header field")),
        }
    }
    let (seed, shift, count) = match (seed, shift, count) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("incomplete header")),
    };
    let mut pebbles = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (x, y) = line.split_once(',').ok_or_else(|| bad("expected x,y"))?;
        let x = x.trim().parse::<f64>().map_err(|_| bad("bad x"))?;
        let y = y.trim().parse::<f64>().map_err(|_| bad("bad y"))?;
        pebbles.push([x, y]);
    }
    if pebbles.len() != count {
        return Err(bad("count does not match body"));
    }
    Ok((seed, shift, pebbles))
}
