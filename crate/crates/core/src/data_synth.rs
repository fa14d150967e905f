//! Deterministic synthetic scenes: non-overlapping disks, rectangles and
//! triangles on a noisy background, with exact noiseless labels.
//!
//! Randomness comes from `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`SeedableRng::seed_from_u64`), one generator per `(seed, index)` pair.
//! Gaussian noise uses `rand_distr::StandardNormal`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::pgm;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "lsseg-manifest";
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes - 1` shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_min: 3,
            shapes_max: 4,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("scene must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.shapes_min > self.shapes_max {
            return bad(format!(
                "shapes_min {} exceeds shapes_max {}",
                self.shapes_min, self.shapes_max
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    fn rng(&self, index: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    /// Shape drawn for a foreground class: disk, rectangle, triangle, then repeating.
    pub fn for_class(class: u16) -> ShapeKind {
        match (class.max(1) - 1) % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    pub requested_shapes: usize,
    pub placed_shapes: usize,
}

impl Scene {
    /// Some shapes could not be placed without overlap.
    pub fn shortfall(&self) -> bool {
        self.placed_shapes < self.requested_shapes
    }
}

/// Base intensity of each class; background is drawn separately and stays darker.
fn class_intensity(class: u16, num_classes: usize) -> f64 {
    if num_classes <= 2 {
        return 0.7;
    }
    0.35 + 0.55 * (class as f64 - 1.0) / (num_classes as f64 - 2.0)
}

fn rasterize(kind: ShapeKind, h: usize, w: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<(usize, usize)> {
    let s = h.min(w) as f64;
    let mut px = Vec::new();
    match kind {
        ShapeKind::Disk => {
            let r = rng.random_range(0.08 * s..0.18 * s);
            let cy = rng.random_range(r..h as f64 - r);
            let cx = rng.random_range(r..w as f64 - r);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        px.push((y, x));
                    }
                }
            }
        }
        ShapeKind::Rectangle => {
            let rh = rng.random_range((0.15 * s) as usize..=(0.35 * s) as usize).max(2);
            let rw = rng.random_range((0.15 * s) as usize..=(0.35 * s) as usize).max(2);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    px.push((y, x));
                }
            }
        }
        ShapeKind::Triangle => {
            let side = rng.random_range(0.2 * s..0.4 * s);
            let y0 = rng.random_range(0.0..h as f64 - side);
            let x0 = rng.random_range(0.0..w as f64 - side);
            let apex = (y0, x0 + rng.random_range(0.0..side));
            let left = (y0 + side, x0);
            let right = (y0 + side, x0 + side);
            let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
                (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1)
            };
            for y in 0..h {
                for x in 0..w {
                    let p = (y as f64 + 0.5, x as f64 + 0.5);
                    let e = [edge(apex, left, p), edge(left, right, p), edge(right, apex, p)];
                    if e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0) {
                        px.push((y, x));
                    }
                }
            }
        }
    }
    px
}

/// Deterministic in `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = spec.rng(index);
    let background = rng.random_range(0.05..0.2);
    let requested = rng.random_range(spec.shapes_min..=spec.shapes_max);

    let mut labels = vec![0u16; h * w];
    let mut intensity = vec![background; h * w];
    let mut occupied = vec![false; h * w];
    let mut placed = 0;
    for i in 0..requested {
        let class = 1 + (i % (spec.num_classes - 1)) as u16;
        let level = class_intensity(class, spec.num_classes) + rng.random_range(-0.04..0.04);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let pixels = rasterize(ShapeKind::for_class(class), h, w, &mut rng);
            if pixels.is_empty() {
                continue;
            }
            // keep a one-pixel gap between shapes
            let clash = pixels.iter().any(|&(y, x)| {
                (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| occupied[yy * w + xx]))
            });
            if clash {
                continue;
            }
            for (y, x) in pixels {
                let i = y * w + x;
                occupied[i] = true;
                labels[i] = class;
                intensity[i] = level;
            }
            placed += 1;
            break;
        }
    }

    let data = intensity
        .into_iter()
        .map(|v| {
            let noise: f64 = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (v + noise).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Scene {
        image: Image::new(h, w, 1, data)?,
        labels: LabelMap::new(h, w, labels)?,
        requested_shapes: requested,
        placed_shapes: placed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

/// An in-memory image/label corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Scenes `first .. first + n` of `spec`.
    pub fn generate(spec: &SceneSpec, first: u64, n: usize) -> Result<Self> {
        let samples = (0..n as u64)
            .map(|i| {
                generate_scene(spec, first + i).map(|s| Sample {
                    image: s.image,
                    labels: s.labels,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            num_classes: spec.num_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&dir.join(MANIFEST_NAME))?;
        let samples = manifest
            .entries
            .iter()
            .map(|(img, lbl)| {
                let image = pgm::read_image(&dir.join(img))?;
                let labels = pgm::read_labels(&dir.join(lbl))?;
                if (image.height(), image.width()) != (labels.height(), labels.width()) {
                    return Err(Error::Shape(format!(
                        "{} and {} differ in size",
                        img.display(),
                        lbl.display()
                    )));
                }
                labels.validate(manifest.spec.num_classes)?;
                Ok(Sample { image, labels })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            num_classes: manifest.spec.num_classes,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: SceneSpec,
    /// Indices of scenes that hold fewer shapes than requested.
    pub shortfall: Vec<u64>,
    /// `(image, label)` paths relative to the manifest's directory.
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!("{MANIFEST_MAGIC} {}\n", self.version);
        let _ = writeln!(out, "height = {}", s.height);
        let _ = writeln!(out, "width = {}", s.width);
        let _ = writeln!(out, "num_classes = {}", s.num_classes);
        let _ = writeln!(out, "shapes_min = {}", s.shapes_min);
        let _ = writeln!(out, "shapes_max = {}", s.shapes_max);
        let _ = writeln!(out, "noise_sigma = {}", s.noise_sigma);
        let _ = writeln!(out, "seed = {}", s.seed);
        let shortfall: Vec<String> = self.shortfall.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "shortfall = {}", shortfall.join(" "));
        let _ = writeln!(out, "count = {}", self.entries.len());
        for (img, lbl) in &self.entries {
            let _ = writeln!(out, "{}\t{}", img.display(), lbl.display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n');
        let first = lines.next().unwrap_or("");
        let version = first
            .trim_end()
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::format(0, "missing manifest header"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(0, format!("unsupported manifest version {version}")));
        }
        offset += first.len();

        let mut spec = SceneSpec::default();
        let mut shortfall = Vec::new();
        let mut count = None;
        let mut entries = Vec::new();
        for raw in lines {
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                offset += raw.len();
                continue;
            }
            if let Some((img, lbl)) = line.split_once('\t') {
                entries.push((PathBuf::from(img), PathBuf::from(lbl)));
            } else {
                let (key, value) = line
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::format(offset, "expected `key = value` or a path pair"))?;
                let num = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| Error::format(offset, format!("bad value for {key}")))
                };
                match key {
                    "height" => spec.height = num(value)? as usize,
                    "width" => spec.width = num(value)? as usize,
                    "num_classes" => spec.num_classes = num(value)? as usize,
                    "shapes_min" => spec.shapes_min = num(value)? as usize,
                    "shapes_max" => spec.shapes_max = num(value)? as usize,
                    "seed" => spec.seed = num(value)?,
                    "count" => count = Some(num(value)? as usize),
                    "noise_sigma" => {
                        spec.noise_sigma = value
                            .parse()
                            .map_err(|_| Error::format(offset, "bad value for noise_sigma"))?
                    }
                    "shortfall" => {
                        shortfall = value
                            .split_whitespace()
                            .map(num)
                            .collect::<Result<_>>()?
                    }
                    other => return Err(Error::format(offset, format!("unknown key `{other}`"))),
                }
            }
            offset += raw.len();
        }
        if count != Some(entries.len()) {
            return Err(Error::format(
                text.len(),
                format!("count {count:?} does not match {} entries", entries.len()),
            ));
        }
        Ok(DatasetManifest {
            version,
            spec,
            shortfall,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Writes `n` scenes as PGM pairs plus a manifest into `dir`.
pub fn build_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n);
    let mut shortfall = Vec::new();
    for i in 0..n {
        let scene = generate_scene(spec, i as u64)?;
        if scene.shortfall() {
            shortfall.push(i as u64);
        }
        let img = PathBuf::from(format!("image_{i:05}.pgm"));
        let lbl = PathBuf::from(format!("label_{i:05}.pgm"));
        pgm::write_image(&dir.join(&img), &scene.image)?;
        pgm::write_labels(&dir.join(&lbl), &scene.labels)?;
        entries.push((img, lbl));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: *spec,
        shortfall,
        entries,
    };
    pgm::write_atomic(&dir.join(MANIFEST_NAME), manifest.to_text().as_bytes())?;
    Ok(manifest)
}
