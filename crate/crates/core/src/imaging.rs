//! Images, paired datasets, synthetic weather degradations and patch cropping.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Channel-major `[3, H, W]` tensor for the networks.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("image tensor shape")
    }

    /// Image from a `[3, H, W]` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid(format!("expected [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let d = t.data();
        if !t.is_finite() {
            return Err(Error::NonFinite {
                part: "restored image".into(),
            });
        }
        let mut pixels = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = d[c * hw + p].clamp(0.0, 1.0);
            }
        }
        Self::new(h, w, pixels)
    }

    /// Rounds every value to the nearest 8-bit level `k / 255`.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|v| (v * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let row = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + w * 3]);
        }
        Self::new(h, w, pixels)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Image(format!("{}: unexpanded palette", path.display())))
            }
        };
        let mut pixels = Vec::with_capacity(h * w * 3);
        for px in bytes.chunks(channels) {
            let rgb = if channels < 3 {
                [px[0]; 3]
            } else {
                [px[0], px[1], px[2]]
            };
            pixels.extend(rgb.iter().map(|v| *v as f64 / 255.0));
        }
        Self::new(h, w, pixels)
    }

    /// Writes an 8-bit RGB PNG (values rounded to the nearest level).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut encoder =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Image(e.to_string()))?;
        writer.finish().map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub degraded: Image,
    pub clean: Image,
    pub task_id: usize,
}

impl SamplePair {
    pub fn new(degraded: Image, clean: Image, task_id: usize) -> Result<Self> {
        if degraded.dims() != clean.dims() {
            return Err(Error::invalid(format!(
                "degraded {:?} and clean {:?} differ in size",
                degraded.dims(),
                clean.dims()
            )));
        }
        if task_id == 0 {
            return Err(Error::invalid("task ids start at 1"));
        }
        Ok(Self {
            degraded,
            clean,
            task_id,
        })
    }

    /// Same window cut from both images.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        Ok(Self {
            degraded: self.degraded.crop(top, left, size, size)?,
            clean: self.clean.crop(top, left, size, size)?,
            task_id: self.task_id,
        })
    }

    pub fn random_crop<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Self> {
        let (h, w) = self.degraded.dims();
        if size > h || size > w {
            return Err(Error::invalid(format!("patch {size} exceeds image {h}x{w}")));
        }
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        self.crop(top, left, size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Haze,
    Rain,
    Snow,
    Custom,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Haze => "haze",
            TaskKind::Rain => "rain",
            TaskKind::Snow => "snow",
            TaskKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pairs: Vec<SamplePair>,
    kind: TaskKind,
    split: Split,
}

impl Dataset {
    pub fn new(pairs: Vec<SamplePair>, kind: TaskKind, split: Split) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::invalid("dataset is empty"));
        };
        let t = first.task_id;
        if pairs.iter().any(|p| p.task_id != t) {
            return Err(Error::invalid("dataset mixes task ids"));
        }
        Ok(Self { pairs, kind, split })
    }

    pub fn pairs(&self) -> &[SamplePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn kind(&self) -> &TaskKind {
        &self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn task_id(&self) -> usize {
        self.pairs[0].task_id
    }

    pub fn with_task_id(mut self, task_id: usize) -> Result<Self> {
        if task_id == 0 {
            return Err(Error::invalid("task ids start at 1"));
        }
        self.pairs.iter_mut().for_each(|p| p.task_id = task_id);
        Ok(self)
    }

    /// Repeats pairs cyclically until the dataset holds `n` pairs (no-op when it
    /// already holds at least `n`).
    pub fn upsample_to(mut self, n: usize) -> Self {
        let base = self.pairs.len();
        for i in base..n {
            let p = self.pairs[i % base].clone();
            self.pairs.push(p);
        }
        self
    }

    /// Writes the on-disk layout: `degraded/`, `clean/` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("degraded"))?;
        fs::create_dir_all(dir.join("clean"))?;
        let mut names = Vec::with_capacity(self.pairs.len());
        for (i, p) in self.pairs.iter().enumerate() {
            let name = format!("{i:05}.png");
            p.degraded.save_png(&dir.join("degraded").join(&name))?;
            p.clean.save_png(&dir.join("clean").join(&name))?;
            names.push(name);
        }
        let manifest = Manifest {
            task_kind: self.kind.clone(),
            split: self.split,
            pairs: names,
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task_kind: TaskKind,
    pub split: Split,
    pub pairs: Vec<String>,
}

/// Loads a dataset directory given its `manifest.json` path (or the directory
/// itself). Pairs keep manifest order; pixels are normalized by 1/255. The task id
/// is 1 until reassigned with [`Dataset::with_task_id`].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path)
        .map_err(|_| Error::MissingFile(manifest_path.clone()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    if manifest.pairs.is_empty() {
        return Err(Error::MalformedManifest {
            path: manifest_path,
            reason: "no pairs listed".into(),
        });
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for name in &manifest.pairs {
        let dpath = root.join("degraded").join(name);
        let cpath = root.join("clean").join(name);
        for p in [&dpath, &cpath] {
            if !p.is_file() {
                return Err(Error::UnpairedImage(p.clone()));
            }
        }
        let degraded = Image::load_png(&dpath)?;
        let clean = Image::load_png(&cpath)?;
        if degraded.dims() != clean.dims() {
            return Err(Error::UnpairedImage(dpath));
        }
        pairs.push(SamplePair::new(degraded, clean, 1)?);
    }
    Dataset::new(pairs, manifest.task_kind, manifest.split)
}

/// Cuts all `size × size` windows on a `stride` grid, row by row.
pub fn crop_patches(img: &Image, size: usize, stride: usize) -> Result<Vec<Image>> {
    let (h, w) = img.dims();
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!("patch size {size} exceeds image {h}x{w}")));
    }
    let mut out = Vec::new();
    for top in (0..=h - size).step_by(stride) {
        for left in (0..=w - size).step_by(stride) {
            out.push(img.crop(top, left, size, size)?);
        }
    }
    Ok(out)
}

// ---- degradations ----------------------------------------------------------

/// Per-pixel scene depth used by the haze model.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthField {
    /// Horizontal ramp from 0 at the left column to 1 at the right column.
    pub fn ramp(height: usize, width: usize) -> Self {
        let denom = (width.max(2) - 1) as f64;
        let mut values = Vec::with_capacity(height * width);
        for _ in 0..height {
            values.extend((0..width).map(|x| x as f64 / denom));
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn constant(height: usize, width: usize, d: f64) -> Self {
        Self {
            height,
            width,
            values: vec![d; height * width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: f64,
    /// Defaults to [`DepthField::ramp`] when absent.
    pub depth: Option<DepthField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub streak_count: usize,
    pub angle_deg: f64,
    pub length_px: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnowParams {
    pub flake_count: usize,
    pub radius_range_px: (f64, f64),
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationParams {
    pub haze: HazeParams,
    pub rain: RainParams,
    pub snow: SnowParams,
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            haze: HazeParams {
                beta: 1.2,
                airlight: 0.9,
                depth: None,
            },
            rain: RainParams {
                streak_count: 30,
                angle_deg: 0.0,
                length_px: 10.0,
                intensity: 0.7,
            },
            snow: SnowParams {
                flake_count: 30,
                radius_range_px: (0.8, 2.0),
                opacity: 0.9,
            },
            seed: 0,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let h = &self.haze;
        if h.beta.is_nan() || h.beta < 0.0 {
            return Err(Error::invalid("haze.beta must be >= 0"));
        }
        if !unit(h.airlight) {
            return Err(Error::invalid("haze.airlight must lie in [0, 1]"));
        }
        if let Some(d) = &h.depth {
            if d.values.len() != d.height * d.width
                || d.values.iter().any(|v| !v.is_finite() || *v < 0.0)
            {
                return Err(Error::invalid("depth field must hold H*W finite values >= 0"));
            }
        }
        let r = &self.rain;
        if !unit(r.intensity) || !r.angle_deg.is_finite() || !(r.length_px >= 0.0) {
            return Err(Error::invalid("rain parameters out of range"));
        }
        let s = &self.snow;
        let (lo, hi) = s.radius_range_px;
        if !unit(s.opacity) || !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::invalid("snow parameters out of range"));
        }
        Ok(())
    }

    /// Random parameters of the kind used by the synthetic datasets.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            haze: HazeParams {
                beta: rng.random_range(0.8..2.0),
                airlight: rng.random_range(0.75..1.0),
                depth: None,
            },
            rain: RainParams {
                streak_count: rng.random_range(15..30),
                angle_deg: rng.random_range(-20.0..20.0),
                length_px: rng.random_range(6.0..14.0),
                intensity: rng.random_range(0.5..0.9),
            },
            snow: SnowParams {
                flake_count: rng.random_range(20..40),
                radius_range_px: (0.7, 2.2),
                opacity: rng.random_range(0.7..1.0),
            },
            seed: rng.random(),
        }
    }
}

/// Atmospheric scattering: `I = J·t + A·(1 − t)` with `t = exp(−β·d)`.
pub fn synthesize_haze(clean: &Image, p: &DegradationParams) -> Result<Image> {
    p.validate()?;
    let (h, w) = clean.dims();
    let ramp;
    let depth = match &p.haze.depth {
        Some(d) => {
            if (d.height, d.width) != (h, w) {
                return Err(Error::invalid(format!(
                    "depth field {}x{} does not match image {h}x{w}",
                    d.height, d.width
                )));
            }
            d
        }
        None => {
            ramp = DepthField::ramp(h, w);
            &ramp
        }
    };
    let a = p.haze.airlight;
    let beta = p.haze.beta;
    let mut pixels = clean.pixels().to_vec();
    for (i, px) in pixels.chunks_mut(3).enumerate() {
        let d = depth.values[i];
        let t = if d == 0.0 { 1.0 } else { (-beta * d).exp() };
        for v in px {
            *v = (*v * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, pixels)
}

/// One rain streak: a segment with a Gaussian cross-section.
#[derive(Clone, Debug, PartialEq)]
pub struct Streak {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub brightness: f64,
}

/// Cross-section width (standard deviation, px) of a rain streak.
pub const STREAK_SIGMA: f64 = 0.6;

pub fn rain_streaks(p: &DegradationParams, h: usize, w: usize) -> Vec<Streak> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5241_494e);
    (0..p.rain.streak_count)
        .map(|_| {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let angle = (p.rain.angle_deg + rng.random_range(-4.0..4.0)).to_radians();
            let len = p.rain.length_px * rng.random_range(0.7..1.3);
            let (dx, dy) = (angle.sin() * len / 2.0, angle.cos() * len / 2.0);
            Streak {
                x0: cx - dx,
                y0: cy - dy,
                x1: cx + dx,
                y1: cy + dy,
                brightness: rng.random_range(0.6..1.0),
            }
        })
        .collect()
}

fn segment_distance(s: &Streak, px: f64, py: f64) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - s.x0) * vx + (py - s.y0) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (s.x0 + t * vx, s.y0 + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Additive oriented streak layer: `I = clamp(J + intensity · S)`, where `S` is the
/// per-pixel maximum of the streak profiles.
pub fn synthesize_rain(clean: &Image, p: &DegradationParams) -> Result<Image> {
    p.validate()?;
    let (h, w) = clean.dims();
    if h == 0 || w == 0 {
        return Err(Error::invalid("zero-size image"));
    }
    let streaks = rain_streaks(p, h, w);
    let mut pixels = clean.pixels().to_vec();
    if streaks.is_empty() || p.rain.intensity == 0.0 {
        return Image::new(h, w, pixels);
    }
    let reach = 3.0 * STREAK_SIGMA;
    let mut layer = vec![0.0f64; h * w];
    for s in &streaks {
        let xmin = (s.x0.min(s.x1) - reach).floor().max(0.0) as usize;
        let xmax = ((s.x0.max(s.x1) + reach).ceil().max(0.0) as usize).min(w - 1);
        let ymin = (s.y0.min(s.y1) - reach).floor().max(0.0) as usize;
        let ymax = ((s.y0.max(s.y1) + reach).ceil().max(0.0) as usize).min(h - 1);
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let d = segment_distance(s, x as f64 + 0.5, y as f64 + 0.5);
                let v = s.brightness * (-(d * d) / (2.0 * STREAK_SIGMA * STREAK_SIGMA)).exp();
                let cell = &mut layer[y * w + x];
                *cell = cell.max(v);
            }
        }
    }
    for (i, px) in pixels.chunks_mut(3).enumerate() {
        let add = p.rain.intensity * layer[i];
        for v in px {
            *v = (*v + add).clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, pixels)
}

/// One snow flake: a soft-edged disc.
#[derive(Clone, Debug, PartialEq)]
pub struct Flake {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Flake {
    /// Coverage of the pixel centred at `(px, py)`: 1 inside, 0 outside, linear across
    /// a one-pixel rim.
    pub fn coverage(&self, px: f64, py: f64) -> f64 {
        let d = ((px - self.cx).powi(2) + (py - self.cy).powi(2)).sqrt();
        (self.radius + 0.5 - d).clamp(0.0, 1.0)
    }
}

/// Snow intensity composited onto the scene.
pub const SNOW_VALUE: f64 = 1.0;

pub fn snow_flakes(p: &DegradationParams, h: usize, w: usize) -> Vec<Flake> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x534e_4f57);
    let (lo, hi) = p.snow.radius_range_px;
    (0..p.snow.flake_count)
        .map(|_| Flake {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            radius: if hi > lo { rng.random_range(lo..hi) } else { lo },
        })
        .collect()
}

/// Snow-mask composition `I = M·s + J·(1 − M)`, with `M = opacity · max_k coverage_k`.
pub fn synthesize_snow(clean: &Image, p: &DegradationParams) -> Result<Image> {
    p.validate()?;
    let (h, w) = clean.dims();
    if h == 0 || w == 0 {
        return Err(Error::invalid("zero-size image"));
    }
    let flakes = snow_flakes(p, h, w);
    let mut pixels = clean.pixels().to_vec();
    if flakes.is_empty() || p.snow.opacity == 0.0 {
        return Image::new(h, w, pixels);
    }
    let mut mask = vec![0.0f64; h * w];
    for f in &flakes {
        let r = f.radius + 1.0;
        let x0 = (f.cx - r).floor().max(0.0) as usize;
        let x1 = ((f.cx + r).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (f.cy - r).floor().max(0.0) as usize;
        let y1 = ((f.cy + r).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let c = f.coverage(x as f64 + 0.5, y as f64 + 0.5);
                let cell = &mut mask[y * w + x];
                *cell = cell.max(c);
            }
        }
    }
    for (i, px) in pixels.chunks_mut(3).enumerate() {
        let m = p.snow.opacity * mask[i];
        for v in px {
            *v = (m * SNOW_VALUE + *v * (1.0 - m)).clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, pixels)
}

pub fn degrade(kind: &TaskKind, clean: &Image, p: &DegradationParams) -> Result<Image> {
    match kind {
        TaskKind::Haze => synthesize_haze(clean, p),
        TaskKind::Rain => synthesize_rain(clean, p),
        TaskKind::Snow => synthesize_snow(clean, p),
        TaskKind::Custom => Err(Error::invalid("custom tasks have no synthesizer")),
    }
}

// ---- procedural scenes -----------------------------------------------------

/// Smooth gradient background with a few soft-edged shapes and a faint texture.
pub fn procedural_clean<R: Rng>(rng: &mut R, height: usize, width: usize) -> Result<Image> {
    let color = |rng: &mut R| -> [f64; 3] {
        [
            rng.random_range(0.1..0.8),
            rng.random_range(0.1..0.8),
            rng.random_range(0.1..0.8),
        ]
    };
    let c0 = color(rng);
    let c1 = color(rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut pixels = vec![0.0; height * width * 3];
    let diag = ((height * height + width * width) as f64).sqrt();
    for y in 0..height {
        for x in 0..width {
            let t = (0.5 + (gx * (x as f64 - width as f64 / 2.0) + gy * (y as f64 - height as f64 / 2.0)) / diag)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[(y * width + x) * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = color(rng);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let rx = rng.random_range(2.0..(width as f64 / 3.0).max(3.0));
        let ry = rng.random_range(2.0..(height as f64 / 3.0).max(3.0));
        let round = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if round {
                    1.0 - (dx * dx + dy * dy).sqrt()
                } else {
                    1.0 - dx.abs().max(dy.abs())
                };
                let a = (inside * rx.min(ry)).clamp(0.0, 1.0);
                if a > 0.0 {
                    let i = (y * width + x) * 3;
                    for c in 0..3 {
                        pixels[i + c] = pixels[i + c] * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }
    let fx: f64 = rng.random_range(0.2..0.9);
    let fy: f64 = rng.random_range(0.2..0.9);
    for y in 0..height {
        for x in 0..width {
            let tex = 0.03 * ((x as f64 * fx).sin() * (y as f64 * fy).cos());
            for c in 0..3 {
                let v = &mut pixels[(y * width + x) * 3 + c];
                *v = (*v + tex).clamp(0.05, 0.95);
            }
        }
    }
    Image::new(height, width, pixels)
}

/// Deterministic synthetic dataset: procedural clean scenes degraded by `kind`,
/// quantized to 8-bit levels exactly as if round-tripped through PNG.
pub fn synthetic_dataset(
    kind: &TaskKind,
    count: usize,
    size: usize,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    let clean: Vec<Image> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt(split));
        (0..count)
            .map(|_| procedural_clean(&mut rng, size, size))
            .collect::<Result<_>>()?
    };
    degrade_all(kind, clean, split, seed)
}

/// Degrades externally supplied clean images with the synthetic weather models.
pub fn degrade_all(kind: &TaskKind, clean: Vec<Image>, split: Split, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt(split) ^ kind_salt(kind));
    let mut pairs = Vec::with_capacity(clean.len());
    for img in clean {
        let params = DegradationParams::sample(&mut rng);
        let degraded = degrade(kind, &img, &params)?.quantized();
        pairs.push(SamplePair::new(degraded, img.quantized(), 1)?);
    }
    Dataset::new(pairs, kind.clone(), split)
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00,
        Split::Test => 0x7465_7374_0000,
    }
}

fn kind_salt(kind: &TaskKind) -> u64 {
    match kind {
        TaskKind::Haze => 0x11,
        TaskKind::Rain => 0x22,
        TaskKind::Snow => 0x33,
        TaskKind::Custom => 0x44,
    }
}
