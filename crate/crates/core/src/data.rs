//! Dataset ingestion and the synthetic domain-shift generator.
//!
//! On disk a dataset is `root/<class_name>/*.png|jpg` plus `root/split.tsv`
//! with rows `class_name<TAB>split`, `split ∈ {base, val, novel}`. An
//! optional `root/samples.tsv` (`class_name<TAB>file_name`) pins the sample
//! list; without it each class directory is listed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPLIT_FILE: &str = "split.tsv";
pub const SAMPLES_FILE: &str = "samples.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" => Ok(Split::Novel),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
    pub samples: Vec<PathBuf>,
}

/// Validated description of an on-disk dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
    /// `(height, width)` of the first sample, if any.
    pub image_size: Option<(usize, usize)>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Reads and validates `root/split.tsv` and the referenced samples.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref().to_path_buf();
    let split_path = root.join(SPLIT_FILE);
    if !split_path.is_file() {
        return Err(Error::MissingSplitFile(split_path));
    }
    let mut seen: HashSet<String> = HashSet::new();
    let mut classes = Vec::new();
    for (lineno, line) in fs::read_to_string(&split_path)?.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(name), Some(split), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::InvalidConfig(format!(
                "{}:{}: expected `class_name<TAB>split`",
                split_path.display(),
                lineno + 1
            )));
        };
        if !seen.insert(name.to_string()) {
            return Err(Error::OverlappingSplits(name.to_string()));
        }
        classes.push(ClassEntry {
            name: name.to_string(),
            split: split.trim().parse()?,
            samples: Vec::new(),
        });
    }

    let samples_path = root.join(SAMPLES_FILE);
    if samples_path.is_file() {
        let mut listed: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        for line in fs::read_to_string(&samples_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (class, file) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidConfig(format!("{}: malformed row `{line}`", samples_path.display()))
            })?;
            listed
                .entry(class.to_string())
                .or_default()
                .push(root.join(class).join(file));
        }
        for c in &mut classes {
            c.samples = listed.remove(&c.name).unwrap_or_default();
        }
    } else {
        for c in &mut classes {
            let dir = root.join(&c.name);
            if !dir.is_dir() {
                return Err(Error::MissingSample(dir));
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            files.sort();
            c.samples = files;
        }
    }
    for c in &classes {
        if let Some(missing) = c.samples.iter().find(|p| !p.is_file()) {
            return Err(Error::MissingSample(missing.clone()));
        }
    }
    let image_size = match classes.iter().flat_map(|c| c.samples.first()).next() {
        Some(p) => {
            let (w, h) = image::image_dimensions(p).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?;
            Some((h as usize, w as usize))
        }
        None => None,
    };
    Ok(DatasetManifest {
        root,
        classes,
        image_size,
    })
}

/// In-memory images (CHW, `f64`) with dense class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// `(height, width, channels)`
    pub shape: (usize, usize, usize),
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples of at most `per_class` per class, in original order.
    pub fn take_per_class(&self, per_class: usize) -> Self {
        let mut counts = vec![0; self.num_classes()];
        let mut out = Self {
            images: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
            shape: self.shape,
        };
        for (img, &y) in self.images.iter().zip(&self.labels) {
            if counts[y] < per_class {
                counts[y] += 1;
                out.images.push(img.clone());
                out.labels.push(y);
            }
        }
        out
    }
}

/// Per-channel standardization fitted on the base split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &LabeledImages) -> Self {
        let (h, w, c) = data.shape;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in &data.images {
            for ch in 0..c {
                for v in &img[ch * hw..(ch + 1) * hw] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (data.images.len() * hw).max(1) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let var = s / n - (m / n) * (m / n);
                var.max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Self {
            mean: mean.iter().map(|m| m / n).collect(),
            std,
        }
    }

    pub fn apply(&self, data: &mut LabeledImages) {
        let (h, w, _) = data.shape;
        let hw = h * w;
        for img in &mut data.images {
            for (ch, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
                img[ch * hw..(ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) / s);
            }
        }
    }
}

impl DatasetManifest {
    pub fn classes_in(&self, split: Split) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |c| c.split == split)
    }

    /// Decodes every sample of `split` into `[0, 1]` CHW images of the
    /// requested size, resizing bilinearly where needed.
    pub fn load_split(&self, split: Split, size: (usize, usize), channels: usize) -> Result<LabeledImages> {
        let (h, w) = size;
        let mut out = LabeledImages {
            images: Vec::new(),
            labels: Vec::new(),
            class_names: Vec::new(),
            shape: (h, w, channels),
        };
        for (label, class) in self.classes_in(split).enumerate() {
            out.class_names.push(class.name.clone());
            for path in &class.samples {
                out.images.push(load_image(path, size, channels)?);
                out.labels.push(label);
            }
        }
        Ok(out)
    }
}

/// Loads one image as CHW values in `[0, 1]`.
pub fn load_image(path: &Path, (h, w): (usize, usize), channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let resize = |i: image::DynamicImage| {
        if i.width() as usize == w && i.height() as usize == h {
            i
        } else {
            i.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
    };
    let img = resize(img);
    let hw = h * w;
    match channels {
        1 => Ok(img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
        3 => {
            let rgb = img.to_rgb8();
            let mut out = vec![0.0; 3 * hw];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    out[ch * hw + i] = p.0[ch] as f64 / 255.0;
                }
            }
            Ok(out)
        }
        c => Err(Error::InvalidConfig(format!("unsupported channel count {c}"))),
    }
}

/// Random horizontal flip and random crop with zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub flip: bool,
    pub crop_padding: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flip: true,
            crop_padding: 4,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            flip: false,
            crop_padding: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_padding == 0
    }

    pub fn apply(&self, img: &[f64], (h, w, c): (usize, usize, usize), rng: &mut impl Rng) -> Vec<f64> {
        let flip = self.flip && rng.random_bool(0.5);
        let p = self.crop_padding as i64;
        let (dy, dx) = if p > 0 {
            (
                rng.random_range(-p..=p) as isize,
                rng.random_range(-p..=p) as isize,
            )
        } else {
            (0, 0)
        };
        let mut out = vec![0.0; img.len()];
        for ch in 0..c {
            for i in 0..h {
                let si = i as isize + dy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let jj = if flip { w - 1 - j } else { j };
                    let sj = jj as isize + dx;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    out[(ch * h + i) * w + j] = img[(ch * h + si as usize) * w + sj as usize];
                }
            }
        }
        out
    }
}

/// Rendering style of the novel classes of a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainStyle {
    /// Filled glyph arrangements, like the base classes.
    ShapeComposition,
    /// Dense stripe or dot fields with no compositional structure.
    Texture,
    /// Glyph arrangements drawn as a dark contour over faint shading.
    Sketch,
}

impl DomainStyle {
    fn tag(self) -> &'static str {
        match self {
            DomainStyle::ShapeComposition => "shape",
            DomainStyle::Texture => "texture",
            DomainStyle::Sketch => "sketch",
        }
    }
}

/// Parameters of a synthetic dataset. Base classes are always filled glyph
/// arrangements; the novel classes use `domain_style`. Base images depend
/// only on the seed, so specs differing only in `domain_style` or
/// `num_novel_classes` share an identical base split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub domain_style: DomainStyle,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.05
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_base_classes: 8,
            num_novel_classes: 8,
            samples_per_class: 50,
            image_size: 32,
            domain_style: DomainStyle::Texture,
            noise: default_noise(),
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Glyph {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

const GLYPHS: [Glyph; 6] = [
    Glyph::Disk,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Cross,
    Glyph::Ring,
    Glyph::Bar,
];

/// Glyphs placed in distinct quadrant slots (0..4), sorted by slot.
type Arrangement = Vec<(usize, Glyph)>;

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes { angle: f64, period: f64 },
    Dots { count: usize },
    Checker { cell: f64 },
}

/// Deterministic seed for one independent stream.
fn stream_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b, c] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Unique glyph arrangements in a seed-determined order: base classes take
/// the first entries, novel glyph classes the following ones.
fn arrangement_pool(seed: u64, count: usize) -> Vec<Arrangement> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1, 0, 0));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=3);
        let mut slots = [0usize, 1, 2, 3];
        slots.shuffle(&mut rng);
        let mut arr: Arrangement = slots[..n]
            .iter()
            .map(|&s| (s, GLYPHS[rng.random_range(0..GLYPHS.len())]))
            .collect();
        arr.sort();
        if seen.insert(arr.clone()) {
            out.push(arr);
        }
    }
    out
}

fn texture_pool() -> Vec<Texture> {
    let stripes = |period: f64| {
        [0.0, 45.0, 90.0, 135.0]
            .into_iter()
            .map(move |angle| Texture::Stripes { angle, period })
    };
    let mut out: Vec<Texture> = stripes(5.0).collect();
    out.extend([12, 30, 60].map(|count| Texture::Dots { count }));
    out.extend(stripes(8.0));
    out.extend([2.0, 4.0].map(|cell| Texture::Checker { cell }));
    out.extend(stripes(3.0));
    out
}

/// Upper bound on novel classes for a style.
pub fn max_novel_classes(style: DomainStyle) -> usize {
    match style {
        DomainStyle::Texture => texture_pool().len(),
        _ => 256,
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, background: f64) -> Self {
        Self {
            size,
            px: vec![background; size * size],
        }
    }

    fn paint(&mut self, mut inside: impl FnMut(f64, f64) -> bool, value: f64) {
        let s = self.size;
        for i in 0..s {
            for j in 0..s {
                if inside(j as f64 + 0.5, i as f64 + 0.5) {
                    self.px[i * s + j] = value;
                }
            }
        }
    }
}

/// Signed-distance-like inside test of a glyph centred at the origin with
/// radius `r`; `outline` keeps only a band of width `stroke` at the border.
fn glyph_contains(glyph: Glyph, x: f64, y: f64, r: f64, outline: Option<f64>) -> bool {
    // distance inside the shape boundary (positive inside)
    let depth = match glyph {
        Glyph::Disk => r - (x * x + y * y).sqrt(),
        Glyph::Square => (r * 0.85) - x.abs().max(y.abs()),
        Glyph::Triangle => {
            // upward triangle with apex at -r and base at +0.8r
            let base = 0.8 * r;
            let half_w = |yy: f64| (yy + r) / (base + r) * r;
            let d_base = base - y;
            let d_apex = y + r;
            let d_side = half_w(y) - x.abs();
            d_base.min(d_apex).min(d_side * 0.8)
        }
        Glyph::Cross => {
            let arm = 0.3 * r;
            let h = (arm - y.abs()).min(r - x.abs());
            let v = (arm - x.abs()).min(r - y.abs());
            h.max(v)
        }
        Glyph::Ring => {
            let d = (x * x + y * y).sqrt();
            (r - d).min(d - 0.55 * r)
        }
        Glyph::Bar => (0.3 * r - y.abs()).min(r - x.abs()),
    };
    match outline {
        None => depth >= 0.0,
        Some(stroke) => depth >= 0.0 && depth < stroke,
    }
}

fn add_noise(px: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        let dist = Normal::new(0.0, sigma).expect("finite sigma");
        px.iter_mut().for_each(|v| *v += dist.sample(rng));
    }
}

fn render_arrangement(
    arr: &Arrangement,
    size: usize,
    outline: bool,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let s = size as f64;
    let mut canvas = Canvas::new(size, rng.random_range(0.0..0.2));
    for &(slot, glyph) in arr {
        let cx = if slot % 2 == 0 { 0.27 } else { 0.73 } * s + rng.random_range(-0.05..0.05) * s;
        let cy = if slot / 2 == 0 { 0.27 } else { 0.73 } * s + rng.random_range(-0.05..0.05) * s;
        let r = s * rng.random_range(0.15..0.2);
        let value = rng.random_range(0.65..1.0);
        if outline {
            // pencil-style: faint shading inside a dark contour
            let shade = value * rng.random_range(0.35..0.5);
            let stroke = s * rng.random_range(0.05..0.08);
            canvas.paint(|x, y| glyph_contains(glyph, x - cx, y - cy, r, None), shade);
            canvas.paint(
                |x, y| glyph_contains(glyph, x - cx, y - cy, r, Some(stroke)),
                value,
            );
        } else {
            canvas.paint(|x, y| glyph_contains(glyph, x - cx, y - cy, r, None), value);
        }
    }
    add_noise(&mut canvas.px, noise, rng);
    canvas.px
}

fn render_texture(tex: Texture, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let scale = s / 32.0;
    let lo = rng.random_range(0.0..0.2);
    let hi = rng.random_range(0.65..1.0);
    let mut canvas = Canvas::new(size, lo);
    match tex {
        Texture::Stripes { angle, period } => {
            let a = (angle + rng.random_range(-6.0..6.0)).to_radians();
            let period = period * scale * rng.random_range(0.92..1.08);
            let phase = rng.random_range(0.0..period);
            let (ca, sa) = (a.cos(), a.sin());
            canvas.paint(
                |x, y| ((x * ca + y * sa + phase).rem_euclid(period)) < period * 0.5,
                hi,
            );
        }
        Texture::Dots { count } => {
            let n = ((count as f64) * rng.random_range(0.85..1.15)) as usize;
            for _ in 0..n {
                let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let r = scale * rng.random_range(0.9..1.5);
                canvas.paint(|x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r, hi);
            }
        }
        Texture::Checker { cell } => {
            let cell = cell * scale * rng.random_range(0.92..1.08);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            canvas.paint(
                |x, y| {
                    (((x + ox) / cell).floor() as i64 + ((y + oy) / cell).floor() as i64).rem_euclid(2) == 0
                },
                hi,
            );
        }
    }
    add_noise(&mut canvas.px, noise, rng);
    canvas.px
}

fn save_gray(path: &Path, px: &[f64], size: usize) -> Result<()> {
    let bytes: Vec<u8> = px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, size as u32, size as u32, image::ColorType::L8).map_err(|source| {
        match source {
            image::ImageError::IoError(e) => Error::Io(e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        }
    })
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest.
/// Regenerating the same spec is byte-identical.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if spec.num_base_classes < 2 || spec.samples_per_class == 0 || spec.image_size < 8 {
        return Err(Error::InvalidConfig(
            "synthetic data needs ≥ 2 base classes, ≥ 1 sample per class and images ≥ 8 px".into(),
        ));
    }
    if spec.num_novel_classes > max_novel_classes(spec.domain_style) {
        return Err(Error::InvalidConfig(format!(
            "at most {} novel classes are available for {:?}",
            max_novel_classes(spec.domain_style),
            spec.domain_style
        )));
    }
    fs::create_dir_all(out_dir)?;

    let glyph_novel = spec.domain_style != DomainStyle::Texture;
    let pool = arrangement_pool(
        spec.seed,
        spec.num_base_classes + if glyph_novel { spec.num_novel_classes } else { 0 },
    );
    let textures = texture_pool();

    let mut split_rows = String::new();
    let mut sample_rows = String::new();
    let mut classes = Vec::new();
    let total = spec.num_base_classes + spec.num_novel_classes;
    for c in 0..total {
        let base = c < spec.num_base_classes;
        let (name, split, stream) = if base {
            (format!("base_{c:03}"), Split::Base, 0)
        } else {
            let k = c - spec.num_base_classes;
            let tag = spec.domain_style.tag();
            (
                format!("{tag}_{k:03}"),
                Split::Novel,
                1 + spec.domain_style as u64,
            )
        };
        let dir = out_dir.join(&name);
        fs::create_dir_all(&dir)?;
        let mut samples = Vec::with_capacity(spec.samples_per_class);
        for i in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, stream, c as u64, i as u64));
            let px = if base {
                render_arrangement(&pool[c], spec.image_size, false, spec.noise, &mut rng)
            } else {
                match spec.domain_style {
                    DomainStyle::Texture => render_texture(
                        textures[c - spec.num_base_classes],
                        spec.image_size,
                        spec.noise,
                        &mut rng,
                    ),
                    DomainStyle::Sketch => {
                        render_arrangement(&pool[c], spec.image_size, true, spec.noise, &mut rng)
                    }
                    DomainStyle::ShapeComposition => {
                        render_arrangement(&pool[c], spec.image_size, false, spec.noise, &mut rng)
                    }
                }
            };
            let file = format!("{i:04}.png");
            let path = dir.join(&file);
            save_gray(&path, &px, spec.image_size)?;
            sample_rows.push_str(&format!("{name}\t{file}\n"));
            samples.push(path);
        }
        split_rows.push_str(&format!("{name}\t{}\n", split.as_str()));
        classes.push(ClassEntry { name, split, samples });
    }
    fs::write(out_dir.join(SPLIT_FILE), split_rows)?;
    fs::write(out_dir.join(SAMPLES_FILE), sample_rows)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        classes,
        image_size: Some((spec.image_size, spec.image_size)),
    })
}
