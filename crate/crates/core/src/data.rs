//! Procedural RGB-D scenes: flat-shaded primitives on fronto-parallel
//! planes over a distant background, with occlusion-consistent depth and
//! tight box annotations.
//!
//! On-disk layout under a dataset directory:
//!
//! ```text
//! manifest.json          {"classes", "size", "seed", "train": [...], "test": [...]}
//! rgb/NNNNNN.png         8-bit RGB
//! depth/NNNNNN.png       16-bit grey, millimetres
//! labels/NNNNNN.txt      one "class cx cy w h" line per object, normalised
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::loss::GroundTruth;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
/// Objects whose visible area falls below this fraction of their full area
/// are rendered but not annotated.
pub const MIN_VISIBLE: f64 = 0.25;
/// Depth PNG units per metre.
pub const DEPTH_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Gradient,
    Noise,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Disc,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rect, Shape::Disc, Shape::Triangle];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[class % Self::ALL.len()]
    }
}

/// An object in pixel units: centre, half extents, plane depth in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub class: usize,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

impl ObjectSpec {
    /// Coverage test at pixel-centre coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Rect => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
            Shape::Disc => (dx / self.half_w).powi(2) + (dy / self.half_h).powi(2) <= 1.0,
            Shape::Triangle => {
                // Apex at the top centre, base along the bottom edge.
                let t = (dy + self.half_h) / (2.0 * self.half_h);
                (0.0..=1.0).contains(&t) && dx.abs() <= self.half_w * t
            }
        }
    }

    pub fn area(&self) -> f64 {
        let (w, h) = (self.half_w, self.half_h);
        match self.shape {
            Shape::Rect => 4.0 * w * h,
            Shape::Disc => PI * w * h,
            Shape::Triangle => 2.0 * w * h,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub background: Background,
    pub background_colors: [[f64; 3]; 2],
    pub background_depth: f64,
    pub lighting: f64,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class: usize,
    pub bbox: BBox,
}

impl From<Annotation> for GroundTruth {
    fn from(a: Annotation) -> Self {
        GroundTruth {
            class: a.class,
            bbox: a.bbox,
        }
    }
}

/// A rendered scene; `rgb` is `(1, size, size, 3)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Tensor,
    pub depth: DepthMap,
    pub annotations: Vec<Annotation>,
}

fn class_color<R: Rng>(class: usize, classes: usize, rng: &mut R) -> [f64; 3] {
    // Evenly spaced hues with saturation 0.75, value 0.9, plus jitter.
    let h = class as f64 / classes.max(1) as f64 * 6.0;
    let (s, v) = (0.75, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|ch| (ch + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0))
}

/// Draws 1 to 3 objects with random classes, shapes fixed by class.
pub fn random_scene(size: usize, classes: usize, seed: u64, stream: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let background = [Background::Gradient, Background::Noise, Background::Checker][rng.gen_range(0..3)];
    let muted = |rng: &mut ChaCha8Rng| {
        let base: f64 = rng.gen_range(0.2..0.7);
        [0, 1, 2].map(|_| (base + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0))
    };
    let background_colors = [muted(&mut rng), muted(&mut rng)];
    let background_depth = rng.gen_range(8.0..12.0);
    let lighting = rng.gen_range(0.75..1.0);
    let s = size as f64;
    let count = rng.gen_range(1..=3);
    let objects = (0..count)
        .map(|_| {
            let class = rng.gen_range(0..classes);
            let shape = Shape::for_class(class);
            let half_w = rng.gen_range(0.08..0.2) * s;
            let half_h = match shape {
                Shape::Disc => half_w,
                _ => half_w * rng.gen_range(0.7..1.4),
            };
            ObjectSpec {
                class,
                shape,
                cx: rng.gen_range(0.12..0.88) * s,
                cy: rng.gen_range(0.12..0.88) * s,
                half_w,
                half_h,
                depth: rng.gen_range(1.5..6.0),
                color: class_color(class, classes, &mut rng),
            }
        })
        .collect();
    SceneSpec {
        size,
        background,
        background_colors,
        background_depth,
        lighting,
        objects,
        seed: seed ^ stream.rotate_left(32),
    }
}

/// Painter's-algorithm render. Every pixel takes the colour and depth of
/// the nearest covering object, or of the background.
pub fn render(spec: &SceneSpec) -> Result<Sample> {
    let n = spec.size;
    if n == 0 {
        return Err(Error::InvalidArgument("scene size must be positive".into()));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
    let [c0, c1] = spec.background_colors;
    let mut rgb = vec![0.0; n * n * 3];
    let mut depth = vec![spec.background_depth; n * n];
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let px = match spec.background {
                Background::Gradient => {
                    let t = (x + y) as f64 / (2 * n).max(2) as f64;
                    [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
                }
                Background::Noise => {
                    let t: f64 = noise.gen();
                    [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t)
                }
                Background::Checker => {
                    if ((x * 8 / n) + (y * 8 / n)).is_multiple_of(2) {
                        c0
                    } else {
                        c1
                    }
                }
            };
            rgb[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&px);
        }
    }
    // Far to near; ties keep list order.
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].depth.total_cmp(&spec.objects[a].depth));
    for &k in &order {
        let o = &spec.objects[k];
        for y in 0..n {
            for x in 0..n {
                if o.contains(x as f64 + 0.5, y as f64 + 0.5) && o.depth <= depth[y * n + x] {
                    let i = y * n + x;
                    depth[i] = o.depth;
                    owner[i] = Some(k);
                    rgb[i * 3..i * 3 + 3].copy_from_slice(&o.color);
                }
            }
        }
    }
    for v in &mut rgb {
        *v = (*v * spec.lighting).clamp(0.0, 1.0);
    }

    let mut annotations = Vec::new();
    for (k, o) in spec.objects.iter().enumerate() {
        let (mut x0, mut y0, mut x1, mut y1, mut count) = (n, n, 0, 0, 0usize);
        for (i, _) in owner.iter().enumerate().filter(|(_, w)| **w == Some(k)) {
            let (y, x) = (i / n, i % n);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            count += 1;
        }
        if count == 0 || (count as f64) < MIN_VISIBLE * o.area() {
            continue;
        }
        let s = n as f64;
        annotations.push(Annotation {
            class: o.class,
            bbox: BBox::from_corners(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s),
        });
    }
    Ok(Sample {
        rgb: Tensor::new(&[1, n, n, 3], rgb)?,
        depth: DepthMap::new(n, n, depth)?,
        annotations,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub rgb: String,
    pub depth: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Manifest {
    pub fn records(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub count: usize,
    pub test_count: usize,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn labels_text(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        let b = a.bbox;
        let _ = writeln!(s, "{} {} {} {} {}", a.class, b.cx, b.cy, b.w, b.h);
    }
    s
}

fn write_sample(dir: &Path, stem: &str, sample: &Sample) -> Result<SampleRecord> {
    let n = sample.depth.width();
    let rec = SampleRecord {
        rgb: format!("rgb/{stem}.png"),
        depth: format!("depth/{stem}.png"),
        labels: format!("labels/{stem}.txt"),
    };
    let bytes: Vec<u8> = sample.rgb.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(n as u32, n as u32, bytes).expect("rgb extents");
    let path = dir.join(&rec.rgb);
    img.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mm: Vec<u16> = sample
        .depth
        .values()
        .iter()
        .map(|v| (v * DEPTH_SCALE).round().min(u16::MAX as f64) as u16)
        .collect();
    let dimg: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(n as u32, n as u32, mm).expect("depth extents");
    let path = dir.join(&rec.depth);
    dimg.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let path = dir.join(&rec.labels);
    std::fs::write(&path, labels_text(&sample.annotations)).map_err(|e| Error::io(&path, e))?;
    Ok(rec)
}

/// Renders `count` training and `test_count` test scenes. Scene `i` draws
/// from its own ChaCha stream of `seed`, so output is independent of
/// thread scheduling.
pub fn generate(dir: &Path, cfg: &GenConfig) -> Result<Manifest> {
    if cfg.count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if cfg.classes == 0 || cfg.size == 0 {
        return Err(Error::InvalidArgument("classes and size must be positive".into()));
    }
    for sub in ["rgb", "depth", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let total = cfg.count + cfg.test_count;
    let records = (0..total)
        .into_par_iter()
        .map(|i| {
            let scene = random_scene(cfg.size, cfg.classes, cfg.seed, i as u64);
            write_sample(dir, &format!("{i:06}"), &render(&scene)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train = records;
    let test = train.split_off(cfg.count);
    let manifest = Manifest {
        classes: cfg.classes,
        size: cfg.size,
        seed: cfg.seed,
        train,
        test,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let bad = |line: usize, why: &str| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(no + 1, "expected `class cx cy w h`"));
        }
        let class = f[0].parse().map_err(|_| bad(no + 1, "bad class id"))?;
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(no + 1, "bad number"))?;
        let bbox = BBox::new(v[0], v[1], v[2], v[3]);
        let (x0, y0, x1, y1) = bbox.corners();
        let eps = 1e-9;
        if !(bbox.w > 0.0 && bbox.h > 0.0 && x0 >= -eps && y0 >= -eps && x1 <= 1.0 + eps && y1 <= 1.0 + eps) {
            return Err(bad(no + 1, "box outside [0, 1]"));
        }
        out.push(Annotation { class, bbox });
    }
    Ok(out)
}

/// Loads one record, resizing to `size` when given (bilinear for RGB,
/// nearest for depth). RGB is scaled to `[0, 1]`, depth to metres.
pub fn load_record(dir: &Path, rec: &SampleRecord, size: Option<usize>) -> Result<Sample> {
    let rgb_path = dir.join(&rec.rgb);
    let depth_path = dir.join(&rec.depth);
    let mut rgb = open_image(&rgb_path)?.to_rgb8();
    let mut depth = match open_image(&depth_path)? {
        DynamicImage::ImageLuma16(b) => b,
        _ => {
            return Err(Error::Image {
                path: depth_path,
                reason: "depth must be a 16-bit single-channel PNG".into(),
            })
        }
    };
    if rgb.dimensions() != depth.dimensions() {
        return Err(Error::Data(format!(
            "{} is {:?} but {} is {:?}",
            rgb_path.display(),
            rgb.dimensions(),
            depth_path.display(),
            depth.dimensions()
        )));
    }
    if let Some(s) = size {
        let s = s as u32;
        if rgb.dimensions() != (s, s) {
            rgb = image::imageops::resize(&rgb, s, s, image::imageops::FilterType::Triangle);
            depth = image::imageops::resize(&depth, s, s, image::imageops::FilterType::Nearest);
        }
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    let values = depth.into_raw().into_iter().map(|v| v as f64 / DEPTH_SCALE).collect();
    let labels_path = dir.join(&rec.labels);
    let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    Ok(Sample {
        rgb: Tensor::new(&[1, h, w, 3], data)?,
        depth: DepthMap::new(h, w, values)?,
        annotations: parse_labels(&text, &labels_path)?,
    })
}

/// Loads a split in manifest order.
pub fn load_split(dir: &Path, split: Split, size: Option<usize>) -> Result<Vec<Sample>> {
    let m = read_manifest(dir)?;
    m.records(split).iter().map(|r| load_record(dir, r, size)).collect()
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
