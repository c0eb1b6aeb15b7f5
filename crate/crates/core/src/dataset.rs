//! Procedural labeled image corpus and its PNG + manifest storage.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

fn default_side() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.04
}
fn default_scale() -> [f64; 2] {
    [0.25, 0.45]
}
fn default_hue_jitter() -> f64 {
    0.06
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Amplitude of uniform background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Shape size range as a fraction of the image side.
    #[serde(default = "default_scale")]
    pub scale: [f64; 2],
    /// Maximum per-image deviation from the class hue, in turns.
    #[serde(default = "default_hue_jitter")]
    pub hue_jitter: f64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            side: default_side(),
            channels: default_channels(),
            num_classes,
            per_class,
            seed,
            noise: default_noise(),
            scale: default_scale(),
            hue_jitter: default_hue_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes and 1 image per class, got {} x {}",
                self.num_classes, self.per_class
            )));
        }
        if self.side < 4 {
            return Err(Error::InvalidArgument(format!("image side {} is too small", self.side)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("scale range {lo}..{hi} invalid")));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.5).contains(&self.hue_jitter) {
            return Err(Error::InvalidArgument(
                "noise and hue_jitter must lie in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

/// Shape families, assigned to classes round-robin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Disk,
    Rectangle,
    Stripes,
    Gradient,
    Checker,
    Ring,
    Cross,
    Triangle,
}

pub const FAMILIES: [Family; 8] = [
    Family::Disk,
    Family::Rectangle,
    Family::Stripes,
    Family::Gradient,
    Family::Checker,
    Family::Ring,
    Family::Cross,
    Family::Triangle,
];

pub fn family_of(class: usize) -> Family {
    FAMILIES[class % FAMILIES.len()]
}

/// RGB of a hue in turns at the given saturation and value.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(spec: &SyntheticSpec, class: usize, index: usize) -> Image {
    let mut r = rng::stream(spec.seed, &[rng::tag("dataset/image"), class as u64, index as u64]);
    let n = spec.side as f64;
    let u = |r: &mut rng::Stream, lo: f64, hi: f64| rng::uniform_range(r, lo, hi);

    let hue = class as f64 / spec.num_classes as f64 + u(&mut r, -spec.hue_jitter, spec.hue_jitter);
    let fg = hsv(hue, u(&mut r, 0.6, 0.95), u(&mut r, 0.75, 1.0));
    let bg = hsv(hue + 0.5, u(&mut r, 0.1, 0.4), u(&mut r, 0.1, 0.35));
    let size = u(&mut r, spec.scale[0], spec.scale[1]) * n;
    let margin = size.min(n / 2.0);
    let cx = u(&mut r, margin * 0.6, n - margin * 0.6);
    let cy = u(&mut r, margin * 0.6, n - margin * 0.6);
    let period = u(&mut r, 3.0, 7.0);
    let phase = u(&mut r, 0.0, period);
    let aspect = u(&mut r, 0.5, 1.5);
    let family = family_of(class);

    let mut im = Image::filled(spec.side, spec.side, spec.channels, 0.0);
    for y in 0..spec.side {
        for x in 0..spec.side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let half = size / 2.0;
            // coverage in [0, 1] of the foreground color
            let a = match family {
                Family::Disk => f64::from(dx * dx + dy * dy <= half * half),
                Family::Rectangle => f64::from(dx.abs() <= half * aspect && dy.abs() <= half / aspect),
                Family::Stripes => f64::from(((py + phase) / period).floor() as i64 % 2 == 0),
                Family::Gradient => ((px + aspect * py) / (n * (1.0 + aspect))).clamp(0.0, 1.0),
                Family::Checker => {
                    let (i, j) = (
                        ((px + phase) / period).floor() as i64,
                        ((py + phase) / period).floor() as i64,
                    );
                    f64::from((i + j).rem_euclid(2) == 0)
                }
                Family::Ring => {
                    let d2 = dx * dx + dy * dy;
                    f64::from(d2 <= half * half && d2 >= (half * 0.55) * (half * 0.55))
                }
                Family::Cross => {
                    let w = (half * 0.35).max(1.0);
                    f64::from((dx.abs() <= w && dy.abs() <= half) || (dy.abs() <= w && dx.abs() <= half))
                }
                Family::Triangle => f64::from(dy <= half && dy >= -half && dx.abs() <= (dy + half) * 0.5 * aspect),
            };
            for c in 0..spec.channels {
                let (f, b) = if spec.channels == 3 {
                    (fg[c], bg[c])
                } else {
                    (fg.iter().sum::<f64>() / 3.0, bg.iter().sum::<f64>() / 3.0)
                };
                let noise = spec.noise * (2.0 * rng::uniform(&mut r) - 1.0);
                *im.at_mut(y, x, c) = (a * f + (1.0 - a) * b + noise).clamp(0.0, 1.0);
            }
        }
    }
    im
}

/// Class-major corpus: all images of class 0, then class 1, and so on.
pub fn generate(spec: &SyntheticSpec) -> Result<LabeledImages> {
    spec.validate()?;
    let images: Vec<Image> = (0..spec.len())
        .into_par_iter()
        .map(|i| render(spec, i / spec.per_class, i % spec.per_class))
        .collect();
    let labels = (0..spec.len()).map(|i| i / spec.per_class).collect();
    Ok(LabeledImages { images, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub file: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: Option<SyntheticSpec>,
    pub items: Vec<ManifestItem>,
}

pub fn file_name(class: usize, index: usize) -> String {
    format!("class_{class}_idx_{index}.png")
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), image.width as u32, image.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format("png", format!("{}: {msg}", path.display()));
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Image::new(
        info.height as usize,
        info.width as usize,
        channels,
        buf.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Writes one PNG per image plus the manifest. Indices in file names count
/// within each label.
pub fn save_images(dir: &Path, set: &LabeledImages, spec: Option<&SyntheticSpec>) -> Result<Manifest> {
    if set.images.len() != set.labels.len() {
        return Err(Error::Dimension("labels and images differ in length".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let items: Vec<ManifestItem> = set
        .labels
        .iter()
        .map(|&label| {
            let idx = seen.entry(label).or_insert(0);
            let item = ManifestItem {
                file: file_name(label, *idx),
                label,
            };
            *idx += 1;
            item
        })
        .collect();
    items
        .par_iter()
        .zip(&set.images)
        .try_for_each(|(item, im)| write_png(&dir.join(&item.file), im))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.cloned(),
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format("manifest", format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

/// Loads images in manifest order.
pub fn load_images(dir: &Path) -> Result<(Manifest, LabeledImages)> {
    let m = read_manifest(dir)?;
    let images = m
        .items
        .par_iter()
        .map(|item| read_png(&dir.join(&item.file)))
        .collect::<Result<Vec<_>>>()?;
    let labels = m.items.iter().map(|i| i.label).collect();
    Ok((m, LabeledImages { images, labels }))
}

/// Paths of every file a saved corpus consists of, manifest first.
pub fn corpus_files(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    std::iter::once(dir.join(MANIFEST_FILE))
        .chain(manifest.items.iter().map(|i| dir.join(&i.file)))
        .collect()
}

/// A subset of `n` distinct indices drawn deterministically.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[rng::tag("dataset/sample")]);
    let mut idx = rng::sample_without_replacement(&mut r, len, n.min(len));
    idx.sort_unstable();
    idx
}
