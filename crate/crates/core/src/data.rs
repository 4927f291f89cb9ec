//! Grouped datasets with controllable spurious correlations.
//!
//! A sample carries a label `y` and an attribute `z`; the pair `(y, z)` is its
//! group. The synthetic generator encodes the class only in a foreground shape
//! and the attribute only in the configured spurious channel, so the two can be
//! decorrelated at evaluation time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use super_autograd::Tensor;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Schema(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

/// Three-channel image, channel-major (`[3, H, W]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for c in 0..3 {
            data[c * hw..(c + 1) * hw].fill(rgb[c]);
        }
        Image { height, width, data }
    }

    fn set(&mut self, i: usize, j: usize, rgb: [f64; 3]) {
        let hw = self.height * self.width;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * hw + i * self.width + j] = *v;
        }
    }

    /// Stack images into an `[N, 3, H, W]` tensor.
    pub fn batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
        let mut data = Vec::new();
        let mut n = 0;
        let mut hw = (0, 0);
        for img in images {
            if n == 0 {
                hw = (img.height, img.width);
            }
            assert_eq!(hw, (img.height, img.width), "images in a batch must share H×W");
            data.extend_from_slice(&img.data);
            n += 1;
        }
        Tensor::new(vec![n, 3, hw.0, hw.1], data)
    }
}

/// Binary `H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub attribute: usize,
    pub split: Split,
    pub foreground_mask: Option<Mask>,
}

impl SampleRecord {
    pub fn group(&self) -> (usize, usize) {
        (self.label, self.attribute)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub split: Split,
    pub label: usize,
    pub attribute: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedDataset {
    pub records: Vec<SampleRecord>,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub group_counts: BTreeMap<GroupKey, usize>,
}

fn is_alphanumeric_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric())
}

impl GroupedDataset {
    /// Validates records against the name lists and derives group counts.
    pub fn new(records: Vec<SampleRecord>, class_names: Vec<String>, attribute_names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !is_alphanumeric_id(&r.id) {
                return Err(Error::Schema(format!("id `{}` is not alphanumeric", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Schema(format!("duplicate id `{}`", r.id)));
            }
            if r.label >= class_names.len() {
                return Err(Error::OutOfRange { what: "label", value: r.label, limit: class_names.len() });
            }
            if r.attribute >= attribute_names.len() {
                return Err(Error::OutOfRange { what: "attribute", value: r.attribute, limit: attribute_names.len() });
            }
            if let Some(m) = &r.foreground_mask {
                if (m.height, m.width) != (r.image.height, r.image.width) {
                    return Err(Error::Shape(format!(
                        "mask of `{}` is {}x{}, image is {}x{}",
                        r.id, m.height, m.width, r.image.height, r.image.width
                    )));
                }
            }
        }
        let group_counts = count_groups(&records);
        Ok(GroupedDataset { records, class_names, attribute_names, group_counts })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Common image size, if the dataset is nonempty.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| (r.image.height, r.image.width))
    }
}

fn count_groups(records: &[SampleRecord]) -> BTreeMap<GroupKey, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts
            .entry(GroupKey { split: r.split, label: r.label, attribute: r.attribute })
            .or_insert(0) += 1;
    }
    counts
}

/// Group counts ordered by `(split, label, attribute)`.
pub fn group_table(ds: &GroupedDataset) -> Vec<(GroupKey, usize)> {
    count_groups(&ds.records).into_iter().collect()
}

/// Render the group table as aligned text.
pub fn format_group_table(ds: &GroupedDataset) -> String {
    let mut out = String::from("split  label             attribute         count\n");
    for (k, n) in group_table(ds) {
        let label = ds.class_names.get(k.label).map(String::as_str).unwrap_or("?");
        let attr = ds.attribute_names.get(k.attribute).map(String::as_str).unwrap_or("?");
        out.push_str(&format!("{:<6} {:<17} {:<17} {}\n", k.split.as_str(), label, attr, n));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpuriousMode {
    /// Whole background takes the attribute colour.
    BackgroundColor,
    /// A small patch of attribute colour in the top-left corner.
    CornerPatch,
    /// The foreground shape itself is tinted with the attribute colour.
    ForegroundTint,
}

impl SpuriousMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SpuriousMode::BackgroundColor => "background_color",
            SpuriousMode::CornerPatch => "corner_patch",
            SpuriousMode::ForegroundTint => "foreground_tint",
        }
    }
}

impl FromStr for SpuriousMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background_color" => Ok(SpuriousMode::BackgroundColor),
            "corner_patch" => Ok(SpuriousMode::CornerPatch),
            "foreground_tint" => Ok(SpuriousMode::ForegroundTint),
            other => Err(Error::InvalidSpec { field: "spurious_mode", reason: format!("unknown mode `{other}`") }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpuriousSpec {
    pub n_classes: usize,
    pub n_attributes: usize,
    /// Fraction of each training class paired with its majority attribute.
    pub correlation_ratio: f64,
    pub train_per_class: usize,
    pub val_per_group: usize,
    pub test_per_group: usize,
    pub image_size: usize,
    pub spurious_mode: SpuriousMode,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpuriousSpec {
    fn default() -> Self {
        SpuriousSpec {
            n_classes: 2,
            n_attributes: 2,
            correlation_ratio: 0.95,
            train_per_class: 1000,
            val_per_group: 100,
            test_per_group: 200,
            image_size: 16,
            spurious_mode: SpuriousMode::BackgroundColor,
            noise: 0.05,
            seed: 0,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "n_classes",
    "n_attributes",
    "correlation_ratio",
    "train_per_class",
    "val_per_group",
    "test_per_group",
    "image_size",
    "spurious_mode",
    "noise",
    "seed",
];

impl SpuriousSpec {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(SPEC_KEYS)?;
        let d = SpuriousSpec::default();
        let spec = SpuriousSpec {
            n_classes: kv.parse_or("n_classes", d.n_classes)?,
            n_attributes: kv.parse_or("n_attributes", d.n_attributes)?,
            correlation_ratio: kv.parse_or("correlation_ratio", d.correlation_ratio)?,
            train_per_class: kv.parse_or("train_per_class", d.train_per_class)?,
            val_per_group: kv.parse_or("val_per_group", d.val_per_group)?,
            test_per_group: kv.parse_or("test_per_group", d.test_per_group)?,
            image_size: kv.parse_or("image_size", d.image_size)?,
            spurious_mode: match kv.get("spurious_mode") {
                Some(m) => m.parse()?,
                None => d.spurious_mode,
            },
            noise: kv.parse_or("noise", d.noise)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("n_classes", self.n_classes);
        kv.set("n_attributes", self.n_attributes);
        kv.set("correlation_ratio", self.correlation_ratio);
        kv.set("train_per_class", self.train_per_class);
        kv.set("val_per_group", self.val_per_group);
        kv.set("test_per_group", self.test_per_group);
        kv.set("image_size", self.image_size);
        kv.set("spurious_mode", self.spurious_mode.as_str());
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::InvalidSpec { field, reason: reason.to_string() });
        if !(0.0..=1.0).contains(&self.correlation_ratio) {
            return bad("correlation_ratio", &format!("{} is outside [0, 1]", self.correlation_ratio));
        }
        if self.n_classes < 2 || self.n_classes > SHAPES.len() {
            return bad("n_classes", &format!("must be in [2, {}]", SHAPES.len()));
        }
        if self.n_attributes < 1 || self.n_attributes > 8 {
            return bad("n_attributes", "must be in [1, 8]");
        }
        if self.image_size < 16 {
            return bad("image_size", "must be at least 16");
        }
        if self.val_per_group == 0 {
            return bad("val_per_group", "every validation group would be empty");
        }
        if self.test_per_group == 0 {
            return bad("test_per_group", "every test group would be empty");
        }
        if self.train_per_class == 0 {
            return bad("train_per_class", "training split would be empty");
        }
        if self.n_attributes < 2 && self.minority_per_class() > 0 {
            return bad("n_attributes", "minority pairings need at least two attributes");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a nonnegative number");
        }
        Ok(())
    }

    pub fn majority_per_class(&self) -> usize {
        (self.correlation_ratio * self.train_per_class as f64).round() as usize
    }

    pub fn minority_per_class(&self) -> usize {
        self.train_per_class - self.majority_per_class()
    }

    /// Attribute paired with `label` in the majority of training samples.
    pub fn majority_attribute(&self, label: usize) -> usize {
        label % self.n_attributes
    }
}

// 5×5 glyphs, one per class.
const SHAPES: [(&str, [&str; 5]); 8] = [
    ("plus", ["..#..", "..#..", "#####", "..#..", "..#.."]),
    ("cross", ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ("frame", ["#####", "#...#", "#...#", "#...#", "#####"]),
    ("diamond", ["..#..", ".###.", "#####", ".###.", "..#.."]),
    ("hbars", ["#####", ".....", "#####", ".....", "#####"]),
    ("vbars", ["#.#.#", "#.#.#", "#.#.#", "#.#.#", "#.#.#"]),
    ("tee", ["#####", "..#..", "..#..", "..#..", "..#.."]),
    ("ell", ["#....", "#....", "#....", "#....", "#####"]),
];

const FOREGROUND_NEUTRAL: [f64; 3] = [0.92, 0.92, 0.92];
const BACKGROUND_NEUTRAL: [f64; 3] = [0.45, 0.45, 0.45];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn attribute_color(attribute: usize, n_attributes: usize) -> [f64; 3] {
    hsv_to_rgb(attribute as f64 / n_attributes.max(1) as f64, 0.75, 0.8)
}

pub fn class_name(label: usize) -> &'static str {
    SHAPES[label].0
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn split_code(split: Split) -> &'static str {
    match split {
        Split::Train => "tr",
        Split::Val => "va",
        Split::Test => "te",
    }
}

fn render(spec: &SpuriousSpec, label: usize, attribute: usize, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let size = spec.image_size;
    let scale = (size / 8).max(1);
    let glyph = 5 * scale;
    let color = attribute_color(attribute, spec.n_attributes);
    let patch = (size / 4).max(2);

    let (background, foreground) = match spec.spurious_mode {
        SpuriousMode::BackgroundColor => (color, FOREGROUND_NEUTRAL),
        SpuriousMode::CornerPatch => (BACKGROUND_NEUTRAL, FOREGROUND_NEUTRAL),
        SpuriousMode::ForegroundTint => (BACKGROUND_NEUTRAL, color),
    };
    let mut img = Image::filled(size, size, background);
    if spec.spurious_mode == SpuriousMode::CornerPatch {
        for i in 0..patch {
            for j in 0..patch {
                img.set(i, j, color);
            }
        }
    }

    // Top-left corner of the glyph, at least one pixel from the border and clear of the patch.
    let (top, left) = loop {
        let top = rng.random_range(1..=size - glyph - 1);
        let left = rng.random_range(1..=size - glyph - 1);
        let clear = spec.spurious_mode != SpuriousMode::CornerPatch || top > patch || left > patch;
        if clear {
            break (top, left);
        }
    };

    let mut mask = Mask { height: size, width: size, data: vec![false; size * size] };
    for (gi, row) in SHAPES[label].1.iter().enumerate() {
        for (gj, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            for di in 0..scale {
                for dj in 0..scale {
                    let (i, j) = (top + gi * scale + di, left + gj * scale + dj);
                    img.set(i, j, foreground);
                    mask.data[i * size + j] = true;
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in img.data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in img.data.iter_mut() {
        *v = quantize(*v);
    }
    (img, mask)
}

/// Deterministic synthetic dataset for `spec`.
///
/// Training classes realise the correlation ratio exactly up to rounding;
/// validation and test are group-balanced over the full label × attribute grid.
pub fn generate_synthetic(spec: &SpuriousSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let mut plan: Vec<(Split, usize, usize)> = Vec::new();
    let mut minority_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    minority_rng.set_stream(u64::MAX);
    for y in 0..spec.n_classes {
        let major = spec.majority_attribute(y);
        for _ in 0..spec.majority_per_class() {
            plan.push((Split::Train, y, major));
        }
        for _ in 0..spec.minority_per_class() {
            let pick = minority_rng.random_range(0..spec.n_attributes - 1);
            let attr = if pick >= major { pick + 1 } else { pick };
            plan.push((Split::Train, y, attr));
        }
    }
    for (split, per_group) in [(Split::Val, spec.val_per_group), (Split::Test, spec.test_per_group)] {
        for y in 0..spec.n_classes {
            for z in 0..spec.n_attributes {
                for _ in 0..per_group {
                    plan.push((split, y, z));
                }
            }
        }
    }

    let mut counters = BTreeMap::new();
    let records = plan
        .into_iter()
        .enumerate()
        .map(|(stream, (split, label, attribute))| {
            let idx = counters.entry(split).or_insert(0usize);
            let id = format!("{}{:06}", split_code(split), *idx);
            *idx += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream as u64);
            let (image, mask) = render(spec, label, attribute, &mut rng);
            SampleRecord { id, image, label, attribute, split, foreground_mask: Some(mask) }
        })
        .collect();

    let class_names = (0..spec.n_classes).map(|y| class_name(y).to_string()).collect();
    let attribute_names = (0..spec.n_attributes)
        .map(|z| match spec.spurious_mode {
            SpuriousMode::BackgroundColor => format!("bg{z}"),
            SpuriousMode::CornerPatch => format!("patch{z}"),
            SpuriousMode::ForegroundTint => format!("tint{z}"),
        })
        .collect();
    GroupedDataset::new(records, class_names, attribute_names)
}

pub const METADATA_HEADER: [&str; 6] = ["id", "filename", "label", "attribute", "split", "mask_filename"];
const INFO_FILE: &str = "dataset.info";

pub fn save_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let hw = img.height * img.width;
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for i in 0..img.height {
        for j in 0..img.width {
            let px = std::array::from_fn(|c| (img.data[c * hw + i * img.width + j].clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_png_rgb(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let rgb = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (j, i, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + i as usize * w + j as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

fn save_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask.data.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw).expect("mask dimensions");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_png_mask(path: &Path) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let gray = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    Ok(Mask {
        height: gray.height() as usize,
        width: gray.width() as usize,
        data: gray.pixels().map(|p| p.0[0] >= 128).collect(),
    })
}

/// Write `metadata.csv`, `images/`, `masks/` and a small `dataset.info` with the name lists.
pub fn save_dataset(ds: &GroupedDataset, root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(root.join(sub)).map_err(Error::io(root.join(sub)))?;
    }
    let meta_path = root.join("metadata.csv");
    let mut w = csv::Writer::from_path(&meta_path).map_err(|source| Error::Csv { path: meta_path.clone(), source })?;
    let csv_err = |source| Error::Csv { path: meta_path.clone(), source };
    w.write_record(METADATA_HEADER).map_err(csv_err)?;
    for r in &ds.records {
        let filename = format!("images/{}.png", r.id);
        save_png_rgb(&root.join(&filename), &r.image)?;
        let mask_filename = match &r.foreground_mask {
            Some(m) => {
                let f = format!("masks/{}.png", r.id);
                save_png_mask(&root.join(&f), m)?;
                f
            }
            None => String::new(),
        };
        w.write_record([
            r.id.as_str(),
            &filename,
            &r.label.to_string(),
            &r.attribute.to_string(),
            r.split.as_str(),
            &mask_filename,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(&meta_path))?;

    let mut info = KeyValues::default();
    info.set("class_names", ds.class_names.join("|"));
    info.set("attribute_names", ds.attribute_names.join("|"));
    fs::write(root.join(INFO_FILE), info.to_text()).map_err(Error::io(root.join(INFO_FILE)))
}

/// Inverse of [`save_dataset`]. Without `dataset.info`, names are inferred from the largest ids.
pub fn load_dataset(root: &Path) -> Result<GroupedDataset> {
    let meta_path = root.join("metadata.csv");
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path));
    }
    let csv_err = |source| Error::Csv { path: meta_path.clone(), source };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&meta_path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != METADATA_HEADER {
        return Err(Error::Schema(format!(
            "metadata header is `{}`, expected `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            METADATA_HEADER.join(",")
        )));
    }
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_usize = |i: usize, what: &str| {
            field(i)
                .parse::<usize>()
                .map_err(|_| Error::Schema(format!("row {}: bad {what} `{}`", row + 1, field(i))))
        };
        let image = load_png_rgb(&root.join(field(1)))?;
        let mask = match field(5) {
            "" => None,
            f => Some(load_png_mask(&root.join(f))?),
        };
        records.push(SampleRecord {
            id: field(0).to_string(),
            image,
            label: parse_usize(2, "label")?,
            attribute: parse_usize(3, "attribute")?,
            split: field(4).parse()?,
            foreground_mask: mask,
        });
    }

    let names = |key: &str, n: usize, prefix: &str| -> Result<Vec<String>> {
        let info_path = root.join(INFO_FILE);
        if info_path.exists() {
            let text = fs::read_to_string(&info_path).map_err(Error::io(&info_path))?;
            let kv = KeyValues::parse(&text)?;
            if let Some(v) = kv.get(key) {
                return Ok(v.split('|').map(str::to_string).collect());
            }
        }
        Ok((0..n).map(|i| format!("{prefix}{i}")).collect())
    };
    let n_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let n_attrs = records.iter().map(|r| r.attribute + 1).max().unwrap_or(0);
    let class_names = names("class_names", n_classes, "class")?;
    let attribute_names = names("attribute_names", n_attrs, "attr")?;
    if let Some((h, w)) = records.first().map(|r| (r.image.height, r.image.width)) {
        if let Some(r) = records.iter().find(|r| (r.image.height, r.image.width) != (h, w)) {
            return Err(Error::Shape(format!("image `{}` differs from the dataset's {h}x{w}", r.id)));
        }
    }
    GroupedDataset::new(records, class_names, attribute_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SpuriousSpec {
        SpuriousSpec { train_per_class: 40, val_per_group: 3, test_per_group: 4, correlation_ratio: 0.9, ..Default::default() }
    }

    #[test]
    fn ratio_arithmetic_matches_spec_example() {
        let spec = SpuriousSpec { correlation_ratio: 0.95, train_per_class: 1000, ..Default::default() };
        assert_eq!(spec.majority_per_class(), 950);
        assert_eq!(spec.minority_per_class(), 50);
    }

    #[test]
    fn rejects_ratio_outside_unit_interval() {
        for rho in [-0.1, 1.3, f64::NAN] {
            let err = generate_synthetic(&SpuriousSpec { correlation_ratio: rho, ..small_spec() }).unwrap_err();
            assert!(err.to_string().contains("correlation_ratio"), "{err}");
        }
    }

    #[test]
    fn rejects_empty_eval_groups() {
        assert!(generate_synthetic(&SpuriousSpec { val_per_group: 0, ..small_spec() }).is_err());
        assert!(generate_synthetic(&SpuriousSpec { test_per_group: 0, ..small_spec() }).is_err());
    }

    #[test]
    fn perfect_correlation_leaves_minority_train_groups_empty() {
        let ds = generate_synthetic(&SpuriousSpec { correlation_ratio: 1.0, ..small_spec() }).unwrap();
        let counts = &ds.group_counts;
        assert_eq!(counts.get(&GroupKey { split: Split::Train, label: 0, attribute: 1 }), None);
        assert_eq!(counts.get(&GroupKey { split: Split::Train, label: 1, attribute: 0 }), None);
        for split in [Split::Val, Split::Test] {
            for y in 0..2 {
                for z in 0..2 {
                    assert!(counts[&GroupKey { split, label: y, attribute: z }] > 0);
                }
            }
        }
    }

    #[test]
    fn masks_are_nonempty_strict_subsets() {
        for mode in [SpuriousMode::BackgroundColor, SpuriousMode::CornerPatch, SpuriousMode::ForegroundTint] {
            let ds = generate_synthetic(&SpuriousSpec { spurious_mode: mode, ..small_spec() }).unwrap();
            for r in &ds.records {
                let m = r.foreground_mask.as_ref().unwrap();
                assert!(m.count() > 0 && m.count() < m.data.len());
            }
        }
    }

    #[test]
    fn class_lives_in_shape_attribute_in_spurious_channel() {
        let spec = SpuriousSpec { noise: 0.0, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        for r in ds.records.iter().take(30) {
            let m = r.foreground_mask.as_ref().unwrap();
            let hw = r.image.height * r.image.width;
            let bg = (0..hw).find(|&p| !m.data[p] && p / r.image.width > 4 && p % r.image.width > 4).unwrap();
            let px: Vec<f64> = (0..3).map(|c| r.image.data[c * hw + bg]).collect();
            let want = attribute_color(r.attribute, 2);
            for c in 0..3 {
                assert!((px[c] - quantize(want[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_table_of_hand_built_dataset() {
        let img = Image::filled(2, 2, [0.0; 3]);
        let rec = |id: &str, y, z| SampleRecord {
            id: id.into(),
            image: img.clone(),
            label: y,
            attribute: z,
            split: Split::Train,
            foreground_mask: None,
        };
        let ds = GroupedDataset::new(
            vec![rec("a", 0, 0), rec("b", 0, 0), rec("c", 1, 0)],
            vec!["x".into(), "y".into()],
            vec!["p".into()],
        )
        .unwrap();
        let t = group_table(&ds);
        assert_eq!(t.iter().map(|(_, n)| *n).collect::<Vec<_>>(), vec![2, 1]);
        let empty = GroupedDataset::new(vec![], vec![], vec![]).unwrap();
        assert!(group_table(&empty).is_empty());
    }

    #[test]
    fn constructor_rejects_bad_records() {
        let img = Image::filled(2, 2, [0.0; 3]);
        let rec = SampleRecord { id: "a".into(), image: img, label: 2, attribute: 0, split: Split::Train, foreground_mask: None };
        assert!(matches!(
            GroupedDataset::new(vec![rec.clone()], vec!["x".into(), "y".into()], vec!["p".into()]),
            Err(Error::OutOfRange { what: "label", .. })
        ));
        let bad_id = SampleRecord { id: "a-1".into(), label: 0, ..rec };
        assert!(GroupedDataset::new(vec![bad_id], vec!["x".into()], vec!["p".into()]).is_err());
    }
}
