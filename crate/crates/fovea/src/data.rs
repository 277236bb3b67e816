//! Synthetic shapes dataset and COCO-format annotation IO.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use fovea_core::evaluation::{ImageDets, ImageGts};
use fovea_core::inference::Detection;
use fovea_core::tensor::Tensor;
use fovea_core::{BBox, LabeledBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const CLASS_NAMES: [&str; 3] = ["disk", "square", "triangle"];
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

/// Samples per pixel side for anti-aliasing.
const SUPERSAMPLE: usize = 4;
/// Minimum free space between two objects' boxes, in pixels.
const GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object scale `sqrt(w * h)` range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest `max(w/h, h/w)`; 1 keeps every shape square.
    pub max_aspect: f64,
    /// Amplitude of uniform background noise in gray levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_images: 500,
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 56.0,
            max_aspect: 1.0,
            noise: 12.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return fail(format!("image size {}x{}", self.width, self.height));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "objects per image {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return fail(format!("size range {}..{}", self.min_size, self.max_size));
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect.is_finite()) {
            return fail(format!("max_aspect {}", self.max_aspect));
        }
        let longest = self.max_size * self.max_aspect.sqrt();
        if longest + 1.0 > self.width.min(self.height) as f64 {
            return fail(format!(
                "objects up to {longest:.1} px do not fit a {}x{} image",
                self.width, self.height
            ));
        }
        if !(0.0..=127.0).contains(&self.noise) {
            return fail(format!("noise {}", self.noise));
        }
        Ok(())
    }
}

/// One rendered grayscale image with its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub objects: Vec<LabeledBox>,
}

fn inside(category: usize, b: &BBox, u: f64, v: f64) -> bool {
    if u < b.x1 || u > b.x2 || v < b.y1 || v > b.y2 {
        return false;
    }
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    match category {
        0 => {
            let (dx, dy) = ((u - cx) / hw, (v - cy) / hh);
            dx * dx + dy * dy <= 1.0
        }
        1 => true,
        _ => (u - cx).abs() <= hw * (v - b.y1) / b.height(),
    }
}

/// Fraction of the pixel `(px, py)` covered by the shape.
fn coverage(category: usize, b: &BBox, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let u = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let v = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if inside(category, b, u, v) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn half_grid(v: f64) -> f64 {
    (v * 2.0).round() / 2.0
}

fn sample_object(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> LabeledBox {
    let category = rng.random_range(0..CLASS_NAMES.len());
    let s = rng.random_range(spec.min_size..=spec.max_size);
    let a = if spec.max_aspect > 1.0 {
        rng.random_range(0.0..=spec.max_aspect.ln()).exp()
    } else {
        1.0
    };
    let h = half_grid(s / a.sqrt()).max(1.0);
    // rounding must not push the aspect ratio past the limit
    let (mut w, mut h) = (half_grid(s * a.sqrt()).min((h * spec.max_aspect * 2.0).floor() / 2.0), h);
    if rng.random_bool(0.5) {
        std::mem::swap(&mut w, &mut h);
    }
    let x = (rng.random_range(0.0..=spec.width as f64 - w) * 2.0).floor() / 2.0;
    let y = (rng.random_range(0.0..=spec.height as f64 - h) * 2.0).floor() / 2.0;
    LabeledBox::new(BBox::from_xywh(x, y, w, h), category)
}

fn separated(a: &BBox, b: &BBox) -> bool {
    a.x2 + GAP <= b.x1 || b.x2 + GAP <= a.x1 || a.y2 + GAP <= b.y1 || b.y2 + GAP <= a.y1
}

/// Renders image `index` of the dataset; every image has its own random stream.
pub fn render_image(spec: &DatasetSpec, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let objects = 'layout: loop {
        let mut objs: Vec<LabeledBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let placed = (0..200).map(|_| sample_object(spec, &mut rng)).find(|o| {
                objs.iter().all(|p| separated(&p.bbox, &o.bbox))
            });
            match placed {
                Some(o) => objs.push(o),
                None => continue 'layout,
            }
        }
        break objs;
    };

    let (w, h) = (spec.width, spec.height);
    let background = rng.random_range(30.0..90.0);
    let mut canvas: Vec<f64> = (0..w * h)
        .map(|_| {
            if spec.noise > 0.0 {
                background + rng.random_range(-spec.noise..=spec.noise)
            } else {
                background
            }
        })
        .collect();
    for o in &objects {
        let fg = rng.random_range(150.0..240.0);
        let b = &o.bbox;
        let (x0, x1) = (b.x1.floor() as usize, (b.x2.ceil() as usize).min(w));
        let (y0, y1) = (b.y1.floor() as usize, (b.y2.ceil() as usize).min(h));
        for py in y0..y1 {
            for px in x0..x1 {
                let c = coverage(o.category, b, px, py);
                if c > 0.0 {
                    let p = &mut canvas[py * w + px];
                    *p = *p * (1.0 - c) + fg * c;
                }
            }
        }
    }
    SynthImage {
        width: w,
        height: h,
        pixels: canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        objects,
    }
}

/// Gray levels to network input: `(v / 255 - 0.5) / 0.25`.
pub fn image_tensor(pixels: &[u8], width: usize, height: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        &[1, 1, height, width],
        pixels.iter().map(|&v| (v as f64 / 255.0 - 0.5) / 0.25).collect(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Annotations loaded into dense category ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Directory that image file names are relative to.
    pub root: PathBuf,
    pub images: Vec<CocoImage>,
    /// Ground truth per image, in the order of `images`.
    pub gts: Vec<ImageGts>,
    /// Categories sorted by COCO id; the dense id is the position.
    pub categories: Vec<CocoCategory>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.images[i].file_name)
    }

    /// Grayscale pixels of image `i`, checked against the recorded size.
    pub fn load_pixels(&self, i: usize) -> Result<Vec<u8>> {
        let path = self.image_path(i);
        let img = image::open(&path).at(&path)?.to_luma8();
        let info = &self.images[i];
        if img.width() as usize != info.width || img.height() as usize != info.height {
            return Err(Error::Format {
                path,
                reason: format!(
                    "image is {}x{}, annotations say {}x{}",
                    img.width(),
                    img.height(),
                    info.width,
                    info.height
                ),
            });
        }
        Ok(img.into_raw())
    }

    pub fn load_tensor(&self, i: usize) -> Result<Tensor> {
        let info = &self.images[i];
        image_tensor(&self.load_pixels(i)?, info.width, info.height)
    }

    pub fn category_id(&self, dense: usize) -> u64 {
        self.categories[dense].id
    }

    pub fn dense_category(&self, coco_id: u64) -> Option<usize> {
        self.categories.iter().position(|c| c.id == coco_id)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let text = serde_json::to_string_pretty(value).at(path)?;
    fs::write(path, text + "\n").at(path)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}

fn categories() -> Vec<CocoCategory> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect()
}

/// Annotation file contents for rendered images; image ids start at 1.
pub fn coco_from_images(images: &[SynthImage]) -> CocoFile {
    let mut file = CocoFile {
        categories: categories(),
        ..CocoFile::default()
    };
    for (i, img) in images.iter().enumerate() {
        let id = i as u64 + 1;
        file.images.push(CocoImage {
            id,
            file_name: format!("{IMAGES_DIR}/{id:06}.png"),
            width: img.width,
            height: img.height,
        });
        for o in &img.objects {
            let bbox = o.bbox.to_xywh();
            file.annotations.push(CocoAnnotation {
                id: file.annotations.len() as u64 + 1,
                image_id: id,
                category_id: o.category as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
        }
    }
    file
}

/// Renders the dataset into `out_dir` as PNG files plus `annotations.json`.
pub fn generate(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let img_dir = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).at(&img_dir)?;
    let images: Vec<SynthImage> = (0..spec.num_images)
        .into_par_iter()
        .map(|i| render_image(spec, i))
        .collect();
    let file = coco_from_images(&images);
    images
        .par_iter()
        .zip(&file.images)
        .try_for_each(|(img, info)| {
            let path = out_dir.join(&info.file_name);
            image::save_buffer(
                &path,
                &img.pixels,
                img.width as u32,
                img.height as u32,
                image::ExtendedColorType::L8,
            )
            .at(&path)
        })?;
    let path = out_dir.join(ANNOTATIONS_FILE);
    write_json(&path, &file)?;
    dataset_from_coco(file, out_dir.to_path_buf(), &path)
}

/// Reads a COCO annotation file; image paths resolve relative to its directory.
pub fn load_coco(path: &Path) -> Result<Dataset> {
    let file: CocoFile = read_json(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    dataset_from_coco(file, root, path)
}

fn dataset_from_coco(file: CocoFile, root: PathBuf, path: &Path) -> Result<Dataset> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut categories = file.categories;
    categories.sort_by_key(|c| c.id);
    let mut dense = HashMap::new();
    for (i, c) in categories.iter().enumerate() {
        if dense.insert(c.id, i).is_some() {
            return Err(bad(format!("duplicate category id {}", c.id)));
        }
    }
    let mut slot = HashMap::new();
    for (i, img) in file.images.iter().enumerate() {
        if slot.insert(img.id, i).is_some() {
            return Err(bad(format!("duplicate image id {}", img.id)));
        }
    }
    let mut gts: Vec<ImageGts> = file
        .images
        .iter()
        .map(|img| ImageGts {
            image_id: img.id,
            gts: Vec::new(),
        })
        .collect();
    let mut seen = HashSet::new();
    for a in &file.annotations {
        if !seen.insert(a.id) {
            return Err(bad(format!("duplicate annotation id {}", a.id)));
        }
        let &i = slot.get(&a.image_id).ok_or_else(|| {
            bad(format!(
                "annotation {} references unknown image id {}",
                a.id, a.image_id
            ))
        })?;
        let &c = dense.get(&a.category_id).ok_or_else(|| {
            bad(format!(
                "annotation {} references unknown category id {}",
                a.id, a.category_id
            ))
        })?;
        if a.iscrowd != 0 {
            continue;
        }
        let [x, y, w, h] = a.bbox;
        let img = &file.images[i];
        let b = BBox::from_xywh(x, y, w, h);
        if !(b.is_valid() && w > 0.0 && h > 0.0) {
            return Err(bad(format!("annotation {} has degenerate bbox {:?}", a.id, a.bbox)));
        }
        if x < 0.0 || y < 0.0 || b.x2 > img.width as f64 || b.y2 > img.height as f64 {
            return Err(bad(format!(
                "annotation {} bbox {:?} outside image {} ({}x{})",
                a.id, a.bbox, img.id, img.width, img.height
            )));
        }
        gts[i].gts.push(LabeledBox::new(b, c));
    }
    Ok(Dataset {
        root,
        images: file.images,
        gts,
        categories,
    })
}

/// Detections as COCO results, with dense categories mapped back to COCO ids.
pub fn to_results(dataset: &Dataset, dets: &[ImageDets]) -> Vec<CocoResult> {
    dets.iter()
        .flat_map(|img| {
            img.dets.iter().map(move |d| CocoResult {
                image_id: img.image_id,
                category_id: dataset.category_id(d.category),
                bbox: d.bbox.to_xywh(),
                score: d.score,
            })
        })
        .collect()
}

pub fn write_results(path: &Path, results: &[CocoResult]) -> Result<()> {
    write_json(path, &results)
}

/// Reads a COCO results file and groups it by the dataset's images.
pub fn load_results(path: &Path, dataset: &Dataset) -> Result<Vec<ImageDets>> {
    let results: Vec<CocoResult> = read_json(path)?;
    let mut grouped: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    let known: HashSet<u64> = dataset.images.iter().map(|i| i.id).collect();
    for r in results {
        if !known.contains(&r.image_id) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("result for unknown image id {}", r.image_id),
            });
        }
        let category = dataset.dense_category(r.category_id).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("result with unknown category id {}", r.category_id),
        })?;
        let [x, y, w, h] = r.bbox;
        grouped.entry(r.image_id).or_default().push(Detection {
            bbox: BBox::from_xywh(x, y, w, h),
            category,
            score: r.score,
        });
    }
    Ok(grouped
        .into_iter()
        .map(|(image_id, dets)| ImageDets { image_id, dets })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_fill_their_boxes() {
        let b = BBox::new(10.0, 10.0, 30.0, 20.0);
        for c in 0..3 {
            // middle of the bottom edge is inside every shape
            assert!(inside(c, &b, 20.0, 19.9));
            assert!(!inside(c, &b, 9.9, 15.0));
        }
        // apex row is only inside at the center
        assert!(inside(2, &b, 20.0, 10.0));
        assert!(!inside(2, &b, 12.0, 10.5));
        assert_eq!(coverage(1, &b, 15, 15), 1.0);
        assert_eq!(coverage(1, &BBox::new(10.5, 10.0, 30.0, 20.0), 10, 15), 0.5);
    }

    #[test]
    fn layouts_respect_the_spec() {
        let spec = DatasetSpec {
            max_aspect: 6.0,
            ..DatasetSpec::default()
        };
        for i in 0..50 {
            let img = render_image(&spec, i);
            assert!((1..=4).contains(&img.objects.len()));
            for (k, o) in img.objects.iter().enumerate() {
                let b = o.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
                assert_eq!(half_grid(b.x1), b.x1);
                assert_eq!(half_grid(b.width()), b.width());
                let u = b.aspect_ratio();
                assert!(u <= 6.0 * 1.1, "aspect {u}");
                for p in &img.objects[k + 1..] {
                    assert!(separated(&p.bbox, &b));
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = DatasetSpec::default();
        assert!(base.validate().is_ok());
        for bad in [
            DatasetSpec { min_objects: 0, ..base.clone() },
            DatasetSpec { min_objects: 5, ..base.clone() },
            DatasetSpec { max_size: 200.0, ..base.clone() },
            DatasetSpec { max_aspect: 0.5, ..base.clone() },
            DatasetSpec { width: 0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
