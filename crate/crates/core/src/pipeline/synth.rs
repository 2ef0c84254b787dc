//! Seeded synthetic dataset of small targets on textured backgrounds, plus
//! the on-disk layout: binary PPM (P6) images and `annotations.json`
//! side by side in one directory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::GtBox;
use crate::boxes::{iou_unchecked, Bbox};
use crate::error::{Error, Result};
use crate::eval::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Area below which a target counts as small.
pub const SMALL_AREA: f64 = 1024.0;

/// Lower bound the generator keeps on the small-target share.
pub const MIN_SMALL_RATIO: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub image_size: usize,
    /// Side range of small targets, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Side range of the occasional larger target, inclusive.
    pub large_min_size: usize,
    pub large_max_size: usize,
    /// Chance a target is drawn from the large range, subject to the small-ratio quota.
    pub large_fraction: f64,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Amplitude of the background texture, in `[0, 1]`.
    pub background_intensity: f64,
    pub classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            images: 40,
            image_size: 128,
            min_size: 4,
            max_size: 24,
            large_min_size: 32,
            large_max_size: 48,
            large_fraction: 0.15,
            targets_min: 1,
            targets_max: 5,
            background_intensity: 0.35,
            classes: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.images == 0 || self.classes == 0 {
            return bad("images and classes must be positive".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("bad small size range {}..={}", self.min_size, self.max_size));
        }
        if ((self.max_size * self.max_size) as f64) >= SMALL_AREA {
            return bad(format!("max_size {} yields targets that are not small", self.max_size));
        }
        if self.large_min_size > self.large_max_size || ((self.large_min_size * self.large_min_size) as f64) < SMALL_AREA {
            return bad(format!(
                "large size range {}..={} must start at 32 or more",
                self.large_min_size, self.large_max_size
            ));
        }
        if self.large_max_size.max(self.max_size) > self.image_size {
            return bad(format!("targets do not fit a {0}x{0} image", self.image_size));
        }
        if self.targets_min > self.targets_max || self.targets_max == 0 {
            return bad(format!("bad target count range {}..={}", self.targets_min, self.targets_max));
        }
        if !(0.0..=1.0).contains(&self.large_fraction) || !(0.0..=1.0).contains(&self.background_intensity) {
            return bad("large_fraction and background_intensity must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], context: &str) -> Result<Self> {
        // header: magic, width, height, maxval, separated by whitespace; comments allowed
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(Error::parse(context, "truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::parse(context, format!("expected P6 magic, found {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(context, format!("bad PPM field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::parse(context, format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        let data = bytes.get(i + 1..).unwrap_or(&[]);
        if data.len() != width * height * 3 {
            return Err(Error::parse(
                context,
                format!("expected {} pixel bytes, found {}", width * height * 3, data.len()),
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data: data.to_vec(),
        })
    }
}

/// Images aligned with `coco.images`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub coco: CocoDataset,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn category_ids(&self) -> Vec<u64> {
        self.coco.categories.iter().map(|c| c.id).collect()
    }

    /// Ground truth of image `index` with zero-based class indices.
    pub fn targets(&self, index: usize) -> Vec<GtBox> {
        let image_id = self.coco.images[index].id;
        let cats = self.category_ids();
        self.coco
            .annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| GtBox {
                bbox: Bbox::from_xywh(a.bbox),
                class: cats.iter().position(|&c| c == a.category_id).expect("validated category"),
            })
            .collect()
    }

    /// Dataset restricted to the given image indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let ids: std::collections::BTreeSet<u64> = indices.iter().map(|&i| self.coco.images[i].id).collect();
        Dataset {
            coco: CocoDataset {
                images: indices.iter().map(|&i| self.coco.images[i].clone()).collect(),
                annotations: self.coco.annotations.iter().filter(|a| ids.contains(&a.image_id)).cloned().collect(),
                categories: self.coco.categories.clone(),
            },
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Batch tensor `[N, 3, size, size]` with pixels mapped to `[-1, 1]`,
    /// zero-padded at the bottom and right.
    pub fn batch_tensor(&self, indices: &[usize], size: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros([indices.len(), 3, size, size]);
        let shape = t.shape();
        for (n, &i) in indices.iter().enumerate() {
            let img = &self.images[i];
            if img.width > size || img.height > size {
                return Err(Error::Config(format!(
                    "image {} is {}x{}, larger than the {size}x{size} model input",
                    self.coco.images[i].file_name, img.width, img.height
                )));
            }
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..3 {
                        t.data_mut()[shape.offset(n, c, y, x)] = img.data[(y * img.width + x) * 3 + c] as f64 / 127.5 - 1.0;
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (meta, img) in self.coco.images.iter().zip(&self.images) {
            let path = dir.join(&meta.file_name);
            std::fs::write(&path, img.to_ppm()).map_err(|e| Error::io(&path, e))?;
        }
        self.coco.save(dir.join(ANNOTATIONS_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let coco = crate::eval::load_coco(dir.join(ANNOTATIONS_FILE))?;
        let images = coco
            .images
            .iter()
            .map(|meta| {
                let path = dir.join(&meta.file_name);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let img = RgbImage::from_ppm(&bytes, &path.display().to_string())?;
                if (img.width, img.height) != (meta.width as usize, meta.height as usize) {
                    return Err(Error::parse(
                        path.display().to_string(),
                        format!("image is {}x{}, annotations say {}x{}", img.width, img.height, meta.width, meta.height),
                    ));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { coco, images })
    }

    /// Train and held-out indices: the last quarter (at least one image) is
    /// held out; a single-image dataset is used for both.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        if n < 2 {
            return ((0..n).collect(), (0..n).collect());
        }
        let val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        ((0..n - val).collect(), (n - val..n).collect())
    }
}

/// Share of annotations with area below 32x32.
pub fn small_target_ratio(coco: &CocoDataset) -> f64 {
    if coco.annotations.is_empty() {
        return 0.0;
    }
    let small = coco
        .annotations
        .iter()
        .filter(|a| a.area.unwrap_or(a.bbox[2] * a.bbox[3]) < SMALL_AREA)
        .count();
    small as f64 / coco.annotations.len() as f64
}

const CLASS_NAMES: [&str; 6] = ["borer", "moth", "aphid", "weevil", "sawfly", "mite"];

fn class_colour(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 3] = [[0.9, 0.2, 0.15], [0.15, 0.85, 0.25], [0.2, 0.3, 0.95]];
    if class < 3 {
        BASE[class]
    } else {
        let h = (class as f64 * 0.618_033_988_75).fract();
        [h, (h + 0.33).fract(), (h + 0.66).fract()]
    }
}

/// Whether pixel centre `(u, v)` in box-relative units `[0, 1]^2` is inside the class shape.
fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match class % 3 {
        0 => du * du + dv * dv <= 0.25,
        1 => true,
        _ => du.abs() + dv.abs() <= 0.5,
    }
}

fn background(size: usize, intensity: f64, rng: &mut impl Rng) -> Vec<f64> {
    let cell = 16usize;
    let n = size / cell + 2;
    let base: f64 = rng.gen_range(0.3..0.6);
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let smooth = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
            let grain: f64 = rng.gen_range(-1.0..1.0);
            let v = base + intensity * (0.5 * smooth + 0.15 * grain);
            for c in 0..3 {
                out[(y * size + x) * 3 + c] = v + tint[c];
            }
        }
    }
    out
}

fn to_bytes(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Generates the dataset described by `spec`; identical specs give identical bytes.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let categories = (0..spec.classes)
        .map(|k| CocoCategory {
            id: k as u64 + 1,
            name: CLASS_NAMES.get(k).map_or_else(|| format!("class{}", k + 1), |s| s.to_string()),
            supercategory: None,
        })
        .collect();
    let (mut images, mut metas, mut annotations) = (Vec::new(), Vec::new(), Vec::new());
    let (mut small, mut total) = (0usize, 0usize);
    for index in 0..spec.images {
        let image_id = index as u64 + 1;
        let mut pixels = background(size, spec.background_intensity, &mut rng);
        let count = rng.gen_range(spec.targets_min..=spec.targets_max);
        let mut placed: Vec<Bbox> = Vec::new();
        for _ in 0..count {
            let class = rng.gen_range(0..spec.classes);
            let want_large = rng.gen_bool(spec.large_fraction);
            let large = want_large && small as f64 / (total + 1) as f64 >= MIN_SMALL_RATIO;
            let (lo, hi) = if large {
                (spec.large_min_size, spec.large_max_size)
            } else {
                (spec.min_size, spec.max_size)
            };
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let mut spot = None;
            for _ in 0..20 {
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                let b = Bbox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
                let margin = Bbox::new(b.x_min - 2.0, b.y_min - 2.0, b.x_max + 2.0, b.y_max + 2.0);
                if placed.iter().all(|p| iou_unchecked(p, &margin) == 0.0) {
                    spot = Some((x0, y0, b));
                    break;
                }
            }
            let Some((x0, y0, b)) = spot else { continue };
            let colour = class_colour(class);
            let jitter: f64 = rng.gen_range(-0.08..0.08);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let u = (x - x0) as f64 / w as f64 + 0.5 / w as f64;
                    let v = (y - y0) as f64 / h as f64 + 0.5 / h as f64;
                    if inside_shape(class, u, v) {
                        for c in 0..3 {
                            pixels[(y * size + x) * 3 + c] = colour[c] + jitter;
                        }
                    }
                }
            }
            placed.push(b);
            total += 1;
            if !large {
                small += 1;
            }
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: class as u64 + 1,
                bbox: [x0 as f64, y0 as f64, w as f64, h as f64],
                area: Some((w * h) as f64),
                iscrowd: 0,
            });
        }
        metas.push(CocoImage {
            id: image_id,
            file_name: format!("{image_id:06}.ppm"),
            width: size as u32,
            height: size as u32,
        });
        images.push(RgbImage {
            width: size,
            height: size,
            data: to_bytes(&pixels),
        });
    }
    let coco = CocoDataset {
        images: metas,
        annotations,
        categories,
    };
    coco.validate("synthetic dataset")?;
    Ok(Dataset { coco, images })
}

/// One textured image holding a single filled target of class 0; used for
/// overfitting checks.
pub fn single_target_dataset(image_size: usize, target: Bbox, classes: usize, seed: u64) -> Result<Dataset> {
    let spec = SynthSpec {
        seed,
        images: 1,
        image_size,
        classes,
        targets_min: 1,
        targets_max: 1,
        large_fraction: 0.0,
        ..SynthSpec::default()
    };
    let mut base = generate_synthetic(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = background(image_size, spec.background_intensity, &mut rng);
    let colour = class_colour(0);
    let (x0, y0) = (target.x_min.max(0.0) as usize, target.y_min.max(0.0) as usize);
    let (x1, y1) = ((target.x_max as usize).min(image_size), (target.y_max as usize).min(image_size));
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                pixels[(y * image_size + x) * 3 + c] = colour[c];
            }
        }
    }
    base.images[0].data = to_bytes(&pixels);
    base.coco.annotations = vec![CocoAnnotation {
        id: 1,
        image_id: base.coco.images[0].id,
        category_id: 1,
        bbox: target.to_xywh(),
        area: Some(target.area()),
        iscrowd: 0,
    }];
    base.coco.validate("single-target dataset")?;
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            images: n,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn image_count_matches() {
        let d = generate_synthetic(&spec(10)).unwrap();
        assert_eq!(d.coco.images.len(), 10);
        assert_eq!(d.images.len(), 10);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&spec(6)).unwrap();
        let b = generate_synthetic(&spec(6)).unwrap();
        assert_eq!(a.coco.to_json_string().unwrap(), b.coco.to_json_string().unwrap());
        assert_eq!(a.images, b.images);
        let c = generate_synthetic(&SynthSpec { seed: 6, ..spec(6) }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn small_ratio_holds_even_when_large_targets_are_frequent() {
        for seed in 0..5 {
            let d = generate_synthetic(&SynthSpec {
                seed,
                large_fraction: 1.0,
                ..spec(20)
            })
            .unwrap();
            assert!(small_target_ratio(&d.coco) >= MIN_SMALL_RATIO);
            assert!(d.coco.annotations.iter().any(|a| a.bbox[2] >= 32.0));
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let d = generate_synthetic(&spec(1)).unwrap();
        let bytes = d.images[0].to_ppm();
        assert_eq!(RgbImage::from_ppm(&bytes, "x").unwrap(), d.images[0]);
        assert!(RgbImage::from_ppm(b"P5\n1 1\n255\n\0", "x").is_err());
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\0\0\0", "x").is_err());
        let commented = b"P6\n# note\n1 1\n255\n\x01\x02\x03";
        assert_eq!(RgbImage::from_ppm(commented, "x").unwrap().data, vec![1, 2, 3]);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic(&spec(3)).unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SynthSpec { max_size: 40, ..spec(1) }.validate().is_err());
        assert!(SynthSpec { images: 0, ..spec(1) }.validate().is_err());
        assert!(SynthSpec { large_min_size: 20, ..spec(1) }.validate().is_err());
    }

    #[test]
    fn split_holds_out_last_quarter() {
        let d = generate_synthetic(&spec(8)).unwrap();
        let (train, val) = d.split(0.25);
        assert_eq!(train, (0..6).collect::<Vec<_>>());
        assert_eq!(val, vec![6, 7]);
        let one = d.subset(&[0]);
        assert_eq!(one.split(0.25), (vec![0], vec![0]));
    }

    #[test]
    fn batch_tensor_pads() {
        let d = generate_synthetic(&SynthSpec { image_size: 48, large_max_size: 40, ..spec(1) }).unwrap();
        let t = d.batch_tensor(&[0], 64).unwrap();
        assert_eq!(t.shape(), crate::tensor::Shape::new(1, 3, 64, 64));
        assert_eq!(t.at(0, 0, 63, 63), 0.0);
        assert!(d.batch_tensor(&[0], 32).is_err());
    }
}
