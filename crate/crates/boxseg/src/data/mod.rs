//! Datasets: the synthetic shapes benchmark, COCO-style annotation IO, and
//! the weak-supervision firewall.
//!
//! Hidden ground-truth masks live in a `masks_hidden/` directory that only
//! [`load_eval_dataset`] (and through it, evaluation and the fully
//! supervised oracle) ever opens. Training loads [`TrainSample`]s, a type
//! that has no mask field at all; every hidden-mask file read is counted so
//! tests can prove the firewall holds.

pub mod coco;
pub mod shapes;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::geometry::{BBox, BitMask};
use crate::grid::Chw;
use crate::scalar::Scalar;
use crate::{Error, Result};

pub use coco::{load_coco_boxes, CocoAnnotation, CocoDataset, CocoRle};
pub use shapes::{generate_shapes, ShapesConfig};

static HIDDEN_MASK_READS: AtomicU64 = AtomicU64::new(0);

/// How many hidden-mask files have been opened since process start.
pub fn hidden_mask_reads() -> u64 {
    HIDDEN_MASK_READS.load(Ordering::SeqCst)
}

fn record_hidden_read() {
    HIDDEN_MASK_READS.fetch_add(1, Ordering::SeqCst);
}

/// A sample as training sees it: image, boxes, classes — no masks.
#[derive(Debug, Clone)]
pub struct TrainSample<S> {
    pub image: Chw<S>,
    pub boxes: Vec<BBox<S>>,
    pub classes: Vec<usize>,
}

/// A full sample including the hidden instance masks; produced by the
/// generator and by the evaluation loader only.
#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub image: Chw<S>,
    pub boxes: Vec<BBox<S>>,
    pub classes: Vec<usize>,
    pub hidden_masks: Vec<BitMask>,
}

impl<S: Scalar> Sample<S> {
    pub fn to_train(&self) -> TrainSample<S> {
        TrainSample {
            image: self.image.clone(),
            boxes: self.boxes.clone(),
            classes: self.classes.clone(),
        }
    }
}

/// Convert an RGB image buffer in `[0,1]` to 8-bit and save as PNG.
pub fn save_image_png<S: Scalar>(image: &Chw<S>, path: &Path) -> Result<()> {
    assert_eq!(image.c(), 3);
    let (h, w) = (image.h(), image.w());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image.get(c, y as usize, x as usize).as_f64() * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(())
}

/// Load an 8-bit RGB PNG into a `[0,1]` image buffer.
pub fn load_image_png<S: Scalar>(path: &Path) -> Result<Chw<S>> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            file: path.display().to_string(),
            detail: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Chw::zeros(3, h as usize, w as usize);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, S::of(px.0[c] as f64 / 255.0));
        }
    }
    Ok(out)
}

fn mask_file_name(annotation_id: u64) -> String {
    format!("a{annotation_id:06}.png")
}

/// Write a dataset split to disk: `images/*.png`, `annotations.json`
/// (COCO-style boxes only), and `masks_hidden/*.png`.
pub fn write_dataset<S: Scalar>(dir: &Path, samples: &[Sample<S>]) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks_hidden");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let mut coco = CocoDataset::shapes_header();
    let mut ann_id: u64 = 1;
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("images/{i:06}.png");
        save_image_png(&s.image, &dir.join(&file_name))?;
        coco.images.push(coco::CocoImage {
            id: i as u64,
            file_name,
            width: s.image.w(),
            height: s.image.h(),
        });
        for ((b, &class), mask) in s.boxes.iter().zip(&s.classes).zip(&s.hidden_masks) {
            let bf = b.cast::<f64>();
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: i as u64,
                category_id: class as u64 + 1,
                bbox: [bf.x1, bf.y1, bf.x2 - bf.x1, bf.y2 - bf.y1],
                area: mask.count_ones() as f64,
                iscrowd: 0,
                segmentation: None,
            });
            mask.save_png(&masks_dir.join(mask_file_name(ann_id)))?;
            ann_id += 1;
        }
    }
    coco.save(&dir.join("annotations.json"))?;
    Ok(())
}

/// Load the training view of a dataset split. Never touches `masks_hidden/`.
pub fn load_train_dataset<S: Scalar>(dir: &Path) -> Result<Vec<TrainSample<S>>> {
    let coco = load_coco_boxes(&dir.join("annotations.json"))?;
    let mut out = Vec::with_capacity(coco.images.len());
    for img in &coco.images {
        let image = load_image_png::<S>(&dir.join(&img.file_name))?;
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for ann in coco.annotations_of(img.id) {
            boxes.push(ann_box::<S>(ann)?);
            classes.push(ann.category_id.saturating_sub(1) as usize);
        }
        out.push(TrainSample {
            image,
            boxes,
            classes,
        });
    }
    Ok(out)
}

/// Load the full evaluation view including hidden masks.
pub fn load_eval_dataset<S: Scalar>(dir: &Path) -> Result<Vec<Sample<S>>> {
    let coco = load_coco_boxes(&dir.join("annotations.json"))?;
    let masks_dir = dir.join("masks_hidden");
    let mut out = Vec::with_capacity(coco.images.len());
    for img in &coco.images {
        let image = load_image_png::<S>(&dir.join(&img.file_name))?;
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        let mut hidden_masks = Vec::new();
        for ann in coco.annotations_of(img.id) {
            boxes.push(ann_box::<S>(ann)?);
            classes.push(ann.category_id.saturating_sub(1) as usize);
            record_hidden_read();
            hidden_masks.push(BitMask::load_png(&masks_dir.join(mask_file_name(ann.id)))?);
        }
        out.push(Sample {
            image,
            boxes,
            classes,
            hidden_masks,
        });
    }
    Ok(out)
}

fn ann_box<S: Scalar>(ann: &CocoAnnotation) -> Result<BBox<S>> {
    BBox::new(
        S::of(ann.bbox[0]),
        S::of(ann.bbox[1]),
        S::of(ann.bbox[0] + ann.bbox[2]),
        S::of(ann.bbox[1] + ann.bbox[3]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapes::ShapesConfig;

    #[test]
    fn dataset_roundtrip_preserves_boxes() {
        let cfg = ShapesConfig {
            count: 3,
            seed: 5,
            ..ShapesConfig::default()
        };
        let samples = generate_shapes::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();

        let train = load_train_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(train.len(), samples.len());
        for (t, s) in train.iter().zip(&samples) {
            assert_eq!(t.boxes.len(), s.boxes.len());
            for (a, b) in t.boxes.iter().zip(&s.boxes) {
                assert!((a.x1 - b.x1).abs() < 1e-4);
                assert!((a.y2 - b.y2).abs() < 1e-4);
            }
            assert_eq!(t.classes, s.classes);
        }

        let before = hidden_mask_reads();
        let eval = load_eval_dataset::<f32>(dir.path()).unwrap();
        assert!(hidden_mask_reads() > before);
        for (e, s) in eval.iter().zip(&samples) {
            assert_eq!(e.hidden_masks, s.hidden_masks);
        }
    }

    #[test]
    fn train_loader_never_touches_hidden_masks() {
        let cfg = ShapesConfig {
            count: 2,
            seed: 9,
            ..ShapesConfig::default()
        };
        let samples = generate_shapes::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        // deleting the hidden masks must not break the training loader
        std::fs::remove_dir_all(dir.path().join("masks_hidden")).unwrap();
        let before = hidden_mask_reads();
        let train = load_train_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(hidden_mask_reads(), before);
        assert_eq!(train.len(), 2);
    }
}
