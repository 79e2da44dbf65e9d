//! Person and item localisation on top of an open-vocabulary detector, plus
//! cropping of the resulting patches.

use std::cmp::Ordering;
use std::path::Path;

use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PERSON_LABEL: &str = "person";

/// Axis-aligned box in pixel coordinates of the image (or patch) it was
/// detected in. `(x, y)` is the top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub score: f64,
    #[serde(default)]
    pub label: String,
}

fn one() -> f64 {
    1.0
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, score: f64, label: impl Into<String>) -> Self {
        BoundingBox {
            x,
            y,
            w,
            h,
            score,
            label: label.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x, self.y, self.w, self.h, self.score];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("box has non-finite values: {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box must have positive extent, got w={} h={}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!(
                "box score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    /// Intersects the box with `[0, width) x [0, height)`. `None` when
    /// nothing is left.
    pub fn clamp(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(f64::from(width));
        let y1 = (self.y + self.h).min(f64::from(height));
        (x1 > x0 && y1 > y0).then(|| BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            score: self.score,
            label: self.label.clone(),
        })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..self.clone()
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = ((self.x + self.w).min(other.x + other.w) - self.x.max(other.x)).max(0.0);
        let iy = ((self.y + self.h).min(other.y + other.h) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Descending score, then ascending x, then ascending y.
fn detection_order(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

/// A decoded input image.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub pixels: RgbImage,
}

impl Frame {
    pub fn load(id: impl Into<String>, path: &Path) -> Result<Self> {
        let id = id.into();
        let pixels = image::open(path)
            .map_err(|e| Error::Input(format!("cannot decode image {}: {e}", path.display())))?
            .to_rgb8();
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::Input(format!("image {} is empty", path.display())));
        }
        Ok(Frame { id, pixels })
    }

    pub fn view(&self) -> ImageView<'_> {
        ImageView {
            image_id: &self.id,
            origin: (0, 0),
            pixels: &self.pixels,
        }
    }
}

/// Pixels handed to a backend, with their position in the parent image so
/// that coordinates can be mapped back.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub image_id: &'a str,
    pub origin: (u32, u32),
    pub pixels: &'a RgbImage,
}

impl ImageView<'_> {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// The region this view covers, in parent-image coordinates.
    pub fn region(&self) -> BoundingBox {
        BoundingBox::new(
            f64::from(self.origin.0),
            f64::from(self.origin.1),
            f64::from(self.width()),
            f64::from(self.height()),
            1.0,
            "",
        )
    }
}

/// Cropped pixels plus the box they came from (parent-image coordinates,
/// clamped and snapped to whole pixels).
#[derive(Debug, Clone)]
pub struct Patch {
    pub parent_id: String,
    pub source: BoundingBox,
    pub pixels: RgbImage,
}

impl Patch {
    pub fn view(&self) -> ImageView<'_> {
        ImageView {
            image_id: &self.parent_id,
            origin: (self.source.x as u32, self.source.y as u32),
            pixels: &self.pixels,
        }
    }
}

/// Open-vocabulary detector. Returned boxes are relative to the view.
pub trait DetectorBackend: Send + Sync {
    fn id(&self) -> &str;

    fn max_concurrency(&self) -> usize {
        1
    }

    fn detect(
        &self,
        view: &ImageView<'_>,
        vocabulary: &[String],
        floor: f64,
    ) -> Result<Vec<BoundingBox>>;
}

fn checked_boxes(
    backend: &dyn DetectorBackend,
    view: &ImageView<'_>,
    vocabulary: &[String],
    floor: f64,
) -> Result<Vec<BoundingBox>> {
    let boxes = backend.detect(view, vocabulary, floor)?;
    let mut out = Vec::with_capacity(boxes.len());
    for bbox in boxes {
        bbox.validate()
            .map_err(|e| Error::backend(backend.id(), e.to_string()))?;
        if !vocabulary.iter().any(|term| *term == bbox.label) {
            return Err(Error::backend(
                backend.id(),
                format!("label `{}` is not in the query vocabulary", bbox.label),
            ));
        }
        if bbox.score < floor {
            continue;
        }
        if let Some(clamped) = bbox.clamp(view.width(), view.height()) {
            out.push(clamped);
        }
    }
    Ok(out)
}

/// All person boxes at or above `floor`, in deterministic (score, x, y) order.
pub fn detect_persons(
    view: &ImageView<'_>,
    backend: &dyn DetectorBackend,
    floor: f64,
) -> Result<Vec<BoundingBox>> {
    let mut boxes = checked_boxes(backend, view, &[PERSON_LABEL.to_owned()], floor)?;
    boxes.sort_by(detection_order);
    Ok(boxes)
}

/// Best box per requested item inside a person patch. Items without a box at
/// or above `floor` are absent from the map; the rest keep request order.
pub fn detect_items(
    view: &ImageView<'_>,
    item_names: &[String],
    backend: &dyn DetectorBackend,
    floor: f64,
) -> Result<IndexMap<String, BoundingBox>> {
    if item_names.is_empty() {
        return Ok(IndexMap::new());
    }
    let boxes = checked_boxes(backend, view, item_names, floor)?;
    let mut best = IndexMap::new();
    for name in item_names {
        let winner = boxes
            .iter()
            .filter(|b| b.label == *name)
            .min_by(|a, b| detection_order(a, b));
        if let Some(winner) = winner {
            best.insert(name.clone(), winner.clone());
        }
    }
    Ok(best)
}

/// Crops `bbox` (relative to the view) out of the view after clamping it to
/// the view bounds and snapping outwards to whole pixels.
pub fn crop(view: &ImageView<'_>, bbox: &BoundingBox) -> Result<Patch> {
    let clamped = bbox.clamp(view.width(), view.height()).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "box {bbox:?} does not overlap the {}x{} image",
            view.width(),
            view.height()
        ))
    })?;
    let x0 = clamped.x.floor() as u32;
    let y0 = clamped.y.floor() as u32;
    let x1 = ((clamped.x + clamped.w).ceil() as u32).min(view.width());
    let y1 = ((clamped.y + clamped.h).ceil() as u32).min(view.height());
    let (w, h) = (x1 - x0, y1 - y0);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("box {bbox:?} has zero area after clamping")));
    }
    let pixels = image::imageops::crop_imm(view.pixels, x0, y0, w, h).to_image();
    let source = BoundingBox::new(
        f64::from(view.origin.0 + x0),
        f64::from(view.origin.1 + y0),
        f64::from(w),
        f64::from(h),
        bbox.score,
        bbox.label.clone(),
    );
    Ok(Patch {
        parent_id: view.image_id.to_owned(),
        source,
        pixels,
    })
}
