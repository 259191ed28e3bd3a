use image::RgbImage;

use crate::error::{Error, Result};

/// Sub-pixel head location in image pixel units. Pixel `(row, col)` is
/// centered at `(x = col, y = row)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

/// An RGB image together with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedScene {
    scene_id: String,
    image: RgbImage,
    head_points: Vec<Point>,
}

impl AnnotatedScene {
    /// Fails if any head point is outside the image.
    pub fn new(scene_id: impl Into<String>, image: RgbImage, head_points: Vec<Point>) -> Result<Self> {
        let scene_id = scene_id.into();
        let (w, h) = image.dimensions();
        validate_points(&scene_id, &head_points, h as usize, w as usize)?;
        Ok(AnnotatedScene {
            scene_id,
            image,
            head_points,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn head_points(&self) -> &[Point] {
        &self.head_points
    }

    /// Ground-truth person count.
    pub fn count(&self) -> usize {
        self.head_points.len()
    }

    /// `(H, W)`.
    pub fn shape(&self) -> (usize, usize) {
        let (w, h) = self.image.dimensions();
        (h as usize, w as usize)
    }

    pub fn with_id(mut self, scene_id: impl Into<String>) -> Self {
        self.scene_id = scene_id.into();
        self
    }

    pub fn into_parts(self) -> (String, RgbImage, Vec<Point>) {
        (self.scene_id, self.image, self.head_points)
    }
}

pub(crate) fn validate_points(scene_id: &str, points: &[Point], height: usize, width: usize) -> Result<()> {
    match points.iter().position(|p| !p.in_bounds(height, width)) {
        None => Ok(()),
        Some(index) => Err(Error::PointOutOfBounds {
            scene_id: scene_id.to_string(),
            index,
            x: points[index].x,
            y: points[index].y,
            width,
            height,
        }),
    }
}

/// Disjoint train/test partition of scenes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedScene>,
    pub test: Vec<AnnotatedScene>,
}

impl DatasetSplit {
    /// `(train, test)` sizes.
    pub fn sizes(&self) -> (usize, usize) {
        (self.train.len(), self.test.len())
    }
}
