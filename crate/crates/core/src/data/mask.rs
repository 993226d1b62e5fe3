use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in pixel coordinates: columns `x..x+w`, rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxAnnotation {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }

    pub fn validate(&self, image_size: (usize, usize), num_classes: usize) -> Result<()> {
        let (ih, iw) = image_size;
        if self.w == 0 || self.h == 0 {
            return Err(Error::Format(format!("empty box {self:?}")));
        }
        if self.x + self.w > iw || self.y + self.h > ih {
            return Err(Error::Format(format!("box {self:?} exceeds image {ih}x{iw}")));
        }
        if self.class_id >= num_classes {
            return Err(Error::Format(format!("box class {} >= {num_classes}", self.class_id)));
        }
        Ok(())
    }
}

/// Binary pixel set over an `H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl Region {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let pixels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, pixels }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "region of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(map: &Tensor, threshold: f64) -> Result<Self> {
        if map.rank() != 2 {
            return Err(Error::Shape(format!("expected [H,W] map, got {:?}", map.shape())));
        }
        Ok(Self {
            height: map.shape()[0],
            width: map.shape()[1],
            pixels: map.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn from_box(b: &BoxAnnotation, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |r, c| b.contains(r, c))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    fn check_grid(&self, other: &Region) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "regions on different grids"
        );
    }

    pub fn union(&self, other: &Region) -> Region {
        self.check_grid(other);
        Region {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersection(&self, other: &Region) -> Region {
        self.check_grid(other);
        Region {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn intersection_area(&self, other: &Region) -> usize {
        self.check_grid(other);
        self.pixels.iter().zip(&other.pixels).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_area(&self, other: &Region) -> usize {
        self.check_grid(other);
        self.pixels.iter().zip(&other.pixels).filter(|(a, b)| **a || **b).count()
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.check_grid(other);
        self.pixels.iter().zip(&other.pixels).all(|(a, b)| !*a || *b)
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self, class_id: usize) -> Option<BoxAnnotation> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX).then(|| BoxAnnotation {
            class_id,
            x: c0,
            y: r0,
            w: c1 - c0 + 1,
            h: r1 - r0 + 1,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        )
        .expect("region tensor")
    }
}

/// Rasterized ground truth for one class of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub class_id: usize,
    pub region: Region,
}

impl BinaryMask {
    pub fn sum(&self) -> usize {
        self.region.area()
    }
}

/// Where a training mask came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OriginalBox,
    RefinedIntersection,
}

/// A box mask, possibly narrowed by self-refinement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinedAnnotation {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

/// Union of filled rectangles for the given boxes (all expected to share one class).
pub fn mask_from_boxes(boxes: &[BoxAnnotation], class_id: usize, image_size: (usize, usize)) -> BinaryMask {
    let (h, w) = image_size;
    let mut region = Region::empty(h, w);
    for b in boxes.iter().filter(|b| b.class_id == class_id) {
        for r in b.y..(b.y + b.h).min(h) {
            for c in b.x..(b.x + b.w).min(w) {
                region.set(r, c, true);
            }
        }
    }
    BinaryMask { class_id, region }
}
