use rand::Rng;

use super::mask::{BinaryMask, BoxAnnotation, RefinedAnnotation, Region};
use super::Sample;
use crate::numerics::Tensor;

/// Horizontal flip (applied first) followed by an integer translation.
/// Pixels shifted in from outside the image are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub dx: isize,
    pub dy: isize,
}

impl Transform {
    /// Flip with probability 1/2 and shift by up to 10% of each extent.
    pub fn random<R: Rng>(rng: &mut R, image_size: (usize, usize)) -> Self {
        let (h, w) = image_size;
        let my = (h / 10) as isize;
        let mx = (w / 10) as isize;
        Self {
            flip: rng.gen_bool(0.5),
            dx: rng.gen_range(-mx..=mx),
            dy: rng.gen_range(-my..=my),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.dx == 0 && self.dy == 0
    }

    /// Transformed box clipped to the image, or `None` if nothing remains inside.
    pub fn apply_box(&self, b: &BoxAnnotation, image_size: (usize, usize)) -> Option<BoxAnnotation> {
        let (h, w) = (image_size.0 as isize, image_size.1 as isize);
        let mut x0 = b.x as isize;
        if self.flip {
            x0 = w - x0 - b.w as isize;
        }
        let x0 = x0 + self.dx;
        let y0 = b.y as isize + self.dy;
        let x1 = (x0 + b.w as isize).min(w);
        let y1 = (y0 + b.h as isize).min(h);
        let (x0, y0) = (x0.max(0), y0.max(0));
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        Some(BoxAnnotation {
            class_id: b.class_id,
            x: x0 as usize,
            y: y0 as usize,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        })
    }

    pub fn apply_image(&self, image: &Tensor) -> Tensor {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for r in 0..h {
                let sr = r as isize - self.dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for col in 0..w {
                    let mut sc = col as isize - self.dx;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    if self.flip {
                        sc = w as isize - 1 - sc;
                    }
                    out[(ch * h + r) * w + col] = src[(ch * h + sr as usize) * w + sc as usize];
                }
            }
        }
        Tensor::new(image.shape(), out).expect("same shape")
    }

    pub fn apply_region(&self, region: &Region) -> Region {
        let (h, w) = (region.height(), region.width());
        let img = Tensor::new(&[1, h, w], region.to_tensor().into_data()).expect("region shape");
        let moved = self.apply_image(&img);
        Region::from_pixels(h, w, moved.data().iter().map(|&v| v > 0.5).collect()).expect("region shape")
    }
}

/// Applies `t` to image and boxes. Labels are untouched; a box pushed entirely
/// outside the image is dropped.
pub fn apply_transform(sample: &Sample, t: Transform) -> Sample {
    if t.is_identity() {
        return sample.clone();
    }
    let size = sample.image_size();
    Sample {
        id: sample.id.clone(),
        image: t.apply_image(&sample.image),
        labels: sample.labels.clone(),
        boxes: sample.boxes.iter().filter_map(|b| t.apply_box(b, size)).collect(),
        refined: sample
            .refined
            .iter()
            .map(|r| RefinedAnnotation {
                class_id: r.class_id,
                mask: BinaryMask {
                    class_id: r.class_id,
                    region: t.apply_region(&r.mask.region),
                },
                provenance: r.provenance,
            })
            .collect(),
    }
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let t = Transform::random(rng, sample.image_size());
    apply_transform(sample, t)
}
