use std::collections::VecDeque;

use crate::data::{BoxAnnotation, Region};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_MIN_AREA: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Connected components in raster order of their first pixel.
pub fn connected_components(region: &Region, connectivity: Connectivity) -> Vec<Region> {
    let (h, w) = (region.height(), region.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !region.pixels()[start] {
            continue;
        }
        let mut comp = Region::empty(h, w);
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            comp.set(r, c, true);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !seen[j] && region.pixels()[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Boxes of the retained components and the union of their pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedRegions {
    pub boxes: Vec<BoxAnnotation>,
    pub mask: Region,
}

/// Binarizes `map: [H,W]` at `value > bin_threshold`, keeps 8-connected components of
/// at least `min_area` pixels, and returns each component's tight box.
pub fn attention_to_regions(map: &Tensor, class_id: usize, bin_threshold: f64, min_area: usize) -> Result<ExtractedRegions> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("expected an [H,W] map, got {:?}", map.shape())));
    }
    let binary = Region::threshold(map, bin_threshold)?;
    let mut mask = Region::empty(binary.height(), binary.width());
    let mut boxes = Vec::new();
    for comp in connected_components(&binary, Connectivity::Eight) {
        if comp.area() < min_area {
            continue;
        }
        boxes.push(comp.bounding_box(class_id).expect("nonempty component"));
        mask = mask.union(&comp);
    }
    Ok(ExtractedRegions { boxes, mask })
}
