//! Panoptic scenes and their JSON wire form.

use crate::raster::{Mask, Rgb8Image};
use crate::rle::{Rle, RleError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Thing,
    Stuff,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: u32,
    pub category: String,
    pub kind: SegmentKind,
    pub mask: Mask,
}

impl Segment {
    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

/// One element of the panoptic JSON list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: u32,
    pub category: String,
    pub kind: SegmentKind,
    pub rle_mask: Rle,
}

impl From<&Segment> for SegmentRecord {
    fn from(s: &Segment) -> Self {
        SegmentRecord {
            id: s.id,
            category: s.category.clone(),
            kind: s.kind,
            rle_mask: Rle::encode(&s.mask),
        }
    }
}

impl TryFrom<&SegmentRecord> for Segment {
    type Error = RleError;

    fn try_from(r: &SegmentRecord) -> Result<Self, Self::Error> {
        Ok(Segment { id: r.id, category: r.category.clone(), kind: r.kind, mask: r.rle_mask.decode()? })
    }
}

pub fn segments_to_json(segments: &[Segment]) -> serde_json::Value {
    let records: Vec<SegmentRecord> = segments.iter().map(SegmentRecord::from).collect();
    serde_json::to_value(records).expect("segment records serialize")
}

#[derive(Debug, thiserror::Error)]
pub enum PanopticParseError {
    #[error("malformed panoptic json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("segment rle: {0}")]
    Rle(#[from] RleError),
}

pub fn segments_from_json(value: &serde_json::Value) -> Result<Vec<Segment>, PanopticParseError> {
    let records: Vec<SegmentRecord> = serde_json::from_value(value.clone())?;
    Ok(records.iter().map(Segment::try_from).collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug)]
pub struct PanopticScene {
    pub image: Rgb8Image,
    pub segments: Vec<Segment>,
}

impl PanopticScene {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.height() * self.width()
    }

    /// Index of the segment owning each pixel (first match wins).
    pub fn owner_grid(&self) -> Vec<Option<usize>> {
        let (h, w) = (self.height(), self.width());
        let mut grid = vec![None; h * w];
        for (si, seg) in self.segments.iter().enumerate() {
            for (i, &v) in seg.mask.data().iter().enumerate() {
                if v != 0 && grid[i].is_none() {
                    grid[i] = Some(si);
                }
            }
        }
        grid
    }

    /// Number of pixels not covered by any segment.
    pub fn coverage_gaps(&self) -> usize {
        self.owner_grid().iter().filter(|o| o.is_none()).count()
    }

    /// Number of pixels claimed by more than one segment.
    pub fn overlaps(&self) -> usize {
        let mut counts = vec![0u8; self.pixel_count()];
        for seg in &self.segments {
            for (i, &v) in seg.mask.data().iter().enumerate() {
                counts[i] = counts[i].saturating_add(v);
            }
        }
        counts.iter().filter(|&&c| c > 1).count()
    }

    pub fn stuff_mask(&self) -> Mask {
        let (h, w) = (self.height(), self.width());
        let mut m = Mask::zeros(h, w);
        for seg in self.segments.iter().filter(|s| s.kind == SegmentKind::Stuff) {
            m = m.union(&seg.mask);
        }
        m
    }

    /// Stuff categories ordered by descending area (ties by name), areas
    /// summed across segments sharing a category. Pixels under `exclude`
    /// are not counted.
    pub fn stuff_by_area(&self, exclude: Option<&Mask>) -> Vec<(String, usize)> {
        let mut areas: BTreeMap<String, usize> = BTreeMap::new();
        for seg in self.segments.iter().filter(|s| s.kind == SegmentKind::Stuff) {
            let a = match exclude {
                Some(ex) => seg.area() - seg.mask.intersection_area(ex),
                None => seg.area(),
            };
            if a > 0 {
                *areas.entry(seg.category.clone()).or_default() += a;
            }
        }
        let mut v: Vec<_> = areas.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

/// Count of 4-neighbour pixel pairs `(p, q)` with `p` in `region` (and not
/// in `mask`) and `q` in `mask`.
pub fn boundary_adjacency(region: &Mask, mask: &Mask) -> usize {
    let (h, w) = region.dims();
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !region.get(y, x) || mask.get(y, x) {
                continue;
            }
            let neighbours = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            n += neighbours.iter().filter(|&&(ny, nx)| ny < h && nx < w && mask.get(ny, nx)).count();
        }
    }
    n
}
