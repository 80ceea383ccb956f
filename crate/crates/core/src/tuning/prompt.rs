use super::{TuningError, PLACEHOLDER};
use crate::panoptic::{boundary_adjacency, Segment, SegmentKind};
use crate::raster::Mask;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A background (stuff) category with its contact against the erase mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundTag {
    pub name: String,
    /// 4-neighbour boundary pairs shared with the erase mask.
    pub adjacency: usize,
    /// Pixel area outside the erase mask.
    pub area: usize,
}

/// The two largest stuff categories outside the erase mask, largest first.
pub fn background_tags(segments: &[Segment], erase_mask: &Mask) -> Vec<BackgroundTag> {
    let mut by_cat: BTreeMap<&str, (Mask, usize)> = BTreeMap::new();
    for seg in segments.iter().filter(|s| s.kind == SegmentKind::Stuff) {
        let area = seg.area() - seg.mask.intersection_area(erase_mask);
        let entry = by_cat
            .entry(seg.category.as_str())
            .or_insert_with(|| (Mask::zeros(seg.mask.height(), seg.mask.width()), 0));
        entry.0 = entry.0.union(&seg.mask);
        entry.1 += area;
    }
    let mut tags: Vec<BackgroundTag> = by_cat
        .into_iter()
        .filter(|(_, (_, area))| *area > 0)
        .map(|(name, (region, area))| BackgroundTag {
            name: name.to_string(),
            adjacency: boundary_adjacency(&region, erase_mask),
            area,
        })
        .collect();
    tags.sort_by(|a, b| b.area.cmp(&a.area).then_with(|| a.name.cmp(&b.name)));
    tags.truncate(2);
    tags
}

/// `"A photo of R_* {tag}"` for the tag touching the erase mask the most
/// (ties go to the larger area, then to list order).
pub fn build_simple_prompt(tags: &[BackgroundTag]) -> Result<String, TuningError> {
    let best = tags
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.adjacency.cmp(&b.adjacency).then(a.area.cmp(&b.area)).then(ib.cmp(ia))
        })
        .map(|(_, t)| t)
        .ok_or(TuningError::NoBackgroundTag)?;
    Ok(format!("A photo of {PLACEHOLDER} {}", best.name))
}

/// Simple prompt when `u < 0.5`, caption otherwise.
pub fn prompt_mix<'a>(simple: &'a str, caption: &'a str, u: f64) -> &'a str {
    if u < 0.5 {
        simple
    } else {
        caption
    }
}
