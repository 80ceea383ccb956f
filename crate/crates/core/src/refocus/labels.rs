use super::RefocusError;
use crate::panoptic::{Segment, SegmentKind};
use crate::raster::Mask;
use std::collections::BTreeSet;

/// Per-token label. The derived order is the pooling priority:
/// `Mask > Negative > Positive`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
    Mask,
}

/// Row-major label grid for one attention resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self, RefocusError> {
        if labels.len() != height * width {
            return Err(RefocusError::ShapeMismatch(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of tokens `N`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Which segments are treated as object-like.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NegativeRule {
    pub categories: BTreeSet<String>,
    /// Treat every thing-segment as negative regardless of category.
    pub all_things: bool,
}

/// Categories of the thing-segments under the erase mask, plus every thing.
pub fn default_negative_rule(segments: &[Segment], erase_mask: &Mask) -> NegativeRule {
    let categories = segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Thing && s.mask.intersection_area(erase_mask) > 0)
        .map(|s| s.category.clone())
        .collect();
    NegativeRule { categories, all_things: true }
}

/// Label every pixel: erase mask wins, then negative segments, then the
/// rest. Returns the map and the number of pixels no segment covered (those
/// fall back to positive).
pub fn build_label_map(
    segments: &[Segment],
    erase_mask: &Mask,
    rule: &NegativeRule,
) -> Result<(LabelMap, usize), RefocusError> {
    let (h, w) = erase_mask.dims();
    let mut covered = vec![false; h * w];
    let mut labels = vec![Label::Positive; h * w];
    for seg in segments {
        if seg.mask.dims() != (h, w) {
            return Err(RefocusError::ShapeMismatch(format!(
                "segment {} is {:?}, erase mask is {:?}",
                seg.id,
                seg.mask.dims(),
                (h, w)
            )));
        }
        let negative = rule.categories.contains(&seg.category) || (rule.all_things && seg.kind == SegmentKind::Thing);
        for (i, &v) in seg.mask.data().iter().enumerate() {
            if v != 0 {
                covered[i] = true;
                if negative {
                    labels[i] = Label::Negative;
                }
            }
        }
    }
    for (i, &v) in erase_mask.data().iter().enumerate() {
        if v != 0 {
            labels[i] = Label::Mask;
        }
    }
    let gaps = covered.iter().zip(erase_mask.data()).filter(|(c, m)| !**c && **m == 0).count();
    if gaps > 0 {
        log::warn!("panoptic coverage gap: {gaps} pixels unlabeled, treated as positive");
    }
    Ok((LabelMap { height: h, width: w, labels }, gaps))
}

/// Priority pooling to a coarser grid. Each target cell covers source rows
/// `floor(i*H/h) .. ceil((i+1)*H/h)` (likewise for columns).
pub fn downsample_label_map(lm: &LabelMap, target_h: usize, target_w: usize) -> Result<LabelMap, RefocusError> {
    let (sh, sw) = (lm.height, lm.width);
    if target_h == 0 || target_w == 0 || target_h > sh || target_w > sw {
        return Err(RefocusError::InvalidTarget { target_h, target_w, source_h: sh, source_w: sw });
    }
    if (target_h, target_w) == (sh, sw) {
        return Ok(lm.clone());
    }
    let span = |i: usize, t: usize, s: usize| (i * s / t)..((i + 1) * s).div_ceil(t);
    let mut labels = Vec::with_capacity(target_h * target_w);
    for ty in 0..target_h {
        for tx in 0..target_w {
            let mut best = Label::Positive;
            for y in span(ty, target_h, sh) {
                for x in span(tx, target_w, sw) {
                    best = best.max(lm.get(y, x));
                }
            }
            labels.push(best);
        }
    }
    Ok(LabelMap { height: target_h, width: target_w, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn seg(id: u32, cat: &str, kind: SegmentKind, mask: Mask) -> Segment {
        Segment { id, category: cat.into(), kind, mask }
    }

    #[test]
    fn person_on_grass() {
        // 4x6: grass everywhere except two people; the left one is erased.
        let p1 = Mask::from_fn(4, 6, |y, x| y >= 1 && x == 1);
        let p2 = Mask::from_fn(4, 6, |y, x| y >= 1 && x == 4);
        let grass = Mask::from_fn(4, 6, |y, x| !(p1.get(y, x) || p2.get(y, x)));
        let segments = vec![
            seg(1, "grass", SegmentKind::Stuff, grass),
            seg(2, "person", SegmentKind::Thing, p1.clone()),
            seg(3, "person", SegmentKind::Thing, p2),
        ];
        let erase = p1;
        let rule = default_negative_rule(&segments, &erase);
        assert!(rule.categories.contains("person"));
        let (lm, gaps) = build_label_map(&segments, &erase, &rule).unwrap();
        assert_eq!(gaps, 0);
        assert_eq!(lm.get(2, 1), Label::Mask);
        assert_eq!(lm.get(2, 4), Label::Negative);
        assert_eq!(lm.get(0, 0), Label::Positive);
        assert_eq!(lm.get(0, 4), Label::Positive);
    }

    #[test]
    fn empty_erase_mask_has_no_mask_labels() {
        let all = Mask::ones(3, 3);
        let segments = vec![seg(1, "sky", SegmentKind::Stuff, all)];
        let (lm, _) = build_label_map(&segments, &Mask::zeros(3, 3), &NegativeRule::default()).unwrap();
        assert_eq!(lm.count(Label::Mask), 0);
    }

    #[test]
    fn gaps_fall_back_to_positive() {
        let part = Mask::from_fn(2, 2, |y, _| y == 0);
        let segments = vec![seg(1, "dog", SegmentKind::Thing, part)];
        let rule = NegativeRule { categories: BTreeSet::new(), all_things: true };
        let (lm, gaps) = build_label_map(&segments, &Mask::zeros(2, 2), &rule).unwrap();
        assert_eq!(gaps, 2);
        assert_eq!(lm.labels(), &[Label::Negative, Label::Negative, Label::Positive, Label::Positive]);
    }

    #[test]
    fn toy_panoptic_matches_brute_force() {
        // 4x4: stuff "road" rows 0-1, stuff "wall" rows 2-3, thing "car" on a 2x2 block
        // overlapping the erase mask.
        let car = Mask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let road = Mask::from_fn(4, 4, |y, x| y < 2 && !car.get(y, x));
        let wall = Mask::from_fn(4, 4, |y, x| y >= 2 && !car.get(y, x));
        let segments = vec![
            seg(1, "road", SegmentKind::Stuff, road.clone()),
            seg(2, "wall", SegmentKind::Stuff, wall),
            seg(3, "car", SegmentKind::Thing, car.clone()),
        ];
        let erase = Mask::from_fn(4, 4, |y, x| y == 1 && (1..4).contains(&x));
        let rule = default_negative_rule(&segments, &erase);
        let (lm, _) = build_label_map(&segments, &erase, &rule).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if erase.get(y, x) {
                    Label::Mask
                } else if car.get(y, x) {
                    Label::Negative
                } else {
                    Label::Positive
                };
                assert_eq!(lm.get(y, x), expected, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn downsample_identity_and_priority() {
        let lm = LabelMap::new(2, 2, vec![Label::Positive, Label::Positive, Label::Positive, Label::Mask]).unwrap();
        assert_eq!(downsample_label_map(&lm, 2, 2).unwrap(), lm);
        assert_eq!(downsample_label_map(&lm, 1, 1).unwrap().labels(), &[Label::Mask]);
        assert!(matches!(downsample_label_map(&lm, 3, 2), Err(RefocusError::InvalidTarget { .. })));
    }

    #[test]
    fn random_8x8_block_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let all = [Label::Positive, Label::Negative, Label::Mask];
        for _ in 0..50 {
            let labels: Vec<Label> = (0..64).map(|_| all[rng.random_range(0..3)]).collect();
            let lm = LabelMap::new(8, 8, labels.clone()).unwrap();
            let down = downsample_label_map(&lm, 4, 4).unwrap();
            for ty in 0..4 {
                for tx in 0..4 {
                    let block = [
                        labels[(2 * ty) * 8 + 2 * tx],
                        labels[(2 * ty) * 8 + 2 * tx + 1],
                        labels[(2 * ty + 1) * 8 + 2 * tx],
                        labels[(2 * ty + 1) * 8 + 2 * tx + 1],
                    ];
                    let expected = if block.contains(&Label::Mask) {
                        Label::Mask
                    } else if block.contains(&Label::Negative) {
                        Label::Negative
                    } else {
                        Label::Positive
                    };
                    assert_eq!(down.get(ty, tx), expected);
                }
            }
        }
    }

    #[test]
    fn non_divisible_target_covers_every_source_cell() {
        let mut labels = vec![Label::Positive; 25];
        labels[24] = Label::Mask;
        let lm = LabelMap::new(5, 5, labels).unwrap();
        let down = downsample_label_map(&lm, 2, 2).unwrap();
        assert_eq!(down.get(1, 1), Label::Mask);
        assert_eq!(down.count(Label::Mask), 1);
    }
}
