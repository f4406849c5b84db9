//! Label statistics over a set of annotated images.

use std::collections::BTreeMap;

use serde::Serialize;

use super::visdrone::{category_name, VisDroneRecord, IGNORED_REGION, OTHERS};
use crate::augmentation::{TinyCriterion, TinyRule};
use crate::geometry::ImageSize;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub size: ImageSize,
    pub records: Vec<VisDroneRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TinyCounts {
    pub max_side: usize,
    pub min_side: usize,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    /// Every record, including ignored regions and "others".
    pub total: usize,
    /// Counts for categories 1 to 10, keyed by category name.
    pub per_category: BTreeMap<String, usize>,
    pub ignored_regions: usize,
    pub others: usize,
    /// The rule used for `tiny`.
    pub tiny_rule: TinyRule,
    /// Object labels (every category except ignored regions) that the rule marks as tiny.
    pub tiny: usize,
    /// The same count under each size criterion.
    pub tiny_by_criterion: TinyCounts,
    /// Per image: category id to count.
    pub per_image: BTreeMap<String, BTreeMap<u8, usize>>,
}

impl DatasetStats {
    pub fn category_total(&self) -> usize {
        self.per_category.values().sum()
    }
}

pub fn dataset_stats(images: &[AnnotatedImage], rule: &TinyRule) -> DatasetStats {
    let mut per_category: BTreeMap<String, usize> = (1..=10)
        .map(|id| (category_name(id).expect("known id").to_string(), 0))
        .collect();
    let mut ignored_regions = 0;
    let mut others = 0;
    let mut total = 0;
    let mut tiny = 0;
    let mut by = TinyCounts::default();
    let mut per_image = BTreeMap::new();
    let with = |criterion| TinyRule { criterion, ..*rule };
    let (max_rule, min_rule, area_rule) = (
        with(TinyCriterion::MaxSide),
        with(TinyCriterion::MinSide),
        with(TinyCriterion::Area),
    );
    for img in images {
        let hist: &mut BTreeMap<u8, usize> = per_image.entry(img.image_id.clone()).or_default();
        for r in &img.records {
            total += 1;
            *hist.entry(r.category).or_default() += 1;
            match r.category {
                IGNORED_REGION => {
                    ignored_regions += 1;
                    continue;
                }
                OTHERS => others += 1,
                id => {
                    *per_category
                        .get_mut(category_name(id).expect("validated"))
                        .expect("seeded") += 1
                }
            }
            let b = r.bbox();
            tiny += usize::from(rule.is_tiny(&b, img.size));
            by.max_side += usize::from(max_rule.is_tiny(&b, img.size));
            by.min_side += usize::from(min_rule.is_tiny(&b, img.size));
            by.area += usize::from(area_rule.is_tiny(&b, img.size));
        }
    }
    DatasetStats {
        images: images.len(),
        total,
        per_category,
        ignored_regions,
        others,
        tiny_rule: *rule,
        tiny,
        tiny_by_criterion: by,
        per_image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::visdrone::parse_visdrone;

    fn image(id: &str, w: usize, h: usize, text: &str) -> AnnotatedImage {
        AnnotatedImage {
            image_id: id.into(),
            size: ImageSize::new(w, h).unwrap(),
            records: parse_visdrone(text).unwrap(),
        }
    }

    #[test]
    fn counts_and_totals() {
        let cars = "10,10,20,20,1,4,0,0\n".repeat(5);
        let imgs = vec![
            image("a", 1536, 1000, &cars),
            image(
                "b",
                1536,
                1000,
                "0,0,2,2,1,1,0,0\n5,5,50,50,0,0,0,0\n9,9,30,30,0,11,0,0\n",
            ),
        ];
        let s = dataset_stats(&imgs, &TinyRule::default());
        assert_eq!(s.per_category["car"], 5);
        assert_eq!(s.tiny, 1);
        assert_eq!(s.total, s.category_total() + s.ignored_regions + s.others);
        assert_eq!((s.ignored_regions, s.others), (1, 1));
        assert_eq!(s.per_image["b"][&0], 1);
    }

    #[test]
    fn tiny_depends_on_reference_scale() {
        // 2 px at 768 becomes 4 px at 1536
        let s = dataset_stats(
            &[image("a", 768, 400, "0,0,2,2,1,1,0,0\n")],
            &TinyRule::default(),
        );
        assert_eq!(s.tiny, 0);
    }
}
