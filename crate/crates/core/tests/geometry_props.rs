use proptest::prelude::*;
use tph_core::geometry::{clip_boxes, transform_boxes, Direction};
use tph_core::{iou, BBox, ImageSize, ScoredBox, ViewTransform};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..2000.0f64, 0.0..2000.0f64, 0.0..500.0f64, 0.0..500.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn size() -> impl Strategy<Value = ImageSize> {
    (1usize..4000, 1usize..4000).prop_map(|(w, h)| ImageSize::new(w, h).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn iou_with_itself_is_one(a in bbox()) {
        prop_assume!(a.area() > 0.0);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_scale_invariant(a in bbox(), b in bbox(), k in 0.01..100.0f64) {
        prop_assert!((iou(&a.scale(k), &b.scale(k)) - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn construction_orders_corners(x1 in -100.0..100.0f64, y1 in -100.0..100.0f64, x2 in -100.0..100.0f64, y2 in -100.0..100.0f64) {
        let b = BBox::new(x1, y1, x2, y2);
        prop_assert!(b.x1 <= b.x2 && b.y1 <= b.y2 && b.area() >= 0.0);
    }

    #[test]
    fn view_round_trip(boxes in prop::collection::vec(bbox(), 0..20), scale in 0.1..4.0f64, hflip: bool, src in size()) {
        let v = ViewTransform::new(scale, hflip, src).unwrap();
        let dets: Vec<ScoredBox> = boxes.iter().map(|b| ScoredBox::new(*b, 0.5, 1)).collect();
        let back = transform_boxes(&transform_boxes(&dets, &v, Direction::Forward), &v, Direction::Inverse);
        for (a, b) in dets.iter().zip(&back) {
            for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
            prop_assert_eq!(a.score, b.score);
            prop_assert_eq!(a.class_id, b.class_id);
        }
    }

    #[test]
    fn double_flip_is_identity(b in bbox(), src in size()) {
        let v = ViewTransform::new(1.0, true, src).unwrap();
        let twice = v.apply(&v.apply(&b, Direction::Forward), Direction::Forward);
        for (x, y) in b.to_array().iter().zip(twice.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn clipped_boxes_lie_inside(boxes in prop::collection::vec(bbox(), 0..20), src in size()) {
        let dets: Vec<ScoredBox> = boxes.iter().map(|b| ScoredBox::new(*b, 0.5, 0)).collect();
        for d in clip_boxes(&dets, src) {
            prop_assert!(d.bbox.x1 >= 0.0 && d.bbox.y1 >= 0.0);
            prop_assert!(d.bbox.x2 <= src.width as f64 && d.bbox.y2 <= src.height as f64);
            prop_assert!(d.bbox.area() > 0.0);
        }
    }
}
