#![allow(dead_code)]

use ndarray::Array3;
use rand::Rng;
use tph_core::augmentation::{seeded_rng, Label, Sample};
use tph_core::BBox;

pub const PALETTE: [[f64; 3]; 3] = [
    [200.0, 50.0, 50.0],
    [50.0, 200.0, 50.0],
    [50.0, 50.0, 200.0],
];

/// A 256 x 256 scene on a 4 x 4 grid; each cell holds at most one object
/// whose color identifies its class (1, 2 or 3).
pub fn color_scene(seed: u64) -> Sample {
    let mut rng = seeded_rng(seed, 0);
    let mut image = Array3::from_shape_fn((256, 256, 3), |_| 0.0);
    image
        .iter_mut()
        .for_each(|v| *v = rng.random_range(90.0..140.0));
    let mut labels = Vec::new();
    for gy in 0..4 {
        for gx in 0..4 {
            if rng.random_bool(0.25) {
                continue;
            }
            let class = rng.random_range(1..=3usize);
            let w = rng.random_range(12..48) as f64;
            let h = rng.random_range(12..48) as f64;
            let x0 = gx as f64 * 64.0 + rng.random_range(0.0..(64.0 - w));
            let y0 = gy as f64 * 64.0 + rng.random_range(0.0..(64.0 - h));
            let b = BBox::new(x0.floor(), y0.floor(), (x0 + w).floor(), (y0 + h).floor());
            for y in b.y1 as usize..b.y2 as usize {
                for x in b.x1 as usize..b.x2 as usize {
                    for c in 0..3 {
                        image[[y, x, c]] = (PALETTE[class - 1][c] + rng.random_range(-30.0..30.0))
                            .clamp(0.0, 255.0);
                    }
                }
            }
            labels.push(Label::new(class, b));
        }
    }
    Sample::new(image, labels).expect("three channels")
}
