//! Procedural image corpus: seeded compositions of gradients, ellipses and
//! rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numgrad::Tensor;

const DATASET_STREAM: u64 = 61;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, cos: f64, sin: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        if rng.random_bool(0.5) {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cx: rng.random_range(0.0..1.0),
                cy: rng.random_range(0.0..1.0),
                rx: rng.random_range(0.08..0.45),
                ry: rng.random_range(0.08..0.45),
                cos: angle.cos(),
                sin: angle.sin(),
            }
        } else {
            let (w, h) = (rng.random_range(0.1..0.7), rng.random_range(0.1..0.7));
            let (x0, y0) = (rng.random_range(-0.1..0.9), rng.random_range(-0.1..0.9));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn render(rng: &mut ChaCha8Rng, res: usize) -> Result<Image> {
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let n_shapes = rng.random_range(2..=5);
    let shapes: Vec<(Shape, [f64; 3], f64)> = (0..n_shapes)
        .map(|_| (Shape::random(rng), color(rng), rng.random_range(0.6..1.0)))
        .collect();

    let mut data = Vec::with_capacity(res * res * 3);
    for i in 0..res {
        for j in 0..res {
            let (x, y) = ((j as f64 + 0.5) / res as f64, (i as f64 + 0.5) / res as f64);
            let t = (((x - 0.5) * gx + (y - 0.5) * gy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for (shape, col, alpha) in &shapes {
                if shape.contains(x, y) {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + col[c] * alpha;
                    }
                }
            }
            data.extend_from_slice(&px);
        }
    }
    Image::new(Tensor::new(vec![res, res, 3], data)?)
}

/// `count` deterministic 8-bit-quantized images of `resolution × resolution`
/// pixels.
pub fn gen_toy_dataset(seed: u64, count: usize, resolution: usize) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(Error::arg("dataset count must be >= 1"));
    }
    if resolution == 0 {
        return Err(Error::arg("resolution must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATASET_STREAM);
    (0..count).map(|_| render(&mut rng, resolution).map(|im| im.quantized())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pixels() {
        let a = gen_toy_dataset(1, 10, 32).unwrap();
        let b = gen_toy_dataset(1, 10, 32).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_dataset(2, 10, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_in_unit_range() {
        for im in gen_toy_dataset(3, 20, 64).unwrap() {
            assert_eq!(im.tensor().shape(), &[64, 64, 3]);
            assert!(im.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_empty() {
        assert!(gen_toy_dataset(0, 0, 64).is_err());
    }
}
