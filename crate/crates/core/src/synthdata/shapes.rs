use rand::Rng;
use serde::{Deserialize, Serialize};

/// Lesion shape families. `size` is a radius-like scale in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Filled disk of radius `size`.
    Blob,
    /// Annulus with outer radius `size` and inner radius `RING_INNER * size`.
    Ring,
    /// Thin bar of half-length `size` at a random angle.
    Streak,
    /// Several small dots scattered within radius `size`.
    SpeckleCluster,
    /// Circular sector of radius `size` spanning 90 to 180 degrees.
    Wedge,
}

const RING_INNER: f64 = 0.55;
const STREAK_HALF_WIDTH: f64 = 1.1;
const SPECKLE_RADIUS: f64 = 1.3;
const SPECKLE_COUNT: (usize, usize) = (3, 6);

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Blob,
        ShapeFamily::Ring,
        ShapeFamily::Streak,
        ShapeFamily::SpeckleCluster,
        ShapeFamily::Wedge,
    ];

    /// Largest distance from the centre that a lesion of this size covers.
    pub fn extent(self, size: f64) -> f64 {
        match self {
            ShapeFamily::Streak => size + STREAK_HALF_WIDTH,
            ShapeFamily::SpeckleCluster => size + SPECKLE_RADIUS,
            _ => size,
        }
    }

    /// Marks the pixels whose centres fall inside the lesion.
    pub(crate) fn render<R: Rng + ?Sized>(
        self,
        mask: &mut [bool],
        n: usize,
        c: (f64, f64),
        size: f64,
        rng: &mut R,
    ) {
        let mut paint = |inside: &dyn Fn(f64, f64) -> bool| {
            for y in 0..n {
                for x in 0..n {
                    if inside(x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1) {
                        mask[y * n + x] = true;
                    }
                }
            }
        };
        match self {
            ShapeFamily::Blob => paint(&|dx, dy| dx * dx + dy * dy <= size * size),
            ShapeFamily::Ring => {
                let inner = RING_INNER * size;
                paint(&|dx, dy| {
                    let d2 = dx * dx + dy * dy;
                    d2 <= size * size && d2 > inner * inner
                })
            }
            ShapeFamily::Streak => {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let (ux, uy) = (theta.cos(), theta.sin());
                paint(&|dx, dy| {
                    let along = dx * ux + dy * uy;
                    let across = -dx * uy + dy * ux;
                    along.abs() <= size && across.abs() <= STREAK_HALF_WIDTH
                })
            }
            ShapeFamily::SpeckleCluster => {
                let k = rng.random_range(SPECKLE_COUNT.0..=SPECKLE_COUNT.1);
                let dots: Vec<(f64, f64)> = (0..k)
                    .map(|_| {
                        let r = size * rng.random_range(0.0f64..1.0).sqrt();
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                let r2 = SPECKLE_RADIUS * SPECKLE_RADIUS;
                paint(&|dx, dy| {
                    dots.iter()
                        .any(|&(ox, oy)| (dx - ox).powi(2) + (dy - oy).powi(2) <= r2)
                })
            }
            ShapeFamily::Wedge => {
                let start = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let span = rng.random_range(std::f64::consts::FRAC_PI_2..std::f64::consts::PI);
                paint(&|dx, dy| {
                    if dx * dx + dy * dy > size * size {
                        return false;
                    }
                    let rel = (dy.atan2(dx) - start).rem_euclid(std::f64::consts::TAU);
                    rel <= span
                })
            }
        }
    }
}
