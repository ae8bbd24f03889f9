//! Pinhole rendering of a flat road with a constant-curvature centerline.
//!
//! Camera at height `camera_height` above the ground, looking along +Z with
//! zero pitch and roll. A ground pixel at `k` rows below the horizon lies at
//! depth `Z = f * camera_height / k`, lateral position `X = (x - cx) * Z / f`.

use super::{HardCase, SceneParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Horizon row as a fraction of image height.
pub const HORIZON_FRACTION: f64 = 0.38;
/// Horizontal field of view, degrees.
pub const FIELD_OF_VIEW_DEG: f64 = 70.0;
/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 2;

const SKY_TOP: f64 = 0.62;
const SKY_HORIZON: f64 = 0.88;
const GRASS: f64 = 0.42;
const ASPHALT: f64 = 0.2;
const MARKING: f64 = 0.95;
const EDGE_LINE_WIDTH: f64 = 0.3;
const CENTER_LINE_WIDTH: f64 = 0.3;
const HAZE_DISTANCE: f64 = 90.0;
const MAX_DEPTH: f64 = 150.0;

/// Overlay geometry, in pixels.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn radius2(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx
    }
}

pub(super) struct Camera {
    height: usize,
    width: usize,
    focal: f64,
    horizon: f64,
    cx: f64,
}

impl Camera {
    pub(super) fn new(height: usize, width: usize) -> Self {
        let focal = width as f64 / (2.0 * (FIELD_OF_VIEW_DEG.to_radians() / 2.0).tan());
        Self {
            height,
            width,
            focal,
            horizon: HORIZON_FRACTION * height as f64,
            cx: width as f64 / 2.0,
        }
    }

    /// Image column of the road centerline at depth `z`.
    fn centerline_column(&self, curvature: f64, z: f64) -> f64 {
        let x = if curvature.abs() < 1e-9 {
            0.0
        } else {
            let r = 1.0 / curvature;
            r - r.signum() * (r * r - z * z).max(0.0).sqrt()
        };
        self.cx + x * self.focal / z
    }

    fn row_of_depth(&self, z: f64, camera_height: f64) -> f64 {
        self.horizon + self.focal * camera_height / z
    }
}

/// Signed lateral offset from the centerline and arc length along it of the
/// ground point `(x, z)`.
fn road_coordinates(curvature: f64, x: f64, z: f64) -> (f64, f64) {
    if curvature.abs() < 1e-9 {
        return (x, z);
    }
    let r = 1.0 / curvature;
    let sign = r.signum();
    let dist = ((x - r) * (x - r) + z * z).sqrt();
    let offset = sign * (r.abs() - dist);
    let angle = z.atan2(r.abs() - sign * x);
    (offset, r.abs() * angle)
}

fn ground_shade(p: &SceneParams, markings: bool, x: f64, z: f64) -> f64 {
    let (d, s) = road_coordinates(p.curvature, x, z);
    let half = p.lane_width;
    let ad = d.abs();
    let mut v = if ad <= half { ASPHALT } else { GRASS };
    if markings {
        if ad <= half && ad >= half - EDGE_LINE_WIDTH {
            v = MARKING;
        }
        if ad <= CENTER_LINE_WIDTH / 2.0 && s.rem_euclid(p.marking_period) < p.marking_period / 2.0 {
            v = MARKING;
        }
    }
    let haze = 1.0 - (-z / HAZE_DISTANCE).exp();
    v + (SKY_HORIZON - v) * haze
}

fn sky_shade(cam: &Camera, y: f64) -> f64 {
    let t = (y / cam.horizon).clamp(0.0, 1.0);
    SKY_TOP + (SKY_HORIZON - SKY_TOP) * t
}

/// Noise-free scene, before any overlay, as a row-major plane.
pub(super) fn shade_plane(cam: &Camera, p: &SceneParams, markings: bool) -> Vec<f64> {
    let mut out = vec![0.0; cam.height * cam.width];
    let step = 1.0 / SUPERSAMPLE as f64;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                let y = row as f64 + (sy as f64 + 0.5) * step;
                for sx in 0..SUPERSAMPLE {
                    let xpix = col as f64 + (sx as f64 + 0.5) * step;
                    let below = y - cam.horizon;
                    acc += if below <= 0.0 {
                        sky_shade(cam, y)
                    } else {
                        let z = cam.focal * p.camera_height / below;
                        if z > MAX_DEPTH {
                            SKY_HORIZON
                        } else {
                            let x = (xpix - cam.cx) * z / cam.focal;
                            ground_shade(p, markings, x, z)
                        }
                    };
                }
            }
            out[row * cam.width + col] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

/// Ellipse over the far stretch of road, where curvature shows most.
fn far_road_ellipse(cam: &Camera, p: &SceneParams, rng: &mut Rng) -> Ellipse {
    let z = rng.uniform(14.0, 30.0);
    let ground_rows = cam.height as f64 - cam.horizon;
    Ellipse {
        cy: cam.row_of_depth(z, p.camera_height),
        cx: cam.centerline_column(p.curvature, z) + rng.uniform(-0.05, 0.05) * cam.width as f64,
        ry: rng.uniform(0.18, 0.3) * ground_rows,
        rx: rng.uniform(0.22, 0.35) * cam.width as f64,
    }
}

fn apply_overlay(cam: &Camera, p: &SceneParams, plane: &mut [f64], rng: &mut Rng) {
    match p.hard_case {
        HardCase::None => {}
        HardCase::OccludedMarkings => {
            let e = far_road_ellipse(cam, p, rng);
            let shade = rng.uniform(0.05, 0.15);
            for (i, v) in plane.iter_mut().enumerate() {
                let (y, x) = ((i / cam.width) as f64 + 0.5, (i % cam.width) as f64 + 0.5);
                if e.radius2(y, x) <= 1.0 {
                    *v = shade;
                }
            }
        }
        HardCase::GlarePatch => {
            let e = far_road_ellipse(cam, p, rng);
            let strength = rng.uniform(1.2, 1.8);
            for (i, v) in plane.iter_mut().enumerate() {
                let (y, x) = ((i / cam.width) as f64 + 0.5, (i % cam.width) as f64 + 0.5);
                *v += strength * (-e.radius2(y, x)).exp();
            }
        }
        HardCase::LowContrast => {
            for v in plane.iter_mut() {
                *v = 0.5 + 0.15 * (*v - 0.5);
            }
        }
    }
}

/// Renders one frame: shading, hard-case overlay, clipped Gaussian noise.
pub(super) fn render_plane(p: &SceneParams, rng: &mut Rng, height: usize, width: usize) -> Vec<f32> {
    let cam = Camera::new(height, width);
    let markings = p.hard_case != HardCase::OccludedMarkings;
    let mut plane = shade_plane(&cam, p, markings);
    apply_overlay(&cam, p, &mut plane, rng);
    let sigma = if p.hard_case == HardCase::LowContrast {
        3.0 * p.noise_sigma
    } else {
        p.noise_sigma
    };
    plane
        .into_iter()
        .map(|v| {
            let noisy = if sigma > 0.0 { v + sigma * rng.normal() } else { v };
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect()
}

pub(super) fn plane_tensor(plane: Vec<f32>, height: usize, width: usize) -> Tensor {
    Tensor::new(vec![1, height, width], plane).expect("plane matches dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_road_coordinates_are_cartesian() {
        assert_eq!(road_coordinates(0.0, 1.5, 20.0), (1.5, 20.0));
    }

    #[test]
    fn points_on_the_arc_have_zero_offset() {
        for &k in &[0.02, -0.02, 0.035] {
            let r: f64 = 1.0 / k;
            for &theta in &[0.1f64, 0.4, 0.9] {
                let x = r - r * theta.cos();
                let z = r.abs() * theta.sin();
                let (d, s) = road_coordinates(k, x, z);
                assert!(d.abs() < 1e-9, "k {k} theta {theta}: offset {d}");
                assert!((s - r.abs() * theta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn positive_offset_is_to_the_right() {
        for &k in &[0.0, 0.02, -0.02] {
            let (d, _) = road_coordinates(k, 0.5, 0.0);
            assert!((d - 0.5).abs() < 1e-9, "k {k}: {d}");
        }
    }

    #[test]
    fn centerline_bends_with_curvature() {
        let cam = Camera::new(34, 96);
        assert_eq!(cam.centerline_column(0.0, 20.0), 48.0);
        assert!(cam.centerline_column(0.02, 20.0) > 48.0);
        assert!(cam.centerline_column(-0.02, 20.0) < 48.0);
    }
}
