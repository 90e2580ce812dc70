//! Analytic synthetic scenes used as ground-truth oracles.
//!
//! Depth comes from exact ray–surface intersection and intensity from a
//! band-limited solid texture evaluated at the 3-D intersection point, so a
//! rendered pair is consistent with the view-synthesis warp up to bilinear
//! interpolation error.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::grid::{DepthMap, Grid, Image};

/// Intersections closer than this along the ray are ignored, mm.
const MIN_HIT_MM: f64 = 1e-6;

/// Wavelengths of the three texture octaves, mm.
const OCTAVE_WAVELENGTHS_MM: [f64; 3] = [24.0, 12.0, 6.5];
const OCTAVE_AMPLITUDES: [f64; 3] = [1.0, 0.6, 0.35];
const WAVES_PER_OCTAVE: usize = 2;
const WEAK_CONTRAST: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum SceneGeometry {
    /// Points `x` with `normal · x = offset` (normal need not be unit length).
    Plane { normal: [f64; 3], offset: f64 },
    /// Infinite circular cylinder.
    Tube {
        axis_point: [f64; 3],
        axis_dir: [f64; 3],
        radius: f64,
    },
}

/// File form of a scene: `{"kind": ..., "params": {...}, "texture_seed": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(flatten)]
    pub geometry: SceneGeometry,
    pub texture_seed: u64,
    #[serde(default)]
    pub weak_texture: bool,
}

impl SceneSpec {
    /// Slightly tilted plane whose centre is 50 mm in front of the reference camera.
    pub fn desk_plane(texture_seed: u64) -> Self {
        Self {
            geometry: SceneGeometry::Plane {
                normal: [0.15, -0.1, 1.0],
                offset: 50.0,
            },
            texture_seed,
            weak_texture: false,
        }
    }

    /// Tube of radius 20 mm seen from inside, the optical axis pitched 55°
    /// away from the tube axis so every pixel ray meets the wall.
    pub fn desk_tube(texture_seed: u64) -> Self {
        let pitch = 55f64.to_radians();
        Self {
            geometry: SceneGeometry::Tube {
                axis_point: [0.0, 4.0, 0.0],
                axis_dir: [0.0, pitch.sin(), pitch.cos()],
                radius: 20.0,
            },
            texture_seed,
            weak_texture: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Surface {
    Plane {
        normal: Vector3<f64>,
        offset: f64,
    },
    Tube {
        point: Vector3<f64>,
        axis: Vector3<f64>,
        radius: f64,
    },
}

/// Sum of seeded plane waves mapped into `[0.2, 0.8]` (or a tenth of that
/// swing around 0.5 in weak-texture mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    waves: Vec<(Vector3<f64>, f64, f64)>,
    norm: f64,
    contrast: f64,
}

impl Texture {
    pub fn new(seed: u64, weak: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::new();
        for (&lambda, &amp) in OCTAVE_WAVELENGTHS_MM.iter().zip(&OCTAVE_AMPLITUDES) {
            for _ in 0..WAVES_PER_OCTAVE {
                let dir = loop {
                    let v = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                let phase = rng.gen_range(0.0..TAU);
                waves.push((dir * (TAU / lambda), phase, amp));
            }
        }
        let norm = waves.iter().map(|w| w.2).sum();
        Self {
            waves,
            norm,
            contrast: if weak { WEAK_CONTRAST } else { 1.0 },
        }
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let s: f64 = self.waves.iter().map(|(k, ph, a)| a * (k.dot(x) + ph).sin()).sum();
        0.5 + 0.3 * self.contrast * s / self.norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    surface: Surface,
    texture: Texture,
}

impl Scene {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        let surface = match &spec.geometry {
            SceneGeometry::Plane { normal, offset } => {
                let n = Vector3::from(*normal);
                let len = n.norm();
                if !(len > 0.0) || !offset.is_finite() {
                    return Err(Error::domain("plane normal must be non-zero"));
                }
                if !(*offset > 0.0) {
                    return Err(Error::domain(format!(
                        "plane offset must be positive (in front of the reference camera), got {offset}"
                    )));
                }
                Surface::Plane {
                    normal: n / len,
                    offset: offset / len,
                }
            }
            SceneGeometry::Tube {
                axis_point,
                axis_dir,
                radius,
            } => {
                let a = Vector3::from(*axis_dir);
                if !(a.norm() > 0.0) {
                    return Err(Error::domain("tube axis must be non-zero"));
                }
                if !(*radius > 0.0) {
                    return Err(Error::domain(format!("tube radius must be positive, got {radius}")));
                }
                Surface::Tube {
                    point: Vector3::from(*axis_point),
                    axis: a.normalize(),
                    radius: *radius,
                }
            }
        };
        Ok(Self {
            surface,
            texture: Texture::new(spec.texture_seed, spec.weak_texture),
        })
    }

    pub fn texture(&self) -> &Texture {
        &self.texture
    }

    /// Smallest positive ray parameter `s` with `origin + s·dir` on the surface.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match &self.surface {
            Surface::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let s = (offset - normal.dot(origin)) / denom;
                (s > MIN_HIT_MM).then_some(s)
            }
            Surface::Tube { point, axis, radius } => {
                let w = origin - point;
                let w_perp = w - axis * w.dot(axis);
                let d_perp = dir - axis * dir.dot(axis);
                let a = d_perp.norm_squared();
                if a < 1e-15 {
                    return None;
                }
                let b = 2.0 * w_perp.dot(&d_perp);
                let c = w_perp.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                // Cancellation-free pair of roots.
                let q = -0.5 * (b + b.signum() * disc.sqrt());
                let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
                let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
                if lo > MIN_HIT_MM {
                    Some(lo)
                } else if hi > MIN_HIT_MM {
                    Some(hi)
                } else {
                    None
                }
            }
        }
    }
}

/// Colour ramp shared by all renders: the texture value drives three
/// correlated channels, all within `[0, 1]`.
fn shade(t: f64) -> [f64; 3] {
    [t, 0.85 * t + 0.05, 0.7 * t + 0.1]
}

/// Renders a 3-channel image and its exact depth map.
pub fn render_view(scene: &Scene, k: &CameraIntrinsics, pose_world_to_cam: &PoseSE3) -> Result<(Image, DepthMap)> {
    let cam_to_world = pose_world_to_cam.inverse();
    let origin = *cam_to_world.translation();
    let rot = cam_to_world.rotation();
    let (h, w) = (k.height, k.width);
    let mut image = Grid::zeros(h, w, 3);
    let mut depth = Grid::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            // Camera-frame ray with unit Z, so the ray parameter is the depth.
            let dir = rot * k.ray(col as f64, row as f64);
            let s = scene
                .intersect(&origin, &dir)
                .ok_or(Error::SceneNotCovering { row, col })?;
            let p = row * w + col;
            depth.data_mut()[p] = s;
            let hit = origin + dir * s;
            image.pixel_mut(p).copy_from_slice(&shade(scene.texture.eval(&hit)));
        }
    }
    Ok((image, depth))
}

/// Target/source renders plus the relative pose taking target-camera
/// coordinates to source-camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub target: Image,
    pub target_depth: DepthMap,
    pub source: Image,
    pub source_depth: DepthMap,
    pub pose_t_to_s: PoseSE3,
}

pub fn make_pair(scene: &Scene, k: &CameraIntrinsics, pose_t: &PoseSE3, pose_s: &PoseSE3) -> Result<ViewPair> {
    let (target, target_depth) = render_view(scene, k, pose_t)?;
    let (source, source_depth) = render_view(scene, k, pose_s)?;
    Ok(ViewPair {
        target,
        target_depth,
        source,
        source_depth,
        pose_t_to_s: pose_s.compose(&pose_t.inverse()),
    })
}

/// Grey image whose left half carries fine vertical stripes and right half
/// coarser diagonal stripes, both with mean 0.5 and the same contrast, so
/// only texture separates the regions. Returns the image and per-pixel
/// region labels (0 left, 1 right).
pub fn two_texture_image(height: usize, width: usize, seed: u64) -> Result<(Image, Vec<usize>)> {
    if height == 0 || width < 2 {
        return Err(Error::domain(format!(
            "two-texture image needs ≥1 row and ≥2 columns, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (phase_a, phase_b) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let split = width / 2;
    let labels = (0..height * width).map(|p| usize::from(p % width >= split)).collect();
    let image = Grid::from_fn(height, width, 1, |r, c, _| {
        let (x, y) = (c as f64, r as f64);
        let s = if c < split {
            (TAU * x / 4.0 + phase_a).sin()
        } else {
            (TAU * (x + y) / 9.0 + phase_b).sin()
        };
        0.5 + 0.3 * s
    });
    Ok((image, labels))
}
