//! Pinhole camera model, rigid transforms and the inverse-warp field used for
//! view synthesis.
//!
//! A target pixel `p` with depth `D(p)` is lifted to `D(p)·K⁻¹·(u, v, 1)ᵀ`,
//! moved into the source camera by `pose_t_to_s`, and projected back through
//! the same intrinsics. Integer pixel coordinates address pixel centres and
//! the image occupies `[0, W−1] × [0, H−1]`. All geometry is `f64`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask};

/// Points with `Z ≤ MIN_DEPTH_MM` are treated as behind the camera.
pub const MIN_DEPTH_MM: f64 = 1e-6;

/// Tolerance of the orthonormality check on [`PoseSE3`] rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        RawIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::domain(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::domain(format!(
                "principal point ({cx}, {cy}) outside a {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, `f = width`, principal point at the image centre.
    pub fn centered(width: usize, height: usize) -> Result<Self> {
        let f = width as f64;
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    /// Normalised ray `K⁻¹·(u, v, 1)ᵀ`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }
}

/// Rigid transform `x ↦ R·x + t` with `t` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Fails unless `rotation` is orthonormal with unit determinant to
    /// [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(Error::domain(format!(
                "rotation is not in SO(3): |RᵀR − I|∞ = {ortho:.3e}, det = {det}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("translation must be finite"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `axis_angle` (direction = axis, norm = angle in radians)
    /// followed by `translation`.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    /// Accepts a rotation that is orthonormal to within `tol` and snaps it onto
    /// SO(3). Used for matrices read from text files.
    pub fn from_approx(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= tol && (det - 1.0).abs() <= tol) {
            return Err(Error::domain(format!(
                "rotation is not in SO(3): |RᵀR − I|∞ = {ortho:.3e}, det = {det}"
            )));
        }
        let snapped = Rotation3::from_matrix_eps(&rotation, 1e-15, 100, Rotation3::identity());
        Self::new(*snapped.matrix(), translation)
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Axis-angle vector of the rotation part.
    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    #[inline]
    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Left-multiplies by the exponential of the twist `(ω, τ)`:
    /// `R ← exp(ω)·R`, `t ← exp(ω)·t + τ`.
    pub fn left_perturbed(&self, omega: &Vector3<f64>, tau: &Vector3<f64>) -> PoseSE3 {
        let step = Rotation3::new(*omega);
        PoseSE3 {
            rotation: step * self.rotation,
            translation: step * self.translation + tau,
        }
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Reads a row-major homogeneous 4×4 matrix. The rotation block must be
    /// orthonormal to 1e-6 (text round-off) and is re-orthonormalised.
    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::domain(format!("bottom row must be 0 0 0 1, got {:?}", m[3])));
        }
        let rotation = Matrix3::from_fn(|r, c| m[r][c]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::from_approx(rotation, translation, 1e-6)
    }

    /// Max-norm distance between the homogeneous matrices.
    pub fn distance(&self, other: &PoseSE3) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

impl TryFrom<[[f64; 4]; 4]> for PoseSE3 {
    type Error = Error;

    fn try_from(m: [[f64; 4]; 4]) -> Result<Self> {
        PoseSE3::from_matrix4(&m)
    }
}

impl From<PoseSE3> for [[f64; 4]; 4] {
    fn from(p: PoseSE3) -> Self {
        p.to_matrix4()
    }
}

pub fn pose_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn pose_inverse(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

/// Lifts `pixel` at `depth` into the camera frame: `depth · K⁻¹ · (u, v, 1)ᵀ`.
pub fn backproject(pixel: &Vector2<f64>, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {depth}")));
    }
    Ok(k.ray(pixel.x, pixel.y) * depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// False when the point is at or behind the image plane; `pixel` is then
    /// meaningless.
    pub valid: bool,
}

pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Projection {
    let z = point.z;
    if !(z > MIN_DEPTH_MM) {
        return Projection {
            pixel: Vector2::new(f64::NAN, f64::NAN),
            depth: z,
            valid: false,
        };
    }
    Projection {
        pixel: Vector2::new(k.fx * point.x / z + k.cx, k.fy * point.y / z + k.cy),
        depth: z,
        valid: true,
    }
}

/// Per-target-pixel sampling locations in the source frame.
///
/// Besides the warp itself this carries the analytic derivatives needed to
/// back-propagate through it: `d_coords` holds `(∂u/∂D, ∂v/∂D)` and
/// `d_src_depth` holds `∂Z_s/∂D` for each pixel's own depth `D(p)` (the warp is
/// pixel-local, so the Jacobian is diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    /// `H×W×2` source-pixel coordinates `(u, v)`.
    pub coords: Grid,
    /// `H×W` depth of the transformed point in the source camera, mm.
    pub src_depth: Grid,
    pub valid: Mask,
    pub d_coords: Grid,
    pub d_src_depth: Grid,
    /// Transformed points in the source camera frame, one per pixel.
    pub src_points: Vec<Vector3<f64>>,
    intrinsics: CameraIntrinsics,
}

impl WarpField {
    pub fn height(&self) -> usize {
        self.coords.height()
    }

    pub fn width(&self) -> usize {
        self.coords.width()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Jacobian of `(u, v)` at flat pixel `p` with respect to a left twist
    /// `(ω, τ)` applied to the pose, i.e. `Q ← Q + ω×Q + τ`.
    pub fn coords_pose_jacobian(&self, p: usize) -> [[f64; 6]; 2] {
        let q = &self.src_points[p];
        let k = &self.intrinsics;
        let (x, y, z) = (q.x, q.y, q.z);
        let iz = 1.0 / z;
        // ∂(u, v)/∂Q
        let du = [k.fx * iz, 0.0, -k.fx * x * iz * iz];
        let dv = [0.0, k.fy * iz, -k.fy * y * iz * iz];
        // ∂Q/∂ω = −[Q]×
        let dq_dw = [[0.0, z, -y], [-z, 0.0, x], [y, -x, 0.0]];
        let mut jac = [[0.0; 6]; 2];
        for (row, d) in [du, dv].iter().enumerate() {
            for j in 0..3 {
                jac[row][j] = (0..3).map(|i| d[i] * dq_dw[i][j]).sum();
                jac[row][3 + j] = d[j];
            }
        }
        jac
    }

    /// An all-identity warp of the given size (every coordinate maps to itself).
    pub fn identity(depth: &DepthMap, k: &CameraIntrinsics) -> Result<WarpField> {
        warp_field(depth, k, &PoseSE3::identity())
    }
}

/// Coordinates this close outside the image are moved onto its border, so
/// round-off cannot flip the validity of pixels that map exactly onto it
/// (e.g. the top row under a horizontal translation).
pub const BORDER_SNAP_PX: f64 = 1e-9;

#[inline]
fn snap_to_border(x: f64, n: usize) -> f64 {
    let last = (n - 1) as f64;
    if (-BORDER_SNAP_PX..0.0).contains(&x) {
        0.0
    } else if x > last && x <= last + BORDER_SNAP_PX {
        last
    } else {
        x
    }
}

/// Inverse warp from target to source: backproject with `depth`, transform by
/// `pose_t_to_s`, project with `k`.
///
/// A pixel is valid when the transformed point lies in front of the source
/// camera and projects inside `[0, W−1] × [0, H−1]`.
pub fn warp_field(depth: &DepthMap, k: &CameraIntrinsics, pose_t_to_s: &PoseSE3) -> Result<WarpField> {
    if depth.channels() != 1 {
        return Err(Error::shape("depth map must have one channel"));
    }
    depth.expect_spatial(k.height, k.width, "depth map vs intrinsics")?;
    if let Some(bad) = depth.data().iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::domain(format!("depth must be strictly positive, found {bad}")));
    }

    let (h, w) = (k.height, k.width);
    let mut coords = Grid::zeros(h, w, 2);
    let mut src_depth = Grid::zeros(h, w, 1);
    let mut d_coords = Grid::zeros(h, w, 2);
    let mut d_src_depth = Grid::zeros(h, w, 1);
    let mut valid = Mask::filled(h, w, false);
    let mut src_points = Vec::with_capacity(h * w);

    let rot = pose_t_to_s.rotation();
    let t = pose_t_to_s.translation();
    // An exact identity maps every pixel onto itself; skip the round-off of
    // the lift/project pair so the lattice is reproduced bit-for-bit.
    let is_identity = *pose_t_to_s == PoseSE3::identity();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let d = depth.data()[p];
            // Q = D·(R·ray) + t, so ∂Q/∂D = R·ray.
            let dir = rot * k.ray(col as f64, row as f64);
            let q = dir * d + t;
            src_points.push(q);
            let proj = project(&q, k);
            src_depth.data_mut()[p] = proj.depth;
            d_src_depth.data_mut()[p] = dir.z;
            if !proj.valid {
                coords.pixel_mut(p).copy_from_slice(&[f64::NAN, f64::NAN]);
                continue;
            }
            let (u, v) = if is_identity {
                (col as f64, row as f64)
            } else {
                (snap_to_border(proj.pixel.x, w), snap_to_border(proj.pixel.y, h))
            };
            coords.pixel_mut(p).copy_from_slice(&[u, v]);
            let iz2 = 1.0 / (q.z * q.z);
            let du = k.fx * (dir.x * q.z - q.x * dir.z) * iz2;
            let dv = k.fy * (dir.y * q.z - q.y * dir.z) * iz2;
            d_coords.pixel_mut(p).copy_from_slice(&[du, dv]);
            valid.set_at(p, k.contains(u, v));
        }
    }

    Ok(WarpField {
        coords,
        src_depth,
        valid,
        d_coords,
        d_src_depth,
        src_points,
        intrinsics: *k,
    })
}
