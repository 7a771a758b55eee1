//! Pinhole camera model, ray construction, stereo triangulation, projection,
//! and workspace contraction.
//!
//! Extrinsics convention: a [`CameraPose`] maps workspace coordinates to
//! camera coordinates, `x_cam = R * x_world + t`. Rotations are row-major
//! 3×3, translations in millimetres. All operations here are pure.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Cross-product norm below which two ray directions count as parallel.
/// Well above double-precision noise, well below any practical stereo baseline.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:.3e})")]
    InvalidRotation(f64),
    #[error("point behind camera (depth {0:.6} mm)")]
    BehindCamera(f64),
    #[error("degenerate workspace box: min {min:?} must be below max {max:?}")]
    DegenerateBox { min: [f64; 3], max: [f64; 3] },
}

/// A continuous pixel location (column, row) on an image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel(pub Vector2<f64>);

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Pixel(Vector2::new(u, v))
    }

    pub fn u(&self) -> f64 {
        self.0.x
    }

    pub fn v(&self) -> f64 {
        self.0.y
    }
}

/// A 3-vector in workspace coordinates (millimetres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint(pub Vector3<f64>);

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint(Vector3::new(x, y, z))
    }
}

/// A 3-vector in the contracted unit cube `[0,1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitCubePoint(pub Vector3<f64>);

impl UnitCubePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        UnitCubePoint(Vector3::new(x, y, z))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, v) in [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
        ] {
            if !v.is_finite() {
                return Err(GeometryError::InvalidIntrinsics(format!(
                    "{name} is not finite"
                )));
            }
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.cx <= 0.0 || self.cx >= self.width as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if self.cy <= 0.0 || self.cy >= self.height as f64 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }
}

/// Camera extrinsics: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = CameraPose {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.rotation.iter().any(|v| !v.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
        {
            return Err(GeometryError::NonFinite("camera pose"));
        }
        let rt_r = self.rotation.transpose() * self.rotation;
        let ortho_dev = (rt_r - Matrix3::identity()).norm();
        let det_dev = (self.rotation.determinant() - 1.0).abs();
        let dev = ortho_dev.max(det_dev);
        if dev > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(())
    }

    /// Camera centre in workspace coordinates, `-R^T t`.
    pub fn centre(&self) -> WorldPoint {
        WorldPoint(-(self.rotation.transpose() * self.translation))
    }

    /// Workspace point into camera coordinates.
    pub fn to_camera(&self, p: &WorldPoint) -> Vector3<f64> {
        self.rotation * p.0 + self.translation
    }
}

/// A ray with unit direction, both in workspace coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalises `direction`; rejects non-finite or zero-length input.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeometryError> {
        if origin.iter().any(|v| !v.is_finite()) || direction.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("ray"));
        }
        let norm = direction.norm();
        if norm <= 0.0 {
            return Err(GeometryError::NonFinite("zero-length ray direction"));
        }
        Ok(Ray {
            origin,
            direction: direction / norm,
        })
    }

    pub fn at(&self, s: f64) -> WorldPoint {
        WorldPoint(self.origin + s * self.direction)
    }
}

/// Axis-aligned workspace box in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceBox {
    aabb_min: Vector3<f64>,
    aabb_max: Vector3<f64>,
}

impl WorkspaceBox {
    pub fn new(aabb_min: Vector3<f64>, aabb_max: Vector3<f64>) -> Result<Self, GeometryError> {
        let finite = aabb_min.iter().chain(aabb_max.iter()).all(|v| v.is_finite());
        if !finite || !(0..3).all(|i| aabb_min[i] < aabb_max[i]) {
            return Err(GeometryError::DegenerateBox {
                min: aabb_min.into(),
                max: aabb_max.into(),
            });
        }
        Ok(WorkspaceBox { aabb_min, aabb_max })
    }

    pub fn aabb_min(&self) -> Vector3<f64> {
        self.aabb_min
    }

    pub fn aabb_max(&self) -> Vector3<f64> {
        self.aabb_max
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.aabb_max - self.aabb_min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Component-wise affine map of the box onto `[0,1]^3`. Points outside
    /// the box map outside the cube; callers decide how to treat them.
    pub fn contract(&self, p: &WorldPoint) -> UnitCubePoint {
        let e = self.extent();
        UnitCubePoint(Vector3::new(
            (p.0.x - self.aabb_min.x) / e.x,
            (p.0.y - self.aabb_min.y) / e.y,
            (p.0.z - self.aabb_min.z) / e.z,
        ))
    }

    /// Exact inverse of [`WorkspaceBox::contract`].
    pub fn expand(&self, u: &UnitCubePoint) -> WorldPoint {
        let e = self.extent();
        WorldPoint(Vector3::new(
            self.aabb_min.x + u.0.x * e.x,
            self.aabb_min.y + u.0.y * e.y,
            self.aabb_min.z + u.0.z * e.z,
        ))
    }

    /// Intersection of a ray with the box as a parameter interval, or `None`
    /// when the ray misses entirely. The entry parameter is clamped to zero
    /// so callers never sample behind the ray origin.
    pub fn intersect_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut s_enter = f64::NEG_INFINITY;
        let mut s_exit = f64::INFINITY;
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-300 {
                if o < self.aabb_min[i] || o > self.aabb_max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.aabb_min[i] - o) / d;
            let b = (self.aabb_max[i] - o) / d;
            s_enter = s_enter.max(a.min(b));
            s_exit = s_exit.min(a.max(b));
        }
        let near = s_enter.max(0.0);
        if s_exit <= near {
            return None;
        }
        Some((near, s_exit))
    }
}

/// Back-projects a pixel into a workspace ray through the camera centre.
pub fn pixel_to_ray(
    p: &Pixel,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Ray, GeometryError> {
    if !p.u().is_finite() || !p.v().is_finite() {
        return Err(GeometryError::NonFinite("pixel"));
    }
    let dir_cam = Vector3::new((p.u() - k.cx) / k.fx, (p.v() - k.cy) / k.fy, 1.0);
    let dir_world = pose.rotation.transpose() * dir_cam;
    Ray::new(pose.centre().0, dir_world)
}

/// Perspective projection of a workspace point; fails for points at or
/// behind the camera plane so callers never consume a silently clamped pixel.
pub fn project_point(
    p: &WorldPoint,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<Pixel, GeometryError> {
    if p.0.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("world point"));
    }
    let cam = pose.to_camera(p);
    if cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(cam.z));
    }
    Ok(Pixel::new(
        k.fx * cam.x / cam.z + k.cx,
        k.fy * cam.y / cam.z + k.cy,
    ))
}

/// Result of intersecting a stereo ray pair.
#[derive(Debug, Clone, Copy)]
pub struct Triangulation {
    /// Closest point on the left ray to the right ray.
    pub point: WorldPoint,
    /// Parameter along the left ray.
    pub alpha: f64,
    /// Parameter along the right ray.
    pub beta: f64,
    /// Signed separation along the common perpendicular.
    pub gamma: f64,
    /// False when the directions are parallel within [`PARALLEL_EPS`].
    pub valid: bool,
}

/// Solves `oL + alpha*dL = oR + beta*dR + gamma*dhat` where `dhat` is the
/// unit cross product of the directions, and returns the point on the left
/// ray. Parallel rays are flagged invalid rather than treated as an error.
pub fn triangulate_stereo(ray_left: &Ray, ray_right: &Ray) -> Triangulation {
    let cross = ray_left.direction.cross(&ray_right.direction);
    let cross_norm = cross.norm();
    if cross_norm < PARALLEL_EPS {
        return Triangulation {
            point: WorldPoint(Vector3::zeros()),
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            valid: false,
        };
    }
    let dhat = cross / cross_norm;
    // Columns: dL, -dR, -dhat; rhs: oR - oL.
    let m = Matrix3::from_columns(&[ray_left.direction, -ray_right.direction, -dhat]);
    let rhs = ray_right.origin - ray_left.origin;
    let solution = m
        .lu()
        .solve(&rhs)
        .expect("non-parallel directions give an invertible system");
    Triangulation {
        point: ray_left.at(solution.x),
        alpha: solution.x,
        beta: solution.y,
        gamma: solution.z,
        valid: true,
    }
}
