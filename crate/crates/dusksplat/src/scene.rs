//! Gaussian cloud data model and per-Gaussian geometry: covariance
//! construction (rotation/scale factorization) and camera-space projection
//! with its exact backward pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::math::{quat_normalize_backward, quat_to_rot, quat_to_rot_backward, sigmoid};

/// Gaussians closer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the projected covariance diagonal; guards sub-pixel ellipses.
pub const LOW_PASS: f64 = 0.3;
/// Image-bounds culling radius in standard deviations.
pub const CULL_SIGMA: f64 = 3.0;

/// One Gaussian in stored parameterization: opacity pre-sigmoid, scale as
/// log-scale, so optimizer steps are unconstrained while the effective
/// values stay in range.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Quaternion [w, x, y, z]; renormalized after every optimizer step.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_raw: f64,
}

impl Gaussian {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }
}

/// The learnable scene, stored as flat per-parameter-group buffers so the
/// optimizer can treat each group as one tensor.
#[derive(Debug, Clone, Default)]
pub struct GaussianCloud {
    /// 3N
    pub positions: Vec<f64>,
    /// 4N, quaternions [w, x, y, z]
    pub rotations: Vec<f64>,
    /// 3N
    pub log_scales: Vec<f64>,
    /// N, pre-sigmoid
    pub opacities_raw: Vec<f64>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.opacities_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities_raw.is_empty()
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: Vector3::new(
                self.positions[3 * i],
                self.positions[3 * i + 1],
                self.positions[3 * i + 2],
            ),
            rotation: Vector4::new(
                self.rotations[4 * i],
                self.rotations[4 * i + 1],
                self.rotations[4 * i + 2],
                self.rotations[4 * i + 3],
            ),
            log_scale: Vector3::new(
                self.log_scales[3 * i],
                self.log_scales[3 * i + 1],
                self.log_scales[3 * i + 2],
            ),
            opacity_raw: self.opacities_raw[i],
        }
    }

    pub fn push(&mut self, g: Gaussian) {
        self.positions.extend_from_slice(g.position.as_slice());
        self.rotations.extend_from_slice(g.rotation.as_slice());
        self.log_scales.extend_from_slice(g.log_scale.as_slice());
        self.opacities_raw.push(g.opacity_raw);
    }

    /// Renormalize every quaternion; call after each optimizer step.
    pub fn renormalize_rotations(&mut self) {
        for i in 0..self.len() {
            let q = Vector4::new(
                self.rotations[4 * i],
                self.rotations[4 * i + 1],
                self.rotations[4 * i + 2],
                self.rotations[4 * i + 3],
            );
            let n = q.norm();
            let q = if n > 1e-12 {
                q / n
            } else {
                Vector4::new(1.0, 0.0, 0.0, 0.0)
            };
            self.rotations[4 * i..4 * i + 4].copy_from_slice(q.as_slice());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().all(|v| v.is_finite())
            && self.rotations.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacities_raw.iter().all(|v| v.is_finite())
    }
}

/// Gradient buffers shaped like `GaussianCloud`.
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub positions: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacities_raw: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            log_scales: vec![0.0; 3 * n],
            opacities_raw: vec![0.0; n],
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Checks the rotation part is orthonormal to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "pose rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParameter(
                "pose matrix last row must be [0,0,0,1]".into(),
            ));
        }
        let rotation = Matrix3::from_fn(|r, c| m[r][c]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
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

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Pinhole camera plus the view's input image and its preprocessed variant.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub world_to_camera: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub input_image: Image,
    pub preprocessed_image: Image,
}

impl CameraView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world_to_camera: Pose,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        input_image: Image,
        preprocessed_image: Image,
    ) -> Result<Self> {
        for (name, img) in [("input", &input_image), ("preprocessed", &preprocessed_image)] {
            if img.width != width || img.height != height {
                return Err(Error::InvalidParameter(format!(
                    "{name} image is {}x{} but the camera declares {width}x{height}",
                    img.width, img.height
                )));
            }
        }
        Ok(Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            input_image,
            preprocessed_image,
        })
    }

    /// A camera with black placeholder images; used for synthetic poses and
    /// novel-view rendering where no observation exists.
    pub fn black(
        world_to_camera: Pose,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            input_image: Image::zeros(width, height, 3),
            preprocessed_image: Image::zeros(width, height, 3),
        }
    }
}

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub view_dir: Vector3<f64>,
}

/// Upstream gradients flowing into `project_gaussian_backward`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionGrads {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub view_dir: Vector3<f64>,
}

impl Default for ProjectedGaussian {
    fn default() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::identity(),
            depth: 0.0,
            view_dir: Vector3::z(),
        }
    }
}

/// Gradients on the stored Gaussian parameterization.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeomGrads {
    pub position: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
}

/// World covariance R·S·Sᵀ·Rᵀ from a (nonzero) quaternion and positive
/// scales. The quaternion is normalized internally.
pub fn covariance_from(rotation: &Vector4<f64>, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.iter().all(|v| v.is_finite()) || !scale.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "covariance_from: non-finite rotation or scale".into(),
        ));
    }
    let n = rotation.norm();
    if n <= 0.0 {
        return Err(Error::InvalidParameter(
            "covariance_from: zero quaternion".into(),
        ));
    }
    if scale.iter().any(|s| *s <= 0.0) {
        return Err(Error::InvalidParameter(
            "covariance_from: scale must be strictly positive".into(),
        ));
    }
    let r = quat_to_rot(&(rotation / n));
    let d = Matrix3::from_diagonal(&scale.map(|s| s * s));
    Ok(r * d * r.transpose())
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
#[inline]
pub fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mid + (half_diff * half_diff + m[(0, 1)] * m[(0, 1)]).sqrt()
}

struct ProjectionIntermediates {
    t: Vector3<f64>,
    m: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
    proj: ProjectedGaussian,
}

fn project_internal(g: &Gaussian, cam: &CameraView) -> Option<ProjectionIntermediates> {
    let pose = &cam.world_to_camera;
    let t = pose.transform(&g.position);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let inv_z = 1.0 / t.z;
    let mean2d = Vector2::new(cam.fx * t.x * inv_z + cam.cx, cam.fy * t.y * inv_z + cam.cy);

    // Local affine Jacobian of the perspective map at t.
    let jac = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    );
    let m = jac * pose.rotation;
    let cov3d = covariance_from(&g.rotation, &g.scale())
        .expect("projection requires finite gaussian parameters");
    let mut cov2d = m * cov3d * m.transpose();
    cov2d[(0, 0)] += LOW_PASS;
    cov2d[(1, 1)] += LOW_PASS;

    // Cull when the 3-sigma box misses the image entirely.
    let radius = CULL_SIGMA * max_eigenvalue_2x2(&cov2d).max(0.0).sqrt();
    if mean2d.x + radius < 0.0
        || mean2d.x - radius > cam.width as f64
        || mean2d.y + radius < 0.0
        || mean2d.y - radius > cam.height as f64
    {
        return None;
    }

    let to_gaussian = g.position - pose.camera_center();
    let view_dir = to_gaussian / to_gaussian.norm();
    Some(ProjectionIntermediates {
        t,
        m,
        cov3d,
        proj: ProjectedGaussian {
            mean2d,
            cov2d,
            depth: t.z,
            view_dir,
        },
    })
}

/// Projects one Gaussian; None means culled (behind the near plane or the
/// 3-sigma ellipse misses the image).
pub fn project_gaussian(g: &Gaussian, cam: &CameraView) -> Option<ProjectedGaussian> {
    project_internal(g, cam).map(|i| i.proj)
}

/// Exact gradients of `project_gaussian` w.r.t. the stored parameterization
/// (position, raw quaternion, log-scale). The forward must not have culled.
pub fn project_gaussian_backward(
    g: &Gaussian,
    cam: &CameraView,
    upstream: &ProjectionGrads,
) -> GeomGrads {
    let inter = project_internal(g, cam).expect("backward requires a non-culled projection");
    let pose = &cam.world_to_camera;
    let t = inter.t;
    let inv_z = 1.0 / t.z;

    // cov2d = M Σ3 Mᵀ + λI
    let g2 = upstream.cov2d;
    let d_cov3d = inter.m.transpose() * g2 * inter.m;
    let d_m = (g2 + g2.transpose()) * inter.m * inter.cov3d;
    let d_jac = d_m * pose.rotation.transpose();

    // mean2d path.
    let u = upstream.mean2d;
    let mut d_t = Vector3::new(
        cam.fx * inv_z * u.x,
        cam.fy * inv_z * u.y,
        -(cam.fx * t.x * u.x + cam.fy * t.y * u.y) * inv_z * inv_z,
    );

    // Jacobian entries depend on t as well.
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    d_t.x += d_jac[(0, 2)] * (-cam.fx * inv_z2);
    d_t.y += d_jac[(1, 2)] * (-cam.fy * inv_z2);
    d_t.z += d_jac[(0, 0)] * (-cam.fx * inv_z2)
        + d_jac[(1, 1)] * (-cam.fy * inv_z2)
        + d_jac[(0, 2)] * (2.0 * cam.fx * t.x * inv_z3)
        + d_jac[(1, 2)] * (2.0 * cam.fy * t.y * inv_z3);

    let mut d_position = pose.rotation.transpose() * d_t;

    // view_dir = (p - c)/||p - c||
    let to_gaussian = g.position - pose.camera_center();
    let r = to_gaussian.norm();
    let v = inter.proj.view_dir;
    d_position += (upstream.view_dir - v * v.dot(&upstream.view_dir)) / r;

    // Σ3 = R D Rᵀ with D = diag(exp(2·log_scale)).
    let qn = g.rotation.norm();
    let q_hat = g.rotation / qn;
    let rot = quat_to_rot(&q_hat);
    let d_sym = d_cov3d;
    let scale = g.scale();
    let diag = scale.map(|s| s * s);
    let d_rot = (d_sym + d_sym.transpose()) * rot * Matrix3::from_diagonal(&diag);
    let inner = rot.transpose() * d_sym * rot;
    let d_log_scale = Vector3::new(
        2.0 * diag[0] * inner[(0, 0)],
        2.0 * diag[1] * inner[(1, 1)],
        2.0 * diag[2] * inner[(2, 2)],
    );
    let d_q_hat = quat_to_rot_backward(&q_hat, &d_rot);
    let d_rotation = quat_normalize_backward(&q_hat, qn, &d_q_hat);

    GeomGrads {
        position: d_position,
        rotation: d_rotation,
        log_scale: d_log_scale,
    }
}

/// Axis-aligned scene bounding box; normalizes positions for the positional
/// encoding and provides the extent scale used by density control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl SceneBounds {
    /// Box around `points`, expanded by `margin` (fraction of each extent).
    pub fn from_points(points: &[Vector3<f64>], margin: f64) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if points.is_empty() {
            min = Vector3::repeat(-1.0);
            max = Vector3::repeat(1.0);
        }
        let pad = (max - min) * margin * 0.5 + Vector3::repeat(1e-6);
        Self {
            min: min - pad,
            max: max + pad,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vector3<f64> {
        ((self.max - self.min) * 0.5).map(|v| v.max(1e-9))
    }

    /// Largest half-extent; the scene scale used by densification.
    pub fn extent(&self) -> f64 {
        self.half_extent().max()
    }

    /// Map a world position into roughly [-1, 1]^3.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center()).component_div(&self.half_extent())
    }

    /// d(normalize)/dp is diagonal.
    pub fn normalize_backward(&self, upstream: &Vector3<f64>) -> Vector3<f64> {
        upstream.component_div(&self.half_extent())
    }
}
