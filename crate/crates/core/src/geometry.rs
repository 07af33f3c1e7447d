//! Pinhole camera math shared by the reconstruction, motion and simulation
//! layers.
//!
//! Conventions:
//! - camera frames are x right, y down, z forward;
//! - a [`RigidTransform`] maps points from a source frame into a target
//!   frame, `x_target = R * x_source + t`;
//! - the camera pose used by the two-view measurement model maps points
//!   from the previous camera frame into the current camera frame.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Points closer than this to the camera plane are rejected.
pub const DEPTH_EPS: f64 = 1e-9;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-positive depth {depth:e}")]
    NonPositiveDepth { depth: f64 },
    #[error("zero-length vector")]
    ZeroVector,
    #[error("invalid intrinsics: focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error(
        "matrix is not a proper rotation (orthonormality error {orthonormality:e}, det {det})"
    )]
    InvalidRotation { orthonormality: f64, det: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = GeometryError;

    fn try_from(raw: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(raw.fx, raw.fy, raw.cx, raw.cy)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Applies K⁻¹ to a pixel, giving the normalized homogeneous ray `[x, y, 1]`.
    pub fn normalize(&self, pixel: PixelHomogeneous) -> Vec3 {
        Vec3::new(
            (pixel.u - self.cx) / self.fx,
            (pixel.v - self.cy) / self.fy,
            1.0,
        )
    }

    /// Applies K to a normalized image point.
    pub fn denormalize(&self, x: f64, y: f64) -> PixelHomogeneous {
        PixelHomogeneous::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }
}

/// A pixel stored in homogeneous form; the third component is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelHomogeneous {
    pub u: f64,
    pub v: f64,
}

impl PixelHomogeneous {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn w(&self) -> f64 {
        1.0
    }

    pub fn to_vector(self) -> Vec3 {
        Vec3::new(self.u, self.v, 1.0)
    }
}

/// SE(3) element acting as `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` is orthonormal with
    /// determinant +1 to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let orthonormality = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if orthonormality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation {
                orthonormality,
                det,
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() > 0.0 {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        } else {
            Rotation3::identity()
        };
        Self::from_rotation(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row `j` (0-based) of the 3×4 matrix `[R | t]`.
    pub fn row(&self, j: usize) -> [f64; 4] {
        [
            self.rotation[(j, 0)],
            self.rotation[(j, 1)],
            self.rotation[(j, 2)],
            self.translation[j],
        ]
    }

    /// Origin of the source frame expressed in the target frame's inverse,
    /// i.e. the point that maps to the target origin: `-Rᵀ t`.
    pub fn source_center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Geodesic angle of the rotation in radians.
    pub fn rotation_angle(&self) -> f64 {
        // atan2 keeps full precision near zero where acos of the trace does not.
        let r = &self.rotation;
        let skew = Vec3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        let sin = 0.5 * skew.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        sin.atan2(cos)
    }

    /// Geodesic rotation distance and translation distance to `other`.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (
            rel.rotation_angle(),
            (self.translation - other.translation).norm(),
        )
    }

    /// Re-orthonormalizes the rotation through its quaternion.
    pub fn orthonormalized(&self) -> RigidTransform {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        RigidTransform::from_quaternion(q, self.translation)
    }
}

/// A matched pixel pair across the previous and current frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub prev_pixel: PixelHomogeneous,
    pub curr_pixel: PixelHomogeneous,
    /// 0 marks background, j ≥ 1 the j-th rigid object.
    pub object_id: u32,
}

impl FeatureTrack {
    pub fn new(prev_pixel: PixelHomogeneous, curr_pixel: PixelHomogeneous, object_id: u32) -> Self {
        Self {
            prev_pixel,
            curr_pixel,
            object_id,
        }
    }

    pub fn in_bounds(&self, width: f64, height: f64) -> bool {
        [self.prev_pixel, self.curr_pixel]
            .iter()
            .all(|p| p.u >= 0.0 && p.u < width && p.v >= 0.0 && p.v < height)
    }
}

/// Unknowns for one dynamic feature: its position in the previous camera
/// frame and its object's translation between the two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicFeatureState {
    pub position: Vec3,
    pub translation: Vec3,
}

impl DynamicFeatureState {
    pub fn new(position: Vec3, translation: Vec3) -> Self {
        Self {
            position,
            translation,
        }
    }

    /// Position after the object's translation, still in the previous frame.
    pub fn translated(&self) -> Vec3 {
        self.position + self.translation
    }

    pub fn satisfies_cheirality(&self) -> bool {
        self.position.z > DEPTH_EPS && self.translated().z > DEPTH_EPS
    }
}

fn check_depth(z: f64) -> Result<()> {
    if z > DEPTH_EPS {
        Ok(())
    } else {
        Err(GeometryError::NonPositiveDepth { depth: z })
    }
}

/// Pinhole projection of a camera-frame point to pixels.
pub fn project(k: &CameraIntrinsics, p: &Vec3) -> Result<PixelHomogeneous> {
    check_depth(p.z)?;
    Ok(k.denormalize(p.x / p.z, p.y / p.z))
}

/// Pixel of the translated point `P + Δd` seen from the previous camera.
pub fn pseudo_projection_m(
    k: &CameraIntrinsics,
    p: &Vec3,
    delta_d: &Vec3,
) -> Result<PixelHomogeneous> {
    let z = p.z + delta_d.z;
    check_depth(z)?;
    Ok(k.denormalize((p.x + delta_d.x) / z, (p.y + delta_d.y) / z))
}

/// Normalized-coordinate projection of `P` through the rows of `[R | t]`.
pub fn pseudo_projection_n(t: &RigidTransform, p: &Vec3) -> Result<PixelHomogeneous> {
    let homogeneous = [p.x, p.y, p.z, 1.0];
    let dot = |row: [f64; 4]| -> f64 { row.iter().zip(&homogeneous).map(|(a, b)| a * b).sum() };
    let s = dot(t.row(2));
    check_depth(s)?;
    Ok(PixelHomogeneous::new(dot(t.row(0)) / s, dot(t.row(1)) / s))
}

/// Cosine of the angle between two vectors, clamped to [-1, 1].
pub fn cos_angle(a: &Vec3, b: &Vec3) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Law-of-cosines residual for the triangle (apex, P, Q) whose apex angle is
/// given by `cos_theta`.
fn cosine_law(p_rel: &Vec3, q_rel: &Vec3, cos_theta: f64, delta_d: &Vec3) -> f64 {
    let np = p_rel.norm();
    let nq = q_rel.norm();
    np * np + nq * nq - 2.0 * np * nq * cos_theta - delta_d.norm_squared()
}

/// Stacked measurement residual `ẑ - F(P, Δd)` for one dynamic feature.
///
/// Components: previous-camera cosine law, current-camera cosine law,
/// previous-frame pixel reprojection (u, v), current-frame reprojection in
/// normalized coordinates (x, y). Both cosine terms compare normalized rays.
pub fn residual_6(
    k: &CameraIntrinsics,
    t: &RigidTransform,
    state: &DynamicFeatureState,
    track: &FeatureTrack,
) -> Result<Vector6<f64>> {
    let p = state.position;
    let dd = state.translation;
    let q = state.translated();

    let m = pseudo_projection_m(k, &p, &dd)?;
    let cos1 = cos_angle(&k.normalize(track.prev_pixel), &k.normalize(m))?;
    let f1 = cosine_law(&p, &q, cos1, &dd);

    let center = t.source_center();
    let n = pseudo_projection_n(t, &p)?;
    let q_obs = k.normalize(track.curr_pixel);
    let cos2 = cos_angle(&q_obs, &n.to_vector())?;
    let f2 = cosine_law(&(p - center), &(q - center), cos2, &dd);

    let proj = project(k, &p)?;
    let reproj = pseudo_projection_n(t, &q)?;

    Ok(Vector6::new(
        -f1,
        -f2,
        track.prev_pixel.u - proj.u,
        track.prev_pixel.v - proj.v,
        q_obs.x - reproj.u,
        q_obs.y - reproj.v,
    ))
}

/// Synthesizes the noiseless track of a feature with known state.
pub fn synthesize_track(
    k: &CameraIntrinsics,
    t: &RigidTransform,
    state: &DynamicFeatureState,
    object_id: u32,
) -> Result<FeatureTrack> {
    let prev = project(k, &state.position)?;
    let q_curr = t.apply(&state.translated());
    let curr = project(k, &q_curr)?;
    Ok(FeatureTrack::new(prev, curr, object_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k_unit() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    fn k_vga() -> CameraIntrinsics {
        CameraIntrinsics::new(460.0, 460.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn project_examples() {
        let p = project(&k_unit(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.u, p.v, p.w()), (0.0, 0.0, 1.0));

        let k = CameraIntrinsics::new(2.0, 2.0, 10.0, 20.0).unwrap();
        let p = project(&k, &Vec3::new(1.0, 1.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v), (11.0, 21.0));

        // 460 * 0.5 / 4 + 320 = 377.5 ; 460 * -0.2 / 4 + 240 = 217
        let p = project(&k_vga(), &Vec3::new(0.5, -0.2, 4.0)).unwrap();
        assert_relative_eq!(p.u, 377.5, epsilon = 1e-12);
        assert_relative_eq!(p.v, 217.0, epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_points_on_camera_plane() {
        assert!(matches!(
            project(&k_unit(), &Vec3::new(1.0, 0.0, 1e-10)),
            Err(GeometryError::NonPositiveDepth { .. })
        ));
        assert!(project(&k_unit(), &Vec3::new(1.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        let err = serde_json::from_str::<CameraIntrinsics>(r#"{"fx":-1,"fy":1,"cx":0,"cy":0}"#);
        assert!(err.is_err());
    }

    #[test]
    fn pseudo_projection_m_examples() {
        let p = Vec3::new(0.3, -0.1, 3.0);
        let m = pseudo_projection_m(&k_vga(), &p, &Vec3::zeros()).unwrap();
        assert_eq!(m, project(&k_vga(), &p).unwrap());

        let m = pseudo_projection_m(
            &k_unit(),
            &Vec3::new(0.0, 0.0, 1.0),
            &Vec3::new(1.0, 0.0, 1.0),
        )
        .unwrap();
        assert_eq!((m.u, m.v), (0.5, 0.0));
    }

    #[test]
    fn pseudo_projection_n_examples() {
        let n =
            pseudo_projection_n(&RigidTransform::identity(), &Vec3::new(0.2, 0.4, 2.0)).unwrap();
        assert_relative_eq!(n.u, 0.1, epsilon = 1e-15);
        assert_relative_eq!(n.v, 0.2, epsilon = 1e-15);

        let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let n = pseudo_projection_n(&t, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((n.u, n.v), (0.0, 0.0));

        // 90° yaw about the camera y axis: R = [[0,0,1],[0,1,0],[-1,0,0]].
        // R * (1, 0, 2) = (2, 0, -1); with t = (0, 0, 3): (2, 0, 2) -> (1, 0).
        let t = RigidTransform::from_axis_angle(
            Vec3::y(),
            std::f64::consts::FRAC_PI_2,
            Vec3::new(0.0, 0.0, 3.0),
        );
        let n = pseudo_projection_n(&t, &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(n.u, 1.0, epsilon = 1e-12);
        assert_relative_eq!(n.v, 0.0, epsilon = 1e-12);

        let behind = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -5.0));
        assert!(pseudo_projection_n(&behind, &Vec3::new(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn cos_angle_examples() {
        let z = Vec3::z();
        assert_eq!(cos_angle(&z, &z).unwrap(), 1.0);
        assert_eq!(cos_angle(&Vec3::x(), &Vec3::y()).unwrap(), 0.0);
        assert_relative_eq!(
            cos_angle(&Vec3::new(1.0, 0.0, 1.0), &z).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        assert_eq!(
            cos_angle(&Vec3::zeros(), &z),
            Err(GeometryError::ZeroVector)
        );
    }

    fn vga_scene() -> (CameraIntrinsics, RigidTransform, DynamicFeatureState) {
        let t = RigidTransform::from_axis_angle(
            Vec3::new(0.1, 1.0, 0.0),
            0.05,
            Vec3::new(-0.4, 0.02, -0.3),
        );
        let state = DynamicFeatureState::new(Vec3::new(0.7, -0.3, 6.0), Vec3::new(0.3, 0.0, 0.1));
        (k_vga(), t, state)
    }

    #[test]
    fn residual_is_zero_at_truth() {
        let (k, t, state) = vga_scene();
        let track = synthesize_track(&k, &t, &state, 1).unwrap();
        let e = residual_6(&k, &t, &state, &track).unwrap();
        assert!(e.amax() < 1e-10, "{e}");
    }

    #[test]
    fn static_point_cosine_rows_vanish() {
        let (k, t, mut state) = vga_scene();
        state.translation = Vec3::zeros();
        let track = synthesize_track(&k, &t, &state, 0).unwrap();
        let e = residual_6(&k, &t, &state, &track).unwrap();
        assert!(e[0].abs() < 1e-10 && e[1].abs() < 1e-10);
    }

    /// Independent evaluation of the measurement function written directly
    /// from the cosine law with explicit angles.
    fn brute_force_f(
        k: &CameraIntrinsics,
        t: &RigidTransform,
        p: Vec3,
        dd: Vec3,
        track: &FeatureTrack,
    ) -> [f64; 6] {
        let q = p + dd;
        let r1 = Vec3::new(
            (track.prev_pixel.u - k.cx()) / k.fx(),
            (track.prev_pixel.v - k.cy()) / k.fy(),
            1.0,
        );
        let theta1 = (r1.normalize().dot(&q.normalize())).clamp(-1.0, 1.0).acos();
        let f1 = p.norm_squared() + q.norm_squared()
            - 2.0 * p.norm() * q.norm() * theta1.cos()
            - dd.norm_squared();
        let pc = t.rotation() * p + t.translation();
        let qc = t.rotation() * q + t.translation();
        let r2 = Vec3::new(
            (track.curr_pixel.u - k.cx()) / k.fx(),
            (track.curr_pixel.v - k.cy()) / k.fy(),
            1.0,
        );
        let theta2 = (r2.normalize().dot(&pc.normalize()))
            .clamp(-1.0, 1.0)
            .acos();
        // Distances from the second camera centre are frame independent.
        let f2 = pc.norm_squared() + qc.norm_squared()
            - 2.0 * pc.norm() * qc.norm() * theta2.cos()
            - dd.norm_squared();
        [
            f1,
            f2,
            k.fx() * p.x / p.z + k.cx(),
            k.fy() * p.y / p.z + k.cy(),
            qc.x / qc.z,
            qc.y / qc.z,
        ]
    }

    #[test]
    fn perturbed_residual_matches_brute_force() {
        let (k, t, state) = vga_scene();
        let track = synthesize_track(&k, &t, &state, 1).unwrap();
        let perturbed =
            DynamicFeatureState::new(state.position + Vec3::new(0.0, 0.0, 0.1), state.translation);
        let e = residual_6(&k, &t, &perturbed, &track).unwrap();
        let f = brute_force_f(&k, &t, perturbed.position, perturbed.translation, &track);
        let z = [
            0.0,
            0.0,
            track.prev_pixel.u,
            track.prev_pixel.v,
            (track.curr_pixel.u - k.cx()) / k.fx(),
            (track.curr_pixel.v - k.cy()) / k.fy(),
        ];
        for i in 0..6 {
            assert_relative_eq!(e[i], z[i] - f[i], epsilon = 1e-9, max_relative = 1e-7);
        }
        assert!(e.amax() > 1e-4);
    }

    #[test]
    fn transform_algebra() {
        let t = RigidTransform::from_axis_angle(
            Vec3::new(1.0, 2.0, 3.0),
            0.7,
            Vec3::new(1.0, -2.0, 0.5),
        );
        let id = t.compose(&t.inverse());
        assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation().amax() < 1e-12);
        let r = t.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(RigidTransform::new(Matrix3::identity() * 2.0, Vec3::zeros()).is_err());
        // The source centre maps to the target origin.
        assert!(t.apply(&t.source_center()).norm() < 1e-12);
    }

    fn arb_unit() -> impl Strategy<Value = f64> {
        -1.0f64..1.0
    }

    proptest! {
        #[test]
        fn m_projection_is_projection_of_translated_point(
            fx in 100.0f64..1000.0, fy in 100.0f64..1000.0,
            cx in 0.0f64..640.0, cy in 0.0f64..480.0,
            px in arb_unit(), py in arb_unit(), pz in 0.5f64..30.0,
            dx in arb_unit(), dy in arb_unit(), dz in -0.4f64..1.0,
        ) {
            let k = CameraIntrinsics::new(fx, fy, cx, cy).unwrap();
            let p = Vec3::new(px, py, pz);
            let d = Vec3::new(dx, dy, dz);
            let m = pseudo_projection_m(&k, &p, &d).unwrap();
            let direct = project(&k, &(p + d)).unwrap();
            prop_assert!((m.u - direct.u).abs() <= 1e-9 * direct.u.abs().max(1.0));
            prop_assert!((m.v - direct.v).abs() <= 1e-9 * direct.v.abs().max(1.0));
        }

        #[test]
        fn cos_angle_is_scale_invariant(
            ax in arb_unit(), ay in arb_unit(), az in 0.1f64..1.0,
            bx in arb_unit(), by in arb_unit(), bz in 0.1f64..1.0,
            s in 1e-3f64..1e3, r in 1e-3f64..1e3,
        ) {
            let a = Vec3::new(ax, ay, az);
            let b = Vec3::new(bx, by, bz);
            let c0 = cos_angle(&a, &b).unwrap();
            let c1 = cos_angle(&(a * s), &(b * r)).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
        }

        #[test]
        fn back_projection_round_trips(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.1f64..50.0,
        ) {
            let k = k_vga();
            let p = Vec3::new(x, y, z);
            let ray = k.normalize(project(&k, &p).unwrap());
            prop_assert!((ray * z - p).norm() < 1e-9 * z.max(1.0));
        }
    }
}
