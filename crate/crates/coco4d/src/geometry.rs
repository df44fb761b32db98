//! Camera models, projection/unprojection, depth-based 2D-to-3D lifting, and
//! the outpaint camera schedule.
//!
//! World convention: right-handed, +y up, cameras look at the origin. Camera
//! space follows the computer-vision convention (x right, y down, z forward),
//! so a camera at elevation 0 / azimuth 0 sits on the +z axis.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::img::{DepthMap, Image, Mask};
use crate::scene::GaussianSet;

/// Pinhole look-at camera on a sphere around the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub radius: f64,
    pub fovy_deg: f64,
    pub near: f64,
    pub far: f64,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
}

/// Builds a look-at camera positioned on a sphere of the given radius,
/// looking at the world origin with roll 0 (up is world +y).
pub fn make_lookat_camera(
    elevation_deg: f64,
    azimuth_deg: f64,
    radius: f64,
    fovy_deg: f64,
    near: f64,
    far: f64,
    resolution: (usize, usize),
) -> Result<CameraPose> {
    if radius <= 0.0 {
        return Err(CocoError::InvalidArgument(format!(
            "camera radius must be positive, got {radius}"
        )));
    }
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(CocoError::InvalidArgument(format!(
            "camera resolution must be positive, got {resolution:?}"
        )));
    }
    if !(near > 0.0 && far > near) {
        return Err(CocoError::InvalidArgument(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    if !(fovy_deg > 0.0 && fovy_deg < 180.0) {
        return Err(CocoError::InvalidArgument(format!(
            "fovy must be in (0, 180) degrees, got {fovy_deg}"
        )));
    }
    Ok(CameraPose {
        elevation_deg,
        azimuth_deg,
        radius,
        fovy_deg,
        near,
        far,
        resolution,
    })
}

impl CameraPose {
    /// Camera center in world coordinates.
    pub fn eye(&self) -> Vector3<f64> {
        let e = self.elevation_deg.to_radians();
        let a = self.azimuth_deg.to_radians();
        self.radius * Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos())
    }

    /// World-to-camera rotation. Rows are the camera's right / down / forward
    /// axes expressed in world coordinates.
    pub fn rotation(&self) -> Matrix3<f64> {
        let eye = self.eye();
        let forward = (-eye).normalize();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    /// Focal length in pixels (square pixels, tied to the vertical fov).
    pub fn focal(&self) -> f64 {
        (self.resolution.0 as f64 / 2.0) / (self.fovy_deg.to_radians() / 2.0).tan()
    }

    /// Principal point (x = column, y = row).
    pub fn principal_point(&self) -> (f64, f64) {
        (self.resolution.1 as f64 / 2.0, self.resolution.0 as f64 / 2.0)
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (point - self.eye())
    }

    pub fn camera_to_world(&self, point_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * point_cam + self.eye()
    }

    /// Verifies the derived view matrix is a rigid transform.
    pub fn check(&self) -> Result<()> {
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(CocoError::Validation(format!(
                "camera rotation not orthonormal (max deviation {err:.2e})"
            )));
        }
        Ok(())
    }
}

/// Projects a world point; returns continuous pixel coordinates
/// (x = column, y = row) and the depth along the camera z axis.
pub fn project(point: &Vector3<f64>, camera: &CameraPose) -> Result<([f64; 2], f64)> {
    let p = camera.world_to_camera(point);
    if p.z <= camera.near {
        return Err(CocoError::BehindCamera {
            depth: p.z,
            near: camera.near,
        });
    }
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    Ok(([f * p.x / p.z + cx, f * p.y / p.z + cy], p.z))
}

/// Inverse of [`project`] for the same camera.
pub fn unproject(pixel: [f64; 2], depth: f64, camera: &CameraPose) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(CocoError::InvalidArgument(format!(
            "unproject depth must be positive, got {depth}"
        )));
    }
    let f = camera.focal();
    let (cx, cy) = camera.principal_point();
    let p_cam = Vector3::new(
        (pixel[0] - cx) / f * depth,
        (pixel[1] - cy) / f * depth,
        depth,
    );
    Ok(camera.camera_to_world(&p_cam))
}

/// Options for [`lift_frame`].
#[derive(Debug, Clone, Copy)]
pub struct LiftOptions {
    /// Activated opacity assigned to each lifted Gaussian.
    pub opacity: f64,
    /// Multiplier on the depth-proportional pixel-footprint scale.
    pub scale_multiplier: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        LiftOptions {
            opacity: 0.8,
            scale_multiplier: 0.7,
        }
    }
}

/// Lifts every valid pixel of a frame into one Gaussian: position from
/// unprojection through the depth map, color from the pixel, identity
/// rotation, isotropic scale proportional to depth times the pixel footprint.
pub fn lift_frame(
    image: &Image,
    depth: &DepthMap,
    valid: &Mask,
    camera: &CameraPose,
    opts: LiftOptions,
) -> Result<GaussianSet> {
    if image.height != depth.height
        || image.width != depth.width
        || image.height != valid.height
        || image.width != valid.width
        || image.height != camera.resolution.0
        || image.width != camera.resolution.1
    {
        return Err(CocoError::InvalidArgument(format!(
            "lift_frame resolution mismatch: image {}x{}, depth {}x{}, mask {}x{}, camera {:?}",
            image.height,
            image.width,
            depth.height,
            depth.width,
            valid.height,
            valid.width,
            camera.resolution
        )));
    }
    let footprint = (camera.fovy_deg.to_radians() / 2.0).tan() * 2.0 / image.height as f64;
    let mut set = GaussianSet::empty();
    for r in 0..image.height {
        for c in 0..image.width {
            if !valid.get(r, c) || !depth.is_valid(r, c) {
                continue;
            }
            let d = depth.get(r, c);
            let pos = unproject([c as f64 + 0.5, r as f64 + 0.5], d, camera)?;
            let scale = (d * footprint * opts.scale_multiplier).max(1e-9);
            set.push(
                pos,
                [1.0, 0.0, 0.0, 0.0],
                [scale.ln(); 3],
                logit(opts.opacity),
                image.pixel(r, c),
            );
        }
    }
    Ok(set)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// An (elevation, azimuth) pair in degrees, the schedule's unit of config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    pub elev: f64,
    pub azim: f64,
}

/// Serializable description of the outpaint camera schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub reference: PosePair,
    pub loops: Vec<Vec<PosePair>>,
    pub radius: f64,
    pub fovy: f64,
    pub near: f64,
    pub far: f64,
    pub resolution: (usize, usize),
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            reference: PosePair { elev: 0.0, azim: 0.0 },
            loops: vec![
                vec![
                    PosePair { elev: 0.0, azim: 30.0 },
                    PosePair { elev: 0.0, azim: -30.0 },
                    PosePair { elev: 15.0, azim: 0.0 },
                    PosePair { elev: -15.0, azim: 0.0 },
                ],
                vec![
                    PosePair { elev: 15.0, azim: 30.0 },
                    PosePair { elev: 15.0, azim: -30.0 },
                    PosePair { elev: -15.0, azim: 30.0 },
                    PosePair { elev: -15.0, azim: -30.0 },
                ],
            ],
            radius: 2.5,
            fovy: 60.0,
            near: 0.1,
            far: 10000.0,
            resolution: (256, 256),
        }
    }
}

/// The reference camera plus the per-loop outpaint cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSchedule {
    pub reference: CameraPose,
    pub loops: Vec<Vec<CameraPose>>,
}

impl CameraSchedule {
    /// Total distinct poses including the reference.
    pub fn camera_count(&self) -> usize {
        1 + self.loops.iter().map(|l| l.len()).sum::<usize>()
    }

    /// Reference first, then loop cameras in schedule order.
    pub fn all_cameras(&self) -> Vec<CameraPose> {
        let mut out = vec![self.reference];
        for l in &self.loops {
            out.extend(l.iter().copied());
        }
        out
    }
}

/// Builds the camera schedule from config, rejecting duplicate poses.
pub fn build_schedule(config: &ScheduleConfig) -> Result<CameraSchedule> {
    let mut seen: Vec<PosePair> = vec![config.reference];
    let make = |p: &PosePair| {
        make_lookat_camera(
            p.elev,
            p.azim,
            config.radius,
            config.fovy,
            config.near,
            config.far,
            config.resolution,
        )
    };
    let reference = make(&config.reference)?;
    let mut loops = Vec::with_capacity(config.loops.len());
    for loop_cfg in &config.loops {
        let mut cams = Vec::with_capacity(loop_cfg.len());
        for p in loop_cfg {
            if seen.iter().any(|s| s.elev == p.elev && s.azim == p.azim) {
                return Err(CocoError::InvalidConfig(format!(
                    "duplicate camera pose (elev {}, azim {}) in schedule",
                    p.elev, p.azim
                )));
            }
            seen.push(*p);
            cams.push(make(p)?);
        }
        loops.push(cams);
    }
    Ok(CameraSchedule { reference, loops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn test_camera() -> CameraPose {
        make_lookat_camera(0.0, 0.0, 2.5, 60.0, 0.1, 10000.0, (256, 256)).unwrap()
    }

    #[test]
    fn reference_camera_sits_on_optical_axis() {
        let cam = test_camera();
        assert!((cam.eye() - Vector3::new(0.0, 0.0, 2.5)).norm() < 1e-12);
        cam.check().unwrap();
    }

    #[test]
    fn origin_projects_to_image_center_at_radius_depth() {
        for r in [1.0, 2.5, 7.0] {
            let cam = make_lookat_camera(0.0, 0.0, r, 60.0, 0.1, 10000.0, (128, 128)).unwrap();
            let (px, depth) = project(&Vector3::zeros(), &cam).unwrap();
            assert!((px[0] - 64.0).abs() < 1e-9 && (px[1] - 64.0).abs() < 1e-9);
            assert!((depth - r).abs() < 1e-12);
        }
    }

    #[test]
    fn tilted_view_matrix_matches_hand_composed_rotations() {
        // Independently compose elevation/azimuth rotations: the camera frame
        // is the reference frame rotated by azimuth about world y, then
        // elevation about the camera's right axis.
        let (elev, azim) = (15.0f64, 30.0f64);
        let cam = make_lookat_camera(elev, azim, 2.5, 60.0, 0.1, 10000.0, (64, 64)).unwrap();
        let ry = nalgebra::Rotation3::from_axis_angle(
            &Vector3::y_axis(),
            azim.to_radians(),
        );
        let right0 = Vector3::new(1.0, 0.0, 0.0);
        let right = ry * right0;
        // Positive elevation raises the eye, pitching the camera downward,
        // which is a negative rotation about its right axis.
        let rx = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(right),
            -elev.to_radians(),
        );
        // Reference camera axes in world coords: right +x, down -y, forward -z.
        let expect_right = rx * right;
        let expect_down = rx * (ry * Vector3::new(0.0, -1.0, 0.0));
        let expect_forward = rx * (ry * Vector3::new(0.0, 0.0, -1.0));
        let r = cam.rotation();
        assert!((r.row(0).transpose() - expect_right).norm() < 1e-9);
        assert!((r.row(1).transpose() - expect_down).norm() < 1e-9);
        assert!((r.row(2).transpose() - expect_forward).norm() < 1e-9);
    }

    #[test]
    fn project_unproject_round_trip_1000_points() {
        let cam = make_lookat_camera(22.0, -40.0, 2.5, 60.0, 0.1, 10000.0, (128, 96)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut tested = 0;
        while tested < 1000 {
            let p = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let Ok((px, d)) = project(&p, &cam) else { continue };
            let back = unproject(px, d, &cam).unwrap();
            let rel = (back - p).norm() / p.norm().max(1.0);
            assert!(rel < 1e-5, "round trip error {rel}");
            tested += 1;
        }
    }

    #[test]
    fn half_image_plane_extent_lands_at_three_quarter_width() {
        let cam = test_camera();
        // A point whose lateral offset is half the image-plane half-extent.
        let z = 1.0;
        let x = (30.0f64.to_radians()).tan() * z / 2.0;
        let p_cam = Vector3::new(x, 0.0, z);
        let world = cam.camera_to_world(&p_cam);
        let (px, _) = project(&world, &cam).unwrap();
        assert!((px[0] - 192.0).abs() < 1e-9, "got {}", px[0]);
    }

    #[test]
    fn behind_camera_point_is_rejected() {
        let cam = test_camera();
        let behind = Vector3::new(0.0, 0.0, 5.0); // behind the eye at z=2.5
        assert!(matches!(
            project(&behind, &cam),
            Err(CocoError::BehindCamera { .. })
        ));
    }

    #[test]
    fn unproject_rejects_non_positive_depth() {
        let cam = test_camera();
        assert!(unproject([1.0, 1.0], 0.0, &cam).is_err());
        assert!(unproject([1.0, 1.0], -2.0, &cam).is_err());
    }

    #[test]
    fn invalid_camera_arguments_are_rejected() {
        assert!(make_lookat_camera(0.0, 0.0, -1.0, 60.0, 0.1, 100.0, (8, 8)).is_err());
        assert!(make_lookat_camera(0.0, 0.0, 1.0, 60.0, 0.1, 100.0, (0, 8)).is_err());
        assert!(make_lookat_camera(0.0, 0.0, 1.0, 190.0, 0.1, 100.0, (8, 8)).is_err());
        assert!(make_lookat_camera(0.0, 0.0, 1.0, 60.0, 0.5, 0.2, (8, 8)).is_err());
    }

    #[test]
    fn lift_frame_count_matches_valid_mask() {
        let cam = make_lookat_camera(0.0, 0.0, 2.5, 60.0, 0.1, 10000.0, (16, 16)).unwrap();
        let img = Image::constant(16, 16, [0.2, 0.4, 0.6]);
        let depth = DepthMap::constant(16, 16, 2.5);
        let full = Mask::filled(16, 16, true);
        let set = lift_frame(&img, &depth, &full, &cam, LiftOptions::default()).unwrap();
        assert_eq!(set.len(), 256);

        let mut one = Mask::filled(16, 16, false);
        one.set(8, 8, true);
        let single = lift_frame(&img, &depth, &one, &cam, LiftOptions::default()).unwrap();
        assert_eq!(single.len(), 1);
        let expect = unproject([8.5, 8.5], 2.5, &cam).unwrap();
        assert!((single.position(0) - expect).norm() < 1e-12);
    }

    #[test]
    fn lift_constant_depth_gives_planar_grid() {
        let cam = test_camera();
        let img = Image::constant(256, 256, [0.5; 3]);
        let depth = DepthMap::constant(256, 256, 3.0);
        let full = Mask::filled(256, 256, true);
        let set = lift_frame(&img, &depth, &full, &cam, LiftOptions::default()).unwrap();
        assert_eq!(set.len(), 65536);
        // All positions share the camera-space z plane.
        for i in (0..set.len()).step_by(977) {
            let p_cam = cam.world_to_camera(&set.position(i));
            assert!((p_cam.z - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lift_frame_rejects_resolution_mismatch() {
        let cam = test_camera();
        let img = Image::constant(8, 8, [0.5; 3]);
        let depth = DepthMap::constant(8, 8, 1.0);
        let mask = Mask::filled(8, 8, true);
        assert!(matches!(
            lift_frame(&img, &depth, &mask, &cam, LiftOptions::default()),
            Err(CocoError::InvalidArgument(_))
        ));
    }

    #[test]
    fn default_schedule_has_nine_cameras() {
        let schedule = build_schedule(&ScheduleConfig::default()).unwrap();
        assert_eq!(schedule.camera_count(), 9);
        assert_eq!(schedule.loops.len(), 2);
        assert_eq!(schedule.loops[0].len(), 4);
        assert_eq!(schedule.loops[1].len(), 4);
        assert_eq!(schedule.loops[0][0].azimuth_deg, 30.0);
    }

    #[test]
    fn empty_and_custom_schedules() {
        let mut cfg = ScheduleConfig::default();
        cfg.loops.clear();
        assert_eq!(build_schedule(&cfg).unwrap().camera_count(), 1);

        cfg.loops = vec![vec![
            PosePair { elev: 5.0, azim: 10.0 },
            PosePair { elev: -5.0, azim: -10.0 },
        ]];
        assert_eq!(build_schedule(&cfg).unwrap().camera_count(), 3);
    }

    #[test]
    fn duplicate_pose_across_loops_is_invalid_config() {
        let mut cfg = ScheduleConfig::default();
        cfg.loops[1][0] = cfg.loops[0][0];
        assert!(matches!(
            build_schedule(&cfg),
            Err(CocoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn schedule_json_round_trip() {
        let cfg = ScheduleConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(json.contains("\"loops\""));
        assert!(json.contains("\"reference\""));
    }
}
