//! Camera models, BEV grid, pillar reference points, and the image/frustum
//! projections.
//!
//! Two projections matter here. The pinhole projection maps a 3D ego-frame
//! point to image pixels (u, v) with depth d; every point along one camera
//! ray lands on the same (u, v). The frustum projection keeps u, drops v, and
//! turns d into a continuous depth-bin coordinate, so points along the same
//! ray separate by range.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Points closer than this to the camera plane are never visible.
pub const NEAR_CLIP_M: f64 = 0.1;

/// One pinhole camera: intrinsics in pixels and a rigid ego-to-camera
/// transform in meters.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rotation ego -> camera, row major.
    #[cfg_attr(feature = "serde", serde(rename = "R"))]
    pub r: [[f64; 3]; 3],
    /// Translation ego -> camera: p_cam = R p_ego + t.
    pub t: [f64; 3],
    /// Image (height, width) in pixels.
    pub hw: (usize, usize),
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CoreError::Config { detail: "focal lengths must be positive".into() });
        }
        let (h, w) = self.hw;
        if !(self.cx > 0.0 && self.cx < w as f64 && self.cy > 0.0 && self.cy < h as f64) {
            return Err(CoreError::Config {
                detail: format!("principal point ({}, {}) outside {}x{}", self.cx, self.cy, w, h),
            });
        }
        // R^T R = I within 1e-9.
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += self.r[k][i] * self.r[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if crate::mathf::abs(dot - want) > 1e-9 {
                    return Err(CoreError::Config {
                        detail: "camera rotation is not orthonormal".to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn ego_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    #[inline]
    pub fn cam_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        let r = &self.r;
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    /// Camera center in the ego frame.
    pub fn center_ego(&self) -> [f64; 3] {
        self.cam_to_ego([0.0, 0.0, 0.0])
    }
}

/// All cameras of the rig.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(CoreError::Config { detail: "rig has no cameras".into() });
        }
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// BEV grid: X by Y cells over [-extent, extent]^2 meters, with pillar
/// anchor heights.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BevGrid {
    #[cfg_attr(feature = "serde", serde(rename = "X"))]
    pub x_cells: usize,
    #[cfg_attr(feature = "serde", serde(rename = "Y"))]
    pub y_cells: usize,
    pub extent: f64,
    pub z_anchors: Vec<f64>,
}

impl BevGrid {
    pub fn validate(&self) -> Result<()> {
        if self.x_cells < 2 || self.y_cells < 2 {
            return Err(CoreError::Config { detail: "BEV grid needs at least 2x2 cells".into() });
        }
        if self.z_anchors.is_empty() {
            return Err(CoreError::Config { detail: "need at least one z anchor".into() });
        }
        if self.z_anchors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config { detail: "z_anchors must strictly increase".into() });
        }
        if self.extent <= 0.0 {
            return Err(CoreError::Config { detail: "extent must be positive".into() });
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.x_cells * self.y_cells
    }

    #[inline]
    pub fn cell_size_x(&self) -> f64 {
        2.0 * self.extent / self.x_cells as f64
    }

    #[inline]
    pub fn cell_size_y(&self) -> f64 {
        2.0 * self.extent / self.y_cells as f64
    }

    /// Metric center of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.cell_size_x() - self.extent,
            (j as f64 + 0.5) * self.cell_size_y() - self.extent,
        )
    }

    /// Cell containing metric (x, y), if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = crate::mathf::floor((x + self.extent) / self.cell_size_x());
        let j = crate::mathf::floor((y + self.extent) / self.cell_size_y());
        if i < 0.0 || j < 0.0 || i >= self.x_cells as f64 || j >= self.y_cells as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i * self.y_cells + j
    }
}

/// Uniform depth bins over [d_min, d_max].
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    #[cfg_attr(feature = "serde", serde(rename = "D"))]
    pub count: usize,
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(CoreError::Config { detail: "need 0 < d_min < d_max".into() });
        }
        if self.count < 2 {
            return Err(CoreError::Config { detail: "need at least 2 depth bins".into() });
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.width()
    }

    /// Continuous bin coordinate: bin center k maps to exactly k.
    #[inline]
    pub fn continuous_index(&self, d: f64) -> f64 {
        (d - self.d_min) / self.width() - 0.5
    }

    /// Discrete bin holding depth d, clamped to the valid range.
    #[inline]
    pub fn bin_of(&self, d: f64) -> usize {
        let k = crate::mathf::floor((d - self.d_min) / self.width());
        (k.max(0.0) as usize).min(self.count - 1)
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.d_min && d <= self.d_max
    }
}

/// Result of projecting one point into a camera image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Result of projecting one point into a camera frustum (v discarded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumPoint {
    pub u: f64,
    pub d_idx: f64,
    pub visible: bool,
}

/// Pinhole projection of ego-frame points into camera `cam`.
///
/// Invisible points are flagged, never dropped.
pub fn project_to_image(points: &[[f64; 3]], rig: &CameraRig, cam: usize) -> Vec<ImagePoint> {
    let camera = &rig.cameras[cam];
    let (h, w) = camera.hw;
    points
        .iter()
        .map(|&p| {
            let pc = camera.ego_to_cam(p);
            let d = pc[2];
            if d <= 1e-9 {
                return ImagePoint { u: 0.0, v: 0.0, depth: d, visible: false };
            }
            let u = camera.fx * pc[0] / d + camera.cx;
            let v = camera.fy * pc[1] / d + camera.cy;
            let visible = d > NEAR_CLIP_M
                && u >= 0.0
                && u <= (w - 1) as f64
                && v >= 0.0
                && v <= (h - 1) as f64;
            ImagePoint { u, v, depth: d, visible }
        })
        .collect()
}

/// Frustum projection: same u as the image projection, depth mapped to a
/// continuous bin coordinate, v discarded.
pub fn project_to_frustum(
    points: &[[f64; 3]],
    rig: &CameraRig,
    cam: usize,
    bins: &DepthBins,
) -> Vec<FrustumPoint> {
    let camera = &rig.cameras[cam];
    let (_, w) = camera.hw;
    points
        .iter()
        .map(|&p| {
            let pc = camera.ego_to_cam(p);
            let d = pc[2];
            if d <= 1e-9 {
                return FrustumPoint { u: 0.0, d_idx: 0.0, visible: false };
            }
            let u = camera.fx * pc[0] / d + camera.cx;
            let d_idx = bins.continuous_index(d);
            let visible = bins.contains(d) && u >= 0.0 && u <= (w - 1) as f64;
            FrustumPoint { u, d_idx, visible }
        })
        .collect()
}

/// Pillar reference points: for each BEV cell, `n_z` 3D points at the cell
/// center with z from the grid's anchors. Shape [X*Y, n_z, 3].
pub fn pillar_reference_points(grid: &BevGrid) -> Tensor {
    let n_z = grid.z_anchors.len();
    let cells = grid.cells();
    let mut data = Vec::with_capacity(cells * n_z * 3);
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            let (x, y) = grid.cell_center(i, j);
            for &z in &grid.z_anchors {
                data.push(x);
                data.push(y);
                data.push(z);
            }
        }
    }
    Tensor { shape: alloc::vec![cells, n_z, 3], data }
}

/// Unproject an image observation (u, v, d) back to the ego frame.
pub fn unproject_from_image(camera: &Camera, u: f64, v: f64, d: f64) -> [f64; 3] {
    let xc = (u - camera.cx) / camera.fx * d;
    let yc = (v - camera.cy) / camera.fy * d;
    camera.cam_to_ego([xc, yc, d])
}

/// Yaw-only rotation matrix mapping ego to a camera looking along the ego
/// direction `yaw` (radians, 0 = +x), with the usual x-right/y-down/z-forward
/// camera axes.
pub fn camera_rotation_for_yaw(yaw: f64) -> [[f64; 3]; 3] {
    let (s, c) = (crate::mathf::sin(yaw), crate::mathf::cos(yaw));
    // Camera basis in ego coordinates: forward f = (c, s, 0),
    // right = (s, -c, 0)... keep right-handed with y down:
    // x_cam (right) = (-s, c, 0) is left; use right = (s, -c, 0), y_cam (down) = (0, 0, -1).
    [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]]
}

/// Convenience constructor for a yaw-mounted camera at `center` (ego frame).
pub fn make_camera(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    hw: (usize, usize),
    yaw: f64,
    center: [f64; 3],
) -> Camera {
    let r = camera_rotation_for_yaw(yaw);
    // t = -R * center so that p_cam = R (p_ego - center).
    let t = [
        -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
        -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
        -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
    ];
    Camera { fx, fy, cx, cy, r, t, hw }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 64.0,
            cy: 32.0,
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0, 0.0, 0.0],
            hw: (64, 128),
        }
    }

    fn rig() -> CameraRig {
        CameraRig { cameras: alloc::vec![identity_camera()] }
    }

    #[test]
    fn principal_axis_projects_to_principal_point() {
        let r = rig();
        let pts = [[0.0, 0.0, 5.0]];
        let out = project_to_image(&pts, &r, 0);
        assert_eq!(out[0].u, 64.0);
        assert_eq!(out[0].v, 32.0);
        assert_eq!(out[0].depth, 5.0);
        assert!(out[0].visible);
    }

    #[test]
    fn pinhole_arithmetic_hand_case() {
        let r = rig();
        let out = project_to_image(&[[1.0, 0.5, 2.0]], &r, 0);
        assert_eq!(out[0].u, 114.0);
        assert_eq!(out[0].v, 57.0);
        assert_eq!(out[0].depth, 2.0);
        assert!(out[0].visible);
    }

    #[test]
    fn behind_camera_is_flagged_not_dropped() {
        let r = rig();
        let out = project_to_image(&[[0.0, 0.0, -1.0]], &r, 0);
        assert_eq!(out.len(), 1);
        assert!(!out[0].visible);
    }

    #[test]
    fn frustum_first_bin_center_and_range_clip() {
        let r = rig();
        let bins = DepthBins { d_min: 0.5, d_max: 40.0, count: 32 };
        let d0 = bins.d_min + 0.5 * bins.width();
        let out = project_to_frustum(&[[0.0, 0.0, d0]], &r, 0, &bins);
        assert!((out[0].u - 64.0).abs() < 1e-12);
        assert!(out[0].d_idx.abs() < 1e-12);
        assert!(out[0].visible);

        let far = project_to_frustum(&[[0.0, 0.0, bins.d_max + 1.0]], &r, 0, &bins);
        assert!(!far[0].visible);
    }

    #[test]
    fn same_ray_points_share_u_but_split_in_depth() {
        let r = rig();
        let bins = DepthBins { d_min: 0.5, d_max: 40.0, count: 32 };
        // Same azimuth from the camera, different ranges.
        let dir = [0.3, 0.1, 1.0];
        let p1 = [dir[0] * 8.0, dir[1] * 8.0, dir[2] * 8.0];
        let p2 = [dir[0] * 16.0, dir[1] * 16.0, dir[2] * 16.0];
        let img = project_to_image(&[p1, p2], &r, 0);
        assert!((img[0].u - img[1].u).abs() < 1e-9);
        assert!((img[0].v - img[1].v).abs() < 1e-9);
        let fr = project_to_frustum(&[p1, p2], &r, 0, &bins);
        assert!((fr[0].u - img[0].u).abs() < 1e-12, "frustum u equals image u");
        assert!((fr[1].d_idx - fr[0].d_idx).abs() > 1.0);
    }

    #[test]
    fn unprojection_round_trips_visible_points() {
        let cam = make_camera(80.0, 80.0, 48.0, 24.0, (48, 96), 0.7, [0.2, -0.1, 1.5]);
        cam.validate().unwrap();
        let r = CameraRig { cameras: alloc::vec![cam] };
        let p = [7.0, 3.0, 0.4];
        let out = project_to_image(&[p], &r, 0);
        assert!(out[0].visible);
        let back = unproject_from_image(&r.cameras[0], out[0].u, out[0].v, out[0].depth);
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-9, "axis {k}: {} vs {}", back[k], p[k]);
        }
    }

    #[test]
    fn pillar_reference_points_closed_form() {
        let grid = BevGrid {
            x_cells: 2,
            y_cells: 2,
            extent: 1.0,
            z_anchors: alloc::vec![0.0],
        };
        let pts = pillar_reference_points(&grid);
        assert_eq!(pts.shape, alloc::vec![4, 1, 3]);
        assert_eq!(&pts.data[0..3], &[-0.5, -0.5, 0.0]);
        assert_eq!(&pts.data[9..12], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn pillar_points_share_xy_and_stack_heights() {
        let grid = BevGrid {
            x_cells: 3,
            y_cells: 4,
            extent: 6.0,
            z_anchors: alloc::vec![-1.0, 0.0, 1.5, 3.0],
        };
        let pts = pillar_reference_points(&grid);
        assert_eq!(pts.shape[1], 4);
        for q in 0..grid.cells() {
            let base = q * 4 * 3;
            for a in 1..4 {
                assert_eq!(pts.data[base], pts.data[base + a * 3]);
                assert_eq!(pts.data[base + 1], pts.data[base + a * 3 + 1]);
            }
            assert_eq!(pts.data[base + 2], -1.0);
            assert_eq!(pts.data[base + 3 * 3 + 2], 3.0);
        }
    }

    #[test]
    fn yaw_camera_rotation_is_orthonormal_and_forward_maps_to_depth() {
        for yaw in [0.0, 0.5, 1.2, -2.0] {
            let cam = make_camera(50.0, 50.0, 32.0, 24.0, (48, 64), yaw, [0.0, 0.0, 1.0]);
            cam.validate().unwrap();
            // A point straight ahead along the yaw direction has positive depth.
            let p = [10.0 * crate::mathf::cos(yaw), 10.0 * crate::mathf::sin(yaw), 1.0];
            let pc = cam.ego_to_cam(p);
            assert!((pc[2] - 10.0).abs() < 1e-9);
            assert!(pc[0].abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cam = identity_camera();
        cam.fx = -1.0;
        assert!(cam.validate().is_err());

        let bins = DepthBins { d_min: 0.0, d_max: 40.0, count: 32 };
        assert!(bins.validate().is_err());

        let grid =
            BevGrid { x_cells: 1, y_cells: 2, extent: 1.0, z_anchors: alloc::vec![0.0] };
        assert!(grid.validate().is_err());
    }
}
