//! Deterministic synthetic world: box objects rendered to camera images,
//! nearest-surface depth, center heatmaps, BEV class labels, and noisy radar
//! sweeps with clutter.
//!
//! Everything is a pure function of the scene seed. Object sampling, radar
//! noise, and clutter draw from separate counter-based streams, so toggling
//! one does not perturb the others.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::geometry::{project_to_image, BevGrid, CameraRig, DepthBins, NEAR_CLIP_M};
use crate::radar_stream::{RadarPoint, RadarPointCloud};
use crate::rng::{Stream, StreamId};
use crate::tensor::Tensor;

/// Seconds between radar sweeps.
pub const SWEEP_DT: f64 = 0.1;
/// Current sweep plus six previous.
pub const N_SWEEPS: usize = 7;
/// Radar mounting point in the ego frame.
pub const RADAR_POS: [f64; 3] = [0.0, 0.0, 0.5];
/// Background gray level in rendered images.
pub const BACKGROUND: f64 = 0.05;

/// One axis-aligned box object.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Class label, >= 1 (0 is free space).
    pub class_id: usize,
    /// dBsm.
    pub rcs: f64,
    pub velocity: [f64; 2],
}

/// Full scene description; everything downstream derives from this + seed.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Expected clutter points per sweep.
    pub clutter_rate: f64,
    /// Radar range noise sigma, meters.
    pub range_noise: f64,
    /// Radar azimuth noise sigma, radians.
    pub azimuth_noise: f64,
    /// Surface returns per object per sweep.
    pub returns_per_object: usize,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        SceneSpec {
            seed,
            objects: Vec::new(),
            clutter_rate: 5.0,
            range_noise: 0.15,
            azimuth_noise: 0.5 * core::f64::consts::PI / 180.0,
            returns_per_object: 3,
        }
    }

    pub fn noise_free(mut self) -> Self {
        self.clutter_rate = 0.0;
        self.range_noise = 0.0;
        self.azimuth_noise = 0.0;
        self
    }
}

/// Ground truth rendered alongside the sensor data.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// [X, Y] class labels, 0 = free.
    pub bev_class: Tensor,
    /// Per camera [H, W] nearest-surface depth in meters; +inf where empty.
    pub depth_images: Vec<Tensor>,
    /// Per camera [H, W] Gaussian-splatted object centers, peak 1.
    pub heatmaps: Vec<Tensor>,
    /// Per camera, per pixel: index of the nearest object, -1 if none.
    pub object_index: Vec<Vec<i32>>,
}

/// Everything one scene provides to the model.
#[derive(Debug, Clone)]
pub struct SceneData {
    /// Per camera [3, H, W] images in [0, 1].
    pub images: Vec<Tensor>,
    /// Radar sweeps, index 0 = current.
    pub sweeps: Vec<RadarPointCloud>,
    pub gt: GroundTruth,
}

impl SceneData {
    /// All sweeps merged in the current ego frame (static ego).
    pub fn accumulated_cloud(&self) -> RadarPointCloud {
        let poses = vec![crate::radar_stream::EgoPose::identity(); self.sweeps.len()];
        crate::radar_stream::accumulate_sweeps(&self.sweeps, &poses).expect("static ego")
    }
}

fn ray_box(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for k in 0..3 {
        if crate::mathf::abs(d[k]) < 1e-12 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        t_enter = t_enter.max(near);
        t_exit = t_exit.min(far);
    }
    if t_enter <= t_exit && t_exit > 0.0 {
        Some((t_enter, t_exit))
    } else {
        None
    }
}

/// Deterministic per-class albedo.
pub fn class_albedo(class_id: usize) -> [f64; 3] {
    let k = class_id as f64;
    [
        0.25 + 0.13 * ((k * 0.9) % 5.0),
        0.20 + 0.11 * ((k * 1.7) % 6.0),
        0.30 + 0.09 * ((k * 2.3) % 7.0),
    ]
    .map(|v: f64| v.min(0.95))
}

fn object_pose_at(obj: &ObjectSpec, sweep: usize) -> [f64; 3] {
    let t = sweep as f64 * SWEEP_DT;
    [
        obj.center[0] - obj.velocity[0] * t,
        obj.center[1] - obj.velocity[1] * t,
        obj.center[2],
    ]
}

fn validate_spec(spec: &SceneSpec, grid: &BevGrid) -> Result<()> {
    for (i, o) in spec.objects.iter().enumerate() {
        if o.half_extents.iter().any(|&h| h <= 0.0) {
            return Err(CoreError::Spec {
                detail: format!("object {i} has a degenerate (zero-volume) extent"),
            });
        }
        if o.class_id == 0 {
            return Err(CoreError::Spec { detail: format!("object {i} uses class 0 (free)") });
        }
        for k in 0..2 {
            if crate::mathf::abs(o.center[k]) + o.half_extents[k] > grid.extent {
                return Err(CoreError::Spec {
                    detail: format!("object {i} extends outside the BEV extent"),
                });
            }
        }
    }
    Ok(())
}

/// Render the scene: camera images, depth, heatmaps, BEV labels, radar.
pub fn generate_scene(spec: &SceneSpec, rig: &CameraRig, grid: &BevGrid) -> Result<SceneData> {
    validate_spec(spec, grid)?;
    let mut images = Vec::new();
    let mut depth_images = Vec::new();
    let mut heatmaps = Vec::new();
    let mut object_index = Vec::new();

    for camera in &rig.cameras {
        let (h, w) = camera.hw;
        let mut img = Tensor::filled(&[3, h, w], BACKGROUND);
        let mut depth = Tensor::filled(&[h, w], f64::INFINITY);
        let mut objidx = vec![-1i32; h * w];
        let origin = camera.center_ego();
        for y in 0..h {
            for x in 0..w {
                let dc = [
                    (x as f64 - camera.cx) / camera.fx,
                    (y as f64 - camera.cy) / camera.fy,
                    1.0,
                ];
                // Rotate the camera-frame direction into the ego frame.
                let r = &camera.r;
                let de = [
                    r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
                    r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
                    r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
                ];
                let mut best = f64::INFINITY;
                let mut hit = -1i32;
                for (i, obj) in spec.objects.iter().enumerate() {
                    let lo = [
                        obj.center[0] - obj.half_extents[0],
                        obj.center[1] - obj.half_extents[1],
                        obj.center[2] - obj.half_extents[2],
                    ];
                    let hi = [
                        obj.center[0] + obj.half_extents[0],
                        obj.center[1] + obj.half_extents[1],
                        obj.center[2] + obj.half_extents[2],
                    ];
                    if let Some((enter, _)) = ray_box(origin, de, lo, hi) {
                        let s = enter.max(NEAR_CLIP_M);
                        if s < best && enter > NEAR_CLIP_M {
                            best = s;
                            hit = i as i32;
                        }
                    }
                }
                if hit >= 0 {
                    depth.data[y * w + x] = best;
                    objidx[y * w + x] = hit;
                    let obj = &spec.objects[hit as usize];
                    let albedo = class_albedo(obj.class_id);
                    // Slight per-object tint keeps instances distinguishable.
                    let tint = 0.85 + 0.15 * (((hit as f64) * 0.37) % 1.0);
                    for ch in 0..3 {
                        img.data[ch * h * w + y * w + x] = (albedo[ch] * tint).clamp(0.0, 1.0);
                    }
                }
            }
        }
        // Heatmap from projected centers, CenterNet style.
        let mut heat = Tensor::zeros(&[h, w]);
        let centers: Vec<[f64; 3]> = spec.objects.iter().map(|o| o.center).collect();
        if !centers.is_empty() {
            let rig_one = CameraRig { cameras: vec![camera.clone()] };
            for (obj, pr) in spec.objects.iter().zip(project_to_image(&centers, &rig_one, 0)) {
                if !pr.visible {
                    continue;
                }
                let w_px = camera.fx * 2.0 * obj.half_extents[1] / pr.depth;
                let h_px = camera.fy * 2.0 * obj.half_extents[2] / pr.depth;
                let sigma = ((w_px + h_px) / 10.0).max(1.0);
                let win = (3.0 * sigma) as isize + 1;
                let (cu, cv) = (pr.u, pr.v);
                let (iu, iv) = (crate::mathf::round(cu) as isize, crate::mathf::round(cv) as isize);
                for yy in (iv - win).max(0)..(iv + win + 1).min(h as isize) {
                    for xx in (iu - win).max(0)..(iu + win + 1).min(w as isize) {
                        let d2 = (xx as f64 - cu) * (xx as f64 - cu)
                            + (yy as f64 - cv) * (yy as f64 - cv);
                        let g = crate::mathf::exp(-d2 / (2.0 * sigma * sigma));
                        let cell = &mut heat.data[yy as usize * w + xx as usize];
                        *cell = cell.max(g);
                    }
                }
                if iu >= 0 && iu < w as isize && iv >= 0 && iv < h as isize {
                    heat.data[iv as usize * w + iu as usize] = 1.0;
                }
            }
        }
        images.push(img);
        depth_images.push(depth);
        heatmaps.push(heat);
        object_index.push(objidx);
    }

    // BEV class labels: nearest containing object wins.
    let mut bev = Tensor::zeros(&[grid.x_cells, grid.y_cells]);
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            let (cx, cy) = grid.cell_center(i, j);
            let mut best = f64::INFINITY;
            let mut label = 0usize;
            for obj in &spec.objects {
                if crate::mathf::abs(cx - obj.center[0]) <= obj.half_extents[0]
                    && crate::mathf::abs(cy - obj.center[1]) <= obj.half_extents[1]
                {
                    let d = crate::mathf::hypot(obj.center[0], obj.center[1]);
                    if d < best {
                        best = d;
                        label = obj.class_id;
                    }
                }
            }
            bev.data[i * grid.y_cells + j] = label as f64;
        }
    }

    // Radar sweeps. Surface draws, noise, and clutter use separate streams.
    let surface = Stream::new(spec.seed, StreamId::Objects);
    let noise_root = Stream::new(spec.seed, StreamId::RadarNoise);
    let clutter_root = Stream::new(spec.seed, StreamId::Clutter);
    let mut sweeps = Vec::new();
    for s in 0..N_SWEEPS {
        let mut cloud = RadarPointCloud::default();
        for (i, obj) in spec.objects.iter().enumerate() {
            let mut surf = surface.fork((s * 1024 + i) as u64);
            let mut noise = noise_root.fork((s * 1024 + i) as u64);
            let center = object_pose_at(obj, s);
            // Entry face toward the radar.
            let lo = [
                center[0] - obj.half_extents[0],
                center[1] - obj.half_extents[1],
                center[2] - obj.half_extents[2],
            ];
            let hi = [
                center[0] + obj.half_extents[0],
                center[1] + obj.half_extents[1],
                center[2] + obj.half_extents[2],
            ];
            let to_center = [
                center[0] - RADAR_POS[0],
                center[1] - RADAR_POS[1],
                center[2] - RADAR_POS[2],
            ];
            let (axis, sign) = match ray_box(RADAR_POS, to_center, lo, hi) {
                Some((enter, _)) => {
                    // Which slab clamps the entry decides the face.
                    let p = [
                        RADAR_POS[0] + enter * to_center[0],
                        RADAR_POS[1] + enter * to_center[1],
                        RADAR_POS[2] + enter * to_center[2],
                    ];
                    let mut axis = 0;
                    let mut best = f64::INFINITY;
                    for k in 0..3 {
                        let dlo = crate::mathf::abs(p[k] - lo[k]);
                        let dhi = crate::mathf::abs(p[k] - hi[k]);
                        if dlo.min(dhi) < best {
                            best = dlo.min(dhi);
                            axis = k;
                        }
                    }
                    (axis, if to_center[axis] > 0.0 { -1.0 } else { 1.0 })
                }
                None => (0, -1.0),
            };
            for _ in 0..spec.returns_per_object {
                let mut p = center;
                p[axis] = center[axis] + sign * obj.half_extents[axis];
                let (t1, t2) = ((axis + 1) % 3, (axis + 2) % 3);
                p[t1] += surf.uniform_in(-0.8, 0.8) * obj.half_extents[t1];
                p[t2] += surf.uniform_in(-0.8, 0.8) * obj.half_extents[t2];
                // Polar noise around the radar origin.
                let r = crate::mathf::hypot(p[0], p[1]) + spec.range_noise * noise.normal();
                let az = crate::mathf::atan2(p[1], p[0]) + spec.azimuth_noise * noise.normal();
                let z = p[2] + 0.05 * spec.range_noise * noise.normal();
                cloud.points.push(RadarPoint {
                    pos: [r * crate::mathf::cos(az), r * crate::mathf::sin(az), z],
                    rcs: obj.rcs + 0.5 * noise.normal(),
                    vel: [
                        obj.velocity[0] + 0.1 * noise.normal(),
                        obj.velocity[1] + 0.1 * noise.normal(),
                    ],
                    sweep: s as u8,
                });
            }
        }
        let mut clutter = clutter_root.fork(s as u64);
        let n_clutter = clutter.poisson(spec.clutter_rate);
        for _ in 0..n_clutter {
            let r = clutter.uniform_in(1.0, grid.extent * 1.3);
            let az = clutter.uniform_in(-core::f64::consts::PI, core::f64::consts::PI);
            cloud.points.push(RadarPoint {
                pos: [
                    r * crate::mathf::cos(az),
                    r * crate::mathf::sin(az),
                    clutter.uniform_in(0.0, 2.0),
                ],
                rcs: -5.0 + 3.0 * clutter.normal(),
                vel: [0.5 * clutter.normal(), 0.5 * clutter.normal()],
                sweep: s as u8,
            });
        }
        sweeps.push(cloud);
    }

    Ok(SceneData {
        images,
        sweeps,
        gt: GroundTruth { bev_class: bev, depth_images, heatmaps, object_index },
    })
}

/// The canonical depth-ambiguity scene: two objects on one camera-0 ray at
/// ranges `d_near` and `d_far`, the far one fully hidden from the camera but
/// visible to radar, with contrasting radar signatures.
pub fn same_ray_scenario(
    d_near: f64,
    d_far: f64,
    azimuth: f64,
    rig: &CameraRig,
    bins: &DepthBins,
) -> Result<SceneSpec> {
    if !(bins.d_min < d_near && d_near < d_far && d_far < bins.d_max) {
        return Err(CoreError::Config {
            detail: format!(
                "need d_min < d_near < d_far < d_max, got {} < {} < {} < {}",
                bins.d_min, d_near, d_far, bins.d_max
            ),
        });
    }
    let camera = &rig.cameras[0];
    let origin = camera.center_ego();
    // Ray through the principal row at the given azimuth offset.
    let dc = [crate::mathf::sin(azimuth) / crate::mathf::cos(azimuth), 0.0, 1.0];
    let r = &camera.r;
    let de = [
        r[0][0] * dc[0] + r[1][0] * dc[1] + r[2][0] * dc[2],
        r[0][1] * dc[0] + r[1][1] * dc[1] + r[2][1] * dc[2],
        r[0][2] * dc[0] + r[1][2] * dc[1] + r[2][2] * dc[2],
    ];
    let at = |d: f64| [origin[0] + de[0] * d, origin[1] + de[1] * d, origin[2] + de[2] * d];
    let scale = d_far / d_near;
    let near_half = [0.8, 0.9, 0.9];
    // Slightly inside the near object's angular silhouette: fully occluded.
    let far_half = [0.8, 0.9 * scale * 0.92, 0.9 * scale * 0.92];
    let mut spec = SceneSpec::empty(7);
    spec.objects = vec![
        ObjectSpec {
            center: at(d_near),
            half_extents: near_half,
            class_id: 1,
            rcs: 18.0,
            velocity: [0.0, 2.0],
        },
        ObjectSpec {
            center: at(d_far),
            half_extents: far_half,
            class_id: 2,
            rcs: 2.0,
            velocity: [0.0, -2.0],
        },
    ];

    // The construction must actually overlap in pixel columns.
    let centers: Vec<[f64; 3]> = spec.objects.iter().map(|o| o.center).collect();
    let pr = project_to_image(&centers, rig, 0);
    if !(pr[0].visible && pr[1].visible) {
        return Err(CoreError::Geometry {
            detail: "same-ray objects do not both project into camera 0".into(),
        });
    }
    if crate::mathf::abs(pr[0].u - pr[1].u) > 1.5 {
        return Err(CoreError::Geometry {
            detail: format!(
                "projected columns do not overlap: u = {:.2} vs {:.2}",
                pr[0].u, pr[1].u
            ),
        });
    }
    // And the near box must occlude the ray to the far center.
    let near = &spec.objects[0];
    let lo = [
        near.center[0] - near.half_extents[0],
        near.center[1] - near.half_extents[1],
        near.center[2] - near.half_extents[2],
    ];
    let hi = [
        near.center[0] + near.half_extents[0],
        near.center[1] + near.half_extents[1],
        near.center[2] + near.half_extents[2],
    ];
    if ray_box(origin, de, lo, hi).is_none() {
        return Err(CoreError::Geometry {
            detail: "near object does not occlude the shared ray (objects too small)".into(),
        });
    }
    Ok(spec)
}
