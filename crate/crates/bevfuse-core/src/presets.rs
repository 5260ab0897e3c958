//! Canonical rig/grid/bin configurations.
//!
//! `desk_*` is the default working scale; `micro_*` keeps finite-difference
//! checks cheap; `bench_*` sizes the training benchmark. `paper_scale_grid`
//! records the full-scale setting as a named preset only.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{make_camera, BevGrid, CameraRig, DepthBins};

/// Image feature stride between pixels and radar frustum columns.
pub const COLUMN_STRIDE: usize = 4;

/// Two cameras: forward and left, 48x96 images with ~45 deg half FOV.
pub fn desk_rig() -> CameraRig {
    CameraRig {
        cameras: vec![
            make_camera(48.0, 48.0, 48.0, 24.0, (48, 96), 0.0, [0.5, 0.0, 1.2]),
            make_camera(
                48.0,
                48.0,
                48.0,
                24.0,
                (48, 96),
                core::f64::consts::FRAC_PI_2,
                [0.0, 0.5, 1.2],
            ),
        ],
    }
}

pub fn desk_grid() -> BevGrid {
    BevGrid {
        x_cells: 48,
        y_cells: 48,
        extent: 20.0,
        z_anchors: vec![-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0],
    }
}

pub fn desk_bins() -> DepthBins {
    DepthBins { d_min: 0.5, d_max: 40.0, count: 32 }
}

/// Tiny geometry for gradient checks: 12x24 images, 6x6 BEV, 6 bins.
pub fn micro_rig() -> CameraRig {
    CameraRig {
        cameras: vec![
            make_camera(12.0, 12.0, 12.0, 6.0, (12, 24), 0.0, [0.5, 0.0, 1.2]),
            make_camera(
                12.0,
                12.0,
                12.0,
                6.0,
                (12, 24),
                core::f64::consts::FRAC_PI_2,
                [0.0, 0.5, 1.2],
            ),
        ],
    }
}

pub fn micro_grid() -> BevGrid {
    // Anchor heights chosen so pillar projections land off the pixel
    // lattice; finite-difference checks then never straddle a bilinear kink.
    BevGrid { x_cells: 6, y_cells: 6, extent: 18.0, z_anchors: vec![0.23, 1.77] }
}

pub fn micro_bins() -> DepthBins {
    DepthBins { d_min: 0.5, d_max: 24.5, count: 6 }
}

/// Benchmark geometry for the training ablations: 24x48 images, 24x24 BEV.
pub fn bench_rig() -> CameraRig {
    CameraRig {
        cameras: vec![
            make_camera(24.0, 24.0, 24.0, 12.0, (24, 48), 0.0, [0.5, 0.0, 1.2]),
            make_camera(
                24.0,
                24.0,
                24.0,
                12.0,
                (24, 48),
                core::f64::consts::FRAC_PI_2,
                [0.0, 0.5, 1.2],
            ),
        ],
    }
}

pub fn bench_grid() -> BevGrid {
    BevGrid { x_cells: 24, y_cells: 24, extent: 20.0, z_anchors: vec![-0.2, 1.0, 2.2] }
}

pub fn bench_bins() -> DepthBins {
    DepthBins { d_min: 0.5, d_max: 24.5, count: 16 }
}

/// Full-scale BEV grid recorded as a preset; not the test default.
pub fn paper_scale_grid() -> BevGrid {
    BevGrid {
        x_cells: 200,
        y_cells: 200,
        extent: 51.2,
        z_anchors: vec![-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0],
    }
}

/// z anchors uniformly spanning [-1, 3] m.
pub fn default_z_anchors(n: usize) -> Vec<f64> {
    (0..n).map(|k| -1.0 + 4.0 * k as f64 / (n.max(2) - 1) as f64).collect()
}
