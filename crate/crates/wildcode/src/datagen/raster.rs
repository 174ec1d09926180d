//! Billboard-ellipse rasterizer with a z-buffer.
//!
//! Each instance is approximated by a camera-facing ellipse sized by its
//! height and a per-category aspect ratio, drawn at the depth of its center.
//! Counts are "pixels where this instance is front-most", which is all the
//! ordering and conditioning machinery needs; nothing here aims to be
//! photometric.

use super::{category_aspect, Scene, CAMERA_FOV_DEG};

const NEAR_PLANE: f64 = 0.25;

/// Per-instance visible pixel counts at the given square resolution,
/// indexed like `scene.instances`. Off-screen instances count zero.
pub fn rasterize_counts(scene: &Scene, resolution: u32) -> Vec<u32> {
    let res = resolution as usize;
    let n = scene.instances.len();
    let mut depth = vec![f64::INFINITY; res * res];
    let mut owner = vec![usize::MAX; res * res];

    let focal = resolution as f64 / (2.0 * (CAMERA_FOV_DEG.to_radians() / 2.0).tan());
    let half = resolution as f64 / 2.0;

    for (i, inst) in scene.instances.iter().enumerate() {
        let center_world = [
            inst.position[0],
            inst.position[1],
            inst.position[2] + inst.height / 2.0,
        ];
        let q = scene.camera.to_camera(center_world);
        let z = -q[2];
        if z < NEAR_PLANE {
            continue; // behind the camera or inside the near plane
        }
        let cx = half + focal * q[0] / z;
        let cy = half - focal * q[1] / z;
        let b = focal * (inst.height / 2.0) / z;
        let a = focal * (inst.height * category_aspect(inst.category) / 2.0) / z;
        if a <= 0.0 || b <= 0.0 {
            continue;
        }

        let x0 = ((cx - a).floor().max(0.0)) as usize;
        let x1 = ((cx + a).ceil().min(res as f64)) as usize;
        let y0 = ((cy - b).floor().max(0.0)) as usize;
        let y1 = ((cy + b).ceil().min(res as f64)) as usize;
        for py in y0..y1 {
            let dy = (py as f64 + 0.5 - cy) / b;
            let dy2 = dy * dy;
            if dy2 > 1.0 {
                continue;
            }
            for px in x0..x1 {
                let dx = (px as f64 + 0.5 - cx) / a;
                if dx * dx + dy2 <= 1.0 {
                    let at = py * res + px;
                    if z < depth[at] {
                        depth[at] = z;
                        owner[at] = i;
                    }
                }
            }
        }
    }

    let mut counts = vec![0u32; n];
    for &o in &owner {
        if o != usize::MAX {
            counts[o] += 1;
        }
    }
    counts
}
