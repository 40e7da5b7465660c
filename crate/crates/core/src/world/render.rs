//! Top-down orthographic rasterizer.
//!
//! Both cameras look straight down: the head camera hovers 2 m above the
//! floor centered on the base (rotated by yaw + pan), the hand camera
//! floats 1 m above the end effector (rotated by yaw). Scene surfaces are
//! filled primitives with constant top heights; each pixel takes the
//! topmost primitive, which makes depth and segmentation exact.

use super::{end_effector, Frame, SegMask, WorldConfig, WorldState};

pub const HEAD_CAM_Z: f32 = 2.0;
pub const HAND_CAM_RISE: f32 = 1.0;

pub const OBJECT_RADIUS: f32 = 0.12;
pub const GOAL_RADIUS: f32 = 0.12;
pub const BASE_RADIUS: f32 = 0.25;
pub const EE_RADIUS: f32 = 0.08;

const GROUND_COLOR: [f32; 3] = [0.25, 0.28, 0.22];
const FIXTURE_COLOR: [f32; 3] = [0.5, 0.5, 0.55];
const GOAL_COLOR: [f32; 3] = [0.1, 0.8, 0.2];
const BASE_COLOR: [f32; 3] = [0.1, 0.2, 0.8];
const EE_COLOR: [f32; 3] = [0.9, 0.85, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Camera {
    Head,
    Hand,
}

enum Shape {
    Disc { r: f32 },
    /// Rectangle oriented by a unit axis; half extents along and across it.
    Rect {
        axis: [f32; 2],
        half_along: f32,
        half_lat: f32,
    },
}

struct Prim {
    center: [f32; 2],
    z: f32,
    color: [f32; 3],
    shape: Shape,
    is_object: bool,
}

impl Prim {
    fn contains(&self, p: [f32; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        match &self.shape {
            Shape::Disc { r } => dx * dx + dy * dy <= r * r,
            Shape::Rect {
                axis,
                half_along,
                half_lat,
            } => {
                let a = dx * axis[0] + dy * axis[1];
                let l = -dx * axis[1] + dy * axis[0];
                a.abs() <= *half_along && l.abs() <= *half_lat
            }
        }
    }
}

fn scene_prims(state: &WorldState) -> Vec<Prim> {
    let ee = end_effector(state);
    let fx = &state.fixture;
    let q = &state.object_quat;
    // The object tints with its orientation so the pose label is partially
    // observable from RGB.
    let object_color = [
        0.6 + 0.4 * q[0].abs(),
        0.1 + 0.5 * q[1].abs(),
        0.1 + 0.5 * q[2].abs(),
    ];
    vec![
        Prim {
            center: [
                fx.base_xy[0] - 0.25 * fx.axis[0],
                fx.base_xy[1] - 0.25 * fx.axis[1],
            ],
            z: fx.kind.top_z(),
            color: FIXTURE_COLOR,
            shape: Shape::Rect {
                axis: fx.axis,
                half_along: 0.25,
                half_lat: 0.25,
            },
            is_object: false,
        },
        Prim {
            center: [state.goal_pos[0], state.goal_pos[1]],
            z: state.goal_pos[2],
            color: GOAL_COLOR,
            shape: Shape::Disc { r: GOAL_RADIUS },
            is_object: false,
        },
        Prim {
            center: [state.robot.base[0], state.robot.base[1]],
            z: 0.3,
            color: BASE_COLOR,
            shape: Shape::Disc { r: BASE_RADIUS },
            is_object: false,
        },
        Prim {
            center: [ee[0], ee[1]],
            z: ee[2],
            color: EE_COLOR,
            shape: Shape::Disc { r: EE_RADIUS },
            is_object: false,
        },
        // Last so it wins height ties (a grasped object sits exactly at
        // the end effector).
        Prim {
            center: [state.object_pos[0], state.object_pos[1]],
            z: state.object_pos[2],
            color: object_color,
            shape: Shape::Disc { r: OBJECT_RADIUS },
            is_object: true,
        },
    ]
}

/// Maps pixel (row, col) to world xy for a camera centered at `center`
/// with image-up pointing along world angle `alpha`.
pub fn pixel_to_world(
    r: usize,
    c: usize,
    n: usize,
    view: f32,
    center: [f32; 2],
    alpha: f32,
) -> [f32; 2] {
    let scale = view / n as f32;
    let u = (c as f32 + 0.5 - n as f32 / 2.0) * scale;
    let v = (n as f32 / 2.0 - r as f32 - 0.5) * scale;
    let (s, cs) = alpha.sin_cos();
    [
        center[0] + v * cs + u * s,
        center[1] + v * s - u * cs,
    ]
}

pub fn render(state: &WorldState, camera: Camera, cfg: &WorldConfig) -> Frame {
    let n = cfg.frame_size;
    let ee = end_effector(state);
    let (center, alpha, view, cam_z) = match camera {
        Camera::Head => (
            [state.robot.base[0], state.robot.base[1]],
            state.robot.base[2] + state.robot.head[0],
            cfg.head_view,
            HEAD_CAM_Z,
        ),
        Camera::Hand => (
            [ee[0], ee[1]],
            state.robot.base[2],
            cfg.hand_view,
            ee[2] + HAND_CAM_RISE,
        ),
    };
    let prims = scene_prims(state);

    let mut rgb = vec![0.0f32; 3 * n * n];
    let mut depth_mm = vec![0.0f32; n * n];
    let mut seg = SegMask::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let p = pixel_to_world(r, c, n, view, center, alpha);
            let mut top_z = 0.0f32;
            let mut color = GROUND_COLOR;
            let mut is_object = false;
            for prim in &prims {
                if prim.z >= top_z && prim.contains(p) {
                    top_z = prim.z;
                    color = prim.color;
                    is_object = prim.is_object;
                }
            }
            let idx = r * n + c;
            depth_mm[idx] = ((cam_z - top_z) * 1000.0).max(0.0);
            for ch in 0..3 {
                rgb[ch * n * n + idx] = color[ch];
            }
            if is_object {
                seg.set(r, c, true);
            }
        }
    }
    Frame { rgb, depth_mm, seg }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{reset, Subtask};

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn ground_depth_is_exactly_two_meters() {
        let state = reset(Subtask::Pick, 9, &cfg());
        let frame = render(&state, Camera::Head, &cfg());
        // Corners of the 3 m head patch are ~2.1 m from the base; nothing
        // in a pick scene reaches there.
        let n = cfg().frame_size;
        for idx in [0, n - 1, (n - 1) * n, n * n - 1] {
            assert_eq!(frame.depth_mm[idx], 2000.0);
        }
    }

    #[test]
    fn empty_region_has_zero_seg() {
        let mut state = reset(Subtask::Pick, 9, &cfg());
        state.object_pos = [50.0, 50.0, 0.55];
        let frame = render(&state, Camera::Head, &cfg());
        assert_eq!(frame.seg.count_ones(), 0);
    }

    #[test]
    fn centered_object_seg_centroid_is_central() {
        let mut state = reset(Subtask::Pick, 21, &cfg());
        state.object_pos = [state.robot.base[0], state.robot.base[1], 0.55];
        let frame = render(&state, Camera::Head, &cfg());
        let n = cfg().frame_size;
        let (mut sr, mut sc, mut cnt) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..n {
            for c in 0..n {
                if frame.seg.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    cnt += 1.0;
                }
            }
        }
        assert!(cnt > 0.0);
        let center = (n as f64 - 1.0) / 2.0;
        assert!((sr / cnt - center).abs() <= 1.0);
        assert!((sc / cnt - center).abs() <= 1.0);
    }

    #[test]
    fn seg_pixels_lie_inside_object_footprint() {
        // Independent point-in-disc check in f64 against the documented
        // pixel mapping.
        let state = reset(Subtask::Pick, 33, &cfg());
        let c = cfg();
        let n = c.frame_size;
        for (camera, view, center, alpha) in [
            (
                Camera::Head,
                c.head_view,
                [state.robot.base[0], state.robot.base[1]],
                state.robot.base[2] + state.robot.head[0],
            ),
            (
                Camera::Hand,
                c.hand_view,
                {
                    let ee = end_effector(&state);
                    [ee[0], ee[1]]
                },
                state.robot.base[2],
            ),
        ] {
            let frame = render(&state, camera, &c);
            for r in 0..n {
                for col in 0..n {
                    if !frame.seg.get(r, col) {
                        continue;
                    }
                    let scale = view as f64 / n as f64;
                    let u = (col as f64 + 0.5 - n as f64 / 2.0) * scale;
                    let v = (n as f64 / 2.0 - r as f64 - 0.5) * scale;
                    let a = alpha as f64;
                    let wx = center[0] as f64 + v * a.cos() + u * a.sin();
                    let wy = center[1] as f64 + v * a.sin() - u * a.cos();
                    let dx = wx - state.object_pos[0] as f64;
                    let dy = wy - state.object_pos[1] as f64;
                    let d = (dx * dx + dy * dy).sqrt();
                    assert!(
                        d <= OBJECT_RADIUS as f64 + 1e-4,
                        "seg pixel ({r},{col}) lies {d:.4} m from object center"
                    );
                }
            }
        }
    }

    #[test]
    fn hand_camera_depth_tracks_ee_height() {
        let state = reset(Subtask::Pick, 4, &cfg());
        let ee = end_effector(&state);
        let frame = render(&state, Camera::Hand, &cfg());
        let n = cfg().frame_size;
        // The pixel under the camera center shows the EE marker itself:
        // depth = camera rise above the EE.
        let center_idx = (n / 2) * n + n / 2;
        assert!((frame.depth_mm[center_idx] - HAND_CAM_RISE * 1000.0).abs() < 1.0);
        let _ = ee;
    }
}
