//! SynthHab: a deterministic synthetic mobile-manipulation world.
//!
//! A differential base with a planar-chain arm operates on a flat floor
//! containing one movable object, one goal marker, and one articulated
//! fixture (fridge or drawer, reduced to a scalar openness with a handle
//! that slides along the fixture axis). Every quantity a decoder might be
//! asked to predict is analytically available, and every function here is
//! a pure deterministic map, so datasets are bit-reproducible.

mod dataset;
mod expert;
mod render;

pub use dataset::{
    basic_config_blob, generate_dataset, generate_episode, read_dataset, write_dataset,
    DatasetError, DatasetHeader,
};
pub use expert::expert_action;
pub use render::{render, Camera};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::Rng;

/// Arm: 7 links of 0.1 m on a shoulder 0.5 m above the floor.
pub const ARM_LINKS: usize = 7;
pub const LINK_LEN: f32 = 0.1;
pub const SHOULDER_Z: f32 = 0.5;
pub const TORSO_MAX: f32 = 0.35;
pub const FINGER_MAX: f32 = 0.04;

/// Grasp latch: engages below the close aperture, releases above the open
/// aperture (hysteresis so the latch cannot flicker).
pub const GRASP_DIST: f32 = 0.05;
pub const GRASP_CLOSE_APERTURE: f32 = 0.01;
pub const GRASP_OPEN_APERTURE: f32 = 0.03;

/// Heights of the synthetic scene surfaces.
pub const TABLE_Z: f32 = 0.55;
pub const HANDLE_Z: f32 = 0.6;

/// Fixture articulation: handle sits `HANDLE_OFFSET + openness * HANDLE_TRAVEL`
/// out from the fixture face along its axis.
pub const HANDLE_OFFSET: f32 = 0.1;
pub const HANDLE_TRAVEL: f32 = 0.3;
/// EE must be this close to the handle for its motion to drive openness.
/// Wide enough that a grasp taken on the handle's resting spot keeps
/// working after approach motion has already dragged the handle a little.
pub const HANDLE_REACH: f32 = 0.25;

pub const PICK_SUCCESS_Z: f32 = 0.7;
pub const PLACE_SUCCESS_DIST: f32 = 0.08;
pub const OPEN_SUCCESS: f32 = 0.9;
pub const CLOSE_SUCCESS: f32 = 0.1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown subtask {0:?}")]
    UnknownSubtask(String),
    #[error("non-finite action component at index {0}")]
    NonFiniteAction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subtask {
    Pick,
    Place,
    OpenFridge,
    OpenDrawer,
    CloseFridge,
    CloseDrawer,
}

impl Subtask {
    pub const ALL: [Subtask; 6] = [
        Subtask::Pick,
        Subtask::Place,
        Subtask::OpenFridge,
        Subtask::OpenDrawer,
        Subtask::CloseFridge,
        Subtask::CloseDrawer,
    ];

    pub fn id(self) -> u8 {
        match self {
            Subtask::Pick => 0,
            Subtask::Place => 1,
            Subtask::OpenFridge => 2,
            Subtask::OpenDrawer => 3,
            Subtask::CloseFridge => 4,
            Subtask::CloseDrawer => 5,
        }
    }

    pub fn from_id(id: u8) -> Option<Subtask> {
        Subtask::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Pick => "pick",
            Subtask::Place => "place",
            Subtask::OpenFridge => "open_fridge",
            Subtask::OpenDrawer => "open_drawer",
            Subtask::CloseFridge => "close_fridge",
            Subtask::CloseDrawer => "close_drawer",
        }
    }

    pub fn parse(s: &str) -> Result<Subtask, WorldError> {
        Subtask::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| WorldError::UnknownSubtask(s.to_string()))
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Subtask::Pick => "pick up the cube",
            Subtask::Place => "place the cube on the goal",
            Subtask::OpenFridge => "open the fridge",
            Subtask::OpenDrawer => "open the drawer",
            Subtask::CloseFridge => "close the fridge",
            Subtask::CloseDrawer => "close the drawer",
        }
    }

    pub fn fixture_kind(self) -> FixtureKind {
        match self {
            Subtask::OpenDrawer | Subtask::CloseDrawer => FixtureKind::Drawer,
            _ => FixtureKind::Fridge,
        }
    }

    pub fn uses_fixture(self) -> bool {
        !matches!(self, Subtask::Pick | Subtask::Place)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Fridge,
    Drawer,
}

impl FixtureKind {
    pub fn top_z(self) -> f32 {
        match self {
            FixtureKind::Fridge => 1.2,
            FixtureKind::Drawer => 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// Base pose: x, y (m) and yaw (rad).
    pub base: [f32; 3],
    pub torso_z: f32,
    pub arm_q: [f32; ARM_LINKS],
    pub fingers: [f32; 2],
    /// Head pan and tilt, driven by an automatic look-at controller.
    pub head: [f32; 2],
}

impl RobotState {
    pub fn clamp(&mut self) {
        self.base[2] = wrap_angle(self.base[2]);
        self.torso_z = self.torso_z.clamp(0.0, TORSO_MAX);
        for q in &mut self.arm_q {
            *q = q.clamp(-std::f32::consts::PI, std::f32::consts::PI);
        }
        for f in &mut self.fingers {
            *f = f.clamp(0.0, FINGER_MAX);
        }
        for h in &mut self.head {
            *h = h.clamp(-std::f32::consts::PI, std::f32::consts::PI);
        }
    }

    /// The 15-float serialization order: base(3), torso, arm(7), fingers(2), head(2).
    pub fn to_vec15(&self) -> [f32; 15] {
        let mut v = [0.0f32; 15];
        v[..3].copy_from_slice(&self.base);
        v[3] = self.torso_z;
        v[4..11].copy_from_slice(&self.arm_q);
        v[11..13].copy_from_slice(&self.fingers);
        v[13..15].copy_from_slice(&self.head);
        v
    }

    pub fn from_vec15(v: &[f32; 15]) -> RobotState {
        RobotState {
            base: [v[0], v[1], v[2]],
            torso_z: v[3],
            arm_q: v[4..11].try_into().unwrap(),
            fingers: [v[11], v[12]],
            head: [v[13], v[14]],
        }
    }

    /// Joint configuration vector: torso, arm(7), fingers(2), head(2).
    pub fn qpos12(&self) -> [f32; 12] {
        let mut v = [0.0f32; 12];
        v[0] = self.torso_z;
        v[1..8].copy_from_slice(&self.arm_q);
        v[8..10].copy_from_slice(&self.fingers);
        v[10..12].copy_from_slice(&self.head);
        v
    }

    pub fn aperture(&self) -> f32 {
        (self.fingers[0] + self.fingers[1]) * 0.5
    }
}

/// 13-D action in physical units: base forward/lateral/yaw deltas, torso
/// delta, 7 arm joint deltas, 2 finger deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action13(pub [f32; 13]);

impl Action13 {
    /// Per-dimension physical limits (symmetric).
    pub const LIMITS: [f32; 13] = [
        0.05, 0.05, 0.1, 0.02, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.01, 0.01,
    ];

    pub fn zero() -> Action13 {
        Action13([0.0; 13])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Clamps every dimension to its physical limit.
    pub fn clamped(&self) -> Action13 {
        let mut out = self.0;
        for (v, &lim) in out.iter_mut().zip(&Self::LIMITS) {
            *v = v.clamp(-lim, lim);
        }
        Action13(out)
    }

    /// Maps the physical action into [-1, 1]^13 by dividing out the limits.
    pub fn normalized(&self) -> [f32; 13] {
        let mut out = [0.0f32; 13];
        for i in 0..13 {
            out[i] = (self.0[i] / Self::LIMITS[i]).clamp(-1.0, 1.0);
        }
        out
    }

    /// Inverse of [`Action13::normalized`]; input is clamped to [-1, 1].
    pub fn from_normalized(n: &[f32; 13]) -> Action13 {
        let mut out = [0.0f32; 13];
        for i in 0..13 {
            out[i] = n[i].clamp(-1.0, 1.0) * Self::LIMITS[i];
        }
        Action13(out)
    }

    pub fn dx(&self) -> f32 {
        self.0[0]
    }
    pub fn dy(&self) -> f32 {
        self.0[1]
    }
    pub fn dtheta(&self) -> f32 {
        self.0[2]
    }
    pub fn dz(&self) -> f32 {
        self.0[3]
    }
    pub fn dq(&self) -> &[f32] {
        &self.0[4..11]
    }
    pub fn dg(&self) -> &[f32] {
        &self.0[11..13]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixture {
    pub kind: FixtureKind,
    /// Face center on the floor plane; the handle extends along `axis`.
    pub base_xy: [f32; 2],
    /// Unit vector pointing out of the fixture toward the approach side.
    pub axis: [f32; 2],
    pub openness: f32,
}

impl Fixture {
    /// Handle position in world coordinates at the current openness.
    pub fn handle_pos(&self) -> [f32; 3] {
        let r = HANDLE_OFFSET + self.openness * HANDLE_TRAVEL;
        [
            self.base_xy[0] + r * self.axis[0],
            self.base_xy[1] + r * self.axis[1],
            HANDLE_Z,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    pub robot: RobotState,
    pub object_pos: [f32; 3],
    /// Unit quaternion (w, x, y, z).
    pub object_quat: [f32; 4],
    pub goal_pos: [f32; 3],
    pub fixture: Fixture,
    pub is_grasped: bool,
    pub step_index: u32,
}

/// World geometry and episode knobs. Spawn distances are measured from the
/// robot base to the manipulation target (object, goal, or handle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub frame_size: usize,
    pub spawn_dist_min: f32,
    pub spawn_dist_max: f32,
    /// Initial heading error and target-direction jitter, radians.
    pub heading_jitter: f32,
    /// Side length of the square the head camera sees, meters.
    pub head_view: f32,
    /// Side length of the hand camera patch, meters.
    pub hand_view: f32,
    pub max_steps: u32,
    /// Which camera's mask becomes the segmentation supervision target.
    pub seg_view: Camera,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frame_size: 48,
            spawn_dist_min: 0.85,
            spawn_dist_max: 1.05,
            heading_jitter: 0.5,
            head_view: 3.0,
            hand_view: 1.0,
            max_steps: 200,
            seg_view: Camera::Head,
        }
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f32) -> f32 {
    let two_pi = 2.0 * std::f32::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f32::consts::PI {
        a += two_pi;
    } else if a > std::f32::consts::PI {
        a -= two_pi;
    }
    a
}

/// End-effector position for a planar chain riding the torso lift: link i
/// points along the running sum of joint angles, the whole chain is rotated
/// by base yaw and lifted by the shoulder height plus torso extension.
pub fn forward_kinematics(arm_q: &[f32; ARM_LINKS], torso_z: f32, base: &[f32; 3]) -> [f32; 3] {
    let mut phi = 0.0f32;
    let mut d = 0.0f32;
    let mut h = 0.0f32;
    for &q in arm_q {
        phi += q;
        d += LINK_LEN * phi.cos();
        h += LINK_LEN * phi.sin();
    }
    let (x, y, theta) = (base[0], base[1], base[2]);
    [
        x + d * theta.cos(),
        y + d * theta.sin(),
        SHOULDER_Z + torso_z + h,
    ]
}

pub fn end_effector(state: &WorldState) -> [f32; 3] {
    forward_kinematics(
        &state.robot.arm_q,
        state.robot.torso_z,
        &state.robot.base,
    )
}

fn dist3(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn random_unit_quat(rng: &mut Rng) -> [f32; 4] {
    let mut q = [0.0f32; 4];
    loop {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 1e-3 {
            for v in &mut q {
                *v /= n;
            }
            return q;
        }
    }
}

/// Pan/tilt so the head camera looks at the target (head sits 1.0 m up the
/// torso column). Pure function of base pose and target, applied at reset
/// and after every step.
fn look_at(base: &[f32; 3], target: &[f32; 3]) -> [f32; 2] {
    let dx = target[0] - base[0];
    let dy = target[1] - base[1];
    let planar = (dx * dx + dy * dy).sqrt();
    let pan = wrap_angle(dy.atan2(dx) - base[2]);
    let tilt = (target[2] - 1.0).atan2(planar);
    [pan, tilt]
}

/// Deterministic initial state for a subtask.
pub fn reset(subtask: Subtask, seed: u64, cfg: &WorldConfig) -> WorldState {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut robot = RobotState {
        base: [
            rng.random_range(-0.1..0.1f32),
            rng.random_range(-0.1..0.1f32),
            rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
        ],
        torso_z: rng.random_range(0.05..0.15f32),
        arm_q: [0.0; ARM_LINKS],
        fingers: [FINGER_MAX; 2],
        head: [0.0; 2],
    };

    // The manipulation target spawns in a ring in front of the robot; the
    // heading starts within `heading_jitter` of facing it.
    let dist = rng.random_range(cfg.spawn_dist_min..cfg.spawn_dist_max);
    let dir = robot.base[2] + rng.random_range(-cfg.heading_jitter..cfg.heading_jitter);
    let target_xy = [
        robot.base[0] + dist * dir.cos(),
        robot.base[1] + dist * dir.sin(),
    ];
    let object_quat = random_unit_quat(&mut rng);

    // Fixture parked out of the way unless the subtask uses it.
    let mut fixture = Fixture {
        kind: subtask.fixture_kind(),
        base_xy: [5.0, 5.0],
        axis: [1.0, 0.0],
        openness: 0.0,
    };

    let (object_pos, goal_pos, is_grasped) = match subtask {
        Subtask::Pick => {
            let obj = [target_xy[0], target_xy[1], TABLE_Z];
            (obj, [target_xy[0], target_xy[1], TABLE_Z], false)
        }
        Subtask::Place => {
            robot.fingers = [0.0; 2];
            let ee = forward_kinematics(&robot.arm_q, robot.torso_z, &robot.base);
            (ee, [target_xy[0], target_xy[1], TABLE_Z], true)
        }
        _ => {
            let openness = match subtask {
                Subtask::OpenFridge | Subtask::OpenDrawer => 0.0,
                _ => 1.0,
            };
            // Axis points from the fixture toward the robot spawn, with a
            // small rotation so approaches are not perfectly square.
            let to_robot = [robot.base[0] - target_xy[0], robot.base[1] - target_xy[1]];
            let norm = (to_robot[0] * to_robot[0] + to_robot[1] * to_robot[1]).sqrt();
            let tilt = rng.random_range(-0.2..0.2f32);
            let (c, s) = (tilt.cos(), tilt.sin());
            let axis = [
                (to_robot[0] * c - to_robot[1] * s) / norm,
                (to_robot[0] * s + to_robot[1] * c) / norm,
            ];
            let r = HANDLE_OFFSET + openness * HANDLE_TRAVEL;
            fixture.base_xy = [target_xy[0] - r * axis[0], target_xy[1] - r * axis[1]];
            fixture.axis = axis;
            fixture.openness = openness;
            let handle = fixture.handle_pos();
            (handle, handle, false)
        }
    };

    robot.head = look_at(&robot.base, &object_pos);
    robot.clamp();
    WorldState {
        robot,
        object_pos,
        object_quat,
        goal_pos,
        fixture,
        is_grasped,
        step_index: 0,
    }
}

/// Advances the world one step. Deltas are clamped to physical limits;
/// base translation is expressed in the base frame and rotated to world.
pub fn step(state: &WorldState, action: &Action13) -> Result<WorldState, WorldError> {
    if let Some(i) = action.0.iter().position(|v| !v.is_finite()) {
        return Err(WorldError::NonFiniteAction(i));
    }
    let a = action.clamped();
    let mut next = *state;
    let ee_before = end_effector(state);

    let theta = next.robot.base[2];
    next.robot.base[0] += a.dx() * theta.cos() - a.dy() * theta.sin();
    next.robot.base[1] += a.dx() * theta.sin() + a.dy() * theta.cos();
    next.robot.base[2] = wrap_angle(theta + a.dtheta());
    next.robot.torso_z += a.dz();
    for (q, &dq) in next.robot.arm_q.iter_mut().zip(a.dq()) {
        *q += dq;
    }
    for (f, &dg) in next.robot.fingers.iter_mut().zip(a.dg()) {
        *f += dg;
    }
    next.robot.clamp();

    let ee_after = end_effector(&next);

    // Articulation: when the EE is at the handle, its motion along the
    // fixture axis drags the openness.
    let handle = next.fixture.handle_pos();
    if dist3(&ee_after, &handle) < HANDLE_REACH {
        let along = (ee_after[0] - ee_before[0]) * next.fixture.axis[0]
            + (ee_after[1] - ee_before[1]) * next.fixture.axis[1];
        next.fixture.openness = (next.fixture.openness + along / HANDLE_TRAVEL).clamp(0.0, 1.0);
    }

    // Grasp latch with aperture hysteresis.
    let aperture = next.robot.aperture();
    if !next.is_grasped {
        if dist3(&ee_after, &next.object_pos) < GRASP_DIST && aperture < GRASP_CLOSE_APERTURE {
            next.is_grasped = true;
        }
    } else if aperture > GRASP_OPEN_APERTURE {
        next.is_grasped = false;
    }
    if next.is_grasped {
        next.object_pos = ee_after;
    }
    next.robot.head = look_at(&next.robot.base, &next.object_pos);

    next.step_index += 1;
    Ok(next)
}

pub fn check_success(state: &WorldState, subtask: Subtask) -> bool {
    match subtask {
        Subtask::Pick => state.is_grasped && state.object_pos[2] >= PICK_SUCCESS_Z,
        Subtask::Place => {
            !state.is_grasped && dist3(&state.object_pos, &state.goal_pos) < PLACE_SUCCESS_DIST
        }
        Subtask::OpenFridge | Subtask::OpenDrawer => state.fixture.openness >= OPEN_SUCCESS,
        Subtask::CloseFridge | Subtask::CloseDrawer => state.fixture.openness <= CLOSE_SUCCESS,
    }
}

/// Hamilton product a*b of (w, x, y, z) quaternions.
fn quat_mul(a: &[f32; 4], b: &[f32; 4]) -> [f32; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Per-step supervision targets derived from the world state. The object
/// pose is expressed in the robot base frame (translation rotated by -yaw,
/// orientation left-multiplied by the inverse base rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTargets {
    pub global_pos: [f32; 2],
    pub is_grasped: bool,
    pub qpos: [f32; 12],
    pub obj_t: [f32; 3],
    pub obj_q: [f32; 4],
    pub seg: SegMask,
}

pub fn aux_targets(state: &WorldState, head_seg: &SegMask) -> AuxTargets {
    let theta = state.robot.base[2];
    let (c, s) = (theta.cos(), theta.sin());
    let dx = state.object_pos[0] - state.robot.base[0];
    let dy = state.object_pos[1] - state.robot.base[1];
    let obj_t = [c * dx + s * dy, -s * dx + c * dy, state.object_pos[2]];
    // Base rotation is yaw about +z; its inverse is a rotation by -theta.
    let half = -theta * 0.5;
    let base_inv = [half.cos(), 0.0, 0.0, half.sin()];
    let obj_q = quat_mul(&base_inv, &state.object_quat);
    AuxTargets {
        global_pos: [state.robot.base[0], state.robot.base[1]],
        is_grasped: state.is_grasped,
        qpos: state.robot.qpos12(),
        obj_t,
        obj_q,
        seg: head_seg.clone(),
    }
}

/// Row-major bit-packed binary mask, LSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    size: usize,
    bits: Vec<u8>,
}

impl SegMask {
    pub fn zeros(size: usize) -> SegMask {
        SegMask {
            size,
            bits: vec![0u8; (size * size).div_ceil(8)],
        }
    }

    pub fn from_bytes(size: usize, bits: Vec<u8>) -> Option<SegMask> {
        if bits.len() == (size * size).div_ceil(8) {
            Some(SegMask { size, bits })
        } else {
            None
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        let i = r * self.size + c;
        self.bits[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        let i = r * self.size + c;
        if v {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Expands to one f32 per pixel, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.size * self.size];
        for (i, v) in out.iter_mut().enumerate() {
            if self.bits[i / 8] & (1 << (i % 8)) != 0 {
                *v = 1.0;
            }
        }
        out
    }

    /// Nearest-neighbor resample to a new square resolution.
    pub fn resample(&self, size: usize) -> SegMask {
        if size == self.size {
            return self.clone();
        }
        let mut out = SegMask::zeros(size);
        for r in 0..size {
            // Map the destination pixel center back to a source pixel.
            let sr = (2 * r + 1) * self.size / (2 * size);
            for c in 0..size {
                let sc = (2 * c + 1) * self.size / (2 * size);
                out.set(r, c, self.get(sr, sc));
            }
        }
        out
    }
}

/// One rendered camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Channel-major RGB, 3 x size x size, values in [0, 1].
    pub rgb: Vec<f32>,
    /// Depth in millimeters, size x size.
    pub depth_mm: Vec<f32>,
    /// Binary target-object mask.
    pub seg: SegMask,
}

/// One step of a recorded episode: both camera frames, the robot state,
/// supervision targets, and the expert action taken from this state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub head: Frame,
    pub hand: Frame,
    pub robot: RobotState,
    pub aux: AuxTargets,
    pub action: Action13,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub subtask: Subtask,
    pub steps: Vec<StepRecord>,
    /// Per-episode seed; reconstructed as mix(dataset seed, index) when a
    /// dataset is read back (the file format does not store it).
    pub seed: u64,
}
