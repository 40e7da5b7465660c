//! Episode generation and the binary dataset format.
//!
//! Layout (all integers little-endian):
//!   magic "SGVD" | u32 version=1 | u32 episode_count
//!   u32 config-blob length | UTF-8 config blob (JSON) | u64 FNV-1a hash of the blob
//! then per episode:
//!   u8 subtask id | u32 step_count
//! then per step, fixed order:
//!   head rgb (3*H*W f32) | head depth (H*W) | hand rgb | hand depth
//!   | robot state (15) | global pos (2) | qpos (12) | object pose (7)
//!   | action (13) | u8 grasp flag | bit-packed supervision seg mask
//!
//! The blob must carry at least {"frame_size": H, "seed": S}; the frame
//! size is needed to decode steps and the seed lets readers reconstruct
//! per-episode seeds as mix(seed, episode_index) — seeds themselves are
//! not stored.

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use super::expert::expert_action;
use super::render::{render, Camera};
use super::{
    aux_targets, check_success, reset, step, Action13, AuxTargets, EpisodeRecord, Frame,
    RobotState, SegMask, StepRecord, Subtask, WorldConfig,
};
use crate::rng::{fnv1a64, mix};

pub const DATASET_MAGIC: &[u8; 4] = b"SGVD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {what}")]
    Format { offset: usize, what: String },
    #[error("bad dataset config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone)]
pub struct DatasetHeader {
    pub version: u32,
    pub episode_count: u32,
    pub config_blob: String,
    pub config_hash: u64,
    /// False when the stored hash does not match the blob (surfaced as a
    /// warning by callers; reading still proceeds).
    pub hash_ok: bool,
    pub frame_size: usize,
    pub seed: u64,
}

/// Rolls out the scripted expert once and records every pre-terminal step.
/// The supervision mask (from `cfg.seg_view`) lives in the aux targets; the
/// per-frame masks are cleared because the format does not persist them.
pub fn generate_episode(subtask: Subtask, seed: u64, cfg: &WorldConfig) -> EpisodeRecord {
    let mut state = reset(subtask, seed, cfg);
    let mut steps = Vec::new();
    for _ in 0..cfg.max_steps {
        if check_success(&state, subtask) && !steps.is_empty() {
            break;
        }
        let mut head = render(&state, Camera::Head, cfg);
        let mut hand = render(&state, Camera::Hand, cfg);
        let sup = match cfg.seg_view {
            Camera::Head => head.seg.clone(),
            Camera::Hand => hand.seg.clone(),
        };
        head.seg = SegMask::zeros(cfg.frame_size);
        hand.seg = SegMask::zeros(cfg.frame_size);
        let aux = aux_targets(&state, &sup);
        let action = expert_action(&state, subtask);
        steps.push(StepRecord {
            head,
            hand,
            robot: state.robot,
            aux,
            action,
        });
        state = step(&state, &action).expect("expert actions are finite");
    }
    EpisodeRecord {
        subtask,
        steps,
        seed,
    }
}

/// Generates `episodes_per_subtask` episodes for each listed subtask, in
/// subtask-major order, with per-episode seed mix(seed, flat index).
/// Parallel across episodes; output order is index order regardless of
/// scheduling.
pub fn generate_dataset(
    subtasks: &[Subtask],
    episodes_per_subtask: usize,
    seed: u64,
    cfg: &WorldConfig,
) -> Vec<EpisodeRecord> {
    let plan: Vec<(usize, Subtask)> = subtasks
        .iter()
        .flat_map(|&t| std::iter::repeat(t).take(episodes_per_subtask))
        .enumerate()
        .collect();
    plan.into_par_iter()
        .map(|(idx, task)| generate_episode(task, mix(seed, idx as u64), cfg))
        .collect()
}

fn blob_fields(blob: &str) -> Result<(usize, u64), DatasetError> {
    let v: serde_json::Value = serde_json::from_str(blob)
        .map_err(|e| DatasetError::BadConfig(format!("config blob is not JSON: {e}")))?;
    let frame_size = v
        .get("frame_size")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| DatasetError::BadConfig("blob missing numeric \"frame_size\"".into()))?;
    let seed = v
        .get("seed")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| DatasetError::BadConfig("blob missing numeric \"seed\"".into()))?;
    Ok((frame_size as usize, seed))
}

/// Minimal valid config blob for datasets produced outside a full run.
pub fn basic_config_blob(frame_size: usize, seed: u64) -> String {
    format!("{{\"frame_size\":{frame_size},\"seed\":{seed}}}")
}

fn put_f32s(w: &mut impl Write, vals: &[f32]) -> std::io::Result<()> {
    // Chunked conversion keeps write syscalls and per-value overhead low.
    let mut buf = Vec::with_capacity(4096);
    for chunk in vals.chunks(1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_dataset(
    path: &Path,
    episodes: &[EpisodeRecord],
    config_blob: &str,
) -> Result<(), DatasetError> {
    let (frame_size, _seed) = blob_fields(config_blob)?;
    for (i, ep) in episodes.iter().enumerate() {
        if ep.steps.is_empty() {
            return Err(DatasetError::BadConfig(format!("episode {i} has no steps")));
        }
        for s in &ep.steps {
            if s.aux.seg.size() != frame_size || s.head.rgb.len() != 3 * frame_size * frame_size {
                return Err(DatasetError::BadConfig(format!(
                    "episode {i} frame size {} does not match blob frame_size {frame_size}",
                    s.aux.seg.size()
                )));
            }
        }
    }

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(episodes.len() as u32).to_le_bytes())?;
    let blob = config_blob.as_bytes();
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(blob)?;
    w.write_all(&fnv1a64(blob).to_le_bytes())?;

    for ep in episodes {
        w.write_all(&[ep.subtask.id()])?;
        w.write_all(&(ep.steps.len() as u32).to_le_bytes())?;
        for s in &ep.steps {
            put_f32s(&mut w, &s.head.rgb)?;
            put_f32s(&mut w, &s.head.depth_mm)?;
            put_f32s(&mut w, &s.hand.rgb)?;
            put_f32s(&mut w, &s.hand.depth_mm)?;
            put_f32s(&mut w, &s.robot.to_vec15())?;
            put_f32s(&mut w, &s.aux.global_pos)?;
            put_f32s(&mut w, &s.aux.qpos)?;
            put_f32s(&mut w, &s.aux.obj_t)?;
            put_f32s(&mut w, &s.aux.obj_q)?;
            put_f32s(&mut w, &s.action.0)?;
            w.write_all(&[s.aux.is_grasped as u8])?;
            w.write_all(s.aux.seg.bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Format {
                offset: self.pos,
                what: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DatasetError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, DatasetError> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_dataset(path: &Path) -> Result<(Vec<EpisodeRecord>, DatasetHeader), DatasetError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DatasetError::Format {
            offset: 0,
            what: format!("bad magic {magic:?}, expected \"SGVD\""),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DatasetError::Format {
            offset: 4,
            what: format!("unsupported version {version}, expected {DATASET_VERSION}"),
        });
    }
    let episode_count = r.u32("episode count")?;
    let blob_len = r.u32("config blob length")? as usize;
    let blob_off = r.pos;
    let blob_raw = r.take(blob_len, "config blob")?;
    let config_blob = std::str::from_utf8(blob_raw)
        .map_err(|e| DatasetError::Format {
            offset: blob_off,
            what: format!("config blob is not UTF-8: {e}"),
        })?
        .to_string();
    let config_hash = r.u64("config hash")?;
    let hash_ok = fnv1a64(config_blob.as_bytes()) == config_hash;
    let (frame_size, seed) = blob_fields(&config_blob)?;

    let n = frame_size * frame_size;
    let seg_bytes = n.div_ceil(8);
    let mut episodes = Vec::with_capacity(episode_count as usize);
    for idx in 0..episode_count {
        let off = r.pos;
        let task_id = r.u8("subtask id")?;
        let subtask = Subtask::from_id(task_id).ok_or_else(|| DatasetError::Format {
            offset: off,
            what: format!("unknown subtask id {task_id}"),
        })?;
        let step_count = r.u32("step count")?;
        let mut steps = Vec::with_capacity(step_count as usize);
        for _ in 0..step_count {
            let head_rgb = r.f32s(3 * n, "head rgb")?;
            let head_depth = r.f32s(n, "head depth")?;
            let hand_rgb = r.f32s(3 * n, "hand rgb")?;
            let hand_depth = r.f32s(n, "hand depth")?;
            let robot_raw: [f32; 15] = r.f32s(15, "robot state")?.try_into().unwrap();
            let global_pos: [f32; 2] = r.f32s(2, "global pos")?.try_into().unwrap();
            let qpos: [f32; 12] = r.f32s(12, "qpos")?.try_into().unwrap();
            let obj_t: [f32; 3] = r.f32s(3, "object position")?.try_into().unwrap();
            let obj_q: [f32; 4] = r.f32s(4, "object quaternion")?.try_into().unwrap();
            let action: [f32; 13] = r.f32s(13, "action")?.try_into().unwrap();
            let grasp = r.u8("grasp flag")?;
            let seg_off = r.pos;
            let seg_raw = r.take(seg_bytes, "seg mask")?.to_vec();
            let seg = SegMask::from_bytes(frame_size, seg_raw).ok_or_else(|| {
                DatasetError::Format {
                    offset: seg_off,
                    what: "seg mask size mismatch".into(),
                }
            })?;
            steps.push(StepRecord {
                head: Frame {
                    rgb: head_rgb,
                    depth_mm: head_depth,
                    // Per-frame masks are not persisted; the supervision
                    // mask travels in the aux targets.
                    seg: SegMask::zeros(frame_size),
                },
                hand: Frame {
                    rgb: hand_rgb,
                    depth_mm: hand_depth,
                    seg: SegMask::zeros(frame_size),
                },
                robot: RobotState::from_vec15(&robot_raw),
                aux: AuxTargets {
                    global_pos,
                    is_grasped: grasp != 0,
                    qpos,
                    obj_t,
                    obj_q,
                    seg,
                },
                action: Action13(action),
            });
        }
        episodes.push(EpisodeRecord {
            subtask,
            steps,
            seed: mix(seed, idx as u64),
        });
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Format {
            offset: r.pos,
            what: format!("{} trailing bytes after last episode", buf.len() - r.pos),
        });
    }
    Ok((
        episodes,
        DatasetHeader {
            version,
            episode_count,
            config_blob,
            config_hash,
            hash_ok,
            frame_size,
            seed,
        },
    ))
}
