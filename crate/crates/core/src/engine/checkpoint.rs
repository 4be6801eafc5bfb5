//! Whole-state checkpoints.
//!
//! ```text
//! b"PLCK" | u32 version = 1 | u64 meta_len | meta JSON
//!         | u32 blob_count | per member: u64 len | PLRA container
//!         | 32-byte SHA-256 of everything before it
//! ```
//! Members are stored teachers first, then students, in population order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{cvt_for, EngineConfig, Member, Mode, PopulationState};
use crate::diagnostics::CvtArchive;
use crate::format::{self, FormatError};
use crate::ops::Provenance;
use crate::ratings::RatingState;
use crate::rl::OptimizerState;

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("file too short to be a checkpoint ({0} bytes)")]
    TooShort(usize),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("truncated checkpoint at offset {0}")]
    Truncated(usize),
    #[error("malformed checkpoint metadata: {0}")]
    Meta(String),
    #[error("member adapter: {0}")]
    Adapter(#[from] FormatError),
}

#[derive(Serialize, Deserialize)]
struct MemberMeta {
    id: u64,
    rating: RatingState,
    provenance: Option<Provenance>,
    optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: EngineConfig,
    mode: Mode,
    step: u64,
    seed: u64,
    next_id: u64,
    teachers: Vec<MemberMeta>,
    students: Vec<MemberMeta>,
    archive_filled: String,
    archive_total: u64,
}

fn member_meta(m: &Member) -> MemberMeta {
    MemberMeta {
        id: m.id,
        rating: m.rating,
        provenance: m.provenance.clone(),
        optimizer: m.optimizer.clone(),
    }
}

pub(super) fn encode(state: &PopulationState, cfg: &EngineConfig) -> Result<Vec<u8>, CheckpointError> {
    let meta = Meta {
        config: cfg.clone(),
        mode: state.mode,
        step: state.step,
        seed: state.seed,
        next_id: state.next_id,
        teachers: state.teachers.iter().map(member_meta).collect(),
        students: state.students.iter().map(member_meta).collect(),
        archive_filled: state
            .archive
            .filled
            .iter()
            .map(|&f| if f { '1' } else { '0' })
            .collect(),
        archive_total: state.archive.total_problems,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    let members: Vec<&Member> = state.teachers.iter().chain(&state.students).collect();
    out.extend_from_slice(&(members.len() as u32).to_le_bytes());
    for m in members {
        let blob = format::encode(&m.adapter);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Truncated(self.pos))
    }
}

pub fn decode(buf: &[u8]) -> Result<(PopulationState, EngineConfig), CheckpointError> {
    if buf.len() < 4 + 4 + 8 + 4 + DIGEST_LEN {
        return Err(CheckpointError::TooShort(buf.len()));
    }
    if &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic([buf[0], buf[1], buf[2], buf[3]]));
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.len()?;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != meta.teachers.len() + meta.students.len() {
        return Err(CheckpointError::Meta(format!(
            "{count} adapter blobs for {} members",
            meta.teachers.len() + meta.students.len()
        )));
    }
    let mut adapters = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        adapters.push(format::decode(r.take(n)?)?);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Meta(format!(
            "{} unexpected bytes before the checksum",
            body.len() - r.pos
        )));
    }
    let mut adapters = adapters.into_iter();
    let mut rebuild = |ms: Vec<MemberMeta>| -> Vec<Member> {
        ms.into_iter()
            .map(|m| Member {
                id: m.id,
                adapter: adapters.next().expect("blob count checked"),
                rating: m.rating,
                provenance: m.provenance,
                optimizer: m.optimizer,
            })
            .collect()
    };
    let teachers = rebuild(meta.teachers);
    let students = rebuild(meta.students);
    let filled = meta
        .archive_filled
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(CheckpointError::Meta(format!("archive flag {other:?}"))),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    let archive = CvtArchive::with_state(cvt_for(&meta.config), filled, meta.archive_total)
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
    Ok((
        PopulationState {
            mode: meta.mode,
            step: meta.step,
            seed: meta.seed,
            next_id: meta.next_id,
            teachers,
            students,
            archive,
        },
        meta.config,
    ))
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(
    state: &PopulationState,
    cfg: &EngineConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode(state, cfg)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PopulationState, EngineConfig), CheckpointError> {
    decode(&fs::read(path)?)
}
