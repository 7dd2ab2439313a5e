//! Cooperative perception message (CPM): wire format and size accounting.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |------:|-------|
//! | 4 | magic `CPM1` |
//! | 1 | version (`1`) |
//! | 1 | flags (reserved, `0`) |
//! | 2 | feature width `u16` |
//! | 4 | agent id `u32` |
//! | 8 | timestamp `f64` |
//! | 4 | query count `u32` |
//! | 4 | box count `u32` |
//! | 56 | pose block: x, y, z, yaw and three reserved `f64` |
//! | width·4 + 16 | per query: features `f32`, then x, y, score, t `f32` |
//! | 40 | per box: cx, cy, cz, l, w, h, yaw, score, t `f32`, 4 pad bytes |
//!
//! Query and box fields are narrowed to `f32` on the wire, so decoding is the
//! inverse of encoding exactly when those values are `f32`-representable;
//! re-encoding a decoded message is always byte-identical. Track ids are not
//! transmitted.

use crate::geometry::{BBox, Pose};
use crate::temporal::Query;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CPM1";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 28;
pub const POSE_BYTES: usize = 56;
pub const BOX_BYTES: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum CpmError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("truncated message: need {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("query {index} has feature width {found}, expected {expected}")]
    WidthMismatch { index: usize, found: usize, expected: usize },
    #[error("feature width {0} exceeds the u16 wire field")]
    WidthTooLarge(usize),
    #[error("{0} records exceed the u32 count field")]
    TooManyRecords(usize),
    #[error("score threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpm {
    pub agent_id: u32,
    pub pose: Pose,
    pub t: f64,
    pub queries: Vec<Query>,
    pub boxes: Vec<BBox>,
}

impl Cpm {
    pub fn new(agent_id: u32, pose: Pose, t: f64) -> Self {
        Self { agent_id, pose, t, queries: Vec::new(), boxes: Vec::new() }
    }

    /// Feature width of the first query, or 0 for a query-free message.
    pub fn feature_width(&self) -> usize {
        self.queries.first().map_or(0, |q| q.feature.len())
    }

    pub fn size(&self) -> usize {
        cpm_size(self)
    }

    pub fn selected(&self, threshold: f64) -> Result<Cpm, CpmError> {
        let (queries, boxes) = select_by_score(&self.queries, &self.boxes, threshold)?;
        Ok(Cpm { queries, boxes, ..self.clone() })
    }
}

pub fn query_record_bytes(feature_width: usize) -> usize {
    feature_width * 4 + 16
}

/// Exact encoded length, without encoding.
pub fn cpm_size(c: &Cpm) -> usize {
    HEADER_BYTES + POSE_BYTES + c.queries.len() * query_record_bytes(c.feature_width()) + c.boxes.len() * BOX_BYTES
}

/// Keeps the queries and boxes whose score is strictly above `threshold`.
pub fn select_by_score(queries: &[Query], boxes: &[BBox], threshold: f64) -> Result<(Vec<Query>, Vec<BBox>), CpmError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CpmError::BadThreshold(threshold));
    }
    Ok((
        queries.iter().filter(|q| q.score > threshold).cloned().collect(),
        boxes.iter().filter(|b| b.score > threshold).copied().collect(),
    ))
}

pub fn encode_cpm(c: &Cpm) -> Result<Vec<u8>, CpmError> {
    let width = c.feature_width();
    if let Some((index, q)) = c.queries.iter().enumerate().find(|(_, q)| q.feature.len() != width) {
        return Err(CpmError::WidthMismatch { index, found: q.feature.len(), expected: width });
    }
    let width16 = u16::try_from(width).map_err(|_| CpmError::WidthTooLarge(width))?;
    let nq = u32::try_from(c.queries.len()).map_err(|_| CpmError::TooManyRecords(c.queries.len()))?;
    let nb = u32::try_from(c.boxes.len()).map_err(|_| CpmError::TooManyRecords(c.boxes.len()))?;

    let mut out = Vec::with_capacity(cpm_size(c));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&width16.to_le_bytes());
    out.extend_from_slice(&c.agent_id.to_le_bytes());
    out.extend_from_slice(&c.t.to_le_bytes());
    out.extend_from_slice(&nq.to_le_bytes());
    out.extend_from_slice(&nb.to_le_bytes());
    for v in [c.pose.x, c.pose.y, c.pose.z, c.pose.yaw, 0.0, 0.0, 0.0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for q in &c.queries {
        for f in &q.feature {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for v in [q.x, q.y, q.score, q.t] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for b in &c.boxes {
        for v in [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.score, b.t] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&[0; 4]);
    }
    debug_assert_eq!(out.len(), cpm_size(c));
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CpmError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(CpmError::Truncated {
            offset: self.pos,
            needed: N,
            available: self.buf.len().saturating_sub(self.pos),
        })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length is N"))
    }

    fn need(&self, n: usize) -> Result<(), CpmError> {
        let available = self.buf.len().saturating_sub(self.pos);
        if available < n {
            return Err(CpmError::Truncated { offset: self.pos, needed: n, available });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, CpmError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, CpmError> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, CpmError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, CpmError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, CpmError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode_cpm(bytes: &[u8]) -> Result<Cpm, CpmError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take::<4>()? != MAGIC {
        return Err(CpmError::BadMagic { offset: 0 });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CpmError::BadVersion { offset: 4, found: version });
    }
    let _flags = r.u8()?;
    let width = r.u16()? as usize;
    let agent_id = r.u32()?;
    let t = r.f64()?;
    let nq = r.u32()? as usize;
    let nb = r.u32()? as usize;
    let mut p = [0.0f64; 7];
    for v in &mut p {
        *v = r.f64()?;
    }
    let pose = Pose { x: p[0], y: p[1], z: p[2], yaw: p[3] };

    r.need(nq.saturating_mul(query_record_bytes(width)).saturating_add(nb.saturating_mul(BOX_BYTES)))?;
    let mut queries = Vec::with_capacity(nq);
    for _ in 0..nq {
        let mut feature = Vec::with_capacity(width);
        for _ in 0..width {
            feature.push(r.f32()?);
        }
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let score = r.f32()? as f64;
        let qt = r.f32()? as f64;
        queries.push(Query { feature, x, y, score, t: qt, track_id: None });
    }
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let mut v = [0.0f64; 9];
        for x in &mut v {
            *x = r.f32()? as f64;
        }
        r.take::<4>()?;
        boxes.push(BBox { cx: v[0], cy: v[1], cz: v[2], l: v[3], w: v[4], h: v[5], yaw: v[6], score: v[7], t: v[8] });
    }
    if r.pos != bytes.len() {
        return Err(CpmError::TrailingBytes { offset: r.pos, extra: bytes.len() - r.pos });
    }
    Ok(Cpm { agent_id, pose, t, queries, boxes })
}
