//! Byte-exact bitstream container: magic "ICM1", version u8, task-id u8,
//! lambda-index u8, H u16, W u16, C u16, CDF-table hash u64, payload length
//! u32, payload bytes. All integers little-endian.

use crate::error::{IcmError, Result};
use crate::task::TaskId;

pub const MAGIC: &[u8; 4] = b"ICM1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 2 + 2 + 2 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub task: TaskId,
    pub lambda_index: u8,
    pub image_h: u16,
    pub image_w: u16,
    pub channels: u16,
    pub cdf_hash: u64,
}

pub fn pack_bitstream(header: &BitstreamHeader, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > u32::MAX as usize {
        return Err(IcmError::Argument("payload too large".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(header.task.wire_id());
    out.push(header.lambda_index);
    out.extend_from_slice(&header.image_h.to_le_bytes());
    out.extend_from_slice(&header.image_w.to_le_bytes());
    out.extend_from_slice(&header.channels.to_le_bytes());
    out.extend_from_slice(&header.cdf_hash.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn unpack_bitstream(bytes: &[u8]) -> Result<(BitstreamHeader, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(IcmError::CorruptStream("bitstream shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(IcmError::CorruptStream("bad bitstream magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(IcmError::IncompatibleModel(format!(
            "bitstream version {} unsupported",
            bytes[4]
        )));
    }
    let task = TaskId::from_wire(bytes[5])?;
    let lambda_index = bytes[6];
    let image_h = u16::from_le_bytes(bytes[7..9].try_into().unwrap());
    let image_w = u16::from_le_bytes(bytes[9..11].try_into().unwrap());
    let channels = u16::from_le_bytes(bytes[11..13].try_into().unwrap());
    let cdf_hash = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let plen = u32::from_le_bytes(bytes[21..25].try_into().unwrap()) as usize;
    if bytes.len() < HEADER_LEN + plen {
        return Err(IcmError::CorruptStream("truncated bitstream payload".into()));
    }
    Ok((
        BitstreamHeader { task, lambda_index, image_h, image_w, channels, cdf_hash },
        &bytes[HEADER_LEN..HEADER_LEN + plen],
    ))
}
