//! Shared framing for binary files: 8-byte magic, u32 LE header length, JSON header, payload.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) const MAGIC_LEN: usize = 8;

/// Writes magic and length-prefixed JSON header into a fresh buffer.
pub(crate) fn frame_header<H: Serialize>(magic: &[u8; MAGIC_LEN], header: &H) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Header("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Parses magic and header; returns the header and the payload bytes.
///
/// Magic is `<7-byte family><version digit>`; a matching family with another
/// digit is reported as a version mismatch.
pub(crate) fn parse_header<'a, H: DeserializeOwned>(
    bytes: &'a [u8],
    magic: &[u8; MAGIC_LEN],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < MAGIC_LEN {
        return Err(Error::Truncated(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    let found = &bytes[..MAGIC_LEN];
    if found != magic {
        let family = &magic[..MAGIC_LEN - 1];
        if &found[..MAGIC_LEN - 1] == family && found[MAGIC_LEN - 1].is_ascii_digit() {
            return Err(Error::VersionMismatch {
                expected: (magic[MAGIC_LEN - 1] - b'0') as u32,
                found: (found[MAGIC_LEN - 1] - b'0') as u32,
            });
        }
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let rest = &bytes[MAGIC_LEN..];
    if rest.len() < 4 {
        return Err(Error::Truncated("header length prefix is incomplete".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::Truncated(format!(
            "header declares {len} bytes, only {} remain",
            rest.len()
        )));
    }
    let header = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &rest[len..]))
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
