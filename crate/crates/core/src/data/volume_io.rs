use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{frame_header, parse_header, push_f32s, read_f32s, read_file, write_file};
use crate::error::{Error, Result};
use crate::masks::LabelVolume;
use crate::tensor::Tensor;

use super::VolumeSample;

pub const VOLUME_MAGIC: &[u8; 8] = b"CRESVOL1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    shape: [usize; 4],
    label_classes: usize,
    spacing: [f64; 3],
    dtype: String,
    id: String,
}

pub fn encode_volume(sample: &VolumeSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let s = sample.image.shape();
    let header = VolumeHeader {
        shape: [s[0], s[1], s[2], s[3]],
        label_classes: sample.label.classes(),
        spacing: sample.spacing,
        dtype: "f32".into(),
        id: sample.id.clone(),
    };
    let mut out = frame_header(VOLUME_MAGIC, &header)?;
    push_f32s(&mut out, sample.image.data());
    out.extend_from_slice(sample.label.labels());
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeSample> {
    let (h, payload): (VolumeHeader, _) = parse_header(bytes, VOLUME_MAGIC)?;
    if h.dtype != "f32" {
        return Err(Error::Header(format!("unsupported dtype `{}`", h.dtype)));
    }
    if h.shape.iter().any(|&d| d == 0) {
        return Err(Error::Header(format!("shape {:?} has a zero extent", h.shape)));
    }
    let plane = h.shape[1..]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Header("shape overflows".into()))?;
    let expected = plane
        .checked_mul(h.shape[0])
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(plane))
        .ok_or_else(|| Error::Header("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let (img, lab) = payload.split_at(plane * h.shape[0] * 4);
    let image = Tensor::new(h.shape.to_vec(), read_f32s(img))?;
    let label = LabelVolume::new([h.shape[1], h.shape[2], h.shape[3]], lab.to_vec(), h.label_classes)?;
    VolumeSample::new(image, label, h.spacing, h.id)
}

pub fn write_volume(path: &Path, sample: &VolumeSample) -> Result<()> {
    write_file(path, &encode_volume(sample)?)
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    decode_volume(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn sample() -> VolumeSample {
        generate_phantom(&PhantomSpec {
            shape: [8, 8, 16],
            channels: 2,
            radius: (1.5, 3.0),
            classes: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let bytes = encode_volume(&s).unwrap();
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_volume(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/v.cres");
        write_volume(&path, &sample()).unwrap();
        assert_eq!(read_volume(&path).unwrap(), sample());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_volume(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_volume(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn other_version() {
        let mut bytes = encode_volume(&sample()).unwrap();
        bytes[7] = b'2';
        assert!(matches!(
            decode_volume(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let bytes = encode_volume(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            decode_volume(cut),
            Err(Error::PayloadSizeMismatch { found, expected }) if expected == found + 5
        ));
    }

    #[test]
    fn truncated_header() {
        let bytes = encode_volume(&sample()).unwrap();
        assert!(matches!(decode_volume(&bytes[..20]), Err(Error::Truncated(_))));
        assert!(matches!(decode_volume(&bytes[..5]), Err(Error::Truncated(_))));
    }
}
