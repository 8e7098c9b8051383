//! VVOL: a minimal little-endian container for intensity and label volumes.
//!
//! ```text
//! "VVOL" | version u32 = 1 | dtype u32 | M u32 | D u32 | H u32 | W u32 | data | [N u32]
//! ```
//!
//! dtype 1 stores `f32` intensities, dtype 2 stores `u8` labels followed by the
//! class count `N`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, LabelVolume, Volume};

pub const MAGIC: [u8; 4] = *b"VVOL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_U8_LABELS: u32 = 2;

const HEADER_LEN: usize = 4 + 6 * 4;

/// Either kind of payload a VVOL file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum VvolData {
    Intensity(Volume),
    Labels(LabelVolume),
}

fn header(dtype: u32, channels: usize, dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        dtype,
        channels as u32,
        dims[0] as u32,
        dims[1] as u32,
        dims[2] as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = header(DTYPE_F32, vol.channels(), vol.dims());
    out.reserve(vol.data().len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let mut out = header(DTYPE_U8_LABELS, 1, labels.dims());
    out.extend_from_slice(labels.labels());
    out.extend_from_slice(&(labels.num_classes() as u32).to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedFile {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VvolData> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = cur.u32()?;
    let channels = cur.u32()? as usize;
    let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let count = channels * voxel_count(dims);
    let data = match dtype {
        DTYPE_F32 => {
            let raw = cur.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            VvolData::Intensity(Volume::new(channels, dims, values)?)
        }
        DTYPE_U8_LABELS => {
            if channels != 1 {
                return Err(Error::shape(format!(
                    "label volumes have one channel, header says {channels}"
                )));
            }
            let labels = cur.take(count)?.to_vec();
            let num_classes = cur.u32()? as usize;
            VvolData::Labels(LabelVolume::new(dims, num_classes, labels)?)
        }
        other => return Err(Error::UnsupportedDtype(other)),
    };
    if cur.pos != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - cur.pos));
    }
    Ok(data)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<VvolData> {
    decode(&fs::read(path)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read(path)? {
        VvolData::Intensity(v) => Ok(v),
        VvolData::Labels(_) => Err(Error::shape("expected an intensity volume, found labels")),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read(path)? {
        VvolData::Labels(l) => Ok(l),
        VvolData::Intensity(_) => Err(Error::shape("expected a label volume, found intensities")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let vol = Volume::new(1, [1, 1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_volume(&vol);
        assert_eq!(&bytes[..4], b"VVOL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &2u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[32..36], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 36);

        let labels = LabelVolume::new([1, 1, 3], 3, vec![0, 2, 1]).unwrap();
        let bytes = encode_labels(&labels);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[28..31], &[0, 2, 1]);
        assert_eq!(&bytes[31..], &3u32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_volume(&Volume::zeros(1, [2, 2, 2]));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_volume(&Volume::zeros(1, [2, 2, 2]));
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(7))));
    }

    #[test]
    fn truncated_mid_data() {
        let bytes = encode_volume(&Volume::zeros(2, [3, 3, 3]));
        let err = decode(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile { .. }));
        let labels = encode_labels(&LabelVolume::filled([2, 2, 2], 3, 1).unwrap());
        assert!(matches!(
            decode(&labels[..labels.len() - 2]),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(decode(b"VV"), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::from_fn(2, [3, 4, 5], |c, z, y, x| {
            (c as f32 - 0.5) * (z * 20 + y * 5 + x) as f32 / 7.0
        })
        .unwrap();
        let path = dir.path().join("v.vvol");
        write_volume(&vol, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), vol);
        assert!(read_labels(&path).is_err());
    }

    proptest! {
        #[test]
        fn intensity_round_trip_is_bitwise(
            channels in 1usize..3,
            dims in prop::array::uniform3(1usize..5),
            seed in any::<u32>(),
        ) {
            let mut state = seed;
            let vol = Volume::from_fn(channels, dims, |_, _, _, _| {
                state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                f32::from_bits(state & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 }
            }).unwrap();
            let back = match decode(&encode_volume(&vol)).unwrap() {
                VvolData::Intensity(v) => v,
                VvolData::Labels(_) => unreachable!(),
            };
            let a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.dims(), dims);
        }

        #[test]
        fn label_round_trip(
            dims in prop::array::uniform3(1usize..5),
            num_classes in 1usize..=256,
            seed in any::<u64>(),
        ) {
            let n = voxel_count(dims);
            let labels: Vec<u8> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 7) % num_classes as u64) as u8)
                .collect();
            let lv = LabelVolume::new(dims, num_classes, labels).unwrap();
            prop_assert_eq!(decode(&encode_labels(&lv)).unwrap(), VvolData::Labels(lv));
        }
    }
}
