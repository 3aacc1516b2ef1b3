//! Binary dataset files.
//!
//! Layout, all little-endian: magic `SLSH`, `u32` version, `u32` video count,
//! then per video `u16` label, `u8` T, `u8` C, `u16` H, `u16` W followed by
//! `T*C*H*W` `f32` pixels in `(t, c, h, w)` order. Pixels are narrowed to
//! `f32` on write; the generation seed is not stored.

use std::path::Path;

use super::SyntheticVideo;
use crate::error::{Error, Result};
use crate::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SLSH";
pub const DATASET_VERSION: u32 = 1;
const RECORD_HEADER: usize = 8;

pub fn encode_dataset(videos: &[SyntheticVideo]) -> Result<Vec<u8>> {
    let count = u32::try_from(videos.len()).map_err(|_| Error::Config("too many videos for one file".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for v in videos {
        let s = v.frames.shape();
        let too_big = |what: &str| Error::Config(format!("video {what} does not fit the record header"));
        let label = u16::try_from(v.label).map_err(|_| too_big("label"))?;
        let t = u8::try_from(s[0]).map_err(|_| too_big("frame count"))?;
        let c = u8::try_from(s[1]).map_err(|_| too_big("channel count"))?;
        let h = u16::try_from(s[2]).map_err(|_| too_big("height"))?;
        let w = u16::try_from(s[3]).map_err(|_| too_big("width"))?;
        out.extend_from_slice(&label.to_le_bytes());
        out.push(t);
        out.push(c);
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        for &p in v.frames.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SyntheticVideo>> {
    let mut r = Reader { bytes, pos: 0 };
    match r.take(4) {
        None => return Err(Error::format(0, "missing magic")),
        Some(m) if m != DATASET_MAGIC => return Err(Error::format(0, "bad magic")),
        Some(_) => {}
    }
    let header = r.take(8).ok_or_else(|| Error::format(4, "truncated header"))?;
    let version = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("version mismatch: file has {version}, expected {DATASET_VERSION}")));
    }
    let count = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let mut videos = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let start = r.offset();
        let truncated = || Error::format(start, format!("truncated record {index}"));
        let h = r.take(RECORD_HEADER).ok_or_else(truncated)?;
        let label = u16::from_le_bytes([h[0], h[1]]) as usize;
        let (t, c) = (h[2] as usize, h[3] as usize);
        let height = u16::from_le_bytes([h[4], h[5]]) as usize;
        let width = u16::from_le_bytes([h[6], h[7]]) as usize;
        let numel = t * c * height * width;
        if numel == 0 {
            return Err(Error::format(start, format!("record {index} has an empty frame shape")));
        }
        let raw = r.take(numel * 4).ok_or_else(truncated)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        videos.push(SyntheticVideo { frames: Tensor::new([t, c, height, width], data)?, label, seed: 0 });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.offset(), format!("{} trailing bytes after {count} records", bytes.len() - r.pos)));
    }
    Ok(videos)
}

pub fn write_dataset(path: impl AsRef<Path>, videos: &[SyntheticVideo]) -> Result<()> {
    std::fs::write(path, encode_dataset(videos)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticVideo>> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Catalog, VideoConfig};

    fn videos(n: usize) -> Vec<SyntheticVideo> {
        let cfg = VideoConfig { frames: 4, height: 16, width: 16, radius: 2, step: 2, noise: 0.05 };
        generate_dataset(&Catalog::Default.classes(), n, 1, &cfg).unwrap()
    }

    #[test]
    fn round_trip_through_f32() {
        let vs = videos(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.slsh");
        write_dataset(&path, &vs).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in vs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frames.shape(), b.frames.shape());
            let narrowed = a.frames.map(|v| v as f32 as f64);
            assert!(narrowed.bitwise_eq(&b.frames));
            assert!(a.frames.max_abs_diff(&b.frames) <= 1e-7);
        }
    }

    #[test]
    fn empty_input_is_missing_magic() {
        match decode_dataset(&[]) {
            Err(Error::Format { offset: 0, message }) => assert_eq!(message, "missing magic"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_dataset(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_record_is_named() {
        let bytes = encode_dataset(&videos(3)).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode_dataset(cut) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("record 2"), "{message}");
                let record = (bytes.len() - 12) / 3;
                assert_eq!(offset as usize, 12 + 2 * record);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let mut bytes = encode_dataset(&videos(1)).unwrap();
        bytes[4] = 2;
        match decode_dataset(&bytes) {
            Err(Error::Format { offset: 4, message }) => assert!(message.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }
}
