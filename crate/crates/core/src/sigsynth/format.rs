//! Little-endian dataset container.
//!
//! ```text
//! "CAMD" | version u32 | rng_id u32 | num_frames u32 | Nr u16 | Nt u16 | L u32
//!        | num_classes u16 | has_clean u8
//!        | num_classes × (u16 byte length, UTF-8 name)
//!        | num_frames × (label u16 | snr_db f32 | iq f32[Nr·L·2] | clean f32[Nt·L·2]?)
//! ```

use std::fs;
use std::path::Path;

use super::{DatasetFile, DatasetHeader, SignalFrame, SynthError};

pub const MAGIC: [u8; 4] = *b"CAMD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_dataset(d: &DatasetFile) -> Result<Vec<u8>, SynthError> {
    d.validate()?;
    let h = &d.header;
    let frames = u32::try_from(d.frames.len())
        .map_err(|_| SynthError::InvalidSpec("too many frames".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.rng_id.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&h.nr.to_le_bytes());
    out.extend_from_slice(&h.nt.to_le_bytes());
    out.extend_from_slice(&h.len.to_le_bytes());
    out.extend_from_slice(&(h.class_names.len() as u16).to_le_bytes());
    out.push(h.has_clean as u8);
    for name in &h.class_names {
        let len = u16::try_from(name.len())
            .map_err(|_| SynthError::InvalidSpec(format!("class name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for f in &d.frames {
        out.extend_from_slice(&f.label.to_le_bytes());
        out.extend_from_slice(&f.snr_db.to_le_bytes());
        for v in f.iq.iter().chain(f.clean.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(SynthError::Truncated {
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, SynthError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SynthError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, SynthError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<DatasetFile, SynthError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4).map_err(|_| SynthError::BadMagic {
        found: buf.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(SynthError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(SynthError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let rng_id = c.u32()?;
    let num_frames = c.u32()? as usize;
    let nr = c.u16()?;
    let nt = c.u16()?;
    let len = c.u32()?;
    let num_classes = c.u16()? as usize;
    let has_clean = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(SynthError::Corrupt(format!("clean-symbol flag {other}"))),
    };
    let mut class_names = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| SynthError::Corrupt("class name is not UTF-8".into()))?;
        class_names.push(name.to_string());
    }
    let iq_len = nr as usize * len as usize * 2;
    let clean_len = if has_clean {
        nt as usize * len as usize * 2
    } else {
        0
    };
    let frame_bytes = 2 + 4 + 4 * (iq_len + clean_len);
    let expected = c.pos + num_frames * frame_bytes;
    if buf.len() < expected {
        return Err(SynthError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(SynthError::TrailingBytes {
            expected,
            actual: buf.len(),
        });
    }
    let mut frames = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let label = c.u16()?;
        let snr_db = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
        let iq = c.f32s(iq_len)?;
        let clean = if has_clean {
            Some(c.f32s(clean_len)?)
        } else {
            None
        };
        frames.push(SignalFrame {
            label,
            snr_db,
            iq,
            clean,
        });
    }
    let d = DatasetFile {
        header: DatasetHeader {
            version,
            rng_id,
            nr,
            nt,
            len,
            class_names,
            has_clean,
        },
        frames,
    };
    d.validate()?;
    Ok(d)
}

pub fn write_dataset(d: &DatasetFile, path: impl AsRef<Path>) -> Result<(), SynthError> {
    let bytes = encode_dataset(d)?;
    fs::write(path.as_ref(), bytes).map_err(|e| SynthError::io(path.as_ref(), e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile, SynthError> {
    let bytes = fs::read(path.as_ref()).map_err(|e| SynthError::io(path.as_ref(), e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::{generate_dataset, DatasetSpec};

    fn sample(clean: bool) -> DatasetFile {
        generate_dataset(&DatasetSpec {
            classes: vec!["qpsk".parse().unwrap(), "qam16".parse().unwrap()],
            nt: 2,
            nr: 2,
            len: 8,
            snr_db: vec![-4.0, f64::INFINITY],
            frames_per_stratum: 3,
            seed: 1,
            store_clean: clean,
            drift: false,
        })
        .unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_dataset(&sample(false)).unwrap();
        assert_eq!(&bytes[..4], b"CAMD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 8);
        assert_eq!(u16::from_le_bytes(bytes[24..26].try_into().unwrap()), 2);
        assert_eq!(bytes[26], 0);
        // "qpsk", "qam16" names, then 12 frames of 2 + 4 + 4·32 bytes
        assert_eq!(bytes.len(), 27 + (2 + 4) + (2 + 5) + 12 * (6 + 128));
    }

    #[test]
    fn round_trip_bitwise() {
        for clean in [false, true] {
            let d = sample(clean);
            let bytes = encode_dataset(&d).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            assert_eq!(encode_dataset(&back).unwrap(), bytes);
            assert_eq!(back.frames.len(), d.frames.len());
            for (a, b) in back.frames.iter().zip(&d.frames) {
                assert!(a
                    .iq
                    .iter()
                    .zip(&b.iq)
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
                assert_eq!(a.snr_db.to_bits(), b.snr_db.to_bits());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.camd");
        let d = sample(true);
        write_dataset(&d, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode_dataset(&sample(false)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset(&bytes),
            Err(SynthError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_dataset(b"CA"),
            Err(SynthError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_dataset(&sample(false)).unwrap();
        bytes[4] = 2;
        assert_eq!(
            decode_dataset(&bytes).unwrap_err().to_string(),
            SynthError::Version {
                found: 2,
                expected: 1
            }
            .to_string()
        );
    }

    #[test]
    fn truncated_final_frame_reports_sizes() {
        let bytes = encode_dataset(&sample(false)).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode_dataset(cut) {
            Err(SynthError::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        let msg = decode_dataset(cut).unwrap_err().to_string();
        assert!(
            msg.contains(&bytes.len().to_string()) && msg.contains(&(bytes.len() - 10).to_string())
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_dataset(&sample(false)).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_dataset(&bytes),
            Err(SynthError::TrailingBytes { .. })
        ));
    }
}
