//! Per-video region file: magic "DVLP", u32 LE version, u32 region count,
//! u32 feature dim, then float32-LE features [R x d] row-major, locations
//! [R x 7], confidences [R], and u32-LE frame indices [R], with no padding
//! between sections.

use crate::datamodel::RegionRecord;
use crate::error::DataError;

pub const FORMAT_MAGIC: [u8; 4] = *b"DVLP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_regions(regions: &[RegionRecord], dim: usize) -> Result<Vec<u8>, DataError> {
    let r = regions.len();
    let mut out = Vec::with_capacity(16 + r * (dim + 7 + 1) * 4 + r * 4);
    out.extend_from_slice(&FORMAT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for reg in regions {
        if reg.feature.len() != dim {
            return Err(DataError::DimMismatch {
                expected: dim,
                found: reg.feature.len(),
            });
        }
        for v in &reg.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for reg in regions {
        for v in &reg.location {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for reg in regions {
        out.extend_from_slice(&reg.confidence.to_le_bytes());
    }
    for reg in regions {
        out.extend_from_slice(&reg.frame_index.to_le_bytes());
    }
    Ok(out)
}

pub fn read_regions(bytes: &[u8], expected_dim: usize) -> Result<Vec<RegionRecord>, DataError> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(4)?;
    if magic != FORMAT_MAGIC {
        return Err(DataError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cursor.u32()?;
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let r = cursor.u32()? as usize;
    let dim = cursor.u32()? as usize;
    if dim != expected_dim {
        return Err(DataError::DimMismatch {
            expected: expected_dim,
            found: dim,
        });
    }
    let mut regions: Vec<RegionRecord> = Vec::with_capacity(r);
    for _ in 0..r {
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            feature.push(cursor.f32()?);
        }
        regions.push(RegionRecord {
            feature,
            location: [0.0; 7],
            confidence: 0.0,
            frame_index: 0,
        });
    }
    for reg in &mut regions {
        for slot in reg.location.iter_mut() {
            *slot = cursor.f32()?;
        }
    }
    for reg in &mut regions {
        reg.confidence = cursor.f32()?;
    }
    for reg in &mut regions {
        reg.frame_index = cursor.u32()?;
    }
    if cursor.pos != bytes.len() {
        return Err(DataError::Truncated {
            needed: cursor.pos,
            found: bytes.len(),
        });
    }
    Ok(regions)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_regions() -> Vec<RegionRecord> {
        vec![
            RegionRecord {
                feature: vec![1.0, -2.5, 0.125],
                location: [0.1, 0.2, 0.3, 0.4, 0.2, 0.2, 0.04],
                confidence: 0.75,
                frame_index: 0,
            },
            RegionRecord {
                feature: vec![0.0, 3.5, -1.0],
                location: [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0],
                confidence: 0.5,
                frame_index: 2,
            },
        ]
    }

    #[test]
    fn round_trip_is_identity() {
        let regions = sample_regions();
        let bytes = write_regions(&regions, 3).unwrap();
        let back = read_regions(&bytes, 3).unwrap();
        assert_eq!(regions, back);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let regions = sample_regions();
        assert_eq!(
            write_regions(&regions, 3).unwrap(),
            write_regions(&regions, 3).unwrap()
        );
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = write_regions(&sample_regions(), 3).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            read_regions(&bytes, 3),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn dim_mismatch() {
        let bytes = write_regions(&sample_regions(), 3).unwrap();
        assert!(matches!(
            read_regions(&bytes, 16),
            Err(DataError::DimMismatch {
                expected: 16,
                found: 3
            })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = write_regions(&sample_regions(), 3).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                read_regions(&bytes[..cut], 3),
                Err(DataError::Truncated { .. })
            ));
        }
    }

    #[test]
    fn trailing_garbage_is_detected() {
        let mut bytes = write_regions(&sample_regions(), 3).unwrap();
        bytes.push(0);
        assert!(matches!(
            read_regions(&bytes, 3),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = write_regions(&sample_regions(), 3).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            read_regions(&bytes, 3),
            Err(DataError::BadVersion { found: 9, .. })
        ));
    }
}
