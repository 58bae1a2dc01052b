//! Desk-scale segment container ("frame pack").
//!
//! A segment is an ASCII header line followed by raw 8-bit grayscale frames:
//!
//! ```text
//! WLFP1 <width> <height> <fps> <frame_count>\n
//! <frame_count * width * height bytes, row-major, frame after frame>
//! ```
//!
//! Real MPEG segments can still be harvested; they are stored verbatim and
//! report `frame_count = 0` until an external decoder expands them.

use thiserror::Error;

const MAGIC: &str = "WLFP1";

#[derive(Debug, Error, PartialEq)]
pub enum SegmentFormatError {
    #[error("missing or malformed frame-pack header")]
    BadHeader,
    #[error("payload holds {actual} bytes, header promises {expected}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentHeader {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub frame_count: u64,
}

impl SegmentHeader {
    pub fn duration(&self) -> f64 {
        self.frame_count as f64 / self.fps
    }

    fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Parses the header and returns it with the payload offset.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), SegmentFormatError> {
        let end = bytes
            .iter()
            .take(128)
            .position(|b| *b == b'\n')
            .ok_or(SegmentFormatError::BadHeader)?;
        let line = std::str::from_utf8(&bytes[..end]).map_err(|_| SegmentFormatError::BadHeader)?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some(MAGIC) {
            return Err(SegmentFormatError::BadHeader);
        }
        let mut next = || it.next().ok_or(SegmentFormatError::BadHeader);
        let width: u32 = next()?.parse().map_err(|_| SegmentFormatError::BadHeader)?;
        let height: u32 = next()?.parse().map_err(|_| SegmentFormatError::BadHeader)?;
        let fps: f64 = next()?.parse().map_err(|_| SegmentFormatError::BadHeader)?;
        let frame_count: u64 = next()?.parse().map_err(|_| SegmentFormatError::BadHeader)?;
        if width == 0 || height == 0 || !(fps.is_finite() && fps > 0.0) {
            return Err(SegmentFormatError::BadHeader);
        }
        Ok((
            Self {
                width,
                height,
                fps,
                frame_count,
            },
            end + 1,
        ))
    }
}

/// Decoded segment: header plus one grayscale buffer per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePack {
    pub header: SegmentHeader,
    pub frames: Vec<Vec<u8>>,
}

impl FramePack {
    pub fn decode(bytes: &[u8]) -> Result<Self, SegmentFormatError> {
        let (header, offset) = SegmentHeader::parse(bytes)?;
        let per = header.frame_bytes();
        let expected = per * header.frame_count as usize;
        let payload = &bytes[offset..];
        if payload.len() != expected {
            return Err(SegmentFormatError::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        let frames = if per == 0 {
            Vec::new()
        } else {
            payload.chunks_exact(per).map(<[u8]>::to_vec).collect()
        };
        Ok(Self { header, frames })
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = format!("{MAGIC} {} {} {} {}\n", h.width, h.height, h.fps, self.frames.len()).into_bytes();
        for f in &self.frames {
            debug_assert_eq!(f.len(), h.frame_bytes());
            out.extend_from_slice(f);
        }
        out
    }
}
