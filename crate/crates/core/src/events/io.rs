//! Binary event, image and depth files.
//!
//! Event file (little-endian):
//!
//! ```text
//! "EVT1" | H: u16 | W: u16 | { x: u16 | y: u16 | t: i64 (µs) | p: u8 }*
//! ```
//!
//! Image and depth sidecars share one layout, distinguished by magic
//! ("EVTG" for grayscale frames, "EVTZ" for depth maps):
//!
//! ```text
//! magic | H: u16 | W: u16 | { timestamp: i64 | H*W f32 row-major }*
//! ```
//!
//! Invalid depth pixels are stored as the NaN sentinel bit pattern.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{DepthMap, Event, EventStream, GrayscaleFrame, Polarity, SensorGeometry};

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
pub const IMAGE_MAGIC: &[u8; 4] = b"EVTG";
pub const DEPTH_MAGIC: &[u8; 4] = b"EVTZ";
pub const EVENT_RECORD_BYTES: usize = 13;
const HEADER_BYTES: usize = 8;

#[derive(Debug, Error)]
pub enum EventFileError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("file truncated: record {record} is incomplete ({available} of {needed} bytes)")]
    Truncated {
        record: usize,
        available: usize,
        needed: usize,
    },
    #[error("record {record}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        record: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("record {record}: timestamp {t} precedes previous timestamp {prev}")]
    NonMonotone { record: usize, t: i64, prev: i64 },
    #[error("record {record}: negative timestamp {t}")]
    NegativeTime { record: usize, t: i64 },
    #[error("record {record}: polarity byte {value} is not 0 or 1")]
    BadPolarity { record: usize, value: u8 },
    #[error("sidecar geometry {found_h}x{found_w} does not match stream {height}x{width}")]
    GeometryMismatch {
        found_h: u16,
        found_w: u16,
        height: u16,
        width: u16,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<(), EventFileError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(EventFileError::BadMagic {
            expected: *magic,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(EventFileError::Truncated {
            record: 0,
            available: bytes.len(),
            needed: HEADER_BYTES,
        });
    }
    Ok(())
}

fn header_geometry(bytes: &[u8]) -> SensorGeometry {
    let h = u16::from_le_bytes([bytes[4], bytes[5]]);
    let w = u16::from_le_bytes([bytes[6], bytes[7]]);
    SensorGeometry::new(h, w)
}

/// Decodes an event file from memory.
pub fn decode_events(bytes: &[u8]) -> Result<EventStream, EventFileError> {
    check_magic(bytes, EVENT_MAGIC)?;
    let geometry = header_geometry(bytes);
    let body = &bytes[HEADER_BYTES..];
    let full = body.len() / EVENT_RECORD_BYTES;
    let rest = body.len() % EVENT_RECORD_BYTES;
    if rest != 0 {
        return Err(EventFileError::Truncated {
            record: full,
            available: rest,
            needed: EVENT_RECORD_BYTES,
        });
    }
    let mut events = Vec::with_capacity(full);
    let mut prev = i64::MIN;
    for (record, r) in body.chunks_exact(EVENT_RECORD_BYTES).enumerate() {
        let x = u16::from_le_bytes([r[0], r[1]]);
        let y = u16::from_le_bytes([r[2], r[3]]);
        let t = i64::from_le_bytes(r[4..12].try_into().expect("8 bytes"));
        let p = Polarity::from_bit(r[12]).ok_or(EventFileError::BadPolarity {
            record,
            value: r[12],
        })?;
        if !geometry.contains(x, y) {
            return Err(EventFileError::OutOfBounds {
                record,
                x,
                y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        if t < 0 {
            return Err(EventFileError::NegativeTime { record, t });
        }
        if t < prev {
            return Err(EventFileError::NonMonotone { record, t, prev });
        }
        prev = t;
        events.push(Event { x, y, t, p });
    }
    Ok(EventStream::empty(geometry).with_events_unchecked(events))
}

/// Encodes the event part of a stream (labels and sidecars are not stored).
pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + stream.events.len() * EVENT_RECORD_BYTES);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&stream.geometry.height.to_le_bytes());
    out.extend_from_slice(&stream.geometry.width.to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

pub fn read_event_file(path: impl AsRef<Path>) -> Result<EventStream, EventFileError> {
    decode_events(&fs::read(path)?)
}

pub fn write_event_file(
    stream: &EventStream,
    path: impl AsRef<Path>,
) -> Result<(), EventFileError> {
    fs::write(path, encode_events(stream))?;
    Ok(())
}

fn encode_maps<'a>(
    magic: &[u8; 4],
    geometry: SensorGeometry,
    maps: impl Iterator<Item = (i64, &'a [f32])>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&geometry.height.to_le_bytes());
    out.extend_from_slice(&geometry.width.to_le_bytes());
    for (ts, values) in maps {
        out.extend_from_slice(&ts.to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

fn decode_maps(
    bytes: &[u8],
    magic: &[u8; 4],
) -> Result<(SensorGeometry, Vec<(i64, Vec<f32>)>), EventFileError> {
    check_magic(bytes, magic)?;
    let geometry = header_geometry(bytes);
    let record_bytes = 8 + 4 * geometry.pixels();
    let body = &bytes[HEADER_BYTES..];
    if body.len() % record_bytes != 0 {
        return Err(EventFileError::Truncated {
            record: body.len() / record_bytes,
            available: body.len() % record_bytes,
            needed: record_bytes,
        });
    }
    let maps = body
        .chunks_exact(record_bytes)
        .map(|r| {
            let ts = i64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
            let values = r[8..]
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            (ts, values)
        })
        .collect();
    Ok((geometry, maps))
}

pub fn write_image_file(
    geometry: SensorGeometry,
    frames: &[GrayscaleFrame],
    path: impl AsRef<Path>,
) -> Result<(), EventFileError> {
    let bytes = encode_maps(
        IMAGE_MAGIC,
        geometry,
        frames.iter().map(|f| (f.timestamp, f.pixels.as_slice())),
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_image_file(
    path: impl AsRef<Path>,
) -> Result<(SensorGeometry, Vec<GrayscaleFrame>), EventFileError> {
    let (g, maps) = decode_maps(&fs::read(path)?, IMAGE_MAGIC)?;
    let frames = maps
        .into_iter()
        .map(|(timestamp, pixels)| GrayscaleFrame { timestamp, pixels })
        .collect();
    Ok((g, frames))
}

pub fn write_depth_file(
    geometry: SensorGeometry,
    maps: &[DepthMap],
    path: impl AsRef<Path>,
) -> Result<(), EventFileError> {
    let bytes = encode_maps(
        DEPTH_MAGIC,
        geometry,
        maps.iter().map(|d| (d.timestamp, d.values.as_slice())),
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_depth_file(
    path: impl AsRef<Path>,
) -> Result<(SensorGeometry, Vec<DepthMap>), EventFileError> {
    let (g, maps) = decode_maps(&fs::read(path)?, DEPTH_MAGIC)?;
    let maps = maps
        .into_iter()
        .map(|(timestamp, values)| DepthMap { timestamp, values })
        .collect();
    Ok((g, maps))
}

impl EventStream {
    fn with_events_unchecked(mut self, events: Vec<Event>) -> Self {
        self.events = events;
        self
    }

    /// Attaches sidecar maps, checking that their geometry matches.
    pub fn attach_sidecars(
        &mut self,
        images: Option<(SensorGeometry, Vec<GrayscaleFrame>)>,
        depth: Option<(SensorGeometry, Vec<DepthMap>)>,
    ) -> Result<(), EventFileError> {
        let check = |g: SensorGeometry| {
            if g != self.geometry {
                Err(EventFileError::GeometryMismatch {
                    found_h: g.height,
                    found_w: g.width,
                    height: self.geometry.height,
                    width: self.geometry.width,
                })
            } else {
                Ok(())
            }
        };
        if let Some((g, frames)) = images {
            check(g)?;
            self.images = frames;
        }
        if let Some((g, maps)) = depth {
            check(g)?;
            self.depth_maps = maps;
        }
        Ok(())
    }
}
