//! Event, frame and depth data model.
//!
//! An [`EventStream`] is an immutable, time-ordered list of [`Event`]s for a
//! sensor of fixed [`SensorGeometry`], optionally carrying a class label,
//! grayscale frames and ground-truth depth maps.

mod io;
mod synth;
mod windows;

pub use io::{
    decode_events, encode_events, read_depth_file, read_event_file, read_image_file,
    write_depth_file, write_event_file, write_image_file, EventFileError, DEPTH_MAGIC, EVENT_MAGIC,
    EVENT_RECORD_BYTES, IMAGE_MAGIC,
};
pub use synth::{
    synth_depth_scene, synth_gesture_stream, DepthSceneConfig, GestureClass, SynthError,
    GESTURE_CLASSES, MIN_DEPTH_SCENE_US,
};
pub use windows::{slice_windows, Window};

use thiserror::Error;

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative = 0,
    Positive = 1,
}

impl Polarity {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

/// A single sensor event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: i64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: i64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    pub height: u16,
    pub width: u16,
}

impl SensorGeometry {
    pub fn new(height: u16, width: u16) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }
}

/// Row-major grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleFrame {
    pub timestamp: i64,
    pub pixels: Vec<f32>,
}

/// Row-major depth in meters. Invalid pixels hold [`DepthMap::INVALID`].
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub timestamp: i64,
    pub values: Vec<f32>,
}

impl DepthMap {
    /// Invalid-pixel sentinel. Never zero, so it cannot be confused with a
    /// (non-loggable) zero depth.
    pub const INVALID: f32 = f32::NAN;

    pub fn is_valid(v: f32) -> bool {
        v.is_finite() && v > 0.0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| Self::is_valid(v)).collect()
    }
}

impl PartialEq for DepthMap {
    // bitwise, so NaN sentinels compare equal
    fn eq(&self, other: &Self) -> bool {
        self.timestamp == other.timestamp
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("event {index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("event {index} has timestamp {t} earlier than its predecessor ({prev})")]
    NonMonotone { index: usize, t: i64, prev: i64 },
    #[error("event {index} has negative timestamp {t}")]
    NegativeTime { index: usize, t: i64 },
    #[error("attached map has {got} pixels, expected {expected}")]
    MapSize { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub geometry: SensorGeometry,
    pub events: Vec<Event>,
    pub label: Option<u32>,
    pub images: Vec<GrayscaleFrame>,
    pub depth_maps: Vec<DepthMap>,
}

impl EventStream {
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self, StreamError> {
        validate_events(geometry, &events)?;
        Ok(Self {
            geometry,
            events,
            label: None,
            images: Vec::new(),
            depth_maps: Vec::new(),
        })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            events: Vec::new(),
            label: None,
            images: Vec::new(),
            depth_maps: Vec::new(),
        }
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn first_time(&self) -> Option<i64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_time(&self) -> Option<i64> {
        self.events.last().map(|e| e.t)
    }

    /// Enlarges the sensor canvas at the bottom and right so both sides are
    /// multiples of `patch`. Events keep their coordinates; images gain
    /// zero-intensity pixels and depth maps gain invalid pixels.
    pub fn padded_to_multiple(&self, patch: u16) -> Self {
        assert!(patch > 0, "patch size must be positive");
        let (h, w) = (self.geometry.height, self.geometry.width);
        let geometry = SensorGeometry::new(h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
        let pad = |src: &[f32], fill: f32| {
            let mut out = vec![fill; geometry.pixels()];
            for y in 0..h as usize {
                let row = &src[y * w as usize..(y + 1) * w as usize];
                out[y * geometry.width as usize..y * geometry.width as usize + w as usize]
                    .copy_from_slice(row);
            }
            out
        };
        Self {
            geometry,
            events: self.events.clone(),
            label: self.label,
            images: self
                .images
                .iter()
                .map(|f| GrayscaleFrame {
                    timestamp: f.timestamp,
                    pixels: pad(&f.pixels, 0.0),
                })
                .collect(),
            depth_maps: self
                .depth_maps
                .iter()
                .map(|d| DepthMap {
                    timestamp: d.timestamp,
                    values: pad(&d.values, DepthMap::INVALID),
                })
                .collect(),
        }
    }

    /// Checks every stream invariant, including attached map sizes.
    pub fn validate(&self) -> Result<(), StreamError> {
        validate_events(self.geometry, &self.events)?;
        let expected = self.geometry.pixels();
        for len in self
            .images
            .iter()
            .map(|f| f.pixels.len())
            .chain(self.depth_maps.iter().map(|d| d.values.len()))
        {
            if len != expected {
                return Err(StreamError::MapSize { got: len, expected });
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_events(
    geometry: SensorGeometry,
    events: &[Event],
) -> Result<(), StreamError> {
    let mut prev = i64::MIN;
    for (index, e) in events.iter().enumerate() {
        if !geometry.contains(e.x, e.y) {
            return Err(StreamError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        if e.t < 0 {
            return Err(StreamError::NegativeTime { index, t: e.t });
        }
        if e.t < prev {
            return Err(StreamError::NonMonotone {
                index,
                t: e.t,
                prev,
            });
        }
        prev = e.t;
    }
    Ok(())
}
