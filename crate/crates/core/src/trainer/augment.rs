use std::ops::Range;

use rand::Rng;

use crate::events::{DepthMap, EventStream, GrayscaleFrame, SensorGeometry};
use crate::model::{window_inputs, WindowInputs};
use crate::tokenizer::{TokenSet, TokenizerConfig};

use super::TrainError;

/// Training-time augmentation. Every rate lies in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Largest fraction of each side that a spatial crop may remove.
    pub spatial_crop: f64,
    /// Largest fraction of the windows that a temporal crop may remove.
    pub temporal_crop: f64,
    /// Residual-branch dropout.
    pub dropout: f64,
    /// Probability of removing each activated token.
    pub drop_token: f64,
    /// Augmented copies of every sample in a batch.
    pub repetitions: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            spatial_crop: 0.2,
            temporal_crop: 0.25,
            dropout: 0.1,
            drop_token: 0.1,
            repetitions: 2,
        }
    }
}

impl AugmentConfig {
    /// No augmentation and a single copy per sample.
    pub fn none() -> Self {
        Self {
            spatial_crop: 0.0,
            temporal_crop: 0.0,
            dropout: 0.0,
            drop_token: 0.0,
            repetitions: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, r) in [
            ("spatial_crop", self.spatial_crop),
            ("temporal_crop", self.temporal_crop),
            ("dropout", self.dropout),
            ("drop_token", self.drop_token),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if self.repetitions == 0 {
            return Err(TrainError::Config("repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

/// A `width × height` rectangle copied from `src` to `dst` (top-left
/// corners) on the same canvas; everything else is blanked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialCrop {
    pub src: (u16, u16),
    pub dst: (u16, u16),
    pub width: u16,
    pub height: u16,
}

impl SpatialCrop {
    pub fn identity(geometry: SensorGeometry) -> Self {
        Self {
            src: (0, 0),
            dst: (0, 0),
            width: geometry.width,
            height: geometry.height,
        }
    }

    fn map(&self, x: u16, y: u16) -> Option<(u16, u16)> {
        let inside = x >= self.src.0
            && x < self.src.0 + self.width
            && y >= self.src.1
            && y < self.src.1 + self.height;
        inside.then(|| (x - self.src.0 + self.dst.0, y - self.src.1 + self.dst.1))
    }

    fn remap_pixels<T: Copy>(&self, geometry: SensorGeometry, values: &[T], fill: T) -> Vec<T> {
        let w = geometry.width as usize;
        let mut out = vec![fill; values.len()];
        for dy in 0..self.height as usize {
            let s = (self.src.1 as usize + dy) * w + self.src.0 as usize;
            let d = (self.dst.1 as usize + dy) * w + self.dst.0 as usize;
            out[d..d + self.width as usize].copy_from_slice(&values[s..s + self.width as usize]);
        }
        out
    }

    /// Applies the crop to events, frames and depth maps.
    pub fn apply(&self, stream: &EventStream) -> EventStream {
        let geo = stream.geometry;
        let mut out = stream.clone();
        out.events = stream
            .events
            .iter()
            .filter_map(|e| {
                self.map(e.x, e.y)
                    .map(|(x, y)| crate::events::Event { x, y, ..*e })
            })
            .collect();
        out.images = stream
            .images
            .iter()
            .map(|f| GrayscaleFrame {
                timestamp: f.timestamp,
                pixels: self.remap_pixels(geo, &f.pixels, 0.0),
            })
            .collect();
        out.depth_maps = stream
            .depth_maps
            .iter()
            .map(|d| DepthMap {
                timestamp: d.timestamp,
                values: self.remap_pixels(geo, &d.values, DepthMap::INVALID),
            })
            .collect();
        out
    }
}

fn crop_side(full: u16, patch: u16, fraction: f64, rng: &mut impl Rng) -> u16 {
    let lo = ((1.0 - fraction) * full as f64).ceil() as u16;
    let side = rng.random_range(lo.min(full)..=full);
    (side / patch * patch).max(patch.min(full))
}

/// Draws a crop whose sides are multiples of `patch` and at least
/// `(1 - fraction)` of the canvas (before rounding down to the patch
/// multiple), copied to a uniformly drawn position.
pub fn sample_spatial_crop(
    geometry: SensorGeometry,
    patch: u16,
    fraction: f64,
    rng: &mut impl Rng,
) -> SpatialCrop {
    if fraction == 0.0 {
        return SpatialCrop::identity(geometry);
    }
    let width = crop_side(geometry.width, patch, fraction, rng);
    let height = crop_side(geometry.height, patch, fraction, rng);
    let mut corner = |full: u16, side: u16| rng.random_range(0..=full - side);
    let src = (
        corner(geometry.width, width),
        corner(geometry.height, height),
    );
    let dst = (
        corner(geometry.width, width),
        corner(geometry.height, height),
    );
    SpatialCrop {
        src,
        dst,
        width,
        height,
    }
}

/// Draws a contiguous span of at least `ceil((1 - fraction) · n)` windows.
pub fn sample_temporal_crop(n: usize, fraction: f64, rng: &mut impl Rng) -> Range<usize> {
    if fraction == 0.0 || n == 0 {
        return 0..n;
    }
    let min_len = (((1.0 - fraction) * n as f64).ceil() as usize).clamp(1, n);
    let len = rng.random_range(min_len..=n);
    let start = rng.random_range(0..=n - len);
    start..start + len
}

fn drop_from(set: &mut TokenSet, rate: f64, rng: &mut impl Rng) {
    set.tokens.retain(|_| rng.random::<f64>() >= rate);
}

/// Removes each token of each modality independently with probability
/// `rate`.
pub fn drop_tokens(windows: &mut [WindowInputs], rate: f64, rng: &mut impl Rng) {
    if rate == 0.0 {
        return;
    }
    for w in windows {
        drop_from(&mut w.events, rate, rng);
        if let Some(img) = &mut w.image {
            drop_from(img, rate, rng);
        }
    }
}

fn has_tokens(windows: &[WindowInputs]) -> bool {
    windows
        .iter()
        .any(|w| !w.events.is_empty() || w.image.as_ref().is_some_and(|i| !i.is_empty()))
}

/// Tokenizes an augmented copy of `stream` over `[t_start, t_stop)`:
/// spatial crop, tokenization, temporal crop, then drop-token. An attempt
/// that leaves no tokens is redrawn once; if that also comes out empty the
/// unaugmented windows are returned.
pub fn augment_stream(
    stream: &EventStream,
    tokenizer: &TokenizerConfig,
    (t_start, t_stop): (i64, i64),
    with_images: bool,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<WindowInputs>, TrainError> {
    for _ in 0..2 {
        let crop = sample_spatial_crop(
            stream.geometry,
            tokenizer.patch_size as u16,
            aug.spatial_crop,
            rng,
        );
        let cropped = if crop == SpatialCrop::identity(stream.geometry) {
            None
        } else {
            Some(crop.apply(stream))
        };
        let windows = window_inputs(
            cropped.as_ref().unwrap_or(stream),
            tokenizer,
            t_start,
            t_stop,
            with_images,
        )?;
        let span = sample_temporal_crop(windows.len(), aug.temporal_crop, rng);
        let mut windows = windows[span].to_vec();
        drop_tokens(&mut windows, aug.drop_token, rng);
        if has_tokens(&windows) {
            return Ok(windows);
        }
    }
    Ok(window_inputs(
        stream,
        tokenizer,
        t_start,
        t_stop,
        with_images,
    )?)
}

/// Drop-token augmentation of pre-tokenized windows, with the same
/// redraw-then-pass-through rule as [`augment_stream`].
pub fn augment_windows(
    windows: &[WindowInputs],
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> Vec<WindowInputs> {
    for _ in 0..2 {
        let mut out = windows.to_vec();
        drop_tokens(&mut out, aug.drop_token, rng);
        if has_tokens(&out) {
            return out;
        }
    }
    windows.to_vec()
}
