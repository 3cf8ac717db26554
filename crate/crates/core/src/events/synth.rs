//! Synthetic event generators.
//!
//! Both generators render a log-intensity image on a fixed simulation step
//! and emit an event at a pixel each time its log intensity moves a full
//! contrast threshold away from the last reference level, with the
//! polarity of the change. Sub-step timestamps are jittered uniformly and
//! each step's events are sorted before appending, so streams are
//! time-ordered. Every random draw comes from a ChaCha stream keyed by the
//! seed; the output is a pure function of the arguments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{DepthMap, Event, EventStream, GrayscaleFrame, Polarity, SensorGeometry};

const CONTRAST: f64 = 0.15;
const SIM_STEP_US: i64 = 1_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("unknown gesture class {0} (expected 0..{GESTURE_CLASSES})")]
    UnknownClass(u32),
    #[error("geometry {height}x{width} is too small to render a scene")]
    DegenerateGeometry { height: u16, width: u16 },
    #[error("duration {0} us is too short (need at least {1} us)")]
    Duration(i64, i64),
    #[error("invalid scene parameter: {0}")]
    Parameter(&'static str),
}

pub const GESTURE_CLASSES: usize = 4;

/// Motion classes of the synthetic gesture corpus.
///
/// Screen coordinates have `y` pointing down. Both circle classes share
/// centre, radius and phase for a given seed, so a short snapshot of the
/// marker position cannot tell them apart; only motion over time can.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GestureClass {
    /// Circle traversed clockwise on screen.
    Clockwise = 0,
    /// Circle traversed counter-clockwise on screen.
    CounterClockwise = 1,
    /// Left-right oscillation through the centre.
    HorizontalWave = 2,
    /// Up-down oscillation through the centre.
    VerticalWave = 3,
}

impl GestureClass {
    pub fn from_id(id: u32) -> Result<Self, SynthError> {
        Ok(match id {
            0 => Self::Clockwise,
            1 => Self::CounterClockwise,
            2 => Self::HorizontalWave,
            3 => Self::VerticalWave,
            other => return Err(SynthError::UnknownClass(other)),
        })
    }

    fn position(self, center: (f64, f64), radius: f64, angle: f64) -> (f64, f64) {
        let (cx, cy) = center;
        match self {
            Self::Clockwise => (cx + radius * angle.cos(), cy + radius * angle.sin()),
            Self::CounterClockwise => (cx + radius * angle.cos(), cy - radius * angle.sin()),
            Self::HorizontalWave => (cx + radius * angle.sin(), cy),
            Self::VerticalWave => (cx, cy + radius * angle.sin()),
        }
    }
}

/// Per-pixel contrast-threshold event emitter.
struct Emitter {
    width: usize,
    reference: Vec<f64>,
    pending: Vec<Event>,
}

impl Emitter {
    fn new(width: usize, initial_log: Vec<f64>) -> Self {
        Self {
            width,
            reference: initial_log,
            pending: Vec::new(),
        }
    }

    fn observe(&mut self, idx: usize, log_i: f64, t0: i64, rng: &mut ChaCha8Rng) {
        let diff = log_i - self.reference[idx];
        let crossings = (diff.abs() / CONTRAST).floor();
        if crossings < 1.0 {
            return;
        }
        let (p, sign) = if diff > 0.0 {
            (Polarity::Positive, 1.0)
        } else {
            (Polarity::Negative, -1.0)
        };
        self.reference[idx] += sign * crossings * CONTRAST;
        let x = (idx % self.width) as u16;
        let y = (idx / self.width) as u16;
        for _ in 0..crossings as usize {
            let t = t0 + rng.random_range(0..SIM_STEP_US);
            self.pending.push(Event::new(x, y, t, p));
        }
    }

    fn flush(&mut self, out: &mut Vec<Event>) {
        self.pending.sort_by_key(|e| (e.t, e.y, e.x, e.p));
        out.append(&mut self.pending);
    }
}

/// Trajectory samples per cycle at which the gesture marker is shown.
pub const STROBE_SLOTS_PER_CYCLE: usize = 8;

/// Renders a strobed bright Gaussian marker over a dark background.
///
/// The trajectory of `class_id` is cut into [`STROBE_SLOTS_PER_CYCLE`]
/// equal time slots per cycle. The marker is lit at the slot's trajectory
/// point for the first half of the slot and dark for the second half, so
/// every onset and offset happens in place and no window shorter than half
/// a slot sees two marker positions. The direction of travel is only
/// visible in the order of positions across windows.
///
/// `rate_hz` is the number of trajectory cycles per second (scaled by a
/// per-seed factor in `[0.85, 1.15]`); `rate_hz = 0` gives a static scene
/// and therefore no events.
pub fn synth_gesture_stream(
    class_id: u32,
    seed: u64,
    geometry: SensorGeometry,
    duration_us: i64,
    rate_hz: f64,
) -> Result<EventStream, SynthError> {
    let class = GestureClass::from_id(class_id)?;
    if geometry.height < 8 || geometry.width < 8 {
        return Err(SynthError::DegenerateGeometry {
            height: geometry.height,
            width: geometry.width,
        });
    }
    if duration_us <= 0 {
        return Err(SynthError::Duration(duration_us, 1));
    }
    if !(rate_hz.is_finite() && rate_hz >= 0.0) {
        return Err(SynthError::Parameter(
            "rate must be finite and non-negative",
        ));
    }
    let (h, w) = (geometry.height as usize, geometry.width as usize);
    let side = h.min(w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (
        w as f64 / 2.0 + rng.random_range(-0.08..0.08) * w as f64,
        h as f64 / 2.0 + rng.random_range(-0.08..0.08) * h as f64,
    );
    let radius = side * rng.random_range(0.2..0.28);
    let sigma = side * rng.random_range(0.04..0.055);
    let phase = rng.random_range(0.0..2.0 * PI);
    let omega = 2.0 * PI * rate_hz * rng.random_range(0.85..1.15) * 1e-6;
    const BACKGROUND: f64 = 0.15;
    const PEAK: f64 = 0.85;

    let slot_angle = 2.0 * PI / STROBE_SLOTS_PER_CYCLE as f64;
    let marker_at = |t: i64| -> Option<(f64, f64)> {
        if omega == 0.0 {
            return None;
        }
        let slots = omega * t as f64 / slot_angle;
        let lit = slots.fract() < 0.5;
        lit.then(|| class.position(center, radius, phase + slots.floor() * slot_angle))
    };
    let log_intensity = |px: f64, py: f64, marker: Option<(f64, f64)>| {
        let glow = marker.map_or(0.0, |(bx, by)| {
            let d2 = (px - bx).powi(2) + (py - by).powi(2);
            PEAK * (-d2 / (2.0 * sigma * sigma)).exp()
        });
        (BACKGROUND + glow).ln()
    };

    let start = marker_at(0);
    let initial = (0..h * w)
        .map(|i| log_intensity((i % w) as f64, (i / w) as f64, start))
        .collect();
    let mut emitter = Emitter::new(w, initial);
    let mut events = Vec::new();
    let reach = 4.0 * sigma;
    let mut prev = start;
    let mut t0 = 0;
    while t0 + SIM_STEP_US <= duration_us {
        let now = marker_at(t0 + SIM_STEP_US);
        if now != prev {
            for (bx, by) in [prev, now].into_iter().flatten() {
                let x_lo = (bx - reach).floor().max(0.0) as usize;
                let x_hi = ((bx + reach).ceil().max(0.0) as usize).min(w - 1);
                let y_lo = (by - reach).floor().max(0.0) as usize;
                let y_hi = ((by + reach).ceil().max(0.0) as usize).min(h - 1);
                for y in y_lo..=y_hi {
                    for x in x_lo..=x_hi {
                        let li = log_intensity(x as f64, y as f64, now);
                        emitter.observe(y * w + x, li, t0, &mut rng);
                    }
                }
            }
            emitter.flush(&mut events);
        }
        prev = now;
        t0 += SIM_STEP_US;
    }
    Ok(EventStream::empty(geometry)
        .with_events(events)
        .with_label(class_id))
}

/// Parameters of the synthetic depth scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSceneConfig {
    /// Nearest representable depth `D_m` in meters.
    pub min_depth: f64,
    /// Farthest representable depth `D_M` in meters.
    pub max_depth: f64,
    /// Grayscale frame rate; 0 disables frames.
    pub image_rate_hz: f64,
    /// Ground-truth depth rate.
    pub depth_rate_hz: f64,
    /// Fraction of depth pixels marked invalid in every map.
    pub invalid_fraction: f64,
    /// Lateral camera speed in m/s.
    pub camera_speed: f64,
    /// Focal length in pixels; `None` means `0.8 * width`.
    pub focal_px: Option<f64>,
    /// Depth scale of the brightness fall-off `exp(-Z / scale)`, which makes
    /// grayscale frames carry a monocular depth cue.
    pub attenuation_m: f64,
    /// Give every plane the same texture so that only depth differs.
    pub shared_texture: bool,
}

impl Default for DepthSceneConfig {
    fn default() -> Self {
        Self {
            min_depth: 2.0,
            max_depth: 20.0,
            image_rate_hz: 40.0,
            depth_rate_hz: 20.0,
            invalid_fraction: 0.3,
            camera_speed: 4.0,
            focal_px: None,
            attenuation_m: 12.0,
            shared_texture: false,
        }
    }
}

pub const MIN_DEPTH_SCENE_US: i64 = 1_000_000;

struct Plane {
    row_start: usize,
    row_end: usize,
    depth: f64,
    // (amplitude, image-space wavelength px, row slant, phase)
    waves: [(f64, f64, f64, f64); 3],
}

impl Plane {
    fn albedo(&self, u: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(a, lambda, slant, phase)| {
                a * (2.0 * PI * (u + slant * y) / lambda + phase).sin()
            })
            .sum();
        let total: f64 = self.waves.iter().map(|w| w.0).sum();
        0.625 + 0.375 * s / total
    }
}

/// A camera translating sideways past 2-4 fronto-parallel textured planes,
/// each covering a horizontal band of rows at its own depth.
///
/// Textures have a fixed wavelength in image space and slide at
/// `focal * speed / depth` pixels per second, so nearer planes produce more
/// events. Brightness falls off with depth. Depth maps are piecewise
/// constant with `invalid_fraction` of pixels set to [`DepthMap::INVALID`].
pub fn synth_depth_scene(
    seed: u64,
    geometry: SensorGeometry,
    duration_us: i64,
    config: &DepthSceneConfig,
) -> Result<EventStream, SynthError> {
    if geometry.height < 8 || geometry.width < 8 {
        return Err(SynthError::DegenerateGeometry {
            height: geometry.height,
            width: geometry.width,
        });
    }
    if duration_us < MIN_DEPTH_SCENE_US {
        return Err(SynthError::Duration(duration_us, MIN_DEPTH_SCENE_US));
    }
    if !(config.min_depth > 0.0 && config.max_depth > config.min_depth) {
        return Err(SynthError::Parameter("need 0 < min_depth < max_depth"));
    }
    if !(0.0..1.0).contains(&config.invalid_fraction) {
        return Err(SynthError::Parameter("invalid_fraction must lie in [0, 1)"));
    }
    if config.depth_rate_hz <= 0.0 || config.image_rate_hz < 0.0 {
        return Err(SynthError::Parameter("rates must be positive"));
    }
    let (h, w) = (geometry.height as usize, geometry.width as usize);
    let focal = config.focal_px.unwrap_or(0.8 * w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = sample_planes(&mut rng, h, config);

    let row_plane: Vec<usize> = (0..h)
        .map(|y| {
            planes
                .iter()
                .position(|p| y >= p.row_start && y < p.row_end)
                .expect("bands cover rows")
        })
        .collect();
    let intensity = |x: usize, y: usize, t: i64| {
        let p = &planes[row_plane[y]];
        let shift = focal * config.camera_speed * t as f64 * 1e-6 / p.depth;
        let atten = (-p.depth / config.attenuation_m).exp();
        atten * p.albedo(x as f64 + shift, y as f64)
    };

    let initial = (0..h * w)
        .map(|i| intensity(i % w, i / w, 0).ln())
        .collect();
    let mut emitter = Emitter::new(w, initial);
    let mut events = Vec::new();
    let mut t0 = 0;
    while t0 + SIM_STEP_US <= duration_us {
        let t1 = t0 + SIM_STEP_US;
        for y in 0..h {
            for x in 0..w {
                emitter.observe(y * w + x, intensity(x, y, t1).ln(), t0, &mut rng);
            }
        }
        emitter.flush(&mut events);
        t0 = t1;
    }

    let mut images = Vec::new();
    if config.image_rate_hz > 0.0 {
        let period = (1e6 / config.image_rate_hz).round() as i64;
        let mut t = period;
        while t <= duration_us {
            let pixels = (0..h * w)
                .map(|i| intensity(i % w, i / w, t).clamp(0.0, 1.0) as f32)
                .collect();
            images.push(GrayscaleFrame {
                timestamp: t,
                pixels,
            });
            t += period;
        }
    }

    let period = (1e6 / config.depth_rate_hz).round() as i64;
    let mut depth_maps = Vec::new();
    let mut t = period;
    while t <= duration_us {
        let values = (0..h * w)
            .map(|i| {
                if rng.random::<f64>() < config.invalid_fraction {
                    DepthMap::INVALID
                } else {
                    planes[row_plane[i / w]].depth as f32
                }
            })
            .collect();
        depth_maps.push(DepthMap {
            timestamp: t,
            values,
        });
        t += period;
    }

    let mut stream = EventStream::empty(geometry).with_events(events);
    stream.images = images;
    stream.depth_maps = depth_maps;
    Ok(stream)
}

fn sample_planes(rng: &mut ChaCha8Rng, h: usize, config: &DepthSceneConfig) -> Vec<Plane> {
    let count = rng.random_range(2..=4usize);
    let min_band = (h / 8).max(1);
    // cut points with every band at least `min_band` rows tall
    let slack = h - count * min_band;
    let mut cuts: Vec<usize> = (0..count - 1)
        .map(|_| rng.random_range(0..=slack))
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    for (i, c) in cuts.iter().enumerate() {
        bounds.push(c + (i + 1) * min_band);
    }
    bounds.push(h);

    let (lo, hi) = (config.min_depth.ln(), config.max_depth.ln());
    let min_gap = ((hi - lo) / (2.0 * count as f64)).min(0.3_f64.ln_1p());
    let mut depths: Vec<f64> = Vec::new();
    while depths.len() < count {
        let d = rng.random_range(lo..=hi);
        if depths.iter().all(|&o| (o - d).abs() >= min_gap) {
            depths.push(d);
        }
    }

    let mut sample_waves = || {
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
        for wave in &mut waves {
            *wave = (
                rng.random_range(0.5..1.0),
                rng.random_range(6.0..16.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.0..2.0 * PI),
            );
        }
        waves
    };
    let shared = sample_waves();
    (0..count)
        .map(|i| {
            let waves = if config.shared_texture {
                shared
            } else {
                sample_waves()
            };
            Plane {
                row_start: bounds[i],
                row_end: bounds[i + 1],
                depth: depths[i].exp().clamp(config.min_depth, config.max_depth),
                waves,
            }
        })
        .collect()
}

impl EventStream {
    pub(crate) fn with_events(mut self, events: Vec<Event>) -> Self {
        debug_assert!(super::validate_events(self.geometry, &events).is_ok());
        self.events = events;
        self
    }
}
