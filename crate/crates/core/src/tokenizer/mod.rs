//! Patch tokenization of event windows.
//!
//! For every pixel and polarity a FIFO keeps the timestamps of the last `K`
//! events that are at least `T_m = Δt / K` apart; an event arriving closer
//! than `T_m` to the newest retained one replaces it. At the end of a
//! window `[t_i, t_e)` the queues are turned into an `H×W×K×2` frame of
//! recency values `clamp((t - (t_e - T_M)) / T_M, 0, 1)`. Frames are cut
//! into `P×P` patches; a patch becomes a token when at least `m` percent of
//! its pixels saw an event inside the window. Older events still fill the
//! token data but never count towards activation.
//!
//! Token layout (length `P²·K·2`): pixels row-major inside the patch, then
//! FIFO slot, then polarity. FIFO slots are filled from index 0 with the
//! retained timestamps oldest first; unused slots are 0.

mod dump;
mod oracle;

pub use dump::{token_csv_header, write_token_csv_rows};
pub use oracle::naive_tokenize_oracle;

use thiserror::Error;

use crate::events::{Event, EventStream, GrayscaleFrame, Polarity, SensorGeometry, Window};

/// Intensity above which a grayscale pixel counts towards patch activation.
pub const IMAGE_ACTIVITY_THRESHOLD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("event at ({x}, {y}) outside the sensor")]
    OutOfBounds { x: u16, y: u16 },
    #[error("event at ({x}, {y}) polarity {p:?} has t={t} before the retained {newest}")]
    OutOfOrder {
        x: u16,
        y: u16,
        p: Polarity,
        t: i64,
        newest: i64,
    },
    #[error("frame has {got} pixels, tokenizer expects {expected}")]
    GeometryMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    /// Window length `Δt` in µs.
    pub window_us: i64,
    /// FIFO depth `K`.
    pub fifo_depth: usize,
    /// Maximum lookback `T_M` in µs.
    pub max_lookback_us: i64,
    /// Patch side `P` in pixels.
    pub patch_size: usize,
    /// Activation threshold `m` in percent of patch pixels.
    pub activation_pct: f64,
    pub geometry: SensorGeometry,
}

impl TokenizerConfig {
    /// Event classification defaults: Δt = 24 ms, K = 3, T_M = 256 ms,
    /// P = 10, m = 7.5 %.
    pub fn classification(geometry: SensorGeometry) -> Self {
        Self {
            window_us: 24_000,
            fifo_depth: 3,
            max_lookback_us: 256_000,
            patch_size: 10,
            activation_pct: 7.5,
            geometry,
        }
    }

    /// Dense estimation defaults: Δt = 50 ms, P = 12, otherwise as above.
    pub fn depth(geometry: SensorGeometry) -> Self {
        Self {
            window_us: 50_000,
            patch_size: 12,
            ..Self::classification(geometry)
        }
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        let fail = |m: String| Err(TokenizerError::Config(m));
        if self.window_us <= 0 {
            return fail(format!("window length {} must be positive", self.window_us));
        }
        if self.fifo_depth == 0 {
            return fail("FIFO depth must be at least 1".into());
        }
        if self.max_lookback_us < 2 * self.window_us {
            return fail(format!(
                "max lookback {} must be at least twice the window {}",
                self.max_lookback_us, self.window_us
            ));
        }
        if !(self.activation_pct > 0.0 && self.activation_pct <= 100.0) {
            return fail(format!(
                "activation percent {} outside (0, 100]",
                self.activation_pct
            ));
        }
        let p = self.patch_size;
        let (h, w) = (self.geometry.height as usize, self.geometry.width as usize);
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return fail(format!("sensor {h}x{w} is not divisible by patch size {p}"));
        }
        Ok(())
    }

    /// `T_m = Δt / K`, integer division in µs (the remainder is dropped).
    pub fn min_spacing_us(&self) -> i64 {
        self.window_us / self.fifo_depth as i64
    }

    pub fn grid_rows(&self) -> usize {
        self.geometry.height as usize / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.geometry.width as usize / self.patch_size
    }

    /// `|P|`, the number of patches per frame.
    pub fn total_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// `P²·K·2`.
    pub fn event_token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.fifo_depth * 2
    }

    pub fn image_token_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Whether `count` active pixels reach `m/100 · P²`.
    pub fn is_active(&self, count: usize) -> bool {
        count as f64 * 100.0 >= self.activation_pct * (self.patch_size * self.patch_size) as f64
    }
}

/// Per-pixel, per-polarity queues of retained timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FifoGrid {
    geometry: SensorGeometry,
    depth: usize,
    min_spacing: i64,
    stamps: Vec<i64>,
    lens: Vec<u8>,
    last_hit: Vec<i64>,
}

impl FifoGrid {
    pub fn new(config: &TokenizerConfig) -> Self {
        let cells = config.geometry.pixels();
        assert!(
            config.fifo_depth <= u8::MAX as usize,
            "FIFO depth must fit in u8"
        );
        Self {
            geometry: config.geometry,
            depth: config.fifo_depth,
            min_spacing: config.min_spacing_us(),
            stamps: vec![0; cells * 2 * config.fifo_depth],
            lens: vec![0; cells * 2],
            last_hit: vec![i64::MIN; cells],
        }
    }

    fn queue_index(&self, x: u16, y: u16, p: Polarity) -> usize {
        (y as usize * self.geometry.width as usize + x as usize) * 2 + p.index()
    }

    /// Retained timestamps at `(x, y, p)`, oldest first.
    pub fn queue(&self, x: u16, y: u16, p: Polarity) -> &[i64] {
        let q = self.queue_index(x, y, p);
        let start = q * self.depth;
        &self.stamps[start..start + self.lens[q] as usize]
    }

    /// Timestamp of the most recent event at `(x, y)`, either polarity.
    pub fn last_hit(&self, x: u16, y: u16) -> Option<i64> {
        let t = self.last_hit[y as usize * self.geometry.width as usize + x as usize];
        (t != i64::MIN).then_some(t)
    }

    /// Pushes one event, appending when it is at least `T_m` after the
    /// newest retained timestamp (evicting the oldest at capacity) and
    /// replacing the newest otherwise.
    pub fn push(&mut self, e: &Event) -> Result<(), TokenizerError> {
        if !self.geometry.contains(e.x, e.y) {
            return Err(TokenizerError::OutOfBounds { x: e.x, y: e.y });
        }
        let q = self.queue_index(e.x, e.y, e.p);
        let start = q * self.depth;
        let len = self.lens[q] as usize;
        let slots = &mut self.stamps[start..start + self.depth];
        if len == 0 {
            slots[0] = e.t;
            self.lens[q] = 1;
        } else {
            let newest = slots[len - 1];
            if e.t < newest {
                return Err(TokenizerError::OutOfOrder {
                    x: e.x,
                    y: e.y,
                    p: e.p,
                    t: e.t,
                    newest,
                });
            }
            if e.t - newest < self.min_spacing {
                slots[len - 1] = e.t;
            } else if len < self.depth {
                slots[len] = e.t;
                self.lens[q] += 1;
            } else {
                slots.copy_within(1.., 0);
                slots[self.depth - 1] = e.t;
            }
        }
        self.last_hit[q / 2] = e.t;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.lens.fill(0);
        self.last_hit.fill(i64::MIN);
    }
}

/// Free-function form of [`FifoGrid::push`].
pub fn fifo_push(grid: &mut FifoGrid, event: &Event) -> Result<(), TokenizerError> {
    grid.push(event)
}

/// Normalized recency of a timestamp at window end `t_e`.
#[inline]
pub fn recency(t: i64, t_e: i64, max_lookback_us: i64) -> f64 {
    (((t - (t_e - max_lookback_us)) as f64) / max_lookback_us as f64).clamp(0.0, 1.0)
}

/// `H×W×K×2` recency frame for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRepr {
    pub height: usize,
    pub width: usize,
    pub fifo_depth: usize,
    /// Indexed `[y][x][slot][polarity]`.
    pub values: Vec<f64>,
    pub t_i: i64,
    pub t_e: i64,
    /// Pixels with at least one event in `[t_i, t_e)`.
    pub in_window: Vec<bool>,
}

impl FrameRepr {
    pub fn value(&self, x: usize, y: usize, slot: usize, p: Polarity) -> f64 {
        self.values[((y * self.width + x) * self.fifo_depth + slot) * 2 + p.index()]
    }
}

pub fn build_frame(grid: &FifoGrid, t_i: i64, t_e: i64, max_lookback_us: i64) -> FrameRepr {
    let (h, w) = (grid.geometry.height as usize, grid.geometry.width as usize);
    let k = grid.depth;
    let mut values = vec![0.0; h * w * k * 2];
    for pixel in 0..h * w {
        for p in 0..2 {
            let q = pixel * 2 + p;
            let len = grid.lens[q] as usize;
            for slot in 0..len {
                let t = grid.stamps[q * k + slot];
                values[(pixel * k + slot) * 2 + p] = recency(t, t_e, max_lookback_us);
            }
        }
    }
    let in_window = grid.last_hit.iter().map(|&t| t >= t_i).collect();
    FrameRepr {
        height: h,
        width: w,
        fifo_depth: k,
        values,
        t_i,
        t_e,
        in_window,
    }
}

/// An activated patch with its grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchToken {
    pub row: usize,
    pub col: usize,
    pub data: Vec<f64>,
}

/// The activated tokens of one window, in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<PatchToken>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TokenSet {
    pub fn empty(grid_rows: usize, grid_cols: usize) -> Self {
        Self {
            tokens: Vec::new(),
            grid_rows,
            grid_cols,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `|P|`.
    pub fn total_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Row-major grid cell of every token.
    pub fn cells(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| t.row * self.grid_cols + t.col)
            .collect()
    }
}

fn flatten_patch(frame: &FrameRepr, patch: usize, row: usize, col: usize) -> Vec<f64> {
    let per_pixel = frame.fifo_depth * 2;
    let mut data = Vec::with_capacity(patch * patch * per_pixel);
    for py in 0..patch {
        let y = row * patch + py;
        let start = (y * frame.width + col * patch) * per_pixel;
        data.extend_from_slice(&frame.values[start..start + patch * per_pixel]);
    }
    data
}

pub fn activate_patches(frame: &FrameRepr, config: &TokenizerConfig) -> TokenSet {
    let p = config.patch_size;
    let (rows, cols) = (config.grid_rows(), config.grid_cols());
    let mut tokens = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let count = (0..p)
                .map(|py| {
                    let y = row * p + py;
                    frame.in_window[y * frame.width + col * p..y * frame.width + (col + 1) * p]
                        .iter()
                        .filter(|&&b| b)
                        .count()
                })
                .sum();
            if config.is_active(count) {
                tokens.push(PatchToken {
                    row,
                    col,
                    data: flatten_patch(frame, p, row, col),
                });
            }
        }
    }
    TokenSet {
        tokens,
        grid_rows: rows,
        grid_cols: cols,
    }
}

/// Pushes a window's events, builds its frame and activates patches. The
/// grid keeps its state for the next window.
pub fn tokenize_window(
    grid: &mut FifoGrid,
    window: &Window<'_>,
    config: &TokenizerConfig,
) -> Result<TokenSet, TokenizerError> {
    for e in window.events {
        grid.push(e)?;
    }
    let frame = build_frame(grid, window.t_i, window.t_e, config.max_lookback_us);
    Ok(activate_patches(&frame, config))
}

/// Tokenizes every window of `stream` in `[t_start, t_stop)` with a fresh
/// grid.
pub fn tokenize_stream(
    stream: &EventStream,
    config: &TokenizerConfig,
    t_start: i64,
    t_stop: i64,
) -> Result<Vec<TokenSet>, TokenizerError> {
    config.validate()?;
    let mut grid = FifoGrid::new(config);
    crate::events::slice_windows(stream, config.window_us, t_start, t_stop)
        .iter()
        .map(|w| tokenize_window(&mut grid, w, config))
        .collect()
}

/// Tokenizes a grayscale frame: token data are the `P²` intensities and a
/// patch is active when enough pixels exceed [`IMAGE_ACTIVITY_THRESHOLD`].
pub fn tokenize_image(
    frame: &GrayscaleFrame,
    config: &TokenizerConfig,
) -> Result<TokenSet, TokenizerError> {
    let (h, w) = (
        config.geometry.height as usize,
        config.geometry.width as usize,
    );
    if frame.pixels.len() != h * w {
        return Err(TokenizerError::GeometryMismatch {
            got: frame.pixels.len(),
            expected: h * w,
        });
    }
    let p = config.patch_size;
    let (rows, cols) = (config.grid_rows(), config.grid_cols());
    let mut tokens = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let mut data = Vec::with_capacity(p * p);
            for py in 0..p {
                let y = row * p + py;
                data.extend(
                    frame.pixels[y * w + col * p..y * w + (col + 1) * p]
                        .iter()
                        .map(|&v| v as f64),
                );
            }
            let count = data
                .iter()
                .filter(|&&v| v > IMAGE_ACTIVITY_THRESHOLD)
                .count();
            if config.is_active(count) {
                tokens.push(PatchToken { row, col, data });
            }
        }
    }
    Ok(TokenSet {
        tokens,
        grid_rows: rows,
        grid_cols: cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::slice_windows;

    fn config(h: u16, w: u16, p: usize) -> TokenizerConfig {
        TokenizerConfig {
            window_us: 24_000,
            fifo_depth: 3,
            max_lookback_us: 256_000,
            patch_size: p,
            activation_pct: 7.5,
            geometry: SensorGeometry::new(h, w),
        }
    }

    fn ev(x: u16, y: u16, t: i64) -> Event {
        Event::new(x, y, t, Polarity::Positive)
    }

    #[test]
    fn config_validation() {
        assert!(config(128, 128, 10).validate().is_err());
        assert!(config(120, 130, 10).validate().is_ok());
        let mut c = config(120, 120, 10);
        c.max_lookback_us = 40_000;
        assert!(c.validate().is_err());
        c = config(120, 120, 10);
        c.fifo_depth = 0;
        assert!(c.validate().is_err());
        c = config(120, 120, 10);
        c.activation_pct = 0.0;
        assert!(c.validate().is_err());
        c.activation_pct = 100.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn min_spacing_is_integer_division() {
        let mut c = config(10, 10, 10);
        c.window_us = 50_000;
        assert_eq!(c.min_spacing_us(), 16_666);
    }

    #[test]
    fn fifo_examples() {
        let mut c = config(10, 10, 10);
        c.window_us = 24_000; // T_m = 8000
        let mut g = FifoGrid::new(&c);
        g.push(&ev(0, 0, 100)).unwrap();
        assert_eq!(g.queue(0, 0, Polarity::Positive), &[100]);

        let mut g = FifoGrid::new(&c);
        g.push(&ev(0, 0, 0)).unwrap();
        g.push(&ev(0, 0, 2000)).unwrap();
        assert_eq!(g.queue(0, 0, Polarity::Positive), &[2000]);

        let mut g = FifoGrid::new(&c);
        for t in [0, 10_000, 20_000, 30_000] {
            g.push(&ev(0, 0, t)).unwrap();
        }
        assert_eq!(g.queue(0, 0, Polarity::Positive), &[10_000, 20_000, 30_000]);
        assert!(g.queue(0, 0, Polarity::Negative).is_empty());
        assert_eq!(g.last_hit(0, 0), Some(30_000));
    }

    #[test]
    fn fifo_rejects_out_of_order_per_queue() {
        let c = config(10, 10, 10);
        let mut g = FifoGrid::new(&c);
        g.push(&ev(1, 1, 500)).unwrap();
        assert!(matches!(
            g.push(&ev(1, 1, 499)),
            Err(TokenizerError::OutOfOrder { .. })
        ));
        // another pixel has its own queue
        g.push(&ev(2, 1, 10)).unwrap();
    }

    #[test]
    fn frame_recency_values() {
        let c = config(10, 10, 10);
        let t_e = 300_000;
        let mut g = FifoGrid::new(&c);
        g.push(&ev(0, 0, t_e - 256_000)).unwrap();
        g.push(&ev(1, 0, t_e - 128_000)).unwrap();
        g.push(&ev(2, 0, t_e)).unwrap();
        let f = build_frame(&g, t_e - 24_000, t_e, 256_000);
        assert_eq!(f.value(0, 0, 0, Polarity::Positive), 0.0);
        assert_eq!(f.value(1, 0, 0, Polarity::Positive), 0.5);
        assert_eq!(f.value(2, 0, 0, Polarity::Positive), 1.0);
        assert_eq!(f.value(2, 0, 1, Polarity::Positive), 0.0);
        assert_eq!(f.in_window.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn activation_threshold_counts_pixels() {
        let c = config(10, 10, 10);
        for (n, active) in [(7, false), (8, true)] {
            let mut g = FifoGrid::new(&c);
            let events: Vec<Event> = (0..n).map(|i| ev(i as u16, 0, 1000)).collect();
            let w = Window {
                t_i: 0,
                t_e: 24_000,
                events: &events,
            };
            let ts = tokenize_window(&mut g, &w, &c).unwrap();
            assert_eq!(ts.len(), usize::from(active), "{n} pixels");
        }
    }

    #[test]
    fn empty_frame_has_no_tokens() {
        let c = config(20, 20, 10);
        let g = FifoGrid::new(&c);
        assert!(activate_patches(&build_frame(&g, 0, 24_000, 256_000), &c).is_empty());
    }

    #[test]
    fn stale_events_fill_data_but_do_not_activate() {
        let c = config(10, 10, 10);
        let events: Vec<Event> = (0..10).map(|i| ev(i, 0, 1_000)).collect();
        let s = EventStream::new(c.geometry, events).unwrap();
        let windows = slice_windows(&s, c.window_us, 0, 3 * c.window_us);
        let mut g = FifoGrid::new(&c);
        let first = tokenize_window(&mut g, &windows[0], &c).unwrap();
        assert_eq!(first.len(), 1);
        tokenize_window(&mut g, &windows[1], &c).unwrap();
        let third = tokenize_window(&mut g, &windows[2], &c).unwrap();
        assert!(third.is_empty());
        let frame = build_frame(&g, windows[2].t_i, windows[2].t_e, c.max_lookback_us);
        assert!(frame.value(0, 0, 0, Polarity::Positive) > 0.0);
    }

    #[test]
    fn token_layout_is_pixel_slot_polarity() {
        let c = TokenizerConfig {
            patch_size: 2,
            ..config(2, 4, 2)
        };
        let mut g = FifoGrid::new(&c);
        let events = [
            Event::new(2, 0, 0, Polarity::Negative),
            Event::new(3, 1, 10_000, Polarity::Positive),
            Event::new(3, 1, 20_000, Polarity::Positive),
        ];
        for e in &events {
            g.push(e).unwrap();
        }
        let frame = build_frame(&g, 0, 24_000, c.max_lookback_us);
        let ts = activate_patches(&frame, &c);
        assert_eq!(ts.len(), 1);
        let tok = &ts.tokens[0];
        assert_eq!((tok.row, tok.col), (0, 1));
        let k = c.fifo_depth;
        let idx = |py: usize, px: usize, slot: usize, p: usize| ((py * 2 + px) * k + slot) * 2 + p;
        assert_eq!(tok.data[idx(0, 0, 0, 0)], recency(0, 24_000, 256_000));
        assert_eq!(tok.data[idx(1, 1, 0, 1)], recency(10_000, 24_000, 256_000));
        assert_eq!(tok.data[idx(1, 1, 1, 1)], recency(20_000, 24_000, 256_000));
        assert_eq!(tok.data.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn image_tokens() {
        let c = config(20, 20, 10);
        let black = GrayscaleFrame {
            timestamp: 0,
            pixels: vec![0.0; 400],
        };
        let white = GrayscaleFrame {
            timestamp: 0,
            pixels: vec![1.0; 400],
        };
        assert_eq!(tokenize_image(&black, &c).unwrap().len(), 0);
        let all = tokenize_image(&white, &c).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all.tokens[0].data.len(), 100);
        let half = GrayscaleFrame {
            timestamp: 0,
            pixels: (0..400)
                .map(|i| if i % 20 < 10 { 0.0 } else { 0.7 })
                .collect(),
        };
        let ts = tokenize_image(&half, &c).unwrap();
        assert_eq!(ts.cells(), vec![1, 3]);
        let wrong = GrayscaleFrame {
            timestamp: 0,
            pixels: vec![0.5; 10],
        };
        assert!(tokenize_image(&wrong, &c).is_err());
    }
}
