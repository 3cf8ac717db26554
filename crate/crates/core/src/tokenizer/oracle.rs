//! Reference tokenizer that recomputes a window from the full event history.
//!
//! The streaming FIFO always ends up holding the newest event of each
//! "burst" at a pixel/polarity, where bursts are separated by gaps of at
//! least `T_m` between consecutive events. The oracle uses that closed form:
//! split the history into bursts, keep the last event of each, and retain
//! the last `K` of those.

use std::collections::BTreeMap;

use super::{recency, PatchToken, TokenSet, TokenizerConfig};
use crate::events::Event;

/// Tokens of window `window_index` (windows start at `t_start`), computed by
/// direct scan over `all_events`.
pub fn naive_tokenize_oracle(
    all_events: &[Event],
    config: &TokenizerConfig,
    t_start: i64,
    window_index: usize,
) -> TokenSet {
    let t_i = t_start + window_index as i64 * config.window_us;
    let t_e = t_i + config.window_us;
    let spacing = config.min_spacing_us();
    let k = config.fifo_depth;
    let w = config.geometry.width as usize;

    let mut history: BTreeMap<(usize, usize, usize), Vec<i64>> = BTreeMap::new();
    let mut fresh = vec![false; config.geometry.pixels()];
    for e in all_events.iter().filter(|e| e.t >= t_start && e.t < t_e) {
        history
            .entry((e.y as usize, e.x as usize, e.p.index()))
            .or_default()
            .push(e.t);
        if e.t >= t_i {
            fresh[e.y as usize * w + e.x as usize] = true;
        }
    }

    let mut retained: BTreeMap<(usize, usize, usize), Vec<i64>> = BTreeMap::new();
    for (key, ts) in &history {
        let mut burst_ends = Vec::new();
        for (j, &t) in ts.iter().enumerate() {
            let last_of_burst = match ts.get(j + 1) {
                Some(&next) => next - t >= spacing,
                None => true,
            };
            if last_of_burst {
                burst_ends.push(t);
            }
        }
        let keep = burst_ends.len().saturating_sub(k);
        retained.insert(*key, burst_ends[keep..].to_vec());
    }

    let p = config.patch_size;
    let mut tokens = Vec::new();
    for row in 0..config.grid_rows() {
        for col in 0..config.grid_cols() {
            let mut count = 0;
            let mut data = vec![0.0; config.event_token_dim()];
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (row * p + py, col * p + px);
                    if fresh[y * w + x] {
                        count += 1;
                    }
                    for pol in 0..2 {
                        if let Some(ts) = retained.get(&(y, x, pol)) {
                            for (slot, &t) in ts.iter().enumerate() {
                                data[((py * p + px) * k + slot) * 2 + pol] =
                                    recency(t, t_e, config.max_lookback_us);
                            }
                        }
                    }
                }
            }
            if count as f64 * 100.0 >= config.activation_pct * (p * p) as f64 {
                tokens.push(PatchToken { row, col, data });
            }
        }
    }
    TokenSet {
        tokens,
        grid_rows: config.grid_rows(),
        grid_cols: config.grid_cols(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{slice_windows, EventStream, Polarity, SensorGeometry};
    use crate::tokenizer::{tokenize_window, FifoGrid};
    use proptest::prelude::*;

    fn cfg(p: usize, k: usize, pct: f64) -> TokenizerConfig {
        TokenizerConfig {
            window_us: 24_000,
            fifo_depth: k,
            max_lookback_us: 256_000,
            patch_size: p,
            activation_pct: pct,
            geometry: SensorGeometry::new(20, 20),
        }
    }

    #[test]
    fn empty_history_gives_no_tokens() {
        assert!(naive_tokenize_oracle(&[], &cfg(10, 3, 7.5), 0, 0).is_empty());
    }

    #[test]
    fn single_event_activates_only_below_one_pixel_threshold() {
        let e = [Event::new(3, 4, 5, Polarity::Positive)];
        assert!(naive_tokenize_oracle(&e, &cfg(10, 3, 7.5), 0, 0).is_empty());
        let ts = naive_tokenize_oracle(&e, &cfg(10, 3, 1.0), 0, 0);
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.cells(), vec![0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn streaming_matches_oracle(
            raw in proptest::collection::vec((0u16..10, 0u16..10, 0i64..200_000, any::<bool>()), 0..400),
            k in 1usize..5,
        ) {
            let mut raw = raw;
            raw.sort_by_key(|r| r.2);
            let events: Vec<Event> = raw
                .into_iter()
                .map(|(x, y, t, p)| Event::new(x, y, t, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect();
            let c = TokenizerConfig { geometry: SensorGeometry::new(10, 10), ..cfg(5, k, 4.0) };
            let s = EventStream::new(c.geometry, events).unwrap();
            let mut grid = FifoGrid::new(&c);
            for (i, w) in slice_windows(&s, c.window_us, 0, 200_000).iter().enumerate() {
                let fast = tokenize_window(&mut grid, w, &c).unwrap();
                prop_assert_eq!(fast, naive_tokenize_oracle(&s.events, &c, 0, i));
            }
        }
    }
}
