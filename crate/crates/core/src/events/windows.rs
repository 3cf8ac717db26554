use super::{Event, EventStream};

/// One half-open time window `[t_i, t_e)` and the events inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    pub t_i: i64,
    pub t_e: i64,
    pub events: &'a [Event],
}

/// Splits `[t_start, t_stop)` into `floor((t_stop - t_start) / dt)` contiguous
/// windows of length `dt`. A trailing partial window is dropped, so the
/// windows cover `[t_start, t_start + n * dt)` and partition the events
/// falling in that span.
///
/// # Panics
///
/// Panics if `dt_us <= 0`.
pub fn slice_windows(
    stream: &EventStream,
    dt_us: i64,
    t_start: i64,
    t_stop: i64,
) -> Vec<Window<'_>> {
    assert!(dt_us > 0, "window length must be positive");
    let n = if t_stop > t_start {
        (t_stop - t_start) / dt_us
    } else {
        0
    };
    let events = &stream.events[..];
    let mut lo = events.partition_point(|e| e.t < t_start);
    (0..n)
        .map(|k| {
            let t_i = t_start + k * dt_us;
            let t_e = t_i + dt_us;
            let hi = lo + events[lo..].partition_point(|e| e.t < t_e);
            let w = Window {
                t_i,
                t_e,
                events: &events[lo..hi],
            };
            lo = hi;
            w
        })
        .collect()
}
