//! Virtual or wall-clock time in microseconds since an arbitrary epoch.

pub type Timestamp = u64;
pub type Micros = u64;

pub const MILLI: Micros = 1_000;
pub const SECOND: Micros = 1_000_000;

pub const fn millis(ms: u64) -> Micros {
    ms * MILLI
}

pub const fn secs(s: u64) -> Micros {
    s * SECOND
}

pub fn as_secs_f64(t: Micros) -> f64 {
    t as f64 / SECOND as f64
}
