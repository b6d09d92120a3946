//! Wall-clock abstraction so timing can be injected from a `std` host.

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances; timings come out as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}
