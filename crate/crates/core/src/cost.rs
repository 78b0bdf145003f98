//! Floating-point operation accounting.
//!
//! Numerical kernels report their multiply-add counts to a thread-local
//! counter. Callers bracket a region with [`measure`] to attribute work to
//! a phase (constraint build, per-step enforcement, correction).

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` floating-point operations to the current thread's counter.
#[inline]
pub fn add(n: u64) {
    FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Current value of the thread-local counter.
pub fn current() -> u64 {
    FLOPS.with(Cell::get)
}

/// Runs `f` and returns its result with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = current();
    let out = f();
    (out, current().wrapping_sub(start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_measurement_accumulates() {
        let (_, outer) = measure(|| {
            add(3);
            let (_, inner) = measure(|| add(5));
            assert_eq!(inner, 5);
        });
        assert_eq!(outer, 8);
    }
}
