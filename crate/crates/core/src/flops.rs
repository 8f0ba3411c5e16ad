//! Thread-local multiply-add counter.
//!
//! Every instrumented kernel adds its nominal operation count here. The
//! counter is per thread, so concurrent test threads and parallel runs never
//! observe each other's work.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Current value of this thread's counter.
pub fn count() -> u64 {
    COUNTER.with(|c| c.get())
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Runs `f` and returns its result together with the number of multiply-adds
/// it recorded. Nested measurements are fine; the outer counter keeps running.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = count();
    let out = f();
    (out, count().wrapping_sub(start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_is_additive() {
        let (_, outer) = measure(|| {
            add(3);
            let (_, inner) = measure(|| add(4));
            assert_eq!(inner, 4);
        });
        assert_eq!(outer, 7);
    }
}
