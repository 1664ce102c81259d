//! Opt-in tally of convolution FLOPs (2 x multiply-accumulates) performed
//! on the current thread.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(flops: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + flops));
        }
    });
}

/// Runs `f` and returns its result together with the convolution FLOPs it
/// executed. Nested calls are not supported.
pub fn trace<T>(f: impl FnOnce() -> T) -> (T, u64) {
    COUNTER.with(|c| c.set(Some(0)));
    let out = f();
    let total = COUNTER.with(|c| c.replace(None)).unwrap_or(0);
    (out, total)
}
