//! Thread-local floating-point operation counter.
//!
//! Graph forward ops report their cost here: 2 per multiply-add, 1 per
//! exp, divide, sqrt or other elementwise operation. Backward passes are not
//! counted. Counting is always on; reading it is cheap.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Run `f` and return its result with the number of flops it recorded.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
