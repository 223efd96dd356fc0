//! Thread-local multiply-accumulate counter.
//!
//! Every dense product in [`Matrix`](super::Matrix) adds `rows × inner × cols`
//! to this counter. The FLOPs ledger is checked against it.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Resets the counter of the current thread to zero.
pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// MACs recorded on the current thread since the last [`reset`].
pub fn read() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result together with the MACs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
