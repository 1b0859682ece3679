//! Thread-local multiply-add and memory-read tallies.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static READS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add_macs(n: usize) {
    MACS.with(|c| c.set(c.get() + n as u64));
}

/// Records `n` gathered rows (memory traffic, not arithmetic).
#[inline]
pub(crate) fn add_reads(n: usize) {
    READS.with(|c| c.set(c.get() + n as u64));
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub macs: u64,
    pub reads: u64,
}

pub fn current() -> Tally {
    Tally {
        macs: MACS.with(Cell::get),
        reads: READS.with(Cell::get),
    }
}

/// Runs `f` and returns the multiply-adds and reads it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Tally) {
    let start = current();
    let out = f();
    let end = current();
    (
        out,
        Tally {
            macs: end.macs - start.macs,
            reads: end.reads - start.reads,
        },
    )
}
