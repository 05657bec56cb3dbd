//! Multiply-accumulate tally for the executed kernels.
//!
//! Counting is off unless a closure runs under [`count_macs`]. The
//! accumulator is thread-local, so concurrent runs on different threads never
//! see each other's counts.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns its result with the number of MACs its kernels executed.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let counted = MACS.with(|m| m.replace(outer)).unwrap_or(0);
    if let Some(outer) = outer {
        MACS.with(|m| m.set(Some(outer + counted)));
    }
    (out, counted)
}

#[inline]
pub(crate) fn tally(n: usize) {
    MACS.with(|m| {
        if let Some(c) = m.get() {
            m.set(Some(c + n as u64));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_roll_up() {
        let ((_, inner), outer) = count_macs(|| {
            tally(3);
            count_macs(|| tally(4))
        });
        assert_eq!(inner, 4);
        assert_eq!(outer, 7);
        tally(100);
        assert_eq!(count_macs(|| ()).1, 0);
    }
}
