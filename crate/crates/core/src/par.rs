//! Order-preserving parallel map over independent items.
//!
//! Heavy per-item work (decoding a branch, scoring a rollout, grading an
//! eval task) is embarrassingly parallel over a frozen parameter snapshot.
//! Items are computed on scoped threads and collected back *by index*, and
//! any floating-point reduction happens afterwards in index order on the
//! caller's thread — so results are identical for every thread count,
//! including 1.
//!
//! The worker count defaults to the machine's available parallelism and can
//! be pinned via [`set_thread_count`] (the CLI wires this to an environment
//! variable).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Pin the worker count for all subsequent [`par_map`] calls.
///
/// Returns false if a count was already fixed (first caller wins).
pub fn set_thread_count(n: usize) -> bool {
    THREADS.set(n.max(1)).is_ok()
}

/// The worker count in effect.
pub fn thread_count() -> usize {
    *THREADS.get_or_init(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Map `f` over `items`, preserving order. `f` receives `(index, item)`.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = thread_count().min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let slots_ptr = SlotsPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let f = &f;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                // Safety: each index is claimed exactly once via the atomic
                // counter, so no two threads write the same slot, and the
                // scope guarantees the buffer outlives every worker.
                unsafe { *slots_ptr.0.add(i) = Some(r) };
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

struct SlotsPtr<R>(*mut Option<R>);
// Safety: workers write disjoint indices only (enforced by the atomic
// counter) and the owning Vec outlives the thread scope.
unsafe impl<R: Send> Sync for SlotsPtr<R> {}
unsafe impl<R: Send> Send for SlotsPtr<R> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_and_values() {
        let items: Vec<u64> = (0..257).collect();
        let out = par_map(&items, |i, &x| {
            assert_eq!(i as u64, x);
            x * x
        });
        let expect: Vec<u64> = items.iter().map(|x| x * x).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn empty_and_singleton() {
        let empty: Vec<u32> = vec![];
        assert!(par_map(&empty, |_, &x| x).is_empty());
        assert_eq!(par_map(&[41u32], |_, &x| x + 1), vec![42]);
    }
}
