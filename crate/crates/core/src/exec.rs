//! Work partitioning.
//!
//! Kernels split their output into jobs and hand them to an [`Executor`]. Every
//! output element is owned by exactly one job and is computed the same way no
//! matter how many workers run the jobs, so results are bit-identical across
//! worker counts.

use alloc::vec::Vec;
use core::cell::UnsafeCell;
use core::sync::atomic::{AtomicBool, Ordering};

/// Runs independent jobs, possibly on several threads.
pub trait Executor: Sync {
    /// Number of workers the executor may use concurrently.
    fn workers(&self) -> usize;

    /// Calls `job(i)` exactly once for every `i` in `0..jobs` and returns after
    /// all calls have completed.
    fn execute(&self, jobs: usize, job: &(dyn Fn(usize) + Sync));
}

/// Runs every job inline on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl Executor for Sequential {
    fn workers(&self) -> usize {
        1
    }

    fn execute(&self, jobs: usize, job: &(dyn Fn(usize) + Sync)) {
        for i in 0..jobs {
            job(i);
        }
    }
}

/// A set of values each of which can be claimed by exactly one job.
struct Slots<T> {
    items: Vec<(AtomicBool, UnsafeCell<Option<T>>)>,
}

// SAFETY: a slot's payload is only touched by the caller that flipped its flag
// from false to true, so no two threads ever access the same cell.
unsafe impl<T: Send> Sync for Slots<T> {}

impl<T> Slots<T> {
    fn new(items: impl IntoIterator<Item = T>) -> Self {
        Self {
            items: items
                .into_iter()
                .map(|v| (AtomicBool::new(false), UnsafeCell::new(Some(v))))
                .collect(),
        }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn take(&self, i: usize) -> T {
        let (claimed, cell) = &self.items[i];
        assert!(
            !claimed.swap(true, Ordering::AcqRel),
            "executor ran job {i} twice"
        );
        // SAFETY: the flag above grants exclusive access to this cell.
        unsafe { (*cell.get()).take().expect("slot already taken") }
    }
}

/// Splits `data` into chunks of `chunk_len` elements (the last may be
/// shorter) and runs `f(chunk_index, chunk)` for each through `exec`.
pub fn for_each_chunk_mut<T: Send>(
    exec: &dyn Executor,
    data: &mut [T],
    chunk_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    if data.is_empty() {
        return;
    }
    let chunk_len = chunk_len.max(1);
    if exec.workers() <= 1 || data.len() <= chunk_len {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
        return;
    }
    let slots = Slots::new(data.chunks_mut(chunk_len));
    exec.execute(slots.len(), &|i| f(i, slots.take(i)));
}

/// Runs `f(i)` for `i` in `0..n` through `exec` and collects the results in
/// index order.
pub fn map_indices<R: Send>(
    exec: &dyn Executor,
    n: usize,
    f: impl Fn(usize) -> R + Sync,
) -> Vec<R> {
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for_each_chunk_mut(exec, &mut out, 1, |i, slot| slot[0] = Some(f(i)));
    out.into_iter()
        .map(|r| r.expect("job produced no result"))
        .collect()
}

/// Rows per job when `rows` output rows are spread over the executor's workers.
pub fn rows_per_job(exec: &dyn Executor, rows: usize) -> usize {
    rows.div_ceil(exec.workers().max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Runs jobs in reverse order to shake out order dependence.
    struct Reverse;

    impl Executor for Reverse {
        fn workers(&self) -> usize {
            3
        }
        fn execute(&self, jobs: usize, job: &(dyn Fn(usize) + Sync)) {
            for i in (0..jobs).rev() {
                job(i);
            }
        }
    }

    #[test]
    fn chunks_are_owned_once() {
        let mut data = alloc::vec![0u32; 10];
        for_each_chunk_mut(&Reverse, &mut data, 3, |i, c| {
            for v in c.iter_mut() {
                *v += i as u32 + 1;
            }
        });
        assert_eq!(data, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn map_keeps_index_order() {
        let v = map_indices(&Reverse, 5, |i| i * i);
        assert_eq!(v, [0, 1, 4, 9, 16]);
    }

    struct Twice;

    impl Executor for Twice {
        fn workers(&self) -> usize {
            2
        }
        fn execute(&self, jobs: usize, job: &(dyn Fn(usize) + Sync)) {
            for i in 0..jobs {
                job(i);
                job(i);
            }
        }
    }

    #[test]
    #[should_panic(expected = "twice")]
    fn double_dispatch_is_caught() {
        let mut data = alloc::vec![0u8; 4];
        for_each_chunk_mut(&Twice, &mut data, 2, |_, c| c[0] = 1);
    }
}
