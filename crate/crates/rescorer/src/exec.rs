//! Thread-backed executor.

use std::sync::atomic::{AtomicUsize, Ordering};

use rescorer_core::Executor;

/// Runs jobs on `threads` scoped OS threads (the caller counts as one).
/// Jobs are claimed from a shared counter, so any worker may run any job;
/// the kernels are written so that this never changes results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadExecutor {
    threads: usize,
}

impl ThreadExecutor {
    /// `None` when `threads` is zero.
    pub fn new(threads: usize) -> Option<Self> {
        (threads >= 1).then_some(Self { threads })
    }
}

impl Executor for ThreadExecutor {
    fn workers(&self) -> usize {
        self.threads
    }

    fn execute(&self, jobs: usize, job: &(dyn Fn(usize) + Sync)) {
        let helpers = self.threads.min(jobs).saturating_sub(1);
        if helpers == 0 {
            (0..jobs).for_each(job);
            return;
        }
        let next = AtomicUsize::new(0);
        let run = || loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            if i >= jobs {
                break;
            }
            job(i);
        };
        std::thread::scope(|s| {
            for _ in 0..helpers {
                s.spawn(run);
            }
            run();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn every_job_runs_once() {
        let seen = Mutex::new(vec![0u32; 37]);
        ThreadExecutor::new(3).unwrap().execute(37, &|i| seen.lock().unwrap()[i] += 1);
        assert!(seen.into_inner().unwrap().iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_threads_is_rejected() {
        assert!(ThreadExecutor::new(0).is_none());
    }

    #[test]
    fn matmul_is_bit_identical_across_thread_counts() {
        use rescorer_core::tensor::matmul_with;
        use rescorer_core::Tensor;
        let a = Tensor::<f32>::from_fn(&[37, 70], |i| ((i * 31 % 17) as f32 - 8.0) * 0.13);
        let b = Tensor::<f32>::from_fn(&[70, 101], |i| ((i * 7 % 23) as f32 - 11.0) * 0.07);
        let one = matmul_with(&ThreadExecutor::new(1).unwrap(), &a, &b).unwrap();
        for t in 2..5 {
            assert_eq!(matmul_with(&ThreadExecutor::new(t).unwrap(), &a, &b).unwrap(), one);
        }
    }
}
