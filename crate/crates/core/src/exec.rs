//! Execution strategy for independent ensemble tasks.
//!
//! With the `parallel` feature (on by default) tasks are spread over the
//! rayon thread pool. Results are always collected in task order, so the
//! strategy never changes the numbers that come out.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

impl Execution {
    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}

/// Mixes a base seed with a path of indices into a well-spread 64-bit seed.
///
/// Uses the splitmix64 finalizer on each step so neighbouring indices give
/// unrelated streams.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    state
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
