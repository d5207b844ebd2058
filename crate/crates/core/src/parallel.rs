//! Data-parallel loops with a sequential fallback.
//!
//! With the `parallel` feature the `Parallel` mode runs on the current rayon
//! pool; without it every mode runs sequentially. Work items never share
//! mutable state and reductions stay sequential, so results do not depend on
//! the mode or the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Calls `f(i, chunk_i, state_i)` for every fixed-size chunk of `data`
/// paired with `states[i]`. A zero chunk size passes empty chunks.
pub fn for_each_chunk<S, F>(exec: Execution, data: &mut [f64], chunk: usize, states: &mut [S], f: F)
where
    S: Send,
    F: Fn(usize, &mut [f64], &mut S) + Sync + Send,
{
    if chunk == 0 {
        run_states(exec, states, |i, s| f(i, &mut [], s));
        return;
    }
    debug_assert_eq!(data.len(), chunk * states.len());
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(chunk)
            .zip(states.par_iter_mut())
            .enumerate()
            .for_each(|(i, (c, s))| f(i, c, s));
        return;
    }
    data.chunks_mut(chunk)
        .zip(states.iter_mut())
        .enumerate()
        .for_each(|(i, (c, s))| f(i, c, s));
}

fn run_states<S, F>(exec: Execution, states: &mut [S], f: F)
where
    S: Send,
    F: Fn(usize, &mut S) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        states.par_iter_mut().enumerate().for_each(|(i, s)| f(i, s));
        return;
    }
    let _ = exec;
    states.iter_mut().enumerate().for_each(|(i, s)| f(i, s));
}

/// `f(i, chunk_i)` for each chunk, collected in order.
pub fn map_chunks<T, F>(exec: Execution, data: &[f64], chunk: usize, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[f64]) -> T + Sync + Send,
{
    if chunk == 0 {
        return map_range(exec, count, |i| f(i, &[]));
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return data
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// `f(i)` for `i in 0..n`, collected in order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
