//! Execution-mode dispatch for the data-parallel inner loops.
//!
//! Every parallel site maps independent items (slices, volumes, batch
//! chunks) and collects results in index order, so `Parallel` and
//! `Sequential` produce bitwise-identical output. The `parallel` cargo
//! feature compiles the rayon path; without it both modes run
//! sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

impl ExecMode {
    pub fn from_reference_flag(reference: bool) -> Self {
        if reference {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => map_parallel(n, f),
    }
}

#[cfg(feature = "parallel")]
fn map_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_in_order() {
        let a = map_indexed(ExecMode::Parallel, 100, |i| i * i);
        let b = map_indexed(ExecMode::Sequential, 100, |i| i * i);
        assert_eq!(a, b);
    }
}
