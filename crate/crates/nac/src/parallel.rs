//! Minimal deterministic fan-out over independent work items.
//!
//! The worker count is capped by the `NAC_THREADS` environment variable
//! (default: available parallelism). Results are placed by item index, so
//! the output never depends on scheduling.

pub const THREADS_ENV: &str = "NAC_THREADS";

pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n.min(available),
            _ => available,
        },
        Err(_) => available,
    }
}

/// Map `f` over `0..n` with up to `worker_count()` threads. `f` must be
/// pure per index; outputs land at their index regardless of scheduling.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slice) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + off));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled every slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_ordered_by_index() {
        let got = par_map_indexed(23, |i| i * i);
        let want: Vec<usize> = (0..23).map(|i| i * i).collect();
        assert_eq!(got, want);
    }
}
