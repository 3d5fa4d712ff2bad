use crate::error::Result;

/// Maps `f` over `0..n` and returns the results in index order. `workers`
/// of 0 uses the global pool and 1 runs on the calling thread.
pub(crate) fn ordered_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers != 1 {
            let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
            if workers == 0 {
                return Ok(run());
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| crate::error::invalid(format!("cannot start {workers} workers: {e}")))?;
            return Ok(pool.install(run));
        }
    }
    let _ = workers;
    Ok((0..n).map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let base = ordered_map(1000, 1, |i| (i as f64).sin()).unwrap();
        for w in [0, 2, 4, 8] {
            assert_eq!(ordered_map(1000, w, |i| (i as f64).sin()).unwrap(), base);
        }
    }
}
