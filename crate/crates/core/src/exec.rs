//! Data-parallel map over independent jobs, with a sequential fallback when
//! the `parallel` feature is off or a single job is requested.

/// Runs independent indexed jobs on `jobs` worker threads (0 = all cores).
#[derive(Debug)]
pub struct Executor {
    jobs: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn new(jobs: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let pool = if jobs == 1 {
                None
            } else {
                rayon::ThreadPoolBuilder::new().num_threads(jobs).build().ok()
            };
            Self { jobs, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { jobs }
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// `(0..len).map(f)` with results in index order.
    pub fn map<T, F>(&self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..len).into_par_iter().map(&f).collect());
        }
        (0..len).map(f).collect()
    }

    /// Applies `f` to every element in place.
    pub fn for_each_mut<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            pool.install(|| items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x)));
            return;
        }
        items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::new(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        for jobs in [1, 0, 3] {
            let out = Executor::new(jobs).map(100, |i| i * i);
            assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn for_each_mut_touches_every_item() {
        let mut v = vec![1usize; 37];
        Executor::new(0).for_each_mut(&mut v, |i, x| *x += i);
        assert_eq!(v[36], 37);
    }
}
