//! Batch-level data parallelism.
//!
//! Samples are independent through the whole network, so batches fan out
//! one sample per task. With the `parallel` feature this uses rayon;
//! without it, or with [`Executor::Sequential`], samples run in order on
//! the calling thread. Results always come back in input order, so both
//! paths produce bitwise-identical outputs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Executor {
    Sequential,
    #[default]
    Parallel,
}

impl Executor {
    /// Whether this build can actually run tasks concurrently.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Executor::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    /// Fallible map; the first error in input order wins.
    pub fn try_map<I, O, E, F>(self, items: &[I], f: F) -> Result<Vec<O>, E>
    where
        I: Sync,
        O: Send,
        E: Send,
        F: Fn(usize, &I) -> Result<O, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_executors_preserve_order() {
        let xs: Vec<u64> = (0..257).collect();
        let seq = Executor::Sequential.map(&xs, |i, &x| x * 3 + i as u64);
        let par = Executor::Parallel.map(&xs, |i, &x| x * 3 + i as u64);
        assert_eq!(seq, par);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, String> =
            Executor::Parallel.try_map(&xs, |_, &x| if x >= 3 { Err(format!("bad {x}")) } else { Ok(x) });
        assert_eq!(r.unwrap_err(), "bad 3");
    }
}
