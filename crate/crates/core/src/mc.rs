//! Monte Carlo plumbing: estimates, deterministic parallel map, U-statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Sample mean with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// Trajectories dropped by the blow-up guard.
    pub aborted: usize,
    pub samples: Option<Vec<f64>>,
}

impl MCEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, std_error) = mean_se(xs);
        Self { mean, std_error, n_samples: xs.len(), aborted: 0, samples: None }
    }

    pub fn retaining(xs: Vec<f64>) -> Self {
        let mut e = Self::from_samples(&xs);
        e.samples = Some(xs);
        e
    }

    /// Deterministic value reported with zero error.
    pub fn exact(value: f64, n: usize) -> Self {
        Self { mean: value, std_error: 0.0, n_samples: n, aborted: 0, samples: None }
    }

    /// `|self - other|` in units of the joint standard error of independent estimates.
    pub fn z_score(&self, other: &MCEstimate) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        let d = (self.mean - other.mean).abs();
        if se == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / se
        }
    }

    pub fn within(&self, target: f64, n_se: f64, tol: f64) -> bool {
        (self.mean - target).abs() <= n_se * self.std_error + tol
    }
}

/// Sample mean and standard error `sd/√n` (sample sd with `n - 1`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Unbiased estimate of `(E Y)²` from i.i.d. samples: `Σ_{i≠j} Y_i Y_j / (R(R-1))`.
pub fn u_stat_square(ys: &[f64]) -> f64 {
    let r = ys.len() as f64;
    let s: f64 = ys.iter().sum();
    let s2: f64 = ys.iter().map(|y| y * y).sum();
    (s * s - s2) / (r * (r - 1.0))
}

/// Unbiased estimate of `E[X] E[Y]` from paired samples of two independent
/// populations indexed together: `Σ_{i≠j} X_i Y_j / (R(R-1))`.
pub fn u_stat_product(xs: &[f64], ys: &[f64]) -> f64 {
    let r = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
    (sx * sy - sxy) / (r * (r - 1.0))
}

/// Runs `f(i)` for `i in 0..n` on the rayon pool and returns results in index
/// order, so any sequential reduction of the output is schedule-independent.
pub fn par_map<T: Send>(n: usize, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..n as u64).into_par_iter().map(f).collect()
}

/// Fallible variant of [`par_map`] that drops blow-up aborts, counts them,
/// and fails when more than `max_abort_frac` of the runs aborted.
pub fn par_map_counting<T: Send>(
    n: usize,
    max_abort_frac: f64,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<(Vec<T>, usize)> {
    let raw = par_map(n, f);
    let mut out = Vec::with_capacity(n);
    let mut aborted = 0;
    for r in raw {
        match r {
            Ok(v) => out.push(v),
            Err(Error::BlowUp { .. }) => aborted += 1,
            Err(e) => return Err(e),
        }
    }
    if aborted as f64 > max_abort_frac * n as f64 {
        return Err(Error::Budget(format!("{aborted} of {n} trajectories aborted by the blow-up guard")));
    }
    Ok((out, aborted))
}

/// Runs `f` inside a dedicated pool with `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Least-squares line `y = a + b x`; returns `(a, b, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (a, b, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!((sample_variance(&[1.0, 2.0, 3.0, 4.0]) - 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn u_statistics_by_brute_force() {
        let ys = [0.3, -1.2, 2.5, 0.7, 1.1];
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    acc += ys[i] * ys[j];
                }
            }
        }
        assert!((u_stat_square(&ys) - acc / 20.0).abs() < 1e-14);
        let xs = [1.0, 0.5, -0.25, 2.0, 3.0];
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    acc += xs[i] * ys[j];
                }
            }
        }
        assert!((u_stat_product(&xs, &ys) - acc / 20.0).abs() < 1e-14);
    }

    #[test]
    fn par_map_is_ordered() {
        let v = with_threads(3, || par_map(100, |i| i * i)).unwrap();
        assert!(v.iter().enumerate().all(|(i, &x)| x == (i * i) as u64));
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.0 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 1.5).abs() < 1e-12 && (b + 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
