//! Small statistics toolbox: compensated sums, error bars, autocorrelation,
//! resampling and a tiny least-squares solver.

use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn ksum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut k = KahanSum::new();
    for x in xs {
        k.add(x);
    }
    k.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    ksum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    ksum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64
}

/// Value with a one-standard-deviation error bar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub err: f64,
}

impl Estimate {
    pub fn new(value: f64, err: f64) -> Self {
        Estimate { value, err }
    }
}

/// Integrated autocorrelation time with Sokal's automatic window (c = 6).
/// Returns 0.5 for uncorrelated data.
pub fn autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 0.5;
    }
    let m = mean(xs);
    let c0 = ksum(xs.iter().map(|x| (x - m) * (x - m))) / n as f64;
    if c0 <= 0.0 {
        return 0.5;
    }
    let mut tau = 0.5;
    for t in 1..n / 2 {
        let ct = ksum((0..n - t).map(|i| (xs[i] - m) * (xs[i + t] - m))) / (n - t) as f64;
        tau += ct / c0;
        if (t as f64) >= 6.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

/// Effective number of independent samples.
pub fn effective_samples(xs: &[f64]) -> f64 {
    xs.len() as f64 / (2.0 * autocorrelation_time(xs))
}

/// Blocked jackknife for a statistic of a series. The series is cut into
/// `blocks` contiguous blocks; leave-one-block-out estimates give the error.
pub fn jackknife<F>(xs: &[f64], blocks: usize, stat: F) -> Estimate
where
    F: Fn(&[f64]) -> f64,
{
    let n = xs.len();
    let b = blocks.min(n).max(2);
    let full = stat(xs);
    let size = n / b;
    let mut reps = Vec::with_capacity(b);
    let mut buf = Vec::with_capacity(n);
    for k in 0..b {
        buf.clear();
        buf.extend_from_slice(&xs[..k * size]);
        buf.extend_from_slice(&xs[((k + 1) * size).min(n)..]);
        reps.push(stat(&buf));
    }
    let rm = mean(&reps);
    let var = ksum(reps.iter().map(|r| (r - rm) * (r - rm))) * (b - 1) as f64 / b as f64;
    Estimate::new(full, var.sqrt())
}

/// Standard error of the mean of a correlated series (via τ_int).
pub fn mean_with_error(xs: &[f64]) -> Estimate {
    let m = mean(xs);
    let tau = autocorrelation_time(xs);
    let err = (variance(xs) * 2.0 * tau / xs.len() as f64).sqrt();
    Estimate::new(m, err)
}

/// Bootstrap standard error of a statistic over i.i.d. samples.
pub fn bootstrap<F>(xs: &[f64], reps: usize, rng: &mut RngStream, stat: F) -> Estimate
where
    F: Fn(&[f64]) -> f64,
{
    let full = stat(xs);
    let n = xs.len();
    let mut buf = vec![0.0; n];
    let mut vals = Vec::with_capacity(reps);
    for _ in 0..reps {
        for b in buf.iter_mut() {
            *b = xs[rng.below(n)];
        }
        vals.push(stat(&buf));
    }
    Estimate::new(full, variance(&vals).sqrt())
}

pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = ksum(xs.iter().map(|x| (x - m).powi(2))) / n;
    let m3 = ksum(xs.iter().map(|x| (x - m).powi(3))) / n;
    m3 / m2.powf(1.5)
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = ksum(xs.iter().map(|x| (x - m).powi(2))) / n;
    let m4 = ksum(xs.iter().map(|x| (x - m).powi(4))) / n;
    m4 / (m2 * m2) - 3.0
}

/// Total-variation distance between two distributions on the same index set.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * ksum(p.iter().zip(q).map(|(a, b)| (a - b).abs()))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wilson score interval for a binomial proportion (z = 1.96).
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let den = 1.0 + z * z / nf;
    let c = (p + z * z / (2.0 * nf)) / den;
    let h = z * ((p * (1.0 - p) + z * z / (4.0 * nf)) / nf).sqrt() / den;
    ((c - h).max(0.0), (c + h).min(1.0))
}

/// Weighted linear least squares. `rows[i]` are regressors, `w[i]` weights.
/// Returns coefficients and their covariance matrix (scaled by the
/// reduced chi-square when `scale_by_chi2`).
pub fn weighted_lstsq(
    rows: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    scale_by_chi2: bool,
) -> Option<(Vec<f64>, Vec<Vec<f64>>, f64)> {
    let p = rows.first()?.len();
    let n = rows.len();
    if n < p {
        return None;
    }
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for i in 0..n {
        for r in 0..p {
            b[r] += w[i] * rows[i][r] * y[i];
            for c in 0..p {
                a[r][c] += w[i] * rows[i][r] * rows[i][c];
            }
        }
    }
    let inv = invert(&a)?;
    let coef: Vec<f64> = (0..p).map(|r| (0..p).map(|c| inv[r][c] * b[c]).sum()).collect();
    let chi2: f64 = (0..n)
        .map(|i| {
            let f: f64 = (0..p).map(|c| rows[i][c] * coef[c]).sum();
            w[i] * (y[i] - f) * (y[i] - f)
        })
        .sum();
    let dof = (n - p).max(1) as f64;
    let s = if scale_by_chi2 { (chi2 / dof).max(1.0) } else { 1.0 };
    let cov = inv.iter().map(|row| row.iter().map(|v| v * s).collect()).collect();
    Some((coef, cov, chi2))
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|r| r[n..].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut xs = vec![1e16, 1.0, -1e16];
        xs.extend(std::iter::repeat(1e-3).take(1000));
        assert!((ksum(xs) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_recovers_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        let (c, _, chi2) = weighted_lstsq(&rows, &y, &[1.0; 10], false).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] + 0.5).abs() < 1e-12);
        assert!(chi2 < 1e-20);
    }

    #[test]
    fn iid_series_has_short_autocorrelation() {
        let mut r = RngStream::new(5, 0);
        let xs: Vec<f64> = (0..20000).map(|_| r.uniform()).collect();
        let t = autocorrelation_time(&xs);
        assert!(t < 0.7, "{t}");
        let j = jackknife(&xs, 20, mean);
        assert!((j.value - 0.5).abs() < 4.0 * j.err);
    }

    #[test]
    fn moments_of_symmetric_sample() {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert!(skewness(&xs).abs() < 1e-15);
        assert!((excess_kurtosis(&xs) + 1.3).abs() < 1e-12);
    }
}
