//! Two-sample discrepancies used in place of perceptual audio metrics.

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// Above this many pooled points the median heuristic uses an evenly
/// strided subset.
const MEDIAN_POINTS: usize = 2000;

fn rows(x: &Tensor, what: &'static str) -> Result<usize> {
    if x.rank() != 2 {
        return Err(Error::shape(
            what,
            format!("expected [N, D] samples, got {:?}", x.shape()),
        ));
    }
    if x.shape()[0] < 2 {
        return Err(Error::invalid(format!(
            "{what} needs at least 2 samples per side, got {}",
            x.shape()[0]
        )));
    }
    Ok(x.shape()[0])
}

fn check_pair(a: &Tensor, b: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    let (n, m) = (rows(a, what)?, rows(b, what)?);
    if a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(
            what,
            format!("dimensions {} vs {}", a.shape()[1], b.shape()[1]),
        ));
    }
    Ok((n, m))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Median pairwise Euclidean distance over the pooled samples.
pub fn median_heuristic(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, m) = check_pair(a, b, "median_heuristic")?;
    let all: Vec<&[f64]> = (0..n)
        .map(|i| a.row(i))
        .chain((0..m).map(|j| b.row(j)))
        .collect();
    let stride = all.len().div_ceil(MEDIAN_POINTS);
    let pts: Vec<&[f64]> = all.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *med > 0.0 {
        Ok(*med)
    } else {
        Err(Error::invalid(
            "median pairwise distance is zero; pass a bandwidth",
        ))
    }
}

/// Unbiased MMD² with the Gaussian kernel `exp(−‖x − y‖² / (2h²))`. The
/// bandwidth `h` defaults to the median heuristic.
pub fn mmd2(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    let (n, m) = check_pair(a, b, "mmd")?;
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth {h} must be > 0"))),
        None => median_heuristic(a, b)?,
    };
    let g = -1.0 / (2.0 * h * h);
    let within = |x: &Tensor, k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                s += (g * sq_dist(x.row(i), x.row(j))).exp();
            }
        }
        2.0 * s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += (g * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    Ok(within(a, n) + within(b, m) - 2.0 * cross / (n * m) as f64)
}

/// `2 E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` with unbiased within-sample terms.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, m) = check_pair(a, b, "energy_distance")?;
    let within = |x: &Tensor, k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                s += sq_dist(x.row(i), x.row(j)).sqrt();
            }
        }
        2.0 * s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += sq_dist(a.row(i), b.row(j)).sqrt();
        }
    }
    Ok(2.0 * cross / (n * m) as f64 - within(a, n) - within(b, m))
}
