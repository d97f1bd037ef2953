//! Nonparametric statistics: Mann-Whitney U, bootstrap standard errors and
//! Spearman rank correlation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// `x` is stochastically smaller than `y`.
    Less,
    /// `x` is stochastically greater than `y`.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTest {
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Largest pooled sample size for which tie-free p-values are exact.
pub const EXACT_MAX_N: usize = 10;

/// One-sided Mann-Whitney U test of `x` against `y`.
///
/// `U = R_x − n_x(n_x+1)/2` with midranks. Exact (full null distribution)
/// when `n_x + n_y ≤ 10` and there are no ties; otherwise the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(x: &[f64], y: &[f64], alternative: Alternative) -> Result<UTest> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("mann_whitney_u needs non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Input("mann_whitney_u received NaN".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rx: f64 = ranks[..nx].iter().sum();
    let u = rx - (nx * (nx + 1)) as f64 / 2.0;
    if nx + ny <= EXACT_MAX_N && ties.is_empty() {
        let p = exact_p(u.round() as usize, nx, ny, alternative);
        return Ok(UTest { u, p, exact: true });
    }
    Ok(UTest { u, p: normal_p(u, nx, ny, &ties, alternative), exact: false })
}

/// Number of rank subsets of size `nx` out of `nx + ny` giving each U value
/// (no ties); index `u` in `0..=nx*ny`.
pub fn u_null_counts(nx: usize, ny: usize) -> Vec<f64> {
    // counts[i][j][u]: ways with i x-values and j y-values. Recurse on whether
    // the largest remaining element is an x (adds j to U) or a y.
    let max_u = nx * ny;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; ny + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for _i in 1..=nx {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; ny + 1];
        cur[0][0] = 1.0;
        for j in 1..=ny {
            for u in 0..=max_u {
                let mut v = cur[j - 1][u];
                if u >= j {
                    v += prev[j][u - j];
                }
                cur[j][u] = v;
            }
        }
        prev = cur;
    }
    prev[ny].clone()
}

fn exact_p(u: usize, nx: usize, ny: usize, alternative: Alternative) -> f64 {
    let counts = u_null_counts(nx, ny);
    let total: f64 = counts.iter().sum();
    let tail: f64 = match alternative {
        Alternative::Less => counts[..=u.min(nx * ny)].iter().sum(),
        Alternative::Greater => counts[u.min(nx * ny)..].iter().sum(),
    };
    tail / total
}

fn normal_p(u: f64, nx: usize, ny: usize, ties: &[usize], alternative: Alternative) -> f64 {
    let (nxf, nyf) = (nx as f64, ny as f64);
    let n = nxf + nyf;
    let mu = nxf * nyf / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = nxf * nyf / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    match alternative {
        Alternative::Less => std_normal.cdf((u - mu + 0.5) / sd),
        Alternative::Greater => std_normal.sf((u - mu - 0.5) / sd),
    }
    .clamp(0.0, 1.0)
}

/// Normal-approximation p-value regardless of sample size (exposed for
/// cross-checking against the exact distribution).
pub fn mann_whitney_u_approx(x: &[f64], y: &[f64], alternative: Alternative) -> Result<UTest> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("mann_whitney_u needs non-empty samples".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let u = ranks[..x.len()].iter().sum::<f64>() - (x.len() * (x.len() + 1)) as f64 / 2.0;
    Ok(UTest { u, p: normal_p(u, x.len(), y.len(), &ties, alternative), exact: false })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than 2 values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Standard deviation of `resamples` bootstrap means.
pub fn bootstrap_se(values: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Input("bootstrap_se needs at least 2 values".into()));
    }
    if resamples < 2 {
        return Err(Error::Input("bootstrap_se needs at least 2 resamples".into()));
    }
    let mut rng = seed::rng(seed, &[0xb007]);
    let n = values.len();
    let means: Vec<f64> = (0..resamples).map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64).collect();
    Ok(std_dev(&means))
}

/// Spearman rank correlation (Pearson on midranks). `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, _) = midranks(x);
    let (ry, _) = midranks(y);
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Brute-force oracle: enumerate every assignment of pooled ranks to x.
    fn enumerate_p(x: &[f64], y: &[f64], alt: Alternative) -> f64 {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let (ranks, _) = midranks(&pooled);
        let n = pooled.len();
        let nx = x.len();
        let u_obs: f64 = ranks[..nx].iter().sum::<f64>() - (nx * (nx + 1)) as f64 / 2.0;
        let (mut hits, mut total) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            if mask.count_ones() as usize != nx {
                continue;
            }
            let rs: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            let u = rs - (nx * (nx + 1)) as f64 / 2.0;
            total += 1;
            let hit = match alt {
                Alternative::Less => u <= u_obs + 1e-9,
                Alternative::Greater => u >= u_obs - 1e-9,
            };
            hits += hit as u64;
        }
        hits as f64 / total as f64
    }

    #[test]
    fn two_by_two_enumeration() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::Less).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 1.0 / 6.0).abs() < 1e-12);
        let g = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0], Alternative::Greater).unwrap();
        assert!((g.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_multisets_midranks() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Alternative::Less).unwrap();
        assert_eq!(r.u, 4.5);
        assert!(!r.exact);
        assert!(r.p >= 0.5);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..40 {
            let nx = 1 + trial % 5;
            let ny = 1 + (trial / 5) % 5;
            let x: Vec<f64> = (0..nx).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..ny).map(|_| StandardNormal.sample(&mut rng)).collect();
            for alt in [Alternative::Less, Alternative::Greater] {
                let r = mann_whitney_u(&x, &y, alt).unwrap();
                assert!(r.exact);
                assert!((r.p - enumerate_p(&x, &y, alt)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn approximation_close_to_enumeration_at_8_8() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..8).map(|_| 0.5 + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let approx = mann_whitney_u_approx(&x, &y, Alternative::Less).unwrap();
            let exact = enumerate_p(&x, &y, Alternative::Less);
            assert!((approx.p - exact).abs() <= 0.01, "{} vs {exact}", approx.p);
        }
    }

    #[test]
    fn empty_rejected() {
        assert!(mann_whitney_u(&[], &[1.0], Alternative::Less).is_err());
    }

    #[test]
    fn bootstrap_behaviour() {
        assert_eq!(bootstrap_se(&[2.0; 10], 200, 1).unwrap(), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for s in 0..5 {
            let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            let se = bootstrap_se(&v, 1000, s).unwrap();
            assert!((se - 0.1).abs() < 0.03, "{se}");
            assert_eq!(se, bootstrap_se(&v, 1000, s).unwrap());
        }
        assert!(bootstrap_se(&[1.0], 10, 0).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 1.0]), None);
    }
}
