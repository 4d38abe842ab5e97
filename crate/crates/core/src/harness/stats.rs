//! Small statistics helpers for sweeps and paired comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{config_err, Result};

/// Least-squares fit `y = a + Σ b_i x_i` with per-coefficient confidence
/// intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    /// Standard errors of the slopes (NaN without residual degrees of freedom).
    pub slope_se: Vec<f64>,
    /// Half-width of the two-sided interval at `level`.
    pub half_width: Vec<f64>,
    pub level: f64,
    pub r_squared: f64,
}

/// Ordinary least squares with an intercept. `xs[i]` is the regressor row of
/// observation `i`.
pub fn ols(xs: &[Vec<f64>], ys: &[f64], level: f64) -> Result<LinearFit> {
    let n = ys.len();
    if xs.len() != n || n == 0 {
        return Err(config_err("fit: regressors and responses differ in length"));
    }
    let p = xs[0].len() + 1;
    if n < p {
        return Err(config_err(format!("fit: {n} points cannot determine {p} coefficients")));
    }
    let row = |i: usize| std::iter::once(1.0).chain(xs[i].iter().copied());
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let r: Vec<f64> = row(i).collect();
        for a in 0..p {
            xty[a] += r[a] * ys[i];
            for b in 0..p {
                xtx[a][b] += r[a] * r[b];
            }
        }
    }
    let inv = invert(xtx).ok_or_else(|| config_err("fit: regressors are collinear"))?;
    let beta: Vec<f64> = (0..p).map(|a| (0..p).map(|b| inv[a][b] * xty[b]).sum()).collect();

    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sse, mut sst) = (0.0, 0.0);
    for i in 0..n {
        let fit: f64 = row(i).zip(&beta).map(|(a, b)| a * b).sum();
        sse += (ys[i] - fit).powi(2);
        sst += (ys[i] - mean_y).powi(2);
    }
    let dof = n - p;
    let (se, hw): (Vec<f64>, Vec<f64>) = if dof == 0 {
        (vec![f64::NAN; p - 1], vec![f64::NAN; p - 1])
    } else {
        let s2 = sse / dof as f64;
        let t = StudentsT::new(0.0, 1.0, dof as f64)
            .map_err(|e| config_err(e.to_string()))?
            .inverse_cdf(0.5 + level / 2.0);
        (1..p)
            .map(|a| {
                let se = (s2 * inv[a][a]).sqrt();
                (se, t * se)
            })
            .unzip()
    };
    Ok(LinearFit {
        intercept: beta[0],
        slopes: beta[1..].to_vec(),
        slope_se: se,
        half_width: hw,
        level,
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
    })
}

fn invert(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let p = a.len();
    let mut inv: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| f64::from(i == j)).collect()).collect();
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, piv);
        inv.swap(c, piv);
        let d = a[c][c];
        for j in 0..p {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in 0..p {
            if i != c {
                let f = a[i][c];
                for j in 0..p {
                    a[i][j] -= f * a[c][j];
                    inv[i][j] -= f * inv[c][j];
                }
            }
        }
    }
    Some(inv)
}

/// One-sided sign test of "first is smaller" over paired samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Bin(wins + losses, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

pub fn sign_test(first: &[f64], second: &[f64]) -> Result<SignTest> {
    if first.len() != second.len() {
        return Err(config_err("sign test: samples are not paired"));
    }
    let wins = first.iter().zip(second).filter(|(a, b)| a < b).count();
    let losses = first.iter().zip(second).filter(|(a, b)| a > b).count();
    let ties = first.len() - wins - losses;
    let trials = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, trials as u64).map_err(|e| config_err(e.to_string()))?;
        bin.sf(wins as u64 - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
