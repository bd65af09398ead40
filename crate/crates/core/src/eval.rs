//! Dice scoring, test-set evaluation, Welch's t-test and logistic curve fits.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::dqn::predict;
use crate::env::{predicted_mask, Action, Environment};
use crate::imaging::Mask;
use crate::nn::Network;
use crate::{Error, Result};

/// `2|A n B| / (|A| + |B|)`, and 1.0 for two empty masks.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_extents(b) {
        return Err(Error::shape(
            "dice",
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += usize::from(x);
        nb += usize::from(y);
        both += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub image_id: String,
    pub dice: f64,
    /// Action taken (1 or 2) when the row comes from a policy.
    pub action: Option<u8>,
    pub q: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for fewer than two rows.
    pub std: f64,
}

impl DiceReport {
    pub fn from_rows(rows: Vec<DiceRow>) -> Self {
        let n = rows.len();
        let mean = if n == 0 { 0.0 } else { rows.iter().map(|r| r.dice).sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (rows.iter().map(|r| (r.dice - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { rows, mean, std }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.dice).collect()
    }
}

/// A held-out image: its environment (mask pair and fiducial) and annotation.
pub struct TestItem {
    pub env: Environment,
    pub ground_truth: Option<Mask>,
}

/// Dice of the greedy policy's predicted region against ground truth.
/// Items without ground truth are skipped with a warning.
pub fn evaluate_testset(net: &mut Network<f32>, items: &[TestItem]) -> Result<DiceReport> {
    evaluate_with(items, |env| {
        let (action, q) = predict(net, &env.reset().tensor)?;
        Ok((action, Some(q)))
    })
}

/// Dice when every image gets the same fixed action.
pub fn evaluate_forced(items: &[TestItem], action: Action) -> Result<DiceReport> {
    evaluate_with(items, |_| Ok((action, None)))
}

fn evaluate_with(
    items: &[TestItem],
    mut policy: impl FnMut(&Environment) -> Result<(Action, Option<[f64; 2]>)>,
) -> Result<DiceReport> {
    let mut rows = Vec::new();
    for item in items {
        let Some(gt) = &item.ground_truth else {
            warn!("no ground truth for {}; skipped", item.env.pair.image_id);
            continue;
        };
        let (action, q) = policy(&item.env)?;
        let score = dice(predicted_mask(action, &item.env.pair), gt)?;
        rows.push(DiceRow { image_id: item.env.pair.image_id.clone(), dice: score, action: Some(action.number()), q });
    }
    Ok(DiceReport::from_rows(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("each sample needs at least two values".into()));
    }
    let stats = |s: &[f64]| {
        let n = s.len() as f64;
        let m = s.iter().sum::<f64>() / n;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 <= 0.0 || !se2.is_finite() {
        return Err(Error::InvalidArgument("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).min(1.0);
    Ok(WelchResult { t, df, p })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Refinement did not settle; parameters are the grid optimum.
    NotConverged,
    /// Flat data; `k` and `x0` are not identifiable.
    Degenerate,
}

/// `f(x) = l / (1 + exp(-k (x - x0)))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub l: f64,
    pub k: f64,
    pub x0: f64,
    pub rss: f64,
    pub status: FitStatus,
}

impl SigmoidFit {
    pub fn eval(&self, x: f64) -> f64 {
        logistic(self.l, self.k, self.x0, x)
    }
}

fn logistic(l: f64, k: f64, x0: f64, x: f64) -> f64 {
    l / (1.0 + (-k * (x - x0)).exp())
}

fn rss(points: &[(f64, f64)], l: f64, k: f64, x0: f64) -> f64 {
    points.iter().map(|&(x, y)| (logistic(l, k, x0, x) - y).powi(2)).sum()
}

/// Best `l` in `[0, 1]` for fixed `k`, `x0` (linear least squares, clamped).
fn best_l(points: &[(f64, f64)], k: f64, x0: f64) -> f64 {
    let (mut gy, mut gg) = (0.0, 0.0);
    for &(x, y) in points {
        let g = logistic(1.0, k, x0, x);
        gy += g * y;
        gg += g * g;
    }
    if gg == 0.0 {
        0.0
    } else {
        (gy / gg).clamp(0.0, 1.0)
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

pub const SIGMOID_MAX_ITERATIONS: usize = 200;

/// Least-squares logistic fit: coarse grid over `(k, x0)` with the closed-form
/// `l`, then damped Gauss-Newton refinement.
pub fn fit_sigmoid(points: &[(f64, f64)]) -> Result<SigmoidFit> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("non-finite curve point".into()));
    }
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    let span = (xmax - xmin).max(1.0);

    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for ki in 0..40 {
        let mag = 0.1 / span * 1000f64.powf(ki as f64 / 39.0);
        for k in [mag, -mag] {
            for xi in 0..=80 {
                let x0 = xmin - span / 2.0 + 2.0 * span * xi as f64 / 80.0;
                let l = best_l(points, k, x0);
                let r = rss(points, l, k, x0);
                if r < best.0 {
                    best = (r, l, k, x0);
                }
            }
        }
    }
    let (grid_rss, gl, gk, gx0) = best;
    let grid = SigmoidFit { l: gl, k: gk, x0: gx0, rss: grid_rss, status: FitStatus::NotConverged };

    let ymean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    if points.iter().all(|p| (p.1 - ymean).abs() < 1e-12) {
        return Ok(SigmoidFit { status: FitStatus::Degenerate, ..grid });
    }

    let (mut l, mut k, mut x0, mut cur) = (gl, gk, gx0, grid_rss);
    let mut lambda = 1e-3;
    for _ in 0..SIGMOID_MAX_ITERATIONS {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for &(x, y) in points {
            let g = logistic(1.0, k, x0, x);
            let d = l * g * (1.0 - g);
            let j = [g, d * (x - x0), -d * k];
            let r = l * g - y;
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let Some(step) = solve3(m, [-jtr[0], -jtr[1], -jtr[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let (nl, nk, nx0) = ((l + step[0]).clamp(0.0, 1.0), k + step[1], x0 + step[2]);
            let next = rss(points, nl, nk, nx0);
            if next.is_finite() && next <= cur {
                let small = step.iter().all(|s| s.abs() < 1e-12) || cur - next <= 1e-15 * cur.max(1e-300);
                (l, k, x0) = (nl, nk, nx0);
                cur = next;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if small || cur < 1e-28 {
                    return Ok(SigmoidFit { l, k, x0, rss: cur, status: FitStatus::Converged });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left: a stationary point
            return Ok(SigmoidFit { l, k, x0, rss: cur, status: FitStatus::Converged });
        }
    }
    Ok(grid)
}
