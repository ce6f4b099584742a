//! Four-parameter logistic remapping of model scores onto opinion scores.

use crate::error::{Error, Result};

/// `f(D) = (η1 − η2) / (1 + exp(−(D − η3) / |η4|)) + η2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticParams {
    pub eta: [f64; 4],
}

impl LogisticParams {
    pub fn predict(&self, d: f64) -> f64 {
        let [e1, e2, e3, e4] = self.eta;
        (e1 - e2) / (1.0 + (-(d - e3) / e4.abs()).exp()) + e2
    }

    /// Sum of squared residuals against `mos`.
    pub fn sse(&self, d: &[f64], mos: &[f64]) -> f64 {
        d.iter().zip(mos).map(|(&x, &y)| (self.predict(x) - y).powi(2)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticFit {
    pub params: LogisticParams,
    pub initial: LogisticParams,
    /// Sum of squared residuals at `params`.
    pub residual: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Least-squares logistic fit by Nelder–Mead simplex search, started from
/// `η = (max mos, min mos, median D, std D)` and restarted around the best
/// point until restarts stop helping.
pub fn logistic_fit(d: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    if d.len() != mos.len() {
        return Err(Error::shape(format!("{} model scores for {} opinion scores", d.len(), mos.len())));
    }
    if d.len() < 4 {
        return Err(Error::Fit("the logistic fit needs at least four points".into()));
    }
    if d.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::Fit("scores must be finite".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::Fit("model scores are all equal".into()));
    }
    let hi = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = mos.iter().copied().fold(f64::INFINITY, f64::min);
    // η1 is the limit at large D, so start on the side the data slopes to
    let mos_mean = mos.iter().sum::<f64>() / n;
    let cov: f64 = d.iter().zip(mos).map(|(x, y)| (x - mean) * (y - mos_mean)).sum();
    let (far, near) = if cov >= 0.0 { (hi, lo) } else { (lo, hi) };
    let initial = LogisticParams {
        eta: [far, near, median(d), std],
    };
    let objective = |e: &[f64; 4]| {
        if e[3] == 0.0 {
            return f64::INFINITY;
        }
        let v = LogisticParams { eta: *e }.sse(d, mos);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let scale = [(hi - lo).abs().max(1e-3), (hi - lo).abs().max(1e-3), std, std];
    let mut best = initial.eta;
    let mut best_f = objective(&best);
    for round in 0..50 {
        let shrink = 0.1f64.powi((round % 5) as i32);
        let steps = scale.map(|s| s * shrink);
        let (x, f) = nelder_mead(&objective, best, steps, 4000);
        let improved = f < best_f;
        if improved {
            best = x;
            best_f = f;
        }
        if !improved && round >= 5 {
            break;
        }
    }
    best[3] = best[3].abs();
    Ok(LogisticFit {
        params: LogisticParams { eta: best },
        initial,
        residual: best_f,
    })
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction ½,
/// shrink ½). Returns the best vertex.
fn nelder_mead<F: Fn(&[f64; 4]) -> f64>(f: &F, start: [f64; 4], steps: [f64; 4], max_iter: usize) -> ([f64; 4], f64) {
    let mut pts: Vec<[f64; 4]> = vec![start];
    for i in 0..4 {
        let mut p = start;
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(f).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[4] - vals[0]).abs() <= 1e-15 * vals[0].abs().max(1e-300) {
            break;
        }
        let mut c = [0.0; 4];
        for p in &pts[..4] {
            for k in 0..4 {
                c[k] += p[k] / 4.0;
            }
        }
        let along = |t: f64| {
            let mut p = [0.0; 4];
            for k in 0..4 {
                p[k] = c[k] + t * (pts[4][k] - c[k]);
            }
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[4] = xe;
                vals[4] = fe;
            } else {
                pts[4] = xr;
                vals[4] = fr;
            }
        } else if fr < vals[3] {
            pts[4] = xr;
            vals[4] = fr;
        } else {
            let (xc, fc) = if fr < vals[4] {
                let x = along(-0.5);
                (x, f(&x))
            } else {
                let x = along(0.5);
                (x, f(&x))
            };
            if fc < vals[4].min(fr) {
                pts[4] = xc;
                vals[4] = fc;
            } else {
                for i in 1..5 {
                    for k in 0..4 {
                        pts[i][k] = pts[0][k] + 0.5 * (pts[i][k] - pts[0][k]);
                    }
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let i = (0..5).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (pts[i], vals[i])
}
