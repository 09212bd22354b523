//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numerical code.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adjacent-difference count by index, divided by the pair count.
pub fn rac_oracle(labels: &[u8]) -> f64 {
    let n = labels.len();
    if n <= 1 {
        return 0.0;
    }
    let mut changes = 0u32;
    let mut i = 1;
    while i < n {
        if labels[i] != labels[i - 1] {
            changes += 1;
        }
        i += 1;
    }
    f64::from(changes) / (n - 1) as f64
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Straight double loop over all ordered pairs plus the bag term.
pub fn mil_loss_oracle(
    xs: &[Vec<f64>],
    bags: &[(Vec<usize>, u8)],
    theta: &[f64],
    lambda: f64,
) -> f64 {
    let d = theta.len() - 1;
    let p: Vec<f64> = xs
        .iter()
        .map(|x| {
            let mut z = theta[d];
            for k in 0..d {
                z += theta[k] * x[k];
            }
            logistic(z)
        })
        .collect();
    let n = xs.len() as f64;
    let mut pair = 0.0;
    for i in 0..xs.len() {
        for j in 0..xs.len() {
            let mut sq = 0.0;
            for k in 0..d {
                sq += (xs[i][k] - xs[j][k]) * (xs[i][k] - xs[j][k]);
            }
            let s = (-sq.sqrt()).exp();
            pair += s * (p[i] - p[j]) * (p[i] - p[j]);
        }
    }
    let mut bag = 0.0;
    for (members, label) in bags {
        let a: f64 = members.iter().map(|&i| p[i]).sum::<f64>() / members.len() as f64;
        bag += (a - f64::from(*label)) * (a - f64::from(*label));
    }
    pair / (n * n) + lambda / bags.len() as f64 * bag
}

/// Random MIL instance: `n` sentences in `k` non-empty bags.
pub fn random_mil_instance(
    seed: u64,
    n: usize,
    k: usize,
    d: usize,
) -> (Vec<Vec<f64>>, Vec<(Vec<usize>, u8)>, Vec<f64>) {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let mut members = vec![Vec::new(); k];
    for i in 0..n {
        let b = if i < k { i } else { r.random_range(0..k) };
        members[b].push(i);
    }
    let bags = members
        .into_iter()
        .map(|m| (m, u8::from(r.random_bool(0.5))))
        .collect();
    let theta = (0..=d).map(|_| r.random_range(-2.0..2.0)).collect();
    (xs, bags, theta)
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut up = x.to_vec();
            up[k] += h;
            let mut dn = x.to_vec();
            dn[k] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Gauss–Hermite nodes and weights for `∫ e^{−t²} f(t) dt`, by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn ln_factorial(k: u32) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn binom_loglik(y: u32, n: u32, eta: f64) -> f64 {
    ln_factorial(n) - ln_factorial(y) - ln_factorial(n - y) + f64::from(y) * eta
        - f64::from(n) * softplus(eta)
}

/// Adaptive Gauss–Hermite marginal log-likelihood of the random-intercept
/// binomial model. `x` is row-major and includes the intercept column.
pub fn agq_loglik(
    x: &[Vec<f64>],
    y: &[u32],
    n: &[u32],
    groups: &[usize],
    beta: &[f64],
    sigma2: f64,
    nodes: usize,
) -> f64 {
    let (t, w) = gauss_hermite(nodes);
    let eta: Vec<f64> = x
        .iter()
        .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let ngroups = groups.iter().max().map_or(0, |g| g + 1);
    let mut total = 0.0;
    for g in 0..ngroups {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| groups[i] == g).collect();
        let h = |a: f64| -> f64 {
            rows.iter().map(|&i| binom_loglik(y[i], n[i], eta[i] + a)).sum::<f64>()
                - a * a / (2.0 * sigma2)
        };
        // mode by Newton with analytic derivatives
        let mut a = 0.0;
        let mut curv = 0.0;
        for _ in 0..200 {
            let mut d1 = -a / sigma2;
            let mut d2 = -1.0 / sigma2;
            for &i in &rows {
                let mu = logistic(eta[i] + a);
                d1 += f64::from(y[i]) - f64::from(n[i]) * mu;
                d2 -= f64::from(n[i]) * mu * (1.0 - mu);
            }
            curv = d2;
            let step = -d1 / d2;
            a += step;
            if step.abs() < 1e-14 {
                break;
            }
        }
        let s = (-1.0 / curv).sqrt();
        let terms: Vec<f64> = t
            .iter()
            .zip(&w)
            .map(|(&tk, &wk)| {
                let alpha = a + std::f64::consts::SQRT_2 * s * tk;
                wk.ln() + tk * tk + h(alpha)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += (std::f64::consts::SQRT_2 * s).ln() + lse
            - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
    }
    total
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Plain binomial-logit MLE by Newton–Raphson from zero.
pub fn glm_newton(x: &[Vec<f64>], y: &[u32], n: &[u32]) -> Vec<f64> {
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (i, row) in x.iter().enumerate() {
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = logistic(eta);
            let r = f64::from(y[i]) - f64::from(n[i]) * mu;
            let w = f64::from(n[i]) * mu * (1.0 - mu);
            for a in 0..p {
                g[a] += r * row[a];
                for b in 0..p {
                    h[a][b] += w * row[a] * row[b];
                }
            }
        }
        let step = solve(h, g);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    beta
}

/// Plain binomial-logit log-likelihood including the binomial coefficients.
pub fn glm_loglik(x: &[Vec<f64>], y: &[u32], n: &[u32], beta: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, row)| {
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            binom_loglik(y[i], n[i], eta)
        })
        .sum()
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let m = i64::from(m);
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + i64::from(d) - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}
