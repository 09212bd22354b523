//! Binomial logit model with a random intercept per product.
//!
//! ```text
//! logit(pᵢ) = xᵢᵀβ + α_{g(i)},   α_g ~ N(0, σ²),   yᵢ ~ Binomial(nᵢ, pᵢ)
//! ```
//!
//! The marginal likelihood is integrated over each `α_g` with the Laplace
//! approximation. For group `g` with mode `α̂` of
//! `h(α) = Σᵢ ℓᵢ(ηᵢ + α) − α²/(2σ²)`:
//!
//! ```text
//! log L_g ≈ h(α̂) − ½ log(1 + σ² W(α̂)),   W(α) = Σᵢ nᵢ μᵢ (1 − μᵢ)
//! ```
//!
//! The objective is maximized over `(β, log σ²)` by damped Newton steps. The
//! gradient is analytic (including the dependence of `α̂` on the parameters);
//! the Hessian is a central difference of that gradient and, at the optimum,
//! doubles as the observed information for standard errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mil::sigmoid;
use crate::textfeats::{FeatureTable, Regressor};

pub const INTERCEPT: &str = "Intercept";
pub const INTERACTION: &str = "RLength x RAC";

/// Boundary threshold: smaller variance estimates are reported as 0.
const SIGMA2_BOUNDARY: f64 = 1e-10;
const SEPARATION_ETA: f64 = 30.0;
/// 97.5% standard normal quantile.
const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

impl ColumnStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Centers each column and scales it to unit sample standard deviation
/// (`n − 1` denominator).
pub fn zstandardize<S: AsRef<str>>(
    columns: &[(S, Vec<f64>)],
) -> Result<(Vec<Vec<f64>>, Vec<ColumnStats>)> {
    let mut out = Vec::with_capacity(columns.len());
    let mut stats = Vec::with_capacity(columns.len());
    for (name, col) in columns {
        let name = name.as_ref();
        if col.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "column `{name}` needs at least two rows to standardize"
            )));
        }
        let (mean, sd) = mean_sd(col);
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(sd > 1e-12 * scale) || !sd.is_finite() {
            return Err(Error::ConstantColumn(name.to_string()));
        }
        let s = ColumnStats {
            name: name.to_string(),
            mean,
            sd,
        };
        out.push(col.iter().map(|&x| s.apply(x)).collect());
        stats.push(s);
    }
    Ok((out, stats))
}

/// Which covariates enter the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub regressors: Vec<Regressor>,
    /// Adds `RLength x RAC`; ignored unless both parents are present.
    pub interaction: bool,
    /// Standardize the interaction column itself after multiplying the
    /// standardized parents.
    pub standardize_interaction: bool,
}

impl ModelSpec {
    /// Controls only.
    pub fn controls() -> Self {
        use Regressor::*;
        ModelSpec {
            regressors: vec![PAvg, PType, RAge, RCog, REmo, RRead, RStars],
            interaction: false,
            standardize_interaction: true,
        }
    }

    /// Nested model by letter: `a` controls, `b` + RLength, `c` + RAC,
    /// `d` + interaction.
    pub fn nested(label: char) -> Option<Self> {
        let mut s = Self::controls();
        match label {
            'a' => {}
            'b' => s.regressors.push(Regressor::RLength),
            'c' | 'd' => {
                s.regressors.extend([Regressor::RLength, Regressor::RAC]);
                s.interaction = label == 'd';
            }
            _ => return None,
        }
        Some(s)
    }

    pub fn without(mut self, r: Regressor) -> Self {
        self.regressors.retain(|&x| x != r);
        self
    }

    fn has_interaction(&self) -> bool {
        self.interaction
            && self.regressors.contains(&Regressor::RLength)
            && self.regressors.contains(&Regressor::RAC)
    }
}

/// Standardized fixed-effect design with product grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    /// Column names; the intercept comes first.
    pub names: Vec<String>,
    /// `n × p`.
    pub x: DMatrix<f64>,
    /// Standardization of every non-intercept column.
    pub stats: Vec<ColumnStats>,
    /// Dense group index per row.
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
}

impl DesignMatrix {
    /// Assembles a design from raw parts. `columns` exclude the intercept,
    /// which is prepended.
    pub fn from_columns(
        columns: Vec<(String, Vec<f64>)>,
        group_labels: &[String],
        stats: Vec<ColumnStats>,
    ) -> Result<Self> {
        let n = group_labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("design has no rows".into()));
        }
        if let Some((name, c)) = columns.iter().find(|(_, c)| c.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "column `{name}` has {} rows, expected {n}",
                c.len()
            )));
        }
        let p = columns.len() + 1;
        let mut x = DMatrix::from_element(n, p, 1.0);
        for (j, (_, c)) in columns.iter().enumerate() {
            x.column_mut(j + 1).copy_from_slice(c);
        }
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(columns.into_iter().map(|(n, _)| n));
        let mut index: BTreeMap<&str, usize> = group_labels.iter().map(|g| (g.as_str(), 0)).collect();
        for (k, v) in index.values_mut().enumerate() {
            *v = k;
        }
        let groups = group_labels.iter().map(|g| index[g.as_str()]).collect();
        let group_names = index.keys().map(|s| s.to_string()).collect();
        Ok(DesignMatrix {
            names,
            x,
            stats,
            groups,
            group_names,
        })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.x.column(j).iter().copied().collect())
    }
}

/// Standardizes the selected covariates and appends the interaction.
pub fn build_design(table: &FeatureTable, spec: &ModelSpec) -> Result<DesignMatrix> {
    let distinct: std::collections::BTreeSet<&str> =
        table.product_ids.iter().map(String::as_str).collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!(
            "random intercepts need at least two products, found {}",
            distinct.len()
        )));
    }
    let mut regs = spec.regressors.clone();
    regs.sort();
    regs.dedup();
    let raw: Vec<(&str, Vec<f64>)> = regs
        .iter()
        .map(|r| (r.name(), table.column(*r).to_vec()))
        .collect();
    let (std_cols, mut stats) = zstandardize(&raw)?;
    let mut columns: Vec<(String, Vec<f64>)> = regs
        .iter()
        .map(|r| r.name().to_string())
        .zip(std_cols)
        .collect();
    if spec.has_interaction() {
        let get = |r: Regressor| &columns[regs.iter().position(|&x| x == r).unwrap()].1;
        let product: Vec<f64> = get(Regressor::RLength)
            .iter()
            .zip(get(Regressor::RAC))
            .map(|(a, b)| a * b)
            .collect();
        if spec.standardize_interaction {
            let (mut c, mut s) = zstandardize(&[(INTERACTION, product)])?;
            columns.push((INTERACTION.to_string(), c.remove(0)));
            stats.push(s.remove(0));
        } else {
            columns.push((INTERACTION.to_string(), product));
            stats.push(ColumnStats {
                name: INTERACTION.into(),
                mean: 0.0,
                sd: 1.0,
            });
        }
    }
    DesignMatrix::from_columns(columns, &table.product_ids, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    Estimate,
    /// Hold σ² at the given value; 0 removes the random intercept.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Euclidean norm of the objective gradient at convergence.
    pub tol: f64,
    pub max_iter: usize,
    pub variance: VarianceMode,
    /// Starting value of σ² when it is estimated.
    pub sigma2_start: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-8,
            max_iter: 200,
            variance: VarianceMode::Estimate,
            sigma2_start: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Covariance of `beta` (inverse observed information, β block).
    pub cov: Vec<Vec<f64>>,
    pub sigma2_alpha: f64,
    /// Standard error of `log σ²` when estimated away from the boundary.
    pub log_sigma2_se: Option<f64>,
    pub alpha_modes: Vec<f64>,
    pub group_names: Vec<String>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// σ² estimate fell below the boundary threshold and was set to 0.
    pub boundary: bool,
    pub n_obs: usize,
    pub warnings: Vec<String>,
}

impl GlmmFit {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let j = self.names.iter().position(|n| n == name)?;
        Some((self.beta[j], self.se[j]))
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn ln_choose(n: u32, k: u32) -> f64 {
    let (n, k) = (f64::from(n), f64::from(k));
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: Vec<f64>,
    n: Vec<f64>,
    members: Vec<Vec<usize>>,
    ln_binom: f64,
}

struct Evaluation {
    value: f64,
    grad_beta: DVector<f64>,
    grad_tau: f64,
    modes: Vec<f64>,
    max_abs_eta: f64,
}

impl<'a> Problem<'a> {
    fn new(design: &'a DesignMatrix, helpful: &[u32], total: &[u32]) -> Result<Self> {
        let rows = design.rows();
        if helpful.len() != rows || total.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{rows} design rows but {} / {} responses",
                helpful.len(),
                total.len()
            )));
        }
        for (i, (&h, &t)) in helpful.iter().zip(total).enumerate() {
            if t == 0 {
                return Err(Error::Validation(format!("row {i} has no votes")));
            }
            if h > t {
                return Err(Error::Validation(format!(
                    "row {i}: {h} helpful votes exceed {t} total"
                )));
            }
        }
        if let Some(g) = design.groups.iter().find(|&&g| g >= design.num_groups()) {
            return Err(Error::InvalidArgument(format!("group index {g} out of range")));
        }
        let mut members = vec![Vec::new(); design.num_groups()];
        for (i, &g) in design.groups.iter().enumerate() {
            members[g].push(i);
        }
        Ok(Problem {
            x: &design.x,
            y: helpful.iter().map(|&v| f64::from(v)).collect(),
            n: total.iter().map(|&v| f64::from(v)).collect(),
            members,
            ln_binom: helpful.iter().zip(total).map(|(&h, &t)| ln_choose(t, h)).sum(),
        })
    }

    fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Mode of `h(α)` for one group: safeguarded Newton inside a bracket.
    fn mode(&self, eta: &DVector<f64>, rows: &[usize], sigma2: f64) -> f64 {
        let inv = 1.0 / sigma2;
        let ntot: f64 = rows.iter().map(|&i| self.n[i]).sum();
        let mut lo = -(sigma2 * ntot + 1.0);
        let mut hi = sigma2 * ntot + 1.0;
        let mut a = 0.0f64;
        for _ in 0..200 {
            let mut g = -a * inv;
            let mut d = inv;
            for &i in rows {
                let mu = sigmoid(eta[i] + a);
                g += self.y[i] - self.n[i] * mu;
                d += self.n[i] * mu * (1.0 - mu);
            }
            if g > 0.0 {
                lo = a;
            } else {
                hi = a;
            }
            if g == 0.0 {
                break;
            }
            let mut next = a + g / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = next - a;
            a = next;
            if step.abs() <= 1e-14 * (1.0 + a.abs()) || hi - lo <= 1e-15 * (1.0 + a.abs()) {
                break;
            }
        }
        a
    }

    /// Laplace objective and gradient. `sigma2 == 0` drops the random intercept.
    fn evaluate(&self, beta: &DVector<f64>, sigma2: f64) -> Evaluation {
        let eta = self.x * beta;
        let mut value = self.ln_binom;
        let mut grad_tau = 0.0;
        let mut coef = vec![0.0; eta.len()];
        let mut modes = vec![0.0; self.members.len()];
        let mut max_abs_eta = 0.0f64;

        for (g, rows) in self.members.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            if sigma2 <= 0.0 {
                for &i in rows {
                    let e = eta[i];
                    value += self.y[i] * e - self.n[i] * softplus(e);
                    coef[i] = self.y[i] - self.n[i] * sigmoid(e);
                    max_abs_eta = max_abs_eta.max(e.abs());
                }
                continue;
            }
            let a = self.mode(&eta, rows, sigma2);
            modes[g] = a;
            let mut w_sum = 0.0;
            let mut dw_sum = 0.0;
            for &i in rows {
                let e = eta[i] + a;
                let mu = sigmoid(e);
                let w = self.n[i] * mu * (1.0 - mu);
                value += self.y[i] * e - self.n[i] * softplus(e);
                w_sum += w;
                dw_sum += w * (1.0 - 2.0 * mu);
                max_abs_eta = max_abs_eta.max(e.abs());
            }
            let one_plus = 1.0 + sigma2 * w_sum;
            value -= 0.5 * a * a / sigma2 + 0.5 * one_plus.ln();
            let d = w_sum + 1.0 / sigma2;
            let c = 0.5 * sigma2 / one_plus;
            let shift = c * dw_sum / d;
            for &i in rows {
                let mu = sigmoid(eta[i] + a);
                let w = self.n[i] * mu * (1.0 - mu);
                coef[i] = self.y[i] - self.n[i] * mu - c * w * (1.0 - 2.0 * mu) + shift * w;
            }
            grad_tau += 0.5 * a * a / sigma2 - 0.5 * (sigma2 * w_sum + dw_sum * a / d) / one_plus;
        }
        let grad_beta = self.x.tr_mul(&DVector::from_vec(coef));
        Evaluation {
            value,
            grad_beta,
            grad_tau,
            modes,
            max_abs_eta,
        }
    }

    /// Laplace log-likelihood at given modes, without re-solving for them.
    fn value_at_modes(&self, beta: &DVector<f64>, sigma2: f64, modes: &[f64]) -> f64 {
        let eta = self.x * beta;
        let mut value = self.ln_binom;
        for (g, rows) in self.members.iter().enumerate() {
            let a = if sigma2 > 0.0 { modes[g] } else { 0.0 };
            let mut w_sum = 0.0;
            for &i in rows {
                let e = eta[i] + a;
                let mu = sigmoid(e);
                value += self.y[i] * e - self.n[i] * softplus(e);
                w_sum += self.n[i] * mu * (1.0 - mu);
            }
            if sigma2 > 0.0 && !rows.is_empty() {
                value -= 0.5 * a * a / sigma2 + 0.5 * (1.0 + sigma2 * w_sum).ln();
            }
        }
        value
    }
}

/// Parameter vector layout for the outer optimizer.
#[derive(Clone, Copy)]
enum Params {
    /// β only, σ² held fixed.
    Beta(f64),
    /// β followed by log σ².
    BetaTau,
}

impl Params {
    fn split(self, phi: &DVector<f64>, p: usize) -> (DVector<f64>, f64) {
        match self {
            Params::Beta(s2) => (phi.rows(0, p).into_owned(), s2),
            Params::BetaTau => (phi.rows(0, p).into_owned(), phi[p].exp()),
        }
    }

    fn gradient(self, e: &Evaluation) -> DVector<f64> {
        match self {
            Params::Beta(_) => e.grad_beta.clone(),
            Params::BetaTau => {
                let p = e.grad_beta.len();
                let mut g = DVector::zeros(p + 1);
                g.rows_mut(0, p).copy_from(&e.grad_beta);
                g[p] = e.grad_tau;
                g
            }
        }
    }
}

struct Optimum {
    phi: DVector<f64>,
    eval: Evaluation,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn eval_params(problem: &Problem, params: Params, phi: &DVector<f64>) -> (Evaluation, DVector<f64>) {
    let (beta, s2) = params.split(phi, problem.p());
    let e = problem.evaluate(&beta, s2);
    let g = params.gradient(&e);
    (e, g)
}

/// Negative Hessian of the objective by central differences of the gradient.
fn information(problem: &Problem, params: Params, phi: &DVector<f64>) -> DMatrix<f64> {
    let k = phi.len();
    let mut h = DMatrix::zeros(k, k);
    for j in 0..k {
        let step = 1e-5 * phi[j].abs().max(1.0);
        let mut up = phi.clone();
        up[j] += step;
        let mut down = phi.clone();
        down[j] -= step;
        let gu = eval_params(problem, params, &up).1;
        let gd = eval_params(problem, params, &down).1;
        let col = (gd - gu) / (2.0 * step);
        h.column_mut(j).copy_from(&col);
    }
    (&h + h.transpose()) * 0.5
}

fn solve_pd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut ridge = 0.0;
    loop {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(b);
        }
        ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
        if ridge > 1e12 * scale {
            return b / scale;
        }
    }
}

const MAX_STEP: f64 = 5.0;
/// Relative resolution of the objective value.
const VALUE_NOISE: f64 = 1e-13;

fn maximize(
    problem: &Problem,
    params: Params,
    mut phi: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Optimum {
    let (mut eval, mut grad) = eval_params(problem, params, &phi);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        if grad.norm() < tol {
            converged = true;
            break;
        }
        let info = information(problem, params, &phi);
        let mut dir = solve_pd(&info, &grad);
        let big = dir.amax();
        if big > MAX_STEP {
            dir *= MAX_STEP / big;
        }
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &phi + &dir * t;
            let (e, g) = eval_params(problem, params, &cand);
            if !e.value.is_finite() {
                t *= 0.5;
                continue;
            }
            let sufficient = e.value >= eval.value + 1e-4 * t * slope;
            // near the optimum the objective stops resolving the predicted
            // gain; fall back to requiring a smaller gradient
            let flat = e.value >= eval.value - VALUE_NOISE * (1.0 + eval.value.abs())
                && g.norm() < grad.norm();
            if sufficient || flat {
                accepted = Some((cand, e, g));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((cand, e, g)) => {
                phi = cand;
                eval = e;
                grad = g;
            }
            None => break,
        }
    }
    if !converged && grad.norm() < tol {
        converged = true;
    }
    Optimum {
        grad_norm: grad.norm(),
        phi,
        eval,
        iterations,
        converged,
    }
}

/// Laplace log-likelihood and group modes at given parameters.
pub fn laplace_loglik(
    design: &DesignMatrix,
    helpful: &[u32],
    total: &[u32],
    beta: &[f64],
    sigma2: f64,
) -> Result<(f64, Vec<f64>)> {
    let problem = Problem::new(design, helpful, total)?;
    if beta.len() != problem.p() {
        return Err(Error::DimensionMismatch {
            expected: problem.p(),
            actual: beta.len(),
        });
    }
    let e = problem.evaluate(&DVector::from_column_slice(beta), sigma2);
    Ok((e.value, e.modes))
}

/// Gradient of [`laplace_loglik`] with respect to `β` and `log σ²`.
pub fn laplace_gradient(
    design: &DesignMatrix,
    helpful: &[u32],
    total: &[u32],
    beta: &[f64],
    sigma2: f64,
) -> Result<(Vec<f64>, f64)> {
    let problem = Problem::new(design, helpful, total)?;
    let e = problem.evaluate(&DVector::from_column_slice(beta), sigma2);
    Ok((e.grad_beta.iter().copied().collect(), e.grad_tau))
}

/// Recomputes the log-likelihood from the fit's stored `β`, `σ²` and modes.
pub fn loglik(fit: &GlmmFit, design: &DesignMatrix, helpful: &[u32], total: &[u32]) -> Result<f64> {
    let problem = Problem::new(design, helpful, total)?;
    Ok(problem.value_at_modes(
        &DVector::from_column_slice(&fit.beta),
        fit.sigma2_alpha,
        &fit.alpha_modes,
    ))
}

fn initial_beta(problem: &Problem) -> DVector<f64> {
    let ys: f64 = problem.y.iter().sum();
    let ns: f64 = problem.n.iter().sum();
    let rate = ((ys + 0.5) / (ns + 1.0)).clamp(1e-6, 1.0 - 1e-6);
    let mut b = DVector::zeros(problem.p());
    b[0] = (rate / (1.0 - rate)).ln();
    b
}

fn invert_info(info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    info.clone().cholesky().map(|c| c.inverse())
}

/// Maximum-likelihood fit of the random-intercept binomial model.
///
/// Non-convergence is reported through `converged` and `warnings`, not as
/// an error.
pub fn fit(
    design: &DesignMatrix,
    helpful: &[u32],
    total: &[u32],
    config: &FitConfig,
) -> Result<GlmmFit> {
    let problem = Problem::new(design, helpful, total)?;
    let p = problem.p();
    let mut warnings = Vec::new();

    // fixed-effects start: plain logistic fit
    let glm = maximize(
        &problem,
        Params::Beta(0.0),
        initial_beta(&problem),
        config.tol,
        config.max_iter,
    );

    let (mut opt, mut params) = match config.variance {
        VarianceMode::Fixed(s2) if s2 < 0.0 || !s2.is_finite() => {
            return Err(Error::Config(format!("fixed variance must be >= 0, got {s2}")))
        }
        VarianceMode::Fixed(0.0) => (glm, Params::Beta(0.0)),
        VarianceMode::Fixed(s2) => {
            let o = maximize(&problem, Params::Beta(s2), glm.phi, config.tol, config.max_iter);
            (o, Params::Beta(s2))
        }
        VarianceMode::Estimate => {
            let mut start = DVector::zeros(p + 1);
            start.rows_mut(0, p).copy_from(&glm.phi);
            start[p] = config.sigma2_start.max(1e-8).ln();
            let o = maximize(&problem, Params::BetaTau, start, config.tol, config.max_iter);
            (o, Params::BetaTau)
        }
    };

    let mut boundary = false;
    if let Params::BetaTau = params {
        if opt.phi[p].exp() < SIGMA2_BOUNDARY {
            boundary = true;
            let beta = opt.phi.rows(0, p).into_owned();
            let iters = opt.iterations;
            opt = maximize(&problem, Params::Beta(0.0), beta, config.tol, config.max_iter);
            opt.iterations += iters;
            params = Params::Beta(0.0);
            warnings.push("random-intercept variance estimated at the boundary (0)".into());
        }
    }

    let (beta, sigma2) = params.split(&opt.phi, p);
    let info = information(&problem, params, &opt.phi);
    let (cov, log_sigma2_se) = match invert_info(&info) {
        Some(inv) => {
            let tau_se = match params {
                Params::BetaTau => Some(inv[(p, p)].sqrt()),
                Params::Beta(_) => None,
            };
            (inv.view((0, 0), (p, p)).into_owned(), tau_se)
        }
        None => {
            warnings.push("observed information is not positive definite".into());
            (DMatrix::from_element(p, p, f64::NAN), None)
        }
    };
    let se: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();

    if opt.eval.max_abs_eta > SEPARATION_ETA {
        warnings.push(format!(
            "possible separation: |linear predictor| reaches {:.1}",
            opt.eval.max_abs_eta
        ));
    }
    if !opt.converged {
        warnings.push(format!(
            "gradient norm {:.3e} above tolerance {:.1e} after {} iterations",
            opt.grad_norm, config.tol, opt.iterations
        ));
    }

    Ok(GlmmFit {
        names: design.names.clone(),
        beta: beta.iter().copied().collect(),
        se,
        cov: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        sigma2_alpha: sigma2,
        log_sigma2_se,
        alpha_modes: opt.eval.modes,
        group_names: design.group_names.clone(),
        loglik: opt.eval.value,
        converged: opt.converged,
        iterations: opt.iterations,
        gradient_norm: opt.grad_norm,
        boundary,
        n_obs: design.rows(),
        warnings,
    })
}

/// `exp(β) − 1`: relative change in the odds per standard deviation.
pub fn effect_size(beta: f64) -> f64 {
    beta.exp_m1()
}

/// Two-sided Wald p-value of `z`.
pub fn wald_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalEffect {
    pub moderator: f64,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Slope of the linear predictor in the focal column as a function of the
/// moderator value `m`: `β_focal + β_interaction · m`, with a 95% delta-method
/// interval.
pub fn marginal_effects(
    fit: &GlmmFit,
    focal: &str,
    interaction: &str,
    grid: &[f64],
) -> Result<Vec<MarginalEffect>> {
    let missing = |n: &str| Error::InvalidArgument(format!("fit has no coefficient `{n}`"));
    let f = fit.index(focal).ok_or_else(|| missing(focal))?;
    let k = fit.index(interaction).ok_or_else(|| missing(interaction))?;
    let (bf, bk) = (fit.beta[f], fit.beta[k]);
    let (vff, vkk, vfk) = (fit.cov[f][f], fit.cov[k][k], fit.cov[f][k]);
    Ok(grid
        .iter()
        .map(|&m| {
            let slope = bf + bk * m;
            let sd = (vff + m * m * vkk + 2.0 * m * vfk).max(0.0).sqrt();
            MarginalEffect {
                moderator: m,
                slope,
                ci_low: slope - Z_975 * sd,
                ci_high: slope + Z_975 * sd,
            }
        })
        .collect())
}

pub fn write_marginal_effects_csv<W: std::io::Write>(
    effects: &[MarginalEffect],
    w: W,
    header_comment: Option<&str>,
) -> Result<()> {
    let mut w = w;
    if let Some(c) = header_comment {
        writeln!(w, "# {c}").map_err(|e| Error::io("<writer>", e))?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["moderator_value", "slope", "ci_low", "ci_high"])?;
    for e in effects {
        out.write_record([
            e.moderator.to_string(),
            e.slope.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefEntry {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub stars: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportColumn {
    pub label: String,
    pub coefficients: BTreeMap<String, CoefEntry>,
    pub observations: usize,
    pub loglik: f64,
}

/// Side-by-side coefficient table; rows follow covariate order with the
/// intercept last.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionReport {
    pub terms: Vec<String>,
    pub columns: Vec<ReportColumn>,
}

pub fn report<S: AsRef<str>>(fits: &[(S, &GlmmFit)]) -> RegressionReport {
    let mut terms: Vec<String> = Regressor::ALL.iter().map(|r| r.name().to_string()).collect();
    terms.push(INTERACTION.into());
    terms.push(INTERCEPT.into());
    let used: std::collections::BTreeSet<&str> = fits
        .iter()
        .flat_map(|(_, f)| f.names.iter().map(String::as_str))
        .collect();
    terms.retain(|t| used.contains(t.as_str()));

    let columns = fits
        .iter()
        .map(|(label, f)| {
            let coefficients = f
                .names
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let (est, se) = (f.beta[j], f.se[j]);
                    let z = est / se;
                    let p = wald_p(z);
                    (
                        name.clone(),
                        CoefEntry {
                            estimate: est,
                            se,
                            z,
                            p,
                            stars: stars(p),
                        },
                    )
                })
                .collect();
            ReportColumn {
                label: label.as_ref().to_string(),
                coefficients,
                observations: f.n_obs,
                loglik: f.loglik,
            }
        })
        .collect();
    RegressionReport { terms, columns }
}

impl RegressionReport {
    /// Aligned text: estimate with stars, standard error in parentheses below.
    pub fn to_text(&self) -> String {
        let label_w = self
            .terms
            .iter()
            .map(|t| t.chars().count())
            .chain(["Log-likelihood".len()])
            .max()
            .unwrap_or(0);
        let col_w = 14usize.max(self.columns.iter().map(|c| c.label.len() + 2).max().unwrap_or(0));
        let mut s = String::new();
        let _ = write!(s, "{:label_w$}", "");
        for c in &self.columns {
            let _ = write!(s, "{:>col_w$}", c.label);
        }
        s.push('\n');
        for t in &self.terms {
            let _ = write!(s, "{t:label_w$}");
            for c in &self.columns {
                let cell = c
                    .coefficients
                    .get(t)
                    .map(|e| format!("{:.3}{:<3}", e.estimate, e.stars))
                    .unwrap_or_default();
                let _ = write!(s, "{cell:>col_w$}");
            }
            s.push('\n');
            let _ = write!(s, "{:label_w$}", "");
            for c in &self.columns {
                let cell = c
                    .coefficients
                    .get(t)
                    .map(|e| format!("({:.3})   ", e.se))
                    .unwrap_or_default();
                let _ = write!(s, "{cell:>col_w$}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:label_w$}", "Observations");
        for c in &self.columns {
            let _ = write!(s, "{:>col_w$}", format!("{}   ", c.observations));
        }
        s.push('\n');
        let _ = write!(s, "{:label_w$}", "Log-likelihood");
        for c in &self.columns {
            let _ = write!(s, "{:>col_w$}", format!("{:.1}   ", c.loglik));
        }
        s.push('\n');
        s.push_str("Standardized coefficients; standard errors in parentheses.\n");
        s.push_str("Significance: * p<0.05; ** p<0.01; *** p<0.001.\n");
        s
    }

    /// Long format: `model,term,estimate,std_error,z,p_value,stars`, then one
    /// `observations` and one `log_likelihood` row per model.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "term", "estimate", "std_error", "z", "p_value", "stars"])?;
        for c in &self.columns {
            for t in &self.terms {
                if let Some(e) = c.coefficients.get(t) {
                    out.write_record([
                        c.label.clone(),
                        t.clone(),
                        e.estimate.to_string(),
                        e.se.to_string(),
                        e.z.to_string(),
                        e.p.to_string(),
                        e.stars.to_string(),
                    ])?;
                }
            }
            let blank = String::new;
            out.write_record([
                c.label.clone(),
                "observations".into(),
                c.observations.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
            ])?;
            out.write_record([
                c.label.clone(),
                "log_likelihood".into(),
                c.loglik.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (DesignMatrix, Vec<u32>, Vec<u32>) {
        let x1 = vec![-1.2, 0.3, 0.8, -0.4, 1.5, -0.9, 0.1, 0.6, -0.2, 1.1, -1.4, 0.7];
        let x2 = vec![0.5, -0.7, 0.2, 1.3, -0.1, 0.9, -1.6, 0.4, 0.0, -0.8, 1.0, -0.3];
        let groups: Vec<String> = (0..12).map(|i| format!("p{}", i / 4)).collect();
        let d = DesignMatrix::from_columns(
            vec![("x1".into(), x1), ("x2".into(), x2)],
            &groups,
            vec![],
        )
        .unwrap();
        let helpful = vec![3, 7, 9, 2, 12, 4, 6, 8, 5, 11, 1, 9];
        let total = vec![8, 10, 12, 9, 14, 10, 12, 10, 9, 13, 7, 12];
        (d, helpful, total)
    }

    #[test]
    fn standardization() {
        let (cols, stats) = zstandardize(&[("a", vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(stats[0].mean, 2.0);
        assert_eq!(stats[0].sd, 1.0);
        assert_eq!(cols[0], vec![-1.0, 0.0, 1.0]);
        let (again, _) = zstandardize(&[("a", cols[0].clone())]).unwrap();
        for (a, b) in again[0].iter().zip(&cols[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = zstandardize(&[("flat", vec![4.0, 4.0, 4.0])]).unwrap_err();
        assert!(matches!(err, Error::ConstantColumn(ref n) if n == "flat"));
        assert!(zstandardize(&[("one", vec![1.0])]).is_err());
    }

    #[test]
    fn nested_specs() {
        let a = ModelSpec::nested('a').unwrap();
        assert!(!a.regressors.contains(&Regressor::RLength));
        let d = ModelSpec::nested('d').unwrap();
        assert!(d.has_interaction());
        assert!(!d.clone().without(Regressor::RAC).has_interaction());
        assert!(ModelSpec::nested('e').is_none());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (d, y, n) = toy();
        let beta = [0.2, -0.3, 0.45];
        for s2 in [0.0, 0.3, 1.7] {
            let (g, gt) = laplace_gradient(&d, &y, &n, &beta, s2).unwrap();
            for j in 0..3 {
                let h = 1e-6;
                let mut up = beta;
                up[j] += h;
                let mut dn = beta;
                dn[j] -= h;
                let fd = (laplace_loglik(&d, &y, &n, &up, s2).unwrap().0
                    - laplace_loglik(&d, &y, &n, &dn, s2).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "s2={s2} j={j}: {fd} vs {}", g[j]);
            }
            if s2 > 0.0 {
                let h = 1e-6;
                let f = |t: f64| laplace_loglik(&d, &y, &n, &beta, t.exp()).unwrap().0;
                let tau = s2.ln();
                let fd = (f(tau + h) - f(tau - h)) / (2.0 * h);
                assert!((fd - gt).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {gt}");
            }
        }
    }

    #[test]
    fn fit_is_consistent() {
        let (d, y, n) = toy();
        let f = fit(&d, &y, &n, &FitConfig::default()).unwrap();
        assert!(f.converged, "{:?}", f.warnings);
        assert!(f.se.iter().all(|&s| s > 0.0));
        assert!(f.sigma2_alpha >= 0.0);
        let re = loglik(&f, &d, &y, &n).unwrap();
        assert!((re - f.loglik).abs() < 1e-9);
        let again = fit(&d, &y, &n, &FitConfig::default()).unwrap();
        assert_eq!(again, f);
    }

    #[test]
    fn effect_sizes() {
        assert!((effect_size(0.282) - 0.3258).abs() < 5e-4);
        assert_eq!(effect_size(0.0), 0.0);
        assert!((effect_size(-0.169) + 0.1555).abs() < 5e-4);
    }

    #[test]
    fn star_brackets() {
        assert_eq!(stars(0.0004), "***");
        assert_eq!(stars(0.001), "**");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.03), "*");
        assert_eq!(stars(0.05), "");
        let p = wald_p(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-10, "{p}");
    }

    #[test]
    fn marginal_effect_line() {
        let f = GlmmFit {
            names: vec![INTERCEPT.into(), "RLength".into(), INTERACTION.into()],
            beta: vec![1.0, 0.293, -0.169],
            se: vec![0.1, 0.003, 0.008],
            cov: vec![
                vec![0.01, 0.0, 0.0],
                vec![0.0, 9e-6, -1e-6],
                vec![0.0, -1e-6, 6.4e-5],
            ],
            sigma2_alpha: 0.2,
            log_sigma2_se: None,
            alpha_modes: vec![],
            group_names: vec![],
            loglik: -1.0,
            converged: true,
            iterations: 1,
            gradient_norm: 0.0,
            boundary: false,
            n_obs: 10,
            warnings: vec![],
        };
        let me = marginal_effects(&f, "RLength", INTERACTION, &[0.0, 1.0, 2.5]).unwrap();
        assert_eq!(me[0].slope, 0.293);
        assert_eq!(me[1].slope, 0.293 + -0.169);
        assert!((me[0].ci_high - me[0].slope - Z_975 * 0.003).abs() < 1e-15);
        assert!(marginal_effects(&f, "RLength", "RAC", &[0.0]).is_err());
    }
}
