mod common;

use argchange::glmm::{
    build_design, fit, laplace_gradient, laplace_loglik, loglik, marginal_effects, report,
    DesignMatrix, FitConfig, GlmmFit, ModelSpec, VarianceMode, INTERACTION,
};
use argchange::synth::{generate_glmm_corpus, SynthSpec};
use argchange::textfeats::{FeatureTable, Regressor};
use argchange::Error;
use common::{central_diff, glm_loglik, glm_newton, rng};
use rand::Rng;
use rand_distr::StandardNormal;

fn corpus(seed: u64, products: usize, per: usize, sigma2: f64) -> FeatureTable {
    let spec = SynthSpec {
        seed,
        n_products: products,
        reviews_per_product: per,
        sigma2_alpha: sigma2,
        ..SynthSpec::default()
    };
    generate_glmm_corpus(&spec).unwrap().table
}

fn rows(d: &DesignMatrix) -> Vec<Vec<f64>> {
    (0..d.rows())
        .map(|i| d.x.row(i).iter().copied().collect())
        .collect()
}

fn fit_model(t: &FeatureTable, label: char) -> (DesignMatrix, GlmmFit) {
    let d = build_design(t, &ModelSpec::nested(label).unwrap()).unwrap();
    let f = fit(&d, &t.helpful, &t.total, &FitConfig::default()).unwrap();
    (d, f)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let t = corpus(3, 15, 8, 0.5);
    let d = build_design(&t, &ModelSpec::nested('d').unwrap()).unwrap();
    let mut r = rng(9);
    for _ in 0..3 {
        let beta: Vec<f64> = (0..d.names.len()).map(|_| r.random_range(-0.5..0.5)).collect();
        let tau: f64 = r.random_range(-2.0..0.5);
        let (gb, gt) = laplace_gradient(&d, &t.helpful, &t.total, &beta, tau.exp()).unwrap();
        let mut phi = beta.clone();
        phi.push(tau);
        let p = beta.len();
        let f = |v: &[f64]| laplace_loglik(&d, &t.helpful, &t.total, &v[..p], v[p].exp()).unwrap().0;
        let fd = central_diff(f, &phi, 1e-5);
        for (a, b) in gb.iter().chain([&gt]).zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn vanishing_variance_recovers_plain_logistic_likelihood() {
    let t = corpus(4, 12, 10, 0.25);
    let d = build_design(&t, &ModelSpec::nested('c').unwrap()).unwrap();
    let x = rows(&d);
    let beta = glm_newton(&x, &t.helpful, &t.total);
    let want = glm_loglik(&x, &t.helpful, &t.total, &beta);
    let mut last = f64::INFINITY;
    for s2 in [1e-3, 1e-5, 1e-7, 1e-9] {
        let (ll, _) = laplace_loglik(&d, &t.helpful, &t.total, &beta, s2).unwrap();
        let gap = (ll - want).abs();
        assert!(gap <= last + 1e-12);
        last = gap;
    }
    assert!(last < 1e-6, "gap {last}");

    let fixed = FitConfig { variance: VarianceMode::Fixed(0.0), ..FitConfig::default() };
    let f = fit(&d, &t.helpful, &t.total, &fixed).unwrap();
    for (a, b) in f.beta.iter().zip(&beta) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!((f.loglik - want).abs() < 1e-8);
}

#[test]
fn nested_models_never_lose_likelihood() {
    let t = corpus(5, 30, 10, 0.25);
    let lls: Vec<f64> = ['a', 'b', 'c', 'd'].iter().map(|&m| fit_model(&t, m).1.loglik).collect();
    for w in lls.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{lls:?}");
    }
}

#[test]
fn noise_column_never_lowers_likelihood() {
    let t = corpus(6, 20, 10, 0.25);
    let (d, base) = fit_model(&t, 'a');
    let mut r = rng(1);
    let mut cols: Vec<(String, Vec<f64>)> = d.names[1..]
        .iter()
        .map(|n| (n.clone(), d.column(n).unwrap()))
        .collect();
    cols.push(("noise".into(), (0..d.rows()).map(|_| r.sample(StandardNormal)).collect()));
    let bigger = DesignMatrix::from_columns(cols, &t.product_ids, d.stats.clone()).unwrap();
    let f = fit(&bigger, &t.helpful, &t.total, &FitConfig::default()).unwrap();
    assert!(f.loglik >= base.loglik - 1e-6);
}

#[test]
fn stored_modes_reproduce_the_likelihood() {
    let t = corpus(7, 40, 12, 0.4);
    let (d, f) = fit_model(&t, 'd');
    assert!(f.converged && !f.boundary);
    let again = loglik(&f, &d, &t.helpful, &t.total).unwrap();
    assert!((again - f.loglik).abs() < 1e-9);
    let (fresh, _) = laplace_loglik(&d, &t.helpful, &t.total, &f.beta, f.sigma2_alpha).unwrap();
    assert!((fresh - f.loglik).abs() < 1e-9);
}

#[test]
fn delta_method_interval_agrees_with_simulation() {
    let t = corpus(8, 40, 12, 0.25);
    let (_, f) = fit_model(&t, 'd');
    let (i, k) = (f.index("RLength").unwrap(), f.index(INTERACTION).unwrap());
    // 2x2 Cholesky of the (focal, interaction) covariance block
    let (vff, vfk, vkk) = (f.cov[i][i], f.cov[i][k], f.cov[k][k]);
    let l11 = vff.sqrt();
    let l21 = vfk / l11;
    let l22 = (vkk - l21 * l21).sqrt();
    let grid = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let effects = marginal_effects(&f, "RLength", INTERACTION, &grid).unwrap();
    let mut r = rng(77);
    let draws: Vec<(f64, f64)> = (0..2000)
        .map(|_| {
            let z1: f64 = r.sample(StandardNormal);
            let z2: f64 = r.sample(StandardNormal);
            (f.beta[i] + l11 * z1, f.beta[k] + l21 * z1 + l22 * z2)
        })
        .collect();
    for e in &effects {
        let mut s: Vec<f64> = draws.iter().map(|(a, b)| a + b * e.moderator).collect();
        s.sort_by(f64::total_cmp);
        let (lo, hi) = (s[49], s[1949]);
        let width = e.ci_high - e.ci_low;
        assert!((lo - e.ci_low).abs() < 0.1 * width, "m={} lo {lo} vs {}", e.moderator, e.ci_low);
        assert!((hi - e.ci_high).abs() < 0.1 * width, "m={} hi {hi} vs {}", e.moderator, e.ci_high);
    }
}

#[test]
fn interaction_column_construction() {
    let t = corpus(9, 10, 10, 0.25);
    let mut spec = ModelSpec::nested('d').unwrap();
    spec.standardize_interaction = false;
    let raw = build_design(&t, &spec).unwrap();
    let (l, a) = (raw.column("RLength").unwrap(), raw.column("RAC").unwrap());
    let prod = raw.column(INTERACTION).unwrap();
    for ((x, y), p) in l.iter().zip(&a).zip(&prod) {
        assert!((x * y - p).abs() < 1e-15);
    }
    let std = build_design(&t, &ModelSpec::nested('d').unwrap()).unwrap();
    let c = std.column(INTERACTION).unwrap();
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
    let pm = prod.iter().sum::<f64>() / n;
    let psd = (prod.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    for (p, z) in prod.iter().zip(&c) {
        assert!(((p - pm) / psd - z).abs() < 1e-10);
    }

    let b = build_design(&t, &ModelSpec::nested('b').unwrap()).unwrap();
    assert!(b.column("RAC").is_none() && b.column(INTERACTION).is_none());
    let no_rac = build_design(&t, &ModelSpec::nested('d').unwrap().without(Regressor::RAC)).unwrap();
    assert!(no_rac.column(INTERACTION).is_none());
}

#[test]
fn zero_variance_data_rarely_rejects_the_glm() {
    // Under σ² = 0 the likelihood-ratio statistic follows a 50:50 mixture of
    // χ²₀ and χ²₁, whose 95% point is 2.706.
    let reps = 40;
    let mut accepted = 0;
    for seed in 0..reps {
        let t = corpus(100 + seed, 30, 10, 0.0);
        // the full model, so no omitted covariate leaks into group means
        let d = build_design(&t, &ModelSpec::nested('d').unwrap()).unwrap();
        let glmm = fit(&d, &t.helpful, &t.total, &FitConfig::default()).unwrap();
        let glm_cfg = FitConfig { variance: VarianceMode::Fixed(0.0), ..FitConfig::default() };
        let glm = fit(&d, &t.helpful, &t.total, &glm_cfg).unwrap();
        let lr = 2.0 * (glmm.loglik - glm.loglik);
        assert!(lr >= -1e-6, "lr {lr}");
        if lr < 2.706 {
            accepted += 1;
        }
    }
    assert!(accepted >= 34, "{accepted}/{reps}");
}

#[test]
fn iteration_cap_is_reported_not_hidden() {
    let t = corpus(10, 20, 10, 0.25);
    let d = build_design(&t, &ModelSpec::nested('d').unwrap()).unwrap();
    let cfg = FitConfig { max_iter: 1, ..FitConfig::default() };
    let f = fit(&d, &t.helpful, &t.total, &cfg).unwrap();
    assert!(!f.converged);
    assert!(f.warnings.iter().any(|w| w.contains("gradient norm")));
}

#[test]
fn separable_outcome_warns() {
    let mut t = corpus(11, 10, 10, 0.25);
    let x = t.column(Regressor::RStars).to_vec();
    for (i, v) in x.iter().enumerate() {
        t.helpful[i] = if *v > 0.0 { t.total[i] } else { 0 };
    }
    let d = build_design(&t, &ModelSpec::nested('a').unwrap()).unwrap();
    let f = fit(&d, &t.helpful, &t.total, &FitConfig::default()).unwrap();
    assert!(f.warnings.iter().any(|w| w.contains("separation")), "{:?}", f.warnings);
}

#[test]
fn constant_covariate_is_rejected() {
    let mut t = corpus(12, 5, 5, 0.25);
    t.column_mut(Regressor::PType).iter_mut().for_each(|v| *v = 1.0);
    let e = build_design(&t, &ModelSpec::controls()).unwrap_err();
    assert!(matches!(e, Error::ConstantColumn(ref c) if c == "PType"));
}

#[test]
fn report_rows_follow_the_nested_models() {
    let t = corpus(13, 20, 10, 0.25);
    let (_, a) = fit_model(&t, 'a');
    let (_, d) = fit_model(&t, 'd');
    let r = report(&[("(a)", &a), ("(d)", &d)]);
    assert!(!r.columns[0].coefficients.contains_key("RLength"));
    assert!(!r.columns[0].coefficients.contains_key(INTERACTION));
    assert!(r.columns[1].coefficients.contains_key(INTERACTION));
    let n = r.terms.len();
    assert_eq!(r.terms[n - 2..], [INTERACTION.to_string(), "Intercept".to_string()]);
    let mut one = Vec::new();
    let mut two = Vec::new();
    r.write_csv(&mut one).unwrap();
    report(&[("(a)", &a), ("(d)", &d)]).write_csv(&mut two).unwrap();
    assert_eq!(one, two);
    assert!(r.to_text().contains("(d)"));
}
