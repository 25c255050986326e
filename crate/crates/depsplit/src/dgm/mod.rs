//! The deep generative model: three networks map bank features to the five
//! mixture parameters per cell, metrics are simulated from the parameterized
//! distributions, and the networks are trained to shrink the gap between
//! simulated and observed metrics under a prior that keeps the wholesale
//! distribution to the right of the retail one.
//!
//! Deposit-valued metrics are divided by the bank's reported total deposits
//! before differencing, so all three residuals are order-1 fractions and
//! large banks cannot dominate the loss.

mod infer;
mod train;

pub use infer::{aggregate_industry, infer_retail, IndustrySeries, RetailEstimate};
pub use train::{
    fit, fit_single, fit_with_prior, net_loss, net_loss_and_grads, DgmNetGrads, FitResult,
    SingleFitResult,
};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::lognormal::{std_normal_pdf, Lognormal};
use crate::mlp::Mlp;
use crate::panel::{
    BankPanel, MixtureParams, PriorEndpoints, PriorSchedule, METRIC_FRAC_SMALL_ACCOUNTS,
    METRIC_SMALL_DEPOSITS, METRIC_TOTAL_DEPOSITS, N_FEATURES,
};
use crate::{Error, Result};

pub(crate) const TAG_NET: u64 = 10;
pub(crate) const TAG_SIM: u64 = 11;
pub(crate) const TAG_INFER: u64 = 12;

/// How the sampled metrics of Eqs. 2-3 are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Closed-form expectations; smooth, the training default.
    Analytic,
    /// Reparameterized draws with a straight-through truncation indicator.
    MonteCarlo,
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricMode::Analytic => write!(f, "analytic"),
            MetricMode::MonteCarlo => write!(f, "monte-carlo"),
        }
    }
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(MetricMode::Analytic),
            "monte-carlo" | "monte_carlo" | "mc" => Ok(MetricMode::MonteCarlo),
            other => Err(Error::InvalidInput(format!("unknown metric mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgmConfig {
    /// Draws per distribution per cell in Monte Carlo mode.
    pub n_samples: usize,
    /// Independent inference repetitions averaged into the final estimate.
    pub n_inference_trials: usize,
    /// Weight of the prior constraint term.
    pub lambda: f64,
    pub metric_mode: MetricMode,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    /// L2 weight regularization strength; off by default.
    pub weight_decay: f64,
    /// Global gradient-norm clip across all networks; `None` disables it.
    pub clip_norm: Option<f64>,
    pub prior: PriorEndpoints,
}

impl Default for DgmConfig {
    fn default() -> Self {
        DgmConfig {
            n_samples: 10_000,
            n_inference_trials: 10,
            lambda: 0.05,
            metric_mode: MetricMode::Analytic,
            seed: 0,
            lr: 1e-3,
            steps: 5000,
            weight_decay: 0.0,
            clip_norm: Some(10.0),
            prior: PriorEndpoints::default(),
        }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        if self.n_inference_trials == 0 {
            return Err(Error::InvalidInput("n_inference_trials must be at least 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidInput("lambda must be >= 0".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// The three parameter heads: retail (mu, log sigma), wholesale (mu, log
/// sigma), and the retail-account fraction p (logit).
#[derive(Debug, Clone)]
pub struct DgmNets {
    pub retail: Mlp,
    pub wholesale: Mlp,
    pub p_net: Mlp,
}

impl DgmNets {
    pub fn init(seed: u64) -> Self {
        DgmNets {
            retail: Mlp::new(N_FEATURES, 2, &mut crate::rng::derive(seed, &[TAG_NET, 0])),
            wholesale: Mlp::new(N_FEATURES, 2, &mut crate::rng::derive(seed, &[TAG_NET, 1])),
            p_net: Mlp::new(N_FEATURES, 1, &mut crate::rng::derive(seed, &[TAG_NET, 2])),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn flatten_features(features: &Array3<f64>) -> Array2<f64> {
    let (n_b, n_t, n_f) = features.dim();
    features
        .to_shape((n_b * n_t, n_f))
        .expect("standard layout")
        .into_owned()
}

/// Raw head outputs mapped to the five mixture parameters: sigmas are
/// exponentiated for positivity, p goes through a sigmoid.
pub fn parameterize(nets: &DgmNets, features: &Array3<f64>) -> Result<MixtureParams> {
    let (n_b, n_t, _) = features.dim();
    let x = flatten_features(features);
    let retail = nets.retail.forward(&x)?;
    let wholesale = nets.wholesale.forward(&x)?;
    let p_logit = nets.p_net.forward(&x)?;

    let mut params = MixtureParams::zeros(n_b, n_t);
    for b in 0..n_b {
        for t in 0..n_t {
            let c = b * n_t + t;
            let vals = [
                retail[[c, 0]],
                retail[[c, 1]],
                wholesale[[c, 0]],
                wholesale[[c, 1]],
                p_logit[[c, 0]],
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite network output at bank row {b}, quarter index {t}"
                )));
            }
            params.mu_ret[[b, t]] = retail[[c, 0]];
            params.sigma_ret[[b, t]] = retail[[c, 1]].exp();
            params.mu_ws[[b, t]] = wholesale[[c, 0]];
            params.sigma_ws[[b, t]] = wholesale[[c, 1]].exp();
            params.p[[b, t]] = sigmoid(p_logit[[c, 0]]);
        }
    }
    Ok(params)
}

/// Simulated counterparts of the three observed metrics, per cell.
#[derive(Debug, Clone)]
pub struct SimulatedMetrics {
    pub v_total: Array2<f64>,
    pub v_small_deposits: Array2<f64>,
    pub v_frac_small: Array2<f64>,
}

/// Per-cell simulated metrics and their partial derivatives w.r.t. the five
/// parameters, ordered (p, mu_ret, sigma_ret, mu_ws, sigma_ws).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CellEval {
    pub v: [f64; 3],
    pub dv: [[f64; 5]; 3],
}

/// One lognormal component's contribution: value and derivative pieces of the
/// full mean, truncated mean, and CDF at the limit.
struct ComponentEval {
    mean: f64,
    d_mean: [f64; 2], // d/dmu, d/dsigma
    small: f64,
    d_small: [f64; 2],
    cdf: f64,
    d_cdf: [f64; 2],
}

fn analytic_component(mu: f64, sigma: f64, limit: f64) -> ComponentEval {
    let s2 = sigma * sigma;
    let mean = (mu + 0.5 * s2).exp();
    let log_l = limit.ln();
    let d = (log_l - mu - s2) / sigma;
    let u = (log_l - mu) / sigma;
    let phi_d = crate::lognormal::std_normal_cdf(d);
    let pdf_d = std_normal_pdf(d);
    let phi_u = crate::lognormal::std_normal_cdf(u);
    let pdf_u = std_normal_pdf(u);
    let small = mean * phi_d;
    ComponentEval {
        mean,
        d_mean: [mean, sigma * mean],
        small,
        d_small: [
            small - mean * pdf_d / sigma,
            sigma * small + mean * pdf_d * (-(log_l - mu) / s2 - 1.0),
        ],
        cdf: phi_u,
        d_cdf: [-pdf_u / sigma, -pdf_u * u / sigma],
    }
}

fn monte_carlo_component(
    mu: f64,
    sigma: f64,
    limit: f64,
    n_samples: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> ComponentEval {
    let dist = Lognormal::new(mu, sigma);
    let mut sum = 0.0;
    let mut eps_sum = 0.0;
    let mut small_sum = 0.0;
    let mut small_eps_sum = 0.0;
    for _ in 0..n_samples {
        let eps: f64 = rng.sample(StandardNormal);
        let s = (mu + sigma * eps).exp();
        sum += s;
        eps_sum += eps * s;
        if s < limit {
            // straight-through: the indicator is held fixed while gradients
            // flow through the sample value
            small_sum += s;
            small_eps_sum += eps * s;
        }
    }
    let inv = 1.0 / n_samples as f64;
    // the CDF term stays analytic: the metric is already a probability
    let (cdf, d_cdf) = match dist {
        Ok(d) => {
            let u = (limit.ln() - mu) / sigma;
            let pdf_u = std_normal_pdf(u);
            (d.cdf(limit), [-pdf_u / sigma, -pdf_u * u / sigma])
        }
        Err(_) => (0.0, [0.0, 0.0]),
    };
    ComponentEval {
        mean: sum * inv,
        d_mean: [sum * inv, eps_sum * inv],
        small: small_sum * inv,
        d_small: [small_sum * inv, small_eps_sum * inv],
        cdf,
        d_cdf,
    }
}

/// Evaluates the simulated metrics of one cell and their gradients.
pub(crate) fn eval_cell(
    p: f64,
    mu_ret: f64,
    sigma_ret: f64,
    mu_ws: f64,
    sigma_ws: f64,
    n_accounts: f64,
    limit: f64,
    cfg: &DgmConfig,
    streams: Option<(u64, u64)>, // (epoch, cell index) for Monte Carlo draws
) -> CellEval {
    let q = 1.0 - p;
    let (ret, ws) = match cfg.metric_mode {
        MetricMode::Analytic => (
            analytic_component(mu_ret, sigma_ret, limit),
            analytic_component(mu_ws, sigma_ws, limit),
        ),
        MetricMode::MonteCarlo => {
            let (epoch, cell) = streams.unwrap_or((0, 0));
            let mut rng_ret = crate::rng::derive(cfg.seed, &[TAG_SIM, epoch, cell, 0]);
            let mut rng_ws = crate::rng::derive(cfg.seed, &[TAG_SIM, epoch, cell, 1]);
            (
                monte_carlo_component(mu_ret, sigma_ret, limit, cfg.n_samples, &mut rng_ret),
                monte_carlo_component(mu_ws, sigma_ws, limit, cfg.n_samples, &mut rng_ws),
            )
        }
    };

    let mut eval = CellEval::default();
    // v_total = n (p m_ret + q m_ws)
    eval.v[METRIC_TOTAL_DEPOSITS] = n_accounts * (p * ret.mean + q * ws.mean);
    eval.dv[METRIC_TOTAL_DEPOSITS] = [
        n_accounts * (ret.mean - ws.mean),
        n_accounts * p * ret.d_mean[0],
        n_accounts * p * ret.d_mean[1],
        n_accounts * q * ws.d_mean[0],
        n_accounts * q * ws.d_mean[1],
    ];
    // v_small = n (p pm_ret + q pm_ws)
    eval.v[METRIC_SMALL_DEPOSITS] = n_accounts * (p * ret.small + q * ws.small);
    eval.dv[METRIC_SMALL_DEPOSITS] = [
        n_accounts * (ret.small - ws.small),
        n_accounts * p * ret.d_small[0],
        n_accounts * p * ret.d_small[1],
        n_accounts * q * ws.d_small[0],
        n_accounts * q * ws.d_small[1],
    ];
    // v_frac = p P(s_ret < l) + q P(s_ws < l)
    eval.v[METRIC_FRAC_SMALL_ACCOUNTS] = p * ret.cdf + q * ws.cdf;
    eval.dv[METRIC_FRAC_SMALL_ACCOUNTS] = [
        ret.cdf - ws.cdf,
        p * ret.d_cdf[0],
        p * ret.d_cdf[1],
        q * ws.d_cdf[0],
        q * ws.d_cdf[1],
    ];
    eval
}

/// Simulates the three metrics for every cell; Monte Carlo draws come from
/// per-cell streams derived from the config seed.
pub fn simulate_metrics(
    params: &MixtureParams,
    n_accounts: &Array2<f64>,
    limits: &[f64],
    cfg: &DgmConfig,
) -> Result<SimulatedMetrics> {
    let (n_b, n_t) = params.dim();
    if n_accounts.dim() != (n_b, n_t) {
        return Err(Error::Shape("n_accounts shape differs from params".into()));
    }
    if limits.len() != n_t {
        return Err(Error::Shape(format!(
            "expected {n_t} per-quarter limits, got {}",
            limits.len()
        )));
    }
    let cells: Vec<CellEval> = (0..n_b * n_t)
        .into_par_iter()
        .map(|c| {
            let (b, t) = (c / n_t, c % n_t);
            eval_cell(
                params.p[[b, t]],
                params.mu_ret[[b, t]],
                params.sigma_ret[[b, t]],
                params.mu_ws[[b, t]],
                params.sigma_ws[[b, t]],
                n_accounts[[b, t]],
                limits[t],
                cfg,
                Some((0, c as u64)),
            )
        })
        .collect();
    let mut out = SimulatedMetrics {
        v_total: Array2::zeros((n_b, n_t)),
        v_small_deposits: Array2::zeros((n_b, n_t)),
        v_frac_small: Array2::zeros((n_b, n_t)),
    };
    for (c, eval) in cells.iter().enumerate() {
        let (b, t) = (c / n_t, c % n_t);
        out.v_total[[b, t]] = eval.v[METRIC_TOTAL_DEPOSITS];
        out.v_small_deposits[[b, t]] = eval.v[METRIC_SMALL_DEPOSITS];
        out.v_frac_small[[b, t]] = eval.v[METRIC_FRAC_SMALL_ACCOUNTS];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub samples: f64,
    pub constrain: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.samples + self.constrain
    }
}

/// Gradients of the total loss w.r.t. the five transformed parameters of
/// every cell. Masked cells carry zeros.
#[derive(Debug, Clone)]
pub struct MixtureGrads {
    pub p: Array2<f64>,
    pub mu_ret: Array2<f64>,
    pub sigma_ret: Array2<f64>,
    pub mu_ws: Array2<f64>,
    pub sigma_ws: Array2<f64>,
}

struct CellLoss {
    samples: f64,
    constrain: f64,
    grad: [f64; 5],
    bad_metric: bool,
}

/// The training objective: mean squared residual between observed and
/// simulated metrics over unmasked cells, plus the prior constraint summed
/// over unmasked cells. Returns exact gradients per cell; in Monte Carlo mode
/// the gradients flow through the reparameterized samples. `sample_epoch`
/// selects the draw streams so repeated evaluations resample deterministically.
pub fn loss(
    panel: &BankPanel,
    params: &MixtureParams,
    prior: &PriorSchedule,
    cfg: &DgmConfig,
    sample_epoch: u64,
) -> Result<(LossBreakdown, MixtureGrads)> {
    let (n_b, n_t) = (panel.n_banks(), panel.n_quarters());
    if params.dim() != (n_b, n_t) {
        return Err(Error::Shape("params shape differs from panel".into()));
    }
    if prior.n_quarters() != n_t {
        return Err(Error::Shape(format!(
            "prior schedule covers {} quarters, panel has {n_t}",
            prior.n_quarters()
        )));
    }
    cfg.validate()?;
    let limits_schedule = crate::ingest::InsuranceLimitSchedule::default();
    let limits: Vec<f64> = panel.quarters.iter().map(|&q| limits_schedule.limit(q)).collect();
    let norm = 1.0 / (n_b as f64 * n_t as f64);

    let cells: Vec<Option<CellLoss>> = (0..n_b * n_t)
        .into_par_iter()
        .map(|c| {
            let (b, t) = (c / n_t, c % n_t);
            if !panel.mask[[b, t]] {
                return None;
            }
            let x_total = panel.metrics[[b, t, METRIC_TOTAL_DEPOSITS]];
            if x_total <= 0.0 {
                return None;
            }
            let eval = eval_cell(
                params.p[[b, t]],
                params.mu_ret[[b, t]],
                params.sigma_ret[[b, t]],
                params.mu_ws[[b, t]],
                params.sigma_ws[[b, t]],
                panel.n_accounts[[b, t]],
                limits[t],
                cfg,
                Some((sample_epoch, c as u64)),
            );
            // deposit metrics are compared as fractions of reported total
            // deposits; the account metric is already a fraction
            let scale = [1.0 / x_total, 1.0 / x_total, 1.0];
            let mut samples = 0.0;
            let mut grad = [0.0; 5];
            let mut bad = false;
            for i in 0..3 {
                let x_hat = panel.metrics[[b, t, i]] * scale[i];
                let v_hat = eval.v[i] * scale[i];
                let resid = x_hat - v_hat;
                if !resid.is_finite() {
                    bad = true;
                    break;
                }
                samples += resid * resid * norm;
                let upstream = -2.0 * resid * norm * scale[i];
                for k in 0..5 {
                    grad[k] += upstream * eval.dv[i][k];
                }
            }
            // prior constraint on the distribution parameters of this cell
            let mut constrain = 0.0;
            if cfg.lambda > 0.0 && !bad {
                let devs = [
                    (1, params.mu_ret[[b, t]] - prior.mu0_ret[t]),
                    (2, params.sigma_ret[[b, t]] - prior.sigma0_ret[t]),
                    (3, params.mu_ws[[b, t]] - prior.mu0_ws[t]),
                    (4, params.sigma_ws[[b, t]] - prior.sigma0_ws[t]),
                ];
                for (k, dev) in devs {
                    constrain += cfg.lambda * dev * dev;
                    grad[k] += 2.0 * cfg.lambda * dev;
                }
            }
            Some(CellLoss {
                samples,
                constrain,
                grad,
                bad_metric: bad,
            })
        })
        .collect();

    let mut breakdown = LossBreakdown {
        samples: 0.0,
        constrain: 0.0,
    };
    let mut grads = MixtureGrads {
        p: Array2::zeros((n_b, n_t)),
        mu_ret: Array2::zeros((n_b, n_t)),
        sigma_ret: Array2::zeros((n_b, n_t)),
        mu_ws: Array2::zeros((n_b, n_t)),
        sigma_ws: Array2::zeros((n_b, n_t)),
    };
    for (c, cell) in cells.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let (b, t) = (c / n_t, c % n_t);
        if cell.bad_metric {
            return Err(Error::Diverged(format!(
                "non-finite simulated metric for bank `{}` in {}",
                panel.banks[b], panel.quarters[t]
            )));
        }
        breakdown.samples += cell.samples;
        breakdown.constrain += cell.constrain;
        grads.p[[b, t]] = cell.grad[0];
        grads.mu_ret[[b, t]] = cell.grad[1];
        grads.sigma_ret[[b, t]] = cell.grad[2];
        grads.mu_ws[[b, t]] = cell.grad[3];
        grads.sigma_ws[[b, t]] = cell.grad[4];
    }
    if !breakdown.total().is_finite() {
        return Err(Error::Diverged(format!(
            "loss is not finite: samples={}, constrain={}",
            breakdown.samples, breakdown.constrain
        )));
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_panel, Normalize};
    use crate::quarter::{quarter_range, Quarter};
    use crate::synth::{self, BankPlant, SynthSpec};

    fn quarters(n: usize) -> Vec<Quarter> {
        let start = Quarter::new(2018, 1).unwrap();
        quarter_range(start, Quarter::from_ordinal(start.ordinal() + n as i64 - 1)).unwrap()
    }

    fn small_panel(n_banks: usize, n_quarters: usize, seed: u64) -> BankPanel {
        let plant = synth::RandomBankPlant {
            n_banks,
            ..synth::RandomBankPlant::default()
        };
        let spec = SynthSpec::new(quarters(n_quarters), BankPlant::Random(plant), seed);
        let out = synth::generate(&spec).unwrap();
        build_panel(&out.records, Normalize::Fit).unwrap().0
    }

    #[test]
    fn zero_nets_parameterize_to_transform_of_zeros() {
        let nets = DgmNets {
            retail: Mlp::zeros(N_FEATURES, 2),
            wholesale: Mlp::zeros(N_FEATURES, 2),
            p_net: Mlp::zeros(N_FEATURES, 1),
        };
        let features = Array3::from_elem((2, 2, N_FEATURES), 0.7);
        let params = parameterize(&nets, &features).unwrap();
        for b in 0..2 {
            for t in 0..2 {
                assert_eq!(params.p[[b, t]], 0.5);
                assert_eq!(params.mu_ret[[b, t]], 0.0);
                assert_eq!(params.sigma_ret[[b, t]], 1.0);
                assert_eq!(params.mu_ws[[b, t]], 0.0);
                assert_eq!(params.sigma_ws[[b, t]], 1.0);
            }
        }
    }

    #[test]
    fn identical_features_give_identical_params() {
        let nets = DgmNets::init(3);
        let mut features = Array3::zeros((3, 1, N_FEATURES));
        for b in 0..2 {
            for f in 0..N_FEATURES {
                features[[b, 0, f]] = 0.3 * f as f64 - 0.5;
            }
        }
        features[[2, 0, 0]] = 9.0; // a different bank
        let params = parameterize(&nets, &features).unwrap();
        assert_eq!(params.p[[0, 0]], params.p[[1, 0]]);
        assert_eq!(params.mu_ws[[0, 0]], params.mu_ws[[1, 0]]);
        assert_ne!(params.mu_ret[[2, 0]], params.mu_ret[[0, 0]]);
    }

    #[test]
    fn perturbing_one_bank_changes_only_that_bank() {
        let nets = DgmNets::init(4);
        let mut features = Array3::from_elem((3, 2, N_FEATURES), 0.25);
        let base = parameterize(&nets, &features).unwrap();
        features[[1, 1, 2]] += 0.5;
        let bumped = parameterize(&nets, &features).unwrap();
        for b in 0..3 {
            for t in 0..2 {
                let same = base.mu_ret[[b, t]] == bumped.mu_ret[[b, t]]
                    && base.p[[b, t]] == bumped.p[[b, t]];
                if (b, t) == (1, 1) {
                    assert!(!same);
                } else {
                    assert!(same, "cell ({b},{t}) changed unexpectedly");
                }
            }
        }
    }

    #[test]
    fn point_mass_metrics() {
        // p ~ 1, retail collapses to k=12: v_total -> n * 12
        let mut params = MixtureParams::zeros(1, 1);
        params.p[[0, 0]] = 1.0;
        params.mu_ret[[0, 0]] = 12.0f64.ln();
        params.sigma_ret[[0, 0]] = 1e-9;
        params.mu_ws[[0, 0]] = 4.5;
        params.sigma_ws[[0, 0]] = 3.0;
        let n_accounts = Array2::from_elem((1, 1), 1000.0);
        let cfg = DgmConfig::default();
        let sim = simulate_metrics(&params, &n_accounts, &[250.0], &cfg).unwrap();
        assert!((sim.v_total[[0, 0]] - 12_000.0).abs() < 1e-6);
        assert!((sim.v_small_deposits[[0, 0]] - 12_000.0).abs() < 1e-6);
        assert!((sim.v_frac_small[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_limit_empties_small_metrics() {
        let mut params = MixtureParams::zeros(1, 1);
        params.p[[0, 0]] = 0.5;
        params.mu_ret[[0, 0]] = 1.2;
        params.sigma_ret[[0, 0]] = 1.3;
        params.mu_ws[[0, 0]] = 4.5;
        params.sigma_ws[[0, 0]] = 3.0;
        let n_accounts = Array2::from_elem((1, 1), 1000.0);
        let cfg = DgmConfig::default();
        let sim = simulate_metrics(&params, &n_accounts, &[1e-12], &cfg).unwrap();
        assert!(sim.v_small_deposits[[0, 0]].abs() < 1e-9);
        assert!(sim.v_frac_small[[0, 0]] < 1e-9);
    }

    #[test]
    fn analytic_and_monte_carlo_metrics_agree_within_three_standard_errors() {
        let mut params = MixtureParams::zeros(1, 1);
        params.p[[0, 0]] = 0.7;
        params.mu_ret[[0, 0]] = 1.2;
        params.sigma_ret[[0, 0]] = 1.3;
        params.mu_ws[[0, 0]] = 4.5;
        params.sigma_ws[[0, 0]] = 3.0;
        let n_accounts = Array2::from_elem((1, 1), 1e5);
        let limits = [100.0];

        let analytic = simulate_metrics(&params, &n_accounts, &limits, &DgmConfig::default()).unwrap();
        let mc_cfg = DgmConfig {
            metric_mode: MetricMode::MonteCarlo,
            n_samples: 10_000,
            seed: 7,
            ..DgmConfig::default()
        };
        let mc = simulate_metrics(&params, &n_accounts, &limits, &mc_cfg).unwrap();

        let ret = Lognormal::new(1.2, 1.3).unwrap();
        let ws = Lognormal::new(4.5, 3.0).unwrap();
        let n = 1e5;
        let p = 0.7;
        // SE(v_total) = n * sqrt(p^2 Var_ret + q^2 Var_ws) / sqrt(n_samples)
        let se_total = n
            * ((p * p * ret.variance() + (1.0 - p) * (1.0 - p) * ws.variance())
                / mc_cfg.n_samples as f64)
                .sqrt();
        let se_small = n
            * ((p * p * ret.truncated_term_variance(100.0)
                + (1.0 - p) * (1.0 - p) * ws.truncated_term_variance(100.0))
                / mc_cfg.n_samples as f64)
                .sqrt();
        assert!(
            (mc.v_total[[0, 0]] - analytic.v_total[[0, 0]]).abs() < 3.0 * se_total,
            "total: mc {} vs analytic {} (3se {})",
            mc.v_total[[0, 0]],
            analytic.v_total[[0, 0]],
            3.0 * se_total
        );
        assert!(
            (mc.v_small_deposits[[0, 0]] - analytic.v_small_deposits[[0, 0]]).abs()
                < 3.0 * se_small,
            "small: mc {} vs analytic {}",
            mc.v_small_deposits[[0, 0]],
            analytic.v_small_deposits[[0, 0]]
        );
        // the fraction metric has no sampling component
        assert!((mc.v_frac_small[[0, 0]] - analytic.v_frac_small[[0, 0]]).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_when_analytic_metrics_match_observations() {
        // build a panel whose metrics are exactly the analytic expectations
        // of known parameters, then evaluate the loss at those parameters
        let mut params = MixtureParams::zeros(1, 1);
        params.p[[0, 0]] = 0.6;
        params.mu_ret[[0, 0]] = 1.4;
        params.sigma_ret[[0, 0]] = 1.2;
        params.mu_ws[[0, 0]] = 4.6;
        params.sigma_ws[[0, 0]] = 2.8;
        let n_accounts = Array2::from_elem((1, 1), 5_000.0);
        let cfg = DgmConfig { lambda: 0.0, ..DgmConfig::default() };
        let q = Quarter::new(2019, 4).unwrap();
        let limit = 250.0;
        let sim = simulate_metrics(&params, &n_accounts, &[limit], &cfg).unwrap();

        let panel = BankPanel {
            banks: vec!["b".into()],
            quarters: vec![q],
            features: Array3::zeros((1, 1, N_FEATURES)),
            metrics: {
                let mut m = Array3::zeros((1, 1, 3));
                m[[0, 0, 0]] = sim.v_total[[0, 0]];
                m[[0, 0, 1]] = sim.v_small_deposits[[0, 0]];
                m[[0, 0, 2]] = sim.v_frac_small[[0, 0]];
                m
            },
            n_accounts,
            mask: Array2::from_elem((1, 1), true),
        };
        let prior = PriorSchedule::linear(1, PriorEndpoints::default(), 0.0).unwrap();
        let (breakdown, grads) = loss(&panel, &params, &prior, &cfg, 0).unwrap();
        assert!(breakdown.samples < 1e-20, "samples loss {}", breakdown.samples);
        assert_eq!(breakdown.constrain, 0.0);
        // at the optimum the sample gradients vanish too
        assert!(grads.p[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn constraint_is_zero_at_prior_values() {
        let n_t = 3;
        let prior = PriorSchedule::linear(n_t, PriorEndpoints::default(), 0.05).unwrap();
        let mut params = MixtureParams::zeros(2, n_t);
        for b in 0..2 {
            for t in 0..n_t {
                params.p[[b, t]] = 0.5;
                params.mu_ret[[b, t]] = prior.mu0_ret[t];
                params.sigma_ret[[b, t]] = prior.sigma0_ret[t];
                params.mu_ws[[b, t]] = prior.mu0_ws[t];
                params.sigma_ws[[b, t]] = prior.sigma0_ws[t];
            }
        }
        let panel = small_panel(2, n_t, 15);
        let cfg = DgmConfig::default();
        let (breakdown, _) = loss(&panel, &params, &prior, &cfg, 0).unwrap();
        assert_eq!(breakdown.constrain, 0.0);
        assert!(breakdown.samples > 0.0);
    }

    #[test]
    fn single_cell_lambda_zero_loss_is_mean_squared_residual() {
        let panel = small_panel(1, 1, 99);
        let mut params = MixtureParams::zeros(1, 1);
        params.p[[0, 0]] = 0.4;
        params.mu_ret[[0, 0]] = 1.3;
        params.sigma_ret[[0, 0]] = 1.4;
        params.mu_ws[[0, 0]] = 4.4;
        params.sigma_ws[[0, 0]] = 2.9;
        let cfg = DgmConfig { lambda: 0.0, ..DgmConfig::default() };
        let prior = PriorSchedule::linear(1, PriorEndpoints::default(), 0.0).unwrap();
        let (breakdown, _) = loss(&panel, &params, &prior, &cfg, 0).unwrap();

        // recompute by hand
        let limit = 250.0;
        let sim = simulate_metrics(&params, &panel.n_accounts, &[limit], &cfg).unwrap();
        let x_tot = panel.metrics[[0, 0, 0]];
        let e0 = (x_tot - sim.v_total[[0, 0]]) / x_tot;
        let e1 = (panel.metrics[[0, 0, 1]] - sim.v_small_deposits[[0, 0]]) / x_tot;
        let e2 = panel.metrics[[0, 0, 2]] - sim.v_frac_small[[0, 0]];
        let want = e0 * e0 + e1 * e1 + e2 * e2;
        assert!((breakdown.total() - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn masked_cells_contribute_nothing() {
        let mut panel = small_panel(2, 2, 31);
        let params = {
            let mut p = MixtureParams::zeros(2, 2);
            for b in 0..2 {
                for t in 0..2 {
                    p.p[[b, t]] = 0.5;
                    p.mu_ret[[b, t]] = 1.3;
                    p.sigma_ret[[b, t]] = 1.4;
                    p.mu_ws[[b, t]] = 4.7;
                    p.sigma_ws[[b, t]] = 3.2;
                }
            }
            p
        };
        let cfg = DgmConfig::default();
        let prior = PriorSchedule::linear(2, PriorEndpoints::default(), cfg.lambda).unwrap();
        let (full, _) = loss(&panel, &params, &prior, &cfg, 0).unwrap();
        panel.mask[[1, 1]] = false;
        // poison the masked cell: must not reach the loss
        panel.metrics[[1, 1, 0]] = f64::NAN;
        let (masked, grads) = loss(&panel, &params, &prior, &cfg, 0).unwrap();
        assert!(masked.total() < full.total());
        assert!(masked.total().is_finite());
        assert_eq!(grads.p[[1, 1]], 0.0);
        assert_eq!(grads.mu_ws[[1, 1]], 0.0);
    }
}
