//! Full-batch SGD over the unmasked cells. Gradients reach the networks
//! through the parameter transforms; a global-norm clip keeps the early
//! steps stable while the prior pulls the distribution heads into place.

use ndarray::Array2;

use super::{
    flatten_features, loss, parameterize, DgmConfig, DgmNets, LossBreakdown, MixtureGrads,
    TAG_NET,
};
use crate::mlp::{Mlp, MlpGrads};
use crate::panel::{BankPanel, MixtureParams, PriorEndpoints, PriorSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct FitResult {
    pub nets: DgmNets,
    pub params: MixtureParams,
    /// Loss before each step, plus the final loss.
    pub trace: Vec<f64>,
    pub prior: PriorSchedule,
}

/// Per-network gradients of the total loss.
#[derive(Debug, Clone)]
pub struct DgmNetGrads {
    pub retail: MlpGrads,
    pub wholesale: MlpGrads,
    pub p_net: MlpGrads,
}

/// Loss as a function of the network parameters (forward + transforms +
/// metric simulation). Used directly by finite-difference checks.
pub fn net_loss(
    nets: &DgmNets,
    panel: &BankPanel,
    prior: &PriorSchedule,
    cfg: &DgmConfig,
    sample_epoch: u64,
) -> Result<LossBreakdown> {
    let params = parameterize(nets, &panel.features)?;
    Ok(loss(panel, &params, prior, cfg, sample_epoch)?.0)
}

/// Loss plus exact gradients w.r.t. every parameter of the three networks.
pub fn net_loss_and_grads(
    nets: &DgmNets,
    panel: &BankPanel,
    prior: &PriorSchedule,
    cfg: &DgmConfig,
    sample_epoch: u64,
) -> Result<(LossBreakdown, DgmNetGrads)> {
    let x = flatten_features(&panel.features);
    net_loss_and_grads_flat(nets, panel, &x, prior, cfg, sample_epoch)
}

fn net_loss_and_grads_flat(
    nets: &DgmNets,
    panel: &BankPanel,
    x: &Array2<f64>,
    prior: &PriorSchedule,
    cfg: &DgmConfig,
    sample_epoch: u64,
) -> Result<(LossBreakdown, DgmNetGrads)> {
    let (n_b, n_t) = (panel.n_banks(), panel.n_quarters());
    let (ret_out, ret_cache) = nets.retail.forward_cached(x)?;
    let (ws_out, ws_cache) = nets.wholesale.forward_cached(x)?;
    let (p_out, p_cache) = nets.p_net.forward_cached(x)?;

    let mut params = MixtureParams::zeros(n_b, n_t);
    for b in 0..n_b {
        for t in 0..n_t {
            let c = b * n_t + t;
            let finite = ret_out[[c, 0]].is_finite()
                && ret_out[[c, 1]].is_finite()
                && ws_out[[c, 0]].is_finite()
                && ws_out[[c, 1]].is_finite()
                && p_out[[c, 0]].is_finite();
            if !finite {
                return Err(Error::Diverged(format!(
                    "non-finite network output for bank `{}` in {}",
                    panel.banks[b], panel.quarters[t]
                )));
            }
            params.mu_ret[[b, t]] = ret_out[[c, 0]];
            params.sigma_ret[[b, t]] = ret_out[[c, 1]].exp();
            params.mu_ws[[b, t]] = ws_out[[c, 0]];
            params.sigma_ws[[b, t]] = ws_out[[c, 1]].exp();
            params.p[[b, t]] = super::sigmoid(p_out[[c, 0]]);
        }
    }

    let (breakdown, grads) = loss(panel, &params, prior, cfg, sample_epoch)?;
    let (up_ret, up_ws, up_p) = chain_upstream(&params, &grads, n_b, n_t);
    Ok((
        breakdown,
        DgmNetGrads {
            retail: nets.retail.backward(&ret_cache, &up_ret)?,
            wholesale: nets.wholesale.backward(&ws_cache, &up_ws)?,
            p_net: nets.p_net.backward(&p_cache, &up_p)?,
        },
    ))
}

/// Chain rule through the output transforms: the sigma heads emit log sigma
/// and the p head emits a logit.
fn chain_upstream(
    params: &MixtureParams,
    grads: &MixtureGrads,
    n_b: usize,
    n_t: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let cells = n_b * n_t;
    let mut up_ret = Array2::zeros((cells, 2));
    let mut up_ws = Array2::zeros((cells, 2));
    let mut up_p = Array2::zeros((cells, 1));
    for b in 0..n_b {
        for t in 0..n_t {
            let c = b * n_t + t;
            up_ret[[c, 0]] = grads.mu_ret[[b, t]];
            up_ret[[c, 1]] = grads.sigma_ret[[b, t]] * params.sigma_ret[[b, t]];
            up_ws[[c, 0]] = grads.mu_ws[[b, t]];
            up_ws[[c, 1]] = grads.sigma_ws[[b, t]] * params.sigma_ws[[b, t]];
            let p = params.p[[b, t]];
            up_p[[c, 0]] = grads.p[[b, t]] * p * (1.0 - p);
        }
    }
    (up_ret, up_ws, up_p)
}

fn apply_update(nets: &mut DgmNets, mut grads: DgmNetGrads, cfg: &DgmConfig) {
    nets.retail.add_weight_decay(&mut grads.retail, cfg.weight_decay);
    nets.wholesale.add_weight_decay(&mut grads.wholesale, cfg.weight_decay);
    nets.p_net.add_weight_decay(&mut grads.p_net, cfg.weight_decay);
    if let Some(clip) = cfg.clip_norm {
        let norm = (grads.retail.param_norm_sq()
            + grads.wholesale.param_norm_sq()
            + grads.p_net.param_norm_sq())
        .sqrt();
        if norm > clip {
            let s = clip / norm;
            grads.retail.scale(s);
            grads.wholesale.scale(s);
            grads.p_net.scale(s);
        }
    }
    nets.retail.sgd_step(&grads.retail, cfg.lr);
    nets.wholesale.sgd_step(&grads.wholesale, cfg.lr);
    nets.p_net.sgd_step(&grads.p_net, cfg.lr);
}

fn diverged_with_trace(err: Error, step: usize, trace: &[f64]) -> Error {
    match err {
        Error::Diverged(msg) => {
            let tail: Vec<String> = trace
                .iter()
                .rev()
                .take(5)
                .rev()
                .map(|l| format!("{l:.6}"))
                .collect();
            Error::Diverged(format!(
                "step {step}: {msg}; recent loss trace [{}]",
                tail.join(", ")
            ))
        }
        other => other,
    }
}

/// Trains the three networks with the default prior schedule interpolated
/// across the panel's quarters.
pub fn fit(panel: &BankPanel, cfg: &DgmConfig) -> Result<FitResult> {
    let prior = PriorSchedule::linear(panel.n_quarters(), cfg.prior, cfg.lambda)?;
    fit_with_prior(panel, cfg, prior)
}

pub fn fit_with_prior(
    panel: &BankPanel,
    cfg: &DgmConfig,
    prior: PriorSchedule,
) -> Result<FitResult> {
    cfg.validate()?;
    prior.validate()?;
    if prior.n_quarters() != panel.n_quarters() {
        return Err(Error::Shape(format!(
            "prior schedule covers {} quarters, panel has {}",
            prior.n_quarters(),
            panel.n_quarters()
        )));
    }
    if panel.present_cells() == 0 {
        return Err(Error::InsufficientData("panel has no unmasked cells".into()));
    }
    let x = flatten_features(&panel.features);
    let mut nets = DgmNets::init(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (breakdown, grads) =
            net_loss_and_grads_flat(&nets, panel, &x, &prior, cfg, step as u64)
                .map_err(|e| diverged_with_trace(e, step, &trace))?;
        trace.push(breakdown.total());
        apply_update(&mut nets, grads, cfg);
    }
    let params = parameterize(&nets, &panel.features)
        .map_err(|e| diverged_with_trace(e, cfg.steps, &trace))?;
    let (final_loss, _) = loss(panel, &params, &prior, cfg, cfg.steps as u64)
        .map_err(|e| diverged_with_trace(e, cfg.steps, &trace))?;
    trace.push(final_loss.total());
    Ok(FitResult {
        nets,
        params,
        trace,
        prior,
    })
}

#[derive(Debug, Clone)]
pub struct SingleFitResult {
    pub net: Mlp,
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub trace: Vec<f64>,
}

/// Fits the one-distribution variant (p held at 1, no prior term) used to
/// validate that two bank subsets live on separate distributions.
pub fn fit_single(panel: &BankPanel, cfg: &DgmConfig) -> Result<SingleFitResult> {
    cfg.validate()?;
    if panel.present_cells() == 0 {
        return Err(Error::InsufficientData("panel has no unmasked cells".into()));
    }
    let (n_b, n_t) = (panel.n_banks(), panel.n_quarters());
    let cells = n_b * n_t;
    let x = flatten_features(&panel.features);
    // lambda plays no role without a second distribution to separate from
    let cfg_single = DgmConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let prior = PriorSchedule::linear(n_t, PriorEndpoints::default(), 0.0)?;
    let mut net = Mlp::new(
        crate::panel::N_FEATURES,
        2,
        &mut crate::rng::derive(cfg.seed, &[TAG_NET, 3]),
    );
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    let make_params = |out: &Array2<f64>| -> Result<MixtureParams> {
        let mut params = MixtureParams::zeros(n_b, n_t);
        for b in 0..n_b {
            for t in 0..n_t {
                let c = b * n_t + t;
                if !out[[c, 0]].is_finite() || !out[[c, 1]].is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite network output for bank `{}` in {}",
                        panel.banks[b], panel.quarters[t]
                    )));
                }
                params.p[[b, t]] = 1.0;
                params.mu_ret[[b, t]] = out[[c, 0]];
                params.sigma_ret[[b, t]] = out[[c, 1]].exp();
                // inert placeholder component, weighted by 1 - p = 0
                params.mu_ws[[b, t]] = 0.0;
                params.sigma_ws[[b, t]] = 1.0;
            }
        }
        Ok(params)
    };

    for step in 0..cfg.steps {
        let (out, cache) = net.forward_cached(&x)?;
        let params = make_params(&out).map_err(|e| diverged_with_trace(e, step, &trace))?;
        let (breakdown, grads) = loss(panel, &params, &prior, &cfg_single, step as u64)
            .map_err(|e| diverged_with_trace(e, step, &trace))?;
        trace.push(breakdown.total());
        let mut upstream = Array2::zeros((cells, 2));
        for b in 0..n_b {
            for t in 0..n_t {
                let c = b * n_t + t;
                upstream[[c, 0]] = grads.mu_ret[[b, t]];
                upstream[[c, 1]] = grads.sigma_ret[[b, t]] * params.sigma_ret[[b, t]];
            }
        }
        let mut g = net.backward(&cache, &upstream)?;
        net.add_weight_decay(&mut g, cfg.weight_decay);
        if let Some(clip) = cfg.clip_norm {
            let norm = g.param_norm_sq().sqrt();
            if norm > clip {
                g.scale(clip / norm);
            }
        }
        net.sgd_step(&g, cfg.lr);
    }

    let out = net.forward(&x)?;
    let params = make_params(&out).map_err(|e| diverged_with_trace(e, cfg.steps, &trace))?;
    let (final_loss, _) = loss(panel, &params, &prior, &cfg_single, cfg.steps as u64)
        .map_err(|e| diverged_with_trace(e, cfg.steps, &trace))?;
    trace.push(final_loss.total());
    Ok(SingleFitResult {
        net,
        mu: params.mu_ret,
        sigma: params.sigma_ret,
        trace,
    })
}
