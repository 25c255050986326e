//! Text checkpoint for trained models: a config echo, the frozen
//! normalization statistics, the training window, and every network's
//! parameters. Floats are written in Rust's shortest round-trip form, so a
//! reloaded checkpoint is bit-identical to the saved one.
//!
//! Layout (line oriented, space separated):
//!
//! ```text
//! depsplit-checkpoint v1
//! seed 42
//! n_samples 10000
//! n_inference_trials 10
//! lambda 0.05
//! metric_mode analytic
//! lr 0.001
//! steps 5000
//! weight_decay 0
//! clip_norm 10            # or `none`
//! prior_mu_ret 1.2 1.5
//! prior_sigma_ret 1.3 1.5
//! prior_mu_ws 4.5 5
//! prior_sigma_ws 3 3.5
//! norm_mean m0 m1 m2      # omitted when no stats were frozen
//! norm_std s0 s1 s2
//! train_quarters 2000Q1 2019Q4
//! net retail 6 50 2
//! <452 parameter values on one line>
//! net wholesale 6 50 2
//! ...
//! net p 6 50 1
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::dgm::{DgmConfig, DgmNets, MetricMode};
use crate::ingest::NormStats;
use crate::mlp::{Mlp, HIDDEN};
use crate::panel::PriorEndpoints;
use crate::quarter::Quarter;
use crate::{Error, Result};

const MAGIC: &str = "depsplit-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DgmConfig,
    pub norm_stats: Option<NormStats>,
    pub train_quarters: (Quarter, Quarter),
    pub nets: DgmNets,
}

fn write_net(out: &mut String, name: &str, net: &Mlp) {
    writeln!(out, "net {} {} {} {}", name, net.n_in(), HIDDEN, net.n_out()).unwrap();
    let params = net.params();
    let mut line = String::with_capacity(params.len() * 20);
    for (i, p) in params.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{p}").unwrap();
    }
    out.push_str(&line);
    out.push('\n');
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let cfg = &ckpt.config;
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "seed {}", cfg.seed).unwrap();
    writeln!(out, "n_samples {}", cfg.n_samples).unwrap();
    writeln!(out, "n_inference_trials {}", cfg.n_inference_trials).unwrap();
    writeln!(out, "lambda {}", cfg.lambda).unwrap();
    writeln!(out, "metric_mode {}", cfg.metric_mode).unwrap();
    writeln!(out, "lr {}", cfg.lr).unwrap();
    writeln!(out, "steps {}", cfg.steps).unwrap();
    writeln!(out, "weight_decay {}", cfg.weight_decay).unwrap();
    match cfg.clip_norm {
        Some(c) => writeln!(out, "clip_norm {c}").unwrap(),
        None => writeln!(out, "clip_norm none").unwrap(),
    }
    writeln!(out, "prior_mu_ret {} {}", cfg.prior.mu_ret.0, cfg.prior.mu_ret.1).unwrap();
    writeln!(out, "prior_sigma_ret {} {}", cfg.prior.sigma_ret.0, cfg.prior.sigma_ret.1).unwrap();
    writeln!(out, "prior_mu_ws {} {}", cfg.prior.mu_ws.0, cfg.prior.mu_ws.1).unwrap();
    writeln!(out, "prior_sigma_ws {} {}", cfg.prior.sigma_ws.0, cfg.prior.sigma_ws.1).unwrap();
    if let Some(stats) = &ckpt.norm_stats {
        writeln!(out, "norm_mean {} {} {}", stats.mean[0], stats.mean[1], stats.mean[2]).unwrap();
        writeln!(out, "norm_std {} {} {}", stats.std[0], stats.std[1], stats.std[2]).unwrap();
    }
    writeln!(out, "train_quarters {} {}", ckpt.train_quarters.0, ckpt.train_quarters.1).unwrap();
    write_net(&mut out, "retail", &ckpt.nets.retail);
    write_net(&mut out, "wholesale", &ckpt.nets.wholesale);
    write_net(&mut out, "p", &ckpt.nets.p_net);
    std::fs::write(path, out)?;
    Ok(())
}

struct Parser<'a> {
    path: String,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Parser<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::ParseRow {
                path: self.path.clone(),
                row: 0,
                msg: "unexpected end of checkpoint".into(),
            })
    }

    fn err(&self, row: usize, msg: impl Into<String>) -> Error {
        Error::ParseRow {
            path: self.path.clone(),
            row,
            msg: msg.into(),
        }
    }

    /// Next line as `key <rest>`, enforcing the expected key.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (row, line) = self.next_line()?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| if r.is_empty() { Some("") } else { r.strip_prefix(' ') })
            .ok_or_else(|| self.err(row, format!("expected `{key} ...`, found `{line}`")))?;
        Ok((row, rest))
    }

    fn parse_f64(&self, row: usize, s: &str, what: &str) -> Result<f64> {
        s.parse()
            .map_err(|_| self.err(row, format!("{what}: `{s}` is not a number")))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let mut p = Parser {
        path: path.display().to_string(),
        lines: text.lines().enumerate(),
    };

    let (row, magic) = p.next_line()?;
    if magic != MAGIC {
        return Err(p.err(row, format!("not a checkpoint file (header `{magic}`)")));
    }
    let (row, seed) = p.keyed("seed")?;
    let seed: u64 = seed.parse().map_err(|_| p.err(row, "bad seed"))?;
    let (row, v) = p.keyed("n_samples")?;
    let n_samples: usize = v.parse().map_err(|_| p.err(row, "bad n_samples"))?;
    let (row, v) = p.keyed("n_inference_trials")?;
    let n_inference_trials: usize = v.parse().map_err(|_| p.err(row, "bad n_inference_trials"))?;
    let (row, v) = p.keyed("lambda")?;
    let lambda = p.parse_f64(row, v, "lambda")?;
    let (row, v) = p.keyed("metric_mode")?;
    let metric_mode: MetricMode = v.parse().map_err(|_| p.err(row, "bad metric_mode"))?;
    let (row, v) = p.keyed("lr")?;
    let lr = p.parse_f64(row, v, "lr")?;
    let (row, v) = p.keyed("steps")?;
    let steps: usize = v.parse().map_err(|_| p.err(row, "bad steps"))?;
    let (row, v) = p.keyed("weight_decay")?;
    let weight_decay = p.parse_f64(row, v, "weight_decay")?;
    let (row, v) = p.keyed("clip_norm")?;
    let clip_norm = if v == "none" {
        None
    } else {
        Some(p.parse_f64(row, v, "clip_norm")?)
    };

    let mut pair = |key: &str| -> Result<(f64, f64)> {
        let (row, v) = p.keyed(key)?;
        let mut it = v.split_whitespace();
        let a = it.next().ok_or_else(|| p.err(row, format!("{key}: missing value")))?;
        let b = it.next().ok_or_else(|| p.err(row, format!("{key}: missing value")))?;
        Ok((p.parse_f64(row, a, key)?, p.parse_f64(row, b, key)?))
    };
    let prior = PriorEndpoints {
        mu_ret: pair("prior_mu_ret")?,
        sigma_ret: pair("prior_sigma_ret")?,
        mu_ws: pair("prior_mu_ws")?,
        sigma_ws: pair("prior_sigma_ws")?,
    };

    // optional normalization stats, then the training window
    let (row, line) = p.next_line()?;
    let (norm_stats, train_line, train_row) = if let Some(rest) = line.strip_prefix("norm_mean ") {
        let mean = parse_triple(&p, row, rest, "norm_mean")?;
        let (row2, v) = p.keyed("norm_std")?;
        let std = parse_triple(&p, row2, v, "norm_std")?;
        let (row3, t) = p.keyed("train_quarters")?;
        (Some(NormStats { mean, std }), t, row3)
    } else if let Some(rest) = line.strip_prefix("train_quarters") {
        (None, rest.trim_start(), row)
    } else {
        return Err(p.err(row, format!("expected `norm_mean` or `train_quarters`, found `{line}`")));
    };
    let mut it = train_line.split_whitespace();
    let q_start: Quarter = it
        .next()
        .ok_or_else(|| p.err(train_row, "train_quarters: missing start"))?
        .parse()?;
    let q_end: Quarter = it
        .next()
        .ok_or_else(|| p.err(train_row, "train_quarters: missing end"))?
        .parse()?;

    let mut read_net = |name: &str| -> Result<Mlp> {
        let (row, v) = p.keyed("net")?;
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != name {
            return Err(p.err(row, format!("expected `net {name} <in> <hidden> <out>`, found `net {v}`")));
        }
        let n_in: usize = parts[1].parse().map_err(|_| p.err(row, "bad input width"))?;
        let hidden: usize = parts[2].parse().map_err(|_| p.err(row, "bad hidden width"))?;
        let n_out: usize = parts[3].parse().map_err(|_| p.err(row, "bad output width"))?;
        if hidden != HIDDEN {
            return Err(p.err(row, format!("hidden width {hidden} unsupported (expected {HIDDEN})")));
        }
        let (vrow, values) = p.next_line()?;
        let flat: Vec<f64> = values
            .split_whitespace()
            .map(|s| p.parse_f64(vrow, s, "parameter"))
            .collect::<Result<_>>()?;
        Mlp::from_params(n_in, n_out, &flat)
    };
    let retail = read_net("retail")?;
    let wholesale = read_net("wholesale")?;
    let p_net = read_net("p")?;

    Ok(Checkpoint {
        config: DgmConfig {
            n_samples,
            n_inference_trials,
            lambda,
            metric_mode,
            seed,
            lr,
            steps,
            weight_decay,
            clip_norm,
            prior,
        },
        norm_stats,
        train_quarters: (q_start, q_end),
        nets: DgmNets {
            retail,
            wholesale,
            p_net,
        },
    })
}

fn parse_triple(p: &Parser, row: usize, s: &str, what: &str) -> Result<[f64; 3]> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|v| p.parse_f64(row, v, what))
        .collect::<Result<_>>()?;
    if vals.len() != 3 {
        return Err(Error::ParseRow {
            path: String::new(),
            row,
            msg: format!("{what}: expected 3 values, got {}", vals.len()),
        });
    }
    Ok([vals[0], vals[1], vals[2]])
}
