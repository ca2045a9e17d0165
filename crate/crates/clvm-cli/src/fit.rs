//! `clvm fit`: one command in front of all three engines.

use std::path::Path;

use clap::Args;
use clvm::clvm_em::{fit_em, EmOptions};
use clvm::cvae::{fit_cvae, CvaeOptions};
use clvm::data_model::{load_labels, load_pair, standardize, ContrastivePair, Standardize};
use clvm::error::{ClvmError, Result};
use clvm::model_io::{save_model, ModelDocument};
use clvm::variants::{prune_rows, RowGroups};
use clvm::vi_engine::{fit_vi, Likelihood, ModelSpec, SPrior, Sigma2Mode, ViOptions, WPrior};
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, resolve, setup_runtime, write_json};
use crate::latents::{write_latents, LatentTable};
use crate::overrides;

#[derive(Args)]
pub struct FitArgs {
    /// JSON config file; explicit flags override its keys
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub background: Option<String>,
    /// Optional labels CSV copied into the latent table
    #[arg(long)]
    pub labels: Option<String>,
    /// em | vi | cvae
    #[arg(long)]
    pub engine: Option<String>,
    /// Shared factors
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Target-specific factors
    #[arg(short, long)]
    pub t: Option<usize>,
    /// none | center | zscore
    #[arg(long)]
    pub standardize: Option<String>,
    /// gaussian | student-t (vi engine)
    #[arg(long)]
    pub likelihood: Option<String>,
    #[arg(long)]
    pub st_a: Option<f64>,
    #[arg(long)]
    pub st_b: Option<f64>,
    /// none | group | horseshoe (vi engine)
    #[arg(long)]
    pub w_prior: Option<String>,
    /// Group-penalty strength
    #[arg(long)]
    pub rho: Option<f64>,
    /// JSON file with row groups as a list of index lists; default one group per row
    #[arg(long)]
    pub groups: Option<String>,
    /// Global scale of the row-sparsity prior
    #[arg(long)]
    pub b_g: Option<f64>,
    /// none | ard (vi engine)
    #[arg(long)]
    pub s_prior: Option<String>,
    #[arg(long)]
    pub ard_a0: Option<f64>,
    #[arg(long)]
    pub ard_b0: Option<f64>,
    /// point | variational (vi engine noise treatment)
    #[arg(long)]
    pub sigma2: Option<String>,
    #[arg(long)]
    pub sigma2_a: Option<f64>,
    #[arg(long)]
    pub sigma2_b: Option<f64>,
    /// Row-pruning scale threshold under the horseshoe
    #[arg(long)]
    pub prune_delta: Option<f64>,
    /// Row-pruning posterior probability threshold
    #[arg(long)]
    pub prune_p0: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Monte Carlo samples per gradient step (vi engine)
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs (cvae engine)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size (cvae engine)
    #[arg(long)]
    pub batch: Option<usize>,
    /// Encoder widths, comma-separated (cvae engine)
    #[arg(long, value_delimiter = ',')]
    pub enc_hidden: Option<Vec<usize>>,
    /// Decoder widths, comma-separated (cvae engine)
    #[arg(long, value_delimiter = ',')]
    pub dec_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Force sequential execution regardless of thread count
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub target: Option<String>,
    pub background: Option<String>,
    pub labels: Option<String>,
    pub engine: String,
    pub k: usize,
    pub t: usize,
    pub standardize: String,
    pub likelihood: String,
    pub st_a: f64,
    pub st_b: f64,
    pub w_prior: String,
    pub rho: f64,
    pub groups: Option<String>,
    pub b_g: f64,
    pub s_prior: String,
    pub ard_a0: f64,
    pub ard_b0: f64,
    pub sigma2: String,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub prune_delta: f64,
    pub prune_p0: f64,
    pub max_iter: Option<usize>,
    pub rel_tol: Option<f64>,
    pub n_mc: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub enc_hidden: Option<Vec<usize>>,
    pub dec_hidden: Option<Vec<usize>>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub out_dir: String,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            target: None,
            background: None,
            labels: None,
            engine: "em".into(),
            k: 2,
            t: 2,
            standardize: "zscore".into(),
            likelihood: "gaussian".into(),
            st_a: 2.0,
            st_b: 2.0,
            w_prior: "none".into(),
            rho: 400.0,
            groups: None,
            b_g: 1.0,
            s_prior: "none".into(),
            ard_a0: 1e-3,
            ard_b0: 1e-3,
            sigma2: "point".into(),
            sigma2_a: 1e-3,
            sigma2_b: 1e-3,
            prune_delta: 1e-3,
            prune_p0: 0.9,
            max_iter: None,
            rel_tol: None,
            n_mc: None,
            lr: None,
            epochs: None,
            batch: None,
            enc_hidden: None,
            dec_hidden: None,
            seed: 0,
            threads: None,
            deterministic: false,
            out_dir: ".".into(),
        }
    }
}

pub fn overrides_from_args(args: &FitArgs) -> serde_json::Value {
    overrides! {
        "target" => args.target.clone(),
        "background" => args.background.clone(),
        "labels" => args.labels.clone(),
        "engine" => args.engine.clone(),
        "k" => args.k,
        "t" => args.t,
        "standardize" => args.standardize.clone(),
        "likelihood" => args.likelihood.clone(),
        "st_a" => args.st_a,
        "st_b" => args.st_b,
        "w_prior" => args.w_prior.clone(),
        "rho" => args.rho,
        "groups" => args.groups.clone(),
        "b_g" => args.b_g,
        "s_prior" => args.s_prior.clone(),
        "ard_a0" => args.ard_a0,
        "ard_b0" => args.ard_b0,
        "sigma2" => args.sigma2.clone(),
        "sigma2_a" => args.sigma2_a,
        "sigma2_b" => args.sigma2_b,
        "prune_delta" => args.prune_delta,
        "prune_p0" => args.prune_p0,
        "max_iter" => args.max_iter,
        "rel_tol" => args.rel_tol,
        "n_mc" => args.n_mc,
        "lr" => args.lr,
        "epochs" => args.epochs,
        "batch" => args.batch,
        "enc_hidden" => args.enc_hidden.clone(),
        "dec_hidden" => args.dec_hidden.clone(),
        "seed" => args.seed,
        "threads" => args.threads,
        "deterministic" => args.deterministic.then_some(true),
        "out_dir" => args.out_dir.clone(),
    }
}

/// Everything one engine run produces; `fit` writes it out, `sweep` keeps
/// it in memory.
pub struct FitOutput {
    pub doc: ModelDocument,
    pub table: LatentTable,
    pub trace_lines: Vec<String>,
    pub objective: f64,
}

pub fn load_inputs(cfg: &FitConfig) -> Result<(ContrastivePair, Option<Vec<i64>>)> {
    let target = cfg
        .target
        .as_deref()
        .ok_or_else(|| ClvmError::Config("--target is required".into()))?;
    let background = cfg
        .background
        .as_deref()
        .ok_or_else(|| ClvmError::Config("--background is required".into()))?;
    let pair = load_pair(Path::new(target), Path::new(background), &["NA", "nan", "NaN"])?;
    let labels = match cfg.labels.as_deref() {
        Some(path) => {
            let l = load_labels(Path::new(path))?;
            if l.len() != pair.n() {
                return Err(ClvmError::MissingData(format!(
                    "labels file has {} rows but the target has {}",
                    l.len(),
                    pair.n()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok((pair, labels))
}

fn parse_likelihood(cfg: &FitConfig) -> Result<Likelihood> {
    match cfg.likelihood.as_str() {
        "gaussian" => Ok(Likelihood::Gaussian),
        "student-t" => Ok(Likelihood::StudentT {
            a: cfg.st_a,
            b: cfg.st_b,
        }),
        other => Err(ClvmError::Config(format!(
            "unknown likelihood {other:?} (expected gaussian|student-t)"
        ))),
    }
}

fn parse_w_prior(cfg: &FitConfig, d: usize) -> Result<WPrior> {
    match cfg.w_prior.as_str() {
        "none" => Ok(WPrior::None),
        "group" => {
            let groups = match cfg.groups.as_deref() {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let raw: Vec<Vec<usize>> =
                        serde_json::from_str(&text).map_err(|e| ClvmError::ParseRow {
                            row: e.line(),
                            msg: format!("groups file {path}: {e}"),
                        })?;
                    RowGroups::from_groups(raw, d)?
                }
                None => RowGroups::per_row(d),
            };
            Ok(WPrior::Group {
                rho: cfg.rho,
                groups,
            })
        }
        "horseshoe" => Ok(WPrior::Horseshoe { b_g: cfg.b_g }),
        other => Err(ClvmError::Config(format!(
            "unknown w-prior {other:?} (expected none|group|horseshoe)"
        ))),
    }
}

pub fn build_model_spec(cfg: &FitConfig, d: usize) -> Result<ModelSpec> {
    let s_prior = match cfg.s_prior.as_str() {
        "none" => SPrior::None,
        "ard" => SPrior::Ard {
            a0: cfg.ard_a0,
            b0: cfg.ard_b0,
        },
        other => {
            return Err(ClvmError::Config(format!(
                "unknown s-prior {other:?} (expected none|ard)"
            )))
        }
    };
    let sigma2 = match cfg.sigma2.as_str() {
        "point" => Sigma2Mode::Point,
        "variational" => Sigma2Mode::VariationalIg {
            a: cfg.sigma2_a,
            b: cfg.sigma2_b,
        },
        other => {
            return Err(ClvmError::Config(format!(
                "unknown sigma2 mode {other:?} (expected point|variational)"
            )))
        }
    };
    Ok(ModelSpec {
        d,
        k: cfg.k,
        t: cfg.t,
        likelihood: parse_likelihood(cfg)?,
        w_prior: parse_w_prior(cfg, d)?,
        s_prior,
        sigma2,
    })
}

/// Run the configured engine on an already-standardized pair.
pub fn run_engine(
    cfg: &FitConfig,
    pair: &ContrastivePair,
    scaling: clvm::data_model::ScalingParams,
    labels: Option<Vec<i64>>,
) -> Result<FitOutput> {
    let config_json = serde_json::to_value(cfg)
        .map_err(|e| ClvmError::Config(format!("cannot encode config: {e}")))?;
    match cfg.engine.as_str() {
        "em" => {
            let opts = EmOptions {
                max_iter: cfg.max_iter.unwrap_or(500),
                rel_tol: cfg.rel_tol.unwrap_or(1e-7),
                seed: cfg.seed,
            };
            let fit = fit_em(pair, cfg.k, cfg.t, &opts)?;
            let trace_lines = fit
                .trace
                .iter()
                .enumerate()
                .map(|(i, v)| format!("{{\"iter\":{i},\"loglik\":{v}}}"))
                .collect();
            let objective = *fit.trace.last().unwrap_or(&f64::NAN);
            let doc = ModelDocument::from_em(&fit, cfg.seed, scaling, config_json);
            Ok(FitOutput {
                doc,
                table: LatentTable {
                    t: cfg.t,
                    k: cfg.k,
                    target: fit.target_latents,
                    background: fit.background_latents,
                    labels,
                },
                trace_lines,
                objective,
            })
        }
        "vi" => {
            let spec = build_model_spec(cfg, pair.d())?;
            spec.validate(pair)?;
            let mut opts = ViOptions {
                seed: cfg.seed,
                ..Default::default()
            };
            if let Some(v) = cfg.max_iter {
                opts.max_iter = v;
            }
            if let Some(v) = cfg.rel_tol {
                opts.rel_tol = v;
            }
            if let Some(v) = cfg.n_mc {
                opts.n_mc = v;
            }
            if let Some(v) = cfg.lr {
                opts.lr = v;
            }
            let fit = fit_vi(&spec, pair, &opts)?;
            let pruned = match (fit.state.horseshoe_ln_rho2(), fit.state.horseshoe_ln_tau2()) {
                (Some(rho2), Some(tau2)) => {
                    let flags = prune_rows(&rho2, tau2, cfg.prune_delta, cfg.prune_p0)?;
                    Some(
                        flags
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &p)| p.then_some(i))
                            .collect::<Vec<_>>(),
                    )
                }
                _ => None,
            };
            // Wall-clock timings stay out of the trace file so reruns with the
            // same seed produce identical bytes.
            let trace_lines = fit
                .trace
                .iter()
                .map(|p| {
                    format!(
                        "{{\"iter\":{},\"elbo\":{},\"grad_norm\":{}}}",
                        p.iter, p.elbo, p.grad_norm
                    )
                })
                .collect();
            let objective = fit.final_elbo;
            let doc = ModelDocument::from_vi(&fit, &spec, cfg.seed, scaling, config_json, pruned);
            Ok(FitOutput {
                doc,
                table: LatentTable {
                    t: cfg.t,
                    k: cfg.k,
                    target: fit.target_latents,
                    background: fit.background_latents,
                    labels,
                },
                trace_lines,
                objective,
            })
        }
        "cvae" => {
            let mut opts = CvaeOptions {
                k: cfg.k,
                t: cfg.t,
                seed: cfg.seed,
                ..Default::default()
            };
            if let Some(v) = cfg.epochs {
                opts.epochs = v;
            }
            if let Some(v) = cfg.batch {
                opts.batch = v;
            }
            if let Some(v) = cfg.lr {
                opts.lr = v;
            }
            if let Some(v) = &cfg.enc_hidden {
                opts.enc_hidden = v.clone();
            }
            if let Some(v) = &cfg.dec_hidden {
                opts.dec_hidden = v.clone();
            }
            let fit = fit_cvae(pair, &opts)?;
            let trace_lines = fit
                .trace
                .iter()
                .enumerate()
                .map(|(e, v)| format!("{{\"epoch\":{e},\"elbo\":{v}}}"))
                .collect();
            let objective = *fit.trace.last().unwrap_or(&f64::NAN);
            let doc = ModelDocument::from_cvae(&fit.params, fit.trace, cfg.seed, scaling, config_json);
            Ok(FitOutput {
                doc,
                table: LatentTable {
                    t: cfg.t,
                    k: cfg.k,
                    target: fit.target_latents,
                    background: fit.background_latents,
                    labels,
                },
                trace_lines,
                objective,
            })
        }
        other => Err(ClvmError::Config(format!(
            "unknown engine {other:?} (expected em|vi|cvae)"
        ))),
    }
}

pub fn run(args: FitArgs) -> Result<()> {
    let cfg: FitConfig = resolve(args.config.as_deref(), overrides_from_args(&args))?;
    setup_runtime(cfg.threads, cfg.deterministic)?;
    let (pair, labels) = load_inputs(&cfg)?;
    let mode: Standardize = cfg.standardize.parse()?;
    let (std_pair, scaling) = standardize(&pair, mode)?;
    let out = run_engine(&cfg, &std_pair, scaling, labels)?;

    let dir = prepare_out_dir(&cfg.out_dir)?;
    save_model(&dir.join("model.json"), &out.doc)?;
    write_latents(&dir.join("latents.csv"), &out.table)?;
    std::fs::write(
        dir.join("trace.jsonl"),
        out.trace_lines.join("\n") + "\n",
    )?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}
