//! `clvm sweep`: refit across a hyperparameter grid and tabulate how the
//! solution changes — the workflow behind picking a penalty strength by
//! inspection.

use clap::Args;
use clvm::baselines::fit_cpca;
use clvm::data_model::{standardize, Standardize};
use clvm::error::{ClvmError, Result};
use clvm::variants::{effective_shared_rank, row_norms};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, resolve, setup_runtime, write_json};
use crate::fit::{load_inputs, run_engine, FitConfig};
use crate::latents::{write_latents, LatentTable};
use crate::overrides;

#[derive(Args)]
pub struct SweepArgs {
    /// JSON config file; explicit flags override its keys
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Which knob to sweep: rho (group penalty) | alpha (contrastive PCA)
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated grid values
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub background: Option<String>,
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(short, long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub standardize: Option<String>,
    /// Row-group definition file for the group penalty
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Variance-share cutoff for the effective-rank column
    #[arg(long)]
    pub rank_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: String,
    pub grid: Vec<f64>,
    pub target: Option<String>,
    pub background: Option<String>,
    pub labels: Option<String>,
    pub k: usize,
    pub t: usize,
    pub standardize: String,
    pub groups: Option<String>,
    pub max_iter: Option<usize>,
    pub n_mc: Option<usize>,
    pub lr: Option<f64>,
    pub rank_threshold: f64,
    pub seed: u64,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub out_dir: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: "rho".into(),
            grid: Vec::new(),
            target: None,
            background: None,
            labels: None,
            k: 2,
            t: 2,
            standardize: "zscore".into(),
            groups: None,
            max_iter: None,
            n_mc: None,
            lr: None,
            rank_threshold: 0.05,
            seed: 0,
            threads: None,
            deterministic: false,
            out_dir: ".".into(),
        }
    }
}

/// One grid point in summary.json.
#[derive(Debug, Serialize)]
struct SweepRun {
    value: f64,
    /// Final bound (rho sweep) or retained contrastive variance (alpha sweep).
    objective: f64,
    effective_rank: usize,
    /// Per-feature norms of the swept matrix: W rows for rho, projection
    /// rows for alpha.
    row_norms: Vec<f64>,
    latents_file: String,
}

fn grid_file_name(param: &str, value: f64) -> String {
    // "400" not "400.0": keep names shell-friendly while staying unique.
    let mut v = format!("{value}");
    if let Some(stripped) = v.strip_suffix(".0") {
        v = stripped.to_string();
    }
    format!("latents_{param}_{v}.csv")
}

pub fn run(args: SweepArgs) -> Result<()> {
    let over = overrides! {
        "param" => args.param.clone(),
        "grid" => args.grid.clone(),
        "target" => args.target.clone(),
        "background" => args.background.clone(),
        "labels" => args.labels.clone(),
        "k" => args.k,
        "t" => args.t,
        "standardize" => args.standardize.clone(),
        "groups" => args.groups.clone(),
        "max_iter" => args.max_iter,
        "n_mc" => args.n_mc,
        "lr" => args.lr,
        "rank_threshold" => args.rank_threshold,
        "seed" => args.seed,
        "threads" => args.threads,
        "deterministic" => args.deterministic.then_some(true),
        "out_dir" => args.out_dir.clone(),
    };
    let cfg: SweepConfig = resolve(args.config.as_deref(), over)?;
    setup_runtime(cfg.threads, cfg.deterministic)?;
    if cfg.grid.is_empty() {
        return Err(ClvmError::Config("--grid must list at least one value".into()));
    }
    if !matches!(cfg.param.as_str(), "rho" | "alpha") {
        return Err(ClvmError::Config(format!(
            "unknown sweep parameter {:?} (expected rho|alpha)",
            cfg.param
        )));
    }

    let fit_cfg = FitConfig {
        target: cfg.target.clone(),
        background: cfg.background.clone(),
        labels: cfg.labels.clone(),
        engine: "vi".into(),
        k: cfg.k,
        t: cfg.t,
        standardize: cfg.standardize.clone(),
        w_prior: "group".into(),
        groups: cfg.groups.clone(),
        max_iter: cfg.max_iter,
        n_mc: cfg.n_mc,
        lr: cfg.lr,
        seed: cfg.seed,
        out_dir: cfg.out_dir.clone(),
        ..Default::default()
    };
    let (pair, labels) = load_inputs(&fit_cfg)?;
    let mode: Standardize = cfg.standardize.parse()?;
    let (std_pair, scaling) = standardize(&pair, mode)?;

    let dir = prepare_out_dir(&cfg.out_dir)?;
    let mut runs = Vec::with_capacity(cfg.grid.len());
    for &value in &cfg.grid {
        let latents_file = grid_file_name(&cfg.param, value);
        let run = match cfg.param.as_str() {
            "rho" => {
                let point_cfg = FitConfig {
                    rho: value,
                    ..fit_cfg.clone()
                };
                let out = run_engine(&point_cfg, &std_pair, scaling.clone(), labels.clone())?;
                write_latents(&dir.join(&latents_file), &out.table)?;
                let params = out.doc.linear_params()?;
                SweepRun {
                    value,
                    objective: out.objective,
                    effective_rank: effective_shared_rank(&params.s, cfg.rank_threshold),
                    row_norms: row_norms(&params.w).as_slice().to_vec(),
                    latents_file,
                }
            }
            "alpha" => {
                let res = fit_cpca(&std_pair, value, cfg.k)?;
                write_latents(
                    &dir.join(&latents_file),
                    &LatentTable {
                        t: 0,
                        k: cfg.k,
                        target: res.latents.clone(),
                        background: DMatrix::zeros(0, cfg.k),
                        labels: labels.clone(),
                    },
                )?;
                // Retained contrastive variance: sum of the kept eigenvalues.
                let objective = res.eigenvalues.iter().take(cfg.k).sum();
                SweepRun {
                    value,
                    objective,
                    effective_rank: cfg.k,
                    row_norms: row_norms(&res.projection).as_slice().to_vec(),
                    latents_file,
                }
            }
            _ => unreachable!("parameter validated above"),
        };
        runs.push(run);
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        param: &'a str,
        grid: &'a [f64],
        runs: Vec<SweepRun>,
    }
    write_json(
        &dir.join("summary.json"),
        &Summary {
            param: &cfg.param,
            grid: &cfg.grid,
            runs,
        },
    )?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}
