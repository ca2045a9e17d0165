//! `clvm eval`: score a latent table against labels or a reference fit.

use std::path::Path;

use clap::Args;
use clvm::data_model::load_labels;
use clvm::error::{ClvmError, Result};
use clvm::eval::{adjusted_rand_index, kmeans, procrustes_disparity, silhouette};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, resolve, setup_runtime, write_json};
use crate::latents::{read_latents, LatentTable};
use crate::overrides;

#[derive(Args)]
pub struct EvalArgs {
    /// JSON config file; explicit flags override its keys
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Latent CSV produced by fit/transform/sweep
    #[arg(long)]
    pub latents: Option<String>,
    /// Labels CSV; defaults to the label column embedded in the latents
    #[arg(long)]
    pub labels: Option<String>,
    /// Second latent CSV to compare subspaces against
    #[arg(long)]
    pub ref_latents: Option<String>,
    /// Which factor block to score: t | z | both
    #[arg(long)]
    pub space: Option<String>,
    /// Number of clusters; defaults to the number of distinct labels
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
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
pub struct EvalConfig {
    pub latents: Option<String>,
    pub labels: Option<String>,
    pub ref_latents: Option<String>,
    pub space: String,
    pub clusters: Option<usize>,
    pub kmeans_restarts: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub out_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            latents: None,
            labels: None,
            ref_latents: None,
            space: "t".into(),
            clusters: None,
            kmeans_restarts: 8,
            seed: 0,
            threads: None,
            deterministic: false,
            out_dir: ".".into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Metrics {
    rows: usize,
    space: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    silhouette: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    procrustes: Option<f64>,
}

/// Pick the requested factor block out of the target latents.
fn select_space(table: &LatentTable, space: &str) -> Result<DMatrix<f64>> {
    let (t, k) = (table.t, table.k);
    let cols = match space {
        "t" => {
            if t == 0 {
                return Err(ClvmError::Config(
                    "this latent table has no target-specific block; use --space z".into(),
                ));
            }
            0..t
        }
        "z" => {
            if k == 0 {
                return Err(ClvmError::Config(
                    "this latent table has no shared block; use --space t".into(),
                ));
            }
            t..t + k
        }
        "both" => 0..t + k,
        other => {
            return Err(ClvmError::Config(format!(
                "unknown space {other:?} (expected t|z|both)"
            )))
        }
    };
    Ok(table.target.columns(cols.start, cols.len()).clone_owned())
}

pub fn run(args: EvalArgs) -> Result<()> {
    let over = overrides! {
        "latents" => args.latents.clone(),
        "labels" => args.labels.clone(),
        "ref_latents" => args.ref_latents.clone(),
        "space" => args.space.clone(),
        "clusters" => args.clusters,
        "kmeans_restarts" => args.kmeans_restarts,
        "seed" => args.seed,
        "threads" => args.threads,
        "deterministic" => args.deterministic.then_some(true),
        "out_dir" => args.out_dir.clone(),
    };
    let cfg: EvalConfig = resolve(args.config.as_deref(), over)?;
    setup_runtime(cfg.threads, cfg.deterministic)?;
    let latents_path = cfg
        .latents
        .as_deref()
        .ok_or_else(|| ClvmError::Config("--latents is required".into()))?;
    let table = read_latents(Path::new(latents_path))?;
    let features = select_space(&table, &cfg.space)?;
    let n = features.nrows();

    let labels: Option<Vec<i64>> = match cfg.labels.as_deref() {
        Some(path) => Some(load_labels(Path::new(path))?),
        None => table.labels.clone(),
    };
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(ClvmError::MissingData(format!(
                "{} labels for {} latent rows",
                l.len(),
                n
            )));
        }
    }

    let (mut ari, mut sil, mut clusters_used) = (None, None, None);
    if let Some(truth) = &labels {
        let distinct = {
            let mut v = truth.clone();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        let c = cfg.clusters.unwrap_or(distinct);
        if c < 2 {
            return Err(ClvmError::Config(format!(
                "clustering needs at least 2 clusters, got {c}"
            )));
        }
        let assignment = kmeans(&features, c, cfg.seed, cfg.kmeans_restarts)?;
        let predicted: Vec<i64> = assignment.iter().map(|&a| a as i64).collect();
        ari = Some(adjusted_rand_index(&predicted, truth)?);
        sil = Some(silhouette(&features, truth)?);
        clusters_used = Some(c);
    }

    let procrustes = match cfg.ref_latents.as_deref() {
        Some(path) => {
            let reference = read_latents(Path::new(path))?;
            let ref_features = select_space(&reference, &cfg.space)?;
            if ref_features.nrows() != n {
                return Err(ClvmError::MissingData(format!(
                    "reference has {} rows but the latents have {}",
                    ref_features.nrows(),
                    n
                )));
            }
            Some(procrustes_disparity(&features, &ref_features)?)
        }
        None => None,
    };

    let dir = prepare_out_dir(&cfg.out_dir)?;
    write_json(
        &dir.join("metrics.json"),
        &Metrics {
            rows: n,
            space: cfg.space.clone(),
            clusters: clusters_used,
            ari,
            silhouette: sil,
            procrustes,
        },
    )?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}
