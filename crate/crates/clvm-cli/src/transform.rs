//! `clvm transform`: project new rows through a saved model.

use std::path::Path;

use clap::Args;
use clvm::data_model::{load_csv, load_labels};
use clvm::error::{ClvmError, Result};
use clvm::model_io::load_model;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, resolve, setup_runtime, write_json};
use crate::latents::{write_latents, LatentTable};
use crate::overrides;

#[derive(Args)]
pub struct TransformArgs {
    /// JSON config file; explicit flags override its keys
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Saved model.json from a fit
    #[arg(long)]
    pub model: Option<String>,
    /// Target rows to project (id,set columns not expected — plain features)
    #[arg(long)]
    pub target: Option<String>,
    /// Background rows to project
    #[arg(long)]
    pub background: Option<String>,
    /// Optional labels CSV for the target rows
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub model: Option<String>,
    pub target: Option<String>,
    pub background: Option<String>,
    pub labels: Option<String>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub out_dir: String,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            model: None,
            target: None,
            background: None,
            labels: None,
            threads: None,
            deterministic: false,
            out_dir: ".".into(),
        }
    }
}

/// Load a feature CSV, apply the stored column transform, and insist on
/// complete rows — projection of partially observed rows is not defined
/// for every engine, so the data must be imputed first.
fn load_complete(
    path: &str,
    scaling: &clvm::data_model::ScalingParams,
    d: usize,
    what: &str,
) -> Result<DMatrix<f64>> {
    let csv = load_csv(Path::new(path), &["NA", "nan", "NaN"])?;
    if csv.values.ncols() != d {
        return Err(ClvmError::Dimension(format!(
            "{what} file has {} columns, the model expects {d}",
            csv.values.ncols()
        )));
    }
    if csv.mask.iter().any(|&m| !m) {
        return Err(ClvmError::MissingData(format!(
            "{what} file has missing cells; transform needs complete rows"
        )));
    }
    let mut rows = csv.values;
    scaling.apply(&mut rows, &csv.mask);
    Ok(rows)
}

pub fn run(args: TransformArgs) -> Result<()> {
    let over = overrides! {
        "model" => args.model.clone(),
        "target" => args.target.clone(),
        "background" => args.background.clone(),
        "labels" => args.labels.clone(),
        "threads" => args.threads,
        "deterministic" => args.deterministic.then_some(true),
        "out_dir" => args.out_dir.clone(),
    };
    let cfg: TransformConfig = resolve(args.config.as_deref(), over)?;
    setup_runtime(cfg.threads, cfg.deterministic)?;
    let model_path = cfg
        .model
        .as_deref()
        .ok_or_else(|| ClvmError::Config("--model is required".into()))?;
    if cfg.target.is_none() && cfg.background.is_none() {
        return Err(ClvmError::Config(
            "at least one of --target / --background is required".into(),
        ));
    }
    let doc = load_model(Path::new(model_path))?;

    let target_rows = cfg
        .target
        .as_deref()
        .map(|p| load_complete(p, &doc.scaling, doc.d, "target"))
        .transpose()?;
    let background_rows = cfg
        .background
        .as_deref()
        .map(|p| load_complete(p, &doc.scaling, doc.d, "background"))
        .transpose()?;

    let (target_lat, background_lat) = match doc.engine.as_str() {
        "em" | "vi" => {
            let params = doc.linear_params()?;
            let tl = target_rows
                .as_ref()
                .map(|rows| clvm::clvm_em::transform(&params, rows, true))
                .transpose()?
                .unwrap_or_else(|| DMatrix::zeros(0, doc.t + doc.k));
            let bl = background_rows
                .as_ref()
                .map(|rows| clvm::clvm_em::transform(&params, rows, false))
                .transpose()?
                .unwrap_or_else(|| DMatrix::zeros(0, doc.k));
            (tl, bl)
        }
        "cvae" => {
            let params = doc.cvae_params()?;
            let tl = target_rows
                .as_ref()
                .map(|rows| clvm::cvae::encode_target(&params, rows))
                .unwrap_or_else(|| DMatrix::zeros(0, doc.t + doc.k));
            let bl = background_rows
                .as_ref()
                .map(|rows| clvm::cvae::encode_background(&params, rows))
                .unwrap_or_else(|| DMatrix::zeros(0, doc.k));
            (tl, bl)
        }
        other => {
            return Err(ClvmError::Config(format!(
                "model file declares unknown engine {other:?}"
            )))
        }
    };

    let labels = match cfg.labels.as_deref() {
        Some(path) => {
            let l = load_labels(Path::new(path))?;
            if l.len() != target_lat.nrows() {
                return Err(ClvmError::MissingData(format!(
                    "labels file has {} rows but the target has {}",
                    l.len(),
                    target_lat.nrows()
                )));
            }
            Some(l)
        }
        None => None,
    };

    let dir = prepare_out_dir(&cfg.out_dir)?;
    write_latents(
        &dir.join("latents.csv"),
        &LatentTable {
            t: doc.t,
            k: doc.k,
            target: target_lat,
            background: background_lat,
            labels,
        },
    )?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}
