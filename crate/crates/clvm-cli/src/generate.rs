//! `clvm generate`: synthetic benchmarks written as CSV triples.

use clap::Args;
use clvm::data_model::{
    default_header, delete_cells, generate_synthetic_subgroups, inject_outliers, write_csv,
    write_labels, ContrastivePair,
};
use clvm::error::{ClvmError, Result};
use serde::{Deserialize, Serialize};

use crate::config::{prepare_out_dir, resolve, write_json};
use crate::overrides;

#[derive(Args)]
pub struct GenerateArgs {
    /// Which benchmark to write: subgroups | signal-noise
    pub generator: Option<String>,
    /// JSON config file; explicit flags override its keys
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target rows per subgroup (subgroups generator)
    #[arg(long)]
    pub n_per_subgroup: Option<usize>,
    /// Target rows per class (signal-noise generator)
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub m_background: Option<usize>,
    /// Append this many uniform outlier rows to each set
    #[arg(long)]
    pub with_outliers: Option<usize>,
    /// Half-width of the outlier uniform range
    #[arg(long)]
    pub outlier_bound: Option<f64>,
    /// Delete this fraction of target cells at random
    #[arg(long)]
    pub missing_frac: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub generator: String,
    pub out_dir: String,
    pub seed: u64,
    pub n_per_subgroup: usize,
    pub n_per_class: usize,
    pub m_background: usize,
    pub with_outliers: usize,
    pub outlier_bound: f64,
    pub missing_frac: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            generator: "subgroups".into(),
            out_dir: ".".into(),
            seed: 0,
            n_per_subgroup: 100,
            n_per_class: 50,
            m_background: 400,
            with_outliers: 0,
            outlier_bound: 20.0,
            missing_frac: 0.0,
        }
    }
}

pub fn run(args: GenerateArgs) -> Result<()> {
    let over = overrides! {
        "generator" => args.generator,
        "out_dir" => args.out_dir,
        "seed" => args.seed,
        "n_per_subgroup" => args.n_per_subgroup,
        "n_per_class" => args.n_per_class,
        "m_background" => args.m_background,
        "with_outliers" => args.with_outliers,
        "outlier_bound" => args.outlier_bound,
        "missing_frac" => args.missing_frac,
    };
    let cfg: GenerateConfig = resolve(args.config.as_deref(), over)?;

    let mut pair: ContrastivePair = match cfg.generator.as_str() {
        "subgroups" => generate_synthetic_subgroups(cfg.n_per_subgroup, cfg.m_background, cfg.seed)?,
        "signal-noise" => clvm::cvae::generate_signal_noise(cfg.n_per_class, cfg.m_background, cfg.seed)?,
        other => {
            return Err(ClvmError::Config(format!(
                "unknown generator {other:?} (expected subgroups|signal-noise)"
            )))
        }
    };
    if cfg.with_outliers > 0 {
        pair = inject_outliers(
            &pair,
            cfg.with_outliers,
            -cfg.outlier_bound,
            cfg.outlier_bound,
            cfg.seed,
        )?;
    }
    if cfg.missing_frac > 0.0 {
        pair = delete_cells(&pair, cfg.missing_frac, cfg.seed)?;
    }

    let dir = prepare_out_dir(&cfg.out_dir)?;
    let header = default_header(pair.d());
    write_csv(
        &dir.join("target.csv"),
        &header,
        &pair.target,
        Some(&pair.target_mask),
    )?;
    write_csv(
        &dir.join("background.csv"),
        &header,
        &pair.background,
        Some(&pair.background_mask),
    )?;
    let labels = pair.target_labels.clone().ok_or_else(|| {
        ClvmError::Config("generator produced no labels; this is a bug".into())
    })?;
    write_labels(&dir.join("labels.csv"), &labels)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    Ok(())
}
