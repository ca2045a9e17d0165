//! Saving and loading fitted models as JSON documents.
//!
//! One document format covers all three engines so downstream commands
//! (`transform`, `eval`) never need to know how a model was trained. Matrix
//! payloads are stored column-major with explicit shapes; extra posterior
//! blocks are optional and present only when the fit produced them.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clvm_em::{ClvmParams, FittedModel};
use crate::cvae::{CvaeParams, LinearLayer, Mlp};
use crate::data_model::ScalingParams;
use crate::error::{ClvmError, Result};
use crate::vi_engine::{ModelSpec, ViFitted};

pub const FORMAT_VERSION: u32 = 1;

/// Column-major matrix payload with explicit shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.nrows * self.ncols {
            return Err(ClvmError::Dimension(format!(
                "matrix payload declares {}×{} but holds {} values",
                self.nrows,
                self.ncols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_column_slice(
            self.nrows,
            self.ncols,
            &self.data,
        ))
    }
}

/// Shared linear parameters saved by the EM and variational engines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearBlock {
    pub s: MatrixData,
    pub w: MatrixData,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma2: f64,
}

impl LinearBlock {
    pub fn from_params(p: &ClvmParams) -> Self {
        Self {
            s: MatrixData::from_matrix(&p.s),
            w: MatrixData::from_matrix(&p.w),
            mu_x: p.mu_x.as_slice().to_vec(),
            mu_y: p.mu_y.as_slice().to_vec(),
            sigma2: p.sigma2,
        }
    }

    pub fn to_params(&self) -> Result<ClvmParams> {
        let s = self.s.to_matrix()?;
        let w = self.w.to_matrix()?;
        if s.nrows() != self.mu_x.len() || w.nrows() != self.mu_x.len() {
            return Err(ClvmError::Dimension(
                "loading matrices disagree with the intercept dimension".into(),
            ));
        }
        Ok(ClvmParams {
            s,
            w,
            mu_x: nalgebra::DVector::from_column_slice(&self.mu_x),
            mu_y: nalgebra::DVector::from_column_slice(&self.mu_y),
            sigma2: self.sigma2,
        })
    }
}

/// Posterior summaries specific to the variational engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViBlock {
    pub spec: ModelSpec,
    pub final_elbo: f64,
    pub converged: bool,
    pub iterations: usize,
    /// (mean, log-std) of q(ln σ²) when σ² was treated variationally.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma2_posterior: Option<(f64, f64)>,
    /// Per-row (mean, log-std) of q(ln ρ²) under the row-sparse prior.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub horseshoe_ln_rho2: Option<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub horseshoe_ln_tau2: Option<(f64, f64)>,
    /// Rows the sparsity rule removed, if pruning was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pruned_rows: Option<Vec<usize>>,
    /// Per-column (mean, log-std) of q(ln α) under the shared-rank prior.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ard_ln_alpha: Option<Vec<(f64, f64)>>,
}

/// One dense layer as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerData {
    pub w: MatrixData,
    pub b: Vec<f64>,
}

impl LayerData {
    fn from_layer(l: &LinearLayer) -> Self {
        Self {
            w: MatrixData::from_matrix(&l.w),
            b: l.b.as_slice().to_vec(),
        }
    }

    fn to_layer(&self) -> Result<LinearLayer> {
        let w = self.w.to_matrix()?;
        if w.nrows() != self.b.len() {
            return Err(ClvmError::Dimension(format!(
                "layer weight has {} rows but bias has {} entries",
                w.nrows(),
                self.b.len()
            )));
        }
        Ok(LinearLayer {
            w,
            b: nalgebra::DVector::from_column_slice(&self.b),
        })
    }
}

fn mlp_data(m: &Mlp) -> Vec<LayerData> {
    m.layers.iter().map(LayerData::from_layer).collect()
}

fn mlp_from(layers: &[LayerData]) -> Result<Mlp> {
    if layers.is_empty() {
        return Err(ClvmError::Dimension("an MLP block holds no layers".into()));
    }
    Ok(Mlp {
        layers: layers
            .iter()
            .map(LayerData::to_layer)
            .collect::<Result<_>>()?,
    })
}

/// Full autoencoder parameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeBlock {
    pub enc_x: Vec<LayerData>,
    pub head_xz_mean: LayerData,
    pub head_xz_logstd: LayerData,
    pub head_xt_mean: LayerData,
    pub head_xt_logstd: LayerData,
    pub enc_y: Vec<LayerData>,
    pub head_yz_mean: LayerData,
    pub head_yz_logstd: LayerData,
    pub dec_s: Vec<LayerData>,
    pub dec_t: Vec<LayerData>,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub ln_sigma2: f64,
}

impl CvaeBlock {
    pub fn from_params(p: &CvaeParams) -> Self {
        Self {
            enc_x: mlp_data(&p.enc_x),
            head_xz_mean: LayerData::from_layer(&p.head_xz_mean),
            head_xz_logstd: LayerData::from_layer(&p.head_xz_logstd),
            head_xt_mean: LayerData::from_layer(&p.head_xt_mean),
            head_xt_logstd: LayerData::from_layer(&p.head_xt_logstd),
            enc_y: mlp_data(&p.enc_y),
            head_yz_mean: LayerData::from_layer(&p.head_yz_mean),
            head_yz_logstd: LayerData::from_layer(&p.head_yz_logstd),
            dec_s: mlp_data(&p.dec_s),
            dec_t: mlp_data(&p.dec_t),
            mu_x: p.mu_x.as_slice().to_vec(),
            mu_y: p.mu_y.as_slice().to_vec(),
            ln_sigma2: p.ln_sigma2,
        }
    }

    pub fn to_params(&self) -> Result<CvaeParams> {
        let k = self.head_xz_mean.b.len();
        let t = self.head_xt_mean.b.len();
        Ok(CvaeParams {
            k,
            t,
            enc_x: mlp_from(&self.enc_x)?,
            head_xz_mean: self.head_xz_mean.to_layer()?,
            head_xz_logstd: self.head_xz_logstd.to_layer()?,
            head_xt_mean: self.head_xt_mean.to_layer()?,
            head_xt_logstd: self.head_xt_logstd.to_layer()?,
            enc_y: mlp_from(&self.enc_y)?,
            head_yz_mean: self.head_yz_mean.to_layer()?,
            head_yz_logstd: self.head_yz_logstd.to_layer()?,
            dec_s: mlp_from(&self.dec_s)?,
            dec_t: mlp_from(&self.dec_t)?,
            mu_x: nalgebra::DVector::from_column_slice(&self.mu_x),
            mu_y: nalgebra::DVector::from_column_slice(&self.mu_y),
            ln_sigma2: self.ln_sigma2,
        })
    }
}

/// Everything a fit writes to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    /// "em", "vi", or "cvae".
    pub engine: String,
    pub d: usize,
    pub k: usize,
    pub t: usize,
    pub seed: u64,
    /// Column transform applied to the data before fitting; `transform`
    /// re-applies it to new rows so latents stay comparable.
    pub scaling: ScalingParams,
    /// Objective value per recorded step (log-likelihood for EM, bound
    /// estimates otherwise).
    pub trace: Vec<f64>,
    /// Engine options as resolved at fit time, for provenance.
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linear: Option<LinearBlock>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vi: Option<ViBlock>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cvae: Option<CvaeBlock>,
}

impl ModelDocument {
    pub fn from_em(fit: &FittedModel, seed: u64, scaling: ScalingParams, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            engine: "em".into(),
            d: fit.params.s.nrows(),
            k: fit.params.s.ncols(),
            t: fit.params.w.ncols(),
            seed,
            scaling,
            trace: fit.trace.clone(),
            config,
            linear: Some(LinearBlock::from_params(&fit.params)),
            vi: None,
            cvae: None,
        }
    }

    pub fn from_vi(
        fit: &ViFitted,
        spec: &ModelSpec,
        seed: u64,
        scaling: ScalingParams,
        config: serde_json::Value,
        pruned_rows: Option<Vec<usize>>,
    ) -> Self {
        let trace = fit.trace.iter().map(|p| p.elbo).collect();
        Self {
            format_version: FORMAT_VERSION,
            engine: "vi".into(),
            d: spec.d,
            k: spec.k,
            t: spec.t,
            seed,
            scaling,
            trace,
            config,
            linear: Some(LinearBlock::from_params(&fit.params)),
            vi: Some(ViBlock {
                spec: spec.clone(),
                final_elbo: fit.final_elbo,
                converged: fit.converged,
                iterations: fit.iterations,
                sigma2_posterior: fit.state.sigma2_posterior(),
                horseshoe_ln_rho2: fit.state.horseshoe_ln_rho2(),
                horseshoe_ln_tau2: fit.state.horseshoe_ln_tau2(),
                pruned_rows,
                ard_ln_alpha: fit.state.ard_ln_alpha(),
            }),
            cvae: None,
        }
    }

    pub fn from_cvae(
        params: &CvaeParams,
        trace: Vec<f64>,
        seed: u64,
        scaling: ScalingParams,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            engine: "cvae".into(),
            d: params.mu_x.len(),
            k: params.k,
            t: params.t,
            seed,
            scaling,
            trace,
            config,
            linear: None,
            vi: None,
            cvae: Some(CvaeBlock::from_params(params)),
        }
    }

    /// Linear parameters, whichever engine produced them.
    pub fn linear_params(&self) -> Result<ClvmParams> {
        self.linear
            .as_ref()
            .ok_or_else(|| {
                ClvmError::Config(format!(
                    "model was fitted with engine {:?}, which stores no linear parameters",
                    self.engine
                ))
            })?
            .to_params()
    }

    pub fn cvae_params(&self) -> Result<CvaeParams> {
        self.cvae
            .as_ref()
            .ok_or_else(|| {
                ClvmError::Config(format!(
                    "model was fitted with engine {:?}, which stores no autoencoder",
                    self.engine
                ))
            })?
            .to_params()
    }
}

pub fn save_model(path: &Path, doc: &ModelDocument) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| ClvmError::Config(format!("cannot serialize model: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelDocument> {
    let text = std::fs::read_to_string(path)?;
    let doc: ModelDocument = serde_json::from_str(&text).map_err(|e| {
        ClvmError::ParseRow {
            row: e.line(),
            msg: format!("model file {}: {e}", path.display()),
        }
    })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ClvmError::Config(format!(
            "model file has format version {}, this build reads {FORMAT_VERSION}",
            doc.format_version
        )));
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clvm_em::{fit_em, EmOptions};
    use crate::data_model::generate_synthetic_subgroups;
    use crate::vi_engine::{fit_vi, ViOptions};

    #[test]
    fn em_document_round_trips_exactly() {
        let pair = generate_synthetic_subgroups(15, 30, 7).unwrap();
        let fit = fit_em(
            &pair,
            2,
            2,
            &EmOptions {
                max_iter: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let doc = ModelDocument::from_em(
            &fit,
            7,
            ScalingParams::identity(pair.d()),
            serde_json::json!({"max_iter": 20}),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &doc).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.engine, "em");
        let p = loaded.linear_params().unwrap();
        assert_eq!(p.s.as_slice(), fit.params.s.as_slice());
        assert_eq!(p.w.as_slice(), fit.params.w.as_slice());
        assert_eq!(p.sigma2, fit.params.sigma2);
        assert_eq!(loaded.trace, fit.trace);
        assert!(loaded.cvae_params().is_err());
    }

    #[test]
    fn vi_document_keeps_posterior_blocks() {
        let pair = generate_synthetic_subgroups(10, 20, 3).unwrap();
        let spec = crate::vi_engine::ModelSpec {
            s_prior: crate::vi_engine::SPrior::Ard { a0: 1e-3, b0: 1e-3 },
            ..crate::vi_engine::ModelSpec::plain(pair.d(), 2, 2)
        };
        let fit = fit_vi(
            &spec,
            &pair,
            &ViOptions {
                max_iter: 30,
                ..Default::default()
            },
        )
        .unwrap();
        let doc = ModelDocument::from_vi(
            &fit,
            &spec,
            3,
            ScalingParams::identity(pair.d()),
            serde_json::Value::Null,
            None,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &doc).unwrap();
        let loaded = load_model(&path).unwrap();
        let vi = loaded.vi.as_ref().unwrap();
        assert_eq!(vi.ard_ln_alpha.as_ref().unwrap().len(), 2);
        assert!(vi.horseshoe_ln_rho2.is_none());
        assert_eq!(vi.iterations, fit.iterations);
        assert!(loaded.linear_params().is_ok());
    }

    #[test]
    fn cvae_document_round_trips_flat_vector() {
        let opts = crate::cvae::CvaeOptions {
            k: 2,
            t: 1,
            enc_hidden: vec![5, 4],
            dec_hidden: vec![4, 5],
            ..Default::default()
        };
        let mut rng = crate::num_core::rng::RngStream::new(11);
        let params = crate::cvae::init_cvae(6, &opts, &mut rng).unwrap();
        let doc = ModelDocument::from_cvae(
            &params,
            vec![-10.0, -8.0],
            11,
            ScalingParams::identity(6),
            serde_json::Value::Null,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &doc).unwrap();
        let loaded = load_model(&path).unwrap().cvae_params().unwrap();
        assert_eq!(loaded.to_flat(), params.to_flat());
        assert_eq!(loaded.k, 2);
        assert_eq!(loaded.t, 1);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let doc = ModelDocument {
            format_version: 99,
            engine: "em".into(),
            d: 1,
            k: 1,
            t: 0,
            seed: 0,
            scaling: ScalingParams::identity(1),
            trace: vec![],
            config: serde_json::Value::Null,
            linear: None,
            vi: None,
            cvae: None,
        };
        let json = serde_json::to_string(&doc).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(matches!(load_model(&path), Err(ClvmError::Config(_))));
    }

    #[test]
    fn corrupt_json_reports_parse_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, "{\"format_version\": 1,\n  broken").unwrap();
        match load_model(&path) {
            Err(ClvmError::ParseRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
