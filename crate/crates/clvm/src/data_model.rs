//! Dataset containers, CSV ingestion, standardization, and synthetic-data
//! generators for contrastive analysis.
//!
//! Data is organized as a [`ContrastivePair`]: a target matrix whose enriched
//! structure we care about and a background matrix whose variation is
//! nuisance. Missing entries are carried as an explicit boolean mask with a
//! NaN sentinel behind it; consumers must branch on the mask, never on the
//! sentinel value.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::clvm_em::ClvmParams;
use crate::error::{ClvmError, Result};
use crate::num_core::rng::RngStream;

/// A target/background dataset pair sharing a feature space.
///
/// `target` is n×d, `background` m×d. The masks mark observed cells (`true` =
/// observed); unobserved cells hold NaN and must never be read directly.
/// Labels are optional per-row integer classes used only for evaluation;
/// outlier rows injected by [`inject_outliers`] are labeled −1.
#[derive(Debug, Clone)]
pub struct ContrastivePair {
    pub target: DMatrix<f64>,
    pub background: DMatrix<f64>,
    pub target_mask: DMatrix<bool>,
    pub background_mask: DMatrix<bool>,
    pub target_labels: Option<Vec<i64>>,
    pub background_labels: Option<Vec<i64>>,
}

impl ContrastivePair {
    /// Build a fully observed pair.
    pub fn new(target: DMatrix<f64>, background: DMatrix<f64>) -> Result<Self> {
        let target_mask = DMatrix::from_element(target.nrows(), target.ncols(), true);
        let background_mask =
            DMatrix::from_element(background.nrows(), background.ncols(), true);
        Self::with_masks(target, background, target_mask, background_mask)
    }

    /// Build a pair with explicit observation masks.
    ///
    /// Unobserved cells are overwritten with NaN so accidental reads are loud.
    pub fn with_masks(
        mut target: DMatrix<f64>,
        mut background: DMatrix<f64>,
        target_mask: DMatrix<bool>,
        background_mask: DMatrix<bool>,
    ) -> Result<Self> {
        if target.ncols() != background.ncols() {
            return Err(ClvmError::Dimension(format!(
                "target has {} features but background has {}",
                target.ncols(),
                background.ncols()
            )));
        }
        if target.nrows() == 0 || background.nrows() == 0 {
            return Err(ClvmError::Dimension(
                "both sets need at least one row".into(),
            ));
        }
        if target_mask.shape() != target.shape() || background_mask.shape() != background.shape()
        {
            return Err(ClvmError::Dimension(
                "mask shapes must match their matrices".into(),
            ));
        }
        for i in 0..target.nrows() {
            for j in 0..target.ncols() {
                if target_mask[(i, j)] {
                    if !target[(i, j)].is_finite() {
                        return Err(ClvmError::NonFinite(format!(
                            "target cell ({i}, {j}) marked observed but not finite"
                        )));
                    }
                } else {
                    target[(i, j)] = f64::NAN;
                }
            }
        }
        for i in 0..background.nrows() {
            for j in 0..background.ncols() {
                if background_mask[(i, j)] {
                    if !background[(i, j)].is_finite() {
                        return Err(ClvmError::NonFinite(format!(
                            "background cell ({i}, {j}) marked observed but not finite"
                        )));
                    }
                } else {
                    background[(i, j)] = f64::NAN;
                }
            }
        }
        Ok(Self {
            target,
            background,
            target_mask,
            background_mask,
            target_labels: None,
            background_labels: None,
        })
    }

    pub fn n(&self) -> usize {
        self.target.nrows()
    }

    pub fn m(&self) -> usize {
        self.background.nrows()
    }

    pub fn d(&self) -> usize {
        self.target.ncols()
    }

    pub fn has_missing(&self) -> bool {
        self.target_mask.iter().any(|&o| !o) || self.background_mask.iter().any(|&o| !o)
    }

    /// Count of unobserved cells in (target, background).
    pub fn missing_counts(&self) -> (usize, usize) {
        (
            self.target_mask.iter().filter(|&&o| !o).count(),
            self.background_mask.iter().filter(|&&o| !o).count(),
        )
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion and emission
// ---------------------------------------------------------------------------

/// A parsed CSV: header, values, and an observation mask (`true` = observed).
#[derive(Debug, Clone)]
pub struct CsvMatrix {
    pub header: Vec<String>,
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

/// Read a numeric CSV with a header row.
///
/// Empty cells always mean missing; `missing_tokens` lists additional strings
/// (compared after trimming) that also mean missing. Ragged rows and
/// non-numeric cells are reported with 1-based data-row numbers (the header
/// is row 0).
pub fn load_csv(path: &Path, missing_tokens: &[&str]) -> Result<CsvMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ClvmError::ParseRow {
            row: 0,
            msg: format!("bad header: {e}"),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let width = header.len();

    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut nrows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| ClvmError::ParseRow {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != width {
            return Err(ClvmError::ParseRow {
                row,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let trimmed = field.trim();
            if trimmed.is_empty() || missing_tokens.contains(&trimmed) {
                values.push(f64::NAN);
                mask.push(false);
            } else {
                let v: f64 = trimmed.parse().map_err(|_| ClvmError::ParseCell {
                    row,
                    col,
                    msg: format!("not a number: {trimmed:?}"),
                })?;
                if !v.is_finite() {
                    return Err(ClvmError::ParseCell {
                        row,
                        col,
                        msg: format!("non-finite value {trimmed:?}"),
                    });
                }
                values.push(v);
                mask.push(true);
            }
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(ClvmError::ParseRow {
            row: 1,
            msg: "file has a header but no data rows".into(),
        });
    }

    // Collected row-major; DMatrix::from_vec is column-major.
    let values = DMatrix::from_row_slice(nrows, width, &values);
    let mask = DMatrix::from_fn(nrows, width, |i, j| mask[i * width + j]);
    Ok(CsvMatrix {
        header,
        values,
        mask,
    })
}

/// Write a numeric CSV; masked-out cells become empty fields.
///
/// Values are formatted with the shortest representation that parses back to
/// the identical f64, so a write→read round trip is bit-exact.
pub fn write_csv(
    path: &Path,
    header: &[String],
    values: &DMatrix<f64>,
    mask: Option<&DMatrix<bool>>,
) -> Result<()> {
    if header.len() != values.ncols() {
        return Err(ClvmError::Dimension(format!(
            "header has {} names for {} columns",
            header.len(),
            values.ncols()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != values.shape() {
            return Err(ClvmError::Dimension("mask shape mismatch in write_csv".into()));
        }
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record(header)
        .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    let mut field = String::new();
    for i in 0..values.nrows() {
        let mut record: Vec<String> = Vec::with_capacity(values.ncols());
        for j in 0..values.ncols() {
            let observed = mask.map_or(true, |m| m[(i, j)]);
            field.clear();
            if observed {
                use std::fmt::Write as _;
                let _ = write!(field, "{}", values[(i, j)]);
            }
            record.push(field.clone());
        }
        writer
            .write_record(&record)
            .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}

/// Default feature names `f1..fd` for generated data.
pub fn default_header(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("f{j}")).collect()
}

/// Read a single-column labels CSV (header + one integer per row).
pub fn load_labels(path: &Path) -> Result<Vec<i64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| ClvmError::ParseRow {
            row,
            msg: e.to_string(),
        })?;
        let field = record.get(0).unwrap_or("").trim();
        let v: i64 = field.parse().map_err(|_| ClvmError::ParseCell {
            row,
            col: 0,
            msg: format!("not an integer label: {field:?}"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

/// Write a single-column labels CSV.
pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record(["label"])
        .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    for l in labels {
        writer
            .write_record([l.to_string()])
            .map_err(|e| ClvmError::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}

/// Load a target/background pair from two CSVs.
pub fn load_pair(
    target_path: &Path,
    background_path: &Path,
    missing_tokens: &[&str],
) -> Result<ContrastivePair> {
    let t = load_csv(target_path, missing_tokens)?;
    let b = load_csv(background_path, missing_tokens)?;
    ContrastivePair::with_masks(t.values, b.values, t.mask, b.mask)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Column standardization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standardize {
    None,
    Center,
    Zscore,
}

impl std::str::FromStr for Standardize {
    type Err = ClvmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "center" => Ok(Self::Center),
            "zscore" => Ok(Self::Zscore),
            other => Err(ClvmError::Config(format!(
                "unknown standardize mode {other:?} (expected none|center|zscore)"
            ))),
        }
    }
}

/// Per-column affine transform fitted by [`standardize`]: x ↦ (x − center)/scale.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScalingParams {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Columns whose variance was too small for z-scoring; their scale was
    /// pinned to 1 and the fit proceeded.
    pub flagged_columns: Vec<usize>,
}

impl ScalingParams {
    pub fn identity(d: usize) -> Self {
        Self {
            center: vec![0.0; d],
            scale: vec![1.0; d],
            flagged_columns: Vec::new(),
        }
    }

    /// Apply the transform to observed cells of a matrix in place.
    pub fn apply(&self, m: &mut DMatrix<f64>, mask: &DMatrix<bool>) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if mask[(i, j)] {
                    m[(i, j)] = (m[(i, j)] - self.center[j]) / self.scale[j];
                }
            }
        }
    }

    /// Undo the transform on observed cells of a matrix in place.
    pub fn invert(&self, m: &mut DMatrix<f64>, mask: &DMatrix<bool>) {
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if mask[(i, j)] {
                    m[(i, j)] = m[(i, j)] * self.scale[j] + self.center[j];
                }
            }
        }
    }

    /// Undo the transform on a whole pair, returning a new pair.
    pub fn invert_pair(&self, pair: &ContrastivePair) -> ContrastivePair {
        let mut out = pair.clone();
        self.invert(&mut out.target, &pair.target_mask);
        self.invert(&mut out.background, &pair.background_mask);
        out
    }
}

/// Standardize columns using statistics pooled over the observed cells of
/// both sets. Missing cells are untouched.
///
/// Under `Zscore`, a column whose observed variance is below 1e-24 keeps
/// scale 1 and is reported in `flagged_columns` instead of producing infs.
pub fn standardize(
    pair: &ContrastivePair,
    mode: Standardize,
) -> Result<(ContrastivePair, ScalingParams)> {
    let d = pair.d();
    if mode == Standardize::None {
        return Ok((pair.clone(), ScalingParams::identity(d)));
    }

    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut flagged = Vec::new();
    for j in 0..d {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut visit = |m: &DMatrix<f64>, mask: &DMatrix<bool>| {
            for i in 0..m.nrows() {
                if mask[(i, j)] {
                    count += 1;
                    sum += m[(i, j)];
                    sumsq += m[(i, j)] * m[(i, j)];
                }
            }
        };
        visit(&pair.target, &pair.target_mask);
        visit(&pair.background, &pair.background_mask);
        if count == 0 {
            return Err(ClvmError::Config(format!(
                "column {j} has no observed entries; cannot standardize"
            )));
        }
        let mean = sum / count as f64;
        center[j] = mean;
        if mode == Standardize::Zscore {
            if count < 2 {
                return Err(ClvmError::Config(format!(
                    "column {j} has fewer than 2 observed entries; cannot z-score"
                )));
            }
            let var = (sumsq / count as f64 - mean * mean).max(0.0);
            if var < 1e-24 {
                flagged.push(j);
                scale[j] = 1.0;
            } else {
                scale[j] = var.sqrt();
            }
        }
    }

    let params = ScalingParams {
        center,
        scale,
        flagged_columns: flagged,
    };
    let mut out = pair.clone();
    params.apply(&mut out.target, &pair.target_mask);
    params.apply(&mut out.background, &pair.background_mask);
    Ok((out, params))
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Feature-block layout of the subgroup generator: 30 features in three
/// blocks of 10. The first two blocks carry the subgroup structure in the
/// target set; the last block is high-variance noise shared by both sets.
pub const SUBGROUP_DIM: usize = 30;

/// Per-subgroup (mean, variance) for target feature blocks 1 and 2, and the
/// shared parameters of block 3. Background uses zero means with variances
/// 3, 1, and 10 across the three blocks.
const SUBGROUP_BLOCK1: [(f64, f64); 4] = [(0.0, 1.0), (0.0, 1.0), (6.0, 1.0), (6.0, 1.0)];
const SUBGROUP_BLOCK2: [(f64, f64); 4] = [(0.0, 1.0), (3.0, 1.0), (0.0, 1.0), (3.0, 1.0)];
const NOISE_BLOCK: (f64, f64) = (0.0, 10.0);
const BACKGROUND_BLOCKS: [(f64, f64); 3] = [(0.0, 3.0), (0.0, 1.0), (0.0, 10.0)];

/// Generate the four-subgroup synthetic benchmark.
///
/// The target set has `n_per_subgroup` rows for each of four subgroups in
/// d=30: features 1–10 separate subgroups {A,B} from {C,D} (mean 0 vs 6),
/// features 11–20 separate {A,C} from {B,D} (mean 0 vs 3), and features
/// 21–30 are N(0, 10) noise for everyone. The background set shares the
/// noise block and has no subgroup structure. Target labels are 0–3.
pub fn generate_synthetic_subgroups(
    n_per_subgroup: usize,
    m_background: usize,
    seed: u64,
) -> Result<ContrastivePair> {
    if n_per_subgroup == 0 || m_background == 0 {
        return Err(ClvmError::Config(
            "subgroup and background counts must be positive".into(),
        ));
    }
    let n = 4 * n_per_subgroup;
    let d = SUBGROUP_DIM;
    let mut rng = RngStream::new(seed).derive(0x5347); // subgroup-generator stream

    let mut target = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for g in 0..4 {
        for r in 0..n_per_subgroup {
            let i = g * n_per_subgroup + r;
            labels.push(g as i64);
            for j in 0..d {
                let (mean, var) = if j < 10 {
                    SUBGROUP_BLOCK1[g]
                } else if j < 20 {
                    SUBGROUP_BLOCK2[g]
                } else {
                    NOISE_BLOCK
                };
                target[(i, j)] = mean + var.sqrt() * rng.normal();
            }
        }
    }

    let mut background = DMatrix::zeros(m_background, d);
    for i in 0..m_background {
        for j in 0..d {
            let (mean, var) = BACKGROUND_BLOCKS[j / 10];
            background[(i, j)] = mean + var.sqrt() * rng.normal();
        }
    }

    let mut pair = ContrastivePair::new(target, background)?;
    pair.target_labels = Some(labels);
    Ok(pair)
}

/// Sample a pair from fitted (or hand-built) model parameters.
///
/// Target rows follow `x = S z + W t + μx + σ ε` with `z ~ N(0, I)`; when
/// `cluster_means_in_t` is non-empty, `t` is drawn as `N(mean_c, I)` with
/// clusters assigned round-robin and recorded as target labels, otherwise
/// `t ~ N(0, I)`. Background rows follow `y = S z + μy + σ ε`.
pub fn generate_from_model(
    params: &ClvmParams,
    cluster_means_in_t: &[DVector<f64>],
    n: usize,
    m: usize,
    seed: u64,
) -> Result<ContrastivePair> {
    if n == 0 || m == 0 {
        return Err(ClvmError::Config("sample counts must be positive".into()));
    }
    params.validate()?;
    let (d, k, t_dim) = (params.d(), params.k(), params.t());
    for (c, mu) in cluster_means_in_t.iter().enumerate() {
        if mu.len() != t_dim {
            return Err(ClvmError::Dimension(format!(
                "cluster mean {c} has length {} but t = {t_dim}",
                mu.len()
            )));
        }
    }
    let sigma = params.sigma2.sqrt();
    let mut rng = RngStream::new(seed).derive(0x4d4f); // model-generator stream

    let mut target = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z = rng.normal_vector(k);
        let mut t = rng.normal_vector(t_dim);
        if !cluster_means_in_t.is_empty() {
            let c = i % cluster_means_in_t.len();
            t += &cluster_means_in_t[c];
            labels.push(c as i64);
        }
        let row = &params.s * z + &params.w * t + &params.mu_x + sigma * rng.normal_vector(d);
        target.row_mut(i).copy_from(&row.transpose());
    }

    let mut background = DMatrix::zeros(m, d);
    for i in 0..m {
        let z = rng.normal_vector(k);
        let row = &params.s * z + &params.mu_y + sigma * rng.normal_vector(d);
        background.row_mut(i).copy_from(&row.transpose());
    }

    let mut pair = ContrastivePair::new(target, background)?;
    if !cluster_means_in_t.is_empty() {
        pair.target_labels = Some(labels);
    }
    Ok(pair)
}

/// Append uniformly distributed outlier rows to both sets.
///
/// Each set receives `count_per_set` rows of i.i.d. U[lower, upper] entries.
/// Target labels (when present, or when outliers are added to a labeled
/// set) mark outlier rows with −1.
pub fn inject_outliers(
    pair: &ContrastivePair,
    count_per_set: usize,
    lower: f64,
    upper: f64,
    seed: u64,
) -> Result<ContrastivePair> {
    if lower > upper {
        return Err(ClvmError::Config(format!(
            "outlier bounds out of order: [{lower}, {upper}]"
        )));
    }
    if count_per_set == 0 {
        return Ok(pair.clone());
    }
    let d = pair.d();
    let mut rng = RngStream::new(seed).derive(0x4f55); // outlier stream

    let grow = |m: &DMatrix<f64>, rng: &mut RngStream| {
        let mut out = DMatrix::zeros(m.nrows() + count_per_set, d);
        out.view_mut((0, 0), (m.nrows(), d)).copy_from(m);
        for i in m.nrows()..out.nrows() {
            for j in 0..d {
                out[(i, j)] = rng.uniform_in(lower, upper);
            }
        }
        out
    };
    let target = grow(&pair.target, &mut rng);
    let background = grow(&pair.background, &mut rng);

    let grow_mask = |m: &DMatrix<bool>| {
        let mut out = DMatrix::from_element(m.nrows() + count_per_set, d, true);
        out.view_mut((0, 0), (m.nrows(), d)).copy_from(m);
        out
    };
    let target_mask = grow_mask(&pair.target_mask);
    let background_mask = grow_mask(&pair.background_mask);

    let mut out = ContrastivePair::with_masks(target, background, target_mask, background_mask)?;
    let extend = |labels: &Option<Vec<i64>>| {
        labels.as_ref().map(|l| {
            let mut l = l.clone();
            l.extend(std::iter::repeat(-1).take(count_per_set));
            l
        })
    };
    out.target_labels = extend(&pair.target_labels);
    out.background_labels = extend(&pair.background_labels);
    Ok(out)
}

/// Delete a uniformly random fraction of target cells (mask → unobserved).
///
/// Used for artificial-missingness experiments; the background set is left
/// complete. The fraction is interpreted per cell: each target cell is
/// deleted independently with probability `fraction`, except that every row
/// keeps at least one observed cell so no row becomes pure noise.
pub fn delete_cells(pair: &ContrastivePair, fraction: f64, seed: u64) -> Result<ContrastivePair> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(ClvmError::Config(format!(
            "missing fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut out = pair.clone();
    if fraction == 0.0 {
        return Ok(out);
    }
    let mut rng = RngStream::new(seed).derive(0x4d49); // missingness stream
    let d = pair.d();
    for i in 0..pair.n() {
        let mut observed_left = (0..d).filter(|&j| out.target_mask[(i, j)]).count();
        for j in 0..d {
            if out.target_mask[(i, j)] && observed_left > 1 && rng.uniform() < fraction {
                out.target_mask[(i, j)] = false;
                out.target[(i, j)] = f64::NAN;
                observed_left -= 1;
            }
        }
    }
    Ok(out)
}
