//! File formats: spaces, couplings, marginals, modulus configuration and
//! report serialization.
//!
//! All structured files are JSON. Couplings store a flat `values` array in
//! canonical row-major order with an explicit `"order"` tag; marginals are
//! either two-column CSV (`index,value`) or the structured format with a
//! one-entry shape. Loaders validate every structural invariant and report
//! the first violation with its index.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::continuity::ModulusConfig;
use crate::correction::CorrectionReport;
use crate::coupling::{Coupling, MarginalDensity};
use crate::error::{Error, Result};
use crate::mmot::CostTensor;
use crate::space::{MarginalSpace, Metric, ProductSpace};

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Space files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SpaceFile {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<f64>>,
}

pub fn load_space(path: &Path) -> Result<MarginalSpace> {
    let text = read_to_string(path)?;
    let file: SpaceFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    let metric = match file.metric.as_str() {
        "absolute" | "absolute-difference" => Metric::AbsoluteDifference,
        "euclidean" => Metric::Euclidean,
        "explicit" => match file.distances {
            Some(d) => Metric::Explicit(d),
            None => {
                return Err(parse_err(
                    path,
                    "metric \"explicit\" requires a \"distances\" matrix",
                ))
            }
        },
        other => {
            return Err(parse_err(
                path,
                format!("unknown metric tag {other:?} (expected absolute, euclidean or explicit)"),
            ))
        }
    };
    MarginalSpace::new(file.points, file.weights, metric)
}

pub fn save_space(path: &Path, space: &MarginalSpace) -> Result<()> {
    let (metric, distances) = match space.metric() {
        Metric::AbsoluteDifference => ("absolute".to_string(), None),
        Metric::Euclidean => ("euclidean".to_string(), None),
        Metric::Explicit(d) => ("explicit".to_string(), Some(d.clone())),
    };
    let file = SpaceFile {
        points: space.points().to_vec(),
        weights: space.weights().to_vec(),
        metric,
        distances,
    };
    write_string(path, &serde_json::to_string_pretty(&file).unwrap())
}

/// Load an ordered list of factor spaces and assemble the product.
pub fn load_product(paths: &[impl AsRef<Path>]) -> Result<Arc<ProductSpace>> {
    let factors: Vec<Arc<MarginalSpace>> = paths
        .iter()
        .map(|p| load_space(p.as_ref()).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(Arc::new(ProductSpace::new(factors)?))
}

// ---------------------------------------------------------------------------
// Coupling and cost files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CouplingFile {
    shape: Vec<usize>,
    order: String,
    values: Vec<f64>,
    normalized: bool,
}

fn check_tensor_file(path: &Path, file: &CouplingFile, space: &ProductSpace) -> Result<()> {
    if file.order != "row-major" {
        return Err(parse_err(
            path,
            format!("unsupported order {:?} (only \"row-major\")", file.order),
        ));
    }
    if file.shape != space.shape() {
        return Err(Error::ShapeMismatch {
            detail: format!(
                "{}: file shape {:?} does not match the space grid {:?}",
                path.display(),
                file.shape,
                space.shape()
            ),
        });
    }
    Ok(())
}

pub fn load_coupling(path: &Path, space: Arc<ProductSpace>) -> Result<Coupling> {
    let text = read_to_string(path)?;
    let file: CouplingFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    check_tensor_file(path, &file, &space)?;
    Coupling::new(space, file.values, file.normalized)
}

pub fn save_coupling(path: &Path, coupling: &Coupling) -> Result<()> {
    let file = CouplingFile {
        shape: coupling.shape(),
        order: "row-major".to_string(),
        values: coupling.values().to_vec(),
        normalized: coupling.normalized(),
    };
    write_string(path, &serde_json::to_string(&file).unwrap())
}

/// Cost tensors reuse the coupling format (values may be negative; the
/// `normalized` flag is ignored).
pub fn load_cost(path: &Path, space: Arc<ProductSpace>) -> Result<CostTensor> {
    let text = read_to_string(path)?;
    let file: CouplingFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    check_tensor_file(path, &file, &space)?;
    CostTensor::new(space, file.values)
}

pub fn save_cost(path: &Path, cost: &CostTensor) -> Result<()> {
    let file = CouplingFile {
        shape: cost.space().shape(),
        order: "row-major".to_string(),
        values: cost.values().to_vec(),
        normalized: false,
    };
    write_string(path, &serde_json::to_string(&file).unwrap())
}

// ---------------------------------------------------------------------------
// Marginal files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MarginalFile {
    shape: Vec<usize>,
    order: String,
    values: Vec<f64>,
    normalized: bool,
}

/// Marginals load from two-column CSV (`index,value`, an optional header
/// line) or from the structured format with a length-1 shape.
pub fn load_marginal(path: &Path, space: Arc<MarginalSpace>) -> Result<MarginalDensity> {
    let text = read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let file: MarginalFile = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
        if file.shape.len() != 1 || file.shape[0] != space.len() {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "{}: marginal shape {:?} does not match the factor size {}",
                    path.display(),
                    file.shape,
                    space.len()
                ),
            });
        }
        return if file.normalized {
            MarginalDensity::new(space, file.values)
        } else {
            MarginalDensity::new_unnormalized(space, file.values)
        };
    }
    let mut values = vec![f64::NAN; space.len()];
    let mut seen = vec![false; space.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',');
        let (a, b) = match (cols.next(), cols.next()) {
            (Some(a), Some(b)) => (a.trim(), b.trim()),
            _ => {
                return Err(parse_err(
                    path,
                    format!("line {}: expected two comma-separated columns", lineno + 1),
                ))
            }
        };
        let idx: usize = match a.parse() {
            Ok(i) => i,
            Err(_) if lineno == 0 => continue, // header line
            Err(e) => {
                return Err(parse_err(path, format!("line {}: bad index: {e}", lineno + 1)))
            }
        };
        let value: f64 = b
            .parse()
            .map_err(|e| parse_err(path, format!("line {}: bad value: {e}", lineno + 1)))?;
        if idx >= values.len() {
            return Err(Error::IndexOutOfRange {
                factor: 0,
                index: idx,
                size: values.len(),
            });
        }
        if seen[idx] {
            return Err(parse_err(
                path,
                format!("line {}: duplicate index {idx}", lineno + 1),
            ));
        }
        seen[idx] = true;
        values[idx] = value;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_err(path, format!("missing value for index {missing}")));
    }
    MarginalDensity::new(space, values)
}

pub fn save_marginal_csv(path: &Path, marginal: &MarginalDensity) -> Result<()> {
    let mut out = String::from("index,value\n");
    for (i, v) in marginal.values().iter().enumerate() {
        out.push_str(&format!("{i},{v:.17e}\n"));
    }
    write_string(path, &out)
}

pub fn save_marginal_structured(path: &Path, marginal: &MarginalDensity) -> Result<()> {
    let file = MarginalFile {
        shape: vec![marginal.values().len()],
        order: "row-major".to_string(),
        values: marginal.values().to_vec(),
        normalized: marginal.normalized(),
    };
    write_string(path, &serde_json::to_string(&file).unwrap())
}

// ---------------------------------------------------------------------------
// Modulus configuration
// ---------------------------------------------------------------------------

/// Parse a modulus configuration from inline JSON or, with a leading `@`,
/// from a file: `{"kind":"lipschitz","L":1.0}`,
/// `{"kind":"hoelder","C":1.0,"alpha":0.5}`, `{"kind":"empirical"}`.
pub fn parse_modulus_config(arg: &str) -> Result<ModulusConfig> {
    let text = if let Some(path) = arg.strip_prefix('@') {
        read_to_string(Path::new(path))?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: "<modulus config>".to_string(),
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_string(path, &serde_json::to_string_pretty(value).unwrap())
}

/// Flat per-stage CSV for plotting.
pub fn correction_report_csv(report: &CorrectionReport) -> String {
    let mut out = String::from("stage,coord,epsilon,sigma,residual_before,deviation\n");
    for (i, s) in report.stages.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            i, s.coord, s.eps, s.sigma, s.residual_before, s.deviation
        ));
    }
    out
}

/// One row of the sigma tabulation emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaRow {
    pub coord: usize,
    pub eps: f64,
    pub sigma: f64,
    pub theta_star: f64,
    pub kappa: f64,
    pub c: f64,
    pub deviation_factor: f64,
}

pub fn sigma_table_csv(rows: &[SigmaRow]) -> String {
    let mut out = String::from("coord,eps,sigma,theta_star,kappa,c,K\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.coord, r.eps, r.sigma, r.theta_star, r.kappa, r.c, r.deviation_factor
        ));
    }
    out
}
