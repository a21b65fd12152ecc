//! JSON model manifests.
//!
//! ```json
//! {
//!   "input_dim": 2,
//!   "layers": [
//!     {"form": "residual", "weights": "layer0_w.mtx.txt", "bias": "layer0_b.mtx.txt",
//!      "q": "layer0_q.mtx.txt", "activation": "relu", "t_method": "sll"},
//!     {"form": "linear", "weights": "head_w.mtx.txt", "bias": "head_b.mtx.txt",
//!      "q": null, "activation": "relu", "t_method": "aol"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Optional per-layer keys:
//! `t` (explicit scaling: a vector file or a JSON line from `lipforge scale`),
//! `h`/`g`/`lambda` for general layers, and `conv` for convolutional layers,
//! whose `weights` file holds the kernel as an `out_ch x (in_ch*kh*kw)` matrix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::layers::{
    materialize_conv_matrix, ActivationKind, ConvGeometry, ConvKernel, GeneralLayerSpec, Layer, Network, WeightSpec,
};
use crate::scaling::{aol_diag, sll_diag, t_sn, QVector, ScalingMethod, ScalingVector};
use crate::tensor::{gram, parse_matrix, read_matrix, read_vector, write_matrix, write_vector, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerForm {
    Linear,
    Residual,
    General,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvEntry {
    pub in_shape: [usize; 3],
    pub kernel_hw: [usize; 2],
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub form: LayerForm,
    pub weights: String,
    pub bias: String,
    #[serde(default)]
    pub q: Option<String>,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub t_method: Option<ScalingMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    #[serde(default)]
    pub input_dim: Option<usize>,
    pub layers: Vec<LayerEntry>,
}

/// A scaling record as printed by `lipforge scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub diag: Vec<f64>,
    pub margin: f64,
    pub tolerance: f64,
}

impl ModelManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LipError::Parse { line: e.line(), message: e.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Parses an explicit scaling: either a JSON scale record or a vector in matrix text format.
pub fn parse_scaling_text(text: &str) -> Result<Vec<f64>> {
    if text.trim_start().starts_with('{') {
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let rec: ScaleRecord =
            serde_json::from_str(line).map_err(|e| LipError::Parse { line: e.line(), message: e.to_string() })?;
        if rec.diag.iter().any(|v| !v.is_finite()) {
            return Err(LipError::NonFinite);
        }
        Ok(rec.diag)
    } else {
        let m = parse_matrix(text)?;
        if m.rows() != 1 && m.cols() != 1 {
            return Err(LipError::Parse { line: 1, message: "scaling must be a vector".into() });
        }
        Ok(m.into_vec())
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn missing(layer: usize, key: &str) -> LipError {
    LipError::Parse { line: 0, message: format!("layer {layer}: `{key}` is required for this form") }
}

fn load_q(base: &Path, entry: &LayerEntry) -> Result<Option<QVector>> {
    entry.q.as_deref().map(|p| QVector::new(read_vector(resolve(base, p))?)).transpose()
}

fn scaling(base: &Path, entry: &LayerEntry, w: &DenseMatrix, q: Option<&QVector>) -> Result<ScalingVector> {
    if let Some(path) = &entry.t {
        let text = fs::read_to_string(resolve(base, path))
            .map_err(|e| LipError::Io(format!("{path}: {e}")))?;
        return ScalingVector::evaluate(w, parse_scaling_text(&text)?, ScalingMethod::Given);
    }
    let method = entry.t_method.unwrap_or(if q.is_some() { ScalingMethod::Sll } else { ScalingMethod::Aol });
    // evaluated without asserting so infeasible layers can still be reported
    match method {
        ScalingMethod::Sn => t_sn(w),
        ScalingMethod::Aol => ScalingVector::evaluate(w, aol_diag(&gram(w)), method),
        ScalingMethod::Sll => {
            let ones = QVector::ones(w.cols());
            ScalingVector::evaluate(w, sll_diag(&gram(w), q.unwrap_or(&ones).as_slice()), method)
        }
        other => Err(LipError::Domain(format!("t_method {} needs an explicit `t` file", other.as_str()))),
    }
}

fn load_layer(base: &Path, index: usize, entry: &LayerEntry) -> Result<Layer> {
    let weights = read_matrix(resolve(base, &entry.weights))?;
    let bias = read_vector(resolve(base, &entry.bias))?;
    let q = load_q(base, entry)?;
    match entry.form {
        LayerForm::Linear | LayerForm::Residual => {
            let ws = WeightSpec::new(weights, bias)?;
            let t = scaling(base, entry, &ws.w, q.as_ref())?;
            if entry.form == LayerForm::Linear {
                if ws.b.len() != ws.w.rows() {
                    return Err(LipError::Dimension(format!("layer {index}: linear bias length")));
                }
                Ok(Layer::Linear { ws, t, q })
            } else {
                if ws.b.len() != ws.w.cols() {
                    return Err(LipError::Dimension(format!("layer {index}: residual bias length")));
                }
                Ok(Layer::Residual { ws, t, q, activation: entry.activation })
            }
        }
        LayerForm::General => {
            let h = read_matrix(resolve(base, entry.h.as_deref().ok_or_else(|| missing(index, "h"))?))?;
            let g = read_matrix(resolve(base, entry.g.as_deref().ok_or_else(|| missing(index, "g"))?))?;
            let lambda = read_vector(resolve(base, entry.lambda.as_deref().ok_or_else(|| missing(index, "lambda"))?))?;
            let spec = GeneralLayerSpec::uncertified(h, g, weights, bias, lambda)?;
            Ok(Layer::General { spec, activation: entry.activation })
        }
        LayerForm::Conv => {
            let c = entry.conv.as_ref().ok_or_else(|| missing(index, "conv"))?;
            let [in_ch, height, width] = c.in_shape;
            let [kh, kw] = c.kernel_hw;
            let kernel = ConvKernel::from_matrix(&weights, in_ch, kh, kw)?;
            let geometry = ConvGeometry { in_shape: (in_ch, height, width), padding: c.padding, stride: c.stride };
            let m = materialize_conv_matrix(&kernel, geometry.in_shape, geometry.padding, geometry.stride)?;
            let ws = WeightSpec::new(m.transpose(), bias)?;
            if ws.b.len() != ws.w.cols() {
                return Err(LipError::Dimension(format!("layer {index}: conv bias needs {} entries", ws.w.cols())));
            }
            let t = scaling(base, entry, &ws.w, q.as_ref())?;
            Ok(Layer::Conv { kernel, geometry, ws, t, q, activation: entry.activation })
        }
    }
}

/// Builds a network from a parsed manifest, reading files relative to `base`.
///
/// Layers whose certificates fail are kept; check [`Network::certificates`].
pub fn network_from_manifest(manifest: &ModelManifest, base: &Path) -> Result<Network> {
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, e)| load_layer(base, i, e))
        .collect::<Result<Vec<_>>>()?;
    let input_dim = manifest.input_dim.or_else(|| layers.first().map(Layer::in_dim)).unwrap_or(0);
    Network::new(input_dim, layers)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LipError::Io(format!("{}: {e}", path.display())))?;
    let manifest = ModelManifest::from_json(&text)?;
    network_from_manifest(&manifest, path.parent().unwrap_or(Path::new(".")))
}

/// Writes `manifest.json` and one matrix file per parameter into `dir`.
pub fn save_network(net: &Network, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let file = |name: &str| format!("layer{i}_{name}.mtx.txt");
        let write_q = |q: &Option<QVector>| -> Result<Option<String>> {
            match q {
                Some(q) => {
                    write_vector(dir.join(file("q")), q.as_slice())?;
                    Ok(Some(file("q")))
                }
                None => Ok(None),
            }
        };
        let write_t = |t: &ScalingVector| -> Result<(Option<ScalingMethod>, Option<String>)> {
            if t.method == ScalingMethod::Given {
                write_vector(dir.join(file("t")), &t.diag)?;
                Ok((None, Some(file("t"))))
            } else {
                Ok((Some(t.method), None))
            }
        };
        let mut entry = LayerEntry {
            form: LayerForm::Linear,
            weights: file("w"),
            bias: file("b"),
            q: None,
            activation: ActivationKind::Relu,
            t_method: None,
            t: None,
            h: None,
            g: None,
            lambda: None,
            conv: None,
        };
        match layer {
            Layer::Linear { ws, t, q } | Layer::Residual { ws, t, q, .. } => {
                write_matrix(dir.join(file("w")), &ws.w)?;
                write_vector(dir.join(file("b")), &ws.b)?;
                entry.q = write_q(q)?;
                (entry.t_method, entry.t) = write_t(t)?;
                if let Layer::Residual { activation, .. } = layer {
                    entry.form = LayerForm::Residual;
                    entry.activation = *activation;
                }
            }
            Layer::General { spec, activation } => {
                entry.form = LayerForm::General;
                entry.activation = *activation;
                write_matrix(dir.join(file("w")), &spec.w)?;
                write_vector(dir.join(file("b")), &spec.b)?;
                write_matrix(dir.join(file("h")), &spec.h_mat)?;
                write_matrix(dir.join(file("g")), &spec.g_mat)?;
                write_vector(dir.join(file("lambda")), &spec.lambda)?;
                entry.h = Some(file("h"));
                entry.g = Some(file("g"));
                entry.lambda = Some(file("lambda"));
            }
            Layer::Conv { kernel, geometry, ws, t, q, activation } => {
                entry.form = LayerForm::Conv;
                entry.activation = *activation;
                write_matrix(dir.join(file("w")), &kernel.to_matrix())?;
                write_vector(dir.join(file("b")), &ws.b)?;
                entry.q = write_q(q)?;
                (entry.t_method, entry.t) = write_t(t)?;
                let (c, h, w) = geometry.in_shape;
                entry.conv = Some(ConvEntry {
                    in_shape: [c, h, w],
                    kernel_hw: [kernel.kh, kernel.kw],
                    padding: geometry.padding,
                    stride: geometry.stride,
                });
            }
        }
        entries.push(entry);
    }
    let manifest = ModelManifest { input_dim: Some(net.input_dim()), layers: entries };
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json())?;
    Ok(path)
}
