//! Minimal differentiable MLP kit.
//!
//! Networks are plain tanh MLPs with an identity output layer. Parameters
//! live in a flat [`ParamVector`] whose manifest lists every tensor in
//! canonical order (`layer0.weight`, `layer0.bias`, `layer1.weight`, ...).
//! Weights are stored row-major as `[out, in]`.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::Adam;
pub use checkpoint::{load_params, save_params, Checkpoint};
pub use mlp::{
    backward, forward_trace, init_params, mlp_forward, mlp_value_grad, mlp_vjp, GradRequest,
    Trace, ValueGrad,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid MLP spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("manifest describes {manifest} values but {values} were given")]
    ManifestLength { manifest: usize, values: usize },
    #[error("unrecognized format (bad magic bytes)")]
    UnrecognizedFormat,
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("payload length mismatch: manifest needs {expected} bytes, file has {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::Shape { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(NnError::InvalidSpec(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn manifest(&self) -> Vec<TensorInfo> {
        self.manifest_with_prefix("")
    }

    pub fn manifest_with_prefix(&self, prefix: &str) -> Vec<TensorInfo> {
        self.widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    TensorInfo::new(format!("{prefix}layer{l}.weight"), vec![w[1], w[0]]),
                    TensorInfo::new(format!("{prefix}layer{l}.bias"), vec![w[1]]),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter store with a named shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Vec<TensorInfo>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, manifest: Vec<TensorInfo>) -> Result<Self> {
        let total: usize = manifest.iter().map(TensorInfo::numel).sum();
        if total != values.len() {
            return Err(NnError::ManifestLength {
                manifest: total,
                values: values.len(),
            });
        }
        Ok(Self { values, manifest })
    }

    pub fn zeros(manifest: Vec<TensorInfo>) -> Self {
        let total = manifest.iter().map(TensorInfo::numel).sum();
        Self {
            values: vec![0.0; total],
            manifest,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn manifest(&self) -> &[TensorInfo] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offset and length of a named tensor.
    pub fn locate(&self, name: &str) -> Option<(usize, usize)> {
        let mut offset = 0;
        for t in &self.manifest {
            if t.name == name {
                return Some((offset, t.numel()));
            }
            offset += t.numel();
        }
        None
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.locate(name).map(|(o, n)| &self.values[o..o + n])
    }

    /// Appends the tensors of `other` after this vector's tensors.
    pub fn concat(mut self, other: ParamVector) -> Self {
        self.values.extend(other.values);
        self.manifest.extend(other.manifest);
        self
    }

    /// Splits at a tensor boundary: the first `tensors` manifest entries go left.
    pub fn split_at_tensor(&self, tensors: usize) -> (ParamVector, ParamVector) {
        let n: usize = self.manifest[..tensors].iter().map(TensorInfo::numel).sum();
        (
            ParamVector {
                values: self.values[..n].to_vec(),
                manifest: self.manifest[..tensors].to_vec(),
            },
            ParamVector {
                values: self.values[n..].to_vec(),
                manifest: self.manifest[tensors..].to_vec(),
            },
        )
    }
}

/// Max relative error between the analytic gradient of `f` and central
/// differences `(f(x+εe_i) − f(x−εe_i))/2ε`, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(eps > 0.0, "grad_check needs a positive step");
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe).0;
        probe[i] = x[i] - eps;
        let down = f(&probe).0;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
        let spec = MlpSpec::new(vec![4, 8, 2]).unwrap();
        assert_eq!(spec.param_count(), 4 * 8 + 8 + 8 * 2 + 2);
        let total: usize = spec.manifest().iter().map(TensorInfo::numel).sum();
        assert_eq!(total, 58);
        let names: Vec<_> = spec.manifest().into_iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]
        );
    }

    #[test]
    fn param_vector_checks_manifest() {
        let m = vec![TensorInfo::new("a", vec![2, 3]), TensorInfo::new("b", vec![4])];
        assert!(ParamVector::new(vec![0.0; 9], m.clone()).is_err());
        let p = ParamVector::new((0..10).map(f64::from).collect(), m).unwrap();
        assert_eq!(p.tensor("b").unwrap(), &[6.0, 7.0, 8.0, 9.0]);
        assert_eq!(p.locate("a"), Some((0, 6)));
        assert!(p.tensor("c").is_none());
        let (l, r) = p.split_at_tensor(1);
        assert_eq!(l.len(), 6);
        assert_eq!(l.concat(r), p);
    }

    #[test]
    fn grad_check_on_exact_functions() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let quad = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / 2.0, x.to_vec());
        assert!(grad_check(quad, &x, 1e-5) <= 1e-8);
        let constant = |x: &[f64]| (3.0, vec![0.0; x.len()]);
        assert!(grad_check(constant, &x, 1e-5) <= 1e-8);
        let wrong = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / 2.0, vec![1.0; x.len()]);
        assert!(grad_check(wrong, &x, 1e-5) > 0.1);
    }
}
