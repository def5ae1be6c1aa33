use rand::Rng as _;

use super::{check_len, MlpSpec, ParamVector, Result};
use crate::rng;

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = rng::seeded(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.widths().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values, spec.manifest()).expect("manifest matches spec")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Layer activations of one forward pass: `acts[0]` is the input,
/// `acts[l]` the output of layer `l` (tanh for hidden layers).
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty trace")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("non-empty trace")
    }
}

/// Forward pass over a raw parameter slice laid out as `spec.manifest()`.
pub fn forward_trace(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Trace> {
    check_len("mlp parameters", spec.param_count(), params.len())?;
    check_len("mlp input", spec.input_width(), input.len())?;
    let layers = spec.num_layers();
    let mut acts = Vec::with_capacity(layers + 1);
    acts.push(input.to_vec());
    let mut offset = 0;
    for (l, w) in spec.widths().windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weight = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;
        let prev = &acts[l];
        let hidden = l + 1 < layers;
        let out: Vec<f64> = weight
            .chunks_exact(n_in)
            .zip(bias)
            .map(|(row, b)| {
                let z = dot(row, prev) + b;
                if hidden {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
        acts.push(out);
    }
    Ok(Trace { acts })
}

/// Reverse pass for `⟨cotangent, output⟩`. Returns the input gradient and,
/// when `grad_params` is given, *adds* the parameter gradient into it.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    trace: &Trace,
    cotangent: &[f64],
    mut grad_params: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    check_len("mlp parameters", spec.param_count(), params.len())?;
    check_len("mlp cotangent", spec.output_width(), cotangent.len())?;
    if let Some(g) = grad_params.as_deref() {
        check_len("mlp parameter gradient", spec.param_count(), g.len())?;
    }
    let widths = spec.widths();
    let layers = spec.num_layers();
    let mut offsets = Vec::with_capacity(layers);
    let mut offset = 0;
    for w in widths.windows(2) {
        offsets.push(offset);
        offset += w[0] * w[1] + w[1];
    }

    let mut delta = cotangent.to_vec();
    for l in (0..layers).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        if l + 1 < layers {
            for (d, a) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                *d *= 1.0 - a * a;
            }
        }
        let base = offsets[l];
        let weight = &params[base..base + n_in * n_out];
        let prev = &trace.acts[l];
        if let Some(g) = grad_params.as_deref_mut() {
            let (gw, gb) = g[base..base + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for ((grow, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                if d != 0.0 {
                    axpy(d, prev, grow);
                }
                *gbias += d;
            }
        }
        let mut next = vec![0.0; n_in];
        for (row, &d) in weight.chunks_exact(n_in).zip(&delta) {
            if d != 0.0 {
                axpy(d, row, &mut next);
            }
        }
        delta = next;
    }
    Ok(delta)
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    forward_trace(spec, params.values(), input).map(Trace::into_output)
}

/// Exact reverse-mode gradients of `⟨cotangent, mlp(input)⟩`.
pub fn mlp_vjp(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward_trace(spec, params.values(), input)?;
    let mut grad_params = vec![0.0; params.len()];
    let grad_input = backward(spec, params.values(), &trace, cotangent, Some(&mut grad_params))?;
    Ok((grad_input, grad_params))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrad {
    pub value: Vec<f64>,
    pub grad_input: Option<Vec<f64>>,
    pub grad_params: Option<Vec<f64>>,
}

pub fn mlp_value_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    cotangent: &[f64],
    request: GradRequest,
) -> Result<ValueGrad> {
    let trace = forward_trace(spec, params.values(), input)?;
    if !request.input && !request.params {
        return Ok(ValueGrad {
            value: trace.into_output(),
            grad_input: None,
            grad_params: None,
        });
    }
    let mut grad_params = request.params.then(|| vec![0.0; params.len()]);
    let grad_input = backward(spec, params.values(), &trace, cotangent, grad_params.as_deref_mut())?;
    Ok(ValueGrad {
        value: trace.into_output(),
        grad_input: request.input.then_some(grad_input),
        grad_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{grad_check, NnError};
    use proptest::prelude::*;

    fn random_vec(seed: u64, len: usize) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::new(vec![4, 8, 2]).unwrap();
        let a = init_params(&spec, 3);
        assert_eq!(a, init_params(&spec, 3));
        assert_ne!(a, init_params(&spec, 4));
        assert_eq!(a.len(), 58);
        assert!(a.tensor("layer0.bias").unwrap().iter().all(|&b| b == 0.0));
        assert!(a.tensor("layer1.bias").unwrap().iter().all(|&b| b == 0.0));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.tensor("layer0.weight").unwrap().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 5, 2]).unwrap();
        let p = ParamVector::zeros(spec.manifest());
        assert_eq!(mlp_forward(&spec, &p, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let spec = MlpSpec::new(vec![3, 2]).unwrap();
        let w = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let b = [0.25, -0.5];
        let p = ParamVector::new([&w[..], &b[..]].concat(), spec.manifest()).unwrap();
        let x = [0.5, -1.0, 2.0];
        let y = mlp_forward(&spec, &p, &x).unwrap();
        assert!((y[0] - (0.5 - 2.0 + 6.0 + 0.25)).abs() < 1e-15);
        assert!((y[1] - (-0.5 - 0.5 - 0.5)).abs() < 1e-15);
        let cot = [2.0, -3.0];
        let (gi, gp) = mlp_vjp(&spec, &p, &x, &cot).unwrap();
        let expected: Vec<f64> = (0..3).map(|j| w[j] * cot[0] + w[3 + j] * cot[1]).collect();
        assert_eq!(gi, expected);
        assert_eq!(&gp[6..], &cot);
        assert_eq!(&gp[..3], &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn hidden_activations_saturate_inside_unit_interval() {
        let spec = MlpSpec::new(vec![4, 6, 1]).unwrap();
        let mut p = init_params(&spec, 1);
        for v in p.values_mut() {
            *v *= 1e3;
        }
        let trace = forward_trace(&spec, p.values(), &[1.0, -1.0, 0.5, 2.0]).unwrap();
        assert!(trace.acts[1].iter().all(|a| a.abs() <= 1.0));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let p = init_params(&spec, 9);
        let (gi, gp) = mlp_vjp(&spec, &p, &random_vec(1, 4), &[0.0; 3]).unwrap();
        assert!(gi.iter().chain(&gp).all(|&g| g == 0.0));
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let p = init_params(&spec, 9);
        assert!(matches!(
            mlp_forward(&spec, &p, &[0.0; 3]),
            Err(NnError::Shape { .. })
        ));
        assert!(matches!(
            mlp_vjp(&spec, &p, &[0.0; 4], &[0.0; 2]),
            Err(NnError::Shape { .. })
        ));
    }

    #[test]
    fn value_grad_honours_request() {
        let spec = MlpSpec::new(vec![4, 6, 3]).unwrap();
        let p = init_params(&spec, 2);
        let x = random_vec(5, 4);
        let cot = random_vec(6, 3);
        let only_value = mlp_value_grad(&spec, &p, &x, &cot, GradRequest::default()).unwrap();
        assert!(only_value.grad_input.is_none() && only_value.grad_params.is_none());
        let both = mlp_value_grad(&spec, &p, &x, &cot, GradRequest { input: true, params: true }).unwrap();
        let (gi, gp) = mlp_vjp(&spec, &p, &x, &cot).unwrap();
        assert_eq!(both.value, only_value.value);
        assert_eq!(both.grad_input.unwrap(), gi);
        assert_eq!(both.grad_params.unwrap(), gp);
    }

    fn vjp_fd_error(widths: Vec<usize>, seed: u64) -> f64 {
        let spec = MlpSpec::new(widths).unwrap();
        let mut p = init_params(&spec, seed);
        // Non-zero biases so every parameter path is exercised.
        let noise = random_vec(seed ^ 0xAB, p.len());
        for (v, n) in p.values_mut().iter_mut().zip(noise) {
            *v += 0.1 * n;
        }
        let x = random_vec(seed + 1, spec.input_width());
        let cot = random_vec(seed + 2, spec.output_width());
        let inner = |pv: &[f64], xv: &[f64]| -> f64 {
            let y = forward_trace(&spec, pv, xv).unwrap().into_output();
            y.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let wrt_input = grad_check(
            |xv| {
                let (gi, _) = mlp_vjp(&spec, &p, xv, &cot).unwrap();
                (inner(p.values(), xv), gi)
            },
            &x,
            1e-5,
        );
        let wrt_params = grad_check(
            |pv| {
                let pp = ParamVector::new(pv.to_vec(), spec.manifest()).unwrap();
                let (_, gp) = mlp_vjp(&spec, &pp, &x, &cot).unwrap();
                (inner(pv, &x), gp)
            },
            p.values(),
            1e-5,
        );
        wrt_input.max(wrt_params)
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..20 {
            let err = vjp_fd_error(vec![6, 5, 3], seed);
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn vjp_matches_finite_differences_on_random_shapes(
            widths in proptest::collection::vec(1usize..7, 2..5),
            seed in 0u64..1000,
        ) {
            let err = vjp_fd_error(widths, seed);
            prop_assert!(err <= 1e-6, "{err}");
        }
    }
}
