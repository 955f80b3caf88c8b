//! Fully connected feed-forward networks with manual backpropagation.
//!
//! The networks here are small (two hidden layers of 50 by default), so the
//! implementation favors transparency over throughput: parameters live in
//! per-layer matrices with the bias folded in as a trailing column, and the
//! same per-layer "sites" (input activation and output sensitivity) feed
//! batch gradients, per-sample Jacobians, and the Kronecker factors used by
//! the curvature module.
//!
//! Flat parameter layout: layers in order, each layer's `out x (in + bias)`
//! matrix in row-major order (bias column last). Every consumer of flat
//! vectors (optimizers, Laplace posteriors, prior groups) relies on this
//! layout.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::SurrogateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Include bias terms. Disabling them makes a zero-hidden-layer network
    /// an exact linear model, which closed-form oracles rely on.
    pub bias: bool,
}

impl MlpConfig {
    /// The conventional regression architecture: two hidden layers of 50.
    pub fn standard(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        MlpConfig {
            input_dim,
            hidden: vec![50, 50],
            output_dim,
            activation,
            bias: true,
        }
    }

    /// (out, in) dimensions per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.output_dim, prev));
        dims
    }

    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Flat parameter count, biases included when enabled.
    pub fn param_count(&self) -> usize {
        let b = usize::from(self.bias);
        self.layer_dims()
            .iter()
            .map(|(out, inp)| out * (inp + b))
            .sum()
    }

    /// Flat-vector range of each layer's parameters.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let b = usize::from(self.bias);
        let mut ranges = Vec::with_capacity(self.layer_count());
        let mut offset = 0;
        for (out, inp) in self.layer_dims() {
            let len = out * (inp + b);
            ranges.push(offset..offset + len);
            offset += len;
        }
        ranges
    }

    fn validate(&self) -> Result<(), SurrogateError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(SurrogateError::Invalid(
                "input and output dimensions must be positive".to_string(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(SurrogateError::Invalid(
                "hidden layer widths must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-layer backpropagation site for one sample: the layer's input
/// activation (with the homogeneous 1 appended when biases are enabled) and
/// the sensitivity of each network output to the layer's pre-activations.
///
/// The Jacobian block of output k with respect to the layer's parameter
/// matrix is `s.row(k)^T * a^T`, so the site is exactly the information a
/// Kronecker-factored curvature needs.
#[derive(Debug, Clone)]
pub struct LayerSite {
    /// Input activation, length `in + bias`.
    pub a: DVector<f64>,
    /// Output sensitivities, `output_dim x out`.
    pub s: DMatrix<f64>,
}

/// A feed-forward network with parameters stored per layer, bias column last.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
    layers: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Initialize with zero biases and fan-in-scaled Gaussian weights:
    /// std = sqrt(2 / fan_in) for ReLU, sqrt(1 / fan_in) for tanh.
    pub fn init(cfg: MlpConfig, seed: u64) -> Result<Self, SurrogateError> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let b = usize::from(cfg.bias);
        let gain = match cfg.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let layers = cfg
            .layer_dims()
            .iter()
            .map(|&(out, inp)| {
                let std = (gain / inp as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                DMatrix::from_fn(out, inp + b, |_, c| {
                    if c < inp {
                        normal.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Ok(Mlp { cfg, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// Parameters as one flat vector, in the documented layout.
    pub fn params_flat(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_count());
        let mut offset = 0;
        for layer in &self.layers {
            for r in 0..layer.nrows() {
                for c in 0..layer.ncols() {
                    out[offset] = layer[(r, c)];
                    offset += 1;
                }
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &DVector<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut offset = 0;
        for layer in &mut self.layers {
            for r in 0..layer.nrows() {
                for c in 0..layer.ncols() {
                    layer[(r, c)] = params[offset];
                    offset += 1;
                }
            }
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), SurrogateError> {
        if x.ncols() != self.cfg.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.cfg.input_dim,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Affine map of one layer: A W^T (+ bias broadcast over rows).
    fn layer_affine(&self, idx: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        let layer = &self.layers[idx];
        let inp = layer.ncols() - usize::from(self.cfg.bias);
        let w = layer.columns(0, inp);
        let mut z = a * w.transpose();
        if self.cfg.bias {
            let bias = layer.column(inp);
            for r in 0..z.nrows() {
                for c in 0..z.ncols() {
                    z[(r, c)] += bias[c];
                }
            }
        }
        z
    }

    /// Batch forward pass: rows of `x` are samples.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SurrogateError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for idx in 0..self.layers.len() {
            let z = self.layer_affine(idx, &a);
            a = if idx < last {
                z.map(|v| self.cfg.activation.apply(v))
            } else {
                z
            };
        }
        Ok(a)
    }

    /// Batch gradient of a loss with respect to all parameters, given the
    /// loss gradient `delta = dL/d(output)` per sample (n x output_dim).
    /// Returns the flat gradient vector.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        delta: &DMatrix<f64>,
    ) -> Result<DVector<f64>, SurrogateError> {
        self.check_input(x)?;
        if delta.nrows() != x.nrows() || delta.ncols() != self.cfg.output_dim {
            return Err(SurrogateError::Invalid(format!(
                "delta is {}x{}, expected {}x{}",
                delta.nrows(),
                delta.ncols(),
                x.nrows(),
                self.cfg.output_dim
            )));
        }
        let last = self.layers.len() - 1;

        // Forward with caches.
        let mut activations = vec![x.clone()]; // input of each layer
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let z = self.layer_affine(idx, &activations[idx]);
            pre_acts.push(z.clone());
            let a = if idx < last {
                z.map(|v| self.cfg.activation.apply(v))
            } else {
                z
            };
            activations.push(a);
        }

        // Backward: the output layer is linear, so dL/dZ_last = delta.
        let mut grad = DVector::zeros(self.param_count());
        let ranges = self.cfg.layer_ranges();
        let mut dz = delta.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let inp = layer.ncols() - usize::from(self.cfg.bias);
            let a_in = &activations[idx];

            // Parameter gradients of this layer.
            let gw = dz.transpose() * a_in; // out x in
            let range = ranges[idx].clone();
            let cols = inp + usize::from(self.cfg.bias);
            for r in 0..gw.nrows() {
                for c in 0..inp {
                    grad[range.start + r * cols + c] = gw[(r, c)];
                }
                if self.cfg.bias {
                    grad[range.start + r * cols + inp] = dz.column(r).sum();
                }
            }

            // Propagate to the previous layer.
            if idx > 0 {
                let w = layer.columns(0, inp);
                let da = &dz * w; // n x in
                let z_prev = &pre_acts[idx - 1];
                dz = DMatrix::from_fn(da.nrows(), da.ncols(), |r, c| {
                    da[(r, c)] * self.cfg.activation.derivative(z_prev[(r, c)])
                });
            }
        }
        Ok(grad)
    }

    /// Per-layer sites (input activation, output sensitivities) for a single
    /// sample. Used for exact per-sample Jacobians and Kronecker factors.
    pub fn sample_sites(&self, x_row: &DVector<f64>) -> Result<Vec<LayerSite>, SurrogateError> {
        if x_row.len() != self.cfg.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.cfg.input_dim,
                found: x_row.len(),
            });
        }
        let last = self.layers.len() - 1;
        let c_out = self.cfg.output_dim;

        // Forward, caching per-layer inputs and pre-activations.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut a = x_row.clone();
        for idx in 0..self.layers.len() {
            inputs.push(a.clone());
            let layer = &self.layers[idx];
            let inp = layer.ncols() - usize::from(self.cfg.bias);
            let w = layer.columns(0, inp);
            let mut z = w * &a;
            if self.cfg.bias {
                z += layer.column(inp);
            }
            pre_acts.push(z.clone());
            a = if idx < last {
                z.map(|v| self.cfg.activation.apply(v))
            } else {
                z
            };
        }

        // Backward sensitivities: S_last = I, S_{l-1} = (S_l W_l) o act'(z_{l-1}).
        let mut sensitivities = vec![DMatrix::zeros(0, 0); self.layers.len()];
        sensitivities[last] = DMatrix::identity(c_out, c_out);
        for idx in (1..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let inp = layer.ncols() - usize::from(self.cfg.bias);
            let w = layer.columns(0, inp);
            let propagated = &sensitivities[idx] * w; // c_out x in
            let z_prev = &pre_acts[idx - 1];
            sensitivities[idx - 1] =
                DMatrix::from_fn(c_out, propagated.ncols(), |r, c| {
                    propagated[(r, c)] * self.cfg.activation.derivative(z_prev[c])
                });
        }

        Ok(inputs
            .into_iter()
            .zip(sensitivities)
            .map(|(a_in, s)| {
                let a = if self.cfg.bias {
                    let mut v = DVector::zeros(a_in.len() + 1);
                    v.rows_mut(0, a_in.len()).copy_from(&a_in);
                    v[a_in.len()] = 1.0;
                    v
                } else {
                    a_in
                };
                LayerSite { a, s }
            })
            .collect())
    }

    /// Jacobian of the network outputs with respect to the flat parameters
    /// at one input: `output_dim x param_count`.
    pub fn output_jacobian(&self, x_row: &DVector<f64>) -> Result<DMatrix<f64>, SurrogateError> {
        let sites = self.sample_sites(x_row)?;
        Ok(jacobian_from_sites(&self.cfg.layer_ranges(), &sites, self.param_count()))
    }
}

/// Assemble a flat-parameter Jacobian from per-layer sites: the block of
/// layer l, output k is s_l[k, r] * a_l[c] at flat position r * len(a) + c.
pub fn jacobian_from_sites(
    ranges: &[Range<usize>],
    sites: &[LayerSite],
    param_count: usize,
) -> DMatrix<f64> {
    let c_out = sites.first().map_or(0, |s| s.s.nrows());
    let mut jac = DMatrix::zeros(c_out, param_count);
    for (range, site) in ranges.iter().zip(sites) {
        let cols = site.a.len();
        for k in 0..c_out {
            for r in 0..site.s.ncols() {
                let s = site.s[(k, r)];
                if s == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    jac[(k, range.start + r * cols + c)] = s * site.a[c];
                }
            }
        }
    }
    jac
}
