//! Dense feedforward regression networks over a flat parameter vector.
//!
//! Hidden layer `l` computes `h_l = act(W_lᵀ h_{l-1} - b_l)` and the output is
//! `W_{L+1}ᵀ h_L + b_{L+1}`. `W_l[src][dst]` connects unit `src` of layer `l-1`
//! to unit `dst` of layer `l`.
//!
//! The flat vector stores, for each layer in order, the weight block in
//! source-major order (`src * width_out + dst`) followed by the layer biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => logistic(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `h = act(z)`.
    /// ReLU at exactly zero has derivative 0.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A model evaluated from a flat parameter vector. Implemented by [`Architecture`]
/// and by the bias-free [`LinearModel`].
pub trait Model: Send + Sync {
    fn param_count(&self) -> usize;

    fn input_dim(&self) -> usize;

    fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    /// Returns `Σ (y - f)² / (2σ²)` and its gradient with respect to `theta`.
    fn nll_gradient(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        sigma_eps: f64,
    ) -> Result<(f64, Vec<f64>)>;

    /// Glorot-uniform half-width used to initialise the slab mean of parameter `index`.
    fn init_bound(&self, index: usize) -> f64;

    /// `(flat index, input index)` for every parameter attached to an input node.
    fn input_connections(&self) -> Vec<(usize, usize)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    input_dim: usize,
    widths: Vec<usize>,
    activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArchitecture("input dimension must be positive".into()));
        }
        if widths.is_empty() {
            return Err(Error::InvalidArchitecture(
                "at least one hidden layer is required".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArchitecture("hidden widths must be positive".into()));
        }
        Ok(Self {
            input_dim,
            widths,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Common hidden width `N` when every hidden layer has the same width.
    pub fn uniform_width(&self) -> Option<usize> {
        let first = self.widths[0];
        self.widths.iter().all(|&w| w == first).then_some(first)
    }

    /// Unit counts of every layer including input and the scalar output.
    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.widths.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.widths);
        sizes.push(1);
        sizes
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(self)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let expected = param_count(self);
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected,
                actual: theta.len(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "covariate columns",
                expected: self.input_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass that keeps every layer's activations; `acts[0]` is the input.
    fn forward_cached(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let sizes = self.layer_sizes();
        let hidden = self.widths.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(hidden + 1);
        acts.push(x.to_owned());
        let mut offset = 0;
        for layer in 0..hidden {
            let (src, dst) = (sizes[layer], sizes[layer + 1]);
            let (w, b) = layer_views(theta, offset, src, dst);
            offset += src * dst + dst;
            let mut z = acts[layer].dot(&w);
            z -= &b;
            let act = self.activation;
            z.mapv_inplace(|v| act.apply(v));
            acts.push(z);
        }
        let src = sizes[hidden];
        let w_out = ArrayView1::from(&theta[offset..offset + src]);
        let b_out = theta[offset + src];
        let out = acts[hidden].dot(&w_out) + b_out;
        (acts, out)
    }
}

fn layer_views(theta: &[f64], offset: usize, src: usize, dst: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w = ArrayView2::from_shape((src, dst), &theta[offset..offset + src * dst])
        .expect("layout slice matches layer shape");
    let b = ArrayView1::from(&theta[offset + src * dst..offset + src * dst + dst]);
    (w, b)
}

/// Total number of weights and biases, `T`.
pub fn param_count(arch: &Architecture) -> usize {
    arch.layer_sizes()
        .windows(2)
        .map(|pair| pair[0] * pair[1] + pair[1])
        .sum()
}

/// Evaluates `f_θ` on every row of `x`.
pub fn forward(arch: &Architecture, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    arch.check_theta(theta)?;
    arch.check_inputs(&x)?;
    let (_, out) = arch.forward_cached(theta, x);
    Ok(out)
}

/// Gradient of `Σ (y_i - f_θ(x_i))² / (2σ²)` with respect to every coordinate of θ.
pub fn loss_gradient(
    arch: &Architecture,
    theta: &[f64],
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    sigma_eps: f64,
) -> Result<Vec<f64>> {
    arch.nll_gradient(theta, x, y, sigma_eps).map(|(_, g)| g)
}

fn check_sigma(sigma_eps: f64) -> Result<()> {
    if !(sigma_eps > 0.0 && sigma_eps.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "sigma_eps",
            value: sigma_eps,
            reason: "noise standard deviation must be positive",
        });
    }
    Ok(())
}

fn check_rows(x: &ArrayView2<'_, f64>, y: &ArrayView1<'_, f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "response length",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    Ok(())
}

impl Model for Architecture {
    fn param_count(&self) -> usize {
        param_count(self)
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        forward(self, theta, x)
    }

    fn nll_gradient(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        sigma_eps: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        self.check_inputs(&x)?;
        check_rows(&x, &y)?;
        check_sigma(sigma_eps)?;

        let sizes = self.layer_sizes();
        let hidden = self.widths.len();
        let (acts, out) = self.forward_cached(theta, x);
        let inv_var = 1.0 / (sigma_eps * sigma_eps);

        let resid = &out - &y;
        let loss = 0.5 * inv_var * resid.dot(&resid);
        if !loss.is_finite() {
            return Err(Error::NumericalOverflow("network loss"));
        }

        let mut grad = vec![0.0; theta.len()];
        let offsets = layer_offsets(&sizes);

        // output layer
        let delta = resid * inv_var;
        let out_off = offsets[hidden];
        let src = sizes[hidden];
        let gw = acts[hidden].t().dot(&delta);
        grad[out_off..out_off + src].copy_from_slice(gw.as_slice().expect("contiguous"));
        grad[out_off + src] = delta.sum();

        let w_out = ArrayView1::from(&theta[out_off..out_off + src]);
        // dL/dh_L as an outer product
        let mut d_act = delta
            .view()
            .insert_axis(Axis(1))
            .dot(&w_out.insert_axis(Axis(0)));

        for layer in (0..hidden).rev() {
            let (src, dst) = (sizes[layer], sizes[layer + 1]);
            let off = offsets[layer];
            let act = self.activation;
            let h = &acts[layer + 1];
            ndarray::Zip::from(&mut d_act)
                .and(h)
                .for_each(|d, &hv| *d *= act.derivative_from_output(hv));
            let d_pre = d_act;

            let gw = acts[layer].t().dot(&d_pre);
            for (slot, v) in grad[off..off + src * dst].iter_mut().zip(gw.iter()) {
                *slot = *v;
            }
            // pre-activation is Wᵀh - b
            let gb = d_pre.sum_axis(Axis(0));
            for (slot, v) in grad[off + src * dst..off + src * dst + dst].iter_mut().zip(gb.iter()) {
                *slot = -*v;
            }
            if layer > 0 {
                let (w, _) = layer_views(theta, off, src, dst);
                d_act = d_pre.dot(&w.t());
            } else {
                break;
            }
        }

        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalOverflow("network gradient"));
        }
        Ok((loss, grad))
    }

    fn init_bound(&self, index: usize) -> f64 {
        let coord = self.layout().coord(index);
        let sizes = self.layer_sizes();
        let fan_in = sizes[coord.layer - 1];
        let fan_out = sizes[coord.layer];
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }

    fn input_connections(&self) -> Vec<(usize, usize)> {
        let dst = self.widths[0];
        (0..self.input_dim)
            .flat_map(|src| (0..dst).map(move |d| (src * dst + d, src)))
            .collect()
    }
}

fn layer_offsets(sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut acc = 0;
    for pair in sizes.windows(2) {
        offsets.push(acc);
        acc += pair[0] * pair[1] + pair[1];
    }
    offsets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight { src: usize, dst: usize },
    Bias { unit: usize },
}

/// Position of one flat parameter. `layer` runs from 1 (input → first hidden) to `L + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub layer: usize,
    pub kind: ParamKind,
}

/// Bijection between flat indices and layer coordinates.
#[derive(Debug, Clone)]
pub struct ParameterLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParameterLayout {
    fn new(arch: &Architecture) -> Self {
        let sizes = arch.layer_sizes();
        let offsets = layer_offsets(&sizes);
        let total = param_count(arch);
        Self {
            sizes,
            offsets,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn coord(&self, index: usize) -> ParamCoord {
        assert!(index < self.total, "flat index {index} out of range");
        let layer0 = self.offsets.partition_point(|&o| o <= index) - 1;
        let (src, dst) = (self.sizes[layer0], self.sizes[layer0 + 1]);
        let local = index - self.offsets[layer0];
        let kind = if local < src * dst {
            ParamKind::Weight {
                src: local / dst,
                dst: local % dst,
            }
        } else {
            ParamKind::Bias {
                unit: local - src * dst,
            }
        };
        ParamCoord {
            layer: layer0 + 1,
            kind,
        }
    }

    pub fn index(&self, coord: ParamCoord) -> Option<usize> {
        if coord.layer == 0 || coord.layer > self.offsets.len() {
            return None;
        }
        let layer0 = coord.layer - 1;
        let (src, dst) = (self.sizes[layer0], self.sizes[layer0 + 1]);
        let off = self.offsets[layer0];
        match coord.kind {
            ParamKind::Weight { src: s, dst: d } if s < src && d < dst => Some(off + s * dst + d),
            ParamKind::Bias { unit } if unit < dst => Some(off + src * dst + unit),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamCoord> + '_ {
        (0..self.total).map(|i| self.coord(i))
    }
}

/// `f_β(x) = xᵀβ` with no intercept, sharing the flat-parameter machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    input_dim: usize,
}

impl LinearModel {
    pub fn new(input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArchitecture("input dimension must be positive".into()));
        }
        Ok(Self { input_dim })
    }

    fn check(&self, theta: &[f64], x: &ArrayView2<'_, f64>) -> Result<()> {
        if theta.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.input_dim,
                actual: theta.len(),
            });
        }
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "covariate columns",
                expected: self.input_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }
}

impl Model for LinearModel {
    fn param_count(&self) -> usize {
        self.input_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn forward(&self, theta: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check(theta, &x)?;
        Ok(x.dot(&ArrayView1::from(theta)))
    }

    fn nll_gradient(
        &self,
        theta: &[f64],
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        sigma_eps: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(theta, &x)?;
        check_rows(&x, &y)?;
        check_sigma(sigma_eps)?;
        let inv_var = 1.0 / (sigma_eps * sigma_eps);
        let resid = x.dot(&ArrayView1::from(theta)) - y;
        let loss = 0.5 * inv_var * resid.dot(&resid);
        if !loss.is_finite() {
            return Err(Error::NumericalOverflow("linear model loss"));
        }
        let grad = x.t().dot(&resid) * inv_var;
        Ok((loss, grad.to_vec()))
    }

    fn init_bound(&self, _index: usize) -> f64 {
        (6.0 / (self.input_dim + 1) as f64).sqrt()
    }

    fn input_connections(&self) -> Vec<(usize, usize)> {
        (0..self.input_dim).map(|j| (j, j)).collect()
    }
}
