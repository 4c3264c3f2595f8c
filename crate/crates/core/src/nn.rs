//! Dense multilayer perceptron with exact backpropagation.
//!
//! Everything is `f64` and row-major. A batch is a [`Matrix`] with one sample
//! per row. The network is pure: [`Mlp::forward`] and [`Mlp::backward`] never
//! touch the parameters, only [`Adam::step`] does.

use std::io::{self, BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer sizes must have at least two entries, all positive; got {0:?}")]
    BadLayerSizes(Vec<usize>),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("activation cache does not belong to this parameter state")]
    StaleCache,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> NnError {
    NnError::Shape {
        expected: expected.into(),
        got: got.into(),
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(format!("row of {cols}"), format!("row of {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(if trans_b { b.cols } else { b.rows }, k);
    debug_assert_eq!(c.shape(), (m, n));
    let (rsa, csa) = if trans_a {
        (1isize, a.cols as isize)
    } else {
        (a.cols as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b.cols as isize)
    } else {
        (b.cols as isize, 1isize)
    };
    // SAFETY: strides and extents are derived from the owning matrices and
    // the shapes were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// How the final layer's outputs are meant to be read. The layer itself is
/// affine in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Logits,
    Linear,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Logits => "logits",
            OutputHead::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logits" => Some(OutputHead::Logits),
            "linear" => Some(OutputHead::Linear),
            _ => None,
        }
    }
}

/// Gradients (or optimizer moments) laid out like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Mlp) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data.iter().chain(b.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.data.iter_mut().chain(b.iter_mut()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| *v == 0.0)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

/// Multilayer perceptron parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[i]` is `layer_sizes[i + 1] x layer_sizes[i]`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    head: OutputHead,
    version: u64,
}

/// Per-layer inputs and outputs recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    layer_sizes: Vec<usize>,
    /// `layers[0]` is the input batch, `layers[i]` the output of layer `i`.
    layers: Vec<Matrix>,
}

impl Mlp {
    /// Fan-in scaled uniform initialization: weights drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new(
        layer_sizes: &[usize],
        activation: Activation,
        head: OutputHead,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
            return Err(NnError::BadLayerSizes(layer_sizes.to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Matrix {
                rows: fan_out,
                cols: fan_in,
                data,
            });
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            head,
            version: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_parameters(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data.len() + b.len())
            .sum()
    }

    /// All parameters in checkpoint order (weights then bias, per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data.iter().chain(b.iter()).copied())
            .collect()
    }

    /// Overwrites every parameter from a flat vector in [`Mlp::flatten`] order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(shape_err(
                format!("{} parameters", self.num_parameters()),
                format!("{}", values.len()),
            ));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.data.iter_mut().chain(b.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable access to layer `i`'s weights and bias.
    pub fn layer_mut(&mut self, i: usize) -> (&mut Matrix, &mut Vec<f64>) {
        self.version += 1;
        (&mut self.weights[i], &mut self.biases[i])
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols != self.input_size() {
            return Err(shape_err(
                format!("batch x {}", self.input_size()),
                input.shape_str(),
            ));
        }
        let last = self.weights.len() - 1;
        let mut layers = Vec::with_capacity(self.weights.len() + 1);
        layers.push(input.clone());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let x = layers.last().unwrap();
            let mut z = Matrix::zeros(x.rows, w.rows);
            for r in 0..z.rows {
                z.row_mut(r).copy_from_slice(b);
            }
            gemm(1.0, x, false, w, true, 1.0, &mut z);
            if i != last {
                for v in z.data.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            layers.push(z);
        }
        let output = layers.last().unwrap().clone();
        Ok((
            output,
            ForwardCache {
                version: self.version,
                layer_sizes: self.layer_sizes.clone(),
                layers,
            },
        ))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Single-sample forward pass.
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, input.len(), input.to_vec())?;
        self.predict(&m).map(Matrix::into_vec)
    }

    /// Gradients of `sum(output_gradient .* output)` with respect to every
    /// parameter.
    pub fn backward(&self, cache: &ForwardCache, output_gradient: &Matrix) -> Result<Gradients> {
        Ok(self.backward_with_input(cache, output_gradient)?.0)
    }

    /// Like [`Mlp::backward`] but also returns the gradient with respect to
    /// the input batch.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        output_gradient: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        if cache.layer_sizes != self.layer_sizes || cache.version != self.version {
            return Err(NnError::StaleCache);
        }
        let out = cache.layers.last().unwrap();
        if output_gradient.shape() != out.shape() {
            return Err(shape_err(out.shape_str(), output_gradient.shape_str()));
        }
        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_gradient.clone();
        for i in (0..n_layers).rev() {
            if i != n_layers - 1 {
                let y = &cache.layers[i + 1];
                for (d, &yv) in delta.data.iter_mut().zip(&y.data) {
                    *d *= self.activation.derivative_from_output(yv);
                }
            }
            let x = &cache.layers[i];
            gemm(1.0, &delta, true, x, false, 0.0, &mut grads.weights[i]);
            let gb = &mut grads.biases[i];
            for r in 0..delta.rows {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            let mut prev = Matrix::zeros(delta.rows, self.layer_sizes[i]);
            gemm(1.0, &delta, false, &self.weights[i], false, 0.0, &mut prev);
            delta = prev;
        }
        Ok((grads, delta))
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_with_logits(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(shape_err(
            format!("{} labels", logits.rows),
            format!("{}", labels.len()),
        ));
    }
    let batch = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols {
            return Err(NnError::LabelOutOfRange {
                label,
                classes: logits.cols,
            });
        }
        let logp = log_softmax(logits.row(r));
        loss -= logp[label];
        for (g, lp) in grad.row_mut(r).iter_mut().zip(&logp) {
            *g = lp.exp() / batch;
        }
        grad.row_mut(r)[label] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss(predictions: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if predictions.shape() != targets.shape() {
        return Err(shape_err(predictions.shape_str(), targets.shape_str()));
    }
    let n = predictions.data.len().max(1) as f64;
    let mut grad = Matrix::zeros(predictions.rows, predictions.cols);
    let mut loss = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&predictions.data).zip(&targets.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Gradients,
    second_moment: Gradients,
    step_count: u64,
}

impl Adam {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) -> Result<()> {
        let same = grads.weights.len() == params.weights.len()
            && grads
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(g, w)| g.shape() == w.shape());
        if !same || self.first_moment.weights.len() != params.weights.len() {
            return Err(shape_err("gradients shaped like parameters", "mismatch"));
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        params.version += 1;
        let param_iter = params
            .weights
            .iter_mut()
            .zip(params.biases.iter_mut())
            .flat_map(|(w, b)| w.data.iter_mut().chain(b.iter_mut()));
        for (((p, g), m), v) in param_iter
            .zip(grads.values())
            .zip(self.first_moment.values_mut())
            .zip(self.second_moment.values_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &str = "PCHID-MLP-1";

/// Writes a checkpoint: a magic line, the layer sizes as a decimal line, the
/// activation and head names, then every parameter as a little-endian `f64`
/// (weights then bias, layer by layer).
pub fn save_checkpoint<W: Write>(params: &Mlp, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    let sizes: Vec<String> = params.layer_sizes.iter().map(|s| s.to_string()).collect();
    writeln!(out, "{}", sizes.join(" "))?;
    writeln!(out, "{} {}", params.activation.name(), params.head.name())?;
    for v in params.flatten() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(input: R) -> Result<Mlp> {
    let mut reader = io::BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut io::BufReader<R>| -> Result<String> {
        line.clear();
        reader.read_line(&mut line)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let sizes = next_line(&mut reader)?
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| NnError::Checkpoint(format!("layer sizes: {e}")))?;
    let kinds = next_line(&mut reader)?;
    let mut parts = kinds.split_whitespace();
    let activation = parts
        .next()
        .and_then(Activation::parse)
        .ok_or_else(|| NnError::Checkpoint(format!("activation in {kinds:?}")))?;
    let head = parts
        .next()
        .and_then(OutputHead::parse)
        .ok_or_else(|| NnError::Checkpoint(format!("head in {kinds:?}")))?;
    let mut params = Mlp::new(&sizes, activation, head, 0)?;
    let mut values = vec![0.0; params.num_parameters()];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        reader.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    params.set_flat(&values)?;
    params.version = 0;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let a = Mlp::new(&[4, 8, 3], Activation::Tanh, OutputHead::Logits, 7).unwrap();
        assert_eq!(a.weights()[0].shape(), (8, 4));
        assert_eq!(a.weights()[1].shape(), (3, 8));
        assert!(a.biases().iter().flatten().all(|b| *b == 0.0));
        let b = Mlp::new(&[2, 1], Activation::Tanh, OutputHead::Linear, 7).unwrap();
        let c = Mlp::new(&[2, 1], Activation::Tanh, OutputHead::Linear, 7).unwrap();
        assert_eq!(b.flatten(), c.flatten());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(Mlp::new(&[3], Activation::Tanh, OutputHead::Linear, 0).is_err());
        assert!(Mlp::new(&[], Activation::Tanh, OutputHead::Linear, 0).is_err());
        assert!(Mlp::new(&[3, 0, 2], Activation::Tanh, OutputHead::Linear, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::new(&[3, 5, 2], Activation::Tanh, OutputHead::Linear, 1).unwrap();
        let n = net.num_parameters();
        net.set_flat(&vec![0.0; n]).unwrap();
        let x = Matrix::from_rows(&[[0.3, -2.0, 7.0], [1.0, 1.0, 1.0]]).unwrap();
        assert!(net.predict(&x).unwrap().as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_unit() {
        let mut net = Mlp::new(&[1, 1], Activation::Tanh, OutputHead::Linear, 1).unwrap();
        net.set_flat(&[1.0, 0.0]).unwrap();
        assert_eq!(net.predict_one(&[0.5]).unwrap(), vec![0.5]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&[3, 2], Activation::Tanh, OutputHead::Linear, 1).unwrap();
        assert!(net.forward(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn linear_unit_gradient_by_hand() {
        let mut net = Mlp::new(&[2, 1], Activation::Tanh, OutputHead::Linear, 1).unwrap();
        net.set_flat(&[0.7, -1.3, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[2.0, 5.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let dy = Matrix::from_rows(&[[3.0]]).unwrap();
        let g = net.backward(&cache, &dy).unwrap();
        assert_eq!(g.weights[0].as_slice(), &[6.0, 15.0]);
        assert_eq!(g.biases[0], vec![3.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, OutputHead::Linear, 3).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Mlp::new(&[2, 2], Activation::Tanh, OutputHead::Linear, 3).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let mut adam = Adam::new(&net, AdamConfig::default());
        let g = Gradients::zeros_like(&net);
        adam.step(&mut net, &g).unwrap();
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(1, 2)),
            Err(NnError::StaleCache)
        ));
        let other = Mlp::new(&[2, 3, 2], Activation::Tanh, OutputHead::Linear, 3).unwrap();
        assert!(other.backward(&cache, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::zeros(3, 4);
        let (loss, grad) = cross_entropy_with_logits(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
        for r in 0..3 {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        let logits = Matrix::from_rows(&[[50.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_with_logits(&logits, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            cross_entropy_with_logits(&logits, &[3]),
            Err(NnError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn mse_values() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let t = Matrix::zeros(1, 2);
        assert_eq!(mse_loss(&p, &t).unwrap().0, 0.5);
        assert_eq!(mse_loss(&p, &p).unwrap().0, 0.0);
        assert!(mse_loss(&p, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-100.0, 0.0, 100.0]]).unwrap();
        let s = softmax_rows(&m);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, OutputHead::Linear, 5).unwrap();
        let before = net.flatten();
        let mut adam = Adam::new(&net, AdamConfig::default());
        let zero = Gradients::zeros_like(&net);
        adam.step(&mut net, &zero).unwrap();
        assert_eq!(before, net.flatten());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        let mut net = Mlp::new(&[1, 1], Activation::Tanh, OutputHead::Linear, 5).unwrap();
        net.set_flat(&[2.0, 0.0]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.weights[0].as_mut_slice()[0] = 1.0;
        let mut adam = Adam::new(&net, AdamConfig::with_lr(0.1));
        adam.step(&mut net, &g).unwrap();
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((net.flatten()[0] - expected).abs() < 1e-15);
        for _ in 0..5 {
            let prev = net.flatten()[0];
            adam.step(&mut net, &g).unwrap();
            assert!(net.flatten()[0] < prev);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Mlp::new(&[3, 7, 2], Activation::Relu, OutputHead::Logits, 11).unwrap();
        let mut bytes = Vec::new();
        save_checkpoint(&net, &mut bytes).unwrap();
        assert!(bytes.starts_with(b"PCHID-MLP-1\n3 7 2\nrelu logits\n"));
        let back = load_checkpoint(bytes.as_slice()).unwrap();
        let a: Vec<u64> = net.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.layer_sizes(), net.layer_sizes());
        assert!(load_checkpoint(&b"nope\n"[..]).is_err());
    }
}
