//! Dense feed-forward layers with exact reverse-mode gradients, inverted
//! dropout, Adam, and a central finite-difference checker.
//!
//! Weights are stored `in_dim x out_dim` row-major, so a forward pass is
//! `z = x W + b` with `x` a row vector.

use rand::{Rng, RngCore};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::Dimension(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        DenseLayer {
            weights: Matrix {
                rows: in_dim,
                cols: out_dim,
                data,
            },
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (zj, &w) in z.iter_mut().zip(self.weights.row(i)) {
                *zj += xi * w;
            }
        }
        z
    }
}

/// Inverted dropout applied after every hidden activation during training.
pub enum Dropout<'a> {
    Off,
    Train {
        /// Keep probability for each hidden layer (all layers but the last).
        keep: &'a [f64],
        rng: &'a mut dyn RngCore,
    },
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input seen by each layer; the last entry is the network output.
    activations: Vec<Vec<f64>>,
    /// Raw activation outputs before dropout, per layer.
    outputs: Vec<Vec<f64>>,
    /// Per hidden layer, the dropout scale (0 or 1/keep) applied to each unit.
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn check_chain(layers: &[DenseLayer], input_len: usize) -> Result<()> {
    let mut dim = input_len;
    for (l, layer) in layers.iter().enumerate() {
        if layer.in_dim() != dim {
            return Err(Error::Dimension(format!(
                "layer {l} expects input of length {}, got {dim}",
                layer.in_dim()
            )));
        }
        if layer.bias.len() != layer.out_dim() {
            return Err(Error::Dimension(format!("layer {l} bias length")));
        }
        dim = layer.out_dim();
    }
    Ok(())
}

pub fn forward(layers: &[DenseLayer], input: &[f64], mut dropout: Dropout<'_>) -> Result<(Vec<f64>, ForwardCache)> {
    check_chain(layers, input.len())?;
    if let Dropout::Train { keep, .. } = &dropout {
        if keep.len() + 1 != layers.len() {
            return Err(Error::Dimension(format!(
                "{} keep probabilities for {} hidden layers",
                keep.len(),
                layers.len().saturating_sub(1)
            )));
        }
    }

    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut outputs = Vec::with_capacity(layers.len());
    let mut masks = Vec::with_capacity(layers.len());
    activations.push(input.to_vec());

    for (l, layer) in layers.iter().enumerate() {
        let mut a = layer.affine(&activations[l]);
        for v in &mut a {
            *v = layer.activation.apply(*v);
        }
        let hidden = l + 1 < layers.len();
        let mask = match &mut dropout {
            Dropout::Train { keep, rng } if hidden && keep[l] < 1.0 => {
                let p = keep[l];
                let m: Vec<f64> = (0..a.len())
                    .map(|_| if rng.gen::<f64>() < p { 1.0 / p } else { 0.0 })
                    .collect();
                Some(m)
            }
            _ => None,
        };
        let next = match &mask {
            Some(m) => a.iter().zip(m).map(|(v, s)| v * s).collect(),
            None => a.clone(),
        };
        outputs.push(a);
        masks.push(mask);
        activations.push(next);
    }

    let out = activations.last().cloned().unwrap_or_default();
    Ok((
        out,
        ForwardCache {
            activations,
            outputs,
            masks,
        },
    ))
}

/// Gradient buffers shaped like a layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl GradientStore {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        GradientStore {
            weights: layers
                .iter()
                .map(|l| Matrix::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            bias: layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.bias.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    fn congruent(&self, layers: &[DenseLayer]) -> bool {
        self.weights.len() == layers.len()
            && self.bias.len() == layers.len()
            && layers.iter().zip(&self.weights).zip(&self.bias).all(|((l, w), b)| {
                w.rows() == l.in_dim() && w.cols() == l.out_dim() && b.len() == l.out_dim()
            })
    }
}

/// Full reverse pass: parameter gradients plus the gradient w.r.t. the input.
pub fn backward(layers: &[DenseLayer], cache: &ForwardCache, upstream: &[f64]) -> Result<(GradientStore, Vec<f64>)> {
    let mut grads = GradientStore::zeros_like(layers);
    let input_grad = backward_into(layers, cache, upstream, &mut grads)?;
    Ok((grads, input_grad))
}

/// Reverse pass that adds into `grads`. Returns the input gradient.
pub fn backward_into(
    layers: &[DenseLayer],
    cache: &ForwardCache,
    upstream: &[f64],
    grads: &mut GradientStore,
) -> Result<Vec<f64>> {
    if cache.outputs.len() != layers.len() || !grads.congruent(layers) {
        return Err(Error::Dimension("cache or gradient store does not match layers".into()));
    }
    if upstream.len() != cache.output().len() {
        return Err(Error::Dimension(format!(
            "upstream gradient of length {} for output of length {}",
            upstream.len(),
            cache.output().len()
        )));
    }

    let mut g = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        if let Some(mask) = &cache.masks[l] {
            for (gi, m) in g.iter_mut().zip(mask) {
                *gi *= m;
            }
        }
        for (gi, &a) in g.iter_mut().zip(&cache.outputs[l]) {
            *gi *= layer.activation.derivative_from_output(a);
        }
        let x = &cache.activations[l];
        let gw = &mut grads.weights[l];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (w, &gj) in gw.row_mut(i).iter_mut().zip(&g) {
                *w += xi * gj;
            }
        }
        for (b, &gj) in grads.bias[l].iter_mut().zip(&g) {
            *b += gj;
        }
        let mut gx = vec![0.0; layer.in_dim()];
        for (i, gxi) in gx.iter_mut().enumerate() {
            *gxi = layer
                .weights
                .row(i)
                .iter()
                .zip(&g)
                .map(|(w, gj)| w * gj)
                .sum();
        }
        g = gx;
    }
    Ok(g)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every tensor in `params` from the matching gradient tensor.
    ///
    /// Nothing is modified when any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Dimension("parameter and gradient tensors differ in shape".into()));
        }
        if let Some((t, i)) = grads
            .iter()
            .enumerate()
            .find_map(|(t, g)| g.iter().position(|v| !v.is_finite()).map(|i| (t, i)))
        {
            return Err(Error::NonFinite(format!(
                "gradient tensor {t}, entry {i} at optimizer step {}",
                self.step + 1
            )));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub checked: usize,
}

impl GradientCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Denominator floor so gradients that are zero up to roundoff compare as equal.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Central differences `(f(θ+h) - f(θ-h)) / 2h` over the given coordinates.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> GradientCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut theta = params.to_vec();
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &i in coords {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss_fn(&theta);
        theta[i] = orig - h;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        report.max_absolute_error = report.max_absolute_error.max((analytic[i] - numeric).abs());
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some(i);
        }
        report.checked += 1;
    }
    report
}

const LAYERS_MAGIC: &[u8; 4] = b"MRNN";
const LAYERS_VERSION: u32 = 1;

pub fn write_layers(w: &mut Writer, layers: &[DenseLayer]) {
    w.bytes(LAYERS_MAGIC);
    w.u32(LAYERS_VERSION);
    w.u32(layers.len() as u32);
    for l in layers {
        w.u32(l.in_dim() as u32);
        w.u32(l.out_dim() as u32);
        w.u8(l.activation.tag());
        w.f64s(l.weights.as_slice());
        w.f64s(&l.bias);
    }
}

pub fn read_layers(r: &mut Reader<'_>) -> Result<Vec<DenseLayer>> {
    r.expect(LAYERS_MAGIC)?;
    let version = r.u32()?;
    if version != LAYERS_VERSION {
        return Err(Error::Checkpoint(format!("unsupported layer format version {version}")));
    }
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let activation = Activation::from_tag(r.u8()?)?;
        let weights = Matrix::from_vec(in_dim, out_dim, r.f64s()?)?;
        let bias = r.f64s()?;
        layers.push(DenseLayer::new(weights, bias, activation)?);
    }
    Ok(layers)
}

/// Serializes a bare layer stack as a standalone file image.
pub fn layers_to_bytes(layers: &[DenseLayer]) -> Vec<u8> {
    let mut w = Writer::new();
    write_layers(&mut w, layers);
    w.into_inner()
}

pub fn layers_from_bytes(bytes: &[u8]) -> Result<Vec<DenseLayer>> {
    let mut r = Reader::new(bytes);
    let layers = read_layers(&mut r)?;
    r.finish()?;
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn random_stack(dims: &[usize], seed: u64) -> Vec<DenseLayer> {
        let mut rng = seeding::rng(seed);
        let n = dims.len() - 1;
        (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Tanh } else { Activation::Relu };
                let mut l = DenseLayer::glorot(dims[i], dims[i + 1], act, &mut rng);
                for b in &mut l.bias {
                    *b = rng.gen_range(-0.1..0.1);
                }
                l
            })
            .collect()
    }

    fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
        layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    fn unflatten(layers: &mut [DenseLayer], theta: &[f64]) {
        let mut k = 0;
        for l in layers {
            for v in l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()) {
                *v = theta[k];
                k += 1;
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![
            DenseLayer::zeros(3, 4, Activation::Relu),
            DenseLayer::zeros(4, 1, Activation::Tanh),
        ];
        let (out, _) = forward(&layers, &[1.0, -2.0, 3.0], Dropout::Off).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn affine_identity_example() {
        let layer = DenseLayer::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            vec![-1.0],
            Activation::Identity,
        )
        .unwrap();
        let (out, cache) = forward(&[layer.clone()], &[3.0], Dropout::Off).unwrap();
        assert_eq!(out, vec![5.0]);

        let (g, gx) = backward(&[layer], &cache, &[1.0]).unwrap();
        assert_eq!(g.weights[0].get(0, 0), 3.0);
        assert_eq!(g.bias[0], vec![1.0]);
        assert_eq!(gx, vec![2.0]);
    }

    #[test]
    fn infer_is_deterministic() {
        let layers = random_stack(&[5, 8, 1], 3);
        let x = [0.3, -0.2, 0.9, 0.0, 1.5];
        let a = forward(&layers, &x, Dropout::Off).unwrap().0;
        let b = forward(&layers, &x, Dropout::Off).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let layers = vec![
            DenseLayer::zeros(3, 4, Activation::Relu),
            DenseLayer::zeros(5, 1, Activation::Tanh),
        ];
        let err = forward(&layers, &[0.0; 3], Dropout::Off).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        assert!(forward(&layers, &[0.0; 2], Dropout::Off).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layers = random_stack(&[4, 6, 6, 1], 11);
        let (_, cache) = forward(&layers, &[0.1, 0.2, -0.3, 0.4], Dropout::Off).unwrap();
        let (g, gx) = backward(&layers, &cache, &[0.0]).unwrap();
        assert!(g.is_zero());
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(backward(&layers, &cache, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10u64 {
            let hidden = 1 + (seed as usize % 3);
            let mut dims = vec![6];
            dims.extend(std::iter::repeat(7).take(hidden));
            dims.push(1);
            let layers = random_stack(&dims, seed);
            let mut rng = seeding::rng(seed + 1000);
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let (_, cache) = forward(&layers, &x, Dropout::Off).unwrap();
            let (g, gx) = backward(&layers, &cache, &[1.0]).unwrap();
            let analytic: Vec<f64> = g
                .weights
                .iter()
                .zip(&g.bias)
                .flat_map(|(w, b)| w.as_slice().iter().chain(b).copied())
                .collect();

            let theta = flatten(&layers);
            let mut scratch = layers.clone();
            let coords: Vec<usize> = (0..theta.len()).collect();
            let report = finite_difference_check(
                |t| {
                    unflatten(&mut scratch, t);
                    forward(&scratch, &x, Dropout::Off).unwrap().0[0]
                },
                &theta,
                &analytic,
                &coords,
                1e-5,
            );
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");

            let input_coords: Vec<usize> = (0..x.len()).collect();
            let report = finite_difference_check(
                |t| forward(&layers, t, Dropout::Off).unwrap().0[0],
                &x,
                &gx,
                &input_coords,
                1e-5,
            );
            assert!(report.passes(1e-4), "seed {seed} input: {report:?}");
        }
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let theta = [0.7, -1.3, 2.0];
        // Loss ignores coordinate 2.
        let loss = |t: &[f64]| 0.5 * (t[0] * t[0] + t[1] * t[1]);
        let analytic = [0.7, -1.3, 0.0];
        let r = finite_difference_check(loss, &theta, &analytic, &[0, 1, 2], 1e-5);
        assert!(r.max_absolute_error < 1e-9, "{r:?}");
        assert!(r.passes(1e-6));
    }

    #[test]
    fn dropout_is_inverted_and_unbiased() {
        // Identity hidden layer with weight 1 so the pre-dropout activation is known.
        let hidden = DenseLayer::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Identity).unwrap();
        let out = DenseLayer::new(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Identity).unwrap();
        let layers = [hidden, out];
        let keep = [0.8];
        let mut rng = seeding::rng(5);
        let n = 20_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                forward(&layers, &[2.0], Dropout::Train { keep: &keep, rng: &mut rng })
                    .unwrap()
                    .0[0]
            })
            .collect();
        assert!(samples.iter().all(|&s| s == 0.0 || s == 2.0 / 0.8));
        let mean = samples.iter().sum::<f64>() / n as f64;
        // Per-sample std of a scaled Bernoulli: a * sqrt((1 - p) / p).
        let sigma = 2.0 * (0.2f64 / 0.8).sqrt() / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn adam_examples() {
        let mut p = [0.5];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p[..]], &[&[0.0]]).unwrap();
        assert_eq!(p, [0.5]);

        let mut p = [0.0];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p[..]], &[&[1.0]]).unwrap();
        assert!((p[0] + 9.99999e-4).abs() < 1e-9, "{}", p[0]);

        // Scalar reference for a few steps of constant gradient.
        let mut p = [0.0];
        let mut adam = Adam::new(1e-3);
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            adam.step(&mut [&mut p[..]], &[&[1.0]]).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - q).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_without_mutating() {
        let mut p = [1.0, 2.0];
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut [&mut p[..]], &[&[0.1, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn activations_stay_in_range() {
        let layers = random_stack(&[3, 16, 1], 9);
        let mut rng = seeding::rng(10);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let (out, cache) = forward(&layers, &x, Dropout::Off).unwrap();
            assert!(out[0] > -1.0 && out[0] < 1.0 || out[0].abs() == 1.0);
            assert!(cache.outputs[0].iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn layer_bytes_round_trip_bit_exact() {
        let layers = random_stack(&[4, 5, 3, 1], 21);
        let bytes = layers_to_bytes(&layers);
        let back = layers_from_bytes(&bytes).unwrap();
        assert_eq!(layers_to_bytes(&back), bytes);
        assert!(layers_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
