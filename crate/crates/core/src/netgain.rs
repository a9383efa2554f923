//! Feedforward approximator for the UAV antenna gain.
//!
//! The network maps the 4-vector `[dx/d, dy/d, z/d, psi]` (UAV minus user,
//! normalized by the 3D link distance, plus the raw heading) to a gain in dB.
//! Parameters live in one flat buffer so optimizers can treat them as a
//! plain vector; gradients use the same layout.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, UavPose};
use crate::{Error, Result};

/// Input width of every gain network.
pub const FEATURE_DIM: usize = 4;

/// Layer widths of the standard gain network, input to output.
pub const STANDARD_LAYERS: [usize; 6] = [4, 60, 60, 40, 40, 1];

/// Activations of the standard gain network, one per non-input layer.
pub const STANDARD_ACTIVATIONS: [Activation; 5] = [
    Activation::Tanh,
    Activation::Tanh,
    Activation::Relu,
    Activation::Relu,
    Activation::Linear,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Network input for one UAV pose / candidate user location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainFeatures(pub [f64; FEATURE_DIM]);

/// Builds the normalized direction + heading feature vector.
pub fn features(pose: &UavPose, user: Point3) -> Result<GainFeatures> {
    let v = pose.position;
    let d = v.distance(&user);
    if !(d > 0.0) {
        return Err(Error::Domain("UAV and candidate coincide".into()));
    }
    Ok(GainFeatures([
        (v.x - user.x) / d,
        (v.y - user.y) / d,
        (v.z - user.z) / d,
        pose.heading,
    ]))
}

#[derive(Debug, Clone, PartialEq)]
struct LayerShape {
    rows: usize,
    cols: usize,
    activation: Activation,
    /// Start of this layer's row-major weights; the bias follows them.
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.rows * self.cols;
        s..s + self.rows
    }
}

/// A fully connected network with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct GainNetwork {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// One training example: features, regression target, and loss weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSample {
    pub x: GainFeatures,
    pub target: f64,
    pub weight: f64,
}

impl GainNetwork {
    fn layout(sizes: &[usize], activations: &[Activation]) -> Result<(Vec<LayerShape>, usize)> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::invalid(
                "network",
                format!(
                    "{} sizes need {} activations",
                    sizes.len(),
                    sizes.len().saturating_sub(1)
                ),
            ));
        }
        if sizes[0] != FEATURE_DIM {
            return Err(Error::invalid(
                "network",
                format!("input width must be {FEATURE_DIM}"),
            ));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::invalid("network", "output width must be 1"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("network", "zero-width layer"));
        }
        let mut offset = 0;
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let l = LayerShape {
                    rows: w[1],
                    cols: w[0],
                    activation,
                    offset,
                };
                offset += l.rows * l.cols + l.rows;
                l
            })
            .collect();
        Ok((layers, offset))
    }

    /// All parameters zero; evaluates to 0 everywhere.
    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        let (layers, n) = Self::layout(sizes, activations)?;
        Ok(Self {
            layers,
            params: vec![0.0; n],
        })
    }

    /// Scaled-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &net.layers {
            let limit = (6.0 / (l.rows + l.cols) as f64).sqrt();
            for w in &mut net.params[l.weights()] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    /// The 4-60-60-40-40-1 tanh/tanh/relu/relu/linear network.
    pub fn standard(seed: u64) -> Self {
        Self::new(&STANDARD_LAYERS, &STANDARD_ACTIVATIONS, seed).expect("standard layout is valid")
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].cols)
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weights and bias of layer `i` (0 = first hidden layer).
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = &self.layers[i];
        (&self.params[l.weights()], &self.params[l.bias()])
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Sets the output bias, leaving every other parameter untouched.
    pub fn set_output_bias(&mut self, b: f64) {
        let l = self.layers.last().unwrap();
        let r = l.bias();
        self.params[r.start] = b;
    }

    /// Runs the network, recording pre-activations and outputs per layer when
    /// `trace` is given.
    fn run(&self, x: &GainFeatures, mut trace: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>) -> f64 {
        let mut input: Vec<f64> = x.0.to_vec();
        for l in &self.layers {
            let w = &self.params[l.weights()];
            let b = &self.params[l.bias()];
            let z: Vec<f64> = w
                .chunks_exact(l.cols)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            if let Some(t) = trace.as_deref_mut() {
                t.push((z, a.clone()));
            }
            input = a;
        }
        input[0]
    }

    /// Gain estimate in dB.
    pub fn forward(&self, x: &GainFeatures) -> f64 {
        self.run(x, None)
    }

    /// Evaluates many inputs at once. Same arithmetic order as [`Self::forward`],
    /// so results are bit-identical; samples are processed in small tiles so
    /// the accumulators stay in registers.
    pub fn forward_batch(&self, xs: &[GainFeatures]) -> Vec<f64> {
        const TILE: usize = 8;
        let width = self
            .layers
            .iter()
            .map(|l| l.rows)
            .max()
            .unwrap_or(0)
            .max(FEATURE_DIM);
        let mut a = vec![[0.0; TILE]; width];
        let mut b = vec![[0.0; TILE]; width];
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(TILE) {
            for (i, lane) in a.iter_mut().take(FEATURE_DIM).enumerate() {
                for (s, x) in chunk.iter().enumerate() {
                    lane[s] = x.0[i];
                }
            }
            for l in &self.layers {
                let w = &self.params[l.weights()];
                let bias = &self.params[l.bias()];
                for ((row, &bj), dst) in w.chunks_exact(l.cols).zip(bias).zip(b.iter_mut()) {
                    let mut acc = [0.0; TILE];
                    for (&wji, src) in row.iter().zip(&a) {
                        for s in 0..TILE {
                            acc[s] += wji * src[s];
                        }
                    }
                    for s in 0..TILE {
                        dst[s] = l.activation.apply(bj + acc[s]);
                    }
                }
                std::mem::swap(&mut a, &mut b);
            }
            out.extend_from_slice(&a[0][..chunk.len()]);
        }
        out
    }

    /// Pre-activation values per layer, for diagnostics.
    pub fn preactivations(&self, x: &GainFeatures) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len());
        self.run(x, Some(&mut trace));
        trace.into_iter().map(|(z, _)| z).collect()
    }

    /// Weighted squared-error loss `sum w (target - f(x))^2` over the batch.
    pub fn loss(&self, batch: &[GainSample]) -> f64 {
        batch
            .iter()
            .map(|s| {
                let r = s.target - self.forward(&s.x);
                s.weight * r * r
            })
            .sum()
    }

    /// Batch loss and its exact gradient with respect to [`Self::params`].
    pub fn gradient(&self, batch: &[GainSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut trace = Vec::with_capacity(self.layers.len());
        for s in batch {
            trace.clear();
            let y = self.run(&s.x, Some(&mut trace));
            let r = s.target - y;
            loss += s.weight * r * r;
            // dL/dy for the linear output unit
            let mut delta_a = vec![-2.0 * s.weight * r];
            for (li, l) in self.layers.iter().enumerate().rev() {
                let (z, a) = &trace[li];
                let delta_z: Vec<f64> = delta_a
                    .iter()
                    .zip(z.iter().zip(a))
                    .map(|(da, (&zv, &av))| da * l.activation.derivative(zv, av))
                    .collect();
                let prev: &[f64] = if li == 0 { &s.x.0 } else { &trace[li - 1].1 };
                let wr = l.weights();
                let br = l.bias();
                for (i, dz) in delta_z.iter().enumerate() {
                    if *dz == 0.0 {
                        continue;
                    }
                    let row = &mut grad[wr.start + i * l.cols..wr.start + (i + 1) * l.cols];
                    for (g, p) in row.iter_mut().zip(prev) {
                        *g += dz * p;
                    }
                    grad[br.start + i] += dz;
                }
                if li > 0 {
                    let w = &self.params[wr];
                    let mut next = vec![0.0; l.cols];
                    for (i, dz) in delta_z.iter().enumerate() {
                        if *dz == 0.0 {
                            continue;
                        }
                        for (n, wv) in next.iter_mut().zip(&w[i * l.cols..(i + 1) * l.cols]) {
                            *n += dz * wv;
                        }
                    }
                    delta_a = next;
                }
            }
        }
        (loss, grad)
    }

    /// Upper bound on the Lipschitz constant: product of weight Frobenius norms.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                self.params[l.weights()]
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
                    .sqrt()
            })
            .product()
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.rows,
                    cols: l.cols,
                    weights: self.params[l.weights()].to_vec(),
                    bias: self.params[l.bias()].to_vec(),
                    activation: l.activation,
                })
                .collect(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.layers.is_empty() {
            return Err(Error::invalid("checkpoint", "no layers"));
        }
        let mut sizes = vec![ck.layers[0].cols];
        for (i, l) in ck.layers.iter().enumerate() {
            if l.cols != *sizes.last().unwrap() {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("layer {i} input width mismatch"),
                ));
            }
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("layer {i} has wrong parameter count"),
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("layer {i} has non-finite parameters"),
                ));
            }
            sizes.push(l.rows);
        }
        let acts: Vec<Activation> = ck.layers.iter().map(|l| l.activation).collect();
        let mut net = Self::zeros(&sizes, &acts)?;
        for (shape, rec) in net.layers.clone().iter().zip(&ck.layers) {
            net.params[shape.weights()].copy_from_slice(&rec.weights);
            net.params[shape.bias()].copy_from_slice(&rec.bias);
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: CheckpointMeta) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint(meta))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Ok((Self::from_checkpoint(&ck)?, ck.meta))
    }
}

/// Serialized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub trained_on: String,
    pub seed: u64,
    pub epochs: usize,
}

/// Model checkpoint file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<LayerRecord>,
    pub meta: CheckpointMeta,
}

/// Adaptive-moment gradient descent over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}
