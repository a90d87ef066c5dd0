//! From-scratch multilayer perceptron Q-function.
//!
//! Two architectures share the same input contract (a flat `6K` feature
//! vector) and output contract (`K + 1` action values):
//!
//! - standard: `6K -> 128 -> 256 -> K+1`, ReLU on both hidden layers;
//! - dueling: a shared `6K -> 128` layer feeding a value stream
//!   (`128 -> 256 -> 1`) and an advantage stream (`128 -> 256 -> K+1`),
//!   aggregated as `Q(a) = V + A(a) - mean(A)`.
//!
//! Backpropagation is exact for the squared TD error on a single selected
//! output, and the optimizer is standard bias-corrected Adam. Everything is
//! 64-bit; checkpoints are plain text and round-trip bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::env::FEATURES_PER_VEHICLE;

pub const HIDDEN1: usize = 128;
pub const HIDDEN2: usize = 256;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input length {got} does not match expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Standard,
    Dueling,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Standard => "standard",
            Architecture::Dueling => "dueling",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "standard" => Some(Architecture::Standard),
            "dueling" => Some(Architecture::Dueling),
            _ => None,
        }
    }
}

/// One fully connected layer with its Adam moment buffers. Weights are
/// row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub m_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
}

impl Dense {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
            m_w: vec![0.0; in_dim * out_dim],
            v_w: vec![0.0; in_dim * out_dim],
            m_b: vec![0.0; out_dim],
            v_b: vec![0.0; out_dim],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.in_dim..(o + 1) * self.in_dim]
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            out.push(dot(self.row(o), x) + self.b[o]);
        }
        out
    }
}

/// Unrolled dot product; four independent accumulators let the compiler
/// vectorize while keeping a fixed, reproducible summation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let chunks = n - n % 4;
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s2) + (s1 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Layer indices for the two architectures.
const STANDARD_LAYERS: usize = 3;
const DUELING_LAYERS: usize = 5;
const SHARED: usize = 0;
const VALUE_HIDDEN: usize = 1;
const VALUE_OUT: usize = 2;
const ADV_HIDDEN: usize = 3;
const ADV_OUT: usize = 4;

/// Q-network parameters: layer weights, biases, Adam moments, and the
/// shared Adam step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub arch: Architecture,
    /// Padded state size `K`; input is `6K`, output is `K + 1`.
    pub k: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub layers: Vec<Dense>,
    pub adam_step: u64,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 0.0005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Per-layer gradient buffers mirroring [`QNetwork::layers`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { w: vec![0.0; l.w.len()], b: vec![0.0; l.b.len()] })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for x in &mut l.w {
                *x *= factor;
            }
            for x in &mut l.b {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sum = 0.0;
        for l in &self.layers {
            for x in &l.w {
                sum += x * x;
            }
            for x in &l.b {
                sum += x * x;
            }
        }
        sum.sqrt()
    }

    /// Scales the whole gradient down so its global L2 norm is at most
    /// `max_norm`.
    pub fn clip_l2_norm(&mut self, max_norm: f64) {
        let norm = self.l2_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

impl QNetwork {
    /// Production-size network: hidden layers of 128 and 256 units.
    pub fn new(arch: Architecture, k: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden_dims(arch, k, HIDDEN1, HIDDEN2, rng)
    }

    /// Network with custom hidden sizes; the production topology is fixed,
    /// but small instances make exhaustive finite-difference checks cheap.
    pub fn with_hidden_dims(arch: Architecture, k: usize, hidden1: usize, hidden2: usize, rng: &mut impl Rng) -> Self {
        let input = k * FEATURES_PER_VEHICLE;
        let actions = k + 1;
        let layers = match arch {
            Architecture::Standard => vec![
                Dense::init(input, hidden1, rng),
                Dense::init(hidden1, hidden2, rng),
                Dense::init(hidden2, actions, rng),
            ],
            Architecture::Dueling => vec![
                Dense::init(input, hidden1, rng),
                Dense::init(hidden1, hidden2, rng),
                Dense::init(hidden2, 1, rng),
                Dense::init(hidden1, hidden2, rng),
                Dense::init(hidden2, actions, rng),
            ],
        };
        Self { arch, k, hidden1, hidden2, layers, adam_step: 0 }
    }

    pub fn input_dim(&self) -> usize {
        self.k * FEATURES_PER_VEHICLE
    }

    pub fn n_actions(&self) -> usize {
        self.k + 1
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::ShapeMismatch { expected: self.input_dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Action values for a flat feature vector. Output index 0 is the
    /// no-vehicle action; index `i + 1` is vehicle `i`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x)?;
        Ok(match self.arch {
            Architecture::Standard => {
                let mut h1 = self.layers[0].forward(x);
                relu_inplace(&mut h1);
                let mut h2 = self.layers[1].forward(&h1);
                relu_inplace(&mut h2);
                self.layers[2].forward(&h2)
            }
            Architecture::Dueling => {
                let (v, a) = self.streams(x);
                aggregate_dueling(v, &a)
            }
        })
    }

    /// Value and advantage streams of a dueling network.
    pub fn dueling_streams(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NetError> {
        if self.arch != Architecture::Dueling {
            return Err(NetError::Parse("dueling_streams on a standard network".into()));
        }
        self.check_input(x)?;
        Ok(self.streams(x))
    }

    fn streams(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut h = self.layers[SHARED].forward(x);
        relu_inplace(&mut h);
        let mut hv = self.layers[VALUE_HIDDEN].forward(&h);
        relu_inplace(&mut hv);
        let v = self.layers[VALUE_OUT].forward(&hv)[0];
        let mut ha = self.layers[ADV_HIDDEN].forward(&h);
        relu_inplace(&mut ha);
        let a = self.layers[ADV_OUT].forward(&ha);
        (v, a)
    }

    /// Gradient of `(td_target - Q(x, action))^2` with respect to every
    /// parameter, treating the target as a constant. Returns the squared
    /// error alongside the gradients.
    pub fn backward(&self, x: &[f64], action_output: usize, td_target: f64) -> Result<(f64, Gradients), NetError> {
        self.check_input(x)?;
        if action_output >= self.n_actions() {
            return Err(NetError::ShapeMismatch { expected: self.n_actions(), got: action_output });
        }
        let mut grads = Gradients::zeros_like(self);
        let loss = match self.arch {
            Architecture::Standard => self.backward_standard(x, action_output, td_target, &mut grads),
            Architecture::Dueling => self.backward_dueling(x, action_output, td_target, &mut grads),
        };
        Ok((loss, grads))
    }

    fn backward_standard(&self, x: &[f64], action: usize, td_target: f64, grads: &mut Gradients) -> f64 {
        let mut h1 = self.layers[0].forward(x);
        relu_inplace(&mut h1);
        let mut h2 = self.layers[1].forward(&h1);
        relu_inplace(&mut h2);
        let q = self.layers[2].forward(&h2);

        let residual = q[action] - td_target;
        let loss = residual * residual;
        // d loss / d q[action]
        let g_out = 2.0 * residual;

        // Output layer: only the selected row receives gradient.
        let l2 = &self.layers[2];
        {
            let gw = &mut grads.layers[2].w;
            for (i, &h) in h2.iter().enumerate() {
                gw[action * l2.in_dim + i] = g_out * h;
            }
            grads.layers[2].b[action] = g_out;
        }
        // Back into h2 through the selected row, gated by ReLU.
        let mut d2 = vec![0.0; h2.len()];
        for (i, d) in d2.iter_mut().enumerate() {
            if h2[i] > 0.0 {
                *d = g_out * l2.w[action * l2.in_dim + i];
            }
        }
        let l1 = &self.layers[1];
        {
            let gw = &mut grads.layers[1].w;
            for (o, &d) in d2.iter().enumerate() {
                if d != 0.0 {
                    for (i, &h) in h1.iter().enumerate() {
                        gw[o * l1.in_dim + i] = d * h;
                    }
                }
                grads.layers[1].b[o] = d;
            }
        }
        let mut d1 = vec![0.0; h1.len()];
        for (i, d) in d1.iter_mut().enumerate() {
            if h1[i] > 0.0 {
                let mut s = 0.0;
                for (o, &dd) in d2.iter().enumerate() {
                    s += dd * l1.w[o * l1.in_dim + i];
                }
                *d = s;
            }
        }
        let l0 = &self.layers[0];
        {
            let gw = &mut grads.layers[0].w;
            for (o, &d) in d1.iter().enumerate() {
                if d != 0.0 {
                    for (i, &xi) in x.iter().enumerate() {
                        gw[o * l0.in_dim + i] = d * xi;
                    }
                }
                grads.layers[0].b[o] = d;
            }
        }
        loss
    }

    fn backward_dueling(&self, x: &[f64], action: usize, td_target: f64, grads: &mut Gradients) -> f64 {
        let mut h = self.layers[SHARED].forward(x);
        relu_inplace(&mut h);
        let mut hv = self.layers[VALUE_HIDDEN].forward(&h);
        relu_inplace(&mut hv);
        let v = self.layers[VALUE_OUT].forward(&hv)[0];
        let mut ha = self.layers[ADV_HIDDEN].forward(&h);
        relu_inplace(&mut ha);
        let a = self.layers[ADV_OUT].forward(&ha);
        let q = aggregate_dueling(v, &a);

        let residual = q[action] - td_target;
        let loss = residual * residual;
        let g_out = 2.0 * residual;

        // dQ[action]/dV = 1; dQ[action]/dA[j] = delta(action, j) - 1/|A|.
        let n_actions = a.len() as f64;
        let d_v = g_out;
        let d_a: Vec<f64> = (0..a.len())
            .map(|j| g_out * (if j == action { 1.0 } else { 0.0 } - 1.0 / n_actions))
            .collect();

        // Value head.
        let lv_out = &self.layers[VALUE_OUT];
        {
            let gw = &mut grads.layers[VALUE_OUT].w;
            for (i, &hvi) in hv.iter().enumerate() {
                gw[i] = d_v * hvi;
            }
            grads.layers[VALUE_OUT].b[0] = d_v;
        }
        let mut d_hv = vec![0.0; hv.len()];
        for (i, d) in d_hv.iter_mut().enumerate() {
            if hv[i] > 0.0 {
                *d = d_v * lv_out.w[i];
            }
        }
        let lv_hidden = &self.layers[VALUE_HIDDEN];
        {
            let gw = &mut grads.layers[VALUE_HIDDEN].w;
            for (o, &d) in d_hv.iter().enumerate() {
                if d != 0.0 {
                    for (i, &hi) in h.iter().enumerate() {
                        gw[o * lv_hidden.in_dim + i] = d * hi;
                    }
                }
                grads.layers[VALUE_HIDDEN].b[o] = d;
            }
        }

        // Advantage head.
        let la_out = &self.layers[ADV_OUT];
        {
            let gw = &mut grads.layers[ADV_OUT].w;
            for (o, &d) in d_a.iter().enumerate() {
                for (i, &hai) in ha.iter().enumerate() {
                    gw[o * la_out.in_dim + i] = d * hai;
                }
                grads.layers[ADV_OUT].b[o] = d;
            }
        }
        let mut d_ha = vec![0.0; ha.len()];
        for (i, d) in d_ha.iter_mut().enumerate() {
            if ha[i] > 0.0 {
                let mut s = 0.0;
                for (o, &dd) in d_a.iter().enumerate() {
                    s += dd * la_out.w[o * la_out.in_dim + i];
                }
                *d = s;
            }
        }
        let la_hidden = &self.layers[ADV_HIDDEN];
        {
            let gw = &mut grads.layers[ADV_HIDDEN].w;
            for (o, &d) in d_ha.iter().enumerate() {
                if d != 0.0 {
                    for (i, &hi) in h.iter().enumerate() {
                        gw[o * la_hidden.in_dim + i] = d * hi;
                    }
                }
                grads.layers[ADV_HIDDEN].b[o] = d;
            }
        }

        // Shared layer collects from both streams, gated by its ReLU.
        let mut d_h = vec![0.0; h.len()];
        for (i, d) in d_h.iter_mut().enumerate() {
            if h[i] > 0.0 {
                let mut s = 0.0;
                for (o, &dd) in d_hv.iter().enumerate() {
                    s += dd * lv_hidden.w[o * lv_hidden.in_dim + i];
                }
                for (o, &dd) in d_ha.iter().enumerate() {
                    s += dd * la_hidden.w[o * la_hidden.in_dim + i];
                }
                *d = s;
            }
        }
        let shared = &self.layers[SHARED];
        {
            let gw = &mut grads.layers[SHARED].w;
            for (o, &d) in d_h.iter().enumerate() {
                if d != 0.0 {
                    for (i, &xi) in x.iter().enumerate() {
                        gw[o * shared.in_dim + i] = d * xi;
                    }
                }
                grads.layers[SHARED].b[o] = d;
            }
        }
        loss
    }

    /// One bias-corrected Adam update over every parameter, in place.
    pub fn adam_step(&mut self, grads: &Gradients, hyper: &AdamHyper) {
        self.adam_step += 1;
        let t = self.adam_step;
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            adam_update(&mut layer.w, &grad.w, &mut layer.m_w, &mut layer.v_w, t, hyper);
            adam_update(&mut layer.b, &grad.b, &mut layer.m_b, &mut layer.v_b, t, hyper);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Self-describing plain-text checkpoint. Floats print in the shortest
    /// form that parses back to identical bits, so a save/load round trip
    /// is exact for every parameter and moment buffer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dqjl-qnet 1").unwrap();
        writeln!(out, "arch {}", self.arch.tag()).unwrap();
        writeln!(out, "k {}", self.k).unwrap();
        writeln!(out, "hidden {} {}", self.hidden1, self.hidden2).unwrap();
        writeln!(out, "adam_step {}", self.adam_step).unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        for layer in &self.layers {
            writeln!(out, "layer {} {}", layer.in_dim, layer.out_dim).unwrap();
            write_array(&mut out, "w", &layer.w);
            write_array(&mut out, "b", &layer.b);
            write_array(&mut out, "mw", &layer.m_w);
            write_array(&mut out, "vw", &layer.v_w);
            write_array(&mut out, "mb", &layer.m_b);
            write_array(&mut out, "vb", &layer.v_b);
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NetError> {
        let mut tokens = Tokens::new(text);
        tokens.expect("dqjl-qnet")?;
        let version = tokens.usize("version")?;
        if version != 1 {
            return Err(NetError::Parse(format!("unsupported checkpoint version {version}")));
        }
        tokens.expect("arch")?;
        let tag = tokens.next("architecture tag")?;
        let arch = Architecture::from_tag(tag)
            .ok_or_else(|| NetError::Parse(format!("unknown architecture `{tag}`")))?;
        tokens.expect("k")?;
        let k = tokens.usize("k")?;
        tokens.expect("hidden")?;
        let hidden1 = tokens.usize("hidden1")?;
        let hidden2 = tokens.usize("hidden2")?;
        tokens.expect("adam_step")?;
        let adam_step = tokens.usize("adam_step")? as u64;
        tokens.expect("layers")?;
        let n_layers = tokens.usize("layer count")?;
        let expected_layers = match arch {
            Architecture::Standard => STANDARD_LAYERS,
            Architecture::Dueling => DUELING_LAYERS,
        };
        if n_layers != expected_layers {
            return Err(NetError::Parse(format!(
                "architecture {} expects {expected_layers} layers, checkpoint has {n_layers}",
                arch.tag()
            )));
        }
        let expected_shapes = expected_shapes(arch, k, hidden1, hidden2);
        let mut layers = Vec::with_capacity(n_layers);
        for (idx, &(in_dim, out_dim)) in expected_shapes.iter().enumerate() {
            tokens.expect("layer")?;
            let file_in = tokens.usize("layer in_dim")?;
            let file_out = tokens.usize("layer out_dim")?;
            if (file_in, file_out) != (in_dim, out_dim) {
                return Err(NetError::Parse(format!(
                    "layer {idx} shape {file_in}x{file_out} does not match expected {in_dim}x{out_dim}"
                )));
            }
            let w = tokens.array("w", in_dim * out_dim)?;
            let b = tokens.array("b", out_dim)?;
            let m_w = tokens.array("mw", in_dim * out_dim)?;
            let v_w = tokens.array("vw", in_dim * out_dim)?;
            let m_b = tokens.array("mb", out_dim)?;
            let v_b = tokens.array("vb", out_dim)?;
            layers.push(Dense { in_dim, out_dim, w, b, m_w, v_w, m_b, v_b });
        }
        tokens.expect("end")?;
        Ok(Self { arch, k, hidden1, hidden2, layers, adam_step })
    }
}

/// `Q(a) = V + A(a) - mean(A)`.
pub fn aggregate_dueling(v: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| v + a - mean).collect()
}

/// Standard bias-corrected Adam on one parameter slice:
/// `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`,
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &AdamHyper) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

fn expected_shapes(arch: Architecture, k: usize, h1: usize, h2: usize) -> Vec<(usize, usize)> {
    let input = k * FEATURES_PER_VEHICLE;
    let actions = k + 1;
    match arch {
        Architecture::Standard => vec![(input, h1), (h1, h2), (h2, actions)],
        Architecture::Dueling => vec![(input, h1), (h1, h2), (h2, 1), (h1, h2), (h2, actions)],
    }
}

fn write_array(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        write!(out, " {v}").unwrap();
    }
    out.push('\n');
}

struct Tokens<'a> {
    iter: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self { iter: text.split_whitespace() }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, NetError> {
        self.iter.next().ok_or_else(|| NetError::Parse(format!("unexpected end of file, expected {what}")))
    }

    fn expect(&mut self, tag: &str) -> Result<(), NetError> {
        let tok = self.next(tag)?;
        if tok != tag {
            return Err(NetError::Parse(format!("expected `{tag}`, found `{tok}`")));
        }
        Ok(())
    }

    fn usize(&mut self, what: &str) -> Result<usize, NetError> {
        let tok = self.next(what)?;
        tok.parse().map_err(|_| NetError::Parse(format!("bad {what}: `{tok}`")))
    }

    fn array(&mut self, tag: &str, len: usize) -> Result<Vec<f64>, NetError> {
        self.expect(tag)?;
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            let tok = self.next(tag)?;
            let v: f64 = tok.parse().map_err(|_| NetError::Parse(format!("bad {tag}[{i}]: `{tok}`")))?;
            if !v.is_finite() {
                return Err(NetError::NonFinite(format!("{tag}[{i}] (`{tok}`)")));
            }
            values.push(v);
        }
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = QNetwork::new(Architecture::Standard, 3, &mut seeded(1));
        for layer in &mut net.layers {
            layer.w.iter_mut().for_each(|w| *w = 0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let q = net.forward(&vec![1.0; net.input_dim()]).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_chain_kills_negative_input() {
        // Reduced 1-vehicle network with single-unit hidden layers and
        // all-ones weights: x = -2 dies at the first ReLU.
        let mut net = QNetwork::with_hidden_dims(Architecture::Standard, 1, 1, 1, &mut seeded(1));
        for layer in &mut net.layers {
            layer.w.iter_mut().for_each(|w| *w = 1.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
        let q = net.forward(&[-2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        // Independent straight-line reimplementation with plain loops.
        fn naive_forward(net: &QNetwork, x: &[f64]) -> Vec<f64> {
            let mut act = x.to_vec();
            for (li, layer) in net.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.out_dim];
                for o in 0..layer.out_dim {
                    let mut s = 0.0;
                    for i in 0..layer.in_dim {
                        s += layer.w[o * layer.in_dim + i] * act[i];
                    }
                    next[o] = s + layer.b[o];
                }
                if li + 1 < net.layers.len() {
                    for v in &mut next {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                act = next;
            }
            act
        }
        let mut rng = seeded(42);
        let net = QNetwork::new(Architecture::Standard, 4, &mut rng);
        for _ in 0..10 {
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = net.forward(&x).unwrap();
            let want = naive_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let net = QNetwork::new(Architecture::Standard, 3, &mut seeded(1));
        assert!(matches!(net.forward(&[0.0; 4]), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn dueling_aggregation_examples() {
        assert_eq!(aggregate_dueling(2.0, &[1.0, 0.0, -1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(aggregate_dueling(0.0, &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn dueling_mean_q_equals_v() {
        let mut rng = seeded(17);
        for _ in 0..20 {
            let net = QNetwork::with_hidden_dims(Architecture::Dueling, 3, 16, 24, &mut rng);
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = net.forward(&x).unwrap();
            let (v, _) = net.dueling_streams(&x).unwrap();
            let mean_q = q.iter().sum::<f64>() / q.len() as f64;
            assert!((mean_q - v).abs() < 1e-12, "mean q {mean_q} vs v {v}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = seeded(5);
        for arch in [Architecture::Standard, Architecture::Dueling] {
            let net = QNetwork::with_hidden_dims(arch, 2, 8, 12, &mut rng);
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = net.forward(&x).unwrap();
            let (loss, grads) = net.backward(&x, 1, q[1]).unwrap();
            assert_eq!(loss, 0.0);
            for layer in &grads.layers {
                assert!(layer.w.iter().all(|&g| g == 0.0));
                assert!(layer.b.iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn non_selected_output_rows_have_zero_gradient() {
        let mut rng = seeded(6);
        let net = QNetwork::with_hidden_dims(Architecture::Standard, 2, 8, 12, &mut rng);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let action = 1;
        let (_, grads) = net.backward(&x, action, 3.0).unwrap();
        let out = &grads.layers[2];
        let in_dim = net.layers[2].in_dim;
        for o in 0..net.n_actions() {
            if o == action {
                continue;
            }
            assert!(out.w[o * in_dim..(o + 1) * in_dim].iter().all(|&g| g == 0.0));
            assert_eq!(out.b[o], 0.0);
        }
    }

    /// Central finite differences over every parameter of a small net.
    fn finite_difference_check(arch: Architecture, seed: u64) {
        let mut rng = seeded(seed);
        let net = QNetwork::with_hidden_dims(arch, 2, 5, 7, &mut rng);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let action = rng.gen_range(0..net.n_actions());
        let td_target: f64 = rng.gen_range(-3.0..3.0);
        let (_, grads) = net.backward(&x, action, td_target).unwrap();
        let h = 1e-5;
        for li in 0..net.layers.len() {
            for wi in 0..net.layers[li].w.len() {
                let mut plus = net.clone();
                plus.layers[li].w[wi] += h;
                let mut minus = net.clone();
                minus.layers[li].w[wi] -= h;
                let f = |n: &QNetwork| {
                    let q = n.forward(&x).unwrap();
                    let r = q[action] - td_target;
                    r * r
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.layers[li].w[wi];
                let denom = an.abs().max(fd.abs());
                assert!(
                    (an - fd).abs() <= 1e-8 || (an - fd).abs() / denom <= 1e-5,
                    "layer {li} w[{wi}]: analytic {an} vs fd {fd}"
                );
            }
            for bi in 0..net.layers[li].b.len() {
                let mut plus = net.clone();
                plus.layers[li].b[bi] += h;
                let mut minus = net.clone();
                minus.layers[li].b[bi] -= h;
                let f = |n: &QNetwork| {
                    let q = n.forward(&x).unwrap();
                    let r = q[action] - td_target;
                    r * r
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = grads.layers[li].b[bi];
                let denom = an.abs().max(fd.abs());
                assert!(
                    (an - fd).abs() <= 1e-8 || (an - fd).abs() / denom <= 1e-5,
                    "layer {li} b[{bi}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_standard() {
        finite_difference_check(Architecture::Standard, 101);
    }

    #[test]
    fn gradients_match_finite_differences_dueling() {
        finite_difference_check(Architecture::Dueling, 202);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        let h = AdamHyper::default();
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &h);
        let delta = p[0] - 1.0;
        assert!((delta + h.lr / (1.0 + h.eps)).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_zero_moments_no_change() {
        let mut net = QNetwork::with_hidden_dims(Architecture::Standard, 2, 4, 4, &mut seeded(3));
        let before = net.clone();
        let grads = Gradients::zeros_like(&net);
        net.adam_step(&grads, &AdamHyper::default());
        for (a, b) in net.layers.iter().zip(&before.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn gradient_clip_bounds_norm() {
        let net = QNetwork::with_hidden_dims(Architecture::Standard, 2, 4, 4, &mut seeded(3));
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].w.iter_mut().for_each(|g| *g = 10.0);
        grads.clip_l2_norm(1.0);
        assert!((grads.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = seeded(8);
        for arch in [Architecture::Standard, Architecture::Dueling] {
            let mut net = QNetwork::with_hidden_dims(arch, 3, 9, 11, &mut rng);
            // Touch the moments so the round trip covers them too.
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, grads) = net.backward(&x, 0, 1.5).unwrap();
            net.adam_step(&grads, &AdamHyper::default());

            let text = net.to_text();
            let back = QNetwork::from_text(&text).unwrap();
            assert_eq!(net, back);
            for _ in 0..100 {
                let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let net = QNetwork::with_hidden_dims(Architecture::Standard, 2, 4, 4, &mut seeded(9));
        let text = net.to_text();
        let truncated = &text[..text.len() / 2];
        assert!(QNetwork::from_text(truncated).is_err());
    }

    #[test]
    fn non_finite_checkpoint_rejected() {
        let net = QNetwork::with_hidden_dims(Architecture::Standard, 2, 4, 4, &mut seeded(9));
        let text = net.to_text();
        // Corrupt one bias (freshly initialized biases are zero) with an
        // infinity; the parser must refuse it.
        let corrupted = text.replacen("\nb 0 ", "\nb inf ", 1);
        assert_ne!(corrupted, text);
        let err = QNetwork::from_text(&corrupted).unwrap_err();
        assert!(matches!(err, NetError::NonFinite(_)), "{err:?}");
    }
}
