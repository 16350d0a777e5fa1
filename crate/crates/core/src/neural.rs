//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Batches are row-major: one sample per row. Layer weights are stored as
//! `fan_in x fan_out`, so a layer computes `x W + b`.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Linear => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<Dense>,
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty network")
    }
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|((w1, b1), (w2, b2))| (w1 * w2).sum() + b1.dot(b2))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

impl DenseNet {
    /// Builds a network with `sizes[0]` inputs and `sizes.last()` outputs.
    ///
    /// Weights and biases start uniform in `±1/sqrt(fan_in)`; the last layer
    /// uses `±final_bound` instead when given.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        final_bound: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Architecture(format!("invalid layer sizes {sizes:?}")));
        }
        let count = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i + 1 == count;
                let bound = match (last, final_bound) {
                    (true, Some(b)) => b,
                    _ => 1.0 / (w[0] as f64).sqrt(),
                };
                let mut draw = || rng.random_range(-bound..=bound);
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), &mut draw),
                    bias: Array1::from_shape_simple_fn(w[1], &mut draw),
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Ok(DenseNet {
            layers,
            version: fresh_version(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Architecture(format!("layer {i}: bias length")));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::Architecture(format!("layer {i} does not chain")));
            }
        }
        Ok(DenseNet {
            layers,
            version: fresh_version(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Unit counts per layer boundary, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.activation == b.activation
            })
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, batch has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            let act = layer.activation;
            if act != Activation::Linear {
                z.mapv_inplace(|v| act.apply(v));
            }
            inputs.push(current);
            current = z.clone();
            outputs.push(z);
        }
        Ok((
            current,
            ForwardCache {
                version: self.version,
                inputs,
                outputs,
            },
        ))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            let act = layer.activation;
            if act != Activation::Linear {
                z.mapv_inplace(|v| act.apply(v));
            }
            current = z;
        }
        Ok(current)
    }

    fn check_cache(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<()> {
        if cache.version != self.version || cache.outputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if grad_out.dim() != cache.output().dim() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.dim(),
                cache.output().dim()
            )));
        }
        Ok(())
    }

    fn delta(layer: &Dense, out: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        let act = layer.activation;
        if act == Activation::Linear {
            return grad.clone();
        }
        let mut d = grad.clone();
        Zip::from(&mut d).and(out).for_each(|g, &o| *g *= act.slope(o));
        d
    }

    /// Reverse-mode gradients of `sum(output * grad_out)` with respect to the
    /// parameters and the input batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.check_cache(cache, grad_out)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let delta = Self::delta(layer, &cache.outputs[i], &grad);
            let gw = cache.inputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grad = delta.dot(&layer.weights.t());
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, grad))
    }

    /// Gradient with respect to the input batch only.
    pub fn input_gradient(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_cache(cache, grad_out)?;
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let delta = Self::delta(layer, &cache.outputs[i], &grad);
            grad = delta.dot(&layer.weights.t());
        }
        Ok(grad)
    }

    /// `params += scale * grads`.
    pub fn add_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Architecture("gradient layer count".into()));
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            if gw.dim() != layer.weights.dim() || gb.len() != layer.bias.len() {
                return Err(Error::Architecture("gradient shapes".into()));
            }
            layer.weights.scaled_add(scale, gw);
            layer.bias.scaled_add(scale, gb);
        }
        self.version = fresh_version();
        Ok(())
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for a network with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().expect("length checked"));
        }
        self.version = fresh_version();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &DenseNet) -> f64 {
        self.params()
            .iter()
            .zip(other.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `target <- tau * online + (1 - tau) * target`, parameter-wise.
pub fn soft_update(target: &mut DenseNet, online: &DenseNet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("soft update rate {tau} outside [0, 1]")));
    }
    if !target.same_architecture(online) {
        return Err(Error::Architecture(format!(
            "{:?} vs {:?}",
            target.sizes(),
            online.sizes()
        )));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        Zip::from(&mut t.weights)
            .and(&o.weights)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        Zip::from(&mut t.bias)
            .and(&o.bias)
            .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    target.version = fresh_version();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(net: &DenseNet, lr: f64) -> Self {
        Optimizer::Adam(Adam::new(net, lr))
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd { lr } => *lr,
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => net.add_scaled(grads, -*lr),
            Optimizer::Adam(adam) => {
                if grads.layers.len() != net.layers.len() || adam.m.layers.len() != net.layers.len() {
                    return Err(Error::Architecture("optimizer state does not match network".into()));
                }
                adam.t += 1;
                let (b1, b2) = (adam.beta1, adam.beta2);
                let c1 = 1.0 - b1.powi(adam.t as i32);
                let c2 = 1.0 - b2.powi(adam.t as i32);
                let step = adam.lr / c1;
                let eps = adam.eps;
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / ((*v / c2).sqrt() + eps);
                };
                for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(adam.m.layers.iter_mut())
                    .zip(adam.v.layers.iter_mut())
                {
                    if gw.dim() != layer.weights.dim() || mw.dim() != layer.weights.dim() {
                        return Err(Error::Architecture("optimizer state shapes".into()));
                    }
                    Zip::from(&mut layer.weights)
                        .and(mw)
                        .and(vw)
                        .and(gw)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut layer.bias)
                        .and(mb)
                        .and(vb)
                        .and(gb)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
                net.version = fresh_version();
                Ok(())
            }
        }
    }
}

/// Floating-point operation count of one pass through a dense stack with
/// unit counts `sizes`, charging `activation_cost` per output unit:
/// `2 * sum_i ((2 z_i - 1) z_{i+1} + activation_cost * z_{i+1})`.
pub fn flops_count(sizes: &[usize], activation_cost: f64) -> f64 {
    2.0 * sizes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0] as f64, w[1] as f64);
            (2.0 * a - 1.0) * b + activation_cost * b
        })
        .sum::<f64>()
}

/// `sum_i z_i z_{i+1}`, the order term of the complexity expressions.
pub fn connection_count(sizes: &[usize]) -> u64 {
    sizes.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

pub const CHECKPOINT_MAGIC: &str = "starris-net";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a network as text.
///
/// ```text
/// starris-net 1
/// layers <L>
/// dense <fan_in> <fan_out> <activation>      (L lines)
/// params <count>
/// <one value per line: layer 0 weights row-major, layer 0 bias, layer 1 ...>
/// ```
///
/// Values use the shortest representation that parses back to the same bits.
pub fn write_net<W: Write>(net: &DenseNet, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(out, "layers {}", net.layers.len())?;
    for l in &net.layers {
        writeln!(out, "dense {} {} {}", l.fan_in(), l.fan_out(), l.activation.name())?;
    }
    let params = net.params();
    writeln!(out, "params {}", params.len())?;
    for p in params {
        writeln!(out, "{p:?}")?;
    }
    Ok(())
}

pub(crate) fn next_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = input
        .read_line(&mut line)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if n == 0 {
        return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
    }
    Ok(line.trim_end().to_string())
}

pub(crate) fn expect_field<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Checkpoint(format!("expected `{key}`, found `{line}`")));
    }
    Ok(parts.collect())
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad number `{s}`")))
}

pub fn read_net<R: BufRead>(input: &mut R) -> Result<DenseNet> {
    let header = next_line(input)?;
    let version = expect_field(&header, CHECKPOINT_MAGIC)?;
    if version != [CHECKPOINT_VERSION.to_string()] {
        return Err(Error::Checkpoint(format!("unsupported network format `{header}`")));
    }
    let count: usize = parse_num(expect_field(&next_line(input)?, "layers")?.first().copied().unwrap_or(""))?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(input)?;
        let f = expect_field(&line, "dense")?;
        if f.len() != 3 {
            return Err(Error::Checkpoint(format!("bad layer line `{line}`")));
        }
        let (i, o): (usize, usize) = (parse_num(f[0])?, parse_num(f[1])?);
        layers.push(Dense {
            weights: Array2::zeros((i, o)),
            bias: Array1::zeros(o),
            activation: Activation::parse(f[2])?,
        });
    }
    let mut net = DenseNet::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n: usize = parse_num(expect_field(&next_line(input)?, "params")?.first().copied().unwrap_or(""))?;
    if n != net.param_count() {
        return Err(Error::Checkpoint(format!("{n} parameters for declared architecture {:?}", net.sizes())));
    }
    let flat = (0..n)
        .map(|_| parse_num::<f64>(&next_line(input)?))
        .collect::<Result<Vec<_>>>()?;
    net.set_params(&flat)?;
    Ok(net)
}
