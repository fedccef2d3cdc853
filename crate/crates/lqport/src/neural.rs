//! Fully connected tanh network for the correction term, with hand-written
//! backpropagation and an Adam optimizer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result, Vector};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default standard deviation of the initial weights.
pub const DEFAULT_INIT_STD: f64 = 0.01;

/// Layer sizes for `n` assets: input n² + 2n, `hidden` tanh layers of `width`,
/// output n.
pub fn layer_sizes(n: usize, width: usize, hidden: usize) -> Vec<usize> {
    let mut sizes = vec![n * n + 2 * n];
    sizes.extend(std::iter::repeat_n(width, hidden));
    sizes.push(n);
    sizes
}

/// Weights are stored output-by-input; every layer applies tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::arg("network needs at least two non-empty layers"));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect(),
            biases: sizes[1..].iter().map(|&m| Vector::zeros(m)).collect(),
        })
    }

    /// Every weight and bias drawn independently from N(0, std²).
    pub fn init(seed: u64, sizes: &[usize], std: f64) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            // Row-major fill so the draw order matches the stored layout.
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = normal.sample(&mut rng);
                }
            }
            for v in b.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// α · other + (1 − α) · self, parameter by parameter.
    pub fn relaxed_toward(&self, other: &Mlp, alpha: f64) -> Mlp {
        let mut out = self.clone();
        let mix = |a: &mut f64, b: f64| *a = alpha * b + (1.0 - alpha) * *a;
        for (w, o) in out.weights.iter_mut().zip(&other.weights) {
            w.iter_mut().zip(o.iter()).for_each(|(a, &b)| mix(a, b));
        }
        for (w, o) in out.biases.iter_mut().zip(&other.biases) {
            w.iter_mut().zip(o.iter()).for_each(|(a, &b)| mix(a, b));
        }
        out
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(row_major(w));
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`Mlp::flat`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::arg("flat parameter vector has the wrong length"));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = values[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = values[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::arg(format!(
                "network expects {} inputs, got {rows}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw network output in (−1, 1)ⁿ for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        self.check_input(input.len())?;
        let mut a = Vector::from_column_slice(input);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let mut z = b.clone();
            z.gemv(1.0, w, &a, 1.0);
            a = z.map(f64::tanh);
        }
        Ok(a)
    }

    /// Raw outputs for a batch stored column by column.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.activations(inputs)?.pop().unwrap())
    }

    fn activations(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(inputs.nrows())?;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(inputs.clone());
        for (layer, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            z.apply(|v| *v = v.tanh());
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::num(format!("non-finite activation in layer {layer}")));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Mean over the batch of ‖scale·net(x) − y‖² and its gradient.
    pub fn loss_and_grad(&self, inputs: &Matrix, targets: &Matrix, scale: f64) -> Result<(f64, Mlp)> {
        let batch = inputs.ncols();
        if batch == 0 {
            return Err(Error::arg("empty batch"));
        }
        if targets.ncols() != batch || targets.nrows() != self.output_dim() {
            return Err(Error::arg("targets do not match the batch"));
        }
        let acts = self.activations(inputs)?;
        let resid = acts.last().unwrap() * scale - targets;
        let loss = resid.norm_squared() / batch as f64;
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        let mut delta_a = resid * (2.0 * scale / batch as f64);
        for layer in (0..self.weights.len()).rev() {
            let delta_z = delta_a.zip_map(&acts[layer + 1], |d, y| d * (1.0 - y * y));
            weights.push(&delta_z * acts[layer].transpose());
            biases.push(delta_z.column_sum());
            if layer > 0 {
                delta_a = self.weights[layer].tr_mul(&delta_z);
            }
        }
        weights.reverse();
        biases.reverse();
        let grad = Mlp {
            sizes: self.sizes.clone(),
            weights,
            biases,
        };
        Ok((loss, grad))
    }

    pub fn loss(&self, inputs: &Matrix, targets: &Matrix, scale: f64) -> Result<f64> {
        let out = self.forward_batch(inputs)?;
        Ok((out * scale - targets).norm_squared() / inputs.ncols() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Mlp,
    pub v: Mlp,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Self {
        let zero = Mlp {
            sizes: params.sizes.clone(),
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: params.biases.iter().map(|b| Vector::zeros(b.len())).collect(),
        };
        AdamState {
            m: zero.clone(),
            v: zero,
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut Mlp, grad: &Mlp, state: &mut AdamState) {
    let c = state.config;
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    };
    for l in 0..params.weights.len() {
        update(
            params.weights[l].as_mut_slice(),
            state.m.weights[l].as_mut_slice(),
            state.v.weights[l].as_mut_slice(),
            grad.weights[l].as_slice(),
        );
        update(
            params.biases[l].as_mut_slice(),
            state.m.biases[l].as_mut_slice(),
            state.v.biases[l].as_mut_slice(),
            grad.biases[l].as_slice(),
        );
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub epochs: usize,
    /// Mini-batch size; `None` uses the whole dataset.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 100,
            batch_size: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters with the lowest full-dataset loss seen.
    pub params: Mlp,
    /// Full-dataset loss before training and after every epoch.
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
}

/// Largest relative gap between the analytic gradient and fourth-order
/// central differences over the selected flat coordinates (all of them when
/// `coords` is `None`). Gaps are measured against max(|analytic|, |numeric|,
/// `floor`). A step near ε^(1/5) ≈ 1e-3 balances truncation and rounding.
pub fn gradient_check(
    net: &Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    scale: f64,
    coords: Option<&[usize]>,
    step: f64,
    floor: f64,
) -> Result<f64> {
    let (_, grad) = net.loss_and_grad(inputs, targets, scale)?;
    let analytic = grad.flat();
    let base = net.flat();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for &k in coords {
        if k >= base.len() {
            return Err(Error::arg(format!("coordinate {k} out of range")));
        }
        let mut at = |offset: f64| -> Result<f64> {
            let mut shifted = base.clone();
            shifted[k] = base[k] + offset;
            probe.set_flat(&shifted)?;
            probe.loss(inputs, targets, scale)
        };
        let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn gather_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

/// Shuffled mini-batch Adam on inputs/targets stored column by column.
pub fn fit(params: &Mlp, inputs: &Matrix, targets: &Matrix, scale: f64, opts: &FitOptions) -> Result<FitResult> {
    let count = inputs.ncols();
    if count == 0 {
        return Err(Error::arg("empty dataset"));
    }
    let batch = opts.batch_size.unwrap_or(count).clamp(1, count);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current = params.clone();
    let mut adam = AdamState::new(&current, opts.adam);
    let mut best_loss = current.loss(inputs, targets, scale)?;
    let mut best = current.clone();
    let mut trace = vec![best_loss];
    let mut order: Vec<usize> = (0..count).collect();
    for _ in 0..opts.epochs {
        if batch < count {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let (xb, yb) = (gather_columns(inputs, chunk), gather_columns(targets, chunk));
                let (_, g) = current.loss_and_grad(&xb, &yb, scale)?;
                adam_step(&mut current, &g, &mut adam);
            }
        } else {
            let (_, g) = current.loss_and_grad(inputs, targets, scale)?;
            adam_step(&mut current, &g, &mut adam);
        }
        let loss = current.loss(inputs, targets, scale)?;
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
    }
    Ok(FitResult {
        params: best,
        loss_trace: trace,
        best_loss,
    })
}

/// The correction network together with its input standardization and output
/// scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionNet {
    pub mlp: Mlp,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub output_scale: f64,
    pub seed: u64,
}

impl CorrectionNet {
    /// Identity standardization and unit output scale.
    pub fn plain(mlp: Mlp, seed: u64) -> Self {
        let d = mlp.input_dim();
        CorrectionNet {
            mlp,
            feature_mean: vec![0.0; d],
            feature_std: vec![1.0; d],
            output_scale: 1.0,
            seed,
        }
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Standardized feature matrix, one column per row of `raw`.
    pub fn standardize_batch(&self, raw: &[Vec<f64>]) -> Matrix {
        let d = self.mlp.input_dim();
        Matrix::from_fn(d, raw.len(), |i, j| {
            (raw[j][i] - self.feature_mean[i]) / self.feature_std[i]
        })
    }

    pub fn eval(&self, raw: &[f64]) -> Result<Vector> {
        Ok(self.mlp.forward(&self.standardize(raw))? * self.output_scale)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layer_sizes: self.mlp.sizes.clone(),
            weights: self.mlp.weights.iter().map(row_major).collect(),
            biases: self.mlp.biases.iter().map(|b| b.iter().copied().collect()).collect(),
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
            output_scale: self.output_scale,
            seed: self.seed,
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        let sizes = &file.layer_sizes;
        let mut mlp = Mlp::zeros(sizes).map_err(|e| Error::Format(e.to_string()))?;
        if file.weights.len() != mlp.weights.len() || file.biases.len() != mlp.biases.len() {
            return Err(Error::Format("layer count does not match layer_sizes".into()));
        }
        for (l, w) in file.weights.iter().enumerate() {
            let (r, c) = (sizes[l + 1], sizes[l]);
            if w.len() != r * c || file.biases[l].len() != r {
                return Err(Error::Format(format!("layer {l} has the wrong number of parameters")));
            }
            mlp.weights[l] = Matrix::from_row_slice(r, c, w);
            mlp.biases[l] = Vector::from_column_slice(&file.biases[l]);
        }
        let d = sizes[0];
        if file.feature_mean.len() != d || file.feature_std.len() != d {
            return Err(Error::Format("standardization statistics have the wrong length".into()));
        }
        Ok(CorrectionNet {
            mlp,
            feature_mean: file.feature_mean.clone(),
            feature_std: file.feature_std.clone(),
            output_scale: file.output_scale,
            seed: file.seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// On-disk model container. Floats are written in shortest round-trip form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    /// One row-major weight block per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub output_scale: f64,
    pub seed: u64,
}
