//! Feed-forward MLP with softmax cross-entropy and hand-written backprop.
//!
//! Parameter layout: for each layer `l` mapping `n_in -> n_out`, the weight
//! matrix is stored row-major as `n_in x n_out` (so a layer computes
//! `Z = H * W + b` for row-batched inputs `H`), immediately followed by the
//! `n_out` biases. Layers are concatenated input-to-output.

use crate::error::{Error, Result};
use crate::tensor::{draw_gaussian, gemm, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Sigmoid),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            other => Err(Error::Validation(format!("unknown activation code {other}"))),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Layer sizes (input, hidden..., output) plus one activation per hidden
/// layer. The output layer is always softmax.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("a model needs at least input and output sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(Error::Config(format!(
                "{} hidden layers need {} activations, got {}",
                layer_sizes.len() - 2,
                layer_sizes.len() - 2,
                activations.len()
            )));
        }
        Ok(Self {
            layer_sizes,
            activations,
        })
    }

    /// Every hidden layer uses the same activation.
    pub fn uniform(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self::new(layer_sizes, vec![activation; hidden])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight_offset, bias_offset, n_in, n_out)` for layer `l`.
    fn layer_slices(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.layer_sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (off, off + n_in * n_out, n_in, n_out)
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        write!(f, "{}", sizes.join("-"))?;
        if let Some(a) = self.activations.first() {
            write!(f, " ({a})")?;
        }
        Ok(())
    }
}

/// Flat parameter vector for a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    spec: ModelSpec,
    params: Vec<f64>,
}

impl Weights {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            params: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        }
    }

    /// Gaussian init with std `1/sqrt(fan_in)`, zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut RngStream) -> Self {
        let mut w = Self::zeros(spec);
        for l in 0..spec.num_layers() {
            let (wo, bo, n_in, _) = spec.layer_slices(l);
            let vals = draw_gaussian(rng, bo - wo, 0.0, 1.0 / (n_in as f64).sqrt());
            w.params[wo..bo].copy_from_slice(&vals);
        }
        w
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "model {spec} has {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn layer(&self, l: usize) -> (Matrix, &[f64]) {
        let (wo, bo, n_in, n_out) = self.spec.layer_slices(l);
        let w = Matrix::from_vec(n_in, n_out, self.params[wo..bo].to_vec()).expect("layout");
        (w, &self.params[bo..bo + n_out])
    }

    /// Little-endian encoding: `u64` element count followed by the values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.params.len());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(spec: &ModelSpec, bytes: &[u8]) -> Result<Self> {
        let (params, used) = decode_f64_array(bytes)?;
        if used != bytes.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes after weight array",
                bytes.len() - used
            )));
        }
        Self::from_params(spec, params)
    }
}

/// Decodes a length-prefixed little-endian `f64` array, returning the values
/// and the number of bytes consumed.
pub fn decode_f64_array(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Validation("weight array header truncated".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let need = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(8))
        .ok_or_else(|| Error::Validation("weight array length overflows".into()))?;
    if bytes.len() < need {
        return Err(Error::Validation(format!(
            "weight array declares {n} values but only {} bytes follow",
            bytes.len() - 8
        )));
    }
    let vals = bytes[8..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((vals, need))
}

/// Inputs (one example per row) and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl MiniBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Precondition("a mini-batch needs at least one example".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient vector with the same layout as [`Weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_batch(w: &Weights, batch: &MiniBatch) -> Result<()> {
    if batch.inputs.cols() != w.spec.input_size() {
        return Err(Error::Shape(format!(
            "batch width {} does not match model input {}",
            batch.inputs.cols(),
            w.spec.input_size()
        )));
    }
    let classes = w.spec.classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn add_bias(z: &mut Matrix, b: &[f64]) {
    for r in 0..z.rows() {
        for (v, &bv) in z.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn softmax_rows(z: &mut Matrix) {
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Activations of every layer: `acts[0]` is the input, `acts[L]` the
/// softmax output. Also returns the output logits.
fn forward_all(w: &Weights, inputs: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
    let layers = w.spec.num_layers();
    let mut acts = Vec::with_capacity(layers + 1);
    acts.push(inputs.clone());
    let mut logits = Matrix::zeros(0, 0);
    for l in 0..layers {
        let (wm, b) = w.layer(l);
        let mut z = gemm(&acts[l], &wm)?;
        add_bias(&mut z, b);
        if l + 1 == layers {
            logits = z.clone();
            softmax_rows(&mut z);
        } else {
            let act = w.spec.activations[l];
            for v in z.data_mut() {
                *v = act.apply(*v);
            }
        }
        acts.push(z);
    }
    Ok((acts, logits))
}

/// Class probabilities, one row per example.
pub fn forward(w: &Weights, batch: &MiniBatch) -> Result<Matrix> {
    check_batch(w, batch)?;
    Ok(forward_all(w, &batch.inputs)?.0.pop().unwrap())
}

/// Probabilities for raw inputs (no labels needed).
pub fn predict_proba(w: &Weights, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != w.spec.input_size() {
        return Err(Error::Shape(format!(
            "input width {} does not match model input {}",
            inputs.cols(),
            w.spec.input_size()
        )));
    }
    Ok(forward_all(w, inputs)?.0.pop().unwrap())
}

/// Mean cross-entropy `-(1/m) sum log p[y]`.
pub fn loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Precondition("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::Shape(format!("label {y} out of range")));
        }
        total -= probs.get(r, y).max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to every parameter, and
/// the loss itself.
pub fn backward(w: &Weights, batch: &MiniBatch) -> Result<(Gradient, f64)> {
    let (g, loss, _) = backward_with_errors(w, batch)?;
    Ok((g, loss))
}

/// [`backward`] plus the number of misclassified examples in the batch.
pub fn backward_with_errors(w: &Weights, batch: &MiniBatch) -> Result<(Gradient, f64, usize)> {
    check_batch(w, batch)?;
    let spec = &w.spec;
    let layers = spec.num_layers();
    let m = batch.len();
    let (acts, logits) = forward_all(w, &batch.inputs)?;

    // log-softmax loss avoids log(0) for saturated outputs
    let mut loss_sum = 0.0;
    let mut errors = 0;
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = logits.row(r);
        if argmax(row) != y {
            errors += 1;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss_sum += lse - row[y];
    }

    let inv_m = 1.0 / m as f64;
    let mut delta = acts[layers].clone();
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = delta.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_m;
        }
    }

    let mut grad = vec![0.0; spec.param_count()];
    for l in (0..layers).rev() {
        let (wo, bo, _n_in, n_out) = spec.layer_slices(l);
        let dw = gemm(&acts[l].transpose(), &delta)?;
        grad[wo..bo].copy_from_slice(dw.data());
        let db = &mut grad[bo..bo + n_out];
        for r in 0..m {
            for (g, &d) in db.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        if l > 0 {
            let (wm, _) = w.layer(l);
            let mut dh = gemm(&delta, &wm.transpose())?;
            let act = spec.activations[l - 1];
            for (d, &a) in dh.data_mut().iter_mut().zip(acts[l].data()) {
                *d *= act.derivative_from_output(a);
            }
            delta = dh;
        }
    }
    Ok((Gradient(grad), loss_sum * inv_m, errors))
}

/// One momentum SGD step:
/// `v <- momentum*v - alpha*(g + weight_decay*w)`, `w <- w + v`.
pub fn sgd_step(
    w: &Weights,
    g: &Gradient,
    alpha: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Gradient,
) -> Result<Weights> {
    if g.len() != w.len() || velocity.len() != w.len() {
        return Err(Error::Shape(format!(
            "sgd_step: weights {}, gradient {}, velocity {}",
            w.len(),
            g.len(),
            velocity.len()
        )));
    }
    if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
        return Err(Error::Precondition(format!(
            "momentum {momentum} must be in [0,1) and weight decay {weight_decay} >= 0"
        )));
    }
    let mut next = w.params.clone();
    for ((p, v), &gi) in next.iter_mut().zip(velocity.0.iter_mut()).zip(&g.0) {
        *v = momentum * *v - alpha * (gi + weight_decay * *p);
        *p += *v;
    }
    if let Some(k) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow(format!(
            "parameter {k} became {} (alpha={alpha})",
            next[k]
        )));
    }
    Ok(Weights {
        spec: w.spec.clone(),
        params: next,
    })
}

/// A labelled dataset, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<MiniBatch> {
        MiniBatch::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 512;

/// Fraction of examples whose argmax prediction differs from the label.
pub fn evaluate(w: &Weights, data: &Dataset) -> Result<f64> {
    Ok(evaluate_full(w, data)?.0)
}

/// `(misclassification rate, mean cross-entropy)` over a dataset.
pub fn evaluate_full(w: &Weights, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk)?;
        let probs = forward(w, &batch)?;
        for (r, &y) in batch.labels.iter().enumerate() {
            if argmax(probs.row(r)) != y {
                wrong += 1;
            }
        }
        loss_sum += loss(&probs, &batch.labels)? * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok((wrong as f64 / n, loss_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], act: Activation) -> ModelSpec {
        ModelSpec::uniform(sizes.to_vec(), act).unwrap()
    }

    fn random_batch(rng: &mut RngStream, m: usize, d: usize, classes: usize) -> MiniBatch {
        let x = Matrix::from_vec(m, d, draw_gaussian(rng, m * d, 0.0, 1.0)).unwrap();
        let y = (0..m).map(|_| rng.index(classes)).collect();
        MiniBatch::new(x, y).unwrap()
    }

    // Independent forward pass written per-example with explicit loops.
    fn oracle_forward(w: &Weights, x: &[f64]) -> Vec<f64> {
        let s = w.spec();
        let p = w.params();
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..s.num_layers() {
            let (n_in, n_out) = (s.layer_sizes()[l], s.layer_sizes()[l + 1]);
            let mut z = vec![0.0; n_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = p[off + n_in * n_out + j];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * p[off + i * n_out + j];
                }
                *zj = acc;
            }
            off += n_in * n_out + n_out;
            if l + 1 < s.num_layers() {
                h = z.iter().map(|&v| s.activations()[l].apply(v)).collect();
            } else {
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let t: f64 = e.iter().sum();
                h = e.iter().map(|v| v / t).collect();
            }
        }
        h
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(vec![3], vec![]).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], vec![Activation::Tanh]).is_err());
        assert!(ModelSpec::new(vec![3, 4, 2], vec![]).is_err());
        assert_eq!(spec(&[4, 2, 3], Activation::Tanh).param_count(), 4 * 2 + 2 + 2 * 3 + 3);
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let s = spec(&[3, 4, 5], Activation::Relu);
        let mut rng = RngStream::new(1, 1);
        let b = random_batch(&mut rng, 6, 3, 5);
        let p = forward(&Weights::zeros(&s), &b).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_example_is_row_stochastic() {
        let s = spec(&[3, 4, 5], Activation::Sigmoid);
        let mut rng = RngStream::new(2, 1);
        let w = Weights::init(&s, &mut rng);
        let b = random_batch(&mut rng, 1, 3, 5);
        let p = forward(&w, &b).unwrap();
        assert_eq!((p.rows(), p.cols()), (1, 5));
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.row(0).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_matches_oracle_4_2_3() {
        let s = spec(&[4, 2, 3], Activation::Tanh);
        let mut rng = RngStream::new(3, 1);
        let w = Weights::init(&s, &mut rng);
        let b = random_batch(&mut rng, 5, 4, 3);
        let p = forward(&w, &b).unwrap();
        for r in 0..5 {
            let o = oracle_forward(&w, b.inputs.row(r));
            for c in 0..3 {
                assert!((p.get(r, c) - o[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let s = spec(&[4, 3], Activation::Tanh);
        let b = MiniBatch::new(Matrix::zeros(2, 5), vec![0, 1]).unwrap();
        assert!(matches!(forward(&Weights::zeros(&s), &b), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_cases() {
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(loss(&p, &[1, 0]).unwrap(), 0.0);
        let u = Matrix::from_vec(3, 10, vec![0.1; 30]).unwrap();
        assert!((loss(&u, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss(&u, &[0, 4, 9]).unwrap() - 2.302585).abs() < 1e-6);

        let mut rng = RngStream::new(4, 0);
        let s = spec(&[3, 4], Activation::Tanh);
        let w = Weights::init(&s, &mut rng);
        let b = random_batch(&mut rng, 7, 3, 4);
        let probs = forward(&w, &b).unwrap();
        let oracle: f64 = -b
            .labels
            .iter()
            .enumerate()
            .map(|(r, &y)| probs.get(r, y).ln())
            .sum::<f64>()
            / 7.0;
        assert!((loss(&probs, &b.labels).unwrap() - oracle).abs() < 1e-12);
        assert!(loss(&probs, &b.labels[..3]).is_err());
    }

    #[test]
    fn degenerate_net_output_bias_gradient() {
        let s = spec(&[3, 2, 2], Activation::Tanh);
        let w = Weights::zeros(&s);
        let b = MiniBatch::new(Matrix::zeros(1, 3), vec![1]).unwrap();
        let (g, l) = backward(&w, &b).unwrap();
        let probs = forward(&w, &b).unwrap();
        let n = g.len();
        // output biases are the last two parameters
        assert!((g.0[n - 2] - (probs.get(0, 0) - 0.0)).abs() < 1e-15);
        assert!((g.0[n - 1] - (probs.get(0, 1) - 1.0)).abs() < 1e-15);
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let s = spec(&[5, 4, 3], Activation::Sigmoid);
        let mut rng = RngStream::new(5, 0);
        let w = Weights::init(&s, &mut rng);
        let b = random_batch(&mut rng, 6, 5, 3);
        let idx: Vec<usize> = (0..6).chain(0..6).collect();
        let doubled = MiniBatch::new(
            b.inputs.select_rows(&idx),
            idx.iter().map(|&i| b.labels[i]).collect(),
        )
        .unwrap();
        let (g1, l1) = backward(&w, &b).unwrap();
        let (g2, l2) = backward(&w, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, c) in g1.0.iter().zip(&g2.0) {
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_gradient_away_from_kinks() {
        let s = spec(&[4, 6, 3], Activation::Relu);
        let mut rng = RngStream::new(77, 0);
        let w = Weights::init(&s, &mut rng);
        let b = random_batch(&mut rng, 5, 4, 3);
        let (g, _) = backward(&w, &b).unwrap();
        let h = 1e-6;
        for k in 0..w.len() {
            let mut wp = w.clone();
            wp.params_mut()[k] += h;
            let mut wm = w.clone();
            wm.params_mut()[k] -= h;
            let lp = loss(&forward(&wp, &b).unwrap(), &b.labels).unwrap();
            let lm = loss(&forward(&wm, &b).unwrap(), &b.labels).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.0[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", g.0[k]);
        }
    }

    #[test]
    fn sgd_plain_step_is_w_minus_alpha_g() {
        let s = spec(&[2, 1], Activation::Tanh);
        let w = Weights::from_params(&s, vec![1.0, 2.0, 3.0]).unwrap();
        let g = Gradient(vec![0.5, -1.0, 2.0]);
        let mut v = Gradient::zeros(3);
        let out = sgd_step(&w, &g, 0.1, 0.0, 0.0, &mut v).unwrap();
        for k in 0..3 {
            assert_eq!(out.params()[k], w.params()[k] - 0.1 * g.0[k]);
        }
    }

    #[test]
    fn sgd_zero_alpha_scales_velocity() {
        let s = spec(&[2, 1], Activation::Tanh);
        let w = Weights::from_params(&s, vec![1.0, 2.0, 3.0]).unwrap();
        let mut v = Gradient(vec![1.0, -2.0, 4.0]);
        let out = sgd_step(&w, &Gradient(vec![9.0; 3]), 0.0, 0.5, 0.0, &mut v).unwrap();
        assert_eq!(v.0, vec![0.5, -1.0, 2.0]);
        assert_eq!(out.params(), &[1.5, 1.0, 5.0]);
    }

    #[test]
    fn sgd_momentum_two_steps_by_hand() {
        let s = spec(&[2, 1], Activation::Tanh);
        let w0 = Weights::from_params(&s, vec![1.0, -1.0, 0.5]).unwrap();
        let g1 = Gradient(vec![0.2, 0.4, -0.6]);
        let g2 = Gradient(vec![-0.1, 0.3, 0.5]);
        let (a, m) = (0.1, 0.9);
        let mut v = Gradient::zeros(3);
        let w1 = sgd_step(&w0, &g1, a, m, 0.0, &mut v).unwrap();
        let w2 = sgd_step(&w1, &g2, a, m, 0.0, &mut v).unwrap();
        for k in 0..3 {
            let v1 = -a * g1.0[k];
            let x1 = w0.params()[k] + v1;
            let v2 = m * v1 - a * g2.0[k];
            let x2 = x1 + v2;
            assert_eq!(w2.params()[k], x2);
            assert_eq!(v.0[k], v2);
        }
    }

    #[test]
    fn sgd_overflow_is_reported() {
        let s = spec(&[2, 1], Activation::Tanh);
        let w = Weights::from_params(&s, vec![1e308, 0.0, 0.0]).unwrap();
        let mut v = Gradient::zeros(3);
        let r = sgd_step(&w, &Gradient(vec![-1e308, 0.0, 0.0]), 10.0, 0.0, 0.0, &mut v);
        assert!(matches!(r, Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn evaluate_perfect_and_constant_predictors() {
        // 2-d one-hot inputs mapped straight through: perfect predictor
        let s = spec(&[2, 2], Activation::Tanh);
        let w = Weights::from_params(&s, vec![5.0, 0.0, 0.0, 5.0, 0.0, 0.0]).unwrap();
        let data = Dataset::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        assert_eq!(evaluate(&w, &data).unwrap(), 0.0);

        // constant class 0 on a balanced 10-class set
        let s10 = spec(&[3, 10], Activation::Tanh);
        let mut p = vec![0.0; s10.param_count()];
        p[30] = 1.0; // bias of class 0
        let w10 = Weights::from_params(&s10, p).unwrap();
        let mut rng = RngStream::new(8, 0);
        let n = 200;
        let x = Matrix::from_vec(n, 3, draw_gaussian(&mut rng, n * 3, 0.0, 1.0)).unwrap();
        let d = Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10).unwrap();
        assert!((evaluate(&w10, &d).unwrap() - 0.9).abs() < 1e-12);

        let empty = Dataset::new(Matrix::zeros(0, 3), vec![], 10).unwrap();
        assert!(matches!(evaluate(&w10, &empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn random_weights_are_at_chance() {
        let s = spec(&[8, 16, 10], Activation::Tanh);
        let mut rng = RngStream::new(9, 0);
        let w = Weights::init(&s, &mut rng);
        let n = 20_000;
        let x = Matrix::from_vec(n, 8, draw_gaussian(&mut rng, n * 8, 0.0, 1.0)).unwrap();
        let d = Dataset::new(x, (0..n).map(|i| i % 10).collect(), 10).unwrap();
        let e = evaluate(&w, &d).unwrap();
        assert!((e - 0.9).abs() < 0.03, "error {e}");
    }

    #[test]
    fn weights_byte_encoding() {
        let s = spec(&[3, 2], Activation::Tanh);
        let w = Weights::init(&s, &mut RngStream::new(10, 0));
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..8], &(8u64).to_le_bytes());
        assert_eq!(bytes.len(), 8 + 8 * 8);
        assert_eq!(Weights::from_bytes(&s, &bytes).unwrap(), w);
        assert!(Weights::from_bytes(&s, &bytes[..20]).is_err());
    }

    #[test]
    fn loss_drops_on_separable_problem() {
        let s = spec(&[2, 8, 2], Activation::Tanh);
        let mut rng = RngStream::new(12, 0);
        let mut w = Weights::init(&s, &mut rng);
        let n = 64;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            xs.push(c + 0.3 * rng.gaussian());
            xs.push(c + 0.3 * rng.gaussian());
            ys.push(y);
        }
        let data = Dataset::new(Matrix::from_vec(n, 2, xs).unwrap(), ys, 2).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let batch = data.batch(&all).unwrap();
        let initial = backward(&w, &batch).unwrap().1;
        let mut v = Gradient::zeros(w.len());
        for _ in 0..200 {
            let idx: Vec<usize> = (0..8).map(|_| rng.index(n)).collect();
            let (g, _) = backward(&w, &data.batch(&idx).unwrap()).unwrap();
            w = sgd_step(&w, &g, 0.1, 0.0, 0.0, &mut v).unwrap();
        }
        let fin = backward(&w, &batch).unwrap().1;
        assert!(fin < initial / 10.0, "initial {initial}, final {fin}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..500, m in 1usize..6, scale in 0.1f64..20.0) {
            let s = spec(&[4, 5, 6], Activation::Relu);
            let mut rng = RngStream::new(seed, 3);
            let mut w = Weights::init(&s, &mut rng);
            for p in w.params_mut() { *p *= scale; }
            let b = random_batch(&mut rng, m, 4, 6);
            let p = forward(&w, &b).unwrap();
            for r in 0..m {
                proptest::prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn plain_sgd_is_elementwise_update(seed in 0u64..500, alpha in 0.0f64..2.0) {
            let s = spec(&[3, 2, 2], Activation::Tanh);
            let mut rng = RngStream::new(seed, 4);
            let w = Weights::init(&s, &mut rng);
            let g = Gradient(draw_gaussian(&mut rng, w.len(), 0.0, 1.0));
            let mut v = Gradient::zeros(w.len());
            let out = sgd_step(&w, &g, alpha, 0.0, 0.0, &mut v).unwrap();
            for k in 0..w.len() {
                proptest::prop_assert_eq!(out.params()[k], w.params()[k] - alpha * g.0[k]);
            }
        }
    }
}
