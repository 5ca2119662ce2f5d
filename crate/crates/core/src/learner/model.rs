//! Fully connected ReLU network with a softmax output layer.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DatasetShard, DeviceProfile, LearnerError};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`, row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, LearnerError> {
        validate_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let s = (6.0 / (inputs + outputs) as f64).sqrt();
                let weights = (0..inputs * outputs).map(|_| rng.gen_range(-s..s)).collect();
                Layer { inputs, outputs, weights, biases: vec![0.0; outputs] }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, LearnerError> {
        Self::unflatten(&vec![0.0; param_count(dims)], dims)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Layer by layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn unflatten(params: &[f64], dims: &[usize]) -> Result<Self, LearnerError> {
        validate_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(LearnerError::Shape { expected, found: params.len() });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            let weights = params[offset..offset + inputs * outputs].to_vec();
            offset += inputs * outputs;
            let biases = params[offset..offset + outputs].to_vec();
            offset += outputs;
            layers.push(Layer { inputs, outputs, weights, biases });
        }
        Ok(Self { layers })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut trace: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut activation = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(&activation, &mut z);
            if k + 1 < self.layers.len() {
                activation = z.iter().map(|v| v.max(0.0)).collect();
            }
            trace.push(z);
        }
        trace
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(self.forward_trace(x).last().expect("at least one layer"))
    }

    /// Argmax of the output; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let trace = self.forward_trace(x);
        let logits = trace.last().expect("at least one layer");
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }

    fn check_input(&self, shard: &DatasetShard) -> Result<(), LearnerError> {
        if shard.dim() != self.input_dim() {
            return Err(LearnerError::Shape { expected: self.input_dim(), found: shard.dim() });
        }
        if let Some(&bad) = shard.labels().iter().find(|&&l| l >= self.num_classes()) {
            return Err(LearnerError::Data(format!(
                "label {bad} outside the model's {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient (flattened order) over `indices`.
    fn loss_and_gradient(&self, shard: &DatasetShard, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.outputs]))
            .collect();
        let mut loss = 0.0;
        for &i in indices {
            let x = shard.features(i);
            let label = shard.label(i);
            let trace = self.forward_trace(x);
            let mut delta = softmax(trace.last().expect("at least one layer"));
            loss -= delta[label].max(f64::MIN_POSITIVE).ln();
            delta[label] -= 1.0;
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let (gw, gb) = &mut grads[k];
                let input: Vec<f64> = if k == 0 {
                    x.to_vec()
                } else {
                    trace[k - 1].iter().map(|v| v.max(0.0)).collect()
                };
                for o in 0..layer.outputs {
                    gb[o] += delta[o];
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(&input) {
                        *g += delta[o] * a;
                    }
                }
                if k > 0 {
                    let mut back = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += w * delta[o];
                        }
                    }
                    for (b, z) in back.iter_mut().zip(&trace[k - 1]) {
                        if *z <= 0.0 {
                            *b = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        let scale = 1.0 / indices.len() as f64;
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            flat.extend(gw.into_iter().map(|g| g * scale));
            flat.extend(gb.into_iter().map(|g| g * scale));
        }
        (loss * scale, flat)
    }

    fn apply_update(&mut self, gradient: &[f64], learning_rate: f64) {
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w -= learning_rate * gradient[offset];
                offset += 1;
            }
        }
    }
}

pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<(), LearnerError> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(LearnerError::InvalidDims(dims.to_vec()));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean cross-entropy over the whole shard plus per-sample probabilities.
pub fn forward_loss(
    model: &MlpModel,
    shard: &DatasetShard,
) -> Result<(f64, Vec<Vec<f64>>), LearnerError> {
    model.check_input(shard)?;
    if shard.is_empty() {
        return Err(LearnerError::Data("empty batch".into()));
    }
    let mut loss = 0.0;
    let mut probabilities = Vec::with_capacity(shard.len());
    for i in 0..shard.len() {
        let p = model.probabilities(shard.features(i));
        loss -= p[shard.label(i)].max(f64::MIN_POSITIVE).ln();
        probabilities.push(p);
    }
    Ok((loss / shard.len() as f64, probabilities))
}

/// Gradient of the mean batch loss, flattened like [`MlpModel::flatten`].
pub fn gradient(model: &MlpModel, shard: &DatasetShard) -> Result<Vec<f64>, LearnerError> {
    model.check_input(shard)?;
    if shard.is_empty() {
        return Err(LearnerError::Data("empty batch".into()));
    }
    let all: Vec<usize> = (0..shard.len()).collect();
    Ok(model.loss_and_gradient(shard, &all).1)
}

/// One full-batch gradient step.
pub fn sgd_step(
    model: &MlpModel,
    shard: &DatasetShard,
    learning_rate: f64,
) -> Result<MlpModel, LearnerError> {
    if !(learning_rate >= 0.0) {
        return Err(LearnerError::InvalidRate(learning_rate));
    }
    let g = gradient(model, shard)?;
    let mut next = model.clone();
    next.apply_update(&g, learning_rate);
    Ok(next)
}

/// Number of mini-batch steps `local_train` takes: every epoch covers the
/// shard once, the final short batch included.
pub fn local_step_count(shard_len: usize, profile: &DeviceProfile) -> usize {
    profile.local_epochs * shard_len.div_ceil(profile.batch_size)
}

/// `E_i` epochs of mini-batch SGD, reshuffling the shard each epoch.
pub fn local_train<R: Rng + ?Sized>(
    model: &MlpModel,
    shard: &DatasetShard,
    profile: &DeviceProfile,
    rng: &mut R,
) -> Result<MlpModel, LearnerError> {
    model.check_input(shard)?;
    if shard.is_empty() {
        return Err(LearnerError::Data("empty shard".into()));
    }
    profile.validate()?;
    let mut next = model.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..profile.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(profile.batch_size) {
            let (_, g) = next.loss_and_gradient(shard, batch);
            next.apply_update(&g, profile.learning_rate);
        }
    }
    Ok(next)
}

/// Coordinatewise `Σ (d_i / d) · ω_i`.
pub fn fedavg_aggregate(models: &[MlpModel], counts: &[usize]) -> Result<MlpModel, LearnerError> {
    if models.is_empty() || models.len() != counts.len() {
        return Err(LearnerError::Shape { expected: models.len(), found: counts.len() });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LearnerError::Data("aggregation weights sum to zero".into()));
    }
    let dims = models[0].dims();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let flats = models
        .iter()
        .map(|m| {
            if m.dims() == dims {
                Ok(m.flatten())
            } else {
                Err(LearnerError::ArchitectureMismatch)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    MlpModel::unflatten(&weighted_mean(&flats, &weights), &dims)
}

/// Equal-weight coordinatewise mean of flat parameter vectors.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let w = vec![1.0 / vectors.len() as f64; vectors.len()];
    weighted_mean(vectors, &w)
}

fn weighted_mean(vectors: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (v, &w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

pub fn evaluate(model: &MlpModel, test: &DatasetShard) -> Result<Evaluation, LearnerError> {
    model.check_input(test)?;
    if test.is_empty() {
        return Err(LearnerError::Data("empty test set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        let p = model.probabilities(test.features(i));
        if argmax(&p) == test.label(i) {
            correct += 1;
        }
        loss -= p[test.label(i)].max(f64::MIN_POSITIVE).ln();
    }
    Ok(Evaluation { accuracy: correct as f64 / test.len() as f64, loss: loss / test.len() as f64 })
}

/// Per-class test results; classes absent from the test set have count 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEvaluation {
    pub counts: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

impl ClassEvaluation {
    /// Expected accuracy and loss under the class mix `weights`. Classes the
    /// test set lacks are dropped and the rest renormalized.
    pub fn reweighted(&self, weights: &[f64]) -> Evaluation {
        let mut total = 0.0;
        let (mut accuracy, mut loss) = (0.0, 0.0);
        for (k, &w) in weights.iter().enumerate().take(self.counts.len()) {
            if self.counts[k] > 0 && w > 0.0 {
                total += w;
                accuracy += w * self.accuracy[k];
                loss += w * self.loss[k];
            }
        }
        if total == 0.0 {
            return Evaluation { accuracy: 0.0, loss: 0.0 };
        }
        Evaluation { accuracy: accuracy / total, loss: loss / total }
    }
}

pub fn evaluate_by_class(model: &MlpModel, test: &DatasetShard) -> Result<ClassEvaluation, LearnerError> {
    model.check_input(test)?;
    let k = model.num_classes().max(test.num_classes());
    let mut counts = vec![0usize; k];
    let mut correct = vec![0usize; k];
    let mut loss = vec![0.0; k];
    for i in 0..test.len() {
        let p = model.probabilities(test.features(i));
        let y = test.label(i);
        counts[y] += 1;
        if argmax(&p) == y {
            correct[y] += 1;
        }
        loss[y] -= p.get(y).copied().unwrap_or(0.0).max(f64::MIN_POSITIVE).ln();
    }
    let per = |v: f64, c: usize| if c == 0 { 0.0 } else { v / c as f64 };
    Ok(ClassEvaluation {
        accuracy: correct.iter().zip(&counts).map(|(&a, &c)| per(a as f64, c)).collect(),
        loss: loss.iter().zip(&counts).map(|(&l, &c)| per(l, c)).collect(),
        counts,
    })
}
