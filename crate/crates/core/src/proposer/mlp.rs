//! Multi-layer perceptron over image embeddings, trained from scratch with
//! AdamW in double precision.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ByteReader, ByteWriter, DatasetManifest, EmbeddingMatrix, RecordKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Softmax over classes, trained with cross-entropy.
    SingleLabel,
    /// Independent sigmoids, trained with binary cross-entropy.
    MultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn head(self) -> HeadMode {
        match self {
            LossKind::CrossEntropy => HeadMode::SingleLabel,
            LossKind::BinaryCrossEntropy => HeadMode::MultiLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of linear layers.
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Two layers, single-label cross-entropy, lr 1e-4, no weight decay.
    pub fn artdl() -> Self {
        Self {
            layers: 2,
            hidden: 384,
            epochs: 100,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }

    /// Three layers, multi-label binary cross-entropy, lr 1e-3, weight decay 1e-3.
    pub fn iconart() -> Self {
        Self {
            layers: 3,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            loss: LossKind::BinaryCrossEntropy,
            ..Self::artdl()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 {
            return bad("MLP needs at least one layer");
        }
        if self.layers > 1 && self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::artdl()
    }
}

/// One affine layer, `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub head: HeadMode,
    pub classes: Vec<String>,
    pub layers: Vec<Layer>,
}

/// Per-layer parameter gradients, same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        classes: Vec<String>,
        head: HeadMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 || input_dim == 0 || classes.is_empty() {
            return Err(Error::InvalidModel(
                "layers, input dim and classes must be positive".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(classes.len());
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..=limit));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let model = Self {
            head,
            classes,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    /// Layer dims chain `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs()));
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::InvalidModel(format!("layer {i} bias length")));
            }
            if i > 0 && self.layers[i - 1].outputs() != l.inputs() {
                return Err(Error::InvalidModel(format!("layer {i} input dim")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("layer {i} has non-finite values")));
            }
        }
        if self.output_dim() != self.classes.len() {
            return Err(Error::InvalidModel(format!(
                "{} outputs for {} classes",
                self.output_dim(),
                self.classes.len()
            )));
        }
        Ok(())
    }

    /// Logits for a batch of row vectors.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Softmax or sigmoid outputs, depending on the head.
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = self.logits(x);
        match self.head {
            HeadMode::SingleLabel => {
                for mut row in z.rows_mut() {
                    softmax_inplace(row.as_slice_mut().expect("contiguous row"));
                }
            }
            HeadMode::MultiLabel => z.mapv_inplace(sigmoid),
        }
        z
    }

    /// Mean loss over the batch and its gradient with respect to every parameter.
    ///
    /// `targets` is `n x C`: one-hot rows for cross-entropy, 0/1 memberships for
    /// binary cross-entropy (averaged over all `n * C` entries).
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
        loss: LossKind,
    ) -> (f64, Gradients) {
        let n = x.nrows();
        let last = self.layers.len() - 1;
        // forward, keeping every layer input
        let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(a);
            a = z;
        }
        let logits = a;
        let (value, mut delta) = loss_value_and_delta(&logits, targets, loss);
        debug_assert_eq!(delta.nrows(), n);

        let mut gw = Vec::with_capacity(self.layers.len());
        let mut gb = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &inputs[i];
            gw.push(delta.t().dot(input));
            gb.push(delta.sum_axis(Axis(0)));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight);
                // `input` is the ReLU output of the layer below
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|d, &act| {
                        if act <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        (
            value,
            Gradients {
                weight: gw,
                bias: gb,
            },
        )
    }

    /// Mean loss without gradients.
    pub fn loss(&self, x: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, loss: LossKind) -> f64 {
        loss_value_and_delta(&self.logits(x), targets, loss).0
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_inplace(row: &mut [f64]) {
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

fn loss_value_and_delta(
    logits: &Array2<f64>,
    targets: ArrayView2<'_, f64>,
    loss: LossKind,
) -> (f64, Array2<f64>) {
    let (n, c) = logits.dim();
    let mut delta = logits.clone();
    let mut total = 0.0;
    match loss {
        LossKind::CrossEntropy => {
            for (mut row, t) in delta.rows_mut().into_iter().zip(targets.rows()) {
                let z = row.as_slice_mut().expect("contiguous row");
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                for (zi, &ti) in z.iter_mut().zip(t.iter()) {
                    total -= ti * (*zi - log_sum);
                    *zi = ((*zi - log_sum).exp() - ti) / n as f64;
                }
            }
            (total / n as f64, delta)
        }
        LossKind::BinaryCrossEntropy => {
            let count = (n * c) as f64;
            ndarray::Zip::from(&mut delta)
                .and(&targets)
                .for_each(|z, &t| {
                    let v = *z;
                    total += v.max(0.0) - v * t + (-v.abs()).exp().ln_1p();
                    *z = (sigmoid(v) - t) / count;
                });
            (total / count, delta)
        }
    }
}

/// Adam moment buffers for one layer.
struct Moments {
    mw: Array2<f64>,
    vw: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
}

/// Trained model and its mean loss over the full training set.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub final_loss: f64,
}

/// Mini-batch AdamW on row-vector inputs `x` (`n x D`) and targets (`n x C`).
///
/// The RNG seeded from `config.seed` first initializes the weights and then
/// shuffles the sample order at the start of every epoch. The last, partial
/// batch is kept.
pub fn train_on_arrays(
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    classes: Vec<String>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Config("no training samples".into()));
    }
    if targets.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: targets.nrows(),
        });
    }
    if targets.ncols() != classes.len() {
        return Err(Error::DimensionMismatch {
            expected: classes.len(),
            actual: targets.ncols(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MlpModel::init(
        x.ncols(),
        config.hidden,
        config.layers,
        classes,
        config.loss.head(),
        &mut rng,
    )?;
    let mut moments: Vec<Moments> = model
        .layers
        .iter()
        .map(|l| Moments {
            mw: Array2::zeros(l.weight.raw_dim()),
            vw: Array2::zeros(l.weight.raw_dim()),
            mb: Array1::zeros(l.bias.raw_dim()),
            vb: Array1::zeros(l.bias.raw_dim()),
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut step: i32 = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = targets.select(Axis(0), batch);
            let (_, grads) = model.loss_and_gradient(xb.view(), tb.view(), config.loss);
            step += 1;
            adamw_step(&mut model, &mut moments, &grads, config, step);
        }
    }
    let final_loss = model.loss(x, targets, config.loss);
    Ok(TrainOutcome { model, final_loss })
}

fn adamw_step(
    model: &mut MlpModel,
    moments: &mut [Moments],
    grads: &Gradients,
    cfg: &TrainConfig,
    step: i32,
) {
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
    let c1 = 1.0 - b1.powi(step);
    let c2 = 1.0 - b2.powi(step);
    let decay = 1.0 - lr * cfg.weight_decay;
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *p *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for ((layer, mo), (gw, gb)) in model
        .layers
        .iter_mut()
        .zip(moments.iter_mut())
        .zip(grads.weight.iter().zip(&grads.bias))
    {
        ndarray::Zip::from(&mut layer.weight)
            .and(&mut mo.mw)
            .and(&mut mo.vw)
            .and(gw)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut layer.bias)
            .and(&mut mo.mb)
            .and(&mut mo.vb)
            .and(gb)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

/// Trains on the images of `labels` whose embeddings are in `embeddings`.
///
/// Samples follow manifest order. Every labeled image must have an embedding;
/// single-label training requires exactly one label per image.
pub fn wscp_train(
    embeddings: &EmbeddingMatrix,
    labels: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let classes = labels.classes.clone();
    let n = labels.images.len();
    let d = embeddings.dim();
    let mut x = Array2::<f64>::zeros((n, d));
    let mut t = Array2::<f64>::zeros((n, classes.len()));
    for (i, rec) in labels.images.iter().enumerate() {
        let row = embeddings
            .get(&rec.id)
            .ok_or_else(|| Error::UnknownImage(rec.id.clone()))?;
        for (dst, &v) in x.row_mut(i).iter_mut().zip(row) {
            *dst = v as f64;
        }
        if config.loss == LossKind::CrossEntropy && rec.gt_labels.len() != 1 {
            return Err(Error::Config(format!(
                "single-label training needs exactly one label for {:?}, found {}",
                rec.id,
                rec.gt_labels.len()
            )));
        }
        for l in &rec.gt_labels {
            let c = labels
                .class_index(l)
                .ok_or_else(|| Error::UnknownLabel(l.clone()))?;
            t[[i, c]] = 1.0;
        }
    }
    train_on_arrays(x.view(), t.view(), classes, config)
}

/// Per-class probabilities (softmax) or memberships (sigmoid) for one embedding.
pub fn wscp_infer(model: &MlpModel, embedding: &[f32]) -> Result<Vec<f64>> {
    if embedding.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: embedding.len(),
        });
    }
    let x = Array2::from_shape_fn((1, embedding.len()), |(_, j)| embedding[j] as f64);
    Ok(model.scores(x.view()).row(0).to_vec())
}

/// Kind-3 record: head byte, layer count, dims chain, class names, then each
/// layer's weights (row-major) and biases as f64.
pub fn write_checkpoint<W: Write>(model: &MlpModel, sink: W) -> Result<u64> {
    model.validate()?;
    for c in &model.classes {
        if c.len() > u16::MAX as usize {
            return Err(Error::InvalidModel("class name too long".into()));
        }
    }
    let mut w = ByteWriter::new(sink);
    w.preamble(RecordKind::MlpCheckpoint)?;
    w.u8(match model.head {
        HeadMode::SingleLabel => 0,
        HeadMode::MultiLabel => 1,
    })?;
    w.u32(model.layers.len() as u32)?;
    for d in model.dims() {
        w.u32(d as u32)?;
    }
    w.u32(model.classes.len() as u32)?;
    for c in &model.classes {
        w.string(c)?;
    }
    for l in &model.layers {
        let weights: Vec<f64> = l.weight.iter().copied().collect();
        w.f64s(&weights)?;
        w.f64s(l.bias.as_slice().expect("contiguous bias"))?;
    }
    w.flush()?;
    Ok(w.written())
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<MlpModel> {
    let mut r = ByteReader::new(source);
    r.expect_kind(RecordKind::MlpCheckpoint)?;
    let head = match r.u8("head")? {
        0 => HeadMode::SingleLabel,
        1 => HeadMode::MultiLabel,
        other => return Err(Error::InvalidModel(format!("unknown head {other}"))),
    };
    let layer_count = r.u32("layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::InvalidModel("no layers".into()));
    }
    let mut dims = Vec::new();
    for _ in 0..=layer_count {
        dims.push(r.u32("layer dims")? as usize);
    }
    let class_count = r.u32("class count")? as usize;
    let mut classes = Vec::new();
    for _ in 0..class_count {
        classes.push(r.string("class name")?);
    }
    let mut layers = Vec::with_capacity(layer_count);
    for win in dims.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let w = r.f64_payload(fan_in.saturating_mul(fan_out))?;
        let b = r.f64_payload(fan_out)?;
        let weight = Array2::from_shape_vec((fan_out, fan_in), w)
            .map_err(|e| Error::InvalidModel(e.to_string()))?;
        layers.push(Layer {
            weight,
            bias: Array1::from_vec(b),
        });
    }
    let model = MlpModel {
        head,
        classes,
        layers,
    };
    model.validate()?;
    Ok(model)
}
