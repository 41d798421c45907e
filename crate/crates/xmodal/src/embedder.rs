//! Per-modality embedding models.
//!
//! Architecture: flatten -> affine(d_hidden) -> tanh -> affine(d_feat), with a
//! classifier head (affine d_feat -> n_identities) used only while training.
//! Pixels are normalized to [0, 1] inside the model (divide by 255) so
//! perturbations stay in native pixel units. Forward and input gradients are
//! hand-rolled; all parameters are `f64`.

use std::path::Path;

use rand::Rng;

use crate::binio::{create_file, open_artifact, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;
use crate::tensor::ImageTensor;

pub const MODEL_MAGIC: &[u8] = b"MMEMB01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Pass-through, used by tests that need an exactly linear model.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityModel {
    pub modality: u16,
    input_shape: (usize, usize, usize),
    d_hidden: usize,
    d_feat: usize,
    n_identities: usize,
    activation: Activation,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    w3: Matrix,
    b3: Vec<f64>,
}

/// Intermediate activations kept around for backprop.
struct ForwardTrace {
    z: Vec<f64>,
    h: Vec<f64>,
    feature: Vec<f64>,
}

/// Uniform init scaled by 1/sqrt(fan_in); biases start at zero.
pub fn init_model(
    input_shape: (usize, usize, usize),
    d_hidden: usize,
    d_feat: usize,
    n_identities: usize,
    modality: u16,
    seed: u64,
) -> Result<ModalityModel> {
    let (h, w, c) = input_shape;
    let n_in = h * w * c;
    if n_in == 0 || d_hidden == 0 || d_feat == 0 || n_identities == 0 {
        return Err(Error::InvalidConfig(format!(
            "model dimensions must be positive: in={n_in}, hidden={d_hidden}, feat={d_feat}, ids={n_identities}"
        )));
    }
    let mut rng = rng::stream_from_seed(seed);
    let mut layer = |rows: usize, cols: usize| -> Matrix {
        let scale = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        Matrix::new(rows, cols, data).expect("finite by construction")
    };
    Ok(ModalityModel {
        modality,
        input_shape,
        d_hidden,
        d_feat,
        n_identities,
        activation: Activation::Tanh,
        w1: layer(d_hidden, n_in),
        b1: vec![0.0; d_hidden],
        w2: layer(d_feat, d_hidden),
        b2: vec![0.0; d_feat],
        w3: layer(n_identities, d_feat),
        b3: vec![0.0; n_identities],
    })
}

impl ModalityModel {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn set_activation(&mut self, a: Activation) {
        self.activation = a;
    }

    /// Zero-weight model of the given dimensions (test scaffolding).
    pub fn zeroed(
        input_shape: (usize, usize, usize),
        d_hidden: usize,
        d_feat: usize,
        n_identities: usize,
        modality: u16,
    ) -> ModalityModel {
        let (h, w, c) = input_shape;
        let n_in = h * w * c;
        ModalityModel {
            modality,
            input_shape,
            d_hidden,
            d_feat,
            n_identities,
            activation: Activation::Tanh,
            w1: Matrix::zeros(d_hidden, n_in),
            b1: vec![0.0; d_hidden],
            w2: Matrix::zeros(d_feat, d_hidden),
            b2: vec![0.0; d_feat],
            w3: Matrix::zeros(n_identities, d_feat),
            b3: vec![0.0; n_identities],
        }
    }

    pub fn set_feature_bias(&mut self, b2: Vec<f64>) {
        assert_eq!(b2.len(), self.d_feat);
        self.b2 = b2;
    }

    fn check_shape(&self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.input_shape {
            return Err(Error::DimensionMismatch {
                context: "ModalityModel input",
                expected: self.input_shape.0 * self.input_shape.1 * self.input_shape.2,
                got: img.len(),
            });
        }
        Ok(())
    }

    fn forward_trace(&self, img: &ImageTensor) -> Result<ForwardTrace> {
        self.check_shape(img)?;
        let z: Vec<f64> = img.data().iter().map(|v| v / 255.0).collect();
        let mut a1 = self.w1.matvec(&z)?;
        for (a, b) in a1.iter_mut().zip(self.b1.iter()) {
            *a += b;
        }
        let h: Vec<f64> = a1.iter().map(|v| self.activation.apply(*v)).collect();
        let mut feature = self.w2.matvec(&h)?;
        for (f, b) in feature.iter_mut().zip(self.b2.iter()) {
            *f += b;
        }
        Ok(ForwardTrace { z, h, feature })
    }

    /// Feature vector for one image.
    pub fn forward(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.forward_trace(img)?.feature)
    }

    /// Gradient of `grad_wrt_feature . feature(img)` with respect to the
    /// image pixels, including the 1/255 input scaling.
    pub fn input_gradient(
        &self,
        img: &ImageTensor,
        grad_wrt_feature: &[f64],
    ) -> Result<ImageTensor> {
        if grad_wrt_feature.len() != self.d_feat {
            return Err(Error::DimensionMismatch {
                context: "input_gradient feature grad",
                expected: self.d_feat,
                got: grad_wrt_feature.len(),
            });
        }
        let trace = self.forward_trace(img)?;
        let u = self.w2.matvec_t(grad_wrt_feature)?;
        let s: Vec<f64> = u
            .iter()
            .zip(trace.h.iter())
            .map(|(ui, hi)| ui * self.activation.derivative_from_output(*hi))
            .collect();
        let mut g = self.w1.matvec_t(&s)?;
        for v in &mut g {
            *v /= 255.0;
        }
        ImageTensor::from_data(self.input_shape, g)
    }

    fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.w3.matvec(feature)?;
        for (v, b) in l.iter_mut().zip(self.b3.iter()) {
            *v += b;
        }
        Ok(l)
    }

    /// Mean cross-entropy over a labeled set (diagnostic for training tests).
    pub fn classification_loss(&self, samples: &[(&ImageTensor, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("classification_loss"));
        }
        let mut total = 0.0;
        for (img, label) in samples {
            let f = self.forward(img)?;
            let logits = self.logits(&f)?;
            let (log_probs, _) = log_softmax(&logits);
            total -= log_probs[*label];
        }
        Ok(total / samples.len() as f64)
    }

    /// Frobenius-norm upper bound on the spectral norm of the pixel-to-feature
    /// map (tanh is 1-Lipschitz), per unit pixel change.
    pub fn lipschitz_bound(&self) -> f64 {
        self.w1.frobenius_norm() * self.w2.frobenius_norm() / 255.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Writer::new(create_file(path)?);
        out.bytes(MODEL_MAGIC)?;
        let (h, w, c) = self.input_shape;
        for dim in [h, w, c, self.d_hidden, self.d_feat, self.n_identities] {
            out.u32(dim as u32)?;
        }
        out.u16(self.modality)?;
        out.u8(self.activation.to_byte())?;
        out.f64_slice(self.w1.data())?;
        out.f64_slice(&self.b1)?;
        out.f64_slice(self.w2.data())?;
        out.f64_slice(&self.b2)?;
        out.f64_slice(self.w3.data())?;
        out.f64_slice(&self.b3)?;
        out.finish()
    }

    pub fn load(path: &Path) -> Result<ModalityModel> {
        let mut r = Reader::new(open_artifact(path)?, path);
        r.magic(MODEL_MAGIC)?;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let c = r.u32("channels")? as usize;
        let d_hidden = r.u32("d_hidden")? as usize;
        let d_feat = r.u32("d_feat")? as usize;
        let n_identities = r.u32("n_identities")? as usize;
        let modality = r.u16("modality")?;
        let activation = Activation::from_byte(r.u8("activation")?)
            .ok_or_else(|| r.malformed("unknown activation byte"))?;
        let n_in = h * w * c;
        if n_in == 0 || d_hidden == 0 || d_feat == 0 || n_identities == 0 {
            return Err(r.malformed("degenerate model dimensions"));
        }
        let w1 = Matrix::new(d_hidden, n_in, r.f64_vec(d_hidden * n_in, "w1")?)
            .map_err(|e| r.malformed(format!("w1: {e}")))?;
        let b1 = r.f64_vec(d_hidden, "b1")?;
        let w2 = Matrix::new(d_feat, d_hidden, r.f64_vec(d_feat * d_hidden, "w2")?)
            .map_err(|e| r.malformed(format!("w2: {e}")))?;
        let b2 = r.f64_vec(d_feat, "b2")?;
        let w3 = Matrix::new(
            n_identities,
            d_feat,
            r.f64_vec(n_identities * d_feat, "w3")?,
        )
        .map_err(|e| r.malformed(format!("w3: {e}")))?;
        let b3 = r.f64_vec(n_identities, "b3")?;
        r.expect_eof()?;
        Ok(ModalityModel {
            modality,
            input_shape: (h, w, c),
            d_hidden,
            d_feat,
            n_identities,
            activation,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }
}

fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln() + max;
    let log_probs = logits.iter().map(|v| v - log_sum).collect();
    let probs = exps.iter().map(|e| e / sum).collect();
    (log_probs, probs)
}

/// Mini-batch gradient descent on identity cross-entropy.
///
/// Labels must lie in `[0, n_identities)`. The classifier head is trained
/// alongside the embedding layers and simply ignored by the attack phases.
pub fn train(
    model: &mut ModalityModel,
    samples: &[(&ImageTensor, usize)],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("train samples"));
    }
    let distinct: std::collections::BTreeSet<usize> = samples.iter().map(|(_, l)| *l).collect();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData {
            context: "train identities",
            needed: 2,
            got: distinct.len(),
        });
    }
    for (_, label) in samples {
        if *label >= model.n_identities {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {} identities",
                model.n_identities
            )));
        }
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }

    let mut rng = rng::stream_from_seed(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        // Fisher-Yates on a fixed stream keeps epochs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(batch_size) {
            train_batch(model, samples, batch, learning_rate)?;
        }
    }
    Ok(())
}

fn train_batch(
    model: &mut ModalityModel,
    samples: &[(&ImageTensor, usize)],
    batch: &[usize],
    lr: f64,
) -> Result<()> {
    let n = batch.len() as f64;
    let mut gw1 = Matrix::zeros(model.d_hidden, model.w1.cols());
    let mut gb1 = vec![0.0; model.d_hidden];
    let mut gw2 = Matrix::zeros(model.d_feat, model.d_hidden);
    let mut gb2 = vec![0.0; model.d_feat];
    let mut gw3 = Matrix::zeros(model.n_identities, model.d_feat);
    let mut gb3 = vec![0.0; model.n_identities];

    for &idx in batch {
        let (img, label) = samples[idx];
        let trace = model.forward_trace(img)?;
        let logits = model.logits(&trace.feature)?;
        let (_, probs) = log_softmax(&logits);

        // d loss / d logits = softmax - onehot
        let mut dl = probs;
        dl[label] -= 1.0;

        for (i, dli) in dl.iter().enumerate() {
            gb3[i] += dli;
            for (j, fj) in trace.feature.iter().enumerate() {
                gw3.set(i, j, gw3.get(i, j) + dli * fj);
            }
        }
        let df = model.w3.matvec_t(&dl)?;
        for (i, dfi) in df.iter().enumerate() {
            gb2[i] += dfi;
            for (j, hj) in trace.h.iter().enumerate() {
                gw2.set(i, j, gw2.get(i, j) + dfi * hj);
            }
        }
        let dh = model.w2.matvec_t(&df)?;
        let da1: Vec<f64> = dh
            .iter()
            .zip(trace.h.iter())
            .map(|(d, h)| d * model.activation.derivative_from_output(*h))
            .collect();
        for (i, dai) in da1.iter().enumerate() {
            gb1[i] += dai;
            for (j, zj) in trace.z.iter().enumerate() {
                gw1.set(i, j, gw1.get(i, j) + dai * zj);
            }
        }
    }

    let step = lr / n;
    apply_step(&mut model.w1, &gw1, step);
    apply_step_vec(&mut model.b1, &gb1, step);
    apply_step(&mut model.w2, &gw2, step);
    apply_step_vec(&mut model.b2, &gb2, step);
    apply_step(&mut model.w3, &gw3, step);
    apply_step_vec(&mut model.b3, &gb3, step);
    Ok(())
}

fn apply_step(param: &mut Matrix, grad: &Matrix, step: f64) {
    let rows = param.rows();
    let cols = param.cols();
    for i in 0..rows {
        for j in 0..cols {
            param.set(i, j, param.get(i, j) - step * grad.get(i, j));
        }
    }
}

fn apply_step_vec(param: &mut [f64], grad: &[f64], step: f64) {
    for (p, g) in param.iter_mut().zip(grad.iter()) {
        *p -= step * g;
    }
}
