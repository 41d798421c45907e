//! First optimization layer: a dense universal perturbation learned by
//! momentum sign-descent on a Mahalanobis triplet loss.
//!
//! The triplet loss pulls the perturbed feature toward the farthest centroid
//! of the clean feature and away from its nearest one, per attack modality;
//! the perturbation is updated with `delta <- clip(delta + alpha * sign(v))`
//! where `v` tracks the momentum of the descent direction.

use std::path::Path;

use rand::Rng;

use crate::binio::{create_file, open_artifact, Reader, Writer};
use crate::centroids::CentroidBank;
use crate::embedder::ModalityModel;
use crate::error::{Error, Result};
use crate::numerics::{l1_norm, linf_clip, linf_norm, mahalanobis_sq, mahalanobis_sq_grad};
use crate::rng;
use crate::tensor::ImageTensor;

pub const UAP_MAGIC: &[u8] = b"MMUAP01";

/// Dense image-shaped perturbation with an L-infinity budget. The budget is
/// enforced on construction and after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalPerturbation {
    delta: ImageTensor,
    epsilon: f64,
}

impl UniversalPerturbation {
    pub fn zeros(shape: (usize, usize, usize), epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            delta: ImageTensor::zeros(shape),
            epsilon,
        })
    }

    pub fn new(delta: ImageTensor, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if linf_norm(delta.data()) > epsilon {
            return Err(Error::InvalidConfig(format!(
                "perturbation exceeds epsilon {epsilon}"
            )));
        }
        Ok(Self { delta, epsilon })
    }

    pub fn delta(&self) -> &ImageTensor {
        &self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.delta.shape()
    }

    /// Adversarial image: `clamp(img + delta, 0, 255)`.
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let mut out = img.add(&self.delta);
        out.clamp_in_place(0.0, 255.0);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.delta.shape();
        let mut out = Writer::new(create_file(path)?);
        out.bytes(UAP_MAGIC)?;
        out.u32(h as u32)?;
        out.u32(w as u32)?;
        out.u32(c as u32)?;
        out.f64(self.epsilon)?;
        out.f64_slice(self.delta.data())?;
        out.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::new(open_artifact(path)?, path);
        r.magic(UAP_MAGIC)?;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let c = r.u32("channels")? as usize;
        let epsilon = r.f64("epsilon")?;
        let data = r.f64_vec(h * w * c, "delta entries")?;
        r.expect_eof()?;
        let delta =
            ImageTensor::from_data((h, w, c), data).map_err(|e| r.malformed(format!("{e}")))?;
        Self::new(delta, epsilon)
    }
}

/// Exponential-moving-average gradient state, `v_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    v: ImageTensor,
    beta: f64,
}

impl MomentumState {
    pub fn new(shape: (usize, usize, usize), beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        Ok(Self {
            v: ImageTensor::zeros(shape),
            beta,
        })
    }

    pub fn velocity(&self) -> &ImageTensor {
        &self.v
    }
}

/// `v <- beta * v + (1 - beta) * grad / ||grad||_1`; a zero gradient
/// contributes nothing (the normalized term is defined as zero).
pub fn momentum_step(state: &mut MomentumState, grad: &ImageTensor) {
    assert_eq!(state.v.shape(), grad.shape());
    let norm = l1_norm(grad.data());
    let beta = state.beta;
    for (v, g) in state.v.data_mut().iter_mut().zip(grad.data().iter()) {
        let normalized = if norm > 0.0 { g / norm } else { 0.0 };
        *v = beta * *v + (1.0 - beta) * normalized;
    }
}

/// `delta <- linf_clip(delta + alpha * sign(v), epsilon)`, with `sign(0) = 0`.
pub fn update_delta(up: &mut UniversalPerturbation, state: &MomentumState, alpha: f64) {
    assert!(alpha > 0.0);
    let eps = up.epsilon;
    for (d, v) in up.delta.data_mut().iter_mut().zip(state.v.data().iter()) {
        let sign = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
        *d += alpha * sign;
    }
    linf_clip(up.delta.data_mut(), eps);
}

/// One hinge term of the triplet loss: the bank supplies the metric, `cp` and
/// `cn` are the nearest/farthest centroids of the clean feature.
pub struct TripletTerm<'a> {
    pub bank: &'a CentroidBank,
    pub cp: &'a [f64],
    pub cn: &'a [f64],
}

/// Triplet loss over the given modality terms and its exact gradient with
/// respect to the perturbed feature.
///
/// `loss = sum_m [D(cn_m, f) - D(cp_m, f) + rho]_+`; inactive hinges
/// contribute zero to both outputs.
pub fn triplet_loss(f_adv: &[f64], terms: &[TripletTerm<'_>], rho: f64) -> Result<(f64, Vec<f64>)> {
    if rho < 0.0 || !rho.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "margin rho must be finite and >= 0, got {rho}"
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; f_adv.len()];
    for term in terms {
        let dn = mahalanobis_sq(term.cn, f_adv, &term.bank.s_inv)?;
        let dp = mahalanobis_sq(term.cp, f_adv, &term.bank.s_inv)?;
        let z = dn - dp + rho;
        if z > 0.0 {
            loss += z;
            let gn = mahalanobis_sq_grad(f_adv, term.cn, &term.bank.s_inv)?;
            let gp = mahalanobis_sq_grad(f_adv, term.cp, &term.bank.s_inv)?;
            for ((g, a), b) in grad.iter_mut().zip(gn.iter()).zip(gp.iter()) {
                *g += a - b;
            }
        }
    }
    Ok((loss, grad))
}

/// One attack-phase sample: its image, the model it routes through, and the
/// per-bank (nearest, farthest) centroid indices of its clean feature.
pub struct AttackSample<'a> {
    pub image: &'a ImageTensor,
    pub model_slot: usize,
    pub cp_cn: Vec<(usize, usize)>,
}

/// Immutable context for the gradient layer: the attack modalities' models
/// and banks plus the training samples with frozen centroid pairs.
pub struct AttackContext<'a> {
    pub models: Vec<&'a ModalityModel>,
    pub banks: Vec<&'a CentroidBank>,
    pub samples: Vec<AttackSample<'a>>,
}

impl<'a> AttackContext<'a> {
    /// Routes every sample through its own modality's model once to freeze
    /// the (C_p, C_n) pairs; the clean feature never changes, so the pairs
    /// hold for the whole optimization.
    pub fn new(
        models: Vec<&'a ModalityModel>,
        banks: Vec<&'a CentroidBank>,
        samples: &[(&'a ImageTensor, usize)],
    ) -> Result<Self> {
        if models.is_empty() || models.len() != banks.len() {
            return Err(Error::InvalidConfig(format!(
                "attack context needs matching model/bank lists, got {} models and {} banks",
                models.len(),
                banks.len()
            )));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("attack context samples"));
        }
        let mut out = Vec::with_capacity(samples.len());
        for (image, slot) in samples {
            if *slot >= models.len() {
                return Err(Error::InvalidConfig(format!(
                    "sample model slot {slot} out of range"
                )));
            }
            let f_orig = models[*slot].forward(image)?;
            let cp_cn = banks
                .iter()
                .map(|b| b.nearest_farthest_indices(&f_orig))
                .collect::<Result<Vec<_>>>()?;
            out.push(AttackSample {
                image,
                model_slot: *slot,
                cp_cn,
            });
        }
        Ok(Self {
            models,
            banks,
            samples: out,
        })
    }

    fn terms_for(&self, sample: &AttackSample<'a>) -> Vec<TripletTerm<'_>> {
        sample
            .cp_cn
            .iter()
            .zip(self.banks.iter())
            .map(|(&(p, n), bank)| TripletTerm {
                bank,
                cp: &bank.centroids[p],
                cn: &bank.centroids[n],
            })
            .collect()
    }
}

/// Mean triplet loss over a batch and its gradient with respect to the
/// perturbation.
///
/// Pixels are perturbed as `clamp(img + delta, 0, 255)` before the forward
/// pass; the clamp passes gradients through unchanged at interior pixels and
/// blocks them at saturated ones.
pub fn meta_loss_and_grad(
    ctx: &AttackContext<'_>,
    delta: &ImageTensor,
    batch: &[usize],
    rho: f64,
) -> Result<(f64, ImageTensor)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("meta_loss_and_grad batch"));
    }
    let mut total_loss = 0.0;
    let mut total_grad = ImageTensor::zeros(delta.shape());
    for &idx in batch {
        let sample = &ctx.samples[idx];
        let model = ctx.models[sample.model_slot];
        let raw = sample.image.add(delta);
        let mut adv = raw.clone();
        adv.clamp_in_place(0.0, 255.0);
        let f_adv = model.forward(&adv)?;
        let terms = ctx.terms_for(sample);
        let (loss, grad_f) = triplet_loss(&f_adv, &terms, rho)?;
        total_loss += loss;
        let grad_img = model.input_gradient(&adv, &grad_f)?;
        for ((t, g), r) in total_grad
            .data_mut()
            .iter_mut()
            .zip(grad_img.data().iter())
            .zip(raw.data().iter())
        {
            let saturated = *r < 0.0 || *r > 255.0;
            if !saturated {
                *t += g;
            }
        }
    }
    let n = batch.len() as f64;
    total_loss /= n;
    total_grad.scale(1.0 / n);
    Ok((total_loss, total_grad))
}

#[derive(Debug, Clone)]
pub struct UapConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub rho: f64,
    pub beta: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl UapConfig {
    /// Defaults: epsilon 8 on the [0, 255] scale, margin 0.5, momentum decay
    /// 0.9, step epsilon/10.
    pub fn new(seed: u64) -> Self {
        let epsilon = 8.0;
        Self {
            epochs: 40,
            batch_size: 16,
            epsilon,
            rho: 0.5,
            beta: 0.9,
            alpha: epsilon / 10.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon {}", self.epsilon)));
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {}", self.beta)));
        }
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho {}", self.rho)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct UapTrace {
    /// Mean triplet loss of each optimization step's batch.
    pub step_losses: Vec<f64>,
}

/// Learn the universal perturbation by iterating mini-batches of the attack
/// samples: descend the triplet loss via the momentum sign update.
///
/// The momentum tracks the negative loss gradient, so the `+alpha * sign(v)`
/// update performs descent. Deterministic for a fixed seed; the returned
/// perturbation always satisfies its budget.
pub fn learn_uap(
    ctx: &AttackContext<'_>,
    cfg: &UapConfig,
) -> Result<(UniversalPerturbation, UapTrace)> {
    cfg.validate()?;
    let shape = ctx.samples[0].image.shape();
    let mut up = UniversalPerturbation::zeros(shape, cfg.epsilon)?;
    let mut state = MomentumState::new(shape, cfg.beta)?;
    let mut trace = UapTrace::default();
    let mut rng = rng::stream_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..ctx.samples.len()).collect();

    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = meta_loss_and_grad(ctx, up.delta(), batch, cfg.rho)?;
            trace.step_losses.push(loss);
            // Descent on the triplet loss.
            grad.scale(-1.0);
            momentum_step(&mut state, &grad);
            update_delta(&mut up, &state, cfg.alpha);
            debug_assert!(linf_norm(up.delta().data()) <= up.epsilon());
        }
    }
    Ok((up, trace))
}
