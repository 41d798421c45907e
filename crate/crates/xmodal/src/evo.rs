//! Second optimization layer: multi-objective evolutionary search for the
//! sparse ternary perturbation superimposed on the dense one.
//!
//! Individuals are sets of (pixel, value) genes with values in {-1, 0, +1}
//! and at most `k` nonzero entries. Selection uses a three-condition
//! domination order: higher success rate first; at equal positive success,
//! smaller L2; at zero success, larger total Mahalanobis loss. Survivors are
//! chosen (mu + lambda)-elitist by front rank.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{create_file, open_artifact, Reader, Writer};
use crate::centroids::CentroidBank;
use crate::embedder::ModalityModel;
use crate::error::{Error, Result};
use crate::metrics::{top1_index, AlphaArchive};
use crate::numerics::{euclidean_sq, linf_clip, mahalanobis_sq};
use crate::rng;
use crate::tensor::ImageTensor;
use crate::uap::UniversalPerturbation;

pub const ETA_MAGIC: &[u8] = b"MMETA01";

/// One gene: a flat pixel index and a ternary value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelGene {
    pub index: usize,
    pub value: i8,
}

/// Sparse ternary perturbation genotype. Positions are unique; at most `k`
/// values are nonzero (enforced by the genetic operators' repair step).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndividual {
    genes: Vec<PixelGene>,
    step_scale: f64,
}

impl SparseIndividual {
    pub fn empty(step_scale: f64) -> Self {
        Self {
            genes: Vec::new(),
            step_scale,
        }
    }

    pub fn from_genes(genes: Vec<PixelGene>, step_scale: f64) -> Self {
        Self { genes, step_scale }
    }

    /// `k` distinct random positions with values drawn from {-1, 0, +1}.
    pub fn random(k: usize, n_pixels: usize, step_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let k = k.min(n_pixels);
        let mut pool: Vec<usize> = (0..n_pixels).collect();
        for i in 0..k {
            let j = rng.gen_range(i..n_pixels);
            pool.swap(i, j);
        }
        let genes = pool[..k]
            .iter()
            .map(|&index| PixelGene {
                index,
                value: rng.gen_range(-1i8..=1),
            })
            .collect();
        Self { genes, step_scale }
    }

    pub fn genes(&self) -> &[PixelGene] {
        &self.genes
    }

    pub fn step_scale(&self) -> f64 {
        self.step_scale
    }

    /// Count of nonzero entries.
    pub fn l0(&self) -> usize {
        self.genes.iter().filter(|g| g.value != 0).count()
    }

    /// `step_scale * sqrt(l0)` since every nonzero entry has magnitude
    /// `step_scale`.
    pub fn eta_l2(&self) -> f64 {
        self.step_scale * (self.l0() as f64).sqrt()
    }

    /// Dense image-shaped view of `step_scale * eta`.
    pub fn to_dense(&self, shape: (usize, usize, usize)) -> Result<ImageTensor> {
        let mut out = ImageTensor::zeros(shape);
        let len = out.len();
        for g in &self.genes {
            if g.index >= len {
                return Err(Error::PixelOutOfRange {
                    h: g.index,
                    w: 0,
                    c: 0,
                    shape,
                });
            }
            out.data_mut()[g.index] = self.step_scale * f64::from(g.value);
        }
        Ok(out)
    }

    /// Verify every constraint: ternary values, unique in-range positions,
    /// at most `k` nonzeros, and the clipped combined perturbation within the
    /// budget of `delta`.
    pub fn check_feasible(&self, k: usize, delta: &UniversalPerturbation) -> Result<()> {
        let n_pixels = delta.delta().len();
        let mut seen = HashSet::with_capacity(self.genes.len());
        for g in &self.genes {
            if !(-1..=1).contains(&g.value) {
                return Err(Error::InvalidConfig(format!(
                    "gene value {} outside ternary set",
                    g.value
                )));
            }
            if g.index >= n_pixels {
                return Err(Error::PixelOutOfRange {
                    h: g.index,
                    w: 0,
                    c: 0,
                    shape: delta.shape(),
                });
            }
            if !seen.insert(g.index) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate gene position {}",
                    g.index
                )));
            }
        }
        if self.l0() > k {
            return Err(Error::InvalidConfig(format!(
                "l0 {} exceeds budget {k}",
                self.l0()
            )));
        }
        let eps = delta.epsilon();
        for g in &self.genes {
            let combined = (delta.delta().data()[g.index] + self.step_scale * f64::from(g.value))
                .clamp(-eps, eps);
            if combined.abs() > eps {
                return Err(Error::InvalidConfig(format!(
                    "combined perturbation {combined} exceeds epsilon {eps}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, k: usize, shape: (usize, usize, usize), path: &Path) -> Result<()> {
        let (_, w, c) = shape;
        let mut out = Writer::new(create_file(path)?);
        out.bytes(ETA_MAGIC)?;
        out.u32(k as u32)?;
        out.f64(self.step_scale)?;
        out.u32(self.genes.len() as u32)?;
        for g in &self.genes {
            let ch = g.index % c;
            let wx = (g.index / c) % w;
            let hy = g.index / (c * w);
            out.u16(hy as u16)?;
            out.u16(wx as u16)?;
            out.u8(ch as u8)?;
            out.i8(g.value)?;
        }
        out.finish()
    }

    pub fn load(path: &Path, shape: (usize, usize, usize)) -> Result<(Self, usize)> {
        let (sh, sw, sc) = shape;
        let mut r = Reader::new(open_artifact(path)?, path);
        r.magic(ETA_MAGIC)?;
        let k = r.u32("k")? as usize;
        let step_scale = r.f64("step_scale")?;
        let count = r.u32("gene count")? as usize;
        let mut genes = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for i in 0..count {
            let hy = r.u16("gene h")? as usize;
            let wx = r.u16("gene w")? as usize;
            let ch = r.u8("gene c")? as usize;
            let value = r.i8("gene value")?;
            if hy >= sh || wx >= sw || ch >= sc {
                return Err(r.malformed(format!("gene {i} position out of range")));
            }
            if !(-1..=1).contains(&value) {
                return Err(r.malformed(format!("gene {i} value {value} outside ternary set")));
            }
            let index = (hy * sw + wx) * sc + ch;
            if !seen.insert(index) {
                return Err(r.malformed(format!("gene {i} duplicates a position")));
            }
            genes.push(PixelGene { index, value });
        }
        r.expect_eof()?;
        let ind = Self { genes, step_scale };
        if ind.l0() > k {
            return Err(r.malformed(format!("l0 {} exceeds stored budget {k}", ind.l0())));
        }
        Ok((ind, k))
    }
}

/// Adversarial image for the dual-layer perturbation:
/// `clamp(img + linf_clip(delta + step_scale * eta, epsilon), 0, 255)`.
pub fn apply_eta(
    img: &ImageTensor,
    delta: &UniversalPerturbation,
    eta: &SparseIndividual,
) -> Result<ImageTensor> {
    if img.shape() != delta.shape() {
        return Err(Error::DimensionMismatch {
            context: "apply_eta image",
            expected: delta.delta().len(),
            got: img.len(),
        });
    }
    let mut combined = delta.delta().clone();
    let len = combined.len();
    for g in eta.genes() {
        if g.index >= len {
            return Err(Error::PixelOutOfRange {
                h: g.index,
                w: 0,
                c: 0,
                shape: img.shape(),
            });
        }
        combined.data_mut()[g.index] += eta.step_scale() * f64::from(g.value);
    }
    linf_clip(combined.data_mut(), delta.epsilon());
    let mut out = img.add(&combined);
    out.clamp_in_place(0.0, 255.0);
    Ok(out)
}

/// Objective vector of one evaluated individual.
///
/// `d_total` is the summed mean Mahalanobis loss across models; `d_tilde` is
/// its `exp(-D)` minimization form. Comparisons go through `d_total` because
/// `exp(-D)` underflows to zero once the attack pushes features far enough.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveVector {
    pub d_total: f64,
    pub d_tilde: f64,
    pub s_tilde: f64,
    pub eta_l2: f64,
}

impl ObjectiveVector {
    pub fn from_parts(d_total: f64, s_tilde: f64, eta_l2: f64) -> Self {
        Self {
            d_total,
            d_tilde: (-d_total).exp(),
            s_tilde,
            eta_l2,
        }
    }

    /// Aggregated success rate (the maximization form of `s_tilde`).
    pub fn success_rate(&self) -> f64 {
        1.0 - self.s_tilde
    }
}

/// Per-model evaluation context: model, bank, eval samples with their frozen
/// home centroids, and precomputed clean gallery features.
pub struct ModelEvalContext<'a> {
    pub model: &'a ModalityModel,
    pub bank: &'a CentroidBank,
    samples: Vec<EvalSample<'a>>,
    gallery_feats: Vec<Vec<f64>>,
    gallery_labels: Vec<u32>,
}

struct EvalSample<'a> {
    image: &'a ImageTensor,
    label: u32,
    home_centroid: usize,
}

impl<'a> ModelEvalContext<'a> {
    pub fn new(
        model: &'a ModalityModel,
        bank: &'a CentroidBank,
        samples: &[(&'a ImageTensor, u32)],
        gallery: &[(&'a ImageTensor, u32)],
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("eval samples"));
        }
        if gallery.is_empty() {
            return Err(Error::EmptyInput("eval gallery"));
        }
        let mut built = Vec::with_capacity(samples.len());
        for (image, label) in samples {
            let f = model.forward(image)?;
            built.push(EvalSample {
                image,
                label: *label,
                home_centroid: bank.nearest_index(&f)?,
            });
        }
        let gallery_feats = gallery
            .iter()
            .map(|(img, _)| model.forward(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            bank,
            samples: built,
            gallery_feats,
            gallery_labels: gallery.iter().map(|(_, l)| *l).collect(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Evaluation context across the auxiliary models.
pub struct EvalContext<'a> {
    pub entries: Vec<ModelEvalContext<'a>>,
}

impl<'a> EvalContext<'a> {
    pub fn new(entries: Vec<ModelEvalContext<'a>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("eval context entries"));
        }
        Ok(Self { entries })
    }

    pub fn n_models(&self) -> usize {
        self.entries.len()
    }
}

/// Evaluate one individual: per model, the mean Mahalanobis distance from the
/// perturbed feature to the clean feature's home centroid (to maximize) and
/// the per-model rank-1 mismatch rate over the batch (the mean of the
/// per-sample success indicators).
///
/// The aggregated success rate averages the per-model rates, so every flipped
/// query moves the objective; an earlier majority-thresholded variant left
/// the search without a usable signal.
pub fn evaluate(
    eta: &SparseIndividual,
    delta: &UniversalPerturbation,
    ctx: &EvalContext<'_>,
) -> Result<(ObjectiveVector, Vec<f64>)> {
    let mut d_total = 0.0;
    let mut rate_sum = 0.0;
    let mut rates = Vec::with_capacity(ctx.entries.len());
    for entry in &ctx.entries {
        let mut d_acc = 0.0;
        let mut successes = 0usize;
        for sample in &entry.samples {
            let adv = apply_eta(sample.image, delta, eta)?;
            let f_adv = entry.model.forward(&adv)?;
            d_acc += mahalanobis_sq(
                &f_adv,
                &entry.bank.centroids[sample.home_centroid],
                &entry.bank.s_inv,
            )?;
            let dists: Vec<f64> = entry
                .gallery_feats
                .iter()
                .map(|g| euclidean_sq(&f_adv, g))
                .collect();
            let nn = top1_index(&dists);
            if entry.gallery_labels[nn] != sample.label {
                successes += 1;
            }
        }
        let n = entry.samples.len();
        d_total += d_acc / n as f64;
        let rate = successes as f64 / n as f64;
        rate_sum += rate;
        rates.push(rate);
    }
    let n_models = ctx.entries.len() as f64;
    let s_tilde = 1.0 - rate_sum / n_models;
    let obj = ObjectiveVector {
        d_total,
        d_tilde: (-d_total).exp(),
        s_tilde,
        eta_l2: eta.eta_l2(),
    };
    Ok((obj, rates))
}

/// Three-condition domination order; strict inequalities throughout, so the
/// relation is irreflexive and asymmetric, and equal-on-all pairs are
/// mutually non-dominating.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    let sa = a.success_rate();
    let sb = b.success_rate();
    if sa > sb {
        return true;
    }
    if sa != sb {
        return false;
    }
    if sa > 0.0 {
        a.eta_l2 < b.eta_l2
    } else {
        // Smaller d_tilde, i.e. larger raw total loss.
        a.d_total > b.d_total
    }
}

/// Front peeling under `dominates`: front 0 holds exactly the individuals
/// dominated by nothing.
pub fn nondominated_sort(objs: &[ObjectiveVector]) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..objs.len()).collect();
    let mut fronts = Vec::new();
    while !remaining.is_empty() {
        let mut front = Vec::new();
        for &i in &remaining {
            let dominated = remaining
                .iter()
                .any(|&j| j != i && dominates(&objs[j], &objs[i]));
            if !dominated {
                front.push(i);
            }
        }
        remaining.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Uniform gene-mix crossover with probability `p_c`, otherwise clones. The
/// parents' genes are dealt to the two children coin-by-coin, deduplicated by
/// position, then repaired to the L0 budget.
pub fn crossover(
    p1: &SparseIndividual,
    p2: &SparseIndividual,
    p_c: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (SparseIndividual, SparseIndividual) {
    if rng.gen::<f64>() >= p_c {
        return (p1.clone(), p2.clone());
    }
    let step = p1.step_scale();
    let mut genes_a = Vec::new();
    let mut genes_b = Vec::new();
    let mut seen_a = HashSet::new();
    let mut seen_b = HashSet::new();
    for g in p1.genes().iter().chain(p2.genes().iter()) {
        if rng.gen::<bool>() {
            if seen_a.insert(g.index) {
                genes_a.push(*g);
            }
        } else if seen_b.insert(g.index) {
            genes_b.push(*g);
        }
    }
    let mut a = SparseIndividual::from_genes(genes_a, step);
    let mut b = SparseIndividual::from_genes(genes_b, step);
    repair(&mut a, k, rng);
    repair(&mut b, k, rng);
    (a, b)
}

/// Per-gene mutation: with probability `p_m` a gene either flips to one of
/// the other two ternary values or relocates to an unused pixel, followed by
/// repair.
pub fn mutate(
    ind: &SparseIndividual,
    p_m: f64,
    k: usize,
    n_pixels: usize,
    rng: &mut ChaCha8Rng,
) -> SparseIndividual {
    let mut genes = ind.genes().to_vec();
    let mut used: HashSet<usize> = genes.iter().map(|g| g.index).collect();
    for gene in &mut genes {
        if rng.gen::<f64>() >= p_m {
            continue;
        }
        if rng.gen::<bool>() {
            // Flip to one of the other two ternary values.
            let options: [i8; 2] = match gene.value {
                -1 => [0, 1],
                0 => [-1, 1],
                _ => [-1, 0],
            };
            gene.value = options[rng.gen_range(0..2)];
        } else if used.len() < n_pixels {
            // Relocate to a uniformly random unused pixel; rejection-sample
            // while the occupancy is sparse, enumerate when it is not.
            let target = if used.len() * 2 > n_pixels {
                let free: Vec<usize> = (0..n_pixels).filter(|p| !used.contains(p)).collect();
                free[rng.gen_range(0..free.len())]
            } else {
                loop {
                    let p = rng.gen_range(0..n_pixels);
                    if !used.contains(&p) {
                        break p;
                    }
                }
            };
            used.remove(&gene.index);
            used.insert(target);
            gene.index = target;
        }
    }
    let mut out = SparseIndividual::from_genes(genes, ind.step_scale());
    repair(&mut out, k, rng);
    out
}

/// Constraint repair: zero random nonzero genes until `l0 <= k`, then drop
/// random zero-valued genes until the genotype holds at most `k` genes.
fn repair(ind: &mut SparseIndividual, k: usize, rng: &mut ChaCha8Rng) {
    while ind.l0() > k {
        let nonzero: Vec<usize> = ind
            .genes
            .iter()
            .enumerate()
            .filter(|(_, g)| g.value != 0)
            .map(|(i, _)| i)
            .collect();
        let pick = nonzero[rng.gen_range(0..nonzero.len())];
        ind.genes[pick].value = 0;
    }
    while ind.genes.len() > k {
        let zeros: Vec<usize> = ind
            .genes
            .iter()
            .enumerate()
            .filter(|(_, g)| g.value == 0)
            .map(|(i, _)| i)
            .collect();
        let pick = zeros[rng.gen_range(0..zeros.len())];
        ind.genes.remove(pick);
    }
}

#[derive(Debug, Clone)]
pub struct EvoConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub k: usize,
    pub p_c: f64,
    pub p_m: f64,
    pub step_scale: f64,
    pub seed: u64,
}

impl EvoConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            pop_size: 2,
            generations: 150,
            k: 64,
            p_c: 0.8,
            p_m: 0.1,
            step_scale: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.pop_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "pop_size must be >= 2, got {}",
                self.pop_size
            )));
        }
        if self.generations < 1 {
            return Err(Error::InvalidConfig("generations must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        for (name, p) in [("p_c", self.p_c), ("p_m", self.p_m)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.step_scale <= 0.0 || !self.step_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step_scale must be positive, got {}",
                self.step_scale
            )));
        }
        Ok(())
    }
}

/// Per-generation snapshot of the incumbent best individual and the archive.
#[derive(Debug, Clone)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_success: f64,
    pub best_d_tilde: f64,
    pub best_eta_l2: f64,
    /// Archived (running-max) per-model complementarity after this generation.
    pub archive_best: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct EvolveTrace {
    /// Rank-1 mismatch rates of the dense perturbation alone, per model.
    pub baseline_rates: Vec<f64>,
    pub generations: Vec<GenerationStats>,
    /// Number of feasibility assertions performed (init + after every
    /// crossover and mutation product).
    pub feasibility_checks: usize,
}

pub struct EvolveOutcome {
    pub best: SparseIndividual,
    pub best_objective: ObjectiveVector,
    pub best_rates: Vec<f64>,
    pub trace: EvolveTrace,
    pub final_population: Vec<(SparseIndividual, ObjectiveVector)>,
}

struct Evaluated {
    ind: SparseIndividual,
    obj: ObjectiveVector,
    rates: Vec<f64>,
}

/// Generational loop: evaluate, sort, binary-tournament parents, crossover,
/// mutate, (mu + lambda) elitist survival, archive update. Generation 0 is
/// the evaluated initial population, so `generations = 1` returns the best
/// of `pop_size` random individuals.
pub fn evolve(
    delta: &UniversalPerturbation,
    ctx: &EvalContext<'_>,
    cfg: &EvoConfig,
) -> Result<EvolveOutcome> {
    cfg.validate()?;
    let n_pixels = delta.delta().len();
    let mut rng = rng::stream_from_seed(cfg.seed);
    let mut checks = 0usize;

    // Baseline: the dense perturbation alone.
    let (_, baseline_rates) = evaluate(&SparseIndividual::empty(cfg.step_scale), delta, ctx)?;
    let mut archive = AlphaArchive::new(baseline_rates.clone());

    let mut population: Vec<Evaluated> = Vec::with_capacity(cfg.pop_size);
    for _ in 0..cfg.pop_size {
        let ind = SparseIndividual::random(cfg.k, n_pixels, cfg.step_scale, &mut rng);
        ind.check_feasible(cfg.k, delta)?;
        checks += 1;
        let (obj, rates) = evaluate(&ind, delta, ctx)?;
        population.push(Evaluated { ind, obj, rates });
    }

    let mut trace = EvolveTrace {
        baseline_rates,
        generations: Vec::with_capacity(cfg.generations),
        feasibility_checks: 0,
    };
    record_generation(0, &population, &mut archive, &mut trace);

    for gen in 1..cfg.generations {
        let objs: Vec<ObjectiveVector> = population.iter().map(|e| e.obj.clone()).collect();
        let fronts = nondominated_sort(&objs);
        let mut rank = vec![0usize; population.len()];
        for (r, front) in fronts.iter().enumerate() {
            for &i in front {
                rank[i] = r;
            }
        }

        let mut offspring: Vec<Evaluated> = Vec::with_capacity(cfg.pop_size);
        while offspring.len() < cfg.pop_size {
            let pa = tournament(&population, &rank, &mut rng);
            let pb = tournament(&population, &rank, &mut rng);
            let (ca, cb) = crossover(
                &population[pa].ind,
                &population[pb].ind,
                cfg.p_c,
                cfg.k,
                &mut rng,
            );
            for child in [ca, cb] {
                child.check_feasible(cfg.k, delta)?;
                checks += 1;
                let mutated = mutate(&child, cfg.p_m, cfg.k, n_pixels, &mut rng);
                mutated.check_feasible(cfg.k, delta)?;
                checks += 1;
                if offspring.len() < cfg.pop_size {
                    let (obj, rates) = evaluate(&mutated, delta, ctx)?;
                    offspring.push(Evaluated {
                        ind: mutated,
                        obj,
                        rates,
                    });
                }
            }
        }

        population.extend(offspring);
        population = select_survivors(population, cfg.pop_size);
        record_generation(gen, &population, &mut archive, &mut trace);
    }

    trace.feasibility_checks = checks;
    let best_idx = pick_best(&population);
    let best = &population[best_idx];
    Ok(EvolveOutcome {
        best: best.ind.clone(),
        best_objective: best.obj.clone(),
        best_rates: best.rates.clone(),
        final_population: population
            .iter()
            .map(|e| (e.ind.clone(), e.obj.clone()))
            .collect(),
        trace,
    })
}

/// Binary tournament with replacement: lower front rank wins; rank ties
/// prefer the larger total loss (smaller d_tilde); then the lower index.
fn tournament(pop: &[Evaluated], rank: &[usize], rng: &mut ChaCha8Rng) -> usize {
    let i = rng.gen_range(0..pop.len());
    let j = rng.gen_range(0..pop.len());
    if rank[i] < rank[j] {
        i
    } else if rank[j] < rank[i] {
        j
    } else if pop[i].obj.d_total > pop[j].obj.d_total {
        i
    } else if pop[j].obj.d_total > pop[i].obj.d_total {
        j
    } else {
        i.min(j)
    }
}

/// (mu + lambda) survivor selection by front rank. Within a front the order
/// is success desc, total loss desc, L2 asc, then insertion index, so the
/// best-success member of front 0 always survives (elitism).
fn select_survivors(combined: Vec<Evaluated>, mu: usize) -> Vec<Evaluated> {
    let objs: Vec<ObjectiveVector> = combined.iter().map(|e| e.obj.clone()).collect();
    let fronts = nondominated_sort(&objs);
    let mut picked: Vec<usize> = Vec::with_capacity(mu);
    for front in fronts {
        let mut ordered = front;
        ordered.sort_by(|&a, &b| {
            objs[b]
                .success_rate()
                .partial_cmp(&objs[a].success_rate())
                .unwrap()
                .then(objs[b].d_total.partial_cmp(&objs[a].d_total).unwrap())
                .then(objs[a].eta_l2.partial_cmp(&objs[b].eta_l2).unwrap())
                .then(a.cmp(&b))
        });
        for i in ordered {
            if picked.len() < mu {
                picked.push(i);
            }
        }
        if picked.len() >= mu {
            break;
        }
    }
    let mut keep: Vec<Option<Evaluated>> = combined.into_iter().map(Some).collect();
    picked
        .into_iter()
        .map(|i| keep[i].take().expect("indices unique"))
        .collect()
}

/// Incumbent: front-0 individual with the highest success rate, ties broken
/// by smaller L2, then larger total loss, then index.
fn pick_best(pop: &[Evaluated]) -> usize {
    let objs: Vec<ObjectiveVector> = pop.iter().map(|e| e.obj.clone()).collect();
    let fronts = nondominated_sort(&objs);
    let mut best = fronts[0][0];
    for &i in &fronts[0] {
        let a = &objs[i];
        let b = &objs[best];
        let better = a.success_rate() > b.success_rate()
            || (a.success_rate() == b.success_rate() && a.eta_l2 < b.eta_l2)
            || (a.success_rate() == b.success_rate()
                && a.eta_l2 == b.eta_l2
                && a.d_total > b.d_total);
        if better {
            best = i;
        }
    }
    best
}

fn record_generation(
    gen: usize,
    population: &[Evaluated],
    archive: &mut AlphaArchive,
    trace: &mut EvolveTrace,
) {
    // Per-model alpha observed this generation: the best over the current
    // population of each model's complementarity.
    let n_models = archive.baselines().len();
    let mut observed: Vec<Option<f64>> = vec![None; n_models];
    for e in population {
        for (slot, alpha) in observed.iter_mut().zip(archive.alphas_for(&e.rates)) {
            if let Some(a) = alpha {
                *slot = Some(match slot {
                    Some(cur) => cur.max(a),
                    None => a,
                });
            }
        }
    }
    archive.update(&observed);

    let best = pick_best(population);
    let obj = &population[best].obj;
    trace.generations.push(GenerationStats {
        generation: gen,
        best_success: obj.success_rate(),
        best_d_tilde: obj.d_tilde,
        best_eta_l2: obj.eta_l2,
        archive_best: archive.best().to_vec(),
    });
}
