//! Retrieval and attack metrics: Rank-k / CMC, mAP, rank-1 mismatch success
//! rate, complementarity, the fitness diagnostic, and the best-alpha archive.

use crate::embedder::ModalityModel;
use crate::error::{Error, Result};
use crate::numerics::euclidean_sq;
use crate::tensor::ImageTensor;

/// Query-by-gallery distance matrix with identity labels. The protocol is
/// flat: no camera ids, every gallery item is a candidate for every query.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n_queries: usize,
    n_gallery: usize,
    dists: Vec<f64>,
    query_labels: Vec<u32>,
    gallery_labels: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(dists: Vec<f64>, query_labels: Vec<u32>, gallery_labels: Vec<u32>) -> Result<Self> {
        let n_queries = query_labels.len();
        let n_gallery = gallery_labels.len();
        if dists.len() != n_queries * n_gallery {
            return Err(Error::DimensionMismatch {
                context: "DistanceMatrix::new",
                expected: n_queries * n_gallery,
                got: dists.len(),
            });
        }
        if dists.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("DistanceMatrix::new"));
        }
        Ok(Self {
            n_queries,
            n_gallery,
            dists,
            query_labels,
            gallery_labels,
        })
    }

    /// Euclidean feature distances between query and gallery feature sets.
    pub fn from_features(
        query_feats: &[Vec<f64>],
        query_labels: Vec<u32>,
        gallery_feats: &[Vec<f64>],
        gallery_labels: Vec<u32>,
    ) -> Result<Self> {
        if query_feats.len() != query_labels.len() || gallery_feats.len() != gallery_labels.len() {
            return Err(Error::DimensionMismatch {
                context: "DistanceMatrix::from_features labels",
                expected: query_feats.len(),
                got: query_labels.len(),
            });
        }
        let mut dists = Vec::with_capacity(query_feats.len() * gallery_feats.len());
        for q in query_feats {
            for g in gallery_feats {
                dists.push(euclidean_sq(q, g).sqrt());
            }
        }
        Self::new(dists, query_labels, gallery_labels)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_gallery(&self) -> usize {
        self.n_gallery
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.dists[q * self.n_gallery..(q + 1) * self.n_gallery]
    }

    pub fn query_labels(&self) -> &[u32] {
        &self.query_labels
    }

    pub fn gallery_labels(&self) -> &[u32] {
        &self.gallery_labels
    }

    fn check_queries_covered(&self) -> Result<()> {
        if self.n_gallery == 0 {
            return Err(Error::EmptyInput("gallery"));
        }
        for q in &self.query_labels {
            if !self.gallery_labels.contains(q) {
                return Err(Error::InvalidConfig(format!(
                    "query identity {q} has no gallery image"
                )));
            }
        }
        Ok(())
    }

    /// Gallery indices of one query sorted by ascending distance, ties broken
    /// by gallery index.
    fn sorted_gallery(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut order: Vec<usize> = (0..self.n_gallery).collect();
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        order
    }
}

/// Index of the minimal entry, ties toward the lowest index. Shared by the
/// metric ops and the evolutionary layer so both use one tie rule.
pub fn top1_index(dists: &[f64]) -> usize {
    let mut best = 0;
    for (i, d) in dists.iter().enumerate().skip(1) {
        if *d < dists[best] {
            best = i;
        }
    }
    best
}

/// Rank-k accuracy for each requested k (the CMC curve sampled at `ks`).
pub fn cmc_rank(dm: &DistanceMatrix, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    dm.check_queries_covered()?;
    if dm.n_queries == 0 {
        return Err(Error::EmptyInput("cmc_rank queries"));
    }
    // Position of the first correct match per query.
    let mut first_hit = Vec::with_capacity(dm.n_queries);
    for q in 0..dm.n_queries {
        let order = dm.sorted_gallery(q);
        let hit = order
            .iter()
            .position(|&g| dm.gallery_labels[g] == dm.query_labels[q])
            .expect("coverage checked above");
        first_hit.push(hit);
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&h| h < k).count();
            (k, hits as f64 / dm.n_queries as f64)
        })
        .collect())
}

/// Mean average precision: per query, the mean of precision-at-position over
/// the positions of its relevant gallery items; averaged over queries.
pub fn mean_ap(dm: &DistanceMatrix) -> Result<f64> {
    dm.check_queries_covered()?;
    if dm.n_queries == 0 {
        return Err(Error::EmptyInput("mean_ap queries"));
    }
    let mut total = 0.0;
    for q in 0..dm.n_queries {
        let order = dm.sorted_gallery(q);
        let mut relevant_seen = 0usize;
        let mut ap = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if dm.gallery_labels[g] == dm.query_labels[q] {
                relevant_seen += 1;
                ap += relevant_seen as f64 / (pos + 1) as f64;
            }
        }
        total += ap / relevant_seen as f64;
    }
    Ok(total / dm.n_queries as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessMode {
    /// A query succeeds when its top-1 gallery neighbour carries a different
    /// identity.
    Rank1Mismatch,
}

/// Per-query attack success flags and the mean success rate.
///
/// Queries are expected to carry whatever perturbation is under evaluation;
/// the gallery stays clean. By construction the rate is exactly
/// `1 - rank-1 accuracy` on the same matrix.
pub fn attack_success(
    model: &ModalityModel,
    queries: &[(&ImageTensor, u32)],
    gallery: &[(&ImageTensor, u32)],
    mode: SuccessMode,
) -> Result<(Vec<bool>, f64)> {
    if gallery.is_empty() {
        return Err(Error::EmptyInput("attack_success gallery"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("attack_success queries"));
    }
    let q_feats: Vec<Vec<f64>> = queries
        .iter()
        .map(|(img, _)| model.forward(img))
        .collect::<Result<_>>()?;
    let g_feats: Vec<Vec<f64>> = gallery
        .iter()
        .map(|(img, _)| model.forward(img))
        .collect::<Result<_>>()?;
    let dm = DistanceMatrix::from_features(
        &q_feats,
        queries.iter().map(|(_, l)| *l).collect(),
        &g_feats,
        gallery.iter().map(|(_, l)| *l).collect(),
    )?;
    Ok(success_from_matrix(&dm, mode))
}

/// Success flags straight from a distance matrix (used when features are
/// already at hand).
pub fn success_from_matrix(dm: &DistanceMatrix, mode: SuccessMode) -> (Vec<bool>, f64) {
    match mode {
        SuccessMode::Rank1Mismatch => {
            let flags: Vec<bool> = (0..dm.n_queries())
                .map(|q| {
                    let nn = top1_index(dm.row(q));
                    dm.gallery_labels()[nn] != dm.query_labels()[q]
                })
                .collect();
            // Computed as the exact complement of rank-1 accuracy so the
            // two report paths agree bit-for-bit.
            let hits = flags.iter().filter(|s| !**s).count();
            let rate = 1.0 - hits as f64 / flags.len() as f64;
            (flags, rate)
        }
    }
}

/// Relative gain in misclassification rate when the sparse perturbation is
/// superimposed: `(r_combined - r_base) / r_base`. `None` marks the
/// distinguished baseline-zero outcome (excluded from archives).
pub fn complementarity(r_base: f64, r_combined: f64) -> Option<f64> {
    if r_base == 0.0 {
        None
    } else {
        Some((r_combined - r_base) / r_base)
    }
}

/// Weights for the fitness diagnostic.
#[derive(Debug, Clone)]
pub struct FitnessParams {
    pub weights: Vec<f64>,
    pub lambda_sparsity: f64,
}

impl FitnessParams {
    pub fn uniform(n_models: usize) -> Self {
        Self {
            weights: vec![1.0 / n_models as f64; n_models],
            lambda_sparsity: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("fitness weights must be >= 0".into()));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidConfig(
                "fitness needs at least one positive weight".into(),
            ));
        }
        if self.lambda_sparsity < 0.0 || !self.lambda_sparsity.is_finite() {
            return Err(Error::InvalidConfig("lambda_sparsity must be >= 0".into()));
        }
        Ok(())
    }
}

/// Weighted success-rate sum minus the sparsity penalty. A reported
/// diagnostic only; the evolutionary layer selects via domination.
pub fn fitness(rates: &[f64], params: &FitnessParams, eta_l0: usize) -> Result<f64> {
    params.validate()?;
    if rates.len() != params.weights.len() {
        return Err(Error::DimensionMismatch {
            context: "fitness rates",
            expected: params.weights.len(),
            got: rates.len(),
        });
    }
    let weighted: f64 = rates
        .iter()
        .zip(params.weights.iter())
        .map(|(r, w)| r * w)
        .sum();
    Ok(weighted - params.lambda_sparsity * eta_l0 as f64)
}

/// Running per-model maxima of the complementarity measure, seeded with the
/// dense-perturbation baseline rates. Models whose baseline rate is zero are
/// permanently excluded (their slot stays `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaArchive {
    baselines: Vec<f64>,
    best: Vec<Option<f64>>,
    generation: usize,
}

impl AlphaArchive {
    pub fn new(baselines: Vec<f64>) -> Self {
        let best = vec![None; baselines.len()];
        Self {
            baselines,
            best,
            generation: 0,
        }
    }

    pub fn baselines(&self) -> &[f64] {
        &self.baselines
    }

    pub fn best(&self) -> &[Option<f64>] {
        &self.best
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Fold one generation's observed per-model alphas into the running
    /// maxima. `None` entries (baseline-zero or unobserved) leave the slot
    /// untouched.
    pub fn update(&mut self, observed: &[Option<f64>]) {
        assert_eq!(observed.len(), self.best.len());
        for (slot, (obs, base)) in self
            .best
            .iter_mut()
            .zip(observed.iter().zip(self.baselines.iter()))
        {
            if *base == 0.0 {
                continue;
            }
            if let Some(a) = obs {
                *slot = Some(match slot {
                    Some(cur) => cur.max(*a),
                    None => *a,
                });
            }
        }
        self.generation += 1;
    }

    /// Observed alphas for one candidate's per-model rates against the
    /// archived baselines.
    pub fn alphas_for(&self, rates: &[f64]) -> Vec<Option<f64>> {
        rates
            .iter()
            .zip(self.baselines.iter())
            .map(|(r, b)| complementarity(*b, *r))
            .collect()
    }
}
