//! End-to-end experiment driver behind the CLI subcommands: data generation,
//! per-modality training, the two attack layers, transfer evaluation, and
//! ablation grids.
//!
//! Phase order within a run is strictly sequential (train -> dense layer ->
//! evolutionary layer -> evaluation); the held-out modality's checkpoint is
//! not loaded until the evaluation phase, so no optimization step can touch
//! its model, bank, or gradients.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::centroids::{build_bank, CentroidBank};
use crate::config::ExperimentConfig;
use crate::dataset::{
    build_multimodal, generate_identities, load_dataset, save_dataset, ModalitySpec, ReidDataset,
    Split,
};
use crate::embedder::{init_model, train, ModalityModel};
use crate::error::{Error, Result};
use crate::evo::{evolve, EvalContext, EvoConfig, EvolveOutcome, ModelEvalContext};
use crate::metrics::{
    cmc_rank, complementarity, mean_ap, success_from_matrix, DistanceMatrix, SuccessMode,
};
use crate::report::{
    write_ablate_csv, write_metrics_csv, write_summary_json, write_trace_csv, AblateRow, MetricRow,
    PhaseTiming, RunReport,
};
use crate::rng::subseed;
use crate::tensor::ImageTensor;
use crate::uap::{learn_uap, AttackContext, UapConfig, UniversalPerturbation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    GradOnly,
    DualLayer,
}

impl AttackMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grad-only" => Ok(AttackMode::GradOnly),
            "dual-layer" => Ok(AttackMode::DualLayer),
            other => Err(Error::InvalidConfig(format!(
                "unknown attack mode '{other}' (expected grad-only or dual-layer)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::GradOnly => "grad-only",
            AttackMode::DualLayer => "dual-layer",
        }
    }
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.mmreid")
}

pub fn model_path(out: &Path, modality: u16) -> PathBuf {
    out.join("models")
        .join(format!("modality_{modality}.mmemb"))
}

pub fn delta_path(out: &Path) -> PathBuf {
    out.join("delta.mmuap")
}

pub fn eta_path(out: &Path) -> PathBuf {
    out.join("eta.mmeta")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn trace_path(out: &Path) -> PathBuf {
    out.join("trace.csv")
}

pub fn ablate_path(out: &Path) -> PathBuf {
    out.join("ablate.csv")
}

pub fn summary_path(out: &Path) -> PathBuf {
    out.join("summary.json")
}

pub fn config_echo_path(out: &Path) -> PathBuf {
    out.join("config.echo")
}

fn write_config_echo(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(config_echo_path(out), cfg.echo())?;
    Ok(())
}

/// Build the multimodal dataset in memory from the resolved config.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<ReidDataset> {
    let base = generate_identities(
        cfg.n_identities,
        cfg.images_per_identity,
        cfg.shape(),
        cfg.noise_sigma,
        subseed(cfg.seed, "dataset"),
    )?;
    let specs: Vec<ModalitySpec> = cfg
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| ModalitySpec::new(m.kind, cfg.resolved_modality_seed(i)))
        .collect();
    build_multimodal(&base, &specs)
}

/// `gen-data`: write the benchmark container into the run directory.
/// Idempotent for a fixed config and seed.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let path = dataset_path(out);
    save_dataset(&ds, &path)?;
    write_config_echo(cfg, out)?;
    Ok(path)
}

fn load_run_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<ReidDataset> {
    let ds = load_dataset(&dataset_path(out))?;
    if ds.shape != cfg.shape() {
        return Err(Error::InvalidConfig(format!(
            "dataset shape {:?} does not match config shape {:?}; regenerate with gen-data",
            ds.shape,
            cfg.shape()
        )));
    }
    if ds.modalities.len() != cfg.modalities.len() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} modalities, config expects {}; regenerate with gen-data",
            ds.modalities.len(),
            cfg.modalities.len()
        )));
    }
    Ok(ds)
}

/// Train one modality's model on its train split.
fn train_modality(
    cfg: &ExperimentConfig,
    ds: &ReidDataset,
    modality: u16,
) -> Result<ModalityModel> {
    let mut model = init_model(
        cfg.shape(),
        cfg.d_hidden,
        cfg.d_feat,
        cfg.n_identities,
        modality,
        subseed(cfg.seed, &format!("init{modality}")),
    )?;
    let samples: Vec<(&ImageTensor, usize)> = ds
        .select(modality, Split::Train)
        .iter()
        .map(|im| (&im.image, im.identity as usize))
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyInput("train split"));
    }
    train(
        &mut model,
        &samples,
        cfg.train_epochs,
        cfg.train_lr,
        cfg.train_batch,
        subseed(cfg.seed, &format!("train{modality}")),
    )?;
    Ok(model)
}

fn bank_for(
    cfg: &ExperimentConfig,
    ds: &ReidDataset,
    model: &ModalityModel,
    modality: u16,
) -> Result<CentroidBank> {
    let gallery: Vec<&ImageTensor> = ds
        .select(modality, Split::Gallery)
        .iter()
        .map(|im| &im.image)
        .collect();
    build_bank(
        model,
        &gallery,
        cfg.resolved_n_clusters(),
        cfg.lambda_reg,
        subseed(cfg.seed, &format!("bank{modality}")),
    )
}

/// Clean rank-1 accuracy of one modality's model on its query/gallery split.
fn clean_rank1(ds: &ReidDataset, model: &ModalityModel, modality: u16) -> Result<f64> {
    let eval = evaluate_modality(ds, model, modality, |img| img.clone())?;
    Ok(eval.rank1)
}

pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    /// (modality, clean rank-1) pairs, the per-modality sanity gate.
    pub clean_rank1: Vec<(u16, f64)>,
}

/// `train`: one checkpoint per modality, trained on that modality's train
/// split, reporting clean rank-1 per modality.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_run_dataset(cfg, out)?;
    let mut checkpoints = Vec::new();
    let mut clean = Vec::new();
    for m in 0..cfg.modalities.len() as u16 {
        let model = train_modality(cfg, &ds, m)?;
        let path = model_path(out, m);
        model.save(&path)?;
        clean.push((m, clean_rank1(&ds, &model, m)?));
        checkpoints.push(path);
    }
    write_config_echo(cfg, out)?;
    Ok(TrainOutcome {
        checkpoints,
        clean_rank1: clean,
    })
}

struct ModalityEval {
    rank1: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
    success_rate: f64,
}

/// Retrieval metrics of one modality with a per-query perturbation closure
/// applied to the query images (the gallery stays clean).
fn evaluate_modality<F>(
    ds: &ReidDataset,
    model: &ModalityModel,
    modality: u16,
    perturb: F,
) -> Result<ModalityEval>
where
    F: Fn(&ImageTensor) -> ImageTensor,
{
    let queries = ds.select(modality, Split::Query);
    let gallery = ds.select(modality, Split::Gallery);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let q_feats: Vec<Vec<f64>> = queries
        .iter()
        .map(|im| model.forward(&perturb(&im.image)))
        .collect::<Result<_>>()?;
    let g_feats: Vec<Vec<f64>> = gallery
        .iter()
        .map(|im| model.forward(&im.image))
        .collect::<Result<_>>()?;
    let dm = DistanceMatrix::from_features(
        &q_feats,
        queries.iter().map(|im| im.identity).collect(),
        &g_feats,
        gallery.iter().map(|im| im.identity).collect(),
    )?;
    let cmc = cmc_rank(&dm, &[1, 5, 10])?;
    let map = mean_ap(&dm)?;
    let (_, success_rate) = success_from_matrix(&dm, SuccessMode::Rank1Mismatch);
    Ok(ModalityEval {
        rank1: cmc[0].1,
        rank5: cmc[1].1,
        rank10: cmc[2].1,
        map,
        success_rate,
    })
}

fn load_model_checkpoint(out: &Path, modality: u16) -> Result<ModalityModel> {
    ModalityModel::load(&model_path(out, modality))
}

/// `attack`: run the configured layers and evaluate clean/uap(/uap+eta) on
/// the source and held-out modalities.
pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path, mode: AttackMode) -> Result<RunReport> {
    cfg.validate()?;
    if mode == AttackMode::DualLayer && cfg.aux_mods.is_empty() {
        return Err(Error::InvalidConfig(
            "dual-layer mode requires at least one auxiliary modality".into(),
        ));
    }
    let ds = load_run_dataset(cfg, out)?;
    let run_id = format!("attack-{}-seed{}", mode.name(), cfg.seed);
    let mut timings: Vec<PhaseTiming> = Vec::new();

    // ---- layer 1: dense universal perturbation on the source modalities.
    let source_models: Vec<ModalityModel> = cfg
        .source_mods
        .iter()
        .map(|&m| load_model_checkpoint(out, m))
        .collect::<Result<_>>()?;
    let source_banks: Vec<CentroidBank> = cfg
        .source_mods
        .iter()
        .zip(source_models.iter())
        .map(|(&m, model)| bank_for(cfg, &ds, model, m))
        .collect::<Result<_>>()?;
    let mut attack_samples: Vec<(&ImageTensor, usize)> = Vec::new();
    for (slot, &m) in cfg.source_mods.iter().enumerate() {
        for im in ds.select(m, Split::Train) {
            attack_samples.push((&im.image, slot));
        }
    }
    let ctx = AttackContext::new(
        source_models.iter().collect(),
        source_banks.iter().collect(),
        &attack_samples,
    )?;
    let uap_cfg = UapConfig {
        epochs: cfg.uap_epochs,
        batch_size: cfg.uap_batch,
        epsilon: cfg.epsilon,
        rho: cfg.rho,
        beta: cfg.beta,
        alpha: cfg.resolved_alpha(),
        seed: subseed(cfg.seed, "uap"),
    };
    let t = Instant::now();
    let (delta, _uap_trace) = learn_uap(&ctx, &uap_cfg)?;
    timings.push(PhaseTiming {
        phase: "uap".into(),
        seconds: t.elapsed().as_secs_f64(),
    });
    delta.save(&delta_path(out))?;

    // ---- layer 2: sparse perturbation against the auxiliary modalities.
    let mut evolve_outcome: Option<EvolveOutcome> = None;
    if mode == AttackMode::DualLayer {
        let aux_models: Vec<ModalityModel> = cfg
            .aux_mods
            .iter()
            .map(|&m| load_model_checkpoint(out, m))
            .collect::<Result<_>>()?;
        let aux_banks: Vec<CentroidBank> = cfg
            .aux_mods
            .iter()
            .zip(aux_models.iter())
            .map(|(&m, model)| bank_for(cfg, &ds, model, m))
            .collect::<Result<_>>()?;
        let evo_cfg = EvoConfig {
            pop_size: cfg.pop_size,
            generations: cfg.generations,
            k: cfg.k,
            p_c: cfg.p_c,
            p_m: cfg.p_m,
            step_scale: cfg.step_scale,
            seed: subseed(cfg.seed, "evo"),
        };
        let t = Instant::now();
        let outcome = {
            let mut entries = Vec::new();
            for ((&m, model), bank) in cfg
                .aux_mods
                .iter()
                .zip(aux_models.iter())
                .zip(aux_banks.iter())
            {
                let samples: Vec<(&ImageTensor, u32)> = ds
                    .select(m, Split::Train)
                    .iter()
                    .map(|im| (&im.image, im.identity))
                    .collect();
                let gallery: Vec<(&ImageTensor, u32)> = ds
                    .select(m, Split::Gallery)
                    .iter()
                    .map(|im| (&im.image, im.identity))
                    .collect();
                entries.push(ModelEvalContext::new(model, bank, &samples, &gallery)?);
            }
            evolve(&delta, &EvalContext::new(entries)?, &evo_cfg)?
        };
        timings.push(PhaseTiming {
            phase: "evolve".into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        outcome.best.save(cfg.k, cfg.shape(), &eta_path(out))?;
        write_trace_csv(&outcome.trace, &trace_path(out))?;
        evolve_outcome = Some(outcome);
    }

    // ---- evaluation. The held-out checkpoint is loaded only here, after
    // both optimization layers have finished.
    let t = Instant::now();
    let mut reported: Vec<u16> = cfg.source_mods.clone();
    if let Some(h) = cfg.held_out {
        reported.push(h);
    }
    let mut eval_models: BTreeMap<u16, ModalityModel> = BTreeMap::new();
    for (slot, &m) in cfg.source_mods.iter().enumerate() {
        // Reuse the already-loaded source models; held-out loads fresh.
        eval_models.insert(m, source_models[slot].clone());
    }
    if let Some(h) = cfg.held_out {
        eval_models.insert(h, load_model_checkpoint(out, h)?);
    }

    let phases: Vec<&str> = match mode {
        AttackMode::GradOnly => vec!["clean", "uap"],
        AttackMode::DualLayer => vec!["clean", "uap", "uap+eta"],
    };
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut uap_rates: BTreeMap<u16, f64> = BTreeMap::new();
    for phase in &phases {
        let mut phase_rows = Vec::new();
        for &m in &reported {
            let model = &eval_models[&m];
            let eval = match *phase {
                "clean" => evaluate_modality(&ds, model, m, |img| img.clone())?,
                "uap" => evaluate_modality(&ds, model, m, |img| delta.apply(img))?,
                _ => {
                    let eta = &evolve_outcome.as_ref().expect("dual-layer").best;
                    evaluate_modality(&ds, model, m, |img| {
                        crate::evo::apply_eta(img, &delta, eta).expect("shapes validated")
                    })?
                }
            };
            if *phase == "uap" {
                uap_rates.insert(m, eval.success_rate);
            }
            let alpha = if *phase == "uap+eta" {
                complementarity(uap_rates[&m], eval.success_rate)
            } else {
                None
            };
            phase_rows.push(MetricRow {
                run_id: run_id.clone(),
                phase: (*phase).into(),
                modality: m,
                rank1: eval.rank1,
                rank5: eval.rank5,
                rank10: eval.rank10,
                map: eval.map,
                success_rate: eval.success_rate,
                alpha,
                fitness: 0.0,
            });
        }
        // Fitness diagnostic: uniform-weight mean success across the phase's
        // reported modalities (lambda = 0 in reports).
        let mean_success: f64 =
            phase_rows.iter().map(|r| r.success_rate).sum::<f64>() / phase_rows.len() as f64;
        for r in &mut phase_rows {
            r.fitness = mean_success;
        }
        rows.extend(phase_rows);
    }
    timings.push(PhaseTiming {
        phase: "evaluate".into(),
        seconds: t.elapsed().as_secs_f64(),
    });

    write_metrics_csv(&rows, &metrics_path(out))?;
    write_config_echo(cfg, out)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("dataset".into(), dataset_path(out).display().to_string());
    artifacts.insert("delta".into(), delta_path(out).display().to_string());
    artifacts.insert("metrics".into(), metrics_path(out).display().to_string());
    if evolve_outcome.is_some() {
        artifacts.insert("eta".into(), eta_path(out).display().to_string());
        artifacts.insert("trace".into(), trace_path(out).display().to_string());
    }

    let (archive_baselines, archive_best) = match &evolve_outcome {
        Some(o) => (
            o.trace.baseline_rates.clone(),
            o.trace
                .generations
                .last()
                .map(|g| g.archive_best.clone())
                .unwrap_or_default(),
        ),
        None => (Vec::new(), Vec::new()),
    };

    let config_map: BTreeMap<String, String> = cfg
        .echo()
        .lines()
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();

    let report = RunReport {
        run_id,
        mode: mode.name().into(),
        config: config_map,
        phase_timings: timings,
        metrics: rows,
        archive_baselines,
        archive_best,
        artifacts,
    };
    write_summary_json(&report, &summary_path(out))?;
    Ok(report)
}

/// In-memory assets for one ablation seed: dataset, trained models for the
/// needed modalities, and the learned dense perturbation.
struct SeedAssets {
    ds: ReidDataset,
    models: BTreeMap<u16, ModalityModel>,
    banks: BTreeMap<u16, CentroidBank>,
    delta: UniversalPerturbation,
}

fn build_seed_assets(cfg: &ExperimentConfig) -> Result<SeedAssets> {
    let ds = build_dataset(cfg)?;
    let mut models = BTreeMap::new();
    let mut banks = BTreeMap::new();
    let needed: Vec<u16> = cfg
        .source_mods
        .iter()
        .chain(cfg.aux_mods.iter())
        .copied()
        .collect();
    for &m in &needed {
        let model = train_modality(cfg, &ds, m)?;
        let bank = bank_for(cfg, &ds, &model, m)?;
        models.insert(m, model);
        banks.insert(m, bank);
    }
    let mut attack_samples: Vec<(&ImageTensor, usize)> = Vec::new();
    for (slot, &m) in cfg.source_mods.iter().enumerate() {
        for im in ds.select(m, Split::Train) {
            attack_samples.push((&im.image, slot));
        }
    }
    let ctx = AttackContext::new(
        cfg.source_mods.iter().map(|m| &models[m]).collect(),
        cfg.source_mods.iter().map(|m| &banks[m]).collect(),
        &attack_samples,
    )?;
    let uap_cfg = UapConfig {
        epochs: cfg.uap_epochs,
        batch_size: cfg.uap_batch,
        epsilon: cfg.epsilon,
        rho: cfg.rho,
        beta: cfg.beta,
        alpha: cfg.resolved_alpha(),
        seed: subseed(cfg.seed, "uap"),
    };
    let (delta, _) = learn_uap(&ctx, &uap_cfg)?;
    // The dataset borrows end here; rebuild owned assets.
    drop(ctx);
    Ok(SeedAssets {
        ds,
        models,
        banks,
        delta,
    })
}

/// `ablate`: run the evolutionary layer across the configured grid, one row
/// per cell with the cell's mean auxiliary success rate and the evolve-phase
/// wall-clock. Dataset, models, and the dense perturbation are rebuilt once
/// per seed and shared across cells.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Vec<AblateRow>)> {
    cfg.validate()?;
    if cfg.aux_mods.is_empty() {
        return Err(Error::InvalidConfig(
            "ablate requires at least one auxiliary modality".into(),
        ));
    }
    let one_or = |axis: &[usize], fallback: usize| -> Vec<usize> {
        if axis.is_empty() {
            vec![fallback]
        } else {
            axis.to_vec()
        }
    };
    let one_or_f = |axis: &[f64], fallback: f64| -> Vec<f64> {
        if axis.is_empty() {
            vec![fallback]
        } else {
            axis.to_vec()
        }
    };
    let ks = one_or(&cfg.ablate_k, cfg.k);
    let n_models_axis = one_or(&cfg.ablate_n_models, cfg.aux_mods.len());
    let pcs = one_or_f(&cfg.ablate_p_c, cfg.p_c);
    let pms = one_or_f(&cfg.ablate_p_m, cfg.p_m);
    let pops = one_or(&cfg.ablate_pop_size, cfg.pop_size);
    let gens_axis = one_or(&cfg.ablate_generations, cfg.generations);
    let seeds = if cfg.ablate_seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate_seeds.clone()
    };

    let mut rows: Vec<AblateRow> = Vec::new();
    for &seed in &seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = seed;
        let assets = build_seed_assets(&seed_cfg)?;
        for &k in &ks {
            for &n_models in &n_models_axis {
                for &p_c in &pcs {
                    for &p_m in &pms {
                        for &pop_size in &pops {
                            for &generations in &gens_axis {
                                let aux = &cfg.aux_mods[..n_models];
                                let mut entries = Vec::new();
                                for &m in aux {
                                    let samples: Vec<(&ImageTensor, u32)> = assets
                                        .ds
                                        .select(m, Split::Train)
                                        .iter()
                                        .map(|im| (&im.image, im.identity))
                                        .collect();
                                    let gallery: Vec<(&ImageTensor, u32)> = assets
                                        .ds
                                        .select(m, Split::Gallery)
                                        .iter()
                                        .map(|im| (&im.image, im.identity))
                                        .collect();
                                    entries.push(ModelEvalContext::new(
                                        &assets.models[&m],
                                        &assets.banks[&m],
                                        &samples,
                                        &gallery,
                                    )?);
                                }
                                // Same stream as cmd_attack's evolve, so a
                                // one-cell grid at the base parameters
                                // reproduces the attack run exactly.
                                let evo_cfg = EvoConfig {
                                    pop_size,
                                    generations,
                                    k,
                                    p_c,
                                    p_m,
                                    step_scale: cfg.step_scale,
                                    seed: subseed(seed, "evo"),
                                };
                                let t = Instant::now();
                                let outcome =
                                    evolve(&assets.delta, &EvalContext::new(entries)?, &evo_cfg)?;
                                let wall = t.elapsed().as_secs_f64();
                                let success_rate = outcome.best_rates.iter().sum::<f64>()
                                    / outcome.best_rates.len() as f64;
                                rows.push(AblateRow {
                                    seed,
                                    k,
                                    n_models,
                                    p_c,
                                    p_m,
                                    pop_size,
                                    generations,
                                    success_rate,
                                    wall_clock_s: wall,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    let path = ablate_path(out);
    write_ablate_csv(&rows, &path)?;
    write_config_echo(cfg, out)?;
    Ok((path, rows))
}

/// `report`: render the stored run summary.
pub fn cmd_report(out: &Path) -> Result<String> {
    let path = summary_path(out);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(path))
        }
        Err(e) => return Err(e.into()),
    };
    let report: RunReport = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path,
        offset: 0,
        what: format!("invalid summary JSON: {e}"),
    })?;
    Ok(crate::report::render_summary(&report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evo::{evaluate, SparseIndividual};

    /// Small, fast configuration for driver tests.
    fn small_cfg(seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.n_identities = 6;
        cfg.images_per_identity = 8;
        cfg.height = 10;
        cfg.width = 6;
        cfg.d_hidden = 24;
        cfg.d_feat = 6;
        cfg.train_epochs = 15;
        cfg.uap_epochs = 8;
        cfg.generations = 10;
        cfg.k = 24;
        cfg.step_scale = cfg.epsilon;
        cfg
    }

    #[test]
    fn generated_file_carries_all_modality_tags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(3);
        cmd_gen_data(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&dataset_path(dir.path())).unwrap();
        let mut seen: Vec<u16> = ds.images.iter().map(|im| im.modality).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn train_checkpoints_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(4);
        cmd_gen_data(&cfg, dir.path()).unwrap();
        let out = cmd_train(&cfg, dir.path()).unwrap();
        let ds = load_run_dataset(&cfg, dir.path()).unwrap();
        for (m, path) in out.checkpoints.iter().enumerate() {
            let loaded = ModalityModel::load(path).unwrap();
            let retrained = train_modality(&cfg, &ds, m as u16).unwrap();
            assert_eq!(loaded, retrained);
        }
    }

    #[test]
    fn attack_requires_existing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(5);
        match cmd_attack(&cfg, dir.path(), AttackMode::GradOnly) {
            Err(Error::MissingArtifact(p)) => {
                assert!(p.ends_with("dataset.mmreid"));
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
        cmd_gen_data(&cfg, dir.path()).unwrap();
        match cmd_attack(&cfg, dir.path(), AttackMode::GradOnly) {
            Err(Error::MissingArtifact(p)) => {
                assert!(p.to_string_lossy().contains("modality_0"));
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn one_cell_grid_matches_attack_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(6);
        cmd_gen_data(&cfg, dir.path()).unwrap();
        cmd_train(&cfg, dir.path()).unwrap();
        cmd_attack(&cfg, dir.path(), AttackMode::DualLayer).unwrap();

        let (_, rows) = cmd_ablate(&cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 1);

        // Recompute the attack run's eta rates on the same evaluation
        // contexts the ablation used.
        let assets = build_seed_assets(&cfg).unwrap();
        let (eta, _) = SparseIndividual::load(&eta_path(dir.path()), cfg.shape()).unwrap();
        let mut entries = Vec::new();
        for &m in &cfg.aux_mods {
            let samples: Vec<(&ImageTensor, u32)> = assets
                .ds
                .select(m, Split::Train)
                .iter()
                .map(|im| (&im.image, im.identity))
                .collect();
            let gallery: Vec<(&ImageTensor, u32)> = assets
                .ds
                .select(m, Split::Gallery)
                .iter()
                .map(|im| (&im.image, im.identity))
                .collect();
            entries.push(
                ModelEvalContext::new(&assets.models[&m], &assets.banks[&m], &samples, &gallery)
                    .unwrap(),
            );
        }
        let ctx = EvalContext::new(entries).unwrap();
        let (_, rates) = evaluate(&eta, &assets.delta, &ctx).unwrap();
        let want = rates.iter().sum::<f64>() / rates.len() as f64;
        assert_eq!(rows[0].success_rate, want);
    }

    #[test]
    fn attack_report_is_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(8);
        // Exercise the literal unit-scale ternary perturbation here.
        cfg.step_scale = 1.0;
        for dir in [dir_a.path(), dir_b.path()] {
            cmd_gen_data(&cfg, dir).unwrap();
            cmd_train(&cfg, dir).unwrap();
            cmd_attack(&cfg, dir, AttackMode::DualLayer).unwrap();
        }
        let a = std::fs::read(metrics_path(dir_a.path())).unwrap();
        let b = std::fs::read(metrics_path(dir_b.path())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_renders_run_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(9);
        cmd_gen_data(&cfg, dir.path()).unwrap();
        cmd_train(&cfg, dir.path()).unwrap();
        cmd_attack(&cfg, dir.path(), AttackMode::GradOnly).unwrap();
        let text = cmd_report(dir.path()).unwrap();
        assert!(text.contains("attack-grad-only-seed9"));
        assert!(text.contains("clean"));
        assert!(text.contains("uap"));
    }
}
