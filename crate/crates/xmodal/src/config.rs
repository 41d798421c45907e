//! Experiment configuration: a plain-text `key=value` file (one key per
//! line, `#` comments), resolved against defaults and echoed back in a
//! canonical, reparseable form.

use std::path::Path;

use crate::dataset::ModalityKind;
use crate::error::{Error, Result};
use crate::rng::subseed;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConfig {
    pub kind: ModalityKind,
    /// Explicit per-modality seed; resolved from the master seed when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // dataset
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub modalities: Vec<ModalityConfig>,
    // embedder
    pub d_hidden: usize,
    pub d_feat: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    // dense perturbation layer
    pub epsilon: f64,
    pub rho: f64,
    pub beta: f64,
    pub alpha: Option<f64>,
    pub uap_epochs: usize,
    pub uap_batch: usize,
    // sparse evolutionary layer
    pub pop_size: usize,
    pub generations: usize,
    pub k: usize,
    pub p_c: f64,
    pub p_m: f64,
    pub step_scale: f64,
    pub n_clusters: Option<usize>,
    pub lambda_reg: f64,
    // experiment roles
    pub seed: u64,
    pub source_mods: Vec<u16>,
    pub aux_mods: Vec<u16>,
    pub held_out: Option<u16>,
    // ablation grid (empty axis = use the single configured value)
    pub ablate_k: Vec<usize>,
    pub ablate_n_models: Vec<usize>,
    pub ablate_p_c: Vec<f64>,
    pub ablate_p_m: Vec<f64>,
    pub ablate_pop_size: Vec<usize>,
    pub ablate_generations: Vec<usize>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_identities: 16,
            images_per_identity: 16,
            height: 16,
            width: 8,
            channels: 3,
            noise_sigma: 4.0,
            modalities: vec![
                ModalityConfig {
                    kind: ModalityKind::IdentityPass,
                    seed: None,
                },
                ModalityConfig {
                    kind: ModalityKind::ChannelMix,
                    seed: None,
                },
                ModalityConfig {
                    kind: ModalityKind::GrayscaleCollapse,
                    seed: None,
                },
                ModalityConfig {
                    kind: ModalityKind::IntensityInvert,
                    seed: None,
                },
            ],
            d_hidden: 64,
            d_feat: 8,
            train_epochs: 40,
            train_lr: 0.1,
            train_batch: 16,
            epsilon: 8.0,
            rho: 0.5,
            beta: 0.9,
            alpha: None,
            uap_epochs: 60,
            uap_batch: 16,
            pop_size: 2,
            generations: 150,
            k: 64,
            p_c: 0.8,
            p_m: 0.1,
            step_scale: 1.0,
            n_clusters: None,
            lambda_reg: 1e-3,
            seed: 7,
            source_mods: vec![0],
            aux_mods: vec![1, 2],
            held_out: Some(3),
            ablate_k: Vec::new(),
            ablate_n_models: Vec::new(),
            ablate_p_c: Vec::new(),
            ablate_p_m: Vec::new(),
            ablate_pop_size: Vec::new(),
            ablate_generations: Vec::new(),
            ablate_seeds: Vec::new(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 10.0)
    }

    pub fn resolved_n_clusters(&self) -> usize {
        self.n_clusters.unwrap_or(self.n_identities)
    }

    pub fn resolved_modality_seed(&self, index: usize) -> u64 {
        self.modalities[index]
            .seed
            .unwrap_or_else(|| subseed(self.seed, &format!("modality{index}")))
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| invalid(format!("bad value '{value}' for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| invalid(format!("bad list entry '{s}' for {key}")))
                })
                .collect()
        }
        match key {
            "n_identities" => self.n_identities = num(key, value)?,
            "images_per_identity" => self.images_per_identity = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "modalities" => {
                let mut mods = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    let (kind_str, seed) = match part.split_once(':') {
                        Some((k, s)) => (k, Some(num::<u64>(key, s)?)),
                        None => (part, None),
                    };
                    mods.push(ModalityConfig {
                        kind: ModalityKind::parse(kind_str)?,
                        seed,
                    });
                }
                self.modalities = mods;
            }
            "d_hidden" => self.d_hidden = num(key, value)?,
            "d_feat" => self.d_feat = num(key, value)?,
            "train_epochs" => self.train_epochs = num(key, value)?,
            "train_lr" => self.train_lr = num(key, value)?,
            "train_batch" => self.train_batch = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "alpha" => self.alpha = Some(num(key, value)?),
            "uap_epochs" => self.uap_epochs = num(key, value)?,
            "uap_batch" => self.uap_batch = num(key, value)?,
            "pop_size" => self.pop_size = num(key, value)?,
            "generations" => self.generations = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "p_c" => self.p_c = num(key, value)?,
            "p_m" => self.p_m = num(key, value)?,
            "step_scale" => self.step_scale = num(key, value)?,
            "n_clusters" => self.n_clusters = Some(num(key, value)?),
            "lambda_reg" => self.lambda_reg = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "source_mods" => self.source_mods = list(key, value)?,
            "aux_mods" => self.aux_mods = list(key, value)?,
            "held_out" => {
                self.held_out = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "ablate_k" => self.ablate_k = list(key, value)?,
            "ablate_n_models" => self.ablate_n_models = list(key, value)?,
            "ablate_p_c" => self.ablate_p_c = list(key, value)?,
            "ablate_p_m" => self.ablate_p_m = list(key, value)?,
            "ablate_pop_size" => self.ablate_pop_size = list(key, value)?,
            "ablate_generations" => self.ablate_generations = list(key, value)?,
            "ablate_seeds" => self.ablate_seeds = list(key, value)?,
            other => return Err(invalid(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid("image shape dimensions must be positive"));
        }
        if self.n_identities < 2 {
            return Err(invalid("n_identities must be >= 2"));
        }
        if self.images_per_identity < 2 {
            return Err(invalid("images_per_identity must be >= 2"));
        }
        if self.modalities.is_empty() {
            return Err(invalid("at least one modality required"));
        }
        if self.channels != 3
            && self
                .modalities
                .iter()
                .any(|m| m.kind == ModalityKind::ChannelMix)
        {
            return Err(invalid("channel-mix modalities require 3 channels"));
        }
        let n_mods = self.modalities.len() as u16;
        for &m in self.source_mods.iter().chain(self.aux_mods.iter()) {
            if m >= n_mods {
                return Err(invalid(format!("modality index {m} out of range")));
            }
        }
        if self.source_mods.is_empty() {
            return Err(invalid("source_mods must not be empty"));
        }
        if let Some(h) = self.held_out {
            if h >= n_mods {
                return Err(invalid(format!("held_out index {h} out of range")));
            }
            if self.source_mods.contains(&h) || self.aux_mods.contains(&h) {
                return Err(invalid(
                    "held_out modality must be excluded from source and aux sets",
                ));
            }
        }
        for &a in &self.aux_mods {
            if self.source_mods.contains(&a) {
                return Err(invalid(format!("modality {a} is both source and aux")));
            }
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(invalid("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(invalid("beta must lie in [0, 1)"));
        }
        if self.rho < 0.0 {
            return Err(invalid("rho must be >= 0"));
        }
        if let Some(a) = self.alpha {
            if a <= 0.0 || !a.is_finite() {
                return Err(invalid("alpha must be positive"));
            }
        }
        if self.pop_size < 2 {
            return Err(invalid("pop_size must be >= 2"));
        }
        if self.generations < 1 {
            return Err(invalid("generations must be >= 1"));
        }
        if self.k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        for (name, p) in [("p_c", self.p_c), ("p_m", self.p_m)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.step_scale <= 0.0 || !self.step_scale.is_finite() {
            return Err(invalid("step_scale must be positive"));
        }
        if self.lambda_reg < 0.0 || !self.lambda_reg.is_finite() {
            return Err(invalid("lambda_reg must be >= 0"));
        }
        if self.train_batch == 0 || self.uap_batch == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        if let Some(nc) = self.n_clusters {
            if nc < 2 {
                return Err(invalid("n_clusters must be >= 2"));
            }
        }
        for &n in &self.ablate_n_models {
            if n == 0 || n > self.aux_mods.len() {
                return Err(invalid(format!(
                    "ablate_n_models entry {n} outside 1..={}",
                    self.aux_mods.len()
                )));
            }
        }
        Ok(())
    }

    /// Canonical echo: every effective value, reparseable, with derived
    /// defaults (alpha, n_clusters, modality seeds) resolved explicitly.
    pub fn echo(&self) -> String {
        let mods: Vec<String> = self
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{}:{}", m.kind.name(), self.resolved_modality_seed(i)))
            .collect();
        let join_u16 = |v: &[u16]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("n_identities", self.n_identities.to_string());
        push("images_per_identity", self.images_per_identity.to_string());
        push("height", self.height.to_string());
        push("width", self.width.to_string());
        push("channels", self.channels.to_string());
        push("noise_sigma", self.noise_sigma.to_string());
        push("modalities", mods.join(","));
        push("d_hidden", self.d_hidden.to_string());
        push("d_feat", self.d_feat.to_string());
        push("train_epochs", self.train_epochs.to_string());
        push("train_lr", self.train_lr.to_string());
        push("train_batch", self.train_batch.to_string());
        push("epsilon", self.epsilon.to_string());
        push("rho", self.rho.to_string());
        push("beta", self.beta.to_string());
        push("alpha", self.resolved_alpha().to_string());
        push("uap_epochs", self.uap_epochs.to_string());
        push("uap_batch", self.uap_batch.to_string());
        push("pop_size", self.pop_size.to_string());
        push("generations", self.generations.to_string());
        push("k", self.k.to_string());
        push("p_c", self.p_c.to_string());
        push("p_m", self.p_m.to_string());
        push("step_scale", self.step_scale.to_string());
        push("n_clusters", self.resolved_n_clusters().to_string());
        push("lambda_reg", self.lambda_reg.to_string());
        push("seed", self.seed.to_string());
        push("source_mods", join_u16(&self.source_mods));
        push("aux_mods", join_u16(&self.aux_mods));
        push(
            "held_out",
            self.held_out
                .map(|h| h.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        if !self.ablate_k.is_empty() {
            push(
                "ablate_k",
                self.ablate_k
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_n_models.is_empty() {
            push(
                "ablate_n_models",
                self.ablate_n_models
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_p_c.is_empty() {
            push(
                "ablate_p_c",
                self.ablate_p_c
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_p_m.is_empty() {
            push(
                "ablate_p_m",
                self.ablate_p_m
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_pop_size.is_empty() {
            push(
                "ablate_pop_size",
                self.ablate_pop_size
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_generations.is_empty() {
            push(
                "ablate_generations",
                self.ablate_generations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.ablate_seeds.is_empty() {
            push(
                "ablate_seeds",
                self.ablate_seeds
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let text = "\
# benchmark size
n_identities=8
seed=42   # master seed
modalities=identity-pass,channel-mix:9
source_mods=0
aux_mods=1
held_out=none
";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.n_identities, 8);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.modalities.len(), 2);
        assert_eq!(cfg.modalities[1].seed, Some(9));
        assert_eq!(cfg.held_out, None);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::parse_str("bogus=1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn missing_equals_is_rejected() {
        assert!(ExperimentConfig::parse_str("n_identities\n").is_err());
    }

    #[test]
    fn held_out_overlap_is_rejected() {
        let text = "held_out=1\naux_mods=1,2\n";
        assert!(ExperimentConfig::parse_str(text).is_err());
    }

    #[test]
    fn out_of_range_modality_is_rejected() {
        let text = "modalities=identity-pass,channel-mix\nsource_mods=0\naux_mods=1\nheld_out=5\n";
        assert!(ExperimentConfig::parse_str(text).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig {
            seed: 99,
            ablate_k: vec![8, 32],
            ..Default::default()
        };
        cfg.validate().unwrap();
        let echo = cfg.echo();
        let reparsed = ExperimentConfig::parse_str(&echo).unwrap();
        // The echo resolves derived defaults, so compare effective values.
        assert_eq!(reparsed.seed, cfg.seed);
        assert_eq!(reparsed.alpha, Some(cfg.resolved_alpha()));
        assert_eq!(reparsed.n_clusters, Some(cfg.resolved_n_clusters()));
        assert_eq!(reparsed.ablate_k, cfg.ablate_k);
        for i in 0..cfg.modalities.len() {
            assert_eq!(
                reparsed.resolved_modality_seed(i),
                cfg.resolved_modality_seed(i)
            );
        }
        // A second echo is a fixed point.
        assert_eq!(
            reparsed.echo(),
            ExperimentConfig::parse_str(&echo).unwrap().echo()
        );
    }

    #[test]
    fn alpha_defaults_to_tenth_of_epsilon() {
        let cfg = ExperimentConfig::parse_str("epsilon=16\n").unwrap();
        assert_eq!(cfg.resolved_alpha(), 1.6);
        let cfg2 = ExperimentConfig::parse_str("epsilon=16\nalpha=0.5\n").unwrap();
        assert_eq!(cfg2.resolved_alpha(), 0.5);
    }

    #[test]
    fn ablate_n_models_bounded_by_aux() {
        let text = "ablate_n_models=3\naux_mods=1,2\n";
        assert!(ExperimentConfig::parse_str(text).is_err());
    }
}
