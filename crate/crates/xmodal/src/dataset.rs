//! Synthetic multi-identity, multi-modality retrieval benchmark.
//!
//! Identities are low-frequency random cosine fields so that small embedding
//! models can separate them; modalities are deterministic pixel transforms
//! (channel mixing, grayscale collapse, intensity inversion) emulating
//! heterogeneous sensors.

use std::path::Path;

use rand::Rng;

use crate::binio::{create_file, open_artifact, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ImageTensor;

pub const DATASET_MAGIC: &[u8] = b"MMREID01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// Kind of pixel transform a modality applies to the base images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ModalityKind {
    IdentityPass,
    ChannelMix,
    GrayscaleCollapse,
    IntensityInvert,
}

impl ModalityKind {
    fn to_byte(self) -> u8 {
        match self {
            ModalityKind::IdentityPass => 0,
            ModalityKind::ChannelMix => 1,
            ModalityKind::GrayscaleCollapse => 2,
            ModalityKind::IntensityInvert => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ModalityKind::IdentityPass),
            1 => Some(ModalityKind::ChannelMix),
            2 => Some(ModalityKind::GrayscaleCollapse),
            3 => Some(ModalityKind::IntensityInvert),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity-pass" => Ok(ModalityKind::IdentityPass),
            "channel-mix" => Ok(ModalityKind::ChannelMix),
            "grayscale-collapse" => Ok(ModalityKind::GrayscaleCollapse),
            "intensity-invert" => Ok(ModalityKind::IntensityInvert),
            other => Err(Error::InvalidConfig(format!(
                "unknown modality kind '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::IdentityPass => "identity-pass",
            ModalityKind::ChannelMix => "channel-mix",
            ModalityKind::GrayscaleCollapse => "grayscale-collapse",
            ModalityKind::IntensityInvert => "intensity-invert",
        }
    }
}

/// Per-modality transform specification. The 3x3 mixing matrix is only
/// meaningful for `ChannelMix`; it is drawn once per modality from `seed`
/// and applied to every image, keeping each modality internally consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub mix_matrix: [[f64; 3]; 3],
    pub seed: u64,
}

impl ModalitySpec {
    pub fn new(kind: ModalityKind, seed: u64) -> Self {
        let mix_matrix = match kind {
            ModalityKind::ChannelMix => random_row_stochastic(seed),
            _ => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        Self {
            kind,
            mix_matrix,
            seed,
        }
    }

    /// Build from explicit fields (used by the loader and by tests that pin
    /// a specific mixing matrix).
    pub fn with_matrix(kind: ModalityKind, mix_matrix: [[f64; 3]; 3], seed: u64) -> Result<Self> {
        for row in &mix_matrix {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "mix matrix row sums to {s}, expected 1"
                )));
            }
        }
        Ok(Self {
            kind,
            mix_matrix,
            seed,
        })
    }
}

fn random_row_stochastic(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = rng::stream_from_seed(seed);
    let mut m = [[0.0; 3]; 3];
    for row in &mut m {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // Offset away from zero so every output channel keeps some signal
            // from every input channel.
            *v = 0.05 + rng.gen::<f64>();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    m
}

/// One benchmark image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidImage {
    pub image: ImageTensor,
    pub identity: u32,
    pub modality: u16,
    pub split: Split,
}

/// The full benchmark: images across modalities plus the modality table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidDataset {
    pub shape: (usize, usize, usize),
    pub modalities: Vec<ModalitySpec>,
    pub images: Vec<ReidImage>,
}

impl ReidDataset {
    pub fn n_identities(&self) -> usize {
        let mut max_id = 0;
        for im in &self.images {
            max_id = max_id.max(im.identity);
        }
        if self.images.is_empty() {
            0
        } else {
            max_id as usize + 1
        }
    }

    /// Images of one modality and split, in file order.
    pub fn select(&self, modality: u16, split: Split) -> Vec<&ReidImage> {
        self.images
            .iter()
            .filter(|im| im.modality == modality && im.split == split)
            .collect()
    }
}

/// Generate the single-modality base dataset: one smooth random prototype per
/// identity, `images_per_identity` noisy copies each, split 60/20/20 into
/// train/query/gallery per identity.
pub fn generate_identities(
    n_identities: usize,
    images_per_identity: usize,
    shape: (usize, usize, usize),
    noise_sigma: f64,
    seed: u64,
) -> Result<ReidDataset> {
    let (h, w, c) = shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate image shape {shape:?}"
        )));
    }
    if n_identities < 2 {
        return Err(Error::InsufficientData {
            context: "generate_identities identities",
            needed: 2,
            got: n_identities,
        });
    }
    if images_per_identity < 2 {
        return Err(Error::InsufficientData {
            context: "generate_identities images per identity",
            needed: 2,
            got: images_per_identity,
        });
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise_sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }

    let n_query = ((images_per_identity as f64 * 0.2).round() as usize).max(1);
    let n_gallery = n_query;
    if n_query + n_gallery > images_per_identity {
        return Err(Error::InvalidConfig(format!(
            "images_per_identity {images_per_identity} too small for query/gallery splits"
        )));
    }
    let n_train = images_per_identity - n_query - n_gallery;

    let mut rng = rng::stream_from_seed(seed);
    let mut images = Vec::with_capacity(n_identities * images_per_identity);
    for id in 0..n_identities {
        let prototype = random_prototype(shape, &mut rng);
        for idx in 0..images_per_identity {
            let mut img = prototype.clone();
            if noise_sigma > 0.0 {
                for v in img.data_mut() {
                    *v += noise_sigma * rng::gaussian(&mut rng);
                }
            }
            img.clamp_in_place(0.0, 255.0);
            let split = if idx < n_train {
                Split::Train
            } else if idx < n_train + n_query {
                Split::Query
            } else {
                Split::Gallery
            };
            images.push(ReidImage {
                image: img,
                identity: id as u32,
                modality: 0,
                split,
            });
        }
    }

    Ok(ReidDataset {
        shape,
        modalities: vec![ModalitySpec::new(ModalityKind::IdentityPass, seed)],
        images,
    })
}

/// Smooth prototype: mid-gray plus random 2-D cosine bumps, part shared
/// across channels and part channel-specific. The shared component keeps
/// identities separable under channel-collapsing modalities; the amplitudes
/// are sized so an L-infinity budget of a few intensity levels is meaningful
/// against the identity signal.
fn random_prototype<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> ImageTensor {
    let (h, w, c) = shape;
    let mut img = ImageTensor::zeros(shape);
    let draw_bumps = |rng: &mut R, n: usize| -> Vec<(f64, f64, f64, f64)> {
        (0..n)
            .map(|_| {
                let amp = 3.0 + 4.0 * rng.gen::<f64>();
                let fy = 0.3 + 1.9 * rng.gen::<f64>();
                let fx = 0.3 + 1.9 * rng.gen::<f64>();
                let phase = std::f64::consts::TAU * rng.gen::<f64>();
                (amp, fy, fx, phase)
            })
            .collect()
    };
    let shared = draw_bumps(rng, 1);
    let field = |bumps: &[(f64, f64, f64, f64)], y: usize, x: usize| -> f64 {
        bumps
            .iter()
            .map(|&(amp, fy, fx, phase)| {
                let arg = std::f64::consts::TAU
                    * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                    + phase;
                amp * arg.cos()
            })
            .sum()
    };
    for ch in 0..c {
        let own = draw_bumps(rng, 3);
        for y in 0..h {
            for x in 0..w {
                let v = 127.5 + field(&shared, y, x) + field(&own, y, x);
                img.set(y, x, ch, v.clamp(0.0, 255.0));
            }
        }
    }
    img
}

/// Apply a modality transform to one image.
pub fn apply_modality(img: &ImageTensor, spec: &ModalitySpec) -> Result<ImageTensor> {
    let (h, w, c) = img.shape();
    match spec.kind {
        ModalityKind::IdentityPass => Ok(img.clone()),
        ModalityKind::IntensityInvert => {
            let data = img.data().iter().map(|v| 255.0 - v).collect();
            ImageTensor::from_data(img.shape(), data)
        }
        ModalityKind::GrayscaleCollapse => {
            let mut out = ImageTensor::zeros(img.shape());
            for y in 0..h {
                for x in 0..w {
                    let mut mean = 0.0;
                    for ch in 0..c {
                        mean += img.get(y, x, ch);
                    }
                    mean /= c as f64;
                    for ch in 0..c {
                        out.set(y, x, ch, mean);
                    }
                }
            }
            Ok(out)
        }
        ModalityKind::ChannelMix => {
            if c != 3 {
                return Err(Error::DimensionMismatch {
                    context: "apply_modality channel-mix",
                    expected: 3,
                    got: c,
                });
            }
            let mut out = ImageTensor::zeros(img.shape());
            for y in 0..h {
                for x in 0..w {
                    for co in 0..3 {
                        let mut v = 0.0;
                        for ci in 0..3 {
                            v += spec.mix_matrix[co][ci] * img.get(y, x, ci);
                        }
                        out.set(y, x, co, v.clamp(0.0, 255.0));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Expand a single-modality base dataset into one copy of every image per
/// modality spec, transformed and tagged; splits are preserved.
pub fn build_multimodal(base: &ReidDataset, specs: &[ModalitySpec]) -> Result<ReidDataset> {
    if specs.is_empty() {
        return Err(Error::EmptyInput("build_multimodal specs"));
    }
    if base.modalities.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "build_multimodal expects a single-modality base, got {} modalities",
            base.modalities.len()
        )));
    }
    let mut images = Vec::with_capacity(base.images.len() * specs.len());
    for (mid, spec) in specs.iter().enumerate() {
        for im in &base.images {
            images.push(ReidImage {
                image: apply_modality(&im.image, spec)?,
                identity: im.identity,
                modality: mid as u16,
                split: im.split,
            });
        }
    }
    Ok(ReidDataset {
        shape: base.shape,
        modalities: specs.to_vec(),
        images,
    })
}

pub fn save_dataset(ds: &ReidDataset, path: &Path) -> Result<()> {
    let (h, w, c) = ds.shape;
    let mut out = Writer::new(create_file(path)?);
    out.bytes(DATASET_MAGIC)?;
    out.u32(h as u32)?;
    out.u32(w as u32)?;
    out.u32(c as u32)?;
    out.u32(ds.images.len() as u32)?;
    out.u32(ds.modalities.len() as u32)?;
    for spec in &ds.modalities {
        out.u8(spec.kind.to_byte())?;
        for row in &spec.mix_matrix {
            out.f64_slice(row)?;
        }
        out.u64(spec.seed)?;
    }
    for im in &ds.images {
        out.u32(im.identity)?;
        out.u16(im.modality)?;
        out.u8(im.split.to_byte())?;
        out.f64_slice(im.image.data())?;
    }
    out.finish()
}

pub fn load_dataset(path: &Path) -> Result<ReidDataset> {
    let mut r = Reader::new(open_artifact(path)?, path);
    r.magic(DATASET_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(r.malformed(format!("degenerate shape ({h}, {w}, {c})")));
    }
    let n_images = r.u32("image count")? as usize;
    let n_modalities = r.u32("modality count")? as usize;
    let mut modalities = Vec::with_capacity(n_modalities);
    for i in 0..n_modalities {
        let kind = ModalityKind::from_byte(r.u8("modality kind")?)
            .ok_or_else(|| r.malformed(format!("unknown modality kind byte in spec {i}")))?;
        let flat = r.f64_vec(9, "mix matrix")?;
        let mut mix = [[0.0; 3]; 3];
        for row in 0..3 {
            mix[row].copy_from_slice(&flat[row * 3..row * 3 + 3]);
        }
        let seed = r.u64("modality seed")?;
        modalities.push(
            ModalitySpec::with_matrix(kind, mix, seed)
                .map_err(|e| r.malformed(format!("invalid modality spec {i}: {e}")))?,
        );
    }
    let px = h * w * c;
    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let identity = r.u32("identity id")?;
        let modality = r.u16("modality id")?;
        if modality as usize >= n_modalities {
            return Err(r.malformed(format!("image {i} references modality {modality}")));
        }
        let split = Split::from_byte(r.u8("split tag")?)
            .ok_or_else(|| r.malformed(format!("bad split tag on image {i}")))?;
        let data = r.f64_vec(px, "pixels")?;
        let image = ImageTensor::from_data((h, w, c), data)
            .map_err(|e| r.malformed(format!("image {i}: {e}")))?;
        images.push(ReidImage {
            image,
            identity,
            modality,
            split,
        });
    }
    r.expect_eof()?;
    Ok(ReidDataset {
        shape: (h, w, c),
        modalities,
        images,
    })
}
