//! Seeded class-clustered corpora on the unit sphere.
//!
//! Per class: a centroid drawn as a normalized standard-normal vector, a text
//! embedding `normalize(centroid + sigma_text · noise)`, and items
//! `normalize(centroid + sigma_image · noise)`. Draws come from a single
//! ChaCha8 stream in a fixed order: all centroids, then all text embeddings,
//! then items class by class (train, val, test).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestItem, Split};
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, Modality, DEGENERATE_NORM};

/// Name of the pseudo-random generator, echoed in summaries.
pub const GENERATOR: &str = "ChaCha8Rng";

const MAX_RETRIES: usize = 100;

pub const IMAGES_FILE: &str = "images.cemb";
pub const TEXTS_FILE: &str = "texts.cemb";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub sigma_image: f64,
    pub sigma_text: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            train_per_class: 50,
            val_per_class: 10,
            test_per_class: 10,
            dim: 64,
            sigma_image: 0.1,
            sigma_text: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        for (name, s) in [("sigma_image", self.sigma_image), ("sigma_text", self.sigma_text)] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn class_id(&self, c: usize) -> String {
        format!("class-{c:04}")
    }

    pub fn item_id(&self, c: usize, split: Split, i: usize) -> String {
        format!("img-{c:04}-{split}-{i:04}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub images: EmbeddingStore,
    pub texts: EmbeddingStore,
    pub manifest: DatasetManifest,
}

impl SynthCorpus {
    /// Write `images.cemb`, `texts.cemb` and `manifest.jsonl` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.images.save(dir.join(IMAGES_FILE))?;
        self.texts.save(dir.join(TEXTS_FILE))?;
        self.manifest.save(dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > DEGENERATE_NORM).then(|| v.iter().map(|x| x / norm).collect())
}

/// `normalize(center + sigma · noise)`, redrawing the noise on a degenerate sum.
fn perturb(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64, what: &str) -> Result<Vec<f32>> {
    for _ in 0..MAX_RETRIES {
        let noise = gaussian(rng, center.len());
        let v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + sigma * n).collect();
        if let Some(u) = unit(&v) {
            return Ok(u.into_iter().map(|x| x as f32).collect());
        }
    }
    Err(Error::DegenerateVector(format!("{what}: {MAX_RETRIES} degenerate draws")))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut centroids = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let centroid = (0..MAX_RETRIES)
            .find_map(|_| unit(&gaussian(&mut rng, cfg.dim)))
            .ok_or_else(|| Error::DegenerateVector(format!("centroid of class {c}")))?;
        centroids.push(centroid);
    }

    let mut texts = EmbeddingStore::new(cfg.dim, Modality::Text)?;
    for (c, centroid) in centroids.iter().enumerate() {
        let id = cfg.class_id(c);
        let v = perturb(&mut rng, centroid, cfg.sigma_text, &id)?;
        texts.push(id, &v)?;
    }

    let mut images = EmbeddingStore::new(cfg.dim, Modality::Image)?;
    let mut items = Vec::new();
    let per_split = [
        (Split::Train, cfg.train_per_class),
        (Split::Val, cfg.val_per_class),
        (Split::Test, cfg.test_per_class),
    ];
    for (c, centroid) in centroids.iter().enumerate() {
        for (split, count) in per_split {
            for i in 0..count {
                let id = cfg.item_id(c, split, i);
                let v = perturb(&mut rng, centroid, cfg.sigma_image, &id)?;
                images.push(id.clone(), &v)?;
                items.push(ManifestItem {
                    id,
                    class_id: cfg.class_id(c),
                    split,
                });
            }
        }
    }
    images.mark_normalized()?;
    texts.mark_normalized()?;
    let manifest = DatasetManifest::from_items(items)?;
    Ok(SynthCorpus {
        images,
        texts,
        manifest,
    })
}
