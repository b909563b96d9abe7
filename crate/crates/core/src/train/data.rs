//! Training images, their proposals, and per-step batch preparation.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::pipeline::augment::{apply_strong, sample_strong, transport_boxes, weak_augment, WeakParams};
use crate::pipeline::image::{load_image, ImageTensor};
use crate::pipeline::scene::{synth_scene, SceneParams};
use crate::proposals::{list_images, sample_boxes, selective_search, ProposalCache, SsParams};
use crate::seed;

#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageTensor,
    pub proposals: BoxSet,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Views and targets of one image at one step.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image_id: String,
    pub teacher_view: ImageTensor,
    pub student_view: ImageTensor,
    /// `K` region boxes in the weak view's frame.
    pub ss_boxes: BoxSet,
}

impl Dataset {
    pub fn synthetic(scenes: usize, scene_seed: u64, size: usize, pool: &rayon::ThreadPool) -> Result<Self> {
        let params = SceneParams { size, ..SceneParams::default() };
        let ss = SsParams::default();
        let samples = pool.install(|| {
            (0..scenes)
                .into_par_iter()
                .map(|i| {
                    let mut rng = seed::rng(&[scene_seed, seed::stream::SCENE, i as u64]);
                    let (image, _) = synth_scene(&mut rng, &params);
                    let id = format!("scene-{i:04}");
                    let proposals = selective_search(&image, &ss, &id)?;
                    Ok(Sample { image_id: id, image, proposals })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Dataset { samples })
    }

    /// Images with a cache entry. Images absent from the cache (skipped at
    /// precompute time) are left out.
    pub fn directory(images: &Path, cache: &Path) -> Result<Self> {
        if !cache.exists() {
            return Err(Error::Config(format!(
                "proposal cache {} not found; build it with `proseco ss-precompute {} --out {}`",
                cache.display(),
                images.display(),
                cache.display()
            )));
        }
        let cache = ProposalCache::load(cache)?;
        let mut samples = Vec::new();
        for (id, path) in list_images(images)? {
            let Some(entry) = cache.get(&id) else {
                tracing::warn!("{id} has no cache entry, leaving it out");
                continue;
            };
            samples.push(Sample { image_id: id, image: load_image(&path)?, proposals: entry.clone() });
        }
        if samples.is_empty() {
            return Err(Error::Config(format!("no usable images in {}", images.display())));
        }
        Ok(Dataset { samples })
    }

    pub fn from_config(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<Self> {
        match &cfg.data {
            DataSource::Synthetic { scenes, scene_seed } => Dataset::synthetic(*scenes, *scene_seed, cfg.input_size, pool),
            DataSource::Directory { images, cache } => Dataset::directory(images, cache),
        }
    }

    /// Dataset indices used at `step`: distinct when the dataset is large
    /// enough, with repeats otherwise.
    pub fn batch_indices(&self, cfg: &RunConfig, step: u64) -> Vec<usize> {
        let mut rng = seed::rng(&[cfg.seed, seed::stream::BATCH, step]);
        let n = self.samples.len();
        if n >= cfg.batch_size {
            index::sample(&mut rng, n, cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..n)).collect()
        }
    }

    /// Everything random about step `step` derives from `(seed, step)`, so a
    /// resumed run needs no other stream state.
    pub fn prepare(&self, cfg: &RunConfig, step: u64, pool: &rayon::ThreadPool) -> Result<Vec<PreparedImage>> {
        let indices = self.batch_indices(cfg, step);
        let weak = WeakParams { scale: cfg.image_scale, input_size: cfg.input_size };
        pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let sample = &self.samples[i];
                    let mut rng = seed::rng(&[
                        cfg.seed,
                        seed::stream::IMAGE,
                        step,
                        slot as u64,
                        seed::hash_str(&sample.image_id),
                    ]);
                    let (view, record) = weak_augment(&sample.image, weak, &mut rng)?;
                    let transported = transport_boxes(&sample.proposals, &record);
                    let ss_boxes = sample_boxes(&transported, cfg.k_boxes, &mut rng);
                    let teacher_view = view.resize(cfg.input_size, cfg.input_size)?;
                    let student_view = apply_strong(&teacher_view, &sample_strong(&mut rng));
                    Ok(PreparedImage { image_id: sample.image_id.clone(), teacher_view, student_view, ss_boxes })
                })
                .collect()
        })
    }
}

/// Rayon pool sized by `PROSECO_THREADS`, defaulting to the core count.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("PROSECO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}
