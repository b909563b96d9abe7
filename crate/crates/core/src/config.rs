//! Run configuration: every scalar knob of a pretraining run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// IoU-gated relational contrastive loss.
    Locsce,
    /// Relational contrastive loss with a single matched positive.
    Sce,
    Infonce,
    Locnce,
}

/// Which teacher-teacher pairs are excluded from the relation softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMask {
    /// Exclude every pair from the same image or with the same query index.
    AsWritten,
    /// Exclude only the pair of a proposal with itself.
    SelfOnly,
}

/// Short-edge range of the weak resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageScale {
    /// Short edge in 320..=480 step 16 at 800-pixel reference scale.
    Mid,
    /// Short edge in 480..=800 step 32 at 800-pixel reference scale.
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedurally generated shape scenes; region proposals are computed
    /// in memory at startup.
    Synthetic {
        scenes: usize,
        #[serde(default = "default_scene_seed")]
        scene_seed: u64,
    },
    /// `.ppm` images plus a proposal cache built by `ss-precompute`.
    Directory { images: PathBuf, cache: PathBuf },
}

fn default_scene_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: usize,
    pub queries: usize,
    pub k_boxes: usize,
    pub delta: f64,
    pub tau: f64,
    pub tau_t: f64,
    pub lambda_sce: f64,
    pub lambda_sim: f64,
    pub lambda_coord: f64,
    pub lambda_giou: f64,
    pub lambda_contrast: f64,
    pub ema_keep_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Step at which the learning rate is multiplied by 0.1.
    pub lr_drop_step: Option<u64>,
    pub iterations: u64,
    pub loss_kind: LossKind,
    pub relation_mask: RelationMask,
    pub image_scale: ImageScale,
    pub seed: u64,
    pub d_model: usize,
    pub d_proj: usize,
    pub projector_hidden: usize,
    pub input_size: usize,
    pub grid: usize,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub resume_from: Option<PathBuf>,
    /// When false the `wall_ms` metrics column is written as 0 so that
    /// metrics files are reproducible byte for byte.
    pub log_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: 8,
            queries: 32,
            k_boxes: 30,
            delta: 0.5,
            tau: 0.1,
            tau_t: 0.07,
            lambda_sce: 0.5,
            lambda_sim: 2.0,
            lambda_coord: 5.0,
            lambda_giou: 2.0,
            lambda_contrast: 2.0,
            ema_keep_rate: 0.999,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            lr_drop_step: None,
            iterations: 200,
            loss_kind: LossKind::Locsce,
            relation_mask: RelationMask::AsWritten,
            image_scale: ImageScale::Large,
            seed: 0,
            d_model: 64,
            d_proj: 32,
            projector_hidden: 64,
            input_size: 64,
            grid: 8,
            data: DataSource::Synthetic { scenes: 32, scene_seed: default_scene_seed() },
            out_dir: None,
            checkpoint_every: 0,
            resume_from: None,
            log_wall_clock: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return fail(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.tau > 0.0 && self.tau_t > 0.0) {
            return fail(format!("temperatures must be positive, got tau={} tau_t={}", self.tau, self.tau_t));
        }
        if !(0.0..=1.0).contains(&self.lambda_sce) {
            return fail(format!("lambda_sce must lie in [0, 1], got {}", self.lambda_sce));
        }
        if !(0.0..=1.0).contains(&self.ema_keep_rate) {
            return fail(format!("ema_keep_rate must lie in [0, 1], got {}", self.ema_keep_rate));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return fail("learning_rate and weight_decay must be >= 0, grad_clip > 0".into());
        }
        if self.batch_size == 0 || self.queries == 0 {
            return fail("batch_size and queries must be at least 1".into());
        }
        if self.k_boxes > self.queries {
            return fail(format!(
                "k_boxes ({}) exceeds queries ({}); box matching needs K <= N",
                self.k_boxes, self.queries
            ));
        }
        if let DataSource::Synthetic { scenes: 0, .. } = self.data {
            return fail("synthetic data source needs at least one scene".into());
        }
        self.detector_config().validate()
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            queries: self.queries,
            d_model: self.d_model,
            d_proj: self.d_proj,
            projector_hidden: self.projector_hidden,
            input_size: self.input_size,
            grid: self.grid,
        }
    }

    /// SHA-256 over the fields that determine the training trajectory.
    /// Run length, output locations and logging switches are excluded so a
    /// run can be resumed with a larger iteration budget.
    pub fn hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.iterations = 0;
        canonical.out_dir = None;
        canonical.checkpoint_every = 0;
        canonical.resume_from = None;
        canonical.log_wall_clock = false;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    /// Anchors every relative path of the config at `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Directory { images, cache } = &mut self.data {
            anchor(images);
            anchor(cache);
        }
        if let Some(p) = &mut self.out_dir {
            anchor(p);
        }
        if let Some(p) = &mut self.resume_from {
            anchor(p);
        }
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_drop_step {
            Some(drop) if step >= drop => self.learning_rate * 0.1,
            _ => self.learning_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_anchor_at_base() {
        let mut c = RunConfig {
            data: DataSource::Directory { images: "imgs".into(), cache: "/abs/c.pssc".into() },
            out_dir: Some("run".into()),
            ..RunConfig::default()
        };
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.data, DataSource::Directory { images: "/cfg/imgs".into(), cache: "/abs/c.pssc".into() });
        assert_eq!(c.out_dir, Some(PathBuf::from("/cfg/run")));
        assert_eq!(c.resume_from, None);
    }

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.delta, 0.5);
        assert_eq!(c.tau, 0.1);
        assert_eq!(c.tau_t, 0.07);
        assert_eq!(c.lambda_sce, 0.5);
        assert_eq!(c.lambda_sim, 2.0);
        assert_eq!(c.lambda_contrast, 2.0);
        assert_eq!(c.lambda_coord, 5.0);
        assert_eq!(c.lambda_giou, 2.0);
        assert_eq!(c.k_boxes, 30);
        assert_eq!(c.ema_keep_rate, 0.999);
        assert_eq!(c.learning_rate, 2e-4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"batch_size": 2, "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("bogus")), "{err}");
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"queries": 8, "k_boxes": 8, "loss_kind": "locnce", "relation_mask": "self_only", "image_scale": "mid"}"#).unwrap();
        assert_eq!(c.queries, 8);
        assert_eq!(c.loss_kind, LossKind::Locnce);
        assert_eq!(c.relation_mask, RelationMask::SelfOnly);
        assert_eq!(c.image_scale, ImageScale::Mid);
        assert_eq!(c.tau_t, 0.07);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for bad in [
            r#"{"delta": 0.0}"#,
            r#"{"delta": 1.5}"#,
            r#"{"tau": 0.0}"#,
            r#"{"lambda_sce": 1.2}"#,
            r#"{"queries": 8, "k_boxes": 9}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_run_length_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.iterations = 5000;
        b.out_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.tau = 0.2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.data = DataSource::Directory { images: "imgs".into(), cache: "c.pssc".into() };
        c.lr_drop_step = Some(100);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn learning_rate_drop() {
        let mut c = RunConfig::default();
        c.lr_drop_step = Some(10);
        assert_eq!(c.learning_rate_at(9), 2e-4);
        assert!((c.learning_rate_at(10) - 2e-5).abs() < 1e-12);
    }
}
