//! Multi-view datasets with per-view processing, and their on-disk layout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::isp::{apply_chain, IspConfig, IspOp};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{Camera, RenderOptions, VoxelScene};

/// One training view with its ground-truth bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub camera: Camera,
    pub clean: Image,
    pub processed: Image,
    pub chain: Vec<IspOp>,
}

/// What the stage-one fitter is allowed to see of a view.
#[derive(Clone, Debug, PartialEq)]
pub struct FitView {
    pub camera: Camera,
    pub image: Image,
}

impl ViewRecord {
    pub fn fit_view(&self) -> FitView {
        FitView {
            camera: self.camera.clone(),
            image: self.processed.clone(),
        }
    }
}

pub fn fit_views(records: &[ViewRecord]) -> Vec<FitView> {
    records.iter().map(ViewRecord::fit_view).collect()
}

/// Renders every camera, samples one processing chain per view and applies
/// it. View `i` draws its chain from the seeded stream `i`.
pub fn synthesize_dataset(
    scene: &VoxelScene,
    cameras: &[Camera],
    isp: &IspConfig,
    render: &RenderOptions,
    seed: u64,
) -> Result<Vec<ViewRecord>> {
    if cameras.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 cameras, got {}", cameras.len())));
    }
    isp.validate()?;
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            cam.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let chain = isp.sample_chain(&mut rng);
            let clean = scene.render_view(cam, render);
            let processed = apply_chain(&clean, &chain, isp.clamp);
            Ok(ViewRecord {
                camera: cam.clone(),
                clean,
                processed,
                chain,
            })
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "bilagrid-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub camera: Camera,
    pub image: String,
    pub clean: String,
    pub chain: Vec<IspOp>,
}

/// `manifest.json` of a dataset directory. Clean images and chains are
/// stored for evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub render: RenderOptions,
    pub scene_init: String,
    pub scene_truth: String,
    pub views: Vec<ManifestView>,
    pub held_out: Vec<ManifestView>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset {} v{}", m.format, m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Loads the processed training images with their cameras only.
    pub fn load_fit_views(&self, dir: &Path) -> Result<Vec<FitView>> {
        self.views
            .iter()
            .map(|v| {
                let image = Image::load(dir.join(&v.image))?;
                if image.width() != v.camera.width || image.height() != v.camera.height {
                    return Err(Error::ShapeMismatch(format!("{} does not match camera {}", v.image, v.camera.id)));
                }
                Ok(FitView {
                    camera: v.camera.clone(),
                    image,
                })
            })
            .collect()
    }
}

/// Writes images, scenes and the manifest into `dir`.
pub fn save_dataset(
    dir: &Path,
    records: &[ViewRecord],
    held_out: &[ViewRecord],
    scene_truth: &VoxelScene,
    scene_init: &VoxelScene,
    render: &RenderOptions,
    seed: u64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let write_views = |prefix: &str, recs: &[ViewRecord]| -> Result<Vec<ManifestView>> {
        recs.iter()
            .map(|r| {
                let id = r.camera.id;
                let image = format!("{prefix}_{id:03}.bimg");
                let clean = format!("clean_{id:03}.bimg");
                r.processed.save(dir.join(&image))?;
                r.processed.save_png(dir.join(format!("{prefix}_{id:03}.png")))?;
                r.clean.save(dir.join(&clean))?;
                Ok(ManifestView {
                    camera: r.camera.clone(),
                    image,
                    clean,
                    chain: r.chain.clone(),
                })
            })
            .collect()
    };
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed,
        render: *render,
        scene_init: "scene_init.bscn".into(),
        scene_truth: "scene_truth.bscn".into(),
        views: write_views("view", records)?,
        held_out: write_views("heldout", held_out)?,
    };
    scene_init.save(dir.join(&manifest.scene_init))?;
    scene_truth.save(dir.join(&manifest.scene_truth))?;
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthetic::{synthetic_setup, SyntheticConfig};

    fn small() -> (VoxelScene, Vec<Camera>) {
        let cfg = SyntheticConfig {
            resolution: 12,
            image_size: 10,
            train_views: 4,
            test_views: 2,
            ..SyntheticConfig::default()
        };
        let s = synthetic_setup(&cfg).unwrap();
        (s.scene, s.train_cameras)
    }

    const FAST: RenderOptions = RenderOptions {
        samples: 24,
        jitter_seed: None,
    };

    #[test]
    fn identity_config_leaves_images_clean() {
        let (scene, cams) = small();
        let recs = synthesize_dataset(&scene, &cams, &IspConfig::default(), &FAST, 1).unwrap();
        for r in &recs {
            assert!(r.chain.is_empty());
            assert_eq!(r.processed, r.clean);
        }
    }

    #[test]
    fn processed_is_reproduced_by_recorded_chain() {
        let (scene, cams) = small();
        let recs = synthesize_dataset(&scene, &cams, &IspConfig::varied(), &FAST, 2).unwrap();
        for r in &recs {
            assert_eq!(apply_chain(&r.clean, &r.chain, false), r.processed);
        }
        let again = synthesize_dataset(&scene, &cams, &IspConfig::varied(), &FAST, 2).unwrap();
        assert_eq!(recs, again);
        let other = synthesize_dataset(&scene, &cams, &IspConfig::varied(), &FAST, 3).unwrap();
        assert_ne!(recs[0].chain, other[0].chain);
    }

    #[test]
    fn too_few_cameras_rejected() {
        let (scene, cams) = small();
        assert!(synthesize_dataset(&scene, &cams[..2], &IspConfig::default(), &FAST, 0).is_err());
    }

    #[test]
    fn dataset_roundtrip_on_disk() {
        let (scene, cams) = small();
        let recs = synthesize_dataset(&scene, &cams, &IspConfig::varied(), &FAST, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(dir.path(), &recs, &recs[..1], &scene, &scene, &FAST, 4).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let views = loaded.load_fit_views(dir.path()).unwrap();
        assert_eq!(views.len(), 4);
        for (v, r) in views.iter().zip(&recs) {
            assert_eq!(v.image, r.processed.map(|_, _, c| c.map(|x| x as f32 as f64)));
            assert_eq!(v.camera, r.camera);
        }
    }
}
