//! The three trainable networks and their checkpoints.

use std::path::Path;

use adascan_core::detector::Detector;
use adascan_core::maskgen::MaskGenerator;
use adascan_core::predictor::{MtmInit, Predictor};
use adascan_core::scenesim::mix_seed;
use numkernel::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const DETECTOR_FILE: &str = "detector.ckpt";
pub const PREDICTOR_FILE: &str = "predictor.ckpt";
pub const MASKGEN_FILE: &str = "maskgen.ckpt";

pub struct Models {
    pub detector: Detector,
    pub predictor: Predictor,
    pub maskgen: MaskGenerator,
}

impl Clone for Models {
    fn clone(&self) -> Self {
        Self { detector: self.detector.clone(), predictor: self.predictor.clone(), maskgen: self.maskgen.clone() }
    }
}

fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(HarnessError::MissingCheckpoint(path.to_path_buf()));
    }
    let src = ParamStore::load(path)?;
    let n = store.copy_matching(&src);
    if n != store.len() {
        return Err(HarnessError::Config(format!(
            "checkpoint {} matches {n} of {} tensors; was it written with another config?",
            path.display(),
            store.len()
        )));
    }
    Ok(())
}

impl Models {
    /// Fresh networks seeded from the run seed.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let detector = Detector::new(cfg.detector.clone(), mix_seed(&[cfg.seed, 1]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 2]));
        let predictor = Predictor::new(cfg.predictor.clone(), MtmInit::Identity, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 3]));
        let maskgen = MaskGenerator::new(cfg.maskgen.clone(), cfg.grid.clone(), &mut rng)?;
        Ok(Self { detector, predictor, maskgen })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.detector.params.save(&dir.join(DETECTOR_FILE))?;
        self.predictor.params.save(&dir.join(PREDICTOR_FILE))?;
        self.maskgen.params.save(&dir.join(MASKGEN_FILE))?;
        Ok(())
    }

    /// Loads whichever checkpoints exist in `dir`; `required` lists the
    /// files that must be present.
    pub fn load(cfg: &RunConfig, dir: &Path, required: &[&str]) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        for f in required {
            if !dir.join(f).exists() {
                return Err(HarnessError::MissingCheckpoint(dir.join(f)));
            }
        }
        for (file, store) in [
            (DETECTOR_FILE, &mut m.detector.params),
            (PREDICTOR_FILE, &mut m.predictor.params),
            (MASKGEN_FILE, &mut m.maskgen.params),
        ] {
            let p = dir.join(file);
            if p.exists() {
                load_into(store, &p)?;
            }
        }
        Ok(m)
    }
}
