//! The full parameter bundle: encoder, stage-0 reconstruction decoder, both
//! connectors and the language model, all stored in one [`ParamStore`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{DeepLens, DeepLensConfig, MlpConnector};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig, Vocabulary};
use crate::numerics::Tensor;
use crate::params::{ParamGroup, ParamStore};
use crate::probes::{ReconConfig, ReconDecoder};
use crate::vision::{VisionConfig, VisionEncoder, VisionFeatureSet};
use crate::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub deeplens: DeepLensConfig,
    pub recon: ReconConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate(self.vision.tokens(), self.deeplens.t_max)?;
        self.deeplens.taps(self.vision.layers)?;
        if self.lm.vocab_size != Vocabulary::shapes_world().len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the shapes-world vocabulary ({})",
                self.lm.vocab_size,
                Vocabulary::shapes_world().len()
            )));
        }
        if self.deeplens.fusion_blocks == 0 {
            return Err(Error::Config("DeepLens needs at least one fusion block".into()));
        }
        if self.recon.heads == 0 || self.recon.d_dec % self.recon.heads != 0 {
            return Err(Error::Config("recon d_dec must be divisible by its heads".into()));
        }
        Ok(())
    }
}

/// Parameters and wiring of the whole captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub recon: ReconDecoder,
    pub mlp: MlpConnector,
    pub deeplens: DeepLens,
    pub lm: LanguageModel,
    /// Stages completed so far, in order.
    pub stages: Vec<u8>,
    pub seed: u64,
    /// Group checksums recorded when each group was frozen.
    pub frozen: BTreeMap<ParamGroup, String>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = &cfg.vision;
        let vision = VisionEncoder::new(v, &mut store, &mut rng);
        let recon = ReconDecoder::new(&mut store, &cfg.recon, &[v.layers], v, &mut rng)?;
        let mlp = MlpConnector::new(&mut store, v.d_v, cfg.lm.d_lm, &mut rng);
        let taps = cfg.deeplens.taps(v.layers)?;
        let deeplens = DeepLens::new(
            &mut store,
            &taps,
            v.layers,
            v.tokens(),
            v.d_v,
            cfg.lm.d_lm,
            cfg.lm.heads,
            &cfg.deeplens,
            &mut rng,
        )?;
        let lm = LanguageModel::new(&cfg.lm, &mut store, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            vocab: Vocabulary::shapes_world(),
            store,
            vision,
            recon,
            mlp,
            deeplens,
            lm,
            stages: Vec::new(),
            seed,
            frozen: BTreeMap::new(),
        })
    }

    pub fn encode(&self, pixels: &[f32], image_id: u64) -> Result<VisionFeatureSet<T>> {
        self.vision.encode(&self.store, pixels, image_id)
    }

    /// Visual prefix of the glance pass (MLP over the last block).
    pub fn mlp_prefix(&self, features: &VisionFeatureSet<T>) -> Result<Tensor<T>> {
        self.mlp.infer(&self.store, features.last())
    }

    /// Visual prefix of the refine pass (DeepLens over the taps and the
    /// embedded caption; an empty caption gives the single-glance variant).
    pub fn deeplens_prefix(&self, features: &VisionFeatureSet<T>, caption: &[usize]) -> Result<Tensor<T>> {
        let emb = self.lm.embed_rows(&self.store, caption)?;
        self.deeplens.infer(&self.store, features, &emb, self.lm.d())
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            vision: self.vision.clone(),
            recon: self.recon.clone(),
            mlp: self.mlp.clone(),
            deeplens: self.deeplens.clone(),
            lm: self.lm.clone(),
            stages: self.stages.clone(),
            seed: self.seed,
            frozen: self.frozen.clone(),
        }
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group, self.store.checksum(group));
    }

    /// Verifies that every frozen group still matches its recorded checksum.
    pub fn check_frozen(&self) -> Result<()> {
        for (g, sum) in &self.frozen {
            let now = self.store.checksum(*g);
            if &now != sum {
                return Err(Error::Checkpoint(format!("frozen group {g} changed (expected {sum}, found {now})")));
            }
        }
        Ok(())
    }
}
