//! Model configuration and the named parameter groups.
//!
//! All learnable state lives in one [`ParamSet`] under six group prefixes so
//! the trainer can freeze, checkpoint and finetune by name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::nn::ParamSet;

/// Parameter group prefixes (also the checkpoint group names).
pub const GROUPS: [&str; 6] = [
    "encoder",
    "depth_mlp",
    "aggregators",
    "plane_convs",
    "decoder_near",
    "decoder_far",
];

/// Groups optimized during per-scene finetuning (everything else frozen).
pub const FINETUNE_GROUPS: [&str; 3] = ["depth_mlp", "aggregators", "plane_convs"];

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder output channels C; the triplane channel count is C/4.
    pub feature_channels: usize,
    /// Feature volume resolution K.
    pub volume_res: usize,
    /// Half-width of the world cube holding the feature volume.
    pub grid_extent: f64,
    pub depth_mlp_hidden: usize,
    pub aggregator_hidden: usize,
    pub decoder_hidden: usize,
    pub n_freq_pos: usize,
    pub n_freq_dir: usize,
    pub pe_include_input: bool,
    /// Residual blocks per encoder stage (first block downsamples).
    pub encoder_blocks_per_stage: usize,
    /// Disable for the local-features-only ablation.
    pub use_triplane: bool,
    /// Disable to decode everything with the near MLP (single-MLP ablation).
    pub use_near_far: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_channels: 512,
            volume_res: 64,
            grid_extent: 1.0,
            depth_mlp_hidden: 512,
            aggregator_hidden: 512,
            decoder_hidden: 128,
            n_freq_pos: 10,
            n_freq_dir: 4,
            pe_include_input: true,
            encoder_blocks_per_stage: 2,
            use_triplane: true,
            use_near_far: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels % 8 != 0 || self.feature_channels == 0 {
            return Err(Error::Config(
                "feature_channels must be a positive multiple of 8".into(),
            ));
        }
        if self.volume_res < 2 {
            return Err(Error::Config("volume_res must be at least 2".into()));
        }
        if self.grid_extent < 1.0 {
            return Err(Error::Config(
                "grid_extent must cover the unit sphere (>= 1)".into(),
            ));
        }
        if self.decoder_hidden == 0 || self.depth_mlp_hidden == 0 || self.aggregator_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.encoder_blocks_per_stage == 0 {
            return Err(Error::Config("encoder needs at least one block per stage".into()));
        }
        Ok(())
    }

    /// Triplane channel count G = C/4.
    pub fn plane_channels(&self) -> usize {
        self.feature_channels / 4
    }

    /// Positional encoding output size for a k-vector.
    pub fn pe_dim(&self, k: usize, n_freq: usize) -> usize {
        k * (2 * n_freq + usize::from(self.pe_include_input))
    }

    /// Decoder conditioning width for one view (position encoding + features).
    pub fn cond_dim(&self, pos_len: usize) -> usize {
        let tp = if self.use_triplane {
            3 * self.plane_channels()
        } else {
            0
        };
        self.pe_dim(pos_len, self.n_freq_pos) + tp + self.feature_channels
    }
}

/// Learnable weights plus batch-norm running statistics.
#[derive(Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: ParamSet,
    pub buffers: ParamSet,
}

impl ModelParams {
    /// Fresh parameters, seeded.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamSet::new();
        let mut buffers = ParamSet::new();
        crate::features::init_encoder(&mut weights, &mut buffers, &config, &mut rng);
        crate::triplane::init_triplane(&mut weights, &mut buffers, &config, &mut rng);
        crate::decoder::init_decoders(&mut weights, &config, &mut rng);
        Ok(ModelParams {
            config,
            weights,
            buffers,
        })
    }

    /// Group prefix of a parameter name.
    pub fn group_of(name: &str) -> &str {
        GROUPS
            .iter()
            .copied()
            .find(|g| name.starts_with(g) && name.as_bytes().get(g.len()) == Some(&b'.'))
            .unwrap_or("other")
    }
}
