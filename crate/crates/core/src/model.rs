//! The full learnable scene representation: two multi-scale feature-plane
//! encoders with density/colour heads, plus the invertible time-conditioned
//! deformation map, all parameterised in one [`ParamStore`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::deform::InvertibleMap;
use crate::fields::{FieldHeads, MultiScaleHexPlane, PlaneLevelSpec};
use crate::geometry::WorkspaceBox;

/// Architecture hyperparameters. Defaults are sized for desk-scale scenes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Coarse-to-fine plane levels; `temporal: 0` means `ceil(n_frames/4)`
    /// for the first level and `n_frames` for later ones.
    pub levels: Vec<PlaneLevelSpec>,
    /// Width of the fused feature produced by each encoder's MLP.
    pub fusion_hidden: usize,
    /// Number of coupling blocks in the deformation map.
    pub coupling_blocks: usize,
    /// Hidden width of each block's conditioner MLP.
    pub coupling_hidden: usize,
    /// Hidden layers in each conditioner MLP.
    pub coupling_layers: usize,
    /// Dimension of the learned per-frame time code.
    pub time_embed_dim: usize,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: vec![
                PlaneLevelSpec {
                    spatial: 32,
                    temporal: 0,
                    channels: 8,
                },
                PlaneLevelSpec {
                    spatial: 128,
                    temporal: 0,
                    channels: 8,
                },
            ],
            fusion_hidden: 32,
            coupling_blocks: 6,
            coupling_hidden: 64,
            coupling_layers: 2,
            time_embed_dim: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Resolves `temporal: 0` placeholders against the frame count.
    pub fn resolved_levels(&self, n_frames: usize) -> Vec<PlaneLevelSpec> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let temporal = if l.temporal == 0 {
                    if i == 0 {
                        n_frames.div_ceil(4).max(2)
                    } else {
                        n_frames.max(2)
                    }
                } else {
                    l.temporal
                };
                PlaneLevelSpec {
                    spatial: l.spatial,
                    temporal,
                    channels: l.channels,
                }
            })
            .collect()
    }
}

/// All learnable parameters plus the workspace box they operate in.
pub struct SceneModel {
    pub store: ParamStore,
    pub density_planes: MultiScaleHexPlane,
    pub colour_planes: MultiScaleHexPlane,
    pub heads: FieldHeads,
    pub deform: InvertibleMap,
    pub workspace: WorkspaceBox,
    pub n_frames: usize,
    pub config: ModelConfig,
}

impl SceneModel {
    pub fn new(config: &ModelConfig, workspace: WorkspaceBox, n_frames: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let levels = config.resolved_levels(n_frames);

        let density_planes = MultiScaleHexPlane::init(
            &mut store,
            &mut rng,
            "density",
            &levels,
            config.fusion_hidden,
        );
        let colour_planes = MultiScaleHexPlane::init(
            &mut store,
            &mut rng,
            "colour",
            &levels,
            config.fusion_hidden,
        );
        let heads = FieldHeads::init(&mut store, &mut rng, config.fusion_hidden);
        let deform = InvertibleMap::init(
            &mut store,
            &mut rng,
            n_frames,
            config.time_embed_dim,
            config.coupling_blocks,
            config.coupling_hidden,
            config.coupling_layers,
        );

        SceneModel {
            store,
            density_planes,
            colour_planes,
            heads,
            deform,
            workspace,
            n_frames,
            config: config.clone(),
        }
    }

    /// Normalised time in `[0,1]` for a frame index.
    pub fn t_norm(&self, frame: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            frame as f64 / (self.n_frames - 1) as f64
        }
    }
}

/// A dense layer's parameter pair.
#[derive(Debug, Clone, Copy)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseParams {
    /// Xavier-style uniform initialisation.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Tensor::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound));
        DenseParams {
            weight: store.add_param(format!("{name}.weight"), weight),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros((1, fan_out))),
        }
    }

    /// All-zero initialisation; used for final conditioner layers so the
    /// deformation starts as the identity.
    pub fn init_zero(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        DenseParams {
            weight: store.add_param(format!("{name}.weight"), Tensor::zeros((fan_in, fan_out))),
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros((1, fan_out))),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }
}
