//! The full completion network: per-branch encoders, self-fusion, decoder
//! and merge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{merge_and_resample, Decoder, DecoderKind, DecoderParams};
use crate::encoder::{Encoder, EncoderParams, ExtractorKind, LevelParams, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::{FusedFeatures, Fusion, FusionMode, FusionParams};
use crate::geometry::{tensor_to_points, PointCloud, Provenance};
use crate::tensor::{Graph, ParamStore, Precision, Var};

pub const MAX_BRANCHES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub branches: usize,
    pub level_points: [usize; LEVELS],
    pub level_widths: [usize; LEVELS],
    pub neighbors: [usize; LEVELS],
    pub heads: usize,
    pub pos_hidden: usize,
    pub extractor: ExtractorKind,
    pub fusion_width: usize,
    pub fusion_depth: usize,
    pub fusion_mode: FusionMode,
    pub positional_encoding: bool,
    pub decoder: DecoderKind,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_layers: usize,
    pub n_miss: usize,
    pub n_out: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branches: 3,
            level_points: [128, 64, 32],
            level_widths: [64, 128, 256],
            neighbors: [16, 16, 16],
            heads: 4,
            pos_hidden: 16,
            extractor: ExtractorKind::SetAbstractionKnn,
            fusion_width: crate::fusion::FUSION_WIDTH,
            fusion_depth: 1,
            fusion_mode: FusionMode::Double,
            positional_encoding: true,
            decoder: DecoderKind::QueryCrossAttention,
            decoder_width: 128,
            decoder_heads: 4,
            decoder_layers: 2,
            n_miss: 128,
            n_out: 256,
        }
    }
}

impl ModelConfig {
    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            levels: (0..LEVELS)
                .map(|l| LevelParams {
                    points: self.level_points[l],
                    width: self.level_widths[l],
                    neighbors: self.neighbors[l],
                })
                .collect(),
            heads: self.heads,
            pos_hidden: self.pos_hidden,
            extractor: self.extractor,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            branches: self.branches,
            level_widths: self.level_widths.to_vec(),
            heads: self.heads,
            width: self.fusion_width,
            depth: self.fusion_depth,
            mode: self.fusion_mode,
            positional_encoding: self.positional_encoding,
            pos_hidden: self.pos_hidden,
        }
    }

    pub fn decoder_params(&self) -> DecoderParams {
        DecoderParams {
            kind: self.decoder,
            queries: self.n_miss,
            heads: self.decoder_heads,
            width: self.decoder_width,
            layers: self.decoder_layers,
            memory_width: self.fusion_width,
            output_points: self.n_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_BRANCHES).contains(&self.branches) {
            return Err(Error::config(format!(
                "branches must be between 2 and {MAX_BRANCHES}, got {}",
                self.branches
            )));
        }
        self.encoder_params().validate()?;
        self.fusion_params().validate()?;
        self.decoder_params().validate()
    }

    /// Exact parameter count from the architecture alone.
    pub fn param_count(&self) -> usize {
        self.branches * self.encoder_params().param_count()
            + self.fusion_params().param_count()
            + self.decoder_params().param_count()
    }

    /// Smallest partial cloud the encoders accept.
    pub fn min_input_points(&self) -> usize {
        self.level_points[0].max(self.neighbors[0])
    }
}

/// Outputs of one forward pass.
pub struct Completion {
    /// Decoder prediction, `N_miss × 3`.
    pub missing: Var,
    /// Merged and resampled cloud, `N_out × 3`.
    pub merged: Var,
    /// Index of each merged point in `partial ⊕ missing`.
    pub selection: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<Encoder>,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

const FUSION_STREAM: u64 = 100;
const DECODER_STREAM: u64 = 200;

impl Model {
    /// Build and initialize. Each component draws from its own stream of a
    /// generator seeded with `seed`, so adding a branch does not change the
    /// initialization of the others.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng_for = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        let encoders = (0..config.branches)
            .map(|b| {
                Encoder::new(
                    &mut store,
                    &mut rng_for(b as u64 + 1),
                    &format!("encoder{b}"),
                    &config.encoder_params(),
                )
            })
            .collect::<Result<_>>()?;
        let fusion = Fusion::new(
            &mut store,
            &mut rng_for(FUSION_STREAM),
            "fusion",
            &config.fusion_params(),
        )?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng_for(DECODER_STREAM),
            "decoder",
            &config.decoder_params(),
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            encoders,
            fusion,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn bind(&self, precision: Precision) -> Graph {
        self.store.bind(precision)
    }

    pub fn fuse(&self, g: &mut Graph, partial: &PointCloud) -> Result<FusedFeatures> {
        let pyramids = self
            .encoders
            .iter()
            .enumerate()
            .map(|(b, e)| e.encode(g, partial, b))
            .collect::<Result<Vec<_>>>()?;
        self.fusion.fuse_branches(g, &pyramids)
    }

    /// Encode the partial cloud in every branch, fuse, decode the missing
    /// points and merge them with the input, resampling from `start`.
    pub fn forward_complete(&self, g: &mut Graph, partial: &PointCloud, start: usize) -> Result<Completion> {
        if partial.len() < self.config.min_input_points() {
            return Err(Error::arg(format!(
                "partial cloud has {} points, the model needs at least {}",
                partial.len(),
                self.config.min_input_points()
            )));
        }
        let fused = self.fuse(g, partial)?;
        let missing = self.decoder.decode_missing(g, &fused)?;
        let merged = merge_and_resample(&mut g.tape, partial.points(), missing, self.config.n_out, start)?;
        Ok(Completion {
            missing,
            merged: merged.points,
            selection: merged.selection,
        })
    }

    /// Inference at wide precision with FPS starting at the first input
    /// point.
    pub fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        let mut g = self.bind(Precision::Wide);
        let out = self.forward_complete(&mut g, partial, 0)?;
        let points = tensor_to_points(g.tape.value(out.merged))?;
        let mut cloud = PointCloud::new(points, Provenance::Predicted)?;
        cloud.transform = partial.transform;
        Ok(cloud)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::loss::chamfer_distance;
    use rand::Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            branches: 2,
            level_points: [16, 8, 4],
            level_widths: [8, 8, 16],
            neighbors: [4, 4, 4],
            heads: 2,
            pos_hidden: 4,
            fusion_width: 16,
            decoder_width: 8,
            decoder_heads: 2,
            decoder_layers: 1,
            n_miss: 8,
            n_out: 24,
            ..ModelConfig::default()
        }
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::new(pts, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn default_config_is_valid_and_counted_exactly() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let m = Model::new(&tiny(), 0).unwrap();
        assert_eq!(m.param_count(), tiny().param_count());
    }

    #[test]
    fn branch_and_mode_ordering() {
        let mut counts = Vec::new();
        for b in 2..=4 {
            counts.push(ModelConfig { branches: b, ..tiny() }.param_count());
        }
        assert!(counts[0] < counts[1] && counts[1] < counts[2]);
        let single = ModelConfig {
            fusion_mode: FusionMode::Single,
            ..tiny()
        };
        assert!(single.param_count() < tiny().param_count());
        assert!(ModelConfig { branches: 1, ..tiny() }.validate().is_err());
        assert!(ModelConfig { branches: 5, ..tiny() }.validate().is_err());
    }

    #[test]
    fn forward_shape_determinism_and_gradient_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let partial = cloud(&mut rng, 20);
        let gt = cloud(&mut rng, 24);
        for decoder in [DecoderKind::QueryCrossAttention, DecoderKind::TransformerUpsampling] {
            let cfg = ModelConfig { decoder, ..tiny() };
            let m = Model::new(&cfg, 7).unwrap();
            let a = m.complete(&partial).unwrap();
            assert_eq!(a.len(), cfg.n_out);
            assert_eq!(a.points(), m.complete(&partial).unwrap().points());

            let mut g = m.bind(Precision::Wide);
            let out = m.forward_complete(&mut g, &partial, 0).unwrap();
            let y = g.tape.constant(gt.to_tensor());
            let loss = chamfer_distance(&mut g.tape, y, out.merged).unwrap();
            let grads = g.tape.backward(loss).unwrap();
            assert_eq!(grads.len_named(), m.store.len());
            // every parameter tensor of every component gets some gradient
            let mut dead = Vec::new();
            for (name, t) in grads.named() {
                if t.data().iter().all(|&v| v == 0.0) {
                    dead.push(name.to_string());
                }
            }
            assert!(dead.is_empty(), "{decoder:?}: zero gradient for {dead:?}");
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(&tiny(), 0).unwrap();
        assert!(matches!(m.complete(&cloud(&mut rng, 10)), Err(Error::Argument(_))));
        // too few points to produce n_out
        let m = Model::new(&ModelConfig { n_out: 40, ..tiny() }, 0).unwrap();
        assert!(matches!(m.complete(&cloud(&mut rng, 16)), Err(Error::Argument(_))));
    }

    #[test]
    fn seeds_differ_and_streams_are_independent() {
        let a = Model::new(&tiny(), 1).unwrap();
        let b = Model::new(&tiny(), 2).unwrap();
        let name = "decoder.queries";
        assert_ne!(a.store.get(name).unwrap().tensor, b.store.get(name).unwrap().tensor);
        let three = Model::new(&ModelConfig { branches: 3, ..tiny() }, 1).unwrap();
        for p in a
            .store
            .iter()
            .filter(|p| p.name.starts_with("encoder") || p.name.starts_with("decoder"))
        {
            assert_eq!(three.store.get(&p.name).unwrap().tensor, p.tensor, "{}", p.name);
        }
    }
}
