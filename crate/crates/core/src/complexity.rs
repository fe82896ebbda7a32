//! Parameter and FLOP accounting.
//!
//! FLOPs are traced from one forward pass: every matrix product counts
//! `2·k` per output element (a multiply-add is two), softmax and layer
//! normalization count 5 per element, and everything else is free. The
//! loss is not part of the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{PointCloud, Provenance};
use crate::model::{Model, ModelConfig};
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub branches: usize,
    pub parameters: usize,
    pub encoder_parameters: usize,
    pub fusion_parameters: usize,
    pub decoder_parameters: usize,
    /// Points in the partial input the FLOPs were traced at.
    pub input_points: usize,
    pub flops: u64,
}

impl ComplexityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        format!(
            "branches        {}\nparameters      {} ({:.3} M)\n  encoders      {}\n  fusion        {}\n  decoder       {}\nforward FLOPs   {} ({:.3} G) at {} input points\n",
            self.branches,
            self.parameters,
            self.parameters as f64 / 1e6,
            self.encoder_parameters,
            self.fusion_parameters,
            self.decoder_parameters,
            self.flops,
            self.flops as f64 / 1e9,
            self.input_points,
        )
    }
}

/// Default traced input size: the partial cloud that, together with the
/// predicted points, exactly fills the output.
pub fn default_input_points(config: &ModelConfig) -> usize {
    config
        .n_out
        .saturating_sub(config.n_miss)
        .max(config.min_input_points())
}

/// Build the model, count its parameter registry and trace one forward
/// pass on a random cloud of `input_points` points.
pub fn complexity(config: &ModelConfig, input_points: Option<usize>) -> Result<ComplexityReport> {
    let model = Model::new(config, 0)?;
    let n = input_points.unwrap_or_else(|| default_input_points(config));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pts = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let cloud = PointCloud::new(pts, Provenance::Synthetic)?;
    let mut g = model.bind(Precision::Wide);
    model.forward_complete(&mut g, &cloud, 0)?;
    let count = |prefix: &str| {
        model
            .store
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    };
    Ok(ComplexityReport {
        branches: config.branches,
        parameters: model.param_count(),
        encoder_parameters: count("encoder"),
        fusion_parameters: count("fusion."),
        decoder_parameters: count("decoder."),
        input_points: n,
        flops: g.tape.flops(),
    })
}
