//! Defaults loaded from the checked-in `defaults.toml`.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::layout::LayoutConfig;

const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricDefaults {
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionDefaults {
    pub tau: f64,
    pub epsilon: f64,
    pub tau_c: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowDefaults {
    pub steps: usize,
    pub cfg_scale: f64,
    pub samples: usize,
    pub seed: u64,
    pub target_mean: f64,
    pub target_std: f64,
    pub cfg_drop_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneDefaults {
    pub objects: usize,
    pub sets: usize,
    pub seed: u64,
    pub occlusion: f64,
    pub room_extent: f64,
    pub width: u32,
    pub height: u32,
    pub fov_degrees: f64,
    pub samples_per_object: usize,
    pub object_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckDefaults {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineDefaults {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Defaults {
    pub layout: LayoutConfig,
    pub metrics: MetricDefaults,
    pub attention: AttentionDefaults,
    pub flow: FlowDefaults,
    pub scene: SceneDefaults,
    pub gradcheck: GradcheckDefaults,
    pub pipeline: PipelineDefaults,
}

static DEFAULTS: LazyLock<Defaults> =
    LazyLock::new(|| toml::from_str(DEFAULTS_TOML).expect("defaults.toml is valid"));

pub fn defaults() -> &'static Defaults {
    &DEFAULTS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Descent;

    #[test]
    fn defaults_parse_and_validate() {
        let d = defaults();
        d.layout.validate().unwrap();
        assert_eq!(d.layout.descent, Descent::GaussNewton);
        assert_eq!((d.layout.lambda1, d.layout.lambda2), (1.0, 0.5));
        assert_eq!((d.layout.max_iters, d.layout.yaw_starts), (300, 8));
        assert_eq!((d.flow.steps, d.flow.cfg_scale), (25, 5.0));
        assert_eq!(d.attention.epsilon, 1e-6);
        assert_eq!(d.attention.tau_c, 0.07);
        assert_eq!(d.metrics.tau, 0.1);
        assert_eq!((d.pipeline.lambda2, d.pipeline.tau), (0.0, 0.05));
    }
}
