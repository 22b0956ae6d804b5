//! Fixtures shared by the criterion benchmarks.

use dstc_core::autodiff::draw_gradcheck_sample;
use dstc_core::{DstcConfig, FeatureMap, GradcheckOptions, LayerParams, Result, Variant};

pub struct Fixture {
    pub cfg: DstcConfig,
    pub x: FeatureMap,
    pub params: LayerParams,
    pub upstream: FeatureMap,
}

/// A K=4, stride-2 upsampling layer with random weights and heads on a
/// `side^dim` input.
pub fn fixture(variant: Variant, dim: usize, channels: usize, side: usize, chunk_size: usize) -> Result<Fixture> {
    let mut cfg = DstcConfig::new(variant, dim, channels, channels, 4).with_geometry(2, 1, 0);
    cfg.chunk_size = chunk_size;
    let opts = GradcheckOptions {
        input_spatial: Some(vec![side; dim]),
        kink_margin: 0.0,
        ..GradcheckOptions::default()
    };
    let s = draw_gradcheck_sample(&cfg, 0, &opts)?;
    Ok(Fixture {
        cfg,
        x: s.x,
        params: s.params,
        upstream: s.upstream,
    })
}
