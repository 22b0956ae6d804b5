//! Randomized desk-scale problems for oracle comparisons.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{FINAL_LAYER_VARIANCES, INTERMEDIATE_VARIANCES};
use crate::layer::{forward_cached, init_layer, DstcConfig, LayerParams, OffsetSetting, ParamGroup, Variant};
use crate::scatter::{scatter_oracle, Interpolation};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug)]
pub struct RandomCase {
    pub cfg: DstcConfig,
    pub x: FeatureMap,
    pub params: LayerParams,
}

/// A random layer geometry of the given variant, small enough for the
/// brute-force oracle. Returns the config and an input spatial shape.
pub fn random_config<R: Rng + ?Sized>(variant: Variant, dim: usize, rng: &mut R) -> (DstcConfig, Vec<usize>) {
    loop {
        let k = rng.gen_range(1..=if dim == 2 { 4 } else { 3 });
        let mut cfg = DstcConfig::new(variant, dim, rng.gen_range(1..=3), rng.gen_range(1..=3), k);
        cfg.stride = rng.gen_range(1..=3);
        cfg.padding = rng.gen_range(0..=k);
        cfg.output_padding = rng.gen_range(0..cfg.stride);
        cfg.base_dilation = rng.gen_range(1..=2);
        cfg.dilation_base = rng.gen_range(0.5..3.5);
        if variant == Variant::DstcBilinear && rng.gen_bool(0.5) {
            cfg.offset_mode = OffsetSetting::Parametrized;
        }
        let bank: &[f64] = if rng.gen_bool(0.5) {
            &INTERMEDIATE_VARIANCES
        } else {
            &FINAL_LAYER_VARIANCES
        };
        let s = *[1usize, 2, 4].choose(rng).expect("non-empty");
        let mut picked: Vec<f64> = bank.choose_multiple(rng, s).copied().collect();
        picked.sort_by(f64::total_cmp);
        cfg.gaussian_variances = picked;
        cfg.k_sigma = rng.gen_range(2..=5);
        let extent = if dim == 2 { 2..=5 } else { 2..=3 };
        let spatial: Vec<usize> = (0..dim).map(|_| rng.gen_range(extent.clone())).collect();
        if cfg.validate().is_ok() && cfg.output_spatial(&spatial).is_ok() {
            return (cfg, spatial);
        }
    }
}

/// Random config, input in `[-1, 1]`, initialized weights and head weights
/// drawn from `+-head_scale`.
pub fn random_case<R: Rng + ?Sized>(variant: Variant, dim: usize, head_scale: f64, rng: &mut R) -> Result<RandomCase> {
    let (cfg, spatial) = random_config(variant, dim, rng);
    let mut params = init_layer(&cfg, rng.gen())?;
    for g in [ParamGroup::OffsetHead, ParamGroup::ScoreHead] {
        if let Some(t) = params.group_mut(g) {
            *t = Tensor::uniform(t.shape(), -head_scale, head_scale, rng)?;
        }
    }
    let x = Tensor::uniform(&[vec![cfg.in_channels], spatial].concat(), -1.0, 1.0, rng)?;
    Ok(RandomCase { cfg, x, params })
}

/// `count` cases cycling through every variant in 2-D, then 3-D, drawn from
/// one seeded stream.
pub fn case_grid(count: usize, seed: u64, head_scale: f64) -> Result<Vec<RandomCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let variant = Variant::ALL[i % Variant::ALL.len()];
            let dim = if (i / Variant::ALL.len()).is_multiple_of(2) {
                2
            } else {
                3
            };
            random_case(variant, dim, head_scale, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub variant: Variant,
    pub dimension: usize,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub max_abs_diff: f64,
}

/// Runs the layer's scatter stage and the brute-force oracle on the same
/// offset and score fields and reports the largest output difference.
pub fn compare_with_oracle(case: &RandomCase) -> Result<OracleComparison> {
    let cfg = &case.cfg;
    let cache = forward_cached(&case.x, &case.params, cfg)?;
    let bank = match &cache.scores {
        Some(_) => Some(cfg.bank()?),
        None => None,
    };
    let interp = match (&cache.scores, &bank) {
        (Some(sc), Some(b)) => Interpolation::Gaussian {
            scores: sc,
            bank: Some(b),
        },
        _ => Interpolation::Bilinear,
    };
    let oracle = scatter_oracle(
        &cache.inner_input,
        &case.params.kernel,
        &cfg.location_map()?,
        &cfg.ref_grid()?,
        cache.offsets.as_ref(),
        interp,
    )?;
    Ok(OracleComparison {
        variant: cfg.variant,
        dimension: cfg.dimension,
        input_shape: case.x.shape().to_vec(),
        output_shape: oracle.shape().to_vec(),
        max_abs_diff: cache.inner_output.max_abs_diff(&oracle)?,
    })
}
