//! The assembled layer: configuration, the four named variants, parameter
//! initialization and census, and the forward pass.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, DstcError, Result};
use crate::grid::{make_ref_grid, Extents, LocationMap, RefGrid};
use crate::heads::{
    compute_offsets, compute_scores, pointwise, ConvHead, OffsetField, OffsetMode, ScoreField, ScoreMode,
};
use crate::kernels::{validate_variances, GaussianBank, DEFAULT_K_SIGMA, INTERMEDIATE_VARIANCES};
use crate::scatter::{dstc_forward_chunked, tc_forward_chunked, Interpolation, WeightKernel};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain transposed convolution.
    Tc,
    /// Learned dense offsets, bilinear interpolation.
    DstcBilinear,
    /// Learned dense offsets and dense Gaussian-mixture scores.
    DstcGaussianDense,
    /// Dilation-plus-shift offsets and scores shared across taps.
    DstcParametrized,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Tc,
        Variant::DstcBilinear,
        Variant::DstcGaussianDense,
        Variant::DstcParametrized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tc => "tc",
            Variant::DstcBilinear => "dstc_bilinear",
            Variant::DstcGaussianDense => "dstc_gaussian_dense",
            Variant::DstcParametrized => "dstc_parametrized",
        }
    }

    /// Offset and score modes the variant uses by default.
    pub fn default_modes(self) -> (OffsetSetting, ScoreSetting) {
        match self {
            Variant::Tc => (OffsetSetting::Off, ScoreSetting::None),
            Variant::DstcBilinear => (OffsetSetting::Dense, ScoreSetting::None),
            Variant::DstcGaussianDense => (OffsetSetting::Dense, ScoreSetting::Dense),
            Variant::DstcParametrized => (OffsetSetting::Parametrized, ScoreSetting::Shared),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = DstcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DstcError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetSetting {
    Off,
    Dense,
    Parametrized,
}

impl OffsetSetting {
    pub fn mode(self) -> Option<OffsetMode> {
        match self {
            OffsetSetting::Off => None,
            OffsetSetting::Dense => Some(OffsetMode::Dense),
            OffsetSetting::Parametrized => Some(OffsetMode::Parametrized),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSetting {
    None,
    Dense,
    Shared,
}

impl ScoreSetting {
    pub fn mode(self) -> Option<ScoreMode> {
        match self {
            ScoreSetting::None => None,
            ScoreSetting::Dense => Some(ScoreMode::Dense),
            ScoreSetting::Shared => Some(ScoreMode::Shared),
        }
    }
}

fn one() -> usize {
    1
}

fn default_variances() -> Vec<f64> {
    INTERMEDIATE_VARIANCES.to_vec()
}

fn default_k_sigma() -> usize {
    DEFAULT_K_SIGMA
}

fn default_dilation_base() -> f64 {
    3.0
}

/// Full layer configuration. Serialized field names are part of the file
/// format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DstcConfig {
    pub dimension: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
    #[serde(default = "one")]
    pub base_dilation: usize,
    pub variant: Variant,
    pub offset_mode: OffsetSetting,
    pub score_mode: ScoreSetting,
    #[serde(default = "default_variances")]
    pub gaussian_variances: Vec<f64>,
    #[serde(rename = "K_sigma", default = "default_k_sigma")]
    pub k_sigma: usize,
    /// Added to the raw dilation channel of parametrized offsets.
    #[serde(default = "default_dilation_base")]
    pub dilation_base: f64,
    /// Width of the 1x1 compress/expand pair, if any.
    #[serde(default)]
    pub module_channels: Option<usize>,
    /// Adds a nearest-neighbour upsampled copy of the input to the output.
    #[serde(default)]
    pub skip: bool,
    /// Input locations per scatter chunk; 0 scatters in one serial pass.
    #[serde(default)]
    pub chunk_size: usize,
}

impl DstcConfig {
    /// A configuration with the variant's default modes and the
    /// intermediate-layer Gaussian bank.
    pub fn new(
        variant: Variant,
        dimension: usize,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
    ) -> Self {
        let (offset_mode, score_mode) = variant.default_modes();
        DstcConfig {
            dimension,
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: 0,
            output_padding: 0,
            base_dilation: 1,
            variant,
            offset_mode,
            score_mode,
            gaussian_variances: default_variances(),
            k_sigma: DEFAULT_K_SIGMA,
            dilation_base: default_dilation_base(),
            module_channels: None,
            skip: false,
            chunk_size: 0,
        }
    }

    pub fn with_geometry(mut self, stride: usize, padding: usize, output_padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self.output_padding = output_padding;
        self
    }

    /// The same configuration as another variant, modes reset to that
    /// variant's defaults.
    pub fn as_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        (c.offset_mode, c.score_mode) = variant.default_modes();
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return config_err("channel counts must be >= 1");
        }
        if self.kernel_size == 0 {
            return config_err("kernel_size must be >= 1");
        }
        self.location_map()?;
        let ok = match self.variant {
            Variant::Tc => self.offset_mode == OffsetSetting::Off && self.score_mode == ScoreSetting::None,
            Variant::DstcBilinear => self.offset_mode != OffsetSetting::Off && self.score_mode == ScoreSetting::None,
            Variant::DstcGaussianDense => {
                self.offset_mode == OffsetSetting::Dense && self.score_mode == ScoreSetting::Dense
            }
            Variant::DstcParametrized => {
                self.offset_mode == OffsetSetting::Parametrized && self.score_mode == ScoreSetting::Shared
            }
        };
        if !ok {
            return config_err(format!(
                "variant {} is inconsistent with offset_mode {:?} / score_mode {:?}",
                self.variant.name(),
                self.offset_mode,
                self.score_mode
            ));
        }
        if self.score_mode != ScoreSetting::None {
            validate_variances(&self.gaussian_variances)?;
            if self.k_sigma == 0 {
                return config_err("K_sigma must be >= 1");
            }
        }
        if !self.dilation_base.is_finite() {
            return config_err("dilation_base must be finite");
        }
        if self.module_channels == Some(0) {
            return config_err("module_channels must be >= 1");
        }
        if self.skip && self.in_channels != self.out_channels {
            return config_err("skip connection requires in_channels == out_channels");
        }
        Ok(())
    }

    pub fn location_map(&self) -> Result<LocationMap> {
        LocationMap::uniform(
            self.dimension,
            self.stride,
            self.padding,
            self.output_padding,
            self.base_dilation,
        )
    }

    pub fn ref_grid(&self) -> Result<RefGrid> {
        make_ref_grid(self.kernel_size, self.dimension)
    }

    pub fn bank(&self) -> Result<GaussianBank> {
        GaussianBank::new(self.gaussian_variances.clone(), self.k_sigma)
    }

    /// Number of Gaussian components, 0 without scores.
    pub fn s(&self) -> usize {
        if self.score_mode == ScoreSetting::None {
            0
        } else {
            self.gaussian_variances.len()
        }
    }

    /// Channels seen by the scatter and the heads: `(in, out)`.
    pub fn inner_channels(&self) -> (usize, usize) {
        match self.module_channels {
            Some(m) => (m, m),
            None => (self.in_channels, self.out_channels),
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel_size.pow(self.dimension as u32)
    }

    pub fn output_spatial(&self, input_spatial: &[usize]) -> Result<Vec<usize>> {
        self.location_map()?.output_shape(input_spatial, self.kernel_size)
    }

    pub fn offset_channels(&self) -> usize {
        self.offset_mode
            .mode()
            .map_or(0, |m| m.channels(self.dimension, self.taps()))
    }

    pub fn score_channels(&self) -> usize {
        self.score_mode.mode().map_or(0, |m| m.channels(self.s(), self.taps()))
    }
}

/// Named parameter groups, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    W,
    Bias,
    OffsetHead,
    ScoreHead,
    Compress,
    Expand,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::W,
        ParamGroup::Bias,
        ParamGroup::OffsetHead,
        ParamGroup::ScoreHead,
        ParamGroup::Compress,
        ParamGroup::Expand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::W => "w",
            ParamGroup::Bias => "bias",
            ParamGroup::OffsetHead => "offset_head",
            ParamGroup::ScoreHead => "score_head",
            ParamGroup::Compress => "compress",
            ParamGroup::Expand => "expand",
        }
    }
}

impl std::str::FromStr for ParamGroup {
    type Err = DstcError;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| DstcError::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kernel: WeightKernel,
    pub offset_head: Option<ConvHead>,
    pub score_head: Option<ConvHead>,
    /// `(module_channels, in_channels)`
    pub compress: Option<Tensor>,
    /// `(out_channels, module_channels)`
    pub expand: Option<Tensor>,
}

impl LayerParams {
    pub fn group(&self, g: ParamGroup) -> Option<&Tensor> {
        match g {
            ParamGroup::W => Some(&self.kernel.w),
            ParamGroup::Bias => Some(&self.kernel.bias),
            ParamGroup::OffsetHead => self.offset_head.as_ref().map(|h| &h.weights),
            ParamGroup::ScoreHead => self.score_head.as_ref().map(|h| &h.weights),
            ParamGroup::Compress => self.compress.as_ref(),
            ParamGroup::Expand => self.expand.as_ref(),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Option<&mut Tensor> {
        match g {
            ParamGroup::W => Some(&mut self.kernel.w),
            ParamGroup::Bias => Some(&mut self.kernel.bias),
            ParamGroup::OffsetHead => self.offset_head.as_mut().map(|h| &mut h.weights),
            ParamGroup::ScoreHead => self.score_head.as_mut().map(|h| &mut h.weights),
            ParamGroup::Compress => self.compress.as_mut(),
            ParamGroup::Expand => self.expand.as_mut(),
        }
    }

    /// Present groups in storage order.
    pub fn groups(&self) -> Vec<(ParamGroup, &Tensor)> {
        ParamGroup::ALL
            .into_iter()
            .filter_map(|g| self.group(g).map(|t| (g, t)))
            .collect()
    }

    /// Number of stored real parameters.
    pub fn census(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that every present tensor has the shape `cfg` implies.
    pub fn check(&self, cfg: &DstcConfig) -> Result<()> {
        let expected = zero_params(cfg)?;
        for g in ParamGroup::ALL {
            match (self.group(g), expected.group(g)) {
                (None, None) => {}
                (Some(a), Some(b)) if a.shape() == b.shape() => {}
                (a, b) => {
                    return shape_err(format!(
                        "parameter group {} has shape {:?}, config implies {:?}",
                        g.name(),
                        a.map(|t| t.shape().to_vec()),
                        b.map(|t| t.shape().to_vec())
                    ))
                }
            }
        }
        Ok(())
    }
}

/// All-zero parameters with the shapes `cfg` implies.
pub fn zero_params(cfg: &DstcConfig) -> Result<LayerParams> {
    cfg.validate()?;
    let (ci, co) = cfg.inner_channels();
    let d = cfg.dimension;
    let kernel = WeightKernel::zeros(ci, co, cfg.kernel_size, d)?;
    let offset_head = match cfg.offset_channels() {
        0 => None,
        c => Some(ConvHead::zeros(c, ci, d)?),
    };
    let score_head = match cfg.score_channels() {
        0 => None,
        c => Some(ConvHead::zeros(c, ci, d)?),
    };
    let (compress, expand) = match cfg.module_channels {
        Some(m) => (
            Some(Tensor::zeros(&[m, cfg.in_channels])?),
            Some(Tensor::zeros(&[cfg.out_channels, m])?),
        ),
        None => (None, None),
    };
    Ok(LayerParams {
        kernel,
        offset_head,
        score_head,
        compress,
        expand,
    })
}

/// Seeded initialization: `W` and bias uniform in `+-1/sqrt(C_i K^D)`, the
/// 1x1 pair uniform in `+-1/sqrt(fan_in)`, both heads zero.
pub fn init_layer(cfg: &DstcConfig, seed: u64) -> Result<LayerParams> {
    let mut p = zero_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, _) = cfg.inner_channels();
    let bound = 1.0 / ((ci * cfg.taps()) as f64).sqrt();
    p.kernel.w = Tensor::uniform(p.kernel.w.shape(), -bound, bound, &mut rng)?;
    p.kernel.bias = Tensor::uniform(p.kernel.bias.shape(), -bound, bound, &mut rng)?;
    if let Some(c) = p.compress.as_mut() {
        let b = 1.0 / (cfg.in_channels as f64).sqrt();
        *c = Tensor::uniform(c.shape(), -b, b, &mut rng)?;
    }
    if let Some(e) = p.expand.as_mut() {
        let b = 1.0 / (e.shape()[1] as f64).sqrt();
        *e = Tensor::uniform(e.shape(), -b, b, &mut rng)?;
    }
    Ok(p)
}

/// Intermediate values of a forward pass, kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Map entering the scatter and heads (compressed input when configured).
    pub inner_input: FeatureMap,
    pub offsets: Option<OffsetField>,
    pub scores: Option<ScoreField>,
    /// Scatter output plus bias, before the expand step.
    pub inner_output: FeatureMap,
    pub output: FeatureMap,
}

/// Source index of each output point under nearest-neighbour upsampling by
/// the stride.
pub(crate) fn nearest_sources(input: &Extents, output: &Extents, stride: usize) -> Vec<usize> {
    output
        .points()
        .map(|mut p| {
            for d in 0..input.dim() {
                p[d] = (p[d] / stride as i64).min(input.extent(d) as i64 - 1);
            }
            input.flat(&p).expect("clamped into the input")
        })
        .collect()
}

pub fn forward_cached(x: &FeatureMap, params: &LayerParams, cfg: &DstcConfig) -> Result<ForwardCache> {
    cfg.validate()?;
    if x.rank() != cfg.dimension + 1 || x.channels() != cfg.in_channels {
        return shape_err(format!(
            "input {:?} does not match {} channels in {}-D",
            x.shape(),
            cfg.in_channels,
            cfg.dimension
        ));
    }
    params.check(cfg)?;
    let grid = cfg.ref_grid()?;
    let map = cfg.location_map()?;

    let inner_input = match &params.compress {
        Some(c) => pointwise(x, c)?,
        None => x.clone(),
    };
    let offsets = match (cfg.offset_mode.mode(), &params.offset_head) {
        (Some(mode), Some(head)) => Some(compute_offsets(&inner_input, head, mode, cfg.dilation_base, &grid)?),
        _ => None,
    };
    let scores = match (cfg.score_mode.mode(), &params.score_head) {
        (Some(mode), Some(head)) => Some(compute_scores(&inner_input, head, mode, cfg.s(), &grid)?),
        _ => None,
    };
    let inner_output = match cfg.variant {
        Variant::Tc => tc_forward_chunked(&inner_input, &params.kernel, &map, &grid, cfg.chunk_size)?,
        _ => {
            let bank = match &scores {
                Some(_) => Some(cfg.bank()?),
                None => None,
            };
            let interp = match &scores {
                Some(sc) => Interpolation::Gaussian {
                    scores: sc,
                    bank: bank.as_ref(),
                },
                None => Interpolation::Bilinear,
            };
            dstc_forward_chunked(
                &inner_input,
                &params.kernel,
                &map,
                &grid,
                offsets.as_ref(),
                interp,
                cfg.chunk_size,
            )?
        }
    };
    let mut output = match &params.expand {
        Some(e) => pointwise(&inner_output, e)?,
        None => inner_output.clone(),
    };
    if cfg.skip {
        let input = Extents::new(x.spatial())?;
        let out_ext = Extents::new(output.spatial())?;
        let src = nearest_sources(&input, &out_ext, cfg.stride);
        let (ni, no) = (input.len(), out_ext.len());
        for c in 0..cfg.out_channels {
            for (i, &s) in src.iter().enumerate() {
                output.data_mut()[c * no + i] += x.data()[c * ni + s];
            }
        }
    }
    Ok(ForwardCache {
        inner_input,
        offsets,
        scores,
        inner_output,
        output,
    })
}

pub fn forward(x: &FeatureMap, params: &LayerParams, cfg: &DstcConfig) -> Result<FeatureMap> {
    Ok(forward_cached(x, params, cfg)?.output)
}

/// Parameter counts per component. `w`, `offsets` and `scores` follow the
/// per-variant table formulas; `plumbing` holds the optional 1x1 pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub w: usize,
    pub offsets: usize,
    pub scores: usize,
    pub plumbing: usize,
    pub total: usize,
    /// Dense score-head count under the alternative `3^D C_i s D K^D`
    /// reading; informational, not part of `total`.
    pub scores_with_dim_factor: usize,
}

pub fn parameter_count(cfg: &DstcConfig) -> ParamBreakdown {
    let (ci, co) = cfg.inner_channels();
    let d = cfg.dimension;
    let kd = cfg.taps();
    let head = 3usize.pow(d as u32) * ci;
    let s = cfg.s();
    let w = kd * ci * co + co;
    let offsets = match cfg.offset_mode {
        OffsetSetting::Off => 0,
        OffsetSetting::Dense => head * d * kd,
        OffsetSetting::Parametrized => head * (d + 1),
    };
    let (scores, scores_with_dim_factor) = match cfg.score_mode {
        ScoreSetting::None => (0, 0),
        ScoreSetting::Dense => (head * s * kd, head * s * d * kd),
        ScoreSetting::Shared => (head * s, head * s),
    };
    let plumbing = cfg
        .module_channels
        .map_or(0, |m| m * cfg.in_channels + cfg.out_channels * m);
    ParamBreakdown {
        w,
        offsets,
        scores,
        plumbing,
        total: w + offsets + scores + plumbing,
        scores_with_dim_factor,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor's binary record in the data file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub data_file: String,
    pub tensors: Vec<ManifestEntry>,
}

pub const PARAMS_DATA_FILE: &str = "params.bin";
pub const PARAMS_MANIFEST_FILE: &str = "params.json";

/// Writes `params.bin` (concatenated tensor records) and `params.json`
/// (name, shape, byte offset per tensor) into `dir`.
pub fn save_params(params: &LayerParams, dir: &Path) -> Result<ParamManifest> {
    fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (g, t) in params.groups() {
        tensors.push(ManifestEntry {
            name: g.name().to_string(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        t.write_binary(&mut data)?;
    }
    fs::File::create(dir.join(PARAMS_DATA_FILE))?.write_all(&data)?;
    let manifest = ParamManifest {
        data_file: PARAMS_DATA_FILE.to_string(),
        tensors,
    };
    fs::write(dir.join(PARAMS_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_params(dir: &Path, cfg: &DstcConfig) -> Result<LayerParams> {
    let manifest: ParamManifest = serde_json::from_str(&fs::read_to_string(dir.join(PARAMS_MANIFEST_FILE))?)?;
    let data = fs::read(dir.join(&manifest.data_file))?;
    let mut params = zero_params(cfg)?;
    for entry in &manifest.tensors {
        let group: ParamGroup = entry.name.parse()?;
        let start = entry.offset as usize;
        if start > data.len() {
            return Err(DstcError::Format(format!("offset {start} past end of data")));
        }
        let t = Tensor::read_binary(&data[start..])?;
        if t.shape() != entry.shape.as_slice() {
            return Err(DstcError::Format(format!("manifest shape mismatch for {}", entry.name)));
        }
        match params.group_mut(group) {
            Some(slot) if slot.shape() == t.shape() => *slot = t,
            _ => return shape_err(format!("stored {} does not fit the config", entry.name)),
        }
    }
    Ok(params)
}
