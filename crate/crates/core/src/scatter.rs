//! Forward scatter engines.
//!
//! Every input location `l` and kernel tap `n` produce a contribution vector
//! `v(c_o) = sum_{c_i} x(c_i, l) W(c_i, c_o, n)` that lands at a target point
//! in the output. The plain transposed convolution puts it on the integer
//! grid location; the deformable scatter moves it to a fractional point
//! `q(n, l)` and spreads it with an interpolation kernel.
//!
//! Accumulation order is l-major, then n, then window point. With a chunk
//! size the l range is split into chunks that are accumulated independently
//! and summed in chunk order, so results are reproducible for any thread
//! count.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::grid::{window_span, Extents, FPoint, IPoint, LocationMap, RefGrid, MAX_DIM};
use crate::heads::{OffsetField, OffsetMode, ScoreField};
use crate::kernels::{bilinear_weight, GaussianBank};
use crate::tensor::{FeatureMap, Tensor};

/// Transposed-convolution weights `(C_i, C_o, K, K[, K])` and bias `(C_o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightKernel {
    pub w: Tensor,
    pub bias: Tensor,
}

impl WeightKernel {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize, dim: usize) -> Result<Self> {
        let mut shape = vec![in_channels, out_channels];
        shape.extend(std::iter::repeat_n(kernel_size, dim));
        Ok(WeightKernel {
            w: Tensor::zeros(&shape)?,
            bias: Tensor::zeros(&[out_channels])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[1]
    }

    /// Number of kernel taps, `K^D`.
    pub fn taps(&self) -> usize {
        self.w.shape()[2..].iter().product()
    }

    pub fn check(&self, grid: &RefGrid) -> Result<()> {
        let s = self.w.shape();
        if s.len() != 2 + grid.dim() || s[2..].iter().any(|&k| k != grid.kernel_size()) {
            return shape_err(format!(
                "weights {s:?} do not match a {}-D kernel of size {}",
                grid.dim(),
                grid.kernel_size()
            ));
        }
        if self.bias.shape() != [self.out_channels()] {
            return shape_err(format!(
                "bias shape {:?} != [{}]",
                self.bias.shape(),
                self.out_channels()
            ));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn tap(&self, ci: usize, co: usize, n: usize) -> f64 {
        self.w.data()[(ci * self.out_channels() + co) * self.taps() + n]
    }
}

/// Interpolation used by the deformable scatter.
#[derive(Clone, Copy, Debug)]
pub enum Interpolation<'a> {
    Bilinear,
    Gaussian {
        scores: &'a ScoreField,
        bank: Option<&'a GaussianBank>,
    },
}

pub(crate) struct Geometry {
    pub input: Extents,
    pub output: Extents,
    pub out_shape: Vec<usize>,
}

pub(crate) fn geometry(x: &FeatureMap, w: &WeightKernel, map: &LocationMap, grid: &RefGrid) -> Result<Geometry> {
    w.check(grid)?;
    if x.rank() != 1 + grid.dim() || map.dim != grid.dim() {
        return shape_err(format!(
            "input {:?} / map dimension {} inconsistent with a {}-D grid",
            x.shape(),
            map.dim,
            grid.dim()
        ));
    }
    if x.channels() != w.in_channels() {
        return shape_err(format!(
            "input has {} channels, weights expect {}",
            x.channels(),
            w.in_channels()
        ));
    }
    let input = Extents::new(x.spatial())?;
    let spatial = map.output_shape(x.spatial(), grid.kernel_size())?;
    let output = Extents::new(&spatial)?;
    let mut out_shape = vec![w.out_channels()];
    out_shape.extend(spatial);
    Ok(Geometry {
        input,
        output,
        out_shape,
    })
}

fn check_offsets(offsets: &OffsetField, grid: &RefGrid, input: &Extents) -> Result<()> {
    let expected = offsets.mode.channels(grid.dim(), grid.len());
    if offsets.values.channels() != expected || offsets.values.spatial() != input.as_slice() {
        return shape_err(format!(
            "offset field {:?} does not match {:?} mode over input {:?}",
            offsets.values.shape(),
            offsets.mode,
            input.as_slice()
        ));
    }
    Ok(())
}

fn check_scores(scores: &ScoreField, bank: &GaussianBank, grid: &RefGrid, input: &Extents) -> Result<()> {
    if scores.s != bank.s() {
        return config_err(format!("score field has s={}, bank has {}", scores.s, bank.s()));
    }
    let expected = scores.mode.channels(scores.s, grid.len());
    if scores.raw.channels() != expected || scores.raw.spatial() != input.as_slice() {
        return shape_err(format!("score field {:?} does not match the layer", scores.raw.shape()));
    }
    Ok(())
}

/// Contribution of location `l`, tap `n`: `v(c_o) = sum_ci x(ci, l) W(ci, c_o, n)`.
#[inline]
pub(crate) fn contribution(x: &FeatureMap, w: &WeightKernel, nl: usize, l: usize, n: usize, v: &mut [f64]) {
    let ci_count = w.in_channels();
    for (co, slot) in v.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ci in 0..ci_count {
            acc += x.data()[ci * nl + l] * w.tap(ci, co, n);
        }
        *slot = acc;
    }
}

pub(crate) fn add_bias(y: &mut Tensor, bias: &Tensor) {
    let n = y.len() / y.channels();
    for (c, &b) in bias.data().iter().enumerate() {
        for v in &mut y.data_mut()[c * n..(c + 1) * n] {
            *v += b;
        }
    }
}

/// Splits `0..total` into chunks, accumulates each into its own buffer
/// (in parallel when there are several) and sums them in chunk order.
pub(crate) fn accumulate_chunks<F>(total: usize, chunk_size: usize, out_len: usize, body: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; out_len];
    if chunk_size == 0 || chunk_size >= total {
        body(0..total, &mut out);
        return out;
    }
    let starts: Vec<usize> = (0..total).step_by(chunk_size).collect();
    let partials: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut buf = vec![0.0; out_len];
            body(s..(s + chunk_size).min(total), &mut buf);
            buf
        })
        .collect();
    for part in partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
    out
}

/// Baseline transposed convolution, with `chunk_size = 0` meaning a single
/// serial pass.
pub fn tc_forward_chunked(
    x: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    chunk_size: usize,
) -> Result<FeatureMap> {
    let geo = geometry(x, w, map, grid)?;
    let (nl, np, co) = (geo.input.len(), geo.output.len(), w.out_channels());
    let k = grid.kernel_size();
    let data = accumulate_chunks(nl, chunk_size, co * np, |range, y| {
        let mut v = vec![0.0; co];
        for l in range {
            let p0 = geo.input.point(l);
            for (n, pn) in grid.points().iter().enumerate() {
                contribution(x, w, nl, l, n, &mut v);
                if let Some(idx) = geo.output.flat(&map.tc_location(&p0, pn, k)) {
                    for (c, &val) in v.iter().enumerate() {
                        y[c * np + idx] += val;
                    }
                }
            }
        }
    });
    let mut y = Tensor::from_vec(&geo.out_shape, data)?;
    add_bias(&mut y, &w.bias);
    Ok(y)
}

pub fn tc_forward(x: &FeatureMap, w: &WeightKernel, map: &LocationMap, grid: &RefGrid) -> Result<FeatureMap> {
    tc_forward_chunked(x, w, map, grid, 0)
}

/// Strided correlation, the adjoint of the bias-free transposed convolution:
/// `x(c_i, l) = sum_{c_o, n} W(c_i, c_o, n) y(c_o, t(l, n))`, gathering from
/// every in-bounds target `t(l, n)`. `input_spatial` fixes the result size.
pub fn strided_conv(
    y: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    input_spatial: &[usize],
) -> Result<FeatureMap> {
    w.check(grid)?;
    let input = Extents::new(input_spatial)?;
    let spatial = map.output_shape(input_spatial, grid.kernel_size())?;
    if y.channels() != w.out_channels() || y.spatial() != spatial.as_slice() {
        return shape_err(format!(
            "{:?} is not the transposed-convolution output shape for input {:?}",
            y.shape(),
            input_spatial
        ));
    }
    let output = Extents::new(&spatial)?;
    let (nl, np, ci_count, co_count) = (input.len(), output.len(), w.in_channels(), w.out_channels());
    let mut shape = vec![ci_count];
    shape.extend_from_slice(input_spatial);
    let mut x = Tensor::zeros(&shape)?;
    let xd = x.data_mut();
    for l in 0..nl {
        let p0 = input.point(l);
        for (n, pn) in grid.points().iter().enumerate() {
            let Some(idx) = output.flat(&map.tc_location(&p0, pn, grid.kernel_size())) else {
                continue;
            };
            for ci in 0..ci_count {
                let mut acc = 0.0;
                for co in 0..co_count {
                    acc += w.tap(ci, co, n) * y.data()[co * np + idx];
                }
                xd[ci * nl + l] += acc;
            }
        }
    }
    Ok(x)
}

/// Fractional target of tap `n` at input location `l` (grid point `p0`).
#[inline]
pub(crate) fn target_point(
    offsets: Option<&OffsetField>,
    map: &LocationMap,
    grid: &RefGrid,
    p0: &IPoint,
    l: usize,
    n: usize,
) -> FPoint {
    let dim = grid.dim();
    let pn = &grid.points()[n];
    let mut q = [0.0; MAX_DIM];
    match offsets {
        Some(f) if f.mode == OffsetMode::Parametrized => {
            let anchor = map.anchor(p0, grid.kernel_size());
            let delta = f.dilation(l);
            let shift = f.shift(l);
            for d in 0..dim {
                q[d] = anchor[d] as f64 + delta * pn[d] as f64 + shift[d];
            }
        }
        _ => {
            let t = map.tc_location(p0, pn, grid.kernel_size());
            let off = offsets.map(|f| f.dense_offset(n, l)).unwrap_or([0.0; MAX_DIM]);
            for d in 0..dim {
                q[d] = t[d] as f64 + off[d];
            }
        }
    }
    q
}

/// Target points `q(n, l)` for all taps at flat input location `l`.
pub fn offset_locations(l: usize, grid: &RefGrid, map: &LocationMap, offsets: &OffsetField) -> Result<Vec<FPoint>> {
    let input = offsets.extents()?;
    check_offsets(offsets, grid, &input)?;
    if l >= input.len() {
        return Err(crate::DstcError::Index(format!(
            "location {l} outside input of {} points",
            input.len()
        )));
    }
    let p0 = input.point(l);
    Ok((0..grid.len())
        .map(|n| target_point(Some(offsets), map, grid, &p0, l, n))
        .collect())
}

/// Resolved interpolation, validated against the layer geometry.
#[derive(Clone, Copy)]
pub(crate) enum Kernel<'a> {
    Bilinear,
    Gaussian(&'a ScoreField, &'a GaussianBank),
}

impl<'a> Kernel<'a> {
    pub(crate) fn resolve(interp: Interpolation<'a>, grid: &RefGrid, input: &Extents) -> Result<Self> {
        match interp {
            Interpolation::Bilinear => Ok(Kernel::Bilinear),
            Interpolation::Gaussian { bank: None, .. } => config_err("Gaussian interpolation requires a variance bank"),
            Interpolation::Gaussian {
                scores,
                bank: Some(bank),
            } => {
                check_scores(scores, bank, grid, input)?;
                Ok(Kernel::Gaussian(scores, bank))
            }
        }
    }

    pub(crate) fn window_size(&self) -> usize {
        match self {
            Kernel::Bilinear => 2,
            Kernel::Gaussian(_, bank) => bank.k_sigma(),
        }
    }
}

/// Window points (as flat output indices) and kernel weights for one target.
///
/// The Gaussian window is a box, so each normalized component factors into
/// per-axis terms; `fill` evaluates those and multiplies them out.
pub(crate) struct Spread {
    pub window: Vec<IPoint>,
    pub flat: Vec<usize>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    /// Normalized components, row-major `[j][window point]`.
    pub components: Vec<f64>,
    axis: Vec<f64>,
}

impl Spread {
    pub(crate) fn new(s: usize) -> Self {
        Spread {
            window: Vec::new(),
            flat: Vec::new(),
            weights: Vec::new(),
            scores: vec![0.0; s],
            components: Vec::new(),
            axis: Vec::new(),
        }
    }

    /// Fills window, flat indices and weights for target `q` of tap `n` at `l`.
    pub(crate) fn fill(&mut self, kernel: &Kernel, q: &FPoint, n: usize, l: usize, output: &Extents) {
        let dim = output.dim();
        let k = kernel.window_size();
        self.window.clear();
        self.flat.clear();
        self.weights.clear();
        self.components.clear();
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for d in 0..dim {
            let (a, b) = window_span(q[d], k);
            lo[d] = a.max(0);
            hi[d] = b.min(output.extent(d) as i64 - 1);
            if lo[d] > hi[d] {
                return;
            }
        }
        let mut p = lo;
        'outer: loop {
            self.window.push(p);
            self.flat.push(output.flat(&p).expect("window points are clipped"));
            let mut d = dim;
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                if p[d] < hi[d] {
                    p[d] += 1;
                    break;
                }
                p[d] = lo[d];
            }
        }
        match kernel {
            Kernel::Bilinear => {
                self.weights
                    .extend(self.window.iter().map(|p| bilinear_weight(q, p, dim)));
            }
            Kernel::Gaussian(scores, bank) => {
                scores.scores_at(n, l, &mut self.scores);
                let m = self.window.len();
                let s = bank.s();
                // axis[(j * dim + d) * k + i]: axis-d factor of component j at lo[d] + i
                self.axis.clear();
                self.axis.resize(s * dim * k, 0.0);
                for (j, &var) in bank.variances().iter().enumerate() {
                    for d in 0..dim {
                        let len = (hi[d] - lo[d] + 1) as usize;
                        let f = &mut self.axis[(j * dim + d) * k..(j * dim + d) * k + len];
                        let dist = |i: usize| ((lo[d] + i as i64) as f64 - q[d]).powi(2);
                        // shifting by the nearest point keeps tiny variances from underflowing
                        let dmin = (0..len).map(dist).fold(f64::INFINITY, f64::min);
                        let mut z = 0.0;
                        for (i, v) in f.iter_mut().enumerate() {
                            *v = (-(dist(i) - dmin) / (2.0 * var)).exp();
                            z += *v;
                        }
                        for v in f.iter_mut() {
                            *v /= z;
                        }
                    }
                }
                self.components.resize(s * m, 0.0);
                self.weights.resize(m, 0.0);
                for j in 0..s {
                    for (w, p) in self.window.iter().enumerate() {
                        let mut c = 1.0;
                        for d in 0..dim {
                            c *= self.axis[(j * dim + d) * k + (p[d] - lo[d]) as usize];
                        }
                        self.components[j * m + w] = c;
                        self.weights[w] += self.scores[j] * c;
                    }
                }
            }
        }
    }
}

/// Deformable, kernel-interpolated scatter. `offsets = None` keeps the
/// integer transposed-convolution targets.
#[allow(clippy::too_many_arguments)]
pub fn dstc_forward_chunked(
    x: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    offsets: Option<&OffsetField>,
    interp: Interpolation,
    chunk_size: usize,
) -> Result<FeatureMap> {
    let geo = geometry(x, w, map, grid)?;
    if let Some(f) = offsets {
        check_offsets(f, grid, &geo.input)?;
    }
    let kernel = Kernel::resolve(interp, grid, &geo.input)?;
    let s = match kernel {
        Kernel::Gaussian(sc, _) => sc.s,
        Kernel::Bilinear => 0,
    };
    let (nl, np, co) = (geo.input.len(), geo.output.len(), w.out_channels());
    let data = accumulate_chunks(nl, chunk_size, co * np, |range, y| {
        let mut v = vec![0.0; co];
        let mut spread = Spread::new(s);
        for l in range {
            let p0 = geo.input.point(l);
            for n in 0..grid.len() {
                contribution(x, w, nl, l, n, &mut v);
                let q = target_point(offsets, map, grid, &p0, l, n);
                spread.fill(&kernel, &q, n, l, &geo.output);
                for (&idx, &g) in spread.flat.iter().zip(&spread.weights) {
                    if g == 0.0 {
                        continue;
                    }
                    for (c, &val) in v.iter().enumerate() {
                        y[c * np + idx] += g * val;
                    }
                }
            }
        }
    });
    let mut y = Tensor::from_vec(&geo.out_shape, data)?;
    add_bias(&mut y, &w.bias);
    Ok(y)
}

pub fn dstc_forward(
    x: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    offsets: Option<&OffsetField>,
    interp: Interpolation,
) -> Result<FeatureMap> {
    dstc_forward_chunked(x, w, map, grid, offsets, interp, 0)
}

/// Ground-truth scatter by plain nested loops over every output point,
/// input location and tap, recomputing every kernel weight from its
/// definition.
pub fn scatter_oracle(
    x: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    offsets: Option<&OffsetField>,
    interp: Interpolation,
) -> Result<FeatureMap> {
    let geo = geometry(x, w, map, grid)?;
    if let Some(f) = offsets {
        check_offsets(f, grid, &geo.input)?;
    }
    let kernel = Kernel::resolve(interp, grid, &geo.input)?;
    let dim = grid.dim();
    let half = (grid.kernel_size() / 2) as f64;
    let mut y = Tensor::zeros(&geo.out_shape)?;
    let (nl, np) = (geo.input.len(), geo.output.len());

    for pi in 0..np {
        let p = geo.output.point(pi);
        for l in 0..nl {
            let p0 = geo.input.point(l);
            for (n, pn) in grid.points().iter().enumerate() {
                // target point
                let mut q = [0.0f64; MAX_DIM];
                for d in 0..dim {
                    let base = (map.stride[d] as i64 * p0[d] - map.padding[d] as i64) as f64;
                    let dil = map.base_dilation[d] as f64;
                    q[d] = match offsets {
                        Some(f) if f.mode == OffsetMode::Parametrized => {
                            let raw = f.values.data();
                            base + dil * half + (f.dilation_base + raw[l]) * pn[d] as f64 + raw[(1 + d) * nl + l]
                        }
                        Some(f) => base + dil * (half + pn[d] as f64) + f.values.data()[(n * dim + d) * nl + l],
                        None => base + dil * (half + pn[d] as f64),
                    };
                }
                let g = match kernel {
                    Kernel::Bilinear => {
                        let mut g = 1.0;
                        for d in 0..dim {
                            g *= (1.0 - (q[d] - p[d] as f64).abs()).max(0.0);
                        }
                        g
                    }
                    Kernel::Gaussian(scores, bank) => oracle_gaussian(&q, &p, n, l, scores, bank, &geo.output),
                };
                if g == 0.0 {
                    continue;
                }
                for c in 0..w.out_channels() {
                    for ci in 0..w.in_channels() {
                        let xv = x.data()[ci * nl + l];
                        let wv = w.w.data()[(ci * w.out_channels() + c) * grid.len() + n];
                        y.data_mut()[c * np + pi] += xv * wv * g;
                    }
                }
            }
        }
    }
    add_bias(&mut y, &w.bias);
    Ok(y)
}

fn oracle_gaussian(
    q: &FPoint,
    p: &IPoint,
    n: usize,
    l: usize,
    scores: &ScoreField,
    bank: &GaussianBank,
    output: &Extents,
) -> f64 {
    let dim = output.dim();
    let k = bank.k_sigma();
    let spans: Vec<(i64, i64)> = (0..dim).map(|d| window_span(q[d], k)).collect();
    if (0..dim).any(|d| p[d] < spans[d].0 || p[d] > spans[d].1) {
        return 0.0;
    }
    let nl = scores.raw.len() / scores.raw.channels();
    let group = match scores.mode {
        crate::heads::ScoreMode::Dense => n,
        crate::heads::ScoreMode::Shared => 0,
    };
    let dist = |r: &IPoint| -> f64 { (0..dim).map(|d| (r[d] as f64 - q[d]).powi(2)).sum() };
    let mut total = 0.0;
    for (j, &var) in bank.variances().iter().enumerate() {
        let score = scores.normalized.data()[(group * scores.s + j) * nl + l];
        // normalizer over the clipped window, by enumerating every output point
        let mut z = 0.0;
        for r in output.points() {
            if (0..dim).all(|d| r[d] >= spans[d].0 && r[d] <= spans[d].1) {
                z += (-dist(&r) / (2.0 * var)).exp();
            }
        }
        total += score * (-dist(p) / (2.0 * var)).exp() / z;
    }
    total
}
