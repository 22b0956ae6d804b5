//! Reverse-mode gradients of the layer, a central finite-difference oracle
//! and the gradcheck driver that compares the two.
//!
//! Window membership is held fixed when differentiating; each Gaussian
//! normalizer is differentiated through its dependence on `q`. Bilinear
//! weights use slope 0 at exact integer alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::grid::{window_boundary_distance, Extents, FPoint, LocationMap, RefGrid, MAX_DIM};
use crate::heads::{conv_same_backward, pointwise_backward, OffsetField, OffsetMode};
use crate::kernels::{bilinear_weight_grad, gaussian_mixture_vjp, GaussianBank};
use crate::layer::{
    forward, forward_cached, init_layer, nearest_sources, DstcConfig, ForwardCache, LayerParams, ParamGroup,
};
use crate::scatter::{
    accumulate_chunks, contribution, geometry, target_point, Interpolation, Kernel, Spread, WeightKernel,
};
use crate::tensor::{FeatureMap, Tensor};

/// Gradients of `<upstream, forward(x)>` with respect to the input and every
/// parameter. `d_params` mirrors the layout of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub d_x: FeatureMap,
    pub d_params: LayerParams,
}

impl GradBundle {
    pub fn get(&self, which: ParamSelector) -> Option<&Tensor> {
        match which {
            ParamSelector::Input => Some(&self.d_x),
            ParamSelector::Group(g) => self.d_params.group(g),
        }
    }

    pub fn get_mut(&mut self, which: ParamSelector) -> Option<&mut Tensor> {
        match which {
            ParamSelector::Input => Some(&mut self.d_x),
            ParamSelector::Group(g) => self.d_params.group_mut(g),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_x.is_finite() && self.d_params.groups().iter().all(|(_, t)| t.is_finite())
    }
}

/// Selects the input map or one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamSelector {
    Input,
    Group(ParamGroup),
}

impl ParamSelector {
    pub fn name(self) -> &'static str {
        match self {
            ParamSelector::Input => "x",
            ParamSelector::Group(g) => g.name(),
        }
    }
}

pub(crate) struct ScatterGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub d_offsets: Option<Tensor>,
    /// With respect to the normalized scores.
    pub d_scores: Option<Tensor>,
}

/// Reverse pass of the bias-free scatter for upstream `u` on the output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter_backward(
    x: &FeatureMap,
    w: &WeightKernel,
    map: &LocationMap,
    grid: &RefGrid,
    offsets: Option<&OffsetField>,
    interp: Interpolation,
    u: &FeatureMap,
    chunk_size: usize,
) -> Result<ScatterGrads> {
    let geo = geometry(x, w, map, grid)?;
    if u.shape() != geo.out_shape.as_slice() {
        return shape_err(format!("upstream {:?} != output {:?}", u.shape(), geo.out_shape));
    }
    let kernel = Kernel::resolve(interp, grid, &geo.input)?;
    let (nl, np, ci_count, co_count, taps) = (
        geo.input.len(),
        geo.output.len(),
        w.in_channels(),
        w.out_channels(),
        grid.len(),
    );
    let dim = grid.dim();
    let (s, sc_len) = match kernel {
        Kernel::Gaussian(sc, _) => (sc.s, sc.raw.len()),
        Kernel::Bilinear => (0, 0),
    };
    let off_len = offsets.map_or(0, |f| f.values.len());
    let o_dw = ci_count * nl;
    let o_off = o_dw + w.w.len();
    let o_sc = o_off + off_len;
    let total = o_sc + sc_len;
    let ud = u.data();

    let flat = accumulate_chunks(nl, chunk_size, total, |range, buf| {
        let mut v = vec![0.0; co_count];
        let mut dv = vec![0.0; co_count];
        let mut dg = Vec::new();
        let mut spread = Spread::new(s);
        for l in range {
            let p0 = geo.input.point(l);
            for n in 0..taps {
                contribution(x, w, nl, l, n, &mut v);
                let q = target_point(offsets, map, grid, &p0, l, n);
                spread.fill(&kernel, &q, n, l, &geo.output);
                dg.clear();
                dv.iter_mut().for_each(|e| *e = 0.0);
                for (&idx, &g) in spread.flat.iter().zip(&spread.weights) {
                    let mut acc = 0.0;
                    for c in 0..co_count {
                        let uc = ud[c * np + idx];
                        acc += v[c] * uc;
                        dv[c] += g * uc;
                    }
                    dg.push(acc);
                }
                for ci in 0..ci_count {
                    let xv = x.data()[ci * nl + l];
                    let mut acc = 0.0;
                    for co in 0..co_count {
                        acc += dv[co] * w.tap(ci, co, n);
                        buf[o_dw + (ci * co_count + co) * taps + n] += xv * dv[co];
                    }
                    buf[ci * nl + l] += acc;
                }
                let mut dq = [0.0; MAX_DIM];
                match kernel {
                    Kernel::Bilinear => {
                        if offsets.is_some() {
                            for (p, &gv) in spread.window.iter().zip(&dg) {
                                let gr = bilinear_weight_grad(&q, p, dim);
                                for d in 0..dim {
                                    dq[d] += gv * gr[d];
                                }
                            }
                        }
                    }
                    Kernel::Gaussian(sc, bank) => {
                        let (ds, gq) = gaussian_mixture_vjp(
                            &q,
                            &spread.window,
                            &spread.scores,
                            bank,
                            dim,
                            &spread.components,
                            &dg,
                        );
                        dq = gq;
                        let group = match sc.mode {
                            crate::heads::ScoreMode::Dense => n,
                            crate::heads::ScoreMode::Shared => 0,
                        };
                        for (j, d) in ds.iter().enumerate() {
                            buf[o_sc + (group * s + j) * nl + l] += d;
                        }
                    }
                }
                if let Some(f) = offsets {
                    match f.mode {
                        OffsetMode::Dense => {
                            for d in 0..dim {
                                buf[o_off + (n * dim + d) * nl + l] += dq[d];
                            }
                        }
                        OffsetMode::Parametrized => {
                            let pn = &grid.points()[n];
                            for d in 0..dim {
                                buf[o_off + l] += dq[d] * pn[d] as f64;
                                buf[o_off + (1 + d) * nl + l] += dq[d];
                            }
                        }
                    }
                }
            }
        }
    });

    let dx = Tensor::from_vec(x.shape(), flat[..o_dw].to_vec())?;
    let dw = Tensor::from_vec(w.w.shape(), flat[o_dw..o_off].to_vec())?;
    let d_offsets = match offsets {
        Some(f) => Some(Tensor::from_vec(f.values.shape(), flat[o_off..o_sc].to_vec())?),
        None => None,
    };
    let d_scores = match kernel {
        Kernel::Gaussian(sc, _) => Some(Tensor::from_vec(sc.raw.shape(), flat[o_sc..].to_vec())?),
        Kernel::Bilinear => None,
    };
    Ok(ScatterGrads {
        dx,
        dw,
        d_offsets,
        d_scores,
    })
}

fn channel_sums(t: &Tensor) -> Vec<f64> {
    let n = t.len() / t.channels();
    t.data().chunks(n).map(|c| c.iter().sum()).collect()
}

pub fn backward(x: &FeatureMap, params: &LayerParams, cfg: &DstcConfig, upstream: &FeatureMap) -> Result<GradBundle> {
    let cache = forward_cached(x, params, cfg)?;
    backward_with_cache(x, params, cfg, &cache, upstream)
}

/// Reverse pass reusing the intermediates of a forward pass on the same
/// input and parameters.
pub fn backward_with_cache(
    x: &FeatureMap,
    params: &LayerParams,
    cfg: &DstcConfig,
    cache: &ForwardCache,
    upstream: &FeatureMap,
) -> Result<GradBundle> {
    if upstream.shape() != cache.output.shape() {
        return shape_err(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            cache.output.shape()
        ));
    }
    let grid = cfg.ref_grid()?;
    let map = cfg.location_map()?;
    let mut d_params = crate::layer::zero_params(cfg)?;

    let d_inner = match &params.expand {
        Some(e) => {
            let (d, de) = pointwise_backward(&cache.inner_output, e, upstream)?;
            d_params.expand = Some(de);
            d
        }
        None => upstream.clone(),
    };
    d_params.kernel.bias = Tensor::from_vec(&[d_inner.channels()], channel_sums(&d_inner))?;

    let bank: Option<GaussianBank> = match &cache.scores {
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
    let sg = scatter_backward(
        &cache.inner_input,
        &params.kernel,
        &map,
        &grid,
        cache.offsets.as_ref(),
        interp,
        &d_inner,
        cfg.chunk_size,
    )?;
    d_params.kernel.w = sg.dw;
    let mut d_inner_input = sg.dx;

    if let (Some(head), Some(d_off)) = (&params.offset_head, &sg.d_offsets) {
        let (dxi, dh) = conv_same_backward(&cache.inner_input, head, d_off)?;
        d_inner_input.axpy(1.0, &dxi)?;
        d_params.offset_head.as_mut().expect("shape follows config").weights = dh;
    }
    if let (Some(head), Some(sc), Some(d_norm)) = (&params.score_head, &cache.scores, &sg.d_scores) {
        let d_raw = sc.raw_grad(d_norm)?;
        let (dxi, dh) = conv_same_backward(&cache.inner_input, head, &d_raw)?;
        d_inner_input.axpy(1.0, &dxi)?;
        d_params.score_head.as_mut().expect("shape follows config").weights = dh;
    }

    let mut d_x = match &params.compress {
        Some(c) => {
            let (d, dc) = pointwise_backward(x, c, &d_inner_input)?;
            d_params.compress = Some(dc);
            d
        }
        None => d_inner_input,
    };
    if cfg.skip {
        let input = Extents::new(x.spatial())?;
        let output = Extents::new(upstream.spatial())?;
        let src = nearest_sources(&input, &output, cfg.stride);
        let (ni, no) = (input.len(), output.len());
        let dxd = d_x.data_mut();
        for c in 0..cfg.out_channels {
            for (i, &s) in src.iter().enumerate() {
                dxd[c * ni + s] += upstream.data()[c * no + i];
            }
        }
    }
    Ok(GradBundle { d_x, d_params })
}

/// Mean squared error against `target` and its gradient bundle.
pub fn mse_loss_and_grad(
    x: &FeatureMap,
    params: &LayerParams,
    cfg: &DstcConfig,
    target: &FeatureMap,
) -> Result<(f64, GradBundle)> {
    let cache = forward_cached(x, params, cfg)?;
    if target.shape() != cache.output.shape() {
        return shape_err(format!(
            "target {:?} does not match output {:?}",
            target.shape(),
            cache.output.shape()
        ));
    }
    let n = target.len() as f64;
    let mut diff = cache.output.clone();
    diff.axpy(-1.0, target)?;
    let loss = diff.dot(&diff)? / n;
    let upstream = diff.scale(2.0 / n);
    let grads = backward_with_cache(x, params, cfg, &cache, &upstream)?;
    Ok((loss, grads))
}

/// `(f(theta + h) - f(theta - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, theta: f64, h: f64) -> f64 {
    (f(theta + h) - f(theta - h)) / (2.0 * h)
}

fn objective(x: &FeatureMap, params: &LayerParams, cfg: &DstcConfig, upstream: &FeatureMap) -> Result<f64> {
    forward(x, params, cfg)?.dot(upstream)
}

/// Central finite differences of `<upstream, forward(x)>` for every scalar
/// of the selected tensor. Probes run in parallel.
pub fn fd_gradient(
    x: &FeatureMap,
    params: &LayerParams,
    cfg: &DstcConfig,
    upstream: &FeatureMap,
    which: ParamSelector,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return config_err("finite-difference step must be positive");
    }
    let base = match which {
        ParamSelector::Input => x,
        ParamSelector::Group(g) => params
            .group(g)
            .ok_or_else(|| crate::DstcError::Config(format!("layer has no {} group", g.name())))?,
    };
    let shape = base.shape().to_vec();
    let probe = |i: usize, delta: f64| -> Result<f64> {
        let mut xp = x.clone();
        let mut pp = params.clone();
        let t = match which {
            ParamSelector::Input => &mut xp,
            ParamSelector::Group(g) => pp.group_mut(g).expect("checked above"),
        };
        t.data_mut()[i] += delta;
        objective(&xp, &pp, cfg, upstream)
    };
    let values: Result<Vec<f64>> = (0..base.len())
        .into_par_iter()
        .map(|i| Ok((probe(i, h)? - probe(i, -h)?) / (2.0 * h)))
        .collect();
    Tensor::from_vec(&shape, values?)
}

/// Every target point `q(n, l)` of a forward pass.
pub fn target_points(cache: &ForwardCache, cfg: &DstcConfig) -> Result<Vec<FPoint>> {
    let grid = cfg.ref_grid()?;
    let map = cfg.location_map()?;
    let input = Extents::new(cache.inner_input.spatial())?;
    let mut out = Vec::with_capacity(input.len() * grid.len());
    for l in 0..input.len() {
        let p0 = input.point(l);
        for n in 0..grid.len() {
            out.push(target_point(cache.offsets.as_ref(), &map, &grid, &p0, l, n));
        }
    }
    Ok(out)
}

/// Smallest distance from any target coordinate to a point where the
/// interpolation stops being smooth (a bilinear kink or a Gaussian window
/// boundary). Infinite when targets are fixed integers.
pub fn min_kink_distance(cache: &ForwardCache, cfg: &DstcConfig) -> Result<f64> {
    if cache.offsets.is_none() {
        return Ok(f64::INFINITY);
    }
    let k = if cache.scores.is_some() { cfg.k_sigma } else { 2 };
    Ok(target_points(cache, cfg)?
        .iter()
        .flat_map(|q| {
            q[..cfg.dimension]
                .iter()
                .map(|&c| window_boundary_distance(c, k))
                .collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min))
}

/// Worst per-entry relative error, each entry measured against
/// `max(|a|, |f|, floor * scale)` where `scale` is the largest magnitude in
/// the group.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor * scale))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Tolerance for `x`, `w`, `bias` and `expand`.
    pub tol_linear: f64,
    /// Tolerance for the head and compress groups.
    pub tol_nonlinear: f64,
    /// Required distance of every target coordinate from kinks and window
    /// boundaries.
    pub kink_margin: f64,
    /// Head weights are drawn uniformly from `+-head_scale`.
    pub head_scale: f64,
    /// Relative-error floor, as a fraction of each group's largest gradient.
    pub rel_floor: f64,
    /// Input spatial extent; defaults to 4 per axis in 2-D and 3 in 3-D.
    pub input_spatial: Option<Vec<usize>>,
    pub max_attempts: usize,
    /// Test hook: doubles the largest analytic entry of this group.
    #[serde(skip)]
    pub corrupt: Option<ParamSelector>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tol_linear: 1e-5,
            tol_nonlinear: 1e-4,
            kink_margin: 1e-3,
            head_scale: 0.3,
            rel_floor: 1e-3,
            input_spatial: None,
            max_attempts: 500,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: DstcConfig,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    /// Samples drawn before one cleared the kink margin.
    pub attempts: usize,
    pub min_kink_distance: Option<f64>,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

/// One randomized gradcheck problem: input, parameters with nonzero heads,
/// and an upstream direction.
#[derive(Clone, Debug)]
pub struct GradcheckSample {
    pub x: FeatureMap,
    pub params: LayerParams,
    pub upstream: FeatureMap,
    pub attempts: usize,
    pub min_kink_distance: f64,
}

/// Draws samples from a stream seeded by `seed` until one keeps every target
/// at least `kink_margin` away from a kink.
pub fn draw_gradcheck_sample(cfg: &DstcConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckSample> {
    cfg.validate()?;
    let spatial = opts
        .input_spatial
        .clone()
        .unwrap_or_else(|| vec![if cfg.dimension == 2 { 4 } else { 3 }; cfg.dimension]);
    let mut x_shape = vec![cfg.in_channels];
    x_shape.extend_from_slice(&spatial);
    let mut out_shape = vec![cfg.out_channels];
    out_shape.extend(cfg.output_spatial(&spatial)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=opts.max_attempts.max(1) {
        let x = Tensor::uniform(&x_shape, -1.0, 1.0, &mut rng)?;
        let mut params = init_layer(cfg, rng.gen())?;
        for g in [ParamGroup::OffsetHead, ParamGroup::ScoreHead] {
            if let Some(t) = params.group_mut(g) {
                *t = Tensor::uniform(t.shape(), -opts.head_scale, opts.head_scale, &mut rng)?;
            }
        }
        let upstream = Tensor::uniform(&out_shape, -1.0, 1.0, &mut rng)?;
        let cache = forward_cached(&x, &params, cfg)?;
        let dist = min_kink_distance(&cache, cfg)?;
        if dist >= opts.kink_margin {
            return Ok(GradcheckSample {
                x,
                params,
                upstream,
                attempts: attempt,
                min_kink_distance: dist,
            });
        }
    }
    config_err(format!(
        "no sample in {} attempts kept targets {} away from kinks",
        opts.max_attempts, opts.kink_margin
    ))
}

/// Compares `backward` against `fd_gradient` on every present group.
pub fn gradcheck(cfg: &DstcConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let sample = draw_gradcheck_sample(cfg, seed, opts)?;
    let mut analytic = backward(&sample.x, &sample.params, cfg, &sample.upstream)?;
    if let Some(which) = opts.corrupt {
        if let Some(t) = analytic.get_mut(which) {
            let (i, _) =
                t.data().iter().enumerate().fold(
                    (0, -1.0),
                    |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best },
                );
            t.data_mut()[i] *= 2.0;
        }
    }
    let mut selectors = vec![ParamSelector::Input];
    selectors.extend(sample.params.groups().into_iter().map(|(g, _)| ParamSelector::Group(g)));
    let mut groups = Vec::new();
    for which in selectors {
        let fd = fd_gradient(&sample.x, &sample.params, cfg, &sample.upstream, which, opts.h)?;
        let a = analytic.get(which).expect("present in both");
        let err = max_relative_error(a, &fd, opts.rel_floor);
        let tol = match which {
            ParamSelector::Input
            | ParamSelector::Group(ParamGroup::W)
            | ParamSelector::Group(ParamGroup::Bias)
            | ParamSelector::Group(ParamGroup::Expand) => opts.tol_linear,
            _ => opts.tol_nonlinear,
        };
        groups.push(GroupReport {
            name: which.name().to_string(),
            max_rel_err: err,
            tol,
            pass: err < tol,
        });
    }
    Ok(GradcheckReport {
        config: cfg.clone(),
        seed,
        input_shape: sample.x.shape().to_vec(),
        attempts: sample.attempts,
        min_kink_distance: sample.min_kink_distance.is_finite().then_some(sample.min_kink_distance),
        pass: groups.iter().all(|g| g.pass),
        groups,
    })
}
