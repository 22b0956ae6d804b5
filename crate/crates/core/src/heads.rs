//! Auxiliary convolution heads.
//!
//! An offset head regresses per-location target displacements, a score head
//! regresses per-location mixture scores for the Gaussian bank. Both are
//! bias-free stride-1 convolutions with a 3x3 (3x3x3) kernel and zero
//! padding, so they preserve the input's spatial shape.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::grid::{Extents, FPoint, LocationMap, RefGrid, MAX_DIM};
use crate::tensor::{FeatureMap, Tensor};

/// Extent of the head kernels along every axis.
pub const HEAD_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvHead {
    /// `(out_channels, in_channels, 3, 3[, 3])`
    pub weights: Tensor,
}

impl ConvHead {
    pub fn zeros(out_channels: usize, in_channels: usize, dim: usize) -> Result<Self> {
        let mut shape = vec![out_channels, in_channels];
        shape.extend(std::iter::repeat_n(HEAD_KERNEL, dim));
        Ok(ConvHead {
            weights: Tensor::zeros(&shape)?,
        })
    }

    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if !(4..=5).contains(&s.len()) || s[2..].iter().any(|&k| k != HEAD_KERNEL) {
            return shape_err(format!("head weights must be (out, in, 3, 3[, 3]), got {s:?}"));
        }
        Ok(ConvHead { weights })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.weights.rank() - 2
    }
}

fn head_taps(dim: usize) -> Vec<[i64; MAX_DIM]> {
    let total = HEAD_KERNEL.pow(dim as u32);
    (0..total)
        .map(|mut flat| {
            let mut p = [0; MAX_DIM];
            for d in (0..dim).rev() {
                p[d] = (flat % HEAD_KERNEL) as i64 - 1;
                flat /= HEAD_KERNEL;
            }
            p
        })
        .collect()
}

fn check_head_input(x: &FeatureMap, head: &ConvHead) -> Result<Extents> {
    let ext = Extents::new(x.spatial())?;
    if head.dim() != ext.dim() {
        return shape_err(format!(
            "head is {}-D but the feature map is {}-D",
            head.dim(),
            ext.dim()
        ));
    }
    if x.channels() != head.in_channels() {
        return shape_err(format!(
            "feature map has {} channels, head expects {}",
            x.channels(),
            head.in_channels()
        ));
    }
    Ok(ext)
}

/// Stride-1, zero-padded 3x3(x3) correlation:
/// `out(c, p) = sum_{ci, t} x(ci, p + t) * w(c, ci, t)`.
pub fn conv_same(x: &FeatureMap, head: &ConvHead) -> Result<FeatureMap> {
    let ext = check_head_input(x, head)?;
    let (co, ci) = (head.out_channels(), head.in_channels());
    let taps = head_taps(ext.dim());
    let n = ext.len();
    let mut shape = vec![co];
    shape.extend_from_slice(ext.as_slice());
    let mut out = Tensor::zeros(&shape)?;
    // source index of every (tap, location), or usize::MAX in the padding
    let sources = tap_sources(&ext, &taps);
    let (xd, wd) = (x.data(), head.weights.data());
    let od = out.data_mut();
    for c in 0..co {
        for i in 0..ci {
            let xs = &xd[i * n..(i + 1) * n];
            for (t, src) in sources.iter().enumerate() {
                let w = wd[(c * ci + i) * taps.len() + t];
                if w == 0.0 {
                    continue;
                }
                let os = &mut od[c * n..(c + 1) * n];
                for (o, &s) in os.iter_mut().zip(src) {
                    if s != usize::MAX {
                        *o += w * xs[s];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn tap_sources(ext: &Extents, taps: &[[i64; MAX_DIM]]) -> Vec<Vec<usize>> {
    taps.iter()
        .map(|t| {
            ext.points()
                .map(|p| {
                    let mut s = p;
                    for d in 0..ext.dim() {
                        s[d] += t[d];
                    }
                    ext.flat(&s).unwrap_or(usize::MAX)
                })
                .collect()
        })
        .collect()
}

/// Reverse pass of [`conv_same`]: returns `(d_x, d_weights)` for an upstream
/// gradient `d_out`.
pub fn conv_same_backward(x: &FeatureMap, head: &ConvHead, d_out: &FeatureMap) -> Result<(FeatureMap, Tensor)> {
    let ext = check_head_input(x, head)?;
    let (co, ci) = (head.out_channels(), head.in_channels());
    if d_out.channels() != co || d_out.spatial() != ext.as_slice() {
        return shape_err(format!("upstream shape {:?} does not match head output", d_out.shape()));
    }
    let taps = head_taps(ext.dim());
    let sources = tap_sources(&ext, &taps);
    let n = ext.len();
    let mut dx = Tensor::zeros(x.shape())?;
    let mut dw = Tensor::zeros(head.weights.shape())?;
    let (xd, wd, ud) = (x.data(), head.weights.data(), d_out.data());
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for c in 0..co {
            let us = &ud[c * n..(c + 1) * n];
            for i in 0..ci {
                let xs = &xd[i * n..(i + 1) * n];
                for (t, src) in sources.iter().enumerate() {
                    let widx = (c * ci + i) * taps.len() + t;
                    let w = wd[widx];
                    let mut acc = 0.0;
                    for (&u, &s) in us.iter().zip(src) {
                        if s != usize::MAX {
                            acc += u * xs[s];
                            dxd[i * n + s] += w * u;
                        }
                    }
                    dwd[widx] += acc;
                }
            }
        }
    }
    Ok((dx, dw))
}

/// 1x1 channel mixing, `out(o, p) = sum_i w(o, i) x(i, p)`; `w` is `(out, in)`.
pub fn pointwise(x: &FeatureMap, w: &Tensor) -> Result<FeatureMap> {
    if w.rank() != 2 || w.shape()[1] != x.channels() {
        return shape_err(format!(
            "1x1 weights {:?} do not match {} input channels",
            w.shape(),
            x.channels()
        ));
    }
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let n = x.len() / ci;
    let mut shape = x.shape().to_vec();
    shape[0] = co;
    let mut out = Tensor::zeros(&shape)?;
    let od = out.data_mut();
    for o in 0..co {
        for i in 0..ci {
            let a = w.data()[o * ci + i];
            for (dst, src) in od[o * n..(o + 1) * n].iter_mut().zip(&x.data()[i * n..(i + 1) * n]) {
                *dst += a * src;
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`pointwise`]: `(d_x, d_w)`.
pub fn pointwise_backward(x: &FeatureMap, w: &Tensor, d_out: &FeatureMap) -> Result<(FeatureMap, Tensor)> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    if d_out.channels() != co || d_out.spatial() != x.spatial() {
        return shape_err("upstream shape does not match 1x1 output");
    }
    let n = x.len() / ci;
    let mut dx = Tensor::zeros(x.shape())?;
    let mut dw = Tensor::zeros(w.shape())?;
    for o in 0..co {
        let us = &d_out.data()[o * n..(o + 1) * n];
        for i in 0..ci {
            let xs = &x.data()[i * n..(i + 1) * n];
            dw.data_mut()[o * ci + i] = us.iter().zip(xs).map(|(u, v)| u * v).sum();
            let a = w.data()[o * ci + i];
            for (dst, u) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(us) {
                *dst += a * u;
            }
        }
    }
    Ok((dx, dw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetMode {
    /// `D` displacement channels per kernel tap.
    Dense,
    /// One dilation channel plus `D` shift channels, shared by every tap.
    Parametrized,
}

impl OffsetMode {
    pub fn channels(self, dim: usize, taps: usize) -> usize {
        match self {
            OffsetMode::Dense => dim * taps,
            OffsetMode::Parametrized => 1 + dim,
        }
    }
}

/// Offsets regressed by the offset head.
///
/// Dense channel `n * D + d` holds the axis-`d` displacement of tap `n`.
/// Parametrized channel 0 holds the raw dilation (effective dilation is
/// `dilation_base + raw`), channels `1..=D` the rigid shift.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub mode: OffsetMode,
    pub values: Tensor,
    pub dilation_base: f64,
}

impl OffsetField {
    pub fn dim(&self) -> usize {
        self.values.rank() - 1
    }

    pub fn extents(&self) -> Result<Extents> {
        Extents::new(self.values.spatial())
    }

    fn locations(&self) -> usize {
        self.values.len() / self.values.channels()
    }

    /// Displacement of tap `n` at flat input location `l` (dense mode).
    #[inline]
    pub fn dense_offset(&self, n: usize, l: usize) -> FPoint {
        let dim = self.dim();
        let nl = self.locations();
        let mut out = [0.0; MAX_DIM];
        for (d, o) in out.iter_mut().enumerate().take(dim) {
            *o = self.values.data()[(n * dim + d) * nl + l];
        }
        out
    }

    /// Effective dilation at `l` (parametrized mode).
    #[inline]
    pub fn dilation(&self, l: usize) -> f64 {
        self.dilation_base + self.values.data()[l]
    }

    /// Rigid shift at `l` (parametrized mode).
    #[inline]
    pub fn shift(&self, l: usize) -> FPoint {
        let nl = self.locations();
        let mut out = [0.0; MAX_DIM];
        for (d, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.values.data()[(1 + d) * nl + l];
        }
        out
    }
}

/// Runs the offset head and wraps the result.
pub fn compute_offsets(
    x: &FeatureMap,
    head: &ConvHead,
    mode: OffsetMode,
    dilation_base: f64,
    grid: &RefGrid,
) -> Result<OffsetField> {
    let expected = mode.channels(grid.dim(), grid.len());
    if head.out_channels() != expected {
        return config_err(format!(
            "{mode:?} offsets need {expected} head channels, head has {}",
            head.out_channels()
        ));
    }
    Ok(OffsetField {
        mode,
        values: conv_same(x, head)?,
        dilation_base,
    })
}

/// Target points `q(n, l)` for every tap under a parametrized field:
/// `anchor(l) + dilation(l) * p_n + shift(l)`.
pub fn expand_parametrized_offsets(
    field: &OffsetField,
    grid: &RefGrid,
    l: usize,
    map: &LocationMap,
) -> Result<Vec<FPoint>> {
    if field.mode != OffsetMode::Parametrized {
        return config_err("expected a parametrized offset field");
    }
    let ext = field.extents()?;
    let anchor = map.anchor(&ext.point(l), grid.kernel_size());
    let delta = field.dilation(l);
    let shift = field.shift(l);
    Ok(grid
        .points()
        .iter()
        .map(|pn| {
            let mut q = [0.0; MAX_DIM];
            for d in 0..grid.dim() {
                q[d] = anchor[d] as f64 + delta * pn[d] as f64 + shift[d];
            }
            q
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `s` scores per kernel tap.
    Dense,
    /// `s` scores shared by all taps at a location.
    Shared,
}

impl ScoreMode {
    pub fn channels(self, s: usize, taps: usize) -> usize {
        match self {
            ScoreMode::Dense => s * taps,
            ScoreMode::Shared => s,
        }
    }
}

/// Mixture scores. Raw channel `g * s + j` is component `j` of group `g`,
/// where a group is a tap (dense) or the single shared group. Normalized
/// with a sigmoid for `s = 1`, a softmax over each group otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub mode: ScoreMode,
    pub s: usize,
    pub raw: Tensor,
    pub normalized: Tensor,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ScoreField {
    pub fn from_raw(raw: Tensor, mode: ScoreMode, s: usize) -> Result<Self> {
        if s == 0 {
            return config_err("score field needs s >= 1");
        }
        if !raw.channels().is_multiple_of(s) {
            return shape_err("raw score channels are not a multiple of s");
        }
        let normalized = if s == 1 {
            raw.map(sigmoid)
        } else {
            let groups = raw.channels() / s;
            let nl = raw.len() / raw.channels();
            let mut out = raw.clone();
            let rd = raw.data();
            let od = out.data_mut();
            for g in 0..groups {
                for l in 0..nl {
                    let idx = |j: usize| (g * s + j) * nl + l;
                    let m = (0..s).map(|j| rd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..s).map(|j| (rd[idx(j)] - m).exp()).sum();
                    for j in 0..s {
                        od[idx(j)] = (rd[idx(j)] - m).exp() / z;
                    }
                }
            }
            out
        };
        Ok(ScoreField {
            mode,
            s,
            raw,
            normalized,
        })
    }

    fn locations(&self) -> usize {
        self.raw.len() / self.raw.channels()
    }

    /// Normalized scores for tap `n` at location `l`, written into `out`.
    #[inline]
    pub fn scores_at(&self, n: usize, l: usize, out: &mut [f64]) {
        let g = match self.mode {
            ScoreMode::Dense => n,
            ScoreMode::Shared => 0,
        };
        let nl = self.locations();
        for (j, o) in out.iter_mut().enumerate().take(self.s) {
            *o = self.normalized.data()[(g * self.s + j) * nl + l];
        }
    }

    /// Pulls a gradient with respect to the normalized scores back onto the
    /// raw scores.
    pub fn raw_grad(&self, d_normalized: &Tensor) -> Result<Tensor> {
        if d_normalized.shape() != self.raw.shape() {
            return shape_err("score gradient shape mismatch");
        }
        let sd = self.normalized.data();
        let gd = d_normalized.data();
        let mut out = Tensor::zeros(self.raw.shape())?;
        if self.s == 1 {
            for ((o, &sv), &g) in out.data_mut().iter_mut().zip(sd).zip(gd) {
                *o = g * sv * (1.0 - sv);
            }
            return Ok(out);
        }
        let s = self.s;
        let nl = self.locations();
        let groups = self.raw.channels() / s;
        let od = out.data_mut();
        for grp in 0..groups {
            for l in 0..nl {
                let idx = |j: usize| (grp * s + j) * nl + l;
                let inner: f64 = (0..s).map(|j| sd[idx(j)] * gd[idx(j)]).sum();
                for j in 0..s {
                    od[idx(j)] = sd[idx(j)] * (gd[idx(j)] - inner);
                }
            }
        }
        Ok(out)
    }
}

/// Runs the score head and normalizes.
pub fn compute_scores(
    x: &FeatureMap,
    head: &ConvHead,
    mode: ScoreMode,
    s: usize,
    grid: &RefGrid,
) -> Result<ScoreField> {
    let expected = mode.channels(s, grid.len());
    if head.out_channels() != expected {
        return config_err(format!(
            "{mode:?} scores with s={s} need {expected} head channels, head has {}",
            head.out_channels()
        ));
    }
    ScoreField::from_raw(conv_same(x, head)?, mode, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_ref_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct nested-loop correlation with explicit bounds tests.
    fn conv_oracle(x: &Tensor, w: &Tensor) -> Tensor {
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let sp = x.spatial().to_vec();
        let mut shape = vec![co];
        shape.extend(&sp);
        let mut out = Tensor::zeros(&shape).unwrap();
        let (h, wd) = (sp[0] as i64, sp[1] as i64);
        for c in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for a in -1..=1i64 {
                            for b in -1..=1i64 {
                                let (sy, sx) = (y + a, xx + b);
                                if sy < 0 || sy >= h || sx < 0 || sx >= wd {
                                    continue;
                                }
                                acc += x.get(&[i, sy as usize, sx as usize]).unwrap()
                                    * w.get(&[c, i, (a + 1) as usize, (b + 1) as usize]).unwrap();
                            }
                        }
                    }
                    out.accumulate_at(&[c, y as usize, xx as usize], acc).unwrap();
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::uniform(&[2, 5, 4], -1.0, 1.0, &mut rng(1)).unwrap();
        let mut head = ConvHead::zeros(2, 2, 2).unwrap();
        for c in 0..2 {
            head.weights.accumulate_at(&[c, c, 1, 1], 1.0).unwrap();
        }
        assert!(conv_same(&x, &head).unwrap().bit_eq(&x));
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::full(&[1, 5, 5], 1.0).unwrap();
        let head = ConvHead::from_weights(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap()).unwrap();
        let y = conv_same(&x, &head).unwrap();
        assert_eq!(y.get(&[0, 2, 2]).unwrap(), 9.0);
        assert_eq!(y.get(&[0, 0, 0]).unwrap(), 4.0);
        assert_eq!(y.get(&[0, 0, 2]).unwrap(), 6.0);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let x = Tensor::uniform(&[3, 6, 7], -1.0, 1.0, &mut rng(2)).unwrap();
        let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng(3)).unwrap();
        let y = conv_same(&x, &ConvHead::from_weights(w.clone()).unwrap()).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&x, &w)).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[2, 4, 4]).unwrap();
        let head = ConvHead::zeros(1, 3, 2).unwrap();
        assert!(matches!(conv_same(&x, &head), Err(crate::DstcError::Shape(_))));
    }

    #[test]
    fn conv_is_linear() {
        let x1 = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng(4)).unwrap();
        let x2 = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng(5)).unwrap();
        let head = ConvHead::from_weights(Tensor::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng(6)).unwrap()).unwrap();
        let (a, b) = (0.7, -1.3);
        let lhs = conv_same(&x1.scale(a).add(&x2.scale(b)).unwrap(), &head).unwrap();
        let rhs = conv_same(&x1, &head)
            .unwrap()
            .scale(a)
            .add(&conv_same(&x2, &head).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * rhs.max_abs().max(1.0));
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        let x = Tensor::uniform(&[2, 5, 4], -1.0, 1.0, &mut rng(7)).unwrap();
        let head = ConvHead::from_weights(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng(8)).unwrap()).unwrap();
        let u = Tensor::uniform(&[3, 5, 4], -1.0, 1.0, &mut rng(9)).unwrap();
        let (dx, dw) = conv_same_backward(&x, &head, &u).unwrap();
        let y = conv_same(&x, &head).unwrap();
        // <u, conv(x; w)> is bilinear in (x, w)
        assert!((u.dot(&y).unwrap() - dx.dot(&x).unwrap()).abs() < 1e-12 * y.max_abs().max(1.0) * 20.0);
        assert!((u.dot(&y).unwrap() - dw.dot(&head.weights).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn pointwise_backward_is_the_adjoint() {
        let x = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng(10)).unwrap();
        let w = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(11)).unwrap();
        let u = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng(12)).unwrap();
        let y = pointwise(&x, &w).unwrap();
        let (dx, dw) = pointwise_backward(&x, &w, &u).unwrap();
        let f = u.dot(&y).unwrap();
        assert!((f - dx.dot(&x).unwrap()).abs() < 1e-12);
        assert!((f - dw.dot(&w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_give_zero_offsets_and_uniform_scores() {
        let grid = make_ref_grid(3, 2).unwrap();
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng(13)).unwrap();
        let dense = compute_offsets(&x, &ConvHead::zeros(18, 4, 2).unwrap(), OffsetMode::Dense, 3.0, &grid).unwrap();
        assert_eq!(dense.values.channels(), 18);
        assert_eq!(dense.values.max_abs(), 0.0);

        let param = compute_offsets(
            &x,
            &ConvHead::zeros(3, 4, 2).unwrap(),
            OffsetMode::Parametrized,
            3.0,
            &grid,
        )
        .unwrap();
        for l in 0..25 {
            assert_eq!(param.dilation(l), 3.0);
            assert_eq!(param.shift(l), [0.0; 3]);
        }

        let s4 = compute_scores(&x, &ConvHead::zeros(36, 4, 2).unwrap(), ScoreMode::Dense, 4, &grid).unwrap();
        assert_eq!(s4.raw.channels(), 36);
        assert!(s4.normalized.data().iter().all(|&v| v == 0.25));
        let s1 = compute_scores(&x, &ConvHead::zeros(1, 4, 2).unwrap(), ScoreMode::Shared, 1, &grid).unwrap();
        assert!(s1.normalized.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_channel_mismatch_is_config_error() {
        let grid = make_ref_grid(3, 2).unwrap();
        let x = Tensor::zeros(&[1, 3, 3]).unwrap();
        let bad = ConvHead::zeros(17, 1, 2).unwrap();
        assert!(matches!(
            compute_offsets(&x, &bad, OffsetMode::Dense, 1.0, &grid),
            Err(crate::DstcError::Config(_))
        ));
        assert!(matches!(
            compute_scores(&x, &bad, ScoreMode::Shared, 4, &grid),
            Err(crate::DstcError::Config(_))
        ));
    }

    #[test]
    fn normalized_scores_are_simplex_or_open_interval() {
        let raw = Tensor::uniform(&[12, 3, 3], -30.0, 30.0, &mut rng(14)).unwrap();
        let f = ScoreField::from_raw(raw.clone(), ScoreMode::Dense, 4).unwrap();
        let mut buf = [0.0; 4];
        for n in 0..3 {
            for l in 0..9 {
                f.scores_at(n, l, &mut buf);
                assert!(buf.iter().all(|&v| v >= 0.0));
                assert!((buf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let raw = Tensor::uniform(&[1, 3, 3], -20.0, 20.0, &mut rng(15)).unwrap();
        let f = ScoreField::from_raw(raw, ScoreMode::Shared, 1).unwrap();
        assert!(f.normalized.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_gradient_annihilates_constants() {
        let raw = Tensor::uniform(&[8, 2, 2], -2.0, 2.0, &mut rng(16)).unwrap();
        let f = ScoreField::from_raw(raw, ScoreMode::Dense, 4).unwrap();
        let g = f.raw_grad(&Tensor::full(&[8, 2, 2], 0.37).unwrap()).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn raw_grad_matches_finite_differences() {
        for s in [1usize, 3] {
            let raw = Tensor::uniform(&[2 * s, 2, 2], -2.0, 2.0, &mut rng(17)).unwrap();
            let up = Tensor::uniform(raw.shape(), -1.0, 1.0, &mut rng(18)).unwrap();
            let f = |r: &Tensor| {
                ScoreField::from_raw(r.clone(), ScoreMode::Dense, s)
                    .unwrap()
                    .normalized
                    .dot(&up)
                    .unwrap()
            };
            let g = ScoreField::from_raw(raw.clone(), ScoreMode::Dense, s)
                .unwrap()
                .raw_grad(&up)
                .unwrap();
            for i in 0..raw.len() {
                let mut p = raw.clone();
                let mut m = raw.clone();
                p.data_mut()[i] += 1e-6;
                m.data_mut()[i] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - g.data()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn parametrized_expansion() {
        let grid = make_ref_grid(3, 2).unwrap();
        let map = LocationMap::uniform(2, 2, 0, 0, 1).unwrap();
        let mut values = Tensor::zeros(&[3, 3, 3]).unwrap();
        // location l = (1, 1) -> flat index 4
        let field = |v: &Tensor| OffsetField {
            mode: OffsetMode::Parametrized,
            values: v.clone(),
            dilation_base: 1.0,
        };

        // dilation 1, no shift: identical to the fixed grid
        let qs = expand_parametrized_offsets(&field(&values), &grid, 4, &map).unwrap();
        for (q, pn) in qs.iter().zip(grid.points()) {
            let t = map.tc_location(&[1, 1, 0], pn, 3);
            assert_eq!(q[..2], [t[0] as f64, t[1] as f64]);
        }

        // dilation 3 about the anchor (3, 3)
        values.accumulate_at(&[0, 1, 1], 2.0).unwrap();
        let qs = expand_parametrized_offsets(&field(&values), &grid, 4, &map).unwrap();
        for (q, pn) in qs.iter().zip(grid.points()) {
            assert_eq!(q[..2], [3.0 + 3.0 * pn[0] as f64, 3.0 + 3.0 * pn[1] as f64]);
        }

        // rigid shift
        let mut values = Tensor::zeros(&[3, 3, 3]).unwrap();
        values.accumulate_at(&[1, 1, 1], 0.5).unwrap();
        values.accumulate_at(&[2, 1, 1], -0.25).unwrap();
        let qs = expand_parametrized_offsets(&field(&values), &grid, 4, &map).unwrap();
        for (q, pn) in qs.iter().zip(grid.points()) {
            let t = map.tc_location(&[1, 1, 0], pn, 3);
            assert_eq!(q[..2], [t[0] as f64 + 0.5, t[1] as f64 - 0.25]);
        }

        let dense = OffsetField {
            mode: OffsetMode::Dense,
            values: Tensor::zeros(&[18, 3, 3]).unwrap(),
            dilation_base: 1.0,
        };
        assert!(expand_parametrized_offsets(&dense, &grid, 0, &map).is_err());
    }
}
