//! Integer geometry shared by the scatter engines: kernel reference grids,
//! the input-to-output location map, output shape arithmetic and the
//! interpolation windows placed around fractional target points.
//!
//! Points are stored as fixed `[_; 3]` arrays; in 2D the third component is
//! always zero and ignored.

use crate::error::{config_err, shape_err, Result};

pub const MAX_DIM: usize = 3;

/// Integer point, unused trailing components are zero.
pub type IPoint = [i64; MAX_DIM];
/// Real point, unused trailing components are zero.
pub type FPoint = [f64; MAX_DIM];

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        config_err(format!("spatial dimension must be 2 or 3, got {dim}"))
    }
}

/// Spatial extents of a feature map, with row-major flattening.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extents {
    dims: [usize; MAX_DIM],
    dim: usize,
}

impl Extents {
    pub fn new(spatial: &[usize]) -> Result<Self> {
        check_dim(spatial.len())?;
        if spatial.contains(&0) {
            return shape_err(format!("spatial extents {spatial:?} contain a zero"));
        }
        let mut dims = [1; MAX_DIM];
        dims[..spatial.len()].copy_from_slice(spatial);
        Ok(Extents {
            dims,
            dim: spatial.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.dims[..self.dim]
    }

    pub fn extent(&self, d: usize) -> usize {
        self.dims[d]
    }

    /// Number of spatial locations.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, p: &IPoint) -> bool {
        (0..self.dim).all(|d| p[d] >= 0 && (p[d] as usize) < self.dims[d])
    }

    /// Flat row-major index of `p`, or `None` when outside.
    #[inline]
    pub fn flat(&self, p: &IPoint) -> Option<usize> {
        let mut idx = 0usize;
        for d in 0..self.dim {
            let c = p[d];
            if c < 0 || c as usize >= self.dims[d] {
                return None;
            }
            idx = idx * self.dims[d] + c as usize;
        }
        Some(idx)
    }

    /// Inverse of [`Extents::flat`].
    #[inline]
    pub fn point(&self, mut flat: usize) -> IPoint {
        let mut p = [0; MAX_DIM];
        for d in (0..self.dim).rev() {
            p[d] = (flat % self.dims[d]) as i64;
            flat /= self.dims[d];
        }
        p
    }

    pub fn points(&self) -> impl Iterator<Item = IPoint> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }
}

/// The kernel reference grid: the `K^D` integer offsets
/// `-floor(K/2) ..= floor((K-1)/2)` per axis, enumerated lexicographically.
/// The enumeration index `n` ties together weight taps, offset channels and
/// score channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefGrid {
    dim: usize,
    kernel_size: usize,
    points: Vec<IPoint>,
}

impl RefGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn points(&self) -> &[IPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lowest coordinate on each axis, `-floor(K/2)`.
    pub fn low(&self) -> i64 {
        -((self.kernel_size / 2) as i64)
    }
}

pub fn make_ref_grid(kernel_size: usize, dim: usize) -> Result<RefGrid> {
    check_dim(dim)?;
    if kernel_size == 0 {
        return config_err("kernel size must be >= 1");
    }
    let lo = -((kernel_size / 2) as i64);
    let total = kernel_size.pow(dim as u32);
    let points = (0..total)
        .map(|mut flat| {
            let mut p = [0; MAX_DIM];
            for d in (0..dim).rev() {
                p[d] = lo + (flat % kernel_size) as i64;
                flat /= kernel_size;
            }
            p
        })
        .collect();
    Ok(RefGrid {
        dim,
        kernel_size,
        points,
    })
}

/// Maps input locations to output locations for a strided transposed
/// convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocationMap {
    pub dim: usize,
    pub stride: [usize; MAX_DIM],
    pub padding: [usize; MAX_DIM],
    pub output_padding: [usize; MAX_DIM],
    pub base_dilation: [usize; MAX_DIM],
}

impl LocationMap {
    /// Same stride/padding/dilation along every axis.
    pub fn uniform(
        dim: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        base_dilation: usize,
    ) -> Result<Self> {
        let map = LocationMap {
            dim,
            stride: [stride; MAX_DIM],
            padding: [padding; MAX_DIM],
            output_padding: [output_padding; MAX_DIM],
            base_dilation: [base_dilation; MAX_DIM],
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        for d in 0..self.dim {
            if self.stride[d] == 0 {
                return config_err("stride must be >= 1");
            }
            if self.base_dilation[d] == 0 {
                return config_err("base dilation must be >= 1");
            }
            if self.output_padding[d] >= self.stride[d] {
                return config_err(format!(
                    "output padding {} must be smaller than stride {}",
                    self.output_padding[d], self.stride[d]
                ));
            }
        }
        Ok(())
    }

    /// `stride * p0 - padding`, elementwise.
    pub fn base_location(&self, p0: &IPoint) -> IPoint {
        let mut out = [0; MAX_DIM];
        for d in 0..self.dim {
            out[d] = self.stride[d] as i64 * p0[d] - self.padding[d] as i64;
        }
        out
    }

    /// Output point that the centre tap (`p_n = 0`) of input location `p0`
    /// lands on: the base location moved by `base_dilation * floor(K/2)`, so
    /// that the reference grid's lowest tap lands on the base location.
    pub fn anchor(&self, p0: &IPoint, kernel_size: usize) -> IPoint {
        let mut out = self.base_location(p0);
        let half = (kernel_size / 2) as i64;
        for d in 0..self.dim {
            out[d] += self.base_dilation[d] as i64 * half;
        }
        out
    }

    /// Integer output location of tap `p_n` for input location `p0`.
    pub fn tc_location(&self, p0: &IPoint, p_n: &IPoint, kernel_size: usize) -> IPoint {
        let mut out = self.anchor(p0, kernel_size);
        for d in 0..self.dim {
            out[d] += self.base_dilation[d] as i64 * p_n[d];
        }
        out
    }

    /// Transposed-convolution output extents.
    pub fn output_shape(&self, input_spatial: &[usize], kernel_size: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if input_spatial.len() != self.dim {
            return shape_err(format!(
                "input has {} spatial axes, map expects {}",
                input_spatial.len(),
                self.dim
            ));
        }
        if kernel_size == 0 {
            return config_err("kernel size must be >= 1");
        }
        let mut out = Vec::with_capacity(self.dim);
        for (d, &h) in input_spatial.iter().enumerate() {
            if h == 0 {
                return shape_err("input extent is zero");
            }
            let extent = (h as i64 - 1) * self.stride[d] as i64 - 2 * self.padding[d] as i64
                + self.base_dilation[d] as i64 * (kernel_size as i64 - 1)
                + self.output_padding[d] as i64
                + 1;
            if extent < 1 {
                return config_err(format!("output extent {extent} on axis {d} is not positive"));
            }
            out.push(extent as usize);
        }
        Ok(out)
    }
}

/// Integer window `[lo, hi]` of the `k_sigma` coordinates nearest `q` on one
/// axis, before clipping.
///
/// Even sizes bracket `q` symmetrically around `floor(q) + 1/2`; odd sizes
/// centre on `floor(q + 1/2)`.
#[inline]
pub fn window_span(q: f64, k_sigma: usize) -> (i64, i64) {
    let k = k_sigma as i64;
    if k_sigma.is_multiple_of(2) {
        let f = q.floor() as i64;
        (f - k / 2 + 1, f + k / 2)
    } else {
        let c = (q + 0.5).floor() as i64;
        (c - (k - 1) / 2, c + (k - 1) / 2)
    }
}

/// Distance from `q` to the nearest point where the window on that axis
/// changes membership (integers for even sizes, half-integers for odd).
pub fn window_boundary_distance(q: f64, k_sigma: usize) -> f64 {
    let shifted = if k_sigma.is_multiple_of(2) { q } else { q + 0.5 };
    let frac = shifted - shifted.floor();
    frac.min(1.0 - frac)
}

/// The `k_sigma`-per-axis window around `q`, with points outside `bounds`
/// dropped. Enumerated lexicographically.
pub fn interp_window(q: &FPoint, k_sigma: usize, bounds: &Extents) -> Vec<IPoint> {
    let dim = bounds.dim();
    let mut ranges = [(0i64, 0i64); MAX_DIM];
    for d in 0..dim {
        let (lo, hi) = window_span(q[d], k_sigma);
        let lo = lo.max(0);
        let hi = hi.min(bounds.extent(d) as i64 - 1);
        if lo > hi {
            return Vec::new();
        }
        ranges[d] = (lo, hi);
    }
    let mut out = Vec::new();
    let mut p = [0i64; MAX_DIM];
    for d in 0..dim {
        p[d] = ranges[d].0;
    }
    loop {
        out.push(p);
        let mut d = dim;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            if p[d] < ranges[d].1 {
                p[d] += 1;
                break;
            }
            p[d] = ranges[d].0;
        }
    }
}
