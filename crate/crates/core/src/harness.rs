//! Desk-scale toy tasks, optimizers and a full-batch training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::mse_loss_and_grad;
use crate::error::{config_err, shape_err, Result};
use crate::grid::{Extents, LocationMap};
use crate::kernels::INTERMEDIATE_VARIANCES;
use crate::layer::{forward, init_layer, DstcConfig, LayerParams, Variant};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets come from a frozen parametrized layer with a fixed dilation.
    DilationRecovery,
    /// Anti-aliased ellipses at twice the input resolution.
    EllipseSuperres,
    /// Constant inputs and targets, for measuring structured artifacts.
    CheckerboardProbe,
}

impl TaskKind {
    pub fn default_channels(self) -> usize {
        if self == TaskKind::DilationRecovery {
            2
        } else {
            1
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DilationRecovery => "dilation_recovery",
            TaskKind::EllipseSuperres => "ellipse_superres",
            TaskKind::CheckerboardProbe => "checkerboard_probe",
        }
    }
}

fn d_seed() -> u64 {
    0
}
fn d_train() -> usize {
    16
}
fn d_eval() -> usize {
    8
}
fn d_dim() -> usize {
    2
}
fn d_spatial() -> Vec<usize> {
    vec![8, 8]
}
fn d_kernel() -> usize {
    4
}
fn d_stride() -> usize {
    2
}
fn d_padding() -> usize {
    1
}
fn d_dilation() -> f64 {
    3.0
}
fn d_variances() -> Vec<f64> {
    INTERMEDIATE_VARIANCES.to_vec()
}

/// A toy task. The geometry fields fix the output shape (and, for
/// dilation recovery, the teacher layer). A missing or zero `channels`
/// field reads as the kind's default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(remote = "Self")]
pub struct ToyTask {
    pub kind: TaskKind,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_train")]
    pub train_samples: usize,
    #[serde(default = "d_eval")]
    pub eval_samples: usize,
    #[serde(default = "d_dim")]
    pub dimension: usize,
    #[serde(default)]
    pub channels: usize,
    #[serde(default = "d_spatial")]
    pub input_spatial: Vec<usize>,
    #[serde(default = "d_kernel")]
    pub kernel_size: usize,
    #[serde(default = "d_stride")]
    pub stride: usize,
    #[serde(default = "d_padding")]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
    #[serde(default = "d_dilation")]
    pub teacher_dilation: f64,
    #[serde(default = "d_variances")]
    pub teacher_variances: Vec<f64>,
}

impl Serialize for ToyTask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ToyTask::serialize(self, s)
    }
}

impl<'de> Deserialize<'de> for ToyTask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut t = ToyTask::deserialize(d)?;
        if t.channels == 0 {
            t.channels = t.kind.default_channels();
        }
        Ok(t)
    }
}

impl ToyTask {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        ToyTask {
            kind,
            seed,
            train_samples: d_train(),
            eval_samples: d_eval(),
            dimension: d_dim(),
            channels: kind.default_channels(),
            input_spatial: d_spatial(),
            kernel_size: d_kernel(),
            stride: d_stride(),
            padding: d_padding(),
            output_padding: 0,
            teacher_dilation: d_dilation(),
            teacher_variances: d_variances(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_spatial.len() != self.dimension {
            return config_err("input_spatial must have one extent per dimension");
        }
        if self.channels == 0 || self.train_samples == 0 {
            return config_err("task needs at least one channel and one training sample");
        }
        let out = self.output_spatial()?;
        if self.kind == TaskKind::EllipseSuperres && out.iter().zip(&self.input_spatial).any(|(o, i)| *o != 2 * i) {
            return config_err("ellipse_superres needs a geometry that exactly doubles the input");
        }
        Ok(())
    }

    pub fn output_spatial(&self) -> Result<Vec<usize>> {
        LocationMap::uniform(self.dimension, self.stride, self.padding, self.output_padding, 1)?
            .output_shape(&self.input_spatial, self.kernel_size)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        [vec![self.channels], self.input_spatial.clone()].concat()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok([vec![self.channels], self.output_spatial()?].concat())
    }

    /// Layer configuration of the given variant whose geometry matches the
    /// task.
    pub fn layer_config(&self, variant: Variant) -> DstcConfig {
        DstcConfig::new(variant, self.dimension, self.channels, self.channels, self.kernel_size).with_geometry(
            self.stride,
            self.padding,
            self.output_padding,
        )
    }

    /// The frozen layer that produces dilation-recovery targets: zero heads,
    /// so every location scatters with exactly `teacher_dilation`.
    pub fn teacher_config(&self) -> DstcConfig {
        let mut c = self.layer_config(Variant::DstcParametrized);
        c.dilation_base = self.teacher_dilation;
        c.gaussian_variances = self.teacher_variances.clone();
        c
    }
}

pub type Sample = (FeatureMap, FeatureMap);

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// Teacher configuration and parameters, for dilation recovery.
    pub teacher: Option<(DstcConfig, LayerParams)>,
}

/// Stream ids keep the train inputs, eval inputs and teacher draws
/// independent.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn gen_task(task: &ToyTask) -> Result<Dataset> {
    task.validate()?;
    let mut train_rng = stream(task.seed, 1);
    let mut eval_rng = stream(task.seed, 2);
    match task.kind {
        TaskKind::DilationRecovery => {
            let cfg = task.teacher_config();
            let mut teacher_rng = stream(task.seed, 3);
            let params = init_layer(&cfg, teacher_rng.gen())?;
            let draw = |rng: &mut ChaCha8Rng, count: usize| -> Result<Vec<Sample>> {
                (0..count)
                    .map(|_| {
                        let x = Tensor::uniform(&task.input_shape(), -1.0, 1.0, rng)?;
                        let y = forward(&x, &params, &cfg)?;
                        Ok((x, y))
                    })
                    .collect()
            };
            let train = draw(&mut train_rng, task.train_samples)?;
            let eval = draw(&mut eval_rng, task.eval_samples)?;
            Ok(Dataset {
                train,
                eval,
                teacher: Some((cfg, params)),
            })
        }
        TaskKind::EllipseSuperres => {
            let draw = |rng: &mut ChaCha8Rng, count: usize| -> Result<Vec<Sample>> {
                (0..count).map(|_| ellipse_sample(task, rng)).collect()
            };
            Ok(Dataset {
                train: draw(&mut train_rng, task.train_samples)?,
                eval: draw(&mut eval_rng, task.eval_samples)?,
                teacher: None,
            })
        }
        TaskKind::CheckerboardProbe => {
            let out_shape = task.output_shape()?;
            let draw = |rng: &mut ChaCha8Rng, count: usize| -> Result<Vec<Sample>> {
                (0..count)
                    .map(|_| {
                        let v = rng.gen_range(0.0..1.0);
                        Ok((Tensor::full(&task.input_shape(), v)?, Tensor::full(&out_shape, v)?))
                    })
                    .collect()
            };
            Ok(Dataset {
                train: draw(&mut train_rng, task.train_samples)?,
                eval: draw(&mut eval_rng, task.eval_samples)?,
                teacher: None,
            })
        }
    }
}

struct Ellipse {
    center: [f64; 3],
    radii: [f64; 3],
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, p: &[f64; 3], dim: usize) -> bool {
        let mut v = [0.0; 3];
        for d in 0..dim {
            v[d] = p[d] - self.center[d];
        }
        if dim == 2 {
            let (s, c) = self.angle.sin_cos();
            v = [c * v[0] + s * v[1], -s * v[0] + c * v[1], 0.0];
        }
        (0..dim).map(|d| (v[d] / self.radii[d]).powi(2)).sum::<f64>() <= 1.0
    }
}

const SUPERSAMPLES: usize = 4;

/// Renders 1-3 random ellipses (axis-aligned ellipsoids in 3-D) with
/// `SUPERSAMPLES^D` coverage samples per pixel, then box-downsamples by 2.
fn ellipse_sample(task: &ToyTask, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let dim = task.dimension;
    let out = task.output_spatial()?;
    let count = rng.gen_range(1..=3);
    let shapes: Vec<Ellipse> = (0..count)
        .map(|_| {
            let mut center = [0.0; 3];
            let mut radii = [1.0; 3];
            for d in 0..dim {
                let n = out[d] as f64;
                center[d] = rng.gen_range(0.2..0.8) * n;
                radii[d] = rng.gen_range(0.1..0.35) * n;
            }
            Ellipse {
                center,
                radii,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                intensity: rng.gen_range(0.3..1.0),
            }
        })
        .collect();
    let ext = Extents::new(&out)?;
    let sub = Extents::new(&vec![SUPERSAMPLES; dim])?;
    let mut hi = Vec::with_capacity(ext.len());
    for p in ext.points() {
        let mut v: f64 = 0.0;
        for e in &shapes {
            let inside = sub
                .points()
                .filter(|s| {
                    let mut q = [0.0; 3];
                    for d in 0..dim {
                        q[d] = p[d] as f64 + (s[d] as f64 + 0.5) / SUPERSAMPLES as f64;
                    }
                    e.contains(&q, dim)
                })
                .count();
            v = v.max(e.intensity * inside as f64 / sub.len() as f64);
        }
        hi.push(v);
    }
    let mut data = Vec::with_capacity(task.channels * hi.len());
    for _ in 0..task.channels {
        data.extend_from_slice(&hi);
    }
    let target = Tensor::from_vec(&task.output_shape()?, data)?;
    let input = box_downsample(&target, 2)?;
    Ok((input, target))
}

/// Block means over `factor^D` blocks.
pub fn box_downsample(y: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let ext = Extents::new(y.spatial())?;
    if factor == 0 || ext.as_slice().iter().any(|e| e % factor != 0) {
        return shape_err("extents must be divisible by the downsampling factor");
    }
    let small: Vec<usize> = ext.as_slice().iter().map(|e| e / factor).collect();
    let sext = Extents::new(&small)?;
    let mut shape = vec![y.channels()];
    shape.extend_from_slice(&small);
    let mut out = Tensor::zeros(&shape)?;
    let block = (factor as f64).powi(ext.dim() as i32);
    let (n, ns) = (ext.len(), sext.len());
    for c in 0..y.channels() {
        for (i, p) in ext.points().enumerate() {
            let mut s = p;
            for d in 0..ext.dim() {
                s[d] /= factor as i64;
            }
            let j = sext.flat(&s).expect("inside the small grid");
            out.data_mut()[c * ns + j] += y.data()[c * n + i] / block;
        }
    }
    Ok(out)
}

/// Mean squared deviation of `y` from its `stride^D` block averages, over
/// all complete blocks. A perfect period-2 checkerboard of +-1 gives 1.
pub fn highfreq_energy(y: &FeatureMap, stride: usize) -> Result<f64> {
    if stride < 2 {
        return config_err("highfreq_energy needs stride >= 2");
    }
    let ext = Extents::new(y.spatial())?;
    let blocks: Vec<usize> = ext.as_slice().iter().map(|e| e / stride).collect();
    if blocks.contains(&0) {
        return shape_err("map is smaller than one block");
    }
    let bext = Extents::new(&blocks)?;
    let cell = Extents::new(&vec![stride; ext.dim()])?;
    let n = ext.len();
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..y.channels() {
        let plane = &y.data()[c * n..(c + 1) * n];
        for b in bext.points() {
            let idx: Vec<usize> = cell
                .points()
                .map(|o| {
                    let mut p = b;
                    for d in 0..ext.dim() {
                        p[d] = b[d] * stride as i64 + o[d];
                    }
                    ext.flat(&p).expect("complete block")
                })
                .collect();
            let mean = idx.iter().map(|&i| plane[i]).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                total += (plane[i] - mean).powi(2);
            }
            count += idx.len();
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Sgd,
            ..Self::adam(lr)
        }
    }
}

/// Optimizer state; moments follow the parameter groups in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, params: &LayerParams) -> Result<Self> {
        let zeros: Result<Vec<Tensor>> = params.groups().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let zeros = zeros?;
        Ok(OptimState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn update(&mut self, params: &mut LayerParams, grads: &LayerParams) -> Result<()> {
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let groups: Vec<_> = params.groups().into_iter().map(|(g, _)| g).collect();
        if groups.len() != self.m.len() {
            return shape_err("optimizer state does not match the parameters");
        }
        for (k, g) in groups.into_iter().enumerate() {
            let grad = grads
                .group(g)
                .ok_or_else(|| crate::DstcError::Shape(format!("missing {} gradient", g.name())))?;
            let p = params.group_mut(g).expect("listed above");
            if grad.shape() != p.shape() || self.m[k].shape() != p.shape() {
                return shape_err(format!("{} gradient/moment shape mismatch", g.name()));
            }
            match c.algorithm {
                Algorithm::Sgd => p.axpy(-c.lr, grad)?,
                Algorithm::Adam => {
                    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                    let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        *pv -= c.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    /// Seed of the learner's initialization.
    pub init_seed: u64,
    /// A history row is written every this many steps (and at the end).
    pub log_every: usize,
    /// When false, `wall_ms` is recorded as 0 so histories are byte-stable.
    pub wall_clock: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            optimizer: OptimizerConfig::adam(1e-2),
            init_seed: 0,
            log_every: 1,
            wall_clock: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub history: Vec<HistoryRow>,
    pub params: LayerParams,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
}

/// Full-batch loss and gradient averaged over the samples.
fn batch_loss_and_grad(samples: &[Sample], params: &LayerParams, cfg: &DstcConfig) -> Result<(f64, LayerParams)> {
    let mut total = 0.0;
    let mut acc: Option<LayerParams> = None;
    for (x, y) in samples {
        let (loss, g) = mse_loss_and_grad(x, params, cfg, y)?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(g.d_params),
            Some(a) => {
                for (grp, t) in g.d_params.groups() {
                    a.group_mut(grp).expect("same layout").axpy(1.0, t)?;
                }
            }
        }
    }
    let k = samples.len() as f64;
    let mut grads = acc.ok_or_else(|| crate::DstcError::Config("empty sample set".into()))?;
    for g in crate::layer::ParamGroup::ALL {
        if let Some(t) = grads.group_mut(g) {
            *t = t.scale(1.0 / k);
        }
    }
    Ok((total / k, grads))
}

/// Mean per-sample MSE.
pub fn evaluate(samples: &[Sample], params: &LayerParams, cfg: &DstcConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (x, y) in samples {
        let mut d = forward(x, params, cfg)?;
        d.axpy(-1.0, y)?;
        total += d.dot(&d)? / d.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Minimizes the full-batch MSE on the training split. History rows record
/// the loss before the update of that step; the last row is the loss after
/// all updates.
pub fn train(cfg: &DstcConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainResult> {
    let params = init_layer(cfg, opts.init_seed)?;
    train_from(cfg, data, params, opts)
}

pub fn train_from(
    cfg: &DstcConfig,
    data: &Dataset,
    mut params: LayerParams,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    let (x0, y0) = data
        .train
        .first()
        .ok_or_else(|| crate::DstcError::Config("empty training split".into()))?;
    if x0.channels() != cfg.in_channels
        || x0.spatial().len() != cfg.dimension
        || cfg.output_spatial(x0.spatial())? != y0.spatial()
        || y0.channels() != cfg.out_channels
    {
        return config_err(format!(
            "task maps {:?} -> {:?}, layer does not produce that shape",
            x0.shape(),
            y0.shape()
        ));
    }
    let mut opt = OptimState::new(opts.optimizer.clone(), &params)?;
    let start = Instant::now();
    let wall = |on: bool| if on { start.elapsed().as_millis() as u64 } else { 0 };
    let every = opts.log_every.max(1);
    let mut history = Vec::new();
    for step in 0..opts.steps {
        let (loss, grads) = batch_loss_and_grad(&data.train, &params, cfg)?;
        if step % every == 0 {
            history.push(HistoryRow {
                step,
                loss,
                wall_ms: wall(opts.wall_clock),
            });
        }
        opt.update(&mut params, &grads)?;
    }
    let final_train_loss = evaluate(&data.train, &params, cfg)?;
    history.push(HistoryRow {
        step: opts.steps,
        loss: final_train_loss,
        wall_ms: wall(opts.wall_clock),
    });
    let final_eval_loss = evaluate(&data.eval, &params, cfg)?;
    Ok(TrainResult {
        history,
        params,
        final_train_loss,
        final_eval_loss,
    })
}

/// `step,loss,wall_ms` with a header row; losses in shortest round-trip
/// form.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,loss,wall_ms\n");
    for r in history {
        let _ = writeln!(s, "{},{:?},{}", r.step, r.loss, r.wall_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_files_default_channels_by_kind() {
        let t: ToyTask = serde_json::from_str(r#"{"kind":"ellipse_superres"}"#).unwrap();
        assert_eq!(t, ToyTask::new(TaskKind::EllipseSuperres, 0));
        let t: ToyTask = serde_json::from_str(r#"{"kind":"dilation_recovery","seed":4}"#).unwrap();
        assert_eq!(t, ToyTask::new(TaskKind::DilationRecovery, 4));
        let t: ToyTask = serde_json::from_str(r#"{"kind":"dilation_recovery","channels":3}"#).unwrap();
        assert_eq!(t.channels, 3);
        let back: ToyTask = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn datasets_are_deterministic_and_splits_disjoint() {
        for kind in [
            TaskKind::DilationRecovery,
            TaskKind::EllipseSuperres,
            TaskKind::CheckerboardProbe,
        ] {
            let t = ToyTask::new(kind, 5);
            let a = gen_task(&t).unwrap();
            let b = gen_task(&t).unwrap();
            assert_eq!(a, b);
            for (x, _) in &a.eval {
                assert!(a.train.iter().all(|(xt, _)| !xt.bit_eq(x)), "{kind:?}");
            }
            let c = gen_task(&ToyTask::new(kind, 6)).unwrap();
            assert_ne!(a.train, c.train);
        }
    }

    #[test]
    fn image_tasks_stay_in_unit_range() {
        for kind in [TaskKind::EllipseSuperres, TaskKind::CheckerboardProbe] {
            let d = gen_task(&ToyTask::new(kind, 1)).unwrap();
            for (x, y) in d.train.iter().chain(&d.eval) {
                assert!(x.data().iter().chain(y.data()).all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn ellipse_targets_double_the_input() {
        let t = ToyTask::new(TaskKind::EllipseSuperres, 2);
        let d = gen_task(&t).unwrap();
        let (x, y) = &d.train[0];
        assert_eq!(y.spatial(), &[16, 16]);
        assert_eq!(x.spatial(), &[8, 8]);
        assert!(box_downsample(y, 2).unwrap().bit_eq(x));
        assert!(y.max_abs() > 0.0);
        let mut bad = t.clone();
        bad.padding = 0;
        assert!(gen_task(&bad).is_err());
    }

    #[test]
    fn ellipsoids_render_in_3d() {
        let mut t = ToyTask::new(TaskKind::EllipseSuperres, 3);
        t.dimension = 3;
        t.input_spatial = vec![4, 4, 4];
        t.train_samples = 2;
        t.eval_samples = 1;
        let d = gen_task(&t).unwrap();
        assert_eq!(d.train[0].1.spatial(), &[8, 8, 8]);
    }

    #[test]
    fn teacher_is_realizable_at_step_zero() {
        let t = ToyTask::new(TaskKind::DilationRecovery, 4);
        let d = gen_task(&t).unwrap();
        let (cfg, params) = d.teacher.clone().unwrap();
        let r = train_from(
            &cfg,
            &d,
            params,
            &TrainOptions {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.history[0].loss, 0.0);
        assert_eq!(r.final_eval_loss, 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss() {
        let t = ToyTask::new(TaskKind::EllipseSuperres, 1);
        let d = gen_task(&t).unwrap();
        let cfg = t.layer_config(Variant::DstcBilinear);
        for opt in [OptimizerConfig::sgd(0.0), OptimizerConfig::adam(0.0)] {
            let r = train(
                &cfg,
                &d,
                &TrainOptions {
                    steps: 5,
                    optimizer: opt,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(r.history.windows(2).all(|w| w[0].loss == w[1].loss));
        }
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let t = ToyTask::new(TaskKind::DilationRecovery, 2);
        let d = gen_task(&t).unwrap();
        let mut cfg = t.layer_config(Variant::DstcParametrized);
        cfg.chunk_size = 16;
        let opts = TrainOptions {
            steps: 30,
            wall_clock: false,
            ..Default::default()
        };
        let a = train(&cfg, &d, &opts).unwrap();
        let b = train(&cfg, &d, &opts).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.params, b.params);
        assert!(a.final_train_loss < a.history[0].loss);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let t = ToyTask::new(TaskKind::DilationRecovery, 2);
        let d = gen_task(&t).unwrap();
        let cfg = t.layer_config(Variant::Tc).with_geometry(1, 0, 0);
        assert!(matches!(
            train(&cfg, &d, &TrainOptions::default()),
            Err(crate::DstcError::Config(_))
        ));
    }

    #[test]
    fn highfreq_energy_examples() {
        let flat = Tensor::full(&[1, 6, 6], 0.7).unwrap();
        assert_eq!(highfreq_energy(&flat, 2).unwrap(), 0.0);
        let board: Vec<f64> = (0..36)
            .map(|i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let board = Tensor::from_vec(&[1, 6, 6], board).unwrap();
        assert!((highfreq_energy(&board, 2).unwrap() - 1.0).abs() < 1e-15);
        let ramp: Vec<f64> = (0..36).map(|i| 0.05 * (i % 6) as f64).collect();
        let ramp = Tensor::from_vec(&[1, 6, 6], ramp).unwrap();
        let e = highfreq_energy(&ramp, 2).unwrap();
        // deviations of +-0.025 from each block mean
        assert!((e - 0.025f64.powi(2)).abs() < 1e-15);
        assert!(highfreq_energy(&flat, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = [
            HistoryRow {
                step: 0,
                loss: 0.5,
                wall_ms: 0,
            },
            HistoryRow {
                step: 1,
                loss: 0.25,
                wall_ms: 3,
            },
        ];
        assert_eq!(history_csv(&rows), "step,loss,wall_ms\n0,0.5,0\n1,0.25,3\n");
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let cfg = DstcConfig::new(Variant::Tc, 2, 1, 1, 1);
        let mut p = init_layer(&cfg, 0).unwrap();
        let before = p.kernel.w.data()[0];
        let mut g = crate::layer::zero_params(&cfg).unwrap();
        g.kernel.w.data_mut()[0] = 3.0;
        let mut opt = OptimState::new(OptimizerConfig::adam(0.1), &p).unwrap();
        opt.update(&mut p, &g).unwrap();
        // first Adam step has magnitude lr regardless of the gradient scale
        assert!((before - p.kernel.w.data()[0] - 0.1).abs() < 1e-6);
    }
}
