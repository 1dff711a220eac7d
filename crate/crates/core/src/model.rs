//! Multi-stage dilated temporal convolutional network with a hand-rolled
//! reverse pass and Adam optimizer.
//!
//! Each stage projects its input to a hidden width, applies L residual
//! layers (kernel-3 temporal convolution with dilation 2^l, ReLU, 1x1
//! mixing, additive skip), and projects to C logits. Stages beyond the
//! first consume the row-softmax of the previous stage's logits. Temporal
//! convolutions use edge-replicate padding so sequence length is preserved
//! and constant inputs yield time-constant outputs.
//!
//! The forward pass can record a [`GradTape`]; [`train_step`] replays it
//! backwards to exact parameter gradients and applies one Adam update. A
//! tape is consumed by the update and is invalidated by any parameter
//! change, so each forward supports at most one backward.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::io::{atomic_write, put_f64, put_u32, put_u64, ByteReader};
use crate::seq::FeatureSequence;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcnArch {
    /// Feature dimension consumed by the first stage.
    pub in_dim: usize,
    /// Hidden channel width.
    pub hidden: usize,
    /// Output classes (phases, plus one if a blank head is wanted).
    pub num_classes: usize,
    /// Number of stages; stages past the first refine softmax outputs.
    pub num_stages: usize,
    /// Dilated residual layers per stage; layer l uses dilation 2^l.
    pub layers_per_stage: usize,
}

impl TcnArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0
            || self.hidden == 0
            || self.num_classes == 0
            || self.num_stages == 0
            || self.layers_per_stage == 0
        {
            return Err(Error::InvalidParameter(format!("degenerate architecture {self:?}")));
        }
        if self.layers_per_stage > 30 {
            return Err(Error::InvalidParameter("layers_per_stage too large".into()));
        }
        Ok(())
    }
}

impl Default for TcnArch {
    fn default() -> Self {
        Self {
            in_dim: 16,
            hidden: 32,
            num_classes: 7,
            num_stages: 2,
            layers_per_stage: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv1x1 {
    w: Array2<f64>, // in x out
    b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct DilatedLayer {
    /// Three kernel taps (offsets -d, 0, +d), each hidden x hidden.
    taps: [Array2<f64>; 3],
    b: Array1<f64>,
    mix: Conv1x1,
    dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    proj_in: Conv1x1,
    layers: Vec<DilatedLayer>,
    proj_out: Conv1x1,
}

/// Adam accumulators over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(theta.len(), grad.len());
        debug_assert_eq!(theta.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Trainable parameters of the whole network plus optimizer state.
#[derive(Debug, Clone)]
pub struct TcnParams {
    arch: TcnArch,
    stages: Vec<Stage>,
    adam: AdamState,
    /// Bumped on every update; outstanding tapes become stale.
    version: u64,
}

impl TcnParams {
    /// Initialize with centered-uniform fan-in scaling, deterministically
    /// from `seed`.
    pub fn init(arch: TcnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(arch.num_stages);
        for s in 0..arch.num_stages {
            let in_dim = if s == 0 { arch.in_dim } else { arch.num_classes };
            let mut layers = Vec::with_capacity(arch.layers_per_stage);
            for l in 0..arch.layers_per_stage {
                layers.push(DilatedLayer {
                    taps: [
                        init_matrix(&mut rng, arch.hidden, arch.hidden, 3 * arch.hidden),
                        init_matrix(&mut rng, arch.hidden, arch.hidden, 3 * arch.hidden),
                        init_matrix(&mut rng, arch.hidden, arch.hidden, 3 * arch.hidden),
                    ],
                    b: Array1::zeros(arch.hidden),
                    mix: Conv1x1 {
                        w: init_matrix(&mut rng, arch.hidden, arch.hidden, arch.hidden),
                        b: Array1::zeros(arch.hidden),
                    },
                    dilation: 1 << l,
                });
            }
            stages.push(Stage {
                proj_in: Conv1x1 {
                    w: init_matrix(&mut rng, in_dim, arch.hidden, in_dim),
                    b: Array1::zeros(arch.hidden),
                },
                layers,
                proj_out: Conv1x1 {
                    w: init_matrix(&mut rng, arch.hidden, arch.num_classes, arch.hidden),
                    b: Array1::zeros(arch.num_classes),
                },
            });
        }
        let n = count_params(&stages);
        Ok(Self {
            arch,
            stages,
            adam: AdamState::new(n),
            version: 0,
        })
    }

    pub fn arch(&self) -> &TcnArch {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.adam.m.len()
    }

    pub fn adam_step(&self) -> u64 {
        self.adam.step
    }

    /// Zero every stage's output projection so all logits start at 0.
    pub fn zero_output_projection(&mut self) {
        for s in &mut self.stages {
            s.proj_out.w.fill(0.0);
            s.proj_out.b.fill(0.0);
        }
        self.version += 1;
    }

    /// Flatten parameters in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        visit(&self.stages, |v| out.push(*v));
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut i = 0;
        visit_mut(&mut self.stages, |v| {
            *v = flat[i];
            i += 1;
        });
        debug_assert_eq!(i, flat.len());
    }
}

fn init_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

fn count_params(stages: &[Stage]) -> usize {
    let mut n = 0;
    visit(stages, |_| n += 1);
    n
}

fn visit<F: FnMut(&f64)>(stages: &[Stage], mut f: F) {
    for s in stages {
        s.proj_in.w.iter().for_each(&mut f);
        s.proj_in.b.iter().for_each(&mut f);
        for l in &s.layers {
            for t in &l.taps {
                t.iter().for_each(&mut f);
            }
            l.b.iter().for_each(&mut f);
            l.mix.w.iter().for_each(&mut f);
            l.mix.b.iter().for_each(&mut f);
        }
        s.proj_out.w.iter().for_each(&mut f);
        s.proj_out.b.iter().for_each(&mut f);
    }
}

fn visit_mut<F: FnMut(&mut f64)>(stages: &mut [Stage], mut f: F) {
    for s in stages {
        s.proj_in.w.iter_mut().for_each(&mut f);
        s.proj_in.b.iter_mut().for_each(&mut f);
        for l in &mut s.layers {
            for t in &mut l.taps {
                t.iter_mut().for_each(&mut f);
            }
            l.b.iter_mut().for_each(&mut f);
            l.mix.w.iter_mut().for_each(&mut f);
            l.mix.b.iter_mut().for_each(&mut f);
        }
        s.proj_out.w.iter_mut().for_each(&mut f);
        s.proj_out.b.iter_mut().for_each(&mut f);
    }
}

// --- forward -----------------------------------------------------------------

struct LayerTape {
    input: Array2<f64>,
    pre_relu: Array2<f64>,
}

struct StageTape {
    input: Array2<f64>,
    layers: Vec<LayerTape>,
    hidden_out: Array2<f64>,
    /// Softmax of this stage's logits; present when a next stage consumed it.
    probs: Option<Array2<f64>>,
}

/// Recorded activations of one forward pass, sufficient for one exact
/// backward pass.
pub struct GradTape {
    stages: Vec<StageTape>,
    version: u64,
}

/// Row of `x` at clamped index t + offset, copied into a new matrix
/// (edge-replicate padding).
fn shifted(x: &Array2<f64>, offset: i64) -> Array2<f64> {
    let t_len = x.nrows() as i64;
    let mut out = Array2::zeros(x.raw_dim());
    for t in 0..t_len {
        let idx = (t + offset).clamp(0, t_len - 1) as usize;
        out.row_mut(t as usize).assign(&x.row(idx));
    }
    out
}

/// dst[clamp(t + offset)] += src[t] for every t.
fn scatter_shifted_add(dst: &mut Array2<f64>, src: &Array2<f64>, offset: i64) {
    let t_len = src.nrows() as i64;
    for t in 0..t_len {
        let idx = (t + offset).clamp(0, t_len - 1) as usize;
        let mut row = dst.row_mut(idx);
        row += &src.row(t as usize);
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (v, &l) in o.iter_mut().zip(row.iter()) {
            *v = (l - max).exp();
            sum += *v;
        }
        o.mapv_inplace(|v| v / sum);
    }
    out
}

fn apply_1x1(x: &Array2<f64>, c: &Conv1x1) -> Array2<f64> {
    let mut out = x.dot(&c.w);
    for mut row in out.rows_mut() {
        row += &c.b;
    }
    out
}

fn stage_forward(stage: &Stage, input: &Array2<f64>, record: bool) -> (Array2<f64>, Option<StageTape>) {
    let mut x = apply_1x1(input, &stage.proj_in);
    let mut layer_tapes = Vec::new();
    for layer in &stage.layers {
        let d = layer.dilation as i64;
        let mut pre = shifted(&x, -d).dot(&layer.taps[0]);
        pre += &x.dot(&layer.taps[1]);
        pre += &shifted(&x, d).dot(&layer.taps[2]);
        for mut row in pre.rows_mut() {
            row += &layer.b;
        }
        let post = pre.mapv(|v| v.max(0.0));
        let mix = apply_1x1(&post, &layer.mix);
        let out = &x + &mix;
        if record {
            layer_tapes.push(LayerTape {
                input: x,
                pre_relu: pre,
            });
        }
        x = out;
    }
    let logits = apply_1x1(&x, &stage.proj_out);
    let tape = record.then(|| StageTape {
        input: input.clone(),
        layers: layer_tapes,
        hidden_out: x,
        probs: None,
    });
    (logits, tape)
}

fn forward_impl(params: &TcnParams, feats: &FeatureSequence, record: bool) -> Result<(Vec<Array2<f64>>, Option<GradTape>)> {
    if feats.dim() != params.arch.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have dim {}, model expects {}",
            feats.dim(),
            params.arch.in_dim
        )));
    }
    let mut logits_per_stage = Vec::with_capacity(params.stages.len());
    let mut stage_tapes = Vec::new();
    let mut input = feats.frames().clone();
    for (s, stage) in params.stages.iter().enumerate() {
        let (logits, tape) = stage_forward(stage, &input, record);
        if s + 1 < params.stages.len() {
            input = softmax_rows(&logits);
            if let Some(mut t) = tape {
                t.probs = Some(input.clone());
                stage_tapes.push(t);
            }
        } else if let Some(t) = tape {
            stage_tapes.push(t);
        }
        logits_per_stage.push(logits);
    }
    let tape = record.then(|| GradTape {
        stages: stage_tapes,
        version: params.version,
    });
    Ok((logits_per_stage, tape))
}

/// Forward pass producing per-stage T x C logits (last stage is the
/// prediction head; all stages receive the loss).
pub fn tcn_forward(params: &TcnParams, feats: &FeatureSequence) -> Result<Vec<Array2<f64>>> {
    forward_impl(params, feats, false).map(|(l, _)| l)
}

/// Forward pass that also records a tape for one backward pass.
pub fn tcn_forward_with_tape(params: &TcnParams, feats: &FeatureSequence) -> Result<(Vec<Array2<f64>>, GradTape)> {
    forward_impl(params, feats, true).map(|(l, t)| (l, t.unwrap()))
}

// --- backward ----------------------------------------------------------------

fn zeros_like_stages(params: &TcnParams) -> Vec<Stage> {
    params
        .stages
        .iter()
        .map(|s| Stage {
            proj_in: Conv1x1 {
                w: Array2::zeros(s.proj_in.w.raw_dim()),
                b: Array1::zeros(s.proj_in.b.raw_dim()),
            },
            layers: s
                .layers
                .iter()
                .map(|l| DilatedLayer {
                    taps: [
                        Array2::zeros(l.taps[0].raw_dim()),
                        Array2::zeros(l.taps[1].raw_dim()),
                        Array2::zeros(l.taps[2].raw_dim()),
                    ],
                    b: Array1::zeros(l.b.raw_dim()),
                    mix: Conv1x1 {
                        w: Array2::zeros(l.mix.w.raw_dim()),
                        b: Array1::zeros(l.mix.b.raw_dim()),
                    },
                    dilation: l.dilation,
                })
                .collect(),
            proj_out: Conv1x1 {
                w: Array2::zeros(s.proj_out.w.raw_dim()),
                b: Array1::zeros(s.proj_out.b.raw_dim()),
            },
        })
        .collect()
}

fn colsum(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(ndarray::Axis(0))
}

/// Exact parameter gradients, flattened in canonical order, for the loss
/// whose per-stage logit gradients are `dlogits`.
pub(crate) fn backward_flat(
    params: &TcnParams,
    tape: &GradTape,
    dlogits: &[Array2<f64>],
) -> Result<Vec<f64>> {
    if tape.version != params.version {
        return Err(Error::StaleTape(format!(
            "tape version {} vs params version {}",
            tape.version, params.version
        )));
    }
    if dlogits.len() != params.stages.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} stage gradients for {} stages",
            dlogits.len(),
            params.stages.len()
        )));
    }
    let mut grads = zeros_like_stages(params);
    // Accumulated dL/dlogits per stage, including inter-stage chains.
    let mut glogits: Vec<Array2<f64>> = dlogits.to_vec();
    for s in (0..params.stages.len()).rev() {
        let stage = &params.stages[s];
        let st = &tape.stages[s];
        let gl = &glogits[s];
        if gl.dim() != (st.hidden_out.nrows(), params.arch.num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "stage {s} logit gradient has shape {:?}",
                gl.shape()
            )));
        }

        // Output projection.
        grads[s].proj_out.w += &st.hidden_out.t().dot(gl);
        grads[s].proj_out.b += &colsum(gl);
        let mut gh = gl.dot(&stage.proj_out.w.t());

        // Residual layers in reverse.
        for (l, layer) in stage.layers.iter().enumerate().rev() {
            let lt = &st.layers[l];
            let post = lt.pre_relu.mapv(|v| v.max(0.0));
            grads[s].layers[l].mix.w += &post.t().dot(&gh);
            grads[s].layers[l].mix.b += &colsum(&gh);
            let mut gpre = gh.dot(&layer.mix.w.t());
            gpre.zip_mut_with(&lt.pre_relu, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            grads[s].layers[l].b += &colsum(&gpre);
            let d = layer.dilation as i64;
            let mut gx = Array2::<f64>::zeros(gh.raw_dim());
            for (k, off) in [(0usize, -d), (1, 0), (2, d)] {
                let sk = shifted(&lt.input, off);
                grads[s].layers[l].taps[k] += &sk.t().dot(&gpre);
                let tmp = gpre.dot(&layer.taps[k].t());
                scatter_shifted_add(&mut gx, &tmp, off);
            }
            gx += &gh; // residual skip
            gh = gx;
        }

        // Input projection.
        grads[s].proj_in.w += &st.input.t().dot(&gh);
        grads[s].proj_in.b += &colsum(&gh);
        if s > 0 {
            let ginput = gh.dot(&stage.proj_in.w.t());
            // Chain through the softmax that fed this stage.
            let p = tape.stages[s - 1]
                .probs
                .as_ref()
                .expect("previous stage recorded softmax");
            let mut gprev = Array2::<f64>::zeros(p.raw_dim());
            for ((mut orow, prow), grow) in gprev
                .rows_mut()
                .into_iter()
                .zip(p.rows())
                .zip(ginput.rows())
            {
                let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                for ((o, &pv), &gv) in orow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
                    *o = pv * (gv - dot);
                }
            }
            glogits[s - 1] += &gprev;
        }
    }
    let mut flat = Vec::with_capacity(params.num_params());
    visit(&grads, |v| flat.push(*v));
    Ok(flat)
}

/// One optimizer step: backprop `dlogits` through `tape` and apply Adam.
/// Consumes the tape; a stale tape (recorded before the latest update) is
/// rejected.
pub fn train_step(
    params: &mut TcnParams,
    dlogits: &[Array2<f64>],
    tape: GradTape,
    lr: f64,
) -> Result<()> {
    let grad = backward_flat(params, &tape, dlogits)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    let mut theta = params.flatten();
    params.adam.update(&mut theta, &grad, lr);
    params.unflatten(&theta);
    params.version += 1;
    Ok(())
}

/// Accumulate pre-computed flat gradients (ordered reduction over videos)
/// and apply one Adam step. Tapes for the contributing videos must all have
/// been recorded at the current parameter version.
pub fn train_step_accumulated(
    params: &mut TcnParams,
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<()> {
    if grads.is_empty() {
        return Err(Error::InvalidParameter("no gradients to accumulate".into()));
    }
    let n = params.num_params();
    let mut total = vec![0.0; n];
    for g in grads {
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} vs {} params",
                g.len(),
                n
            )));
        }
        for i in 0..n {
            total[i] += g[i];
        }
    }
    let scale = 1.0 / grads.len() as f64;
    for v in &mut total {
        *v *= scale;
        if !v.is_finite() {
            return Err(Error::NonFinite("accumulated gradient".into()));
        }
    }
    let mut theta = params.flatten();
    params.adam.update(&mut theta, &total, lr);
    params.unflatten(&theta);
    params.version += 1;
    Ok(())
}

/// Per-video gradient for accumulation: backward only, no update.
pub fn video_gradient(
    params: &TcnParams,
    tape: GradTape,
    dlogits: &[Array2<f64>],
) -> Result<Vec<f64>> {
    backward_flat(params, &tape, dlogits)
}

// --- gradient checking ---------------------------------------------------------

/// Central-difference check of an analytic gradient w.r.t. a matrix input.
/// Returns the max over entries of |analytic − numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: &F, x: &Array2<f64>, analytic: &Array2<f64>) -> Result<f64>
where
    F: Fn(&Array2<f64>) -> Result<f64>,
{
    if x.raw_dim() != analytic.raw_dim() {
        return Err(Error::ShapeMismatch("grad_check shapes differ".into()));
    }
    let eps = 1e-6;
    let mut worst = 0.0_f64;
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + eps;
        let fp = f(&xp)?;
        xp[idx] = orig - eps;
        let fm = f(&xp)?;
        xp[idx] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference check of backprop parameter gradients.
///
/// `loss` maps per-stage logits to a scalar and its per-stage logit
/// gradients. Samples `samples` parameters (at least 100 recommended) and
/// returns the max relative error |analytic − central-difference| /
/// max(1, |central-difference|).
pub fn grad_check_params<F>(
    loss: &F,
    params: &TcnParams,
    feats: &FeatureSequence,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)>,
{
    let (logits, tape) = tcn_forward_with_tape(params, feats)?;
    let (_, dlogits) = loss(&logits)?;
    let analytic = backward_flat(params, &tape, &dlogits)?;

    let n = params.num_params();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut theta = params.flatten();
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let i = rng.gen_range(0..n);
        let orig = theta[i];
        theta[i] = orig + eps;
        probe.unflatten(&theta);
        let (fp, _) = loss(&tcn_forward(&probe, feats)?).map(|(v, g)| (v, g))?;
        theta[i] = orig - eps;
        probe.unflatten(&theta);
        let (fm, _) = loss(&tcn_forward(&probe, feats)?).map(|(v, g)| (v, g))?;
        theta[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    probe.unflatten(&theta);
    Ok(worst)
}

// --- checkpoints -----------------------------------------------------------------

/// Serialize parameters and optimizer state.
pub fn save_checkpoint(path: &Path, params: &TcnParams) -> Result<()> {
    let a = &params.arch;
    let flat = params.flatten();
    let mut buf = Vec::with_capacity(64 + flat.len() * 24);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [a.in_dim, a.hidden, a.num_classes, a.num_stages, a.layers_per_stage] {
        put_u32(&mut buf, v as u32);
    }
    put_u64(&mut buf, flat.len() as u64);
    for v in &flat {
        put_f64(&mut buf, *v);
    }
    put_u64(&mut buf, params.adam.step);
    for v in &params.adam.m {
        put_f64(&mut buf, *v);
    }
    for v in &params.adam.v {
        put_f64(&mut buf, *v);
    }
    atomic_write(path, &buf)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TcnParams> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = ByteReader::new(&buf, "checkpoint");
    if r.bytes(5)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("{}: unsupported version {version}", path.display())));
    }
    let arch = TcnArch {
        in_dim: r.u32()? as usize,
        hidden: r.u32()? as usize,
        num_classes: r.u32()? as usize,
        num_stages: r.u32()? as usize,
        layers_per_stage: r.u32()? as usize,
    };
    let mut params = TcnParams::init(arch, 0)?;
    let n = r.u64()? as usize;
    if n != params.num_params() {
        return Err(Error::Parse(format!(
            "{}: {} parameters for architecture needing {}",
            path.display(),
            n,
            params.num_params()
        )));
    }
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        flat.push(r.f64()?);
    }
    params.unflatten(&flat);
    let step = r.u64()?;
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64()?);
    }
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(r.f64()?);
    }
    if r.remaining() != 0 {
        return Err(Error::Parse(format!("{}: trailing bytes", path.display())));
    }
    params.adam = AdamState { m, v, step };
    if !params.flatten().iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_arch() -> TcnArch {
        TcnArch {
            in_dim: 3,
            hidden: 6,
            num_classes: 4,
            num_stages: 2,
            layers_per_stage: 3,
        }
    }

    fn random_feats(t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0));
        FeatureSequence::new(frames, 1.0, "test").unwrap()
    }

    #[test]
    fn zero_output_projection_gives_uniform_probs() {
        let mut params = TcnParams::init(tiny_arch(), 7).unwrap();
        params.zero_output_projection();
        let feats = random_feats(10, 3, 1);
        let logits = tcn_forward(&params, &feats).unwrap();
        assert_eq!(logits.len(), 2);
        for stage in &logits {
            assert_eq!(stage.dim(), (10, 4));
            for &v in stage.iter() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn constant_input_gives_time_constant_logits() {
        let params = TcnParams::init(tiny_arch(), 3).unwrap();
        let frames = Array2::from_elem((17, 3), 0.4);
        let feats = FeatureSequence::new(frames, 1.0, "const").unwrap();
        let logits = tcn_forward(&params, &feats).unwrap();
        for stage in &logits {
            let first = stage.row(0).to_owned();
            for row in stage.rows() {
                for (a, b) in row.iter().zip(first.iter()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = TcnParams::init(tiny_arch(), 11).unwrap();
        let b = TcnParams::init(tiny_arch(), 11).unwrap();
        let feats = random_feats(12, 3, 2);
        let la = tcn_forward(&a, &feats).unwrap();
        let lb = tcn_forward(&b, &feats).unwrap();
        for (x, y) in la.iter().zip(lb.iter()) {
            assert_eq!(x, y); // bit-identical
        }
        let c = TcnParams::init(tiny_arch(), 12).unwrap();
        let lc = tcn_forward(&c, &feats).unwrap();
        assert_ne!(la[1], lc[1]);
    }

    #[test]
    fn rejects_width_mismatch() {
        let params = TcnParams::init(tiny_arch(), 0).unwrap();
        let feats = random_feats(5, 2, 0);
        assert!(tcn_forward(&params, &feats).is_err());
    }

    /// Loss used in parameter-gradient tests: sum of squared logits across
    /// stages (simple, dense, exercises inter-stage chaining).
    fn quadratic_loss(logits: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut v = 0.0;
        let mut grads = Vec::new();
        for l in logits {
            v += l.iter().map(|x| x * x).sum::<f64>();
            grads.push(2.0 * l);
        }
        Ok((v, grads))
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let params = TcnParams::init(tiny_arch(), 5).unwrap();
        let feats = random_feats(9, 3, 6);
        let err = grad_check_params(&quadratic_loss, &params, &feats, 1e-4, 120, 99).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn train_step_with_zero_gradient_keeps_params() {
        let mut params = TcnParams::init(tiny_arch(), 5).unwrap();
        let before = params.flatten();
        let feats = random_feats(8, 3, 1);
        let (logits, tape) = tcn_forward_with_tape(&params, &feats).unwrap();
        let zeros: Vec<Array2<f64>> = logits.iter().map(|l| Array2::zeros(l.raw_dim())).collect();
        train_step(&mut params, &zeros, tape, 5e-4).unwrap();
        assert_eq!(params.flatten(), before);
        assert_eq!(params.adam_step(), 1);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut params = TcnParams::init(tiny_arch(), 5).unwrap();
        let feats = random_feats(8, 3, 1);
        let (logits, tape1) = tcn_forward_with_tape(&params, &feats).unwrap();
        let (_, tape2) = tcn_forward_with_tape(&params, &feats).unwrap();
        let dl: Vec<Array2<f64>> = logits.iter().map(|l| l.clone()).collect();
        train_step(&mut params, &dl, tape1, 5e-4).unwrap();
        let err = train_step(&mut params, &dl, tape2, 5e-4);
        assert!(matches!(err, Err(Error::StaleTape(_))));
    }

    #[test]
    fn adam_moves_opposite_constant_gradient() {
        let mut adam = AdamState::new(1);
        let mut theta = [0.0_f64];
        let mut prev = theta[0];
        for _ in 0..100 {
            adam.update(&mut theta, &[1.0], 1e-3);
            assert!(theta[0] < prev);
            prev = theta[0];
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = 0.1_f64;
        let mut adam = AdamState::new(1);
        let mut theta = [0.0_f64];
        for _ in 0..500 {
            let g = theta[0] - target;
            adam.update(&mut theta, &[g], 5e-4);
        }
        assert!(
            (theta[0] - target).abs() < 1e-3,
            "theta {} vs target {}",
            theta[0],
            target
        );
    }

    #[test]
    fn training_reduces_loss_on_small_instance() {
        let mut params = TcnParams::init(tiny_arch(), 21).unwrap();
        let feats = random_feats(20, 3, 3);
        // Target: class = frame parity.
        let target: Vec<usize> = (0..20).map(|t| t % 2).collect();
        let loss_of = |logits: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let mut value = 0.0;
            let mut grads = Vec::new();
            for l in logits {
                let p = softmax_rows(l);
                let mut g = p.clone();
                for (t, &y) in target.iter().enumerate() {
                    value -= p[[t, y]].max(1e-12).ln();
                    g[[t, y]] -= 1.0;
                }
                grads.push(g / target.len() as f64);
            }
            (value / (target.len() * logits.len()) as f64, grads)
        };
        let (logits, _) = tcn_forward_with_tape(&params, &feats).unwrap();
        let (initial, _) = loss_of(&logits);
        for _ in 0..60 {
            let (logits, tape) = tcn_forward_with_tape(&params, &feats).unwrap();
            let (_, grads) = loss_of(&logits);
            train_step(&mut params, &grads, tape, 5e-3).unwrap();
        }
        let final_logits = tcn_forward(&params, &feats).unwrap();
        let (final_loss, _) = loss_of(&final_logits);
        assert!(
            final_loss < initial * 0.5,
            "loss {initial} -> {final_loss} did not halve"
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pckpt");
        let mut params = TcnParams::init(tiny_arch(), 31).unwrap();
        // Give Adam some non-trivial state.
        let feats = random_feats(8, 3, 4);
        let (logits, tape) = tcn_forward_with_tape(&params, &feats).unwrap();
        let dl: Vec<Array2<f64>> = logits.iter().map(|l| l * 0.1).collect();
        train_step(&mut params, &dl, tape, 5e-4).unwrap();

        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.arch(), params.arch());
        assert_eq!(back.flatten(), params.flatten());
        assert_eq!(back.adam, params.adam);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..5], b"PCKPT");
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pckpt");
        let params = TcnParams::init(tiny_arch(), 31).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn accumulated_step_matches_meaned_gradients() {
        let arch = tiny_arch();
        let mut a = TcnParams::init(arch, 77).unwrap();
        let mut b = a.clone();
        let f1 = random_feats(8, 3, 10);
        let f2 = random_feats(8, 3, 11);

        // Path A: accumulate per-video gradients, one step.
        let (l1, t1) = tcn_forward_with_tape(&a, &f1).unwrap();
        let g1 = video_gradient(&a, t1, &quadratic_loss(&l1).unwrap().1).unwrap();
        let (l2, t2) = tcn_forward_with_tape(&a, &f2).unwrap();
        let g2 = video_gradient(&a, t2, &quadratic_loss(&l2).unwrap().1).unwrap();
        train_step_accumulated(&mut a, &[g1.clone(), g2.clone()], 1e-3).unwrap();

        // Path B: manual mean of the flat gradients through the same Adam.
        let mean: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| 0.5 * (x + y)).collect();
        let mut theta = b.flatten();
        let mut adam = AdamState::new(theta.len());
        adam.update(&mut theta, &mean, 1e-3);
        b.unflatten(&theta);

        assert_eq!(a.flatten(), b.flatten());
    }
}
