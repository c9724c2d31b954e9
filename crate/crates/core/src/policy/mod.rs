//! Shared actor-critic network.
//!
//! ```text
//! visual 2×25×25 ─ conv 8×8/4 ─ SiLU ─ conv 4×4/2 ─ SiLU ─┐
//!                                                          ├─ concat ─ [dense ─ SiLU] × L ─┬─ mean (2)
//! vector 14 ───────────────────────────────────────────────┘                              ├─ logits (2)
//!                                                                                         └─ value (1)
//! log_std (2): free parameters
//! ```
//!
//! The network is generic over the float type: training runs in `f32`, gradient
//! checks instantiate the same code in `f64`. Backpropagation is written by hand
//! per layer.

mod checkpoint;
mod distribution;
mod layers;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::world::{GRID_SIDE, OBS_LEN, STACK, VECTOR_LEN};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, RngState, FORMAT_VERSION};
pub use distribution::{ActionDistribution, DistGrad, SampledAction};
pub use layers::Real;

use layers::{axpy, silu, silu_grad, ConvGeom};

pub const CONV1_KERNEL: usize = 8;
pub const CONV1_STRIDE: usize = 4;
pub const CONV2_KERNEL: usize = 4;
pub const CONV2_STRIDE: usize = 2;
pub const ACTION_DIMS: usize = 2;
pub const SIGNAL_CLASSES: usize = 2;

/// Samples per gradient chunk; fixed so that summation order never depends on
/// the number of worker threads.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            conv1_filters: 16,
            conv2_filters: 32,
            hidden_units: 512,
            num_layers: 2,
        }
    }
}

impl NetConfig {
    fn conv1(&self) -> ConvGeom {
        ConvGeom::new(STACK, GRID_SIDE, GRID_SIDE, self.conv1_filters, CONV1_KERNEL, CONV1_STRIDE)
    }

    fn conv2(&self) -> ConvGeom {
        let c1 = self.conv1();
        ConvGeom::new(self.conv1_filters, c1.out_h, c1.out_w, self.conv2_filters, CONV2_KERNEL, CONV2_STRIDE)
    }

    pub fn encoder_width(&self) -> usize {
        self.conv2().out_len()
    }

    pub fn trunk_input(&self) -> usize {
        VECTOR_LEN + self.encoder_width()
    }

    fn trunk_width(&self) -> usize {
        if self.num_layers == 0 {
            self.trunk_input()
        } else {
            self.hidden_units
        }
    }

    /// Named tensors in blob order.
    pub fn manifest(&self) -> Vec<TensorSpec> {
        let c1 = self.conv1();
        let c2 = self.conv2();
        let mut m = vec![
            TensorSpec::new("conv1.weight", &[c1.out_c, c1.in_c, c1.k, c1.k]),
            TensorSpec::new("conv1.bias", &[c1.out_c]),
            TensorSpec::new("conv2.weight", &[c2.out_c, c2.in_c, c2.k, c2.k]),
            TensorSpec::new("conv2.bias", &[c2.out_c]),
        ];
        let mut fan_in = self.trunk_input();
        for l in 0..self.num_layers {
            m.push(TensorSpec::new(&format!("trunk.{l}.weight"), &[self.hidden_units, fan_in]));
            m.push(TensorSpec::new(&format!("trunk.{l}.bias"), &[self.hidden_units]));
            fan_in = self.hidden_units;
        }
        let w = self.trunk_width();
        m.extend([
            TensorSpec::new("mean.weight", &[ACTION_DIMS, w]),
            TensorSpec::new("mean.bias", &[ACTION_DIMS]),
            TensorSpec::new("log_std", &[ACTION_DIMS]),
            TensorSpec::new("logits.weight", &[SIGNAL_CLASSES, w]),
            TensorSpec::new("logits.bias", &[SIGNAL_CLASSES]),
            TensorSpec::new("value.weight", &[1, w]),
            TensorSpec::new("value.bias", &[1]),
        ]);
        m
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(TensorSpec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    off: usize,
    len: usize,
}

impl Span {
    fn of<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.off..self.off + self.len]
    }

    fn of_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.off..self.off + self.len]
    }
}

/// Disjoint mutable views of a weight span and the bias span that follows it.
fn pair_mut<'a, T>(w: Span, b: Span, v: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(w.off + w.len <= b.off);
    let (head, tail) = v.split_at_mut(b.off);
    (w.of_mut(head), &mut tail[..b.len])
}

#[derive(Debug, Clone)]
struct Layout {
    conv1_w: Span,
    conv1_b: Span,
    conv2_w: Span,
    conv2_b: Span,
    trunk: Vec<(Span, Span)>,
    mean_w: Span,
    mean_b: Span,
    log_std: Span,
    logits_w: Span,
    logits_b: Span,
    value_w: Span,
    value_b: Span,
}

impl Layout {
    fn new(config: &NetConfig) -> Self {
        let manifest = config.manifest();
        let mut spans = Vec::with_capacity(manifest.len());
        let mut off = 0;
        for t in &manifest {
            spans.push(Span { off, len: t.len() });
            off += t.len();
        }
        let mut it = spans.into_iter();
        let mut next = || it.next().expect("manifest covers layout");
        let conv1_w = next();
        let conv1_b = next();
        let conv2_w = next();
        let conv2_b = next();
        let trunk = (0..config.num_layers).map(|_| (next(), next())).collect();
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            trunk,
            mean_w: next(),
            mean_b: next(),
            log_std: next(),
            logits_w: next(),
            logits_b: next(),
            value_w: next(),
            value_b: next(),
        }
    }
}

/// Raw head outputs for one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput<T> {
    pub mean: [T; ACTION_DIMS],
    pub log_std: [T; ACTION_DIMS],
    pub logits: [T; SIGNAL_CLASSES],
    pub value: T,
}

impl<T: Real> HeadOutput<T> {
    pub fn distribution(&self) -> ActionDistribution {
        ActionDistribution {
            mean: self.mean.map(Real::to_f64),
            log_std: self.log_std.map(Real::to_f64),
            logits: self.logits.map(Real::to_f64),
        }
    }

    pub fn value_f64(&self) -> f64 {
        self.value.to_f64()
    }
}

/// Loss gradient with respect to each head output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadGrad {
    pub mean: [f64; ACTION_DIMS],
    pub log_std: [f64; ACTION_DIMS],
    pub logits: [f64; SIGNAL_CLASSES],
    pub value: f64,
}

impl HeadGrad {
    pub fn from_dist(d: &DistGrad, value: f64) -> Self {
        Self {
            mean: d.mean,
            log_std: d.log_std,
            logits: d.logits,
            value,
        }
    }
}

/// Intermediate values kept for the backward pass.
pub struct Activations<T> {
    patches1: Vec<T>,
    z1: Vec<T>,
    patches2: Vec<T>,
    z2: Vec<T>,
    trunk_in: Vec<T>,
    zs: Vec<Vec<T>>,
    hs: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    config: NetConfig,
    layout_len: usize,
    pub data: Vec<T>,
}

impl<T: Real> PolicyParams<T> {
    pub fn zeros(config: NetConfig) -> Self {
        let n = config.param_count();
        Self {
            config,
            layout_len: n,
            data: vec![T::zero(); n],
        }
    }

    /// Orthogonal weights scaled per layer, zero biases, zero log-std.
    pub fn init<R: Rng>(config: NetConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let layout = Layout::new(&config);
        let hidden_gain = std::f64::consts::SQRT_2;
        let c1 = config.conv1();
        let c2 = config.conv2();
        let mut fill = |span: Span, rows: usize, cols: usize, gain: f64, rng: &mut R| {
            let w = layers::orthogonal(rows, cols, gain, rng);
            for (d, s) in span.of_mut(&mut p.data).iter_mut().zip(w) {
                *d = T::from_f64(s);
            }
        };
        fill(layout.conv1_w, c1.out_c, c1.patch_len(), hidden_gain, rng);
        fill(layout.conv2_w, c2.out_c, c2.patch_len(), hidden_gain, rng);
        let mut fan_in = config.trunk_input();
        for &(w, _) in &layout.trunk {
            fill(w, config.hidden_units, fan_in, hidden_gain, rng);
            fan_in = config.hidden_units;
        }
        let width = config.trunk_width();
        fill(layout.mean_w, ACTION_DIMS, width, 0.01, rng);
        fill(layout.logits_w, SIGNAL_CLASSES, width, 0.01, rng);
        fill(layout.value_w, 1, width, 1.0, rng);
        p
    }

    /// Gaussian-perturbed parameters, for tests and sweeps.
    pub fn random<R: Rng>(config: NetConfig, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        for d in &mut p.data {
            let z: f64 = rng.sample(StandardNormal);
            *d = T::from_f64(scale * z);
        }
        p
    }

    pub fn from_vec(config: NetConfig, data: Vec<T>) -> Result<Self> {
        let n = config.param_count();
        if data.len() != n {
            return Err(Error::CheckpointShape(format!("expected {n} parameters, got {}", data.len())));
        }
        Ok(Self {
            config,
            layout_len: n,
            data,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.layout_len
    }

    pub fn is_empty(&self) -> bool {
        self.layout_len == 0
    }

    pub fn cast<U: Real>(&self) -> PolicyParams<U> {
        PolicyParams {
            config: self.config,
            layout_len: self.layout_len,
            data: self.data.iter().map(|v| U::from_f64(Real::to_f64(*v))).collect(),
        }
    }

    /// Index ranges of each named tensor within `data`.
    pub fn tensor_ranges(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut off = 0;
        self.config
            .manifest()
            .into_iter()
            .map(|t| {
                let r = off..off + t.len();
                off = r.end;
                (t.name, r)
            })
            .collect()
    }

    fn check_obs(obs: &[T]) -> Result<()> {
        if obs.len() != OBS_LEN {
            return Err(Error::Shape {
                expected: OBS_LEN,
                actual: obs.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, obs: &[T]) -> Result<HeadOutput<T>> {
        Ok(self.forward_cached(obs)?.0)
    }

    pub fn forward_cached(&self, obs: &[T]) -> Result<(HeadOutput<T>, Activations<T>)> {
        Self::check_obs(obs)?;
        let cfg = &self.config;
        let layout = Layout::new(cfg);
        let p = &self.data;
        let (vector, visual) = obs.split_at(VECTOR_LEN);

        let g1 = cfg.conv1();
        let patches1 = g1.im2col(visual);
        let z1 = g1.forward(&patches1, layout.conv1_w.of(p), layout.conv1_b.of(p));
        let a1: Vec<T> = z1.iter().map(|&z| silu(z)).collect();

        let g2 = cfg.conv2();
        let patches2 = g2.im2col(&a1);
        let z2 = g2.forward(&patches2, layout.conv2_w.of(p), layout.conv2_b.of(p));

        let mut trunk_in = Vec::with_capacity(cfg.trunk_input());
        trunk_in.extend_from_slice(vector);
        trunk_in.extend(z2.iter().map(|&z| silu(z)));

        let mut zs = Vec::with_capacity(cfg.num_layers);
        let mut hs: Vec<Vec<T>> = Vec::with_capacity(cfg.num_layers);
        for &(w, b) in &layout.trunk {
            let input = hs.last().unwrap_or(&trunk_in);
            let z = layers::dense(w.of(p), b.of(p), input);
            hs.push(z.iter().map(|&v| silu(v)).collect());
            zs.push(z);
        }
        let h = hs.last().unwrap_or(&trunk_in);

        let mean = layers::dense(layout.mean_w.of(p), layout.mean_b.of(p), h);
        let logits = layers::dense(layout.logits_w.of(p), layout.logits_b.of(p), h);
        let value = layers::dense(layout.value_w.of(p), layout.value_b.of(p), h);
        let ls = layout.log_std.of(p);
        let out = HeadOutput {
            mean: [mean[0], mean[1]],
            log_std: [ls[0], ls[1]],
            logits: [logits[0], logits[1]],
            value: value[0],
        };
        let acts = Activations {
            patches1,
            z1,
            patches2,
            z2,
            trunk_in,
            zs,
            hs,
        };
        Ok((out, acts))
    }

    /// Accumulates `∂loss/∂θ` into `grad` given the loss gradient at the heads.
    pub fn backward(&self, acts: &Activations<T>, head: &HeadGrad, grad: &mut [T]) {
        let cfg = &self.config;
        let layout = Layout::new(cfg);
        let p = &self.data;
        let h = acts.hs.last().unwrap_or(&acts.trunk_in);
        let mut dh = vec![T::zero(); h.len()];

        let heads: [(Span, Span, &[f64]); 3] = [
            (layout.mean_w, layout.mean_b, &head.mean),
            (layout.logits_w, layout.logits_b, &head.logits),
            (layout.value_w, layout.value_b, std::slice::from_ref(&head.value)),
        ];
        for (w, b, g) in heads {
            let gz: Vec<T> = g.iter().map(|&v| T::from_f64(v)).collect();
            let (dw, db) = pair_mut(w, b, grad);
            layers::dense_backward(w.of(p), h, &gz, dw, db, Some(&mut dh));
        }
        for (d, &g) in layout.log_std.of_mut(grad).iter_mut().zip(&head.log_std) {
            *d += T::from_f64(g);
        }

        for (l, &(w, b)) in layout.trunk.iter().enumerate().rev() {
            let input = if l == 0 { &acts.trunk_in } else { &acts.hs[l - 1] };
            let dz: Vec<T> = acts.zs[l].iter().zip(&dh).map(|(&z, &g)| g * silu_grad(z)).collect();
            let mut dx = vec![T::zero(); input.len()];
            let (dw, db) = pair_mut(w, b, grad);
            layers::dense_backward(w.of(p), input, &dz, dw, db, Some(&mut dx));
            dh = dx;
        }

        // dh now holds the gradient of the trunk input; the vector part is a leaf.
        let dz2: Vec<T> = acts
            .z2
            .iter()
            .zip(&dh[VECTOR_LEN..])
            .map(|(&z, &g)| g * silu_grad(z))
            .collect();
        let g2 = cfg.conv2();
        let mut da1 = vec![T::zero(); g2.in_len()];
        let (dw, db) = pair_mut(layout.conv2_w, layout.conv2_b, grad);
        g2.backward(
            &acts.patches2,
            layout.conv2_w.of(p),
            &dz2,
            dw,
            db,
            Some(&mut da1),
        );
        let dz1: Vec<T> = acts.z1.iter().zip(&da1).map(|(&z, &g)| g * silu_grad(z)).collect();
        let g1 = cfg.conv1();
        let (dw, db) = pair_mut(layout.conv1_w, layout.conv1_b, grad);
        g1.backward(
            &acts.patches1,
            layout.conv1_w.of(p),
            &dz1,
            dw,
            db,
            None,
        );
    }

    /// Reverse-mode gradient of `Σ_i loss_i` over a batch, where `head_grad(i, out)`
    /// returns `∂loss_i/∂heads` at sample `i`. Also returns the head outputs.
    pub fn batch_gradient<F>(&self, batch: &[&[T]], head_grad: F) -> Result<(Vec<T>, Vec<HeadOutput<T>>)>
    where
        F: Fn(usize, &HeadOutput<T>) -> HeadGrad + Sync,
    {
        for obs in batch {
            Self::check_obs(obs)?;
        }
        let partials: Vec<(Vec<T>, Vec<HeadOutput<T>>)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = vec![T::zero(); self.len()];
                let mut outs = Vec::with_capacity(chunk.len());
                for (j, obs) in chunk.iter().enumerate() {
                    let (out, acts) = self.forward_cached(obs).expect("shape checked");
                    let hg = head_grad(c * GRAD_CHUNK + j, &out);
                    self.backward(&acts, &hg, &mut g);
                    outs.push(out);
                }
                (g, outs)
            })
            .collect();
        let mut total = vec![T::zero(); self.len()];
        let mut outs = Vec::with_capacity(batch.len());
        for (g, o) in partials {
            axpy(T::one(), &g, &mut total);
            outs.extend(o);
        }
        Ok((total, outs))
    }

    /// Joint log-probability of a stored action and the distribution entropy.
    pub fn log_prob_and_entropy(&self, obs: &[T], raw: [f64; 2], signal: bool) -> Result<(f64, f64)> {
        let d = self.forward(obs)?.distribution();
        Ok((d.log_prob(raw, signal), d.entropy()))
    }
}

impl PolicyParams<f32> {
    /// Evaluates a batch of observations, one forward pass each.
    pub fn forward_batch(&self, batch: &[&[f32]]) -> Result<Vec<HeadOutput<f32>>> {
        batch.par_iter().map(|o| self.forward(o)).collect()
    }
}
