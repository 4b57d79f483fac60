//! Central finite-difference verification of analytic gradients.
//!
//! A case exposes its differentiable inputs, a forward pass and a backward
//! pass. The scalar probed is `L = sum_i c_i * y_i` for a fixed random
//! projection `c`, so one backward call with `grad_out = c` yields the whole
//! analytic gradient. Each probed element is perturbed by `+-eps` in the
//! case's own precision and the realised step is measured after rounding.
//!
//! Piecewise-linear ops are not differentiable at their kinks. Every forward
//! also returns a signature of its discrete state (ReLU masks, hard-negative
//! selections, ...). A probe whose one evaluation disagrees with the base
//! state has a kink on that side and is scored by the one-sided difference on
//! the other, which is exact for piecewise-linear ops. Probes with kinks on
//! both sides are skipped; the skipped fraction is bounded.
//!
//! The case error is `max_j |a_j - n_j| / max(|a|_inf, |n|_inf)` taken over
//! every probed element of every input, so a tensor whose gradient is small
//! next to the rest of the case is not judged against its own rounding noise.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::detector::{
    encode_boxes, multibox_loss, BBox, DetectorNet, GroundTruth, MultiboxConfig,
};
use crate::fluff::{fluff_backward_cached, fluff_forward_cached, FluffConfig, FluffParams};
use crate::nn::{self, ConvGeometry, ConvParams, Parameters, PoolGeometry};
use crate::rng::{seeded_rng, uniform_tensor, DetRng};
use crate::{Element, Result, Shape, Tensor};

/// FNV-1a over discrete forward state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature(u64);

impl Default for Signature {
    fn default() -> Self {
        Signature(0xcbf2_9ce4_8422_2325)
    }
}

impl Signature {
    pub fn push(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    /// Records which elements are strictly positive.
    pub fn push_mask<T: Element>(&mut self, t: &Tensor<T>) {
        let mut word = 0u64;
        for (i, v) in t.data().iter().enumerate() {
            if *v > T::ZERO {
                word |= 1 << (i % 64);
            }
            if i % 64 == 63 {
                self.push(word);
                word = 0;
            }
        }
        self.push(word);
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

pub trait GradCase<T: Element> {
    fn name(&self) -> String;

    /// Differentiable leaves, in the order `backward` reports them.
    fn inputs(&self) -> Vec<Tensor<T>>;

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)>;

    /// Forward output at full precision. Ops whose result is natively wider
    /// than `T` (the multibox loss accumulates in f64) override this so the
    /// probe does not see the rounding of their output back to `T`.
    fn forward_f64(&self, inputs: &[Tensor<T>]) -> Result<(Vec<f64>, Signature)> {
        let (y, sig) = self.forward(inputs)?;
        Ok((y.data().iter().map(|v| v.to_f64()).collect(), sig))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub eps: f64,
    pub max_rel_error: f64,
    /// Largest fraction of probes that may be skipped as kink crossings.
    pub max_skip_fraction: f64,
}

impl Tolerance {
    pub fn f32_default() -> Self {
        Tolerance {
            eps: 1e-3,
            max_rel_error: 1e-3,
            max_skip_fraction: 0.1,
        }
    }

    pub fn f64_default() -> Self {
        Tolerance {
            eps: 1e-6,
            max_rel_error: 1e-6,
            max_skip_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub precision: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Checked probes scored by a one-sided difference next to a kink.
    pub one_sided: usize,
    pub skipped: usize,
    pub passed: bool,
}

fn projected_loss<T: Element>(y: &[f64], c: &Tensor<T>) -> f64 {
    y.iter().zip(c.data()).map(|(a, b)| a * b.to_f64()).sum()
}

fn precision_name<T: Element>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Runs one case. `max_probes == 0` probes every element, otherwise at most
/// that many per input tensor, chosen with a fixed seed.
pub fn check_case<T: Element>(
    case: &dyn GradCase<T>,
    tol: Tolerance,
    max_probes: usize,
) -> Result<GradReport> {
    let inputs = case.inputs();
    let (y, _) = case.forward(&inputs)?;
    let mut rng = seeded_rng(0x9e37_79b9);
    let proj: Tensor<T> = uniform_tensor(&mut rng, y.shape(), -1.0, 1.0);
    let (base, base_sig) = case.forward_f64(&inputs)?;
    let base_loss = projected_loss(&base, &proj);
    let analytic = case.backward(&inputs, &proj)?;
    assert_eq!(analytic.len(), inputs.len(), "backward must report every input");

    let mut max_err = 0.0f64;
    let mut scale = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut one_sided = 0;
    let mut probe_inputs = inputs.clone();
    for (k_in, (input, grad)) in inputs.iter().zip(&analytic).enumerate() {
        let n = input.len();
        let idx: Vec<usize> = if max_probes == 0 || n <= max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_probes).into_vec();
            v.sort_unstable();
            v
        };
        for j in idx {
            let orig = input.data()[j];
            let hi = T::from_f64(orig.to_f64() + tol.eps);
            let lo = T::from_f64(orig.to_f64() - tol.eps);
            probe_inputs[k_in].data_mut()[j] = hi;
            let (y_hi, sig_hi) = case.forward_f64(&probe_inputs)?;
            probe_inputs[k_in].data_mut()[j] = lo;
            let (y_lo, sig_lo) = case.forward_f64(&probe_inputs)?;
            probe_inputs[k_in].data_mut()[j] = orig;
            let numeric = match (sig_hi == base_sig, sig_lo == base_sig) {
                (true, true) => {
                    (projected_loss(&y_hi, &proj) - projected_loss(&y_lo, &proj))
                        / (hi.to_f64() - lo.to_f64())
                }
                // a kink lies on one side only: difference on the other
                (true, false) => {
                    one_sided += 1;
                    (projected_loss(&y_hi, &proj) - base_loss) / (hi.to_f64() - orig.to_f64())
                }
                (false, true) => {
                    one_sided += 1;
                    (base_loss - projected_loss(&y_lo, &proj)) / (orig.to_f64() - lo.to_f64())
                }
                (false, false) => {
                    skipped += 1;
                    continue;
                }
            };
            let a = grad.data()[j].to_f64();
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
    }
    let worst = if scale > 0.0 {
        max_err / scale
    } else if max_err > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let total = checked + skipped;
    let skip_ok = total == 0 || (skipped as f64) <= tol.max_skip_fraction * total as f64;
    Ok(GradReport {
        name: case.name(),
        precision: precision_name::<T>(),
        max_rel_error: worst,
        checked,
        one_sided,
        skipped,
        passed: worst < tol.max_rel_error && skip_ok && worst.is_finite(),
    })
}

fn signed_away_from_zero<T: Element>(rng: &mut DetRng, shape: Shape, min_abs: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(min_abs..1.0);
        T::from_f64(if rng.gen::<bool>() { m } else { -m })
    })
}

/// Distinct values on a 0.01 grid, shuffled: no ties within reach of `eps`.
fn well_separated<T: Element>(rng: &mut DetRng, shape: Shape) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    vals.shuffle(rng);
    Tensor::from_fn(shape, |i| T::from_f64(vals[i]))
}

pub struct ConvCase<T: Element> {
    x: Tensor<T>,
    params: ConvParams<T>,
}

impl<T: Element> ConvCase<T> {
    pub fn new(x_shape: Shape, out_c: usize, k: usize, geometry: ConvGeometry, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let x = uniform_tensor(&mut rng, x_shape, -1.0, 1.0);
        let params = ConvParams {
            weight: uniform_tensor(&mut rng, (out_c, x_shape.channels, k, k), -1.0, 1.0),
            bias: uniform_tensor(&mut rng, (1, out_c, 1, 1), -1.0, 1.0),
            geometry,
        };
        ConvCase { x, params }
    }

    fn with(&self, inputs: &[Tensor<T>]) -> ConvParams<T> {
        ConvParams {
            weight: inputs[1].clone(),
            bias: inputs[2].clone(),
            geometry: self.params.geometry,
        }
    }
}

impl<T: Element> GradCase<T> for ConvCase<T> {
    fn name(&self) -> String {
        let g = self.params.geometry;
        format!(
            "conv2d x{:?} k{} s{} p{} d{}",
            self.x.shape().dims(),
            self.params.kernel(),
            g.stride,
            g.padding,
            g.dilation
        )
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone(), self.params.weight.clone(), self.params.bias.clone()]
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        Ok((nn::conv2d_forward(&inputs[0], &self.with(inputs))?, Signature::default()))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = nn::conv2d_backward(&inputs[0], &self.with(inputs), grad_out)?;
        Ok(vec![g.x, g.weight, g.bias])
    }
}

pub struct ReluCase<T: Element> {
    x: Tensor<T>,
}

impl<T: Element> ReluCase<T> {
    pub fn new(shape: Shape, seed: u64) -> Self {
        ReluCase {
            x: signed_away_from_zero(&mut seeded_rng(seed), shape, 0.05),
        }
    }
}

impl<T: Element> GradCase<T> for ReluCase<T> {
    fn name(&self) -> String {
        format!("relu x{:?}", self.x.shape().dims())
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let mut sig = Signature::default();
        sig.push_mask(&inputs[0]);
        Ok((nn::relu_forward(&inputs[0]), sig))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![nn::relu_backward(&inputs[0], grad_out)?])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub struct PoolCase<T: Element> {
    x: Tensor<T>,
    kind: PoolKind,
    geometry: PoolGeometry,
}

impl<T: Element> PoolCase<T> {
    pub fn new(kind: PoolKind, shape: Shape, geometry: PoolGeometry, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let x = match kind {
            PoolKind::Max => well_separated(&mut rng, shape),
            PoolKind::Avg => uniform_tensor(&mut rng, shape, -1.0, 1.0),
        };
        PoolCase { x, kind, geometry }
    }
}

impl<T: Element> GradCase<T> for PoolCase<T> {
    fn name(&self) -> String {
        format!(
            "{}pool2d x{:?} w{} p{}",
            if self.kind == PoolKind::Max { "max" } else { "avg" },
            self.x.shape().dims(),
            self.geometry.window,
            self.geometry.padding
        )
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let mut sig = Signature::default();
        let y = match self.kind {
            PoolKind::Max => {
                for j in nn::maxpool2d_argmax(&inputs[0], self.geometry)? {
                    sig.push(j as u64);
                }
                nn::maxpool2d_forward(&inputs[0], self.geometry)?
            }
            PoolKind::Avg => nn::avgpool2d_forward(&inputs[0], self.geometry)?,
        };
        Ok((y, sig))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![match self.kind {
            PoolKind::Max => nn::maxpool2d_backward(&inputs[0], self.geometry, grad_out)?,
            PoolKind::Avg => nn::avgpool2d_backward(&inputs[0], self.geometry, grad_out)?,
        }])
    }
}

/// Concatenation followed by an elementwise add of a second tensor, so the
/// two structural ops are checked on their own.
pub struct ConcatAddCase<T: Element> {
    parts: Vec<Tensor<T>>,
    addend: Tensor<T>,
}

impl<T: Element> ConcatAddCase<T> {
    pub fn new(batch: usize, channels: &[usize], h: usize, w: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let parts = channels
            .iter()
            .map(|&c| uniform_tensor(&mut rng, (batch, c, h, w), -1.0, 1.0))
            .collect();
        let total = channels.iter().sum();
        let addend = uniform_tensor(&mut rng, (batch, total, h, w), -1.0, 1.0);
        ConcatAddCase { parts, addend }
    }
}

impl<T: Element> GradCase<T> for ConcatAddCase<T> {
    fn name(&self) -> String {
        let chans: Vec<usize> = self.parts.iter().map(|p| p.shape().channels).collect();
        format!("concat+add channels {chans:?}")
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = self.parts.clone();
        v.push(self.addend.clone());
        v
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let (parts, addend) = inputs.split_at(inputs.len() - 1);
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = nn::concat_channels(&refs)?;
        Ok((nn::add(&cat, &addend[0])?, Signature::default()))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let sizes: Vec<usize> = inputs[..inputs.len() - 1]
            .iter()
            .map(|t| t.shape().channels)
            .collect();
        let mut v = nn::split_channels(grad_out, &sizes)?;
        v.push(grad_out.clone());
        Ok(v)
    }
}

/// Whole block: input and every parameter tensor are probed.
pub struct FluffCase<T: Element> {
    cfg: FluffConfig,
    x: Tensor<T>,
    params: FluffParams<T>,
}

impl<T: Element> FluffCase<T> {
    pub fn new(cfg: FluffConfig, x_shape: Shape, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let x = uniform_tensor(&mut rng, x_shape, -1.0, 1.0);
        let mut params = FluffParams::init(&cfg, &mut rng).expect("valid block configuration");
        // non-zero biases so every path is exercised
        params.visit_mut("", &mut |name, t| {
            if name.ends_with("bias") {
                *t = uniform_tensor(&mut rng, t.shape(), -0.2, 0.2);
            }
        });
        FluffCase { cfg, x, params }
    }

    fn with(&self, inputs: &[Tensor<T>]) -> FluffParams<T> {
        let mut p = self.params.clone();
        let mut it = inputs[1..].iter();
        p.visit_mut("", &mut |_, t| *t = it.next().expect("one input per tensor").clone());
        p
    }
}

impl<T: Element> GradCase<T> for FluffCase<T> {
    fn name(&self) -> String {
        format!(
            "fluff L{} R{} {:?} relu={} x{:?}",
            self.cfg.levels,
            self.cfg.branches,
            self.cfg.fusion,
            self.cfg.inter_level_relu,
            self.x.shape().dims()
        )
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.x.clone()];
        self.params.visit("", &mut |_, t| v.push(t.clone()));
        v
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let cache = fluff_forward_cached(&inputs[0], &self.cfg, &self.with(inputs))?;
        let sig = cache.activation_signature();
        Ok((cache.output().clone(), sig))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let params = self.with(inputs);
        let cache = fluff_forward_cached(&inputs[0], &self.cfg, &params)?;
        let g = fluff_backward_cached(&cache, &self.cfg, &params, grad_out)?;
        let mut v = vec![g.x];
        g.params.visit("", &mut |_, t| v.push(t.clone()));
        Ok(v)
    }
}

/// Multibox loss over loc offsets `(B, 1, P, 4)` and logits `(B, 1, P, C)`.
pub struct MultiboxCase<T: Element> {
    loc: Tensor<T>,
    conf: Tensor<T>,
    priors: Vec<BBox>,
    truth: Vec<Vec<GroundTruth>>,
    num_classes: usize,
    cfg: MultiboxConfig,
}

impl<T: Element> MultiboxCase<T> {
    /// Random toy problem: `priors` random boxes, one or two objects per image.
    pub fn new(batch: usize, priors: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let random_box = |rng: &mut DetRng| {
            let cx: f32 = rng.gen_range(0.2..0.8);
            let cy: f32 = rng.gen_range(0.2..0.8);
            let w: f32 = rng.gen_range(0.1..0.4);
            let h: f32 = rng.gen_range(0.1..0.4);
            BBox::from_center(cx, cy, w, h).clamped()
        };
        let prior_boxes: Vec<BBox> = (0..priors).map(|_| random_box(&mut rng)).collect();
        let truth = (0..batch)
            .map(|_| {
                (0..rng.gen_range(1..=2))
                    .map(|_| GroundTruth {
                        bbox: random_box(&mut rng),
                        label: rng.gen_range(1..num_classes),
                    })
                    .collect()
            })
            .collect();
        let loc = uniform_tensor(&mut rng, (batch, 1, priors, 4), -1.0, 1.0);
        let conf = uniform_tensor(&mut rng, (batch, 1, priors, num_classes), -2.0, 2.0);
        MultiboxCase {
            loc,
            conf,
            priors: prior_boxes,
            truth,
            num_classes,
            cfg: MultiboxConfig {
                match_iou: 0.3,
                ..MultiboxConfig::default()
            },
        }
    }
}

impl<T: Element> MultiboxCase<T> {
    fn evaluate(&self, inputs: &[Tensor<T>]) -> Result<(f64, Signature)> {
        let out = multibox_loss(&inputs[0], &inputs[1], &self.priors, &self.truth, &self.cfg)?;
        let mut sig = Signature::default();
        for (b, negs) in out.negatives.iter().enumerate() {
            sig.push(b as u64);
            for &n in negs {
                sig.push(n as u64);
            }
        }
        // smooth-L1 regime of every matched coordinate
        for (b, matches) in out.matches.iter().enumerate() {
            for (p, m) in matches.iter().enumerate() {
                if let Some(g) = m {
                    let target = encode_boxes(
                        &self.priors[p..p + 1],
                        &[self.truth[b][*g].bbox],
                        self.cfg.variances,
                    )?[0];
                    for (k, t) in target.iter().enumerate() {
                        let d = inputs[0].at(b, 0, p, k).to_f64() - *t as f64;
                        sig.push((d.abs() < 1.0) as u64);
                    }
                }
            }
        }
        Ok((out.total, sig))
    }
}

impl<T: Element> GradCase<T> for MultiboxCase<T> {
    fn name(&self) -> String {
        format!(
            "multibox B{} P{} C{}",
            self.loc.shape().batch,
            self.priors.len(),
            self.num_classes
        )
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.loc.clone(), self.conf.clone()]
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let (total, sig) = self.evaluate(inputs)?;
        Ok((Tensor::from_vec((1, 1, 1, 1), vec![T::from_f64(total)])?, sig))
    }

    fn forward_f64(&self, inputs: &[Tensor<T>]) -> Result<(Vec<f64>, Signature)> {
        let (total, sig) = self.evaluate(inputs)?;
        Ok((vec![total], sig))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let out = multibox_loss(&inputs[0], &inputs[1], &self.priors, &self.truth, &self.cfg)?;
        let s = grad_out.data()[0].to_f64();
        Ok(vec![
            out.grad_loc.map(|v| T::from_f64(v.to_f64() * s)),
            out.grad_conf.map(|v| T::from_f64(v.to_f64() * s)),
        ])
    }
}

/// Full detector forward/backward, probing the image and all parameters.
pub struct NetworkCase<T: Element> {
    net: DetectorNet<T>,
    x: Tensor<T>,
}

impl<T: Element> NetworkCase<T> {
    pub fn new(net: DetectorNet<T>, batch: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let s = net.config().input;
        let x = uniform_tensor(&mut rng, (batch, s.channels, s.height, s.width), 0.0, 1.0);
        NetworkCase { net, x }
    }

    fn with(&self, inputs: &[Tensor<T>]) -> DetectorNet<T> {
        let mut net = self.net.clone();
        let mut it = inputs[1..].iter();
        net.visit_mut("", &mut |_, t| *t = it.next().expect("one input per tensor").clone());
        net
    }
}

impl<T: Element> GradCase<T> for NetworkCase<T> {
    fn name(&self) -> String {
        format!(
            "detector x{:?} params={}",
            self.x.shape().dims(),
            self.net.param_count()
        )
    }

    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.x.clone()];
        self.net.visit("", &mut |_, t| v.push(t.clone()));
        v
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<(Tensor<T>, Signature)> {
        let (out, cache) = self.with(inputs).forward_cached(&inputs[0])?;
        let y = nn::concat_channels(&[
            &out.loc.reshape((out.loc.shape().batch, out.loc.len() / out.loc.shape().batch.max(1), 1, 1))?,
            &out.conf.reshape((out.conf.shape().batch, out.conf.len() / out.conf.shape().batch.max(1), 1, 1))?,
        ])?;
        Ok((y, cache.activation_signature()))
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let net = self.with(inputs);
        let (out, cache) = net.forward_cached(&inputs[0])?;
        let b = out.loc.shape().batch.max(1);
        let parts = nn::split_channels(grad_out, &[out.loc.len() / b, out.conf.len() / b])?;
        let g_loc = parts[0].reshape(out.loc.shape())?;
        let g_conf = parts[1].reshape(out.conf.shape())?;
        let (grads, gx) = net.backward(&cache, &g_loc, &g_conf)?;
        let mut v = vec![gx];
        grads.visit("", &mut |_, t| v.push(t.clone()));
        Ok(v)
    }
}

/// The randomized small-shape suite behind the `gradcheck` command: at least
/// five instances of every op with a backward pass.
pub fn standard_suite<T: Element>(seed: u64) -> Vec<Box<dyn GradCase<T>>> {
    let mut rng = seeded_rng(seed);
    let mut cases: Vec<Box<dyn GradCase<T>>> = Vec::new();
    let dim = |rng: &mut DetRng, lo: usize, hi: usize| rng.gen_range(lo..=hi);

    for i in 0..6 {
        let (b, c, oc) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 4), dim(&mut rng, 1, 3));
        let (h, w) = (dim(&mut rng, 4, 9), dim(&mut rng, 4, 9));
        // every fifth case is pointwise, the rest 3x3 at a random dilation
        let (k, g) = if i % 5 == 4 {
            (1, ConvGeometry::new(dim(&mut rng, 1, 2), 0, 1))
        } else {
            let d = dim(&mut rng, 1, 4);
            (3, ConvGeometry::new(dim(&mut rng, 1, 2), dim(&mut rng, 0, d), d))
        };
        let (h, w) = (h.max(g.extent(k)), w.max(g.extent(k)));
        cases.push(Box::new(ConvCase::new(Shape::new(b, c, h, w), oc, k, g, rng.gen())));
    }
    for _ in 0..5 {
        let s = Shape::new(dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 2, 7), dim(&mut rng, 2, 7));
        cases.push(Box::new(ReluCase::new(s, rng.gen())));
    }
    for _ in 0..5 {
        let s = Shape::new(dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 2, 8), dim(&mut rng, 2, 8));
        let g = PoolGeometry::matching_dilated_3x3(dim(&mut rng, 1, 3));
        cases.push(Box::new(PoolCase::new(PoolKind::Max, s, g, rng.gen())));
        cases.push(Box::new(PoolCase::new(PoolKind::Avg, s, g, rng.gen())));
    }
    for _ in 0..5 {
        let chans: Vec<usize> = (0..dim(&mut rng, 1, 4)).map(|_| dim(&mut rng, 1, 3)).collect();
        let (h, w) = (dim(&mut rng, 2, 5), dim(&mut rng, 2, 5));
        cases.push(Box::new(ConcatAddCase::new(dim(&mut rng, 1, 2), &chans, h, w, rng.gen())));
    }
    for i in 0..5 {
        // channel counts must split evenly across the branches
        let c = match i {
            0 => 2 * dim(&mut rng, 1, 2),
            4 => dim(&mut rng, 2, 4),
            _ => 4,
        };
        let cfg = match i {
            0 => FluffConfig {
                levels: 2,
                branches: 2,
                rates: vec![vec![1, 2], vec![2, 3]],
                ..FluffConfig::new(c)
            },
            1 => FluffConfig::new(c),
            2 => FluffConfig {
                inter_level_relu: false,
                ..FluffConfig::new(c).with_c_out(dim(&mut rng, 2, 6))
            },
            3 => FluffConfig {
                fusion: crate::FusionKind::MaxPool,
                inter_level_relu: false,
                ..FluffConfig::new(c)
            },
            _ => FluffConfig {
                levels: 3,
                branches: 1,
                c_out: Some(2),
                rates: vec![vec![1], vec![1], vec![1]],
                fusion: crate::FusionKind::PlainConv,
                inter_level_relu: false,
                ..FluffConfig::new(c)
            },
        };
        let s = Shape::new(dim(&mut rng, 1, 2), c, dim(&mut rng, 3, 6), dim(&mut rng, 3, 6));
        cases.push(Box::new(FluffCase::new(cfg, s, rng.gen())));
    }
    for _ in 0..5 {
        let (b, p, c) = (dim(&mut rng, 1, 3), dim(&mut rng, 6, 16), dim(&mut rng, 2, 5));
        cases.push(Box::new(MultiboxCase::new(b, p, c, rng.gen())));
    }
    cases
}
