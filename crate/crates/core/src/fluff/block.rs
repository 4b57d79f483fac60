use rayon::prelude::*;

use super::{FluffConfig, FusionKind};
use crate::nn::{
    self, join, ConvGeometry, ConvParams, Parameters, PoolGeometry,
};
use crate::gradcheck::Signature;
use crate::rng::DetRng;
use crate::{Element, Error, Result, Tensor};

/// Parameter tensors of one block. Shapes are fixed by its [`FluffConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct FluffParams<T: Element = f32> {
    /// Per-branch 1x1 reduction `c_pre -> c_pre / R`.
    pub entry: Vec<ConvParams<T>>,
    /// `[level][branch]` 3x3 cells; `None` for pooling cells.
    pub cells: Vec<Vec<Option<ConvParams<T>>>>,
    /// 1x1 fusion of the latticed concatenation.
    pub output: ConvParams<T>,
    /// 1x1 projection of the input; `None` for an identity shortcut.
    pub shortcut: Option<ConvParams<T>>,
}

impl<T: Element> FluffParams<T> {
    pub fn zeros(cfg: &FluffConfig) -> Result<Self> {
        Self::build(cfg, &mut |ic, oc, k, g| ConvParams::zeros(ic, oc, k, g))
    }

    pub fn init(cfg: &FluffConfig, rng: &mut DetRng) -> Result<Self> {
        Self::build(cfg, &mut |ic, oc, k, g| ConvParams::init(rng, ic, oc, k, g))
    }

    fn build(
        cfg: &FluffConfig,
        make: &mut dyn FnMut(usize, usize, usize, ConvGeometry) -> ConvParams<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let cb = cfg.branch_channels();
        let entry = (0..cfg.branches)
            .map(|_| make(cfg.c_pre, cb, 1, ConvGeometry::pointwise()))
            .collect();
        let cells = (0..cfg.levels)
            .map(|l| {
                (0..cfg.branches)
                    .map(|r| {
                        cfg.has_cell_params().then(|| {
                            make(cb, cb, 3, ConvGeometry::same3x3(cfg.cell_dilation(l, r)))
                        })
                    })
                    .collect()
            })
            .collect();
        let output = make(
            cfg.concat_channels(),
            cfg.out_channels(),
            1,
            ConvGeometry::pointwise(),
        );
        let shortcut = (!cfg.identity_shortcut)
            .then(|| make(cfg.c_pre, cfg.out_channels(), 1, ConvGeometry::pointwise()));
        Ok(FluffParams {
            entry,
            cells,
            output,
            shortcut,
        })
    }

    /// Verifies every tensor has the shape `cfg` dictates.
    pub fn check(&self, cfg: &FluffConfig) -> Result<()> {
        cfg.validate()?;
        let expected = FluffParams::<T>::zeros(cfg)?;
        let mine = self.named_tensors();
        let want = expected.named_tensors();
        if mine.len() != want.len() {
            return Err(Error::InvalidConfig(format!(
                "block has {} parameter tensors, configuration needs {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&want) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "fluff params",
                    expected: b.shape().dims(),
                    actual: a.shape().dims(),
                })
                .map_err(|e| Error::InvalidConfig(format!("{name}: {e}")));
            }
        }
        for (l, row) in self.cells.iter().enumerate() {
            for (r, cell) in row.iter().enumerate() {
                if let Some(c) = cell {
                    if c.geometry.dilation != cfg.cell_dilation(l, r) {
                        return Err(Error::InvalidConfig(format!(
                            "cell ({l}, {r}) has dilation {}, configuration says {}",
                            c.geometry.dilation,
                            cfg.cell_dilation(l, r)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Parameters<T> for FluffParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (r, e) in self.entry.iter().enumerate() {
            e.visit(&join(prefix, &format!("entry{r}")), f);
        }
        for (l, row) in self.cells.iter().enumerate() {
            for (r, c) in row.iter().enumerate() {
                if let Some(c) = c {
                    c.visit(&join(prefix, &format!("cell{l}_{r}")), f);
                }
            }
        }
        self.output.visit(&join(prefix, "output"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (r, e) in self.entry.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("entry{r}")), f);
        }
        for (l, row) in self.cells.iter_mut().enumerate() {
            for (r, c) in row.iter_mut().enumerate() {
                if let Some(c) = c {
                    c.visit_mut(&join(prefix, &format!("cell{l}_{r}")), f);
                }
            }
        }
        self.output.visit_mut(&join(prefix, "output"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FluffCache<T: Element = f32> {
    x: Tensor<T>,
    /// Input fed to each cell, `[branch][level]`.
    cell_in: Vec<Vec<Tensor<T>>>,
    /// Raw cell outputs `X_{l,r}` (before any activation), `[branch][level]`.
    cell_out: Vec<Vec<Tensor<T>>>,
    /// ReLU of the concatenation, input of the output 1x1 conv.
    fused: Tensor<T>,
    out: Tensor<T>,
    inter_level_relu: bool,
    /// Window of every max-pool cell, `[branch][level]`; empty for other fusions.
    max_pools: Vec<Vec<PoolGeometry>>,
}

impl<T: Element> FluffCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }

    /// Hash of every ReLU mask and max-pool selection in the block.
    pub fn activation_signature(&self) -> Signature {
        let mut sig = Signature::default();
        self.push_signature(&mut sig);
        sig
    }

    pub fn push_signature(&self, sig: &mut Signature) {
        if self.inter_level_relu {
            for branch in &self.cell_in {
                for t in branch.iter().skip(1) {
                    sig.push_mask(t);
                }
            }
        }
        for (inputs, pools) in self.cell_in.iter().zip(&self.max_pools) {
            for (t, g) in inputs.iter().zip(pools) {
                if let Ok(arg) = nn::maxpool2d_argmax(t, *g) {
                    arg.iter().for_each(|&j| sig.push(j as u64));
                }
            }
        }
        sig.push_mask(&self.fused);
        sig.push_mask(&self.out);
    }

    /// Level-major concatenation of all cell outputs, before activation.
    pub fn lattice(&self) -> Result<Tensor<T>> {
        let levels = self.cell_out.first().map_or(0, Vec::len);
        let mut parts = Vec::new();
        for l in 0..levels {
            for branch in &self.cell_out {
                parts.push(&branch[l]);
            }
        }
        nn::concat_channels(&parts)
    }
}

/// Gradients with respect to the block input and every parameter.
#[derive(Clone, Debug)]
pub struct FluffGrads<T: Element = f32> {
    pub x: Tensor<T>,
    pub params: FluffParams<T>,
}

fn cell_forward<T: Element>(
    cfg: &FluffConfig,
    params: &FluffParams<T>,
    l: usize,
    r: usize,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let pool = || PoolGeometry::matching_dilated_3x3(cfg.rates[l][r]);
    match cfg.fusion {
        FusionKind::DilatedConv | FusionKind::PlainConv => {
            let p = params.cells[l][r].as_ref().ok_or_else(|| {
                Error::InvalidConfig(format!("missing conv parameters for cell ({l}, {r})"))
            })?;
            nn::conv2d_forward(input, p)
        }
        FusionKind::MaxPool => nn::maxpool2d_forward(input, pool()),
        FusionKind::AvgPool => nn::avgpool2d_forward(input, pool()),
    }
}

type BranchTrace<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

fn branch_forward<T: Element>(
    x: &Tensor<T>,
    cfg: &FluffConfig,
    params: &FluffParams<T>,
    r: usize,
) -> Result<BranchTrace<T>> {
    let mut inputs = Vec::with_capacity(cfg.levels);
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let input = match outputs.last() {
            None => nn::conv2d_forward(x, &params.entry[r])?,
            Some(prev) if cfg.inter_level_relu => nn::relu_forward(prev),
            Some(prev) => prev.clone(),
        };
        let out = cell_forward(cfg, params, l, r, &input)?;
        inputs.push(input);
        outputs.push(out);
    }
    Ok((inputs, outputs))
}

/// Forward pass keeping the activations needed by [`fluff_backward_cached`].
pub fn fluff_forward_cached<T: Element>(
    x: &Tensor<T>,
    cfg: &FluffConfig,
    params: &FluffParams<T>,
) -> Result<FluffCache<T>> {
    cfg.validate()?;
    if x.shape().channels != cfg.c_pre {
        return Err(Error::ChannelMismatch {
            op: "fluff_forward",
            expected: cfg.c_pre,
            actual: x.shape().channels,
        });
    }
    if params.entry.len() != cfg.branches || params.cells.len() != cfg.levels {
        params.check(cfg)?;
    }

    // Branches are independent until the concatenation; results are stored
    // by branch index so scheduling cannot change them.
    let traces: Vec<BranchTrace<T>> = if nn::parallel_enabled() {
        (0..cfg.branches)
            .into_par_iter()
            .map(|r| branch_forward(x, cfg, params, r))
            .collect::<Result<_>>()?
    } else {
        (0..cfg.branches)
            .map(|r| branch_forward(x, cfg, params, r))
            .collect::<Result<_>>()?
    };
    let (cell_in, cell_out): (Vec<_>, Vec<_>) = traces.into_iter().unzip();

    let mut lattice = Vec::with_capacity(cfg.levels * cfg.branches);
    for l in 0..cfg.levels {
        for branch in &cell_out {
            lattice.push(&branch[l]);
        }
    }
    let fused = nn::relu_forward(&nn::concat_channels(&lattice)?);
    let main = nn::conv2d_forward(&fused, &params.output)?;
    let skip = match &params.shortcut {
        Some(p) => nn::conv2d_forward(x, p)?,
        None => x.clone(),
    };
    let out = nn::relu_forward(&nn::add(&main, &skip)?);
    Ok(FluffCache {
        x: x.clone(),
        cell_in,
        cell_out,
        fused,
        out,
        inter_level_relu: cfg.inter_level_relu,
        max_pools: match cfg.fusion {
            FusionKind::MaxPool => (0..cfg.branches)
                .map(|r| {
                    (0..cfg.levels)
                        .map(|l| PoolGeometry::matching_dilated_3x3(cfg.rates[l][r]))
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        },
    })
}

pub fn fluff_forward<T: Element>(
    x: &Tensor<T>,
    cfg: &FluffConfig,
    params: &FluffParams<T>,
) -> Result<Tensor<T>> {
    Ok(fluff_forward_cached(x, cfg, params)?.out)
}

fn cell_backward<T: Element>(
    cfg: &FluffConfig,
    params: &FluffParams<T>,
    l: usize,
    r: usize,
    input: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut FluffParams<T>,
) -> Result<Tensor<T>> {
    let pool = || PoolGeometry::matching_dilated_3x3(cfg.rates[l][r]);
    match cfg.fusion {
        FusionKind::DilatedConv | FusionKind::PlainConv => {
            let p = params.cells[l][r]
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("missing cell ({l}, {r})")))?;
            let g = nn::conv2d_backward(input, p, grad)?;
            let slot = grads.cells[l][r].as_mut().expect("grad layout mirrors params");
            slot.weight = g.weight;
            slot.bias = g.bias;
            Ok(g.x)
        }
        FusionKind::MaxPool => nn::maxpool2d_backward(input, pool(), grad),
        FusionKind::AvgPool => nn::avgpool2d_backward(input, pool(), grad),
    }
}

pub fn fluff_backward_cached<T: Element>(
    cache: &FluffCache<T>,
    cfg: &FluffConfig,
    params: &FluffParams<T>,
    grad_out: &Tensor<T>,
) -> Result<FluffGrads<T>> {
    if grad_out.shape() != cache.out.shape() {
        return Err(Error::ShapeMismatch {
            op: "fluff_backward",
            expected: cache.out.shape().dims(),
            actual: grad_out.shape().dims(),
        });
    }
    let mut grads = FluffParams::<T>::zeros(cfg)?;
    let x = &cache.x;

    let g_sum = nn::relu_backward_from_output(&cache.out, grad_out)?;
    let g_skip = match &params.shortcut {
        Some(p) => {
            let g = nn::conv2d_backward(x, p, &g_sum)?;
            let slot = grads.shortcut.as_mut().expect("grad layout mirrors params");
            slot.weight = g.weight;
            slot.bias = g.bias;
            g.x
        }
        None => g_sum.clone(),
    };
    let g_main = nn::conv2d_backward(&cache.fused, &params.output, &g_sum)?;
    grads.output.weight = g_main.weight;
    grads.output.bias = g_main.bias;
    let g_lattice = nn::relu_backward_from_output(&cache.fused, &g_main.x)?;
    let cb = cfg.branch_channels();
    let pieces = nn::split_channels(&g_lattice, &vec![cb; cfg.levels * cfg.branches])?;

    let mut g_x = g_skip;
    for r in 0..cfg.branches {
        let mut carried: Option<Tensor<T>> = None;
        for l in (0..cfg.levels).rev() {
            let piece = &pieces[l * cfg.branches + r];
            let g_cell = match carried.take() {
                Some(c) => nn::add(piece, &c)?,
                None => piece.clone(),
            };
            let input = &cache.cell_in[r][l];
            let g_in = cell_backward(cfg, params, l, r, input, &g_cell, &mut grads)?;
            if l > 0 {
                carried = Some(if cfg.inter_level_relu {
                    nn::relu_backward_from_output(input, &g_in)?
                } else {
                    g_in
                });
            } else {
                let g = nn::conv2d_backward(x, &params.entry[r], &g_in)?;
                grads.entry[r].weight = g.weight;
                grads.entry[r].bias = g.bias;
                g_x = nn::add(&g_x, &g.x)?;
            }
        }
    }
    Ok(FluffGrads {
        x: g_x,
        params: grads,
    })
}

/// Recomputes the forward pass and returns all gradients.
pub fn fluff_backward<T: Element>(
    x: &Tensor<T>,
    cfg: &FluffConfig,
    params: &FluffParams<T>,
    grad_out: &Tensor<T>,
) -> Result<FluffGrads<T>> {
    let cache = fluff_forward_cached(x, cfg, params)?;
    fluff_backward_cached(&cache, cfg, params, grad_out)
}
