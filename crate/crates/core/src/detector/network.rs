use serde::{Deserialize, Serialize};

use super::{decode_boxes, generate_priors, BBox, BoxSet, Detection, PriorBoxSpec, PriorMap};
use crate::analyzer::{fluff_block_desc, ArchDesc, BlockDesc, ConvDesc};
use crate::fluff::{
    fluff_backward_cached, fluff_forward_cached, make_variant, rate_schedule, AblationRow,
    FluffCache, FluffConfig, FluffParams, INIT_RATES,
};
use crate::gradcheck::Signature;
use crate::nn::{self, join, ConvGeometry, ConvParams, Parameters};
use crate::rng::{normal_tensor, DetRng};
use crate::{Element, Error, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Conv + ReLU. `feature_map` marks layers whose output feeds a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneLayer {
    pub out_channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub feature_map: bool,
}

/// 1x1 reduction to `mid_channels` + ReLU, then 3x3 stride 2 + ReLU. Every
/// extra layer output is a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraLayer {
    pub mid_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    #[default]
    None,
    /// A block between a backbone feature map and its heads.
    PostProcessBackbone,
    /// A block in place of an extra layer's 1x1 reduction.
    ReplaceExtraLayer,
}

fn default_levels() -> usize {
    3
}

fn default_branches() -> usize {
    4
}

/// Block shape before the network fixes its channel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluffSpec {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_branches")]
    pub branches: usize,
    /// Explicit `levels x branches` rates. When absent every level gets the
    /// initial rates scaled by `rate_schedule` at `level_index`.
    #[serde(default)]
    pub rates: Option<Vec<Vec<usize>>>,
    /// Defaults to 0 on backbone maps and to the 1-based extra position on
    /// extra layers.
    #[serde(default)]
    pub level_index: Option<usize>,
    #[serde(default)]
    pub identity_shortcut: bool,
}

impl Default for FluffSpec {
    fn default() -> Self {
        FluffSpec {
            levels: 3,
            branches: 4,
            rates: None,
            level_index: None,
            identity_shortcut: false,
        }
    }
}

impl FluffSpec {
    /// Full block for `c_pre -> c_out`, then reduced to the ablation row.
    pub fn block_config(
        &self,
        c_pre: usize,
        c_out: usize,
        default_level: usize,
        row: AblationRow,
    ) -> Result<Option<FluffConfig>> {
        let rates = match &self.rates {
            Some(r) => r.clone(),
            None => {
                let init: Vec<usize> =
                    (0..self.branches).map(|r| INIT_RATES[r % INIT_RATES.len()]).collect();
                let row = rate_schedule(&init, self.level_index.unwrap_or(default_level));
                vec![row; self.levels]
            }
        };
        let base = FluffConfig {
            levels: self.levels,
            branches: self.branches,
            c_pre,
            c_out: Some(c_out),
            rates,
            identity_shortcut: self.identity_shortcut,
            ..FluffConfig::new(c_pre)
        };
        base.validate()?;
        let cfg = make_variant(&base, row);
        if let Some(c) = &cfg {
            c.validate()?;
        }
        Ok(cfg)
    }
}

/// Head and prior settings of one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    #[serde(default)]
    pub attachment: Attachment,
    /// Overrides the network-wide block shape for this map.
    #[serde(default)]
    pub fluff: Option<FluffSpec>,
    pub scale: f32,
    pub aspect_ratios: Vec<f32>,
}

fn default_row() -> AblationRow {
    AblationRow::Fluff
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionHeadConfig {
    pub input: InputSpec,
    /// Including background at index 0.
    pub num_classes: usize,
    pub backbone: Vec<BackboneLayer>,
    #[serde(default)]
    pub extras: Vec<ExtraLayer>,
    /// One entry per feature map: flagged backbone layers first, then extras.
    pub maps: Vec<MapSpec>,
    #[serde(default)]
    pub fluff: FluffSpec,
    /// Ablation row applied to every attached block.
    #[serde(default = "default_row")]
    pub variant: AblationRow,
}

/// Where a feature map comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Backbone(usize),
    Extra(usize),
}

/// Standard deviation of the normal draw for loc/conf head weights.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct AttachedBlock<T: Element = f32> {
    pub cfg: FluffConfig,
    pub params: FluffParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reduce<T: Element = f32> {
    Conv(ConvParams<T>),
    Fluff(AttachedBlock<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtraParams<T: Element = f32> {
    pub reduce: Reduce<T>,
    pub down: ConvParams<T>,
}

/// Backbone, extra layers, per-map blocks and loc/conf heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNet<T: Element = f32> {
    config: DetectionHeadConfig,
    sources: Vec<Source>,
    /// Spatial size of every feature map.
    grids: Vec<(usize, usize)>,
    channels: Vec<usize>,
    pub backbone: Vec<ConvParams<T>>,
    pub extras: Vec<ExtraParams<T>>,
    /// Post-processing block per feature map.
    pub post: Vec<Option<AttachedBlock<T>>>,
    pub loc: Vec<ConvParams<T>>,
    pub conf: Vec<ConvParams<T>>,
}

/// Network outputs in prior order: `loc` is `(B, 1, P, 4)`, `conf` is
/// `(B, 1, P, C)` raw logits.
#[derive(Clone, Debug)]
pub struct NetOutput<T: Element = f32> {
    pub loc: Tensor<T>,
    pub conf: Tensor<T>,
}

#[derive(Clone, Debug)]
enum ReduceCache<T: Element> {
    Conv(Tensor<T>),
    Fluff(FluffCache<T>),
}

#[derive(Clone, Debug)]
struct ExtraCache<T: Element> {
    input: Tensor<T>,
    reduce: ReduceCache<T>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct NetCache<T: Element = f32> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of backbone layer `i`.
    acts: Vec<Tensor<T>>,
    extras: Vec<ExtraCache<T>>,
    post: Vec<Option<FluffCache<T>>>,
    features: Vec<Tensor<T>>,
}

impl<T: Element> NetCache<T> {
    /// Output of every backbone layer, in order.
    pub fn backbone_outputs(&self) -> &[Tensor<T>] {
        &self.acts[1..]
    }

    /// The tensors fed to the heads, one per map.
    pub fn features(&self) -> &[Tensor<T>] {
        &self.features
    }

    pub fn activation_signature(&self) -> Signature {
        let mut sig = Signature::default();
        for a in &self.acts[1..] {
            sig.push_mask(a);
        }
        for e in &self.extras {
            match &e.reduce {
                ReduceCache::Conv(t) => sig.push_mask(t),
                ReduceCache::Fluff(c) => c.push_signature(&mut sig),
            }
            sig.push_mask(&e.out);
        }
        for c in self.post.iter().flatten() {
            c.push_signature(&mut sig);
        }
        sig
    }
}

fn same_padding(k: usize) -> usize {
    k / 2
}

impl DetectionHeadConfig {
    fn sources(&self) -> Vec<Source> {
        let mut s: Vec<Source> = self
            .backbone
            .iter()
            .enumerate()
            .filter(|(_, l)| l.feature_map)
            .map(|(i, _)| Source::Backbone(i))
            .collect();
        s.extend((0..self.extras.len()).map(Source::Extra));
        s
    }

    /// Channel count and spatial size after every backbone layer and extra.
    fn trace(&self) -> Result<(Vec<(usize, usize, usize)>, Vec<(usize, usize, usize)>)> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut bb = Vec::new();
        for l in &self.backbone {
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("degenerate backbone layer {l:?}")));
            }
            let g = ConvGeometry::new(l.stride, same_padding(l.kernel), 1);
            h = g.output_len(h, l.kernel, "backbone")?;
            w = g.output_len(w, l.kernel, "backbone")?;
            bb.push((l.out_channels, h, w));
        }
        let mut ex = Vec::new();
        for e in &self.extras {
            if e.mid_channels == 0 || e.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("degenerate extra layer {e:?}")));
            }
            let g = ConvGeometry::new(2, 1, 1);
            h = g.output_len(h, 3, "extra layer")?;
            w = g.output_len(w, 3, "extra layer")?;
            ex.push((e.out_channels, h, w));
        }
        Ok((bb, ex))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes includes background and must be >= 2".into()));
        }
        if self.backbone.is_empty() {
            return Err(Error::InvalidConfig("backbone has no layers".into()));
        }
        let sources = self.sources();
        if sources.len() != self.maps.len() {
            return Err(Error::InvalidConfig(format!(
                "{} feature maps but {} map specs",
                sources.len(),
                self.maps.len()
            )));
        }
        for (m, (src, spec)) in sources.iter().zip(&self.maps).enumerate() {
            match (src, spec.attachment) {
                (Source::Extra(_), Attachment::PostProcessBackbone) => {
                    return Err(Error::InvalidConfig(format!(
                        "map {m} is an extra layer and cannot take post_process_backbone"
                    )))
                }
                (Source::Backbone(_), Attachment::ReplaceExtraLayer) => {
                    return Err(Error::InvalidConfig(format!(
                        "map {m} is a backbone layer and cannot take replace_extra_layer"
                    )))
                }
                _ => {}
            }
        }
        self.trace()?;
        Ok(())
    }

    /// Priors matching the feature-map grids.
    pub fn prior_spec(&self) -> Result<PriorBoxSpec> {
        let (bb, ex) = self.trace()?;
        let maps = self
            .sources()
            .iter()
            .zip(&self.maps)
            .map(|(s, spec)| {
                let (_, h, w) = match s {
                    Source::Backbone(i) => bb[*i],
                    Source::Extra(k) => ex[*k],
                };
                PriorMap {
                    grid_h: h,
                    grid_w: w,
                    scale: spec.scale,
                    aspect_ratios: spec.aspect_ratios.clone(),
                }
            })
            .collect();
        Ok(PriorBoxSpec { maps })
    }

    pub fn priors(&self) -> Result<Vec<BBox>> {
        generate_priors(&self.prior_spec()?)
    }

    /// Same network with a different ablation row for every block.
    pub fn with_variant(&self, row: AblationRow) -> Self {
        DetectionHeadConfig {
            variant: row,
            ..self.clone()
        }
    }
}

type Make<'a, T> = dyn FnMut(usize, usize, usize, ConvGeometry) -> ConvParams<T> + 'a;

impl<T: Element> DetectorNet<T> {
    /// Randomly initialised network; backbone tensors are drawn first so
    /// networks differing only in their blocks share the backbone.
    pub fn new(config: &DetectionHeadConfig, rng: &mut DetRng) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for p in &mut net.backbone {
            *p = ConvParams::init(rng, p.in_channels(), p.out_channels(), p.kernel(), p.geometry);
        }
        let reinit = |p: &mut ConvParams<T>, rng: &mut DetRng| {
            *p = ConvParams::init(rng, p.in_channels(), p.out_channels(), p.kernel(), p.geometry);
        };
        // attached blocks start as their shortcut: the fusion projection is
        // zeroed after drawing so the draw sequence does not depend on it
        let block_init = |b: &mut AttachedBlock<T>, rng: &mut DetRng| -> Result<()> {
            b.params = FluffParams::init(&b.cfg, rng)?;
            let o = &mut b.params.output;
            *o = ConvParams::zeros(o.in_channels(), o.out_channels(), o.kernel(), o.geometry);
            Ok(())
        };
        for e in &mut net.extras {
            match &mut e.reduce {
                Reduce::Conv(p) => reinit(p, rng),
                Reduce::Fluff(b) => block_init(b, rng)?,
            }
            reinit(&mut e.down, rng);
        }
        for b in net.post.iter_mut().flatten() {
            block_init(b, rng)?;
        }
        // small heads: near-uniform class scores at the start, so early
        // updates do not drive the features towards background-only output
        for p in net.loc.iter_mut().chain(net.conf.iter_mut()) {
            p.weight = normal_tensor(rng, p.weight.shape(), HEAD_INIT_STD);
        }
        Ok(net)
    }

    pub fn zeros(config: &DetectionHeadConfig) -> Result<Self> {
        Self::build(config, &mut |ic, oc, k, g| ConvParams::zeros(ic, oc, k, g))
    }

    fn build(config: &DetectionHeadConfig, make: &mut Make<'_, T>) -> Result<Self> {
        config.validate()?;
        let (bb, ex) = config.trace()?;
        let sources = config.sources();
        let mut c = config.input.channels;
        let mut backbone = Vec::new();
        for l in &config.backbone {
            let g = ConvGeometry::new(l.stride, same_padding(l.kernel), 1);
            backbone.push(make(c, l.out_channels, l.kernel, g));
            c = l.out_channels;
        }
        let spec_for = |m: Option<usize>| -> &FluffSpec {
            m.and_then(|m| config.maps[m].fluff.as_ref()).unwrap_or(&config.fluff)
        };
        let map_of = |s: Source| sources.iter().position(|&x| x == s);

        let mut extras = Vec::new();
        for (k, e) in config.extras.iter().enumerate() {
            let m = map_of(Source::Extra(k));
            let replace = m.map_or(false, |m| config.maps[m].attachment == Attachment::ReplaceExtraLayer);
            let block = if replace {
                spec_for(m).block_config(c, e.mid_channels, k + 1, config.variant)?
            } else {
                None
            };
            let reduce = match block {
                Some(cfg) => Reduce::Fluff(AttachedBlock {
                    params: FluffParams::zeros(&cfg)?,
                    cfg,
                }),
                None => Reduce::Conv(make(c, e.mid_channels, 1, ConvGeometry::pointwise())),
            };
            let down = make(e.mid_channels, e.out_channels, 3, ConvGeometry::new(2, 1, 1));
            extras.push(ExtraParams { reduce, down });
            c = e.out_channels;
        }

        let mut post = Vec::new();
        let mut loc = Vec::new();
        let mut conf = Vec::new();
        let mut grids = Vec::new();
        let mut channels = Vec::new();
        for (m, (src, spec)) in sources.iter().zip(&config.maps).enumerate() {
            let (ch, h, w) = match src {
                Source::Backbone(i) => bb[*i],
                Source::Extra(k) => ex[*k],
            };
            let block = match spec.attachment {
                Attachment::PostProcessBackbone => spec_for(Some(m)).block_config(ch, ch, 0, config.variant)?,
                _ => None,
            };
            post.push(match block {
                Some(cfg) => Some(AttachedBlock {
                    params: FluffParams::zeros(&cfg)?,
                    cfg,
                }),
                None => None,
            });
            let a = spec.aspect_ratios.len();
            if a == 0 {
                return Err(Error::InvalidConfig(format!("map {m} has no aspect ratios")));
            }
            loc.push(make(ch, a * 4, 3, ConvGeometry::same3x3(1)));
            conf.push(make(ch, a * config.num_classes, 3, ConvGeometry::same3x3(1)));
            grids.push((h, w));
            channels.push(ch);
        }
        Ok(DetectorNet {
            config: config.clone(),
            sources,
            grids,
            channels,
            backbone,
            extras,
            post,
            loc,
            conf,
        })
    }

    pub fn config(&self) -> &DetectionHeadConfig {
        &self.config
    }

    pub fn num_priors(&self) -> usize {
        self.grids
            .iter()
            .zip(&self.config.maps)
            .map(|((h, w), s)| h * w * s.aspect_ratios.len())
            .sum()
    }

    /// Output channels of the combined head of map `m`: `A * (C + 4)`.
    pub fn head_channels(&self, m: usize) -> usize {
        self.loc[m].out_channels() + self.conf[m].out_channels()
    }

    /// Per-layer static description for cost analysis.
    pub fn describe(&self) -> ArchDesc {
        let mut blocks = Vec::new();
        let (mut h, mut w) = (self.config.input.height, self.config.input.width);
        let mut convs = Vec::new();
        for (i, p) in self.backbone.iter().enumerate() {
            let d = ConvDesc::of(&format!("backbone{i}"), p, h, w);
            (h, w) = d.output_hw();
            convs.push(d);
        }
        blocks.push(BlockDesc::plain("backbone", convs));
        for (k, e) in self.extras.iter().enumerate() {
            let name = format!("extra{k}");
            match &e.reduce {
                Reduce::Conv(p) => blocks.push(BlockDesc::plain(
                    &format!("{name}.reduce"),
                    vec![ConvDesc::of(&format!("{name}.reduce"), p, h, w)],
                )),
                Reduce::Fluff(b) => blocks.push(fluff_block_desc(&format!("{name}.fluff"), &b.cfg, h, w)),
            }
            let d = ConvDesc::of(&format!("{name}.down"), &e.down, h, w);
            (h, w) = d.output_hw();
            blocks.push(BlockDesc::plain(&format!("{name}.down"), vec![d]));
        }
        for (m, &(gh, gw)) in self.grids.iter().enumerate() {
            if let Some(b) = &self.post[m] {
                blocks.push(fluff_block_desc(&format!("map{m}.fluff"), &b.cfg, gh, gw));
            }
            blocks.push(BlockDesc::plain(
                &format!("map{m}.head"),
                vec![
                    ConvDesc::of(&format!("map{m}.loc"), &self.loc[m], gh, gw),
                    ConvDesc::of(&format!("map{m}.conf"), &self.conf[m], gh, gw),
                ],
            ));
        }
        ArchDesc {
            name: format!("detector[{}]", self.config.variant),
            blocks,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let i = self.config.input;
        if (s.channels, s.height, s.width) != (i.channels, i.height, i.width) {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                expected: [s.batch, i.channels, i.height, i.width],
                actual: s.dims(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<NetOutput<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(NetOutput<T>, NetCache<T>)> {
        self.check_input(x)?;
        let mut acts = vec![x.clone()];
        for p in &self.backbone {
            let y = nn::relu_forward(&nn::conv2d_forward(acts.last().expect("input"), p)?);
            acts.push(y);
        }
        let mut extras: Vec<ExtraCache<T>> = Vec::new();
        for e in &self.extras {
            let input = extras.last().map_or_else(|| acts.last().expect("input").clone(), |c| c.out.clone());
            let (reduce, r) = match &e.reduce {
                Reduce::Conv(p) => {
                    let r = nn::relu_forward(&nn::conv2d_forward(&input, p)?);
                    (ReduceCache::Conv(r.clone()), r)
                }
                Reduce::Fluff(b) => {
                    let c = fluff_forward_cached(&input, &b.cfg, &b.params)?;
                    let r = c.output().clone();
                    (ReduceCache::Fluff(c), r)
                }
            };
            let out = nn::relu_forward(&nn::conv2d_forward(&r, &e.down)?);
            extras.push(ExtraCache { input, reduce, out });
        }
        let mut post = Vec::new();
        let mut features = Vec::new();
        for (m, src) in self.sources.iter().enumerate() {
            let raw = match src {
                Source::Backbone(i) => &acts[i + 1],
                Source::Extra(k) => &extras[*k].out,
            };
            match &self.post[m] {
                Some(b) => {
                    let c = fluff_forward_cached(raw, &b.cfg, &b.params)?;
                    features.push(c.output().clone());
                    post.push(Some(c));
                }
                None => {
                    features.push(raw.clone());
                    post.push(None);
                }
            }
        }
        let b = x.shape().batch;
        let p = self.num_priors();
        let nc = self.config.num_classes;
        let mut loc = Tensor::zeros((b, 1, p, 4));
        let mut conf = Tensor::zeros((b, 1, p, nc));
        let mut offset = 0;
        for (m, f) in features.iter().enumerate() {
            let l = nn::conv2d_forward(f, &self.loc[m])?;
            let c = nn::conv2d_forward(f, &self.conf[m])?;
            let a = self.config.maps[m].aspect_ratios.len();
            head_to_rows(&l, &mut loc, offset, a, 4);
            head_to_rows(&c, &mut conf, offset, a, nc);
            offset += l.shape().plane() * a;
        }
        Ok((
            NetOutput { loc, conf },
            NetCache {
                acts,
                extras,
                post,
                features,
            },
        ))
    }

    /// Gradients of every parameter (as a network of the same layout) and of
    /// the input.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        grad_loc: &Tensor<T>,
        grad_conf: &Tensor<T>,
    ) -> Result<(DetectorNet<T>, Tensor<T>)> {
        let b = cache.acts[0].shape().batch;
        let p = self.num_priors();
        let nc = self.config.num_classes;
        if grad_loc.shape().dims() != [b, 1, p, 4] || grad_conf.shape().dims() != [b, 1, p, nc] {
            return Err(Error::ShapeMismatch {
                op: "detector backward",
                expected: [b, 1, p, 4],
                actual: grad_loc.shape().dims(),
            });
        }
        let mut grads = self.clone();
        grads.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));

        let mut g_src: Vec<Tensor<T>> = Vec::new();
        let mut offset = 0;
        for (m, f) in cache.features.iter().enumerate() {
            let a = self.config.maps[m].aspect_ratios.len();
            let fs = f.shape();
            let mut gl = Tensor::zeros(Shape::new(b, a * 4, fs.height, fs.width));
            let mut gc = Tensor::zeros(Shape::new(b, a * nc, fs.height, fs.width));
            rows_to_head(grad_loc, &mut gl, offset, a, 4);
            rows_to_head(grad_conf, &mut gc, offset, a, nc);
            offset += fs.plane() * a;
            let dl = nn::conv2d_backward(f, &self.loc[m], &gl)?;
            let dc = nn::conv2d_backward(f, &self.conf[m], &gc)?;
            grads.loc[m].weight = dl.weight;
            grads.loc[m].bias = dl.bias;
            grads.conf[m].weight = dc.weight;
            grads.conf[m].bias = dc.bias;
            let g_f = nn::add(&dl.x, &dc.x)?;
            let g = match (&self.post[m], &cache.post[m]) {
                (Some(blk), Some(c)) => {
                    let fg = fluff_backward_cached(c, &blk.cfg, &blk.params, &g_f)?;
                    grads.post[m].as_mut().expect("mirrors params").params = fg.params;
                    fg.x
                }
                _ => g_f,
            };
            g_src.push(g);
        }

        // gradient arriving at the output of each extra layer, then walking back
        let mut carried: Option<Tensor<T>> = None;
        for k in (0..self.extras.len()).rev() {
            let m = self.sources.iter().position(|&s| s == Source::Extra(k)).expect("every extra is a map");
            let mut g = g_src[m].clone();
            if let Some(c) = carried.take() {
                g = nn::add(&g, &c)?;
            }
            let ec = &cache.extras[k];
            let e = &self.extras[k];
            let g_pre = nn::relu_backward_from_output(&ec.out, &g)?;
            let r_in = match &ec.reduce {
                ReduceCache::Conv(r) => r.clone(),
                ReduceCache::Fluff(c) => c.output().clone(),
            };
            let dd = nn::conv2d_backward(&r_in, &e.down, &g_pre)?;
            grads.extras[k].down.weight = dd.weight;
            grads.extras[k].down.bias = dd.bias;
            let g_in = match (&e.reduce, &ec.reduce) {
                (Reduce::Conv(p), ReduceCache::Conv(r)) => {
                    let g_r = nn::relu_backward_from_output(r, &dd.x)?;
                    let d = nn::conv2d_backward(&ec.input, p, &g_r)?;
                    if let Reduce::Conv(slot) = &mut grads.extras[k].reduce {
                        slot.weight = d.weight;
                        slot.bias = d.bias;
                    }
                    d.x
                }
                (Reduce::Fluff(blk), ReduceCache::Fluff(c)) => {
                    let fg = fluff_backward_cached(c, &blk.cfg, &blk.params, &dd.x)?;
                    if let Reduce::Fluff(slot) = &mut grads.extras[k].reduce {
                        slot.params = fg.params;
                    }
                    fg.x
                }
                _ => unreachable!("cache mirrors the network"),
            };
            carried = Some(g_in);
        }

        let n = self.backbone.len();
        for i in (0..n).rev() {
            let out = &cache.acts[i + 1];
            let mut g = carried.take().unwrap_or_else(|| Tensor::zeros(out.shape()));
            if let Some(m) = self.sources.iter().position(|&s| s == Source::Backbone(i)) {
                g = nn::add(&g, &g_src[m])?;
            }
            let g_pre = nn::relu_backward_from_output(out, &g)?;
            let d = nn::conv2d_backward(&cache.acts[i], &self.backbone[i], &g_pre)?;
            grads.backbone[i].weight = d.weight;
            grads.backbone[i].bias = d.bias;
            carried = Some(d.x);
        }
        Ok((grads, carried.expect("backbone is non-empty")))
    }

    /// Decoded per-class candidates above `score_threshold`, before NMS.
    pub fn decode(
        &self,
        out: &NetOutput<T>,
        priors: &[BBox],
        variances: [f32; 2],
        score_threshold: f32,
    ) -> Result<Vec<BoxSet>> {
        decode_detections(out, priors, variances, score_threshold)
    }
}

/// Softmax scores and decoded boxes for every image; one detection per
/// (prior, foreground class) whose score exceeds `score_threshold`.
pub fn decode_detections<T: Element>(
    out: &NetOutput<T>,
    priors: &[BBox],
    variances: [f32; 2],
    score_threshold: f32,
) -> Result<Vec<BoxSet>> {
    let s = out.conf.shape();
    let (b, p, c) = (s.batch, s.height, s.width);
    if priors.len() != p || out.loc.shape().dims() != [b, 1, p, 4] {
        return Err(Error::LengthMismatch {
            shape: out.loc.shape().dims(),
            expected: priors.len() * 4 * b,
            actual: out.loc.len(),
        });
    }
    let mut sets = Vec::with_capacity(b);
    for n in 0..b {
        let offs: Vec<[f32; 4]> = (0..p)
            .map(|i| {
                let d = &out.loc.data()[(n * p + i) * 4..(n * p + i + 1) * 4];
                [d[0].to_f64() as f32, d[1].to_f64() as f32, d[2].to_f64() as f32, d[3].to_f64() as f32]
            })
            .collect();
        let boxes = decode_boxes(priors, &offs, variances)?;
        let mut dets = Vec::new();
        for (i, bbox) in boxes.iter().enumerate() {
            let z = &out.conf.data()[(n * p + i) * c..(n * p + i + 1) * c];
            let mx = z.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v.to_f64() - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            for (label, ev) in e.iter().enumerate().skip(1) {
                let score = (ev / sum) as f32;
                if score > score_threshold {
                    dets.push(Detection {
                        bbox: bbox.clamped(),
                        label,
                        score,
                    });
                }
            }
        }
        sets.push(BoxSet::new(dets));
    }
    Ok(sets)
}

/// Flat index pairs `(head, rows)` between a head map `(B, A*K, H, W)` and
/// rows `offset..` of a `(B, 1, P, K)` tensor, prior order row, column, anchor.
fn head_index_pairs(head: Shape, p: usize, offset: usize, a: usize, k: usize) -> Vec<(usize, usize)> {
    let (h, w) = (head.height, head.width);
    let mut out = Vec::with_capacity(head.numel());
    for n in 0..head.batch {
        for y in 0..h {
            for x in 0..w {
                for ai in 0..a {
                    let row = offset + (y * w + x) * a + ai;
                    for kk in 0..k {
                        let hi = ((n * head.channels + ai * k + kk) * h + y) * w + x;
                        out.push((hi, (n * p + row) * k + kk));
                    }
                }
            }
        }
    }
    out
}

fn head_to_rows<T: Element>(head: &Tensor<T>, rows: &mut Tensor<T>, offset: usize, a: usize, k: usize) {
    let p = rows.shape().height;
    for (hi, ri) in head_index_pairs(head.shape(), p, offset, a, k) {
        rows.data_mut()[ri] = head.data()[hi];
    }
}

fn rows_to_head<T: Element>(rows: &Tensor<T>, head: &mut Tensor<T>, offset: usize, a: usize, k: usize) {
    let p = rows.shape().height;
    for (hi, ri) in head_index_pairs(head.shape(), p, offset, a, k) {
        head.data_mut()[hi] = rows.data()[ri];
    }
}

impl<T: Element> Parameters<T> for DetectorNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.backbone.iter().enumerate() {
            p.visit(&join(prefix, &format!("backbone{i}")), f);
        }
        for (k, e) in self.extras.iter().enumerate() {
            let name = join(prefix, &format!("extra{k}"));
            match &e.reduce {
                Reduce::Conv(p) => p.visit(&join(&name, "reduce"), f),
                Reduce::Fluff(b) => b.params.visit(&join(&name, "fluff"), f),
            }
            e.down.visit(&join(&name, "down"), f);
        }
        for m in 0..self.loc.len() {
            let name = join(prefix, &format!("map{m}"));
            if let Some(b) = &self.post[m] {
                b.params.visit(&join(&name, "fluff"), f);
            }
            self.loc[m].visit(&join(&name, "loc"), f);
            self.conf[m].visit(&join(&name, "conf"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.backbone.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("backbone{i}")), f);
        }
        for (k, e) in self.extras.iter_mut().enumerate() {
            let name = join(prefix, &format!("extra{k}"));
            match &mut e.reduce {
                Reduce::Conv(p) => p.visit_mut(&join(&name, "reduce"), f),
                Reduce::Fluff(b) => b.params.visit_mut(&join(&name, "fluff"), f),
            }
            e.down.visit_mut(&join(&name, "down"), f);
        }
        for m in 0..self.loc.len() {
            let name = join(prefix, &format!("map{m}"));
            if let Some(b) = &mut self.post[m] {
                b.params.visit_mut(&join(&name, "fluff"), f);
            }
            self.loc[m].visit_mut(&join(&name, "loc"), f);
            self.conf[m].visit_mut(&join(&name, "conf"), f);
        }
    }
}

/// Builds and randomly initialises the network described by `config`.
pub fn build_network(config: &DetectionHeadConfig, seed: u64) -> Result<DetectorNet<f32>> {
    DetectorNet::new(config, &mut crate::seeded_rng(seed))
}
