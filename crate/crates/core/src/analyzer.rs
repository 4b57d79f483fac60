//! Static cost model: parameter counts, multiply-accumulates and receptive
//! fields from a layer description, without running any tensor math.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fluff::FluffConfig;
use crate::nn::{self, ConvGeometry, ConvParams};
use crate::{Element, Error, Result, Tensor};

/// One convolution applied to an `in_h x in_w` input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvDesc {
    pub fn new(name: &str, in_c: usize, out_c: usize, k: usize, g: ConvGeometry, in_h: usize, in_w: usize) -> Self {
        ConvDesc {
            name: name.to_string(),
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            stride: g.stride,
            padding: g.padding,
            dilation: g.dilation,
            in_h,
            in_w,
        }
    }

    pub fn of<T: Element>(name: &str, p: &ConvParams<T>, in_h: usize, in_w: usize) -> Self {
        Self::new(name, p.in_channels(), p.out_channels(), p.kernel(), p.geometry, in_h, in_w)
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding, self.dilation)
    }

    pub fn try_output_hw(&self) -> Result<(usize, usize)> {
        let g = self.geometry();
        Ok((
            g.output_len(self.in_h, self.kernel, "conv desc")?,
            g.output_len(self.in_w, self.kernel, "conv desc")?,
        ))
    }

    /// Output size; zero when the kernel does not fit.
    pub fn output_hw(&self) -> (usize, usize) {
        self.try_output_hw().unwrap_or((0, 0))
    }

    pub fn params(&self) -> u64 {
        let (o, i, k) = (self.out_channels as u64, self.in_channels as u64, self.kernel as u64);
        o * i * k * k + o
    }

    /// `out_h * out_w * out_c * in_c * k^2`; the dilation only moves taps.
    pub fn macs(&self) -> u64 {
        let (h, w) = self.output_hw();
        let k = self.kernel as u64;
        (h * w) as u64 * self.out_channels as u64 * self.in_channels as u64 * k * k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub name: String,
    pub convs: Vec<ConvDesc>,
    /// Set for latticed fusion blocks, enabling the receptive-field table.
    pub fluff: Option<FluffConfig>,
}

impl BlockDesc {
    pub fn plain(name: &str, convs: Vec<ConvDesc>) -> Self {
        BlockDesc {
            name: name.to_string(),
            convs,
            fluff: None,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.convs.iter().map(ConvDesc::params).sum()
    }

    pub fn mac_count(&self) -> u64 {
        self.convs.iter().map(ConvDesc::macs).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchDesc {
    pub name: String,
    pub blocks: Vec<BlockDesc>,
}

impl ArchDesc {
    /// Every conv must produce a non-empty output.
    pub fn validate(&self) -> Result<()> {
        for c in self.blocks.iter().flat_map(|b| &b.convs) {
            if c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0 || c.dilation == 0 {
                return Err(Error::InvalidConfig(format!("incomplete conv description {c:?}")));
            }
            c.try_output_hw()?;
        }
        Ok(())
    }
}

/// Convs of one block on an `h x w` map. Pooling cells carry no parameters
/// and are not counted as multiply-accumulates.
pub fn fluff_block_desc(name: &str, cfg: &FluffConfig, h: usize, w: usize) -> BlockDesc {
    let cb = cfg.branch_channels();
    let mut convs = Vec::new();
    for r in 0..cfg.branches {
        convs.push(ConvDesc::new(&format!("{name}.entry{r}"), cfg.c_pre, cb, 1, ConvGeometry::pointwise(), h, w));
    }
    if cfg.has_cell_params() {
        for l in 0..cfg.levels {
            for r in 0..cfg.branches {
                let g = ConvGeometry::same3x3(cfg.cell_dilation(l, r));
                convs.push(ConvDesc::new(&format!("{name}.cell{l}_{r}"), cb, cb, 3, g, h, w));
            }
        }
    }
    let out = cfg.out_channels();
    convs.push(ConvDesc::new(&format!("{name}.output"), cfg.concat_channels(), out, 1, ConvGeometry::pointwise(), h, w));
    if !cfg.identity_shortcut {
        convs.push(ConvDesc::new(&format!("{name}.shortcut"), cfg.c_pre, out, 1, ConvGeometry::pointwise(), h, w));
    }
    BlockDesc {
        name: name.to_string(),
        convs,
        fluff: Some(cfg.clone()),
    }
}

pub fn param_count(desc: &ArchDesc) -> u64 {
    desc.blocks.iter().map(BlockDesc::param_count).sum()
}

pub fn flop_count(desc: &ArchDesc) -> u64 {
    desc.blocks.iter().map(BlockDesc::mac_count).sum()
}

/// Receptive field of a stride-1 chain of `k x k` convs: `1 + sum (k-1) d`.
pub fn receptive_field(rates: &[usize], k: usize) -> usize {
    1 + rates.iter().map(|d| (k - 1) * d).sum::<usize>()
}

/// Receptive field measured by back-propagating a single-pixel gradient
/// through an actual chain of convolutions with positive weights and
/// taking the span of input rows whose gradient became nonzero. Dilated
/// chains leave holes inside that span.
pub fn empirical_receptive_field(rates: &[usize], k: usize) -> Result<usize> {
    let bound = receptive_field(rates, k);
    let size = 2 * bound + 1;
    let mut layers = Vec::new();
    let mut x: Tensor<f64> = Tensor::new((1, 1, size, size), 1.0)?;
    let mut inputs = Vec::new();
    for &d in rates {
        let g = ConvGeometry::new(1, d * (k - 1) / 2, d);
        let p = ConvParams::<f64> {
            weight: Tensor::new((1, 1, k, k), 1.0)?,
            bias: Tensor::zeros((1, 1, 1, 1)),
            geometry: g,
        };
        inputs.push(x.clone());
        x = nn::conv2d_forward(&x, &p)?;
        layers.push(p);
    }
    let mut g: Tensor<f64> = Tensor::zeros(x.shape());
    let c = size / 2;
    let j = g.index(0, 0, c, c);
    g.data_mut()[j] = 1.0;
    for (p, input) in layers.iter().zip(&inputs).rev() {
        g = nn::conv2d_backward(input, p, &g)?.x;
    }
    let rows: Vec<usize> = (0..size)
        .filter(|&y| (0..size).any(|xx| g.at(0, 0, y, xx) != 0.0))
        .collect();
    Ok(match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => b - a + 1,
        _ => 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// `[branch][level]` receptive field of each cell output, relative to
    /// the block input.
    pub receptive_fields: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub name: String,
    pub blocks: Vec<BlockReport>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// `[branch][level]` receptive fields of a block's cells.
pub fn block_receptive_fields(cfg: &FluffConfig) -> Vec<Vec<usize>> {
    (0..cfg.branches)
        .map(|r| {
            (1..=cfg.levels)
                .map(|depth| {
                    let rates: Vec<usize> = (0..depth).map(|l| cfg.cell_dilation(l, r)).collect();
                    // a pooling window 2d+1 spans as far as a dilated 3x3
                    receptive_field(&rates, 3)
                })
                .collect()
        })
        .collect()
}

pub fn analyze(desc: &ArchDesc) -> Result<ArchReport> {
    desc.validate()?;
    let blocks: Vec<BlockReport> = desc
        .blocks
        .iter()
        .map(|b| BlockReport {
            name: b.name.clone(),
            params: b.param_count(),
            macs: b.mac_count(),
            receptive_fields: b.fluff.as_ref().map(block_receptive_fields),
        })
        .collect();
    Ok(ArchReport {
        name: desc.name.clone(),
        total_params: blocks.iter().map(|b| b.params).sum(),
        total_macs: blocks.iter().map(|b| b.macs).sum(),
        blocks,
    })
}

impl ArchReport {
    /// Aligned text table, one row per block plus totals.
    pub fn to_table(&self) -> String {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.name);
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}  receptive fields", "block", "params", "MACs");
        for b in &self.blocks {
            let rf = b
                .receptive_fields
                .as_ref()
                .map(|t| format!("{t:?}"))
                .unwrap_or_default();
            let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}  {rf}", b.name, b.params, b.macs);
        }
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>16}", "total", self.total_params, self.total_macs);
        s
    }
}

/// Tracks channel count and spatial size while a static model is laid out.
struct Builder {
    c: usize,
    h: usize,
    w: usize,
}

impl Builder {
    fn conv(&mut self, name: &str, out: usize, k: usize, g: ConvGeometry) -> Result<ConvDesc> {
        let d = ConvDesc::new(name, self.c, out, k, g, self.h, self.w);
        (self.h, self.w) = d.try_output_hw()?;
        self.c = out;
        Ok(d)
    }

    /// 2x2 stride-2 max pooling, rounding up.
    fn pool(&mut self) {
        self.h = self.h.div_ceil(2);
        self.w = self.w.div_ceil(2);
    }
}

fn vgg16_fc7_into(b: &mut Builder) -> Result<(Vec<ConvDesc>, (usize, usize, usize))> {
    let stages: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    let mut convs = Vec::new();
    let mut conv4_3 = (0, 0, 0);
    for (s, &(n, c)) in stages.iter().enumerate() {
        if s > 0 {
            b.pool();
        }
        for i in 0..n {
            convs.push(b.conv(&format!("conv{}_{}", s + 1, i + 1), c, 3, ConvGeometry::same3x3(1))?);
        }
        if s == 3 {
            conv4_3 = (b.c, b.h, b.w);
        }
    }
    // pool5 is 3x3 stride 1: size unchanged
    convs.push(b.conv("fc6", 1024, 3, ConvGeometry::same3x3(6))?);
    convs.push(b.conv("fc7", 1024, 1, ConvGeometry::pointwise())?);
    Ok((convs, conv4_3))
}

/// VGG16 up to fc7 with fc6/fc7 as convolutions (fc6 3x3 dilation 6).
pub fn vgg16_fc7(input: usize) -> Result<ArchDesc> {
    let mut b = Builder { c: 3, h: input, w: input };
    let (convs, _) = vgg16_fc7_into(&mut b)?;
    Ok(ArchDesc {
        name: format!("vgg16-fc7@{input}"),
        blocks: vec![BlockDesc::plain("vgg16", convs)],
    })
}

/// Static FluffNet300-style model. Assumptions, since the exact widths are
/// not published:
/// - VGG16 through fc7 as in [`vgg16_fc7`];
/// - SSD300 extra layers 1024-256-512, 512-128-256, 256-128-256 (x2);
/// - 81 classes with background, 4/6/6/6/4/4 priors per cell on the six maps;
/// - default 3-level 4-branch blocks post-processing conv4_3 and fc7 (rates
///   kept) and replacing the 1x1 reduction of extra layers 1 and 2 (rates
///   scaled at l = 1, 2); the last two extra layers stay plain.
pub fn fluffnet300(input: usize) -> Result<ArchDesc> {
    let mut b = Builder { c: 3, h: input, w: input };
    let (convs, conv4_3) = vgg16_fc7_into(&mut b)?;
    let mut blocks = vec![BlockDesc::plain("vgg16", convs)];
    let mut maps = vec![conv4_3, (b.c, b.h, b.w)];

    let post = |c: usize| FluffConfig::new(c).with_rates(vec![crate::fluff::INIT_RATES.to_vec(); 3]);
    blocks.push(fluff_block_desc("conv4_3.fluff", &post(conv4_3.0), conv4_3.1, conv4_3.2));
    blocks.push(fluff_block_desc("fc7.fluff", &post(b.c), b.h, b.w));

    let extras: [(usize, usize, usize, usize); 4] = [(256, 512, 1, 1), (128, 256, 1, 2), (128, 256, 0, 0), (128, 256, 0, 0)];
    for (i, &(mid, out, pad, level)) in extras.iter().enumerate() {
        let name = format!("extra{}", i + 1);
        if level > 0 {
            let rates = crate::fluff::rate_schedule(&crate::fluff::INIT_RATES, level);
            let cfg = FluffConfig::new(b.c).with_c_out(mid).with_rates(vec![rates; 3]);
            blocks.push(fluff_block_desc(&format!("{name}.fluff"), &cfg, b.h, b.w));
            b.c = mid;
        } else {
            let d = b.conv(&format!("{name}.reduce"), mid, 1, ConvGeometry::pointwise())?;
            blocks.push(BlockDesc::plain(&format!("{name}.reduce"), vec![d]));
        }
        let stride = if pad == 1 { 2 } else { 1 };
        let d = b.conv(&format!("{name}.down"), out, 3, ConvGeometry::new(stride, pad, 1))?;
        blocks.push(BlockDesc::plain(&format!("{name}.down"), vec![d]));
        maps.push((b.c, b.h, b.w));
    }

    let anchors = [4usize, 6, 6, 6, 4, 4];
    let classes = 81;
    for (m, (&(c, h, w), a)) in maps.iter().zip(anchors).enumerate() {
        blocks.push(BlockDesc::plain(
            &format!("map{m}.head"),
            vec![
                ConvDesc::new(&format!("map{m}.loc"), c, a * 4, 3, ConvGeometry::same3x3(1), h, w),
                ConvDesc::new(&format!("map{m}.conf"), c, a * classes, 3, ConvGeometry::same3x3(1), h, w),
            ],
        ));
    }
    Ok(ArchDesc {
        name: format!("fluffnet{input}"),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluff::FluffParams;
    use crate::nn::Parameters;
    use proptest::prelude::*;

    #[test]
    fn receptive_field_closed_forms() {
        assert_eq!(receptive_field(&[1, 1, 1], 3), 7);
        assert_eq!(receptive_field(&[6], 3), 13);
        assert_eq!(receptive_field(&[6, 8, 9], 3), 47);
        assert_eq!(empirical_receptive_field(&[6, 8, 9], 3).unwrap(), 47);
        assert_eq!(empirical_receptive_field(&[1], 3).unwrap(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn analytic_matches_impulse(rates in prop::collection::vec(1usize..=9, 1..=3)) {
            prop_assert_eq!(receptive_field(&rates, 3), empirical_receptive_field(&rates, 3).unwrap());
        }
    }

    #[test]
    fn empty_network() {
        let d = ArchDesc::default();
        assert_eq!(param_count(&d), 0);
        assert_eq!(flop_count(&d), 0);
        assert_eq!(analyze(&d).unwrap().total_params, 0);
    }

    #[test]
    fn tiny_conv_macs() {
        let c = ConvDesc::new("c", 2, 3, 1, ConvGeometry::pointwise(), 1, 1);
        assert_eq!(c.macs(), 6);
        let a = ConvDesc::new("a", 4, 4, 3, ConvGeometry::same3x3(1), 20, 20);
        let b = ConvDesc::new("b", 4, 4, 3, ConvGeometry::same3x3(6), 20, 20);
        assert_eq!(a.macs(), b.macs());
    }

    #[test]
    fn block_formula_matches_allocation() {
        let cfg = FluffConfig::new(256);
        let desc = fluff_block_desc("b", &cfg, 19, 19);
        let c = 256u64;
        let q = c / 4;
        let formula = 4 * (c * q + q) + 12 * (q * q * 9 + q) + (3 * c * c + c) + (c * c + c);
        assert_eq!(desc.param_count(), formula);
        let params = FluffParams::<f32>::zeros(&cfg).unwrap();
        assert_eq!(params.param_count() as u64, formula);
    }

    #[test]
    fn vgg16_through_fc7() {
        assert_eq!(param_count(&vgg16_fc7(300).unwrap()), 20_483_904);
    }

    #[test]
    fn fluffnet300_near_published_size() {
        let d = fluffnet300(300).unwrap();
        let p = param_count(&d) as f64;
        assert!((p / 58e6 - 1.0).abs() <= 0.15, "{p}");
        let maps: Vec<_> = d.blocks.iter().filter(|b| b.name.ends_with(".head")).map(|b| (b.convs[0].in_h, b.convs[0].in_w)).collect();
        assert_eq!(maps, vec![(38, 38), (19, 19), (10, 10), (5, 5), (3, 3), (1, 1)]);
        assert_eq!(flop_count(&d), flop_count(&fluffnet300(300).unwrap()));
    }

    #[test]
    fn rf_grows_along_branches() {
        let cfg = FluffConfig::new(8);
        for row in block_receptive_fields(&cfg) {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn report_totals_are_sums() {
        let r = analyze(&fluffnet300(300).unwrap()).unwrap();
        assert_eq!(r.total_params, r.blocks.iter().map(|b| b.params).sum::<u64>());
        assert!(r.to_table().contains("total"));
    }
}
