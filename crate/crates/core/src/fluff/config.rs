use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default per-branch dilation rates, shared by every level.
pub const INIT_RATES: [usize; 4] = [1, 2, 3, 6];

/// What sits in each lattice cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// 3x3 convolution at the cell's dilation rate.
    #[default]
    DilatedConv,
    /// Same-size max pooling over the extent the dilated conv would cover.
    MaxPool,
    /// Same-size average pooling over the extent the dilated conv would cover.
    AvgPool,
    /// 3x3 convolution with dilation 1 regardless of the rate table.
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluffConfig {
    pub levels: usize,
    pub branches: usize,
    pub c_pre: usize,
    /// Output channels; `None` keeps `c_pre`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
    /// `levels x branches` dilation rates, indexed `[level][branch]`.
    pub rates: Vec<Vec<usize>>,
    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default = "default_true")]
    pub inter_level_relu: bool,
    /// Add the input directly instead of a 1x1 projection (needs `c_pre == c_out`).
    #[serde(default)]
    pub identity_shortcut: bool,
}

fn default_true() -> bool {
    true
}

impl FluffConfig {
    /// Three levels of four branches, `[1, 2, 3, 6]` at every level.
    pub fn new(c_pre: usize) -> Self {
        FluffConfig {
            levels: 3,
            branches: 4,
            c_pre,
            c_out: None,
            rates: vec![INIT_RATES.to_vec(); 3],
            fusion: FusionKind::DilatedConv,
            inter_level_relu: true,
            identity_shortcut: false,
        }
    }

    pub fn with_c_out(mut self, c_out: usize) -> Self {
        self.c_out = Some(c_out);
        self
    }

    pub fn with_rates(mut self, rates: Vec<Vec<usize>>) -> Self {
        self.rates = rates;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.c_out.unwrap_or(self.c_pre)
    }

    pub fn branch_channels(&self) -> usize {
        self.c_pre / self.branches.max(1)
    }

    /// Channels of the latticed concatenation: every level of every branch.
    pub fn concat_channels(&self) -> usize {
        self.levels * self.branches * self.branch_channels()
    }

    pub fn multi_level(&self) -> bool {
        self.levels > 1
    }

    pub fn multi_branch(&self) -> bool {
        self.branches > 1
    }

    pub fn cell_dilation(&self, level: usize, branch: usize) -> usize {
        match self.fusion {
            FusionKind::PlainConv => 1,
            _ => self.rates[level][branch],
        }
    }

    pub fn has_cell_params(&self) -> bool {
        matches!(self.fusion, FusionKind::DilatedConv | FusionKind::PlainConv)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 || self.branches == 0 {
            return bad(format!(
                "levels ({}) and branches ({}) must be positive",
                self.levels, self.branches
            ));
        }
        if self.c_pre == 0 || self.out_channels() == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.c_pre % self.branches != 0 {
            return bad(format!(
                "c_pre ({}) is not divisible by the branch count ({})",
                self.c_pre, self.branches
            ));
        }
        if self.rates.len() != self.levels || self.rates.iter().any(|r| r.len() != self.branches) {
            return bad(format!(
                "rate table must be {}x{} (levels x branches)",
                self.levels, self.branches
            ));
        }
        if self.rates.iter().flatten().any(|&r| r == 0) {
            return bad("dilation rates must be >= 1".into());
        }
        if self.identity_shortcut && self.c_pre != self.out_channels() {
            return bad("identity shortcut requires c_pre == c_out".into());
        }
        Ok(())
    }
}

/// Scales rates by `1 + 0.25 * level_index`, rounding half away from zero and
/// clamping at 1. `level_index == 0` returns the input unchanged.
pub fn rate_schedule(init_rates: &[usize], level_index: usize) -> Vec<usize> {
    init_rates
        .iter()
        .map(|&r| {
            // (4 + l) * r / 4, all quantities non-negative
            let quarters = (4 + level_index) * r;
            ((quarters + 2) / 4).max(1)
        })
        .collect()
}

/// Configurations from the component and fusion ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    #[serde(rename = "SSD-baseline")]
    SsdBaseline,
    ANet,
    BNet,
    CNet,
    #[serde(rename = "CNet-maxpool")]
    CNetMaxPool,
    #[serde(rename = "CNet-avgpool")]
    CNetAvgPool,
    DNet,
    Fluff,
}

impl AblationRow {
    pub const ALL: [AblationRow; 8] = [
        AblationRow::SsdBaseline,
        AblationRow::ANet,
        AblationRow::BNet,
        AblationRow::CNet,
        AblationRow::CNetMaxPool,
        AblationRow::CNetAvgPool,
        AblationRow::DNet,
        AblationRow::Fluff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationRow::SsdBaseline => "SSD-baseline",
            AblationRow::ANet => "ANet",
            AblationRow::BNet => "BNet",
            AblationRow::CNet => "CNet",
            AblationRow::CNetMaxPool => "CNet-maxpool",
            AblationRow::CNetAvgPool => "CNet-avgpool",
            AblationRow::DNet => "DNet",
            AblationRow::Fluff => "Fluff",
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownRow(s.to_string()))
    }
}

/// Derives the block for an ablation row from a full block configuration.
///
/// Returns `None` for the baseline, which has no block at all. Plain-conv rows
/// reset every rate to 1; the dilated and pooling rows keep `base.rates`
/// (the first branch column when collapsing to one branch, the first level
/// when collapsing to one level).
pub fn make_variant(base: &FluffConfig, row: AblationRow) -> Option<FluffConfig> {
    let shaped = |levels: usize, branches: usize| -> FluffConfig {
        let rates = (0..levels)
            .map(|l| {
                let src = &base.rates[l.min(base.rates.len() - 1)];
                (0..branches).map(|r| src[r.min(src.len() - 1)]).collect()
            })
            .collect();
        FluffConfig {
            levels,
            branches,
            rates,
            ..base.clone()
        }
    };
    let ones = |mut c: FluffConfig| {
        c.rates = vec![vec![1; c.branches]; c.levels];
        c
    };
    let (l, r) = (base.levels, base.branches);
    let cfg = match row {
        AblationRow::SsdBaseline => return None,
        AblationRow::ANet => FluffConfig {
            fusion: FusionKind::PlainConv,
            inter_level_relu: false,
            ..ones(shaped(l, 1))
        },
        AblationRow::BNet => FluffConfig {
            fusion: FusionKind::PlainConv,
            inter_level_relu: false,
            ..ones(shaped(1, r))
        },
        AblationRow::CNet => FluffConfig {
            fusion: FusionKind::PlainConv,
            inter_level_relu: false,
            ..ones(shaped(l, r))
        },
        AblationRow::CNetMaxPool => FluffConfig {
            fusion: FusionKind::MaxPool,
            inter_level_relu: false,
            ..shaped(l, r)
        },
        AblationRow::CNetAvgPool => FluffConfig {
            fusion: FusionKind::AvgPool,
            inter_level_relu: false,
            ..shaped(l, r)
        },
        AblationRow::DNet => FluffConfig {
            fusion: FusionKind::DilatedConv,
            inter_level_relu: false,
            ..shaped(l, r)
        },
        AblationRow::Fluff => FluffConfig {
            fusion: FusionKind::DilatedConv,
            inter_level_relu: true,
            ..shaped(l, r)
        },
    };
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_level_zero_keeps_rates() {
        assert_eq!(rate_schedule(&INIT_RATES, 0), vec![1, 2, 3, 6]);
    }

    #[test]
    fn schedule_rounds_half_away_from_zero() {
        // 1.25 * [1,2,3,6] = [1.25, 2.5, 3.75, 7.5]
        assert_eq!(rate_schedule(&INIT_RATES, 1), vec![1, 3, 4, 8]);
        // 1.5 * [1,2,3,6] = [1.5, 3, 4.5, 9]
        assert_eq!(rate_schedule(&INIT_RATES, 2), vec![2, 3, 5, 9]);
        // 1.75 * [1,2,3,6] = [1.75, 3.5, 5.25, 10.5]
        assert_eq!(rate_schedule(&INIT_RATES, 3), vec![2, 4, 5, 11]);
    }

    #[test]
    fn schedule_matches_float_rounding() {
        for l in 0..8 {
            for r in 1..40usize {
                let f = ((1.0 + 0.25 * l as f64) * r as f64).round() as usize;
                assert_eq!(rate_schedule(&[r], l), vec![f.max(1)]);
            }
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = FluffConfig::new(256);
        c.validate().unwrap();
        assert_eq!(c.branch_channels(), 64);
        assert_eq!(c.concat_channels(), 768);
        assert_eq!(c.out_channels(), 256);
    }

    #[test]
    fn validation_errors() {
        let mut c = FluffConfig::new(10);
        assert!(c.validate().is_err());
        c.c_pre = 12;
        c.rates[1].pop();
        assert!(c.validate().is_err());
        let mut c = FluffConfig::new(8);
        c.rates[0][0] = 0;
        assert!(c.validate().is_err());
        let mut c = FluffConfig::new(8).with_c_out(4);
        c.identity_shortcut = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dnet_row() {
        let v = make_variant(&FluffConfig::new(16), AblationRow::DNet).unwrap();
        assert_eq!(v.fusion, FusionKind::DilatedConv);
        assert!(!v.inter_level_relu);
        assert_eq!(v.rates, FluffConfig::new(16).rates);
    }

    #[test]
    fn fluff_row() {
        let v = make_variant(&FluffConfig::new(16), AblationRow::Fluff).unwrap();
        assert!(v.inter_level_relu);
        assert_eq!(v.fusion, FusionKind::DilatedConv);
    }

    #[test]
    fn anet_row() {
        let v = make_variant(&FluffConfig::new(16), AblationRow::ANet).unwrap();
        assert_eq!(v.branches, 1);
        assert!(v.multi_level());
        assert_eq!(v.fusion, FusionKind::PlainConv);
        v.validate().unwrap();
    }

    #[test]
    fn bnet_and_cnet_rows() {
        let b = make_variant(&FluffConfig::new(16), AblationRow::BNet).unwrap();
        assert_eq!((b.levels, b.branches), (1, 4));
        let c = make_variant(&FluffConfig::new(16), AblationRow::CNet).unwrap();
        assert_eq!((c.levels, c.branches), (3, 4));
        assert!(!c.inter_level_relu);
        assert!(c.rates.iter().flatten().all(|&r| r == 1));
        for row in AblationRow::ALL {
            if let Some(v) = make_variant(&FluffConfig::new(16), row) {
                v.validate().unwrap();
            }
        }
    }

    #[test]
    fn pooling_rows() {
        let m = make_variant(&FluffConfig::new(16), AblationRow::CNetMaxPool).unwrap();
        assert_eq!(m.fusion, FusionKind::MaxPool);
        let a = make_variant(&FluffConfig::new(16), AblationRow::CNetAvgPool).unwrap();
        assert_eq!(a.fusion, FusionKind::AvgPool);
        assert!(!a.inter_level_relu);
    }

    #[test]
    fn baseline_has_no_block() {
        assert!(make_variant(&FluffConfig::new(16), AblationRow::SsdBaseline).is_none());
    }

    #[test]
    fn row_names_parse() {
        for row in AblationRow::ALL {
            assert_eq!(row.name().parse::<AblationRow>().unwrap(), row);
        }
        assert!(matches!("ENet".parse::<AblationRow>(), Err(Error::UnknownRow(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = make_variant(&FluffConfig::new(32).with_c_out(16), AblationRow::CNetAvgPool).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        let back: FluffConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = s.replace("\"levels\"", "\"depth\"");
        assert!(serde_json::from_str::<FluffConfig>(&bad).is_err());
    }
}
