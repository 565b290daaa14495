//! Closed-form parameter accounting and budget matching across methods.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamGroup};
use crate::peft::{BitFitVariant, PeftMethod};

/// Method families whose size is adjustable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Adapter,
    Prefix,
}

impl Family {
    pub fn method(self, size: usize) -> PeftMethod {
        match self {
            Family::Adapter => PeftMethod::Adapter { bottleneck: size },
            Family::Prefix => PeftMethod::Prefix { length: size },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Adapter => "adapter",
            Family::Prefix => "prefix",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Family::Adapter),
            "prefix" => Ok(Family::Prefix),
            other => Err(Error::InvalidArgument(format!(
                "unknown method family {other:?}; expected adapter or prefix"
            ))),
        }
    }
}

/// Sequence-length overhead of prefix-tuning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrefixCost {
    /// Extra rows every encoder and decoder sequence carries.
    pub extra_rows: usize,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub method: PeftMethod,
    pub trainable: u64,
    pub total: u64,
    pub ratio_pct: f64,
    pub breakdown: IndexMap<ParamGroup, u64>,
    pub prefix_cost: Option<PrefixCost>,
}

/// Per-group element counts of the base (uninstrumented) model.
pub fn base_breakdown(c: &ModelConfig) -> IndexMap<ParamGroup, u64> {
    let (d, f) = (c.d_model as u64, c.ffn_dim as u64);
    let (e, n) = (c.enc_layers as u64, c.dec_layers as u64);
    let (v, p) = (c.vocab_size as u64, c.max_positions as u64);
    let layers = e + n;
    let out = if c.tie_output { 0 } else { v * d };
    let mut m = IndexMap::new();
    m.insert(ParamGroup::AttentionWeight, 4 * d * d * layers);
    m.insert(ParamGroup::AttentionBias, 4 * d * layers);
    m.insert(ParamGroup::CrossAttention, 4 * (d * d + d) * n);
    m.insert(ParamGroup::FfnWeight, 2 * d * f * layers);
    m.insert(ParamGroup::FfnBias, (f + d) * layers);
    m.insert(ParamGroup::LnGamma, (2 * e + 3 * n + 2) * d);
    m.insert(ParamGroup::LnBeta, (2 * e + 3 * n + 2) * d);
    m.insert(ParamGroup::Embedding, 2 * v * d + 2 * p * d + out);
    m
}

pub fn base_total(c: &ModelConfig) -> u64 {
    base_breakdown(c).values().sum()
}

/// Trainable parameters of Adapter(b): `L·(3d + 2db + b)` over all layers.
pub fn adapter_count(c: &ModelConfig, b: usize) -> u64 {
    let (d, b) = (c.d_model as u64, b as u64);
    c.total_layers() as u64 * (2 * d + d * b + b + b * d + d)
}

/// Trainable parameters of Prefix(p): `p·d·L`.
pub fn prefix_count(c: &ModelConfig, p: usize) -> u64 {
    (p * c.d_model * c.total_layers()) as u64
}

/// Per-group counts of exactly the parameters `method` marks trainable.
pub fn trainable_breakdown(c: &ModelConfig, method: PeftMethod) -> IndexMap<ParamGroup, u64> {
    let (d, f) = (c.d_model as u64, c.ffn_dim as u64);
    let (e, n) = (c.enc_layers as u64, c.dec_layers as u64);
    let mut m = IndexMap::new();
    match method {
        PeftMethod::FullFt => return base_breakdown(c),
        PeftMethod::NoFt => {}
        PeftMethod::Adapter { bottleneck } => {
            m.insert(ParamGroup::Adapter, adapter_count(c, bottleneck));
        }
        PeftMethod::Prefix { length } => {
            m.insert(ParamGroup::Prefix, prefix_count(c, length));
        }
        PeftMethod::BitFit(variant) => {
            m.insert(ParamGroup::AttentionBias, 4 * d * (e + n));
            m.insert(ParamGroup::CrossAttention, 4 * d * n);
            m.insert(ParamGroup::FfnBias, (f + d) * (e + n));
            let ln = (2 * e + 3 * n + 2) * d;
            match variant {
                BitFitVariant::LnBias => m.insert(ParamGroup::LnBeta, ln),
                BitFitVariant::LnWeights => m.insert(ParamGroup::LnGamma, ln),
            };
        }
        PeftMethod::XAttention => {
            m.insert(ParamGroup::CrossAttention, 4 * (d * d + d) * n);
            m.insert(ParamGroup::LnGamma, d * n);
            m.insert(ParamGroup::LnBeta, d * n);
        }
    }
    m
}

/// Total parameters after instrumenting with `method` (base plus new modules).
pub fn count_total(c: &ModelConfig, method: PeftMethod) -> u64 {
    base_total(c)
        + match method {
            PeftMethod::Adapter { bottleneck } => adapter_count(c, bottleneck),
            PeftMethod::Prefix { length } => prefix_count(c, length),
            _ => 0,
        }
}

pub fn count_trainable(c: &ModelConfig, method: PeftMethod) -> BudgetReport {
    let breakdown = trainable_breakdown(c, method);
    let trainable: u64 = breakdown.values().sum();
    let total = count_total(c, method);
    let prefix_cost = match method {
        PeftMethod::Prefix { length } => Some(PrefixCost {
            extra_rows: length,
            note: format!(
                "every sequence grows by {length} rows; decoder position n attends to n-1+{length} earlier rows"
            ),
        }),
        _ => None,
    };
    BudgetReport {
        method,
        trainable,
        total,
        ratio_pct: 100.0 * trainable as f64 / total as f64,
        breakdown,
        prefix_cost,
    }
}

fn family_count(c: &ModelConfig, family: Family, size: usize) -> u64 {
    match family {
        Family::Adapter => adapter_count(c, size),
        Family::Prefix => prefix_count(c, size),
    }
}

/// Size (b or p) whose count is nearest `target`; ties go to the smaller.
pub fn solve_budget(c: &ModelConfig, family: Family, target: u64) -> Result<PeftMethod> {
    let minimum = family_count(c, family, 1);
    if target < minimum {
        return Err(Error::UnreachableBudget {
            family: family.to_string(),
            target,
            minimum,
        });
    }
    // Counts are affine in the size: count(k) = fixed + k·step.
    let step = family_count(c, family, 2) - minimum;
    let fixed = minimum - step;
    let below = ((target - fixed) / step).max(1) as usize;
    let above = below + 1;
    let gap = |k: usize| family_count(c, family, k).abs_diff(target);
    let best = if gap(above) < gap(below) { above } else { below };
    Ok(family.method(best))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equalized {
    pub method: PeftMethod,
    pub trainable: u64,
    pub anchor_trainable: u64,
    /// `trainable − anchor`
    pub deviation: i64,
    pub deviation_pct: f64,
}

/// Matches each family to the anchor method's trainable count.
pub fn equalize(c: &ModelConfig, families: &[Family], anchor: PeftMethod) -> Result<Vec<Equalized>> {
    let target = count_trainable(c, anchor).trainable;
    families
        .iter()
        .map(|&family| {
            let method = solve_budget(c, family, target)?;
            let trainable = count_trainable(c, method).trainable;
            let deviation = trainable as i64 - target as i64;
            Ok(Equalized {
                method,
                trainable,
                anchor_trainable: target,
                deviation,
                deviation_pct: 100.0 * deviation as f64 / target as f64,
            })
        })
        .collect()
}

/// Aligned plain-text table with the group breakdown and prefix notes.
pub fn render_text(reports: &[BudgetReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.method.to_string().len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = format!(
        "{:<width$}  {:>14}  {:>14}  {:>10}\n",
        "method", "trainable", "total", "ratio_pct"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>14}  {:>14}  {:>10.4}\n",
            r.method.to_string(),
            r.trainable,
            r.total,
            r.ratio_pct
        ));
        for (group, count) in &r.breakdown {
            out.push_str(&format!("{:<width$}    {:<18}{:>10}\n", "", group.as_str(), count));
        }
        if let Some(cost) = &r.prefix_cost {
            out.push_str(&format!("{:<width$}    note: {}\n", "", cost.note));
        }
    }
    out
}

pub fn render_csv(reports: &[BudgetReport]) -> String {
    let mut out = String::from("method,trainable,total,ratio_pct\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{:.6}\n", r.method, r.trainable, r.total, r.ratio_pct));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> ModelConfig {
        ModelConfig::paper_scale()
    }

    #[test]
    fn paper_scale_tiers() {
        let c = paper();
        let t = |m: &str| count_trainable(&c, m.parse().unwrap()).trainable;
        // 24 layers · (2·1024 + 2·1024·b + b + 1024)
        assert_eq!(t("adapter:1024"), 24 * (2 * 1024 + 2 * 1024 * 1024 + 1024 + 1024));
        assert_eq!(t("adapter:1024"), 50_429_952);
        assert_eq!(t("adapter:5"), 319_608);
        assert_eq!(t("adapter:1"), 122_904);
        assert_eq!(t("prefix:13"), 13 * 1024 * 24);
        assert_eq!(t("prefix:5"), 122_880);
        assert_eq!(t("noft"), 0);
        assert_eq!(t("full"), base_total(&c));
    }

    #[test]
    fn bitfit_paper_scale_near_335k() {
        let c = paper();
        let lnb = count_trainable(&c, "bitfit:lnbias".parse().unwrap());
        let lnw = count_trainable(&c, "bitfit:lnweights".parse().unwrap());
        assert_eq!(lnb.trainable, lnw.trainable);
        // encoder layer: 4·1024 + 4096 + 1024 biases, 2 LNs; decoder layer:
        // 8·1024 + 4096 + 1024 biases, 3 LNs; two final LNs.
        let by_hand = 12 * (9216 + 2048) + 12 * (13312 + 3072) + 2048;
        assert_eq!(lnb.trainable, by_hand);
        assert!((lnb.trainable as f64 - 335_000.0).abs() / 335_000.0 < 0.02);
    }

    #[test]
    fn desk_xattention_count() {
        let c = ModelConfig::default();
        let r = count_trainable(&c, PeftMethod::XAttention);
        assert_eq!(r.trainable, 2 * (4 * (64 * 64 + 64) + 2 * 64));
        assert_eq!(r.trainable, 33_536);
    }

    #[test]
    fn solve_budget_examples() {
        let c = paper();
        assert_eq!(solve_budget(&c, Family::Adapter, 320_000).unwrap(), PeftMethod::Adapter { bottleneck: 5 });
        assert_eq!(solve_budget(&c, Family::Prefix, 123_000).unwrap(), PeftMethod::Prefix { length: 5 });
        let err = solve_budget(&c, Family::Adapter, 100).unwrap_err();
        assert!(err.to_string().contains("122904"), "{err}");
    }

    #[test]
    fn solve_budget_matches_enumeration() {
        let c = ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            d_model: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        for family in [Family::Adapter, Family::Prefix] {
            let min = family_count(&c, family, 1);
            for target in min..min + 2000 {
                let best = (1..400)
                    .min_by_key(|&k| (family_count(&c, family, k).abs_diff(target), k))
                    .unwrap();
                assert_eq!(solve_budget(&c, family, target).unwrap(), family.method(best), "target {target}");
            }
        }
    }

    #[test]
    fn tie_goes_to_smaller_count() {
        let c = paper();
        // prefix counts step by 24576; a target midway between p=1 and p=2
        let target = 24_576 + 24_576 / 2;
        assert_eq!(solve_budget(&c, Family::Prefix, target).unwrap(), PeftMethod::Prefix { length: 1 });
    }

    #[test]
    fn equalize_anchors() {
        let c = paper();
        let x = equalize(&c, &[Family::Adapter], PeftMethod::XAttention).unwrap();
        assert_eq!(x[0].method, PeftMethod::Adapter { bottleneck: 1024 });
        let b = equalize(
            &c,
            &[Family::Adapter, Family::Prefix],
            PeftMethod::BitFit(BitFitVariant::LnBias),
        )
        .unwrap();
        assert_eq!(b[0].method, PeftMethod::Adapter { bottleneck: 5 });
        // 333,824 / 24,576 = 13.58, so the nearest prefix length is 14.
        assert_eq!(b[1].method, PeftMethod::Prefix { length: 14 });
        for fam in [Family::Adapter, Family::Prefix] {
            assert!(matches!(
                equalize(&c, &[fam], PeftMethod::NoFt),
                Err(Error::UnreachableBudget { .. })
            ));
        }
    }

    #[test]
    fn report_rendering() {
        let c = ModelConfig::default();
        let reports: Vec<_> = ["noft", "prefix:3", "adapter:4"]
            .iter()
            .map(|m| count_trainable(&c, m.parse().unwrap()))
            .collect();
        let csv = render_csv(&reports);
        assert!(csv.starts_with("method,trainable,total,ratio_pct\n"));
        assert_eq!(csv.lines().count(), 4);
        let text = render_text(&reports);
        assert!(text.contains("n-1+3"));
        for r in &reports {
            assert_eq!(r.breakdown.values().sum::<u64>(), r.trainable);
            assert!(r.trainable <= r.total && (0.0..=100.0).contains(&r.ratio_pct));
        }
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn counts_strictly_increase(d in 1usize..64, e in 1usize..6, n in 1usize..6, k in 1usize..500) {
            let c = ModelConfig { d_model: d, heads: 1, enc_layers: e, dec_layers: n, ..ModelConfig::default() };
            prop_assert!(adapter_count(&c, k + 1) > adapter_count(&c, k));
            prop_assert!(prefix_count(&c, k + 1) > prefix_count(&c, k));
        }

        #[test]
        fn equalize_deviation_is_bounded(
            d in 2usize..96,
            e in 1usize..7,
            n in 1usize..7,
            ffn_mult in 1usize..5,
            anchor_size in 1usize..300,
            which in 0usize..5,
        ) {
            let c = ModelConfig {
                d_model: d,
                heads: 1,
                enc_layers: e,
                dec_layers: n,
                ffn_dim: d * ffn_mult,
                ..ModelConfig::default()
            };
            let anchor = [
                PeftMethod::BitFit(BitFitVariant::LnBias),
                PeftMethod::BitFit(BitFitVariant::LnWeights),
                PeftMethod::XAttention,
                PeftMethod::Adapter { bottleneck: anchor_size },
                PeftMethod::Prefix { length: anchor_size },
            ][which];
            let target = count_trainable(&c, anchor).trainable;
            for family in [Family::Adapter, Family::Prefix] {
                let min = family_count(&c, family, 1);
                let step = family_count(&c, family, 2) - min;
                match equalize(&c, &[family], anchor) {
                    Ok(out) => {
                        let dev = out[0].deviation.unsigned_abs();
                        prop_assert!(2 * dev <= step, "deviation {} exceeds half step {}", dev, step);
                        if target >= 10 * min {
                            prop_assert!(out[0].deviation_pct.abs() <= 5.0);
                        }
                    }
                    Err(Error::UnreachableBudget { minimum, .. }) => prop_assert!(target < minimum),
                    Err(other) => prop_assert!(false, "unexpected {}", other),
                }
            }
        }
    }
}
