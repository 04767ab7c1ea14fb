//! Run configuration: parsing, validation, and serialization of the
//! `key = value` config file format.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// How the focus-area embedding is combined with the whole-image embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// `f(raw) + f(crop)`, both through the main backbone at the main size.
    ElementSum,
    /// `f(raw) ++ g(crop)` with a shallow auxiliary CNN at the aux size.
    ShallowConcat,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::ElementSum => write!(f, "element-sum"),
            FusionMode::ShallowConcat => write!(f, "shallow-concat"),
        }
    }
}

/// Few-shot classification head used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Cosine,
    NearestPrototype,
    Svm,
    Imprint,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierKind::Cosine => write!(f, "cosine"),
            ClassifierKind::NearestPrototype => write!(f, "nearest-prototype"),
            ClassifierKind::Svm => write!(f, "svm"),
            ClassifierKind::Imprint => write!(f, "imprint"),
        }
    }
}

/// Validated run configuration.
///
/// Field names are exactly the keys of the config file format. `rank`
/// is the per-order channel count `D^r` for orders `2..=order`; `None`
/// selects the architecture default (512 for the deep backbone, 64 for
/// the shallow variants).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Highest interaction order `R` (1 = plain GAP features).
    pub order: usize,
    /// `D^r` for each order `r >= 2`; a single entry broadcasts to all orders.
    pub rank: Option<Vec<usize>>,
    /// Balance weight for the neighbor penalty inside the CN loss.
    pub beta: f64,
    /// Center update learning rate, in `(0, 1]`.
    pub center_lr: f64,
    /// Weight of the CN loss against the softmax loss in joint supervision.
    pub loss_mix: f64,
    /// Heatmap threshold for focus-region extraction, in `(0, 1)`.
    pub threshold: f64,
    pub fusion_mode: FusionMode,
    pub classifier: ClassifierKind,
    /// Master seed; all samplers derive their streams from it.
    pub seed: u64,
    pub image_size_main: usize,
    pub image_size_aux: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            order: 2,
            rank: None,
            beta: 0.5,
            center_lr: 0.5,
            loss_mix: 0.01,
            threshold: 0.5,
            fusion_mode: FusionMode::ElementSum,
            classifier: ClassifierKind::Cosine,
            seed: 0,
            image_size_main: 224,
            image_size_aux: 84,
        }
    }
}

impl RunConfig {
    /// Resolved `D^r` list for orders `2..=order`, given the architecture
    /// default channel count.
    pub fn ranks_for(&self, arch_default: usize) -> Vec<usize> {
        let n = self.order.saturating_sub(1);
        match &self.rank {
            None => vec![arch_default; n],
            Some(v) if v.len() == 1 => vec![v[0]; n],
            Some(v) => v.clone(),
        }
    }

    /// Serialize to the config file format; `parse` of the output yields
    /// an identical config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        s.push_str("# fewgrain run configuration\n");
        s.push_str(&format!("order = {}\n", self.order));
        match &self.rank {
            None => s.push_str("rank = auto\n"),
            Some(v) => {
                let list: Vec<String> = v.iter().map(|d| d.to_string()).collect();
                s.push_str(&format!("rank = {}\n", list.join(",")));
            }
        }
        s.push_str(&format!("beta = {}\n", self.beta));
        s.push_str(&format!("center_lr = {}\n", self.center_lr));
        s.push_str(&format!("loss_mix = {}\n", self.loss_mix));
        s.push_str(&format!("threshold = {}\n", self.threshold));
        s.push_str(&format!("fusion_mode = {}\n", self.fusion_mode));
        s.push_str(&format!("classifier = {}\n", self.classifier));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("image_size_main = {}\n", self.image_size_main));
        s.push_str(&format!("image_size_aux = {}\n", self.image_size_aux));
        s
    }
}

/// Parse the flat `key = value` config text into a raw map. `#` starts a
/// comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(i) => &raw_line[..i],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("field `{key}`: cannot parse `{value}`")))
}

fn range_err(key: &str, allowed: &str) -> Error {
    Error::Config(format!("field `{key}` out of range; allowed: {allowed}"))
}

/// Validate a raw key-value map into a fully-populated [`RunConfig`].
///
/// Unknown keys are rejected naming the key; out-of-range values are
/// rejected naming the field and the allowed range. Missing keys take the
/// documented defaults.
pub fn validate_config(raw: &BTreeMap<String, String>) -> Result<RunConfig> {
    let known = [
        "order",
        "rank",
        "beta",
        "center_lr",
        "loss_mix",
        "threshold",
        "fusion_mode",
        "classifier",
        "seed",
        "image_size_main",
        "image_size_aux",
    ];
    for key in raw.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
    }

    let mut cfg = RunConfig::default();
    if let Some(v) = raw.get("order") {
        cfg.order = parse_field("order", v)?;
        if cfg.order < 1 {
            return Err(range_err("order", "integer >= 1"));
        }
    }
    if let Some(v) = raw.get("rank") {
        if v == "auto" {
            cfg.rank = None;
        } else {
            let ranks = v
                .split(',')
                .map(|p| parse_field::<usize>("rank", p.trim()))
                .collect::<Result<Vec<_>>>()?;
            if ranks.is_empty() || ranks.contains(&0) {
                return Err(range_err("rank", "comma-separated positive integers or `auto`"));
            }
            if ranks.len() != 1 && ranks.len() != cfg.order.saturating_sub(1) {
                return Err(Error::Config(format!(
                    "field `rank`: got {} entries, need 1 or order-1 = {}",
                    ranks.len(),
                    cfg.order.saturating_sub(1)
                )));
            }
            cfg.rank = Some(ranks);
        }
    }
    if let Some(v) = raw.get("beta") {
        cfg.beta = parse_field("beta", v)?;
        if !cfg.beta.is_finite() || cfg.beta < 0.0 {
            return Err(range_err("beta", "real >= 0"));
        }
    }
    if let Some(v) = raw.get("center_lr") {
        cfg.center_lr = parse_field("center_lr", v)?;
        if !cfg.center_lr.is_finite() || cfg.center_lr <= 0.0 || cfg.center_lr > 1.0 {
            return Err(range_err("center_lr", "real in (0, 1]"));
        }
    }
    if let Some(v) = raw.get("loss_mix") {
        cfg.loss_mix = parse_field("loss_mix", v)?;
        if !cfg.loss_mix.is_finite() || cfg.loss_mix < 0.0 {
            return Err(range_err("loss_mix", "real >= 0"));
        }
    }
    if let Some(v) = raw.get("threshold") {
        cfg.threshold = parse_field("threshold", v)?;
        if !cfg.threshold.is_finite() || cfg.threshold <= 0.0 || cfg.threshold >= 1.0 {
            return Err(range_err("threshold", "real in (0, 1)"));
        }
    }
    if let Some(v) = raw.get("fusion_mode") {
        cfg.fusion_mode = match v.as_str() {
            "element-sum" => FusionMode::ElementSum,
            "shallow-concat" => FusionMode::ShallowConcat,
            _ => return Err(range_err("fusion_mode", "element-sum | shallow-concat")),
        };
    }
    if let Some(v) = raw.get("classifier") {
        cfg.classifier = match v.as_str() {
            "cosine" => ClassifierKind::Cosine,
            "nearest-prototype" => ClassifierKind::NearestPrototype,
            "svm" => ClassifierKind::Svm,
            "imprint" => ClassifierKind::Imprint,
            _ => {
                return Err(range_err(
                    "classifier",
                    "cosine | nearest-prototype | svm | imprint",
                ))
            }
        };
    }
    if let Some(v) = raw.get("seed") {
        cfg.seed = parse_field("seed", v)?;
    }
    if let Some(v) = raw.get("image_size_main") {
        cfg.image_size_main = parse_field("image_size_main", v)?;
        if cfg.image_size_main < 8 || cfg.image_size_main > 2048 {
            return Err(range_err("image_size_main", "integer in [8, 2048]"));
        }
    }
    if let Some(v) = raw.get("image_size_aux") {
        cfg.image_size_aux = parse_field("image_size_aux", v)?;
        if cfg.image_size_aux < 8 || cfg.image_size_aux > 2048 {
            return Err(range_err("image_size_aux", "integer in [8, 2048]"));
        }
    }
    if let Some(ranks) = &cfg.rank {
        if ranks.len() > 1 && ranks.len() != cfg.order - 1 {
            return Err(Error::Config(format!(
                "field `rank`: got {} entries, need 1 or order-1 = {}",
                ranks.len(),
                cfg.order - 1
            )));
        }
    }
    Ok(cfg)
}

/// Parse config text and validate it in one step.
pub fn load_config(text: &str) -> Result<RunConfig> {
    validate_config(&parse_config_text(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_yields_defaults() {
        let cfg = validate_config(&BTreeMap::new()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.order, 2);
        assert_eq!(cfg.center_lr, 0.5);
        assert_eq!(cfg.threshold, 0.5);
        assert_eq!(cfg.loss_mix, 0.01);
    }

    #[test]
    fn beta_zero_accepted() {
        let mut raw = BTreeMap::new();
        raw.insert("beta".to_string(), "0.0".to_string());
        let cfg = validate_config(&raw).unwrap();
        assert_eq!(cfg.beta, 0.0);
    }

    #[test]
    fn order_zero_is_range_error() {
        let mut raw = BTreeMap::new();
        raw.insert("order".to_string(), "0".to_string());
        let err = validate_config(&raw).unwrap_err();
        assert!(err.to_string().contains("order"), "{err}");
    }

    #[test]
    fn unknown_key_named() {
        let mut raw = BTreeMap::new();
        raw.insert("warp_factor".to_string(), "9".to_string());
        let err = validate_config(&raw).unwrap_err();
        assert!(err.to_string().contains("warp_factor"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# hello\n\norder = 3   # trailing\nrank = 8,4\n";
        let cfg = load_config(text).unwrap();
        assert_eq!(cfg.order, 3);
        assert_eq!(cfg.rank, Some(vec![8, 4]));
    }

    #[test]
    fn rank_length_checked_against_order() {
        let text = "order = 2\nrank = 8,4,2\n";
        assert!(load_config(text).is_err());
    }

    #[test]
    fn serialize_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.order = 3;
        cfg.rank = Some(vec![16, 8]);
        cfg.beta = 0.25;
        cfg.seed = 42;
        cfg.classifier = ClassifierKind::Svm;
        cfg.fusion_mode = FusionMode::ShallowConcat;
        let round = load_config(&cfg.serialize()).unwrap();
        assert_eq!(cfg, round);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_config() -> impl Strategy<Value = RunConfig> {
            (2usize..5).prop_flat_map(|order| {
                let rank = prop_oneof![
                    Just(None),
                    prop::collection::vec(1usize..600, 1).prop_map(Some),
                    prop::collection::vec(1usize..600, order - 1).prop_map(Some),
                ];
                (
                    Just(order),
                    rank,
                    0.0f64..4.0,
                    (0.01f64..=1.0, 0.0f64..2.0, 0.01f64..0.99),
                    (0usize..2, 0usize..4),
                    any::<u64>(),
                    (8usize..512, 8usize..512),
                )
                    .prop_map(
                        |(order, rank, beta, (center_lr, loss_mix, threshold), (fm, cl), seed, (m, a))| {
                            RunConfig {
                                order,
                                rank,
                                beta,
                                center_lr,
                                loss_mix,
                                threshold,
                                fusion_mode: if fm == 0 {
                                    FusionMode::ElementSum
                                } else {
                                    FusionMode::ShallowConcat
                                },
                                classifier: match cl {
                                    0 => ClassifierKind::Cosine,
                                    1 => ClassifierKind::NearestPrototype,
                                    2 => ClassifierKind::Svm,
                                    _ => ClassifierKind::Imprint,
                                },
                                seed,
                                image_size_main: m,
                                image_size_aux: a,
                            }
                        },
                    )
            })
        }

        proptest! {
            // Any valid config survives a serialize/parse round trip.
            #[test]
            fn round_trip_identity(cfg in arb_config()) {
                let round = load_config(&cfg.serialize()).unwrap();
                prop_assert_eq!(cfg, round);
            }
        }
    }
}
