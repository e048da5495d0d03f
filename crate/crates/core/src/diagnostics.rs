//! Finite-difference verification of every loss component on a toy model.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::random_span_batch;
use crate::encoder::{init_params_with_std, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{finite_difference_check, BackwardFault, FdReport};
use crate::objectives::{batch_loss, ContrastiveOptions, ObjectiveConfig, SimilarityKind};
use crate::seeding;
use crate::trainer::{on_off, parse_kv, parse_num, read_kv, set_encoder_key};

/// Toy setup for the gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub pairs: usize,
    /// Attended tokens per span, CLS included.
    pub span_len: usize,
    /// Padding positions appended to every span.
    pub pad: usize,
    /// Chance that a non-CLS position is masked and labeled.
    pub label_rate: f64,
    /// Weight scale at init. Larger than the training default so that no
    /// gradient is small enough to drown in rounding noise.
    pub init_std: f64,
    pub epsilon: f64,
    /// Coordinates checked per parameter; 0 checks all of them.
    pub per_param: usize,
    pub temperature: f64,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            encoder: EncoderConfig {
                num_layers: 2,
                hidden_dim: 8,
                num_heads: 2,
                ff_dim: 12,
                vocab_size: 17,
                max_len: 9,
                middle_layer: 1,
                condenser_layers: 1,
                normalize_tokens: true,
            },
            pairs: 2,
            span_len: 6,
            pad: 1,
            label_rate: 0.4,
            init_std: 0.1,
            epsilon: 1e-5,
            per_param: 0,
            temperature: 1.0,
            threshold: 1e-4,
        }
    }
}

impl GradcheckConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "pairs" => self.pairs = parse_num(key, v)?,
            "span_len" => self.span_len = parse_num(key, v)?,
            "pad" => self.pad = parse_num(key, v)?,
            "label_rate" => self.label_rate = parse_num(key, v)?,
            "init_std" => self.init_std = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "per_param" => self.per_param = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            other => {
                if !set_encoder_key(&mut self.encoder, other, v)? {
                    return Err(Error::contract(format!("unknown gradcheck key '{other}'")));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = GradcheckConfig::default();
        parse_kv(text, |k, v| cfg.set(k, v))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_kv(path, GradcheckConfig::parse)
    }

    pub fn to_kv(&self) -> String {
        let e = &self.encoder;
        let mut out = String::new();
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("pairs", self.pairs.to_string()),
            ("span_len", self.span_len.to_string()),
            ("pad", self.pad.to_string()),
            ("label_rate", self.label_rate.to_string()),
            ("init_std", self.init_std.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("per_param", self.per_param.to_string()),
            ("temperature", self.temperature.to_string()),
            ("threshold", self.threshold.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("num_heads", e.num_heads.to_string()),
            ("ff_dim", e.ff_dim.to_string()),
            ("vocab_size", e.vocab_size.to_string()),
            ("max_len", e.max_len.to_string()),
            ("middle_layer", e.middle_layer.to_string()),
            ("condenser_layers", e.condenser_layers.to_string()),
            ("normalize_tokens", on_off(e.normalize_tokens).to_string()),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pairs == 0 || self.span_len < 2 || self.span_len + self.pad > self.encoder.max_len {
            return Err(Error::contract(format!(
                "need pairs >= 1 and 2 <= span_len, span_len + pad <= max_len {}",
                self.encoder.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.label_rate) {
            return Err(Error::contract("label_rate outside [0, 1]"));
        }
        if !(self.epsilon > 0.0 && self.threshold > 0.0 && self.temperature > 0.0) {
            return Err(Error::contract("epsilon, threshold and temperature must be positive"));
        }
        Ok(())
    }
}

/// A loss component under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Contrastive(SimilarityKind),
    Mlm,
    Cdmlm,
    /// The full objective with MaxSim and the Condenser head.
    Total,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Contrastive(k) => write!(f, "co({k})"),
            Component::Mlm => f.write_str("mlm"),
            Component::Cdmlm => f.write_str("cdmlm"),
            Component::Total => f.write_str("total"),
        }
    }
}

pub const COMPONENTS: [Component; 5] = [
    Component::Contrastive(SimilarityKind::MaxSim),
    Component::Contrastive(SimilarityKind::Cls),
    Component::Mlm,
    Component::Cdmlm,
    Component::Total,
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub component: Component,
    pub report: FdReport,
    pub passed: bool,
}

/// Checks every component of [`COMPONENTS`]. `fault` corrupts one backward
/// rule, for negative controls.
pub fn run_gradcheck(cfg: &GradcheckConfig, fault: Option<BackwardFault>) -> Result<Vec<ComponentCheck>> {
    cfg.validate()?;
    let mut rng = seeding::stream(cfg.seed, &[seeding::phase::GRADCHECK]);
    let batch = random_span_batch(
        &mut rng,
        cfg.pairs,
        cfg.span_len,
        cfg.pad,
        cfg.encoder.vocab_size,
        cfg.label_rate,
    );
    let init_seed = seeding::derive_seed(cfg.seed, &[seeding::phase::GRADCHECK, 1]);
    let per_param = (cfg.per_param > 0).then_some(cfg.per_param);
    let mut out = Vec::new();
    for component in COMPONENTS {
        let similarity = match component {
            Component::Contrastive(k) => Some(k),
            Component::Total => Some(SimilarityKind::MaxSim),
            Component::Mlm | Component::Cdmlm => None,
        };
        let objective = ObjectiveConfig {
            similarity,
            condenser: true,
            contrastive: ContrastiveOptions {
                temperature: cfg.temperature,
                literal_indicator: false,
            },
        };
        let mut model = init_params_with_std(&cfg.encoder, init_seed, cfg.init_std)?;
        let config = model.config.clone();
        let report = finite_difference_check(
            &mut model.params,
            |store, tape| {
                tape.set_fault(fault);
                let m = Model {
                    config: config.clone(),
                    params: store.clone(),
                };
                let (_, loss) = batch_loss(tape, &m, &batch, &objective)?;
                Ok(match component {
                    Component::Contrastive(_) => loss.contrastive.expect("similarity is set"),
                    Component::Mlm => loss.mlm,
                    Component::Cdmlm => loss.cdmlm.expect("condenser is on"),
                    Component::Total => loss.total,
                })
            },
            cfg.epsilon,
            per_param,
            cfg.seed,
        )?;
        let passed = report.max_rel_error < cfg.threshold;
        out.push(ComponentCheck {
            component,
            report,
            passed,
        });
    }
    Ok(out)
}

/// One row per component: name, max relative error, verdict and the worst
/// coordinate.
pub fn format_gradcheck(checks: &[ComponentCheck], threshold: f64) -> String {
    let mut out = format!("component\tmax_rel_error\tstatus\tworst (threshold {threshold:e})\n");
    for c in checks {
        let worst = c.report.worst.as_ref().map_or_else(
            || "-".to_string(),
            |(name, i)| {
                format!(
                    "{name}[{i}] analytic={:e} numeric={:e}",
                    c.report.worst_values.0, c.report.worst_values.1
                )
            },
        );
        let _ = writeln!(
            out,
            "{}\t{:.3e}\t{}\t{worst}",
            c.component,
            c.report.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    out
}
