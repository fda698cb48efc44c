//! Experiment configuration in a flat `[section]` / `key = value` format.
//!
//! ```text
//! [model]
//! s = 256
//! k = 64
//!
//! [attack.prune20]
//! kind = prune
//! fraction = 0.2
//! ```
//!
//! `#` and `;` start comments. Unknown sections or keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec, PopulationConfig, PretrainConfig};
use crate::bounds::{BridgeMode, PoolingMode};
use crate::error::{Error, Result};
use crate::watermark::{AuxArch, EmbedConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    pub spec: AttackSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub s: usize,
    pub k: usize,
    pub n: usize,
    pub backbone_hidden: Vec<usize>,
    /// Trigger count `N`.
    pub triggers: usize,
    pub sigma_scale: f64,
    /// Held-out inputs for the fidelity ratio.
    pub heldout: usize,
    pub embed: EmbedConfig,
    pub aux: AuxArch,
    pub pretrain: PretrainConfig,
    pub k_verify: usize,
    /// Fixed threshold; when `None` it is calibrated from `epsilon_fpr` at `r = 0.5`.
    pub tau: Option<usize>,
    pub epsilon_fpr: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r_bar: usize,
    pub r_under: usize,
    pub pooling: PoolingMode,
    pub bridge: BridgeMode,
    /// Population size `M` for both omega and xi.
    pub m: usize,
    pub population: PopulationConfig,
    pub save_population: bool,
    /// Independent models reported as baselines in the sweep.
    pub independents: usize,
    /// Independent models paired with `f~` in the covariance diagnostic.
    pub covariance_pairs: usize,
    /// Attack whose output forms the dependent covariance pair.
    pub covariance_attack: String,
    pub attacks: Vec<NamedAttack>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            s: 256,
            k: 64,
            n: 32,
            backbone_hidden: vec![128],
            triggers: 100,
            sigma_scale: 0.1,
            heldout: 500,
            embed: EmbedConfig::default(),
            aux: AuxArch::default(),
            pretrain: PretrainConfig::default(),
            k_verify: 64,
            tau: Some(5),
            epsilon_fpr: 1e-4,
            alpha: 0.01,
            delta: 0.01,
            r_bar: 75,
            r_under: 60,
            pooling: PoolingMode::Pooled,
            bridge: BridgeMode::PerImageTail,
            m: 50,
            population: PopulationConfig::default(),
            save_population: false,
            independents: 5,
            covariance_pairs: 10,
            covariance_attack: "prune20".into(),
            attacks: default_attacks(),
            seed: 2024,
            out: None,
        }
    }
}

/// Pruning at 20 % and 40 % and three epochs of fine-tuning.
pub fn default_attacks() -> Vec<NamedAttack> {
    vec![
        NamedAttack {
            name: "prune20".into(),
            spec: AttackSpec::prune(0.2),
        },
        NamedAttack {
            name: "prune40".into(),
            spec: AttackSpec::prune(0.4),
        },
        NamedAttack {
            name: "finetune3".into(),
            spec: AttackSpec::finetune(3, 1e-4, 17),
        },
    ]
}

fn cfg_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        line,
        detail: detail.into(),
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| cfg_err(line, format!("cannot parse '{value}' for {key}")))
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(line, key, v))
        .collect()
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(
            line,
            format!("expected a boolean for {key}, got '{value}'"),
        )),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per_bit" => Ok(Self::PerBit),
            _ => Err(Error::InvalidArgument(format!(
                "unknown pooling mode '{s}'"
            ))),
        }
    }
}

impl FromStr for BridgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_image_tail" => Ok(Self::PerImageTail),
            "literal_per_bit" => Ok(Self::LiteralPerBit),
            _ => Err(Error::InvalidArgument(format!("unknown bridge mode '{s}'"))),
        }
    }
}

fn pooling_name(p: PoolingMode) -> &'static str {
    match p {
        PoolingMode::Pooled => "pooled",
        PoolingMode::PerBit => "per_bit",
    }
}

fn bridge_name(b: BridgeMode) -> &'static str {
    match b {
        BridgeMode::PerImageTail => "per_image_tail",
        BridgeMode::LiteralPerBit => "literal_per_bit",
    }
}

fn set_attack_key(spec: &mut AttackSpec, line: usize, key: &str, value: &str) -> Result<()> {
    match key {
        "kind" => {
            spec.kind = value
                .parse()
                .map_err(|_| cfg_err(line, format!("unknown attack kind '{value}'")))?
        }
        "epochs" => spec.epochs = parse(line, key, value)?,
        "learning_rate" | "lr" => spec.learning_rate = parse(line, key, value)?,
        "weight_decay" => spec.weight_decay = parse(line, key, value)?,
        "fraction" => spec.prune_fraction = parse(line, key, value)?,
        "hidden" => spec.hidden = parse_list(line, key, value)?,
        "samples" => spec.samples = parse(line, key, value)?,
        "classes" => spec.classes = parse(line, key, value)?,
        "seed" => spec.seed = parse(line, key, value)?,
        _ => return Err(cfg_err(line, format!("unknown attack key '{key}'"))),
    }
    Ok(())
}

/// Spec with the defaults of its kind, before `key = value` overrides.
fn attack_template(kind: AttackKind) -> AttackSpec {
    match kind {
        AttackKind::Finetune => AttackSpec::finetune(3, 1e-4, 0),
        AttackKind::Prune => AttackSpec::prune(0.0),
        AttackKind::Distill => AttackSpec::distill(vec![64], 50, 5000, 0),
        AttackKind::Independent => AttackSpec::independent(vec![128], 0),
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value;
        match (section, key) {
            ("model", "s") => self.s = parse(line, key, v)?,
            ("model", "k") => self.k = parse(line, key, v)?,
            ("model", "n") => self.n = parse(line, key, v)?,
            ("model", "backbone_hidden") => self.backbone_hidden = parse_list(line, key, v)?,
            ("data", "triggers") => self.triggers = parse(line, key, v)?,
            ("data", "sigma_scale") => self.sigma_scale = parse(line, key, v)?,
            ("data", "heldout") => self.heldout = parse(line, key, v)?,
            ("embed", "lambda") => self.embed.lambda = parse(line, key, v)?,
            ("embed", "k_train") => self.embed.k_train = parse(line, key, v)?,
            ("embed", "epochs") => self.embed.epochs = parse(line, key, v)?,
            ("embed", "learning_rate") => self.embed.learning_rate = parse(line, key, v)?,
            ("embed", "batch_size") => self.embed.batch_size = parse(line, key, v)?,
            ("embed", "weight_decay") => self.embed.weight_decay = parse(line, key, v)?,
            ("embed", "encoder_hidden") => self.aux.encoder_hidden = parse_list(line, key, v)?,
            ("embed", "decoder_hidden") => self.aux.decoder_hidden = parse_list(line, key, v)?,
            ("embed", "perturbation_scale") => self.aux.perturbation_scale = parse(line, key, v)?,
            ("pretrain", "images") => self.pretrain.images = parse(line, key, v)?,
            ("pretrain", "epochs") => self.pretrain.epochs = parse(line, key, v)?,
            ("pretrain", "mask_fraction") => self.pretrain.mask_fraction = parse(line, key, v)?,
            ("pretrain", "learning_rate") => self.pretrain.learning_rate = parse(line, key, v)?,
            ("verify", "k") => self.k_verify = parse(line, key, v)?,
            ("verify", "tau") => {
                self.tau = if v == "auto" {
                    None
                } else {
                    Some(parse(line, key, v)?)
                }
            }
            ("verify", "epsilon_fpr") => self.epsilon_fpr = parse(line, key, v)?,
            ("bounds", "alpha") => self.alpha = parse(line, key, v)?,
            ("bounds", "delta") => self.delta = parse(line, key, v)?,
            ("bounds", "r_bar") => self.r_bar = parse(line, key, v)?,
            ("bounds", "r_under") => self.r_under = parse(line, key, v)?,
            ("bounds", "pooling") => {
                self.pooling = v.parse().map_err(|e: Error| cfg_err(line, e.to_string()))?
            }
            ("bounds", "bridge") => {
                self.bridge = v.parse().map_err(|e: Error| cfg_err(line, e.to_string()))?
            }
            ("population", "m") => self.m = parse(line, key, v)?,
            ("population", "kinds") => {
                self.population.kinds = v
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|e: Error| cfg_err(line, e.to_string()))
                    })
                    .collect::<Result<_>>()?
            }
            ("population", "finetune_epochs") => {
                self.population.finetune_epochs = parse(line, key, v)?
            }
            ("population", "finetune_lr") => self.population.finetune_lr = parse(line, key, v)?,
            ("population", "prune_min") => self.population.prune_range.0 = parse(line, key, v)?,
            ("population", "prune_max") => self.population.prune_range.1 = parse(line, key, v)?,
            ("population", "distill_epochs") => {
                self.population.distill_epochs = parse(line, key, v)?
            }
            ("population", "distill_samples") => {
                self.population.distill_samples = parse(line, key, v)?
            }
            ("population", "independent_hidden") => {
                self.population.independent_hidden = parse_list(line, key, v)?
            }
            ("population", "max_relative_error") => {
                self.population.max_relative_error = parse(line, key, v)?
            }
            ("population", "heldout") => self.population.heldout = parse(line, key, v)?,
            ("population", "save") => self.save_population = parse_bool(line, key, v)?,
            ("baselines", "independents") => self.independents = parse(line, key, v)?,
            ("baselines", "covariance_pairs") => self.covariance_pairs = parse(line, key, v)?,
            ("baselines", "covariance_attack") => self.covariance_attack = v.to_string(),
            ("run", "seed") => self.seed = parse(line, key, v)?,
            ("run", "out") => self.out = Some(PathBuf::from(v)),
            ("run", "default_attacks") => {
                if !parse_bool(line, key, v)? {
                    self.attacks.clear();
                }
            }
            _ => return Err(cfg_err(line, format!("unknown key '{key}' in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(cfg_err(0, d));
        if [self.s, self.k, self.n, self.triggers, self.k_verify, self.m].contains(&0) {
            return bad("dimensions and counts must be positive".into());
        }
        if self.k >= self.s {
            return bad(format!(
                "embedding size k = {} must be below s = {}",
                self.k, self.s
            ));
        }
        if let Some(t) = self.tau {
            if t > self.n {
                return bad(format!("tau = {t} exceeds n = {}", self.n));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("alpha must lie in (0, 1) and delta in (0, 1]".into());
        }
        if !(self.r_under < self.r_bar && self.r_bar <= self.triggers) {
            return bad(format!(
                "need r_under < r_bar <= N, got {} < {} <= {}",
                self.r_under, self.r_bar, self.triggers
            ));
        }
        if !(self.sigma_scale > 0.0) {
            return bad("sigma_scale must be positive".into());
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("attack names must be unique".into());
        }
        for a in &self.attacks {
            a.spec
                .validate()
                .map_err(|e| cfg_err(0, format!("attack {}: {e}", a.name)))?;
        }
        Ok(())
    }

    /// Serializes every field; parsing the output reproduces `self`.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let e = &self.embed;
        let p = &self.population;
        let _ = write!(
            o,
            "[model]\ns = {}\nk = {}\nn = {}\nbackbone_hidden = {}\n\n\
             [data]\ntriggers = {}\nsigma_scale = {}\nheldout = {}\n\n\
             [embed]\nlambda = {}\nk_train = {}\nepochs = {}\nlearning_rate = {}\nbatch_size = {}\n\
             weight_decay = {}\nencoder_hidden = {}\ndecoder_hidden = {}\nperturbation_scale = {}\n\n\
             [pretrain]\nimages = {}\nepochs = {}\nmask_fraction = {}\nlearning_rate = {}\n\n\
             [verify]\nk = {}\ntau = {}\nepsilon_fpr = {}\n\n\
             [bounds]\nalpha = {}\ndelta = {}\nr_bar = {}\nr_under = {}\npooling = {}\nbridge = {}\n\n\
             [population]\nm = {}\nkinds = {}\nfinetune_epochs = {}\nfinetune_lr = {}\nprune_min = {}\n\
             prune_max = {}\ndistill_epochs = {}\ndistill_samples = {}\nindependent_hidden = {}\n\
             max_relative_error = {}\nheldout = {}\nsave = {}\n\n\
             [baselines]\nindependents = {}\ncovariance_pairs = {}\ncovariance_attack = {}\n\n\
             [run]\nseed = {}\ndefault_attacks = false\n",
            self.s,
            self.k,
            self.n,
            join(&self.backbone_hidden),
            self.triggers,
            self.sigma_scale,
            self.heldout,
            e.lambda,
            e.k_train,
            e.epochs,
            e.learning_rate,
            e.batch_size,
            e.weight_decay,
            join(&self.aux.encoder_hidden),
            join(&self.aux.decoder_hidden),
            self.aux.perturbation_scale,
            self.pretrain.images,
            self.pretrain.epochs,
            self.pretrain.mask_fraction,
            self.pretrain.learning_rate,
            self.k_verify,
            self.tau.map_or("auto".to_string(), |t| t.to_string()),
            self.epsilon_fpr,
            self.alpha,
            self.delta,
            self.r_bar,
            self.r_under,
            pooling_name(self.pooling),
            bridge_name(self.bridge),
            self.m,
            p.kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","),
            p.finetune_epochs,
            p.finetune_lr,
            p.prune_range.0,
            p.prune_range.1,
            p.distill_epochs,
            p.distill_samples,
            join(&p.independent_hidden),
            p.max_relative_error,
            p.heldout,
            self.save_population,
            self.independents,
            self.covariance_pairs,
            self.covariance_attack,
            self.seed,
        );
        if let Some(out) = &self.out {
            let _ = writeln!(o, "out = {}", out.display());
        }
        for a in &self.attacks {
            let s = &a.spec;
            let _ = write!(
                o,
                "\n[attack.{}]\nkind = {}\nepochs = {}\nlearning_rate = {}\nweight_decay = {}\n\
                 fraction = {}\nhidden = {}\nsamples = {}\nclasses = {}\nseed = {}\n",
                a.name,
                s.kind.as_str(),
                s.epochs,
                s.learning_rate,
                s.weight_decay,
                s.prune_fraction,
                join(&s.hidden),
                s.samples,
                s.classes,
                s.seed
            );
        }
        o
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut custom: Vec<NamedAttack> = Vec::new();
        // Each attack section starts from the defaults of its `kind`, which
        // must therefore be its first key.
        let mut pending: Option<(String, usize)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|c| c.strip_suffix(']')) {
                if let Some((n, l)) = pending.take() {
                    return Err(cfg_err(l, format!("attack section '{n}' has no kind")));
                }
                section = name.trim().to_string();
                if let Some(attack) = section.strip_prefix("attack.") {
                    if attack.is_empty() {
                        return Err(cfg_err(line, "attack section needs a name"));
                    }
                    pending = Some((attack.to_string(), line));
                }
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err(line, format!("expected key = value, got '{content}'")))?;
            if section.is_empty() {
                return Err(cfg_err(line, "key outside of any section"));
            }
            if section.starts_with("attack.") {
                if let Some((name, _)) = pending.take() {
                    if key != "kind" {
                        return Err(cfg_err(line, "first key of an attack section must be kind"));
                    }
                    let kind: AttackKind = value
                        .parse()
                        .map_err(|e: Error| cfg_err(line, e.to_string()))?;
                    custom.push(NamedAttack {
                        name,
                        spec: attack_template(kind),
                    });
                    continue;
                }
                let spec = &mut custom.last_mut().expect("attack started").spec;
                set_attack_key(spec, line, key, value)?;
            } else {
                cfg.set(&section, key, value, line)?;
            }
        }
        if let Some((n, l)) = pending {
            return Err(cfg_err(l, format!("attack section '{n}' has no kind")));
        }
        if !custom.is_empty() {
            cfg.attacks = custom;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = cfg.to_ini().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_attack_sections() {
        let text = "\
            [model]\n s = 64 # small\n k = 16\n n = 8\n\
            [bounds]\n r_bar = 8\n r_under = 5\n\
            [data]\n triggers = 10\n\
            [attack.p]\n kind = prune\n fraction = 0.3\n\
            [attack.ft]\n kind = finetune\n epochs = 2\n lr = 0.01\n";
        let cfg: ExperimentConfig = text.parse().unwrap();
        assert_eq!((cfg.s, cfg.k, cfg.n, cfg.triggers), (64, 16, 8, 10));
        assert_eq!(cfg.attacks.len(), 2);
        assert_eq!(cfg.attacks[0].spec.prune_fraction, 0.3);
        assert_eq!(cfg.attacks[1].spec.kind, AttackKind::Finetune);
        assert_eq!(cfg.attacks[1].spec.learning_rate, 0.01);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = "[model]\ns = 64\nbogus = 1\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = "[model]\ns = x\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        let err = "[attack.a]\nfraction = 0.2\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        assert!("[verify]\ntau = 40\n".parse::<ExperimentConfig>().is_err());
    }

    #[test]
    fn default_attacks_can_be_disabled() {
        let cfg: ExperimentConfig = "[run]\ndefault_attacks = false\n".parse().unwrap();
        assert!(cfg.attacks.is_empty());
    }
}
