//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! [optimizers]
//! names = adaprelora_sgd, factor_sgd
//! learning_rates = 0.01, 0.1
//!
//! [problem]
//! kind = recovery
//! m = 32
//! n = 32
//! rank = 4
//! planted_rank = 4
//! condition_number = 100
//!
//! [run]
//! steps = 1000
//! ```
//!
//! Unknown sections, unknown keys and repeated keys are errors.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::adafactor::{DEFAULT_DECAY, DEFAULT_EPS};
use crate::optim::{GradientSource, MomentumMode, OptimizerConfig, OptimizerKind};
use crate::problems::ProblemKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// 1-based line number, when the error is tied to a line.
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn global(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub names: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    pub weight_decay: f64,
    pub decay_row: f64,
    pub decay_col: f64,
    pub momentum_decay: f64,
    pub eps: f64,
    pub momentum_mode: MomentumMode,
    pub gradient_source: GradientSource,
}

impl OptimizerSection {
    pub fn optimizer_config(&self, learning_rate: f64) -> OptimizerConfig<f64> {
        OptimizerConfig {
            learning_rate,
            weight_decay: self.weight_decay,
            decay_row: self.decay_row,
            decay_col: self.decay_col,
            momentum_decay: self.momentum_decay,
            eps: self.eps,
            momentum_mode: self.momentum_mode,
            gradient_source: self.gradient_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub m: usize,
    pub n: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    pub planted_rank: usize,
    pub condition_number: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub steps: usize,
    pub master_seed: u64,
    /// Relative loss level used for steps-to-threshold.
    pub threshold: f64,
    /// When false, `wall_clock_ns` is written as 0 so files are byte-stable.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub optimizers: OptimizerSection,
    pub problem: ProblemSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Section {
    Optimizers,
    Problem,
    Run,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "optimizers" => Some(Self::Optimizers),
            "problem" => Some(Self::Problem),
            "run" => Some(Self::Run),
            _ => None,
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Self::Optimizers => &[
                "names",
                "learning_rates",
                "weight_decay",
                "decay_row",
                "decay_col",
                "momentum_decay",
                "eps",
                "momentum_mode",
                "gradient_source",
            ],
            Self::Problem => &["kind", "m", "n", "rank", "planted_rank", "condition_number", "seeds"],
            Self::Run => &["steps", "master_seed", "threshold", "timing"],
        }
    }
}

/// Raw `key = value` entries with the line they came from.
struct Entries {
    values: HashMap<(Section, &'static str), (usize, String)>,
}

impl Entries {
    fn raw(&self, section: Section, key: &str) -> Option<&(usize, String)> {
        self.values
            .iter()
            .find(|((s, k), _)| *s == section && *k == key)
            .map(|(_, v)| v)
    }

    fn get<V: FromStr>(&self, section: Section, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, text)) => text
                .parse::<V>()
                .map(Some)
                .map_err(|e| ConfigError::at(*line, format!("invalid value `{text}` for `{key}`: {e}"))),
        }
    }

    fn required<V: FromStr>(&self, section: Section, key: &str) -> Result<V, ConfigError>
    where
        V::Err: fmt::Display,
    {
        self.get(section, key)?.ok_or_else(|| ConfigError::global(format!("missing required key `{key}`")))
    }

    fn list<V: FromStr>(&self, section: Section, key: &str) -> Result<Vec<V>, ConfigError>
    where
        V::Err: fmt::Display,
    {
        let (line, text) = self
            .raw(section, key)
            .ok_or_else(|| ConfigError::global(format!("missing required key `{key}`")))?;
        let items: Vec<V> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<V>().map_err(|e| ConfigError::at(*line, format!("invalid entry `{s}` in `{key}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if items.is_empty() {
            return Err(ConfigError::at(*line, format!("`{key}` must list at least one value")));
        }
        Ok(items)
    }

    fn line_of(&self, section: Section, key: &str) -> Option<usize> {
        self.raw(section, key).map(|(l, _)| *l)
    }
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut values = HashMap::new();
    let mut section: Option<Section> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line_no, "unterminated section header"))?
                .trim();
            section = Some(Section::parse(name).ok_or_else(|| ConfigError::at(line_no, format!("unknown section `[{name}]`")))?);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line_no, format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| ConfigError::at(line_no, format!("key `{key}` appears before any section header")))?;
        let known = sec
            .keys()
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| ConfigError::at(line_no, format!("unknown key `{key}` in this section")))?;
        if values.insert((sec, *known), (line_no, value.to_string())).is_some() {
            return Err(ConfigError::at(line_no, format!("duplicate key `{key}`")));
        }
    }
    Ok(Entries { values })
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::global(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        use Section::*;
        let e = tokenize(text)?;

        let optimizers = OptimizerSection {
            names: e.list(Optimizers, "names")?,
            learning_rates: e.list(Optimizers, "learning_rates")?,
            weight_decay: e.get(Optimizers, "weight_decay")?.unwrap_or(0.0),
            decay_row: e.get(Optimizers, "decay_row")?.unwrap_or(DEFAULT_DECAY),
            decay_col: e.get(Optimizers, "decay_col")?.unwrap_or(DEFAULT_DECAY),
            momentum_decay: e.get(Optimizers, "momentum_decay")?.unwrap_or(0.9),
            eps: e.get(Optimizers, "eps")?.unwrap_or(DEFAULT_EPS),
            momentum_mode: e.get(Optimizers, "momentum_mode")?.unwrap_or(MomentumMode::WSpace),
            gradient_source: e.get(Optimizers, "gradient_source")?.unwrap_or(GradientSource::Exact),
        };
        let problem = ProblemSection {
            kind: e.required(Problem, "kind")?,
            m: e.required(Problem, "m")?,
            n: e.required(Problem, "n")?,
            rank: e.required(Problem, "rank")?,
            planted_rank: e.required(Problem, "planted_rank")?,
            condition_number: e.get(Problem, "condition_number")?.unwrap_or(1.0),
            seeds: e.get(Problem, "seeds")?.unwrap_or(1),
        };
        let run = RunSection {
            steps: e.required(Run, "steps")?,
            master_seed: e.get(Run, "master_seed")?.unwrap_or(0),
            threshold: e.get(Run, "threshold")?.unwrap_or(1e-6),
            timing: e.get(Run, "timing")?.unwrap_or(true),
        };
        let cfg = Self { optimizers, problem, run };
        cfg.validate(&e)?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    fn validate(&self, e: &Entries) -> Result<(), ConfigError> {
        use Section::*;
        let fail = |sec, key: &str, msg: String| match e.line_of(sec, key) {
            Some(line) => ConfigError::at(line, msg),
            None => ConfigError::global(msg),
        };
        let p = &self.problem;
        if p.m == 0 || p.n == 0 {
            return Err(fail(Problem, "m", "m and n must be positive".into()));
        }
        if p.rank == 0 || p.rank > p.m.min(p.n) {
            return Err(fail(Problem, "rank", format!("rank must lie in [1, {}]", p.m.min(p.n))));
        }
        if p.planted_rank == 0 || p.planted_rank > p.m.min(p.n) {
            return Err(fail(Problem, "planted_rank", format!("planted_rank must lie in [1, {}]", p.m.min(p.n))));
        }
        if !(p.condition_number >= 1.0) || !p.condition_number.is_finite() {
            return Err(fail(Problem, "condition_number", "condition_number must be finite and >= 1".into()));
        }
        if p.seeds == 0 {
            return Err(fail(Problem, "seeds", "seeds must be at least 1".into()));
        }
        if !(self.run.threshold > 0.0) {
            return Err(fail(Run, "threshold", "threshold must be positive".into()));
        }
        let o = &self.optimizers;
        for &lr in &o.learning_rates {
            o.optimizer_config(lr)
                .validate()
                .map_err(|err| fail(Optimizers, "learning_rates", err.to_string()))?;
        }
        if o.names.contains(&OptimizerKind::AdaPreLoraMomentum) && o.momentum_mode == MomentumMode::None {
            return Err(fail(
                Optimizers,
                "momentum_mode",
                "adaprelora_momentum needs momentum_mode w_space or factor_space".into(),
            ));
        }
        Ok(())
    }

    /// Echo of every setting as `key=value` pairs.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let o = &self.optimizers;
        vec![
            ("weight_decay".into(), o.weight_decay.to_string()),
            ("decay_row".into(), o.decay_row.to_string()),
            ("decay_col".into(), o.decay_col.to_string()),
            ("momentum_decay".into(), o.momentum_decay.to_string()),
            ("eps".into(), o.eps.to_string()),
            ("momentum_mode".into(), o.momentum_mode.to_string()),
            ("gradient_source".into(), o.gradient_source.to_string()),
            ("rank".into(), self.problem.rank.to_string()),
            ("steps".into(), self.run.steps.to_string()),
            ("master_seed".into(), self.run.master_seed.to_string()),
            ("threshold".into(), self.run.threshold.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[optimizers]
names = adaprelora_sgd
learning_rates = 0.1

[problem]
kind = recovery
m = 6
n = 5
rank = 2
planted_rank = 2

[run]
steps = 10
";

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg: ExperimentConfig = MINIMAL.parse().unwrap();
        assert_eq!(cfg.optimizers.names, vec![OptimizerKind::AdaPreLoraSgd]);
        assert_eq!(cfg.optimizers.decay_row, 0.98);
        assert_eq!(cfg.optimizers.eps, 1e-6);
        assert_eq!(cfg.problem.seeds, 1);
        assert_eq!(cfg.problem.condition_number, 1.0);
        assert_eq!(cfg.run.steps, 10);
        assert!(cfg.run.timing);
    }

    #[test]
    fn lists_and_comments() {
        let text = MINIMAL
            .replace("names = adaprelora_sgd", "names = adaprelora_sgd, scaled_gd  # two")
            .replace("learning_rates = 0.1", "learning_rates = 1e-3, 0.01,0.1");
        let cfg: ExperimentConfig = text.parse().unwrap();
        assert_eq!(cfg.optimizers.names.len(), 2);
        assert_eq!(cfg.optimizers.learning_rates, vec![1e-3, 0.01, 0.1]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("steps = 10", "steps = 10\nlearnign_rate = 0.1");
        let err = text.parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(err.line, Some(14));
        assert!(err.message.contains("learnign_rate"));
    }

    #[test]
    fn bad_value_reports_line() {
        let text = MINIMAL.replace("m = 6", "m = six");
        let err = text.parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(err.line, Some(7));
        let text = MINIMAL.replace("learning_rates = 0.1", "learning_rates = -0.1");
        assert_eq!(text.parse::<ExperimentConfig>().unwrap_err().line, Some(3));
    }

    #[test]
    fn structural_errors() {
        assert!("names = x".parse::<ExperimentConfig>().unwrap_err().message.contains("before any section"));
        assert!("[bogus]".parse::<ExperimentConfig>().unwrap_err().message.contains("unknown section"));
        assert!("[run\n".parse::<ExperimentConfig>().is_err());
        let dup = MINIMAL.replace("m = 6", "m = 6\nm = 7");
        assert!(dup.parse::<ExperimentConfig>().unwrap_err().message.contains("duplicate"));
        let missing = MINIMAL.replace("kind = recovery\n", "");
        let err = missing.parse::<ExperimentConfig>().unwrap_err();
        assert_eq!(err.line, None);
        assert!(err.message.contains("kind"));
        let rank = MINIMAL.replace("rank = 2\nplanted", "rank = 9\nplanted");
        assert!(rank.parse::<ExperimentConfig>().is_err());
    }
}
