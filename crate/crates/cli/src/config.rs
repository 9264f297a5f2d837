//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Rates accept fractions such as
//! `1/100`. Later assignments win, so overrides are applied by parsing them
//! after the file.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use selfheal::adversary::{AdversaryConfig, AdversaryMode, Configuration, ExternalRate};
use selfheal::engine::{ImageSpec, Scenario, TopologySpec, UpdateSchedule};
use selfheal::protocol::ProtocolParams;
use selfheal::topology::{Topology, DEFAULT_AREA_SIDE_M, DEFAULT_RANGE_M};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SELFHEAL_OUTPUT_ROOT";

const REFERENCE_NODES: f64 = 1024.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ConfigError { key: key.to_string(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Mesh,
    Btree,
    Ttree,
}

impl TopologyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mesh" => Some(TopologyKind::Mesh),
            "btree" => Some(TopologyKind::Btree),
            "ttree" => Some(TopologyKind::Ttree),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Mesh => "mesh",
            TopologyKind::Btree => "btree",
            TopologyKind::Ttree => "ttree",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateAt {
    /// 500 s with the internal adversary, 700 s with the external one,
    /// none otherwise.
    Default,
    Never,
    At(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: TopologyKind,
    pub nodes: usize,
    /// Mesh area side. Unset means scaled with `nodes` to keep the density
    /// of 1024 devices on 4000 m.
    pub side_m: Option<f64>,
    pub range_m: f64,
    /// Edge-list file replacing the generated topology.
    pub topology_file: Option<PathBuf>,
    pub adversary: AdversaryMode,
    pub f: f64,
    pub lambda_int: f64,
    pub lambda_ext: f64,
    pub external_rate: ExternalRate,
    pub disconnect_at: f64,
    pub configuration: Configuration,
    pub kappa: usize,
    pub halt_after: Option<f64>,
    pub ttl: Vec<u32>,
    pub lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub delta_cap: u32,
    pub theta: f64,
    pub ack_timeout: Option<f64>,
    pub threshold_selfcheck: Option<f64>,
    pub bogus_responders: bool,
    pub update_at: UpdateAt,
    pub retry_interval: f64,
    pub duration: f64,
    pub seeds: Vec<u64>,
    pub code_size: usize,
    pub chunk_size: usize,
    pub bloom_keys: usize,
    pub bloom_mu: usize,
    pub stop_when_settled: bool,
    pub output: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let p = ProtocolParams::default();
        let a = AdversaryConfig::internal(0.30);
        let img = ImageSpec::default();
        ScenarioConfig {
            name: "experiment".into(),
            topology: TopologyKind::Mesh,
            nodes: 1024,
            side_m: None,
            range_m: DEFAULT_RANGE_M,
            topology_file: None,
            adversary: AdversaryMode::Internal,
            f: a.f,
            lambda_int: a.lambda_int,
            lambda_ext: a.lambda_ext,
            external_rate: a.external_rate,
            disconnect_at: a.disconnect_at,
            configuration: Configuration::C0,
            kappa: a.kappa_adv,
            halt_after: None,
            ttl: vec![0, 1, 4],
            lambda: p.lambda_init,
            lambda_min: p.lambda_min,
            lambda_max: p.lambda_max,
            delta_cap: p.delta_cap,
            theta: p.theta,
            ack_timeout: None,
            threshold_selfcheck: None,
            bogus_responders: false,
            update_at: UpdateAt::Default,
            retry_interval: 10.0,
            duration: 1000.0,
            seeds: (1..=10).collect(),
            code_size: img.code_size,
            chunk_size: img.chunk_size,
            bloom_keys: p.bloom_keys,
            bloom_mu: p.bloom_mu,
            stop_when_settled: true,
            output: None,
        }
    }
}

/// Number that may be written as a fraction `a/b`.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.parse::<f64>().ok()?,
    };
    v.is_finite().then_some(v)
}

/// `1..=10`, `1-10` or `1,2,3`.
pub fn parse_seeds(s: &str) -> Option<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..=").or_else(|| s.split_once('-')) {
        let (a, b) = (a.trim().parse::<u64>().ok()?, b.trim().parse::<u64>().ok()?);
        return (a <= b).then(|| (a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse::<u64>().ok()).collect()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

fn optional(s: &str) -> bool {
    matches!(s, "none" | "off" | "")
}

impl ScenarioConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(line, format!("line {} is not `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::new(kv, "override must be `key=value`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |what: &str| ConfigError::new(key, format!("invalid {what} `{value}`"));
        let num = || parse_number(value).ok_or_else(|| bad("number"));
        let int = || value.parse::<usize>().map_err(|_| bad("non-negative integer"));
        let opt_num = || if optional(value) { Ok(None) } else { num().map(Some) };
        match key {
            "name" => self.name = value.to_string(),
            "topology" => self.topology = TopologyKind::parse(value).ok_or_else(|| bad("topology"))?,
            "nodes" => self.nodes = int()?,
            "side_m" => self.side_m = opt_num()?,
            "range_m" => self.range_m = num()?,
            "topology_file" => self.topology_file = (!optional(value)).then(|| PathBuf::from(value)),
            "adversary" => {
                self.adversary = match value {
                    "internal" => AdversaryMode::Internal,
                    "external" => AdversaryMode::External,
                    "none" => AdversaryMode::None,
                    _ => return Err(bad("adversary mode")),
                }
            }
            "f" => self.f = num()?,
            "lambda_int" => self.lambda_int = num()?,
            "lambda_ext" => self.lambda_ext = num()?,
            "external_rate" => {
                self.external_rate = match value {
                    "per-device" => ExternalRate::PerDevice,
                    "network" => ExternalRate::Network,
                    _ => return Err(bad("external rate")),
                }
            }
            "disconnect_at" => self.disconnect_at = num()?,
            "configuration" => {
                self.configuration = match value {
                    "C0" | "c0" => Configuration::C0,
                    "C1" | "c1" => Configuration::C1,
                    _ => return Err(bad("configuration")),
                }
            }
            "kappa" => self.kappa = int()?,
            "halt_after" => self.halt_after = opt_num()?,
            "ttl" => {
                self.ttl = value
                    .split(',')
                    .map(|t| t.trim().parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("ttl list"))?
            }
            "lambda" => self.lambda = num()?,
            "lambda_min" => self.lambda_min = num()?,
            "lambda_max" => self.lambda_max = num()?,
            "delta_cap" => self.delta_cap = value.parse().map_err(|_| bad("non-negative integer"))?,
            "theta" => self.theta = num()?,
            "ack_timeout" => self.ack_timeout = opt_num()?,
            "threshold_selfcheck" => self.threshold_selfcheck = opt_num()?,
            "bogus_responders" => self.bogus_responders = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "update_at" => {
                self.update_at = match value {
                    "default" => UpdateAt::Default,
                    v if optional(v) => UpdateAt::Never,
                    _ => UpdateAt::At(num()?),
                }
            }
            "retry_interval" => self.retry_interval = num()?,
            "duration" => self.duration = num()?,
            "seeds" => self.seeds = parse_seeds(value).ok_or_else(|| bad("seed list"))?,
            "code_size" => self.code_size = int()?,
            "chunk_size" => self.chunk_size = int()?,
            "bloom_keys" => self.bloom_keys = int()?,
            "bloom_mu" => self.bloom_mu = int()?,
            "stop_when_settled" => self.stop_when_settled = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "output" => self.output = (!optional(value)).then(|| PathBuf::from(value)),
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    pub fn side(&self) -> f64 {
        self.side_m.unwrap_or_else(|| DEFAULT_AREA_SIDE_M * (self.nodes as f64 / REFERENCE_NODES).sqrt())
    }

    pub fn update_time(&self) -> Option<f64> {
        match (self.update_at, self.adversary) {
            (UpdateAt::At(t), _) => Some(t),
            (UpdateAt::Never, _) | (UpdateAt::Default, AdversaryMode::None) => None,
            (UpdateAt::Default, AdversaryMode::Internal) => Some(500.0),
            (UpdateAt::Default, AdversaryMode::External) => Some(700.0),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = ConfigError::new;
        if self.nodes == 0 {
            return Err(err("nodes", "must be positive"));
        }
        if self.ttl.is_empty() {
            return Err(err("ttl", "empty sweep"));
        }
        if self.seeds.is_empty() {
            return Err(err("seeds", "empty seed list"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("seeds", "seeds must be distinct"));
        }
        if self.configuration == Configuration::C1 && self.adversary == AdversaryMode::External {
            return Err(err("configuration", "C1 requires the internal adversary"));
        }
        if !(0.0..=1.0).contains(&self.f) {
            return Err(err("f", "must lie in [0, 1]"));
        }
        for (k, v) in [
            ("lambda_int", self.lambda_int),
            ("lambda_ext", self.lambda_ext),
            ("lambda_min", self.lambda_min),
            ("lambda_max", self.lambda_max),
            ("theta", self.theta),
            ("duration", self.duration),
            ("retry_interval", self.retry_interval),
            ("range_m", self.range_m),
            ("side_m", self.side()),
        ] {
            if !(v > 0.0) {
                return Err(err(k, "must be positive"));
            }
        }
        if self.lambda_min > self.lambda_max {
            return Err(err("lambda_min", "exceeds lambda_max"));
        }
        if !(self.lambda_min..=self.lambda_max).contains(&self.lambda) {
            return Err(err("lambda", "outside [lambda_min, lambda_max]"));
        }
        if self.disconnect_at < 0.0 {
            return Err(err("disconnect_at", "must be non-negative"));
        }
        if self.threshold_selfcheck.is_some_and(|c| !(c > 0.0)) {
            return Err(err("threshold_selfcheck", "must be positive"));
        }
        if self.ack_timeout.is_some_and(|a| !(a > 0.0 && a < self.theta)) {
            return Err(err("ack_timeout", "must lie in (0, theta)"));
        }
        if let Some(t) = self.update_time() {
            if !(0.0..=self.duration).contains(&t) {
                return Err(err("update_at", "must lie within the duration"));
            }
        }
        if self.chunk_size == 0 || self.code_size == 0 || self.code_size % self.chunk_size != 0 {
            return Err(err("code_size", "must be a positive multiple of chunk_size"));
        }
        if self.kappa > self.code_size / self.chunk_size {
            return Err(err("kappa", "exceeds the number of chunks"));
        }
        if self.bloom_keys == 0 || self.bloom_mu == 0 {
            return Err(err("bloom_keys", "bloom_keys and bloom_mu must be positive"));
        }
        Ok(())
    }

    fn topology_spec(&self) -> Result<TopologySpec, ConfigError> {
        if let Some(path) = &self.topology_file {
            let file = std::fs::File::open(path).map_err(|e| ConfigError::new("topology_file", e.to_string()))?;
            let t = Topology::read_from(std::io::BufReader::new(file))
                .map_err(|e| ConfigError::new("topology_file", e.to_string()))?;
            return Ok(TopologySpec::Fixed(Arc::new(t)));
        }
        Ok(match self.topology {
            TopologyKind::Mesh => TopologySpec::Mesh { n: self.nodes, side_m: self.side(), range_m: self.range_m },
            TopologyKind::Btree => TopologySpec::Tree { n: self.nodes, arity: 2 },
            TopologyKind::Ttree => TopologySpec::Tree { n: self.nodes, arity: 3 },
        })
    }

    /// One engine scenario per ttl value of the sweep.
    pub fn scenarios(&self) -> Result<Vec<(u32, Scenario)>, ConfigError> {
        self.validate()?;
        let topology = self.topology_spec()?;
        let adversary = AdversaryConfig {
            mode: self.adversary,
            f: self.f,
            lambda_int: self.lambda_int,
            lambda_ext: self.lambda_ext,
            external_rate: self.external_rate,
            disconnect_at: self.disconnect_at,
            configuration: self.configuration,
            kappa_adv: self.kappa,
            halt_after: self.halt_after,
            initial: None,
        };
        let update = self
            .update_time()
            .map(|at| UpdateSchedule { at, retry_interval: self.retry_interval, target: None });
        Ok(self
            .ttl
            .iter()
            .map(|&ttl| {
                let protocol = ProtocolParams {
                    lambda_init: self.lambda,
                    lambda_min: self.lambda_min,
                    lambda_max: self.lambda_max,
                    ttl,
                    delta_cap: self.delta_cap,
                    theta: self.theta,
                    ack_timeout: self.ack_timeout.unwrap_or(self.theta / 2.0),
                    selfcheck_cap: self.threshold_selfcheck,
                    bogus_responders: self.bogus_responders,
                    bloom_keys: self.bloom_keys,
                    bloom_mu: self.bloom_mu,
                };
                let sc = Scenario {
                    topology: topology.clone(),
                    holders: None,
                    protocol,
                    adversary: adversary.clone(),
                    image: ImageSpec { app_id: 1, code_size: self.code_size, chunk_size: self.chunk_size },
                    duration: self.duration,
                    update,
                    stop_when_settled: self.stop_when_settled,
                };
                (ttl, sc)
            })
            .collect())
    }

    /// Output root: the `output` key, else the environment variable, else
    /// `./out`.
    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Resolved configuration in the file format, for the output directory.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let ttl: Vec<String> = self.ttl.iter().map(u32::to_string).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mode = match self.adversary {
            AdversaryMode::None => "none",
            AdversaryMode::Internal => "internal",
            AdversaryMode::External => "external",
        };
        let rate = match self.external_rate {
            ExternalRate::PerDevice => "per-device",
            ExternalRate::Network => "network",
        };
        let conf = match self.configuration {
            Configuration::C0 => "C0",
            Configuration::C1 => "C1",
        };
        let lines = [
            format!("name = {}", self.name),
            format!("topology = {}", self.topology.name()),
            format!("nodes = {}", self.nodes),
            format!("side_m = {}", self.side()),
            format!("range_m = {}", self.range_m),
            format!(
                "topology_file = {}",
                self.topology_file.as_ref().map_or("none".to_string(), |p| p.display().to_string())
            ),
            format!("adversary = {mode}"),
            format!("f = {}", self.f),
            format!("lambda_int = {}", self.lambda_int),
            format!("lambda_ext = {}", self.lambda_ext),
            format!("external_rate = {rate}"),
            format!("disconnect_at = {}", self.disconnect_at),
            format!("configuration = {conf}"),
            format!("kappa = {}", self.kappa),
            format!("halt_after = {}", opt(self.halt_after)),
            format!("ttl = {}", ttl.join(",")),
            format!("lambda = {}", self.lambda),
            format!("lambda_min = {}", self.lambda_min),
            format!("lambda_max = {}", self.lambda_max),
            format!("delta_cap = {}", self.delta_cap),
            format!("theta = {}", self.theta),
            format!("ack_timeout = {}", self.ack_timeout.unwrap_or(self.theta / 2.0)),
            format!("threshold_selfcheck = {}", opt(self.threshold_selfcheck)),
            format!("bogus_responders = {}", self.bogus_responders),
            format!("update_at = {}", opt(self.update_time())),
            format!("retry_interval = {}", self.retry_interval),
            format!("duration = {}", self.duration),
            format!("seeds = {}", seeds.join(",")),
            format!("code_size = {}", self.code_size),
            format!("chunk_size = {}", self.chunk_size),
            format!("bloom_keys = {}", self.bloom_keys),
            format!("bloom_mu = {}", self.bloom_mu),
            format!("stop_when_settled = {}", self.stop_when_settled),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ScenarioConfig::parse("").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        assert_eq!(c.nodes, 1024);
        assert_eq!(c.ttl, vec![0, 1, 4]);
        assert_eq!(c.seeds, (1..=10).collect::<Vec<_>>());
        assert_eq!(c.update_time(), Some(500.0));
        assert_eq!(c.side(), 4000.0);
    }

    #[test]
    fn fractions_and_comments() {
        let c = ScenarioConfig::parse("# rates\nlambda_min = 1/400 # floor\nadversary = external\n").unwrap();
        assert_eq!(c.lambda_min, 1.0 / 400.0);
        assert_eq!(c.update_time(), Some(700.0));
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(ScenarioConfig::parse("ttl = -1").unwrap_err().key, "ttl");
        assert_eq!(ScenarioConfig::parse("colour = red").unwrap_err().key, "colour");
        let e = ScenarioConfig::parse("adversary = external\nconfiguration = C1").unwrap_err();
        assert_eq!(e.key, "configuration");
    }

    #[test]
    fn override_wins() {
        let mut c = ScenarioConfig::parse("nodes = 64").unwrap();
        c.apply_override("nodes=32").unwrap();
        assert_eq!(c.nodes, 32);
        assert!(c.apply_override("nodes").is_err());
    }

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("1..=3"), Some(vec![1, 2, 3]));
        assert_eq!(parse_seeds("4-5"), Some(vec![4, 5]));
        assert_eq!(parse_seeds("7, 9"), Some(vec![7, 9]));
        assert_eq!(parse_seeds("x"), None);
        assert_eq!(ScenarioConfig::parse("seeds = 1,1").unwrap_err().key, "seeds");
    }

    #[test]
    fn text_round_trip() {
        let c = ScenarioConfig::parse("nodes = 100\nttl = 1\nthreshold_selfcheck = 50").unwrap();
        let mut back = ScenarioConfig::parse(&c.to_text()).unwrap();
        back.side_m = None;
        assert_eq!(back.side(), c.side());
        assert_eq!(back.threshold_selfcheck, Some(50.0));
        assert_eq!(back.ttl, vec![1]);
    }
}
