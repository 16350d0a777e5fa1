//! Experiment runner: configuration profiles, scenario flags, per-seed
//! training, comparison statistics, sweeps, complexity counts and CSV
//! persistence.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::agents::{train, AgentConfig, AgentKind, EpisodeStats, TrainOptions};
use crate::channel::Topology;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::mdp::{EnvConfig, Environment, Fading, RewardCoefficients};
use crate::neural::{connection_count, flops_count};
use crate::physics::NumeratorForm;

/// Scenario knobs. Each flag changes exactly one part of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub algorithm: AgentKind,
    /// Amplifying surfaces (`false` pins every amplification factor to 1).
    pub active: bool,
    /// Keep the inter-surface channels (`false` zeroes them).
    pub second_order: bool,
    /// `false` collapses the deployment to one surface serving every user.
    pub multi_ris: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            algorithm: AgentKind::MetaDdpg,
            active: true,
            second_order: true,
            multi_ris: true,
        }
    }
}

impl Scenario {
    /// Parses flags joined by `+` or `,`, e.g. `ddpg+passive+single_reflection`.
    /// Unnamed knobs keep their defaults. Contradictory flags are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut algorithm = None;
        let mut active = None;
        let mut second_order = None;
        let mut multi_ris = None;
        fn set<T: Copy + PartialEq + fmt::Debug>(slot: &mut Option<T>, value: T, flag: &str) -> Result<()> {
            match *slot {
                Some(prev) if prev != value => Err(Error::Config(format!(
                    "scenario flag `{flag}` contradicts an earlier flag"
                ))),
                _ => {
                    *slot = Some(value);
                    Ok(())
                }
            }
        }
        for flag in text.split(['+', ',']).map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "meta" | "meta-ddpg" | "meta_ddpg" => set(&mut algorithm, AgentKind::MetaDdpg, flag)?,
                "ddpg" => set(&mut algorithm, AgentKind::Ddpg, flag)?,
                "active" => set(&mut active, true, flag)?,
                "passive" => set(&mut active, false, flag)?,
                "second_order" | "second-order" => set(&mut second_order, true, flag)?,
                "single_reflection" | "single-reflection" => set(&mut second_order, false, flag)?,
                "multi_ris" | "multi-ris" => set(&mut multi_ris, true, flag)?,
                "single_ris" | "single-ris" => set(&mut multi_ris, false, flag)?,
                "default" => {}
                other => return Err(Error::Config(format!("unknown scenario flag `{other}`"))),
            }
        }
        if multi_ris == Some(false) && second_order == Some(true) {
            return Err(Error::Config(
                "`second_order` needs at least two surfaces and cannot be combined with `single_ris`".into(),
            ));
        }
        let d = Scenario::default();
        Ok(Scenario {
            algorithm: algorithm.unwrap_or(d.algorithm),
            active: active.unwrap_or(d.active),
            second_order: second_order.unwrap_or(d.second_order),
            multi_ris: multi_ris.unwrap_or(d.multi_ris),
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}+{}+{}+{}",
            self.algorithm.tag(),
            if self.active { "active" } else { "passive" },
            if self.second_order { "second_order" } else { "single_reflection" },
            if self.multi_ris { "multi_ris" } else { "single_ris" },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn tag(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Keys accepted for an explicit topology (see [`Topology::from_kv`]).
pub const TOPOLOGY_KEYS: [&str; 9] = [
    "bs", "ris", "users", "user_ris", "user_side", "pl_ris_bs", "pl_user_ris", "pl_ris_ris", "ris_elements",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub n_ris: usize,
    pub elements: usize,
    pub users: usize,
    pub n_bs: usize,
    /// Explicit deployment as `key = value` pairs; overrides the generated layout.
    pub custom_topology: Option<Vec<(String, String)>>,
    pub p_max: f64,
    pub r_min: f64,
    pub noise_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub delta_max_db: f64,
    pub episodes: usize,
    pub t_max: usize,
    pub seeds: Vec<u64>,
    pub scenario: Scenario,
    pub fading: Fading,
    pub numerator: NumeratorForm,
    /// Reward weights; `c3` defaults to `r_min`.
    pub reward_c1: f64,
    pub reward_c2: f64,
    pub reward_c3: Option<f64>,
    pub agent: AgentConfig,
}

impl ExperimentConfig {
    /// Reduced scale: 2 surfaces of 4 elements, 4 users, 2 BS antennas,
    /// 300 episodes of 50 steps, 5 seeds, hidden layers of 64 units.
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            n_ris: 2,
            elements: 4,
            users: 4,
            n_bs: 2,
            custom_topology: None,
            p_max: 20.0,
            r_min: 1.0,
            noise_dbm_hz: -174.0,
            bandwidth_hz: 10e6,
            delta_max_db: 25.0,
            episodes: 300,
            t_max: 50,
            seeds: vec![1, 2, 3, 4, 5],
            scenario: Scenario::default(),
            fading: Fading::PerStep,
            numerator: NumeratorForm::ServingLink,
            reward_c1: 1.0,
            reward_c2: 1.0,
            reward_c3: None,
            agent: AgentConfig {
                hidden: vec![64, 64],
                ..AgentConfig::default()
            },
        }
    }

    /// Full scale: 4 surfaces, 16 users, 4 BS antennas, 5000 episodes.
    pub fn paper() -> Self {
        ExperimentConfig {
            profile: Profile::Paper,
            n_ris: 4,
            users: 16,
            n_bs: 4,
            episodes: 5000,
            agent: AgentConfig::default(),
            ..ExperimentConfig::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig::desk(),
            Profile::Paper => ExperimentConfig::paper(),
        }
    }

    /// `10^((dBm/Hz - 30)/10) * bandwidth` watts.
    pub fn noise_power(&self) -> f64 {
        10f64.powf((self.noise_dbm_hz - 30.0) / 10.0) * self.bandwidth_hz
    }

    /// Linear power-domain amplification bound.
    pub fn delta_max(&self) -> f64 {
        10f64.powf(self.delta_max_db / 10.0)
    }

    pub fn topology(&self) -> Result<Topology> {
        if let Some(pairs) = &self.custom_topology {
            if !self.scenario.multi_ris {
                return Err(Error::Config("`single_ris` requires a generated topology".into()));
            }
            let text: String = pairs
                .iter()
                .map(|(k, v)| {
                    let key = if k == "ris_elements" { "elements" } else { k.as_str() };
                    format!("{key} = {v}\n")
                })
                .chain(std::iter::once(format!("n_bs = {}\n", self.n_bs)))
                .collect();
            return Topology::from_kv(&KvFile::parse(&text)?);
        }
        let n_ris = if self.scenario.multi_ris { self.n_ris } else { 1 };
        Topology::generated(n_ris, self.elements, self.users, self.n_bs)
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        let cfg = EnvConfig {
            p_max: self.p_max,
            r_min: self.r_min,
            noise_power: self.noise_power(),
            delta_max: self.delta_max(),
            coefficients: RewardCoefficients::new(
                self.reward_c1,
                self.reward_c2,
                self.reward_c3.unwrap_or(self.r_min),
            )?,
            t_max: self.t_max,
            fading: self.fading,
            second_order: self.scenario.second_order,
            passive: !self.scenario.active,
            numerator: self.numerator,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            kind: self.scenario.algorithm,
            ..self.agent.clone()
        }
    }

    pub fn environment(&self, seed: u64) -> Result<Environment> {
        Environment::new(self.topology()?, self.env_config()?, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seed list contains duplicates".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.custom_topology.is_none() && self.elements == 0 {
            return Err(Error::Config("elements must be positive".into()));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if !self.delta_max_db.is_finite() || !self.noise_dbm_hz.is_finite() {
            return Err(Error::Config("noise density and amplification bound must be finite".into()));
        }
        self.topology()?;
        self.env_config()?;
        self.agent_config().validate()
    }

    /// Reads a config file. `profile` selects the base; other keys override it.
    pub fn from_kv(kv: &KvFile, default_profile: Profile) -> Result<Self> {
        let profile = match kv.raw("profile") {
            Some(p) => Profile::parse(p)?,
            None => default_profile,
        };
        let mut cfg = ExperimentConfig::for_profile(profile);
        let agent_keys: Vec<String> = AgentConfig::default().to_pairs().into_iter().map(|(k, _)| k).collect();
        for key in kv.keys() {
            let known = EXPERIMENT_KEYS.contains(&key)
                || TOPOLOGY_KEYS.contains(&key)
                || agent_keys.iter().any(|k| k == key);
            if !known {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        macro_rules! set {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = kv.get($key)? { cfg.$field = v; })*
            };
        }
        set!(
            "n_ris" => n_ris,
            "elements" => elements,
            "n_users" => users,
            "n_bs" => n_bs,
            "p_max" => p_max,
            "r_min" => r_min,
            "noise_dbm_hz" => noise_dbm_hz,
            "bandwidth_hz" => bandwidth_hz,
            "delta_max_db" => delta_max_db,
            "episodes" => episodes,
            "t_max" => t_max,
            "reward_c1" => reward_c1,
            "reward_c2" => reward_c2,
        );
        if let Some(v) = kv.get("reward_c3")? {
            cfg.reward_c3 = Some(v);
        }
        if let Some(v) = kv.get_list("seeds")? {
            cfg.seeds = v;
        }
        if let Some(v) = kv.raw("scenario") {
            cfg.scenario = Scenario::parse(v)?;
        }
        if let Some(v) = kv.raw("fading") {
            cfg.fading = Fading::parse(v)?;
        }
        if let Some(v) = kv.raw("numerator") {
            cfg.numerator = NumeratorForm::parse(v)?;
        }
        cfg.agent.apply_kv(kv)?;
        if kv.contains("algorithm") {
            cfg.scenario.algorithm = cfg.agent.kind;
        }
        cfg.agent.kind = cfg.scenario.algorithm;
        let custom: Vec<(String, String)> = TOPOLOGY_KEYS
            .iter()
            .filter_map(|&k| kv.raw(k).map(|v| (k.to_string(), v.to_string())))
            .collect();
        if !custom.is_empty() {
            cfg.custom_topology = Some(custom);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_kv(&KvFile::parse(&text)?, default_profile)
    }

    /// Every setting as `key = value` pairs in a fixed order; the same keys
    /// are accepted by [`ExperimentConfig::from_kv`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[u64]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out: Vec<(String, String)> = vec![
            ("profile".into(), self.profile.tag().into()),
            ("scenario".into(), self.scenario.to_string()),
            ("n_ris".into(), self.n_ris.to_string()),
            ("elements".into(), self.elements.to_string()),
            ("n_users".into(), self.users.to_string()),
            ("n_bs".into(), self.n_bs.to_string()),
        ];
        if let Some(pairs) = &self.custom_topology {
            out.extend(pairs.iter().cloned());
        }
        out.extend([
            ("p_max".into(), format!("{:?}", self.p_max)),
            ("r_min".into(), format!("{:?}", self.r_min)),
            ("noise_dbm_hz".into(), format!("{:?}", self.noise_dbm_hz)),
            ("bandwidth_hz".into(), format!("{:?}", self.bandwidth_hz)),
            ("delta_max_db".into(), format!("{:?}", self.delta_max_db)),
            ("episodes".into(), self.episodes.to_string()),
            ("t_max".into(), self.t_max.to_string()),
            ("seeds".into(), list(&self.seeds)),
            ("fading".into(), self.fading.tag().into()),
            ("numerator".into(), self.numerator.tag().into()),
            ("reward_c1".into(), format!("{:?}", self.reward_c1)),
            ("reward_c2".into(), format!("{:?}", self.reward_c2)),
        ]);
        if let Some(c3) = self.reward_c3 {
            out.push(("reward_c3".into(), format!("{c3:?}")));
        }
        out.extend(self.agent_config().to_pairs());
        out
    }

    /// Settings the environment and agent actually use after applying the
    /// scenario flags.
    pub fn effective_pairs(&self) -> Vec<(String, String)> {
        let n_ris = match (&self.custom_topology, self.scenario.multi_ris) {
            (_, false) => 1,
            (Some(_), true) => self.topology().map(|t| t.n_ris()).unwrap_or(0),
            (None, true) => self.n_ris,
        };
        vec![
            ("algorithm".into(), self.scenario.algorithm.tag().into()),
            ("surfaces".into(), n_ris.to_string()),
            ("inter_surface_links".into(), self.scenario.second_order.to_string()),
            ("amplification_pinned".into(), (!self.scenario.active).to_string()),
            ("noise_power_w".into(), format!("{:?}", self.noise_power())),
            ("delta_max_linear".into(), format!("{:?}", self.delta_max())),
        ]
    }
}

const EXPERIMENT_KEYS: [&str; 19] = [
    "profile",
    "scenario",
    "n_ris",
    "elements",
    "n_users",
    "n_bs",
    "p_max",
    "r_min",
    "noise_dbm_hz",
    "bandwidth_hz",
    "delta_max_db",
    "episodes",
    "t_max",
    "seeds",
    "fading",
    "numerator",
    "reward_c1",
    "reward_c2",
    "reward_c3",
];

/// One training episode of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub episode: usize,
    pub reward: f64,
    pub total_rate: f64,
    pub min_rate: f64,
    pub feasible_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Reward,
    TotalRate,
    MinRate,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Reward => "reward",
            Metric::TotalRate => "total_rate",
            Metric::MinRate => "min_rate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(Metric::Reward),
            "total_rate" | "rate" => Ok(Metric::TotalRate),
            "min_rate" => Ok(Metric::MinRate),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }

    fn of(self, r: &EpisodeRecord) -> f64 {
        match self {
            Metric::Reward => r.reward,
            Metric::TotalRate => r.total_rate,
            Metric::MinRate => r.min_rate,
        }
    }
}

/// Fraction of final episodes used for tail statistics.
pub const TAIL_FRACTION: f64 = 0.1;

/// Number of episodes in the tail window: `ceil(0.1 * episodes)`, at least 1.
pub fn tail_len(episodes: usize) -> usize {
    ((episodes as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, episodes.max(1))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed, per-episode records plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub records: Vec<EpisodeRecord>,
    /// Echo of the generating configuration.
    pub config: Vec<(String, String)>,
}

impl MetricsLog {
    /// Seeds in order of first appearance.
    pub fn seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.seed) {
                out.push(r.seed);
            }
        }
        out
    }

    pub fn seed_records(&self, seed: u64) -> Vec<&EpisodeRecord> {
        self.records.iter().filter(|r| r.seed == seed).collect()
    }

    /// Episodes per seed, or an error when seeds differ.
    pub fn episodes(&self) -> Result<usize> {
        let seeds = self.seeds();
        let counts: Vec<usize> = seeds.iter().map(|&s| self.seed_records(s).len()).collect();
        match counts.first() {
            None => Ok(0),
            Some(&c) if counts.iter().all(|&x| x == c) => Ok(c),
            Some(_) => Err(Error::Mismatch("seeds have different episode counts".into())),
        }
    }

    /// Mean of the metric over each seed's final 10% of episodes.
    pub fn tail_by_seed(&self, metric: Metric) -> Result<Vec<(u64, f64)>> {
        let episodes = self.episodes()?;
        let tail = tail_len(episodes);
        Ok(self
            .seeds()
            .into_iter()
            .map(|s| {
                let mut recs = self.seed_records(s);
                recs.sort_by_key(|r| r.episode);
                let vals: Vec<f64> = recs[recs.len() - tail..].iter().map(|r| metric.of(r)).collect();
                (s, mean_std(&vals).0)
            })
            .collect())
    }

    /// Mean and standard deviation across seeds of the per-seed tail means.
    pub fn tail_stats(&self, metric: Metric) -> Result<(f64, f64)> {
        if self.records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let vals: Vec<f64> = self.tail_by_seed(metric)?.into_iter().map(|(_, v)| v).collect();
        Ok(mean_std(&vals))
    }

    /// Mean and standard deviation across seeds at every episode index.
    pub fn episode_stats(&self, metric: Metric) -> Result<Vec<(f64, f64)>> {
        let episodes = self.episodes()?;
        let seeds = self.seeds();
        Ok((0..episodes)
            .map(|e| {
                let vals: Vec<f64> = seeds
                    .iter()
                    .filter_map(|&s| self.records.iter().find(|r| r.seed == s && r.episode == e))
                    .map(|r| metric.of(r))
                    .collect();
                mean_std(&vals)
            })
            .collect())
    }

    fn summary(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seeds".to_string(), self.seeds().iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ("episodes".to_string(), self.episodes().map_or("mismatched".into(), |e| e.to_string())),
            ("tail_episodes".to_string(), self.episodes().map_or("0".into(), |e| tail_len(e).to_string())),
        ];
        for metric in [Metric::Reward, Metric::TotalRate, Metric::MinRate] {
            if let Ok((m, s)) = self.tail_stats(metric) {
                out.push((format!("tail_{}_mean", metric.tag()), format!("{m:?}")));
                out.push((format!("tail_{}_std", metric.tag()), format!("{s:?}")));
            }
        }
        out
    }

    /// Writes the CSV. Records come first under the header; when there are
    /// records, `# config` lines echo the configuration and `# stat` lines
    /// give tail statistics.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                r.seed, r.episode, r.reward, r.total_rate, r.min_rate, r.feasible_steps
            )?;
        }
        if !self.records.is_empty() {
            for (k, v) in &self.config {
                writeln!(out, "# config {k} = {v}")?;
            }
            for (k, v) in self.summary() {
                writeln!(out, "# stat {k} = {v}")?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line: line + 1, message };
        match lines.next() {
            Some((_, Ok(h))) if h.trim_end() == CSV_HEADER => {}
            Some((i, Ok(h))) => return Err(parse_err(i, format!("expected header, found `{h}`"))),
            Some((i, Err(e))) => return Err(parse_err(i, e.to_string())),
            None => return Err(parse_err(0, "empty file".into())),
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i, e.to_string()))?;
            let line = line.trim_end();
            if line.is_empty() || line.starts_with("# stat ") {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# config ") {
                let (k, v) = rest
                    .split_once(" = ")
                    .ok_or_else(|| parse_err(i, format!("bad config line `{line}`")))?;
                log.config.push((k.to_string(), v.to_string()));
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(parse_err(i, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| parse_err(i, format!("bad number `{}`", f[j])))
            };
            let int = |j: usize| -> Result<u64> {
                f[j].parse().map_err(|_| parse_err(i, format!("bad integer `{}`", f[j])))
            };
            log.records.push(EpisodeRecord {
                seed: int(0)?,
                episode: int(1)? as usize,
                reward: num(2)?,
                total_rate: num(3)?,
                min_rate: num(4)?,
                feasible_steps: int(5)? as usize,
            });
        }
        Ok(log)
    }
}

pub const CSV_HEADER: &str = "seed,episode,reward,total_rate,min_rate,feasible_steps";

pub fn export(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn import(path: &Path) -> Result<MetricsLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    MetricsLog::read_csv(BufReader::new(file))
}

fn record(seed: u64, s: &EpisodeStats) -> EpisodeRecord {
    EpisodeRecord {
        seed,
        episode: s.episode,
        reward: s.reward,
        total_rate: s.total_rate,
        min_rate: s.min_rate,
        feasible_steps: s.feasible_steps,
    }
}

/// Trains one agent on one seed and returns its episode statistics.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<EpisodeStats>> {
    run_seed_with(config, seed, &|_, _| {})
}

fn run_seed_with(
    config: &ExperimentConfig,
    seed: u64,
    on_episode: &(dyn Fn(u64, &EpisodeStats) + Sync),
) -> Result<Vec<EpisodeStats>> {
    let mut env = config.environment(seed)?;
    let outcome = train(
        &mut env,
        &config.agent_config(),
        TrainOptions {
            episodes: config.episodes,
            record_trajectory: false,
        },
        seed,
        |s| on_episode(seed, s),
    )?;
    Ok(outcome.episodes)
}

/// Trains one agent per seed (seeds run on the rayon pool) and merges the
/// curves in seed-list order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    run_experiment_with(config, |_, _| {})
}

/// As [`run_experiment`], reporting every finished episode as `(seed, stats)`.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    on_episode: impl Fn(u64, &EpisodeStats) + Sync,
) -> Result<MetricsLog> {
    config.validate()?;
    let runs: Vec<Vec<EpisodeStats>> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed_with(config, seed, &on_episode))
        .collect::<Result<_>>()?;
    let records = config
        .seeds
        .iter()
        .zip(&runs)
        .flat_map(|(&seed, stats)| stats.iter().map(move |s| record(seed, s)))
        .collect();
    let mut echo = config.to_pairs();
    echo.extend(config.effective_pairs().into_iter().map(|(k, v)| (format!("effective.{k}"), v)));
    Ok(MetricsLog { records, config: echo })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `(mean_a - mean_b) / mean_b` over tail windows.
    pub relative_gain: f64,
    /// Per seed `tail_a - tail_b`.
    pub paired: Vec<(u64, f64)>,
    pub positive: usize,
    pub negative: usize,
}

/// Tail-window comparison of two logs trained on identical seed lists.
pub fn compare(a: &MetricsLog, b: &MetricsLog, metric: Metric) -> Result<Comparison> {
    if a.seeds() != b.seeds() {
        return Err(Error::Mismatch(format!(
            "seed lists differ: {:?} vs {:?}",
            a.seeds(),
            b.seeds()
        )));
    }
    if a.episodes()? != b.episodes()? {
        return Err(Error::Mismatch("episode counts differ".into()));
    }
    let ta = a.tail_by_seed(metric)?;
    let tb = b.tail_by_seed(metric)?;
    if ta.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mean = |v: &[(u64, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let (mean_a, mean_b) = (mean(&ta), mean(&tb));
    let paired: Vec<(u64, f64)> = ta.iter().zip(&tb).map(|(x, y)| (x.0, x.1 - y.1)).collect();
    Ok(Comparison {
        metric,
        mean_a,
        mean_b,
        relative_gain: (mean_a - mean_b) / mean_b,
        positive: paired.iter().filter(|p| p.1 > 0.0).count(),
        negative: paired.iter().filter(|p| p.1 < 0.0).count(),
        paired,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariable {
    PMax,
    Elements,
    Users,
}

impl SweepVariable {
    pub fn tag(self) -> &'static str {
        match self {
            SweepVariable::PMax => "p_max",
            SweepVariable::Elements => "elements",
            SweepVariable::Users => "users",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p_max" | "pmax" => Ok(SweepVariable::PMax),
            "elements" => Ok(SweepVariable::Elements),
            "users" => Ok(SweepVariable::Users),
            other => Err(Error::Config(format!("unknown sweep variable `{other}`"))),
        }
    }

    /// Copy of `config` with this variable set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {value}", self.tag())))
            }
        };
        match self {
            SweepVariable::PMax => c.p_max = value,
            SweepVariable::Elements | SweepVariable::Users if config.custom_topology.is_some() => {
                return Err(Error::Config(format!(
                    "cannot sweep {} over an explicit topology",
                    self.tag()
                )))
            }
            SweepVariable::Elements => c.elements = count()?,
            SweepVariable::Users => c.users = count()?,
        }
        Ok(c)
    }
}

/// One experiment per value, everything else (seeds included) held fixed.
pub fn sweep(config: &ExperimentConfig, variable: SweepVariable, values: &[f64]) -> Result<Vec<(f64, MetricsLog)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if values.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("sweep values must be strictly increasing".into()));
    }
    let configs = values
        .iter()
        .map(|&v| variable.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&configs)
        .map(|(&v, c)| Ok((v, run_experiment(c)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub actor: Vec<usize>,
    pub critic: Vec<usize>,
    pub meta_critic: Vec<usize>,
    pub activation_cost: f64,
    pub actor_flops: f64,
    pub critic_flops: f64,
    pub meta_critic_flops: f64,
    /// `actor + critic`.
    pub ddpg_flops: f64,
    /// `actor + critic + meta_critic / 2`.
    pub meta_ddpg_flops: f64,
    /// `(meta_critic / 2) / (actor + critic)`.
    pub overhead: f64,
    pub ddpg_connections: u64,
    /// Doubled to stay integral: `2 * (actor + critic) + meta_critic`.
    pub meta_ddpg_connections_x2: u64,
}

pub fn complexity_report(actor: &[usize], critic: &[usize], meta_critic: &[usize], activation_cost: f64) -> ComplexityReport {
    let a = flops_count(actor, activation_cost);
    let c = flops_count(critic, activation_cost);
    let m = flops_count(meta_critic, activation_cost);
    let ddpg = a + c;
    let conn = connection_count(actor) + connection_count(critic);
    ComplexityReport {
        actor: actor.to_vec(),
        critic: critic.to_vec(),
        meta_critic: meta_critic.to_vec(),
        activation_cost,
        actor_flops: a,
        critic_flops: c,
        meta_critic_flops: m,
        ddpg_flops: ddpg,
        meta_ddpg_flops: ddpg + 0.5 * m,
        overhead: if ddpg > 0.0 { 0.5 * m / ddpg } else { 0.0 },
        ddpg_connections: conn,
        meta_ddpg_connections_x2: 2 * conn + connection_count(meta_critic),
    }
}

impl ExperimentConfig {
    /// Actor, critic and meta-critic layer sizes of this experiment. The
    /// meta-critic maps the action to a scalar.
    pub fn architectures(&self) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let topo = self.topology()?;
        let s = crate::mdp::state_dim(&topo);
        let a = crate::mdp::ActionLayout::new(&topo).dim();
        let hidden = &self.agent.hidden;
        let actor = std::iter::once(s).chain(hidden.iter().copied()).chain([a]).collect();
        let critic = std::iter::once(s + a).chain(hidden.iter().copied()).chain([1]).collect();
        let meta = match self.scenario.algorithm {
            AgentKind::MetaDdpg => vec![a, 1],
            AgentKind::Ddpg => Vec::new(),
        };
        Ok((actor, critic, meta))
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "actor        {:?}  flops {}", self.actor, self.actor_flops)?;
        writeln!(f, "critic       {:?}  flops {}", self.critic, self.critic_flops)?;
        writeln!(f, "meta-critic  {:?}  flops {}", self.meta_critic, self.meta_critic_flops)?;
        writeln!(f, "ddpg total       {}", self.ddpg_flops)?;
        writeln!(f, "meta-ddpg total  {}", self.meta_ddpg_flops)?;
        write!(f, "meta overhead    {:.4}%", 100.0 * self.overhead)
    }
}
