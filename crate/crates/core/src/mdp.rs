//! State, action and reward mapping of the sum-rate problem, and the episodic
//! environment built on top of it.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{sample_channels_from, ChannelSet, Topology};
use crate::error::{Error, Result};
use crate::physics::{
    check_constraints, rate_report, Constraint, ConstraintReport, FeasibleAction, NumeratorForm,
    RateReport, StarRisProfile, SurfaceProfile,
};

/// Flattened observation: previous shaped reward followed by the
/// normalized real and imaginary parts of every channel entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn state_dim(topo: &Topology) -> usize {
    let ris_bs: usize = topo.elements.iter().map(|m| m * topo.n_bs).sum();
    let user: usize = topo.user_ris.iter().map(|&n| topo.elements[n]).sum();
    let inter: usize = topo
        .ris_pairs()
        .iter()
        .map(|&(a, b)| topo.elements[a] * topo.elements[b])
        .sum();
    1 + 2 * (ris_bs + user + inter)
}

/// Layout: `[prev_reward, F_0.., F_{N-1}, f_0.., f_{K-1}, G_(0,1), G_(0,2), ..]`.
/// Matrices are row-major; each entry contributes `re, im` divided by the
/// amplitude scale of its link.
pub fn encode_state(prev_reward: f64, channels: &ChannelSet) -> StateVector {
    let mut out = vec![prev_reward];
    let mut push = |z: &Complex64, scale: f64| {
        let s = if scale > 0.0 { scale } else { 1.0 };
        out.push(z.re / s);
        out.push(z.im / s);
    };
    for (f, &s) in channels.ris_bs.iter().zip(&channels.ris_bs_scale) {
        f.iter().for_each(|z| push(z, s));
    }
    for (f, &s) in channels.user_ris.iter().zip(&channels.user_ris_scale) {
        f.iter().for_each(|z| push(z, s));
    }
    for ((_, g), &s) in channels.ris_ris.iter().zip(&channels.ris_ris_scale) {
        g.iter().for_each(|z| push(z, s));
    }
    StateVector(out)
}

/// Block offsets of the actor's raw output.
///
/// Order: association logits (`K x N`, row-major), power logits (`K`),
/// beamformer components (`K x 2 N_BS` as `re, im` pairs), then per surface
/// five blocks of `M_n` logits: `theta_r, theta_t, alpha_r, delta_r, delta_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionLayout {
    pub users: usize,
    pub ris: usize,
    pub n_bs: usize,
    pub elements: Vec<usize>,
}

impl ActionLayout {
    pub fn new(topo: &Topology) -> Self {
        ActionLayout {
            users: topo.n_users(),
            ris: topo.n_ris(),
            n_bs: topo.n_bs,
            elements: topo.elements.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.surface_offset() + 5 * self.elements.iter().sum::<usize>()
    }

    fn power_offset(&self) -> usize {
        self.users * self.ris
    }

    fn beam_offset(&self) -> usize {
        self.power_offset() + self.users
    }

    fn surface_offset(&self) -> usize {
        self.beam_offset() + self.users * 2 * self.n_bs
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps an unconstrained vector onto the feasible set of the projected
/// constraints (everything except the QoS and binary-association ones).
pub fn project_action(layout: &ActionLayout, raw: &[f64], p_max: f64, delta_max: f64) -> Result<FeasibleAction> {
    if raw.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "raw action has {} entries, layout needs {}",
            raw.len(),
            layout.dim()
        )));
    }
    let (k_users, n_ris) = (layout.users, layout.ris);

    let mut beta = Array2::zeros((k_users, n_ris));
    for k in 0..k_users {
        let logits = &raw[k * n_ris..(k + 1) * n_ris];
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (n, e) in exps.iter().enumerate() {
            beta[[k, n]] = e / z;
        }
    }

    let po = layout.power_offset();
    let squashed: Vec<f64> = raw[po..po + k_users].iter().map(|&u| sigmoid(u)).collect();
    let denom = squashed.iter().sum::<f64>().max(1.0);
    let power = squashed.iter().map(|s| p_max * s / denom).collect();

    let bo = layout.beam_offset();
    let beamformers = (0..k_users)
        .map(|k| {
            let comps = &raw[bo + k * 2 * layout.n_bs..bo + (k + 1) * 2 * layout.n_bs];
            let w: Array1<Complex64> = comps
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                w.mapv(|c| c / norm)
            } else {
                let mut e = Array1::from_elem(layout.n_bs, Complex64::new(0.0, 0.0));
                e[0] = Complex64::new(1.0, 0.0);
                e
            }
        })
        .collect();

    let phase = |x: f64| {
        let t = TAU * sigmoid(x);
        if t >= TAU {
            0.0
        } else {
            t
        }
    };
    let mut offset = layout.surface_offset();
    let mut surfaces = Vec::with_capacity(n_ris);
    for &m in &layout.elements {
        let block = |i: usize| &raw[offset + i * m..offset + (i + 1) * m];
        let alpha_r: Vec<f64> = block(2).iter().map(|&x| sigmoid(x)).collect();
        surfaces.push(SurfaceProfile {
            alpha_t: alpha_r.iter().map(|a| 1.0 - a).collect(),
            alpha_r,
            theta_r: block(0).iter().map(|&x| phase(x)).collect(),
            theta_t: block(1).iter().map(|&x| phase(x)).collect(),
            delta_r: block(3).iter().map(|&x| delta_max * sigmoid(x)).collect(),
            delta_t: block(4).iter().map(|&x| delta_max * sigmoid(x)).collect(),
        });
        offset += 5 * m;
    }

    Ok(FeasibleAction {
        beta,
        power,
        beamformers,
        profile: StarRisProfile { surfaces },
    })
}

/// Per-user QoS penalty: `0` above `r_min`, `-rate` below it, `-c3` at zero rate.
pub fn penalty(rate: f64, r_min: f64, c3: f64) -> f64 {
    if rate >= r_min {
        0.0
    } else if rate.abs() <= 1e-12 {
        -c3
    } else {
        -rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl RewardCoefficients {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        for (name, v) in [("c1", c1), ("c2", c2), ("c3", c3)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("reward coefficient {name} must be positive, got {v}")));
            }
        }
        Ok(RewardCoefficients { c1, c2, c3 })
    }

    /// `c1 = c2 = 1`, `c3 = r_min`.
    pub fn for_min_rate(r_min: f64) -> Result<Self> {
        RewardCoefficients::new(1.0, 1.0, r_min)
    }
}

/// `c1 * sum rate + c2 * sum of penalties`.
pub fn shaped_reward(report: &RateReport, coeffs: &RewardCoefficients, r_min: f64) -> f64 {
    let penalties: f64 = report.rates.iter().map(|&r| penalty(r, r_min, coeffs.c3)).sum();
    coeffs.c1 * report.total + coeffs.c2 * penalties
}

pub fn immediate_reward(shaped: f64, constraints_ok: bool) -> f64 {
    if constraints_ok {
        shaped
    } else {
        0.0
    }
}

/// Replay record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fading {
    /// Fresh realization every step.
    #[default]
    PerStep,
    /// One realization per episode.
    PerEpisode,
}

impl Fading {
    pub fn tag(self) -> &'static str {
        match self {
            Fading::PerStep => "step",
            Fading::PerEpisode => "episode",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Fading::PerStep),
            "episode" => Ok(Fading::PerEpisode),
            other => Err(Error::Config(format!("unknown fading mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub p_max: f64,
    pub r_min: f64,
    pub noise_power: f64,
    /// Linear power-domain amplification bound.
    pub delta_max: f64,
    pub coefficients: RewardCoefficients,
    pub t_max: usize,
    pub fading: Fading,
    pub second_order: bool,
    /// Pin every amplification factor to exactly 1.
    pub passive: bool,
    pub numerator: NumeratorForm,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.0) {
            return Err(Error::Config("p_max must be positive".into()));
        }
        if !(self.r_min >= 0.0) {
            return Err(Error::Config("r_min must be non-negative".into()));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config("noise power must be positive".into()));
        }
        if !(self.delta_max >= 0.0) || (self.passive && self.delta_max < 1.0) {
            return Err(Error::Config(format!("invalid amplification bound {}", self.delta_max)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        RewardCoefficients::new(self.coefficients.c1, self.coefficients.c2, self.coefficients.c3)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub transition: Transition,
    pub action: FeasibleAction,
    pub report: RateReport,
    pub constraints: ConstraintReport,
    pub shaped: f64,
}

/// One episodic environment instance with its own random stream.
#[derive(Debug, Clone)]
pub struct Environment {
    topo: Topology,
    cfg: EnvConfig,
    layout: ActionLayout,
    rng: ChaCha8Rng,
    previous: ChannelSet,
    current: ChannelSet,
    prev_reward: f64,
    step: usize,
}

impl Environment {
    pub fn new(topo: Topology, cfg: EnvConfig, seed: u64) -> Result<Self> {
        topo.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let previous = sample_channels_from(&topo, &mut rng)?;
        let current = previous.clone();
        let mut env = Environment {
            layout: ActionLayout::new(&topo),
            topo,
            cfg,
            rng,
            previous,
            current,
            prev_reward: 0.0,
            step: 0,
        };
        env.reset()?;
        Ok(env)
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ActionLayout {
        &self.layout
    }

    pub fn state_dim(&self) -> usize {
        state_dim(&self.topo)
    }

    pub fn action_dim(&self) -> usize {
        self.layout.dim()
    }

    /// Channels the next action will be evaluated on.
    pub fn current_channels(&self) -> &ChannelSet {
        &self.current
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn draw(&mut self) -> Result<ChannelSet> {
        let ch = sample_channels_from(&self.topo, &mut self.rng)?;
        Ok(if self.cfg.second_order {
            ch
        } else {
            ch.without_inter_ris()
        })
    }

    /// Starts a new episode and returns its initial state.
    pub fn reset(&mut self) -> Result<StateVector> {
        self.previous = self.draw()?;
        self.current = match self.cfg.fading {
            Fading::PerStep => self.draw()?,
            Fading::PerEpisode => self.previous.clone(),
        };
        self.prev_reward = 0.0;
        self.step = 0;
        Ok(encode_state(0.0, &self.previous))
    }

    pub fn state(&self) -> StateVector {
        encode_state(self.prev_reward, &self.previous)
    }

    /// Projects the raw action with this environment's scenario knobs.
    pub fn project(&self, raw: &[f64]) -> Result<FeasibleAction> {
        let mut action = project_action(&self.layout, raw, self.cfg.p_max, self.cfg.delta_max)?;
        if self.cfg.passive {
            for s in &mut action.profile.surfaces {
                s.delta_r.iter_mut().for_each(|d| *d = 1.0);
                s.delta_t.iter_mut().for_each(|d| *d = 1.0);
            }
        }
        Ok(action)
    }

    /// Evaluates an already projected action on a channel set.
    pub fn evaluate(&self, action: &FeasibleAction, channels: &ChannelSet) -> Result<(RateReport, ConstraintReport, f64)> {
        let report = rate_report(
            &self.topo,
            channels,
            action,
            self.cfg.noise_power,
            self.cfg.r_min,
            self.cfg.numerator,
        )?;
        let constraints = check_constraints(action, &report, self.cfg.p_max, self.cfg.r_min, self.cfg.delta_max);
        let shaped = shaped_reward(&report, &self.cfg.coefficients, self.cfg.r_min);
        Ok((report, constraints, shaped))
    }

    /// Applies `raw` to the current channels and advances one step.
    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        let state = self.state();
        let action = self.project(raw)?;
        let (report, constraints, shaped) = self.evaluate(&action, &self.current)?;
        // The binary-association constraint is relaxed during training.
        let reward = immediate_reward(shaped, constraints.passes(&Constraint::PROJECTED));
        self.step += 1;
        self.prev_reward = shaped;
        let next = match self.cfg.fading {
            Fading::PerStep => self.draw()?,
            Fading::PerEpisode => self.current.clone(),
        };
        self.previous = std::mem::replace(&mut self.current, next);
        let next_state = self.state();
        Ok(StepOutcome {
            transition: Transition {
                state: state.0,
                action: raw.to_vec(),
                reward,
                next_state: next_state.0,
                terminal: self.step >= self.cfg.t_max,
            },
            action,
            report,
            constraints,
            shaped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_channels;

    fn desk_topo() -> Topology {
        Topology::generated(2, 4, 4, 2).unwrap()
    }

    fn env_cfg() -> EnvConfig {
        EnvConfig {
            p_max: 20.0,
            r_min: 1.0,
            noise_power: 10f64.powf(-13.4),
            delta_max: 10f64.powf(2.5),
            coefficients: RewardCoefficients::for_min_rate(1.0).unwrap(),
            t_max: 5,
            fading: Fading::PerStep,
            second_order: true,
            passive: false,
            numerator: NumeratorForm::ServingLink,
        }
    }

    #[test]
    fn state_dimension_formula() {
        let topo = desk_topo();
        assert_eq!(state_dim(&topo), 97);
        let ch = sample_channels(&topo, 1).unwrap();
        let s = encode_state(0.5, &ch);
        assert_eq!(s.len(), 97);
        assert_eq!(s.0[0], 0.5);
        assert_eq!(s, encode_state(0.5, &ch));
        assert!(s.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_channels_encode_to_zero() {
        let topo = desk_topo();
        let mut ch = sample_channels(&topo, 1).unwrap();
        ch.ris_bs.iter_mut().for_each(|m| m.fill(Complex64::new(0.0, 0.0)));
        ch.user_ris.iter_mut().for_each(|m| m.fill(Complex64::new(0.0, 0.0)));
        let ch = ch.without_inter_ris();
        assert!(encode_state(0.0, &ch).0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_state_undoes_path_loss() {
        let topo = desk_topo();
        let ch = sample_channels(&topo, 4).unwrap();
        let s = encode_state(0.0, &ch);
        let f00 = ch.ris_bs[0][[0, 0]];
        assert!((s.0[1] - f00.re / ch.ris_bs_scale[0]).abs() < 1e-15);
        assert!((s.0[2] - f00.im / ch.ris_bs_scale[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_raw_action_projection() {
        let topo = desk_topo();
        let layout = ActionLayout::new(&topo);
        assert_eq!(layout.dim(), 4 * 2 + 4 + 4 * 4 + 5 * 8);
        let delta_max = 316.0;
        let a = project_action(&layout, &vec![0.0; layout.dim()], 20.0, delta_max).unwrap();
        assert!(a.beta.iter().all(|&b| (b - 0.5).abs() < 1e-15));
        let expected_p = 20.0 * 0.5 / f64::max(4.0 * 0.5, 1.0);
        assert!(a.power.iter().all(|&p| (p - expected_p).abs() < 1e-12));
        for s in &a.profile.surfaces {
            assert!(s.alpha_r.iter().all(|&x| x == 0.5));
            assert!(s.theta_r.iter().chain(&s.theta_t).all(|&x| (x - std::f64::consts::PI).abs() < 1e-15));
            assert!(s.delta_r.iter().chain(&s.delta_t).all(|&x| x == delta_max / 2.0));
        }
        // Zero beamformer components fall back to the first basis vector.
        assert!(a.beamformers.iter().all(|w| w[0] == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn single_user_power_uses_unit_floor() {
        let topo = Topology::generated(1, 1, 1, 1).unwrap();
        let layout = ActionLayout::new(&topo);
        let a = project_action(&layout, &vec![0.0; layout.dim()], 10.0, 1.0).unwrap();
        assert!((a.power[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn projection_rejects_wrong_dimension() {
        let layout = ActionLayout::new(&desk_topo());
        assert!(matches!(project_action(&layout, &[0.0; 3], 1.0, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn extreme_logits_stay_feasible() {
        let topo = desk_topo();
        let layout = ActionLayout::new(&topo);
        for v in [1e6, -1e6, 800.0, -800.0, 40.0] {
            let a = project_action(&layout, &vec![v; layout.dim()], 20.0, 316.0).unwrap();
            let report = rate_report(
                &topo,
                &sample_channels(&topo, 0).unwrap(),
                &a,
                1e-12,
                1.0,
                NumeratorForm::ServingLink,
            )
            .unwrap();
            let cr = check_constraints(&a, &report, 20.0, 1.0, 316.0);
            assert!(cr.passes(&Constraint::PROJECTED), "{v}: {:?}", cr.failed());
        }
    }

    #[test]
    fn penalty_branches() {
        assert_eq!(penalty(1.0, 1.0, 5.0), 0.0);
        assert_eq!(penalty(0.0, 1.0, 2.0), -2.0);
        assert_eq!(penalty(0.4, 1.0, 2.0), -0.4);
        assert_eq!(penalty(1e-13, 1.0, 2.0), -2.0);
    }

    fn report_with(rates: &[f64]) -> RateReport {
        RateReport {
            sinr: rates.iter().map(|r| 2f64.powf(*r) - 1.0).collect(),
            rates: rates.to_vec(),
            total: rates.iter().sum(),
            qos_slack: rates.iter().map(|r| r - 1.0).collect(),
            order: (0..rates.len()).collect(),
        }
    }

    #[test]
    fn shaped_reward_examples() {
        let ones = RewardCoefficients::new(1.0, 1.0, 1.0).unwrap();
        let c = RewardCoefficients::new(2.0, 3.0, 0.7).unwrap();
        assert_eq!(shaped_reward(&report_with(&[1.5, 2.0]), &c, 1.0), 2.0 * 3.5);
        assert!((shaped_reward(&report_with(&[0.0; 4]), &c, 1.0) - (-3.0 * 4.0 * 0.7)).abs() < 1e-15);
        assert_eq!(shaped_reward(&report_with(&[2.0, 0.5]), &ones, 1.0), 2.0);
        assert!(RewardCoefficients::new(0.0, 1.0, 1.0).is_err());
        assert!(RewardCoefficients::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn immediate_reward_gate() {
        assert_eq!(immediate_reward(3.5, true), 3.5);
        assert_eq!(immediate_reward(3.5, false), 0.0);
    }

    #[test]
    fn step_contract() {
        let topo = desk_topo();
        let mut env = Environment::new(topo.clone(), env_cfg(), 11).unwrap();
        let raw = vec![0.1; env.action_dim()];
        for t in 1..=5 {
            let channels = env.current_channels().clone();
            let out = env.step(&raw).unwrap();
            assert_eq!(out.transition.terminal, t == 5);
            assert_eq!(out.transition.state.len(), 97);
            assert_eq!(out.transition.next_state[0], out.shaped);
            // Recompute from the same channels and action.
            let action = project_action(&ActionLayout::new(&topo), &raw, 20.0, 10f64.powf(2.5)).unwrap();
            let report = rate_report(&topo, &channels, &action, 10f64.powf(-13.4), 1.0, NumeratorForm::ServingLink).unwrap();
            let shaped = shaped_reward(&report, &RewardCoefficients::for_min_rate(1.0).unwrap(), 1.0);
            assert_eq!(out.transition.reward, shaped);
            assert_eq!(out.transition.next_state, encode_state(shaped, &channels).0);
        }
    }

    #[test]
    fn seeded_environment_is_reproducible() {
        let run = || {
            let mut env = Environment::new(desk_topo(), env_cfg(), 3).unwrap();
            let raw = vec![0.3; env.action_dim()];
            (0..4).map(|_| env.step(&raw).unwrap().transition).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scenario_knobs() {
        let mut cfg = env_cfg();
        cfg.passive = true;
        cfg.second_order = false;
        let mut env = Environment::new(desk_topo(), cfg, 2).unwrap();
        assert!(env.current_channels().ris_ris.iter().all(|(_, g)| g.iter().all(|z| z.norm() == 0.0)));
        let out = env.step(&vec![2.0; env.action_dim()]).unwrap();
        for s in &out.action.profile.surfaces {
            assert!(s.delta_r.iter().chain(&s.delta_t).all(|&d| d == 1.0));
        }

        let mut cfg = env_cfg();
        cfg.fading = Fading::PerEpisode;
        let mut env = Environment::new(desk_topo(), cfg, 2).unwrap();
        let before = env.current_channels().clone();
        env.step(&vec![0.0; env.action_dim()]).unwrap();
        assert_eq!(env.current_channels(), &before);
    }
}
