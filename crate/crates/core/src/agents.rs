//! DDPG and Meta-DDPG agents.
//!
//! Both agents share replay, critic update, the DDPG actor step and soft
//! target tracking. The meta agent follows each actor step with a second
//! step along the gradient of a softplus regularizer on the actor outputs,
//! weighted by the learned scalar `psi`, and then moves `psi` to reduce
//! `tanh(J(new) - J(old))`.

use std::io::{BufRead, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::mdp::{Environment, Transition};
use crate::physics::Constraint;
use crate::neural::{
    expect_field, next_line, parse_num, read_net, write_net, Activation, Adam, DenseNet, ForwardCache,
    Gradients, Optimizer,
};

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<f64>,
    len: usize,
    head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminal transitions.
    pub terminals: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[Transition]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let (sd, ad) = (first.state.len(), first.action.len());
        let rows = |f: &dyn Fn(&Transition) -> &[f64], d: usize| -> Result<Array2<f64>> {
            let flat: Vec<f64> = items.iter().flat_map(|t| f(t).iter().copied()).collect();
            Array2::from_shape_vec((items.len(), d), flat)
                .map_err(|_| Error::Dimension("transitions differ in width".into()))
        };
        Ok(Batch {
            states: rows(&|t| &t.state, sd)?,
            actions: rows(&|t| &t.action, ad)?,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: rows(&|t| &t.next_state, sd)?,
            terminals: items.iter().map(|t| if t.terminal { 1.0 } else { 0.0 }).collect(),
        })
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            states: vec![0.0; capacity * state_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_states: vec![0.0; capacity * state_dim],
            terminals: vec![0.0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores a transition, overwriting the oldest once full.
    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.state.len() != self.state_dim
            || t.next_state.len() != self.state_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::Dimension("transition does not match buffer widths".into()));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let i = self.head;
        let (sd, ad) = (self.state_dim, self.action_dim);
        self.states[i * sd..(i + 1) * sd].copy_from_slice(&t.state);
        self.next_states[i * sd..(i + 1) * sd].copy_from_slice(&t.next_state);
        self.actions[i * ad..(i + 1) * ad].copy_from_slice(&t.action);
        self.rewards[i] = t.reward;
        self.terminals[i] = if t.terminal { 1.0 } else { 0.0 };
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Uniform indices with replacement over the stored transitions.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.len < batch_size {
            return Err(Error::Usage(format!(
                "buffer holds {} transitions, batch needs {batch_size}",
                self.len
            )));
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let b = indices.len();
        let pick = |src: &[f64], d: usize| {
            let mut out = Array2::zeros((b, d));
            for (row, &i) in indices.iter().enumerate() {
                out.row_mut(row)
                    .as_slice_mut()
                    .expect("contiguous")
                    .copy_from_slice(&src[i * d..(i + 1) * d]);
            }
            out
        };
        Batch {
            states: pick(&self.states, sd),
            actions: pick(&self.actions, ad),
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_states: pick(&self.next_states, sd),
            terminals: indices.iter().map(|&i| self.terminals[i]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        Ok(self.gather(&self.sample_indices(batch_size, rng)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Ddpg,
    MetaDdpg,
}

impl AgentKind {
    pub fn tag(self) -> &'static str {
        match self {
            AgentKind::Ddpg => "ddpg",
            AgentKind::MetaDdpg => "meta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpg" => Ok(AgentKind::Ddpg),
            "meta" | "meta-ddpg" | "meta_ddpg" => Ok(AgentKind::MetaDdpg),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How the softplus regularizer aggregates over action components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn tag(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("unknown regularizer reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }

    fn build(self, net: &DenseNet, lr: f64) -> Optimizer {
        match self {
            OptimizerKind::Adam => Optimizer::adam(net, lr),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_meta: f64,
    pub discount: f64,
    pub tau: f64,
    pub update_period: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    pub noise_decay: f64,
    pub psi0: f64,
    pub meta_fd_step: f64,
    /// Raw actions are `action_scale * tanh(.)` of the actor output layer.
    pub action_scale: f64,
    pub regularizer: Reduction,
    pub optimizer: OptimizerKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: AgentKind::MetaDdpg,
            hidden: vec![256, 256],
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            lr_meta: 1e-3,
            discount: 0.99,
            tau: 0.005,
            update_period: 1,
            batch_size: 100,
            buffer_capacity: 10_000,
            noise_start: 0.2,
            noise_end: 0.01,
            noise_decay: 0.995,
            psi0: 0.5,
            meta_fd_step: 1e-3,
            action_scale: 5.0,
            regularizer: Reduction::Mean,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.update_period == 0 || self.batch_size == 0 {
            return bad("update period and batch size must be positive".into());
        }
        if self.buffer_capacity < self.batch_size {
            return bad(format!(
                "buffer capacity {} smaller than batch size {}",
                self.buffer_capacity, self.batch_size
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_meta", self.lr_meta),
            ("noise_start", self.noise_start),
            ("noise_end", self.noise_end),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad(format!("noise_decay must lie in (0, 1], got {}", self.noise_decay));
        }
        if !(0.0..=1.0).contains(&self.psi0) {
            return bad(format!("psi0 must lie in [0, 1], got {}", self.psi0));
        }
        if !(self.action_scale > 0.0) || !self.action_scale.is_finite() {
            return bad(format!("action_scale must be positive, got {}", self.action_scale));
        }
        if !(self.meta_fd_step > 0.0) {
            return bad("meta_fd_step must be positive".into());
        }
        Ok(())
    }

    /// Overrides fields present in a `key = value` file.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(v) = kv.raw("algorithm") {
            self.kind = AgentKind::parse(v)?;
        }
        if let Some(v) = kv.get_list("hidden")? {
            self.hidden = v;
        }
        macro_rules! set {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = kv.get($key)? { self.$field = v; })*
            };
        }
        set!(
            "lr_actor" => lr_actor,
            "lr_critic" => lr_critic,
            "lr_meta" => lr_meta,
            "discount" => discount,
            "tau" => tau,
            "update_period" => update_period,
            "batch_size" => batch_size,
            "buffer_capacity" => buffer_capacity,
            "noise_start" => noise_start,
            "noise_end" => noise_end,
            "noise_decay" => noise_decay,
            "psi0" => psi0,
            "meta_fd_step" => meta_fd_step,
            "action_scale" => action_scale,
        );
        if let Some(v) = kv.raw("regularizer") {
            self.regularizer = Reduction::parse(v)?;
        }
        if let Some(v) = kv.raw("optimizer") {
            self.optimizer = OptimizerKind::parse(v)?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let hidden = self
            .hidden
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("algorithm".into(), self.kind.tag().into()),
            ("hidden".into(), hidden),
            ("lr_actor".into(), format!("{:?}", self.lr_actor)),
            ("lr_critic".into(), format!("{:?}", self.lr_critic)),
            ("lr_meta".into(), format!("{:?}", self.lr_meta)),
            ("discount".into(), format!("{:?}", self.discount)),
            ("tau".into(), format!("{:?}", self.tau)),
            ("update_period".into(), self.update_period.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("buffer_capacity".into(), self.buffer_capacity.to_string()),
            ("noise_start".into(), format!("{:?}", self.noise_start)),
            ("noise_end".into(), format!("{:?}", self.noise_end)),
            ("noise_decay".into(), format!("{:?}", self.noise_decay)),
            ("psi0".into(), format!("{:?}", self.psi0)),
            ("meta_fd_step".into(), format!("{:?}", self.meta_fd_step)),
            ("action_scale".into(), format!("{:?}", self.action_scale)),
            ("regularizer".into(), self.regularizer.tag().into()),
            ("optimizer".into(), self.optimizer.tag().into()),
        ]
    }
}

/// Meta knowledge and its learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaState {
    pub psi: f64,
    pub lr: f64,
}

impl MetaState {
    pub fn new(psi: f64, lr: f64) -> Self {
        MetaState {
            psi: psi.clamp(0.0, 1.0),
            lr,
        }
    }
}

/// Actor, critic, their targets and optimizers.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub target_actor: DenseNet,
    pub target_critic: DenseNet,
    pub actor_opt: Optimizer,
    pub critic_opt: Optimizer,
    pub noise_scale: f64,
    pub config: AgentConfig,
}

/// Result of the DDPG actor step.
#[derive(Debug, Clone)]
pub struct ActorStep {
    /// `J` at the parameters before the step.
    pub j: f64,
    /// Actor before the step and its forward cache on the batch states.
    pub before: DenseNet,
    pub before_cache: ForwardCache,
    /// Actor after the step.
    pub old: DenseNet,
}

/// Result of the regularized actor step.
#[derive(Debug, Clone)]
pub struct MetaActorStep {
    pub new: DenseNet,
    pub j_new: f64,
    pub j_old: f64,
    /// Gradient of the unweighted regularizer at the pre-step parameters.
    pub regularizer_grad: Gradients,
    pub old: DenseNet,
}

fn join(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), *a, *b]
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    crate::mdp::sigmoid(x)
}

/// Raw actions of the policy: `scale * tanh` head of `actor`.
pub fn policy(actor: &DenseNet, states: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>> {
    Ok(actor.predict(states)? * scale)
}

/// `J = -mean_batch Q(s, policy(s))`.
pub fn actor_objective(actor: &DenseNet, critic: &DenseNet, states: ArrayView2<f64>, scale: f64) -> Result<f64> {
    let actions = policy(actor, states, scale)?;
    let q = critic.predict(join(&states.to_owned(), &actions).view())?;
    Ok(-q.mean().unwrap_or(0.0))
}

/// `psi` times the softplus of every policy output, averaged over the batch
/// and reduced over action components.
pub fn meta_regularizer(
    actor: &DenseNet,
    states: ArrayView2<f64>,
    scale: f64,
    psi: f64,
    reduction: Reduction,
) -> Result<f64> {
    let out = policy(actor, states, scale)?;
    Ok(psi * reduce(&out, reduction, softplus))
}

fn reduce(out: &Array2<f64>, reduction: Reduction, f: fn(f64) -> f64) -> f64 {
    let total: f64 = out.iter().map(|&x| f(x)).sum();
    let rows = out.nrows().max(1) as f64;
    match reduction {
        Reduction::Mean => total / (rows * out.ncols().max(1) as f64),
        Reduction::Sum => total / rows,
    }
}

impl AgentBundle {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let actor_sizes: Vec<usize> = std::iter::once(state_dim)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(action_dim))
            .collect();
        let critic_sizes: Vec<usize> = std::iter::once(state_dim + action_dim)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let actor = DenseNet::new(&actor_sizes, Activation::Relu, Activation::Tanh, Some(3e-3), rng)?;
        let critic = DenseNet::new(&critic_sizes, Activation::Relu, Activation::Linear, None, rng)?;
        Ok(AgentBundle {
            actor_opt: config.optimizer.build(&actor, config.lr_actor),
            critic_opt: config.optimizer.build(&critic, config.lr_critic),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            noise_scale: config.noise_start,
            config,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Policy output. When exploring, zero-mean Gaussian noise of the current
    /// scale is added to the tanh output, clipped to `[-1, 1]`, then scaled.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], explore: bool, rng: &mut R) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut a = self.actor.predict(x)?.into_raw_vec_and_offset().0;
        if explore {
            for v in &mut a {
                let z: f64 = rng.sample(StandardNormal);
                *v = (*v + self.noise_scale * z).clamp(-1.0, 1.0);
            }
        }
        let scale = self.config.action_scale;
        a.iter_mut().for_each(|v| *v *= scale);
        Ok(a)
    }

    /// Multiplicative per-episode decay of the exploration scale.
    pub fn decay_noise(&mut self) {
        self.noise_scale = (self.noise_scale * self.config.noise_decay).max(self.config.noise_end);
    }

    /// Bellman targets `r + (1 - b) * discount * Q'(s', actor'(s'))` from the target networks.
    pub fn critic_targets(&self, batch: &Batch) -> Result<Array1<f64>> {
        let next_actions = policy(&self.target_actor, batch.next_states.view(), self.config.action_scale)?;
        let q_next = self
            .target_critic
            .predict(join(&batch.next_states, &next_actions).view())?
            .column(0)
            .to_owned();
        let eta = self.config.discount;
        Ok(&batch.rewards + &((1.0 - &batch.terminals) * &q_next * eta))
    }

    /// One optimizer step on the mean squared Bellman error; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let targets = self.critic_targets(batch)?;
        let (q, cache) = self.critic.forward(join(&batch.states, &batch.actions).view())?;
        let residual = &q.column(0) - &targets;
        let n = batch.len() as f64;
        let loss = residual.mapv(|r| r * r).sum() / n;
        let grad_out = (residual * (2.0 / n)).insert_axis(Axis(1));
        let (grads, _) = self.critic.backward(&cache, &grad_out)?;
        self.critic_opt.step(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// Gradient of `J` through the critic into the actor, at the current actor.
    fn actor_gradient(&self, states: &Array2<f64>) -> Result<(f64, Gradients, ForwardCache)> {
        let scale = self.config.action_scale;
        let (out, actor_cache) = self.actor.forward(states.view())?;
        let (q, critic_cache) = self.critic.forward(join(states, &(out * scale)).view())?;
        let n = states.nrows() as f64;
        let j = -q.mean().unwrap_or(0.0);
        let dq = Array2::from_elem(q.raw_dim(), -1.0 / n);
        let dinput = self.critic.input_gradient(&critic_cache, &dq)?;
        let sd = states.ncols();
        let daction = dinput.slice(s![.., sd..]).to_owned() * scale;
        let (grads, _) = self.actor.backward(&actor_cache, &daction)?;
        Ok((j, grads, actor_cache))
    }

    /// DDPG actor step: descend `J` with the actor optimizer.
    pub fn actor_update_ddpg(&mut self, batch: &Batch) -> Result<ActorStep> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (j, grads, cache) = self.actor_gradient(&batch.states)?;
        let before = self.actor.clone();
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(ActorStep {
            j,
            before,
            before_cache: cache,
            old: self.actor.clone(),
        })
    }

    /// Gradient of the unweighted regularizer at the pre-step actor.
    pub fn regularizer_gradient(&self, step: &ActorStep) -> Result<Gradients> {
        let out = step.before_cache.output();
        let norm = match self.config.regularizer {
            Reduction::Mean => 1.0 / (out.len().max(1) as f64),
            Reduction::Sum => 1.0 / (out.nrows().max(1) as f64),
        };
        let a = self.config.action_scale;
        let grad_out = out.mapv(|y| a * logistic(a * y) * norm);
        Ok(step.before.backward(&step.before_cache, &grad_out)?.0)
    }

    /// Regularized step from the DDPG result:
    /// `new = old - lr_actor * psi * grad(regularizer at pre-step params)`.
    /// The actor adopts `new`.
    pub fn actor_update_meta(&mut self, meta: &MetaState, batch: &Batch, step: ActorStep) -> Result<MetaActorStep> {
        let regularizer_grad = self.regularizer_gradient(&step)?;
        let new = self.regularized_params(&step.old, &regularizer_grad, meta.psi)?;
        let j_new = actor_objective(&new, &self.critic, batch.states.view(), self.config.action_scale)?;
        let j_old = actor_objective(&step.old, &self.critic, batch.states.view(), self.config.action_scale)?;
        self.actor = new.clone();
        Ok(MetaActorStep {
            new,
            j_new,
            j_old,
            regularizer_grad,
            old: step.old,
        })
    }

    fn regularized_params(&self, old: &DenseNet, grad: &Gradients, psi: f64) -> Result<DenseNet> {
        let mut new = old.clone();
        new.add_scaled(grad, -self.config.lr_actor * psi)?;
        Ok(new)
    }

    /// Meta loss `tanh(J(new(psi)) - J(old))` on the batch.
    pub fn meta_loss(&self, step: &MetaActorStep, batch: &Batch, psi: f64) -> Result<f64> {
        let new = self.regularized_params(&step.old, &step.regularizer_grad, psi)?;
        let j_new = actor_objective(&new, &self.critic, batch.states.view(), self.config.action_scale)?;
        Ok((j_new - step.j_old).tanh())
    }

    /// Central finite-difference derivative of the meta loss in `psi`.
    pub fn meta_gradient(&self, step: &MetaActorStep, batch: &Batch, psi: f64, eps: f64) -> Result<f64> {
        let up = self.meta_loss(step, batch, psi + eps)?;
        let down = self.meta_loss(step, batch, psi - eps)?;
        Ok((up - down) / (2.0 * eps))
    }

    /// Steps `psi` against the meta-loss gradient and clamps it to `[0, 1]`.
    /// Returns the gradient used.
    pub fn meta_update(&self, meta: &mut MetaState, step: &MetaActorStep, batch: &Batch) -> Result<f64> {
        let grad = self.meta_gradient(step, batch, meta.psi, self.config.meta_fd_step)?;
        meta.psi = (meta.psi - meta.lr * grad).clamp(0.0, 1.0);
        Ok(grad)
    }

    pub fn soft_update_targets(&mut self) -> Result<()> {
        crate::neural::soft_update(&mut self.target_actor, &self.actor, self.config.tau)?;
        crate::neural::soft_update(&mut self.target_critic, &self.critic, self.config.tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Mean immediate reward per step.
    pub reward: f64,
    /// Mean sum rate per step.
    pub total_rate: f64,
    /// Mean over steps of the smallest user rate.
    pub min_rate: f64,
    /// Steps meeting every QoS target with all projected constraints satisfied.
    pub feasible_steps: usize,
    /// Constraint violations counted over the episode (relaxed association excluded).
    pub violations: usize,
    pub critic_loss: f64,
    pub psi: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub episodes: Vec<EpisodeStats>,
    pub bundle: AgentBundle,
    pub meta: Option<MetaState>,
    /// Actor parameters after every gradient step, when requested.
    pub actor_trajectory: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    pub episodes: usize,
    pub record_trajectory: bool,
}

/// Stream used for network initialization, exploration and replay sampling.
pub fn agent_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a9e7_0000_0001)
}

/// Runs the episodic training loop on `env`.
pub fn train(
    env: &mut Environment,
    config: &AgentConfig,
    options: TrainOptions,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    if options.episodes == 0 {
        return Err(Error::Config("at least one episode is required".into()));
    }
    let mut rng = agent_rng(seed);
    let mut bundle = AgentBundle::new(env.state_dim(), env.action_dim(), config.clone(), &mut rng)?;
    let mut meta = match config.kind {
        AgentKind::MetaDdpg => Some(MetaState::new(config.psi0, config.lr_meta)),
        AgentKind::Ddpg => None,
    };
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, env.state_dim(), env.action_dim());
    let mut episodes = Vec::with_capacity(options.episodes);
    let mut trajectory = Vec::new();
    let t_max = env.config().t_max;
    let checked: Vec<Constraint> = std::iter::once(Constraint::C1)
        .chain(Constraint::PROJECTED)
        .collect();

    for episode in 0..options.episodes {
        let mut state = env.reset()?.0;
        let (mut reward, mut rate, mut min_rate, mut loss) = (0.0, 0.0, 0.0, 0.0);
        let (mut feasible, mut violations, mut updates, mut steps) = (0usize, 0usize, 0usize, 0usize);
        for t in 1..=t_max {
            let action = bundle.select_action(&state, true, &mut rng)?;
            let out = env.step(&action)?;
            buffer.push(&out.transition)?;
            steps += 1;
            reward += out.transition.reward;
            rate += out.report.total;
            min_rate += out.report.min_rate();
            if out.constraints.passes(&checked) {
                feasible += 1;
            }
            violations += checked.iter().filter(|&&c| !out.constraints.get(c).satisfied).count();

            if buffer.len() >= config.batch_size {
                let batch = buffer.sample(config.batch_size, &mut rng)?;
                loss += bundle.critic_update(&batch)?;
                let step = bundle.actor_update_ddpg(&batch)?;
                if let Some(m) = meta.as_mut() {
                    let ms = bundle.actor_update_meta(m, &batch, step)?;
                    bundle.meta_update(m, &ms, &batch)?;
                }
                updates += 1;
                if t % config.update_period == 0 {
                    bundle.soft_update_targets()?;
                }
                if options.record_trajectory {
                    trajectory.push(bundle.actor.params());
                }
            }
            state = out.transition.next_state;
            if out.transition.terminal {
                break;
            }
        }
        let n = steps.max(1) as f64;
        let stats = EpisodeStats {
            episode,
            reward: reward / n,
            total_rate: rate / n,
            min_rate: min_rate / n,
            feasible_steps: feasible,
            violations,
            critic_loss: if updates > 0 { loss / updates as f64 } else { 0.0 },
            psi: meta.map_or(0.0, |m| m.psi),
            noise_scale: bundle.noise_scale,
        };
        on_episode(&stats);
        episodes.push(stats);
        bundle.decay_noise();
    }
    Ok(TrainOutcome {
        episodes,
        bundle,
        meta,
        actor_trajectory: trajectory,
    })
}

pub const AGENT_MAGIC: &str = "starris-agent";
pub const AGENT_VERSION: u32 = 1;

fn write_optimizer<W: Write>(opt: &Optimizer, out: &mut W) -> std::io::Result<()> {
    match opt {
        Optimizer::Sgd { lr } => writeln!(out, "optimizer sgd {lr:?}"),
        Optimizer::Adam(a) => {
            writeln!(
                out,
                "optimizer adam {:?} {:?} {:?} {:?} {}",
                a.lr, a.beta1, a.beta2, a.eps, a.t
            )?;
            for moments in [&a.m, &a.v] {
                let flat: Vec<f64> = moments.iter().collect();
                writeln!(out, "moments {}", flat.len())?;
                for v in flat {
                    writeln!(out, "{v:?}")?;
                }
            }
            Ok(())
        }
    }
}

fn read_optimizer<R: BufRead>(input: &mut R, net: &DenseNet) -> Result<Optimizer> {
    let line = next_line(input)?;
    let f = expect_field(&line, "optimizer")?;
    match f.as_slice() {
        ["sgd", lr] => Ok(Optimizer::Sgd { lr: parse_num(lr)? }),
        ["adam", lr, b1, b2, eps, t] => {
            let mut adam = Adam::new(net, parse_num(lr)?);
            adam.beta1 = parse_num(b1)?;
            adam.beta2 = parse_num(b2)?;
            adam.eps = parse_num(eps)?;
            adam.t = parse_num(t)?;
            for slot in [&mut adam.m, &mut adam.v] {
                let n: usize = parse_num(expect_field(&next_line(input)?, "moments")?.first().copied().unwrap_or(""))?;
                if n != net.param_count() {
                    return Err(Error::Checkpoint("optimizer moments do not match network".into()));
                }
                let flat = (0..n)
                    .map(|_| parse_num::<f64>(&next_line(input)?))
                    .collect::<Result<Vec<_>>>()?;
                let mut it = flat.into_iter();
                for (w, b) in &mut slot.layers {
                    w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = it.next().expect("count checked"));
                }
            }
            Ok(Optimizer::Adam(adam))
        }
        _ => Err(Error::Checkpoint(format!("bad optimizer line `{line}`"))),
    }
}

/// Writes the agent as text: a header, `config <key> = <value>` lines,
/// the exploration scale and meta state, then for each of actor, critic,
/// target actor and target critic a `net <name>` marker followed by the
/// network format of [`crate::neural::write_net`]; optimizer states follow
/// the online networks.
pub fn save_checkpoint<W: Write>(bundle: &AgentBundle, meta: Option<&MetaState>, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{AGENT_MAGIC} {AGENT_VERSION}")?;
    for (k, v) in bundle.config.to_pairs() {
        writeln!(out, "config {k} = {v}")?;
    }
    writeln!(out, "noise_scale {:?}", bundle.noise_scale)?;
    match meta {
        Some(m) => writeln!(out, "meta {:?} {:?}", m.psi, m.lr)?,
        None => writeln!(out, "meta none")?,
    }
    writeln!(out, "net actor")?;
    write_net(&bundle.actor, out)?;
    write_optimizer(&bundle.actor_opt, out)?;
    writeln!(out, "net critic")?;
    write_net(&bundle.critic, out)?;
    write_optimizer(&bundle.critic_opt, out)?;
    writeln!(out, "net target_actor")?;
    write_net(&bundle.target_actor, out)?;
    writeln!(out, "net target_critic")?;
    write_net(&bundle.target_critic, out)?;
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: &mut R) -> Result<(AgentBundle, Option<MetaState>)> {
    let header = next_line(input)?;
    if expect_field(&header, AGENT_MAGIC)? != [AGENT_VERSION.to_string()] {
        return Err(Error::Checkpoint(format!("unsupported agent format `{header}`")));
    }
    let mut config_text = String::new();
    let mut line = next_line(input)?;
    while let Some(rest) = line.strip_prefix("config ") {
        config_text.push_str(rest);
        config_text.push('\n');
        line = next_line(input)?;
    }
    let mut config = AgentConfig::default();
    config.apply_kv(&KvFile::parse(&config_text).map_err(|e| Error::Checkpoint(e.to_string()))?)?;
    let noise_scale: f64 = parse_num(expect_field(&line, "noise_scale")?.first().copied().unwrap_or(""))?;
    let meta_line = next_line(input)?;
    let meta = match expect_field(&meta_line, "meta")?.as_slice() {
        ["none"] => None,
        [psi, lr] => Some(MetaState {
            psi: parse_num(psi)?,
            lr: parse_num(lr)?,
        }),
        _ => return Err(Error::Checkpoint(format!("bad meta line `{meta_line}`"))),
    };
    let section = |name: &str, input: &mut R| -> Result<DenseNet> {
        let l = next_line(input)?;
        if expect_field(&l, "net")? != [name] {
            return Err(Error::Checkpoint(format!("expected network `{name}`, found `{l}`")));
        }
        read_net(input)
    };
    let actor = section("actor", input)?;
    let actor_opt = read_optimizer(input, &actor)?;
    let critic = section("critic", input)?;
    let critic_opt = read_optimizer(input, &critic)?;
    let target_actor = section("target_actor", input)?;
    let target_critic = section("target_critic", input)?;
    if !target_actor.same_architecture(&actor) || !target_critic.same_architecture(&critic) {
        return Err(Error::Checkpoint("target networks differ from online networks".into()));
    }
    Ok((
        AgentBundle {
            actor,
            critic,
            target_actor,
            target_critic,
            actor_opt,
            critic_opt,
            noise_scale,
            config,
        },
        meta,
    ))
}
