//! STAR-RIS element physics, effective channels, SIC decoding and rates.

use std::f64::consts::TAU;
use std::fmt;

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::channel::{ChannelSet, Side, Topology};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Per-element coefficients of one surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProfile {
    pub alpha_r: Vec<f64>,
    pub alpha_t: Vec<f64>,
    pub theta_r: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub delta_t: Vec<f64>,
}

impl SurfaceProfile {
    pub fn uniform(elements: usize, alpha_r: f64, theta_r: f64, theta_t: f64, delta: f64) -> Self {
        SurfaceProfile {
            alpha_r: vec![alpha_r; elements],
            alpha_t: vec![1.0 - alpha_r; elements],
            theta_r: vec![theta_r; elements],
            theta_t: vec![theta_t; elements],
            delta_r: vec![delta; elements],
            delta_t: vec![delta; elements],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_r.is_empty()
    }

    fn parts(&self, side: Side) -> (&[f64], &[f64], &[f64]) {
        match side {
            Side::Reflection => (&self.alpha_r, &self.theta_r, &self.delta_r),
            Side::Transmission => (&self.alpha_t, &self.theta_t, &self.delta_t),
        }
    }

    fn consistent(&self) -> bool {
        let m = self.len();
        [
            &self.alpha_t,
            &self.theta_r,
            &self.theta_t,
            &self.delta_r,
            &self.delta_t,
        ]
        .iter()
        .all(|v| v.len() == m)
    }
}

/// Amplitude split, phase and amplification of every element of every surface.
#[derive(Debug, Clone, PartialEq)]
pub struct StarRisProfile {
    pub surfaces: Vec<SurfaceProfile>,
}

impl StarRisProfile {
    /// Unit passive elements with an even energy split and zero phase.
    pub fn passive(elements: &[usize]) -> Self {
        StarRisProfile {
            surfaces: elements
                .iter()
                .map(|&m| SurfaceProfile::uniform(m, 0.5, 0.0, 0.0, 1.0))
                .collect(),
        }
    }

    /// Diagonal of the beamforming matrix: `sqrt(delta * alpha) * exp(j theta)`.
    pub fn coefficients(&self, ris: usize, side: Side) -> Result<Array1<Complex64>> {
        let surface = self.surfaces.get(ris).ok_or_else(|| {
            Error::Usage(format!(
                "profile has {} surfaces, asked for surface {ris}",
                self.surfaces.len()
            ))
        })?;
        if !surface.consistent() {
            return Err(Error::Dimension(format!(
                "surface {ris} coefficient lists differ in length"
            )));
        }
        let (alpha, theta, delta) = surface.parts(side);
        Ok(alpha
            .iter()
            .zip(theta)
            .zip(delta)
            .map(|((&a, &th), &d)| Complex64::from_polar((d * a).sqrt(), th))
            .collect())
    }

    /// Reflected and transmitted outputs of one element for incident `x`.
    pub fn element_response(&self, ris: usize, element: usize, x: Complex64) -> Result<(Complex64, Complex64)> {
        let r = self.coefficients(ris, Side::Reflection)?;
        let t = self.coefficients(ris, Side::Transmission)?;
        if element >= r.len() {
            return Err(Error::Usage(format!("surface {ris} has no element {element}")));
        }
        Ok((r[element] * x, t[element] * x))
    }
}

/// `diag(coefficients)` for one surface and side.
pub fn beamforming_matrix(profile: &StarRisProfile, ris: usize, side: Side) -> Result<Array2<Complex64>> {
    Ok(Array2::from_diag(&profile.coefficients(ris, side)?))
}

/// Joint decision: association, powers, receive beamformers and surface profile.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleAction {
    /// `K x N` association weights.
    pub beta: Array2<f64>,
    /// Transmit power per user in watts.
    pub power: Vec<f64>,
    /// Receive beamformer per user, length `N_BS`.
    pub beamformers: Vec<Array1<Complex64>>,
    pub profile: StarRisProfile,
}

impl FeasibleAction {
    /// Surface selected by the largest association weight, lowest index on ties.
    /// `None` when the user has no positive weight.
    pub fn association(&self, user: usize) -> Option<usize> {
        let row = self.beta.row(user);
        let mut best: Option<(usize, f64)> = None;
        for (n, &b) in row.iter().enumerate() {
            if b > 0.0 && best.is_none_or(|(_, v)| b > v) {
                best = Some((n, b));
            }
        }
        best.map(|(n, _)| n)
    }

    /// Copy with each association row replaced by its one-hot argmax.
    pub fn binarized(&self) -> FeasibleAction {
        let mut out = self.clone();
        for k in 0..out.beta.nrows() {
            let pick = self.association(k);
            for (n, b) in out.beta.row_mut(k).iter_mut().enumerate() {
                *b = if Some(n) == pick { 1.0 } else { 0.0 };
            }
        }
        out
    }
}

/// Which form of the desired-signal term to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumeratorForm {
    /// Only the link through the selected surface carries the user's signal.
    #[default]
    ServingLink,
    /// The association-weighted and complementary sums as written, which add
    /// up to the home-surface link regardless of the association weights.
    Printed,
}

impl NumeratorForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serving" | "serving_link" => Ok(NumeratorForm::ServingLink),
            "printed" => Ok(NumeratorForm::Printed),
            other => Err(Error::Config(format!("unknown numerator form `{other}`"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            NumeratorForm::ServingLink => "serving",
            NumeratorForm::Printed => "printed",
        }
    }
}

/// Effective channel of user `k` through surface `n`, including the
/// second-order paths `k -> n -> n' -> BS` for every closer surface `n' > n`.
///
/// The side (reflection or transmission) used at every surface on the path
/// is the user's own side.
pub fn effective_channel(
    topo: &Topology,
    channels: &ChannelSet,
    profile: &StarRisProfile,
    user: usize,
    ris: usize,
) -> Result<Array1<Complex64>> {
    if user >= topo.n_users() || ris >= topo.n_ris() {
        return Err(Error::Usage(format!("no user {user} / surface {ris}")));
    }
    if topo.user_ris[user] != ris {
        return Err(Error::Usage(format!(
            "user {user} is attached to surface {}, not {ris}",
            topo.user_ris[user]
        )));
    }
    if channels.ris_bs.len() != topo.n_ris() || channels.user_ris.len() != topo.n_users() {
        return Err(Error::Dimension("channel set does not match topology".into()));
    }
    let side = topo.user_side[user];
    let f = &channels.user_ris[user];
    let theta = profile.coefficients(ris, side)?;
    if f.len() != theta.len() || channels.ris_bs[ris].nrows() != theta.len() {
        return Err(Error::Dimension(format!(
            "surface {ris}: {} elements, user channel {}, BS channel rows {}",
            theta.len(),
            f.len(),
            channels.ris_bs[ris].nrows()
        )));
    }
    // Signal leaving surface `ris` toward the BS and toward closer surfaces.
    let leaving: Array1<Complex64> = &theta * f;
    let mut h = hermitian_apply(&channels.ris_bs[ris], &leaving)?;
    for ((a, b), g) in &channels.ris_ris {
        if *a != ris {
            continue;
        }
        let theta_next = profile.coefficients(*b, side)?;
        if g.nrows() != leaving.len() || g.ncols() != theta_next.len() {
            return Err(Error::Dimension(format!("inter-surface channel ({a},{b}) shape {:?}", g.dim())));
        }
        // G is M_n x M_n'; the hop from n to n' applies its transpose.
        let arriving = g.t().dot(&leaving);
        let relayed = &theta_next * &arriving;
        h += &hermitian_apply(&channels.ris_bs[*b], &relayed)?;
    }
    Ok(h)
}

/// `F^H v` for `F` of shape `M x N_BS`.
fn hermitian_apply(f: &Array2<Complex64>, v: &Array1<Complex64>) -> Result<Array1<Complex64>> {
    if f.nrows() != v.len() {
        return Err(Error::Dimension(format!(
            "surface-to-BS channel has {} rows, signal has {}",
            f.nrows(),
            v.len()
        )));
    }
    let mut out = Array1::from_elem(f.ncols(), ZERO);
    for (row, &x) in f.rows().into_iter().zip(v) {
        for (o, &fe) in out.iter_mut().zip(row) {
            *o += fe.conj() * x;
        }
    }
    Ok(out)
}

/// `w^H h`.
pub fn inner(w: &Array1<Complex64>, h: &Array1<Complex64>) -> Complex64 {
    w.iter().zip(h).map(|(a, b)| a.conj() * b).sum()
}

/// Per-user quantities shared by decoding-order and SINR evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    /// Channel that carries each user's signal (zero when it is not served).
    pub served: Vec<Array1<Complex64>>,
    /// Surface whose group the user belongs to for interference accounting.
    pub group: Vec<usize>,
    /// `|w_k^H h_k|^2`.
    pub gains: Vec<f64>,
    /// Decoding order, weakest first.
    pub order: Vec<usize>,
    /// Position of each user in `order`.
    pub position: Vec<usize>,
}

pub fn link_state(
    topo: &Topology,
    channels: &ChannelSet,
    action: &FeasibleAction,
    form: NumeratorForm,
) -> Result<LinkState> {
    let k_users = topo.n_users();
    check_action_shape(topo, action)?;
    let mut served = Vec::with_capacity(k_users);
    let mut group = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let home = topo.user_ris[k];
        let assoc = action.association(k);
        let linked = match form {
            NumeratorForm::ServingLink => assoc == Some(home),
            NumeratorForm::Printed => true,
        };
        served.push(if linked {
            effective_channel(topo, channels, &action.profile, k, home)?
        } else {
            Array1::from_elem(topo.n_bs, ZERO)
        });
        group.push(assoc.unwrap_or(home));
    }
    let gains: Vec<f64> = served
        .iter()
        .zip(&action.beamformers)
        .map(|(h, w)| inner(w, h).norm_sqr())
        .collect();
    let order = decoding_order_from_gains(&gains);
    let mut position = vec![0; k_users];
    for (pos, &k) in order.iter().enumerate() {
        position[k] = pos;
    }
    Ok(LinkState {
        served,
        group,
        gains,
        order,
        position,
    })
}

fn check_action_shape(topo: &Topology, action: &FeasibleAction) -> Result<()> {
    let (k, n) = (topo.n_users(), topo.n_ris());
    if action.beta.dim() != (k, n) {
        return Err(Error::Dimension(format!("association is {:?}, expected ({k}, {n})", action.beta.dim())));
    }
    if action.power.len() != k || action.beamformers.len() != k {
        return Err(Error::Dimension("one power and one beamformer per user".into()));
    }
    if action.beamformers.iter().any(|w| w.len() != topo.n_bs) {
        return Err(Error::Dimension(format!("beamformers must have {} entries", topo.n_bs)));
    }
    if action.profile.surfaces.len() != n {
        return Err(Error::Dimension("profile surface count".into()));
    }
    Ok(())
}

/// Users sorted by ascending gain; ties keep the lower user id first.
pub fn decoding_order_from_gains(gains: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]));
    order
}

pub fn decoding_order(
    topo: &Topology,
    channels: &ChannelSet,
    action: &FeasibleAction,
    form: NumeratorForm,
) -> Result<Vec<usize>> {
    Ok(link_state(topo, channels, action, form)?.order)
}

/// SINR of `user`. Interferers are the users of the same surface decoded
/// before it and every user of a farther surface (lower index).
pub fn sinr(links: &LinkState, action: &FeasibleAction, user: usize, noise_power: f64) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {noise_power}")));
    }
    if user >= links.served.len() {
        return Err(Error::Usage(format!("no user {user}")));
    }
    let w = &action.beamformers[user];
    let signal = action.power[user] * inner(w, &links.served[user]).norm_sqr();
    let (g, pos) = (links.group[user], links.position[user]);
    let mut interference = 0.0;
    for j in 0..links.served.len() {
        if j == user {
            continue;
        }
        let gj = links.group[j];
        if (gj == g && links.position[j] < pos) || gj < g {
            interference += action.power[j] * inner(w, &links.served[j]).norm_sqr();
        }
    }
    let w_norm_sqr: f64 = w.iter().map(|c| c.norm_sqr()).sum();
    Ok(signal / (interference + noise_power * w_norm_sqr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    /// bits/s/Hz per user.
    pub rates: Vec<f64>,
    pub total: f64,
    /// `R_k - R_min` per user.
    pub qos_slack: Vec<f64>,
    pub order: Vec<usize>,
}

impl RateReport {
    pub fn min_rate(&self) -> f64 {
        self.rates.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn rate_report(
    topo: &Topology,
    channels: &ChannelSet,
    action: &FeasibleAction,
    noise_power: f64,
    r_min: f64,
    form: NumeratorForm,
) -> Result<RateReport> {
    let links = link_state(topo, channels, action, form)?;
    let sinr = (0..topo.n_users())
        .map(|k| sinr(&links, action, k, noise_power))
        .collect::<Result<Vec<_>>>()?;
    let rates: Vec<f64> = sinr.iter().map(|g| (1.0 + g).log2()).collect();
    Ok(RateReport {
        total: rates.iter().sum(),
        qos_slack: rates.iter().map(|r| r - r_min).collect(),
        sinr,
        rates,
        order: links.order,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constraint {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
    C10,
}

impl Constraint {
    pub const ALL: [Constraint; 10] = [
        Constraint::C1,
        Constraint::C2,
        Constraint::C3,
        Constraint::C4,
        Constraint::C5,
        Constraint::C6,
        Constraint::C7,
        Constraint::C8,
        Constraint::C9,
        Constraint::C10,
    ];

    /// The constraints the action projection guarantees.
    pub const PROJECTED: [Constraint; 8] = [
        Constraint::C2,
        Constraint::C4,
        Constraint::C5,
        Constraint::C6,
        Constraint::C7,
        Constraint::C8,
        Constraint::C9,
        Constraint::C10,
    ];
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", *self as usize + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintCheck {
    pub constraint: Constraint,
    pub satisfied: bool,
    /// Largest amount by which the constraint is exceeded (0 when satisfied).
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    pub checks: Vec<ConstraintCheck>,
}

impl ConstraintReport {
    pub fn get(&self, c: Constraint) -> ConstraintCheck {
        self.checks[c as usize]
    }

    pub fn passes(&self, set: &[Constraint]) -> bool {
        set.iter().all(|&c| self.get(c).satisfied)
    }

    pub fn all_satisfied(&self) -> bool {
        self.checks.iter().all(|c| c.satisfied)
    }

    pub fn failed(&self) -> Vec<Constraint> {
        self.checks
            .iter()
            .filter(|c| !c.satisfied)
            .map(|c| c.constraint)
            .collect()
    }
}

/// Tolerance for the relaxed binary-association constraint.
pub const C3_TOLERANCE: f64 = 1e-9;
const EXACT_TOLERANCE: f64 = 1e-12;

/// Evaluates every constraint of the sum-rate problem. Violations are data.
pub fn check_constraints(
    action: &FeasibleAction,
    report: &RateReport,
    p_max: f64,
    r_min: f64,
    delta_max: f64,
) -> ConstraintReport {
    let mut checks = Vec::with_capacity(10);
    let mut push = |constraint, violation: f64, satisfied: bool| {
        checks.push(ConstraintCheck {
            constraint,
            satisfied,
            violation,
        })
    };
    let max0 = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);

    let c1 = max0(&mut report.rates.iter().map(|r| r_min - r));
    push(Constraint::C1, c1, report.rates.iter().all(|&r| r >= r_min));

    let c2 = max0(&mut action.beta.iter().map(|&b| (-b).max(b - 1.0)));
    push(Constraint::C2, c2, action.beta.iter().all(|&b| (0.0..=1.0).contains(&b)));

    let c3: f64 = action.beta.iter().map(|&b| b - b * b).sum();
    push(Constraint::C3, c3.max(0.0), c3 <= C3_TOLERANCE);

    let c4 = max0(&mut action.beta.rows().into_iter().map(|r| r.sum() - 1.0));
    push(Constraint::C4, c4, c4 <= EXACT_TOLERANCE);

    let c5 = max0(&mut action.power.iter().map(|&p| -p));
    push(Constraint::C5, c5, action.power.iter().all(|&p| p >= 0.0));

    let total: f64 = action.power.iter().sum();
    let c6 = (total - p_max).max(0.0);
    push(Constraint::C6, c6, c6 <= 1e-9 * p_max.abs().max(1.0));

    let surfaces = &action.profile.surfaces;
    let alphas = || surfaces.iter().flat_map(|s| s.alpha_r.iter().chain(&s.alpha_t)).copied();
    let c7 = max0(&mut alphas().map(|a| (-a).max(a - 1.0)));
    push(Constraint::C7, c7, alphas().all(|a| (0.0..=1.0).contains(&a)));

    let c8 = max0(&mut surfaces.iter().flat_map(|s| {
        s.alpha_r
            .iter()
            .zip(&s.alpha_t)
            .map(|(r, t)| (r + t - 1.0).abs())
    }));
    let c8_shape = surfaces.iter().all(|s| s.alpha_r.len() == s.alpha_t.len());
    push(Constraint::C8, c8, c8_shape && c8 <= EXACT_TOLERANCE);

    let thetas = || surfaces.iter().flat_map(|s| s.theta_r.iter().chain(&s.theta_t)).copied();
    let c9 = max0(&mut thetas().map(|t| (-t).max(t - TAU)));
    push(Constraint::C9, c9, thetas().all(|t| (0.0..TAU).contains(&t)));

    let deltas = || surfaces.iter().flat_map(|s| s.delta_r.iter().chain(&s.delta_t)).copied();
    let c10 = max0(&mut deltas().map(|d| (-d).max(d - delta_max)));
    let c10_ok = deltas().all(|d| d >= 0.0 && d <= delta_max * (1.0 + EXACT_TOLERANCE));
    push(Constraint::C10, c10, c10_ok);

    ConstraintReport { checks }
}
