//! Network geometry and Rayleigh-faded channel realizations.
//!
//! Surfaces are indexed from the farthest to the closest to the base station,
//! so surface `0` is the farthest one. Inter-surface channels exist only for
//! ordered pairs `n < n'`, i.e. toward a surface closer to the base station.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Which half-space of its surface a user sits in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Reflection,
    Transmission,
}

impl Side {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "r" | "reflection" => Ok(Side::Reflection),
            "t" | "transmission" => Ok(Side::Transmission),
            other => Err(Error::Config(format!("unknown side `{other}`"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Side::Reflection => "r",
            Side::Transmission => "t",
        }
    }
}

/// Log-distance path loss with a 1 m reference distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoss {
    pub exponent: f64,
    pub ref_loss_db: f64,
}

impl PathLoss {
    pub const DEFAULT: PathLoss = PathLoss {
        exponent: 2.2,
        ref_loss_db: 30.0,
    };

    pub fn gain(&self, distance: f64) -> Result<f64> {
        path_loss(distance, self.exponent, self.ref_loss_db)
    }
}

impl Default for PathLoss {
    fn default() -> Self {
        PathLoss::DEFAULT
    }
}

/// Linear power gain `10^(-ref_loss_db/10) * d^(-exponent)`, `d` in meters.
pub fn path_loss(distance: f64, exponent: f64, ref_loss_db: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::Domain(format!(
            "path loss needs a positive finite distance, got {distance}"
        )));
    }
    Ok(10f64.powf(-ref_loss_db / 10.0) * distance.powf(-exponent))
}

/// Path-loss parameters per link class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkModels {
    pub ris_bs: PathLoss,
    pub user_ris: PathLoss,
    pub ris_ris: PathLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub bs_position: [f64; 2],
    pub ris_positions: Vec<[f64; 2]>,
    /// Element count `M_n` per surface.
    pub elements: Vec<usize>,
    pub user_positions: Vec<[f64; 2]>,
    /// Home surface of each user; the only surface it has a direct channel to.
    pub user_ris: Vec<usize>,
    pub user_side: Vec<Side>,
    pub n_bs: usize,
    pub links: LinkModels,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Topology {
    /// Generated layout: base station at the origin, surfaces on the x axis
    /// evenly spaced from 50 m down to 20 m, users assigned round-robin and
    /// placed 2-10 m from their surface. Even-numbered users of a surface sit
    /// on the reflection side (facing the base station), odd-numbered ones on
    /// the transmission side.
    pub fn generated(n_ris: usize, elements: usize, users: usize, n_bs: usize) -> Result<Self> {
        if n_ris == 0 || users == 0 {
            return Err(Error::Topology("need at least one surface and one user".into()));
        }
        let ris_positions: Vec<[f64; 2]> = (0..n_ris)
            .map(|n| {
                let x = if n_ris == 1 {
                    35.0
                } else {
                    50.0 - 30.0 * n as f64 / (n_ris - 1) as f64
                };
                [x, 0.0]
            })
            .collect();
        let user_ris: Vec<usize> = (0..users).map(|k| k % n_ris).collect();
        let mut per_ris = vec![0usize; n_ris];
        for &n in &user_ris {
            per_ris[n] += 1;
        }
        let mut seen = vec![0usize; n_ris];
        let mut user_positions = Vec::with_capacity(users);
        let mut user_side = Vec::with_capacity(users);
        for &n in &user_ris {
            let j = seen[n];
            seen[n] += 1;
            let radius = 2.0 + 8.0 * (j as f64 + 0.5) / per_ris[n] as f64;
            let side = if j.is_multiple_of(2) {
                Side::Reflection
            } else {
                Side::Transmission
            };
            // Spread users over a 120 degree fan on their side of the surface.
            let spread = (j / 2) as f64 / per_ris[n].div_ceil(2).max(1) as f64;
            let angle = (spread - 0.5) * 2.0 * std::f64::consts::FRAC_PI_3;
            let dir = match side {
                Side::Reflection => -1.0,
                Side::Transmission => 1.0,
            };
            let [rx, ry] = ris_positions[n];
            user_positions.push([rx + dir * radius * angle.cos(), ry + radius * angle.sin()]);
            user_side.push(side);
        }
        let topo = Topology {
            bs_position: [0.0, 0.0],
            ris_positions,
            elements: vec![elements; n_ris],
            user_positions,
            user_ris,
            user_side,
            n_bs,
            links: LinkModels::default(),
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn n_ris(&self) -> usize {
        self.ris_positions.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_positions.len()
    }

    pub fn users_on(&self, n: usize) -> usize {
        self.user_ris.iter().filter(|&&r| r == n).count()
    }

    pub fn ris_bs_distance(&self, n: usize) -> f64 {
        distance(self.ris_positions[n], self.bs_position)
    }

    pub fn user_ris_distance(&self, k: usize) -> f64 {
        distance(self.user_positions[k], self.ris_positions[self.user_ris[k]])
    }

    pub fn ris_ris_distance(&self, n: usize, m: usize) -> f64 {
        distance(self.ris_positions[n], self.ris_positions[m])
    }

    /// Ordered surface pairs `(n, n')` with `n < n'`, lexicographic.
    pub fn ris_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_ris();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_ris();
        let k = self.n_users();
        if n == 0 {
            return Err(Error::Topology("no surfaces".into()));
        }
        if k == 0 {
            return Err(Error::Topology("no users".into()));
        }
        if self.n_bs == 0 {
            return Err(Error::Topology("base station needs at least one antenna".into()));
        }
        if self.elements.len() != n {
            return Err(Error::Topology(format!(
                "{} element counts for {n} surfaces",
                self.elements.len()
            )));
        }
        if self.elements.contains(&0) {
            return Err(Error::Topology("every surface needs at least one element".into()));
        }
        if self.user_ris.len() != k || self.user_side.len() != k {
            return Err(Error::Topology(
                "user surface and side lists must have one entry per user".into(),
            ));
        }
        if let Some(&bad) = self.user_ris.iter().find(|&&r| r >= n) {
            return Err(Error::Topology(format!("user attached to unknown surface {bad}")));
        }
        let all_points = std::iter::once(&self.bs_position)
            .chain(&self.ris_positions)
            .chain(&self.user_positions);
        if all_points.flatten().any(|c| !c.is_finite()) {
            return Err(Error::Topology("non-finite coordinate".into()));
        }
        for w in 0..n.saturating_sub(1) {
            if !(self.ris_bs_distance(w) > self.ris_bs_distance(w + 1)) {
                return Err(Error::Topology(format!(
                    "surfaces must be sorted by strictly decreasing distance to the base station \
                     (surface {w} at {:.3} m, surface {} at {:.3} m)",
                    self.ris_bs_distance(w),
                    w + 1,
                    self.ris_bs_distance(w + 1)
                )));
            }
        }
        for nn in 0..n {
            if !(self.ris_bs_distance(nn) > 0.0) {
                return Err(Error::Topology(format!("surface {nn} coincides with the base station")));
            }
        }
        for kk in 0..k {
            if !(self.user_ris_distance(kk) > 0.0) {
                return Err(Error::Topology(format!("user {kk} coincides with its surface")));
            }
        }
        Ok(())
    }

    /// Reads a topology from `key = value` text.
    ///
    /// Recognised keys: `bs` (x,y), `ris` (points separated by `;`),
    /// `elements` (one count, or one per surface), `users` (points),
    /// `user_ris`, `user_side` (`r`/`t` per user), `n_bs`, and
    /// `pl_ris_bs`, `pl_user_ris`, `pl_ris_ris` given as `exponent, ref_loss_db`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let need = |key: &str| Error::Config(format!("topology key `{key}` missing"));
        let bs = kv.get_points("bs")?.unwrap_or_else(|| vec![[0.0, 0.0]]);
        if bs.len() != 1 {
            return Err(Error::Config("`bs` takes exactly one point".into()));
        }
        let ris_positions = kv.get_points("ris")?.ok_or_else(|| need("ris"))?;
        let user_positions = kv.get_points("users")?.ok_or_else(|| need("users"))?;
        let mut elements: Vec<usize> = kv.get_list("elements")?.ok_or_else(|| need("elements"))?;
        if elements.len() == 1 && ris_positions.len() > 1 {
            elements = vec![elements[0]; ris_positions.len()];
        }
        let user_ris: Vec<usize> = match kv.get_list("user_ris")? {
            Some(v) => v,
            None => (0..user_positions.len())
                .map(|k| k % ris_positions.len().max(1))
                .collect(),
        };
        let user_side = match kv.raw("user_side") {
            Some(v) => v
                .split(',')
                .map(Side::parse)
                .collect::<Result<Vec<_>>>()?,
            None => vec![Side::Reflection; user_positions.len()],
        };
        let mut links = LinkModels::default();
        for (key, slot) in [
            ("pl_ris_bs", &mut links.ris_bs),
            ("pl_user_ris", &mut links.user_ris),
            ("pl_ris_ris", &mut links.ris_ris),
        ] {
            if let Some(v) = kv.get_list::<f64>(key)? {
                if v.len() != 2 {
                    return Err(Error::Config(format!("`{key}` takes `exponent, ref_loss_db`")));
                }
                *slot = PathLoss {
                    exponent: v[0],
                    ref_loss_db: v[1],
                };
            }
        }
        let topo = Topology {
            bs_position: bs[0],
            ris_positions,
            elements,
            user_positions,
            user_ris,
            user_side,
            n_bs: kv.get("n_bs")?.ok_or_else(|| need("n_bs"))?,
            links,
        };
        topo.validate()?;
        Ok(topo)
    }
}

/// One realization of every channel in the network.
///
/// Each block also carries the amplitude scale `sqrt(path_loss)` of its link
/// so that consumers can undo the large-scale attenuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// Surface-to-BS channels, `M_n x N_BS`.
    pub ris_bs: Vec<Array2<Complex64>>,
    /// User-to-home-surface channels, `M_home(k)`.
    pub user_ris: Vec<Array1<Complex64>>,
    /// Surface-to-surface channels `M_n x M_n'` for `n < n'`, in lexicographic pair order.
    pub ris_ris: Vec<((usize, usize), Array2<Complex64>)>,
    pub ris_bs_scale: Vec<f64>,
    pub user_ris_scale: Vec<f64>,
    pub ris_ris_scale: Vec<f64>,
}

impl ChannelSet {
    pub fn inter_ris(&self, n: usize, m: usize) -> Option<&Array2<Complex64>> {
        self.ris_ris
            .iter()
            .find(|((a, b), _)| *a == n && *b == m)
            .map(|(_, g)| g)
    }

    /// Copy with every surface-to-surface channel set to zero.
    pub fn without_inter_ris(&self) -> ChannelSet {
        let mut out = self.clone();
        for (_, g) in &mut out.ris_ris {
            g.fill(Complex64::new(0.0, 0.0));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let ok = |c: &Complex64| c.re.is_finite() && c.im.is_finite();
        self.ris_bs.iter().all(|m| m.iter().all(ok))
            && self.user_ris.iter().all(|v| v.iter().all(ok))
            && self.ris_ris.iter().all(|(_, g)| g.iter().all(ok))
    }

    /// Checks every block against the topology's counts.
    pub fn check_shape(&self, topo: &Topology) -> Result<()> {
        let n = topo.n_ris();
        if self.ris_bs.len() != n || self.user_ris.len() != topo.n_users() {
            return Err(Error::Dimension("channel block counts do not match topology".into()));
        }
        for (i, f) in self.ris_bs.iter().enumerate() {
            if f.dim() != (topo.elements[i], topo.n_bs) {
                return Err(Error::Dimension(format!("surface {i} to BS channel shape {:?}", f.dim())));
            }
        }
        for (k, f) in self.user_ris.iter().enumerate() {
            if f.len() != topo.elements[topo.user_ris[k]] {
                return Err(Error::Dimension(format!("user {k} channel length {}", f.len())));
            }
        }
        let pairs = topo.ris_pairs();
        if pairs.len() != self.ris_ris.len() {
            return Err(Error::Dimension("inter-surface channel count".into()));
        }
        for (want, ((a, b), g)) in pairs.iter().zip(&self.ris_ris) {
            if *want != (*a, *b) || g.dim() != (topo.elements[*a], topo.elements[*b]) {
                return Err(Error::Dimension(format!("inter-surface channel ({a},{b})")));
            }
        }
        Ok(())
    }
}

/// Circularly-symmetric complex Gaussian with unit variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws a channel realization from a caller-owned stream.
///
/// Blocks are drawn in a fixed order (surface-to-BS by surface, user links by
/// user, then inter-surface pairs), so a given stream state always yields the
/// same set.
pub fn sample_channels_from<R: Rng + ?Sized>(topo: &Topology, rng: &mut R) -> Result<ChannelSet> {
    let mut draw = |rows: usize, cols: usize, scale: f64| {
        Array2::from_shape_simple_fn((rows, cols), || complex_gaussian(rng) * scale)
    };
    let mut ris_bs = Vec::with_capacity(topo.n_ris());
    let mut ris_bs_scale = Vec::with_capacity(topo.n_ris());
    for n in 0..topo.n_ris() {
        let s = topo.links.ris_bs.gain(topo.ris_bs_distance(n))?.sqrt();
        ris_bs.push(draw(topo.elements[n], topo.n_bs, s));
        ris_bs_scale.push(s);
    }
    let mut user_ris = Vec::with_capacity(topo.n_users());
    let mut user_ris_scale = Vec::with_capacity(topo.n_users());
    for k in 0..topo.n_users() {
        let s = topo.links.user_ris.gain(topo.user_ris_distance(k))?.sqrt();
        let m = topo.elements[topo.user_ris[k]];
        user_ris.push(draw(m, 1, s).into_shape_with_order(m).expect("column"));
        user_ris_scale.push(s);
    }
    let mut ris_ris = Vec::new();
    let mut ris_ris_scale = Vec::new();
    for (a, b) in topo.ris_pairs() {
        let s = topo.links.ris_ris.gain(topo.ris_ris_distance(a, b))?.sqrt();
        ris_ris.push(((a, b), draw(topo.elements[a], topo.elements[b], s)));
        ris_ris_scale.push(s);
    }
    Ok(ChannelSet {
        ris_bs,
        user_ris,
        ris_ris,
        ris_bs_scale,
        user_ris_scale,
        ris_ris_scale,
    })
}

/// Pure function of `(topology, seed)`.
pub fn sample_channels(topo: &Topology, seed: u64) -> Result<ChannelSet> {
    topo.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_channels_from(topo, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_point(distance: f64) -> Topology {
        Topology {
            bs_position: [0.0, 0.0],
            ris_positions: vec![[30.0, 0.0]],
            elements: vec![1],
            user_positions: vec![[30.0 + distance, 0.0]],
            user_ris: vec![0],
            user_side: vec![Side::Reflection],
            n_bs: 1,
            links: LinkModels::default(),
        }
    }

    #[test]
    fn path_loss_examples() {
        assert!((path_loss(1.0, 3.7, 30.0).unwrap() - 1e-3).abs() < 1e-18);
        assert!((path_loss(10.0, 2.0, 30.0).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(path_loss(100.0, 0.0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn path_loss_rejects_non_positive_distance() {
        assert!(matches!(path_loss(0.0, 2.0, 30.0), Err(Error::Domain(_))));
        assert!(matches!(path_loss(-1.0, 2.0, 30.0), Err(Error::Domain(_))));
        assert!(path_loss(f64::NAN, 2.0, 30.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let topo = Topology::generated(2, 4, 4, 2).unwrap();
        let a = sample_channels(&topo, 9).unwrap();
        let b = sample_channels(&topo, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_channels(&topo, 10).unwrap());
        a.check_shape(&topo).unwrap();
        assert!(a.is_finite());
    }

    #[test]
    fn minimal_shape() {
        let topo = single_point(5.0);
        let ch = sample_channels(&topo, 0).unwrap();
        assert_eq!(ch.ris_bs.len(), 1);
        assert_eq!(ch.ris_bs[0].dim(), (1, 1));
        assert_eq!(ch.user_ris.len(), 1);
        assert_eq!(ch.user_ris[0].len(), 1);
        assert!(ch.ris_ris.is_empty());
    }

    #[test]
    fn second_moment_matches_path_loss() {
        let topo = single_point(7.0);
        let expected = path_loss(7.0, 2.2, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let ch = sample_channels_from(&topo, &mut rng).unwrap();
            acc += ch.user_ris[0][0].norm_sqr();
        }
        let mean = acc / draws as f64;
        assert!(
            ((mean - expected) / expected).abs() < 0.02,
            "mean {mean} expected {expected}"
        );
    }

    #[test]
    fn doubling_distance_scales_power() {
        let exponent = 2.2;
        let mut means = Vec::new();
        for d in [4.0, 8.0] {
            let topo = single_point(d);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut acc = 0.0;
            for _ in 0..100_000 {
                acc += sample_channels_from(&topo, &mut rng).unwrap().user_ris[0][0].norm_sqr();
            }
            means.push(acc / 100_000.0);
        }
        let ratio = means[1] / means[0];
        let expected = 2f64.powf(-exponent);
        assert!(((ratio - expected) / expected).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn topology_validation() {
        let mut topo = Topology::generated(3, 2, 5, 2).unwrap();
        assert_eq!(topo.users_on(0) + topo.users_on(1) + topo.users_on(2), 5);
        topo.ris_positions.swap(0, 1);
        assert!(matches!(topo.validate(), Err(Error::Topology(_))));

        let mut t = Topology::generated(2, 2, 2, 1).unwrap();
        t.ris_positions[1] = t.ris_positions[0];
        assert!(t.validate().is_err(), "equal distances are not strictly sorted");

        let mut t = Topology::generated(1, 1, 1, 1).unwrap();
        t.elements[0] = 0;
        assert!(t.validate().is_err());
        assert!(Topology::generated(0, 1, 1, 1).is_err());
    }

    #[test]
    fn topology_from_kv() {
        let kv = KvFile::parse(
            "bs = 0,0\nris = 40,0; 25,0\nelements = 3\nusers = 42,3; 27,-2; 38,1\n\
             user_ris = 0,1,0\nuser_side = r,t,t\nn_bs = 2\npl_user_ris = 2.0, 30\n",
        )
        .unwrap();
        let topo = Topology::from_kv(&kv).unwrap();
        assert_eq!(topo.elements, vec![3, 3]);
        assert_eq!(topo.user_side[1], Side::Transmission);
        assert_eq!(topo.links.user_ris.exponent, 2.0);
        assert_eq!(topo.links.ris_bs, PathLoss::DEFAULT);

        let bad = KvFile::parse("ris = 20,0; 40,0\nelements = 1\nusers = 1,1\nn_bs = 1").unwrap();
        assert!(matches!(Topology::from_kv(&bad), Err(Error::Topology(_))));
    }
}
