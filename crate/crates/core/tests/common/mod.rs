#![allow(dead_code)]

pub mod suites;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use starris_core::channel::{sample_channels_from, ChannelSet, LinkModels, Side, Topology};
use starris_core::physics::{FeasibleAction, StarRisProfile, SurfaceProfile};

pub struct Instance {
    pub topo: Topology,
    pub channels: ChannelSet,
    pub action: FeasibleAction,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random deployment with `K, N <= 3`, `M_n <= 4`, `N_BS <= 2`.
pub fn random_topology(rng: &mut ChaCha8Rng) -> Topology {
    let n = rng.random_range(1..=3usize);
    let k = rng.random_range(1..=3usize);
    let ris_positions: Vec<[f64; 2]> = (0..n)
        .map(|i| [50.0 - 12.0 * i as f64 + rng.random_range(-2.0..2.0), rng.random_range(-5.0..5.0)])
        .collect();
    let user_ris: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
    let user_positions = user_ris
        .iter()
        .map(|&r| {
            let [x, y] = ris_positions[r];
            [x + rng.random_range(-8.0..8.0), y + rng.random_range(2.0..8.0)]
        })
        .collect();
    let user_side = (0..k)
        .map(|_| if rng.random_bool(0.5) { Side::Reflection } else { Side::Transmission })
        .collect();
    let topo = Topology {
        bs_position: [0.0, 0.0],
        ris_positions,
        elements: (0..n).map(|_| rng.random_range(1..=4)).collect(),
        user_positions,
        user_ris,
        user_side,
        n_bs: rng.random_range(1..=2),
        links: LinkModels::default(),
    };
    topo.validate().expect("generated topology is valid");
    topo
}

pub fn random_profile(rng: &mut ChaCha8Rng, elements: &[usize], delta_max: f64) -> StarRisProfile {
    StarRisProfile {
        surfaces: elements
            .iter()
            .map(|&m| {
                let alpha_r: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..=1.0)).collect();
                SurfaceProfile {
                    alpha_t: alpha_r.iter().map(|a| 1.0 - a).collect(),
                    alpha_r,
                    theta_r: (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
                    theta_t: (0..m).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
                    delta_r: (0..m).map(|_| rng.random_range(0.0..=delta_max)).collect(),
                    delta_t: (0..m).map(|_| rng.random_range(0.0..=delta_max)).collect(),
                }
            })
            .collect(),
    }
}

pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<Complex64> {
    let v: Array1<Complex64> =
        (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    v.mapv(|c| c / norm)
}

/// Random feasible action; association is either the home surface or a
/// random one-hot / fractional row.
pub fn random_action(rng: &mut ChaCha8Rng, topo: &Topology, p_max: f64, delta_max: f64) -> FeasibleAction {
    let (k, n) = (topo.n_users(), topo.n_ris());
    let mut beta = Array2::zeros((k, n));
    for u in 0..k {
        match rng.random_range(0..3) {
            0 => beta[[u, topo.user_ris[u]]] = 1.0,
            1 => beta[[u, rng.random_range(0..n)]] = 1.0,
            _ => {
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for (j, r) in raw.iter().enumerate() {
                    beta[[u, j]] = r / s;
                }
            }
        }
    }
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum::<f64>().max(1.0);
    FeasibleAction {
        beta,
        power: raw.iter().map(|r| p_max * r / s).collect(),
        beamformers: (0..k).map(|_| random_unit(rng, topo.n_bs)).collect(),
        profile: random_profile(rng, &topo.elements, delta_max),
    }
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let topo = random_topology(&mut r);
    let channels = sample_channels_from(&topo, &mut r).unwrap();
    let action = random_action(&mut r, &topo, 20.0, 316.0);
    Instance { topo, channels, action }
}

fn coefficient(s: &SurfaceProfile, m: usize, side: Side) -> Complex64 {
    let (a, th, d) = match side {
        Side::Reflection => (s.alpha_r[m], s.theta_r[m], s.delta_r[m]),
        Side::Transmission => (s.alpha_t[m], s.theta_t[m], s.delta_t[m]),
    };
    Complex64::new(0.0, th).exp() * (d * a).sqrt()
}

/// Element-by-element evaluation of the direct and second-order paths.
pub fn oracle_channel(topo: &Topology, ch: &ChannelSet, profile: &StarRisProfile, k: usize) -> Vec<Complex64> {
    let n = topo.user_ris[k];
    let side = topo.user_side[k];
    let f = &ch.user_ris[k];
    let mut h = vec![Complex64::new(0.0, 0.0); topo.n_bs];
    for (b, hb) in h.iter_mut().enumerate() {
        for m in 0..topo.elements[n] {
            *hb += ch.ris_bs[n][[m, b]].conj() * coefficient(&profile.surfaces[n], m, side) * f[m];
        }
        for n2 in n + 1..topo.n_ris() {
            let g = ch
                .ris_ris
                .iter()
                .find(|(p, _)| *p == (n, n2))
                .map(|(_, g)| g)
                .expect("pair present");
            for m2 in 0..topo.elements[n2] {
                let mut arriving = Complex64::new(0.0, 0.0);
                for m in 0..topo.elements[n] {
                    arriving += g[[m, m2]] * coefficient(&profile.surfaces[n], m, side) * f[m];
                }
                *hb += ch.ris_bs[n2][[m2, b]].conj() * coefficient(&profile.surfaces[n2], m2, side) * arriving;
            }
        }
    }
    h
}

fn dot(w: &Array1<Complex64>, h: &[Complex64]) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    for i in 0..h.len() {
        s += w[i].conj() * h[i];
    }
    s
}

/// SINR of every user from scratch: serving surface is the largest
/// association weight (lower index on ties); users not served by their home
/// surface carry no signal; users are decoded weakest first and interfered
/// by earlier users of their surface and by every user of a farther surface.
pub fn oracle_sinr(inst: &Instance, noise: f64) -> Vec<f64> {
    let (topo, a) = (&inst.topo, &inst.action);
    let k = topo.n_users();
    let serving: Vec<Option<usize>> = (0..k)
        .map(|u| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..topo.n_ris() {
                let b = a.beta[[u, j]];
                if b > 0.0 && best.is_none_or(|(_, v)| b > v) {
                    best = Some((j, b));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect();
    let h: Vec<Vec<Complex64>> = (0..k)
        .map(|u| {
            if serving[u] == Some(topo.user_ris[u]) {
                oracle_channel(topo, &inst.channels, &a.profile, u)
            } else {
                vec![Complex64::new(0.0, 0.0); topo.n_bs]
            }
        })
        .collect();
    let group: Vec<usize> = (0..k).map(|u| serving[u].unwrap_or(topo.user_ris[u])).collect();
    let gain: Vec<f64> = (0..k).map(|u| dot(&a.beamformers[u], &h[u]).norm_sqr()).collect();
    // rank[u] = number of users decoded before u
    let rank: Vec<usize> = (0..k)
        .map(|u| (0..k).filter(|&v| gain[v] < gain[u] || (gain[v] == gain[u] && v < u)).count())
        .collect();
    (0..k)
        .map(|u| {
            let w = &a.beamformers[u];
            let mut interference = 0.0;
            for v in 0..k {
                if v == u {
                    continue;
                }
                let earlier_same = group[v] == group[u] && rank[v] < rank[u];
                if earlier_same || group[v] < group[u] {
                    interference += a.power[v] * dot(w, &h[v]).norm_sqr();
                }
            }
            let wn: f64 = w.iter().map(|c| c.norm_sqr()).sum();
            a.power[u] * gain[u] / (interference + noise * wn)
        })
        .collect()
}
