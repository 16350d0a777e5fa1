//! Measurements shared by the property tests and the acceptance runner.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use starris_core::mdp::{project_action, ActionLayout};
use starris_core::neural::{Activation, DenseNet};
use starris_core::physics::{
    check_constraints, effective_channel, link_state, rate_report, sinr, Constraint, NumeratorForm, StarRisProfile,
};
use num_complex::Complex64;

use super::{oracle_channel, oracle_sinr, random_instance, rng, Instance};

const H: f64 = 1e-5;

pub fn random_net(r: &mut ChaCha8Rng, hidden: Activation, output: Activation) -> DenseNet {
    let depth = r.random_range(1..=3usize);
    let sizes: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=6usize)).collect();
    DenseNet::new(&sizes, hidden, output, None, r).unwrap()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// Smallest distance of any ReLU pre-activation from the kink at zero.
fn kink_margin(net: &DenseNet, x: &Array2<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    let mut current = x.clone();
    for layer in net.layers() {
        let z = current.dot(&layer.weights) + &layer.bias;
        if layer.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        current = z.mapv(|v| match layer.activation {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
        });
    }
    margin
}

fn loss(net: &DenseNet, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    (net.predict(x.view()).unwrap() * weights).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between backprop and central differences over the
/// parameters and inputs of one network.
pub fn worst_gradient_error(net: &DenseNet, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    let (_, cache) = net.forward(x.view()).unwrap();
    let (grads, dx) = net.backward(&cache, weights).unwrap();
    let base = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, a) in grads.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + H;
        probe.set_params(&p).unwrap();
        let up = loss(&probe, x, weights);
        p[i] = base[i] - H;
        probe.set_params(&p).unwrap();
        let down = loss(&probe, x, weights);
        worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
    }
    for ((row, col), &a) in dx.indexed_iter() {
        let mut xp = x.clone();
        xp[[row, col]] += H;
        let up = loss(net, &xp, weights);
        xp[[row, col]] -= 2.0 * H;
        let down = loss(net, &xp, weights);
        worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
    }
    worst
}

/// Worst error over `nets` random networks of one activation family,
/// skipping draws whose ReLU units sit within reach of the kink.
pub fn gradient_family(hidden: Activation, output: Activation, nets: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < nets {
        let net = random_net(&mut r, hidden, output);
        let batch = r.random_range(1..=4usize);
        let x = random_matrix(&mut r, batch, net.input_dim());
        if kink_margin(&net, &x) < 1e-3 {
            continue;
        }
        let weights = random_matrix(&mut r, batch, net.output_dim());
        worst = worst.max(worst_gradient_error(&net, &x, &weights));
        checked += 1;
    }
    worst
}

pub const GRADIENT_FAMILIES: [(Activation, Activation); 4] = [
    (Activation::Relu, Activation::Linear),
    (Activation::Tanh, Activation::Tanh),
    (Activation::Linear, Activation::Linear),
    (Activation::Relu, Activation::Tanh),
];

/// Noise power on the scale of the strongest received signal so that SINRs
/// stay of order one and an absolute tolerance is meaningful.
pub fn instance_noise(inst: &Instance) -> f64 {
    let links = link_state(&inst.topo, &inst.channels, &inst.action, NumeratorForm::ServingLink).unwrap();
    let peak = links
        .gains
        .iter()
        .zip(&inst.action.power)
        .map(|(g, p)| g * p)
        .fold(0.0, f64::max);
    if peak > 0.0 {
        peak
    } else {
        1.0
    }
}

pub fn channel_error(inst: &Instance) -> f64 {
    (0..inst.topo.n_users())
        .map(|k| {
            let fast =
                effective_channel(&inst.topo, &inst.channels, &inst.action.profile, k, inst.topo.user_ris[k]).unwrap();
            let slow = oracle_channel(&inst.topo, &inst.channels, &inst.action.profile, k);
            fast.iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn sinr_error(inst: &Instance) -> f64 {
    let noise = instance_noise(inst);
    let links = link_state(&inst.topo, &inst.channels, &inst.action, NumeratorForm::ServingLink).unwrap();
    oracle_sinr(inst, noise)
        .iter()
        .enumerate()
        .map(|(k, want)| (sinr(&links, &inst.action, k, noise).unwrap() - want).abs())
        .fold(0.0, f64::max)
}

/// `| |r|^2 + |t|^2 - |x|^2 |` for one random passive element and input.
pub fn energy_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = r.random_range(1..=8usize);
    let mut profile = StarRisProfile::passive(&[m]);
    let s = &mut profile.surfaces[0];
    for e in 0..m {
        let a: f64 = r.random_range(0.0..=1.0);
        s.alpha_r[e] = a;
        s.alpha_t[e] = 1.0 - a;
        s.theta_r[e] = r.random_range(0.0..std::f64::consts::TAU);
        s.theta_t[e] = r.random_range(0.0..std::f64::consts::TAU);
    }
    let x = Complex64::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
    (0..m)
        .map(|e| {
            let (rr, tt) = profile.element_response(0, e, x).unwrap();
            (rr.norm_sqr() + tt.norm_sqr() - x.norm_sqr()).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst channel, SINR and energy errors over `count` random instances.
pub fn physics_suite(count: u64) -> (f64, f64, f64) {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..count {
        let inst = random_instance(seed);
        worst.0 = worst.0.max(channel_error(&inst));
        worst.1 = worst.1.max(sinr_error(&inst));
        worst.2 = worst.2.max(energy_error(seed));
    }
    worst
}

/// Number of projected actions violating C2 or C4-C10, over `count` raw
/// vectors of varied spread on varied topologies.
pub fn feasibility_suite(count: u64, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut violations = 0;
    for i in 0..count {
        let topo = starris_core::channel::Topology::generated(
            r.random_range(1..=3),
            r.random_range(1..=4),
            r.random_range(1..=5),
            r.random_range(1..=3),
        )
        .unwrap();
        let layout = ActionLayout::new(&topo);
        let spread = [1.0, 10.0, 1e3, 1e8][(i % 4) as usize];
        let raw: Vec<f64> = (0..layout.dim()).map(|_| r.random_range(-spread..spread)).collect();
        let p_max = r.random_range(0.1..100.0);
        let delta_max = r.random_range(1.0..1e3);
        let action = project_action(&layout, &raw, p_max, delta_max).unwrap();
        let channels = starris_core::channel::sample_channels_from(&topo, &mut r).unwrap();
        let report = rate_report(&topo, &channels, &action, 1e-13, 1.0, NumeratorForm::ServingLink).unwrap();
        let checks = check_constraints(&action, &report, p_max, 0.0, delta_max);
        let power_ok = action.power.iter().sum::<f64>() <= p_max * (1.0 + 1e-12);
        if !checks.passes(&Constraint::PROJECTED) || !power_ok {
            violations += 1;
        }
    }
    violations
}
