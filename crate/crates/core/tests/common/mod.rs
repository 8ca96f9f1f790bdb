#![allow(dead_code)]

use convexity_lab::rng::stream;
use convexity_lab::{Architecture, Dataset, Params};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream(seed, 7)
}

pub fn arch(g: &mut ChaCha8Rng, max_hidden: usize, max_width: usize) -> Architecture {
    let h = g.random_range(1..=max_hidden);
    let mut w = vec![g.random_range(2..=max_width)];
    for _ in 0..h {
        w.push(g.random_range(2..=max_width));
    }
    w.push(1);
    Architecture::new(w).unwrap()
}

pub fn dataset(g: &mut ChaCha8Rng, n0: usize, n: usize) -> Dataset {
    let inputs = (0..n).map(|_| (0..n0).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..n).map(|_| g.random_range(-1.0..1.0)).collect();
    Dataset::new(inputs, labels).unwrap()
}

/// Random net, data, and direction, with the net kept at least `margin` away from any kink.
pub fn smooth_point(seed: u64, margin: f64) -> (Params, Dataset, Params) {
    let mut g = rng(seed);
    loop {
        let a = arch(&mut g, 3, 4);
        let n = g.random_range(2..=6);
        let data = dataset(&mut g, a.input_dim(), n);
        let p = Params::he_init(&a, 1.5, &mut g);
        if convexity_lab::net::preactivation_margin(&p, &data) > margin {
            let x = Params::gaussian(&a, 1.0, &mut g);
            return (p, data, x);
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
