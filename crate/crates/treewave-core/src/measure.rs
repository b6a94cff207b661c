//! Norms over traces and fields, the measurement noise model, and the
//! wave-to-heat transform.

use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::field::{NetworkField, Scalar};
use crate::grid::NetworkGrid;
use crate::trace::TraceRecord;

/// Trapezoidal L2(0,T) norm of a trace.
pub fn norm_l2_time<S: Scalar>(tr: &TraceRecord<S>) -> f64 {
    let n = tr.samples.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, v) in tr.samples.iter().enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * v.abs2();
    }
    (acc * tr.dt).sqrt()
}

/// H1(0,T) norm: sqrt(||f||^2 + ||f'||^2), the derivative by centered
/// differences with second-order one-sided stencils at the ends.
pub fn norm_h1_time<S: Scalar>(tr: &TraceRecord<S>) -> f64 {
    let n = tr.samples.len();
    assert!(n >= 2, "H1 norm needs at least two samples");
    let d = derivative_time(tr);
    let l2 = norm_l2_time(tr);
    let dl2 = norm_l2_time(&d);
    (l2 * l2 + dl2 * dl2).sqrt()
}

/// Discrete time derivative of a trace (same grid).
pub fn derivative_time<S: Scalar>(tr: &TraceRecord<S>) -> TraceRecord<S> {
    let n = tr.samples.len();
    let v = &tr.samples;
    let dt = tr.dt;
    let samples: Vec<S> = (0..n)
        .map(|k| {
            if n == 2 {
                (v[1] - v[0]).scale(1.0 / dt)
            } else if k == 0 {
                (v[0].scale(-3.0) + v[1].scale(4.0) - v[2]).scale(1.0 / (2.0 * dt))
            } else if k == n - 1 {
                (v[n - 1].scale(3.0) - v[n - 2].scale(4.0) + v[n - 3]).scale(1.0 / (2.0 * dt))
            } else {
                (v[k + 1] - v[k - 1]).scale(1.0 / (2.0 * dt))
            }
        })
        .collect();
    TraceRecord { samples, ..tr.clone() }
}

/// Edge-wise trapezoidal L2 norm of a field over the network.
pub fn norm_l2_space<S: Scalar>(f: &NetworkField<S>, grid: &NetworkGrid) -> f64 {
    let mut acc = 0.0;
    for (v, e) in f.per_edge.iter().zip(&grid.edges) {
        let n = v.len();
        for (i, x) in v.iter().enumerate() {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * x.abs2() * e.dx;
        }
    }
    acc.sqrt()
}

/// Seminorm ||f_x||_{L2}: the natural norm of fields vanishing at the
/// external ends. Centered differences inside, one-sided at endpoints.
pub fn norm_h10_space(f: &NetworkField<f64>, grid: &NetworkGrid) -> f64 {
    let mut acc = 0.0;
    for (v, e) in f.per_edge.iter().zip(&grid.edges) {
        let m = e.m;
        let dx = e.dx;
        for i in 0..=m {
            let d = if i == 0 {
                (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx)
            } else if i == m {
                (3.0 * v[m] - 4.0 * v[m - 1] + v[m - 2]) / (2.0 * dx)
            } else {
                (v[i + 1] - v[i - 1]) / (2.0 * dx)
            };
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            acc += w * d * d * dx;
        }
    }
    acc.sqrt()
}

/// Additive measurement noise: zero-mean Gaussian with standard deviation
/// `level * RMS(trace)`, deterministic for a given seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(level: f64, seed: u64) -> Self {
        assert!(level >= 0.0, "noise level must be non-negative");
        Self { level, seed }
    }
}

fn gaussian_pairs(rng: &mut rand_chacha::ChaCha8Rng) -> (f64, f64) {
    // Box-Muller on uniforms from the top 53 bits.
    let u1 = loop {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u > 0.0 {
            break u;
        }
    };
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Standard normal samples from a seeded generator.
pub fn gaussian_vector(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, b) = gaussian_pairs(&mut rng);
        out.push(a);
        if out.len() < n {
            out.push(b);
        }
    }
    out
}

pub fn trace_rms(tr: &TraceRecord<f64>) -> f64 {
    if tr.samples.is_empty() {
        return 0.0;
    }
    (tr.samples.iter().map(|v| v * v).sum::<f64>() / tr.samples.len() as f64).sqrt()
}

pub fn add_noise(tr: &TraceRecord<f64>, spec: &NoiseSpec) -> TraceRecord<f64> {
    if spec.level == 0.0 {
        return tr.clone();
    }
    let std = spec.level * trace_rms(tr);
    let noise = gaussian_vector(spec.seed, tr.samples.len());
    TraceRecord {
        samples: tr
            .samples
            .iter()
            .zip(noise)
            .map(|(v, n)| v + std * n)
            .collect(),
        ..tr.clone()
    }
}

/// Map a wave-solution trace `w` on (0, tau_max) to the corresponding heat
/// trace via the Gaussian-kernel integral
/// `u_H(t) = 1/(2 sqrt(pi t^3)) \int_0^inf tau e^{-tau^2/(4t)} w(tau) dtau`,
/// truncated at `tau_max`. The truncation must leave a tail weight of at
/// most 1e-12 for every requested time; `times` must be positive.
pub fn reznitzkaya(w: &TraceRecord<f64>, times: &[f64]) -> Result<TraceRecord<f64>> {
    let tau_max = w.span();
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    assert!(times.iter().all(|&t| t > 0.0), "heat times must exclude t = 0");
    // e^{-tau_max^2 / (4 t)} <= 1e-12  <=>  tau_max >= 2 sqrt(t ln 1e12).
    let required = 2.0 * (t_max * (1e12f64).ln()).sqrt();
    if tau_max < required {
        return Err(Error::TailWeight { required, have: tau_max });
    }
    let n = w.samples.len();
    let dtau = w.dt;
    let samples: Vec<f64> = times
        .iter()
        .map(|&t| {
            let norm = 1.0 / (2.0 * (std::f64::consts::PI * t.powi(3)).sqrt());
            let mut acc = 0.0;
            for (k, &wk) in w.samples.iter().enumerate() {
                let tau = w.t0 + k as f64 * dtau;
                let weight = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                acc += weight * tau * (-tau * tau / (4.0 * t)).exp() * wk;
            }
            norm * acc * dtau
        })
        .collect();
    let dt_out = if times.len() > 1 { times[1] - times[0] } else { times[0] };
    Ok(TraceRecord {
        node: w.node.clone(),
        edge: w.edge.clone(),
        kind: crate::trace::TraceKind::Dirichlet,
        t0: times[0],
        dt: dt_out,
        samples,
    })
}

/// Required wave horizon for a heat horizon `t_max` at the 1e-12 tail bound.
pub fn reznitzkaya_tau_max(t_max: f64) -> f64 {
    2.0 * (t_max * (1e12f64).ln()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{TraceKind, TraceRecord};

    fn tr(dt: f64, samples: Vec<f64>) -> TraceRecord<f64> {
        TraceRecord::new("n", "e", TraceKind::Dirichlet, dt, samples)
    }

    fn sampled(f: impl Fn(f64) -> f64, dt: f64, span: f64) -> TraceRecord<f64> {
        let n = (span / dt).round() as usize;
        tr(dt, (0..=n).map(|k| f(k as f64 * dt)).collect())
    }

    #[test]
    fn l2_of_constant_one_is_one() {
        let t = sampled(|_| 1.0, 0.01, 1.0);
        assert!((norm_l2_time(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_of_ramp_matches_analytic() {
        let t = sampled(|x| x, 1e-3, 1.0);
        assert!((norm_l2_time(&t) - 1.0 / 3.0f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn l2_matches_direct_summation_oracle() {
        let samples = gaussian_vector(7, 1001);
        let t = tr(0.01, samples.clone());
        // Independent accumulation: explicit trapezoid sum, no shortcuts.
        let mut acc = 0.0;
        for i in 0..samples.len() - 1 {
            acc += 0.5 * (samples[i].powi(2) + samples[i + 1].powi(2)) * 0.01;
        }
        assert!((norm_l2_time(&t) - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn h1_of_ramp() {
        let t = sampled(|x| x, 1e-3, 1.0);
        let expected = (1.0f64 / 3.0 + 1.0).sqrt();
        assert!((norm_h1_time(&t) - expected).abs() < 1e-5);
    }

    #[test]
    fn h1_of_constant_equals_l2() {
        let t = sampled(|_| 2.5, 0.01, 1.0);
        assert!((norm_h1_time(&t) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn h1_of_sine_matches_analytic() {
        use std::f64::consts::PI;
        let t = sampled(|x| (2.0 * PI * x).sin(), 1e-3, 1.0);
        let expected = (0.5 + 2.0 * PI * PI).sqrt();
        assert!((norm_h1_time(&t) - expected).abs() < 1e-3);
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let t = sampled(|x| x.sin(), 0.01, 2.0);
        let out = add_noise(&t, &NoiseSpec::new(0.0, 42));
        assert_eq!(out.samples, t.samples);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let t = sampled(|x| 1.0 + x, 0.01, 2.0);
        let a = add_noise(&t, &NoiseSpec::new(0.05, 9));
        let b = add_noise(&t, &NoiseSpec::new(0.05, 9));
        let c = add_noise(&t, &NoiseSpec::new(0.05, 10));
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn noise_empirical_std_matches_target() {
        let t = sampled(|_| 1.0, 1e-3, 100.0); // 1e5 samples, RMS 1
        let level = 0.01;
        let noisy = add_noise(&t, &NoiseSpec::new(level, 3));
        let diffs: Vec<f64> = noisy.samples.iter().zip(&t.samples).map(|(a, b)| a - b).collect();
        let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        assert!((std - level).abs() / level < 0.05, "std {std}");
    }

    #[test]
    fn transform_of_linear_trace_is_one() {
        // w(tau) = tau corresponds to the unit heat state.
        let tau_max = reznitzkaya_tau_max(1.0) + 0.5;
        let w = sampled(|x| x, 1e-3, tau_max);
        let times: Vec<f64> = (1..=10).map(|k| 0.1 * k as f64).collect();
        let out = reznitzkaya(&w, &times).unwrap();
        for (k, v) in out.samples.iter().enumerate() {
            assert!((v - 1.0).abs() < 1e-8, "t={} -> {v}", times[k]);
        }
    }

    #[test]
    fn transform_of_zero_is_zero() {
        let w = sampled(|_| 0.0, 0.01, reznitzkaya_tau_max(0.5) + 0.5);
        let out = reznitzkaya(&w, &[0.1, 0.5]).unwrap();
        assert!(out.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transform_reports_required_tail() {
        let w = sampled(|x| x, 0.01, 2.0);
        match reznitzkaya(&w, &[1.0]) {
            Err(Error::TailWeight { required, have }) => {
                assert!(required > 10.0 && have == 2.0);
            }
            other => panic!("expected tail-weight error, got {other:?}"),
        }
    }

    #[test]
    fn transform_is_linear() {
        let tau_max = reznitzkaya_tau_max(1.0) + 0.5;
        let w1 = sampled(|x| (0.7 * x).sin(), 2e-3, tau_max);
        let w2 = sampled(|x| (0.1 * x * x).cos(), 2e-3, tau_max);
        let combo = tr(
            2e-3,
            w1.samples
                .iter()
                .zip(&w2.samples)
                .map(|(a, b)| 2.0 * a - 3.0 * b)
                .collect(),
        );
        let times = [0.2, 0.6, 1.0];
        let t1 = reznitzkaya(&w1, &times).unwrap();
        let t2 = reznitzkaya(&w2, &times).unwrap();
        let tc = reznitzkaya(&combo, &times).unwrap();
        for k in 0..times.len() {
            let lin = 2.0 * t1.samples[k] - 3.0 * t2.samples[k];
            assert!((tc.samples[k] - lin).abs() < 1e-10);
        }
    }

    #[test]
    fn norms_are_homogeneous_and_triangular() {
        let a = tr(0.01, gaussian_vector(1, 501));
        let b = tr(0.01, gaussian_vector(2, 501));
        let sum = tr(
            0.01,
            a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
        );
        for norm in [norm_l2_time::<f64>, norm_h1_time::<f64>] {
            let scaled = tr(0.01, a.samples.iter().map(|v| -2.5 * v).collect());
            assert!((norm(&scaled) - 2.5 * norm(&a)).abs() < 1e-10);
            assert!(norm(&sum) <= norm(&a) + norm(&b) + 1e-12);
        }
    }
}
