//! Cost model: forward/swap/decode timing and the three memory-waste formulas.
//!
//! Two operating modes share one struct:
//!
//! * **physical mode** — prefill time is quadratic in context
//!   (`fwd_k1 * c^2 * model_dim`), decode iteration `i` costs
//!   `fwd_k2 * (prefill + i)^2 * model_dim`, and swapping moves bytes over a
//!   link of `swap_bandwidth`.
//! * **unit mode** — one decode iteration is one integer time unit, forward
//!   passes run at `recompute_rate` tokens per unit, and a swap costs the
//!   constant `swap_latency`. Unit mode keeps every duration an integer so
//!   small worked examples are exact.

use crate::error::{Result, SimError};
use serde::{Deserialize, Serialize};

/// Timing and memory coefficients for the simulated server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Memory units per context token.
    pub mem_per_token: f64,
    /// Time per decode iteration in unit mode.
    pub iter_time: f64,
    /// Prefill coefficient (physical mode).
    pub fwd_k1: f64,
    /// Decode coefficient (physical mode).
    pub fwd_k2: f64,
    /// Model dimension scale (physical mode).
    pub model_dim: f64,
    /// Token-memory moved per time unit when swapping (physical mode).
    pub swap_bandwidth: f64,
    /// When set, all timing collapses to integer units.
    pub unit_mode: bool,
    /// Tokens recomputed per time unit in unit mode.
    pub recompute_rate: f64,
    /// Constant swap time in unit mode.
    pub swap_latency: f64,
}

impl CostModel {
    /// Unit-mode model: one token per iteration, one memory unit per token,
    /// forward passes at one token per unit, zero-cost swaps. These are the
    /// settings frozen for the three-request reference trace.
    pub fn unit() -> Self {
        Self {
            mem_per_token: 1.0,
            iter_time: 1.0,
            fwd_k1: 1.0,
            fwd_k2: 1.0,
            model_dim: 1.0,
            swap_bandwidth: 1.0,
            unit_mode: true,
            recompute_rate: 1.0,
            swap_latency: 0.0,
        }
    }

    /// Physical-mode model with explicit coefficients.
    pub fn physical(
        mem_per_token: f64,
        fwd_k1: f64,
        fwd_k2: f64,
        model_dim: f64,
        swap_bandwidth: f64,
    ) -> Self {
        Self {
            mem_per_token,
            iter_time: 1.0,
            fwd_k1,
            fwd_k2,
            model_dim,
            swap_bandwidth,
            unit_mode: false,
            recompute_rate: 1.0,
            swap_latency: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mem_per_token", self.mem_per_token),
            ("iter_time", self.iter_time),
            ("fwd_k1", self.fwd_k1),
            ("fwd_k2", self.fwd_k2),
            ("model_dim", self.model_dim),
            ("swap_bandwidth", self.swap_bandwidth),
            ("recompute_rate", self.recompute_rate),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::Invalid {
                    what: "cost model",
                    reason: format!("{name} must be finite and > 0, got {v}"),
                });
            }
        }
        if !self.swap_latency.is_finite() || self.swap_latency < 0.0 {
            return Err(SimError::Invalid {
                what: "cost model",
                reason: format!("swap_latency must be >= 0, got {}", self.swap_latency),
            });
        }
        Ok(())
    }
}

fn check_non_negative(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(SimError::domain(format!(
            "{name} must be finite and >= 0, got {v}"
        )));
    }
    Ok(())
}

/// Time for a forward pass over a context of `c` tokens (prefill or
/// recomputation after a discard).
pub fn t_fwd(c: u64, cm: &CostModel) -> f64 {
    if c == 0 {
        return 0.0;
    }
    if cm.unit_mode {
        (c as f64 / cm.recompute_rate).ceil()
    } else {
        let c = c as f64;
        cm.fwd_k1 * c * c * cm.model_dim
    }
}

/// Time to move a context of `c` tokens between device and host memory.
pub fn t_swap(c: u64, cm: &CostModel) -> f64 {
    if cm.unit_mode {
        cm.swap_latency
    } else {
        c as f64 * cm.mem_per_token / cm.swap_bandwidth
    }
}

/// Sum of cubes 1^3 + ... + n^3 = (n(n+1)/2)^2.
fn sum_cubes(n: f64) -> f64 {
    let s = n * (n + 1.0) / 2.0;
    s * s
}

/// Sum of squares 1^2 + ... + n^2 = n(n+1)(2n+1)/6.
fn sum_squares(n: f64) -> f64 {
    n * (n + 1.0) * (2.0 * n + 1.0) / 6.0
}

/// Time to decode `n_decode` tokens on top of an existing context of
/// `n_prefill` tokens.
pub fn decode_time(n_prefill: u64, n_decode: u64, cm: &CostModel) -> f64 {
    if n_decode == 0 {
        return 0.0;
    }
    if cm.unit_mode {
        n_decode as f64 * cm.iter_time
    } else {
        // sum_{i=1..n} k2 * (p + i)^2 * d, via the square-sum closed form.
        let p = n_prefill as f64;
        let n = n_decode as f64;
        cm.fwd_k2 * cm.model_dim * (sum_squares(p + n) - sum_squares(p))
    }
}

/// Per-iteration time of the token that brings the context from `c` to `c+1`.
pub fn iteration_time(c: u64, cm: &CostModel) -> f64 {
    if cm.unit_mode {
        cm.iter_time
    } else {
        let next = (c + 1) as f64;
        cm.fwd_k2 * next * next * cm.model_dim
    }
}

/// Area under the memory ramp while decoding `n_decode` tokens from a base
/// context of `base` tokens: sum_{i=1..n} (base + i) * mem_per_token * tau_i,
/// where tau_i is that iteration's duration.
pub fn decode_ramp_area(base: u64, n_decode: u64, cm: &CostModel) -> f64 {
    if n_decode == 0 {
        return 0.0;
    }
    let b = base as f64;
    let n = n_decode as f64;
    if cm.unit_mode {
        // sum (b + i) = n*b + n(n+1)/2
        cm.mem_per_token * cm.iter_time * (n * b + n * (n + 1.0) / 2.0)
    } else {
        // sum (b + i) * k2 (b + i)^2 d = k2 d [ S3(b+n) - S3(b) ]
        cm.mem_per_token * cm.fwd_k2 * cm.model_dim * (sum_cubes(b + n) - sum_cubes(b))
    }
}

/// Memory wasted by keeping a context of `c_i` tokens resident for the whole
/// call: `t_int * c_i * m`.
pub fn waste_preserve(t_int: f64, c_i: u64, m: f64) -> Result<f64> {
    check_non_negative("t_int", t_int)?;
    check_non_negative("m", m)?;
    Ok(t_int * c_i as f64 * m)
}

/// Memory wasted by discarding and recomputing: the recomputation occupies
/// the request's own context plus stalls co-resident context for the whole
/// forward pass: `t_fwd(c_i) * c_i * m + t_fwd(c_i) * c_other * m`.
pub fn waste_discard(c_i: u64, c_other: u64, m: f64, cm: &CostModel) -> Result<f64> {
    check_non_negative("m", m)?;
    let fwd = t_fwd(c_i, cm);
    Ok(fwd * c_i as f64 * m + fwd * c_other as f64 * m)
}

/// Memory wasted by swapping out and back in, stalling the whole batch for
/// both transfers: `2 * t_swap(c_i) * c_batch * m`.
pub fn waste_swap(c_i: u64, c_batch: u64, m: f64, cm: &CostModel) -> Result<f64> {
    check_non_negative("m", m)?;
    if c_i == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * t_swap(c_i, cm) * c_batch as f64 * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cm() -> CostModel {
        CostModel::unit()
    }

    #[test]
    fn waste_preserve_direct_values() {
        assert_eq!(waste_preserve(2.0, 5, 1.0).unwrap(), 10.0);
        assert_eq!(waste_preserve(0.0, 100, 1.0).unwrap(), 0.0);
        // Chatbot mean duration, 120-token context, 2 units/token.
        let w = waste_preserve(28.6, 120, 2.0).unwrap();
        assert!((w - 6864.0).abs() < 1e-9);
    }

    #[test]
    fn waste_preserve_rejects_negatives() {
        assert!(waste_preserve(-1.0, 5, 1.0).is_err());
        assert!(waste_preserve(1.0, 5, -1.0).is_err());
    }

    #[test]
    fn waste_discard_unit_mode() {
        let cm = unit_cm();
        assert_eq!(waste_discard(0, 0, 1.0, &cm).unwrap(), 0.0);
        // recompute_rate = 1: t_fwd(2) = 2, waste = 2*2*1 = 4.
        assert_eq!(waste_discard(2, 0, 1.0, &cm).unwrap(), 4.0);
    }

    #[test]
    fn waste_discard_quadratic_fwd() {
        // Oracle: t_fwd(64) * (64 + 192) * m with the quadratic prefill model.
        let cm = CostModel::physical(1.0, 1e-6, 1e-6, 8.0, 100.0);
        let fwd = 1e-6 * 64.0 * 64.0 * 8.0;
        let expect = fwd * (64.0 + 192.0);
        let got = waste_discard(64, 192, 1.0, &cm).unwrap();
        assert!((got - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn waste_swap_values() {
        let cm = CostModel::physical(1.0, 1e-6, 1e-6, 1.0, 200.0);
        assert_eq!(waste_swap(0, 400, 1.0, &cm).unwrap(), 0.0);
        // 2 * (100/200) * 400 * 1 = 400.
        assert_eq!(waste_swap(100, 400, 1.0, &cm).unwrap(), 400.0);
    }

    #[test]
    fn t_fwd_modes() {
        let cm = unit_cm();
        assert_eq!(t_fwd(0, &cm), 0.0);
        assert_eq!(t_fwd(3, &cm), 3.0);

        let phys = CostModel::physical(1.0, 1e-6, 1e-6, 4096.0, 100.0);
        let got = t_fwd(512, &phys);
        let expect = 1e-6 * 512.0 * 512.0 * 4096.0;
        assert!((got - expect).abs() / expect < 1e-12);
        assert!((got - 1073.7).abs() < 0.1);
    }

    #[test]
    fn t_swap_modes() {
        let phys = CostModel::physical(1.0, 1e-6, 1e-6, 1.0, 100.0);
        assert_eq!(t_swap(0, &phys), 0.0);
        assert_eq!(t_swap(200, &phys), 2.0);

        let mut unit = unit_cm();
        unit.swap_latency = 1.0;
        assert_eq!(t_swap(0, &unit), 1.0);
        assert_eq!(t_swap(10_000, &unit), 1.0);
    }

    #[test]
    fn decode_time_values() {
        let cm = unit_cm();
        assert_eq!(decode_time(5, 0, &cm), 0.0);
        assert_eq!(decode_time(0, 6, &cm), 6.0);

        // Hand summation: k2=1e-6, d=1, p=2, n=3 -> 1e-6 * (9 + 16 + 25).
        let phys = CostModel::physical(1.0, 1e-6, 1e-6, 1.0, 100.0);
        let got = decode_time(2, 3, &phys);
        assert!((got - 5.0e-5).abs() < 1e-18);
    }

    #[test]
    fn decode_time_matches_naive_sum() {
        let phys = CostModel::physical(1.0, 3e-7, 7e-7, 3.5, 100.0);
        for &(p, n) in &[(0u64, 1u64), (3, 9), (17, 40), (100, 250)] {
            let naive: f64 = (1..=n)
                .map(|i| 7e-7 * ((p + i) as f64).powi(2) * 3.5)
                .sum();
            let closed = decode_time(p, n, &phys);
            assert!((closed - naive).abs() <= 1e-12 * naive.max(1.0), "p={p} n={n}");
        }
    }

    #[test]
    fn ramp_area_matches_naive_sum() {
        let phys = CostModel::physical(2.0, 3e-7, 7e-7, 3.5, 100.0);
        for &(b, n) in &[(0u64, 1u64), (5, 12), (40, 80)] {
            let naive: f64 = (1..=n)
                .map(|i| {
                    let c = (b + i) as f64;
                    c * 2.0 * (7e-7 * c * c * 3.5)
                })
                .sum();
            let closed = decode_ramp_area(b, n, &phys);
            assert!((closed - naive).abs() <= 1e-12 * naive.max(1.0), "b={b} n={n}");
        }
        // Unit mode, base 0, m=1: arithmetic series L(L+1)/2.
        assert_eq!(decode_ramp_area(0, 3, &unit_cm()), 6.0);
    }

    #[test]
    fn wastes_monotone_in_args() {
        let cm = CostModel::physical(1.0, 1e-5, 1e-5, 2.0, 50.0);
        let mut rng_state = 0x243f6a88u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 33) % 500
        };
        for _ in 0..200 {
            let (a, b) = (next(), next());
            let (lo, hi) = (a.min(b), a.max(b));
            let fixed = next();
            assert!(
                waste_preserve(lo as f64, fixed, 1.0).unwrap()
                    <= waste_preserve(hi as f64, fixed, 1.0).unwrap()
            );
            assert!(
                waste_preserve(fixed as f64, lo, 1.0).unwrap()
                    <= waste_preserve(fixed as f64, hi, 1.0).unwrap()
            );
            assert!(
                waste_discard(fixed, lo, 1.0, &cm).unwrap()
                    <= waste_discard(fixed, hi, 1.0, &cm).unwrap()
            );
            assert!(
                waste_discard(lo, fixed, 1.0, &cm).unwrap()
                    <= waste_discard(hi, fixed, 1.0, &cm).unwrap()
            );
            assert!(
                waste_swap(lo, fixed, 1.0, &cm).unwrap() <= waste_swap(hi, fixed, 1.0, &cm).unwrap()
            );
            assert!(
                waste_swap(fixed, lo, 1.0, &cm).unwrap() <= waste_swap(fixed, hi, 1.0, &cm).unwrap()
            );
        }
    }

    #[test]
    fn waste_preserve_linear_in_each_argument() {
        for a in [0.0, 0.5, 2.0, 7.25] {
            let base = waste_preserve(3.0, 11, 1.5).unwrap();
            let scaled = waste_preserve(a * 3.0, 11, 1.5).unwrap();
            assert!((scaled - a * base).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_mode_discard_self_cost_is_quadratic() {
        let cm = unit_cm();
        for c in [1u64, 2, 7, 31] {
            let w = waste_discard(c, 0, 1.0, &cm).unwrap();
            assert_eq!(w, (c * c) as f64);
        }
    }
}
