//! Per-ray channel parameters (free-space amplitude with per-interaction
//! losses), RSSI aggregation over a pair's ray set, and the distribution
//! comparisons (MAE, KL divergence) used to judge generated rays as a
//! prior for channel-gain estimation.

use crate::geometry::dir_from_angles;
use crate::tracer::{InteractionType, RaySequence};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light, m/s.
pub const C: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("ray has zero path length")]
    ZeroPathLength,
    #[error("ray has no hops")]
    EmptyRay,
    #[error("pair coverage mismatch: {a} vs {b} entries")]
    CoverageMismatch { a: usize, b: usize },
    #[error("pair ({index}) differs between reports")]
    PairMismatch { index: usize },
    #[error("empty RSSI list")]
    EmptyList,
}

/// Frequency, transmit power and per-interaction amplitude losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub frequency_hz: f64,
    pub tx_power_dbm: f64,
    pub reflection_db: f64,
    pub penetration_db: f64,
    pub diffraction_db: f64,
    /// RSSI reported for a pair with no rays.
    pub floor_dbm: f64,
    /// Phase-coherent ray summation instead of the power sum.
    pub coherent: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            frequency_hz: 28e9,
            tx_power_dbm: 0.0,
            reflection_db: 6.0,
            penetration_db: 10.0,
            diffraction_db: 15.0,
            floor_dbm: -150.0,
            coherent: false,
        }
    }
}

impl ChannelParams {
    pub fn wavelength(&self) -> f64 {
        C / self.frequency_hz
    }
}

/// Discrete multipath component of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayChannelTerms {
    /// Linear amplitude.
    pub a_k: f64,
    /// One-way delay, seconds.
    pub tau_k: f64,
    pub phi_dep: f64,
    pub theta_dep: f64,
    pub phi_arr: f64,
    pub theta_arr: f64,
}

/// Free-space amplitude with dB losses per surface interaction:
/// `a_k = lambda / (4 pi d) * 10^(-loss_db / 20)`.
pub fn ray_terms(r: &RaySequence, p: &ChannelParams) -> Result<RayChannelTerms, ChannelError> {
    if r.hops.is_empty() {
        return Err(ChannelError::EmptyRay);
    }
    if r.path_length <= 0.0 {
        return Err(ChannelError::ZeroPathLength);
    }
    let mut loss_db = 0.0;
    for h in &r.hops {
        loss_db += match h.itype {
            InteractionType::Reflection => p.reflection_db,
            InteractionType::Penetration => p.penetration_db,
            InteractionType::Diffraction => p.diffraction_db,
            InteractionType::Launch | InteractionType::Arrival => 0.0,
        };
    }
    let a_k = p.wavelength() / (4.0 * std::f64::consts::PI * r.path_length)
        * 10f64.powf(-loss_db / 20.0);
    let first = r.hops.first().expect("nonempty");
    let last = r.hops.last().expect("nonempty");
    // Arrival angles describe the incoming direction of the final segment.
    let arr = crate::geometry::angles_from_unit(dir_from_angles(last.action));
    Ok(RayChannelTerms {
        a_k,
        tau_k: r.path_length / C,
        phi_dep: first.action.phi(),
        theta_dep: first.action.theta(),
        phi_arr: arr.phi(),
        theta_arr: arr.theta(),
    })
}

/// Aggregate received power over a ray set, in dBm. Non-coherent power sum
/// by default; the coherent flag combines complex amplitudes with their
/// delay phases first.
pub fn rssi(rays: &[RaySequence], p: &ChannelParams) -> f64 {
    if rays.is_empty() {
        return p.floor_dbm;
    }
    let power = if p.coherent {
        let (mut re, mut im) = (0.0, 0.0);
        for r in rays {
            if let Ok(t) = ray_terms(r, p) {
                let phase = -2.0 * std::f64::consts::PI * p.frequency_hz * t.tau_k;
                re += t.a_k * phase.cos();
                im += t.a_k * phase.sin();
            }
        }
        re * re + im * im
    } else {
        rays.iter()
            .filter_map(|r| ray_terms(r, p).ok())
            .map(|t| t.a_k * t.a_k)
            .sum()
    };
    if power <= 0.0 {
        return p.floor_dbm;
    }
    p.tx_power_dbm + 10.0 * power.log10()
}

/// Per-pair RSSI records, aligned by construction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRssi {
    pub tx: [f64; 3],
    pub rx: [f64; 3],
    pub rssi_dbm: f64,
}

/// Mean absolute RSSI gap over identical (tx, rx) coverage.
pub fn rssi_mae(a: &[PairRssi], b: &[PairRssi]) -> Result<f64, ChannelError> {
    if a.len() != b.len() {
        return Err(ChannelError::CoverageMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(ChannelError::EmptyList);
    }
    let mut total = 0.0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.tx != y.tx || x.rx != y.rx {
            return Err(ChannelError::PairMismatch { index: i });
        }
        total += (x.rssi_dbm - y.rssi_dbm).abs();
    }
    Ok(total / a.len() as f64)
}

/// Shared-bin histograms with additive smoothing, then `KL(a || b)`.
/// Bin edges align to integer multiples of `bin_width_db`.
pub fn kl_divergence(
    a: &[f64],
    b: &[f64],
    bin_width_db: f64,
    smoothing: f64,
) -> Result<f64, ChannelError> {
    if a.is_empty() || b.is_empty() {
        return Err(ChannelError::EmptyList);
    }
    let all_min = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let all_max = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = (all_min / bin_width_db).floor() as i64;
    let hi = (all_max / bin_width_db).floor() as i64;
    let n_bins = (hi - lo + 1) as usize;
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![smoothing; n_bins];
        for x in xs {
            let idx = ((x / bin_width_db).floor() as i64 - lo) as usize;
            h[idx.min(n_bins - 1)] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.into_iter().map(|v| v / total).collect()
    };
    let pa = hist(a);
    let pb = hist(b);
    Ok(pa
        .iter()
        .zip(&pb)
        .map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum())
}

/// Histogram summary attached to channel reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub mae_db: f64,
    pub kl_div: f64,
    pub bin_width_db: f64,
    pub n_pairs: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngleAction, Vec3};
    use crate::tracer::Hop;

    fn los_ray(d: f64) -> RaySequence {
        RaySequence {
            hops: vec![Hop {
                state: Vec3::ZERO,
                action: AngleAction::new(0.0, std::f64::consts::FRAC_PI_2),
                itype: InteractionType::Launch,
            }],
            tx: Vec3::ZERO,
            rx: Vec3::new(d, 0.0, 0.0),
            reached: true,
            miss_distance: 0.0,
            path_length: d,
        }
    }

    fn reflected_ray(d: f64) -> RaySequence {
        let mut r = los_ray(d);
        r.hops.push(Hop {
            state: Vec3::new(d / 2.0, 0.0, 0.0),
            action: AngleAction::new(0.0, std::f64::consts::FRAC_PI_2),
            itype: InteractionType::Reflection,
        });
        r
    }

    #[test]
    fn free_space_los_amplitude() {
        let p = ChannelParams::default();
        let t = ray_terms(&los_ray(1.0), &p).unwrap();
        // lambda / (4 pi) at 28 GHz, checked in dB.
        let expect = (C / 28e9) / (4.0 * std::f64::consts::PI);
        assert!((t.a_k - expect).abs() < 1e-12);
        let db = 20.0 * t.a_k.log10();
        assert!((db - -61.4).abs() < 0.05, "{db}");
        assert!((t.tau_k - 1.0 / C).abs() < 1e-20);
    }

    #[test]
    fn amplitude_halves_with_double_distance() {
        let p = ChannelParams::default();
        let t1 = ray_terms(&los_ray(2.0), &p).unwrap();
        let t2 = ray_terms(&los_ray(4.0), &p).unwrap();
        assert!((t2.a_k / t1.a_k - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reflection_loss_scales_amplitude() {
        let p = ChannelParams::default();
        let base = ray_terms(&los_ray(3.0), &p).unwrap();
        let refl = ray_terms(&reflected_ray(3.0), &p).unwrap();
        let ratio = refl.a_k / base.a_k;
        assert!((ratio - 10f64.powf(-0.3)).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn rssi_single_double_empty() {
        let p = ChannelParams::default();
        let one = los_ray(2.0);
        let t = ray_terms(&one, &p).unwrap();
        let single = rssi(std::slice::from_ref(&one), &p);
        assert!((single - (p.tx_power_dbm + 20.0 * t.a_k.log10())).abs() < 1e-9);

        let double = rssi(&[one.clone(), one.clone()], &p);
        assert!((double - single - 10.0 * 2f64.log10()).abs() < 1e-9);

        assert_eq!(rssi(&[], &p), p.floor_dbm);
    }

    #[test]
    fn rssi_order_invariant_and_monotone() {
        let p = ChannelParams::default();
        let a = los_ray(2.0);
        let b = reflected_ray(5.0);
        let c = reflected_ray(9.0);
        let fwd = rssi(&[a.clone(), b.clone(), c.clone()], &p);
        let rev = rssi(&[c.clone(), b.clone(), a.clone()], &p);
        assert_eq!(fwd, rev);
        let fewer = rssi(&[a, b], &p);
        assert!(fwd > fewer);
    }

    #[test]
    fn mae_basics() {
        let mk = |vals: &[f64]| -> Vec<PairRssi> {
            vals.iter()
                .enumerate()
                .map(|(i, v)| PairRssi { tx: [i as f64, 0.0, 0.0], rx: [0.0; 3], rssi_dbm: *v })
                .collect()
        };
        let a = mk(&[-60.0, -70.0, -80.0]);
        assert_eq!(rssi_mae(&a, &a).unwrap(), 0.0);
        let b = mk(&[-62.0, -72.0, -82.0]);
        assert!((rssi_mae(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(rssi_mae(&a, &b).unwrap(), rssi_mae(&b, &a).unwrap());
        assert!(rssi_mae(&a, &b[..2]).is_err());
    }

    #[test]
    fn kl_identical_zero_and_nonnegative() {
        let xs: Vec<f64> = (0..400).map(|i| -70.0 + (i % 17) as f64 * 0.5).collect();
        let kl = kl_divergence(&xs, &xs, 1.0, 1e-6).unwrap();
        assert!(kl.abs() < 1e-12);

        let ys: Vec<f64> = xs.iter().map(|v| v + 3.0).collect();
        assert!(kl_divergence(&xs, &ys, 1.0, 1e-6).unwrap() >= 0.0);
    }

    #[test]
    fn kl_matches_direct_histogram_computation() {
        // Two separated Gaussians via a deterministic Box-Muller stream.
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64).max(1e-12)
        };
        let mut gauss = |mu: f64, sigma: f64| -> f64 {
            let u1 = next();
            let u2 = next();
            mu + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let a: Vec<f64> = (0..10_000).map(|_| gauss(-70.0, 1.0)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| gauss(-60.0, 1.0)).collect();
        let got = kl_divergence(&a, &b, 1.0, 1e-6).unwrap();

        // Direct recomputation from the same shared-bin histograms.
        let min = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let max = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = min.floor() as i64;
        let hi = max.floor() as i64;
        let n = (hi - lo + 1) as usize;
        let hist = |xs: &[f64]| -> Vec<f64> {
            let mut h = vec![1e-6; n];
            for x in xs {
                h[((x.floor() as i64 - lo) as usize).min(n - 1)] += 1.0;
            }
            let t: f64 = h.iter().sum();
            h.into_iter().map(|v| v / t).collect()
        };
        let (pa, pb) = (hist(&a), hist(&b));
        let expect: f64 = pa.iter().zip(&pb).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!(got > 1.0, "well-separated distributions should diverge: {got}");
    }
}
