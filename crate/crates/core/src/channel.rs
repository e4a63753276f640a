//! Closed-form mmWave vehicle-to-infrastructure channel: UPA steering
//! vectors, beam gains, path loss, received signal strength and labels.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inner-product magnitudes below this are roundoff around an exact null.
const NULL_MAGNITUDE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaConfig {
    /// Elements per axis; the array has `q²` elements.
    pub q: usize,
    /// Use the half-wavelength phase factor π in the steering phase.
    pub include_pi: bool,
}

impl Default for AntennaConfig {
    fn default() -> Self {
        Self { q: 4, include_pi: true }
    }
}

impl AntennaConfig {
    pub fn elements(&self) -> usize {
        self.q * self.q
    }

    fn phase_factor(&self) -> f64 {
        if self.include_pi {
            PI
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RssCombine {
    /// Sum of per-path `R − Ω` in dB.
    #[default]
    DbSum,
    /// Sum of per-path linear powers, reported in dB.
    PowerSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Reference path loss at 1 m, dB.
    pub p0_db: f64,
    /// Path-loss exponent.
    pub eta: f64,
    /// Standard deviation of per-path large-scale fading, dB.
    pub xi_std_db: f64,
    /// Handover threshold, dBm.
    pub s_th_dbm: f64,
    pub gain_floor_db: f64,
    pub combine: RssCombine,
    /// Transmit power added to the path sum, dBm.
    pub tx_power_dbm: f64,
    /// Extra loss on non-line-of-sight paths, dB.
    pub reflection_loss_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            p0_db: 61.4,
            eta: 2.0,
            xi_std_db: 2.0,
            s_th_dbm: -47.0,
            gain_floor_db: -200.0,
            combine: RssCombine::DbSum,
            tx_power_dbm: 0.0,
            reflection_loss_db: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("path-loss exponent {} must be positive", self.eta)));
        }
        if self.gain_floor_db > -100.0 {
            return Err(Error::InvalidArgument(format!("gain floor {} dB above -100 dB", self.gain_floor_db)));
        }
        if !(self.xi_std_db >= 0.0) {
            return Err(Error::InvalidArgument(format!("fading std {}", self.xi_std_db)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    /// Angle from the array normal, radians.
    pub azimuth: f64,
    /// Angle in the array plane measured from the array x axis, radians.
    pub elevation: f64,
    /// Path length, meters.
    pub length: f64,
    pub is_los: bool,
    /// Sampled large-scale fading for this path, dB.
    pub fading_db: f64,
}

/// Steering angles `(θ, φ)` of direction `(u_x, u_y, u_n)` in the array
/// frame, where `u_n` points along the array normal.
pub fn direction_angles(u_x: f64, u_y: f64, u_n: f64) -> (f64, f64) {
    let norm = (u_x * u_x + u_y * u_y + u_n * u_n).sqrt();
    let theta = (u_n / norm).clamp(-1.0, 1.0).acos();
    let phi = u_y.atan2(u_x);
    (theta, phi)
}

fn steering(q: usize, phase: f64) -> impl Iterator<Item = Complex64> {
    let scale = 1.0 / (q as f64).sqrt();
    (0..q).map(move |n| Complex64::from_polar(scale, phase * n as f64))
}

/// UPA response `a_x ⊗ a_y`, unit norm, length `q²`.
pub fn array_response(theta: f64, phi: f64, antenna: &AntennaConfig) -> Vec<Complex64> {
    let c = antenna.phase_factor();
    let ux = c * theta.sin() * phi.cos();
    let uy = c * theta.sin() * phi.sin();
    let ay: Vec<Complex64> = steering(antenna.q, uy).collect();
    steering(antenna.q, ux)
        .flat_map(|x| ay.iter().map(move |&y| x * y))
        .collect()
}

/// `Σ f_i a_i`; codewords are stored already conjugated.
pub fn beam_response(f: &[Complex64], a: &[Complex64]) -> Complex64 {
    f.iter().zip(a).map(|(x, y)| x * y).sum()
}

/// `10·log10 |f·a|`, clamped below at the floor and above at 0 dB.
pub fn gain_db_from_magnitude(magnitude: f64, gain_floor_db: f64) -> f64 {
    if magnitude < NULL_MAGNITUDE {
        return gain_floor_db;
    }
    let floor = 10f64.powf(gain_floor_db / 10.0);
    10.0 * magnitude.clamp(floor, 1.0).log10()
}

pub fn beam_gain_db(f: &[Complex64], theta: f64, phi: f64, antenna: &AntennaConfig, gain_floor_db: f64) -> f64 {
    let a = array_response(theta, phi, antenna);
    gain_db_from_magnitude(beam_response(f, &a).norm(), gain_floor_db)
}

/// `Ω = P0 + 10η·log10(l) + ξ`, plus the reflection loss on NLoS paths.
pub fn path_loss_db(path: &PropagationPath, params: &ChannelParams, xi_db: f64) -> Result<f64> {
    if !(path.length >= 1.0) {
        return Err(Error::InvalidArgument(format!("path length {} m below the 1 m reference", path.length)));
    }
    let extra = if path.is_los { 0.0 } else { params.reflection_loss_db };
    Ok(params.p0_db + 10.0 * params.eta * path.length.log10() + xi_db + extra)
}

fn combine(terms: impl Iterator<Item = f64>, params: &ChannelParams) -> f64 {
    let total = match params.combine {
        RssCombine::DbSum => terms.sum(),
        RssCombine::PowerSum => 10.0 * terms.map(|t| 10f64.powf(t / 10.0)).sum::<f64>().log10(),
    };
    params.tx_power_dbm + total
}

/// Received signal strength of one vehicle under beam `f`, dBm.
pub fn rss(paths: &[PropagationPath], f: &[Complex64], params: &ChannelParams, antenna: &AntennaConfig) -> Result<f64> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("rss needs at least one propagation path".into()));
    }
    let terms = paths
        .iter()
        .map(|p| {
            let r = beam_gain_db(f, p.azimuth, p.elevation, antenna, params.gain_floor_db);
            Ok(r - path_loss_db(p, params, p.fading_db)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(terms.into_iter(), params))
}

/// Sampling region of the codebook grid, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookGrid {
    pub theta_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for CodebookGrid {
    /// Directions below the array plane, out to 80° off the normal.
    fn default() -> Self {
        Self { theta_max: 80f64.to_radians(), phi_min: -PI, phi_max: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamCodebook {
    pub beams: Vec<Vec<Complex64>>,
    /// Steering angles `(θ, φ)` each codeword is matched to.
    pub angles: Vec<(f64, f64)>,
}

impl BeamCodebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }
}

/// Conjugate steering vectors on a `rows × cols` cell-centered (θ, φ) grid;
/// `rows = ⌊√|F|⌋` and surplus cells in the last θ row are dropped.
pub fn build_codebook_with_grid(antenna: &AntennaConfig, size: usize, grid: &CodebookGrid) -> Result<BeamCodebook> {
    if size == 0 {
        return Err(Error::InvalidArgument("codebook size must be at least 1".into()));
    }
    if antenna.q == 0 {
        return Err(Error::InvalidArgument("antenna needs at least one element per axis".into()));
    }
    let rows = (size as f64).sqrt().floor() as usize;
    let cols = size.div_ceil(rows);
    let mut angles = Vec::with_capacity(size);
    'outer: for i in 0..rows {
        let theta = grid.theta_max * (i as f64 + 0.5) / rows as f64;
        for j in 0..cols {
            if angles.len() == size {
                break 'outer;
            }
            let phi = grid.phi_min + (grid.phi_max - grid.phi_min) * (j as f64 + 0.5) / cols as f64;
            angles.push((theta, phi));
        }
    }
    let beams = angles
        .iter()
        .map(|&(t, p)| array_response(t, p, antenna).into_iter().map(|z| z.conj()).collect())
        .collect();
    Ok(BeamCodebook { beams, angles })
}

pub fn build_codebook(antenna: &AntennaConfig, size: usize) -> Result<BeamCodebook> {
    build_codebook_with_grid(antenna, size, &CodebookGrid::default())
}

/// `Σ_v S_v(f)` for every codeword.
pub fn beam_scores(
    vehicles: &[Vec<PropagationPath>],
    codebook: &BeamCodebook,
    params: &ChannelParams,
    antenna: &AntennaConfig,
) -> Result<Vec<f64>> {
    if vehicles.is_empty() || vehicles.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every vehicle needs at least one path".into()));
    }
    codebook
        .beams
        .iter()
        .map(|f| vehicles.iter().map(|paths| rss(paths, f, params, antenna)).sum())
        .collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Codeword maximizing the summed RSS; ties go to the lower index.
pub fn optimal_beam(
    vehicles: &[Vec<PropagationPath>],
    codebook: &BeamCodebook,
    params: &ChannelParams,
    antenna: &AntennaConfig,
) -> Result<usize> {
    Ok(argmax(&beam_scores(vehicles, codebook, params, antenna)?))
}

/// RSS of one vehicle under its own best codeword.
pub fn best_rss(
    paths: &[PropagationPath],
    codebook: &BeamCodebook,
    params: &ChannelParams,
    antenna: &AntennaConfig,
) -> Result<f64> {
    let scores = beam_scores(std::slice::from_ref(&paths.to_vec()), codebook, params, antenna)?;
    Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// 1 iff `s > s_th`.
pub fn link_status(s_dbm: f64, s_th_dbm: f64) -> u8 {
    u8::from(s_dbm > s_th_dbm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn los(theta: f64, phi: f64, length: f64) -> PropagationPath {
        PropagationPath { azimuth: theta, elevation: phi, length, is_los: true, fading_db: 0.0 }
    }

    #[test]
    fn boresight_response_is_flat() {
        let a = array_response(0.0, 0.0, &AntennaConfig { q: 2, include_pi: true });
        assert_eq!(a.len(), 4);
        for z in a {
            assert!((z - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn response_matches_explicit_kronecker() {
        let ant = AntennaConfig { q: 4, include_pi: true };
        let (theta, phi) = (PI / 4.0, 0.0);
        let a = array_response(theta, phi, &ant);
        for nx in 0..4 {
            for ny in 0..4 {
                let px = PI * nx as f64 * theta.sin() * phi.cos();
                let py = PI * ny as f64 * theta.sin() * phi.sin();
                let expect = Complex64::new((px + py).cos(), (px + py).sin()) / 4.0;
                assert!((a[nx * 4 + ny] - expect).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn matched_beam_is_zero_db() {
        for include_pi in [true, false] {
            let ant = AntennaConfig { q: 4, include_pi };
            let f: Vec<_> = array_response(0.7, -1.2, &ant).iter().map(|z| z.conj()).collect();
            assert!(beam_gain_db(&f, 0.7, -1.2, &ant, -200.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_beam_hits_floor() {
        let ant = AntennaConfig { q: 4, include_pi: true };
        // sinθ·cosφ = 1/2 puts a full 2π of phase across four elements.
        let f: Vec<_> = array_response(PI / 6.0, 0.0, &ant).iter().map(|z| z.conj()).collect();
        assert_eq!(beam_gain_db(&f, 0.0, 0.0, &ant, -200.0), -200.0);
    }

    #[test]
    fn mismatched_gain_matches_brute_force() {
        let ant = AntennaConfig { q: 2, include_pi: true };
        let f: Vec<_> = array_response(0.0, 0.0, &ant).iter().map(|z| z.conj()).collect();
        let (t, p) = (0.3f64, 0.1f64);
        let mut acc = Complex64::new(0.0, 0.0);
        for nx in 0..2 {
            for ny in 0..2 {
                let ph = PI * (nx as f64 * t.sin() * p.cos() + ny as f64 * t.sin() * p.sin());
                acc += Complex64::new(0.5, 0.0) * Complex64::from_polar(0.5, ph);
            }
        }
        let expect = 10.0 * acc.norm().log10();
        assert!((beam_gain_db(&f, t, p, &ant, -200.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn path_loss_examples() {
        let mut params = ChannelParams { p0_db: 60.0, ..Default::default() };
        assert_eq!(path_loss_db(&los(0.0, 0.0, 1.0), &params, 0.0).unwrap(), 60.0);
        assert!((path_loss_db(&los(0.0, 0.0, 10.0), &params, 0.0).unwrap() - 80.0).abs() < 1e-12);
        params.eta = 2.5;
        assert!((path_loss_db(&los(0.0, 0.0, 100.0), &params, 0.0).unwrap() - 110.0).abs() < 1e-12);
        assert!(path_loss_db(&los(0.0, 0.0, 0.5), &params, 0.0).is_err());
    }

    #[test]
    fn rss_examples() {
        let ant = AntennaConfig::default();
        let params = ChannelParams { p0_db: 60.0, ..Default::default() };
        let f: Vec<_> = array_response(0.4, -0.5, &ant).iter().map(|z| z.conj()).collect();
        let p = los(0.4, -0.5, 10.0);
        let single = rss(&[p], &f, &params, &ant).unwrap();
        assert!((single + 80.0).abs() < 1e-9);
        let double = rss(&[p, p], &f, &params, &ant).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-9);
        assert!(rss(&[], &f, &params, &ant).is_err());
    }

    #[test]
    fn blocked_los_lowers_power_sum_rss() {
        let ant = AntennaConfig::default();
        let params = ChannelParams { combine: RssCombine::PowerSum, ..Default::default() };
        let cb = build_codebook(&ant, 16).unwrap();
        let los_path = los(0.5, -0.6, 20.0);
        let refl = PropagationPath { is_los: false, length: 21.0, azimuth: 0.6, elevation: -1.0, fading_db: 0.0 };
        let both = vec![los_path, refl];
        let best = optimal_beam(&[both.clone()], &cb, &params, &ant).unwrap();
        let before = rss(&both, &cb.beams[best], &params, &ant).unwrap();
        let after = rss(&[refl], &cb.beams[best], &params, &ant).unwrap();
        assert!(after < before);
    }

    #[test]
    fn codebook_is_unit_norm_and_matched() {
        let ant = AntennaConfig::default();
        let cb = build_codebook(&ant, 16).unwrap();
        assert_eq!(cb.len(), 16);
        for (f, &(t, p)) in cb.beams.iter().zip(&cb.angles) {
            let norm: f64 = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(beam_gain_db(f, t, p, &ant, -200.0).abs() < 1e-12);
        }
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    let ip: Complex64 = cb.beams[i].iter().zip(&cb.beams[j]).map(|(a, b)| a * b.conj()).sum();
                    assert!(ip.norm() < 1.0 - 1e-9, "beams {i} and {j}");
                }
            }
        }
        assert_eq!(build_codebook(&ant, 7).unwrap().len(), 7);
        assert!(build_codebook(&ant, 0).is_err());
    }

    #[test]
    fn aligned_path_selects_its_codeword() {
        let ant = AntennaConfig::default();
        let params = ChannelParams::default();
        let cb = build_codebook(&ant, 16).unwrap();
        let (t, p) = cb.angles[3];
        assert_eq!(optimal_beam(&[vec![los(t, p, 15.0)]], &cb, &params, &ant).unwrap(), 3);
    }

    #[test]
    fn symmetric_vehicles_pick_mid_grid_or_lowest_tie() {
        let ant = AntennaConfig::default();
        let params = ChannelParams::default();
        let cb = build_codebook(&ant, 16).unwrap();
        // Mirror images about φ = −π/2; codeword (i, j) mirrors to (i, 3 − j).
        let a = los(0.6, -0.9, 15.0);
        let b = los(0.6, -PI + 0.9, 15.0);
        let vehicles = [vec![a], vec![b]];
        let best = optimal_beam(&vehicles, &cb, &params, &ant).unwrap();
        let mut brute = (f64::NEG_INFINITY, usize::MAX);
        for (i, f) in cb.beams.iter().enumerate() {
            let s: f64 = vehicles.iter().map(|v| rss(v, f, &params, &ant).unwrap()).sum();
            if s > brute.0 {
                brute = (s, i);
            }
        }
        assert_eq!(best, brute.1);
        let mirror = (best / 4) * 4 + 3 - best % 4;
        let scores = beam_scores(&vehicles, &cb, &params, &ant).unwrap();
        assert!((scores[best] - scores[mirror]).abs() < 1e-9);
        assert!(best <= mirror);
    }

    #[test]
    fn link_status_is_strict() {
        assert_eq!(link_status(-47.0, -47.0), 0);
        assert_eq!(link_status(-40.0, -47.0), 1);
        assert_eq!(link_status(-50.0, -47.0), 0);
    }

    #[test]
    fn params_validation() {
        assert!(ChannelParams::default().validate().is_ok());
        assert!(ChannelParams { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(ChannelParams { gain_floor_db: -50.0, ..Default::default() }.validate().is_err());
    }
}
