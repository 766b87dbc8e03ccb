//! Seeded synthetic data with known structure.
//!
//! [`generate_synthetic`] produces reconstructed-space cycles built from
//! stationary and drifting latent sources mixed by a random orthogonal
//! matrix, which is returned as ground truth for subspace recovery tests.
//! [`simulate_fleet`] produces raw discharge telemetry for a small fleet of
//! cells with a three-stage capacity fade, used to exercise the full
//! pipeline end to end.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CycleRecord, Sample, StageRange, StageTable};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, serde_matrix};
use crate::psr::EmbeddedCycle;

/// Configuration of the latent-source generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Observed dimension.
    pub j: usize,
    /// Samples per cycle.
    pub k: usize,
    pub n_cycles: usize,
    /// Number of stationary sources.
    pub s_true: usize,
    pub drift_amplitude: f64,
    pub capacity_start_ah: f64,
    pub capacity_fade_ah: f64,
    pub label_noise_ah: f64,
    /// Force every cycle's latent sample moments to match the schedule exactly
    /// (zero mean, identity covariance before drift is applied).
    pub exact_moments: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            j: 9,
            k: 128,
            n_cycles: 100,
            s_true: 4,
            drift_amplitude: 1.0,
            capacity_start_ah: 1.9,
            capacity_fade_ah: 0.3,
            label_noise_ah: 0.002,
            exact_moments: true,
        }
    }
}

/// Per-cycle mean and standard deviation of each drifting source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    /// `mean[i][d]` for cycle `i` and drifting source `d`.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl DriftSchedule {
    /// Drifting source `d` of `n_d` at cycle progress `p = i/(n-1)` has mean
    /// `a·(-1)^d·(1 + d/2)·h_d(p)` and variance `1 + a·(1/2 + d/4)·p`, where
    /// `h_d` is a ramp that starts at onset `o_d = 0.8·d/n_d` and reaches 1
    /// at `p = 1`. Distinct onsets keep the mean profiles linearly
    /// independent, so every drifting direction shifts the mean.
    pub fn new(cfg: &SyntheticConfig) -> Self {
        let n_drift = cfg.j - cfg.s_true;
        let mut mean = Vec::with_capacity(cfg.n_cycles);
        let mut std = Vec::with_capacity(cfg.n_cycles);
        for i in 0..cfg.n_cycles {
            let p = progress(i, cfg.n_cycles);
            let (mut m, mut s) = (Vec::with_capacity(n_drift), Vec::with_capacity(n_drift));
            for d in 0..n_drift {
                let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
                let df = d as f64;
                m.push(cfg.drift_amplitude * sign * (1.0 + 0.5 * df) * ramp(p, d, n_drift));
                s.push((1.0 + cfg.drift_amplitude * (0.5 + 0.25 * df) * p).sqrt());
            }
            mean.push(m);
            std.push(s);
        }
        Self { mean, std }
    }
}

fn ramp(p: f64, d: usize, n_drift: usize) -> f64 {
    let onset = 0.8 * d as f64 / n_drift as f64;
    ((p - onset) / (1.0 - onset)).max(0.0)
}

fn progress(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Ground truth written alongside synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticConfig,
    pub seed: u64,
    /// Orthogonal `J × J` mixing: observed = mixing · latent. The first
    /// `s_true` columns span the stationary subspace.
    #[serde(with = "serde_matrix")]
    pub mixing: DMatrix<f64>,
    pub schedule: DriftSchedule,
}

impl GroundTruth {
    pub fn stationary_basis(&self) -> DMatrix<f64> {
        self.mixing.columns(0, self.config.s_true).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub cycles: Vec<EmbeddedCycle>,
    pub capacities: Vec<f64>,
    pub truth: GroundTruth,
}

/// Draws the latent-source data set described by `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    if cfg.s_true >= cfg.j {
        return Err(Error::validation(format!(
            "synthetic s_true = {} must be smaller than J = {}",
            cfg.s_true, cfg.j
        )));
    }
    if cfg.k <= cfg.j || cfg.n_cycles < 2 {
        return Err(Error::validation(
            "synthetic data needs K > J samples per cycle and at least 2 cycles",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing = random_orthogonal(cfg.j, &mut rng);
    let schedule = DriftSchedule::new(cfg);
    let mut cycles = Vec::with_capacity(cfg.n_cycles);
    let mut capacities = Vec::with_capacity(cfg.n_cycles);
    for i in 0..cfg.n_cycles {
        let mut z = DMatrix::from_fn(cfg.j, cfg.k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if cfg.exact_moments {
            standardize_rows(&mut z)?;
        }
        for d in 0..(cfg.j - cfg.s_true) {
            let (m, s) = (schedule.mean[i][d], schedule.std[i][d]);
            for v in z.row_mut(cfg.s_true + d).iter_mut() {
                *v = m + s * *v;
            }
        }
        cycles.push(EmbeddedCycle {
            battery_id: "SYN".into(),
            cycle_index: i as u32 + 1,
            stage_id: 1,
            matrix: &mixing * z,
        });
        let noise: f64 = rng.sample(StandardNormal);
        capacities.push(
            cfg.capacity_start_ah - cfg.capacity_fade_ah * progress(i, cfg.n_cycles)
                + cfg.label_noise_ah * noise,
        );
    }
    Ok(SyntheticData {
        cycles,
        capacities,
        truth: GroundTruth {
            config: cfg.clone(),
            seed,
            mixing,
            schedule,
        },
    })
}

/// Centers the rows and whitens them so the sample covariance (1/(n-1)) is
/// the identity.
fn standardize_rows(z: &mut DMatrix<f64>) -> Result<()> {
    let n = z.ncols() as f64;
    for mut row in z.row_iter_mut() {
        let m = row.sum() / n;
        row.add_scalar_mut(-m);
    }
    let cov = &*z * z.transpose() / (n - 1.0);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numerical("synthetic sample covariance is singular"))?;
    let l = chol.l();
    let white = l
        .solve_lower_triangular(z)
        .ok_or_else(|| Error::numerical("synthetic whitening failed"))?;
    *z = white;
    Ok(())
}

/// Manufacturing and operating differences of one simulated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellProfile {
    pub battery_id: String,
    pub initial_capacity_ah: f64,
    /// Additive capacity offset applied to every cycle's label and duration.
    pub capacity_bias_ah: f64,
    pub voltage_offset_v: f64,
    pub temperature_offset_c: f64,
    pub resistance_scale: f64,
    /// Mixed into the fleet seed for this cell's noise stream.
    pub noise_stream: u64,
}

impl CellProfile {
    pub fn nominal(id: &str, stream: u64) -> Self {
        Self {
            battery_id: id.to_string(),
            initial_capacity_ah: 1.86,
            capacity_bias_ah: 0.0,
            voltage_offset_v: 0.0,
            temperature_offset_c: 0.0,
            resistance_scale: 1.0,
            noise_stream: stream,
        }
    }
}

/// Configuration of the discharge telemetry simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub n_cycles: u32,
    /// Last cycle of stage 1 and of stage 2; stage 3 runs to `n_cycles`.
    pub stage_ends: [u32; 2],
    pub sample_period_s: f64,
    pub discharge_current_a: f64,
    pub ambient_c: f64,
    pub cells: Vec<CellProfile>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        let mut similar = CellProfile::nominal("SYN-B", 2);
        similar.initial_capacity_ah = 1.85;
        similar.voltage_offset_v = 0.002;
        let mut drifted = CellProfile::nominal("SYN-C", 3);
        drifted.capacity_bias_ah = -0.06;
        drifted.voltage_offset_v = -0.04;
        drifted.temperature_offset_c = 1.5;
        drifted.resistance_scale = 1.3;
        Self {
            n_cycles: 60,
            stage_ends: [15, 40],
            sample_period_s: 20.0,
            discharge_current_a: 2.0,
            ambient_c: 24.0,
            cells: vec![CellProfile::nominal("SYN-A", 1), similar, drifted],
        }
    }
}

/// Relative capacity loss at life fraction `p` for a three-stage fade:
/// gentle, slow, then rapid, with the breakpoints at the stage ends.
fn fade_fraction(p: f64, b1: f64, b2: f64) -> f64 {
    let (r1, r2, r3) = (0.08, 0.10, 0.18);
    if p <= b1 {
        r1 * p / b1
    } else if p <= b2 {
        r1 + r2 * (p - b1) / (b2 - b1)
    } else {
        r1 + r2 + r3 * ((p - b2) / (1.0 - b2)).powf(1.3)
    }
}

/// Simulates constant-current discharges for every cell in `cfg`, returning
/// labeled cycles and the matching stage table.
pub fn simulate_fleet(cfg: &FleetConfig, seed: u64) -> Result<(Vec<CycleRecord>, StageTable)> {
    let [e1, e2] = cfg.stage_ends;
    if !(1 <= e1 && e1 < e2 && e2 < cfg.n_cycles) {
        return Err(Error::validation(
            "fleet stage ends must satisfy 1 <= end1 < end2 < n_cycles",
        ));
    }
    if cfg.cells.is_empty() || cfg.sample_period_s <= 0.0 || cfg.discharge_current_a <= 0.0 {
        return Err(Error::validation(
            "fleet needs cells, a positive sample period and current",
        ));
    }
    let n = cfg.n_cycles as f64;
    let (b1, b2) = (e1 as f64 / n, e2 as f64 / n);
    let current = cfg.discharge_current_a;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for cell in &cfg.cells {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ cell.noise_stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut regen = 0.0_f64;
        for i in 1..=cfg.n_cycles {
            let p = (i - 1) as f64 / (n - 1.0);
            let fade = fade_fraction(p, b1, b2);
            regen *= 0.7;
            if i > 1 && i % 13 == 0 {
                regen += 0.012;
            }
            let label_noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.002;
            let capacity = cell.initial_capacity_ah * (1.0 - fade)
                + regen
                + cell.capacity_bias_ah
                + label_noise;
            let resistance = cell.resistance_scale * 0.08 * (1.0 + 2.5 * fade);
            let duration = capacity * 3600.0 / current;
            let knee = 9.0 - 12.0 * fade;
            let steps = (duration / cfg.sample_period_s).floor() as usize;
            let mut samples = Vec::with_capacity(steps + 2);
            let mut t = 0.0;
            while t < duration {
                samples.push(sample_at(
                    cfg, cell, &mut rng, t, duration, resistance, knee,
                ));
                t += cfg.sample_period_s * (1.0 + 0.05 * rng.random::<f64>());
            }
            samples.push(sample_at(
                cfg, cell, &mut rng, duration, duration, resistance, knee,
            ));
            records.push(CycleRecord {
                battery_id: cell.battery_id.clone(),
                cycle_index: i,
                samples,
                capacity_ah: Some(capacity),
            });
        }
        for (stage, (a, b)) in [(1, e1), (e1 + 1, e2), (e2 + 1, cfg.n_cycles)]
            .into_iter()
            .enumerate()
        {
            entries.push(StageRange {
                battery_id: cell.battery_id.clone(),
                stage_id: stage as u32 + 1,
                first_cycle: a,
                last_cycle: b,
            });
        }
    }
    Ok((records, StageTable::new(entries)?))
}

fn sample_at(
    cfg: &FleetConfig,
    cell: &CellProfile,
    rng: &mut ChaCha8Rng,
    t: f64,
    duration: f64,
    resistance: f64,
    knee: f64,
) -> Sample {
    let x = (t / duration).min(1.0);
    let current = cfg.discharge_current_a;
    let ocv = 4.12 - 0.55 * x - 0.75 * x.powf(knee.max(2.0));
    let heating = current * current * resistance * 9.0 * (1.0 - (-t / 900.0).exp());
    let noise = |rng: &mut ChaCha8Rng, s: f64| rng.sample::<f64, _>(StandardNormal) * s;
    Sample {
        time_s: t,
        voltage_v: ocv - current * resistance + cell.voltage_offset_v + noise(rng, 0.002),
        current_a: -current + noise(rng, 0.002),
        temperature_c: cfg.ambient_c + cell.temperature_offset_c + heating + noise(rng, 0.03),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{column_covariance, row_means};

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SyntheticConfig {
            n_cycles: 10,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 42).unwrap();
        let b = generate_synthetic(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 43).unwrap();
        assert_ne!(a.cycles[0].matrix, c.cycles[0].matrix);

        let fleet = FleetConfig::default();
        assert_eq!(
            simulate_fleet(&fleet, 9).unwrap(),
            simulate_fleet(&fleet, 9).unwrap()
        );
    }

    #[test]
    fn rejects_too_many_stationary_sources() {
        let cfg = SyntheticConfig {
            s_true: 9,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn drifting_source_means_follow_schedule() {
        let cfg = SyntheticConfig {
            n_cycles: 20,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 7).unwrap();
        let unmix = data.truth.mixing.transpose();
        for (i, c) in data.cycles.iter().enumerate() {
            let z = &unmix * &c.matrix;
            let means = row_means(&z);
            let p = i as f64 / 19.0;
            for d in 0..5 {
                // schedule recomputed from its documented formula
                let onset = 0.16 * d as f64;
                let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
                let expected =
                    sign * (1.0 + 0.5 * d as f64) * f64::max(0.0, (p - onset) / (1.0 - onset));
                assert!((means[4 + d] - expected).abs() < 1e-10);
                let var = column_covariance(&z, &means)[(4 + d, 4 + d)];
                assert!((var - (1.0 + (0.5 + 0.25 * d as f64) * p)).abs() < 1e-10);
            }
            for s in 0..4 {
                assert!(means[s].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fleet_has_three_stages_and_fading_capacity() {
        let (records, table) = simulate_fleet(&FleetConfig::default(), 1).unwrap();
        assert_eq!(records.len(), 180);
        assert_eq!(table.num_stages(), 3);
        for r in &records {
            r.validate().unwrap();
        }
        let a: Vec<f64> = records
            .iter()
            .filter(|r| r.battery_id == "SYN-A")
            .map(|r| r.capacity_ah.unwrap())
            .collect();
        assert!(a[0] > a[59] + 0.3);
        assert!(a.iter().all(|&q| q > 1.0 && q < 2.0));
    }
}
