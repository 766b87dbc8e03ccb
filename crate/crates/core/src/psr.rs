//! Phase-space reconstruction of discharge cycles by delay embedding.
//!
//! Each signal `x` of length `K` becomes an `r × K'` matrix whose row `d`
//! is `x` shifted by `d·tau`, with `K' = K - (r-1)·tau`. The voltage,
//! current and temperature blocks are stacked in that order, giving
//! `J = 3r` rows per cycle.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::{CycleRecord, Signal};
use crate::error::{Error, Result};
use crate::linalg::serde_matrix;

pub const EMBEDDED_CACHE_SCHEMA: u32 = 1;

/// Default false-nearest-neighbour distance-ratio threshold.
pub const FNN_RATIO_THRESHOLD: f64 = 15.0;
/// Default false-nearest-neighbour fraction below which a dimension is accepted.
pub const FNN_FRACTION_CUTOFF: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Lag between embedding coordinates, in samples.
    pub tau: usize,
    /// Embedding dimension per signal.
    pub r: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { tau: 3, r: 3 }
    }
}

impl EmbeddingConfig {
    pub fn new(tau: usize, r: usize) -> Result<Self> {
        if tau == 0 || r == 0 {
            return Err(Error::validation("embedding tau and r must be >= 1"));
        }
        Ok(Self { tau, r })
    }

    /// Number of delay vectors produced from a series of length `k`.
    pub fn embedded_len(&self, k: usize) -> Result<usize> {
        if self.tau == 0 || self.r == 0 {
            return Err(Error::validation("embedding tau and r must be >= 1"));
        }
        let span = (self.r - 1) * self.tau;
        if span >= k {
            return Err(Error::validation(format!(
                "embedding exceeds series length: (r-1)*tau = {span} >= K = {k}"
            )));
        }
        Ok(k - span)
    }

    /// Rows of a reconstructed cycle (three signals).
    pub fn total_dim(&self) -> usize {
        3 * self.r
    }
}

/// A reconstructed cycle: `J × K'` with row blocks [V, I, T].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedCycle {
    pub battery_id: String,
    pub cycle_index: u32,
    pub stage_id: u32,
    #[serde(with = "serde_matrix")]
    pub matrix: DMatrix<f64>,
}

impl EmbeddedCycle {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }
}

/// Delay-embeds one series: entry `(d, k)` is `series[k + d·tau]`.
pub fn embed_signal(series: &[f64], cfg: &EmbeddingConfig) -> Result<DMatrix<f64>> {
    let cols = cfg.embedded_len(series.len())?;
    Ok(DMatrix::from_fn(cfg.r, cols, |d, k| {
        series[k + d * cfg.tau]
    }))
}

/// Embeds the voltage, current and temperature of a (resampled,
/// normalized) cycle and stacks the three blocks.
pub fn embed_cycle(
    cycle: &CycleRecord,
    cfg: &EmbeddingConfig,
    stage_id: u32,
) -> Result<EmbeddedCycle> {
    let cols = cfg.embedded_len(cycle.len())?;
    let mut matrix = DMatrix::zeros(cfg.total_dim(), cols);
    for signal in Signal::ALL {
        let block = embed_signal(&cycle.signal(signal), cfg)?;
        matrix
            .view_mut((signal.index() * cfg.r, 0), (cfg.r, cols))
            .copy_from(&block);
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "battery {} cycle {}: non-finite value in reconstructed cycle",
            cycle.battery_id, cycle.cycle_index
        )));
    }
    Ok(EmbeddedCycle {
        battery_id: cycle.battery_id.clone(),
        cycle_index: cycle.cycle_index,
        stage_id,
        matrix,
    })
}

/// Number of equal-width histogram bins used for a series of length `n`.
pub fn histogram_bins(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(2)
}

/// Plug-in mutual information (nats) between `x[t]` and `x[t + lag]`, using
/// equal-width bins over the range of the whole series.
pub fn lagged_mutual_information(series: &[f64], lag: usize, bins: usize) -> f64 {
    let n = series.len() - lag;
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let width = (hi - lo) / bins as f64;
    let bin = |v: f64| {
        if width <= 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut joint = vec![0usize; bins * bins];
    let mut pa = vec![0usize; bins];
    let mut pb = vec![0usize; bins];
    for t in 0..n {
        let a = bin(series[t]);
        let b = bin(series[t + lag]);
        joint[a * bins + b] += 1;
        pa[a] += 1;
        pb[b] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c > 0 {
                let pab = c as f64 / nf;
                mi += pab * (pab / ((pa[a] as f64 / nf) * (pb[b] as f64 / nf))).ln();
            }
        }
    }
    mi
}

/// Mutual information for lags `1..=max_lag`.
pub fn mutual_information_curve(series: &[f64], max_lag: usize) -> Vec<f64> {
    let bins = histogram_bins(series.len());
    (1..=max_lag)
        .map(|lag| lagged_mutual_information(series, lag, bins))
        .collect()
}

/// Picks the delay as the first local minimum of the lagged mutual
/// information over `1..=max_lag`, or the global minimizer (smallest lag on
/// ties) when there is none.
///
/// Values closer than the sampling noise of the plug-in estimator under
/// independence are treated as ties, so a flat curve (e.g. white noise)
/// yields lag 1.
pub fn select_tau(series: &[f64], max_lag: usize) -> Result<usize> {
    if max_lag < 2 {
        return Err(Error::validation("select_tau needs max_lag >= 2"));
    }
    if series.len() < 4 * max_lag {
        return Err(Error::validation(format!(
            "select_tau needs at least {} samples, got {}",
            4 * max_lag,
            series.len()
        )));
    }
    let mi = mutual_information_curve(series, max_lag);
    let bins = histogram_bins(series.len()) as f64;
    let pairs = (series.len() - max_lag) as f64;
    // Standard deviation of the plug-in estimate under independence is
    // about (B-1)/(sqrt(2) n); 8 of those is the tie tolerance.
    let tie = 8.0 * (bins - 1.0) / (std::f64::consts::SQRT_2 * pairs);
    let lo = mi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= tie {
        return Ok(1);
    }
    // First minimum: the lowest point of the first basin, closed once the
    // curve climbs more than `tie` above it. Wiggles smaller than the
    // estimator noise do not end the basin.
    let mut best = 0;
    for (l, &v) in mi.iter().enumerate() {
        if v < mi[best] {
            best = l;
        } else if v > mi[best] + tie {
            return Ok(best + 1);
        }
    }
    let global =
        mi.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
        );
    Ok(global.0 + 1)
}

/// False-nearest-neighbour fraction for each dimension `1..max_r`.
///
/// Entry `d-1` is the fraction of points whose nearest neighbour in the
/// `d`-dimensional delay space moves away by more than `threshold` times
/// their distance when coordinate `d+1` is added.
pub fn fnn_fractions(series: &[f64], tau: usize, max_r: usize, threshold: f64) -> Result<Vec<f64>> {
    if max_r < 2 || tau == 0 {
        return Err(Error::validation("select_r needs max_r >= 2 and tau >= 1"));
    }
    let need = (max_r - 1) * tau + 2;
    if series.len() < need {
        return Err(Error::validation(format!(
            "false-neighbour search needs at least {need} samples, got {}",
            series.len()
        )));
    }
    let mut fractions = Vec::with_capacity(max_r - 1);
    for d in 1..max_r {
        let n = series.len() - d * tau;
        let coord = |i: usize, c: usize| series[i + c * tau];
        let mut false_count = 0usize;
        let mut evaluated = 0usize;
        for i in 0..n {
            let mut best = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dist2: f64 = (0..d).map(|c| (coord(i, c) - coord(j, c)).powi(2)).sum();
                if dist2 < best.1 {
                    best = (j, dist2);
                }
            }
            let dist = best.1.sqrt();
            if best.0 == usize::MAX || dist == 0.0 {
                continue;
            }
            evaluated += 1;
            let extra = (coord(i, d) - coord(best.0, d)).abs();
            if extra / dist > threshold {
                false_count += 1;
            }
        }
        fractions.push(if evaluated == 0 {
            0.0
        } else {
            false_count as f64 / evaluated as f64
        });
    }
    Ok(fractions)
}

/// Smallest embedding dimension whose false-neighbour fraction falls below
/// `cutoff`; `max_r` when none does. A cutoff of 1 or more accepts `r = 1`.
pub fn select_r(
    series: &[f64],
    tau: usize,
    max_r: usize,
    threshold: f64,
    cutoff: f64,
) -> Result<usize> {
    let fractions = fnn_fractions(series, tau, max_r, threshold)?;
    for (i, &f) in fractions.iter().enumerate() {
        if f < cutoff || cutoff >= 1.0 {
            return Ok(i + 1);
        }
    }
    Ok(max_r)
}

/// On-disk cache of reconstructed cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedCache {
    pub schema_version: u32,
    pub config: EmbeddingConfig,
    pub cycles: Vec<EmbeddedCycle>,
}

impl EmbeddedCache {
    pub fn new(config: EmbeddingConfig, cycles: Vec<EmbeddedCycle>) -> Self {
        Self {
            schema_version: EMBEDDED_CACHE_SCHEMA,
            config,
            cycles,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cache: Self = crate::read_json(path)?;
        if cache.schema_version != EMBEDDED_CACHE_SCHEMA {
            return Err(Error::validation(format!(
                "embedded cache schema {} is not supported",
                cache.schema_version
            )));
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Sample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn brute_force(series: &[f64], tau: usize, r: usize) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for d in 0..r {
            let mut row = Vec::new();
            let mut k = 0;
            while k + (r - 1) * tau < series.len() {
                row.push(series[k + d * tau]);
                k += 1;
            }
            rows.push(row);
        }
        rows
    }

    #[test]
    fn embed_small_series() {
        let series: Vec<f64> = (0..9).map(f64::from).collect();
        let m = embed_signal(&series, &EmbeddingConfig::new(2, 3).unwrap()).unwrap();
        assert_eq!(m.shape(), (3, 5));
        let cols: Vec<Vec<f64>> = m
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        assert_eq!(
            cols,
            vec![
                vec![0.0, 2.0, 4.0],
                vec![1.0, 3.0, 5.0],
                vec![2.0, 4.0, 6.0],
                vec![3.0, 5.0, 7.0],
                vec![4.0, 6.0, 8.0]
            ]
        );
    }

    #[test]
    fn identity_embedding() {
        let series = vec![0.3, -1.0, 2.5, 4.0];
        for tau in 1..5 {
            let m = embed_signal(&series, &EmbeddingConfig::new(tau, 1).unwrap()).unwrap();
            assert_eq!(m.shape(), (1, 4));
            assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), series);
        }
    }

    #[test]
    fn embedding_too_long_is_rejected() {
        let series = vec![0.0; 6];
        let err = embed_signal(&series, &EmbeddingConfig::new(3, 3).unwrap()).unwrap_err();
        assert!(err.to_string().contains("embedding exceeds series length"));
    }

    #[test]
    fn random_series_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let series: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let m = embed_signal(&series, &EmbeddingConfig::new(3, 3).unwrap()).unwrap();
        let rows = brute_force(&series, 3, 3);
        for (d, row) in rows.iter().enumerate() {
            assert_eq!(m.row(d).iter().copied().collect::<Vec<_>>(), *row);
        }
    }

    fn cycle_from(v: &[f64], i: &[f64], t: &[f64]) -> CycleRecord {
        CycleRecord {
            battery_id: "B".into(),
            cycle_index: 1,
            samples: (0..v.len())
                .map(|k| Sample {
                    time_s: k as f64,
                    voltage_v: v[k],
                    current_a: i[k],
                    temperature_c: t[k],
                })
                .collect(),
            capacity_ah: None,
        }
    }

    #[test]
    fn cycle_has_nine_rows_for_r3() {
        let v: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let i: Vec<f64> = (0..20).map(|k| -(k as f64)).collect();
        let t: Vec<f64> = (0..20).map(|k| 100.0 + k as f64).collect();
        let e = embed_cycle(&cycle_from(&v, &i, &t), &EmbeddingConfig::default(), 2).unwrap();
        assert_eq!(e.dim(), 9);
        assert_eq!(e.len(), 20 - 6);
        assert_eq!(e.matrix[(0, 0)], 0.0);
        assert_eq!(e.matrix[(3, 1)], -1.0);
        assert_eq!(e.matrix[(8, 0)], 106.0);
    }

    #[test]
    fn r1_cycle_is_signal_matrix() {
        let v = [1.0, 2.0, 3.0];
        let i = [4.0, 5.0, 6.0];
        let t = [7.0, 8.0, 9.0];
        let e = embed_cycle(
            &cycle_from(&v, &i, &t),
            &EmbeddingConfig::new(2, 1).unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(
            e.matrix,
            DMatrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.])
        );
    }

    #[test]
    fn constant_signals_stay_constant() {
        let e = embed_cycle(
            &cycle_from(&[3.0; 12], &[-2.0; 12], &[24.0; 12]),
            &EmbeddingConfig::new(2, 3).unwrap(),
            1,
        )
        .unwrap();
        for (row, expected) in e
            .matrix
            .row_iter()
            .zip([3.0, 3.0, 3.0, -2.0, -2.0, -2.0, 24.0, 24.0, 24.0])
        {
            assert!(row.iter().all(|&x| x == expected));
        }
    }

    /// Independent MI estimator: counts pairs in a hash map.
    fn oracle_mi(series: &[f64], lag: usize) -> f64 {
        use std::collections::HashMap;
        let bins = (series.len() as f64).sqrt().ceil() as i64;
        let lo = series.iter().cloned().fold(f64::MAX, f64::min);
        let hi = series.iter().cloned().fold(f64::MIN, f64::max);
        let b = |v: f64| (((v - lo) / (hi - lo) * bins as f64).floor() as i64).min(bins - 1);
        let n = series.len() - lag;
        let mut joint: HashMap<(i64, i64), f64> = HashMap::new();
        let mut ma: HashMap<i64, f64> = HashMap::new();
        let mut mb: HashMap<i64, f64> = HashMap::new();
        for t in 0..n {
            let (x, y) = (b(series[t]), b(series[t + lag]));
            *joint.entry((x, y)).or_default() += 1.0 / n as f64;
            *ma.entry(x).or_default() += 1.0 / n as f64;
            *mb.entry(y).or_default() += 1.0 / n as f64;
        }
        joint
            .iter()
            .map(|(&(x, y), &p)| p * (p / (ma[&x] * mb[&y])).ln())
            .sum()
    }

    #[test]
    fn tau_of_sine_is_quarter_period() {
        // Off-grid period so the histogram sees a dense set of values.
        let period = 40.37;
        let series: Vec<f64> = (0..4000)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
            .collect();
        let tau = select_tau(&series, 20).unwrap();
        assert!((tau as f64 - period / 4.0).abs() <= 1.0, "tau = {tau}");

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noisy: Vec<f64> = (0..4000)
            .map(|t| {
                (2.0 * std::f64::consts::PI * t as f64 / 40.0).sin()
                    + 0.1 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let tau = select_tau(&noisy, 20).unwrap();
        assert!((tau as i64 - 10).abs() <= 1, "noisy tau = {tau}");

        let curve: Vec<f64> = (1..=20).map(|l| oracle_mi(&series, l)).collect();
        let oracle_min = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            + 1;
        assert!(
            (oracle_min as i64 - 10).abs() <= 1,
            "oracle minimum {oracle_min}"
        );
        for (l, o) in curve.iter().enumerate() {
            let ours = lagged_mutual_information(&series, l + 1, histogram_bins(series.len()));
            assert!((ours - o).abs() < 1e-9);
        }
    }

    #[test]
    fn tau_of_white_noise_is_one() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let series: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
            assert_eq!(select_tau(&series, 20).unwrap(), 1, "seed {seed}");
        }
    }

    #[test]
    fn tau_rejects_short_series() {
        assert!(select_tau(&[0.0; 10], 5).is_err());
        assert!(select_tau(&[0.0; 100], 1).is_err());
    }

    #[test]
    fn fnn_linear_map_is_one_dimensional() {
        let mut x = 1.0;
        let series: Vec<f64> = (0..300)
            .map(|_| {
                x *= 0.98;
                x
            })
            .collect();
        assert_eq!(
            select_r(&series, 1, 5, FNN_RATIO_THRESHOLD, FNN_FRACTION_CUTOFF).unwrap(),
            1
        );
    }

    #[test]
    fn fnn_vacuous_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        assert_eq!(
            select_r(&series, 1, 5, FNN_RATIO_THRESHOLD, 1.0).unwrap(),
            1
        );
    }

    fn lorenz_x(n: usize) -> Vec<f64> {
        let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
        let f = |s: [f64; 3]| {
            [
                sigma * (s[1] - s[0]),
                s[0] * (rho - s[2]) - s[1],
                s[0] * s[1] - beta * s[2],
            ]
        };
        let dt = 0.01;
        let mut s = [1.0, 1.0, 1.0];
        let mut out = Vec::with_capacity(n);
        for step in 0..(n * 5 + 2000) {
            let k1 = f(s);
            let add = |a: [f64; 3], b: [f64; 3], h: f64| {
                [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]]
            };
            let k2 = f(add(s, k1, dt / 2.0));
            let k3 = f(add(s, k2, dt / 2.0));
            let k4 = f(add(s, k3, dt));
            for c in 0..3 {
                s[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            if step >= 2000 && (step - 2000) % 5 == 0 {
                out.push(s[0]);
            }
        }
        out.truncate(n);
        out
    }

    /// Brute-force FNN fraction written independently of `fnn_fractions`.
    fn oracle_fnn(series: &[f64], tau: usize, d: usize, threshold: f64) -> f64 {
        let n = series.len() - d * tau;
        let vec_of = |i: usize| (0..d).map(|c| series[i + c * tau]).collect::<Vec<_>>();
        let pts: Vec<Vec<f64>> = (0..n).map(vec_of).collect();
        let mut bad = 0;
        let mut total = 0;
        for i in 0..n {
            let (j, dist) = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dd: f64 = pts[i]
                        .iter()
                        .zip(&pts[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (j, dd.sqrt())
                })
                .fold((0, f64::MAX), |a, b| if b.1 < a.1 { b } else { a });
            if dist > 0.0 {
                total += 1;
                if (series[i + d * tau] - series[j + d * tau]).abs() / dist > threshold {
                    bad += 1;
                }
            }
        }
        bad as f64 / total as f64
    }

    #[test]
    fn fnn_lorenz_embedding_dimension() {
        let series = lorenz_x(1500);
        let tau = 3;
        let fractions = fnn_fractions(&series, tau, 6, FNN_RATIO_THRESHOLD).unwrap();
        for (i, f) in fractions.iter().enumerate() {
            let o = oracle_fnn(&series, tau, i + 1, FNN_RATIO_THRESHOLD);
            assert!((f - o).abs() < 1e-12, "d={} ours={f} oracle={o}", i + 1);
        }
        let r = select_r(&series, tau, 6, FNN_RATIO_THRESHOLD, FNN_FRACTION_CUTOFF).unwrap();
        assert!((2..=4).contains(&r), "r = {r}, fractions {fractions:?}");
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cycles: Vec<EmbeddedCycle> = (0..3)
            .map(|i| EmbeddedCycle {
                battery_id: "B".into(),
                cycle_index: i + 1,
                stage_id: 1,
                matrix: DMatrix::from_fn(9, 7, |_, _| rng.random::<f64>() * 1e3 - 500.0),
            })
            .collect();
        let cache = EmbeddedCache::new(EmbeddingConfig::default(), cycles);
        let p = dir.path().join("cache.json");
        cache.save(&p).unwrap();
        assert_eq!(EmbeddedCache::load(&p).unwrap(), cache);
    }

    proptest! {
        #[test]
        fn embedding_is_pure_indexing(
            series in prop::collection::vec(-1e6f64..1e6, 1..80),
            tau in 1usize..6,
            r in 1usize..6,
        ) {
            let cfg = EmbeddingConfig::new(tau, r).unwrap();
            match embed_signal(&series, &cfg) {
                Ok(m) => {
                    prop_assert_eq!(m.ncols() + (r - 1) * tau, series.len());
                    let rows = brute_force(&series, tau, r);
                    for d in 0..r {
                        prop_assert_eq!(m.row(d).iter().copied().collect::<Vec<_>>(), rows[d].clone());
                    }
                }
                Err(_) => prop_assert!((r - 1) * tau >= series.len()),
            }
        }

        #[test]
        fn embedding_commutes_with_scaling(
            series in prop::collection::vec(-100f64..100.0, 10..40),
            scale in -10f64..10.0,
        ) {
            let cfg = EmbeddingConfig::new(2, 3).unwrap();
            let scaled: Vec<f64> = series.iter().map(|v| v * scale).collect();
            let a = embed_signal(&scaled, &cfg).unwrap();
            let b = embed_signal(&series, &cfg).unwrap() * scale;
            prop_assert_eq!(a, b);
        }
    }
}
