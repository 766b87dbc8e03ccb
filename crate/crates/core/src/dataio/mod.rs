//! Cycling telemetry: records, stage tables, resampling and normalization.

mod io;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_cycles, load_labels, load_stage_table, load_telemetry, write_labels_csv,
    write_stage_table_csv, write_telemetry_csv, LABELS_HEADER, STAGE_TABLE_HEADER,
    TELEMETRY_HEADER,
};

/// Default number of samples per cycle after resampling.
pub const DEFAULT_SAMPLES_PER_CYCLE: usize = 128;

/// One telemetry sample of a discharge cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_s: f64,
    pub voltage_v: f64,
    pub current_a: f64,
    pub temperature_c: f64,
}

impl Sample {
    pub fn get(&self, signal: Signal) -> f64 {
        match signal {
            Signal::Voltage => self.voltage_v,
            Signal::Current => self.current_a,
            Signal::Temperature => self.temperature_c,
        }
    }

    fn set(&mut self, signal: Signal, value: f64) {
        match signal {
            Signal::Voltage => self.voltage_v = value,
            Signal::Current => self.current_a = value,
            Signal::Temperature => self.temperature_c = value,
        }
    }
}

/// The three measured signals, in embedding block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Voltage,
    Current,
    Temperature,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Voltage, Signal::Current, Signal::Temperature];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Signal::Voltage => "voltage",
            Signal::Current => "current",
            Signal::Temperature => "temperature",
        }
    }
}

/// One discharge cycle of one battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub battery_id: String,
    /// 1-based cycle number within the battery's life.
    pub cycle_index: u32,
    pub samples: Vec<Sample>,
    /// Measured discharge capacity; absent for unlabeled online cycles.
    pub capacity_ah: Option<f64>,
}

impl CycleRecord {
    pub fn signal(&self, signal: Signal) -> Vec<f64> {
        self.samples.iter().map(|s| s.get(signal)).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time_s).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks strictly increasing time, finite values and positive capacity.
    pub fn validate(&self) -> Result<()> {
        let name = format!("battery {} cycle {}", self.battery_id, self.cycle_index);
        if self.cycle_index == 0 {
            return Err(Error::validation(format!(
                "{name}: cycle index must be >= 1"
            )));
        }
        if let Some(cap) = self.capacity_ah {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::validation(format!(
                    "{name}: capacity must be positive, got {cap}"
                )));
            }
        }
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].time_s == pair[0].time_s {
                return Err(Error::validation(format!(
                    "{name}: duplicate sample at time {}",
                    pair[1].time_s
                )));
            }
            if pair[1].time_s < pair[0].time_s {
                return Err(Error::validation(format!(
                    "{name}: time decreases at sample {} ({} -> {})",
                    i + 1,
                    pair[0].time_s,
                    pair[1].time_s
                )));
            }
        }
        Ok(())
    }
}

/// One contiguous block of cycles of a battery assigned to a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRange {
    pub battery_id: String,
    pub stage_id: u32,
    pub first_cycle: u32,
    pub last_cycle: u32,
}

/// Per-battery division of the cycle life into `C` consecutive stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTable {
    entries: Vec<StageRange>,
    num_stages: u32,
}

impl StageTable {
    pub fn new(mut entries: Vec<StageRange>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::validation("stage table has no entries"));
        }
        entries.sort_by(|a, b| {
            (a.battery_id.as_str(), a.first_cycle).cmp(&(b.battery_id.as_str(), b.first_cycle))
        });
        let num_stages = entries.iter().map(|e| e.stage_id).max().unwrap_or(0);
        if entries.iter().any(|e| e.stage_id == 0) {
            return Err(Error::validation("stage ids are 1-based"));
        }
        let mut by_battery: BTreeMap<&str, Vec<&StageRange>> = BTreeMap::new();
        for e in &entries {
            if e.first_cycle == 0 || e.last_cycle < e.first_cycle {
                return Err(Error::validation(format!(
                    "battery {} stage {}: invalid cycle range {}-{}",
                    e.battery_id, e.stage_id, e.first_cycle, e.last_cycle
                )));
            }
            by_battery.entry(e.battery_id.as_str()).or_default().push(e);
        }
        for (battery, ranges) in &by_battery {
            let mut expected_first = 1;
            for (pos, r) in ranges.iter().enumerate() {
                if r.first_cycle != expected_first {
                    return Err(Error::validation(format!(
                        "battery {battery}: stage {} starts at cycle {} but cycle {} was expected \
                         (ranges must be contiguous from cycle 1)",
                        r.stage_id, r.first_cycle, expected_first
                    )));
                }
                if r.stage_id != pos as u32 + 1 {
                    return Err(Error::validation(format!(
                        "battery {battery}: stages must be numbered 1..C in cycle order"
                    )));
                }
                expected_first = r.last_cycle + 1;
            }
        }
        Ok(Self {
            entries,
            num_stages,
        })
    }

    /// Three-stage division used for the NASA B5/B6/B7 cells (1-30, 31-106, 107-167).
    pub fn nasa_default<S: AsRef<str>>(batteries: &[S]) -> Self {
        let mut entries = Vec::new();
        for b in batteries {
            for (stage_id, (first, last)) in [(1, 30), (31, 106), (107, 167)].iter().enumerate() {
                entries.push(StageRange {
                    battery_id: b.as_ref().to_string(),
                    stage_id: stage_id as u32 + 1,
                    first_cycle: *first,
                    last_cycle: *last,
                });
            }
        }
        Self::new(entries).expect("static stage table is valid")
    }

    pub fn entries(&self) -> &[StageRange] {
        &self.entries
    }

    pub fn num_stages(&self) -> u32 {
        self.num_stages
    }

    pub fn stage_of(&self, battery_id: &str, cycle_index: u32) -> Option<u32> {
        self.entries
            .iter()
            .find(|e| {
                e.battery_id == battery_id
                    && e.first_cycle <= cycle_index
                    && cycle_index <= e.last_cycle
            })
            .map(|e| e.stage_id)
    }

    pub fn batteries(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.battery_id.as_str()).collect();
        ids.dedup();
        ids
    }
}

/// All cycles of one stage, resampled to a common length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDataset {
    pub stage_id: u32,
    /// Samples per cycle.
    pub k: usize,
    pub cycles: Vec<CycleRecord>,
    /// Capacities in cycle order; `None` unless every cycle is labeled.
    pub capacities: Option<Vec<f64>>,
}

impl StageDataset {
    pub fn new(stage_id: u32, k: usize, cycles: Vec<CycleRecord>) -> Result<Self> {
        if let Some(bad) = cycles.iter().find(|c| c.len() != k) {
            return Err(Error::validation(format!(
                "stage {stage_id}: cycle {} has {} samples, expected {k}",
                bad.cycle_index,
                bad.len()
            )));
        }
        let capacities = cycles.iter().map(|c| c.capacity_ah).collect();
        Ok(Self {
            stage_id,
            k,
            cycles,
            capacities,
        })
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// Chronological split: the first `n_train` cycles and the rest.
    pub fn split_at(&self, n_train: usize) -> (StageDataset, StageDataset) {
        let n = n_train.min(self.cycles.len());
        let (a, b) = self.cycles.split_at(n);
        let part = |cycles: &[CycleRecord]| {
            StageDataset::new(self.stage_id, self.k, cycles.to_vec()).expect("lengths preserved")
        };
        (part(a), part(b))
    }
}

/// Resamples every signal of a cycle to `k` uniformly spaced instants over
/// the cycle's own duration by linear interpolation. Both endpoints are kept
/// exactly.
pub fn resample_cycle(record: &CycleRecord, k: usize) -> Result<CycleRecord> {
    let n = record.samples.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "battery {} cycle {}: resampling needs at least 2 samples, got {n}",
            record.battery_id, record.cycle_index
        )));
    }
    if k < 2 {
        return Err(Error::validation("resampling length must be at least 2"));
    }
    let t0 = record.samples[0].time_s;
    let t_end = record.samples[n - 1].time_s;
    let step = (t_end - t0) / (k - 1) as f64;
    let mut out = Vec::with_capacity(k);
    let mut seg = 0usize;
    for j in 0..k {
        if j == k - 1 {
            out.push(record.samples[n - 1]);
            break;
        }
        let t = t0 + j as f64 * step;
        while seg + 2 < n && record.samples[seg + 1].time_s <= t {
            seg += 1;
        }
        let a = record.samples[seg];
        let b = record.samples[seg + 1];
        let w = (t - a.time_s) / (b.time_s - a.time_s);
        let mut s = Sample { time_s: t, ..a };
        for signal in Signal::ALL {
            let (va, vb) = (a.get(signal), b.get(signal));
            s.set(signal, va + w * (vb - va));
        }
        out.push(s);
    }
    Ok(CycleRecord {
        samples: out,
        ..record.clone()
    })
}

/// Groups records by stage, resampling each to `k` samples. Within a stage,
/// cycles are ordered by battery then cycle index.
pub fn partition_stages(
    records: &[CycleRecord],
    table: &StageTable,
    k: usize,
) -> Result<BTreeMap<u32, StageDataset>> {
    let mut orphans = Vec::new();
    let mut grouped: BTreeMap<u32, Vec<CycleRecord>> = BTreeMap::new();
    for r in records {
        match table.stage_of(&r.battery_id, r.cycle_index) {
            Some(stage) => grouped
                .entry(stage)
                .or_default()
                .push(resample_cycle(r, k)?),
            None => orphans.push(format!("{}#{}", r.battery_id, r.cycle_index)),
        }
    }
    if !orphans.is_empty() {
        return Err(Error::validation(format!(
            "cycles not covered by the stage table: {}",
            orphans.join(", ")
        )));
    }
    grouped
        .into_iter()
        .map(|(stage, mut cycles)| {
            cycles.sort_by(|a, b| {
                (a.battery_id.as_str(), a.cycle_index).cmp(&(b.battery_id.as_str(), b.cycle_index))
            });
            Ok((stage, StageDataset::new(stage, k, cycles)?))
        })
        .collect()
}

/// Per-signal z-score statistics, indexed by [`Signal::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    /// Pooled mean and population standard deviation over every sample of
    /// the given cycles.
    pub fn fit(cycles: &[CycleRecord]) -> Result<Self> {
        if cycles.len() < 2 {
            return Err(Error::validation(format!(
                "z-score fit needs at least 2 cycles, got {}",
                cycles.len()
            )));
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for signal in Signal::ALL {
            let values: Vec<f64> = cycles
                .iter()
                .flat_map(|c| c.samples.iter().map(move |s| s.get(signal)))
                .collect();
            let n = values.len() as f64;
            let m = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::validation(format!(
                    "{} signal is constant over the training cycles; cannot normalize",
                    signal.name()
                )));
            }
            mean[signal.index()] = m;
            std[signal.index()] = sd;
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, cycle: &CycleRecord) -> CycleRecord {
        let mut out = cycle.clone();
        for s in &mut out.samples {
            for signal in Signal::ALL {
                let i = signal.index();
                s.set(signal, (s.get(signal) - self.mean[i]) / self.std[i]);
            }
        }
        out
    }
}

pub fn zscore_fit(train: &StageDataset) -> Result<NormalizationStats> {
    NormalizationStats::fit(&train.cycles)
}

pub fn zscore_apply(stats: &NormalizationStats, cycle: &CycleRecord) -> CycleRecord {
    stats.apply(cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn cycle(battery: &str, index: u32, pts: &[(f64, f64)]) -> CycleRecord {
        CycleRecord {
            battery_id: battery.into(),
            cycle_index: index,
            samples: pts
                .iter()
                .map(|&(t, v)| Sample {
                    time_s: t,
                    voltage_v: v,
                    current_a: -2.0 + 0.01 * v,
                    temperature_c: 24.0 + t,
                })
                .collect(),
            capacity_ah: Some(1.8),
        }
    }

    #[test]
    fn resample_constant_voltage() {
        let c = cycle("B", 1, &[(0.0, 3.7), (2.5, 3.7), (10.0, 3.7)]);
        for k in [2, 3, 17, 128] {
            let r = resample_cycle(&c, k).unwrap();
            assert_eq!(r.len(), k);
            assert!(r.signal(Signal::Voltage).iter().all(|&v| v == 3.7));
        }
    }

    #[test]
    fn resample_linear_midpoint() {
        let c = cycle("B", 1, &[(0.0, 0.0), (1.0, 1.0)]);
        let r = resample_cycle(&c, 3).unwrap();
        assert_eq!(r.signal(Signal::Voltage), vec![0.0, 0.5, 1.0]);
        assert_eq!(r.times(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn resample_rejects_short_cycle() {
        let c = cycle("B", 1, &[(0.0, 1.0)]);
        assert!(resample_cycle(&c, 4).is_err());
        let c = cycle("B", 1, &[(0.0, 1.0), (1.0, 2.0)]);
        assert!(resample_cycle(&c, 1).is_err());
    }

    #[test]
    fn resample_round_trip_on_smooth_discharge() {
        // 197 irregular samples of a smooth discharge curve.
        let pts: Vec<(f64, f64)> = (0..197)
            .map(|i| {
                let t = i as f64 * 18.0 + 3.0 * ((i * 7 % 5) as f64);
                let q = t / 3600.0;
                (t, 4.2 - 0.6 * q - 0.4 * (3.0 * q).powi(4) / 81.0)
            })
            .collect();
        let c = cycle("B", 1, &pts);
        let r = resample_cycle(&c, 128).unwrap();
        let grid_t = r.times();
        let grid_v = r.signal(Signal::Voltage);
        let mut worst = 0.0_f64;
        for &(t, v) in &pts {
            let seg = grid_t
                .partition_point(|&g| g <= t)
                .clamp(1, grid_t.len() - 1)
                - 1;
            let w = (t - grid_t[seg]) / (grid_t[seg + 1] - grid_t[seg]);
            let back = grid_v[seg] + w * (grid_v[seg + 1] - grid_v[seg]);
            worst = worst.max((back - v).abs());
        }
        // NASA voltage telemetry is logged at millivolt-level resolution.
        assert!(worst < 1e-3, "round-trip error {worst}");
    }

    #[test]
    fn stage_table_lookup_nasa() {
        let t = StageTable::nasa_default(&["B5", "B6", "B7"]);
        assert_eq!(t.num_stages(), 3);
        assert_eq!(t.stage_of("B5", 31), Some(2));
        assert_eq!(t.stage_of("B7", 107), Some(3));
        assert_eq!(t.stage_of("B7", 30), Some(1));
        assert_eq!(t.stage_of("B7", 168), None);
    }

    #[test]
    fn stage_table_rejects_gaps_and_overlaps() {
        let r = |s, a, b| StageRange {
            battery_id: "B".into(),
            stage_id: s,
            first_cycle: a,
            last_cycle: b,
        };
        assert!(StageTable::new(vec![r(1, 1, 10), r(2, 12, 20)]).is_err());
        assert!(StageTable::new(vec![r(1, 1, 10), r(2, 10, 20)]).is_err());
        assert!(StageTable::new(vec![r(1, 2, 10)]).is_err());
        assert!(StageTable::new(vec![]).is_err());
        assert!(StageTable::new(vec![r(1, 1, 10), r(2, 11, 20)]).is_ok());
    }

    #[test]
    fn partition_single_stage_and_orphans() {
        let records: Vec<CycleRecord> = (1..=5)
            .map(|i| cycle("B", i, &[(0.0, 4.0), (10.0, 3.0)]))
            .collect();
        let one = StageTable::new(vec![StageRange {
            battery_id: "B".into(),
            stage_id: 1,
            first_cycle: 1,
            last_cycle: 5,
        }])
        .unwrap();
        let parts = partition_stages(&records, &one, 8).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[&1].len(), 5);
        assert_eq!(parts[&1].capacities.as_ref().unwrap().len(), 5);

        let short = StageTable::new(vec![StageRange {
            battery_id: "B".into(),
            stage_id: 1,
            first_cycle: 1,
            last_cycle: 3,
        }])
        .unwrap();
        let err = partition_stages(&records, &short, 8)
            .unwrap_err()
            .to_string();
        assert!(err.contains("B#4") && err.contains("B#5"), "{err}");
    }

    #[test]
    fn partition_nasa_stage_counts() {
        let records: Vec<CycleRecord> = (1..=167)
            .map(|i| cycle("B7", i, &[(0.0, 4.0), (10.0, 3.0)]))
            .collect();
        let parts = partition_stages(&records, &StageTable::nasa_default(&["B7"]), 4).unwrap();
        let sizes: Vec<usize> = parts.values().map(StageDataset::len).collect();
        assert_eq!(sizes, vec![30, 76, 61]);
        assert_eq!(parts[&2].cycles[0].cycle_index, 31);
        assert_eq!(parts[&3].cycles[0].cycle_index, 107);
    }

    #[test]
    fn zscore_of_known_stats() {
        let stats = NormalizationStats {
            mean: [3.0, 0.0, 0.0],
            std: [2.0, 1.0, 1.0],
        };
        let c = cycle("B", 1, &[(0.0, 5.0), (1.0, 5.0)]);
        let z = zscore_apply(&stats, &c);
        assert_eq!(z.samples[0].voltage_v, 1.0);
    }

    #[test]
    fn zscore_rejects_constant_signal_and_single_cycle() {
        let mk = |i| CycleRecord {
            battery_id: "B".into(),
            cycle_index: i,
            samples: (0..4)
                .map(|t| Sample {
                    time_s: t as f64,
                    voltage_v: t as f64,
                    current_a: -2.0,
                    temperature_c: t as f64,
                })
                .collect(),
            capacity_ah: None,
        };
        let err = NormalizationStats::fit(&[mk(1), mk(2)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("current"), "{err}");
        assert!(NormalizationStats::fit(&[mk(1)]).is_err());
    }

    #[test]
    fn validate_reports_backwards_time() {
        let c = cycle("B9", 3, &[(0.0, 4.0), (2.0, 3.9), (1.0, 3.8)]);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("B9") && err.contains("cycle 3"), "{err}");
    }

    fn arb_cycle() -> impl Strategy<Value = CycleRecord> {
        (prop::collection::vec((0.01f64..5.0, -5.0f64..5.0), 2..40)).prop_map(|steps| {
            let mut t = 0.0;
            let pts: Vec<(f64, f64)> = steps
                .into_iter()
                .map(|(dt, v)| {
                    t += dt;
                    (t, v)
                })
                .collect();
            cycle("P", 1, &pts)
        })
    }

    proptest! {
        #[test]
        fn resample_is_idempotent(c in arb_cycle(), k in 2usize..64) {
            let once = resample_cycle(&c, k).unwrap();
            let twice = resample_cycle(&once, k).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn resample_keeps_endpoints(c in arb_cycle(), k in 2usize..64) {
            let r = resample_cycle(&c, k).unwrap();
            prop_assert_eq!(r.samples[0], c.samples[0]);
            prop_assert_eq!(r.samples[k - 1], *c.samples.last().unwrap());
        }

        #[test]
        fn zscore_of_fitting_set_is_standard(
            a in prop::collection::vec((-10.0f64..10.0, -3.0f64..3.0, 0.0f64..50.0), 3..20),
            b in prop::collection::vec((-10.0f64..10.0, -3.0f64..3.0, 0.0f64..50.0), 3..20),
        ) {
            let mk = |idx: u32, vals: &[(f64, f64, f64)]| CycleRecord {
                battery_id: "Z".into(),
                cycle_index: idx,
                samples: vals.iter().enumerate().map(|(t, &(v, i, temp))| Sample {
                    time_s: t as f64, voltage_v: v, current_a: i, temperature_c: temp,
                }).collect(),
                capacity_ah: None,
            };
            let cycles = vec![mk(1, &a), mk(2, &b)];
            let Ok(stats) = NormalizationStats::fit(&cycles) else { return Ok(()); };
            let z: Vec<CycleRecord> = cycles.iter().map(|c| stats.apply(c)).collect();
            for signal in Signal::ALL {
                let vals: Vec<f64> = z.iter().flat_map(|c| c.signal(signal)).collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-10);
                prop_assert!((sd - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn partition_preserves_cycle_count(n in 2u32..60, cut in 1u32..59) {
            let cut = cut.min(n - 1);
            let records: Vec<CycleRecord> =
                (1..=n).map(|i| cycle("B", i, &[(0.0, 1.0), (1.0, 2.0)])).collect();
            let table = StageTable::new(vec![
                StageRange { battery_id: "B".into(), stage_id: 1, first_cycle: 1, last_cycle: cut },
                StageRange { battery_id: "B".into(), stage_id: 2, first_cycle: cut + 1, last_cycle: n },
            ]).unwrap();
            let parts = partition_stages(&records, &table, 4).unwrap();
            prop_assert_eq!(parts.values().map(StageDataset::len).sum::<usize>(), n as usize);
        }
    }
}
