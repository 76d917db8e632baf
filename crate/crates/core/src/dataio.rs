//! Trajectory ingest and training-sample preparation.
//!
//! The canonical trajectory CSV columns are `time_s, vehicle_id,
//! preceding_id, velocity_mps, accel_mps2, headway_m,
//! preceding_velocity_mps, vehicle_length_m, vehicle_type` with
//! `preceding_id = 0` meaning "no predecessor". Headway is the
//! bumper-to-bumper gap to the predecessor throughout.

use crate::dynamics::{leading_velocity, LeadProfile};
use crate::error::{CoreError, Result};
use crate::platoon::{advance_world, idm_accelerations, PlatoonConfig, VehicleRole};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FEATURE_NAMES: [&str; 5] = ["v", "h", "dv", "a", "l"];
pub const NUM_FEATURES: usize = 5;

/// Per-step feature vector x = [v, h, dv, a, l]; `dv` is predecessor
/// velocity minus own velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeature {
    pub v: f64,
    pub h: f64,
    pub dv: f64,
    pub a: f64,
    pub l: f64,
}

impl TrajectoryFeature {
    pub fn as_array(&self) -> [f64; NUM_FEATURES] {
        [self.v, self.h, self.dv, self.a, self.l]
    }

    /// Predecessor velocity implied by v and dv.
    pub fn lead_velocity(&self) -> f64 {
        self.v + self.dv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Car,
    Truck,
    Cav,
}

impl VehicleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(Self::Car),
            "truck" => Ok(Self::Truck),
            "cav" => Ok(Self::Cav),
            other => Err(CoreError::Data(format!(
                "unknown vehicle_type `{other}` (expected car|truck|cav)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Truck => "truck",
            Self::Cav => "cav",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub preceding_id: u64,
    pub feature: TrajectoryFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSeries {
    pub id: u64,
    pub kind: VehicleKind,
    pub records: Vec<TrajectoryRecord>,
}

pub type SeriesMap = BTreeMap<u64, VehicleSeries>;

const CSV_COLUMNS: [&str; 9] = [
    "time_s",
    "vehicle_id",
    "preceding_id",
    "velocity_mps",
    "accel_mps2",
    "headway_m",
    "preceding_velocity_mps",
    "vehicle_length_m",
    "vehicle_type",
];

/// Load the canonical trajectory CSV into per-vehicle, time-ordered series
/// with predecessor linkage validated.
pub fn load_trajectories(path: &Path) -> Result<SeriesMap> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::Data(format!("cannot open {}: {e}", path.display())))?;
    load_trajectories_from(file, &path.display().to_string())
}

pub fn load_trajectories_from<R: Read>(reader: R, origin: &str) -> Result<SeriesMap> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CoreError::Data(format!("{origin}: cannot read header: {e}")))?
        .clone();
    let mut col = [usize::MAX; 9];
    for (want_idx, want) in CSV_COLUMNS.iter().enumerate() {
        match headers.iter().position(|h| h == *want) {
            Some(i) => col[want_idx] = i,
            None => {
                return Err(CoreError::Data(format!(
                    "{origin}: missing required column `{want}`"
                )))
            }
        }
    }

    let parse_f64 = |row: &csv::StringRecord, c: usize, name: &str, line: u64| -> Result<f64> {
        row.get(col[c])
            .ok_or_else(|| CoreError::Data(format!("{origin}:{line}: short row")))?
            .trim()
            .parse::<f64>()
            .map_err(|e| CoreError::Data(format!("{origin}:{line}: bad {name}: {e}")))
    };
    let parse_u64 = |row: &csv::StringRecord, c: usize, name: &str, line: u64| -> Result<u64> {
        row.get(col[c])
            .ok_or_else(|| CoreError::Data(format!("{origin}:{line}: short row")))?
            .trim()
            .parse::<u64>()
            .map_err(|e| CoreError::Data(format!("{origin}:{line}: bad {name}: {e}")))
    };

    let mut series: SeriesMap = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| CoreError::Data(format!("{origin}:{line}: {e}")))?;
        let id = parse_u64(&row, 1, "vehicle_id", line)?;
        if id == 0 {
            return Err(CoreError::Data(format!(
                "{origin}:{line}: vehicle_id 0 is reserved for `no predecessor`"
            )));
        }
        let kind = VehicleKind::parse(row.get(col[8]).unwrap_or("").trim())?;
        let record = TrajectoryRecord {
            time: parse_f64(&row, 0, "time_s", line)?,
            preceding_id: parse_u64(&row, 2, "preceding_id", line)?,
            feature: TrajectoryFeature {
                v: parse_f64(&row, 3, "velocity_mps", line)?,
                h: parse_f64(&row, 5, "headway_m", line)?,
                dv: parse_f64(&row, 6, "preceding_velocity_mps", line)?
                    - parse_f64(&row, 3, "velocity_mps", line)?,
                a: parse_f64(&row, 4, "accel_mps2", line)?,
                l: parse_f64(&row, 7, "vehicle_length_m", line)?,
            },
        };
        let entry = series.entry(id).or_insert_with(|| VehicleSeries {
            id,
            kind,
            records: Vec::new(),
        });
        if let Some(prev) = entry.records.last() {
            if record.time <= prev.time {
                return Err(CoreError::Data(format!(
                    "{origin}:{line}: non-monotone time for vehicle {id} ({} after {})",
                    record.time, prev.time
                )));
            }
        }
        entry.records.push(record);
    }

    // Predecessor linkage must resolve inside the file.
    let ids: std::collections::HashSet<u64> = series.keys().copied().collect();
    for s in series.values() {
        for r in &s.records {
            if r.preceding_id != 0 && !ids.contains(&r.preceding_id) {
                return Err(CoreError::Data(format!(
                    "{origin}: vehicle {} references unknown preceding_id {}",
                    s.id, r.preceding_id
                )));
            }
        }
    }
    Ok(series)
}

/// Write series back out in the canonical CSV schema. Floats use shortest
/// exact formatting so a reload reproduces the numeric fields.
pub fn write_trajectories<W: Write>(series: &SeriesMap, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)
        .map_err(|e| CoreError::Data(e.to_string()))?;
    for s in series.values() {
        for r in &s.records {
            w.write_record(&[
                r.time.to_string(),
                s.id.to_string(),
                r.preceding_id.to_string(),
                r.feature.v.to_string(),
                r.feature.a.to_string(),
                r.feature.h.to_string(),
                r.feature.lead_velocity().to_string(),
                r.feature.l.to_string(),
                s.kind.name().to_string(),
            ])
            .map_err(|e| CoreError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CoreError::Data(e.to_string()))?;
    Ok(())
}

/// One uninterrupted leader-follower stretch.
#[derive(Debug, Clone)]
pub struct CfEpisode {
    pub follower: u64,
    pub leader: u64,
    pub kind: VehicleKind,
    pub start_time: f64,
    pub dt: f64,
    pub rows: Vec<TrajectoryFeature>,
}

/// Episode extraction criteria. Defaults: headway in (0, 150] m, at least 30
/// seconds of continuous same-leader following.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionCriteria {
    pub min_duration: f64,
    pub max_headway: f64,
    pub dt_tolerance: f64,
}

impl Default for ExtractionCriteria {
    fn default() -> Self {
        Self {
            min_duration: 30.0,
            max_headway: 150.0,
            dt_tolerance: 1e-6,
        }
    }
}

/// Split every follower's series into maximal stretches with one unchanged
/// leader, uniform frame spacing and valid headway, then keep the stretches
/// of at least `min_duration`.
pub fn extract_cf_pairs(series: &SeriesMap, criteria: &ExtractionCriteria) -> Vec<CfEpisode> {
    let mut episodes = Vec::new();
    for s in series.values() {
        let recs = &s.records;
        let mut start = 0usize;
        let push = |lo: usize, hi: usize, episodes: &mut Vec<CfEpisode>| {
            // [lo, hi) candidate run with constant leader.
            if hi <= lo + 1 {
                return;
            }
            let leader = recs[lo].preceding_id;
            if leader == 0 {
                return;
            }
            let dt = recs[lo + 1].time - recs[lo].time;
            let duration = (hi - lo - 1) as f64 * dt;
            if duration + 1e-9 < criteria.min_duration {
                return;
            }
            episodes.push(CfEpisode {
                follower: s.id,
                leader,
                kind: s.kind,
                start_time: recs[lo].time,
                dt,
                rows: recs[lo..hi].iter().map(|r| r.feature).collect(),
            });
        };
        for i in 1..=recs.len() {
            let boundary = if i == recs.len() {
                true
            } else {
                let prev = &recs[i - 1];
                let cur = &recs[i];
                let dt_run = if i >= 2 {
                    recs[start + 1].time - recs[start].time
                } else {
                    cur.time - prev.time
                };
                cur.preceding_id != prev.preceding_id
                    || cur.feature.h <= 0.0
                    || cur.feature.h > criteria.max_headway
                    || ((cur.time - prev.time) - dt_run).abs() > criteria.dt_tolerance
            };
            if boundary {
                // Trim rows that violate headway bounds at the run edges.
                let mut lo = start;
                let mut hi = i;
                while lo < hi && !(recs[lo].feature.h > 0.0 && recs[lo].feature.h <= criteria.max_headway)
                {
                    lo += 1;
                }
                while hi > lo && !(recs[hi - 1].feature.h > 0.0
                    && recs[hi - 1].feature.h <= criteria.max_headway)
                {
                    hi -= 1;
                }
                push(lo, hi, &mut episodes);
                start = i;
            }
        }
    }
    episodes
}

/// One training window. `data` holds `context_rows + horizon + 1` raw
/// feature rows: the context ends at T (row `context_rows - 1`), targets run
/// T+1..T+F, and one trailing lookahead row keeps every shifted context
/// window and its matching lead-velocity input inside the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub data: DMatrix<f64>,
    pub context_rows: usize,
    pub horizon: usize,
    pub dt: f64,
}

impl SampleWindow {
    pub fn rows(&self) -> usize {
        self.context_rows + self.horizon + 1
    }

    /// Context window ending at T + offset (offset in 0..=horizon).
    pub fn context_at(&self, offset: usize) -> DMatrix<f64> {
        debug_assert!(offset <= self.horizon + 1);
        self.data.rows(offset, self.context_rows).into_owned()
    }

    /// Explicit state (v, h) at T + offset.
    pub fn es_at(&self, offset: usize) -> (f64, f64) {
        let r = self.context_rows - 1 + offset;
        (self.data[(r, 0)], self.data[(r, 1)])
    }

    /// Predecessor velocity at T + offset (drives evolution step offset+1).
    pub fn lead_velocity_at(&self, offset: usize) -> f64 {
        let r = self.context_rows - 1 + offset;
        self.data[(r, 0)] + self.data[(r, 2)]
    }

    /// The F future (v, h) targets.
    pub fn targets(&self) -> Vec<(f64, f64)> {
        (1..=self.horizon).map(|f| self.es_at(f)).collect()
    }

    /// The F future predecessor velocities feeding the model.
    pub fn future_lead_velocities(&self) -> Vec<f64> {
        (0..self.horizon).map(|f| self.lead_velocity_at(f)).collect()
    }
}

/// Slide a window of `context_rows + horizon + 1` rows over an episode.
pub fn make_samples(
    episode: &CfEpisode,
    context_rows: usize,
    horizon: usize,
    stride: usize,
) -> Vec<SampleWindow> {
    assert!(stride >= 1);
    let width = context_rows + horizon + 1;
    let n = episode.rows.len();
    let mut out = Vec::new();
    if n < width {
        return out;
    }
    let mut start = 0usize;
    while start + width <= n {
        let mut data = DMatrix::<f64>::zeros(width, NUM_FEATURES);
        for (r, row) in episode.rows[start..start + width].iter().enumerate() {
            let arr = row.as_array();
            for c in 0..NUM_FEATURES {
                data[(r, c)] = arr[c];
            }
        }
        out.push(SampleWindow {
            data,
            context_rows,
            horizon,
            dt: episode.dt,
        });
        start += stride;
    }
    out
}

/// Per-feature z-score statistics (train split only). Lead-velocity inputs
/// share the `v` feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
        }
    }

    pub fn fit(windows: &[&SampleWindow]) -> Result<Self> {
        let mut sum = [0.0; NUM_FEATURES];
        let mut count = 0usize;
        for w in windows {
            for r in 0..w.data.nrows() {
                for c in 0..NUM_FEATURES {
                    sum[c] += w.data[(r, c)];
                }
            }
            count += w.data.nrows();
        }
        if count == 0 {
            return Err(CoreError::Data("no rows to fit normalization".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0; NUM_FEATURES];
        for w in windows {
            for r in 0..w.data.nrows() {
                for c in 0..NUM_FEATURES {
                    let d = w.data[(r, c)] - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let mut std = [0.0; NUM_FEATURES];
        for c in 0..NUM_FEATURES {
            std[c] = (sq[c] / count as f64).sqrt();
            if std[c] <= 1e-12 {
                return Err(CoreError::ZeroVariance(FEATURE_NAMES[c].to_string()));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows.clone();
        for r in 0..out.nrows() {
            for c in 0..NUM_FEATURES {
                out[(r, c)] = (out[(r, c)] - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = rows.clone();
        for r in 0..out.nrows() {
            for c in 0..NUM_FEATURES {
                out[(r, c)] = out[(r, c)] * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn normalize_feature(&self, idx: usize, value: f64) -> f64 {
        (value - self.mean[idx]) / self.std[idx]
    }

    pub fn denormalize_feature(&self, idx: usize, value: f64) -> f64 {
        value * self.std[idx] + self.mean[idx]
    }

    /// Velocity-channel normalization, shared by lead-velocity inputs.
    pub fn normalize_velocity(&self, v: f64) -> f64 {
        self.normalize_feature(0, v)
    }

    pub fn denormalize_velocity(&self, v: f64) -> f64 {
        self.denormalize_feature(0, v)
    }

    pub fn normalize_es(&self, v: f64, h: f64) -> (f64, f64) {
        (self.normalize_feature(0, v), self.normalize_feature(1, h))
    }

    pub fn denormalize_es(&self, v: f64, h: f64) -> (f64, f64) {
        (self.denormalize_feature(0, v), self.denormalize_feature(1, h))
    }
}

/// Shuffled 7:1:2 split with z-score statistics from the train part only.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub samples: Vec<SampleWindow>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub normalization: Normalization,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_samples(&self) -> impl Iterator<Item = &SampleWindow> {
        self.train.iter().map(move |&i| &self.samples[i])
    }

    pub fn val_samples(&self) -> impl Iterator<Item = &SampleWindow> {
        self.val.iter().map(move |&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &SampleWindow> {
        self.test.iter().map(move |&i| &self.samples[i])
    }
}

pub fn split_and_normalize(samples: Vec<SampleWindow>, seed: u64) -> Result<DatasetSplit> {
    let n = samples.len();
    if n < 10 {
        return Err(CoreError::Data(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (7 * n + 5) / 10;
    let n_val = ((n + 5) / 10).max(1);
    let train: Vec<usize> = order[..n_train].to_vec();
    let val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test: Vec<usize> = order[n_train + n_val..].to_vec();
    let train_refs: Vec<&SampleWindow> = train.iter().map(|&i| &samples[i]).collect();
    let normalization = Normalization::fit(&train_refs)?;
    Ok(DatasetSplit {
        samples,
        train,
        val,
        test,
        normalization,
        seed,
    })
}

/// IDM-driven surrogate trajectories: the head vehicle follows `profile`,
/// every follower drives IDM with its class parameters. Deterministic.
pub fn generate_synthetic(
    platoon: &PlatoonConfig,
    profile: &LeadProfile,
    dt: f64,
    duration: f64,
) -> Result<SeriesMap> {
    platoon.validate()?;
    profile.validate()?;
    for v in &platoon.vehicles[1..] {
        v.idm().validate()?;
    }
    let n = platoon.vehicles.len();
    let steps = (duration / dt).round() as usize;
    let mut states = platoon.equilibrium_states(leading_velocity(0.0, profile)?);

    let mut series: SeriesMap = BTreeMap::new();
    for v in &platoon.vehicles {
        let kind = match (v.role, v.class) {
            (VehicleRole::Cav, _) => VehicleKind::Cav,
            (_, crate::platoon::VehicleClass::Car) => VehicleKind::Car,
            (_, crate::platoon::VehicleClass::Truck) => VehicleKind::Truck,
        };
        series.insert(
            v.id,
            VehicleSeries {
                id: v.id,
                kind,
                records: Vec::with_capacity(steps),
            },
        );
    }

    for k in 0..steps {
        let t = k as f64 * dt;
        let accels = idm_accelerations(platoon, &states).map_err(|e| match e {
            CoreError::Collision { vehicle, gap, .. } => CoreError::Collision {
                vehicle,
                time: t,
                gap,
            },
            other => other,
        })?;
        let lead_next = leading_velocity(((k + 1) as f64 * dt).min(duration), profile)?;
        for (i, v) in platoon.vehicles.iter().enumerate() {
            let (h, dv, preceding_id) = if i == 0 {
                (0.0, 0.0, 0)
            } else {
                (
                    platoon.gap(&states, i),
                    states[i - 1].velocity - states[i].velocity,
                    platoon.vehicles[i - 1].id,
                )
            };
            let a = if i == 0 {
                (lead_next - states[0].velocity) / dt
            } else {
                accels[i]
            };
            series.get_mut(&v.id).unwrap().records.push(TrajectoryRecord {
                time: t,
                preceding_id,
                feature: TrajectoryFeature {
                    v: states[i].velocity,
                    h,
                    dv,
                    a,
                    l: v.length(),
                },
            });
        }
        advance_world(&mut states, &accels, lead_next, dt);
        let _ = n;
    }
    Ok(series)
}

// ---------------------------------------------------------------------------
// Dataset persistence: flat f64 matrix file + JSON sidecar.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    n_samples: usize,
    rows_per_sample: usize,
    n_features: usize,
    feature_names: Vec<String>,
    headway_definition: String,
    dt_data: f64,
    context_rows: usize,
    horizon: usize,
    seed: u64,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    normalization: Normalization,
}

pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let first = split
        .samples
        .first()
        .ok_or_else(|| CoreError::Data("cannot save an empty dataset".into()))?;
    let rows = first.rows();
    let manifest = DatasetManifest {
        format: "koopcav-dataset".into(),
        version: 1,
        n_samples: split.samples.len(),
        rows_per_sample: rows,
        n_features: NUM_FEATURES,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        headway_definition:
            "bumper-to-bumper gap: predecessor front position minus own front position minus predecessor length (m)"
                .into(),
        dt_data: first.dt,
        context_rows: first.context_rows,
        horizon: first.horizon,
        seed: split.seed,
        train: split.train.clone(),
        val: split.val.clone(),
        test: split.test.clone(),
        normalization: split.normalization.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Data(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut buf = Vec::with_capacity(split.samples.len() * rows * NUM_FEATURES * 8);
    for s in &split.samples {
        if s.rows() != rows {
            return Err(CoreError::Data("inconsistent sample shapes".into()));
        }
        for r in 0..rows {
            for c in 0..NUM_FEATURES {
                buf.extend_from_slice(&s.data[(r, c)].to_le_bytes());
            }
        }
    }
    std::fs::write(dir.join("samples.bin"), buf)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| CoreError::Data(format!("manifest: {e}")))?;
    if manifest.format != "koopcav-dataset" {
        return Err(CoreError::Data(format!(
            "not a dataset directory: format `{}`",
            manifest.format
        )));
    }
    let raw = std::fs::read(dir.join("samples.bin"))?;
    let expect = manifest.n_samples * manifest.rows_per_sample * manifest.n_features * 8;
    if raw.len() != expect {
        return Err(CoreError::Data(format!(
            "samples.bin is {} bytes, manifest implies {expect}",
            raw.len()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.n_samples);
    let mut off = 0usize;
    for _ in 0..manifest.n_samples {
        let mut data = DMatrix::<f64>::zeros(manifest.rows_per_sample, manifest.n_features);
        for r in 0..manifest.rows_per_sample {
            for c in 0..manifest.n_features {
                data[(r, c)] = f64::from_le_bytes(raw[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        samples.push(SampleWindow {
            data,
            context_rows: manifest.context_rows,
            horizon: manifest.horizon,
            dt: manifest.dt_data,
        });
    }
    Ok(DatasetSplit {
        samples,
        train: manifest.train,
        val: manifest.val,
        test: manifest.test,
        normalization: manifest.normalization,
        seed: manifest.seed,
    })
}
