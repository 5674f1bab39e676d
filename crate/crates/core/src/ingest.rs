//! Raw sensor CSV parsing, 30 Hz resampling, stream synchronization and
//! label attachment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RATE_HZ: f64 = 30.0;

/// Activity classes; index is the class id and 0 is Null.
pub const CLASS_NAMES: [&str; 10] = [
    "Null",
    "Boxing",
    "Biceps curls",
    "Chest press",
    "Shoulder and chest press",
    "Arm hold and shoulder press",
    "Arm opener",
    "Sweeping a table",
    "Answering the telephone",
    "Wearing a headset",
];

// Slack used when turning a time span into a sample count, so that spans
// such as 0.7 s (0.7 * 30 = 20.999...) still land on the intended grid.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Als,
    Imu,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Als => 1,
            Modality::Imu => 3,
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            Modality::Als => &["timestamp_s", "lux"],
            Modality::Imu => &["timestamp_s", "ax", "ay", "az"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Indoors, fixed lighting.
    FixedIndoor = 1,
    /// Dark indoors with dynamic architectural lights.
    DynamicIndoor = 2,
    /// Outdoors, cloudy.
    CloudyOutdoor = 3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::FixedIndoor, Scenario::DynamicIndoor, Scenario::CloudyOutdoor];

    pub fn id(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Scenario {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::FixedIndoor),
            2 => Ok(Scenario::DynamicIndoor),
            3 => Ok(Scenario::CloudyOutdoor),
            _ => Err(Error::Config(format!("unknown scenario {v}"))),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.id()
    }
}

/// One sensor stream with per-sample timestamps. `values` is row-major,
/// `modality.channels()` values per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    pub modality: Modality,
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

impl RawStream {
    pub fn new(modality: Modality, timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = Self {
            modality,
            timestamps,
            values,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.timestamps.len() * self.channels() {
            return Err(Error::Schema(format!(
                "{:?} stream needs {} channels per sample",
                self.modality,
                self.channels()
            )));
        }
        if self.len() < 2 {
            return Err(Error::Validation("a stream needs at least 2 samples".into()));
        }
        if self.timestamps.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite timestamp or value".into()));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "timestamps not strictly increasing at sample {}",
                i + 1
            )));
        }
        if self.modality == Modality::Als && self.values.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("negative lux".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end(&self) -> f64 {
        self.timestamps[self.len() - 1]
    }

    /// Copy with `dt` added to every timestamp.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            modality: self.modality,
            timestamps: self.timestamps.iter().map(|t| t + dt).collect(),
            values: self.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub class_id: u8,
}

/// Half-open `[start, end)` activity intervals; time outside them is Null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub intervals: Vec<LabelInterval>,
}

impl LabelTrack {
    pub fn new(mut intervals: Vec<LabelInterval>) -> Result<Self> {
        intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let t = Self { intervals };
        t.validate()?;
        Ok(t)
    }

    pub fn class_names(&self) -> &'static [&'static str; 10] {
        &CLASS_NAMES
    }

    pub fn validate(&self) -> Result<()> {
        for iv in &self.intervals {
            if !(iv.start_s.is_finite() && iv.end_s.is_finite() && iv.start_s < iv.end_s) {
                return Err(Error::Validation(format!(
                    "interval [{}, {}) is empty or non-finite",
                    iv.start_s, iv.end_s
                )));
            }
            if iv.class_id as usize >= CLASS_NAMES.len() {
                return Err(Error::Validation(format!("class id {} out of range", iv.class_id)));
            }
        }
        let mut sorted = self.intervals.clone();
        sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        if let Some(w) = sorted.windows(2).find(|w| w[1].start_s < w[0].end_s) {
            return Err(Error::Validation(format!(
                "intervals [{}, {}) and [{}, {}) overlap",
                w[0].start_s, w[0].end_s, w[1].start_s, w[1].end_s
            )));
        }
        Ok(())
    }
}

/// Synchronized, uniformly sampled recording of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecording {
    pub subject_id: u32,
    pub scenario: Scenario,
    pub rate_hz: f64,
    /// Time of sample 0 on the light sensor's clock.
    pub t0: f64,
    pub als: Vec<f64>,
    pub imu: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
}

impl SensorRecording {
    pub fn len(&self) -> usize {
        self.als.len()
    }

    pub fn is_empty(&self) -> bool {
        self.als.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_hz != RATE_HZ {
            return Err(Error::Validation(format!("rate {} Hz, expected 30", self.rate_hz)));
        }
        if self.imu.len() != self.als.len() || self.labels.len() != self.als.len() {
            return Err(Error::Validation(format!(
                "stream lengths differ: als {}, imu {}, labels {}",
                self.als.len(),
                self.imu.len(),
                self.labels.len()
            )));
        }
        if self.labels.iter().any(|&l| l as usize >= CLASS_NAMES.len()) {
            return Err(Error::Validation("label outside 0..9".into()));
        }
        if self.als.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Validation("lux must be finite and non-negative".into()));
        }
        if self.imu.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite accelerometer value".into()));
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "{}: header `{}`, expected `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(","),
            expected.join(",")
        )));
    }
    Ok(())
}

/// Reads every data row as floats, checking the field count against the
/// header. Field-count mismatches are schema errors; unparsable numbers are
/// parse errors carrying the 1-based file line.
fn read_rows(path: &Path, expected: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv_reader(path)?;
    check_header(&mut rdr, path, expected)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                if let csv::ErrorKind::UnequalLengths { len, .. } = e.kind() {
                    return Err(Error::Schema(format!(
                        "{} line {line}: {len} fields, expected {}",
                        path.display(),
                        expected.len()
                    )));
                }
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: e.to_string(),
                });
            }
        };
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("`{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_stream_csv(path: &Path, modality: Modality) -> Result<RawStream> {
    let rows = read_rows(path, modality.header())?;
    let mut timestamps = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * modality.channels());
    for row in rows {
        timestamps.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    RawStream::new(modality, timestamps, values)
}

pub fn parse_label_csv(path: &Path) -> Result<LabelTrack> {
    let rows = read_rows(path, &["start_s", "end_s", "class_id"])?;
    let intervals = rows
        .into_iter()
        .map(|r| {
            if r[2].fract() != 0.0 || !(0.0..CLASS_NAMES.len() as f64).contains(&r[2]) {
                return Err(Error::Validation(format!("class id {} out of range", r[2])));
            }
            Ok(LabelInterval {
                start_s: r[0],
                end_s: r[1],
                class_id: r[2] as u8,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelTrack::new(intervals)
}

pub fn write_stream_csv(path: &Path, stream: &RawStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    w.write_record(stream.modality.header()).map_err(|e| csv_write_err(path, e))?;
    for i in 0..stream.len() {
        let mut rec = vec![stream.timestamps[i].to_string()];
        rec.extend(stream.sample(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_write_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_label_csv(path: &Path, track: &LabelTrack) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    w.write_record(["start_s", "end_s", "class_id"]).map_err(|e| csv_write_err(path, e))?;
    for iv in &track.intervals {
        w.write_record([iv.start_s.to_string(), iv.end_s.to_string(), iv.class_id.to_string()])
            .map_err(|e| csv_write_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Number of grid points of a uniform 30 Hz grid over `[t0, t1]`.
pub fn grid_len(t0: f64, t1: f64) -> usize {
    ((t1 - t0) * RATE_HZ + GRID_EPS).floor() as usize + 1
}

/// Linear interpolation onto `t0, t0 + 1/30, ...` with
/// `floor((t1 - t0) * 30) + 1` samples.
pub fn resample_30hz(stream: &RawStream, t0: f64, t1: f64) -> Result<RawStream> {
    stream.validate()?;
    if !(t0 >= stream.start() && t1 <= stream.end()) {
        return Err(Error::Range(format!(
            "[{t0}, {t1}] outside stream span [{}, {}]",
            stream.start(),
            stream.end()
        )));
    }
    if (t1 - t0) * RATE_HZ + GRID_EPS < 1.0 {
        return Err(Error::Range(format!("span [{t0}, {t1}] shorter than one 30 Hz step")));
    }
    let n = grid_len(t0, t1);
    let ch = stream.channels();
    let ts = &stream.timestamps;
    let mut out_t = Vec::with_capacity(n);
    let mut out_v = Vec::with_capacity(n * ch);
    let mut j = 0;
    for i in 0..n {
        let t = (t0 + i as f64 / RATE_HZ).min(stream.end());
        while j + 2 < ts.len() && ts[j + 1] <= t {
            j += 1;
        }
        // t lies in [ts[j], ts[j + 1]] (the last segment absorbs t == end)
        let (ta, tb) = (ts[j], ts[j + 1]);
        let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        let (a, b) = (stream.sample(j), stream.sample(j + 1));
        for c in 0..ch {
            out_v.push(if w == 0.0 { a[c] } else if w == 1.0 { b[c] } else { a[c] + w * (b[c] - a[c]) });
        }
        out_t.push(t0 + i as f64 / RATE_HZ);
    }
    // interpolation can produce tiny negatives only from negative inputs,
    // which validation already rejects
    RawStream::new(stream.modality, out_t, out_v)
}

/// Magnitude envelope used for synchronization: `|lux - mean|` for light,
/// `‖a‖ - mean ‖a‖` for the accelerometer.
pub fn envelope(stream: &RawStream) -> Vec<f64> {
    let mag: Vec<f64> = match stream.modality {
        Modality::Als => stream.values.clone(),
        Modality::Imu => (0..stream.len())
            .map(|i| stream.sample(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    };
    let mean = mag.iter().sum::<f64>() / mag.len() as f64;
    match stream.modality {
        Modality::Als => mag.iter().map(|v| (v - mean).abs()).collect(),
        Modality::Imu => mag.iter().map(|v| v - mean).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate {
    /// Positive when the target lags the reference: `target(t + offset)`
    /// lines up with `reference(t)`.
    pub offset_s: f64,
    pub lag_samples: i64,
    /// Normalized cross-correlation at the chosen lag, in [-1, 1].
    pub score: f64,
}

/// Normalized cross-correlation of `a[i]` against `b[i + lag]` over their
/// overlap (means removed over the overlap).
pub fn ncc_at_lag(a: &[f64], b: &[f64], lag: i64) -> f64 {
    let (a_start, b_start) = if lag >= 0 { (0, lag as usize) } else { ((-lag) as usize, 0) };
    if a_start >= a.len() || b_start >= b.len() {
        return 0.0;
    }
    let n = (a.len() - a_start).min(b.len() - b_start);
    if n < 2 {
        return 0.0;
    }
    let xa = &a[a_start..a_start + n];
    let xb = &b[b_start..b_start + n];
    let ma = xa.iter().sum::<f64>() / n as f64;
    let mb = xb.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in xa.iter().zip(xb) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Lag in `[-W, W]` samples maximizing the envelope cross-correlation; ties
/// (within 1e-12) go to the smallest `|lag|`, then to the positive lag.
pub fn estimate_sync_offset(reference: &RawStream, target: &RawStream, search_window_s: f64) -> Result<SyncEstimate> {
    if !(search_window_s > 0.0 && search_window_s.is_finite()) {
        return Err(Error::Config("search window must be positive".into()));
    }
    let max_lag = (search_window_s * RATE_HZ + GRID_EPS).floor() as i64;
    let need = max_lag as usize + 2;
    if reference.len() < need || target.len() < need {
        return Err(Error::InsufficientData(format!(
            "streams of {} and {} samples are shorter than the {search_window_s} s search window",
            reference.len(),
            target.len()
        )));
    }
    let (ea, eb) = (envelope(reference), envelope(target));
    let mut best = SyncEstimate {
        offset_s: 0.0,
        lag_samples: 0,
        score: ncc_at_lag(&ea, &eb, 0),
    };
    for k in 1..=max_lag {
        for lag in [k, -k] {
            let s = ncc_at_lag(&ea, &eb, lag);
            if s > best.score + 1e-12 {
                best = SyncEstimate {
                    offset_s: lag as f64 / RATE_HZ,
                    lag_samples: lag,
                    score: s,
                };
            }
        }
    }
    Ok(best)
}

/// Label every sample with the interval containing its timestamp (half-open,
/// later interval wins), Null elsewhere.
pub fn apply_labels(mut recording: SensorRecording, track: &LabelTrack) -> Result<SensorRecording> {
    track.validate()?;
    let mut intervals = track.intervals.clone();
    intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    recording.labels = vec![0; recording.len()];
    for iv in &intervals {
        for i in 0..recording.len() {
            let t = recording.time(i);
            if t >= iv.start_s && t < iv.end_s {
                recording.labels[i] = iv.class_id;
            }
        }
    }
    recording.validate()?;
    Ok(recording)
}

/// Per-subject manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub subject_id: u32,
    pub scenario: Scenario,
    pub als_path: PathBuf,
    pub imu_path: PathBuf,
    pub labels_path: PathBuf,
    /// IMU clock lag relative to the light sensor; estimated when absent.
    pub sync_offset_s: Option<f64>,
}

impl RecordingManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

/// Search window used when a manifest carries no sync offset.
pub const DEFAULT_SYNC_SEARCH_S: f64 = 5.0;

/// Build a labeled 30 Hz recording from a manifest: parse both streams,
/// shift the IMU by the (given or estimated) offset, resample both over
/// their common span and attach labels.
pub fn load_recording(manifest_path: &Path) -> Result<SensorRecording> {
    let m = RecordingManifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let als = parse_stream_csv(&dir.join(&m.als_path), Modality::Als)?;
    let imu = parse_stream_csv(&dir.join(&m.imu_path), Modality::Imu)?;
    let track = parse_label_csv(&dir.join(&m.labels_path))?;

    let offset = match m.sync_offset_s {
        Some(o) => o,
        None => {
            let t0 = als.start().max(imu.start());
            let t1 = als.end().min(imu.end());
            let a = resample_30hz(&als, t0, t1)?;
            let b = resample_30hz(&imu, t0, t1)?;
            estimate_sync_offset(&a, &b, DEFAULT_SYNC_SEARCH_S)?.offset_s
        }
    };
    let imu = imu.shifted(-offset);
    let t0 = als.start().max(imu.start());
    let t1 = als.end().min(imu.end());
    if !(t1 - t0 >= 1.0 / RATE_HZ) {
        return Err(Error::InsufficientData(format!(
            "subject {}: streams overlap for less than one sample",
            m.subject_id
        )));
    }
    let a = resample_30hz(&als, t0, t1)?;
    let b = resample_30hz(&imu, t0, t1)?;
    let rec = SensorRecording {
        subject_id: m.subject_id,
        scenario: m.scenario,
        rate_hz: RATE_HZ,
        t0,
        als: a.values,
        imu: (0..b.len()).map(|i| [b.values[3 * i], b.values[3 * i + 1], b.values[3 * i + 2]]).collect(),
        labels: Vec::new(),
    };
    apply_labels(rec, &track)
}

const RECORDING_HEADER: [&str; 6] = ["timestamp_s", "lux", "ax", "ay", "az", "label"];

/// Write a synchronized recording as one CSV (`timestamp_s,lux,ax,ay,az,label`).
pub fn write_recording_csv(path: &Path, rec: &SensorRecording) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    w.write_record(RECORDING_HEADER).map_err(|e| csv_write_err(path, e))?;
    for i in 0..rec.len() {
        let [x, y, z] = rec.imu[i];
        w.write_record([
            rec.time(i).to_string(),
            rec.als[i].to_string(),
            x.to_string(),
            y.to_string(),
            z.to_string(),
            rec.labels[i].to_string(),
        ])
        .map_err(|e| csv_write_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_recording_csv(path: &Path, subject_id: u32, scenario: Scenario) -> Result<SensorRecording> {
    let rows = read_rows(path, &RECORDING_HEADER)?;
    let t0 = rows
        .first()
        .map(|r| r[0])
        .ok_or_else(|| Error::InsufficientData(format!("{} has no samples", path.display())))?;
    let mut rec = SensorRecording {
        subject_id,
        scenario,
        rate_hz: RATE_HZ,
        t0,
        als: Vec::with_capacity(rows.len()),
        imu: Vec::with_capacity(rows.len()),
        labels: Vec::with_capacity(rows.len()),
    };
    for r in rows {
        if r[5].fract() != 0.0 || !(0.0..CLASS_NAMES.len() as f64).contains(&r[5]) {
            return Err(Error::Validation(format!("label {} out of range", r[5])));
        }
        rec.als.push(r[1]);
        rec.imu.push([r[2], r[3], r[4]]);
        rec.labels.push(r[5] as u8);
    }
    rec.validate()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn parses_als_file() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "timestamp_s,lux\n0.0,100\n0.1,101\n0.2,99\n");
        let s = parse_stream_csv(&p, Modality::Als).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.channels(), 1);
        assert_eq!(s.values, vec![100.0, 101.0, 99.0]);
    }

    #[test]
    fn short_imu_row_is_schema_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "i.csv", "timestamp_s,ax,ay,az\n0.0,1,2,3\n0.1,1,2\n");
        assert!(matches!(parse_stream_csv(&p, Modality::Imu), Err(Error::Schema(_))));
    }

    #[test]
    fn repeated_timestamp_is_validation_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "timestamp_s,lux\n0.0,1\n0.1,1\n0.1,1\n");
        assert!(matches!(parse_stream_csv(&p, Modality::Als), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_number_reports_line() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "timestamp_s,lux\n0.0,1\n0.1,abc\n");
        match parse_stream_csv(&p, Modality::Als) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_schema_error() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.csv", "t,lux\n0.0,1\n0.1,1\n");
        assert!(matches!(parse_stream_csv(&p, Modality::Als), Err(Error::Schema(_))));
    }

    #[test]
    fn resample_constant_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = vec![0.0];
        while *t.last().unwrap() < 5.0 {
            let next = t.last().unwrap() + rng.random_range(0.01..0.06);
            t.push(next);
        }
        let c = RawStream::new(Modality::Als, t.clone(), vec![5.0; t.len()]).unwrap();
        let r = resample_30hz(&c, 0.5, 4.5).unwrap();
        assert!(r.values.iter().all(|&v| v == 5.0));

        let ramp = RawStream::new(Modality::Als, t.clone(), t.clone()).unwrap();
        let r = resample_30hz(&ramp, 0.5, 4.5).unwrap();
        for (tt, v) in r.timestamps.iter().zip(&r.values) {
            assert!((tt - v).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_length() {
        let s = RawStream::new(Modality::Als, vec![0.0, 10.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(resample_30hz(&s, 1.0, 3.0).unwrap().len(), 61);
        assert_eq!(resample_30hz(&s, 0.0, 0.7).unwrap().len(), 22);
        assert!(matches!(resample_30hz(&s, -1.0, 3.0), Err(Error::Range(_))));
        assert!(matches!(resample_30hz(&s, 1.0, 1.01), Err(Error::Range(_))));
    }

    #[test]
    fn sync_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 30.0).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let s = RawStream::new(Modality::Als, t, v).unwrap();
        let e = estimate_sync_offset(&s, &s, 2.0).unwrap();
        assert_eq!(e.offset_s, 0.0);
        assert!((e.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sync_requires_enough_samples() {
        let s = RawStream::new(Modality::Als, vec![0.0, 1.0 / 30.0, 2.0 / 30.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(estimate_sync_offset(&s, &s, 1.0), Err(Error::InsufficientData(_))));
    }

    fn rec(n: usize) -> SensorRecording {
        SensorRecording {
            subject_id: 1,
            scenario: Scenario::FixedIndoor,
            rate_hz: RATE_HZ,
            t0: 0.0,
            als: vec![1.0; n],
            imu: vec![[0.0; 3]; n],
            labels: vec![0; n],
        }
    }

    #[test]
    fn labels_half_open() {
        let r = apply_labels(rec(90), &LabelTrack::default()).unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));

        let track = LabelTrack::new(vec![LabelInterval {
            start_s: 1.0,
            end_s: 2.0,
            class_id: 3,
        }])
        .unwrap();
        let r = apply_labels(rec(90), &track).unwrap();
        assert_eq!(r.labels.iter().filter(|&&l| l == 3).count(), 30);

        let track = LabelTrack::new(vec![
            LabelInterval {
                start_s: 0.0,
                end_s: 1.0,
                class_id: 2,
            },
            LabelInterval {
                start_s: 1.0,
                end_s: 2.0,
                class_id: 5,
            },
        ])
        .unwrap();
        let r = apply_labels(rec(90), &track).unwrap();
        assert_eq!(r.labels[30], 5);
        assert_eq!(r.labels[29], 2);
    }

    #[test]
    fn overlapping_intervals_rejected() {
        let iv = |a, b| LabelInterval {
            start_s: a,
            end_s: b,
            class_id: 1,
        };
        assert!(LabelTrack::new(vec![iv(0.0, 1.5), iv(1.0, 2.0)]).is_err());
        assert!(LabelTrack::new(vec![iv(1.0, 1.0)]).is_err());
    }

    #[test]
    fn scenario_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&Scenario::DynamicIndoor).unwrap(), "2");
        assert!(serde_json::from_str::<Scenario>("4").is_err());
    }
}
