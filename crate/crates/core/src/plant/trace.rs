//! Time-indexed exogenous inputs: weather and IT-equipment load.
//!
//! File format: comma-separated with a header row. Weather files use
//! `minute,T_o_C,W_o`, load files use `minute,watts`. An optional leading
//! `# dt=<minutes>` line declares the timestep; without it the timestep is the
//! spacing of the first two rows.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Weather,
    IteLoad,
}

impl TraceKind {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            TraceKind::Weather => &["minute", "T_o_C", "W_o"],
            TraceKind::IteLoad => &["minute", "watts"],
        }
    }

    fn width(self) -> usize {
        self.columns().len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    kind: TraceKind,
    dt: f64,
    start_minute: f64,
    data: Vec<f64>,
}

impl Trace {
    /// Build a trace from row-major values. `data.len()` must be a multiple of
    /// the record width for `kind`.
    pub fn new(kind: TraceKind, dt: f64, start_minute: f64, data: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!("trace dt must be > 0, got {dt}")));
        }
        if !data.len().is_multiple_of(kind.width()) {
            return Err(Error::DimensionMismatch {
                expected: kind.width(),
                got: data.len() % kind.width(),
            });
        }
        Ok(Self {
            kind,
            dt,
            start_minute,
            data,
        })
    }

    /// Weather trace of constant conditions.
    pub fn constant_weather(t_out_c: f64, w_out: f64, dt: f64, len: usize) -> Self {
        let data = (0..len).flat_map(|_| [t_out_c, w_out]).collect();
        Self::new(TraceKind::Weather, dt, 0.0, data).expect("valid constant trace")
    }

    /// Load trace of constant power.
    pub fn constant_load(watts: f64, dt: f64, len: usize) -> Self {
        Self::new(TraceKind::IteLoad, dt, 0.0, vec![watts; len]).expect("valid constant trace")
    }

    pub fn kind(&self) -> TraceKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn start_minute(&self) -> f64 {
        self.start_minute
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.kind.width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Minutes covered, from the first record to the end of the last.
    pub fn end_minute(&self) -> f64 {
        self.start_minute + self.dt * self.len() as f64
    }

    pub fn record(&self, index: usize) -> &[f64] {
        let w = self.kind.width();
        &self.data[index * w..(index + 1) * w]
    }

    fn index_at(&self, minute: f64) -> Result<usize> {
        let rel = (minute - self.start_minute) / self.dt;
        if rel < 0.0 || !rel.is_finite() {
            return Err(Error::TraceExhausted { minute });
        }
        let idx = rel.floor() as usize;
        if idx >= self.len() {
            return Err(Error::TraceExhausted { minute });
        }
        Ok(idx)
    }

    /// Record in effect at `minute` (zero-order hold).
    pub fn at(&self, minute: f64) -> Result<&[f64]> {
        Ok(self.record(self.index_at(minute)?))
    }
}

/// Parse a trace file. `kind` selects the expected column set.
pub fn load_trace(path: impl AsRef<Path>, kind: TraceKind) -> Result<Trace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path, kind)
}

fn parse_trace(text: &str, path: &Path, kind: TraceKind) -> Result<Trace> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let validation = |message: String| Error::Validation {
        path: path.to_path_buf(),
        message,
    };

    let expected = kind.columns();
    let mut declared_dt = None;
    let mut header_seen = false;
    let mut minutes = Vec::new();
    let mut data = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("dt=") {
                let dt: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad dt declaration {v:?}")))?;
                declared_dt = Some(dt);
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols != expected {
                return Err(parse_err(
                    lineno,
                    format!("expected header {:?}, found {:?}", expected.join(","), line),
                ));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < expected.len() {
            return Err(parse_err(
                lineno,
                format!("missing column {}", expected[fields.len()]),
            ));
        }
        if fields.len() > expected.len() {
            return Err(parse_err(lineno, format!("{} extra column(s)", fields.len() - expected.len())));
        }
        for (name, field) in expected.iter().zip(&fields) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("column {name}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("column {name}: non-finite value")));
            }
            if *name == "minute" {
                minutes.push(v);
            } else {
                data.push(v);
            }
        }
        let n = minutes.len();
        if n >= 2 && minutes[n - 1] <= minutes[n - 2] {
            return Err(validation(format!(
                "time index not strictly increasing at line {lineno}"
            )));
        }
    }

    if minutes.is_empty() {
        return Err(validation("trace has no records".into()));
    }
    let dt = match (declared_dt, minutes.len()) {
        (Some(dt), _) => dt,
        (None, 1) => return Err(validation("single-record trace needs a `# dt=` declaration".into())),
        (None, _) => minutes[1] - minutes[0],
    };
    if !(dt > 0.0) {
        return Err(validation(format!("timestep must be > 0, got {dt}")));
    }
    for (i, m) in minutes.iter().enumerate() {
        let want = minutes[0] + dt * i as f64;
        if (m - want).abs() > 1e-6 * dt.max(1.0) {
            return Err(validation(format!(
                "record {} at minute {m} breaks the uniform {dt}-minute spacing",
                i + 1
            )));
        }
    }
    match kind {
        TraceKind::Weather => {
            if data.chunks(2).any(|r| r[1] < 0.0) {
                return Err(validation("negative humidity ratio".into()));
            }
        }
        TraceKind::IteLoad => {
            if data.iter().any(|w| *w < 0.0) {
                return Err(validation("negative load".into()));
            }
        }
    }
    Trace::new(kind, dt, minutes[0], data)
}

/// Write a trace in the file format read by [`load_trace`].
pub fn save_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "# dt={}", trace.dt);
    let _ = writeln!(out, "{}", trace.kind.columns().join(","));
    for i in 0..trace.len() {
        let minute = trace.start_minute + trace.dt * i as f64;
        let _ = write!(out, "{minute}");
        for v in trace.record(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Normalized IT-equipment amplitude by hour of day.
pub fn ite_amplitude(hour_of_day: f64) -> f64 {
    match hour_of_day {
        h if h < 6.0 => 0.50,
        h if h < 8.0 => 0.75,
        h if h < 18.0 => 1.00,
        _ => 0.80,
    }
}

/// Synthetic IT load: daily amplitude schedule times uniform white noise of
/// the given half-width, sampled every `dt` minutes.
pub fn gen_ite_load(
    day_count: usize,
    peak_watts: f64,
    noise_half_width: f64,
    dt: f64,
    seed: u64,
) -> Result<Trace> {
    if day_count < 1 {
        return Err(Error::InvalidParameter("day_count must be >= 1".into()));
    }
    if !(peak_watts > 0.0) {
        return Err(Error::InvalidParameter("peak_watts must be > 0".into()));
    }
    if !(0.0..1.0).contains(&noise_half_width) {
        return Err(Error::InvalidParameter("noise half-width must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (day_count as f64 * 1440.0 / dt).round() as usize;
    let data = (0..steps)
        .map(|i| {
            let minute = dt * i as f64;
            let hour = (minute % 1440.0) / 60.0;
            let eps = if noise_half_width > 0.0 {
                rng.gen_range(-noise_half_width..noise_half_width)
            } else {
                0.0
            };
            peak_watts * ite_amplitude(hour) * (1.0 + eps)
        })
        .collect();
    Trace::new(TraceKind::IteLoad, dt, 0.0, data)
}

/// Parameters of the synthetic weather generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherSpec {
    /// Mean outdoor temperature on day 0, °C.
    pub mean_c: f64,
    /// Half peak-to-peak daily swing, °C.
    pub daily_amp_c: f64,
    /// Linear drift of the daily mean, °C per day.
    pub drift_c_per_day: f64,
    /// Stationary standard deviation of the slow day-to-day anomaly, °C.
    pub anomaly_std_c: f64,
    /// Mean outdoor humidity ratio, lb/lb.
    pub humidity: f64,
}

impl Default for WeatherSpec {
    fn default() -> Self {
        Self {
            mean_c: 24.0,
            daily_amp_c: 4.0,
            drift_c_per_day: 0.03,
            anomaly_std_c: 1.0,
            humidity: 0.010,
        }
    }
}

impl WeatherSpec {
    /// Four climate presets used by the dynamics evaluation table.
    pub fn presets() -> [(&'static str, WeatherSpec); 4] {
        [
            (
                "coastal",
                WeatherSpec {
                    mean_c: 20.0,
                    daily_amp_c: 3.0,
                    drift_c_per_day: 0.02,
                    anomaly_std_c: 0.8,
                    humidity: 0.011,
                },
            ),
            (
                "highland",
                WeatherSpec {
                    mean_c: 18.0,
                    daily_amp_c: 5.0,
                    drift_c_per_day: 0.04,
                    anomaly_std_c: 1.2,
                    humidity: 0.006,
                },
            ),
            (
                "continental",
                WeatherSpec {
                    mean_c: 24.0,
                    daily_amp_c: 4.0,
                    drift_c_per_day: 0.03,
                    anomaly_std_c: 1.0,
                    humidity: 0.010,
                },
            ),
            (
                "humid",
                WeatherSpec {
                    mean_c: 27.0,
                    daily_amp_c: 3.5,
                    drift_c_per_day: 0.02,
                    anomaly_std_c: 0.8,
                    humidity: 0.016,
                },
            ),
        ]
    }
}

/// Synthetic weather: drifting mean, sinusoidal daily cycle peaking at 15:00,
/// and a slow first-order anomaly with a one-day correlation time.
pub fn gen_weather(day_count: usize, spec: &WeatherSpec, dt: f64, seed: u64) -> Result<Trace> {
    if day_count < 1 {
        return Err(Error::InvalidParameter("day_count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (day_count as f64 * 1440.0 / dt).round() as usize;
    let phi = (-dt / 1440.0f64).exp();
    let innovation = spec.anomaly_std_c * (1.0 - phi * phi).sqrt();
    let mut anomaly = 0.0;
    let mut data = Vec::with_capacity(steps * 2);
    for i in 0..steps {
        let minute = dt * i as f64;
        let day = minute / 1440.0;
        let hour = (minute % 1440.0) / 60.0;
        let cycle = (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin();
        // Sum of three uniforms: unit-variance, bounded, cheap.
        let z: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum();
        anomaly = phi * anomaly + innovation * z;
        let t = spec.mean_c + spec.drift_c_per_day * day + spec.daily_amp_c * cycle + anomaly;
        let w = (spec.humidity * (1.0 + 0.1 * cycle) + 0.0005 * anomaly).max(0.0);
        data.push(t);
        data.push(w);
    }
    Trace::new(TraceKind::Weather, dt, 0.0, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, kind: TraceKind) -> Result<Trace> {
        parse_trace(text, Path::new("mem.csv"), kind)
    }

    #[test]
    fn empty_file_is_validation_error() {
        assert!(matches!(parse("", TraceKind::IteLoad), Err(Error::Validation { .. })));
        assert!(matches!(
            parse("minute,watts\n", TraceKind::IteLoad),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn single_row_with_declared_dt() {
        let t = parse("# dt=15\nminute,watts\n0,1000\n", TraceKind::IteLoad).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.dt(), 15.0);
        assert_eq!(t.at(14.9).unwrap(), &[1000.0]);
        assert!(t.at(15.0).is_err());
    }

    #[test]
    fn missing_humidity_column_names_column_and_line() {
        let err = parse("minute,T_o_C,W_o\n0,20,0.01\n15,21\n", TraceKind::Weather).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("W_o"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_time_rejected() {
        let err = parse("minute,watts\n0,1\n15,1\n15,1\n", TraceKind::IteLoad).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn uneven_spacing_rejected() {
        let err = parse("minute,watts\n0,1\n15,1\n45,1\n", TraceKind::IteLoad).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn malformed_number_reports_line() {
        let err = parse("minute,watts\n0,1\n15,abc\n", TraceKind::IteLoad).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn ite_schedule_without_noise() {
        let t = gen_ite_load(1, 5000.0, 0.0, 15.0, 3).unwrap();
        assert_eq!(t.len(), 96);
        assert_eq!(t.at(12.0 * 60.0).unwrap()[0], 5000.0);
        assert_eq!(t.at(3.0 * 60.0).unwrap()[0], 2500.0);
        assert_eq!(t.at(7.0 * 60.0).unwrap()[0], 3750.0);
        assert_eq!(t.at(20.0 * 60.0).unwrap()[0], 4000.0);
    }

    #[test]
    fn ite_noise_is_bounded_and_seeded() {
        let a = gen_ite_load(3, 1000.0, 0.05, 15.0, 11).unwrap();
        let b = gen_ite_load(3, 1000.0, 0.05, 15.0, 11).unwrap();
        let c = gen_ite_load(3, 1000.0, 0.05, 15.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for i in 0..a.len() {
            let minute = 15.0 * i as f64;
            let base = 1000.0 * ite_amplitude((minute % 1440.0) / 60.0);
            assert!((a.record(i)[0] / base - 1.0).abs() <= 0.05);
        }
    }

    #[test]
    fn save_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = gen_weather(2, &WeatherSpec::default(), 15.0, 5).unwrap();
        let path = dir.path().join("w.csv");
        save_trace(&w, &path).unwrap();
        let back = load_trace(&path, TraceKind::Weather).unwrap();
        assert_eq!(back, w);
    }
}
