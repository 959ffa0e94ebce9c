//! Run histories, mimicry frequency, cross-seed aggregation and curve alignment.
//!
//! `metrics.csv` columns are, in order: `iteration, env_steps, mean_reward,
//! std_reward, mimicry_frequency`, followed by the run kind's auxiliary
//! columns (for policy-gradient runs `entropy, clip_fraction, lr`).
//! Spreads across seeds are population standard deviations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{AgentAction, GridConfig};

pub const BASE_COLUMNS: [&str; 5] = ["iteration", "env_steps", "mean_reward", "std_reward", "mimicry_frequency"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub kind: String,
    pub seed: u64,
    pub build_id: String,
    pub config: serde_json::Value,
    /// Free-form provenance notes, e.g. which settings are local defaults.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub iteration: i64,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mimicry_frequency: f64,
    pub aux: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub metadata: RunMetadata,
    pub aux_columns: Vec<String>,
    pub records: Vec<Record>,
}

impl RunHistory {
    pub fn new(metadata: RunMetadata, aux_columns: &[&str]) -> Self {
        Self {
            metadata,
            aux_columns: aux_columns.iter().map(|s| s.to_string()).collect(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.aux.len() != self.aux_columns.len() {
            return Err(Error::ShapeMismatch {
                what: "auxiliary metrics",
                expected: self.aux_columns.len(),
                actual: record.aux.len(),
            });
        }
        if self.records.last().is_some_and(|r| r.iteration >= record.iteration) {
            return Err(Error::Numerical(format!(
                "iteration {} does not increase the history",
                record.iteration
            )));
        }
        if !(0.0..=1.0).contains(&record.mimicry_frequency) {
            return Err(Error::Numerical(format!(
                "mimicry frequency {} outside [0, 1]",
                record.mimicry_frequency
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn aux(&self, column: &str) -> Option<Vec<f64>> {
        let i = self.aux_columns.iter().position(|c| c == column)?;
        Some(self.records.iter().map(|r| r.aux[i]).collect())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_reward).collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = BASE_COLUMNS
            .iter()
            .copied()
            .chain(self.aux_columns.iter().map(String::as_str))
            .collect();
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iteration.to_string(),
                r.env_steps.to_string(),
                r.mean_reward.to_string(),
                r.std_reward.to_string(),
                r.mimicry_frequency.to_string(),
            ];
            row.extend(r.aux.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    /// Reads `metrics.csv`; metadata is left empty.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Schema { message, .. } => Error::Schema {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let schema = |message: String| Error::Schema {
            path: "metrics.csv".into(),
            message,
        };
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers()?.clone();
        if header.len() < BASE_COLUMNS.len() || header.iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
            return Err(schema(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let aux_columns: Vec<String> = header.iter().skip(BASE_COLUMNS.len()).map(String::from).collect();
        let mut records = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let f = |i: usize| -> Result<f64> {
                row[i]
                    .parse()
                    .map_err(|_| schema(format!("row {}: bad number {:?}", line + 1, &row[i])))
            };
            records.push(Record {
                iteration: row[0]
                    .parse()
                    .map_err(|_| schema(format!("row {}: bad iteration", line + 1)))?,
                env_steps: row[1]
                    .parse()
                    .map_err(|_| schema(format!("row {}: bad env_steps", line + 1)))?,
                mean_reward: f(2)?,
                std_reward: f(3)?,
                mimicry_frequency: f(4)?,
                aux: (BASE_COLUMNS.len()..row.len()).map(f).collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            metadata: RunMetadata::default(),
            aux_columns,
            records,
        })
    }
}

/// Emit tallies for mimicry frequency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitCounts {
    pub total: u64,
    pub mimic: u64,
}

impl EmitCounts {
    pub fn add(&mut self, action: AgentAction, mimicable: &[usize]) {
        if let AgentAction::Emit(k) = action {
            self.total += 1;
            if mimicable.contains(&k) {
                self.mimic += 1;
            }
        }
    }

    pub fn merge(&mut self, other: EmitCounts) {
        self.total += other.total;
        self.mimic += other.mimic;
    }

    /// Zero when nothing was emitted.
    pub fn frequency(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.mimic as f64 / self.total as f64
        }
    }
}

/// Fraction of emits whose symbol both agents and resources can produce.
pub fn mimicry_frequency<'a>(actions: impl IntoIterator<Item = &'a AgentAction>, config: &GridConfig) -> f64 {
    let overlap = config.mimicable();
    let mut c = EmitCounts::default();
    for &a in actions {
        c.add(a, &overlap);
    }
    c.frequency()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn stderr_of(std_pop: f64, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        std_pop / ((n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub iteration: i64,
    pub env_steps: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub stderr_reward: f64,
    pub mean_mimicry: f64,
    pub std_mimicry: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub window: usize,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub points: Vec<AggregatePoint>,
    pub final_stats: FinalStats,
}

fn interpolate(records: &[Record], it: f64, field: impl Fn(&Record) -> f64) -> f64 {
    let i = records.partition_point(|r| (r.iteration as f64) < it);
    if i == 0 {
        return field(&records[0]);
    }
    if i == records.len() {
        return field(&records[i - 1]);
    }
    let (a, b) = (&records[i - 1], &records[i]);
    let (xa, xb) = (a.iteration as f64, b.iteration as f64);
    if xb == xa {
        return field(b);
    }
    let w = (it - xa) / (xb - xa);
    field(a) + w * (field(b) - field(a))
}

/// Pointwise statistics across runs plus final-window statistics over the
/// last `final_window` records of each run.
///
/// Runs with different iteration grids are linearly interpolated onto the
/// grid of the run with the fewest records, restricted to the common range.
pub fn aggregate_runs(histories: &[RunHistory], final_window: usize) -> Result<Aggregate> {
    if histories.is_empty() || histories.iter().any(|h| h.records.is_empty()) {
        return Err(Error::config("aggregation needs at least one non-empty history"));
    }
    let coarsest = histories.iter().min_by_key(|h| h.records.len()).unwrap();
    let lo = histories.iter().map(|h| h.records[0].iteration).max().unwrap();
    let hi = histories.iter().map(|h| h.records.last().unwrap().iteration).min().unwrap();
    let grid: Vec<i64> = coarsest
        .records
        .iter()
        .map(|r| r.iteration)
        .filter(|&i| i >= lo && i <= hi)
        .collect();
    let n = histories.len();
    let points = grid
        .iter()
        .map(|&it| {
            let at = |f: fn(&Record) -> f64| -> Vec<f64> {
                histories.iter().map(|h| interpolate(&h.records, it as f64, f)).collect()
            };
            let (mean_reward, std_reward) = mean_std(&at(|r| r.mean_reward));
            let (mean_mimicry, std_mimicry) = mean_std(&at(|r| r.mimicry_frequency));
            let (env_steps, _) = mean_std(&at(|r| r.env_steps as f64));
            AggregatePoint {
                iteration: it,
                env_steps,
                mean_reward,
                std_reward,
                stderr_reward: stderr_of(std_reward, n),
                mean_mimicry,
                std_mimicry,
            }
        })
        .collect();
    let window = final_window.max(1);
    let per_run: Vec<f64> = histories
        .iter()
        .map(|h| {
            let k = window.min(h.records.len());
            let tail = &h.records[h.records.len() - k..];
            tail.iter().map(|r| r.mean_reward).sum::<f64>() / k as f64
        })
        .collect();
    let (mean, std) = mean_std(&per_run);
    Ok(Aggregate {
        n_runs: n,
        points,
        final_stats: FinalStats {
            window,
            stderr: stderr_of(std, n),
            per_run,
            mean,
            std,
        },
    })
}

impl Aggregate {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "iteration",
            "env_steps",
            "n_runs",
            "mean_reward",
            "std_reward_population",
            "stderr_reward",
            "mean_mimicry_frequency",
            "std_mimicry_frequency_population",
        ])?;
        for p in &self.points {
            w.write_record([
                p.iteration.to_string(),
                p.env_steps.to_string(),
                self.n_runs.to_string(),
                p.mean_reward.to_string(),
                p.std_reward.to_string(),
                p.stderr_reward.to_string(),
                p.mean_mimicry.to_string(),
                p.std_mimicry.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `(input index, shifted history)` for runs that cross the threshold.
    pub aligned: Vec<(usize, RunHistory)>,
    /// Input indices of runs that never cross.
    pub excluded: Vec<usize>,
}

/// First record index whose mean reward exceeds `threshold` for `sustain`
/// consecutive records.
pub fn crossing_index(history: &RunHistory, threshold: f64, sustain: usize) -> Option<usize> {
    let sustain = sustain.max(1);
    let r = &history.records;
    (0..r.len().saturating_sub(sustain - 1)).find(|&i| r[i..i + sustain].iter().all(|x| x.mean_reward > threshold))
}

/// Shifts each run's iteration axis so its threshold crossing lands at 0.
pub fn align_curves(histories: &[RunHistory], threshold: f64, sustain: usize) -> Alignment {
    let mut aligned = Vec::new();
    let mut excluded = Vec::new();
    for (i, h) in histories.iter().enumerate() {
        match crossing_index(h, threshold, sustain) {
            Some(c) => {
                let origin = h.records[c].iteration;
                let mut shifted = h.clone();
                for r in &mut shifted.records {
                    r.iteration -= origin;
                }
                aligned.push((i, shifted));
            }
            None => excluded.push(i),
        }
    }
    Alignment { aligned, excluded }
}

/// One line of a plot; `secondary` lines use the right-hand [0, 1] axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub secondary: bool,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart with reward on the left axis and frequencies on the right.
pub fn render_svg(title: &str, x_label: &str, series: &[PlotSeries]) -> String {
    let (w, h) = (720.0, 420.0);
    let (l, r, t, b) = (70.0, 70.0, 40.0, 50.0);
    let pw = w - l - r;
    let ph = h - t - b;
    let primary: Vec<&(f64, f64)> = series.iter().filter(|s| !s.secondary).flat_map(|s| &s.points).collect();
    let all: Vec<&(f64, f64)> = series.iter().flat_map(|s| &s.points).collect();
    let range = |it: &mut dyn Iterator<Item = f64>| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in it {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(&mut all.iter().map(|p| p.0));
    let (y0, y1) = range(&mut primary.iter().map(|p| p.1));
    let sx = |x: f64| l + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| t + ph - (y - y0) / (y1 - y0) * ph;
    let sy2 = |y: f64| t + ph - y.clamp(0.0, 1.0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            sx(xv),
            t + ph + 18.0,
            fmt_tick(xv)
        );
        if series.iter().any(|s| s.secondary) {
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, l + pw + 6.0, sy2(f) + 4.0, fmt_tick(f));
        }
    }
    if y0 < 0.0 && y1 > 0.0 {
        let (x2, y) = (l + pw, sy(0.0));
        let _ = writeln!(
            s,
            r##"<line x1="{l}" x2="{x2}" y1="{y}" y2="{y}" stroke="#999" stroke-dasharray="4 3"/>"##
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        l + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| {
                let py = if ser.secondary { sy2(y) } else { sy(y) };
                format!("{:.2},{:.2}", sx(x), py)
            })
            .collect();
        let dash = if ser.secondary { r#" stroke-dasharray="6 3""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            l + 8.0,
            t + 16.0 + 14.0 * i as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
