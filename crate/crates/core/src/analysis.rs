//! Confusion matrices, run reports, and the CSV / JSON / SVG files a run
//! leaves behind.
//!
//! Every number in `report.json` except the single-round baselines is a
//! function of `traces.csv`; the parsers here exist so tests (and users) can
//! check that.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::protocol::{CalibrationStats, ProtocolTrace, RoundCache, SweepRow};

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const CONFUSION_ROUND1_FILE: &str = "confusion_round1.csv";
pub const CONFUSION_ROUND2_FILE: &str = "confusion_round2.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";

pub const SWEEP_HEADER: &str = "delta,accuracy,avg_delay,escalation_rate";
pub const TRACES_HEADER: &str = "sample_index,true_label,round1_pred,round1_conf,escalated,round2_pred,final_pred,delay";

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        ConfusionMatrix {
            counts: vec![vec![0; n]; n],
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn add(&mut self, true_label: usize, predicted: usize) -> Result<()> {
        let n = self.num_classes();
        if true_label >= n || predicted >= n {
            return Err(Error::arg(format!(
                "label pair ({true_label}, {predicted}) outside {n} classes"
            )));
        }
        self.counts[true_label][predicted] += 1;
        Ok(())
    }

    /// From `(true, predicted)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>, class_names: Vec<String>) -> Result<Self> {
        let mut m = ConfusionMatrix::new(class_names);
        for (t, p) in pairs {
            m.add(t, p)?;
        }
        Ok(m)
    }

    /// Final protocol decisions of `traces`.
    pub fn from_traces(traces: &[ProtocolTrace], class_names: Vec<String>) -> Result<Self> {
        Self::from_pairs(traces.iter().map(|t| (t.true_label, t.final_predicted)), class_names)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// `trace / total`; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::arg("empty confusion matrix CSV"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("true") {
            return Err(Error::arg("confusion matrix CSV must start with a `true` column"));
        }
        let class_names: Vec<String> = cols.map(str::to_string).collect();
        let mut m = ConfusionMatrix::new(class_names);
        let n = m.num_classes();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default();
            if i >= n || name != m.class_names[i] {
                return Err(Error::arg(format!("unexpected confusion matrix row {name:?}")));
            }
            let row: Vec<u64> = fields
                .map(|f| f.parse().map_err(|_| Error::arg(format!("bad count {f:?} in row {name}"))))
                .collect::<Result<_>>()?;
            if row.len() != n {
                return Err(Error::arg(format!("row {name} has {} counts, expected {n}", row.len())));
            }
            m.counts[i] = row;
            rows += 1;
        }
        if rows != n {
            return Err(Error::arg(format!("confusion matrix CSV has {rows} rows, expected {n}")));
        }
        Ok(m)
    }
}

/// One row of `traces.csv`. `round2_pred` is filled whenever the Round-2
/// head was evaluated for the sample, escalated or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_index: usize,
    pub true_label: usize,
    pub round1_pred: usize,
    pub round1_conf: f64,
    pub escalated: bool,
    pub round2_pred: Option<usize>,
    pub final_pred: usize,
    pub delay: usize,
}

impl From<&ProtocolTrace> for TraceRow {
    fn from(t: &ProtocolTrace) -> Self {
        TraceRow {
            sample_index: t.sample_index,
            true_label: t.true_label,
            round1_pred: t.round1.predicted,
            round1_conf: t.round1.confidence,
            escalated: t.escalated,
            round2_pred: t.round2.as_ref().map(|o| o.predicted),
            final_pred: t.final_predicted,
            delay: t.delay,
        }
    }
}

/// Trace rows at `delta`, carrying every cached Round-2 decision.
pub fn trace_rows(cache: &RoundCache, delta: f64) -> Result<Vec<TraceRow>> {
    Ok(cache
        .traces_at(delta)?
        .iter()
        .zip(&cache.round2)
        .map(|(t, o2)| TraceRow {
            round2_pred: o2.as_ref().map(|o| o.predicted),
            ..TraceRow::from(t)
        })
        .collect())
}

pub fn traces_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACES_HEADER}\n");
    for r in rows {
        let r2 = r.round2_pred.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.sample_index, r.true_label, r.round1_pred, r.round1_conf, r.escalated as u8, r2, r.final_pred, r.delay
        );
    }
    out
}

fn expect_header<'a>(lines: &mut impl Iterator<Item = &'a str>, header: &str, file: &str) -> Result<()> {
    match lines.next() {
        Some(h) if h == header => Ok(()),
        Some(h) => Err(Error::arg(format!("{file}: unexpected header {h:?}"))),
        None => Err(Error::arg(format!("{file}: missing header"))),
    }
}

fn field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::arg(format!("line {line}: invalid {name} {s:?}")))
}

pub fn parse_traces_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    expect_header(&mut lines, TRACES_HEADER, TRACES_FILE)?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::arg(format!("line {n}: expected 8 fields, got {}", f.len())));
            }
            let escalated = match f[4] {
                "1" => true,
                "0" => false,
                other => return Err(Error::arg(format!("line {n}: invalid escalated flag {other:?}"))),
            };
            Ok(TraceRow {
                sample_index: field(f[0], "sample_index", n)?,
                true_label: field(f[1], "true_label", n)?,
                round1_pred: field(f[2], "round1_pred", n)?,
                round1_conf: field(f[3], "round1_conf", n)?,
                escalated,
                round2_pred: if f[5].is_empty() { None } else { Some(field(f[5], "round2_pred", n)?) },
                final_pred: field(f[6], "final_pred", n)?,
                delay: field(f[7], "delay", n)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.delta, r.accuracy, r.avg_delay, r.escalation_rate);
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    expect_header(&mut lines, SWEEP_HEADER, SWEEP_FILE)?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::arg(format!("line {n}: expected 4 fields, got {}", f.len())));
            }
            Ok(SweepRow {
                delta: field(f[0], "delta", n)?,
                accuracy: field(f[1], "accuracy", n)?,
                avg_delay: field(f[2], "avg_delay", n)?,
                escalation_rate: field(f[3], "escalation_rate", n)?,
            })
        })
        .collect()
}

/// Summary statistics recomputed from trace rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub num_samples: usize,
    pub accuracy: f64,
    pub avg_delay: f64,
    pub escalation_rate: f64,
    pub round1_accuracy: f64,
    /// Round-2 head accuracy over the samples where it was evaluated.
    pub round2_accuracy: Option<f64>,
}

pub fn summarize(rows: &[TraceRow]) -> Result<TraceSummary> {
    if rows.is_empty() {
        return Err(Error::arg("no trace rows"));
    }
    let n = rows.len() as f64;
    let frac = |k: usize| k as f64 / n;
    let with_r2: Vec<_> = rows.iter().filter_map(|r| r.round2_pred.map(|p| p == r.true_label)).collect();
    Ok(TraceSummary {
        num_samples: rows.len(),
        accuracy: frac(rows.iter().filter(|r| r.final_pred == r.true_label).count()),
        avg_delay: rows.iter().map(|r| r.delay as f64).sum::<f64>() / n,
        escalation_rate: frac(rows.iter().filter(|r| r.escalated).count()),
        round1_accuracy: frac(rows.iter().filter(|r| r.round1_pred == r.true_label).count()),
        round2_accuracy: (with_r2.len() == rows.len())
            .then(|| with_r2.iter().filter(|&&c| c).count() as f64 / n),
    })
}

/// Test accuracy of a trained single-round baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub channel_uses: usize,
    pub channel: ChannelConfig,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrmtlResult {
    pub n_c1: usize,
    pub n_c2: usize,
    pub channel: ChannelConfig,
    pub round1_accuracy: f64,
    pub round2_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub channel_uses: usize,
    pub srstl_accuracy: f64,
    pub mrmtl_round: u8,
    pub mrmtl_accuracy: f64,
    pub gap: f64,
}

/// Pairs SRSTL(n_c1) with MRMTL Round 1 and SRSTL(n_c1 + n_c2) with Round
/// 1+2. Baselines must cover both budgets over the same channel.
pub fn compare_srstl_mrmtl(baselines: &[BaselineResult], mrmtl: &MrmtlResult) -> Result<Vec<ComparisonRow>> {
    let pick = |uses: usize| -> Result<&BaselineResult> {
        let b = baselines
            .iter()
            .find(|b| b.channel_uses == uses)
            .ok_or_else(|| Error::arg(format!("no SRSTL baseline with {uses} channel uses")))?;
        if b.channel.kind != mrmtl.channel.kind || b.channel.snr_db.to_bits() != mrmtl.channel.snr_db.to_bits() {
            return Err(Error::arg(format!(
                "SRSTL baseline with {uses} channel uses ran over {} at {} dB, MRMTL over {} at {} dB",
                b.channel.kind, b.channel.snr_db, mrmtl.channel.kind, mrmtl.channel.snr_db
            )));
        }
        Ok(b)
    };
    let rows = [
        (mrmtl.n_c1, 1u8, mrmtl.round1_accuracy),
        (mrmtl.n_c1 + mrmtl.n_c2, 2u8, mrmtl.round2_accuracy),
    ];
    rows.iter()
        .map(|&(uses, round, acc)| {
            let b = pick(uses)?;
            Ok(ComparisonRow {
                channel_uses: uses,
                srstl_accuracy: b.test_accuracy,
                mrmtl_round: round,
                mrmtl_accuracy: acc,
                gap: (b.test_accuracy - acc).abs(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub delta: f64,
    /// `"fixed"` or `"calibrated"`.
    pub delta_source: String,
    pub eval_seed: u64,
    pub summary: TraceSummary,
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrmtlSection {
    #[serde(flatten)]
    pub result: MrmtlResult,
    pub comparison: Option<Vec<ComparisonRow>>,
}

/// Everything `emit_report` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub generated_at: String,
    pub config: serde_json::Value,
    pub srstl: Vec<BaselineResult>,
    pub mrmtl: Option<MrmtlSection>,
    pub protocol: Option<ProtocolReport>,
    pub calibration: Option<CalibrationStats>,
    #[serde(skip)]
    pub traces: Vec<TraceRow>,
    #[serde(skip)]
    pub class_names: Vec<String>,
}

impl RunReport {
    pub fn confusion_round1(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_pairs(self.traces.iter().map(|r| (r.true_label, r.round1_pred)), self.class_names.clone())
    }

    /// Round-2 head decisions wherever they were evaluated.
    pub fn confusion_round2(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_pairs(
            self.traces.iter().filter_map(|r| r.round2_pred.map(|p| (r.true_label, p))),
            self.class_names.clone(),
        )
    }
}

pub fn timestamp_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json_text(value: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Writes the six report files into `out_dir`, creating it if needed.
/// Re-emitting the same report yields identical bytes apart from
/// `generated_at` in `report.json`.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<()> {
    let c1 = report.confusion_round1()?;
    let c2 = report.confusion_round2()?;
    let sweep = report.protocol.as_ref().map_or(&[][..], |p| p.sweep.as_slice());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join(REPORT_FILE), &json_text(report)?)?;
    write_file(&out_dir.join(SWEEP_FILE), &sweep_csv(sweep))?;
    write_file(&out_dir.join(TRACES_FILE), &traces_csv(&report.traces))?;
    write_file(&out_dir.join(CONFUSION_ROUND1_FILE), &c1.to_csv())?;
    write_file(&out_dir.join(CONFUSION_ROUND2_FILE), &c2.to_csv())?;
    write_file(&out_dir.join(CALIBRATION_FILE), &json_text(&report.calibration)?)
}

/// Chart file names and SVG bodies for a threshold sweep.
pub fn sweep_charts(rows: &[SweepRow]) -> Vec<(&'static str, String)> {
    let pts = |f: &dyn Fn(&SweepRow) -> (f64, f64)| rows.iter().map(f).collect::<Vec<_>>();
    vec![
        ("accuracy_vs_delta.svg", line_chart_svg("Accuracy vs threshold", "delta", "accuracy", &pts(&|r| (r.delta, r.accuracy)))),
        ("delay_vs_delta.svg", line_chart_svg("Average delay vs threshold", "delta", "channel uses", &pts(&|r| (r.delta, r.avg_delay)))),
        ("accuracy_vs_delay.svg", line_chart_svg("Accuracy vs average delay", "channel uses", "accuracy", &pts(&|r| (r.avg_delay, r.accuracy)))),
    ]
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Minimal standalone SVG line chart with axis ticks at the extremes.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 30.0;
    const B: f64 = 45.0;
    let (x0, x1) = extent(points.iter().map(|p| p.0));
    let (y0, y1) = extent(points.iter().map(|p| p.1));
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, sx(v), H - B + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, L - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{make_trace, task_accuracy, DecoderOutput};
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn out(pred: usize, conf: f64, round: u8) -> DecoderOutput {
        let mut probs = vec![(1.0 - conf) / 3.0; 4];
        probs[pred] = conf;
        DecoderOutput::new(probs, round)
    }

    #[test]
    fn all_correct_is_diagonal() {
        let m = ConfusionMatrix::from_pairs((0..4).map(|i| (i, i)), names(4)).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(m.counts[t][p], (t == p) as u64);
            }
        }
        assert_eq!(m.accuracy(), Some(1.0));
    }

    #[test]
    fn single_pair() {
        let m = ConfusionMatrix::from_pairs([(3, 7)], names(10)).unwrap();
        assert_eq!(m.counts[3][7], 1);
        assert_eq!(m.total(), 1);
        assert_eq!(m.trace(), 0);
        assert!(ConfusionMatrix::from_pairs([(3, 10)], names(10)).is_err());
    }

    #[test]
    fn row_normalization_handles_empty_rows() {
        let m = ConfusionMatrix::from_pairs([(0, 0), (0, 1), (0, 1)], names(2)).unwrap();
        let r = m.row_normalized();
        assert!((r[0][1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r[1], vec![0.0, 0.0]);
    }

    #[test]
    fn confusion_csv_round_trip() {
        let m = ConfusionMatrix::from_pairs([(0, 1), (2, 2), (1, 1)], names(3)).unwrap();
        let text = m.to_csv();
        assert!(text.starts_with("true,c0,c1,c2\nc0,0,1,0\n"));
        assert_eq!(ConfusionMatrix::parse_csv(&text).unwrap(), m);
    }

    #[test]
    fn empty_sweep_is_header_only() {
        assert_eq!(sweep_csv(&[]), format!("{SWEEP_HEADER}\n"));
        assert!(parse_sweep_csv(&sweep_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn comparison_gaps_match_reference_tables() {
        let chan = ChannelConfig::awgn(10.0, 0);
        let base = vec![
            BaselineResult { channel_uses: 5, channel: chan, test_accuracy: 0.7320 },
            BaselineResult { channel_uses: 10, channel: chan, test_accuracy: 0.8151 },
        ];
        let m = MrmtlResult { n_c1: 5, n_c2: 5, channel: chan, round1_accuracy: 0.7335, round2_accuracy: 0.8166 };
        let rows = compare_srstl_mrmtl(&base, &m).unwrap();
        assert!((rows[0].gap - 0.0015).abs() < 1e-12);
        assert!((rows[1].gap - 0.0015).abs() < 1e-12);

        let same = MrmtlResult { round1_accuracy: 0.7320, round2_accuracy: 0.8151, ..m.clone() };
        assert!(compare_srstl_mrmtl(&base, &same).unwrap().iter().all(|r| r.gap == 0.0));

        let other = MrmtlResult { channel: ChannelConfig::rayleigh(10.0, 0), ..m.clone() };
        assert!(compare_srstl_mrmtl(&base, &other).is_err());
        assert!(compare_srstl_mrmtl(&base[..1], &m).is_err());
    }

    #[test]
    fn svg_is_standalone_and_deterministic() {
        let rows = [
            SweepRow { delta: 0.0, accuracy: 0.5, avg_delay: 4.0, escalation_rate: 0.0 },
            SweepRow { delta: 1.0, accuracy: 0.7, avg_delay: 8.0, escalation_rate: 1.0 },
        ];
        let a = sweep_charts(&rows);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sweep_charts(&rows));
        for (_, svg) in &a {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains("<polyline"));
        }
        assert!(!line_chart_svg("t", "x", "y", &[]).contains("<polyline"));
    }

    fn arb_traces() -> impl Strategy<Value = Vec<ProtocolTrace>> {
        prop::collection::vec((0usize..4, 0usize..4, 0.25f64..1.0, 0usize..4, 0.25f64..1.0), 1..60).prop_flat_map(|rows| {
            (Just(rows), 0.0f64..1.01).prop_map(|(rows, delta)| {
                rows.into_iter()
                    .enumerate()
                    .map(|(j, (label, p1, c1, p2, c2))| {
                        make_trace(j, label, out(p1, c1, 1), Some(&out(p2, c2, 2)), delta, 4, 4).unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn trace_over_total_is_task_accuracy(traces in arb_traces()) {
            let m = ConfusionMatrix::from_traces(&traces, names(4)).unwrap();
            let acc = task_accuracy(&traces).unwrap();
            prop_assert!((m.accuracy().unwrap() - acc).abs() < 1e-12);
            prop_assert_eq!(m.total(), traces.len() as u64);
        }

        #[test]
        fn traces_csv_round_trips(traces in arb_traces()) {
            let rows: Vec<TraceRow> = traces.iter().map(TraceRow::from).collect();
            let back = parse_traces_csv(&traces_csv(&rows)).unwrap();
            prop_assert_eq!(&back, &rows);
            let s = summarize(&back).unwrap();
            prop_assert!((s.accuracy - task_accuracy(&traces).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn sweep_csv_round_trips(vals in prop::collection::vec((0.0f64..1.01, 0.0f64..1.0, 1.0f64..20.0, 0.0f64..1.0), 0..20)) {
            let rows: Vec<SweepRow> = vals.into_iter()
                .map(|(delta, accuracy, avg_delay, escalation_rate)| SweepRow { delta, accuracy, avg_delay, escalation_rate })
                .collect();
            prop_assert_eq!(parse_sweep_csv(&sweep_csv(&rows)).unwrap(), rows);
        }
    }
}
