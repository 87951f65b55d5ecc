//! Confidence-thresholded round selection and its delay / accuracy /
//! threshold-calibration analytics.
//!
//! Round 1 always runs. A sample escalates to Round 2 exactly when its
//! Round-1 confidence (largest SoftMax entry) is strictly below `delta`; the
//! receiver then decodes `[r1, r2]` with decoder 2. A sample costs `n_c1`
//! channel uses, or `n_c1 + n_c2` when escalated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::models::{infer_round1, infer_round2, round_stream, MrmtlModel, RoundOne};
use crate::nn::argmax;

/// Escalation threshold that no confidence reaches: every sample escalates.
pub const ALWAYS_ESCALATE: f64 = 1.01;
pub const DEFAULT_BINS: usize = 50;

/// One decoder decision: the probability vector, its argmax (lowest class
/// id on ties) and its maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderOutput {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
    pub round: u8,
}

impl DecoderOutput {
    pub fn new(probs: Vec<f64>, round: u8) -> Self {
        let predicted = argmax(&probs);
        let confidence = probs[predicted];
        DecoderOutput {
            probs,
            predicted,
            confidence,
            round,
        }
    }
}

/// Escalation rule: strictly below the threshold.
pub fn escalates(confidence: f64, delta: f64) -> bool {
    confidence < delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTrace {
    pub sample_index: usize,
    pub round1: DecoderOutput,
    pub escalated: bool,
    pub round2: Option<DecoderOutput>,
    pub final_predicted: usize,
    pub true_label: usize,
    /// Channel uses consumed by this sample.
    pub delay: usize,
}

impl ProtocolTrace {
    pub fn correct(&self) -> bool {
        self.final_predicted == self.true_label
    }
}

/// Assembles the trace for one sample. `round2` is consulted only when the
/// sample escalates and must then be present.
pub fn make_trace(
    sample_index: usize,
    true_label: usize,
    round1: DecoderOutput,
    round2: Option<&DecoderOutput>,
    delta: f64,
    n_c1: usize,
    n_c2: usize,
) -> Result<ProtocolTrace> {
    let escalated = escalates(round1.confidence, delta);
    let round2 = if escalated {
        Some(round2.cloned().ok_or_else(|| {
            Error::State(format!("sample {sample_index} escalates at delta {delta} but has no Round-2 output"))
        })?)
    } else {
        None
    };
    let final_predicted = round2.as_ref().map_or(round1.predicted, |o| o.predicted);
    Ok(ProtocolTrace {
        sample_index,
        escalated,
        final_predicted,
        true_label,
        delay: if escalated { n_c1 + n_c2 } else { n_c1 },
        round1,
        round2,
    })
}

/// Runs the two-round protocol sample by sample. Sample `j` draws its
/// Round-m channel from `round_stream(seed, j, m)`, so repeated runs at
/// different thresholds see the same channel realizations.
pub fn run_protocol(
    model: &MrmtlModel,
    samples: &[Sample],
    delta: f64,
    cfg: &ChannelConfig,
    seed: u64,
) -> Result<Vec<ProtocolTrace>> {
    let (n1, n2) = (model.n_c1(), model.n_c2());
    samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let x = s.tensor();
            let (out1, r1) = infer_round1(model, &x, cfg, &mut round_stream(seed, j, 1))?;
            let out2 = if escalates(out1.confidence, delta) {
                Some(infer_round2(model, &x, &r1, cfg, &mut round_stream(seed, j, 2))?)
            } else {
                None
            };
            make_trace(j, s.label, out1, out2.as_ref(), delta, n1, n2)
        })
        .collect()
}

fn non_empty(traces: &[ProtocolTrace]) -> Result<()> {
    if traces.is_empty() {
        Err(Error::arg("no protocol traces"))
    } else {
        Ok(())
    }
}

/// Mean channel uses per sample.
pub fn average_delay(traces: &[ProtocolTrace]) -> Result<f64> {
    non_empty(traces)?;
    Ok(traces.iter().map(|t| t.delay as f64).sum::<f64>() / traces.len() as f64)
}

/// `n_c1 * P(stay) + (n_c1 + n_c2) * P(escalate)` from empirical frequencies.
pub fn delay_decomposition(traces: &[ProtocolTrace], n_c1: usize, n_c2: usize) -> Result<f64> {
    non_empty(traces)?;
    let n = traces.len() as f64;
    let escalated = traces.iter().filter(|t| t.escalated).count() as f64;
    let stayed = n - escalated;
    Ok(n_c1 as f64 * (stayed / n) + (n_c1 + n_c2) as f64 * (escalated / n))
}

/// Fraction of samples whose final prediction is correct.
pub fn task_accuracy(traces: &[ProtocolTrace]) -> Result<f64> {
    non_empty(traces)?;
    Ok(traces.iter().filter(|t| t.correct()).count() as f64 / traces.len() as f64)
}

/// `P(ok1 | stay) P(stay) + P(ok2 | escalate) P(escalate)` from empirical
/// conditional frequencies. An empty condition contributes zero.
pub fn accuracy_decomposition(traces: &[ProtocolTrace]) -> Result<f64> {
    non_empty(traces)?;
    let n = traces.len() as f64;
    let (mut stay, mut stay_ok, mut esc, mut esc_ok) = (0usize, 0usize, 0usize, 0usize);
    for t in traces {
        if t.escalated {
            esc += 1;
            esc_ok += t.round2.as_ref().is_some_and(|o| o.predicted == t.true_label) as usize;
        } else {
            stay += 1;
            stay_ok += (t.round1.predicted == t.true_label) as usize;
        }
    }
    let term = |ok: usize, cond: usize| {
        if cond == 0 {
            0.0
        } else {
            (ok as f64 / cond as f64) * (cond as f64 / n)
        }
    };
    Ok(term(stay_ok, stay) + term(esc_ok, esc))
}

/// Fraction of traces whose Round-1 decision is correct.
pub fn round1_accuracy(traces: &[ProtocolTrace]) -> Result<f64> {
    non_empty(traces)?;
    Ok(traces.iter().filter(|t| t.round1.predicted == t.true_label).count() as f64 / traces.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mean_conf_correct: f64,
    pub mean_conf_incorrect: f64,
    pub delta_star: f64,
    pub num_bins: usize,
    pub histogram_correct: Vec<u64>,
    pub histogram_incorrect: Vec<u64>,
    pub count_correct: usize,
    pub count_incorrect: usize,
    /// False when correct decisions are not more confident on average.
    pub separated: bool,
    /// True when the calibration samples are the evaluation test split.
    #[serde(default)]
    pub reused_test_split: bool,
}

/// Midpoint of the conditional mean confidences.
pub fn delta_star(mean_conf_correct: f64, mean_conf_incorrect: f64) -> f64 {
    (mean_conf_correct + mean_conf_incorrect) / 2.0
}

fn bin_of(confidence: f64, num_bins: usize) -> usize {
    ((confidence.clamp(0.0, 1.0) * num_bins as f64) as usize).min(num_bins - 1)
}

/// Calibration statistics from Round-1 confidences and their correctness.
pub fn calibrate_from(confidences: &[f64], correct: &[bool], num_bins: usize) -> Result<CalibrationStats> {
    if num_bins == 0 {
        return Err(Error::arg("num_bins must be >= 1"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::arg("confidences and correctness flags differ in length"));
    }
    let mut hist = [vec![0u64; num_bins], vec![0u64; num_bins]];
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let k = if ok { 0 } else { 1 };
        hist[k][bin_of(c, num_bins)] += 1;
        sums[k] += c;
        counts[k] += 1;
    }
    if counts[0] == 0 {
        return Err(Error::Calibration("correct"));
    }
    if counts[1] == 0 {
        return Err(Error::Calibration("incorrect"));
    }
    let mean_c = sums[0] / counts[0] as f64;
    let mean_i = sums[1] / counts[1] as f64;
    let [histogram_correct, histogram_incorrect] = hist;
    Ok(CalibrationStats {
        mean_conf_correct: mean_c,
        mean_conf_incorrect: mean_i,
        delta_star: delta_star(mean_c, mean_i),
        num_bins,
        histogram_correct,
        histogram_incorrect,
        count_correct: counts[0],
        count_incorrect: counts[1],
        separated: mean_c >= mean_i,
        reused_test_split: false,
    })
}

/// Runs Round 1 on `samples` and derives the threshold from the
/// conditional mean confidences of correct and incorrect decisions.
pub fn calibrate_threshold<M: RoundOne + Sync>(
    model: &M,
    samples: &[Sample],
    cfg: &ChannelConfig,
    seed: u64,
    num_bins: usize,
) -> Result<CalibrationStats> {
    let outs = crate::models::round1_outputs(model, samples, cfg, seed)?;
    let conf: Vec<f64> = outs.iter().map(|(o, _)| o.confidence).collect();
    let ok: Vec<bool> = outs.iter().zip(samples).map(|((o, _), s)| o.predicted == s.label).collect();
    calibrate_from(&conf, &ok, num_bins)
}

/// Round-1 outputs for every sample and Round-2 outputs where computed.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundCache {
    pub n_c1: usize,
    pub n_c2: usize,
    pub labels: Vec<usize>,
    pub round1: Vec<DecoderOutput>,
    pub round2: Vec<Option<DecoderOutput>>,
}

impl RoundCache {
    /// Protocol traces at `delta`, evaluated against the cached outputs.
    pub fn traces_at(&self, delta: f64) -> Result<Vec<ProtocolTrace>> {
        self.round1
            .iter()
            .zip(&self.round2)
            .zip(&self.labels)
            .enumerate()
            .map(|(j, ((o1, o2), &label))| make_trace(j, label, o1.clone(), o2.as_ref(), delta, self.n_c1, self.n_c2))
            .collect()
    }

    pub fn escalated_at(&self, delta: f64) -> Vec<usize> {
        self.round1
            .iter()
            .enumerate()
            .filter(|(_, o)| escalates(o.confidence, delta))
            .map(|(j, _)| j)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Round 2 for every sample.
    Eager,
    /// Round 2 only for samples some grid point escalates.
    Lazy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub accuracy: f64,
    pub avg_delay: f64,
    pub escalation_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub cache: RoundCache,
}

/// Computes Round-1 (and Round-2, per `mode`) outputs once per sample with
/// the same channel streams as [`run_protocol`].
pub fn compute_round_cache(
    model: &MrmtlModel,
    samples: &[Sample],
    cfg: &ChannelConfig,
    seed: u64,
    round2_below: Option<f64>,
) -> Result<RoundCache> {
    let outs: Vec<(DecoderOutput, Option<DecoderOutput>)> = samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let x = s.tensor();
            let (o1, r1) = infer_round1(model, &x, cfg, &mut round_stream(seed, j, 1))?;
            let o2 = match round2_below {
                Some(d) if !escalates(o1.confidence, d) => None,
                _ => Some(infer_round2(model, &x, &r1, cfg, &mut round_stream(seed, j, 2))?),
            };
            Ok((o1, o2))
        })
        .collect::<Result<_>>()?;
    let (round1, round2) = outs.into_iter().unzip();
    Ok(RoundCache {
        n_c1: model.n_c1(),
        n_c2: model.n_c2(),
        labels: samples.iter().map(|s| s.label).collect(),
        round1,
        round2,
    })
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::arg("empty threshold grid"));
    }
    if grid.iter().any(|d| !d.is_finite()) {
        return Err(Error::arg("threshold grid contains a non-finite value"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::arg("threshold grid must be sorted ascending"));
    }
    Ok(())
}

/// Accuracy, delay and escalation rate at every grid threshold.
pub fn sweep_rows(cache: &RoundCache, grid: &[f64]) -> Result<Vec<SweepRow>> {
    validate_grid(grid)?;
    grid.iter()
        .map(|&delta| {
            let traces = cache.traces_at(delta)?;
            Ok(SweepRow {
                delta,
                accuracy: task_accuracy(&traces)?,
                avg_delay: average_delay(&traces)?,
                escalation_rate: traces.iter().filter(|t| t.escalated).count() as f64 / traces.len() as f64,
            })
        })
        .collect()
}

/// Evaluates every threshold of `grid` against one pass of cached outputs.
pub fn sweep_threshold(
    model: &MrmtlModel,
    samples: &[Sample],
    grid: &[f64],
    cfg: &ChannelConfig,
    seed: u64,
    mode: SweepMode,
) -> Result<Sweep> {
    validate_grid(grid)?;
    let below = match mode {
        SweepMode::Eager => None,
        SweepMode::Lazy => Some(*grid.last().expect("non-empty grid")),
    };
    let cache = compute_round_cache(model, samples, cfg, seed, below)?;
    Ok(Sweep {
        rows: sweep_rows(&cache, grid)?,
        cache,
    })
}

/// `start, start + step, ...` up to and including `stop`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            start: 0.0,
            stop: 1.0,
            step: 0.02,
        }
    }
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.start.is_finite() && self.stop.is_finite() && self.stop >= self.start) {
            return Err(Error::arg(format!("invalid grid {}:{}:{}", self.start, self.step, self.stop)));
        }
        // Count first, then scale, so 0:0.02:1 gives exactly 51 points.
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.start + i as f64 * self.step).collect())
    }
}

impl std::str::FromStr for GridSpec {
    type Err = Error;

    /// Parses `start:step:stop`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.trim().parse::<f64>().map_err(|_| Error::arg(format!("invalid grid {s:?}")));
        match parts.as_slice() {
            [a, b, c] => {
                let g = GridSpec {
                    start: num(a)?,
                    step: num(b)?,
                    stop: num(c)?,
                };
                g.values()?;
                Ok(g)
            }
            _ => Err(Error::arg(format!("grid must be start:step:stop, got {s:?}"))),
        }
    }
}
