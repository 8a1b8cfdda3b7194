//! Encoding / consolidation / forgetting segmentation of accuracy curves
//! and the piecewise-linear repetition normalization onto `[0, 3]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::AccuracyPoint;
use crate::error::{Error, Result};

/// Slack for threshold comparisons, so that e.g. `0.97 * 1.0 <= 0.97`
/// holds despite rounding.
const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Encoding,
    Consolidation,
    Forgetting,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Encoding, Phase::Consolidation, Phase::Forgetting];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Encoding => "encoding",
            Phase::Consolidation => "consolidation",
            Phase::Forgetting => "forgetting",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown phase `{s}`")))
    }
}

/// Thresholds in absolute accuracy points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseThresholds {
    pub rise: f64,
    pub peak_fraction: f64,
    pub band: f64,
    pub drop: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            rise: 0.03,
            peak_fraction: 0.97,
            band: 0.03,
            drop: 0.03,
        }
    }
}

/// Inclusive range of repetition counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepRange {
    pub start: usize,
    pub end: usize,
}

impl RepRange {
    pub fn contains(&self, r: usize) -> bool {
        self.start <= r && r <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub encoding: RepRange,
    /// Absent when encoding runs to the last observed repetition.
    pub consolidation: Option<RepRange>,
    pub forgetting: Option<RepRange>,
    pub peak_accuracy: f64,
    /// Observed repetition counts, ascending.
    pub reps: Vec<usize>,
    pub thresholds: PhaseThresholds,
}

impl PhaseSegmentation {
    pub fn phase_of(&self, r: usize) -> Option<Phase> {
        if !self.reps.contains(&r) {
            return None;
        }
        if self.encoding.contains(r) {
            Some(Phase::Encoding)
        } else if self.consolidation.is_some_and(|c| c.contains(r)) {
            Some(Phase::Consolidation)
        } else if self.forgetting.is_some_and(|f| f.contains(r)) {
            Some(Phase::Forgetting)
        } else {
            None
        }
    }

    pub fn range(&self, phase: Phase) -> Option<RepRange> {
        match phase {
            Phase::Encoding => Some(self.encoding),
            Phase::Consolidation => self.consolidation,
            Phase::Forgetting => self.forgetting,
        }
    }

    /// Upper end of the normalized image: 3, 2 or 1.
    pub fn normalized_extent(&self) -> f64 {
        if self.forgetting.is_some() {
            3.0
        } else if self.consolidation.is_some() {
            2.0
        } else {
            1.0
        }
    }

    /// Anchors `(r, value)` of the piecewise-linear normalization.
    fn anchors(&self) -> Vec<(usize, f64)> {
        let mut a = vec![(self.encoding.start, 0.0), (self.encoding.end, 1.0)];
        if let Some(c) = self.consolidation {
            a.push((c.end, 2.0));
        }
        if let Some(f) = self.forgetting {
            a.push((f.end, 3.0));
        }
        a
    }
}

/// Segments `curve` (ascending in `r`) into learning phases.
///
/// Encoding starts at the first point and ends at the earlier of the first
/// point whose rise over its predecessor is at most `rise` (once some rise
/// above `rise` has been seen) and the first point at or above
/// `peak_fraction * peak`. Forgetting starts at the first point `t`, at
/// least two points after encoding, with `acc(t) < mean(acc(t-1), acc(t-2)) - drop`
/// and `acc(t) < peak - band`.
pub fn segment_phases(curve: &[AccuracyPoint], th: &PhaseThresholds) -> Result<PhaseSegmentation> {
    if curve.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "phase segmentation needs at least 3 points, got {}",
            curve.len()
        )));
    }
    if curve.windows(2).any(|w| w[1].r <= w[0].r) {
        return Err(Error::Input("accuracy curve must be strictly increasing in r".into()));
    }
    if let Some(p) = curve.iter().find(|p| !(0.0..=1.0).contains(&p.accuracy)) {
        return Err(Error::Input(format!("accuracy {} at r = {} outside [0, 1]", p.accuracy, p.r)));
    }
    let acc: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
    let reps: Vec<usize> = curve.iter().map(|p| p.r).collect();
    let last = acc.len() - 1;
    let peak = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let peak_end = acc
        .iter()
        .position(|&a| a >= th.peak_fraction * peak - EPS)
        .expect("the peak itself qualifies");
    let mut rose = false;
    let mut rise_end = None;
    for i in 1..acc.len() {
        if acc[i] - acc[i - 1] > th.rise + EPS {
            rose = true;
        } else if rose {
            rise_end = Some(i);
            break;
        }
    }
    let enc_end = rise_end.map_or(peak_end, |r| r.min(peak_end));

    let forget_start = (enc_end + 2..acc.len()).find(|&t| {
        let prior = (acc[t - 1] + acc[t - 2]) / 2.0;
        acc[t] < prior - th.drop - EPS && acc[t] < peak - th.band - EPS
    });

    let range = |a: usize, b: usize| RepRange {
        start: reps[a],
        end: reps[b],
    };
    let (consolidation, forgetting) = match forget_start {
        Some(t) => (Some(range(enc_end + 1, t - 1)), Some(range(t, last))),
        None if enc_end < last => (Some(range(enc_end + 1, last)), None),
        None => (None, None),
    };
    Ok(PhaseSegmentation {
        encoding: range(0, enc_end),
        consolidation,
        forgetting,
        peak_accuracy: peak,
        reps,
        thresholds: *th,
    })
}

/// Maps `r` onto `[0, 3]`: encoding start to 0, encoding end to 1,
/// consolidation end to 2 and the last repetition of forgetting to 3,
/// linearly in `r` between anchors.
///
/// A single-repetition encoding maps to 1.
pub fn normalize_repetitions(seg: &PhaseSegmentation, r: usize) -> Result<f64> {
    let first = seg.encoding.start;
    let last = *seg.reps.last().expect("segmentation has repetitions");
    if r < first || r > last {
        return Err(Error::OutOfRange(format!(
            "repetition {r} outside the observed schedule {first}..={last}"
        )));
    }
    let anchors = seg.anchors();
    // Later anchors win on coincident repetitions.
    for w in anchors.windows(2).rev() {
        let ((r0, v0), (r1, v1)) = (w[0], w[1]);
        if r == r1 {
            return Ok(v1);
        }
        if r0 < r && r < r1 {
            return Ok(v0 + (v1 - v0) * (r - r0) as f64 / (r1 - r0) as f64);
        }
    }
    Ok(anchors[0].1)
}
