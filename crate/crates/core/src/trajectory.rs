//! Sampled trajectories and their CSV / JSON forms.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::system::{Mode, PiecewiseSmoothSystem};

/// Where a sample sits relative to the switching surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeLabel {
    /// `g < -tol`.
    D1,
    /// `g > tol`.
    D2,
    /// On the surface, moving with the sliding field.
    SlidingOnSigma,
    /// On the surface at a transversal crossing.
    CrossingSigma,
    /// Inside the regularization band of a smoothed trajectory.
    Band,
}

impl ModeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeLabel::D1 => "D1",
            ModeLabel::D2 => "D2",
            ModeLabel::SlidingOnSigma => "sliding",
            ModeLabel::CrossingSigma => "crossing",
            ModeLabel::Band => "band",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "D1" => ModeLabel::D1,
            "D2" => ModeLabel::D2,
            "sliding" => ModeLabel::SlidingOnSigma,
            "crossing" => ModeLabel::CrossingSigma,
            "band" => ModeLabel::Band,
            other => return Err(PwsError::Format(format!("unknown mode label {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// Reached the surface and started sliding.
    Arrival,
    /// Left a sliding segment.
    Exit,
    /// Passed through the surface.
    Crossing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// Region the trajectory came from; `None` when leaving a sliding segment.
    pub from: Option<Mode>,
    /// Index of the sample recorded at the event.
    pub sample: usize,
}

/// Contiguous stretch of a trajectory in one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub region: PhaseRegion,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseRegion {
    One,
    Two,
    Sliding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Input held on `[times[i], times[i + 1])`.
    pub inputs: Vec<DVector<f64>>,
    pub guard_values: Vec<f64>,
    pub modes: Vec<ModeLabel>,
    pub events: Vec<Event>,
    pub input_dim: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    /// Input applied at sample `i` (the last sample reuses the last input).
    pub fn input_at(&self, i: usize) -> &DVector<f64> {
        &self.inputs[i.min(self.inputs.len().saturating_sub(1))]
    }

    /// Linear interpolation of the state at time `t`, clamped to the stored span.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let i = self.times.partition_point(|s| *s <= t);
        if i == 0 {
            return self.states[0].clone();
        }
        if i >= self.len() {
            return self.final_state().clone();
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        &self.states[i - 1] * (1.0 - w) + &self.states[i] * w
    }

    /// Times at which the trajectory arrived at or crossed the surface.
    pub fn arrival_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Arrival | EventKind::Crossing))
            .map(|e| e.time)
            .collect()
    }

    /// Checks the structural invariants: strictly increasing times starting at 0
    /// and ending at `horizon`, matching lengths, and (when a system is given)
    /// stored guard values equal to a fresh evaluation.
    pub fn check_invariants(&self, horizon: f64, sys: Option<&dyn PiecewiseSmoothSystem>) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(PwsError::Format("empty trajectory".into()));
        }
        if self.states.len() != n || self.guard_values.len() != n || self.modes.len() != n {
            return Err(PwsError::Format("column lengths differ".into()));
        }
        if n > 1 && self.inputs.len() != n - 1 {
            return Err(PwsError::Format("need one input per sample interval".into()));
        }
        if self.times[0] != 0.0 || self.final_time() != horizon {
            return Err(PwsError::Format(format!(
                "time grid spans [{}, {}], expected [0, {horizon}]",
                self.times[0],
                self.final_time()
            )));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PwsError::Format("times not strictly increasing".into()));
        }
        if let Some(sys) = sys {
            for (x, g) in self.states.iter().zip(&self.guard_values) {
                if sys.guard(x) != *g {
                    return Err(PwsError::Format("stored guard value differs from g(x)".into()));
                }
            }
        }
        Ok(())
    }

    /// Run-length segmentation into regions. Crossing samples are boundaries;
    /// band samples are assigned by the sign of the guard.
    pub fn phases(&self) -> Vec<Phase> {
        let mut out: Vec<Phase> = Vec::new();
        let mut current: Option<(PhaseRegion, f64, f64)> = None;
        for i in 0..self.len() {
            let t = self.times[i];
            let region = match self.modes[i] {
                ModeLabel::D1 => Some(PhaseRegion::One),
                ModeLabel::D2 => Some(PhaseRegion::Two),
                ModeLabel::SlidingOnSigma => Some(PhaseRegion::Sliding),
                ModeLabel::CrossingSigma => None,
                ModeLabel::Band => Some(if self.guard_values[i] > 0.0 {
                    PhaseRegion::Two
                } else {
                    PhaseRegion::One
                }),
            };
            match (current, region) {
                (Some((r, s, _)), Some(r2)) if r == r2 => current = Some((r, s, t)),
                (Some((r, s, _)), _) => {
                    out.push(Phase { region: r, start: s, end: t });
                    current = region.map(|r2| (r2, t, t));
                }
                (None, Some(r2)) => current = Some((r2, if i > 0 { self.times[i - 1] } else { t }, t)),
                (None, None) => {}
            }
        }
        if let Some((r, s, e)) = current {
            out.push(Phase { region: r, start: s, end: e });
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("g".into());
        header.push("mode".into());
        wtr.write_record(&header)?;
        let zero_input = DVector::zeros(m);
        for i in 0..self.len() {
            let u = if self.inputs.is_empty() { &zero_input } else { self.input_at(i) };
            let mut rec = Vec::with_capacity(n + m + 3);
            rec.push(fmt_float(self.times[i]));
            rec.extend(self.states[i].iter().map(|v| fmt_float(*v)));
            rec.extend(u.iter().map(|v| fmt_float(*v)));
            rec.push(fmt_float(self.guard_values[i]));
            rec.push(self.modes[i].as_str().to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| PwsError::Format(e.to_string()))
    }

    /// Parses the CSV form. Events are not part of it and come back empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        if header.len() != n + m + 3 || &header[0] != "t" || &header[n + m + 1] != "g" || &header[n + m + 2] != "mode" {
            return Err(PwsError::Format("unexpected header".into()));
        }
        let mut traj = Trajectory {
            times: vec![],
            states: vec![],
            inputs: vec![],
            guard_values: vec![],
            modes: vec![],
            events: vec![],
            input_dim: m,
        };
        let parse = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| PwsError::Format(format!("{s:?}: {e}"))) };
        let mut row_inputs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            traj.times.push(parse(&rec[0])?);
            let x: Result<Vec<f64>> = (1..=n).map(|i| parse(&rec[i])).collect();
            traj.states.push(DVector::from_vec(x?));
            let u: Result<Vec<f64>> = (n + 1..=n + m).map(|i| parse(&rec[i])).collect();
            row_inputs.push(DVector::from_vec(u?));
            traj.guard_values.push(parse(&rec[n + m + 1])?);
            traj.modes.push(ModeLabel::parse(&rec[n + m + 2])?);
        }
        row_inputs.pop();
        traj.inputs = row_inputs;
        Ok(traj)
    }

    pub fn events_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.events)?)
    }

    pub fn phases_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.phases())?)
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}
