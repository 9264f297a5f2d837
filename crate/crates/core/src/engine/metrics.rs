//! Per-second population samples and derived convergence times.

use std::io::{self, Write};

pub const CSV_HEADER: &str = "time,frac_corrupt_undetected,frac_blank,frac_correct,frac_updated";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub frac_corrupt_undetected: f64,
    pub frac_blank: f64,
    pub frac_correct: f64,
    pub frac_updated: f64,
}

/// Times after which a fraction never again drops below a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Convergence {
    pub correct_95: Option<f64>,
    pub correct_100: Option<f64>,
    pub updated_100: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsTimeline {
    pub samples: Vec<Sample>,
    pub convergence: Convergence,
}

const EPS: f64 = 1e-9;

impl MetricsTimeline {
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut t = MetricsTimeline { samples, convergence: Convergence::default() };
        t.convergence = Convergence {
            correct_95: t.settling_time(|s| s.frac_correct, 0.95),
            correct_100: t.settling_time(|s| s.frac_correct, 1.0),
            updated_100: t.settling_time(|s| s.frac_updated, 1.0),
        };
        t
    }

    /// Earliest sample time from which `field` stays at or above `q` until
    /// the end of the timeline.
    pub fn settling_time(&self, field: impl Fn(&Sample) -> f64, q: f64) -> Option<f64> {
        let mut first = None;
        for s in self.samples.iter().rev() {
            if field(s) + EPS < q {
                break;
            }
            first = Some(s.time);
        }
        first
    }

    /// Earliest sample time at which `field` reaches `q`.
    pub fn first_reaching(&self, field: impl Fn(&Sample) -> f64, q: f64) -> Option<f64> {
        self.samples.iter().find(|s| field(s) + EPS >= q).map(|s| s.time)
    }

    /// Earliest time and value of the maximum of `field`.
    pub fn peak(&self, field: impl Fn(&Sample) -> f64) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for s in &self.samples {
            let v = field(s);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((s.time, v));
            }
        }
        best
    }

    pub fn peak_blank(&self) -> f64 {
        self.peak(|s| s.frac_blank).map_or(0.0, |p| p.1)
    }

    pub fn peak_corrupt(&self) -> f64 {
        self.peak(|s| s.frac_corrupt_undetected).map_or(0.0, |p| p.1)
    }

    /// Pointwise average. Timelines must have equal length.
    pub fn mean(timelines: &[&MetricsTimeline]) -> Option<MetricsTimeline> {
        let first = timelines.first()?;
        let len = first.samples.len();
        if timelines.iter().any(|t| t.samples.len() != len) {
            return None;
        }
        let k = timelines.len() as f64;
        let samples = (0..len)
            .map(|i| {
                let mut s = Sample { time: first.samples[i].time, ..Sample::zero() };
                for t in timelines {
                    let x = &t.samples[i];
                    s.frac_corrupt_undetected += x.frac_corrupt_undetected;
                    s.frac_blank += x.frac_blank;
                    s.frac_correct += x.frac_correct;
                    s.frac_updated += x.frac_updated;
                }
                s.frac_corrupt_undetected /= k;
                s.frac_blank /= k;
                s.frac_correct /= k;
                s.frac_updated /= k;
                s
            })
            .collect();
        Some(MetricsTimeline::new(samples))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:.0},{:.6},{:.6},{:.6},{:.6}",
                s.time, s.frac_corrupt_undetected, s.frac_blank, s.frac_correct, s.frac_updated
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }
}

impl Sample {
    pub fn zero() -> Self {
        Sample { time: 0.0, frac_corrupt_undetected: 0.0, frac_blank: 0.0, frac_correct: 0.0, frac_updated: 0.0 }
    }
}
