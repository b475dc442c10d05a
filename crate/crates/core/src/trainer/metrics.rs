//! Per-epoch training metrics.

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,rec_l1,rec_l2,gen_l1,gen_l2,weighted_total,max_weight_index";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean reconstruction error per observation, per level.
    pub reconstruction: [f64; 2],
    /// Mean generative error per observation (summed over dimensions), per level.
    pub generative: [f64; 2],
    /// Sum of the minibatch objectives over the epoch.
    pub weighted_total: f64,
    /// Dataset index of the largest weight seen in the epoch.
    pub max_weight_index: usize,
}

impl EpochMetrics {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            self.epoch,
            self.reconstruction[0],
            self.reconstruction[1],
            self.generative[0],
            self.generative[1],
            self.weighted_total,
            self.max_weight_index
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = |d: String| Error::format("metrics line", d);
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", f.len())));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        Ok(EpochMetrics {
            epoch: int(f[0])?,
            reconstruction: [real(f[1])?, real(f[2])?],
            generative: [real(f[3])?, real(f[4])?],
            weighted_total: real(f[5])?,
            max_weight_index: int(f[6])?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let m = EpochMetrics {
            epoch: 3,
            reconstruction: [2826.5, 0.1 + 0.2],
            generative: [-20.0, 1e-300],
            weighted_total: -1.5e7,
            max_weight_index: 8,
        };
        let line = m.to_csv_line();
        assert!(line.starts_with("3,") && line.ends_with(",8"));
        assert_eq!(EpochMetrics::from_csv_line(&line).unwrap(), m);
        assert!(metrics_csv(&[m]).starts_with(METRICS_HEADER));
        assert!(EpochMetrics::from_csv_line("1,2,3").is_err());
    }
}
