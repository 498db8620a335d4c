use serde::{Deserialize, Serialize};

/// Binary confusion counts against each instance's positive label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, chosen: &str, truth: &str, positive: &str) {
        match (chosen == positive, truth == positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// 0 when there is neither a positive prediction nor a positive truth.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub p95: f64,
}

/// Mean and nearest-rank 95th percentile.
pub fn timing(samples: &[f64]) -> Timing {
    if samples.is_empty() {
        return Timing::default();
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
    Timing {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        p95: s[rank - 1],
    }
}

/// The smallest `w_min` that lets at most `round(target * n)` of the
/// observed gate weights through (`w > w_min`). Weights of exactly 0 can
/// never pass, since `w_min` is never negative.
pub fn calibrate_w_min(weights: &[f64], target_rate: f64) -> Option<f64> {
    if weights.is_empty() || !(0.0..=1.0).contains(&target_rate) {
        return None;
    }
    let mut w = weights.to_vec();
    w.sort_by(|a, b| b.total_cmp(a));
    let k = (target_rate * w.len() as f64).round() as usize;
    if k >= w.len() {
        return Some(0.0);
    }
    Some(w[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_matches_hand_count() {
        let mut c = Confusion::default();
        for (ch, tr) in [("y", "y"), ("y", "n"), ("n", "y"), ("n", "n"), ("y", "y")] {
            c.add(ch, tr, "y");
        }
        assert_eq!(
            c,
            Confusion {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert!((c.f1() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(Confusion::default().f1(), 0.0);
    }

    #[test]
    fn p95_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = timing(&xs);
        assert_eq!(t.p95, 95.0);
        assert_eq!(t.mean, 50.5);
        assert_eq!(timing(&[3.0]).p95, 3.0);
    }

    #[test]
    fn w_min_hits_the_target_count() {
        let ws: Vec<f64> = (1..=1000).map(|i| (i as f64 * 0.618_033_988_7).fract()).collect();
        let w_min = calibrate_w_min(&ws, 0.053).unwrap();
        assert_eq!(ws.iter().filter(|&&w| w > w_min).count(), 53);
        let all = calibrate_w_min(&ws, 1.0).unwrap();
        assert_eq!(ws.iter().filter(|&&w| w > all).count(), 1000);
    }
}
