use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Ratio, not percent.
    pub mpae: f64,
    pub smpae: f64,
    /// `None` when the actual series is constant.
    pub r2: Option<f64>,
    /// Terms skipped by MPAE because the actual value was 0.
    pub mpae_skipped: usize,
    /// Terms skipped by SMPAE because actual + predicted was 0.
    pub smpae_skipped: usize,
}

pub fn eval_metrics(actual: &[f64], predicted: &[f64]) -> Result<MetricReport> {
    if actual.len() != predicted.len() {
        return Err(Error::Shape {
            op: "eval_metrics",
            left: (actual.len(), 1),
            right: (predicted.len(), 1),
        });
    }
    if actual.len() < 2 {
        return Err(Error::Data("metrics need at least two points".into()));
    }
    let n = actual.len() as f64;
    let mae = actual.iter().zip(predicted).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;

    let ratio_mean = |denom: &dyn Fn(f64, f64) -> f64| -> (f64, usize) {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (&y, &p) in actual.iter().zip(predicted) {
            let d = denom(y, p);
            if d != 0.0 {
                sum += (y - p).abs() / d;
                used += 1;
            }
        }
        let mean = if used == 0 { 0.0 } else { sum / used as f64 };
        (mean, actual.len() - used)
    };
    let (mpae, mpae_skipped) = ratio_mean(&|y, _| y.abs());
    let (smpae, smpae_skipped) = ratio_mean(&|y, p| ((y + p) / 2.0).abs());

    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(MetricReport {
        mae,
        mpae,
        smpae,
        r2,
        mpae_skipped,
        smpae_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 4.0, 2.0];
        let m = eval_metrics(&y, &y).unwrap();
        assert_eq!((m.mae, m.mpae, m.smpae, m.r2), (0.0, 0.0, 0.0, Some(1.0)));
    }

    #[test]
    fn hand_example() {
        let m = eval_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mpae - 4.0 / 9.0).abs() < 1e-12);
        assert!(m.r2.unwrap().abs() < 1e-12);
    }

    #[test]
    fn smpae_example_and_skips() {
        let m = eval_metrics(&[2.0, 0.0], &[4.0, 0.0]).unwrap();
        assert!((m.smpae - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.mpae_skipped, m.smpae_skipped), (1, 1));
    }

    #[test]
    fn errors_and_flags() {
        assert!(eval_metrics(&[1.0, 2.0], &[1.0]).is_err());
        assert!(eval_metrics(&[1.0], &[1.0]).is_err());
        assert_eq!(eval_metrics(&[3.0, 3.0], &[1.0, 2.0]).unwrap().r2, None);
    }

    proptest! {
        #[test]
        fn metric_ranges(pairs in prop::collection::vec((0.0f64..1e3, 0.0f64..1e3), 2..50)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = eval_metrics(&y, &p).unwrap();
            prop_assert!(m.mae >= 0.0 && m.mpae >= 0.0);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&m.smpae));
            if let Some(r2) = m.r2 {
                prop_assert!(r2 <= 1.0);
            }
        }
    }
}
