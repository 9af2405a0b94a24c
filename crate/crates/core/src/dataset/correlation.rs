use std::io::Write;

use super::Trace;
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Matrix,
    /// Constant columns; their off-diagonal correlations are reported as 0.
    pub degenerate: Vec<bool>,
}

/// Pearson correlation over rows where every requested column is present.
pub fn correlation_matrix(trace: &Trace, columns: &[String]) -> Result<CorrelationMatrix> {
    let idx: Vec<usize> = columns.iter().map(|c| trace.column_index(c)).collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = trace
        .records()
        .iter()
        .filter_map(|r| idx.iter().map(|&i| r.values[i]).collect::<Option<Vec<f64>>>())
        .collect();
    if rows.len() < 2 {
        return Err(Error::Data("correlation needs at least two complete rows".into()));
    }
    let cols: Vec<Vec<f64>> = (0..idx.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let k = cols.len();
    let centered: Vec<(Vec<f64>, f64)> = cols
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let d: Vec<f64> = c.iter().map(|v| v - mean).collect();
            let ss = d.iter().map(|v| v * v).sum::<f64>();
            (d, ss)
        })
        .collect();
    let degenerate: Vec<bool> = centered.iter().map(|(_, ss)| *ss == 0.0).collect();
    let mut values = Matrix::identity(k);
    for i in 0..k {
        for j in i + 1..k {
            let r = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                let (a, sa) = &centered[i];
                let (b, sb) = &centered[j];
                let cov: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (cov / (sa * sb).sqrt()).clamp(-1.0, 1.0)
            };
            values.set(i, j, r);
            values.set(j, i, r);
        }
    }
    Ok(CorrelationMatrix {
        labels: columns.to_vec(),
        values,
        degenerate,
    })
}

impl CorrelationMatrix {
    /// Labeled CSV with a header row and a label column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_labeled_matrix(w, "", &self.labels, &self.labels, &self.values)
    }
}

pub(crate) fn write_labeled_matrix<W: Write>(
    w: W,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    m: &Matrix,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    out.write_record(&header)?;
    for (r, label) in row_labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(m.row(r).iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("<matrix csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_trace, SynthProfile, NUMERIC_COLUMNS};
    use crate::dataset::Record;
    use crate::topology::{build_fat_tree, FatTreeConfig};

    fn trace_cols(cols: &[(&str, &[f64])]) -> Trace {
        let n = cols[0].1.len();
        let records = (0..n)
            .map(|t| Record {
                time_index: t as i64,
                link_id: "l".into(),
                eth_dst: "e".into(),
                switch_id: "s".into(),
                in_port: "1".into(),
                out_port: "1".into(),
                values: cols.iter().map(|(_, v)| Some(v[t])).collect(),
            })
            .collect();
        Trace::new(cols.iter().map(|(c, _)| c.to_string()).collect(), records).unwrap()
    }

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_examples() {
        let t = trace_cols(&[
            ("x", &[1.0, 2.0, 3.0]),
            ("neg", &[-1.0, -2.0, -3.0]),
            ("y", &[2.0, 4.0, 6.1]),
            ("k", &[5.0, 5.0, 5.0]),
        ]);
        let c = correlation_matrix(&t, &labels(&["x", "neg", "y", "k"])).unwrap();
        assert_eq!(c.values.get(0, 0), 1.0);
        assert!((c.values.get(0, 1) + 1.0).abs() < 1e-12);
        // Hand Pearson: dx = (-1, 0, 1), dy = y - mean(y).
        let my = 12.1 / 3.0;
        let dy = [2.0 - my, 4.0 - my, 6.1 - my];
        let cov = -dy[0] + dy[2];
        let expected = cov / (2f64.sqrt() * dy.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!((c.values.get(0, 2) - expected).abs() < 1e-12);
        assert!((c.values.get(0, 2) - 0.999901).abs() < 1e-6);
        assert_eq!(c.values.get(0, 3), 0.0);
        assert_eq!(c.values.get(3, 3), 1.0);
        assert_eq!(c.degenerate, vec![false, false, false, true]);
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a.get(i, j).powi(2)).sum();
            if off < 1e-22 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a.get(k, p), a.get(k, q));
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a.get(p, k), a.get(q, k));
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i)).collect()
    }

    #[test]
    fn synthetic_trace_correlations_are_psd_and_symmetric() {
        let topo = build_fat_tree(&FatTreeConfig::default()).unwrap();
        let t = synth_trace(&topo, 200, &SynthProfile::default(), 5).unwrap();
        let cols: Vec<String> = NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect();
        let c = correlation_matrix(&t, &cols).unwrap();
        for i in 0..cols.len() {
            assert_eq!(c.values.get(i, i), 1.0);
            for j in 0..cols.len() {
                assert_eq!(c.values.get(i, j), c.values.get(j, i));
                assert!((-1.0..=1.0).contains(&c.values.get(i, j)));
            }
        }
        let eig = symmetric_eigenvalues(&c.values);
        assert!(eig.iter().all(|&e| e >= -1e-9), "{eig:?}");
        // Bytes track packets closely.
        assert!(c.values.get(0, 1) > 0.95);
    }

    #[test]
    fn csv_has_label_header_and_column() {
        let t = trace_cols(&[("a", &[1.0, 2.0]), ("b", &[2.0, 1.0])]);
        let c = correlation_matrix(&t, &labels(&["a", "b"])).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), ",a,b\na,1,-1\nb,-1,1\n");
    }
}
