//! Summary statistics over runs and the CSV tables derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::{RunReport, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for a single value.
    pub std: f64,
}

/// Linear-interpolation quantile of sorted data, `q ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::contract("no values to summarize"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("cannot summarize non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        n,
        min: sorted[0],
        max: sorted[n - 1],
        median: quantile(&sorted, 0.5),
        mean,
        std,
    })
}

/// Test metrics per strategy, in strategy order.
pub fn metrics_by_strategy(reports: &[RunReport]) -> BTreeMap<Strategy, Vec<f64>> {
    let mut by: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by.entry(r.strategy).or_default().push(r.test_metric);
    }
    by
}

pub type AggregateTable = Vec<(Strategy, Summary)>;

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateTable> {
    metrics_by_strategy(reports)
        .into_iter()
        .map(|(s, v)| Ok((s, summarize(&v)?)))
        .collect()
}

pub fn aggregate_csv(table: &AggregateTable) -> String {
    let mut s = String::from("strategy,n,min,max,median,mean,std\n");
    for (k, m) in table {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", k.name(), m.n, m.min, m.max, m.median, m.mean, m.std);
    }
    s
}

/// Fixed-width text table with the columns Min, Max, Median, Mean, Std.
pub fn aggregate_text(table: &AggregateTable, title: &str) -> String {
    let mut s = format!("{title}\n");
    let _ = writeln!(
        s,
        "{:<10} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "strategy", "n", "min", "max", "median", "mean", "std"
    );
    for (k, m) in table {
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            k.name(),
            m.n,
            m.min,
            m.max,
            m.median,
            m.mean,
            m.std
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Boxplot,
    Curves,
}

/// Box-plot quantiles per strategy, or every stored prediction curve.
pub fn emit_plot_data(reports: &[RunReport], kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::Boxplot => {
            let mut s = String::from("strategy,min,q1,median,q3,max,mean\n");
            for (k, mut v) in metrics_by_strategy(reports) {
                v.sort_by(f64::total_cmp);
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    k.name(),
                    v[0],
                    quantile(&v, 0.25),
                    quantile(&v, 0.5),
                    quantile(&v, 0.75),
                    v[v.len() - 1],
                    mean
                );
            }
            Ok(s)
        }
        PlotKind::Curves => {
            let mut s = String::from("strategy,seed,x,y\n");
            for r in reports {
                for [x, y] in r.curve.iter().flatten() {
                    let _ = writeln!(s, "{},{},{x},{y}", r.strategy.name(), r.seed);
                }
            }
            Ok(s)
        }
    }
}

/// Centres of the ten half-periods of `sin(10πx)` on `[0, 1]`, with the
/// sign of the extremum expected there.
pub fn sine_extrema() -> Vec<(f64, f64)> {
    (0..10)
        .map(|j| (0.05 + 0.1 * j as f64, if j % 2 == 0 { 1.0 } else { -1.0 }))
        .collect()
}

/// For each half-period of `sin(10πx)`, whether `curve` has a local extremum
/// of the right sign and magnitude at least `magnitude` within `window` of
/// its centre. `curve` holds `[x, y]` points sorted by `x`.
pub fn peak_coverage(curve: &[[f64; 2]], window: f64, magnitude: f64) -> Vec<bool> {
    sine_extrema()
        .into_iter()
        .map(|(c, sign)| {
            (1..curve.len().saturating_sub(1)).any(|i| {
                let (x, y) = (curve[i][0], sign * curve[i][1]);
                (x - c).abs() <= window
                    && y >= magnitude
                    && y >= sign * curve[i - 1][1]
                    && y >= sign * curve[i + 1][1]
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_statistics() {
        let s = summarize(&[0.3, 0.1, 0.2]).unwrap();
        assert_eq!((s.min, s.max), (0.1, 0.3));
        assert!((s.median - 0.2).abs() < 1e-15);
        assert!((s.mean - 0.2).abs() < 1e-15);
        assert!((s.std - 0.1).abs() < 1e-15);
        let one = summarize(&[0.7]).unwrap();
        assert_eq!((one.min, one.max, one.median, one.mean, one.std), (0.7, 0.7, 0.7, 0.7, 0.0));
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[f64::NAN]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn true_sine_covers_every_extremum() {
        let curve: Vec<[f64; 2]> = (0..512)
            .map(|i| {
                let x = i as f64 / 511.0;
                [x, (10.0 * std::f64::consts::PI * x).sin()]
            })
            .collect();
        assert!(peak_coverage(&curve, 0.03, 0.5).iter().all(|&b| b));
        let flat: Vec<[f64; 2]> = curve.iter().map(|p| [p[0], 0.0]).collect();
        assert!(peak_coverage(&flat, 0.03, 0.5).iter().all(|&b| !b));
        // a missing peak
        let dented: Vec<[f64; 2]> = curve
            .iter()
            .map(|p| [p[0], if (p[0] - 0.45).abs() < 0.06 { 0.2 } else { p[1] }])
            .collect();
        let cov = peak_coverage(&dented, 0.03, 0.5);
        assert!(!cov[4] && cov[3] && cov[5]);
    }
}
