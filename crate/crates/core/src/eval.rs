//! Kriging metrics, the nearest-neighbor and observed-mean baselines, and
//! report output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::stations::{haversine_km, StationGraph};

/// Ground-truth magnitudes below this are left out of MAPE.
pub const MAPE_MIN_ABS: f64 = 1.0;

pub const DEFAULT_KNN_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub mae: f64,
    pub mape: f64,
    pub mre: f64,
}

/// Published AQI-36 results at missing rate 0.5.
pub const AQI36_REFERENCE: [ReferenceRow; 7] = [
    ReferenceRow { method: "KNN", mae: 18.35, mape: 0.50, mre: 0.24 },
    ReferenceRow { method: "KCN", mae: 20.64, mape: 0.62, mre: 0.29 },
    ReferenceRow { method: "IGNNK", mae: 23.35, mape: 0.78, mre: 0.31 },
    ReferenceRow { method: "DualSTN", mae: 22.77, mape: 0.90, mre: 0.32 },
    ReferenceRow { method: "INCREASE", mae: 22.90, mape: 1.07, mre: 0.32 },
    ReferenceRow { method: "KITS", mae: 16.59, mape: 0.39, mre: 0.24 },
    ReferenceRow { method: "PGITS", mae: 16.36, mape: 0.37, mre: 0.23 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: usize,
    pub mae: f64,
    pub mape: f64,
    pub mre: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mape: f64,
    pub mre: f64,
    pub n_points: usize,
    /// Points that entered MAPE.
    pub mape_points: usize,
    /// Points left out of MAPE for a near-zero ground truth.
    pub mape_excluded: usize,
    pub per_node: Vec<NodeMetrics>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    abs_err: f64,
    abs_true: f64,
    rel: f64,
    n: usize,
    n_rel: usize,
}

impl Acc {
    fn add(&mut self, y: f64, yhat: f64) {
        let e = (y - yhat).abs();
        self.abs_err += e;
        self.abs_true += y.abs();
        self.n += 1;
        if y.abs() >= MAPE_MIN_ABS {
            self.rel += e / y.abs();
            self.n_rel += 1;
        }
    }

    fn mape(&self) -> f64 {
        if self.n_rel == 0 {
            0.0
        } else {
            self.rel / self.n_rel as f64
        }
    }

    fn mre(&self) -> f64 {
        if self.abs_true == 0.0 {
            0.0
        } else {
            self.abs_err / self.abs_true
        }
    }
}

/// MAE, MAPE and MRE over the flat indices `omega` of `y_true`/`y_pred`.
/// Index `k` belongs to node `k % nodes`.
pub fn compute_metrics(y_true: &[f64], y_pred: &[f64], nodes: usize, omega: &[usize]) -> Result<MetricsReport> {
    if omega.is_empty() {
        return Err(Error::Data("evaluation index set is empty".into()));
    }
    if y_true.len() != y_pred.len() || nodes == 0 || y_true.len() % nodes != 0 {
        return Err(Error::Shape(format!(
            "{} truths, {} predictions over {nodes} nodes",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&k) = omega.iter().find(|&&k| k >= y_true.len()) {
        return Err(Error::Shape(format!("index {k} out of range {}", y_true.len())));
    }
    let mut total = Acc::default();
    let mut per = vec![Acc::default(); nodes];
    for &k in omega {
        let (y, p) = (y_true[k], y_pred[k]);
        if !y.is_finite() || !p.is_finite() {
            return Err(Error::Data(format!("non-finite value at index {k}: truth {y}, estimate {p}")));
        }
        total.add(y, p);
        per[k % nodes].add(y, p);
    }
    if total.abs_true == 0.0 {
        return Err(Error::Data("relative error undefined: all ground-truth values are zero".into()));
    }
    Ok(MetricsReport {
        mae: total.abs_err / total.n as f64,
        mape: total.mape(),
        mre: total.mre(),
        n_points: total.n,
        mape_points: total.n_rel,
        mape_excluded: total.n - total.n_rel,
        per_node: per
            .iter()
            .enumerate()
            .filter(|(_, a)| a.n > 0)
            .map(|(node, a)| NodeMetrics {
                node,
                mae: a.abs_err / a.n as f64,
                mape: a.mape(),
                mre: a.mre(),
                n_points: a.n,
            })
            .collect(),
    })
}

/// Nearest-neighbor interpolation, per frame.
///
/// `y_obs` is `frames × nodes` with NaN wherever a value is not observed.
/// Each node outside `observed` gets the mean of its `k` nearest observed
/// stations that have a value in that frame; stations without a value are
/// skipped in favour of the next nearest. A frame with no observed value at
/// all repeats the previous estimate (or the overall observed mean in the
/// first frame). Observed nodes keep their own values.
pub fn knn_baseline(graph: &StationGraph, y_obs: &Tensor<f64>, observed: &[usize], k: usize) -> Result<Tensor<f64>> {
    let n = graph.n_real();
    if y_obs.cols() != n {
        return Err(Error::Shape(format!("{} columns for {n} stations", y_obs.cols())));
    }
    if k == 0 || k > observed.len() {
        return Err(Error::Parameter(format!("k = {k} with {} observed stations", observed.len())));
    }
    let st = graph.stations();
    let ranked: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<(f64, usize)> = observed
                .iter()
                .map(|&j| (haversine_km(st[i].lat, st[i].lon, st[j].lat, st[j].lon), j))
                .collect();
            o.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            o.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let known: Vec<f64> = observed
        .iter()
        .flat_map(|&j| (0..y_obs.rows()).map(move |t| y_obs.get(t, j)))
        .filter(|v| !v.is_nan())
        .collect();
    let overall = if known.is_empty() {
        0.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let is_obs: Vec<bool> = (0..n).map(|i| observed.contains(&i)).collect();
    let mut out = Tensor::zeros(y_obs.rows(), n);
    for t in 0..y_obs.rows() {
        for i in 0..n {
            if is_obs[i] {
                out.set(t, i, y_obs.get(t, i));
                continue;
            }
            let vals: Vec<f64> = ranked[i]
                .iter()
                .map(|&j| y_obs.get(t, j))
                .filter(|v| !v.is_nan())
                .take(k)
                .collect();
            let est = if !vals.is_empty() {
                vals.iter().sum::<f64>() / vals.len() as f64
            } else if t > 0 {
                out.get(t - 1, i)
            } else {
                overall
            };
            out.set(t, i, est);
        }
    }
    Ok(out)
}

/// Every unobserved node gets the mean of all observed values in its frame.
pub fn observed_mean_baseline(graph: &StationGraph, y_obs: &Tensor<f64>, observed: &[usize]) -> Result<Tensor<f64>> {
    knn_baseline(graph, y_obs, observed, observed.len())
}

/// Model and baseline metrics side by side with the published reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: Option<MetricsReport>,
    pub knn: Option<MetricsReport>,
    pub knn_k: Option<usize>,
    pub observed_mean: Option<MetricsReport>,
    /// Model MAE at the validation stations over training hours.
    pub val_mae: Option<f64>,
    pub station_ids: Vec<String>,
    pub reference: Vec<ReferenceRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    /// `method,node,station_id,mae,mape,mre,n_points` rows.
    pub fn write_per_node_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "method,node,station_id,mae,mape,mre,n_points").map_err(io)?;
        let rows = [("model", &self.model), ("knn", &self.knn), ("observed_mean", &self.observed_mean)];
        for (name, report) in rows {
            for m in report.iter().flat_map(|r| &r.per_node) {
                let id = self.station_ids.get(m.node).map_or("", String::as_str);
                writeln!(w, "{name},{},{id},{},{},{},{}", m.node, m.mae, m.mape, m.mre, m.n_points).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// One `node,true,pred,hour` row.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub node: String,
    pub truth: f64,
    pub pred: f64,
    pub hour: usize,
}

pub fn write_plot_csv(path: impl AsRef<Path>, points: &[PlotPoint]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "node,true,pred,hour").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.node, p.truth, p.pred, p.hour).map_err(io)?;
    }
    w.flush().map_err(io)
}
