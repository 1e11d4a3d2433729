//! End-to-end jobs: synthetic dataset assembly, kriging over a split and
//! report assembly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::{read_checkpoint, write_checkpoint, Tensor};
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_csv, synthetic_stations, write_synthetic, SplitSpec, SyntheticConfig, SyntheticData,
    WindowSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, knn_baseline, observed_mean_baseline, write_plot_csv, EvalReport, PlotPoint, AQI36_REFERENCE,
};
use crate::model::{GraphOperators, ModelConfig, ModelParams};
use crate::physics::{diffusion_flux_operator, DiffusionConfig, FluxOperator};
use crate::stations::{read_stations_csv, StationGraph, DEFAULT_DELTA};
use crate::train::{predict_window, train, Dataset, EpochObserver, EpochRecord};

/// Seeded synthetic stations, their graph and simulated observations.
pub fn synthetic_graph_and_data(
    n_stations: usize,
    config: &SyntheticConfig,
    delta: f64,
    seed: u64,
) -> Result<(StationGraph, SyntheticData)> {
    let stations = synthetic_stations(n_stations, seed)?;
    let graph = StationGraph::from_stations(stations, delta, None)?;
    let data = generate_synthetic(&graph, config, seed)?;
    Ok((graph, data))
}

/// Synthetic kriging dataset with the default split.
pub fn synthetic_dataset(n_stations: usize, hours: usize, alpha: f64, seed: u64) -> Result<(Dataset, SyntheticData)> {
    let config = SyntheticConfig {
        hours,
        ..SyntheticConfig::default()
    };
    let (graph, data) = synthetic_graph_and_data(n_stations, &config, DEFAULT_DELTA, seed)?;
    let ds = Dataset::new(graph, data.observations.clone(), SplitSpec::default(), alpha, seed)?;
    Ok((ds, data))
}

/// Estimates for every station over the selected hours, with each hour
/// taken from the first window that covers it.
#[derive(Debug, Clone, PartialEq)]
pub struct Kriged {
    /// Hour indices into the table, ascending.
    pub hours: Vec<usize>,
    /// `hours × stations`, µg/m³.
    pub estimates: Tensor<f64>,
}

/// Runs the model over `hours` with the observed stations visible.
pub fn krige(
    data: &Dataset,
    params: &ModelParams<f32>,
    diffusion: DiffusionConfig,
    hours: &[bool],
) -> Result<Kriged> {
    let spec = WindowSpec {
        length: params.config.window,
        stride: params.config.window,
        cover_tail: true,
    };
    let windows = data.kriging_windows(hours, spec, &data.nodes.observed)?;
    let ops = GraphOperators::new(&data.graph, diffusion)?;
    let n = data.graph.len();
    let mut seen = HashSet::new();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for w in &windows {
        let pred = predict_window(w, &ops, params, &data.normalizer)?;
        for (t, &h) in w.hours.iter().enumerate() {
            if seen.insert(h) {
                rows.push((h, (0..n).map(|i| pred.get(t, i)).collect()));
            }
        }
    }
    rows.sort_by_key(|r| r.0);
    let hours_out: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.1).collect();
    Ok(Kriged {
        estimates: Tensor::new(hours_out.len(), n, flat)?,
        hours: hours_out,
    })
}

/// Observed-station values over `hours` (NaN elsewhere), `hours × stations`.
fn observed_matrix(data: &Dataset, hours: &[usize]) -> Tensor<f64> {
    let n = data.graph.len();
    let obs: HashSet<usize> = data.nodes.observed.iter().copied().collect();
    Tensor::from_fn(hours.len(), n, |r, i| {
        if obs.contains(&i) {
            data.table.pm25_at(hours[r], i).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        }
    })
}

/// Evaluation outcome with plot rows for the model estimates.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub plot: Vec<PlotPoint>,
}

/// Scores the model (when given) and the baselines at the unobserved
/// stations over the test hours.
pub fn evaluate(
    data: &Dataset,
    params: Option<&ModelParams<f32>>,
    diffusion: DiffusionConfig,
    knn_k: Option<usize>,
) -> Result<Evaluation> {
    let test = data.test_hours();
    let hours: Vec<usize> = (0..test.len()).filter(|&h| test[h]).collect();
    if hours.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let n = data.graph.len();
    let truth: Vec<f64> = hours
        .iter()
        .flat_map(|&h| (0..n).map(move |i| (h, i)))
        .map(|(h, i)| data.table.pm25_at(h, i).unwrap_or(f64::NAN))
        .collect();
    let ids = &data.table.station_ids;

    let mut plot = Vec::new();
    let model = match params {
        Some(p) => {
            let k = krige(data, p, diffusion, &test)?;
            if k.hours != hours {
                return Err(Error::Data(format!(
                    "window length {} leaves {} of {} test hours uncovered",
                    p.config.window,
                    hours.len() - k.hours.len(),
                    hours.len()
                )));
            }
            let pred = k.estimates.data().to_vec();
            let omega = omega(&truth, n, &data.nodes.unobserved);
            for &idx in &omega {
                plot.push(PlotPoint {
                    node: ids[idx % n].clone(),
                    truth: truth[idx],
                    pred: pred[idx],
                    hour: hours[idx / n],
                });
            }
            Some(compute_metrics(&truth, &pred, n, &omega)?)
        }
        None => None,
    };
    let obs = observed_matrix(data, &hours);
    let omega = omega(&truth, n, &data.nodes.unobserved);
    let knn = match knn_k {
        Some(k) => {
            let est = knn_baseline(&data.graph, &obs, &data.nodes.observed, k)?;
            Some(compute_metrics(&truth, est.data(), n, &omega)?)
        }
        None => None,
    };
    let mean = observed_mean_baseline(&data.graph, &obs, &data.nodes.observed)?;
    let observed_mean = Some(compute_metrics(&truth, mean.data(), n, &omega)?);
    Ok(Evaluation {
        report: EvalReport {
            model,
            knn,
            knn_k,
            observed_mean,
            val_mae: None,
            station_ids: ids.clone(),
            reference: AQI36_REFERENCE.to_vec(),
        },
        plot,
    })
}

/// Available cells of the `nodes` columns in a flat `rows × n` array.
fn omega(truth: &[f64], n: usize, nodes: &[usize]) -> Vec<usize> {
    let set: HashSet<usize> = nodes.iter().copied().collect();
    (0..truth.len())
        .filter(|&k| set.contains(&(k % n)) && !truth[k].is_nan())
        .collect()
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Reads the stations and observations named in `[data]` and splits them.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("data.{key} is required for this command")))
    };
    let stations = read_stations_csv(need(&cfg.data.stations, "stations")?)?;
    let graph = StationGraph::from_stations(stations, cfg.data.delta, cfg.data.gamma)?;
    let table = load_csv(need(&cfg.data.observations, "observations")?, graph.stations())?;
    Dataset::new(graph, table, cfg.data.split(), cfg.train.alpha, cfg.require_seed()?)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&params.store, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks it against the model config.
pub fn load_params(path: &Path, model: ModelConfig) -> Result<ModelParams<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let store = read_checkpoint(&mut BufReader::new(file))?;
    ModelParams::from_store(model, store)
}

/// Appends one JSON line per epoch and rewrites the checkpoint whenever
/// validation improves.
struct RunFiles {
    checkpoint: PathBuf,
    log_path: PathBuf,
    log: BufWriter<File>,
}

impl EpochObserver for RunFiles {
    fn epoch_end(&mut self, record: &EpochRecord, params: &ModelParams<f32>, improved: bool) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&self.log_path, e))?;
        if improved {
            save_checkpoint(&self.checkpoint, params)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub mu: f64,
    pub observed_stations: usize,
    pub virtual_nodes: usize,
    pub training_graph_nodes: usize,
    pub inference_graph_nodes: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on the configured dataset, writing the checkpoint and the epoch
/// log into `out`.
pub fn train_job(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.require_seed()?;
    let data = load_dataset(cfg)?;
    train_dataset(cfg, &data, out)
}

/// As [`train_job`] on an already loaded dataset.
pub fn train_dataset(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut files = RunFiles {
        checkpoint: out.join(CHECKPOINT_FILE),
        log_path: log_path.clone(),
        log: BufWriter::new(file),
    };
    let outcome = train(data, cfg.model, cfg.physics, &cfg.train, &mut files)?;
    let m = data.virtual_nodes(cfg.train.alpha)?;
    Ok(TrainSummary {
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        mu: outcome.params.mu(),
        observed_stations: data.nodes.observed.len(),
        virtual_nodes: m,
        training_graph_nodes: data.nodes.observed.len() + m,
        inference_graph_nodes: data.graph.len(),
        checkpoint: files.checkpoint,
        log: log_path,
    })
}

/// Scores a checkpoint (and the baselines) on the test months, with KNN
/// using `eval.knn_k` unless `knn_k` overrides it; with `out`
/// also writes `report.json`, `per_node.csv` and `plot.csv`.
pub fn evaluate_job(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    knn_k: Option<usize>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    let params = checkpoint.map(|p| load_params(p, cfg.model)).transpose()?;
    let mut ev = evaluate(&data, params.as_ref(), cfg.physics, Some(knn_k.unwrap_or(cfg.eval.knn_k)))?;
    if let Some(p) = &params {
        if !data.nodes.validation.is_empty() {
            ev.report.val_mae = Some(data.validation_mae(p, cfg.physics, cfg.train.stride)?);
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = ev.report.to_json()?;
        let path = dir.join("report.json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        ev.report.write_per_node_csv(dir.join("per_node.csv"))?;
        write_plot_csv(dir.join("plot.csv"), &ev.plot)?;
    }
    Ok(ev.report)
}

/// Writes `station_id,timestamp,pm25_est,observed` for every station and
/// hour of the dataset.
pub fn infer_job(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let params = load_params(checkpoint, cfg.model)?;
    let all = vec![true; data.table.hours];
    let k = krige(&data, &params, cfg.physics, &all)?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(out, e);
    writeln!(w, "station_id,timestamp,pm25_est,observed").map_err(io)?;
    let observed: HashSet<usize> = data.nodes.observed.iter().copied().collect();
    for (r, &h) in k.hours.iter().enumerate() {
        let ts = data.table.timestamp(h).format("%Y-%m-%dT%H:%M:%S");
        for (i, id) in data.table.station_ids.iter().enumerate() {
            writeln!(w, "{id},{ts},{},{}", k.estimates.get(r, i), observed.contains(&i)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub stations: usize,
    pub hours: usize,
    pub stability_bound_hours: f64,
}

/// Simulates observations on the configured stations (or a generated
/// layout) and writes them with their ground-truth twin into `out`.
pub fn simulate_job(cfg: &RunConfig, out: &Path) -> Result<SimulationSummary> {
    let seed = cfg.require_seed()?;
    let stations = match &cfg.data.stations {
        Some(p) => read_stations_csv(p)?,
        None => synthetic_stations(cfg.simulate.n_stations, seed)?,
    };
    let graph = StationGraph::from_stations(stations, cfg.data.delta, cfg.data.gamma)?;
    let data = generate_synthetic(&graph, &cfg.simulate.synthetic, seed)?;
    write_synthetic(out, &data, graph.stations())?;
    Ok(SimulationSummary {
        stations: graph.len(),
        hours: data.observations.hours,
        stability_bound_hours: stability_bound(&graph, &cfg.simulate.synthetic)?,
    })
}

/// Step bound of the simulator's diffusion operator alone.
fn stability_bound(graph: &StationGraph, cfg: &SyntheticConfig) -> Result<f64> {
    if cfg.diffusion_k == 0.0 {
        return Ok(f64::INFINITY);
    }
    let d = diffusion_flux_operator(graph.adjacency(), cfg.diffusion_k)?;
    Ok(FluxOperator::new(&d, &Tensor::zeros(graph.len(), graph.len()))?.stability_bound())
}
