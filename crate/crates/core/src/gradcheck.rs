//! Central finite-difference check of every parameter gradient on a small
//! toy problem, run in f64.

use std::time::{Duration, Instant};

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{GraphOperators, ModelConfig, ModelParams, WindowBatch};
use crate::physics::DiffusionConfig;
use crate::rng::stream_rng;
use crate::stations::{Station, StationGraph};
use crate::train::{window_loss_with_target, TrainConfig};

pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub detach_pseudo_labels: bool,
    #[serde(skip)]
    pub elapsed: Duration,
}

/// Four stations on a path with one chord, a six-frame window with two
/// nodes hidden, and a small model with every parameter (readout included)
/// drawn at random.
pub struct Toy {
    pub ops: GraphOperators,
    pub batch: WindowBatch,
    pub params: ModelParams<f64>,
    pub train: TrainConfig,
}

impl Toy {
    pub fn new(seed: u64, detach_pseudo_labels: bool) -> Result<Self> {
        let stations: Vec<Station> = (0..4)
            .map(|i| Station::new(format!("t{i}"), 40.0 + 0.01 * i as f64, 116.0 + 0.013 * (i % 2) as f64))
            .collect::<Result<_>>()?;
        let adj = Tensor::from_rows(&[
            vec![0.0, 0.9, 0.0, 0.4],
            vec![0.9, 0.0, 0.7, 0.0],
            vec![0.0, 0.7, 0.0, 0.8],
            vec![0.4, 0.0, 0.8, 0.0],
        ])?;
        let graph = StationGraph::from_parts(stations, adj)?;
        let ops = GraphOperators::new(&graph, DiffusionConfig::default())?;
        let config = ModelConfig {
            layers: 2,
            feature_dim: 4,
            window: 6,
            m_halo: 1,
        };
        let mut rng = stream_rng(seed, 0x6772);
        let mut params = ModelParams::<f64>::init(config, seed)?;
        for p in params.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        let (frames, nodes) = (6, 4);
        let cells = frames * nodes;
        let batch = WindowBatch {
            frames,
            nodes,
            target: (0..cells).map(|_| rng.random_range(-1.5..1.5)).collect(),
            truth: vec![0.0; cells],
            available: vec![true; cells],
            mask: (0..cells).map(|k| k % nodes < 2).collect(),
            wind: (0..cells).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
            hours: (0..frames).collect(),
        };
        let train = TrainConfig {
            beta: 0.3,
            detach_pseudo_labels,
            ..TrainConfig::default()
        };
        Ok(Self {
            ops,
            batch,
            params,
            train,
        })
    }

    /// Loss and, on request, parameter gradients. `fixed_target` freezes the
    /// pseudo-label target.
    pub fn loss(&self, params: &ModelParams<f64>, fixed_target: Option<&Tensor<f64>>) -> Result<(f64, Tensor<f64>)> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let l = window_loss_with_target(&mut tape, &vars, &self.ops, &self.batch, &self.train, fixed_target)?;
        Ok((tape.value(l.total).item(), tape.value(l.phase1).clone()))
    }

    /// Analytic gradients, one tensor per parameter.
    pub fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let l = window_loss_with_target(&mut tape, &vars, &self.ops, &self.batch, &self.train, None)?;
        tape.backward(l.total)?;
        Ok(vars
            .vars
            .iter()
            .zip(self.params.store.iter())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols())))
            .collect())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares every analytic gradient entry with a central difference of the
/// same objective. With stopped pseudo-label gradients the target is held at
/// its unperturbed value while differencing.
pub fn run(seed: u64, detach_pseudo_labels: bool) -> Result<GradcheckReport> {
    let start = Instant::now();
    let toy = Toy::new(seed, detach_pseudo_labels)?;
    let analytic = toy.gradients()?;
    let (_, phase1) = toy.loss(&toy.params, None)?;
    let frozen = detach_pseudo_labels.then_some(&phase1);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        detach_pseudo_labels,
        elapsed: Duration::ZERO,
    };
    let mut probe = toy.params.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = toy.params.store.get(pi).value.data()[k];
            probe.store.get_mut(pi).value.data_mut()[k] = orig + FD_STEP;
            let (up, _) = toy.loss(&probe, frozen)?;
            probe.store.get_mut(pi).value.data_mut()[k] = orig - FD_STEP;
            let (down, _) = toy.loss(&probe, frozen)?;
            probe.store.get_mut(pi).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[k], fd);
            if !err.is_finite() {
                return Err(Error::Contract(format!("non-finite gradient comparison at parameter {pi}[{k}]")));
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = toy.params.store.get(pi).name.clone();
                report.worst_index = k;
            }
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }

    #[test]
    fn toy_readout_is_non_zero() {
        let toy = Toy::new(1, true).unwrap();
        let r = toy.params.store.by_name("readout.w").unwrap();
        assert!(r.value.data().iter().all(|&v| v != 0.0));
        let g = toy.gradients().unwrap();
        assert!(g.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }
}
