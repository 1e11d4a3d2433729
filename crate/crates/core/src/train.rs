//! Increment training: per-batch virtual-node graphs, the two-phase
//! cycle-regulated pass, losses, Adam with clipping and early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Real, Tape, Tensor, Var};
use crate::data::{make_windows, NodeSplit, Normalizer, ObservationTable, SplitSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{dynamic_graph, estimate, gc_operator, GcOperator, GraphOperators, ModelParams, ModelVars, WindowBatch};
use crate::physics::DiffusionConfig;
use crate::rng::{derive_seed, stream, stream_rng};
use crate::stations::{make_training_masks, virtual_node_count, StationGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub beta: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    /// Stop gradients through the phase-1 pseudo-label target.
    pub detach_pseudo_labels: bool,
    /// Hours between training window starts; 0 means the window length.
    pub stride: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: 32,
            lr: 2e-4,
            lambda: 1.0,
            beta: 0.05,
            patience: 10,
            max_epochs: 200,
            clip_norm: 5.0,
            detach_pseudo_labels: true,
            stride: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("lambda and beta must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Phase outputs of one cycle, each `frames × nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcrOutput {
    pub phase1: Tensor<f64>,
    pub pseudo_input: Tensor<f64>,
    pub phase2: Tensor<f64>,
}

/// Tape handles of one cycle; columns of `frames · nodes` rows.
#[derive(Debug, Clone, Copy)]
pub struct NcrVars {
    pub phase1: Var,
    pub pseudo_input: Var,
    pub phase2: Var,
}

fn indicator<T: Real>(mask: &[bool], invert: bool) -> Tensor<T> {
    Tensor::column(
        mask.iter()
            .map(|&m| if m != invert { T::one() } else { T::zero() })
            .collect(),
    )
}

/// Phase 1 on the masked input, then phase 2 on `(1 − M) ⊙ phase1` with the
/// inverse mask. Both phases share `vars` and `gc`.
pub fn ncr_tape<T: Real>(tape: &mut Tape<T>, vars: &ModelVars, gc: &GcOperator, batch: &WindowBatch) -> Result<NcrVars> {
    let x = tape.constant(Tensor::column(batch.x().into_iter().map(T::from_f64_lossy).collect()));
    let phase1 = estimate(tape, vars, gc, x, &batch.mask)?;
    let keep = tape.constant(indicator(&batch.mask, true));
    let pseudo_input = tape.mul(phase1, keep)?;
    let inverse: Vec<bool> = batch.mask.iter().map(|m| !m).collect();
    let phase2 = estimate(tape, vars, gc, pseudo_input, &inverse)?;
    Ok(NcrVars {
        phase1,
        pseudo_input,
        phase2,
    })
}

fn as_frames<T: Real>(tape: &Tape<T>, v: Var, batch: &WindowBatch) -> Result<Tensor<f64>> {
    Tensor::new(
        batch.frames,
        batch.nodes,
        tape.value(v).data().iter().map(|x| x.as_f64()).collect(),
    )
}

/// Runs the cycle for `batch` on `graph` without recording gradients.
pub fn ncr_pass<T: Real>(
    batch: &WindowBatch,
    graph: &StationGraph,
    diffusion: DiffusionConfig,
    params: &ModelParams<T>,
) -> Result<NcrOutput> {
    batch.check()?;
    if batch.nodes != graph.len() {
        return Err(Error::Shape(format!("batch has {} nodes, graph {}", batch.nodes, graph.len())));
    }
    let ops = GraphOperators::new(graph, diffusion)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let w = dynamic_graph(&mut tape, &vars, &ops, &batch.mean_wind())?;
    let gc = gc_operator(&mut tape, w)?;
    let out = ncr_tape(&mut tape, &vars, &gc, batch)?;
    Ok(NcrOutput {
        phase1: as_frames(&tape, out.phase1, batch)?,
        pseudo_input: as_frames(&tape, out.pseudo_input, batch)?,
        phase2: as_frames(&tape, out.phase2, batch)?,
    })
}

/// Cells scored by the supervised term: visible in the mask and available.
pub fn observed_indices(batch: &WindowBatch) -> Vec<usize> {
    (0..batch.mask.len())
        .filter(|&k| batch.mask[k] && batch.available[k])
        .collect()
}

/// `MAE(phase1, truth | observed) + λ · MAE(phase2, target | all)`.
///
/// `target` is normally phase 1 itself or a detached copy of it.
pub fn supervised_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    ncr: &NcrVars,
    target: Var,
    truth: &[f64],
    observed: &[usize],
    lambda: f64,
) -> Result<Var> {
    if observed.is_empty() {
        return Err(Error::Data("no observed cells to supervise".into()));
    }
    let rows = tape.shape(ncr.phase1)[0];
    if truth.len() != rows || tape.shape(ncr.phase2)[0] != rows || tape.shape(target)[0] != rows {
        return Err(Error::Shape(format!("{} truth values for {rows} estimates", truth.len())));
    }
    let est = tape.masked_select(ncr.phase1, observed)?;
    let y = tape.constant(Tensor::column(observed.iter().map(|&k| T::from_f64_lossy(truth[k])).collect()));
    let err = tape.sub(est, y)?;
    let err = tape.abs(err);
    let obs = tape.mean(err);
    let diff = tape.sub(ncr.phase2, target)?;
    let diff = tape.abs(diff);
    let pseudo = tape.mean(diff);
    let pseudo = tape.scale(pseudo, lambda);
    tape.add(obs, pseudo)
}

/// Mean squared change between consecutive frames.
pub fn physics_continuity_loss_tape<T: Real>(tape: &mut Tape<T>, phase2: Var, nodes: usize) -> Result<Var> {
    let rows = tape.shape(phase2)[0];
    if nodes == 0 || rows % nodes != 0 {
        return Err(Error::Shape(format!("{rows} rows are not whole frames of {nodes} nodes")));
    }
    let frames = rows / nodes;
    if frames < 2 {
        return Err(Error::Parameter(format!("continuity needs at least 2 frames, got {frames}")));
    }
    let later: Vec<usize> = (nodes..rows).collect();
    let earlier: Vec<usize> = (0..rows - nodes).collect();
    let a = tape.masked_select(phase2, &later)?;
    let b = tape.masked_select(phase2, &earlier)?;
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Value form of the supervised loss on precomputed phase outputs.
pub fn supervised_loss(ncr: &NcrOutput, truth: &[f64], observed: &[usize], lambda: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars = NcrVars {
        phase1: tape.constant(Tensor::column(ncr.phase1.data().to_vec())),
        pseudo_input: tape.constant(Tensor::column(ncr.pseudo_input.data().to_vec())),
        phase2: tape.constant(Tensor::column(ncr.phase2.data().to_vec())),
    };
    let l = supervised_loss_tape(&mut tape, &vars, vars.phase1, truth, observed, lambda)?;
    Ok(tape.value(l).item())
}

/// Value form of the continuity loss on a `frames × nodes` output.
pub fn physics_continuity_loss(phase2: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::column(phase2.data().to_vec()));
    let l = physics_continuity_loss_tape(&mut tape, v, phase2.cols())?;
    Ok(tape.value(l).item())
}

pub fn total_loss(sup: f64, phy: f64, beta: f64) -> f64 {
    sup + beta * phy
}

/// Loss handles for one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowLoss {
    pub total: Var,
    pub sup: Var,
    pub phy: Var,
    pub phase1: Var,
}

/// Full objective for one augmented window on a bound model.
pub fn window_loss<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    ops: &GraphOperators,
    batch: &WindowBatch,
    config: &TrainConfig,
) -> Result<WindowLoss> {
    window_loss_with_target(tape, vars, ops, batch, config, None)
}

/// As [`window_loss`], with the pseudo-label target optionally replaced by
/// a fixed `(frames · nodes) × 1` tensor.
pub fn window_loss_with_target<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    ops: &GraphOperators,
    batch: &WindowBatch,
    config: &TrainConfig,
    fixed_target: Option<&Tensor<T>>,
) -> Result<WindowLoss> {
    let w = dynamic_graph(tape, vars, ops, &batch.mean_wind())?;
    let gc = gc_operator(tape, w)?;
    let ncr = ncr_tape(tape, vars, &gc, batch)?;
    let target = match fixed_target {
        Some(t) => tape.constant(t.clone()),
        None if config.detach_pseudo_labels => tape.detach(ncr.phase1),
        None => ncr.phase1,
    };
    let sup = supervised_loss_tape(tape, &ncr, target, &batch.target, &observed_indices(batch), config.lambda)?;
    let phy = physics_continuity_loss_tape(tape, ncr.phase2, batch.nodes)?;
    let weighted = tape.scale(phy, config.beta);
    let total = tape.add(sup, weighted)?;
    Ok(WindowLoss {
        total,
        sup,
        phy,
        phase1: ncr.phase1,
    })
}

/// Observations, station graph and node split for one kriging run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: StationGraph,
    pub table: ObservationTable,
    pub split_spec: SplitSpec,
    pub nodes: NodeSplit,
    pub normalizer: Normalizer,
}

impl Dataset {
    /// Splits stations with `alpha` and fits normalization on the training
    /// stations over training hours.
    pub fn new(graph: StationGraph, table: ObservationTable, split_spec: SplitSpec, alpha: f64, seed: u64) -> Result<Self> {
        split_spec.validate()?;
        if graph.n_virtual() != 0 || graph.len() != table.n_stations() {
            return Err(Error::Shape(format!(
                "graph has {} nodes ({} virtual), table {} stations",
                graph.len(),
                graph.n_virtual(),
                table.n_stations()
            )));
        }
        let nodes = NodeSplit::new(graph.len(), alpha, split_spec.val_fraction, seed)?;
        let normalizer = Normalizer::fit(&table, &nodes.training(), &split_spec.train_hours(&table))?;
        Ok(Self {
            graph,
            table,
            split_spec,
            nodes,
            normalizer,
        })
    }

    pub fn train_hours(&self) -> Vec<bool> {
        self.split_spec.train_hours(&self.table)
    }

    pub fn test_hours(&self) -> Vec<bool> {
        self.train_hours().into_iter().map(|t| !t).collect()
    }

    /// Windows over all real stations whose masks show only `visible`
    /// stations.
    pub fn kriging_windows(&self, hours: &[bool], spec: WindowSpec, visible: &[usize]) -> Result<Vec<WindowBatch>> {
        let mut show = vec![false; self.graph.len()];
        for &i in visible {
            show[i] = true;
        }
        let mut windows = make_windows(&self.table, &self.normalizer, hours, spec)?;
        for w in &mut windows {
            for (k, m) in w.mask.iter_mut().enumerate() {
                *m = *m && show[k % w.nodes];
            }
        }
        Ok(windows)
    }

    /// Training windows restricted to the observed stations; validation
    /// stations are hidden.
    pub fn training_windows(&self, spec: WindowSpec) -> Result<Vec<WindowBatch>> {
        let all = make_windows(&self.table, &self.normalizer, &self.train_hours(), spec)?;
        let keep = &self.nodes.observed;
        let hidden: Vec<bool> = keep.iter().map(|i| self.nodes.validation.contains(i)).collect();
        Ok(all
            .into_iter()
            .map(|w| {
                let mut s = w.select_nodes(keep);
                for (k, m) in s.mask.iter_mut().enumerate() {
                    *m = *m && !hidden[k % s.nodes];
                }
                s
            })
            .collect())
    }

    /// Windows over training hours on the full station graph with only the
    /// supervised stations visible; scored at the validation stations.
    pub fn validation_windows(&self, spec: WindowSpec) -> Result<Vec<WindowBatch>> {
        self.kriging_windows(&self.train_hours(), spec, &self.nodes.training())
    }

    /// Validation MAE in µg/m³, as computed after every training epoch.
    pub fn validation_mae(&self, params: &ModelParams<f32>, diffusion: DiffusionConfig, stride: usize) -> Result<f64> {
        let windows = self.validation_windows(training_spec(params.config.window, stride))?;
        let ops = GraphOperators::new(&self.graph, diffusion)?;
        kriging_mae(&windows, &ops, params, &self.normalizer, &self.nodes.validation)
    }

    /// Subgraph of observed stations, the base of every training graph.
    pub fn observed_graph(&self) -> Result<StationGraph> {
        self.graph.subgraph(&self.nodes.observed)
    }

    /// Number of virtual nodes added to each training graph.
    pub fn virtual_nodes(&self, alpha: f64) -> Result<usize> {
        virtual_node_count(self.nodes.observed.len(), alpha)
    }
}

impl WindowBatch {
    /// Restriction to the given nodes, in that order.
    pub fn select_nodes(&self, nodes: &[usize]) -> WindowBatch {
        let pick = |t: usize| nodes.iter().map(move |&i| t * self.nodes + i);
        let cells: Vec<usize> = (0..self.frames).flat_map(pick).collect();
        WindowBatch {
            frames: self.frames,
            nodes: nodes.len(),
            target: cells.iter().map(|&k| self.target[k]).collect(),
            truth: cells.iter().map(|&k| self.truth[k]).collect(),
            available: cells.iter().map(|&k| self.available[k]).collect(),
            mask: cells.iter().map(|&k| self.mask[k]).collect(),
            wind: cells.iter().map(|&k| self.wind[k]).collect(),
            hours: self.hours.clone(),
        }
    }
}

/// Non-overlapping windows unless a stride is given.
pub fn training_spec(window: usize, stride: usize) -> WindowSpec {
    WindowSpec {
        length: window,
        stride: if stride == 0 { window } else { stride },
        cover_tail: false,
    }
}

/// Training graph for one batch: observed stations plus `m` virtual nodes
/// drawn with a batch-specific seed, and the window masks on that graph.
pub fn batch_graph(base: &StationGraph, m: usize, alpha: f64, seed: u64, epoch: usize, batch: usize) -> Result<(StationGraph, Vec<bool>)> {
    let s = derive_seed(seed, &[epoch as u64, batch as u64]);
    let graph = base.insert_virtual_nodes(m, s)?;
    let (mask, _) = make_training_masks(&graph, alpha, s)?;
    Ok((graph, mask.0))
}

/// Window extended to `graph`, masked by the per-node training mask.
pub fn training_window(window: &WindowBatch, graph: &StationGraph, node_mask: &[bool]) -> Result<WindowBatch> {
    let mut w = window.augment(graph)?;
    for (k, m) in w.mask.iter_mut().enumerate() {
        *m = *m && node_mask[k % w.nodes];
    }
    Ok(w)
}

/// Phase-1 estimates in µg/m³, `frames × nodes`.
pub fn predict_window(
    batch: &WindowBatch,
    ops: &GraphOperators,
    params: &ModelParams<f32>,
    normalizer: &Normalizer,
) -> Result<Tensor<f64>> {
    let z = crate::model::forward(batch, ops, params)?;
    Ok(z.cast::<f64>().map(|v| normalizer.denormalize(v)))
}

/// Mean absolute error in µg/m³ over available cells of `nodes`.
pub fn kriging_mae(
    windows: &[WindowBatch],
    ops: &GraphOperators,
    params: &ModelParams<f32>,
    normalizer: &Normalizer,
    nodes: &[usize],
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for w in windows {
        let pred = predict_window(w, ops, params, normalizer)?;
        for t in 0..w.frames {
            for &i in nodes {
                let k = t * w.nodes + i;
                if w.available[k] {
                    sum += (pred.get(t, i) - w.truth[k]).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no available cells to score".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub sup_loss: f64,
    pub phy_loss: f64,
    pub val_mae: f64,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Observer invoked after every epoch with the record, the current
/// parameters and whether they improved on the best validation MAE.
pub trait EpochObserver {
    fn epoch_end(&mut self, record: &EpochRecord, params: &ModelParams<f32>, improved: bool) -> Result<()>;
}

impl EpochObserver for () {
    fn epoch_end(&mut self, _: &EpochRecord, _: &ModelParams<f32>, _: bool) -> Result<()> {
        Ok(())
    }
}

/// Trains a fresh model and returns the parameters with the best
/// validation MAE.
pub fn train(
    data: &Dataset,
    model: crate::model::ModelConfig,
    diffusion: DiffusionConfig,
    config: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    diffusion.validate()?;
    if data.nodes.validation.is_empty() {
        return Err(Error::Data("training needs at least one validation station".into()));
    }
    let spec = training_spec(model.window, config.stride);
    let windows = data.training_windows(spec)?;
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let val_windows = data.validation_windows(spec)?;
    let val_ops = GraphOperators::new(&data.graph, diffusion)?;

    let base = data.observed_graph()?;
    let m = data.virtual_nodes(config.alpha)?;
    let mut params = ModelParams::<f32>::init(model, config.seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut rng = stream_rng(derive_seed(config.seed, &[epoch as u64]), stream::SHUFFLE);
        order.shuffle(&mut rng);
        let (mut tot, mut sup, mut phy) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (graph, node_mask) = batch_graph(&base, m, config.alpha, config.seed, epoch, b)?;
            let ops = GraphOperators::new(&graph, diffusion)?;
            params.store.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &wi in chunk {
                let w = training_window(&windows[wi], &graph, &node_mask)?;
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let loss = window_loss(&mut tape, &vars, &ops, &w, config)?;
                let lv = tape.value(loss.total).item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        detail: format!("loss {lv} on window starting at hour {}", w.hours[0]),
                    });
                }
                tape.backward(loss.total)?;
                params.store.accumulate_grads(&tape, &vars.vars, scale)?;
                tot += lv;
                sup += tape.value(loss.sup).item().as_f64();
                phy += tape.value(loss.phy).item().as_f64();
            }
            if let Some(norm) = params.store.clip_grad_norm(config.clip_norm) {
                log::debug!("epoch {epoch} batch {b}: clipped gradient norm {norm:.4}");
            }
            adam.step(&mut params.store)?;
            if !params.store.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: "non-finite parameters after update".into(),
                });
            }
        }
        let n = windows.len() as f64;
        let val_mae = kriging_mae(&val_windows, &val_ops, &params, &data.normalizer, &data.nodes.validation)?;
        let record = EpochRecord {
            epoch,
            train_loss: tot / n,
            sup_loss: sup / n,
            phy_loss: phy / n,
            val_mae,
            mu: params.mu(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} sup {:.5} phy {:.5} val_mae {:.4} mu {:.4}",
            record.train_loss,
            record.sup_loss,
            record.phy_loss,
            record.val_mae,
            record.mu
        );
        let improved = val_mae < best.0;
        if improved {
            best = (val_mae, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        observer.epoch_end(&record, &params, improved)?;
        log.push(record);
        if since_best >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_epoch: best.1,
        best_val_mae: best.0,
    })
}
