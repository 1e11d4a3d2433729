//! Kriging network: dynamic graph generation followed by spatio-temporal
//! graph convolutions and a linear readout.
//!
//! Activations are laid out frame-major: row `t * n + i` holds node `i` at
//! frame `t`. A window of `T` frames over `n` nodes is therefore a
//! `(T·n) × D` matrix.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::physics::{
    advection_adjacency, diffusion_adjacency, edge_indicator, fuse_physics, wind_field_embed,
    DiffusionConfig, WIND_HIDDEN,
};
use crate::rng::{stream, stream_rng};
use crate::stations::StationGraph;

/// Guard on absolute row sums when normalizing the aggregation operator.
pub const GC_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of STGC layers.
    pub layers: usize,
    pub feature_dim: usize,
    /// Frames per window.
    pub window: usize,
    /// Temporal halo on each side of a frame.
    pub m_halo: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            feature_dim: 64,
            window: 24,
            m_halo: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.feature_dim == 0 {
            return Err(Error::Config("layers and feature_dim must be positive".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        Ok(())
    }

    fn taps(&self) -> usize {
        2 * self.m_halo + 1
    }
}

/// One window of model inputs over `nodes` nodes and `frames` frames.
///
/// `target` holds z-scored concentrations (zero where unavailable),
/// `truth` the raw values in µg/m³ (NaN where unavailable).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub frames: usize,
    pub nodes: usize,
    pub target: Vec<f64>,
    pub truth: Vec<f64>,
    pub available: Vec<bool>,
    pub mask: Vec<bool>,
    /// z-scored (U, V) per frame and node.
    pub wind: Vec<(f64, f64)>,
    /// Hour index of each frame in the source table.
    pub hours: Vec<usize>,
}

impl WindowBatch {
    /// Model input: the target where the mask is set, exactly 0 elsewhere.
    pub fn x(&self) -> Vec<f64> {
        self.target
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect()
    }

    /// Per-node time-mean of the wind, n×2.
    pub fn mean_wind(&self) -> Tensor<f64> {
        let mut m = Tensor::zeros(self.nodes, 2);
        for t in 0..self.frames {
            for i in 0..self.nodes {
                let (u, v) = self.wind[t * self.nodes + i];
                m.set(i, 0, m.get(i, 0) + u);
                m.set(i, 1, m.get(i, 1) + v);
            }
        }
        m.map(|v| v / self.frames as f64)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.frames * self.nodes;
        if [
            self.target.len(),
            self.truth.len(),
            self.available.len(),
            self.mask.len(),
            self.wind.len(),
        ]
        .iter()
        .any(|&l| l != n)
            || self.hours.len() != self.frames
        {
            return Err(Error::Shape(format!(
                "window fields disagree with {}×{}",
                self.frames, self.nodes
            )));
        }
        Ok(())
    }

    /// Extends the window to the nodes of `graph`: virtual nodes get no
    /// observations and the wind of their anchor node.
    pub fn augment(&self, graph: &StationGraph) -> Result<WindowBatch> {
        if graph.n_real() != self.nodes {
            return Err(Error::Shape(format!(
                "window has {} nodes, graph has {} real nodes",
                self.nodes,
                graph.n_real()
            )));
        }
        let n = graph.len();
        let mut out = WindowBatch {
            frames: self.frames,
            nodes: n,
            target: Vec::with_capacity(self.frames * n),
            truth: Vec::with_capacity(self.frames * n),
            available: Vec::with_capacity(self.frames * n),
            mask: Vec::with_capacity(self.frames * n),
            wind: Vec::with_capacity(self.frames * n),
            hours: self.hours.clone(),
        };
        for t in 0..self.frames {
            for i in 0..n {
                let src = t * self.nodes + graph.source_node(i);
                if i < self.nodes {
                    out.target.push(self.target[src]);
                    out.truth.push(self.truth[src]);
                    out.available.push(self.available[src]);
                    out.mask.push(self.mask[src]);
                } else {
                    out.target.push(0.0);
                    out.truth.push(f64::NAN);
                    out.available.push(false);
                    out.mask.push(false);
                }
                out.wind.push(self.wind[src]);
            }
        }
        Ok(out)
    }
}

/// Static per-graph operators shared by every window on that graph.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub nodes: usize,
    pub w_diff: Tensor<f64>,
    pub edges: Tensor<f64>,
}

impl GraphOperators {
    pub fn new(graph: &StationGraph, diffusion: DiffusionConfig) -> Result<Self> {
        Ok(Self {
            nodes: graph.len(),
            w_diff: diffusion_adjacency(graph.adjacency(), diffusion.k)?,
            edges: edge_indicator(graph.adjacency()),
        })
    }
}

/// Named model parameters with index lookup derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

fn layout(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.feature_dim;
    let mut v = vec![
        ("windfield.w1".to_string(), 2, WIND_HIDDEN),
        ("windfield.b1".to_string(), 1, WIND_HIDDEN),
        ("windfield.w2".to_string(), WIND_HIDDEN, 1),
        ("windfield.b2".to_string(), 1, 1),
        ("embed.w_x".to_string(), 1, d),
        ("embed.w_mask".to_string(), 1, d),
        ("embed.b".to_string(), 1, d),
    ];
    for l in 0..config.layers {
        for o in 0..config.taps() {
            v.push((format!("stgc{l}.w{o}"), d, d));
        }
        v.push((format!("stgc{l}.b"), 1, d));
    }
    v.push(("readout.w".to_string(), d, 1));
    v.push(("readout.b".to_string(), 1, 1));
    v.push(("mu_raw".to_string(), 1, 1));
    v
}

impl<T: Real> ModelParams<T> {
    /// Uniform ±1/√fan_in initialization; the readout starts at zero and
    /// `mu_raw` at 0 (μ = 0.5).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, stream::WEIGHT_INIT);
        let mut store = ParamStore::new();
        let fan_in = |name: &str| -> usize {
            match name.split('.').next().unwrap_or("") {
                "windfield" if name.ends_with('1') => 2,
                "windfield" => WIND_HIDDEN,
                "embed" => 2,
                _ => config.taps() * config.feature_dim,
            }
        };
        for (name, r, c) in layout(&config) {
            let value = if name.starts_with("readout") || name == "mu_raw" {
                Tensor::zeros(r, c)
            } else {
                let bound = 1.0 / (fan_in(&name) as f64).sqrt();
                Tensor::from_fn(r, c, |_, _| T::from_f64_lossy(rng.random_range(-bound..bound)))
            };
            store.push(name, value);
        }
        Ok(Self { config, store })
    }

    /// Adopts parameters loaded from a checkpoint after checking names and
    /// shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let expected = ModelParams::<T>::init(config, 0)?;
        store.check_compatible(&expected.store)?;
        Ok(Self { config, store })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            store: self.store.cast(),
        }
    }

    pub fn mu(&self) -> f64 {
        let raw = self.store.by_name("mu_raw").expect("mu_raw").value.item().as_f64();
        1.0 / (1.0 + (-raw).exp())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            config: self.config,
            vars: self.store.bind(tape),
        }
    }
}

/// Parameters recorded on a tape, in store order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub vars: Vec<Var>,
}

/// Handles of one STGC layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub taps: Vec<Var>,
    pub bias: Var,
}

impl ModelVars {
    fn windfield(&self) -> [Var; 4] {
        [self.vars[0], self.vars[1], self.vars[2], self.vars[3]]
    }

    fn embed(&self) -> [Var; 3] {
        [self.vars[4], self.vars[5], self.vars[6]]
    }

    pub fn layer(&self, l: usize) -> LayerVars {
        let taps = self.config.taps();
        let start = 7 + l * (taps + 1);
        LayerVars {
            taps: self.vars[start..start + taps].to_vec(),
            bias: self.vars[start + taps],
        }
    }

    fn readout(&self) -> [Var; 2] {
        let n = self.vars.len();
        [self.vars[n - 3], self.vars[n - 2]]
    }

    pub fn mu_raw(&self) -> Var {
        *self.vars.last().expect("mu_raw")
    }
}

/// Row-normalized aggregation operator with a zero diagonal.
#[derive(Debug, Clone, Copy)]
pub struct GcOperator {
    pub matrix: Var,
    pub nodes: usize,
}

/// Zeroes the diagonal of `w`.
pub fn remove_self_loops<T: Real>(tape: &mut Tape<T>, w: Var) -> Result<Var> {
    let [n, _] = tape.shape(w);
    let off = tape.constant(Tensor::from_fn(n, n, |i, j| if i == j { T::zero() } else { T::one() }));
    tape.mul(w, off)
}

/// Builds the aggregation operator `W / (|W| 1 + ε)` from a self-loop-free
/// adjacency.
pub fn gc_operator<T: Real>(tape: &mut Tape<T>, w_minus: Var) -> Result<GcOperator> {
    let [n, c] = tape.shape(w_minus);
    if n != c {
        return Err(Error::Shape(format!("adjacency is {n}×{c}")));
    }
    if (0..n).any(|i| tape.value(w_minus).get(i, i) != T::zero()) {
        return Err(Error::Contract("aggregation adjacency has self-loops".into()));
    }
    let mag = tape.abs(w_minus);
    let ones = tape.constant(Tensor::full(n, 1, T::one()));
    let rows = tape.matmul(mag, ones)?;
    let matrix = tape.div(w_minus, rows, GC_EPS)?;
    Ok(GcOperator { matrix, nodes: n })
}

/// Per-window physics adjacency `W_phy^-` built from the window's mean wind.
pub fn dynamic_graph<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    ops: &GraphOperators,
    mean_wind: &Tensor<f64>,
) -> Result<Var> {
    if mean_wind.shape() != [ops.nodes, 2] {
        return Err(Error::Shape(format!(
            "mean wind {:?} for {} nodes",
            mean_wind.shape(),
            ops.nodes
        )));
    }
    let [w1, b1, w2, b2] = vars.windfield();
    let wind = tape.constant(mean_wind.cast());
    let p = wind_field_embed(tape, wind, w1, b1, w2, b2)?;
    let edges = tape.constant(ops.edges.cast());
    let w_adv = advection_adjacency(tape, p, edges)?;
    let w_diff = tape.constant(ops.w_diff.cast());
    let w_phy = fuse_physics(tape, w_adv, w_diff, vars.mu_raw())?;
    remove_self_loops(tape, w_phy)
}

/// One spatio-temporal graph convolution:
/// `relu(Σ_o shift(GC(Z), o) · W_o + b)` over offsets `o ∈ [-m, m]`.
pub fn stgc_layer<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    gc: &GcOperator,
    layer: &LayerVars,
    m_halo: usize,
) -> Result<Var> {
    if layer.taps.len() != 2 * m_halo + 1 {
        return Err(Error::Shape(format!(
            "{} taps for halo {m_halo}",
            layer.taps.len()
        )));
    }
    let agg = tape.frame_matmul(gc.matrix, z)?;
    let mut acc: Option<Var> = None;
    for (k, &w) in layer.taps.iter().enumerate() {
        let offset = k as isize - m_halo as isize;
        let proj = tape.matmul(agg, w)?;
        let shifted = if offset == 0 {
            proj
        } else {
            tape.shift_frames(proj, gc.nodes, offset)?
        };
        acc = Some(match acc {
            None => shifted,
            Some(a) => tape.add(a, shifted)?,
        });
    }
    let pre = tape.add(acc.expect("at least one tap"), layer.bias)?;
    Ok(tape.relu(pre))
}

/// Embedding, STGC stack and readout for an input column `x` ((T·n)×1).
pub fn estimate<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    gc: &GcOperator,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if mask.len() != rows || rows % gc.nodes != 0 {
        return Err(Error::Shape(format!(
            "input has {rows} rows, mask {} for {} nodes",
            mask.len(),
            gc.nodes
        )));
    }
    let [w_x, w_m, b] = vars.embed();
    let m = tape.constant(Tensor::column(
        mask.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
    ));
    let hx = tape.matmul(x, w_x)?;
    let hm = tape.matmul(m, w_m)?;
    let h = tape.add(hx, hm)?;
    let mut z = tape.add(h, b)?;
    for l in 0..vars.config.layers {
        z = stgc_layer(tape, z, gc, &vars.layer(l), vars.config.m_halo)?;
    }
    let [w_r, b_r] = vars.readout();
    let out = tape.matmul(z, w_r)?;
    tape.add(out, b_r)
}

/// Single forward pass on a fresh tape; returns a `frames × nodes` tensor
/// of normalized estimates.
pub fn forward<T: Real>(
    batch: &WindowBatch,
    ops: &GraphOperators,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    batch.check()?;
    if batch.nodes != ops.nodes {
        return Err(Error::Shape(format!(
            "batch has {} nodes, graph {}",
            batch.nodes, ops.nodes
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let w = dynamic_graph(&mut tape, &vars, ops, &batch.mean_wind())?;
    let gc = gc_operator(&mut tape, w)?;
    let x = tape.constant(Tensor::column(
        batch.x().into_iter().map(T::from_f64_lossy).collect(),
    ));
    let out = estimate(&mut tape, &vars, &gc, x, &batch.mask)?;
    Tensor::new(batch.frames, batch.nodes, tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stations::Station;

    fn line_graph(n: usize) -> StationGraph {
        let s: Vec<Station> = (0..n)
            .map(|i| Station::new(format!("s{i}"), 40.0, 116.0 + 0.01 * i as f64).unwrap())
            .collect();
        let adj = Tensor::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 });
        StationGraph::from_parts(s, adj).unwrap()
    }

    fn batch(frames: usize, nodes: usize) -> WindowBatch {
        let k = frames * nodes;
        WindowBatch {
            frames,
            nodes,
            target: (0..k).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect(),
            truth: vec![1.0; k],
            available: vec![true; k],
            mask: (0..k).map(|i| i % 3 != 0).collect(),
            wind: (0..k).map(|i| ((i as f64).sin(), (i as f64 * 0.5).cos())).collect(),
            hours: (0..frames).collect(),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            feature_dim: 4,
            window: 3,
            m_halo: 1,
        }
    }

    fn randomize_readout(p: &mut ModelParams<f64>) {
        let n = p.store.len();
        for (k, idx) in [n - 3, n - 2].into_iter().enumerate() {
            for (i, v) in p.store.get_mut(idx).value.data_mut().iter_mut().enumerate() {
                *v = 0.3 + 0.1 * (i + k) as f64;
            }
        }
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let g = line_graph(4);
        let ops = GraphOperators::new(&g, DiffusionConfig::default()).unwrap();
        let p = ModelParams::<f32>::init(small(), 1).unwrap();
        let out = forward(&batch(3, 4), &ops, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_deterministic() {
        let g = line_graph(4);
        let ops = GraphOperators::new(&g, DiffusionConfig::default()).unwrap();
        let mut p = ModelParams::<f64>::init(small(), 5).unwrap();
        randomize_readout(&mut p);
        let p = p.cast::<f32>();
        let a = forward(&batch(3, 4), &ops, &p).unwrap();
        let b = forward(&batch(3, 4), &ops, &p).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.is_finite());
    }

    #[test]
    fn self_loops_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::identity(3));
        assert!(matches!(gc_operator(&mut tape, w), Err(Error::Contract(_))));
        let w = remove_self_loops(&mut tape, w).unwrap();
        assert!(gc_operator(&mut tape, w).is_ok());
    }

    #[test]
    fn empty_adjacency_yields_bias_pattern() {
        let cfg = small();
        let p = ModelParams::<f64>::init(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let w = tape.constant(Tensor::zeros(3, 3));
        let gc = gc_operator(&mut tape, w).unwrap();
        let z = tape.constant(Tensor::from_fn(6, 4, |i, j| (i + j) as f64));
        let out = stgc_layer(&mut tape, z, &gc, &vars.layer(0), 1).unwrap();
        let bias = p.store.by_name("stgc0.b").unwrap().value.clone();
        for i in 0..6 {
            for j in 0..4 {
                assert_eq!(tape.value(out).get(i, j), bias.get(0, j).max(0.0));
            }
        }
    }

    #[test]
    fn one_layer_matches_hand_trace() {
        // 3-node path, two frames, D = 2, halo 1, hand-set weights.
        let cfg = ModelConfig {
            layers: 1,
            feature_dim: 2,
            window: 2,
            m_halo: 1,
        };
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_rows(&[
            vec![0.0, -2.0, 0.0],
            vec![1.0, 0.0, 3.0],
            vec![0.0, -1.0, 0.0],
        ]).unwrap());
        let gc = gc_operator(&mut tape, w).unwrap();
        let zv = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![0.5, 0.5],
            vec![-1.0, 2.0],
            vec![1.0, 1.0],
        ]).unwrap();
        let z = tape.constant(zv.clone());
        let taps: Vec<Tensor<f64>> = vec![
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        ];
        let bias = Tensor::from_rows(&[vec![0.1, -5.0]]).unwrap();
        let layer = LayerVars {
            taps: taps.iter().map(|t| tape.constant(t.clone())).collect(),
            bias: tape.constant(bias.clone()),
        };
        let out = stgc_layer(&mut tape, z, &gc, &layer, cfg.m_halo).unwrap();

        // Hand trace: row-normalized neighbors (no self term), edge-replicated
        // halo, per-offset projection, bias, relu.
        let adj = [[0.0, -2.0, 0.0], [1.0, 0.0, 3.0], [0.0, -1.0, 0.0]];
        let agg = |t: usize, i: usize, d: usize| -> f64 {
            let denom: f64 = adj[i].iter().map(|v: &f64| v.abs()).sum::<f64>() + GC_EPS;
            (0..3).map(|j| adj[i][j] * zv.get(t * 3 + j, d)).sum::<f64>() / denom
        };
        for t in 0..2usize {
            for i in 0..3 {
                for e in 0..2 {
                    let mut s = bias.get(0, e);
                    for (k, tap) in taps.iter().enumerate() {
                        let src = (t as isize + k as isize - 1).clamp(0, 1) as usize;
                        s += (0..2).map(|d| agg(src, i, d) * tap.get(d, e)).sum::<f64>();
                    }
                    let expect = s.max(0.0);
                    let got = tape.value(out).get(t * 3 + i, e);
                    assert!((got - expect).abs() < 1e-12, "t{t} i{i} e{e}: {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn single_node_graph_reduces_to_bias() {
        let s = vec![Station::new("solo", 0.0, 0.0).unwrap()];
        let g = StationGraph::from_parts(s, Tensor::zeros(1, 1)).unwrap();
        let ops = GraphOperators::new(&g, DiffusionConfig::default()).unwrap();
        let mut p = ModelParams::<f64>::init(small(), 9).unwrap();
        randomize_readout(&mut p);
        let a = forward(&batch(3, 1), &ops, &p).unwrap();
        let mut other = batch(3, 1);
        other.target = vec![5.0, -4.0, 2.0];
        other.mask = vec![true, true, false];
        let b = forward(&other, &ops, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.data().windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn isolated_node_ignores_all_inputs() {
        // node 3 has no incident edges
        let s: Vec<Station> = (0..4)
            .map(|i| Station::new(format!("s{i}"), 40.0, 116.0 + 0.01 * i as f64).unwrap())
            .collect();
        let adj = Tensor::from_fn(4, 4, |i, j| if i != j && i < 3 && j < 3 { 1.0 } else { 0.0 });
        let g = StationGraph::from_parts(s, adj).unwrap();
        let ops = GraphOperators::new(&g, DiffusionConfig::default()).unwrap();
        let mut p = ModelParams::<f64>::init(small(), 2).unwrap();
        randomize_readout(&mut p);
        let b1 = batch(3, 4);
        let mut b2 = b1.clone();
        for v in b2.target.iter_mut() {
            *v += 1.5;
        }
        b2.mask = vec![true; 12];
        let o1 = forward(&b1, &ops, &p).unwrap();
        let o2 = forward(&b2, &ops, &p).unwrap();
        for t in 0..3 {
            assert_eq!(o1.get(t, 3), o2.get(t, 3));
            assert_eq!(o1.get(t, 3), o1.get(0, 3));
        }
        assert_ne!(o1.get(0, 0), o2.get(0, 0));
    }

    #[test]
    fn augment_copies_anchor_wind() {
        let g = line_graph(3).insert_virtual_nodes(2, 4).unwrap();
        let b = batch(2, 3);
        let a = b.augment(&g).unwrap();
        assert_eq!(a.nodes, 5);
        for t in 0..2 {
            for k in 0..2 {
                let anchor = g.anchors()[k];
                assert_eq!(a.wind[t * 5 + 3 + k], b.wind[t * 3 + anchor]);
                assert!(!a.mask[t * 5 + 3 + k]);
                assert_eq!(a.x()[t * 5 + 3 + k], 0.0);
            }
        }
        assert!(b.augment(&line_graph(4)).is_err());
    }

    #[test]
    fn checkpoint_store_must_match_config() {
        let p = ModelParams::<f32>::init(small(), 1).unwrap();
        assert!(ModelParams::from_store(small(), p.store.clone()).is_ok());
        let wider = ModelConfig { feature_dim: 5, ..small() };
        assert!(matches!(
            ModelParams::from_store(wider, p.store),
            Err(Error::Shape(_))
        ));
    }
}
