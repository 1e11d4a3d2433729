//! Advection and diffusion on the station graph.
//!
//! Two families of operators live here:
//!
//! * message-passing operators for the model: the scaled normalized
//!   Laplacian `W_diff = K (I - D^-1/2 W_d D^-1/2)`, the wind-driven
//!   `W_adv = I - D^-1/2 W_p D^-1/2` with `W_p[i, j] = p_i - p_j`, and their
//!   mixture `W_phy = μ W_adv + (1 - μ) W_diff`;
//! * conservative flux operators for simulation, where every column sums
//!   to zero so explicit Euler steps preserve total mass.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::stations::Station;

/// Diffusion coefficient per time step.
pub const DEFAULT_DIFFUSION_K: f64 = 0.1;

/// Guard added to degrees before taking inverse square roots.
pub const DEGREE_EPS: f64 = 1e-8;

/// Hidden width of the wind-field MLP.
pub const WIND_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub k: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_DIFFUSION_K,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::Parameter(format!("diffusion coefficient must be > 0, got {}", self.k)));
        }
        Ok(())
    }
}

fn check_square(m: &Tensor<f64>, what: &str) -> Result<usize> {
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!("{what} must be square, got {:?}", m.shape())));
    }
    Ok(m.rows())
}

/// `K (I - D^-1/2 W_d D^-1/2)`. Zero-degree nodes get a zero entry in
/// `D^-1/2`, which leaves `K` on their diagonal.
pub fn diffusion_adjacency(w_d: &Tensor<f64>, k: f64) -> Result<Tensor<f64>> {
    let n = check_square(w_d, "distance adjacency")?;
    DiffusionConfig { k }.validate()?;
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| w_d.get(i, j)).sum();
            if d > 0.0 {
                d.sqrt().recip()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_fn(n, n, |i, j| {
        let off = inv_sqrt[i] * w_d.get(i, j) * inv_sqrt[j];
        let eye = if i == j { 1.0 } else { 0.0 };
        k * (eye - off)
    }))
}

/// Combinatorial Laplacian `K (D - W_d)`: symmetric, zero row and column
/// sums. Used by the simulator.
pub fn diffusion_flux_operator(w_d: &Tensor<f64>, k: f64) -> Result<Tensor<f64>> {
    let n = check_square(w_d, "distance adjacency")?;
    DiffusionConfig { k }.validate()?;
    Ok(Tensor::from_fn(n, n, |i, j| {
        if i == j {
            k * ((0..n).map(|m| w_d.get(i, m)).sum::<f64>() - w_d.get(i, i))
        } else {
            -k * w_d.get(i, j)
        }
    }))
}

/// Wind-field MLP `2 → 16 → 1` with a tanh hidden layer, applied per node.
///
/// `wind` is n×2 (U, V); returns the n×1 scalar field `p`.
pub fn wind_field_embed<T: Real>(
    tape: &mut Tape<T>,
    wind: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    if !tape.value(wind).is_finite() {
        return Err(Error::Data("wind input contains NaN or infinite values".into()));
    }
    let h = tape.matmul(wind, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h);
    let p = tape.matmul(h, w2)?;
    tape.add(p, b2)
}

/// `W_adv = I - D^-1/2 W_p D^-1/2` with `W_p[i, j] = (p_i - p_j)` on edges
/// and `D` the row sums of `|W_p|`.
///
/// `p` is n×1 and `edges` an n×n 0/1 constant marking existing edges.
pub fn advection_adjacency<T: Real>(tape: &mut Tape<T>, p: Var, edges: Var) -> Result<Var> {
    let [n, one] = tape.shape(p);
    if one != 1 || tape.shape(edges) != [n, n] {
        return Err(Error::Shape(format!(
            "advection needs p n×1 and edges n×n, got {:?} and {:?}",
            tape.shape(p),
            tape.shape(edges)
        )));
    }
    let pt = tape.transpose(p);
    let diff = tape.sub(p, pt)?;
    let w_p = tape.mul(diff, edges)?;
    let mag = tape.abs(w_p);
    let ones = tape.constant(Tensor::full(n, 1, T::one()));
    let degree = tape.matmul(mag, ones)?;
    let inv_sqrt = tape.rsqrt(degree, DEGREE_EPS);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let scaled = tape.mul(w_p, inv_sqrt)?;
    let scaled = tape.mul(scaled, inv_sqrt_t)?;
    let eye = tape.constant(Tensor::identity(n));
    tape.sub(eye, scaled)
}

/// `W_p` alone, for inspection and tests.
pub fn advection_weights(p: &[f64], edges: &Tensor<f64>) -> Tensor<f64> {
    let n = p.len();
    Tensor::from_fn(n, n, |i, j| {
        if edges.get(i, j) > 0.0 {
            p[i] - p[j]
        } else {
            0.0
        }
    })
}

/// 0/1 edge indicator of an adjacency matrix.
pub fn edge_indicator<T: Real>(w: &Tensor<f64>) -> Tensor<T> {
    Tensor::from_fn(w.rows(), w.cols(), |i, j| {
        if w.get(i, j) > 0.0 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `sigmoid(mu_raw) · W_adv + (1 - sigmoid(mu_raw)) · W_diff`.
pub fn fuse_physics<T: Real>(tape: &mut Tape<T>, w_adv: Var, w_diff: Var, mu_raw: Var) -> Result<Var> {
    if tape.shape(w_adv) != tape.shape(w_diff) {
        return Err(Error::Shape(format!(
            "fuse: W_adv {:?} vs W_diff {:?}",
            tape.shape(w_adv),
            tape.shape(w_diff)
        )));
    }
    let mu = tape.sigmoid(mu_raw);
    let adv = tape.mul(w_adv, mu)?;
    let diff_part = tape.mul(w_diff, mu)?;
    let diff_rest = tape.sub(w_diff, diff_part)?;
    tape.add(adv, diff_rest)
}

/// Evaluated physics adjacency for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsAdjacency {
    pub w_diff: Tensor<f64>,
    pub w_adv: Tensor<f64>,
    pub mu: f64,
    pub w_phy: Tensor<f64>,
}

impl PhysicsAdjacency {
    /// Fuses precomputed operators outside of any training tape.
    pub fn fuse(w_adv: Tensor<f64>, w_diff: Tensor<f64>, mu_raw: f64) -> Result<Self> {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(w_adv.clone());
        let d = tape.constant(w_diff.clone());
        let m = tape.constant(Tensor::scalar(mu_raw));
        let phy = fuse_physics(&mut tape, a, d, m)?;
        let mu_var = tape.sigmoid(m);
        Ok(Self {
            mu: tape.value(mu_var).item(),
            w_phy: tape.value(phy).clone(),
            w_adv,
            w_diff,
        })
    }
}

/// Evaluates [`advection_adjacency`] on plain values.
pub fn advection_adjacency_values(p: &[f64], edges: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::column(p.to_vec()));
    let e = tape.constant(edge_indicator(edges));
    let w = advection_adjacency(&mut tape, pv, e)?;
    Ok(tape.value(w).clone())
}

/// Conservative advection operator from nonnegative transport rates,
/// `rates[j][i] = v_{j→i}`. With `dx/dt = -A x`, node `i` gains
/// `Σ_j x_j v_{j→i}` and loses `x_i Σ_k v_{i→k}`; every column of `A`
/// sums to zero.
pub fn advection_flux_operator(rates: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = check_square(rates, "transport rates")?;
    if rates.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Parameter("transport rates must be finite and nonnegative".into()));
    }
    Ok(Tensor::from_fn(n, n, |i, j| {
        if i == j {
            (0..n).filter(|&k| k != i).map(|k| rates.get(i, k)).sum()
        } else {
            -rates.get(j, i)
        }
    }))
}

/// Upwind transport rates from per-node wind vectors.
///
/// For each edge the mean wind of its endpoints is projected on the unit
/// vector between them (local east/north plane); the positive part drives
/// transport downwind at `scale · w_ij · |projection|`.
pub fn wind_transport_rates(
    stations: &[Station],
    w_d: &Tensor<f64>,
    wind: &[(f64, f64)],
    scale: f64,
) -> Tensor<f64> {
    let n = stations.len();
    let mut rates = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let w = w_d.get(i, j);
            if w <= 0.0 {
                continue;
            }
            let (a, b) = (&stations[i], &stations[j]);
            let east = (b.lon - a.lon) * ((a.lat + b.lat) / 2.0).to_radians().cos();
            let north = b.lat - a.lat;
            let len = (east * east + north * north).sqrt();
            if len == 0.0 {
                continue;
            }
            let u = (wind[i].0 + wind[j].0) / 2.0;
            let v = (wind[i].1 + wind[j].1) / 2.0;
            let along = (u * east + v * north) / len;
            let rate = scale * w * along.abs();
            if along > 0.0 {
                rates.set(i, j, rate);
            } else if along < 0.0 {
                rates.set(j, i, rate);
            }
        }
    }
    rates
}

/// Sum of conservative diffusion and advection operators, `dx/dt = -A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxOperator {
    matrix: Tensor<f64>,
}

impl FluxOperator {
    pub fn new(diffusion: &Tensor<f64>, advection: &Tensor<f64>) -> Result<Self> {
        if diffusion.shape() != advection.shape() {
            return Err(Error::Shape("diffusion and advection operators differ in shape".into()));
        }
        let data = diffusion
            .data()
            .iter()
            .zip(advection.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            matrix: Tensor::new(diffusion.rows(), diffusion.cols(), data)?,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            matrix: Tensor::zeros(n, n),
        }
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    /// Largest stable explicit-Euler step, `1 / (2 · max_i Σ_j |A_ij|)`.
    pub fn stability_bound(&self) -> f64 {
        let n = self.matrix.rows();
        let norm = (0..n)
            .map(|i| (0..n).map(|j| self.matrix.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if norm == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (2.0 * norm)
        }
    }

    pub fn check_dt(&self, dt: f64) -> Result<()> {
        let bound = self.stability_bound();
        if !(dt > 0.0) || dt >= bound {
            return Err(Error::Unstable { dt, bound });
        }
        Ok(())
    }

    /// One explicit Euler step, `x - dt · A x`.
    pub fn step(&self, x: &[f64], dt: f64) -> Vec<f64> {
        let n = self.matrix.rows();
        (0..n)
            .map(|i| {
                let ax: f64 = (0..n).map(|j| self.matrix.get(i, j) * x[j]).sum();
                x[i] - dt * ax
            })
            .collect()
    }
}

/// Explicit Euler integration; returns `steps + 1` states starting at `x0`.
pub fn integrate_advection_diffusion(
    x0: &[f64],
    op: &FluxOperator,
    steps: usize,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    if x0.len() != op.matrix.rows() {
        return Err(Error::Shape(format!(
            "{} initial values for a {}-node operator",
            x0.len(),
            op.matrix.rows()
        )));
    }
    op.check_dt(dt)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for s in 0..steps {
        let next = op.step(&traj[s], dt);
        traj.push(next);
    }
    Ok(traj)
}

/// Writes `step,node_id,value` rows.
pub fn write_trajectory_csv(
    path: impl AsRef<Path>,
    trajectory: &[Vec<f64>],
    node_ids: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,node_id,value").map_err(io)?;
    for (s, state) in trajectory.iter().enumerate() {
        for (id, v) in node_ids.iter().zip(state) {
            writeln!(w, "{s},{id},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
