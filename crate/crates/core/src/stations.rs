//! Sensor-network graph: stations, distance-kernel adjacency, virtual nodes
//! and observation masks.
//!
//! Node order is fixed everywhere in the crate: real stations first in the
//! order they were supplied, virtual nodes appended in insertion order.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Default distance threshold on max-normalized distances.
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub is_virtual: bool,
}

impl Station {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self> {
        let id = id.into();
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Data(format!(
                "station {id}: coordinates ({lat}, {lon}) out of range"
            )));
        }
        Ok(Self {
            id,
            lat,
            lon,
            is_virtual: false,
        })
    }
}

#[derive(Debug, Deserialize)]
struct StationRow {
    station_id: String,
    latitude: f64,
    longitude: f64,
}

/// Reads `station_id,latitude,longitude` rows.
pub fn read_stations_csv(path: impl AsRef<Path>) -> Result<Vec<Station>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["station_id", "latitude", "longitude"] {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let mut stations: Vec<Station> = Vec::new();
    for row in rdr.deserialize::<StationRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if stations.iter().any(|s| s.id == row.station_id) {
            return Err(Error::Data(format!("duplicate station id {}", row.station_id)));
        }
        stations.push(Station::new(row.station_id, row.latitude, row.longitude)?);
    }
    Ok(stations)
}

pub fn write_stations_csv(path: impl AsRef<Path>, stations: &[Station]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let io = |e: csv::Error| csv_error(path, e);
    w.write_record(["station_id", "latitude", "longitude"]).map_err(io)?;
    for s in stations.iter().filter(|s| !s.is_virtual) {
        w.write_record([s.id.clone(), s.lat.to_string(), s.lon.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.into(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Great-circle distance between two points in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Symmetric matrix of haversine distances with zero diagonal.
pub fn pairwise_distances(stations: &[Station]) -> Result<Tensor<f64>> {
    if stations.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 stations for a distance matrix, got {}",
            stations.len()
        )));
    }
    let n = stations.len();
    let mut d = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&stations[i], &stations[j]);
            let v = haversine_km(a.lat, a.lon, b.lat, b.lon);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// Distances divided by the largest pairwise distance. An all-zero matrix
/// is returned unchanged.
pub fn normalize_distances(dist: &Tensor<f64>) -> Tensor<f64> {
    let max = dist.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        dist.map(|v| v / max)
    } else {
        dist.clone()
    }
}

/// Standard deviation of the off-diagonal (upper triangle) entries.
pub fn distance_std(dist: &Tensor<f64>) -> f64 {
    let n = dist.rows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| dist.get(i, j))
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Thresholded Gaussian kernel on max-normalized distances:
/// `exp(-d²/γ)` where `d ≤ δ`, zero elsewhere and on the diagonal.
pub fn gaussian_kernel_adjacency(dist: &Tensor<f64>, gamma: f64, delta: f64) -> Result<Tensor<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("kernel width gamma must be > 0, got {gamma}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Parameter(format!("threshold delta must be in (0, 1], got {delta}")));
    }
    if dist.rows() != dist.cols() {
        return Err(Error::Shape("distance matrix must be square".into()));
    }
    let norm = normalize_distances(dist);
    let n = norm.rows();
    Ok(Tensor::from_fn(n, n, |i, j| {
        let d = norm.get(i, j);
        if i == j || d > delta {
            0.0
        } else {
            (-d * d / gamma).exp()
        }
    }))
}

/// Node-level visibility flags; `true` means the value is shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMask(pub Vec<bool>);

impl NodeMask {
    pub fn inverse(&self) -> NodeMask {
        NodeMask(self.0.iter().map(|v| !v).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_visible(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    stations: Vec<Station>,
    n_real: usize,
    adjacency: Tensor<f64>,
    /// Anchor real node of each virtual node, in virtual-node order.
    anchors: Vec<usize>,
}

impl StationGraph {
    /// Builds the real-node graph with the thresholded Gaussian kernel.
    /// `gamma = None` uses the standard deviation of normalized distances.
    pub fn from_stations(stations: Vec<Station>, delta: f64, gamma: Option<f64>) -> Result<Self> {
        let mut ids: Vec<&str> = stations.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("station ids must be unique".into()));
        }
        let dist = pairwise_distances(&stations)?;
        let gamma = match gamma {
            Some(g) => g,
            None => distance_std(&normalize_distances(&dist)),
        };
        let adjacency = gaussian_kernel_adjacency(&dist, gamma, delta)?;
        Self::from_parts(stations, adjacency)
    }

    /// Wraps real stations and a precomputed adjacency.
    pub fn from_parts(stations: Vec<Station>, adjacency: Tensor<f64>) -> Result<Self> {
        let n = stations.len();
        if adjacency.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "adjacency {:?} for {n} stations",
                adjacency.shape()
            )));
        }
        if stations.iter().any(|s| s.is_virtual) {
            return Err(Error::Contract("from_parts takes real stations only".into()));
        }
        Ok(Self {
            stations,
            n_real: n,
            adjacency,
            anchors: Vec::new(),
        })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_virtual(&self) -> usize {
        self.stations.len() - self.n_real
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn adjacency(&self) -> &Tensor<f64> {
        &self.adjacency
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    /// The real node whose wind and coordinates node `i` uses.
    pub fn source_node(&self, i: usize) -> usize {
        if i < self.n_real {
            i
        } else {
            self.anchors[i - self.n_real]
        }
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.adjacency.get(i, j) > 0.0)
            .collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    /// Induced subgraph on the given real nodes, in the given order.
    pub fn subgraph(&self, nodes: &[usize]) -> Result<StationGraph> {
        if let Some(&bad) = nodes.iter().find(|&&i| i >= self.n_real) {
            return Err(Error::Parameter(format!("subgraph node {bad} is not a real node")));
        }
        let stations = nodes.iter().map(|&i| self.stations[i].clone()).collect();
        let adjacency = Tensor::from_fn(nodes.len(), nodes.len(), |a, b| {
            self.adjacency.get(nodes[a], nodes[b])
        });
        Self::from_parts(stations, adjacency)
    }

    /// Appends `m` virtual nodes.
    ///
    /// Each virtual node picks a uniformly random anchor among the real
    /// nodes and links to it with weight 1. A link probability is drawn once
    /// per virtual node from U[0, 1]; each real neighbor of the anchor is then
    /// linked independently with that probability, also with weight 1.
    pub fn insert_virtual_nodes(&self, m: usize, seed: u64) -> Result<StationGraph> {
        if self.n_real == 0 {
            return Err(Error::Parameter("cannot anchor virtual nodes in an empty graph".into()));
        }
        if m == 0 {
            return Ok(self.clone());
        }
        let mut rng = stream_rng(seed, stream::VIRTUAL_NODES);
        let old = self.len();
        let n = old + m;
        let mut adj = Tensor::from_fn(n, n, |i, j| {
            if i < old && j < old {
                self.adjacency.get(i, j)
            } else {
                0.0
            }
        });
        let mut stations = self.stations.clone();
        let mut anchors = self.anchors.clone();
        let first = self.n_virtual();
        for k in 0..m {
            let v = old + k;
            let anchor = rng.random_range(0..self.n_real);
            let p: f64 = rng.random();
            adj.set(v, anchor, 1.0);
            adj.set(anchor, v, 1.0);
            for j in 0..self.n_real {
                if j != anchor && self.adjacency.get(anchor, j) > 0.0 && rng.random::<f64>() < p {
                    adj.set(v, j, 1.0);
                    adj.set(j, v, 1.0);
                }
            }
            let a = &self.stations[anchor];
            stations.push(Station {
                id: format!("virtual-{}", first + k),
                lat: a.lat,
                lon: a.lon,
                is_virtual: true,
            });
            anchors.push(anchor);
        }
        Ok(StationGraph {
            stations,
            n_real: self.n_real,
            adjacency: adj,
            anchors,
        })
    }
}

/// Virtual-node count that makes a training graph of `n_train` real nodes
/// as large as an inference graph with missing rate `alpha`.
pub fn virtual_node_count(n_train: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    Ok((alpha / (1.0 - alpha) * n_train as f64 - 1e-9).ceil().max(0.0) as usize)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("missing rate alpha must be in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Builds the node mask and its inverse.
///
/// Virtual nodes are always hidden. When the virtual nodes alone hide fewer
/// than `round(alpha · n)` nodes, the shortfall is made up by hiding
/// randomly chosen real nodes; with a graph built by
/// [`virtual_node_count`] that never happens and every real node is
/// visible.
pub fn make_training_masks(graph: &StationGraph, alpha: f64, seed: u64) -> Result<(NodeMask, NodeMask)> {
    check_alpha(alpha)?;
    let n = graph.len();
    let mut mask: Vec<bool> = (0..n).map(|i| i < graph.n_real()).collect();
    let target = (alpha * n as f64).round() as usize;
    let shortfall = target.saturating_sub(graph.n_virtual()).min(graph.n_real());
    if shortfall > 0 {
        let mut rng = stream_rng(seed, stream::MASKS);
        let hidden = rand::seq::index::sample(&mut rng, graph.n_real(), shortfall);
        for i in hidden {
            mask[i] = false;
        }
    }
    let mask = NodeMask(mask);
    let inverse = mask.inverse();
    Ok((mask, inverse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> Vec<Station> {
        (0..n)
            .map(|i| {
                Station::new(
                    format!("s{i}"),
                    39.8 + 0.05 * (i % 4) as f64,
                    116.2 + 0.05 * (i / 4) as f64,
                )
                .unwrap()
            })
            .collect()
    }

    /// Spherical law of cosines, an independent route to the great-circle
    /// distance.
    fn cosine_law_km(a: &Station, b: &Station) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn haversine_matches_cosine_law() {
        let a = Station::new("a", 39.9, 116.4).unwrap();
        let b = Station::new("b", 39.9, 116.5).unwrap();
        let d = pairwise_distances(&[a.clone(), b.clone()]).unwrap();
        let oracle = cosine_law_km(&a, &b);
        assert!((d.get(0, 1) - oracle).abs() / oracle < 1e-6);
        assert!((d.get(0, 1) - 8.5305).abs() < 1e-3, "{}", d.get(0, 1));
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 1), d.get(1, 0));
    }

    #[test]
    fn identical_coordinates_have_zero_distance() {
        let a = Station::new("a", 10.0, 20.0).unwrap();
        let b = Station::new("b", 10.0, 20.0).unwrap();
        assert_eq!(pairwise_distances(&[a, b]).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn one_station_is_config_error() {
        let a = Station::new("a", 10.0, 20.0).unwrap();
        assert!(matches!(pairwise_distances(&[a]), Err(Error::Config(_))));
        assert!(Station::new("x", 91.0, 0.0).is_err());
    }

    #[test]
    fn kernel_values() {
        // max distance 1 so normalized distances equal the raw values
        let dist = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.05, 0.2],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.05, 1.0, 0.0, 1.0],
            vec![0.2, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let w = gaussian_kernel_adjacency(&dist, 0.01, 0.1).unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert!((w.get(0, 2) - (-0.25f64).exp()).abs() < 1e-12);
        assert!((w.get(0, 2) - 0.7788).abs() < 1e-4);
        assert_eq!(w.get(0, 3), 0.0);
        assert_eq!(w.get(2, 2), 0.0);
        assert!(matches!(
            gaussian_kernel_adjacency(&dist, 0.0, 0.1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn zero_virtual_nodes_is_identity() {
        let g = StationGraph::from_stations(grid(6), 0.5, None).unwrap();
        assert_eq!(g.insert_virtual_nodes(0, 1).unwrap(), g);
    }

    #[test]
    fn single_node_anchor() {
        let s = vec![Station::new("only", 0.0, 0.0).unwrap()];
        let g = StationGraph::from_parts(s, Tensor::zeros(1, 1)).unwrap();
        let a = g.insert_virtual_nodes(1, 9).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.neighbors(1), vec![0]);
        assert_eq!(a.adjacency().get(1, 0), 1.0);
        assert!(a.stations()[1].is_virtual);
    }

    #[test]
    fn virtual_degrees_are_bounded_by_anchor_neighborhood() {
        let g = StationGraph::from_stations(grid(10), 0.6, None).unwrap();
        for seed in 0..20 {
            let a = g.insert_virtual_nodes(5, seed).unwrap();
            for k in 0..5 {
                let v = 10 + k;
                let anchor = a.anchors()[k];
                let deg = a.degree(v);
                assert!(deg >= 1 && deg <= 1 + g.degree(anchor), "seed {seed}");
                assert!(a.neighbors(v).contains(&anchor));
                // links only to the anchor and its real neighbors
                for j in a.neighbors(v) {
                    assert!(j == anchor || g.adjacency().get(anchor, j) > 0.0);
                }
                assert_eq!(a.stations()[v].lat, g.stations()[anchor].lat);
            }
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let g = StationGraph::from_stations(grid(12), 0.5, None).unwrap();
        let a = g.insert_virtual_nodes(7, 42).unwrap();
        let b = g.insert_virtual_nodes(7, 42).unwrap();
        assert_eq!(a, b);
        let bits = |x: &StationGraph| x.adjacency().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn masks() {
        let g = StationGraph::from_stations(grid(8), 0.5, None).unwrap();
        let (m, inv) = make_training_masks(&g, 0.0, 1).unwrap();
        assert_eq!(m.count_visible(), 8);
        assert_eq!(inv.count_visible(), 0);

        let s: Vec<Station> = (0..36)
            .map(|i| Station::new(format!("n{i}"), 39.0 + 0.01 * i as f64, 116.0).unwrap())
            .collect();
        let g = StationGraph::from_stations(s, 0.1, None).unwrap();
        let m_count = virtual_node_count(36, 0.5).unwrap();
        assert_eq!(m_count, 36);
        let aug = g.insert_virtual_nodes(m_count, 3).unwrap();
        let (m, inv) = make_training_masks(&aug, 0.5, 3).unwrap();
        assert_eq!(m.count_visible(), 36);
        assert_eq!(inv.count_visible(), 36);
        assert!((0..36).all(|i| m.get(i)) && (36..72).all(|i| !m.get(i)));
        assert!(make_training_masks(&aug, 1.0, 3).is_err());
        assert!(make_training_masks(&aug, -0.1, 3).is_err());
    }

    #[test]
    fn real_nodes_are_hidden_when_no_virtual_nodes_exist() {
        let g = StationGraph::from_stations(grid(10), 0.5, None).unwrap();
        let (m, _) = make_training_masks(&g, 0.5, 11).unwrap();
        assert_eq!(m.count_visible(), 5);
        assert_eq!(make_training_masks(&g, 0.5, 11).unwrap().0, m);
    }

    #[test]
    fn virtual_node_count_matches_missing_rate() {
        assert_eq!(virtual_node_count(18, 0.5).unwrap(), 18);
        assert_eq!(virtual_node_count(10, 0.25).unwrap(), 4);
        assert_eq!(virtual_node_count(9, 0.0).unwrap(), 0);
        assert_eq!(virtual_node_count(7, 0.3).unwrap(), 3);
    }

    #[test]
    fn csv_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stations.csv");
        write_stations_csv(&p, &grid(3)).unwrap();
        assert_eq!(read_stations_csv(&p).unwrap(), grid(3));
        std::fs::write(&p, "id,lat,lon\na,1,2\n").unwrap();
        assert!(matches!(read_stations_csv(&p), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn kernel_invariants(coords in prop::collection::vec((-60.0f64..60.0, -170.0f64..170.0), 2..9),
                             delta in 0.05f64..1.0) {
            let stations: Vec<Station> = coords
                .iter()
                .enumerate()
                .map(|(i, &(la, lo))| Station::new(format!("p{i}"), la, lo).unwrap())
                .collect();
            let g = StationGraph::from_stations(stations, delta, Some(0.1)).unwrap();
            let w = g.adjacency();
            let n = g.len();
            for i in 0..n {
                prop_assert_eq!(w.get(i, i), 0.0);
                for j in 0..n {
                    prop_assert_eq!(w.get(i, j), w.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&w.get(i, j)));
                }
            }
            let aug = g.insert_virtual_nodes(3, 5).unwrap();
            for v in n..n + 3 {
                prop_assert!(aug.degree(v) >= 1);
            }
            let (m, inv) = make_training_masks(&aug, 0.4, 1).unwrap();
            for i in 0..aug.len() {
                prop_assert!(m.get(i) ^ inv.get(i));
            }
        }
    }
}
