//! Per-window spatial-temporal hypergraph.
//!
//! A window `(t−1, t)` of `N` channels gives `2N` nodes: node `i < N` is
//! channel `i` at `t−1`, node `N + i` is channel `i` at `t`. Every node is the
//! master of exactly two hyperedges. Edge `m` (for `m < 2N`) is the spatial
//! edge of master `m`, edge `2N + m` its temporal edge. Candidates for the
//! spatial edge are the other nodes of the master's own slice, candidates for
//! the temporal edge are all nodes of the opposite slice, both ascending.
//!
//! Candidate weights come from a learned coefficient bank: row `m` of `p_spa`
//! (`2N × (N−1)`) and `p_tem` (`2N × N`) hold the reconstruction coefficients
//! of master `m`, column `j` matching the `j`-th candidate. A candidate joins
//! the hyperedge with weight `ReLU(p)`, the master with weight exactly 1.
//!
//! Reconstruction happens in projected space: both the master and the
//! candidate rows are multiplied by the same `Θ` before comparison.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Computation, GatherMap, Matrix, Scalar, Tape, Var};
use crate::data::PairSample;

pub const THETA_SPA: &str = "theta_spa";
pub const THETA_TEM: &str = "theta_tem";
pub const P_SPA: &str = "p_spa";
pub const P_TEM: &str = "p_tem";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypergraphError {
    #[error("node index {index} out of range for {nodes} nodes")]
    IndexOutOfRange { index: usize, nodes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Spatial,
    Temporal,
}

/// Spatial and temporal candidate sets of `master` among `2·channels` nodes.
pub fn candidate_sets(master: usize, channels: usize) -> Result<(Vec<usize>, Vec<usize>), HypergraphError> {
    let nodes = 2 * channels;
    if master >= nodes {
        return Err(HypergraphError::IndexOutOfRange { index: master, nodes });
    }
    let own = master / channels;
    let slice = |s: usize| s * channels..(s + 1) * channels;
    let spa = slice(own).filter(|&v| v != master).collect();
    let tem = slice(1 - own).collect();
    Ok((spa, tem))
}

/// Learned reconstruction coefficients, one row per master node.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientBank {
    pub spa: Matrix,
    pub tem: Matrix,
}

impl CoefficientBank {
    pub fn constant(channels: usize, value: f64) -> Self {
        Self {
            spa: Matrix::filled(2 * channels, channels - 1, value),
            tem: Matrix::filled(2 * channels, channels, value),
        }
    }

    pub fn channels(&self) -> usize {
        self.tem.cols()
    }

    fn check(&self, channels: usize) -> Result<(), HypergraphError> {
        if self.spa.shape() != (2 * channels, channels - 1) || self.tem.shape() != (2 * channels, channels) {
            return Err(HypergraphError::Shape(format!(
                "bank shapes {:?}/{:?} do not fit N={channels}",
                self.spa.shape(),
                self.tem.shape()
            )));
        }
        Ok(())
    }

    fn row(&self, kind: EdgeKind, master: usize) -> &[f64] {
        match kind {
            EdgeKind::Spatial => self.spa.row(master),
            EdgeKind::Temporal => self.tem.row(master),
        }
    }
}

/// Projections and regularization weights of the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub theta_spa: Matrix,
    pub theta_tem: Matrix,
    /// Weight of the reconstruction errors.
    pub lambda: f64,
    /// Weight of the squared-L2 coefficient penalty.
    pub gamma: f64,
}

/// Node features, `2N × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSet {
    pub features: Matrix,
}

impl NodeSet {
    pub fn from_sample(sample: &PairSample) -> Self {
        Self {
            features: sample.features.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.rows() / 2
    }

    fn rows(&self, idx: &[usize]) -> Matrix {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Matrix::from_vec(idx.len(), d, data)
    }
}

/// `‖x·Θ − p·(X_cand·Θ)‖²`.
pub fn reconstruction_error(
    master_x: &[f64],
    p: &[f64],
    candidates: &Matrix,
    theta: &Matrix,
) -> Result<f64, HypergraphError> {
    let d = master_x.len();
    if theta.rows() != d || candidates.cols() != d || candidates.rows() != p.len() {
        return Err(HypergraphError::Shape(format!(
            "x: {d}, p: {}, candidates: {:?}, theta: {:?}",
            p.len(),
            candidates.shape(),
            theta.shape()
        )));
    }
    let dp = theta.cols();
    let mut err = 0.0;
    for k in 0..dp {
        let mut lhs = 0.0;
        for (j, &xj) in master_x.iter().enumerate() {
            lhs += xj * theta.get(j, k);
        }
        let mut rhs = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            let mut proj = 0.0;
            for j in 0..d {
                proj += candidates.get(i, j) * theta.get(j, k);
            }
            rhs += pi * proj;
        }
        err += (lhs - rhs) * (lhs - rhs);
    }
    Ok(err)
}

fn check_proj(proj: &ProjectionParams, d: usize) -> Result<(), HypergraphError> {
    if proj.theta_spa.rows() != d || proj.theta_tem.rows() != d || proj.theta_spa.cols() != proj.theta_tem.cols() {
        return Err(HypergraphError::Shape(format!(
            "projections {:?}/{:?} do not fit d={d}",
            proj.theta_spa.shape(),
            proj.theta_tem.shape()
        )));
    }
    Ok(())
}

/// Total reconstruction loss summed over all masters: reconstruction errors
/// weighted by `lambda`, plus the L1 norms of both coefficient rows, plus
/// `gamma` times their squared L2 norms.
pub fn reconstruction_loss(
    nodes: &NodeSet,
    bank: &CoefficientBank,
    proj: &ProjectionParams,
) -> Result<f64, HypergraphError> {
    let n = nodes.channels();
    bank.check(n)?;
    check_proj(proj, nodes.features.cols())?;
    let mut total = 0.0;
    for m in 0..2 * n {
        let (spa, tem) = candidate_sets(m, n)?;
        let x = nodes.features.row(m);
        let ps = bank.spa.row(m);
        let pt = bank.tem.row(m);
        let c_spa = reconstruction_error(x, ps, &nodes.rows(&spa), &proj.theta_spa)?;
        let c_tem = reconstruction_error(x, pt, &nodes.rows(&tem), &proj.theta_tem)?;
        let l1: f64 = ps.iter().chain(pt).map(|v| v.abs()).sum();
        let l2: f64 = ps.iter().chain(pt).map(|v| v * v).sum();
        total += proj.lambda * (c_spa + c_tem) + l1 + proj.gamma * l2;
    }
    Ok(total)
}

/// Nodes plus the weighted `2N × 4N` incidence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HypergraphSnapshot {
    pub nodes: NodeSet,
    pub incidence: Matrix,
    /// Master node of each edge.
    pub masters: Vec<usize>,
}

impl HypergraphSnapshot {
    pub fn num_edges(&self) -> usize {
        self.masters.len()
    }

    pub fn edge_kind(&self, e: usize) -> EdgeKind {
        if e < self.masters.len() / 2 {
            EdgeKind::Spatial
        } else {
            EdgeKind::Temporal
        }
    }

    pub fn spatial_edge(&self, master: usize) -> usize {
        master
    }

    pub fn temporal_edge(&self, master: usize) -> usize {
        self.masters.len() / 2 + master
    }
}

pub fn build_incidence(nodes: &NodeSet, bank: &CoefficientBank) -> Result<HypergraphSnapshot, HypergraphError> {
    let n = nodes.channels();
    bank.check(n)?;
    let v = 2 * n;
    let mut h = Matrix::zeros(v, 2 * v);
    let mut masters = Vec::with_capacity(2 * v);
    for (offset, kind) in [(0, EdgeKind::Spatial), (v, EdgeKind::Temporal)] {
        for m in 0..v {
            let e = offset + m;
            let (spa, tem) = candidate_sets(m, n)?;
            let cands = if kind == EdgeKind::Spatial { spa } else { tem };
            h.set(m, e, 1.0);
            for (&u, &p) in cands.iter().zip(bank.row(kind, m)) {
                h.set(u, e, p.max(0.0));
            }
            masters.push(m);
        }
    }
    Ok(HypergraphSnapshot {
        nodes: nodes.clone(),
        incidence: h,
        masters,
    })
}

/// Incidence-weighted mean of the node features of edge `e`.
pub fn hyperedge_embedding(snapshot: &HypergraphSnapshot, e: usize) -> Result<Vec<f64>, HypergraphError> {
    let h = &snapshot.incidence;
    if e >= h.cols() {
        return Err(HypergraphError::IndexOutOfRange {
            index: e,
            nodes: h.cols(),
        });
    }
    let x = &snapshot.nodes.features;
    let mut num = vec![0.0; x.cols()];
    let mut den = 0.0;
    for v in 0..h.rows() {
        let w = h.get(v, e);
        if w != 0.0 {
            den += w;
            for (acc, &xv) in num.iter_mut().zip(x.row(v)) {
                *acc += w * xv;
            }
        }
    }
    Ok(num.into_iter().map(|s| s / den).collect())
}

/// Nodes, incidence and reconstruction loss of one window.
pub fn build_snapshot(
    sample: &PairSample,
    bank: &CoefficientBank,
    proj: &ProjectionParams,
) -> Result<(HypergraphSnapshot, f64), HypergraphError> {
    let nodes = NodeSet::from_sample(sample);
    let snap = build_incidence(&nodes, bank)?;
    let loss = reconstruction_loss(&nodes, bank, proj)?;
    Ok((snap, loss))
}

/// Gather maps that scatter coefficient banks into `2N × 2N` master-by-node
/// matrices (row = master, column = candidate node, zero elsewhere).
#[derive(Clone, Debug)]
pub struct Topology {
    pub channels: usize,
    pub spa: Arc<GatherMap>,
    pub tem: Arc<GatherMap>,
    pub identity: Matrix,
}

impl Topology {
    pub fn new(channels: usize) -> Self {
        let v = 2 * channels;
        let mut spa = vec![None; v * v];
        let mut tem = vec![None; v * v];
        for m in 0..v {
            let (s, t) = candidate_sets(m, channels).expect("master in range");
            for (j, &u) in s.iter().enumerate() {
                spa[m * v + u] = Some(m * (channels - 1) + j);
            }
            for (j, &u) in t.iter().enumerate() {
                tem[m * v + u] = Some(m * channels + j);
            }
        }
        Self {
            channels,
            spa: Arc::new(GatherMap {
                rows: v,
                cols: v,
                src: spa,
            }),
            tem: Arc::new(GatherMap {
                rows: v,
                cols: v,
                src: tem,
            }),
            identity: Matrix::identity(v),
        }
    }
}

/// Tape handles produced by [`record_hypergraph`].
pub struct RecordedHypergraph {
    /// Row `m`: embedding of the spatial edge of master `m`.
    pub e_spa: Var,
    /// Row `m`: embedding of the temporal edge of master `m`.
    pub e_tem: Var,
    pub recon: Var,
}

/// Records reconstruction loss and hyperedge embeddings for node features `x`.
pub fn record_hypergraph<S: Scalar>(
    tape: &mut Tape<S>,
    topo: &Topology,
    x: Var,
    lambda: f64,
    gamma: f64,
) -> Result<RecordedHypergraph, AutodiffError> {
    let theta_spa = tape.param(THETA_SPA)?;
    let theta_tem = tape.param(THETA_TEM)?;
    let p_spa = tape.param(P_SPA)?;
    let p_tem = tape.param(P_TEM)?;

    let mut errors = Vec::with_capacity(2);
    let mut embeddings = Vec::with_capacity(2);
    for (theta, p, map) in [(theta_spa, p_spa, &topo.spa), (theta_tem, p_tem, &topo.tem)] {
        let r = tape.gather(p, map.clone())?;
        let xt = tape.matmul(x, theta)?;
        let rec = tape.matmul(r, xt)?;
        let res = tape.sub(xt, rec)?;
        errors.push(tape.sq_l2(res)?);

        let w = tape.relu(r)?;
        let eye = tape.constant(&topo.identity);
        let m = tape.add(eye, w)?;
        let num = tape.matmul(m, x)?;
        let den = tape.row_sum(m)?;
        embeddings.push(tape.div_rows(num, den)?);
    }
    let c = tape.add(errors[0], errors[1])?;
    let c = tape.scale(c, lambda)?;
    let l1s = tape.l1(p_spa)?;
    let l1t = tape.l1(p_tem)?;
    let l1 = tape.add(l1s, l1t)?;
    let l2s = tape.sq_l2(p_spa)?;
    let l2t = tape.sq_l2(p_tem)?;
    let l2 = tape.add(l2s, l2t)?;
    let l2 = tape.scale(l2, gamma)?;
    let recon = tape.add(c, l1)?;
    let recon = tape.add(recon, l2)?;
    Ok(RecordedHypergraph {
        e_spa: embeddings[0],
        e_tem: embeddings[1],
        recon,
    })
}

/// Reconstruction loss of one window as a differentiable computation over
/// `theta_spa`, `theta_tem`, `p_spa`, `p_tem`.
pub struct ReconstructionLoss<'a> {
    pub nodes: &'a Matrix,
    pub lambda: f64,
    pub gamma: f64,
}

impl Computation for ReconstructionLoss<'_> {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var, AutodiffError> {
        let topo = Topology::new(self.nodes.rows() / 2);
        let x = tape.constant(self.nodes);
        Ok(record_hypergraph(tape, &topo, x, self.lambda, self.gamma)?.recon)
    }
}
