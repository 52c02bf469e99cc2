//! Hypergraph learner: attention over each node's two hyperedges, an MLP node
//! update, mean pooling, an affine classifier and the combined task loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{evaluate, AutodiffError, Computation, Matrix, ParamSet, Scalar, Tape, Var};
use crate::data::PairSample;
use crate::hypergraph::{
    hyperedge_embedding, record_hypergraph, CoefficientBank, HypergraphError, HypergraphSnapshot, ProjectionParams,
    Topology, P_SPA, P_TEM, THETA_SPA, THETA_TEM,
};

pub const MLP_W1: &str = "mlp_w1";
pub const MLP_B1: &str = "mlp_b1";
pub const MLP_W2: &str = "mlp_w2";
pub const MLP_B2: &str = "mlp_b2";
pub const CLS_W: &str = "cls_w";
pub const CLS_B: &str = "cls_b";

pub fn query_name(h: usize) -> String {
    format!("att_q{h}")
}
pub fn key_name(h: usize) -> String {
    format!("att_k{h}")
}
pub fn value_name(h: usize) -> String {
    format!("att_v{h}")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Hypergraph(#[from] HypergraphError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid model dimensions: {0}")]
    Dims(String),
}

/// Architecture and loss hyperparameters of the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub feature_dim: usize,
    pub d_proj: usize,
    pub heads: usize,
    pub d_attn: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub classes: usize,
    pub dropout: f64,
    /// Weight of the reconstruction errors inside the reconstruction loss.
    pub lambda_recon: f64,
    /// Weight of the squared-L2 coefficient penalty.
    pub gamma: f64,
}

impl ModelDims {
    /// Defaults: `d_proj = d`, `d_hidden = 2·heads·d_attn`, `d_out = d`,
    /// dropout 0.3, `lambda_recon = 1`, `gamma = 0.1`.
    pub fn new(channels: usize, feature_dim: usize, heads: usize, d_attn: usize, classes: usize) -> Self {
        Self {
            channels,
            feature_dim,
            d_proj: feature_dim,
            heads,
            d_attn,
            d_hidden: 2 * heads * d_attn,
            d_out: feature_dim,
            classes,
            dropout: 0.3,
            lambda_recon: 1.0,
            gamma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Dims(m.to_string()));
        if self.channels < 2 || self.feature_dim < 1 || self.classes < 1 {
            return bad("need channels >= 2, feature_dim >= 1, classes >= 1");
        }
        if self.d_proj < 1 || self.heads < 1 || self.d_attn < 1 || self.d_hidden < 1 || self.d_out < 1 {
            return bad("d_proj, heads, d_attn, d_hidden, d_out must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lambda_recon > 0.0) || !(self.gamma >= 0.0) {
            return bad("lambda_recon must be > 0 and gamma >= 0");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data)
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Initial parameters: Glorot-uniform weights, zero biases, coefficient banks
/// at 0.01.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ParamSet, LearnerError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (dims.channels, dims.feature_dim);
    let mut p = ParamSet::new();
    p.insert(THETA_SPA, glorot(&mut rng, d, dims.d_proj))?;
    p.insert(THETA_TEM, glorot(&mut rng, d, dims.d_proj))?;
    let bank = CoefficientBank::constant(n, 0.01);
    p.insert(P_SPA, bank.spa)?;
    p.insert(P_TEM, bank.tem)?;
    for h in 0..dims.heads {
        p.insert(query_name(h), glorot(&mut rng, d, dims.d_attn))?;
        p.insert(key_name(h), glorot(&mut rng, d, dims.d_attn))?;
        p.insert(value_name(h), glorot(&mut rng, d, dims.d_attn))?;
    }
    let cat = dims.heads * dims.d_attn;
    p.insert(MLP_W1, glorot(&mut rng, cat, dims.d_hidden))?;
    p.insert(MLP_B1, Matrix::zeros(1, dims.d_hidden))?;
    p.insert(MLP_W2, glorot(&mut rng, dims.d_hidden, dims.d_out))?;
    p.insert(MLP_B2, Matrix::zeros(1, dims.d_out))?;
    p.insert(CLS_W, glorot(&mut rng, dims.d_out, dims.classes))?;
    p.insert(CLS_B, Matrix::zeros(1, dims.classes))?;
    Ok(p)
}

/// Coarse parameter group of a parameter name, used for reporting.
pub fn param_group(name: &str) -> String {
    match name {
        THETA_SPA | THETA_TEM => "projection".into(),
        P_SPA | P_TEM => "coefficients".into(),
        MLP_W1 | MLP_B1 | MLP_W2 | MLP_B2 => "mlp".into(),
        CLS_W | CLS_B => "classifier".into(),
        n if n.starts_with("att_q") => "attention_q".into(),
        n if n.starts_with("att_k") => "attention_k".into(),
        n if n.starts_with("att_v") => "attention_v".into(),
        other => other.into(),
    }
}

fn get<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Matrix, LearnerError> {
    params
        .get(name)
        .ok_or_else(|| LearnerError::Autodiff(AutodiffError::UnknownParam(name.to_string())))
}

/// Per-head query, key and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
}

impl AttentionParams {
    pub fn from_params(params: &ParamSet, dims: &ModelDims) -> Result<Self, LearnerError> {
        let collect = |f: fn(usize) -> String| -> Result<Vec<Matrix>, LearnerError> {
            (0..dims.heads).map(|h| get(params, &f(h)).cloned()).collect()
        };
        Ok(Self {
            query: collect(query_name)?,
            key: collect(key_name)?,
            value: collect(value_name)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

/// MLP and classifier weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

impl HeadParams {
    pub fn from_params(params: &ParamSet) -> Result<Self, LearnerError> {
        Ok(Self {
            w1: get(params, MLP_W1)?.clone(),
            b1: get(params, MLP_B1)?.clone(),
            w2: get(params, MLP_W2)?.clone(),
            b2: get(params, MLP_B2)?.clone(),
            cls_w: get(params, CLS_W)?.clone(),
            cls_b: get(params, CLS_B)?.clone(),
        })
    }
}

pub fn bank_from_params(params: &ParamSet) -> Result<CoefficientBank, LearnerError> {
    Ok(CoefficientBank {
        spa: get(params, P_SPA)?.clone(),
        tem: get(params, P_TEM)?.clone(),
    })
}

pub fn projection_from_params(params: &ParamSet, dims: &ModelDims) -> Result<ProjectionParams, LearnerError> {
    Ok(ProjectionParams {
        theta_spa: get(params, THETA_SPA)?.clone(),
        theta_tem: get(params, THETA_TEM)?.clone(),
        lambda: dims.lambda_recon,
        gamma: dims.gamma,
    })
}

fn row_times(x: &[f64], m: &Matrix) -> Result<Vec<f64>, LearnerError> {
    if x.len() != m.rows() {
        return Err(LearnerError::Shape(format!(
            "vector of {} times {:?}",
            x.len(),
            m.shape()
        )));
    }
    Ok((0..m.cols())
        .map(|k| x.iter().enumerate().map(|(j, &v)| v * m.get(j, k)).sum())
        .collect())
}

/// Scaled dot-product score `(x·Q)·(E·K)ᵀ / √d_a`.
pub fn attention_score(x: &[f64], e: &[f64], q: &Matrix, k: &Matrix) -> Result<f64, LearnerError> {
    if q.shape() != k.shape() {
        return Err(LearnerError::Shape(format!("Q {:?} vs K {:?}", q.shape(), k.shape())));
    }
    let xq = row_times(x, q)?;
    let ek = row_times(e, k)?;
    let dot: f64 = xq.iter().zip(&ek).map(|(a, b)| a * b).sum();
    Ok(dot / (q.cols() as f64).sqrt())
}

/// Softmax over the spatial/temporal score pair.
pub fn attention_weights(score_spa: f64, score_tem: f64) -> (f64, f64) {
    let m = score_spa.max(score_tem);
    let a = (score_spa - m).exp();
    let b = (score_tem - m).exp();
    (a / (a + b), b / (a + b))
}

/// Concatenated per-head attention outputs of node `v`, before the MLP.
pub fn attended_features(
    v: usize,
    snapshot: &HypergraphSnapshot,
    att: &AttentionParams,
) -> Result<Vec<f64>, LearnerError> {
    let x = snapshot.nodes.features.row(v);
    let e_spa = hyperedge_embedding(snapshot, snapshot.spatial_edge(v))?;
    let e_tem = hyperedge_embedding(snapshot, snapshot.temporal_edge(v))?;
    let mut out = Vec::new();
    for h in 0..att.heads() {
        let s_spa = attention_score(x, &e_spa, &att.query[h], &att.key[h])?;
        let s_tem = attention_score(x, &e_tem, &att.query[h], &att.key[h])?;
        let (w_spa, w_tem) = attention_weights(s_spa, s_tem);
        let v_spa = row_times(&e_spa, &att.value[h])?;
        let v_tem = row_times(&e_tem, &att.value[h])?;
        out.extend(v_spa.iter().zip(&v_tem).map(|(a, b)| w_spa * a + w_tem * b));
    }
    Ok(out)
}

/// Final embedding of node `v` (dropout off).
pub fn node_update(
    v: usize,
    snapshot: &HypergraphSnapshot,
    att: &AttentionParams,
    head: &HeadParams,
) -> Result<Vec<f64>, LearnerError> {
    let a = attended_features(v, snapshot, att)?;
    let hidden: Vec<f64> = row_times(&a, &head.w1)?
        .into_iter()
        .zip(head.b1.as_slice())
        .map(|(x, b)| (x + b).max(0.0))
        .collect();
    Ok(row_times(&hidden, &head.w2)?
        .into_iter()
        .zip(head.b2.as_slice())
        .map(|(x, b)| x + b)
        .collect())
}

/// Mean of node embeddings.
pub fn graph_pool(node_embeddings: &[Vec<f64>]) -> Result<Vec<f64>, LearnerError> {
    let first = node_embeddings.first().ok_or(LearnerError::Empty("graph_pool"))?;
    let mut acc = vec![0.0; first.len()];
    for z in node_embeddings {
        if z.len() != acc.len() {
            return Err(LearnerError::Shape("ragged node embeddings".into()));
        }
        for (a, v) in acc.iter_mut().zip(z) {
            *a += v;
        }
    }
    let n = node_embeddings.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Logits `Z·W + b` and the predicted class.
pub fn classify(z: &[f64], head: &HeadParams) -> Result<(Vec<f64>, usize), LearnerError> {
    let logits: Vec<f64> = row_times(z, &head.cls_w)?
        .into_iter()
        .zip(head.cls_b.as_slice())
        .map(|(x, b)| x + b)
        .collect();
    let pred = argmax(&logits);
    Ok((logits, pred))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Full forward pass through the direct (non-tape) path.
pub fn forward_direct(
    sample: &PairSample,
    params: &ParamSet,
    dims: &ModelDims,
) -> Result<(Vec<f64>, f64), LearnerError> {
    let bank = bank_from_params(params)?;
    let proj = projection_from_params(params, dims)?;
    let att = AttentionParams::from_params(params, dims)?;
    let head = HeadParams::from_params(params)?;
    let (snap, recon) = crate::hypergraph::build_snapshot(sample, &bank, &proj)?;
    let z: Vec<Vec<f64>> = (0..snap.nodes.features.rows())
        .map(|v| node_update(v, &snap, &att, &head))
        .collect::<Result<_, _>>()?;
    let pooled = graph_pool(&z)?;
    Ok((classify(&pooled, &head)?.0, recon))
}

/// Tape handles for one window.
pub struct RecordedForward {
    pub logits: Var,
    pub recon: Var,
    pub node_embeddings: Var,
}

/// Records the forward pass of one window of node features `x` (`2N × d`).
pub fn record_forward<S: Scalar>(
    tape: &mut Tape<S>,
    topo: &Topology,
    dims: &ModelDims,
    x: Var,
) -> Result<RecordedForward, AutodiffError> {
    let hg = record_hypergraph(tape, topo, x, dims.lambda_recon, dims.gamma)?;
    let inv_sqrt = 1.0 / (dims.d_attn as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let q = tape.param(&query_name(h))?;
        let k = tape.param(&key_name(h))?;
        let v = tape.param(&value_name(h))?;
        let xq = tape.matmul(x, q)?;
        let mut scores = Vec::with_capacity(2);
        let mut values = Vec::with_capacity(2);
        for e in [hg.e_spa, hg.e_tem] {
            let ek = tape.matmul(e, k)?;
            let prod = tape.mul(xq, ek)?;
            let s = tape.row_sum(prod)?;
            scores.push(tape.scale(s, inv_sqrt)?);
            values.push(tape.matmul(e, v)?);
        }
        let s = tape.concat_cols(&scores)?;
        let w = tape.softmax_rows(s)?;
        let w_spa = tape.slice_cols(w, 0, 1)?;
        let w_tem = tape.slice_cols(w, 1, 2)?;
        let a = tape.mul_rows(values[0], w_spa)?;
        let b = tape.mul_rows(values[1], w_tem)?;
        heads.push(tape.add(a, b)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let w1 = tape.param(MLP_W1)?;
    let b1 = tape.param(MLP_B1)?;
    let w2 = tape.param(MLP_W2)?;
    let b2 = tape.param(MLP_B2)?;
    let hidden = tape.matmul(cat, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.relu(hidden)?;
    let hidden = tape.dropout(hidden, dims.dropout)?;
    let z = tape.matmul(hidden, w2)?;
    let z = tape.add_row(z, b2)?;
    let pooled = tape.mean_rows(z)?;
    let cw = tape.param(CLS_W)?;
    let cb = tape.param(CLS_B)?;
    let logits = tape.matmul(pooled, cw)?;
    let logits = tape.add_row(logits, cb)?;
    Ok(RecordedForward {
        logits,
        recon: hg.recon,
        node_embeddings: z,
    })
}

/// Per-task loss on a batch: `lambda_mix · mean(recon) + (1 − lambda_mix) · mean(CE)`.
pub struct TaskLoss<'a> {
    pub samples: Vec<&'a PairSample>,
    pub dims: &'a ModelDims,
    pub lambda_mix: f64,
}

impl<'a> TaskLoss<'a> {
    pub fn new(samples: &'a [PairSample], dims: &'a ModelDims, lambda_mix: f64) -> Self {
        Self {
            samples: samples.iter().collect(),
            dims,
            lambda_mix,
        }
    }
}

impl Computation for TaskLoss<'_> {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>) -> Result<Var, AutodiffError> {
        if self.samples.is_empty() {
            return Err(AutodiffError::InvalidArgument("empty batch".into()));
        }
        let topo = Topology::new(self.dims.channels);
        let mut recon_sum: Option<Var> = None;
        let mut ce_sum: Option<Var> = None;
        for s in &self.samples {
            if s.features.shape() != (2 * self.dims.channels, self.dims.feature_dim) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "task_loss",
                    lhs: s.features.shape(),
                    rhs: (2 * self.dims.channels, self.dims.feature_dim),
                });
            }
            if s.label >= self.dims.classes {
                return Err(AutodiffError::InvalidArgument(format!(
                    "label {} >= classes {}",
                    s.label, self.dims.classes
                )));
            }
            let x = tape.constant(&s.features);
            let fwd = record_forward(tape, &topo, self.dims, x)?;
            let logp = tape.log_softmax_rows(fwd.logits)?;
            let pick = tape.gather(
                logp,
                std::sync::Arc::new(crate::autodiff::GatherMap {
                    rows: 1,
                    cols: 1,
                    src: vec![Some(s.label)],
                }),
            )?;
            recon_sum = Some(match recon_sum {
                Some(a) => tape.add(a, fwd.recon)?,
                None => fwd.recon,
            });
            ce_sum = Some(match ce_sum {
                Some(a) => tape.sub(a, pick)?,
                None => tape.scale(pick, -1.0)?,
            });
        }
        let b = self.samples.len() as f64;
        let recon = tape.scale(recon_sum.expect("non-empty"), self.lambda_mix / b)?;
        let ce = tape.scale(ce_sum.expect("non-empty"), (1.0 - self.lambda_mix) / b)?;
        tape.add(recon, ce)
    }
}

/// Logits of every sample, dropout off.
pub fn logits(params: &ParamSet, dims: &ModelDims, samples: &[PairSample]) -> Result<Vec<Vec<f64>>, LearnerError> {
    let topo = Topology::new(dims.channels);
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new(params);
            let x = tape.constant(&s.features);
            let fwd = record_forward(&mut tape, &topo, dims, x)?;
            Ok(tape.value(fwd.logits).as_slice().to_vec())
        })
        .collect()
}

pub fn predict(params: &ParamSet, dims: &ModelDims, samples: &[PairSample]) -> Result<Vec<usize>, LearnerError> {
    Ok(logits(params, dims, samples)?.iter().map(|l| argmax(l)).collect())
}

/// Fraction of samples classified correctly.
pub fn accuracy(params: &ParamSet, dims: &ModelDims, samples: &[PairSample]) -> Result<f64, LearnerError> {
    if samples.is_empty() {
        return Err(LearnerError::Empty("accuracy"));
    }
    let preds = predict(params, dims, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Deterministic task loss value.
pub fn task_loss(
    samples: &[PairSample],
    params: &ParamSet,
    dims: &ModelDims,
    lambda_mix: f64,
) -> Result<f64, LearnerError> {
    Ok(evaluate(&TaskLoss::new(samples, dims, lambda_mix), params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_score_examples() {
        let eye = Matrix::identity(2);
        let s = attention_score(&[1.0, 0.0], &[1.0, 1.0], &eye, &eye).unwrap();
        assert!((s - 0.70711).abs() < 1e-5);
        assert_eq!(attention_score(&[1.0, 0.0], &[0.0, 3.0], &eye, &eye).unwrap(), 0.0);
        let s2 = attention_score(&[1.0, 0.0], &[2.0, 2.0], &eye, &eye).unwrap();
        assert!((s2 - 2.0 * s).abs() < 1e-15);
    }

    #[test]
    fn attention_weight_examples() {
        assert_eq!(attention_weights(0.3, 0.3), (0.5, 0.5));
        let (a, b) = attention_weights(3f64.ln(), 0.0);
        assert!((a - 0.75).abs() < 1e-15 && (b - 0.25).abs() < 1e-15);
        let (c, d) = attention_weights(3f64.ln() + 7.0, 7.0);
        assert!((a - c).abs() < 1e-15 && (b - d).abs() < 1e-15);
    }

    #[test]
    fn graph_pool_examples() {
        assert_eq!(graph_pool(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(graph_pool(&[vec![3.0], vec![3.0]]).unwrap(), vec![3.0]);
        assert!(graph_pool(&[]).is_err());
    }

    #[test]
    fn classify_tie_break_and_bias() {
        let mut head = HeadParams {
            w1: Matrix::zeros(1, 1),
            b1: Matrix::zeros(1, 1),
            w2: Matrix::zeros(1, 1),
            b2: Matrix::zeros(1, 1),
            cls_w: Matrix::zeros(2, 5),
            cls_b: Matrix::zeros(1, 5),
        };
        let (l, p) = classify(&[0.4, -1.0], &head).unwrap();
        assert_eq!(l, vec![0.0; 5]);
        assert_eq!(p, 0);
        head.cls_b.set(0, 3, 10.0);
        assert_eq!(classify(&[0.4, -1.0], &head).unwrap().1, 3);
        let probs = softmax(&[1.0, -2.0, 0.5]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dims_validation() {
        let mut d = ModelDims::new(3, 4, 2, 2, 3);
        assert!(d.validate().is_ok());
        d.dropout = 1.0;
        assert!(d.validate().is_err());
    }
}
