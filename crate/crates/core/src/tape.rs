//! Recorded reverse-mode differentiation over a single forward pass.
//!
//! Values are computed eagerly as nodes are appended; `backward` walks the
//! record in reverse and accumulates parameter gradients into the store.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub type NodeId = usize;

// Sigmoid clamped so outputs stay strictly inside (0,1) even for huge inputs.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.max(f64::MIN_POSITIVE).min(1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(String),
    /// y = W x + b
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Hadamard { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Sum { x: NodeId },
    SumSquares { x: NodeId },
    /// Mean of scalar nodes.
    Mean { xs: Vec<NodeId> },
    /// cos_j = <W_j / |W_j|, x / |x|> for each row j of W.
    CosineLogits { w: NodeId, x: NodeId },
    /// Additive angular margin cross-entropy on a cosine vector.
    ArcMarginCe { cos: NodeId, label: usize, s: f64, m: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("constant input")?;
        Ok(self.push(Op::Const, value))
    }

    /// Bring a stored parameter onto the tape. Gradients flowing into this
    /// node accumulate into the store on `backward` unless the entry is
    /// frozen.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let entry = store.get(name)?;
        Ok(self.push(Op::Param(name.to_string()), entry.value.clone()))
    }

    /// W x + b with W from `name.W` ([m,n]) and b from `name.b` ([m]).
    pub fn affine(&mut self, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(store, &format!("{name}.W"))?;
        let b = self.param(store, &format!("{name}.b"))?;
        self.affine_nodes(w, b, x)
    }

    pub fn affine_nodes(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.nodes[w].value.shape().to_vec();
        let xs = self.nodes[x].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if ws.len() != 2 || xs.len() != 1 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "affine: W {ws:?}, b {bs:?}, x {xs:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.nodes[w].value.data();
        let xd = self.nodes[x].value.data();
        let bd = self.nodes[b].value.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = bd[i];
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Op::Affine { w, b, x }, Tensor::vector(out)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu { x }, Tensor::vector(out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.nodes[x].value.check_finite("sigmoid input")?;
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| sigmoid(*v)).collect();
        Ok(self.push(Op::Sigmoid { x }, Tensor::vector(out)))
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok((
            self.nodes[a].value.data().to_vec(),
            self.nodes[b].value.data().to_vec(),
        ))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = self.elementwise(a, b, "hadamard")?;
        let out: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Hadamard { a, b }, Tensor::vector(out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = self.elementwise(a, b, "add")?;
        let out: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add { a, b }, Tensor::vector(out)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = self.elementwise(a, b, "sub")?;
        let out: Vec<f64> = ad.iter().zip(&bd).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub { a, b }, Tensor::vector(out)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x].value.data().iter().map(|v| c * v).collect();
        self.push(Op::Scale { x, c }, Tensor::vector(out))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().map(|v| v * v).sum();
        self.push(Op::SumSquares { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("mean over empty node list".into()));
        }
        let mut acc = 0.0;
        for &id in &xs {
            acc += self.nodes[id].value.scalar_value()?;
        }
        let v = acc / xs.len() as f64;
        Ok(self.push(Op::Mean { xs }, Tensor::scalar(v)))
    }

    /// Cosines between a feature vector and every row of a weight matrix,
    /// both L2-normalized.
    pub fn cosine_logits(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.nodes[w].value.shape().to_vec();
        let xs = self.nodes[x].value.shape().to_vec();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::Shape(format!("cosine_logits: W {ws:?}, x {xs:?}")));
        }
        let (c, d) = (ws[0], ws[1]);
        let xd = self.nodes[x].value.data();
        let xn = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xn == 0.0 {
            return Err(Error::Contract("cosine_logits: zero-norm feature".into()));
        }
        let wd = self.nodes[w].value.data();
        let mut out = vec![0.0; c];
        for j in 0..c {
            let row = &wd[j * d..(j + 1) * d];
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn == 0.0 {
                return Err(Error::Contract(format!(
                    "cosine_logits: zero-norm class weight row {j}"
                )));
            }
            let dot: f64 = row.iter().zip(xd).map(|(a, b)| a * b).sum();
            out[j] = dot / (rn * xn);
        }
        Ok(self.push(Op::CosineLogits { w, x }, Tensor::vector(out)))
    }

    /// -log softmax with the true-class logit replaced by s*cos(theta_y + m).
    /// When theta_y + m would pass pi the margin is linearized
    /// (cos(theta) - m*sin(m)) to keep the logit monotone in cos(theta).
    pub fn arc_margin_ce(&mut self, cos: NodeId, label: usize, s: f64, m: f64) -> Result<NodeId> {
        let cd = self.nodes[cos].value.data();
        let c = cd.len();
        if label >= c {
            return Err(Error::Contract(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        if s <= 0.0 || !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
            return Err(Error::Config(format!("arcface: s={s}, m={m} out of range")));
        }
        let logits = arc_logits(cd, label, s, m);
        let loss = neg_log_softmax(&logits, label);
        Ok(self.push(Op::ArcMarginCe { cos, label, s, m }, Tensor::scalar(loss)))
    }

    /// Reverse sweep from a scalar loss node. Parameter gradients accumulate
    /// into `store`; frozen entries are skipped (their accumulators stay as
    /// they were, i.e. zero unless someone wrote to them).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|v| *v == 0.0) {
                grads[id] = g;
                continue;
            }
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(name) => {
                    let entry = store.get_mut(name)?;
                    if !entry.frozen {
                        for (acc, gi) in entry.grad.data_mut().iter_mut().zip(&g) {
                            *acc += gi;
                        }
                    }
                }
                Op::Affine { w, b, x } => {
                    let (w, b, x) = (*w, *b, *x);
                    let n = self.nodes[x].value.len();
                    let m = g.len();
                    let wd = self.nodes[w].value.data().to_vec();
                    let xd = self.nodes[x].value.data().to_vec();
                    for i in 0..m {
                        grads[b][i] += g[i];
                        for j in 0..n {
                            grads[w][i * n + j] += g[i] * xd[j];
                            grads[x][j] += g[i] * wd[i * n + j];
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xd = self.nodes[x].value.data().to_vec();
                    for (j, gi) in g.iter().enumerate() {
                        if xd[j] > 0.0 {
                            grads[x][j] += gi;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let yd = self.nodes[id].value.data().to_vec();
                    for (j, gi) in g.iter().enumerate() {
                        grads[x][j] += gi * yd[j] * (1.0 - yd[j]);
                    }
                }
                Op::Hadamard { a, b } => {
                    let (a, b) = (*a, *b);
                    let ad = self.nodes[a].value.data().to_vec();
                    let bd = self.nodes[b].value.data().to_vec();
                    for (j, gi) in g.iter().enumerate() {
                        grads[a][j] += gi * bd[j];
                        grads[b][j] += gi * ad[j];
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (j, gi) in g.iter().enumerate() {
                        grads[a][j] += gi;
                        grads[b][j] += gi;
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    for (j, gi) in g.iter().enumerate() {
                        grads[a][j] += gi;
                        grads[b][j] -= gi;
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    for (j, gi) in g.iter().enumerate() {
                        grads[x][j] += gi * c;
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    for v in grads[x].iter_mut() {
                        *v += g[0];
                    }
                }
                Op::SumSquares { x } => {
                    let x = *x;
                    let xd = self.nodes[x].value.data().to_vec();
                    for (j, v) in grads[x].iter_mut().enumerate() {
                        *v += 2.0 * g[0] * xd[j];
                    }
                }
                Op::Mean { xs } => {
                    let xs = xs.clone();
                    let inv = 1.0 / xs.len() as f64;
                    for xid in xs {
                        grads[xid][0] += g[0] * inv;
                    }
                }
                Op::CosineLogits { w, x } => {
                    let (w, x) = (*w, *x);
                    let cvals = self.nodes[id].value.data().to_vec();
                    let xd = self.nodes[x].value.data().to_vec();
                    let d = xd.len();
                    let xn = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let xhat: Vec<f64> = xd.iter().map(|v| v / xn).collect();
                    let wd = self.nodes[w].value.data().to_vec();
                    for (j, gj) in g.iter().enumerate() {
                        if *gj == 0.0 {
                            continue;
                        }
                        let row = &wd[j * d..(j + 1) * d];
                        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        for k in 0..d {
                            let what = row[k] / rn;
                            grads[x][k] += gj * (what - cvals[j] * xhat[k]) / xn;
                            grads[w][j * d + k] += gj * (xhat[k] - cvals[j] * what) / rn;
                        }
                    }
                }
                Op::ArcMarginCe { cos, label, s, m } => {
                    let (cos, label, s, m) = (*cos, *label, *s, *m);
                    let cd = self.nodes[cos].value.data().to_vec();
                    let logits = arc_logits(&cd, label, s, m);
                    let probs = softmax(&logits);
                    for (j, pj) in probs.iter().enumerate() {
                        let dl = pj - if j == label { 1.0 } else { 0.0 };
                        let dcos = if j == label {
                            s * arc_margin_derivative(cd[label], m)
                        } else {
                            s
                        };
                        grads[cos][j] += g[0] * dl * dcos;
                    }
                }
            }
            grads[id] = g;
        }
        Ok(())
    }
}

const COS_CLAMP: f64 = 1.0 - 1e-12;

fn arc_logits(cos: &[f64], label: usize, s: f64, m: f64) -> Vec<f64> {
    let mut logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
    let cy = cos[label].clamp(-COS_CLAMP, COS_CLAMP);
    let threshold = (std::f64::consts::PI - m).cos();
    let phi = if cy > threshold {
        cy * m.cos() - (1.0 - cy * cy).sqrt() * m.sin()
    } else {
        cy - m * m.sin()
    };
    logits[label] = s * phi;
    logits
}

fn arc_margin_derivative(cos_y: f64, m: f64) -> f64 {
    let cy = cos_y.clamp(-COS_CLAMP, COS_CLAMP);
    let threshold = (std::f64::consts::PI - m).cos();
    if cy > threshold {
        m.cos() + m.sin() * cy / (1.0 - cy * cy).sqrt()
    } else {
        1.0
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn neg_log_softmax(logits: &[f64], label: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}
