//! Forward pass, losses and hand-derived gradients.
//!
//! Per bag with instance features X (M × D):
//!
//! ```text
//! h   = act(X·H + b_H)                         projected instances, M × L
//! s_j = wᵀ(tanh(h_j V) ⊙ sigm(h_j U)),  a = softmax(s)
//! b   = Σ_j a_j h_j,  logits = b·C + b_C,  ce = −ln softmax(logits)[label]
//! d_jc = ‖h_j − p_c‖,  z_j = softmax(−d_j / τ)
//! y_j  = a_norm_j · e_label + (1 − a_norm_j) · e_neg
//! kld  = mean_j Σ_c y_jc ln(y_jc / max(z_jc, ε))
//! total = ce + λ·kld
//! ```
//!
//! `a_norm` is a constant inside the KLD term: no gradient flows from the
//! pseudo labels back into the attention branch.

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParams};
use crate::model::strategies::Activation;
use crate::numerics::{axpy, dot, euclidean_distance, log_sum_exp, sigmoid, softmax, Matrix, Vector};

pub const KLD_EPS: f64 = 1e-12;

/// Row-sum tolerance accepted by [`kld_loss`].
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTrace {
    /// M × (K+1) instance-to-prototype distances.
    pub d: Matrix,
    /// M × (K+1) softmax(−d/τ).
    pub z: Matrix,
    /// M × (K+1) soft pseudo labels.
    pub y: Matrix,
    /// Attention normalized for pseudo labels, each in [0, 1].
    pub a_norm: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// M × L projector pre-activation.
    pub pre: Matrix,
    /// M × L projected embeddings.
    pub h: Matrix,
    /// M × A tanh branch.
    pub attn_tanh: Matrix,
    /// M × A sigmoid gate.
    pub attn_gate: Matrix,
    /// Attention logits before softmax.
    pub scores: Vector,
    /// Attention weights, sum to 1.
    pub a: Vector,
    /// Bag embedding, length L.
    pub b: Vector,
    pub bag_logits: Vector,
    /// Present only when the prototype module is enabled.
    pub prototype: Option<PrototypeTrace>,
}

impl ForwardTrace {
    pub fn prediction(&self) -> usize {
        crate::numerics::argmax(&self.bag_logits)
    }

    pub fn probabilities(&self) -> Vector {
        softmax(&self.bag_logits).expect("logits are finite and non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kld: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
    }
    Ok(())
}

/// Returns (pre-activation, activation) for the projector.
pub fn project(
    params: &ModelParams,
    activation: &dyn Activation,
    features: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if features.cols() != params.projector_w.rows() {
        return Err(Error::DimensionMismatch {
            context: "project",
            expected: params.projector_w.rows(),
            actual: features.cols(),
        });
    }
    let mut pre = features.matmul(&params.projector_w)?;
    pre.add_row_broadcast(params.projector_b.data())?;
    let mut h = pre.clone();
    for x in h.data_mut() {
        *x = activation.apply(*x);
    }
    Ok((pre, h))
}

pub struct AttentionOutput {
    pub tanh: Matrix,
    pub gate: Matrix,
    pub scores: Vector,
    pub a: Vector,
}

/// Gated attention over the instances of one bag.
pub fn attention_scores(params: &ModelParams, h: &Matrix) -> Result<AttentionOutput> {
    if h.rows() == 0 {
        return Err(Error::EmptyVector);
    }
    let mut tanh = h.matmul(&params.attention_v)?;
    let mut gate = h.matmul(&params.attention_u)?;
    tanh.data_mut().iter_mut().for_each(|x| *x = x.tanh());
    gate.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
    let w = params.attention_w.data();
    let scores: Vector = tanh
        .row_iter()
        .zip(gate.row_iter())
        .map(|(t, g)| t.iter().zip(g).zip(w).map(|((t, g), w)| w * t * g).sum())
        .collect();
    let a = softmax(&scores)?;
    Ok(AttentionOutput { tanh, gate, scores, a })
}

/// Attention-weighted bag embedding and class logits.
pub fn aggregate_and_classify(params: &ModelParams, h: &Matrix, a: &[f64]) -> Result<(Vector, Vector)> {
    if a.len() != h.rows() {
        return Err(Error::DimensionMismatch {
            context: "aggregate_and_classify",
            expected: h.rows(),
            actual: a.len(),
        });
    }
    let sum: f64 = a.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("attention sums to {sum}, expected 1")));
    }
    let mut b = vec![0.0; h.cols()];
    for (aj, row) in a.iter().zip(h.row_iter()) {
        axpy(*aj, row, &mut b);
    }
    let bm = Matrix::row_vector(b);
    let mut logits = bm.matmul(&params.classifier_w)?;
    logits.add_row_broadcast(params.classifier_b.data())?;
    Ok((bm.into_data(), logits.into_data()))
}

pub fn cross_entropy(bag_logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, bag_logits.len())?;
    Ok((log_sum_exp(bag_logits)? - bag_logits[label]).max(0.0))
}

pub fn prototype_distances(params: &ModelParams, h: &Matrix) -> Result<Matrix> {
    let p = &params.prototypes;
    if p.cols() != h.cols() {
        return Err(Error::DimensionMismatch {
            context: "prototype_distances",
            expected: p.cols(),
            actual: h.cols(),
        });
    }
    let mut d = Matrix::zeros(h.rows(), p.rows());
    for j in 0..h.rows() {
        for c in 0..p.rows() {
            d.set(j, c, euclidean_distance(h.row(j), p.row(c))?);
        }
    }
    Ok(d)
}

/// softmax(−d/τ): closer prototypes get larger probability.
pub fn prototype_logits(d_row: &[f64], temperature: f64) -> Result<Vector> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let neg: Vector = d_row.iter().map(|d| -d / temperature).collect();
    softmax(&neg)
}

/// Pseudo label over K+1 entries (index K is the negative class).
pub fn soft_pseudo_labels(a_norm: f64, bag_label: usize, num_classes: usize) -> Result<Vector> {
    check_label(bag_label, num_classes)?;
    if !(0.0..=1.0).contains(&a_norm) {
        return Err(Error::invalid(format!(
            "normalized attention {a_norm} outside [0, 1]"
        )));
    }
    let mut y = vec![0.0; num_classes + 1];
    y[bag_label] = a_norm;
    y[num_classes] = 1.0 - a_norm;
    Ok(y)
}

/// Mean over rows of KL(y ‖ z), with z clamped below at [`KLD_EPS`].
pub fn kld_loss(y: &Matrix, z: &Matrix) -> Result<f64> {
    if y.shape() != z.shape() {
        return Err(Error::DimensionMismatch {
            context: "kld_loss",
            expected: y.rows() * y.cols(),
            actual: z.rows() * z.cols(),
        });
    }
    if y.rows() == 0 {
        return Err(Error::EmptyVector);
    }
    let mut total = 0.0;
    for (yr, zr) in y.row_iter().zip(z.row_iter()) {
        for (name, r) in [("y", yr), ("z", zr)] {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("{name} row sums to {s}, expected 1")));
            }
        }
        for (&yc, &zc) in yr.iter().zip(zr) {
            if yc > 0.0 {
                total += yc * (yc / zc.max(KLD_EPS)).ln();
            }
        }
    }
    Ok((total / y.rows() as f64).max(0.0))
}

fn check_inputs(config: &ModelConfig, features: &Matrix, label: usize) -> Result<()> {
    check_label(label, config.num_classes)?;
    if features.cols() != config.feature_dim {
        return Err(Error::DimensionMismatch {
            context: "bag features",
            expected: config.feature_dim,
            actual: features.cols(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::EmptyVector);
    }
    Ok(())
}

/// Full forward pass and loss for one bag.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Matrix,
    label: usize,
) -> Result<(ForwardTrace, LossBreakdown)> {
    forward_with_pseudo(params, config, features, label, None)
}

/// Forward pass with an optional fixed `a_norm` for the pseudo labels.
///
/// Supplying `a_norm` freezes the pseudo labels, which is how the detached
/// pseudo-label loss is probed by finite differences.
pub fn forward_with_pseudo(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Matrix,
    label: usize,
    a_norm_override: Option<&[f64]>,
) -> Result<(ForwardTrace, LossBreakdown)> {
    check_inputs(config, features, label)?;
    let (pre, h) = project(params, config.activation.as_ref(), features)?;
    let att = attention_scores(params, &h)?;
    let (b, bag_logits) = aggregate_and_classify(params, &h, &att.a)?;
    let ce = cross_entropy(&bag_logits, label)?;

    let (prototype, kld) = if config.prototype_module {
        let m = h.rows();
        let k1 = config.num_classes + 1;
        let d = prototype_distances(params, &h)?;
        let mut z = Matrix::zeros(m, k1);
        for j in 0..m {
            z.row_mut(j)
                .copy_from_slice(&prototype_logits(d.row(j), config.temperature)?);
        }
        let a_norm = match a_norm_override {
            Some(v) if v.len() == m => v.to_vec(),
            Some(v) => {
                return Err(Error::DimensionMismatch {
                    context: "a_norm override",
                    expected: m,
                    actual: v.len(),
                })
            }
            None => config.normalization.normalize(&att.a),
        };
        let mut y = Matrix::zeros(m, k1);
        for (j, &an) in a_norm.iter().enumerate() {
            y.row_mut(j)
                .copy_from_slice(&soft_pseudo_labels(an, label, config.num_classes)?);
        }
        let kld = kld_loss(&y, &z)?;
        (Some(PrototypeTrace { d, z, y, a_norm }), kld)
    } else {
        (None, 0.0)
    };

    let loss = LossBreakdown {
        ce,
        kld,
        lambda: config.lambda,
        total: ce + config.lambda * kld,
    };
    let trace = ForwardTrace {
        pre,
        h,
        attn_tanh: att.tanh,
        attn_gate: att.gate,
        scores: att.scores,
        a: att.a,
        b,
        bag_logits,
        prototype,
    };
    Ok((trace, loss))
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: ModelParams,
    pub trace: ForwardTrace,
    pub loss: LossBreakdown,
}

/// Gradients of `total` with respect to every parameter tensor.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Matrix,
    label: usize,
) -> Result<BackwardOutput> {
    backward_with_pseudo(params, config, features, label, None)
}

pub fn backward_with_pseudo(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Matrix,
    label: usize,
    a_norm_override: Option<&[f64]>,
) -> Result<BackwardOutput> {
    let (trace, loss) = forward_with_pseudo(params, config, features, label, a_norm_override)?;
    let m = trace.h.rows();
    let l = trace.h.cols();
    let k = config.num_classes;
    let mut g = ModelParams::zeros(config);

    // Classifier.
    let mut dlogits = softmax(&trace.bag_logits)?;
    dlogits[label] -= 1.0;
    for (i, &bi) in trace.b.iter().enumerate() {
        axpy(bi, &dlogits, g.classifier_w.row_mut(i));
    }
    g.classifier_b.data_mut().copy_from_slice(&dlogits);
    let db: Vector = (0..l).map(|i| dot(params.classifier_w.row(i), &dlogits)).collect();

    // Aggregation b = Σ a_j h_j.
    let mut dh = Matrix::zeros(m, l);
    for j in 0..m {
        axpy(trace.a[j], &db, dh.row_mut(j));
    }
    let da: Vector = trace.h.row_iter().map(|hj| dot(hj, &db)).collect();

    // Attention softmax and gated branches.
    let mean_da: f64 = trace.a.iter().zip(&da).map(|(a, d)| a * d).sum();
    let ds: Vector = trace.a.iter().zip(&da).map(|(a, d)| a * (d - mean_da)).collect();
    let a_dim = params.attention_w.cols();
    let w = params.attention_w.data();
    let mut d_pre_v = Matrix::zeros(m, a_dim);
    let mut d_pre_u = Matrix::zeros(m, a_dim);
    for j in 0..m {
        let t = trace.attn_tanh.row(j);
        let gt = trace.attn_gate.row(j);
        for c in 0..a_dim {
            g.attention_w.data_mut()[c] += ds[j] * t[c] * gt[c];
            let dt = ds[j] * w[c] * gt[c];
            let dg = ds[j] * w[c] * t[c];
            d_pre_v.set(j, c, dt * (1.0 - t[c] * t[c]));
            d_pre_u.set(j, c, dg * gt[c] * (1.0 - gt[c]));
        }
    }
    g.attention_v = trace.h.t_matmul(&d_pre_v)?;
    g.attention_u = trace.h.t_matmul(&d_pre_u)?;
    let via_v = d_pre_v.matmul_t(&params.attention_v)?;
    let via_u = d_pre_u.matmul_t(&params.attention_u)?;
    for ((x, v), u) in dh.data_mut().iter_mut().zip(via_v.data()).zip(via_u.data()) {
        *x += v + u;
    }

    // Prototype branch, scaled by λ.
    if let Some(pt) = &trace.prototype {
        let scale = config.lambda / m as f64;
        let k1 = k + 1;
        for j in 0..m {
            let y = pt.y.row(j);
            let z = pt.z.row(j);
            // ∂(Σ y ln(y / max(z, ε)))/∂z_c, zero where the clamp is active.
            let dz: Vector = (0..k1)
                .map(|c| if y[c] > 0.0 && z[c] >= KLD_EPS { -y[c] / z[c] } else { 0.0 })
                .collect();
            let zdz: f64 = z.iter().zip(&dz).map(|(z, d)| z * d).sum();
            for c in 0..k1 {
                let du = z[c] * (dz[c] - zdz);
                let dd = -du / config.temperature * scale;
                let dist = pt.d.get(j, c);
                if dd == 0.0 || dist <= 0.0 {
                    continue;
                }
                let coef = dd / dist;
                let hj = trace.h.row(j);
                let pc = params.prototypes.row(c);
                for i in 0..l {
                    let diff = hj[i] - pc[i];
                    dh.data_mut()[j * l + i] += coef * diff;
                    g.prototypes.data_mut()[c * l + i] -= coef * diff;
                }
            }
        }
    }

    // Projector.
    let act = config.activation.as_ref();
    for (x, &p) in dh.data_mut().iter_mut().zip(trace.pre.data()) {
        *x *= act.derivative(p);
    }
    g.projector_w = features.t_matmul(&dh)?;
    g.projector_b = Matrix::row_vector(dh.column_sums());

    g.ensure_finite()?;
    Ok(BackwardOutput { grads: g, trace, loss })
}
