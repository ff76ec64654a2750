//! Exact gradients used by the attribution methods: the classification-head
//! loss gradient and Hessian, a damped SPD solve, and gradients of a class
//! probability with respect to MLP activations.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{backward, forward_tape, Parameters};
use crate::tensor::{dot, norm, Mat};

pub const DEFAULT_DAMPING: f64 = 1e-2;

/// Loss gradient w.r.t. the head parameters, laid out class by class:
/// `[W[0,0..d], b[0], W[1,0..d], b[1], ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient(pub Vec<f64>);

impl HeadGradient {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &HeadGradient) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Row `c` is `(probs[c] - [c == label]) · [hidden; 1]`.
pub fn head_gradient_from(probs: &[f64], last_hidden: &[f64], label: usize) -> HeadGradient {
    let d = last_hidden.len();
    let mut out = Vec::with_capacity(probs.len() * (d + 1));
    for (c, &p) in probs.iter().enumerate() {
        let r = p - if c == label { 1.0 } else { 0.0 };
        out.extend(last_hidden.iter().map(|h| r * h));
        out.push(r);
    }
    HeadGradient(out)
}

pub fn head_gradient(params: &Parameters, tokens: &[u32], label: usize) -> Result<HeadGradient> {
    if label >= params.config.n_classes {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: params.config.n_classes,
        });
    }
    let tape = forward_tape(params, tokens, &vec![None; params.config.n_layers])?;
    Ok(head_gradient_from(&tape.probs, &tape.last_hidden, label))
}

/// Class probabilities and final hidden state of one input; everything the
/// head gradient and Hessian depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub probs: Vec<f64>,
    pub last_hidden: Vec<f64>,
}

pub fn head_state(params: &Parameters, tokens: &[u32]) -> Result<HeadState> {
    let tape = forward_tape(params, tokens, &vec![None; params.config.n_layers])?;
    Ok(HeadState {
        probs: tape.probs,
        last_hidden: tape.last_hidden,
    })
}

/// Dense symmetric matrix over the flattened head parameters, damping
/// already added to the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
    pub damping: f64,
}

impl HessianMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            dim,
            data,
            damping: 1.0,
        }
    }

    pub fn from_dense(dim: usize, data: Vec<f64>, damping: f64) -> Self {
        assert_eq!(data.len(), dim * dim);
        Self { dim, data, damping }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| dot(&self.data[i * self.dim..(i + 1) * self.dim], v))
            .collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.data);
        m.symmetric_eigenvalues().min()
    }

    /// Lower-triangular Cholesky factor.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = self.get(j, j);
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if diag.is_nan() || diag <= 0.0 || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    min_eigenvalue: self.min_eigenvalue(),
                });
            }
            let ljj = diag.sqrt();
            l[j * n + j] = ljj;
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Ok(CholeskyFactor { dim: n, l })
    }
}

#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    l: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L Lᵀ x = v`.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        if v.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: v.len(),
            });
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        Ok(x)
    }
}

/// Solves `H x = v` by Cholesky factorization.
pub fn solve_hvp(h: &HessianMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != h.dim {
        return Err(Error::ShapeMismatch {
            expected: h.dim,
            got: v.len(),
        });
    }
    h.cholesky()?.solve(v)
}

/// Exact Hessian of the mean cross-entropy w.r.t. the head parameters:
/// `(1/N) Σ_a (diag(p_a) - p_a p_aᵀ) ⊗ z_a z_aᵀ + λI` with `z_a = [h_a; 1]`.
pub fn head_hessian_from(states: &[HeadState], damping: f64) -> Result<HessianMatrix> {
    if damping.is_nan() || damping <= 0.0 {
        return Err(Error::InvalidArgument(format!("damping must be > 0, got {damping}")));
    }
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidDataset("Hessian needs at least one instance".into()))?;
    let n_classes = first.probs.len();
    let zdim = first.last_hidden.len() + 1;
    let dim = n_classes * zdim;
    let mut acc = vec![0.0; dim * dim];
    let mut z = vec![0.0; zdim];
    for s in states {
        z[..zdim - 1].copy_from_slice(&s.last_hidden);
        z[zdim - 1] = 1.0;
        for c in 0..n_classes {
            for c2 in c..n_classes {
                let w = if c == c2 { s.probs[c] } else { 0.0 } - s.probs[c] * s.probs[c2];
                if w == 0.0 {
                    continue;
                }
                for i in 0..zdim {
                    let row = c * zdim + i;
                    let j0 = if c == c2 { i } else { 0 };
                    for j in j0..zdim {
                        acc[row * dim + c2 * zdim + j] += w * z[i] * z[j];
                    }
                }
            }
        }
    }
    let inv_n = 1.0 / states.len() as f64;
    let mut data = vec![0.0; dim * dim];
    for r in 0..dim {
        for c in r..dim {
            let mut v = acc[r * dim + c] * inv_n;
            if r == c {
                v += damping;
            }
            data[r * dim + c] = v;
            data[c * dim + r] = v;
        }
    }
    Ok(HessianMatrix { dim, data, damping })
}

pub fn head_hessian(params: &Parameters, train_set: &Dataset, damping: f64) -> Result<HessianMatrix> {
    let states: Vec<HeadState> = train_set
        .instances
        .par_iter()
        .map(|i| head_state(params, &i.tokens()))
        .collect::<Result<_>>()?;
    head_hessian_from(&states, damping)
}

/// Gradient of `probs[target]` w.r.t. layer `layer`'s post-activation MLP
/// values at every position, evaluated with that layer scaled by `scale`.
/// The scaled values are the differentiation variables.
pub fn prob_grad_wrt_activations(
    params: &Parameters,
    tokens: &[u32],
    layer: usize,
    target: usize,
    scale: f64,
) -> Result<ProbGrad> {
    let cfg = &params.config;
    if layer >= cfg.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} layers",
            cfg.n_layers
        )));
    }
    if target >= cfg.n_classes {
        return Err(Error::LabelOutOfRange {
            label: target,
            n_classes: cfg.n_classes,
        });
    }
    if !(0.0..=1.0).contains(&scale) {
        return Err(Error::InvalidArgument(format!("scale {scale} outside [0,1]")));
    }
    let mut mults = vec![None; cfg.n_layers];
    mults[layer] = Some(vec![scale; cfg.d_mlp]);
    let tape = forward_tape(params, tokens, &mults)?;
    let p = &tape.probs;
    // d p_t / d logit_j = p_t (δ_tj - p_j)
    let d_logits: Vec<f64> = (0..cfg.n_classes)
        .map(|j| p[target] * (if j == target { 1.0 } else { 0.0 } - p[j]))
        .collect();
    let out = backward(params, &tape, &d_logits, false, Some(layer));
    Ok(ProbGrad {
        prob: p[target],
        grad: out.d_act[layer].clone().expect("layer reached"),
    })
}

#[derive(Debug, Clone)]
pub struct ProbGrad {
    /// `probs[target]` at the evaluated point.
    pub prob: f64,
    /// `[seq × d_mlp]`
    pub grad: Mat,
}

/// Position-summed version of [`prob_grad_wrt_activations`].
pub fn prob_grad_wrt_neurons(
    params: &Parameters,
    tokens: &[u32],
    layer: usize,
    target: usize,
    scale: f64,
) -> Result<Vec<f64>> {
    let g = prob_grad_wrt_activations(params, tokens, layer, target, scale)?.grad;
    let mut out = vec![0.0; g.cols];
    for t in 0..g.rows {
        for (o, v) in out.iter_mut().zip(g.row(t)) {
            *o += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_class_head_gradient() {
        let g = head_gradient_from(&[0.5, 0.5], &[1.0, 0.0], 0);
        assert_eq!(g.0, vec![-0.5, 0.0, -0.5, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let g = head_gradient_from(&[0.0, 1.0, 0.0], &[0.3, -2.0], 1);
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_class_hessian_block() {
        // One instance, p = [0.5, 0.5], hidden h = [] so z = [1].
        let states = [HeadState {
            probs: vec![0.5, 0.5],
            last_hidden: vec![],
        }];
        let h = head_hessian_from(&states, 0.1).unwrap();
        assert_eq!(h.data, vec![0.35, -0.25, -0.25, 0.35]);
    }

    #[test]
    fn one_hot_probabilities_leave_only_damping() {
        let states = [
            HeadState {
                probs: vec![1.0, 0.0],
                last_hidden: vec![0.4, -1.0],
            },
            HeadState {
                probs: vec![0.0, 1.0],
                last_hidden: vec![2.0, 0.5],
            },
        ];
        let h = head_hessian_from(&states, 1.0).unwrap();
        assert_eq!(h, HessianMatrix::identity(6));
    }

    #[test]
    fn solve_reference_cases() {
        let v = [3.0, -1.5, 0.25];
        assert_eq!(solve_hvp(&HessianMatrix::identity(3), &v).unwrap(), v.to_vec());
        let two = HessianMatrix::from_dense(2, vec![2.0, 0.0, 0.0, 2.0], 1.0);
        let x = solve_hvp(&two, &[4.0, 6.0]).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_reports_eigenvalue() {
        let m = HessianMatrix::from_dense(2, vec![1.0, 2.0, 2.0, 1.0], 0.0);
        match solve_hvp(&m, &[1.0, 1.0]) {
            Err(Error::NotPositiveDefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_damping_is_rejected() {
        let states = [HeadState {
            probs: vec![0.5, 0.5],
            last_hidden: vec![1.0],
        }];
        assert!(head_hessian_from(&states, 0.0).is_err());
    }
}
