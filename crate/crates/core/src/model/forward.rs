//! Forward pass with activation capture, and reverse-mode differentiation
//! over the recorded tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Activation, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, softmax, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl std::fmt::Display for NeuronId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}.{}", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionMode {
    /// Listed neurons get their action, everything else is untouched.
    Denylist,
    /// Listed neurons get their action, every other MLP neuron is zeroed.
    Allowlist,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeuronAction {
    Zero,
    Scale(f64),
}

impl NeuronAction {
    fn factor(self) -> f64 {
        match self {
            NeuronAction::Zero => 0.0,
            NeuronAction::Scale(a) => a,
        }
    }
}

/// Declarative override of post-activation MLP values, applied at every
/// token position.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    pub mode: InterventionMode,
    pub entries: BTreeMap<NeuronId, NeuronAction>,
}

impl InterventionSpec {
    pub fn identity() -> Self {
        Self {
            mode: InterventionMode::Denylist,
            entries: BTreeMap::new(),
        }
    }

    /// Zero the given neurons.
    pub fn deny<I: IntoIterator<Item = NeuronId>>(neurons: I) -> Self {
        Self {
            mode: InterventionMode::Denylist,
            entries: neurons.into_iter().map(|n| (n, NeuronAction::Zero)).collect(),
        }
    }

    /// Keep only the given neurons.
    pub fn allow<I: IntoIterator<Item = NeuronId>>(neurons: I) -> Self {
        Self {
            mode: InterventionMode::Allowlist,
            entries: neurons
                .into_iter()
                .map(|n| (n, NeuronAction::Scale(1.0)))
                .collect(),
        }
    }

    /// Per-layer unit multipliers; `None` means the layer is untouched.
    pub(crate) fn multipliers(&self, n_layers: usize, d_mlp: usize) -> Result<Vec<Option<Vec<f64>>>> {
        for n in self.entries.keys() {
            if n.layer >= n_layers || n.unit >= d_mlp {
                return Err(Error::InvalidArgument(format!(
                    "neuron {n} outside {n_layers} layers x {d_mlp} units"
                )));
            }
        }
        let default = match self.mode {
            InterventionMode::Denylist => 1.0,
            InterventionMode::Allowlist => 0.0,
        };
        let mut out: Vec<Option<Vec<f64>>> = match self.mode {
            InterventionMode::Denylist => vec![None; n_layers],
            InterventionMode::Allowlist => vec![Some(vec![default; d_mlp]); n_layers],
        };
        for (n, action) in &self.entries {
            let layer = out[n.layer].get_or_insert_with(|| vec![default; d_mlp]);
            layer[n.unit] = action.factor();
        }
        Ok(out)
    }
}

/// Everything an attribution method needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, post-activation (and post-intervention) MLP values `[seq × d_mlp]`.
    pub mlp_acts: Vec<Mat>,
    /// Final token's hidden state after the final normalization.
    pub last_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

pub(crate) struct LayerCache {
    xhat1: Mat,
    rstd1: Vec<f64>,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    att: Vec<Mat>,
    ctx: Mat,
    xhat2: Mat,
    rstd2: Vec<f64>,
    b: Mat,
    pre: Mat,
    mult: Option<Vec<f64>>,
    act: Mat,
}

pub(crate) struct Tape {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: f64,
    pub last_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Tape {
    pub(crate) fn into_trace(self) -> ForwardTrace {
        let predicted = argmax(&self.probs);
        ForwardTrace {
            mlp_acts: self.layers.into_iter().map(|l| l.act).collect(),
            last_hidden: self.last_hidden,
            logits: self.logits,
            probs: self.probs,
            predicted,
        }
    }

    pub(crate) fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

fn ln_forward(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, Mat, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut y = Mat::zeros(rows, cols);
    let mut xhat = Mat::zeros(rows, cols);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        for c in 0..cols {
            let h = (row[c] - mean) * rstd;
            xhat.data[r * cols + c] = h;
            y.data[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstds)
}

/// Returns dx for one row; accumulates gain/bias grads when given.
fn ln_backward_row(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    if let Some((dg, db)) = grads {
        for c in 0..dy.len() {
            dg[c] += dy[c] * xhat[c];
            db[c] += dy[c];
        }
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, xhat) / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, h)| rstd * (d - mean_d - h * mean_dx))
        .collect()
}

fn ln_backward(
    dy: &Mat,
    xhat: &Mat,
    rstd: &[f64],
    gain: &[f64],
    mut grads: Option<(&mut Mat, &mut Mat)>,
) -> Mat {
    let mut dx = Mat::zeros_like(dy);
    for r in 0..dy.rows {
        let g = grads
            .as_mut()
            .map(|(dg, db)| (dg.data.as_mut_slice(), db.data.as_mut_slice()));
        let row = ln_backward_row(dy.row(r), xhat.row(r), rstd[r], gain, g);
        dx.row_mut(r).copy_from_slice(&row);
    }
    dx
}

pub(crate) fn check_tokens(params: &Parameters, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceLength {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Runs the network recording everything the backward pass needs.
/// `multipliers[l]`, when present, scales layer `l`'s post-activation values
/// unit-wise at every position.
pub(crate) fn forward_tape(
    params: &Parameters,
    tokens: &[u32],
    multipliers: &[Option<Vec<f64>>],
) -> Result<Tape> {
    forward_tape_patched(params, tokens, multipliers, None)
}

type Patch<'p> = (usize, &'p mut dyn FnMut(&mut Mat));

fn forward_tape_patched(
    params: &Parameters,
    tokens: &[u32],
    multipliers: &[Option<Vec<f64>>],
    mut patch: Option<Patch<'_>>,
) -> Result<Tape> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let (t_len, d) = (tokens.len(), cfg.d_model);
    let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let te = params.tok_emb.row(tok as usize);
        let pe = params.pos_emb.row(t);
        for (o, (a, b)) in x.row_mut(t).iter_mut().zip(te.iter().zip(pe)) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let (a, xhat1, rstd1) = ln_forward(&x, &lp.ln1_gain.data, &lp.ln1_bias.data);
        let q = a.matmul(&lp.w_q);
        let k = a.matmul(&lp.w_k);
        let v = a.matmul(&lp.w_v);
        let mut ctx = Mat::zeros(t_len, d);
        let mut att = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let qt = &q.row(t)[cols.clone()];
                let scores: Vec<f64> = (0..=t)
                    .map(|s| dot(qt, &k.row(s)[cols.clone()]) * inv_sqrt)
                    .collect();
                let probs = softmax(&scores);
                let out = &mut ctx.row_mut(t)[cols.clone()];
                for (s, &ps) in probs.iter().enumerate() {
                    p.set(t, s, ps);
                    for (o, &vv) in out.iter_mut().zip(&v.row(s)[cols.clone()]) {
                        *o += ps * vv;
                    }
                }
            }
            att.push(p);
        }
        let attn_out = ctx.matmul(&lp.w_o);
        x.add_assign(&attn_out);

        let (b, xhat2, rstd2) = ln_forward(&x, &lp.ln2_gain.data, &lp.ln2_bias.data);
        let mut pre = b.matmul(&lp.w_in);
        for t in 0..t_len {
            for (pv, bv) in pre.row_mut(t).iter_mut().zip(&lp.b_in.data) {
                *pv += bv;
            }
        }
        let activation: Activation = cfg.activation;
        let mut act = Mat::from_vec(
            t_len,
            cfg.d_mlp,
            pre.data.iter().map(|&z| activation.apply(z)).collect(),
        );
        let mult = multipliers.get(l).cloned().flatten();
        if let Some(m) = &mult {
            for t in 0..t_len {
                for (av, mv) in act.row_mut(t).iter_mut().zip(m) {
                    *av *= mv;
                }
            }
        }
        if let Some((pl, f)) = patch.as_mut() {
            if *pl == l {
                f(&mut act);
            }
        }
        let mut mlp_out = act.matmul(&lp.w_out);
        for t in 0..t_len {
            for (ov, bv) in mlp_out.row_mut(t).iter_mut().zip(&lp.b_out.data) {
                *ov += bv;
            }
        }
        x.add_assign(&mlp_out);

        layers.push(LayerCache {
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            att,
            ctx,
            xhat2,
            rstd2,
            b,
            pre,
            mult,
            act,
        });
    }

    let last = Mat::from_vec(1, d, x.row(t_len - 1).to_vec());
    let (hf, lnf_xhat, lnf_rstd) = ln_forward(&last, &params.lnf_gain.data, &params.lnf_bias.data);
    let last_hidden = hf.data;
    let logits: Vec<f64> = (0..cfg.n_classes)
        .map(|c| dot(params.head_w.row(c), &last_hidden) + params.head_b.data[c])
        .collect();
    let probs = softmax(&logits);
    Ok(Tape {
        tokens: tokens.to_vec(),
        layers,
        lnf_xhat: lnf_xhat.data,
        lnf_rstd: lnf_rstd[0],
        last_hidden,
        logits,
        probs,
    })
}

pub fn forward(
    params: &Parameters,
    tokens: &[u32],
    intervention: Option<&InterventionSpec>,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let mults = match intervention {
        Some(spec) => spec.multipliers(cfg.n_layers, cfg.d_mlp)?,
        None => vec![None; cfg.n_layers],
    };
    Ok(forward_tape(params, tokens, &mults)?.into_trace())
}

/// Forward pass in which `patch` rewrites layer `layer`'s post-activation
/// MLP values `[seq × d_mlp]` before they feed the output projection.
pub fn forward_patched<F: FnMut(&mut Mat)>(
    params: &Parameters,
    tokens: &[u32],
    layer: usize,
    mut patch: F,
) -> Result<ForwardTrace> {
    let n_layers = params.config.n_layers;
    if layer >= n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {n_layers} layers"
        )));
    }
    let mults = vec![None; n_layers];
    Ok(forward_tape_patched(params, tokens, &mults, Some((layer, &mut patch)))?.into_trace())
}

/// Cross-entropy `-log softmax(logits)[label]` via log-sum-exp.
pub fn loss(trace: &ForwardTrace, label: usize) -> f64 {
    cross_entropy(&trace.logits, label)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln() - logits[label]
}

pub(crate) struct BackwardOut {
    pub grads: Option<Parameters>,
    /// Gradient w.r.t. each layer's post-multiplier MLP values, for the
    /// layers reached.
    pub d_act: Vec<Option<Mat>>,
}

/// Backpropagates `d_logits` through the tape. With `param_grads == false`
/// the pass stops as soon as `stop_layer`'s activation gradient is known.
pub(crate) fn backward(
    params: &Parameters,
    tape: &Tape,
    d_logits: &[f64],
    param_grads: bool,
    stop_layer: Option<usize>,
) -> BackwardOut {
    let cfg = &params.config;
    let (t_len, d) = (tape.seq_len(), cfg.d_model);
    let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut grads = param_grads.then(|| Parameters::zeros(cfg));
    let mut d_act_out: Vec<Option<Mat>> = vec![None; cfg.n_layers];

    let mut d_hidden = vec![0.0; d];
    for (c, &dl) in d_logits.iter().enumerate() {
        for (dh_i, w) in d_hidden.iter_mut().zip(params.head_w.row(c)) {
            *dh_i += dl * w;
        }
    }
    if let Some(g) = grads.as_mut() {
        for (c, &dl) in d_logits.iter().enumerate() {
            for (gw, h) in g.head_w.row_mut(c).iter_mut().zip(&tape.last_hidden) {
                *gw += dl * h;
            }
            g.head_b.data[c] += dl;
        }
    }
    let lnf_grads = grads
        .as_mut()
        .map(|g| (g.lnf_gain.data.as_mut_slice(), g.lnf_bias.data.as_mut_slice()));
    let dx_last = ln_backward_row(
        &d_hidden,
        &tape.lnf_xhat,
        tape.lnf_rstd,
        &params.lnf_gain.data,
        lnf_grads,
    );
    let mut dx = Mat::zeros(t_len, d);
    dx.row_mut(t_len - 1).copy_from_slice(&dx_last);

    for l in (0..cfg.n_layers).rev() {
        let lp = &params.layers[l];
        let lc = &tape.layers[l];

        // MLP branch: x += act · W_out + b_out
        let d_act = dx.matmul_t(&lp.w_out);
        if let Some(g) = grads.as_mut() {
            let gl = &mut g.layers[l];
            lc.act.t_matmul_acc(&dx, &mut gl.w_out);
            for t in 0..t_len {
                for (gb, v) in gl.b_out.data.iter_mut().zip(dx.row(t)) {
                    *gb += v;
                }
            }
        }
        let stop_here = stop_layer == Some(l) && !param_grads;
        d_act_out[l] = Some(d_act.clone());
        if stop_here {
            break;
        }

        let mut d_pre = d_act;
        for t in 0..t_len {
            let pre_row = lc.pre.row(t);
            for (u, dv) in d_pre.row_mut(t).iter_mut().enumerate() {
                let m = lc.mult.as_ref().map_or(1.0, |m| m[u]);
                *dv *= m * cfg.activation.derivative(pre_row[u]);
            }
        }
        let d_b = d_pre.matmul_t(&lp.w_in);
        if let Some(g) = grads.as_mut() {
            let gl = &mut g.layers[l];
            lc.b.t_matmul_acc(&d_pre, &mut gl.w_in);
            for t in 0..t_len {
                for (gb, v) in gl.b_in.data.iter_mut().zip(d_pre.row(t)) {
                    *gb += v;
                }
            }
        }
        let ln2_grads = grads
            .as_mut()
            .map(|g| {
                let gl = &mut g.layers[l];
                (&mut gl.ln2_gain, &mut gl.ln2_bias)
            });
        let d_mid = ln_backward(&d_b, &lc.xhat2, &lc.rstd2, &lp.ln2_gain.data, ln2_grads);
        dx.add_assign(&d_mid);

        // Attention branch: x += ctx · W_o
        let d_ctx = dx.matmul_t(&lp.w_o);
        if let Some(g) = grads.as_mut() {
            lc.ctx.t_matmul_acc(&dx, &mut g.layers[l].w_o);
        }
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &lc.att[h];
            for t in 0..t_len {
                let dct = &d_ctx.row(t)[cols.clone()];
                let dp: Vec<f64> = (0..=t)
                    .map(|s| dot(dct, &lc.v.row(s)[cols.clone()]))
                    .collect();
                let weighted: f64 = (0..=t).map(|s| p.get(t, s) * dp[s]).sum();
                for s in 0..=t {
                    let pts = p.get(t, s);
                    for (o, &g) in dv.row_mut(s)[cols.clone()].iter_mut().zip(dct) {
                        *o += pts * g;
                    }
                    let ds = pts * (dp[s] - weighted) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks: Vec<f64> = lc.k.row(s)[cols.clone()].to_vec();
                    for (o, kv) in dq.row_mut(t)[cols.clone()].iter_mut().zip(&ks) {
                        *o += ds * kv;
                    }
                    let qt: Vec<f64> = lc.q.row(t)[cols.clone()].to_vec();
                    for (o, qv) in dk.row_mut(s)[cols.clone()].iter_mut().zip(&qt) {
                        *o += ds * qv;
                    }
                }
            }
        }
        let mut d_a = dq.matmul_t(&lp.w_q);
        d_a.add_assign(&dk.matmul_t(&lp.w_k));
        d_a.add_assign(&dv.matmul_t(&lp.w_v));
        if let Some(g) = grads.as_mut() {
            let gl = &mut g.layers[l];
            lc.a.t_matmul_acc(&dq, &mut gl.w_q);
            lc.a.t_matmul_acc(&dk, &mut gl.w_k);
            lc.a.t_matmul_acc(&dv, &mut gl.w_v);
        }
        let ln1_grads = grads
            .as_mut()
            .map(|g| {
                let gl = &mut g.layers[l];
                (&mut gl.ln1_gain, &mut gl.ln1_bias)
            });
        let d_in = ln_backward(&d_a, &lc.xhat1, &lc.rstd1, &lp.ln1_gain.data, ln1_grads);
        dx.add_assign(&d_in);
    }

    if let Some(g) = grads.as_mut() {
        for (t, &tok) in tape.tokens.iter().enumerate() {
            let row = dx.row(t).to_vec();
            for (gv, v) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(&row) {
                *gv += v;
            }
            for (gv, v) in g.pos_emb.row_mut(t).iter_mut().zip(&row) {
                *gv += v;
            }
        }
    }
    BackwardOut {
        grads,
        d_act: d_act_out,
    }
}

pub struct LossGradient {
    pub loss: f64,
    pub predicted: usize,
    pub grads: Parameters,
}

/// Full-model gradient of the cross-entropy loss for one example.
pub fn loss_gradient(params: &Parameters, tokens: &[u32], label: usize) -> Result<LossGradient> {
    if label >= params.config.n_classes {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: params.config.n_classes,
        });
    }
    let mults = vec![None; params.config.n_layers];
    let tape = forward_tape(params, tokens, &mults)?;
    let loss = cross_entropy(&tape.logits, label);
    let predicted = argmax(&tape.probs);
    let mut d_logits = tape.probs.clone();
    d_logits[label] -= 1.0;
    let out = backward(params, &tape, &d_logits, true, None);
    Ok(LossGradient {
        loss,
        predicted,
        grads: out.grads.expect("param grads requested"),
    })
}
