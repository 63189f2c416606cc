use super::{LayerWeights, TinyLm, TokenSequence, Weights, LAYER_TENSORS};
use crate::linalg::{axpy, dot_slice, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Which weight gradients a backward pass should accumulate. The prompt
/// gradient is always produced.
#[derive(Clone, Debug, Default)]
pub struct GradRequest {
    pub all_weights: bool,
    pub matrices: Vec<String>,
}

impl GradRequest {
    pub fn prompt_only() -> Self {
        Self::default()
    }

    pub fn all_weights() -> Self {
        GradRequest {
            all_weights: true,
            matrices: Vec::new(),
        }
    }

    pub fn matrices<S: AsRef<str>>(names: &[S]) -> Self {
        GradRequest {
            all_weights: false,
            matrices: names.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    fn wants_any(&self) -> bool {
        self.all_weights || !self.matrices.is_empty()
    }

    fn wants(&self, name: &str) -> bool {
        self.all_weights || self.matrices.iter().any(|m| m == name)
    }
}

/// Result of one forward/backward pass over a single sequence. Gradients are
/// of the summed (not averaged) cross-entropy.
#[derive(Clone, Debug)]
pub struct SequencePass {
    pub ce_sum: f64,
    pub count: usize,
    pub d_prompt: Matrix,
    pub grads: Option<Weights>,
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    att: Vec<Matrix>,
    o: Matrix,
    ln2: LnCache,
    a2: Matrix,
    u: Matrix,
    z: Matrix,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    af: Matrix,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let g = gain.data();
    let b = bias.data();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = g[j] * xh[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    mut dgain: Option<&mut Matrix>,
    mut dbias: Option<&mut Matrix>,
) -> Matrix {
    let (n, d) = dy.shape();
    let g = gain.data();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot_slice(&dxhat, xh) / d as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - m1 - xh[j] * m2);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for (gj, (a, b)) in dg.data_mut().iter_mut().zip(dyr.iter().zip(xh)) {
                *gj += a * b;
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            axpy(1.0, dyr, db.data_mut());
        }
    }
    dx
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        axpy(1.0, bias.data(), m.row_mut(i));
    }
}

fn col_sum_into(m: &Matrix, acc: &mut Matrix) {
    for row in m.iter_rows() {
        axpy(1.0, row, acc.data_mut());
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Row-wise softmax over the first `i + 1` entries of row `i` (causal).
/// Returns the attention matrix with zeros above the diagonal.
fn causal_attention(q: &Matrix, k: &Matrix, lo: usize, hi: usize, scale: f64) -> Matrix {
    let n = q.rows();
    let mut att = Matrix::zeros(n, n);
    for i in 0..n {
        let qi = &q.row(i)[lo..hi];
        let row = att.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let s = dot_slice(qi, &k.row(j)[lo..hi]) * scale;
            row[j] = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= sum;
        }
    }
    att
}

pub(crate) fn input_rows(lm: &TinyLm, w: &Weights, prompt: &Matrix, tokens: &[usize]) -> Matrix {
    let d = lm.config().d_model;
    let t = prompt.rows();
    let emb_scale = (d as f64).sqrt();
    let pos = lm.positions();
    let mut x = Matrix::zeros(t + tokens.len(), d);
    for r in 0..t {
        let row = x.row_mut(r);
        row.copy_from_slice(prompt.row(r));
        axpy(1.0, pos.row(r), row);
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t + i);
        axpy(emb_scale, w.tok_emb.row(tok), row);
        axpy(1.0, pos.row(t + i), row);
    }
    x
}

fn layer_forward(x: &Matrix, lw: &LayerWeights, n_heads: usize) -> (Matrix, LayerCache) {
    let (n, d) = x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a1, ln1) = layer_norm(x, &lw.ln1_gain, &lw.ln1_bias);
    let q = a1.dot(&lw.wq);
    let k = a1.dot(&lw.wk);
    let v = a1.dot(&lw.wv);
    let mut o = Matrix::zeros(n, d);
    let mut att = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let a = causal_attention(&q, &k, lo, hi, scale);
        for i in 0..n {
            let ai = a.row(i);
            let orow = &mut o.row_mut(i)[lo..hi];
            for j in 0..=i {
                axpy(ai[j], &v.row(j)[lo..hi], orow);
            }
        }
        att.push(a);
    }
    let mut h = o.dot(&lw.wo);
    h.add_assign(x);
    let (a2, ln2) = layer_norm(&h, &lw.ln2_gain, &lw.ln2_bias);
    let mut u = a2.dot(&lw.w1);
    add_bias(&mut u, &lw.b1);
    let z = Matrix::from_vec_unchecked(
        u.rows(),
        u.cols(),
        u.data().iter().map(|&x| gelu(x)).collect(),
    );
    let mut out = z.dot(&lw.w2);
    add_bias(&mut out, &lw.b2);
    out.add_assign(&h);
    (
        out,
        LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            att,
            o,
            ln2,
            a2,
            u,
            z,
        },
    )
}

pub(crate) fn forward(
    lm: &TinyLm,
    w: &Weights,
    prompt: &Matrix,
    tokens: &[usize],
) -> (Matrix, Cache) {
    let mut x = input_rows(lm, w, prompt, tokens);
    let n_heads = lm.config().n_heads;
    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (next, cache) = layer_forward(&x, lw, n_heads);
        layers.push(cache);
        x = next;
    }
    let (af, lnf) = layer_norm(&x, &w.lnf_gain, &w.lnf_bias);
    let logits = af.dot_t(&w.tok_emb);
    (logits, Cache { layers, lnf, af })
}

/// Final hidden states (after the last layer norm), one row per position.
pub(crate) fn hidden_states(lm: &TinyLm, w: &Weights, tokens: &[usize]) -> Matrix {
    let empty = Matrix::zeros(0, lm.config().d_model);
    let mut x = input_rows(lm, w, &empty, tokens);
    for lw in &w.layers {
        x = layer_forward(&x, lw, lm.config().n_heads).0;
    }
    layer_norm(&x, &w.lnf_gain, &w.lnf_bias).0
}

fn layer_backward(
    dx: Matrix,
    lw: &LayerWeights,
    c: &LayerCache,
    n_heads: usize,
    grads: Option<&mut LayerWeights>,
    wants: &[bool; 12],
) -> Matrix {
    let (n, d) = dx.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut slots: [Option<&mut Matrix>; 12] = match grads {
        Some(lg) => {
            let mut i = 0;
            lg.tensors_mut().map(|m| {
                let keep = wants[i];
                i += 1;
                keep.then_some(m)
            })
        }
        None => std::array::from_fn(|_| None),
    };
    macro_rules! grad {
        ($idx:expr) => {
            slots[$idx].take()
        };
    }

    // Feed-forward block.
    if let Some(gw2) = grad!(10) {
        c.z.t_dot_acc(&dx, gw2);
    }
    if let Some(gb2) = grad!(11) {
        col_sum_into(&dx, gb2);
    }
    let dz = dx.dot_t(&lw.w2);
    let du = Matrix::from_vec_unchecked(
        dz.rows(),
        dz.cols(),
        dz.data()
            .iter()
            .zip(c.u.data())
            .map(|(g, &u)| g * gelu_grad(u))
            .collect(),
    );
    if let Some(gw1) = grad!(8) {
        c.a2.t_dot_acc(&du, gw1);
    }
    if let Some(gb1) = grad!(9) {
        col_sum_into(&du, gb1);
    }
    let da2 = du.dot_t(&lw.w1);
    let mut dh_ = layer_norm_backward(&da2, &c.ln2, &lw.ln2_gain, grad!(6), grad!(7));
    dh_.add_assign(&dx);

    // Attention block.
    if let Some(gwo) = grad!(5) {
        c.o.t_dot_acc(&dh_, gwo);
    }
    let d_o = dh_.dot_t(&lw.wo);
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut d_att = vec![0.0; n];
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let att = &c.att[h];
        for i in 0..n {
            let doi = &d_o.row(i)[lo..hi];
            let ai = att.row(i);
            let mut weighted = 0.0;
            for j in 0..=i {
                d_att[j] = dot_slice(doi, &c.v.row(j)[lo..hi]);
                weighted += ai[j] * d_att[j];
                axpy(ai[j], doi, &mut dv.row_mut(j)[lo..hi]);
            }
            let qi: Vec<f64> = c.q.row(i)[lo..hi].to_vec();
            for j in 0..=i {
                let ds = ai[j] * (d_att[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(ds, &c.k.row(j)[lo..hi], &mut dq.row_mut(i)[lo..hi]);
                axpy(ds, &qi, &mut dk.row_mut(j)[lo..hi]);
            }
        }
    }
    if let Some(gwq) = grad!(2) {
        c.a1.t_dot_acc(&dq, gwq);
    }
    if let Some(gwk) = grad!(3) {
        c.a1.t_dot_acc(&dk, gwk);
    }
    if let Some(gwv) = grad!(4) {
        c.a1.t_dot_acc(&dv, gwv);
    }
    let mut da1 = dq.dot_t(&lw.wq);
    da1.add_assign(&dk.dot_t(&lw.wk));
    da1.add_assign(&dv.dot_t(&lw.wv));
    let mut dx_in = layer_norm_backward(&da1, &c.ln1, &lw.ln1_gain, grad!(0), grad!(1));
    dx_in.add_assign(&dh_);
    dx_in
}

pub(crate) fn sequence_pass(
    lm: &TinyLm,
    w: &Weights,
    prompt: &Matrix,
    seq: &TokenSequence,
    req: &GradRequest,
) -> SequencePass {
    let t = prompt.rows();
    let (logits, cache) = forward(lm, w, prompt, &seq.tokens);
    let vocab = logits.cols();

    let mut dlogits = Matrix::zeros(logits.rows(), vocab);
    let mut ce_sum = 0.0;
    let mut count = 0;
    for pos in 1..seq.tokens.len() {
        if !seq.target_mask[pos] {
            continue;
        }
        let r = t + pos - 1;
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let target = seq.tokens[pos];
        ce_sum += log_z - row[target];
        count += 1;
        let drow = dlogits.row_mut(r);
        for (dv, v) in drow.iter_mut().zip(row) {
            *dv = (v - log_z).exp();
        }
        drow[target] -= 1.0;
    }

    let n_layers = w.layers.len();
    let layer_wants: Vec<[bool; 12]> = (0..n_layers)
        .map(|l| std::array::from_fn(|i| req.wants(&format!("layers.{l}.{}", LAYER_TENSORS[i]))))
        .collect();
    let mut grads = req.wants_any().then(|| w.zeros_like());

    // Output head (tied to the token embedding).
    let d_af = dlogits.dot(&w.tok_emb);
    if let Some(gw) = grads.as_mut().filter(|_| req.wants("tok_emb")) {
        dlogits.t_dot_acc(&cache.af, &mut gw.tok_emb);
    }
    let (dg, db) = match grads.as_mut() {
        Some(gw) => (
            req.wants("ln_f.gain").then_some(&mut gw.lnf_gain),
            req.wants("ln_f.bias").then_some(&mut gw.lnf_bias),
        ),
        None => (None, None),
    };
    let mut dx = layer_norm_backward(&d_af, &cache.lnf, &w.lnf_gain, dg, db);

    for l in (0..n_layers).rev() {
        let lg = grads.as_mut().map(|g| &mut g.layers[l]);
        dx = layer_backward(
            dx,
            &w.layers[l],
            &cache.layers[l],
            lm.config().n_heads,
            lg,
            &layer_wants[l],
        );
    }

    let d_prompt = dx.slice_rows(0, t);
    if let Some(gw) = grads.as_mut().filter(|_| req.wants("tok_emb")) {
        let emb_scale = (lm.config().d_model as f64).sqrt();
        for (i, &tok) in seq.tokens.iter().enumerate() {
            axpy(emb_scale, dx.row(t + i), gw.tok_emb.row_mut(tok));
        }
    }
    SequencePass {
        ce_sum,
        count,
        d_prompt,
        grads,
    }
}
