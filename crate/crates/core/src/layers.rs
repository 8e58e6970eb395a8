//! Differentiable building blocks with explicit forward/backward passes.
//!
//! Every `*_taped` forward returns a [`GradTape`] holding the activations
//! its backward pass needs. A tape is single-use: calling backward on it a
//! second time yields [`Error::TapeReused`].
//!
//! Parameter gradients are returned as a `Vec<Matrix>` aligned with the
//! order of the corresponding `params()` call; biases appear as `1×C` rows.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix, TruncatedFactors};

/// Cached forward state for one backward pass.
#[derive(Debug)]
pub struct GradTape<T> {
    cache: Option<T>,
}

impl<T> GradTape<T> {
    fn new(cache: T) -> Self {
        Self { cache: Some(cache) }
    }

    fn take(&mut self) -> Result<T> {
        self.cache.take().ok_or(Error::TapeReused)
    }

    pub fn is_consumed(&self) -> bool {
        self.cache.is_none()
    }
}

/// Input and parameter gradients of a single-input layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Matrix,
    pub params: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    /// C_in × C_out
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLinear {
    /// C_in × k
    pub w1: Matrix,
    /// k × C_out
    pub w2: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// A linear map `y = x·W + b`, stored densely or as a cascaded factor pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(DenseLinear),
    LowRank(LowRankLinear),
}

impl DenseLinear {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(shape_err("DenseLinear::new", "empty weight"));
        }
        check_bias(bias.as_deref(), weight.cols(), "DenseLinear::new")?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Linear::forward_dense(self, x)
    }
}

impl LowRankLinear {
    pub fn new(w1: Matrix, w2: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if w1.cols() != w2.rows() {
            return Err(shape_err(
                "LowRankLinear::new",
                format!("factor ranks differ: {} vs {}", w1.cols(), w2.rows()),
            ));
        }
        let k = w1.cols();
        if k == 0 || k > w1.rows().min(w2.cols()) {
            return Err(Error::RankOutOfRange { k, max: w1.rows().min(w2.cols()) });
        }
        check_bias(bias.as_deref(), w2.cols(), "LowRankLinear::new")?;
        Ok(Self { w1, w2, bias })
    }

    pub fn from_factors(f: TruncatedFactors, bias: Option<Vec<f64>>) -> Result<Self> {
        Self::new(f.w1, f.w2, bias)
    }

    pub fn rank(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Linear::forward_low_rank(self, x)
    }
}

fn check_bias(bias: Option<&[f64]>, out: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.len() != out => Err(shape_err(op, format!("bias length {} != {out}", b.len()))),
        Some(b) if b.iter().any(|v| !v.is_finite()) => Err(Error::NonFinite { index: 0 }),
        _ => Ok(()),
    }
}

fn add_bias(y: &mut Matrix, bias: Option<&Vec<f64>>) {
    if let Some(b) = bias {
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::from_raw(1, g.cols(), out)
}

#[derive(Debug)]
pub struct LinearCache {
    input: Matrix,
    /// `x·w1` for low-rank layers.
    hidden: Option<Matrix>,
}

impl From<DenseLinear> for Linear {
    fn from(d: DenseLinear) -> Self {
        Linear::Dense(d)
    }
}

impl From<LowRankLinear> for Linear {
    fn from(l: LowRankLinear) -> Self {
        Linear::LowRank(l)
    }
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(d) => d.weight.rows(),
            Linear::LowRank(l) => l.w1.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(d) => d.weight.cols(),
            Linear::LowRank(l) => l.w2.cols(),
        }
    }

    /// Factor rank for low-rank layers, `None` for dense ones.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Linear::Dense(_) => None,
            Linear::LowRank(l) => Some(l.rank()),
        }
    }

    pub fn bias(&self) -> Option<&Vec<f64>> {
        match self {
            Linear::Dense(d) => d.bias.as_ref(),
            Linear::LowRank(l) => l.bias.as_ref(),
        }
    }

    /// Weight scalars only (no bias): `C_in·C_out` or `k·(C_in + C_out)`.
    pub fn weight_param_count(&self) -> usize {
        match self {
            Linear::Dense(d) => d.weight.rows() * d.weight.cols(),
            Linear::LowRank(l) => l.rank() * (l.w1.rows() + l.w2.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_param_count() + self.bias().map_or(0, Vec::len)
    }

    /// Forward FLOPs over `tokens` rows, two per multiply-accumulate.
    /// Bias additions are not counted.
    pub fn flops(&self, tokens: usize) -> usize {
        2 * tokens * self.weight_param_count()
    }

    /// The dense `C_in × C_out` matrix this layer applies.
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Linear::Dense(d) => d.weight.clone(),
            Linear::LowRank(l) => matmul(&l.w1, &l.w2).expect("factor shapes agree"),
        }
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(shape_err(op, format!("input width {} != {}", x.cols(), self.in_dim())));
        }
        Ok(())
    }

    fn forward_dense(d: &DenseLinear, x: &Matrix) -> Result<Matrix> {
        if x.cols() != d.weight.rows() {
            return Err(shape_err("dense_forward", format!("input width {} != {}", x.cols(), d.weight.rows())));
        }
        let mut y = matmul(x, &d.weight)?;
        add_bias(&mut y, d.bias.as_ref());
        Ok(y)
    }

    fn forward_low_rank(l: &LowRankLinear, x: &Matrix) -> Result<Matrix> {
        if x.cols() != l.w1.rows() {
            return Err(shape_err("lowrank_forward", format!("input width {} != {}", x.cols(), l.w1.rows())));
        }
        let mut y = matmul(&matmul(x, &l.w1)?, &l.w2)?;
        add_bias(&mut y, l.bias.as_ref());
        Ok(y)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Linear::Dense(d) => Self::forward_dense(d, x),
            Linear::LowRank(l) => Self::forward_low_rank(l, x),
        }
    }

    pub fn forward_taped(&self, x: &Matrix) -> Result<(Matrix, GradTape<LinearCache>)> {
        self.check_input(x, "linear_forward")?;
        match self {
            Linear::Dense(d) => {
                let y = Self::forward_dense(d, x)?;
                Ok((y, GradTape::new(LinearCache { input: x.clone(), hidden: None })))
            }
            Linear::LowRank(l) => {
                let hidden = matmul(x, &l.w1)?;
                let mut y = matmul(&hidden, &l.w2)?;
                add_bias(&mut y, l.bias.as_ref());
                Ok((y, GradTape::new(LinearCache { input: x.clone(), hidden: Some(hidden) })))
            }
        }
    }

    /// Gradients in `params()` order: `[weight, bias?]` or `[w1, w2, bias?]`.
    pub fn backward(&self, tape: &mut GradTape<LinearCache>, grad_out: &Matrix) -> Result<Gradients> {
        let cache = tape.take()?;
        if grad_out.shape() != (cache.input.rows(), self.out_dim()) {
            return Err(shape_err("linear_backward", format!("grad shape {:?}", grad_out.shape())));
        }
        let mut params = Vec::with_capacity(3);
        let input = match self {
            Linear::Dense(d) => {
                params.push(matmul_tn(&cache.input, grad_out)?);
                matmul_nt(grad_out, &d.weight)?
            }
            Linear::LowRank(l) => {
                let hidden = cache.hidden.as_ref().expect("low-rank tape caches hidden");
                let grad_hidden = matmul_nt(grad_out, &l.w2)?;
                params.push(matmul_tn(&cache.input, &grad_hidden)?);
                params.push(matmul_tn(hidden, grad_out)?);
                matmul_nt(&grad_hidden, &l.w1)?
            }
        };
        if self.bias().is_some() {
            params.push(column_sums(grad_out));
        }
        Ok(Gradients { input, params })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = match self {
            Linear::Dense(d) => vec![d.weight.data()],
            Linear::LowRank(l) => vec![l.w1.data(), l.w2.data()],
        };
        if let Some(b) = self.bias() {
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Linear::Dense(d) => {
                let mut out = vec![d.weight.data_mut()];
                if let Some(b) = d.bias.as_mut() {
                    out.push(b.as_mut_slice());
                }
                out
            }
            Linear::LowRank(l) => {
                let mut out = vec![l.w1.data_mut(), l.w2.data_mut()];
                if let Some(b) = l.bias.as_mut() {
                    out.push(b.as_mut_slice());
                }
                out
            }
        }
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[derive(Debug)]
pub struct SoftmaxCache {
    output: Matrix,
}

pub fn softmax_taped(a: &Matrix) -> (Matrix, GradTape<SoftmaxCache>) {
    let output = softmax_rows(a);
    (output.clone(), GradTape::new(SoftmaxCache { output }))
}

fn softmax_jvp_t(s: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, gr) = (s.row(r), grad_out.row(r));
        let inner: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &si), &gi) in g.row_mut(r).iter_mut().zip(sr).zip(gr) {
            *o = si * (gi - inner);
        }
    }
    g
}

pub fn softmax_backward(tape: &mut GradTape<SoftmaxCache>, grad_out: &Matrix) -> Result<Matrix> {
    let cache = tape.take()?;
    if grad_out.shape() != cache.output.shape() {
        return Err(shape_err("softmax_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    Ok(softmax_jvp_t(&cache.output, grad_out))
}

fn check_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(shape_err("attention_forward", format!("q width {} != k width {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(shape_err("attention_forward", format!("k height {} != v height {}", k.rows(), v.rows())));
    }
    if q.cols() == 0 {
        return Err(shape_err("attention_forward", "d_k must be positive"));
    }
    Ok(())
}

/// `softmax(q·kᵀ / √d_k) · v`.
pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    Ok(attention_taped(q, k, v)?.0)
}

#[derive(Debug)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionGradients {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn attention_taped(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, GradTape<AttentionCache>)> {
    check_attention(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = matmul_nt(q, k)?.scale(scale);
    let weights = softmax_rows(&scores);
    let out = matmul(&weights, v)?;
    let cache = AttentionCache { q: q.clone(), k: k.clone(), v: v.clone(), weights };
    Ok((out, GradTape::new(cache)))
}

pub fn attention_backward(tape: &mut GradTape<AttentionCache>, grad_out: &Matrix) -> Result<AttentionGradients> {
    let c = tape.take()?;
    if grad_out.shape() != (c.q.rows(), c.v.cols()) {
        return Err(shape_err("attention_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let scale = 1.0 / (c.q.cols() as f64).sqrt();
    let grad_v = matmul_tn(&c.weights, grad_out)?;
    let grad_weights = matmul_nt(grad_out, &c.v)?;
    let grad_scores = softmax_jvp_t(&c.weights, &grad_weights).scale(scale);
    let grad_q = matmul(&grad_scores, &c.k)?;
    let grad_k = matmul_tn(&grad_scores, &c.q)?;
    Ok(AttentionGradients { q: grad_q, k: grad_k, v: grad_v })
}

/// Per-head query/key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl AttentionHead {
    pub fn projections(&self) -> [&Linear; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// Multi-head self-attention: `Concat(head_1..head_h) · W^O`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaBlock {
    pub heads: Vec<AttentionHead>,
    pub wo: Linear,
}

#[derive(Debug)]
pub struct MhsaCache {
    heads: Vec<HeadTape>,
    wo: GradTape<LinearCache>,
    rows: usize,
}

#[derive(Debug)]
struct HeadTape {
    q: GradTape<LinearCache>,
    k: GradTape<LinearCache>,
    v: GradTape<LinearCache>,
    attn: GradTape<AttentionCache>,
}

impl MhsaBlock {
    pub fn new(heads: Vec<AttentionHead>, wo: Linear) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
        let d_model = first.wq.in_dim();
        let d_k = first.wq.out_dim();
        let d_v = first.wv.out_dim();
        for h in &heads {
            if h.wq.in_dim() != d_model || h.wk.in_dim() != d_model || h.wv.in_dim() != d_model {
                return Err(shape_err("MhsaBlock::new", "projection input widths differ"));
            }
            if h.wq.out_dim() != d_k || h.wk.out_dim() != d_k || h.wv.out_dim() != d_v {
                return Err(shape_err("MhsaBlock::new", "heads must share d_k and d_v"));
            }
        }
        if wo.in_dim() != heads.len() * d_v {
            return Err(shape_err(
                "MhsaBlock::new",
                format!("output projection expects {} inputs, heads give {}", wo.in_dim(), heads.len() * d_v),
            ));
        }
        Ok(Self { heads, wo })
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].wq.in_dim()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].wq.out_dim()
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].wv.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().flat_map(|h| h.projections()).map(Linear::param_count).sum::<usize>() + self.wo.param_count()
    }

    /// Projections, score/weight products with a 5-op softmax, and output
    /// projection for a sequence of `tokens` rows.
    pub fn flops(&self, tokens: usize) -> usize {
        let t2 = tokens * tokens;
        let per_head_attention = 2 * t2 * self.d_k() + 2 * t2 * self.d_v() + 5 * t2;
        self.heads
            .iter()
            .map(|h| h.projections().iter().map(|p| p.flops(tokens)).sum::<usize>() + per_head_attention)
            .sum::<usize>()
            + self.wo.flops(tokens)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(shape_err("mhsa_forward", format!("input width {} != {}", x.cols(), self.d_model())));
        }
        let outs = self
            .heads
            .iter()
            .map(|h| attention_forward(&h.wq.forward(x)?, &h.wk.forward(x)?, &h.wv.forward(x)?))
            .collect::<Result<Vec<_>>>()?;
        self.wo.forward(&Matrix::hstack(&outs)?)
    }

    pub fn forward_taped(&self, x: &Matrix) -> Result<(Matrix, GradTape<MhsaCache>)> {
        if x.cols() != self.d_model() {
            return Err(shape_err("mhsa_forward", format!("input width {} != {}", x.cols(), self.d_model())));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut tapes = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let (q, tq) = h.wq.forward_taped(x)?;
            let (k, tk) = h.wk.forward_taped(x)?;
            let (v, tv) = h.wv.forward_taped(x)?;
            let (o, ta) = attention_taped(&q, &k, &v)?;
            outs.push(o);
            tapes.push(HeadTape { q: tq, k: tk, v: tv, attn: ta });
        }
        let (y, two) = self.wo.forward_taped(&Matrix::hstack(&outs)?)?;
        Ok((y, GradTape::new(MhsaCache { heads: tapes, wo: two, rows: x.rows() })))
    }

    /// Parameter gradients ordered head by head (`wq`, `wk`, `wv`), then `wo`.
    pub fn backward(&self, tape: &mut GradTape<MhsaCache>, grad_out: &Matrix) -> Result<Gradients> {
        let mut cache = tape.take()?;
        if grad_out.shape() != (cache.rows, self.wo.out_dim()) {
            return Err(shape_err("mhsa_backward", format!("grad shape {:?}", grad_out.shape())));
        }
        let wo_grads = self.wo.backward(&mut cache.wo, grad_out)?;
        let d_v = self.d_v();
        let mut grad_x = Matrix::zeros(cache.rows, self.d_model());
        let mut params = Vec::new();
        for (i, (head, ht)) in self.heads.iter().zip(cache.heads.iter_mut()).enumerate() {
            let grad_head = wo_grads.input.columns(i * d_v, (i + 1) * d_v);
            let ga = attention_backward(&mut ht.attn, &grad_head)?;
            for (proj, pt, g) in
                [(&head.wq, &mut ht.q, &ga.q), (&head.wk, &mut ht.k, &ga.k), (&head.wv, &mut ht.v, &ga.v)]
            {
                let grads = proj.backward(pt, g)?;
                grad_x.add_assign(&grads.input);
                params.extend(grads.params);
            }
        }
        params.extend(wo_grads.params);
        Ok(Gradients { input: grad_x, params })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for h in &self.heads {
            for p in h.projections() {
                out.extend(p.params());
            }
        }
        out.extend(self.wo.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for h in &mut self.heads {
            for p in h.projections_mut() {
                out.extend(p.params_mut());
            }
        }
        out.extend(self.wo.params_mut());
        out
    }
}
