//! Dual text/image cross-attention and mask-routed cross-attention.
//!
//! Both operations share one query projection and sum a text branch and an
//! image branch. The dual form scales the image branch by `lambda`; the masked
//! form multiplies the queries by `1 - MA` for the text branch and by `MA` for
//! the image branch before the softmax, so a suppressed branch degrades to the
//! uniform mean of its values rather than vanishing.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{validation, Result};
use crate::mask_ops::LatentMask;
use crate::patch_encoder::random_matrix;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Context tokens feeding the keys and values of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeatures<T> {
    pub modality: Modality,
    pub tokens: Array2<T>,
}

impl<T: Real> PromptFeatures<T> {
    pub fn new(modality: Modality, tokens: Array2<T>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(validation("prompt features need at least one token"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(validation("prompt features must be finite"));
        }
        Ok(Self { modality, tokens })
    }

    pub fn text(tokens: Array2<T>) -> Result<Self> {
        Self::new(Modality::Text, tokens)
    }

    pub fn image(tokens: Array2<T>) -> Result<Self> {
        Self::new(Modality::Image, tokens)
    }
}

/// Query features laid out on the latent grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBlock<T> {
    pub features: Array2<T>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl<T: Real> QueryBlock<T> {
    pub fn new(features: Array2<T>, grid_height: usize, grid_width: usize) -> Result<Self> {
        if features.nrows() != grid_height * grid_width {
            return Err(validation(format!(
                "{} queries do not fill a {grid_height}x{grid_width} grid",
                features.nrows()
            )));
        }
        Ok(Self { features, grid_height, grid_width })
    }
}

/// Projection weights of the adapter.
///
/// `w_kt` / `w_vt` project text tokens and are frozen once the image
/// projections have been initialized from them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights<T> {
    pub w_q: Array2<T>,
    pub w_kt: Array2<T>,
    pub w_vt: Array2<T>,
    pub w_ki: Array2<T>,
    pub w_vi: Array2<T>,
    pub lambda: T,
    pub heads: usize,
    text_frozen: bool,
}

impl<T: Real> AdapterWeights<T> {
    pub fn new(
        w_q: Array2<T>,
        w_kt: Array2<T>,
        w_vt: Array2<T>,
        w_ki: Array2<T>,
        w_vi: Array2<T>,
        lambda: T,
        heads: usize,
    ) -> Result<Self> {
        let w = Self { w_q, w_kt, w_vt, w_ki, w_vi, lambda, heads, text_frozen: false };
        w.validate()?;
        Ok(w)
    }

    /// Gaussian init; image projections are left independent until
    /// [`init_image_weights_from_text`] is applied.
    pub fn random<R: Rng + ?Sized>(d_model: usize, d_ctx: usize, d_k: usize, heads: usize, rng: &mut R) -> Self {
        let sq = 1.0 / (d_model as f64).sqrt();
        let sc = 1.0 / (d_ctx as f64).sqrt();
        Self {
            w_q: random_matrix(d_model, d_k, sq, rng),
            w_kt: random_matrix(d_ctx, d_k, sc, rng),
            w_vt: random_matrix(d_ctx, d_k, sc, rng),
            w_ki: random_matrix(d_ctx, d_k, sc, rng),
            w_vi: random_matrix(d_ctx, d_k, sc, rng),
            lambda: T::one(),
            heads,
            text_frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d_k = self.w_q.ncols();
        let d_ctx = self.w_kt.nrows();
        for (name, m) in [("w_kt", &self.w_kt), ("w_vt", &self.w_vt), ("w_ki", &self.w_ki), ("w_vi", &self.w_vi)] {
            if m.dim() != (d_ctx, d_k) {
                return Err(validation(format!("{name} has shape {:?}, expected ({d_ctx}, {d_k})", m.dim())));
            }
        }
        if self.heads == 0 || !d_k.is_multiple_of(self.heads) {
            return Err(validation(format!("key dim {d_k} not divisible into {} heads", self.heads)));
        }
        if !(self.lambda >= T::zero()) {
            return Err(validation("lambda must be non-negative"));
        }
        let all = [&self.w_q, &self.w_kt, &self.w_vt, &self.w_ki, &self.w_vi];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(validation("adapter weights must be finite"));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_ctx(&self) -> usize {
        self.w_kt.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn is_text_frozen(&self) -> bool {
        self.text_frozen
    }

    pub fn freeze_text(&mut self) {
        self.text_frozen = true;
    }
}

/// Copies the text key/value projections into the image projections and
/// freezes the text projections.
pub fn init_image_weights_from_text<T: Real>(mut w: AdapterWeights<T>) -> AdapterWeights<T> {
    w.w_ki = w.w_kt.clone();
    w.w_vi = w.w_vt.clone();
    w.freeze_text();
    w
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Real>(scores: &Array2<T>) -> Array2<T> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-branch intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct BranchCache<T> {
    gate: Option<Array1<T>>,
    q_gated: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
}

fn branch_forward<T: Real>(
    q: &Array2<T>,
    gate: Option<Array1<T>>,
    ctx: &Array2<T>,
    w_k: &Array2<T>,
    w_v: &Array2<T>,
    heads: usize,
) -> (Array2<T>, BranchCache<T>) {
    let q_gated = match &gate {
        Some(g) => q * &g.view().insert_axis(Axis(1)),
        None => q.clone(),
    };
    let k = ctx.dot(w_k);
    let v = ctx.dot(w_v);
    let d_k = q.ncols();
    let dh = d_k / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d_k));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q_gated.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(&scores);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, BranchCache { gate, q_gated, k, v, probs })
}

/// Returns `(dQ, dCtx, dW_k, dW_v)`.
fn branch_backward<T: Real>(
    cache: &BranchCache<T>,
    ctx: &Array2<T>,
    w_k: &Array2<T>,
    w_v: &Array2<T>,
    d_out: &Array2<T>,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
    let d_k = cache.q_gated.ncols();
    let dh = d_k / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut d_qg = Array2::zeros(cache.q_gated.dim());
    let mut d_kmat = Array2::zeros(cache.k.dim());
    let mut d_vmat = Array2::zeros(cache.v.dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_o = d_out.slice(cols);
        let d_p = d_o.dot(&cache.v.slice(cols).t());
        d_vmat.slice_mut(cols).assign(&p.t().dot(&d_o));
        let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_s = p * &(d_p - &row_dot) * scale;
        d_qg.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
        d_kmat.slice_mut(cols).assign(&d_s.t().dot(&cache.q_gated.slice(cols)));
    }
    let d_q = match &cache.gate {
        Some(g) => d_qg * g.view().insert_axis(Axis(1)),
        None => d_qg,
    };
    let d_wk = ctx.t().dot(&d_kmat);
    let d_wv = ctx.t().dot(&d_vmat);
    let d_ctx = d_kmat.dot(&w_k.t()) + d_vmat.dot(&w_v.t());
    (d_q, d_ctx, d_wk, d_wv)
}

/// How queries are routed between the text and image branches.
#[derive(Debug, Clone, Copy)]
pub enum Routing<'a> {
    /// Every query attends to both branches; image branch scaled by lambda.
    Dual,
    /// Queries gated by `1 - MA` (text) and `MA` (image).
    Masked(&'a LatentMask),
}

/// Forward intermediates of [`attention_forward`].
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Array2<T>,
    text: BranchCache<T>,
    image: BranchCache<T>,
    image_scale: T,
}

/// Gradients of the attention output with respect to inputs and weights.
#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub x: Array2<T>,
    pub text: Array2<T>,
    pub image: Array2<T>,
    pub w_q: Array2<T>,
    pub w_kt: Array2<T>,
    pub w_vt: Array2<T>,
    pub w_ki: Array2<T>,
    pub w_vi: Array2<T>,
}

fn check_attention_shapes<T: Real>(x: &Array2<T>, text: &Array2<T>, image: &Array2<T>, w: &AdapterWeights<T>) -> Result<()> {
    w.validate()?;
    if x.ncols() != w.d_model() {
        return Err(validation(format!("query features have dim {}, expected {}", x.ncols(), w.d_model())));
    }
    for (name, ctx) in [("text", text), ("image", image)] {
        if ctx.ncols() != w.d_ctx() {
            return Err(validation(format!("{name} tokens have dim {}, expected {}", ctx.ncols(), w.d_ctx())));
        }
        if ctx.nrows() == 0 {
            return Err(validation(format!("{name} prompt is empty")));
        }
    }
    Ok(())
}

/// Shared forward pass over raw matrices: `x` is `m x d_model`.
pub fn attention_forward<T: Real>(
    x: &Array2<T>,
    routing: Routing<'_>,
    text: &Array2<T>,
    image: &Array2<T>,
    w: &AdapterWeights<T>,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    check_attention_shapes(x, text, image, w)?;
    let q = x.dot(&w.w_q);
    let (gate_t, gate_i, image_scale) = match routing {
        Routing::Dual => (None, None, w.lambda),
        Routing::Masked(ma) => {
            if ma.len() != x.nrows() {
                return Err(validation(format!(
                    "latent mask has {} cells but there are {} queries",
                    ma.len(),
                    x.nrows()
                )));
            }
            let g: Array1<T> = Array1::from(ma.gate::<T>());
            (Some(g.mapv(|v| T::one() - v)), Some(g), T::one())
        }
    };
    let (out_t, text_cache) = branch_forward(&q, gate_t, text, &w.w_kt, &w.w_vt, w.heads);
    let (out_i, image_cache) = branch_forward(&q, gate_i, image, &w.w_ki, &w.w_vi, w.heads);
    let out = out_t + out_i * image_scale;
    Ok((out, AttentionCache { q, text: text_cache, image: image_cache, image_scale }))
}

/// Backward pass matching [`attention_forward`].
pub fn attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    x: &Array2<T>,
    text: &Array2<T>,
    image: &Array2<T>,
    w: &AdapterWeights<T>,
    d_out: &Array2<T>,
) -> AttentionGrads<T> {
    let (dq_t, d_text, w_kt, w_vt) = branch_backward(&cache.text, text, &w.w_kt, &w.w_vt, d_out, w.heads);
    let d_img_out = d_out * cache.image_scale;
    let (dq_i, d_image, w_ki, w_vi) = branch_backward(&cache.image, image, &w.w_ki, &w.w_vi, &d_img_out, w.heads);
    let d_q = dq_t + dq_i;
    debug_assert_eq!(d_q.dim(), cache.q.dim());
    AttentionGrads {
        x: d_q.dot(&w.w_q.t()),
        text: d_text,
        image: d_image,
        w_q: x.t().dot(&d_q),
        w_kt,
        w_vt,
        w_ki,
        w_vi,
    }
}

/// `Softmax(Q K_text^T / sqrt(d)) V_text + lambda Softmax(Q K_image^T / sqrt(d)) V_image`.
pub fn dual_cross_attention<T: Real>(
    queries: &QueryBlock<T>,
    text: &PromptFeatures<T>,
    image: &PromptFeatures<T>,
    w: &AdapterWeights<T>,
) -> Result<Array2<T>> {
    attention_forward(&queries.features, Routing::Dual, &text.tokens, &image.tokens, w).map(|(o, _)| o)
}

/// Mask-routed cross-attention: text keys see `(1 - MA) Q`, image keys see `MA Q`.
pub fn masked_cross_attention<T: Real>(
    queries: &QueryBlock<T>,
    ma: &LatentMask,
    text: &PromptFeatures<T>,
    image: &PromptFeatures<T>,
    w: &AdapterWeights<T>,
) -> Result<Array2<T>> {
    if (ma.height(), ma.width()) != (queries.grid_height, queries.grid_width) {
        return Err(validation(format!(
            "latent mask grid {}x{} does not match query grid {}x{}",
            ma.height(),
            ma.width(),
            queries.grid_height,
            queries.grid_width
        )));
    }
    attention_forward(&queries.features, Routing::Masked(ma), &text.tokens, &image.tokens, w).map(|(o, _)| o)
}

/// Single-branch attention over the text prompt, the `lambda = 0` reference.
pub fn text_only_attention<T: Real>(queries: &QueryBlock<T>, text: &PromptFeatures<T>, w: &AdapterWeights<T>) -> Array2<T> {
    let q = queries.features.dot(&w.w_q);
    branch_forward(&q, None, &text.tokens, &w.w_kt, &w.w_vt, w.heads).0
}
