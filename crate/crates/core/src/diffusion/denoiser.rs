//! Toy noise predictor `eps(x_t, c, t)` with mask-routed prompt adapters.
//!
//! ```text
//! x_t --conv_in--(+ time)--> [ residual conv -> residual adapter ] x blocks --silu--conv_out--> eps
//!                                                 ^
//!            reference --masked projection--(compression)--> image tokens
//!            text tokens -----------------------------------> text tokens
//! ```

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditioning::{Conditioning, ConditioningMode};
use super::layers::{silu, silu_backward, timestep_embedding, Conv3x3, Linear};
use super::params::{ParamInfo, Parameters, Section};
use super::schedule::{forward_noise, NoiseSchedule};
use super::NoisePredictor;
use crate::error::{config, numeric, validation, Result};
use crate::mask_ops::{flatten_patch_mask, LatentMask};
use crate::patch_encoder::{
    compress_arrays, compress_arrays_backward, project_masked_arrays, project_masked_arrays_backward, random_matrix,
    CompressionQuery, ProjectionWeights,
};
use crate::prompt_adapter::{attention_backward, attention_forward, init_image_weights_from_text, AdapterWeights, AttentionCache, Routing};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels of the reference image fed to the patch projection.
    pub image_channels: usize,
    pub patch_size: usize,
    /// Number of reference patches `N`.
    pub n_patches: usize,
    pub width: usize,
    /// Context token width, equal to the patch projection size.
    pub d_ctx: usize,
    pub d_k: usize,
    pub heads: usize,
    pub blocks: usize,
    pub lambda: f64,
    /// Compress image tokens to this many when set.
    pub compressed_tokens: Option<usize>,
    pub scale_compression: bool,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("image_channels", self.image_channels),
            ("patch_size", self.patch_size),
            ("n_patches", self.n_patches),
            ("width", self.width),
            ("d_ctx", self.d_ctx),
            ("d_k", self.d_k),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config(format!("{name} must be positive")));
            }
        }
        if !self.d_k.is_multiple_of(self.heads) {
            return Err(config(format!("d_k {} not divisible by {} heads", self.d_k, self.heads)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(config("lambda must be a finite non-negative number"));
        }
        if let Some(c) = self.compressed_tokens {
            if c == 0 || c >= self.n_patches {
                return Err(config(format!("compressed token count {c} must be in [1, N = {})", self.n_patches)));
            }
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserBlock<T> {
    pub conv: Conv3x3<T>,
    pub adapter: AdapterWeights<T>,
    /// Projects attention output `d_k -> width`.
    pub w_o: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub null_image: Array2<T>,
    pub projection: ProjectionWeights<T>,
    pub compression: Option<CompressionQuery<T>>,
    pub time: Linear<T>,
    pub conv_in: Conv3x3<T>,
    pub blocks: Vec<DenoiserBlock<T>>,
    pub conv_out: Conv3x3<T>,
}

struct BlockCache<T> {
    h_in: Array2<T>,
    cols: Array2<T>,
    h_mid: Array2<T>,
    attention: AttentionCache<T>,
    attn_out: Array2<T>,
}

/// Intermediates of one forward pass.
pub struct ForwardCache<T> {
    grid: (usize, usize),
    temb: Array2<T>,
    cols_in: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    h_final: Array2<T>,
    cols_out: Array2<T>,
    image_tokens: Array2<T>,
    projected: Option<ProjectedTokens<T>>,
}

struct ProjectedTokens<T> {
    pixel_mask: Array2<T>,
    row_mask: Array2<T>,
    tokens: Array2<T>,
}

impl<T: Real> Denoiser<T> {
    /// Seeded initialization. Image key/value projections start as copies of
    /// the frozen text projections.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let null_image = random_matrix(1, config.d_ctx, 1.0, &mut rng);
        let projection = ProjectionWeights::random(config.patch_dim(), config.d_ctx, &mut rng);
        let compression = config.compressed_tokens.map(|c| {
            let mut q = CompressionQuery::random(c, config.d_ctx, 1.0 / (config.n_patches as f64 * config.d_ctx as f64), &mut rng);
            q.scale_by_tokens = config.scale_compression;
            q
        });
        let time = Linear::random(w, w, 1.0, &mut rng);
        let conv_in = Conv3x3::random(config.latent_channels, w, 1.0, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| {
                let mut adapter = AdapterWeights::random(w, config.d_ctx, config.d_k, config.heads, &mut rng);
                adapter.lambda = T::lit(config.lambda);
                DenoiserBlock {
                    conv: Conv3x3::random(w, w, 0.5, &mut rng),
                    adapter: init_image_weights_from_text(adapter),
                    w_o: random_matrix(config.d_k, w, 0.5 / (config.d_k as f64).sqrt(), &mut rng),
                }
            })
            .collect();
        let conv_out = Conv3x3::random(w, config.latent_channels, 0.1, &mut rng);
        Ok(Self { config, null_image, projection, compression, time, conv_in, blocks, conv_out })
    }

    /// Same structure with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(T::zero());
        }
        z
    }

    /// `self += other * scale`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y * scale;
            }
        }
    }

    fn image_tokens(&self, cond: &Conditioning<T>) -> Result<(Array2<T>, Option<ProjectedTokens<T>>)> {
        if cond.mode == ConditioningMode::TextOnly {
            return Ok((self.null_image.clone(), None));
        }
        if cond.patch_mask.patch_size() != self.config.patch_size {
            return Err(validation("conditioning patch size does not match the model"));
        }
        let pixel_mask = cond.patch_mask.broadcast::<T>(self.config.image_channels);
        let row_mask = flatten_patch_mask(&cond.patch_mask, self.config.d_ctx)?.to_array::<T>();
        let tokens = project_masked_arrays(&cond.reference, &pixel_mask, &self.projection, &row_mask)?;
        let ctx = match &self.compression {
            Some(q) => compress_arrays(&tokens, q)?,
            None => tokens.clone(),
        };
        Ok((ctx, Some(ProjectedTokens { pixel_mask, row_mask, tokens })))
    }

    /// Forward pass returning the noise prediction and the cache for [`Denoiser::backward`].
    pub fn forward(&self, x_t: &Array2<T>, t: usize, cond: &Conditioning<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        let (gh, gw) = cond.grid();
        if x_t.dim() != (gh * gw, self.config.latent_channels) {
            return Err(validation(format!(
                "latent {:?} does not match grid {gh}x{gw} with {} channels",
                x_t.dim(),
                self.config.latent_channels
            )));
        }
        let (image_tokens, projected) = self.image_tokens(cond)?;
        let zeros_mask;
        let routing = match cond.mode {
            ConditioningMode::TextOnly => {
                zeros_mask = LatentMask::filled(gh, gw, false, cond.latent_mask.factor());
                Routing::Masked(&zeros_mask)
            }
            ConditioningMode::Masked => Routing::Masked(&cond.latent_mask),
            ConditioningMode::Unmasked => Routing::Dual,
        };
        let temb = timestep_embedding::<T>(t, self.config.width);
        let tvec = self.time.forward(&temb);
        let (mut h, cols_in) = self.conv_in.forward(x_t, gh, gw);
        h += &tvec.row(0);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (c, cols) = block.conv.forward(&silu(&h), gh, gw);
            let h_mid = &h + &c;
            let (attn_out, attention) = attention_forward(&h_mid, routing, &cond.text, &image_tokens, &block.adapter)?;
            let h_next = &h_mid + &attn_out.dot(&block.w_o);
            blocks.push(BlockCache { h_in: h, cols, h_mid, attention, attn_out });
            h = h_next;
        }
        let (out, cols_out) = self.conv_out.forward(&silu(&h), gh, gw);
        Ok((out, ForwardCache { grid: (gh, gw), temb, cols_in, blocks, h_final: h, cols_out, image_tokens, projected }))
    }

    /// Parameter gradients of `<forward(..), d_out>`.
    pub fn backward(&self, cache: &ForwardCache<T>, cond: &Conditioning<T>, d_out: &Array2<T>) -> Result<Self> {
        let (gh, gw) = cache.grid;
        let mut g = self.zeros_like();
        let du = self.conv_out.backward(&cache.cols_out, d_out, gh, gw, &mut g.conv_out);
        let mut dh = silu_backward(&cache.h_final, &du);
        let mut d_image = Array2::<T>::zeros(cache.image_tokens.dim());
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[i];
            gb.w_o += &bc.attn_out.t().dot(&dh);
            let d_attn = dh.dot(&block.w_o.t());
            let ag = attention_backward(&bc.attention, &bc.h_mid, &cond.text, &cache.image_tokens, &block.adapter, &d_attn);
            gb.adapter.w_q += &ag.w_q;
            gb.adapter.w_kt += &ag.w_kt;
            gb.adapter.w_vt += &ag.w_vt;
            gb.adapter.w_ki += &ag.w_ki;
            gb.adapter.w_vi += &ag.w_vi;
            d_image += &ag.image;
            let dh_mid = dh + &ag.x;
            let du = block.conv.backward(&bc.cols, &dh_mid, gh, gw, &mut gb.conv);
            dh = &dh_mid + &silu_backward(&bc.h_in, &du);
        }
        let d_tvec = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.time.backward(&cache.temb, &d_tvec, &mut g.time);
        self.conv_in.backward(&cache.cols_in, &dh, gh, gw, &mut g.conv_in);
        match &cache.projected {
            None => g.null_image += &d_image,
            Some(p) => {
                let d_tokens = match (&self.compression, &mut g.compression) {
                    (Some(q), Some(gq)) => {
                        let (dq, dz) = compress_arrays_backward(&p.tokens, q, &d_image)?;
                        gq.values += &dq;
                        dz
                    }
                    _ => d_image,
                };
                let pg = project_masked_arrays_backward(&cond.reference, &p.pixel_mask, &self.projection, &p.row_mask, &d_tokens)?;
                g.projection.weight += &pg.weight;
                g.projection.bias += &pg.bias;
            }
        }
        Ok(g)
    }

    /// `L_simple` for one sample and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        x0: &Array2<T>,
        cond: &Conditioning<T>,
        t: usize,
        eps: &Array2<T>,
        schedule: &NoiseSchedule,
    ) -> Result<(T, Self)> {
        let x_t = forward_noise(x0, t, eps, schedule)?.x;
        let (out, cache) = self.forward(&x_t, t, cond)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(numeric(format!("non-finite noise prediction at t = {t}")));
        }
        let diff = out - eps;
        let n = T::lit(diff.len() as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        let d_out = diff * (T::lit(2.0) / n);
        Ok((loss, self.backward(&cache, cond, &d_out)?))
    }

    /// Casts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        let mut out = Denoiser::<U>::new(self.config, 0).expect("config already validated");
        for (dst, src) in out.param_slices_mut().into_iter().zip(self.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.to_f64_lossy());
            }
        }
        out
    }
}

impl<T: Real> NoisePredictor<T> for Denoiser<T> {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn predict(&self, x_t: &Array2<T>, t: usize, cond: &Conditioning<T>) -> Result<Array2<T>> {
        self.forward(x_t, t, cond).map(|(out, _)| out)
    }
}

fn info(name: impl Into<String>, shape: &[usize], section: Section, frozen: bool) -> ParamInfo {
    ParamInfo { name: name.into(), shape: shape.to_vec(), frozen, section }
}

fn slice<T, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> &[T] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_mut<T, D: ndarray::Dimension>(a: &mut ndarray::Array<T, D>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

impl<T: Real> Parameters<T> for Denoiser<T> {
    fn param_infos(&self) -> Vec<ParamInfo> {
        use Section::*;
        let mut v = vec![
            info("null_image", self.null_image.shape(), Encoder, false),
            info("projection.weight", self.projection.weight.shape(), Encoder, false),
            info("projection.bias", self.projection.bias.shape(), Encoder, false),
        ];
        if let Some(q) = &self.compression {
            v.push(info("compression.query", q.values.shape(), Encoder, false));
        }
        v.push(info("time.weight", self.time.weight.shape(), Denoiser, false));
        v.push(info("time.bias", self.time.bias.shape(), Denoiser, false));
        v.push(info("conv_in.weight", self.conv_in.weight.shape(), Denoiser, false));
        v.push(info("conv_in.bias", self.conv_in.bias.shape(), Denoiser, false));
        for (i, b) in self.blocks.iter().enumerate() {
            let frozen = b.adapter.is_text_frozen();
            v.push(info(format!("blocks.{i}.conv.weight"), b.conv.weight.shape(), Denoiser, false));
            v.push(info(format!("blocks.{i}.conv.bias"), b.conv.bias.shape(), Denoiser, false));
            v.push(info(format!("blocks.{i}.adapter.w_q"), b.adapter.w_q.shape(), Adapter, false));
            v.push(info(format!("blocks.{i}.adapter.w_kt"), b.adapter.w_kt.shape(), Adapter, frozen));
            v.push(info(format!("blocks.{i}.adapter.w_vt"), b.adapter.w_vt.shape(), Adapter, frozen));
            v.push(info(format!("blocks.{i}.adapter.w_ki"), b.adapter.w_ki.shape(), Adapter, false));
            v.push(info(format!("blocks.{i}.adapter.w_vi"), b.adapter.w_vi.shape(), Adapter, false));
            v.push(info(format!("blocks.{i}.w_o"), b.w_o.shape(), Denoiser, false));
        }
        v.push(info("conv_out.weight", self.conv_out.weight.shape(), Denoiser, false));
        v.push(info("conv_out.bias", self.conv_out.bias.shape(), Denoiser, false));
        v
    }

    fn param_slices(&self) -> Vec<&[T]> {
        let mut v = vec![slice(&self.null_image), slice(&self.projection.weight), slice(&self.projection.bias)];
        if let Some(q) = &self.compression {
            v.push(slice(&q.values));
        }
        v.extend([slice(&self.time.weight), slice(&self.time.bias), slice(&self.conv_in.weight), slice(&self.conv_in.bias)]);
        for b in &self.blocks {
            v.extend([
                slice(&b.conv.weight),
                slice(&b.conv.bias),
                slice(&b.adapter.w_q),
                slice(&b.adapter.w_kt),
                slice(&b.adapter.w_vt),
                slice(&b.adapter.w_ki),
                slice(&b.adapter.w_vi),
                slice(&b.w_o),
            ]);
        }
        v.extend([slice(&self.conv_out.weight), slice(&self.conv_out.bias)]);
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![
            slice_mut(&mut self.null_image),
            slice_mut(&mut self.projection.weight),
            slice_mut(&mut self.projection.bias),
        ];
        if let Some(q) = &mut self.compression {
            v.push(slice_mut(&mut q.values));
        }
        v.push(slice_mut(&mut self.time.weight));
        v.push(slice_mut(&mut self.time.bias));
        v.push(slice_mut(&mut self.conv_in.weight));
        v.push(slice_mut(&mut self.conv_in.bias));
        for b in &mut self.blocks {
            v.push(slice_mut(&mut b.conv.weight));
            v.push(slice_mut(&mut b.conv.bias));
            v.push(slice_mut(&mut b.adapter.w_q));
            v.push(slice_mut(&mut b.adapter.w_kt));
            v.push(slice_mut(&mut b.adapter.w_vt));
            v.push(slice_mut(&mut b.adapter.w_ki));
            v.push(slice_mut(&mut b.adapter.w_vi));
            v.push(slice_mut(&mut b.w_o));
        }
        v.push(slice_mut(&mut self.conv_out.weight));
        v.push(slice_mut(&mut self.conv_out.bias));
        v
    }
}
