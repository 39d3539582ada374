//! Quality-aware masked diffusion transformer.
//!
//! The noisy latent is patchified and projected to width `d`. The embedding
//! of the quantized quality level is prepended as a prefix token. `N`
//! encoder blocks see only the visible patches; masked positions are then
//! filled with a learned mask token and `M` decoder blocks run over the full
//! sequence. A final adaptive-norm projection maps every patch token back to
//! `p_f·p_l` values, which are unpatchified with overlap averaging.
//!
//! Blocks are pre-norm: self-attention with 2-D rotary on patch tokens (the
//! prefix stays unrotated), cross-attention to the caption, and a GELU
//! feed-forward. The timestep embedding drives shift/scale/gate modulation
//! of the self-attention and feed-forward branches.

mod checkpoint;
mod config;

use std::sync::Arc;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_f32, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;

use crate::diffusion::{forward_diffuse, NoisePredictor, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    grad_check, seeded_normal, Bindings, GradientReport, Graph, ParamStore, Rng, RopeTable, Tensor,
    Var,
};
use crate::patch::{latent_dims, make_mask, rope_table, MaskSpec, PatchLayout};
use crate::quality::{QualityLevel, NUM_LEVELS};
use crate::text::{HashTextEncoder, TextEmbedding, TextEncoder};

/// Sinusoidal features of a timestep: `[cos(t·f_i)…, sin(t·f_i)…]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).cos()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out
}

#[derive(Debug, Clone)]
pub struct QaMdt {
    cfg: ModelConfig,
    params: ParamStore,
    layout: PatchLayout,
    unpatch: Arc<Vec<(usize, usize, f64)>>,
    text: HashTextEncoder,
}

/// Everything a forward pass conditions on.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub t: usize,
    pub level: QualityLevel,
    pub text: &'a TextEmbedding,
}

/// Graph handles shared by every block of one forward pass.
struct BlockContext {
    /// `silu(t_emb)`, `[1, d]`.
    cond: Var,
    /// `[words, text_dim]`.
    text: Var,
    t_emb: Var,
}

/// Encoder output together with the geometry needed to decode it.
pub struct Encoded {
    /// `[1 + visible, d]`, quality prefix first.
    pub hidden: Var,
    pub visible: Vec<usize>,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        rng.normal_vec(rows * cols)
            .into_iter()
            .map(|v| v * std)
            .collect(),
    )
    .expect("sized")
}

impl QaMdt {
    /// Scaled-normal weights (`1/√fan_in`), zero biases, zero adaptive-norm
    /// modulation and a zero final projection; embeddings are unit normal.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let d = cfg.d;
        let pd = cfg.patch.token_dim();
        let hidden = cfg.mlp_ratio * d;
        let td = cfg.text_dim;
        let dense =
            |p: &mut ParamStore, rng: &mut Rng, name: &str, i: usize, o: usize| -> Result<()> {
                p.insert(
                    format!("{name}.w"),
                    normal_matrix(rng, i, o, 1.0 / (i as f64).sqrt()),
                )
            };
        dense(&mut p, &mut rng, "patch_in", pd, d)?;
        p.insert("patch_in.b", Tensor::zeros(&[1, d]))?;
        dense(&mut p, &mut rng, "time.fc1", cfg.time_freq_dim, d)?;
        p.insert("time.fc1.b", Tensor::zeros(&[1, d]))?;
        dense(&mut p, &mut rng, "time.fc2", d, d)?;
        p.insert("time.fc2.b", Tensor::zeros(&[1, d]))?;
        p.insert("quality.table", normal_matrix(&mut rng, NUM_LEVELS, d, 1.0))?;
        p.insert("mask_token", normal_matrix(&mut rng, 1, d, 1.0))?;
        p.insert(
            "text.null",
            normal_matrix(&mut rng, 1, td, 1.0 / (td as f64).sqrt()),
        )?;

        let blocks = (0..cfg.n_enc)
            .map(|i| format!("enc.{i}"))
            .chain((0..cfg.n_dec).map(|i| format!("dec.{i}")));
        for b in blocks {
            p.insert(format!("{b}.ada.w"), Tensor::zeros(&[d, 6 * d]))?;
            p.insert(format!("{b}.ada.b"), Tensor::zeros(&[1, 6 * d]))?;
            dense(&mut p, &mut rng, &format!("{b}.attn.qkv"), d, 3 * d)?;
            dense(&mut p, &mut rng, &format!("{b}.attn.out"), d, d)?;
            p.insert(format!("{b}.attn.out.b"), Tensor::zeros(&[1, d]))?;
            dense(&mut p, &mut rng, &format!("{b}.xattn.q"), d, d)?;
            dense(&mut p, &mut rng, &format!("{b}.xattn.kv"), td, 2 * d)?;
            dense(&mut p, &mut rng, &format!("{b}.xattn.out"), d, d)?;
            p.insert(format!("{b}.xattn.out.b"), Tensor::zeros(&[1, d]))?;
            dense(&mut p, &mut rng, &format!("{b}.mlp.fc1"), d, hidden)?;
            p.insert(format!("{b}.mlp.fc1.b"), Tensor::zeros(&[1, hidden]))?;
            dense(&mut p, &mut rng, &format!("{b}.mlp.fc2"), hidden, d)?;
            p.insert(format!("{b}.mlp.fc2.b"), Tensor::zeros(&[1, d]))?;
        }
        p.insert("final.ada.w", Tensor::zeros(&[d, 2 * d]))?;
        p.insert("final.ada.b", Tensor::zeros(&[1, 2 * d]))?;
        p.insert("final.w", Tensor::zeros(&[d, pd]))?;
        p.insert("final.b", Tensor::zeros(&[1, pd]))?;
        Self::from_params(cfg, p)
    }

    /// Wraps existing parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if params.numel() != cfg.param_count() {
            return Err(Error::InvalidArgument(format!(
                "parameter count {} does not match config ({})",
                params.numel(),
                cfg.param_count()
            )));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let layout = PatchLayout::new(cfg.latent_f, cfg.latent_l, cfg.patch)?;
        let unpatch = Arc::new(layout.unpatchify_entries());
        Ok(Self {
            text: HashTextEncoder::new(cfg.text_dim),
            cfg,
            params,
            layout,
            unpatch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_patches(&self) -> usize {
        self.layout.num_patches()
    }

    pub fn text_encoder(&self) -> &HashTextEncoder {
        &self.text
    }

    fn rope(&self, coords: &[Option<(usize, usize)>]) -> Result<Arc<RopeTable>> {
        Ok(Arc::new(rope_table(
            coords,
            self.cfg.head_dim(),
            self.cfg.rope_base,
        )?))
    }

    fn linear(&self, g: &mut Graph, p: &Bindings, x: Var, name: &str, bias: bool) -> Result<Var> {
        let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
        if bias {
            g.add_row(y, p.get(&format!("{name}.b"))?)
        } else {
            Ok(y)
        }
    }

    fn context(&self, g: &mut Graph, p: &Bindings, c: &Conditioning) -> Result<BlockContext> {
        let feats = timestep_features(c.t, self.cfg.time_freq_dim);
        let feats = g.constant(Tensor::matrix(1, self.cfg.time_freq_dim, feats)?);
        let h = self.linear(g, p, feats, "time.fc1", true)?;
        let h = g.silu(h);
        let t_emb = self.linear(g, p, h, "time.fc2", true)?;
        let cond = g.silu(t_emb);
        let text = match c.text {
            TextEmbedding::Null => p.get("text.null")?,
            TextEmbedding::Tokens(t) => {
                if t.cols() != self.cfg.text_dim {
                    return Err(Error::Shape(format!(
                        "text embedding width {} != text_dim {}",
                        t.cols(),
                        self.cfg.text_dim
                    )));
                }
                g.constant(t.clone())
            }
        };
        Ok(BlockContext { cond, text, t_emb })
    }

    /// Time embedding `[1, d]` for `t`.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(self.params.iter());
        let ctx = self.context(
            &mut g,
            &p,
            &Conditioning {
                t,
                level: QualityLevel::new(1)?,
                text: &TextEmbedding::Null,
            },
        )?;
        Ok(g.value(ctx.t_emb).clone())
    }

    fn attention(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            heads.push(g.matmul(a, vh)?);
        }
        g.concat_cols(&heads)
    }

    fn block(
        &self,
        g: &mut Graph,
        p: &Bindings,
        name: &str,
        x: Var,
        ctx: &BlockContext,
        rope: &Arc<RopeTable>,
    ) -> Result<Var> {
        let d = self.cfg.d;
        let m = self.linear(g, p, ctx.cond, &format!("{name}.ada"), true)?;
        let chunk = |g: &mut Graph, i: usize| g.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

        // self-attention
        let h = g.layer_norm(x);
        let s1 = g.offset(scale1, 1.0);
        let h = g.mul_row(h, s1)?;
        let h = g.add_row(h, shift1)?;
        let qkv = self.linear(g, p, h, &format!("{name}.attn.qkv"), false)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let q = g.rope(q, rope.clone())?;
        let k = g.rope(k, rope.clone())?;
        let a = self.attention(g, q, k, v)?;
        let a = self.linear(g, p, a, &format!("{name}.attn.out"), true)?;
        let a = g.mul_row(a, gate1)?;
        let x = g.add(x, a)?;

        // cross-attention to the caption
        let h = g.layer_norm(x);
        let q = self.linear(g, p, h, &format!("{name}.xattn.q"), false)?;
        let kv = self.linear(g, p, ctx.text, &format!("{name}.xattn.kv"), false)?;
        let k = g.slice_cols(kv, 0, d)?;
        let v = g.slice_cols(kv, d, d)?;
        let a = self.attention(g, q, k, v)?;
        let a = self.linear(g, p, a, &format!("{name}.xattn.out"), true)?;
        let x = g.add(x, a)?;

        // feed-forward
        let h = g.layer_norm(x);
        let s2 = g.offset(scale2, 1.0);
        let h = g.mul_row(h, s2)?;
        let h = g.add_row(h, shift2)?;
        let h = self.linear(g, p, h, &format!("{name}.mlp.fc1"), true)?;
        let h = g.gelu(h);
        let h = self.linear(g, p, h, &format!("{name}.mlp.fc2"), true)?;
        let h = g.mul_row(h, gate2)?;
        g.add(x, h)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (f, l) = latent_dims(z)?;
        if (f, l) != (self.cfg.latent_f, self.cfg.latent_l) {
            return Err(Error::Shape(format!(
                "latent is {f}x{l}, model expects {}x{}",
                self.cfg.latent_f, self.cfg.latent_l
            )));
        }
        Ok(())
    }

    /// Projects the visible patches of `z_t`, prepends the quality token and
    /// runs the encoder. Masked patch values are never read.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bindings,
        z_t: &Tensor,
        c: &Conditioning,
        mask: &MaskSpec,
    ) -> Result<Encoded> {
        let ctx = self.context(g, p, c)?;
        self.encode_with(g, p, z_t, c, mask, &ctx)
    }

    fn encode_with(
        &self,
        g: &mut Graph,
        p: &Bindings,
        z_t: &Tensor,
        c: &Conditioning,
        mask: &MaskSpec,
        ctx: &BlockContext,
    ) -> Result<Encoded> {
        self.check_latent(z_t)?;
        if mask.len() != self.num_patches() {
            return Err(Error::Shape(format!(
                "mask covers {} patches, latent has {}",
                mask.len(),
                self.num_patches()
            )));
        }
        let visible = mask.visible();
        if visible.is_empty() {
            return Err(Error::InvalidArgument("every patch is masked".into()));
        }
        let pd = self.cfg.patch.token_dim();
        let tokens = self.layout.patchify_values(z_t.data())?;
        let vis_data = visible
            .iter()
            .flat_map(|&i| tokens[i * pd..(i + 1) * pd].iter().copied())
            .collect();
        let x = g.constant(Tensor::matrix(visible.len(), pd, vis_data)?);
        let x = self.linear(g, p, x, "patch_in", true)?;
        let q = g.gather_rows(&[p.get("quality.table")?], vec![(0, c.level.index())])?;
        let mut h = g.concat_rows(&[q, x])?;

        let coords: Vec<_> = std::iter::once(None)
            .chain(visible.iter().map(|&i| Some(self.layout.coords[i])))
            .collect();
        let rope = self.rope(&coords)?;
        for i in 0..self.cfg.n_enc {
            h = self.block(g, p, &format!("enc.{i}"), h, ctx, &rope)?;
        }
        Ok(Encoded { hidden: h, visible })
    }

    /// Scatters encoder outputs back to their patch positions and fills the
    /// masked ones with the learned mask token; row 0 stays the quality prefix.
    pub fn insert_mask_tokens(
        &self,
        g: &mut Graph,
        p: &Bindings,
        enc: &Encoded,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let (rows, _) = g.shape(enc.hidden);
        if rows != 1 + enc.visible.len() || mask.visible() != enc.visible {
            return Err(Error::Shape(format!(
                "encoder output has {rows} rows but mask leaves {} patches visible",
                mask.len() - mask.masked_count()
            )));
        }
        let mut index = Vec::with_capacity(1 + mask.len());
        index.push((0, 0));
        let mut next = 1;
        for &masked in &mask.m {
            if masked {
                index.push((1, 0));
            } else {
                index.push((0, next));
                next += 1;
            }
        }
        g.gather_rows(&[enc.hidden, p.get("mask_token")?], index)
    }

    /// Decoder blocks and final projection; returns `[P, p_f·p_l]` noise patches.
    pub fn decode(&self, g: &mut Graph, p: &Bindings, full: Var, c: &Conditioning) -> Result<Var> {
        let ctx = self.context(g, p, c)?;
        self.decode_with(g, p, full, &ctx)
    }

    fn decode_with(
        &self,
        g: &mut Graph,
        p: &Bindings,
        full: Var,
        ctx: &BlockContext,
    ) -> Result<Var> {
        let n = self.num_patches();
        if g.shape(full).0 != 1 + n {
            return Err(Error::Shape(format!(
                "decoder expects {} rows, got {}",
                1 + n,
                g.shape(full).0
            )));
        }
        let coords: Vec<_> = std::iter::once(None)
            .chain(self.layout.coords.iter().map(|&c| Some(c)))
            .collect();
        let rope = self.rope(&coords)?;
        let mut h = full;
        for i in 0..self.cfg.n_dec {
            h = self.block(g, p, &format!("dec.{i}"), h, ctx, &rope)?;
        }
        let d = self.cfg.d;
        let m = self.linear(g, p, ctx.cond, "final.ada", true)?;
        let shift = g.slice_cols(m, 0, d)?;
        let scale = g.slice_cols(m, d, d)?;
        let h = g.layer_norm(h);
        let s = g.offset(scale, 1.0);
        let h = g.mul_row(h, s)?;
        let h = g.add_row(h, shift)?;
        let out = self.linear(g, p, h, "final", true)?;
        g.gather_rows(&[out], (1..=n).map(|r| (0, r)).collect())
    }

    /// Full noise prediction `ε̂` shaped `[F, L]`, as a graph node.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        z_t: &Tensor,
        c: &Conditioning,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let ctx = self.context(g, p, c)?;
        let enc = self.encode_with(g, p, z_t, c, mask, &ctx)?;
        let full = self.insert_mask_tokens(g, p, &enc, mask)?;
        let patches = self.decode_with(g, p, full, &ctx)?;
        g.scatter(
            patches,
            &[self.cfg.latent_f, self.cfg.latent_l],
            self.unpatch.clone(),
        )
    }

    /// Denoising loss `mean((ε − ε̂)²)` as a graph node.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        z_t: &Tensor,
        eps: &Tensor,
        c: &Conditioning,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let pred = self.predict_graph(g, p, z_t, c, mask)?;
        g.mse(pred, eps)
    }

    /// `ε̂` for `z_t` under an explicit mask (training) or none (inference).
    pub fn predict_noise(&self, z_t: &Tensor, c: &Conditioning, mask: &MaskSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(self.params.iter());
        let out = self.predict_graph(&mut g, &p, z_t, c, mask)?;
        let value = g.value(out).clone();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at t={}", c.t)));
        }
        Ok(value)
    }

    /// Encoder output values `[1 + visible, d]`.
    pub fn encode_values(&self, z_t: &Tensor, c: &Conditioning, mask: &MaskSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(self.params.iter());
        let enc = self.encode(&mut g, &p, z_t, c, mask)?;
        Ok(g.value(enc.hidden).clone())
    }
}

impl NoisePredictor for QaMdt {
    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.latent_f, self.cfg.latent_l)
    }

    fn embed_text(&self, caption: Option<&str>) -> TextEmbedding {
        self.text.encode(caption)
    }

    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        level: QualityLevel,
        text: &TextEmbedding,
    ) -> Result<Tensor> {
        let c = Conditioning { t, level, text };
        self.predict_noise(z_t, &c, &MaskSpec::none(self.num_patches()))
    }
}

/// Finite-difference check of the masked denoising loss at a seeded generic
/// point: initial weights plus `0.2·N(0, 1)` jitter on every parameter,
/// `t = 400`, level 2, a real caption and mask ratio 0.3.
pub fn loss_gradient_check(cfg: ModelConfig, seed: u64, h: f64) -> Result<GradientReport> {
    let mut model = QaMdt::init(cfg, seed)?;
    let mut rng = Rng::derive(seed, 1);
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    let mut rng = Rng::derive(seed, 2);
    let shape = [cfg.latent_f, cfg.latent_l];
    let z0 = seeded_normal(&mut rng, &shape)?;
    let eps = seeded_normal(&mut rng, &shape)?;
    let sched = ScheduleConfig::default().build()?;
    let z_t = forward_diffuse(&z0, 400, &eps, &sched)?;
    let mask = make_mask(model.num_patches(), 0.3, &mut rng)?;
    let text = model.text_encoder().encode(Some("warm jazz trio"));
    let c = Conditioning {
        t: 400,
        level: QualityLevel::new(2)?,
        text: &text,
    };
    grad_check(
        model.params(),
        |g, p| model.loss_graph(g, p, &z_t, &eps, &c, &mask),
        h,
    )
}
