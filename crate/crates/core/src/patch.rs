//! Latent patchification, training masks and 2-D rotary position embedding.
//!
//! Patches are taken on a regular grid with stride `p − o` along each axis.
//! Tokens are ordered frequency-major: token `i` sits at grid position
//! `(i / n_l, i % n_l)` where `n_l` is the number of time blocks. Within a
//! token the patch is flattened row-major (frequency rows, time columns).

use std::ops::{Add, Div};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Patch height along the frequency axis.
    pub p_f: usize,
    /// Patch width along the time axis.
    pub p_l: usize,
    #[serde(default)]
    pub o_f: usize,
    #[serde(default)]
    pub o_l: usize,
}

impl PatchConfig {
    pub fn new(p_f: usize, p_l: usize, o_f: usize, o_l: usize) -> Result<Self> {
        let cfg = Self { p_f, p_l, o_f, o_l };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_f == 0 || self.p_l == 0 {
            return Err(Error::InvalidArgument(
                "patch sizes must be positive".into(),
            ));
        }
        if self.o_f >= self.p_f || self.o_l >= self.p_l {
            return Err(Error::InvalidArgument(format!(
                "overlap {}x{} must be smaller than patch {}x{}",
                self.o_f, self.o_l, self.p_f, self.p_l
            )));
        }
        Ok(())
    }

    pub fn stride_f(&self) -> usize {
        self.p_f - self.o_f
    }

    pub fn stride_l(&self) -> usize {
        self.p_l - self.o_l
    }

    /// Values per token.
    pub fn token_dim(&self) -> usize {
        self.p_f * self.p_l
    }

    /// Patch grid `(frequency blocks, time blocks)` for an `F×L` latent.
    pub fn grid(&self, f: usize, l: usize) -> Result<(usize, usize)> {
        self.validate()?;
        if f < self.p_f || l < self.p_l {
            return Err(Error::InvalidArgument(format!(
                "latent {f}x{l} smaller than patch {}x{}",
                self.p_f, self.p_l
            )));
        }
        if !(f - self.p_f).is_multiple_of(self.stride_f())
            || !(l - self.p_l).is_multiple_of(self.stride_l())
        {
            return Err(Error::InvalidArgument(format!(
                "latent {f}x{l} is not tiled exactly by patch {}x{} with overlap {}x{}",
                self.p_f, self.p_l, self.o_f, self.o_l
            )));
        }
        Ok((
            (f - self.p_f) / self.stride_f() + 1,
            (l - self.p_l) / self.stride_l() + 1,
        ))
    }
}

/// Number of patches for an `F×L` latent.
pub fn patch_count(f: usize, l: usize, cfg: &PatchConfig) -> Result<usize> {
    let (nf, nl) = cfg.grid(f, l)?;
    Ok(nf * nl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[P, p_f·p_l]`.
    pub tokens: Tensor,
    /// Grid position `(f_index, l_index)` of each token.
    pub coords: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Precomputed window geometry for one `(F, L, cfg)` triple.
#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub f: usize,
    pub l: usize,
    pub cfg: PatchConfig,
    pub coords: Vec<(usize, usize)>,
    /// Latent cell index for each `(token, offset)` entry, flattened `[P, p_f·p_l]`.
    cells: Vec<usize>,
    /// How many token entries cover each latent cell.
    cover: Vec<u16>,
}

impl PatchLayout {
    pub fn new(f: usize, l: usize, cfg: PatchConfig) -> Result<Self> {
        let (nf, nl) = cfg.grid(f, l)?;
        let mut coords = Vec::with_capacity(nf * nl);
        let mut cells = Vec::with_capacity(nf * nl * cfg.token_dim());
        let mut cover = vec![0u16; f * l];
        for bf in 0..nf {
            for bl in 0..nl {
                coords.push((bf, bl));
                for df in 0..cfg.p_f {
                    for dl in 0..cfg.p_l {
                        let cell = (bf * cfg.stride_f() + df) * l + bl * cfg.stride_l() + dl;
                        cells.push(cell);
                        cover[cell] += 1;
                    }
                }
            }
        }
        Ok(Self {
            f,
            l,
            cfg,
            coords,
            cells,
            cover,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.coords.len()
    }

    fn check_latent(&self, len: usize) -> Result<()> {
        if len != self.f * self.l {
            return Err(Error::Shape(format!(
                "latent has {len} values, layout expects {}x{}",
                self.f, self.l
            )));
        }
        Ok(())
    }

    /// Token values for a frequency-major latent slice.
    pub fn patchify_values<T: Copy>(&self, latent: &[T]) -> Result<Vec<T>> {
        self.check_latent(latent.len())?;
        Ok(self.cells.iter().map(|&c| latent[c]).collect())
    }

    /// Averages token entries back onto the latent grid.
    pub fn unpatchify_values<T>(&self, tokens: &[T]) -> Result<Vec<T>>
    where
        T: Copy + Default + Add<Output = T> + Div<Output = T> + From<u16>,
    {
        if tokens.len() != self.cells.len() {
            return Err(Error::Shape(format!(
                "got {} token values, layout expects {}",
                tokens.len(),
                self.cells.len()
            )));
        }
        let mut sums = vec![T::default(); self.f * self.l];
        for (&cell, &v) in self.cells.iter().zip(tokens) {
            sums[cell] = sums[cell] + v;
        }
        Ok(sums
            .into_iter()
            .zip(&self.cover)
            .map(|(s, &n)| if n == 1 { s } else { s / T::from(n) })
            .collect())
    }

    /// `(token entry, latent cell, 1/cover)` triples for a differentiable unpatchify.
    pub fn unpatchify_entries(&self) -> Vec<(usize, usize, f64)> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, c, 1.0 / f64::from(self.cover[c])))
            .collect()
    }
}

pub fn patchify(latent: &Tensor, cfg: &PatchConfig) -> Result<TokenSequence> {
    let (f, l) = latent_dims(latent)?;
    let layout = PatchLayout::new(f, l, *cfg)?;
    let values = layout.patchify_values(latent.data())?;
    Ok(TokenSequence {
        tokens: Tensor::matrix(layout.num_patches(), cfg.token_dim(), values)?,
        coords: layout.coords.clone(),
    })
}

pub fn unpatchify(tokens: &TokenSequence, f: usize, l: usize, cfg: &PatchConfig) -> Result<Tensor> {
    let layout = PatchLayout::new(f, l, *cfg)?;
    if tokens.coords != layout.coords {
        return Err(Error::Shape(format!(
            "token coords do not match a {f}x{l} latent with this patch config"
        )));
    }
    let values = layout.unpatchify_values(tokens.tokens.data())?;
    Tensor::matrix(f, l, values)
}

pub(crate) fn latent_dims(latent: &Tensor) -> Result<(usize, usize)> {
    match latent.shape() {
        [f, l] => Ok((*f, *l)),
        s => Err(Error::Shape(format!("latent must be 2-D, got {s:?}"))),
    }
}

/// Binary patch mask; `true` marks a patch hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub m: Vec<bool>,
    pub gamma: f64,
}

impl MaskSpec {
    /// All patches visible.
    pub fn none(p: usize) -> Self {
        Self {
            m: vec![false; p],
            gamma: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.m.len()).filter(|&i| !self.m[i]).collect()
    }
}

/// `⌊γP⌋`.
pub fn masked_amount(p: usize, gamma: f64) -> usize {
    (gamma * p as f64).floor() as usize
}

/// Masks exactly `⌊γP⌋` patches chosen uniformly without replacement.
pub fn make_mask(p: usize, gamma: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must be in [0, 1], got {gamma}"
        )));
    }
    let k = masked_amount(p, gamma);
    let mut m = vec![false; p];
    for i in rng.choose_indices(p, k) {
        m[i] = true;
    }
    Ok(MaskSpec { m, gamma })
}

/// Rotation angle for every channel pair of a `dim`-wide vector at `(f, l)`.
///
/// The first half of the pairs encodes the time index, the second half the
/// frequency index; within an axis pair `j` turns at `base^(−2j/(dim/2))`.
pub fn rope_angles(dim: usize, f_pos: f64, l_pos: f64, base: f64) -> Vec<f64> {
    let axis = dim / 2;
    let pairs = axis / 2;
    let mut out = Vec::with_capacity(dim / 2);
    for pos in [l_pos, f_pos] {
        for j in 0..pairs {
            let theta = base.powf(-2.0 * j as f64 / axis as f64);
            out.push(theta * pos);
        }
    }
    out
}

fn check_rope_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "2-D rotary needs a dimension divisible by 4, got {dim}"
        )));
    }
    Ok(())
}

/// Rotates adjacent pairs of `vec` by the 2-D rotary angles of `coord`.
pub fn rope2d_rotate(vec: &Tensor, coord: (usize, usize), base: f64) -> Result<Tensor> {
    rope2d_rotate_at(vec, coord.0 as f64, coord.1 as f64, base)
}

/// [`rope2d_rotate`] at real-valued positions.
pub fn rope2d_rotate_at(vec: &Tensor, f_pos: f64, l_pos: f64, base: f64) -> Result<Tensor> {
    let dim = vec.numel();
    check_rope_dim(dim)?;
    let angles = rope_angles(dim, f_pos, l_pos, base);
    let x = vec.data();
    let mut out = x.to_vec();
    for (p, a) in angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        out[2 * p] = x[2 * p] * c - x[2 * p + 1] * s;
        out[2 * p + 1] = x[2 * p] * s + x[2 * p + 1] * c;
    }
    Tensor::new(vec.shape().to_vec(), out)
}

/// Rotation table for a sequence of rows; `None` rows are left unrotated.
pub fn rope_table(
    coords: &[Option<(usize, usize)>],
    head_dim: usize,
    base: f64,
) -> Result<crate::numerics::RopeTable> {
    check_rope_dim(head_dim)?;
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(coords.len() * half);
    let mut sin = Vec::with_capacity(coords.len() * half);
    for c in coords {
        match c {
            Some((f, l)) => {
                for a in rope_angles(head_dim, *f as f64, *l as f64, base) {
                    let (s, co) = a.sin_cos();
                    cos.push(co);
                    sin.push(s);
                }
            }
            None => {
                cos.extend(std::iter::repeat_n(1.0, half));
                sin.extend(std::iter::repeat_n(0.0, half));
            }
        }
    }
    Ok(crate::numerics::RopeTable { cos, sin, head_dim })
}
