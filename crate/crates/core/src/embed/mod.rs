//! Dual encoder mapping images and captions onto one unit sphere.
//!
//! Image tower: the image is cut into `patch × patch` tiles; each tile goes through a
//! shared affine map and `tanh` (group g1), tile features are mean-pooled, then one
//! hidden block (g2) and the image head project to `embed_dim`.
//!
//! Text tower: token embeddings (g3) are mean-pooled, passed through one hidden block
//! (g3) and the text head.
//!
//! Both towers end in L2 normalization. Forward passes keep the activations needed by
//! the hand-written backward passes in [`ImageCache`] and [`TextCache`].

mod checkpoint;
mod vocab;

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMut1, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use vocab::{Vocabulary, UNKNOWN_TOKEN};

pub const TEMPERATURE_INIT: f64 = 0.07;
pub const TEMPERATURE_MIN: f64 = 0.01;
pub const TEMPERATURE_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    pub patch: usize,
    pub channels: usize,
    pub image_hidden: usize,
    pub image_block: usize,
    pub text_embed: usize,
    pub text_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 3,
            image_hidden: 64,
            image_block: 64,
            text_embed: 32,
            text_hidden: 64,
            embed_dim: 64,
        }
    }
}

impl EncoderDims {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.patch,
            self.channels,
            self.image_hidden,
            self.image_block,
            self.text_embed,
            self.text_hidden,
            self.embed_dim,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.channels != 3 {
            return Err(Error::Config("images are RGB; channels must be 3".into()));
        }
        Ok(())
    }
}

/// Trainability groups, listed from the input side to the output side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    G1,
    G2,
    G3,
    Heads,
    LogTemperature,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 5] = [
        LayerGroup::G1,
        LayerGroup::G2,
        LayerGroup::G3,
        LayerGroup::Heads,
        LayerGroup::LogTemperature,
    ];
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerGroup::G1 => "g1",
            LayerGroup::G2 => "g2",
            LayerGroup::G3 => "g3",
            LayerGroup::Heads => "heads",
            LayerGroup::LogTemperature => "log_tau",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    trainable: [bool; 5],
}

impl FreezeMask {
    pub fn all_frozen() -> Self {
        Self::default()
    }

    pub fn all_trainable() -> Self {
        Self { trainable: [true; 5] }
    }

    pub fn with(groups: &[LayerGroup]) -> Self {
        let mut m = Self::all_frozen();
        for &g in groups {
            m.set(g, true);
        }
        m
    }

    pub fn is_trainable(&self, group: LayerGroup) -> bool {
        self.trainable[group as usize]
    }

    pub fn set(&mut self, group: LayerGroup, trainable: bool) {
        self.trainable[group as usize] = trainable;
    }

    pub fn trainable_groups(&self) -> Vec<LayerGroup> {
        LayerGroup::ALL.into_iter().filter(|&g| self.is_trainable(g)).collect()
    }

    /// True when every group trainable in `self` is also trainable in `other`.
    pub fn is_subset_of(&self, other: &FreezeMask) -> bool {
        LayerGroup::ALL
            .iter()
            .all(|&g| !self.is_trainable(g) || other.is_trainable(g))
    }
}

/// Every parameter tensor of an [`EncoderPair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamId {
    PatchWeight,
    PatchBias,
    ImageBlockWeight,
    ImageBlockBias,
    ImageHeadWeight,
    ImageHeadBias,
    TokenEmbedding,
    TextBlockWeight,
    TextBlockBias,
    TextHeadWeight,
    TextHeadBias,
    LogTemperature,
}

impl ParamId {
    pub const ALL: [ParamId; 12] = [
        ParamId::PatchWeight,
        ParamId::PatchBias,
        ParamId::ImageBlockWeight,
        ParamId::ImageBlockBias,
        ParamId::ImageHeadWeight,
        ParamId::ImageHeadBias,
        ParamId::TokenEmbedding,
        ParamId::TextBlockWeight,
        ParamId::TextBlockBias,
        ParamId::TextHeadWeight,
        ParamId::TextHeadBias,
        ParamId::LogTemperature,
    ];

    pub fn group(self) -> LayerGroup {
        match self {
            ParamId::PatchWeight | ParamId::PatchBias => LayerGroup::G1,
            ParamId::ImageBlockWeight | ParamId::ImageBlockBias => LayerGroup::G2,
            ParamId::TokenEmbedding | ParamId::TextBlockWeight | ParamId::TextBlockBias => LayerGroup::G3,
            ParamId::ImageHeadWeight
            | ParamId::ImageHeadBias
            | ParamId::TextHeadWeight
            | ParamId::TextHeadBias => LayerGroup::Heads,
            ParamId::LogTemperature => LayerGroup::LogTemperature,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::PatchWeight => "image.patch.weight",
            ParamId::PatchBias => "image.patch.bias",
            ParamId::ImageBlockWeight => "image.block.weight",
            ParamId::ImageBlockBias => "image.block.bias",
            ParamId::ImageHeadWeight => "image.head.weight",
            ParamId::ImageHeadBias => "image.head.bias",
            ParamId::TokenEmbedding => "text.embedding",
            ParamId::TextBlockWeight => "text.block.weight",
            ParamId::TextBlockBias => "text.block.bias",
            ParamId::TextHeadWeight => "text.head.weight",
            ParamId::TextHeadBias => "text.head.bias",
            ParamId::LogTemperature => "log_tau",
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ImageEncoderParams<F> {
    pub patch: usize,
    pub patch_weight: Array2<F>,
    pub patch_bias: Array1<F>,
    pub block_weight: Array2<F>,
    pub block_bias: Array1<F>,
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct TextEncoderParams<F> {
    pub vocab: Vocabulary,
    pub embedding: Array2<F>,
    pub block_weight: Array2<F>,
    pub block_bias: Array1<F>,
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct EncoderPair<F> {
    pub image: ImageEncoderParams<F>,
    pub text: TextEncoderParams<F>,
    pub log_temperature: F,
    pub freeze: FreezeMask,
}

fn uniform_matrix<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::of(rng.random_range(-bound..=bound)))
}

fn uniform_vector<F: Scalar, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Array1<F> {
    Array1::from_shape_simple_fn(len, || F::of(rng.random_range(-bound..=bound)))
}

/// Fan-in used for the initialization bound of each tensor.
pub fn fan_in(id: ParamId, dims: &EncoderDims) -> usize {
    match id {
        ParamId::PatchWeight | ParamId::PatchBias => dims.patch_dim(),
        ParamId::ImageBlockWeight | ParamId::ImageBlockBias => dims.image_hidden,
        ParamId::ImageHeadWeight | ParamId::ImageHeadBias => dims.image_block,
        ParamId::TokenEmbedding | ParamId::LogTemperature => 1,
        ParamId::TextBlockWeight | ParamId::TextBlockBias => dims.text_embed,
        ParamId::TextHeadWeight | ParamId::TextHeadBias => dims.text_hidden,
    }
}

/// Uniform `±1/√fan_in` initialization (token embeddings use fan-in 1), `τ = 0.07`,
/// and every group frozen.
pub fn init_params<F: Scalar>(seed: u64, dims: &EncoderDims, vocab: Vocabulary) -> Result<EncoderPair<F>> {
    dims.validate()?;
    let mut rng = rng_from_seed(seed);
    let bound = |id| 1.0 / (fan_in(id, dims) as f64).sqrt();
    let pd = dims.patch_dim();
    let image = ImageEncoderParams {
        patch: dims.patch,
        patch_weight: uniform_matrix(&mut rng, dims.image_hidden, pd, bound(ParamId::PatchWeight)),
        patch_bias: uniform_vector(&mut rng, dims.image_hidden, bound(ParamId::PatchBias)),
        block_weight: uniform_matrix(&mut rng, dims.image_block, dims.image_hidden, bound(ParamId::ImageBlockWeight)),
        block_bias: uniform_vector(&mut rng, dims.image_block, bound(ParamId::ImageBlockBias)),
        head_weight: uniform_matrix(&mut rng, dims.embed_dim, dims.image_block, bound(ParamId::ImageHeadWeight)),
        head_bias: uniform_vector(&mut rng, dims.embed_dim, bound(ParamId::ImageHeadBias)),
    };
    let text = TextEncoderParams {
        embedding: uniform_matrix(&mut rng, vocab.len(), dims.text_embed, bound(ParamId::TokenEmbedding)),
        vocab,
        block_weight: uniform_matrix(&mut rng, dims.text_hidden, dims.text_embed, bound(ParamId::TextBlockWeight)),
        block_bias: uniform_vector(&mut rng, dims.text_hidden, bound(ParamId::TextBlockBias)),
        head_weight: uniform_matrix(&mut rng, dims.embed_dim, dims.text_hidden, bound(ParamId::TextHeadWeight)),
        head_bias: uniform_vector(&mut rng, dims.embed_dim, bound(ParamId::TextHeadBias)),
    };
    Ok(EncoderPair {
        image,
        text,
        log_temperature: F::of(TEMPERATURE_INIT.ln()),
        freeze: FreezeMask::all_frozen(),
    })
}

/// Splits an image into row-major `patch × patch` tiles, each flattened as
/// `(row, column, channel)` with intensities scaled to `[0, 1]`.
pub fn patchify<F: Scalar>(image: &RasterImage, patch: usize) -> Result<Array2<F>> {
    let (w, h) = (image.width as usize, image.height as usize);
    if patch == 0 || w % patch != 0 || h % patch != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} is not divisible into {patch}x{patch} patches"
        )));
    }
    if image.pixels.len() != 3 * w * h {
        return Err(Error::Shape(format!(
            "pixel buffer has {} bytes, expected {}",
            image.pixels.len(),
            3 * w * h
        )));
    }
    let (gx, gy) = (w / patch, h / patch);
    let scale = F::of(1.0 / 255.0);
    let mut out = Array2::zeros((gx * gy, patch * patch * 3));
    for py in 0..gy {
        for px in 0..gx {
            let mut row = out.row_mut(py * gx + px);
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = 3 * ((py * patch + dy) * w + px * patch + dx);
                    let dst = 3 * (dy * patch + dx);
                    for c in 0..3 {
                        row[dst + c] = F::of(f64::from(image.pixels[src + c])) * scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise L2 normalization; returns the normalized rows and the original norms.
pub fn normalize_rows<F: Scalar>(z: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let tiny = F::of(1e-12);
    let norms: Array1<F> = z.rows().into_iter().map(|r| r.dot(&r).sqrt().max(tiny)).collect();
    let mut u = z.clone();
    for (mut row, &n) in u.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (u, norms)
}

/// Gradient through `u = z / ‖z‖`: `(g − u·(u·g)) / ‖z‖`, row by row.
fn normalize_backward<F: Scalar>(u: &Array2<F>, norms: &Array1<F>, du: &Array2<F>) -> Array2<F> {
    let mut dz = du.clone();
    for ((mut g, ur), &n) in dz.rows_mut().into_iter().zip(u.rows()).zip(norms.iter()) {
        let proj = ur.dot(&g);
        g.zip_mut_with(&ur, |gi, &ui| *gi = (*gi - ui * proj) / n);
    }
    dz
}

fn affine<F: Scalar>(x: &Array2<F>, weight: &Array2<F>, bias: &Array1<F>) -> Array2<F> {
    x.dot(&weight.t()) + bias
}

fn tanh_in_place<F: Scalar>(a: &mut Array2<F>) {
    a.mapv_inplace(F::tanh);
}

/// `g ⊙ (1 − y²)` for `y = tanh(x)`.
fn tanh_backward<F: Scalar>(y: &Array2<F>, g: &Array2<F>) -> Array2<F> {
    let mut out = g.clone();
    out.zip_mut_with(y, |gi, &yi| *gi *= F::one() - yi * yi);
    out
}

/// Activations of one image-tower forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ImageCache<F> {
    pub patches_per_image: usize,
    x: Array2<F>,
    a: Array2<F>,
    m: Array2<F>,
    h: Array2<F>,
    norms: Array1<F>,
    pub embeddings: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct TextCache<F> {
    ids: Vec<Vec<usize>>,
    pooled: Array2<F>,
    t: Array2<F>,
    norms: Array1<F>,
    pub embeddings: Array2<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ImageGrads<F> {
    pub patch_weight: Option<Array2<F>>,
    pub patch_bias: Option<Array1<F>>,
    pub block_weight: Option<Array2<F>>,
    pub block_bias: Option<Array1<F>>,
    pub head_weight: Option<Array2<F>>,
    pub head_bias: Option<Array1<F>>,
}

#[derive(Debug, Clone, Default)]
pub struct TextGrads<F> {
    pub embedding: Option<Array2<F>>,
    pub block_weight: Option<Array2<F>>,
    pub block_bias: Option<Array1<F>>,
    pub head_weight: Option<Array2<F>>,
    pub head_bias: Option<Array1<F>>,
}

impl<F: Scalar> ImageEncoderParams<F> {
    pub fn patch_dim(&self) -> usize {
        self.patch_weight.ncols()
    }

    /// Forward pass over a batch of patch matrices (one per image, equal patch counts).
    pub fn forward(&self, images: &[ArrayView2<'_, F>]) -> Result<ImageCache<F>> {
        let Some(first) = images.first() else {
            return Err(Error::Shape("empty image batch".into()));
        };
        let p = first.nrows();
        let pd = self.patch_dim();
        if let Some(bad) = images.iter().find(|x| x.nrows() != p || x.ncols() != pd || p == 0) {
            return Err(Error::Shape(format!(
                "patch matrix {:?} does not match {p} patches of width {pd}",
                bad.shape()
            )));
        }
        let b = images.len();
        let mut x = Array2::zeros((b * p, pd));
        for (i, img) in images.iter().enumerate() {
            x.slice_mut(s![i * p..(i + 1) * p, ..]).assign(img);
        }
        let mut a = affine(&x, &self.patch_weight, &self.patch_bias);
        tanh_in_place(&mut a);
        let inv_p = F::of(1.0 / p as f64);
        let mut m = Array2::zeros((b, a.ncols()));
        for i in 0..b {
            let pooled = a.slice(s![i * p..(i + 1) * p, ..]).sum_axis(Axis(0)) * inv_p;
            m.row_mut(i).assign(&pooled);
        }
        let mut h = affine(&m, &self.block_weight, &self.block_bias);
        tanh_in_place(&mut h);
        let z = affine(&h, &self.head_weight, &self.head_bias);
        let (embeddings, norms) = normalize_rows(&z);
        Ok(ImageCache {
            patches_per_image: p,
            x,
            a,
            m,
            h,
            norms,
            embeddings,
        })
    }

    /// Backward pass from `dL/d(embeddings)`. Tensors of frozen groups get `None`, and
    /// the pass stops as soon as no earlier group is trainable.
    pub fn backward(&self, cache: &ImageCache<F>, d_emb: &Array2<F>, mask: &FreezeMask) -> ImageGrads<F> {
        let mut grads = ImageGrads::default();
        let (heads, g2, g1) = (
            mask.is_trainable(LayerGroup::Heads),
            mask.is_trainable(LayerGroup::G2),
            mask.is_trainable(LayerGroup::G1),
        );
        if !(heads || g2 || g1) {
            return grads;
        }
        let dz = normalize_backward(&cache.embeddings, &cache.norms, d_emb);
        if heads {
            grads.head_weight = Some(dz.t().dot(&cache.h));
            grads.head_bias = Some(dz.sum_axis(Axis(0)));
        }
        if !(g2 || g1) {
            return grads;
        }
        let dh = tanh_backward(&cache.h, &dz.dot(&self.head_weight));
        if g2 {
            grads.block_weight = Some(dh.t().dot(&cache.m));
            grads.block_bias = Some(dh.sum_axis(Axis(0)));
        }
        if !g1 {
            return grads;
        }
        let dm = dh.dot(&self.block_weight);
        let p = cache.patches_per_image;
        let inv_p = F::of(1.0 / p as f64);
        let mut da = Array2::zeros(cache.a.raw_dim());
        for (i, dm_row) in dm.rows().into_iter().enumerate() {
            let scaled = &dm_row * inv_p;
            for mut row in da.slice_mut(s![i * p..(i + 1) * p, ..]).rows_mut() {
                row.assign(&scaled);
            }
        }
        let da = tanh_backward(&cache.a, &da);
        grads.patch_weight = Some(da.t().dot(&cache.x));
        grads.patch_bias = Some(da.sum_axis(Axis(0)));
        grads
    }
}

impl<F: Scalar> TextEncoderParams<F> {
    pub fn forward(&self, captions: &[Vec<usize>]) -> Result<TextCache<F>> {
        if captions.is_empty() {
            return Err(Error::Shape("empty caption batch".into()));
        }
        let vocab = self.embedding.nrows();
        let e = self.embedding.ncols();
        let mut pooled = Array2::zeros((captions.len(), e));
        for (b, ids) in captions.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::Shape(format!("caption {b} has no tokens")));
            }
            let mut row = pooled.row_mut(b);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Shape(format!("token id {id} outside vocabulary of {vocab}")));
                }
                row += &self.embedding.row(id);
            }
            row /= F::of(ids.len() as f64);
        }
        let mut t = affine(&pooled, &self.block_weight, &self.block_bias);
        tanh_in_place(&mut t);
        let z = affine(&t, &self.head_weight, &self.head_bias);
        let (embeddings, norms) = normalize_rows(&z);
        Ok(TextCache {
            ids: captions.to_vec(),
            pooled,
            t,
            norms,
            embeddings,
        })
    }

    pub fn backward(&self, cache: &TextCache<F>, d_emb: &Array2<F>, mask: &FreezeMask) -> TextGrads<F> {
        let mut grads = TextGrads::default();
        let (heads, g3) = (mask.is_trainable(LayerGroup::Heads), mask.is_trainable(LayerGroup::G3));
        if !(heads || g3) {
            return grads;
        }
        let dz = normalize_backward(&cache.embeddings, &cache.norms, d_emb);
        if heads {
            grads.head_weight = Some(dz.t().dot(&cache.t));
            grads.head_bias = Some(dz.sum_axis(Axis(0)));
        }
        if !g3 {
            return grads;
        }
        let dt = tanh_backward(&cache.t, &dz.dot(&self.head_weight));
        grads.block_weight = Some(dt.t().dot(&cache.pooled));
        grads.block_bias = Some(dt.sum_axis(Axis(0)));
        let dpooled = dt.dot(&self.block_weight);
        let mut de = Array2::zeros(self.embedding.raw_dim());
        for (ids, g) in cache.ids.iter().zip(dpooled.rows()) {
            let share = &g * F::of(1.0 / ids.len() as f64);
            for &id in ids {
                let mut row = de.row_mut(id);
                row += &share;
            }
        }
        grads.embedding = Some(de);
        grads
    }

    pub fn encode_ids(&self, captions: &[Vec<usize>]) -> Result<Array2<F>> {
        Ok(self.forward(captions)?.embeddings)
    }
}

impl<F: Scalar> EncoderPair<F> {
    pub fn temperature(&self) -> F {
        self.log_temperature.exp()
    }

    /// Pulls `log τ` back into `[ln 0.01, ln 1]`.
    pub fn clamp_temperature(&mut self) {
        let lo = F::of(TEMPERATURE_MIN.ln());
        let hi = F::of(TEMPERATURE_MAX.ln());
        self.log_temperature = self.log_temperature.max(lo).min(hi);
    }

    pub fn embed_dim(&self) -> usize {
        self.image.head_weight.nrows()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            patch: self.image.patch,
            channels: 3,
            image_hidden: self.image.patch_weight.nrows(),
            image_block: self.image.block_weight.nrows(),
            text_embed: self.text.embedding.ncols(),
            text_hidden: self.text.block_weight.nrows(),
            embed_dim: self.embed_dim(),
        }
    }

    pub fn tensor(&self, id: ParamId) -> ArrayViewD<'_, F> {
        match id {
            ParamId::PatchWeight => self.image.patch_weight.view().into_dyn(),
            ParamId::PatchBias => self.image.patch_bias.view().into_dyn(),
            ParamId::ImageBlockWeight => self.image.block_weight.view().into_dyn(),
            ParamId::ImageBlockBias => self.image.block_bias.view().into_dyn(),
            ParamId::ImageHeadWeight => self.image.head_weight.view().into_dyn(),
            ParamId::ImageHeadBias => self.image.head_bias.view().into_dyn(),
            ParamId::TokenEmbedding => self.text.embedding.view().into_dyn(),
            ParamId::TextBlockWeight => self.text.block_weight.view().into_dyn(),
            ParamId::TextBlockBias => self.text.block_bias.view().into_dyn(),
            ParamId::TextHeadWeight => self.text.head_weight.view().into_dyn(),
            ParamId::TextHeadBias => self.text.head_bias.view().into_dyn(),
            ParamId::LogTemperature => ArrayView1::from(std::slice::from_ref(&self.log_temperature)).into_dyn(),
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> ArrayViewMutD<'_, F> {
        match id {
            ParamId::PatchWeight => self.image.patch_weight.view_mut().into_dyn(),
            ParamId::PatchBias => self.image.patch_bias.view_mut().into_dyn(),
            ParamId::ImageBlockWeight => self.image.block_weight.view_mut().into_dyn(),
            ParamId::ImageBlockBias => self.image.block_bias.view_mut().into_dyn(),
            ParamId::ImageHeadWeight => self.image.head_weight.view_mut().into_dyn(),
            ParamId::ImageHeadBias => self.image.head_bias.view_mut().into_dyn(),
            ParamId::TokenEmbedding => self.text.embedding.view_mut().into_dyn(),
            ParamId::TextBlockWeight => self.text.block_weight.view_mut().into_dyn(),
            ParamId::TextBlockBias => self.text.block_bias.view_mut().into_dyn(),
            ParamId::TextHeadWeight => self.text.head_weight.view_mut().into_dyn(),
            ParamId::TextHeadBias => self.text.head_bias.view_mut().into_dyn(),
            ParamId::LogTemperature => {
                ArrayViewMut1::from(std::slice::from_mut(&mut self.log_temperature)).into_dyn()
            }
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.freeze.is_trainable(id.group())
    }

    pub fn trainable_param_count(&self) -> usize {
        ParamId::ALL
            .iter()
            .filter(|&&id| self.is_trainable(id))
            .map(|&id| self.tensor(id).len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        ParamId::ALL.iter().map(|&id| self.tensor(id).len()).sum()
    }

    pub fn encode_patches(&self, patches: &[ArrayView2<'_, F>]) -> Result<Array2<F>> {
        Ok(self.image.forward(patches)?.embeddings)
    }

    pub fn encode_captions<S: AsRef<str>>(&self, captions: &[S]) -> Result<Array2<F>> {
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| self.text.vocab.encode(c.as_ref())).collect();
        self.text.encode_ids(&ids)
    }
}

/// Unit-norm embedding of one image.
pub fn encode_image<F: Scalar>(pair: &EncoderPair<F>, image: &RasterImage) -> Result<Array1<F>> {
    let patches = patchify::<F>(image, pair.image.patch)?;
    let emb = pair.encode_patches(&[patches.view()])?;
    Ok(emb.row(0).to_owned())
}

/// Unit-norm embedding of one caption. Unknown tokens map to the unknown row.
pub fn encode_text<F: Scalar>(pair: &EncoderPair<F>, caption: &str) -> Result<Array1<F>> {
    let ids = pair.text.vocab.encode(caption);
    let emb = pair.text.encode_ids(&[ids])?;
    Ok(emb.row(0).to_owned())
}

/// Per-tensor gradients, in [`ParamId::ALL`] order. Frozen tensors hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    tensors: Vec<ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(pair: &EncoderPair<F>) -> Self {
        Self {
            tensors: ParamId::ALL
                .iter()
                .map(|&id| ArrayD::zeros(pair.tensor(id).raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id as usize]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        self.tensors[id as usize] = value;
    }

    /// Flattened gradient over all tensors, in [`ParamId::ALL`] order.
    pub fn flatten(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn scale(&mut self, by: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * by);
        }
    }

    /// Errors with the tensor name on the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (&id, t) in ParamId::ALL.iter().zip(&self.tensors) {
            if let Some(v) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::numeric(id.name(), format!("non-finite gradient entry {v}")));
            }
        }
        Ok(())
    }

    pub fn absorb_image(&mut self, g: ImageGrads<F>) {
        let pairs = [
            (ParamId::PatchWeight, g.patch_weight.map(|a| a.into_dyn())),
            (ParamId::PatchBias, g.patch_bias.map(|a| a.into_dyn())),
            (ParamId::ImageBlockWeight, g.block_weight.map(|a| a.into_dyn())),
            (ParamId::ImageBlockBias, g.block_bias.map(|a| a.into_dyn())),
            (ParamId::ImageHeadWeight, g.head_weight.map(|a| a.into_dyn())),
            (ParamId::ImageHeadBias, g.head_bias.map(|a| a.into_dyn())),
        ];
        for (id, value) in pairs {
            if let Some(v) = value {
                self.set(id, v);
            }
        }
    }

    pub fn absorb_text(&mut self, g: TextGrads<F>) {
        let pairs = [
            (ParamId::TokenEmbedding, g.embedding.map(|a| a.into_dyn())),
            (ParamId::TextBlockWeight, g.block_weight.map(|a| a.into_dyn())),
            (ParamId::TextBlockBias, g.block_bias.map(|a| a.into_dyn())),
            (ParamId::TextHeadWeight, g.head_weight.map(|a| a.into_dyn())),
            (ParamId::TextHeadBias, g.head_bias.map(|a| a.into_dyn())),
        ];
        for (id, value) in pairs {
            if let Some(v) = value {
                self.set(id, v);
            }
        }
    }
}
