//! Vision-transformer encoder: patch projection, class token, learned
//! positional embeddings and pre-norm transformer blocks.
//!
//! Parameter names and checkpoint shapes follow the timm `vit_base_patch16_224`
//! layout, so a converted ImageNet checkpoint loads without renaming. Inside
//! the crate every tensor is a 2-D `f64` matrix; see [`crate::checkpoint`] for
//! the mapping to on-disk shapes.

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::data::{BoundingBox, ImageSample, PatchGrid};
use crate::error::{Error, Result};
use crate::params::{ones_row, truncated_normal, xavier_uniform, zeros_row, Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// `(H, W)` of the model input.
    pub input_size: (usize, usize),
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl EncoderConfig {
    /// ViT-Base/16 at 224x224.
    pub fn vit_base() -> Self {
        EncoderConfig {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            input_size: (224, 224),
            channels: 3,
        }
    }

    /// Desk-scale configuration: 64x64 input, 16 patches, two blocks.
    pub fn toy() -> Self {
        EncoderConfig {
            patch_size: 16,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            input_size: (64, 64),
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "model.encoder.heads",
                format!(
                    "embed_dim {} not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::invalid(
                "model.encoder.mlp_ratio",
                "must be positive",
            ));
        }
        if self.channels != 3 {
            return Err(Error::invalid(
                "model.encoder.channels",
                "only 3 channels supported",
            ));
        }
        self.grid()
            .map_err(|e| Error::invalid("model.encoder.patch_size", e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.input_size.0, self.input_size.1, self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        (self.input_size.0 / self.patch_size) * (self.input_size.1 / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// `(name, rows, cols)` of every encoder parameter in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut out = vec![
            ("cls_token".to_string(), 1, d),
            ("pos_embed".to_string(), self.num_patches() + 1, d),
            ("patch_embed.proj.weight".to_string(), d, self.patch_dim()),
            ("patch_embed.proj.bias".to_string(), 1, d),
        ];
        for i in 0..self.depth {
            let b = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (b("norm1.weight"), 1, d),
                (b("norm1.bias"), 1, d),
                (b("attn.qkv.weight"), 3 * d, d),
                (b("attn.qkv.bias"), 1, 3 * d),
                (b("attn.proj.weight"), d, d),
                (b("attn.proj.bias"), 1, d),
                (b("norm2.weight"), 1, d),
                (b("norm2.bias"), 1, d),
                (b("mlp.fc1.weight"), h, d),
                (b("mlp.fc1.bias"), 1, h),
                (b("mlp.fc2.weight"), d, h),
                (b("mlp.fc2.bias"), 1, d),
            ]);
        }
        out.push(("norm.weight".to_string(), 1, d));
        out.push(("norm.bias".to_string(), 1, d));
        out
    }

    /// Random encoder parameters: Glorot linear layers, unit norms, small embeddings.
    pub fn init_params(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
        for (name, rows, cols) in self.parameter_shapes() {
            let value = if name == "cls_token" || name == "pos_embed" {
                truncated_normal(rows, cols, 0.02, rng)
            } else if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                ones_row(cols)
            } else if name.ends_with(".weight") {
                xavier_uniform(rows, cols, rng)
            } else {
                zeros_row(cols)
            };
            store.insert(name, value);
        }
    }

    /// Checks that `store` holds every encoder tensor with the right shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        for (name, rows, cols) in self.parameter_shapes() {
            match store.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(m) if m.dim() != (rows, cols) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                        m.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Splits `H x W x C` pixels into row-major patches.
///
/// Each patch is flattened in `(row, column, channel)` order, so entry
/// `(dy * p + dx) * C + c` of patch `i` is pixel `(row*p + dy, col*p + dx, c)`.
pub fn patchify(pixels: &Array3<f32>, patch_size: usize) -> Result<(Array2<f64>, PatchGrid)> {
    let (h, w, c) = pixels.dim();
    let grid = PatchGrid::new(h, w, patch_size)?;
    let p = patch_size;
    let mut out = Array2::zeros((grid.count(), p * p * c));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let (gy, gx) = (i / grid.cols, i % grid.cols);
        let cell = pixels.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
        for (dst, &src) in row.iter_mut().zip(cell.iter()) {
            *dst = src as f64;
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array2<f64>, grid: &PatchGrid, channels: usize) -> Result<Array3<f32>> {
    let p = grid.patch_size;
    if patches.dim() != (grid.count(), p * p * channels) {
        return Err(Error::Shape(format!(
            "patch matrix {:?} does not fit grid {}x{} with {channels} channels",
            patches.dim(),
            grid.rows,
            grid.cols
        )));
    }
    let mut out = Array3::zeros((grid.height(), grid.width(), channels));
    for (i, row) in patches.rows().into_iter().enumerate() {
        let (gy, gx) = (i / grid.cols, i % grid.cols);
        let mut cell = out.slice_mut(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
        for (dst, &src) in cell.iter_mut().zip(row.iter()) {
            *dst = src as f32;
        }
    }
    Ok(out)
}

/// Pixel box of patch `index` in model-input coordinates.
pub fn patch_to_box(index: usize, grid: &PatchGrid) -> Result<BoundingBox> {
    grid.patch_box(index)
}

/// Encoder output tokens: row 0 is the class token, rows `1..=N` the patches.
#[derive(Debug, Clone)]
pub struct PatchEmbeddings {
    pub tokens: Array2<f64>,
    pub grid: PatchGrid,
}

impl PatchEmbeddings {
    pub fn class_token(&self) -> ndarray::ArrayView1<'_, f64> {
        self.tokens.row(0)
    }

    pub fn patch_tokens(&self) -> ndarray::ArrayView2<'_, f64> {
        self.tokens.slice(s![1.., ..])
    }
}

/// Head-averaged attention of every layer, each `(N+1) x (N+1)` and row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Array2<f64>>,
}

impl AttentionRecord {
    pub fn max_row_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|a| {
                a.rows()
                    .into_iter()
                    .map(|r| (r.sum() - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) struct EncoderGraph {
    pub tokens: Var,
    pub attention: Vec<Mat>,
}

/// Records the encoder forward pass on `g`. `patches` is the `N x (p*p*C)` patch matrix.
pub(crate) fn encoder_graph(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &Bound,
    patches: Var,
) -> EncoderGraph {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = g.linear(
        patches,
        p.var("patch_embed.proj.weight"),
        p.var("patch_embed.proj.bias"),
    );
    let x = g.concat_rows(&[p.var("cls_token"), emb]);
    let mut x = g.add(x, p.var("pos_embed"));
    let mut attention = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let name = |n: &str| format!("blocks.{i}.{n}");
        let h = g.layer_norm(x, p.var(&name("norm1.weight")), p.var(&name("norm1.bias")));
        let qkv = g.linear(
            h,
            p.var(&name("attn.qkv.weight")),
            p.var(&name("attn.qkv.bias")),
        );
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut mean_attn: Option<Mat> = None;
        for hd in 0..cfg.heads {
            let q = g.slice_cols(qkv, hd * dh, dh);
            let k = g.slice_cols(qkv, d + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores);
            match &mut mean_attn {
                Some(m) => *m += g.value(a),
                None => mean_attn = Some(g.value(a).clone()),
            }
            heads.push(g.matmul(a, v));
        }
        let mut mean_attn = mean_attn.expect("at least one head");
        mean_attn /= cfg.heads as f64;
        attention.push(mean_attn);
        let heads = g.concat_cols(&heads);
        let proj = g.linear(
            heads,
            p.var(&name("attn.proj.weight")),
            p.var(&name("attn.proj.bias")),
        );
        x = g.add(x, proj);
        let h = g.layer_norm(x, p.var(&name("norm2.weight")), p.var(&name("norm2.bias")));
        let h = g.linear(
            h,
            p.var(&name("mlp.fc1.weight")),
            p.var(&name("mlp.fc1.bias")),
        );
        let h = g.gelu(h);
        let h = g.linear(
            h,
            p.var(&name("mlp.fc2.weight")),
            p.var(&name("mlp.fc2.bias")),
        );
        x = g.add(x, h);
    }
    let tokens = g.layer_norm(x, p.var("norm.weight"), p.var("norm.bias"));
    EncoderGraph { tokens, attention }
}

/// Standalone encoder with its own parameters.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
}

impl Encoder {
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.init_params(&mut rng, &mut params);
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encode(&self, sample: &ImageSample) -> Result<(PatchEmbeddings, AttentionRecord)> {
        self.encode_pixels(&sample.pixels)
    }

    pub fn encode_pixels(
        &self,
        pixels: &Array3<f32>,
    ) -> Result<(PatchEmbeddings, AttentionRecord)> {
        let (h, w, c) = pixels.dim();
        if (h, w) != self.config.input_size || c != self.config.channels {
            return Err(Error::Shape(format!(
                "input {h}x{w}x{c} does not match encoder input {:?}x{}",
                self.config.input_size, self.config.channels
            )));
        }
        let (patches, grid) = patchify(pixels, self.config.patch_size)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.leaf(patches);
        let out = encoder_graph(&mut g, &self.config, &bound, x);
        let tokens = g.value(out.tokens).clone();
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok((
            PatchEmbeddings { tokens, grid },
            AttentionRecord {
                layers: out.attention,
            },
        ))
    }
}
