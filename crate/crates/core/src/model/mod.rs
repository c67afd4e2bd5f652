//! Tiny ViT-style encoder with a projection head, masked-token input
//! substitution and the moving-average teacher.

mod mask;

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{GatherMap, Matrix, NumericsError, Scalar, Tape, Var};
use crate::seed;

pub use mask::{block_mask, mask_contiguity, random_mask, MaskSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("teacher and student parameter sets differ: {0}")]
    StructureMismatch(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_hidden: usize,
    /// Output embedding dimension `d`.
    pub proj_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            proj_hidden: 128,
            proj_out: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.proj_out == 0 || self.proj_hidden == 0 || self.channels == 0 {
            return bad("proj_out, proj_hidden and channels must be >= 1");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be divisible by heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1");
        }
        Ok(())
    }

    /// Patch grid side of a full-size input.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// A batch of equally sized images, normalized reals, HWC per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Images<T> {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Images<T> {
    pub fn new(count: usize, height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            count * height * width * channels,
            "image buffer size"
        );
        Self {
            count,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Concatenates batches of identical image geometry.
    pub fn concat(parts: &[&Images<T>]) -> Self {
        let first = parts[0];
        let mut data = Vec::new();
        let mut count = 0;
        for p in parts {
            assert_eq!(
                (p.height, p.width, p.channels),
                (first.height, first.width, first.channels),
                "image geometry"
            );
            data.extend_from_slice(&p.data);
            count += p.count;
        }
        Self::new(count, first.height, first.width, first.channels, data)
    }

    /// Rows of flattened `p×p×c` patches, image-major then raster order.
    pub fn patchify(&self, p: usize) -> Matrix<T> {
        let (gh, gw) = (self.height / p, self.width / p);
        let c = self.channels;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.count {
            let img = self.image(i);
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..p {
                        let start = ((py * p + y) * self.width + px * p) * c;
                        out.extend_from_slice(&img[start..start + p * c]);
                    }
                }
            }
        }
        Matrix::new(self.count * gh * gw, p * p * c, out).expect("patch buffer size")
    }
}

/// Which projected tokens a forward pass should produce.
#[derive(Clone, Debug)]
pub enum HeadSelect {
    ClsOnly,
    All,
    /// Class token plus the given patch rows (image-major `b * L + l`).
    ClsAndPatchRows(Vec<usize>),
}

/// Tape handles of one parameter set.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Outputs of a recorded forward pass; rows are L2-normalized.
pub struct GraphOutput {
    pub cls: Var,
    pub patches: Option<Var>,
}

/// Plain forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput<T> {
    /// `batch × d`.
    pub cls: Matrix<T>,
    /// `(batch * L) × d`, image-major.
    pub patches: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    qv_b: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    mask: usize,
    blocks: Vec<BlockIdx>,
    norm_w: usize,
    norm_b: usize,
    head1_w: usize,
    head1_b: usize,
    head2_w: usize,
    head2_b: usize,
}

/// How a tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Parameter set of the encoder (student or teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
    layout: Layout,
}

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= 2.0 {
            return v * INIT_STD;
        }
    }
}

impl<T: Scalar> EncoderState<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng_for(seed, "encoder-init", &[]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, init: Init| -> usize {
            let m = match init {
                Init::TruncNormal => {
                    Matrix::from_fn(rows, cols, |_, _| T::lit(trunc_normal(&mut rng)))
                }
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, T::one()),
            };
            names.push(name);
            tensors.push(m);
            tensors.len() - 1
        };
        let e = config.embed_dim;
        let hidden = e * config.mlp_ratio;
        let patch_w = add(
            "patch_embed.weight".into(),
            config.patch_dim(),
            e,
            Init::TruncNormal,
        );
        let patch_b = add("patch_embed.bias".into(), 1, e, Init::Zeros);
        let cls = add("cls_token".into(), 1, e, Init::TruncNormal);
        let pos = add(
            "pos_embed".into(),
            config.num_patches() + 1,
            e,
            Init::TruncNormal,
        );
        let mask = add("mask_token".into(), 1, e, Init::TruncNormal);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(BlockIdx {
                norm1_w: add(format!("{p}.norm1.weight"), 1, e, Init::Ones),
                norm1_b: add(format!("{p}.norm1.bias"), 1, e, Init::Zeros),
                qkv_w: add(format!("{p}.attn.qkv.weight"), e, 3 * e, Init::TruncNormal),
                // no key bias: it shifts every score in a row equally
                qv_b: add(format!("{p}.attn.qv.bias"), 1, 2 * e, Init::Zeros),
                proj_w: add(format!("{p}.attn.proj.weight"), e, e, Init::TruncNormal),
                proj_b: add(format!("{p}.attn.proj.bias"), 1, e, Init::Zeros),
                norm2_w: add(format!("{p}.norm2.weight"), 1, e, Init::Ones),
                norm2_b: add(format!("{p}.norm2.bias"), 1, e, Init::Zeros),
                fc1_w: add(format!("{p}.mlp.fc1.weight"), e, hidden, Init::TruncNormal),
                fc1_b: add(format!("{p}.mlp.fc1.bias"), 1, hidden, Init::Zeros),
                fc2_w: add(format!("{p}.mlp.fc2.weight"), hidden, e, Init::TruncNormal),
                fc2_b: add(format!("{p}.mlp.fc2.bias"), 1, e, Init::Zeros),
            });
        }
        let norm_w = add("norm.weight".into(), 1, e, Init::Ones);
        let norm_b = add("norm.bias".into(), 1, e, Init::Zeros);
        let head1_w = add(
            "head.fc1.weight".into(),
            e,
            config.proj_hidden,
            Init::TruncNormal,
        );
        let head1_b = add("head.fc1.bias".into(), 1, config.proj_hidden, Init::Zeros);
        let head2_w = add(
            "head.fc2.weight".into(),
            config.proj_hidden,
            config.proj_out,
            Init::TruncNormal,
        );
        let head2_b = add("head.fc2.bias".into(), 1, config.proj_out, Init::Zeros);
        Ok(Self {
            config,
            names,
            tensors,
            layout: Layout {
                patch_w,
                patch_b,
                cls,
                pos,
                mask,
                blocks,
                norm_w,
                norm_b,
                head1_w,
                head1_b,
                head2_w,
                head2_b,
            },
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Matrix<T>) -> Result<(), ModelError> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::StructureMismatch(format!("unknown tensor {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(ModelError::StructureMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Whether weight decay applies to tensor `i`.
    pub fn decays(&self, i: usize) -> bool {
        let n = &self.names[i];
        !(n.contains("norm") || n.ends_with(".bias") || n == "cls_token" || n == "mask_token")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Puts every tensor on the tape, trainable or constant.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    fn check_images(&self, images: &Images<T>) -> Result<(usize, usize), ModelError> {
        let p = self.config.patch_size;
        if images.channels != self.config.channels
            || !images.height.is_multiple_of(p)
            || !images.width.is_multiple_of(p)
            || images.height == 0
            || images.width == 0
        {
            return Err(ModelError::ShapeMismatch(format!(
                "images {}x{}x{} incompatible with patch {} / channels {}",
                images.height, images.width, images.channels, p, self.config.channels
            )));
        }
        Ok((images.height / p, images.width / p))
    }

    /// Records a forward pass on `tape`.
    ///
    /// When masks are given, masked patch embeddings are replaced by the
    /// mask token before positional embeddings are added.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        images: &Images<T>,
        masks: Option<&[MaskSpec]>,
        heads: &HeadSelect,
    ) -> Result<GraphOutput, ModelError> {
        self.forward_impl(tape, pv, images, masks, heads, false)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        images: &Images<T>,
        masks: Option<&[MaskSpec]>,
        heads: &HeadSelect,
        force_interp: bool,
    ) -> Result<GraphOutput, ModelError> {
        let (gh, gw) = self.check_images(images)?;
        let n = images.count;
        let l = gh * gw;
        let t = l + 1;
        let e = self.config.embed_dim;
        let lay = &self.layout;
        let p = |i: usize| pv.vars[i];

        let patches = tape.constant(images.patchify(self.config.patch_size));
        let mut x = tape.matmul(patches, p(lay.patch_w))?;
        x = tape.add(x, p(lay.patch_b))?;

        if let Some(masks) = masks {
            if masks.len() != n || masks.iter().any(|m| m.len() != l) {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} masks for {n} images of {l} patches",
                    masks.len()
                )));
            }
            let flags: Vec<T> = masks
                .iter()
                .flat_map(|m| m.mask.iter().map(|&b| if b { T::one() } else { T::zero() }))
                .collect();
            let keep = Matrix::from_fn(n * l, e, |r, _| T::one() - flags[r]);
            let keep = tape.constant(keep);
            let m_col = tape.constant(Matrix::new(n * l, 1, flags)?);
            let kept = tape.mul(x, keep)?;
            let filler = tape.matmul(m_col, p(lay.mask))?;
            x = tape.add(kept, filler)?;
        }

        // positional embeddings, resampled for non-native grids
        let g0 = self.config.grid();
        let pos_cls = tape.select_rows(p(lay.pos), &[0])?;
        let pos_patch = tape.select_rows(p(lay.pos), &(1..=g0 * g0).collect::<Vec<_>>())?;
        let pos_patch = if (gh, gw) != (g0, g0) || force_interp {
            let interp = tape.constant(interpolation_matrix(g0, g0, gh, gw));
            tape.matmul(interp, pos_patch)?
        } else {
            pos_patch
        };
        let pos_full = tape.vstack(&[pos_cls, pos_patch])?;

        // tokens: [cls, patches...] per image, plus positions
        let cls_len = e as u32;
        let mut map = Vec::with_capacity(n * t * e);
        let mut pos_map = Vec::with_capacity(n * t * e);
        for i in 0..n {
            map.extend(0..cls_len);
            for j in 0..l {
                let base = cls_len as usize + (i * l + j) * e;
                map.extend((base..base + e).map(|v| v as u32));
            }
            pos_map.extend(0..(t * e) as u32);
        }
        let tokens = tape.gather(&[p(lay.cls), x], Rc::new(GatherMap::new(n * t, e, map)))?;
        let pos_rep = tape.gather(&[pos_full], Rc::new(GatherMap::new(n * t, e, pos_map)))?;
        let mut x = tape.add(tokens, pos_rep)?;

        let heads_n = self.config.heads;
        let dh = e / heads_n;
        let (split_q, split_k, split_v, merge) = head_maps(n, t, heads_n, dh);
        let attn_tau = T::lit((dh as f64).sqrt());
        let zero = tape.constant(Matrix::zeros(1, 1));
        let qkv_bias_map = Rc::new(GatherMap::new(
            1,
            3 * e,
            (0..e)
                .chain(std::iter::repeat_n(2 * e, e))
                .chain(e..2 * e)
                .map(|i| i as u32)
                .collect(),
        ));
        for b in &lay.blocks {
            let h = self.layer_norm(tape, x, p(b.norm1_w), p(b.norm1_b))?;
            let qkv = tape.matmul(h, p(b.qkv_w))?;
            let bias = tape.gather(&[p(b.qv_b), zero], qkv_bias_map.clone())?;
            let qkv = tape.add(qkv, bias)?;
            let q = tape.gather(&[qkv], split_q.clone())?;
            let k = tape.gather(&[qkv], split_k.clone())?;
            let v = tape.gather(&[qkv], split_v.clone())?;
            let scores = tape.matmul_ex(q, k, false, true, n * heads_n)?;
            let attn = tape.softmax(scores, attn_tau)?;
            let ctx = tape.matmul_ex(attn, v, false, false, n * heads_n)?;
            let ctx = tape.gather(&[ctx], merge.clone())?;
            let out = tape.matmul(ctx, p(b.proj_w))?;
            let out = tape.add(out, p(b.proj_b))?;
            x = tape.add(x, out)?;

            let h = self.layer_norm(tape, x, p(b.norm2_w), p(b.norm2_b))?;
            let h = tape.matmul(h, p(b.fc1_w))?;
            let h = tape.add(h, p(b.fc1_b))?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, p(b.fc2_w))?;
            let h = tape.add(h, p(b.fc2_b))?;
            x = tape.add(x, h)?;
        }
        let x = self.layer_norm(tape, x, p(lay.norm_w), p(lay.norm_b))?;

        let cls_rows: Vec<usize> = (0..n).map(|i| i * t).collect();
        let cls = tape.select_rows(x, &cls_rows)?;
        let cls = self.head(tape, pv, cls)?;
        let patch_rows: Option<Vec<usize>> = match heads {
            HeadSelect::ClsOnly => None,
            HeadSelect::All => Some((0..n * l).collect()),
            HeadSelect::ClsAndPatchRows(rows) => Some(rows.clone()),
        };
        let patches = match patch_rows {
            None => None,
            Some(rows) if rows.is_empty() => None,
            Some(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= n * l) {
                    return Err(ModelError::ShapeMismatch(format!(
                        "patch row {bad} out of range"
                    )));
                }
                let token_rows: Vec<usize> =
                    rows.iter().map(|&r| (r / l) * t + 1 + r % l).collect();
                let sel = tape.select_rows(x, &token_rows)?;
                Some(self.head(tape, pv, sel)?)
            }
        };
        Ok(GraphOutput { cls, patches })
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        let h = tape.layer_norm(x, T::lit(LN_EPS));
        let h = tape.mul(h, w)?;
        Ok(tape.add(h, b)?)
    }

    fn head(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var, ModelError> {
        let lay = &self.layout;
        let h = tape.matmul(x, pv.vars[lay.head1_w])?;
        let h = tape.add(h, pv.vars[lay.head1_b])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, pv.vars[lay.head2_w])?;
        let h = tape.add(h, pv.vars[lay.head2_b])?;
        Ok(tape.normalize_rows(h)?)
    }

    /// Forward pass without gradients: class and all patch embeddings.
    pub fn encode(
        &self,
        images: &Images<T>,
        masks: Option<&[MaskSpec]>,
    ) -> Result<EncodeOutput<T>, ModelError> {
        self.encode_ex(images, masks, false)
    }

    fn encode_ex(
        &self,
        images: &Images<T>,
        masks: Option<&[MaskSpec]>,
        force_interp: bool,
    ) -> Result<EncodeOutput<T>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let out = self.forward_impl(
            &mut tape,
            &pv,
            images,
            masks,
            &HeadSelect::All,
            force_interp,
        )?;
        let patches = out
            .patches
            .map(|v| tape.value(v).clone())
            .unwrap_or_else(|| Matrix::zeros(0, self.config.proj_out));
        Ok(EncodeOutput {
            cls: tape.value(out.cls).clone(),
            patches,
        })
    }

    /// Class-token embeddings only, in chunks of `chunk` images.
    pub fn encode_cls(&self, images: &Images<T>, chunk: usize) -> Result<Matrix<T>, ModelError> {
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < images.count {
            let end = (start + chunk).min(images.count);
            let sub = Images::new(
                end - start,
                images.height,
                images.width,
                images.channels,
                images.data[start * images.image_len()..end * images.image_len()].to_vec(),
            );
            let mut tape = Tape::new();
            let pv = self.register(&mut tape, false);
            let out = self.forward_graph(&mut tape, &pv, &sub, None, &HeadSelect::ClsOnly)?;
            parts.push(tape.value(out.cls).clone());
            start = end;
        }
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        if refs.is_empty() {
            return Ok(Matrix::zeros(0, self.config.proj_out));
        }
        Ok(Matrix::vstack(&refs)?)
    }
}

/// Gather maps splitting `qkv` into per-head `q`, `k`, `v` blocks and
/// merging per-head context back.
fn head_maps(
    n: usize,
    t: usize,
    heads: usize,
    dh: usize,
) -> (Rc<GatherMap>, Rc<GatherMap>, Rc<GatherMap>, Rc<GatherMap>) {
    let e = heads * dh;
    let mut split = [Vec::new(), Vec::new(), Vec::new()];
    let mut merge = vec![0u32; n * t * e];
    for (which, map) in split.iter_mut().enumerate() {
        map.reserve(n * heads * t * dh);
        for i in 0..n {
            for h in 0..heads {
                for tok in 0..t {
                    let base = (i * t + tok) * 3 * e + which * e + h * dh;
                    map.extend((base..base + dh).map(|v| v as u32));
                }
            }
        }
    }
    for i in 0..n {
        for h in 0..heads {
            for tok in 0..t {
                for j in 0..dh {
                    let src = ((i * heads + h) * t + tok) * dh + j;
                    merge[(i * t + tok) * e + h * dh + j] = src as u32;
                }
            }
        }
    }
    let [q, k, v] = split;
    let rows = n * heads * t;
    (
        Rc::new(GatherMap::new(rows, dh, q)),
        Rc::new(GatherMap::new(rows, dh, k)),
        Rc::new(GatherMap::new(rows, dh, v)),
        Rc::new(GatherMap::new(n * t, e, merge)),
    )
}

fn linear_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|y| {
            let s = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let w = s - lo as f64;
            if hi == lo || w == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - w), (hi, w)]
            }
        })
        .collect()
}

/// Bilinear resampling operator from a `src_h × src_w` grid to
/// `dst_h × dst_w` (half-pixel centers); identity when the grids match.
pub fn interpolation_matrix<T: Scalar>(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Matrix<T> {
    let wy = linear_weights(src_h, dst_h);
    let wx = linear_weights(src_w, dst_w);
    let mut m = Matrix::zeros(dst_h * dst_w, src_h * src_w);
    for (y, ry) in wy.iter().enumerate() {
        for (x, rx) in wx.iter().enumerate() {
            for &(sy, a) in ry {
                for &(sx, b) in rx {
                    let cur = m.get(y * dst_w + x, sy * src_w + sx);
                    m.set(y * dst_w + x, sy * src_w + sx, cur + T::lit(a * b));
                }
            }
        }
    }
    m
}

/// `teacher = m * teacher + (1 - m) * student` over every tensor.
pub fn ema_update<T: Scalar>(
    teacher: &mut EncoderState<T>,
    student: &EncoderState<T>,
    m: f64,
) -> Result<(), ModelError> {
    if teacher.names != student.names
        || teacher
            .tensors
            .iter()
            .zip(&student.tensors)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(ModelError::StructureMismatch(
            "tensor layout differs".into(),
        ));
    }
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        teacher.tensors.clone_from(&student.tensors);
        return Ok(());
    }
    let (keep, take) = (T::lit(m), T::lit(1.0 - m));
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Cosine momentum schedule from `m0` at step 0 to exactly 1 at the end.
pub fn momentum_schedule(step: usize, total_steps: usize, m0: f64) -> f64 {
    if step >= total_steps {
        return 1.0;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    m0 + (1.0 - m0) * (1.0 - phase.cos()) / 2.0
}

/// Global image descriptor used for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalFeature {
    Cls,
    AvgPatch,
}

/// Class-token embedding, or the normalized mean of patch embeddings.
pub fn global_feature<T: Scalar>(
    state: &EncoderState<T>,
    images: &Images<T>,
    mode: GlobalFeature,
) -> Result<Matrix<T>, ModelError> {
    match mode {
        GlobalFeature::Cls => state.encode_cls(images, 256),
        GlobalFeature::AvgPatch => {
            let out = state.encode(images, None)?;
            Ok(average_patches(&out.patches, images.count)?)
        }
    }
}

/// Mean of each image's patch rows, L2-normalized.
pub fn average_patches<T: Scalar>(
    patches: &Matrix<T>,
    count: usize,
) -> Result<Matrix<T>, NumericsError> {
    let l = patches.rows() / count.max(1);
    let d = patches.cols();
    let mut out = Matrix::zeros(count, d);
    for i in 0..count {
        let row = out.row_mut(i);
        for j in 0..l {
            for (acc, &v) in row.iter_mut().zip(patches.row(i * l + j)) {
                *acc += v;
            }
        }
    }
    crate::numerics::rowwise_l2_normalize(&out)
}
