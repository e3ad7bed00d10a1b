//! Forward and backward passes of the detector.
//!
//! Input preparation (patch grading, selection, resize, SRM) is separated
//! from the learnable part so the trainer can cache it per image.

use serde::{Deserialize, Serialize};

use super::config::{Ablation, AideConfig, SemanticSource};
use super::embedding::EmbeddingTable;
use super::params::{AideWeights, AsTensor, ConvStack, FusionMlp, Gradients, PatchEncoder, SemanticBranch};
use crate::error::{Error, Result};
use crate::frequency::{select_extreme_patches, BandFilterBank, PatchSelection};
use crate::imageio::{patch_grid, patchify, resize_image, Patch, ResizeMethod, RgbImage};
use crate::nn::{
    activation_backward, apply_activation, avgpool2x2, avgpool2x2_backward, avgpool_global, avgpool_global_backward,
    conv2d, conv2d_backward, linear, linear_backward, linear_map, linear_map_backward, sigmoid, Activation, Tensor,
};
use crate::srm::{srm_residual, SrmKernelSet};

/// Fixed standardization of the semantic encoder input.
pub const SEMANTIC_MEAN: f64 = 0.5;
pub const SEMANTIC_STD: f64 = 0.25;

/// Fixed (non-learnable) preprocessing derived from a configuration.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    cfg: AideConfig,
    bank: BandFilterBank,
    kernels: SrmKernelSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SemanticInput {
    /// The branch is disabled by the ablation.
    Absent,
    /// Standardized `[3, S, S]` image.
    Image(Tensor),
    /// Embedding-table vector.
    Vector(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub selection: Option<PatchSelection>,
    pub grid_cols: usize,
    /// SRM residuals `[3, R, R]` of the highest-graded patches.
    pub max_inputs: Vec<Tensor>,
    /// SRM residuals of the lowest-graded patches.
    pub min_inputs: Vec<Tensor>,
    pub semantic: SemanticInput,
}

impl Preprocessor {
    pub fn new(cfg: &AideConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            bank: cfg.filter_bank()?,
            kernels: cfg.srm_kernel_set()?,
        })
    }

    pub fn config(&self) -> &AideConfig {
        &self.cfg
    }

    /// Patch tiling and grade-based selection.
    pub fn select(&self, img: &RgbImage) -> Result<(Vec<Patch>, PatchSelection)> {
        let patches = patchify(img, self.cfg.patch_n)?;
        let selection = select_extreme_patches(&patches, &self.bank, self.cfg.k_select)?;
        Ok((patches, selection))
    }

    /// Resize to `patch_resize`, then SRM residuals as a `[3, R, R]` tensor.
    pub fn patch_input(&self, patch: &RgbImage) -> Result<Tensor> {
        let r = self.cfg.patch_resize;
        let resized = resize_image(patch, r, r, ResizeMethod::Bilinear)?;
        let res = srm_residual(&resized, &self.kernels)?;
        Tensor::new(vec![3, r, r], res.values)
    }

    pub fn semantic_image(&self, img: &RgbImage) -> Result<Tensor> {
        let s = self.cfg.semantic_input_size;
        let resized = resize_image(img, s, s, ResizeMethod::Bilinear)?;
        let mut v = resized.to_planar(1.0 / 255.0);
        for x in &mut v {
            *x = (*x - SEMANTIC_MEAN) / SEMANTIC_STD;
        }
        Tensor::new(vec![3, s, s], v)
    }

    pub fn semantic_input(&self, img: &RgbImage, id: &str, table: Option<&EmbeddingTable>) -> Result<SemanticInput> {
        if !self.cfg.ablation.uses_semantic() {
            return Ok(SemanticInput::Absent);
        }
        match self.cfg.semantic_source {
            SemanticSource::TinyEncoder => Ok(SemanticInput::Image(self.semantic_image(img)?)),
            SemanticSource::EmbeddedTable => {
                let table = table.ok_or_else(|| Error::Config("embedded_table mode requires an embedding table".into()))?;
                let v = table.lookup(id)?;
                Ok(SemanticInput::Vector(Tensor::vector(v.iter().map(|&x| f64::from(x)).collect())))
            }
        }
    }

    pub fn prepare(&self, img: &RgbImage, id: &str, table: Option<&EmbeddingTable>) -> Result<PreparedInput> {
        let ablation = self.cfg.ablation;
        let (selection, max_inputs, min_inputs) = if ablation.uses_patches() {
            let (patches, sel) = self.select(img)?;
            let encode = |idx: &[usize]| -> Result<Vec<Tensor>> {
                idx.iter().map(|&i| self.patch_input(&patches[i].image)).collect()
            };
            let max_inputs = if ablation.uses_max() { encode(&sel.max_indices)? } else { Vec::new() };
            let min_inputs = if ablation.uses_min() { encode(&sel.min_indices)? } else { Vec::new() };
            (Some(sel), max_inputs, min_inputs)
        } else {
            (None, Vec::new(), Vec::new())
        };
        Ok(PreparedInput {
            selection,
            grid_cols: patch_grid(img, self.cfg.patch_n).0,
            max_inputs,
            min_inputs,
            semantic: self.semantic_input(img, id, table)?,
        })
    }
}

pub(crate) struct StackCache {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2: Tensor,
    p2: Tensor,
    a3: Tensor,
}

/// Runs the conv stack, returning the post-ReLU `[64, h, w]` feature map.
pub(crate) fn stack_forward<T: AsTensor>(s: &ConvStack<T>, x: Tensor) -> Result<(Tensor, StackCache)> {
    let a1 = conv2d(&x, s.conv1_w.t(), s.conv1_b.t(), 1, 1)?;
    let p1 = avgpool2x2(&apply_activation(&a1, Activation::Relu))?;
    let a2 = conv2d(&p1, s.conv2_w.t(), s.conv2_b.t(), 1, 1)?;
    let p2 = avgpool2x2(&apply_activation(&a2, Activation::Relu))?;
    let a3 = conv2d(&p2, s.conv3_w.t(), s.conv3_b.t(), 1, 1)?;
    let out = apply_activation(&a3, Activation::Relu);
    Ok((
        out,
        StackCache {
            input: x,
            a1,
            p1,
            a2,
            p2,
            a3,
        },
    ))
}

pub(crate) fn stack_backward<T: AsTensor>(
    s: &ConvStack<T>,
    c: &StackCache,
    grad_out: &Tensor,
    g: &mut ConvStack<Tensor>,
) -> Result<()> {
    let d3 = activation_backward(&c.a3, Activation::Relu, grad_out)?;
    let g3 = conv2d_backward(&c.p2, s.conv3_w.t(), s.conv3_b.t(), 1, 1, &d3, true)?;
    g.conv3_w.add_assign(&g3.weights);
    g.conv3_b.add_assign(&g3.bias);
    let d2 = avgpool2x2_backward(c.a2.shape(), &g3.input.expect("requested"))?;
    let d2 = activation_backward(&c.a2, Activation::Relu, &d2)?;
    let g2 = conv2d_backward(&c.p1, s.conv2_w.t(), s.conv2_b.t(), 1, 1, &d2, true)?;
    g.conv2_w.add_assign(&g2.weights);
    g.conv2_b.add_assign(&g2.bias);
    let d1 = avgpool2x2_backward(c.a1.shape(), &g2.input.expect("requested"))?;
    let d1 = activation_backward(&c.a1, Activation::Relu, &d1)?;
    let g1 = conv2d_backward(&c.input, s.conv1_w.t(), s.conv1_b.t(), 1, 1, &d1, false)?;
    g.conv1_w.add_assign(&g1.weights);
    g.conv1_b.add_assign(&g1.bias);
    Ok(())
}

pub(crate) struct PatchCache {
    stack: StackCache,
    feat: Tensor,
    pooled: Tensor,
}

/// One patch through `f1`/`f2`: conv stack, global average pool, linear head.
pub fn patch_encoder_forward<T: AsTensor>(e: &PatchEncoder<T>, x: &Tensor) -> Result<Tensor> {
    Ok(patch_forward_cached(e, x.clone())?.0)
}

fn patch_forward_cached<T: AsTensor>(e: &PatchEncoder<T>, x: Tensor) -> Result<(Tensor, PatchCache)> {
    let (feat, stack) = stack_forward(&e.stack, x)?;
    let pooled = avgpool_global(&feat)?;
    let y = linear(&pooled, e.head.w.t(), e.head.b.t())?;
    Ok((y, PatchCache { stack, feat, pooled }))
}

fn patch_backward<T: AsTensor>(
    e: &PatchEncoder<T>,
    c: &PatchCache,
    grad: &Tensor,
    g: &mut PatchEncoder<Tensor>,
) -> Result<()> {
    let lg = linear_backward(&c.pooled, e.head.w.t(), e.head.b.t(), grad)?;
    g.head.w.add_assign(&lg.weights);
    g.head.b.add_assign(&lg.bias);
    let dfeat = avgpool_global_backward(c.feat.shape(), &lg.input)?;
    stack_backward(&e.stack, &c.stack, &dfeat, &mut g.stack)
}

/// Mean over patches of the per-patch embeddings.
struct BranchCache {
    patches: Vec<PatchCache>,
}

fn branch_forward<T: AsTensor>(e: &PatchEncoder<T>, inputs: &[Tensor]) -> Result<(Tensor, BranchCache)> {
    if inputs.is_empty() {
        return Err(Error::arg("patch branch received no patches"));
    }
    let mut sum: Option<Tensor> = None;
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (y, c) = patch_forward_cached(e, x.clone())?;
        match &mut sum {
            Some(s) => s.add_assign(&y),
            None => sum = Some(y),
        }
        caches.push(c);
    }
    let mut mean = sum.expect("non-empty");
    mean.scale(1.0 / inputs.len() as f64);
    Ok((mean, BranchCache { patches: caches }))
}

fn branch_backward<T: AsTensor>(
    e: &PatchEncoder<T>,
    c: &BranchCache,
    grad: &Tensor,
    g: &mut PatchEncoder<Tensor>,
) -> Result<()> {
    let mut share = grad.clone();
    share.scale(1.0 / c.patches.len() as f64);
    for pc in &c.patches {
        patch_backward(e, pc, &share, g)?;
    }
    Ok(())
}

enum SemanticCache {
    Image { stack: StackCache, v: Tensor, projected_shape: Vec<usize> },
    Vector { u: Tensor },
}

fn semantic_forward<T: AsTensor>(s: &SemanticBranch<T>, input: &SemanticInput) -> Result<(Tensor, SemanticCache)> {
    match input {
        SemanticInput::Image(x) => {
            let enc = s
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Config("model has no semantic encoder for image input".into()))?;
            let (v, stack) = stack_forward(enc, x.clone())?;
            let projected = linear_map(&v, s.g.w.t(), s.g.b.t())?;
            let fs = avgpool_global(&projected)?;
            Ok((
                fs,
                SemanticCache::Image {
                    stack,
                    v,
                    projected_shape: projected.shape().to_vec(),
                },
            ))
        }
        SemanticInput::Vector(u) => {
            let g_in = s.g.w.t().shape()[1];
            if u.len() != g_in {
                return Err(Error::Config(format!(
                    "embedding dimension {} does not match projection input {g_in}",
                    u.len()
                )));
            }
            Ok((linear(u, s.g.w.t(), s.g.b.t())?, SemanticCache::Vector { u: u.clone() }))
        }
        SemanticInput::Absent => Err(Error::arg("semantic branch is disabled for this input")),
    }
}

fn semantic_backward<T: AsTensor>(
    s: &SemanticBranch<T>,
    c: &SemanticCache,
    grad: &Tensor,
    g: &mut SemanticBranch<Tensor>,
) -> Result<()> {
    match c {
        SemanticCache::Image {
            stack,
            v,
            projected_shape,
        } => {
            let dproj = avgpool_global_backward(projected_shape, grad)?;
            let lg = linear_map_backward(v, s.g.w.t(), &dproj)?;
            g.g.w.add_assign(&lg.weights);
            g.g.b.add_assign(&lg.bias);
            let enc = s.encoder.as_ref().expect("cache built with encoder");
            let genc = g.encoder.as_mut().expect("gradient layout matches parameters");
            stack_backward(enc, stack, &lg.input, genc)
        }
        SemanticCache::Vector { u } => {
            let lg = linear_backward(u, s.g.w.t(), s.g.b.t(), grad)?;
            g.g.w.add_assign(&lg.weights);
            g.g.b.add_assign(&lg.bias);
            Ok(())
        }
    }
}

struct FusionCache {
    z: Tensor,
    h_pre: Tensor,
    h: Tensor,
}

fn fusion_forward<T: AsTensor>(m: &FusionMlp<T>, z: Tensor) -> Result<(f64, FusionCache)> {
    let h_pre = linear(&z, m.hidden.w.t(), m.hidden.b.t())?;
    let h = apply_activation(&h_pre, Activation::Gelu);
    let out = linear(&h, m.out.w.t(), m.out.b.t())?;
    if out.len() != 1 {
        return Err(Error::arg(format!("fusion head emits {} values, expected 1", out.len())));
    }
    Ok((out.data()[0], FusionCache { z, h_pre, h }))
}

fn fusion_backward<T: AsTensor>(m: &FusionMlp<T>, c: &FusionCache, dlogit: f64, g: &mut FusionMlp<Tensor>) -> Result<Tensor> {
    let lo = linear_backward(&c.h, m.out.w.t(), m.out.b.t(), &Tensor::scalar(dlogit))?;
    g.out.w.add_assign(&lo.weights);
    g.out.b.add_assign(&lo.bias);
    let dh = activation_backward(&c.h_pre, Activation::Gelu, &lo.input)?;
    let lh = linear_backward(&c.z, m.hidden.w.t(), m.hidden.b.t(), &dh)?;
    g.hidden.w.add_assign(&lh.weights);
    g.hidden.b.add_assign(&lh.bias);
    Ok(lh.input)
}

fn mean_features(f_max: Option<&Tensor>, f_min: Option<&Tensor>, ablation: Ablation, d: usize) -> Result<Tensor> {
    let pick = |t: Option<&Tensor>| -> Result<Tensor> {
        let t = t.ok_or_else(|| Error::arg(format!("{ablation} needs a branch embedding that was not provided")))?;
        t.expect_shape(&[d], "patch branch embedding")?;
        Ok(t.clone())
    };
    Ok(match (ablation.uses_max(), ablation.uses_min()) {
        (true, true) => {
            let mut m = pick(f_max)?;
            m.add_assign(&pick(f_min)?);
            m.scale(0.5);
            m
        }
        (true, false) => pick(f_max)?,
        (false, true) => pick(f_min)?,
        (false, false) => Tensor::zeros(&[d]),
    })
}

/// Combines branch embeddings per the ablation and scores them with the
/// fusion MLP: `F_mean = (F_max + F_min) / 2`, logit = `MLP([F_mean; F_s])`.
/// Disabled branches contribute zero vectors.
pub fn fuse_and_score<T: AsTensor>(
    f_max: &Tensor,
    f_min: &Tensor,
    f_s: &Tensor,
    fusion: &FusionMlp<T>,
    ablation: Ablation,
) -> Result<f64> {
    let d = f_max.len();
    f_min.expect_shape(&[d], "F_min")?;
    let z = fused_input(Some(f_max), Some(f_min), Some(f_s), ablation, d, f_s.len())?;
    check_fusion_input(fusion, z.len())?;
    Ok(fusion_forward(fusion, z)?.0)
}

/// Gradients of [`fuse_and_score`] with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputGrads {
    pub f_max: Tensor,
    pub f_min: Tensor,
    pub f_s: Tensor,
}

/// [`fuse_and_score`] plus the gradient of the logit with respect to the
/// branch embeddings and every fusion parameter.
pub fn fuse_and_score_with_grads<T: AsTensor>(
    f_max: &Tensor,
    f_min: &Tensor,
    f_s: &Tensor,
    fusion: &FusionMlp<T>,
    ablation: Ablation,
) -> Result<(f64, FusionInputGrads, FusionMlp<Tensor>)> {
    let d = f_max.len();
    f_min.expect_shape(&[d], "F_min")?;
    let z = fused_input(Some(f_max), Some(f_min), Some(f_s), ablation, d, f_s.len())?;
    check_fusion_input(fusion, z.len())?;
    let (logit, cache) = fusion_forward(fusion, z)?;
    let mut g = fusion.map(&mut |t: &T| Tensor::zeros(t.t().shape()));
    let dz = fusion_backward(fusion, &cache, 1.0, &mut g)?;
    let dmean = &dz.data()[..d];
    let branch = |used: bool, share: f64| {
        Tensor::vector(dmean.iter().map(|&v| if used { v * share } else { 0.0 }).collect())
    };
    let share = if ablation.uses_max() && ablation.uses_min() { 0.5 } else { 1.0 };
    let f_s_grad = if ablation.uses_semantic() {
        Tensor::vector(dz.data()[d..].to_vec())
    } else {
        Tensor::zeros(&[f_s.len()])
    };
    Ok((
        logit,
        FusionInputGrads {
            f_max: branch(ablation.uses_max(), share),
            f_min: branch(ablation.uses_min(), share),
            f_s: f_s_grad,
        },
        g,
    ))
}

fn check_fusion_input<T: AsTensor>(fusion: &FusionMlp<T>, len: usize) -> Result<()> {
    let expect = fusion.hidden.w.t().shape()[1];
    if expect != len {
        return Err(Error::arg(format!("fusion MLP takes {expect} inputs, got {len}")));
    }
    Ok(())
}

fn fused_input(
    f_max: Option<&Tensor>,
    f_min: Option<&Tensor>,
    f_s: Option<&Tensor>,
    ablation: Ablation,
    d: usize,
    d_s: usize,
) -> Result<Tensor> {
    let mean = mean_features(f_max, f_min, ablation, d)?;
    let sem = if ablation.uses_semantic() {
        let s = f_s.ok_or_else(|| Error::arg(format!("{ablation} needs a semantic embedding")))?;
        s.expect_shape(&[d_s], "semantic embedding")?;
        s.clone()
    } else {
        Tensor::zeros(&[d_s])
    };
    let mut z = mean.into_data();
    z.extend_from_slice(sem.data());
    Ok(Tensor::vector(z))
}

/// Activations kept for the backward pass.
pub(crate) struct Trace {
    max: Option<BranchCache>,
    min: Option<BranchCache>,
    semantic: Option<SemanticCache>,
    fusion: FusionCache,
    pub f_max: Option<Tensor>,
    pub f_min: Option<Tensor>,
    pub f_s: Option<Tensor>,
    pub logit: f64,
}

impl StackCache {
    fn relu_margin(&self) -> f64 {
        [&self.a1, &self.a2, &self.a3]
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Trace {
    /// Smallest `|pre-activation|` over every ReLU evaluated in the forward
    /// pass; infinite when no ReLU ran.
    pub(crate) fn relu_margin(&self) -> f64 {
        let patches = [&self.max, &self.min]
            .into_iter()
            .flatten()
            .flat_map(|b| b.patches.iter())
            .map(|p| p.stack.relu_margin());
        let semantic = match &self.semantic {
            Some(SemanticCache::Image { stack, .. }) => stack.relu_margin(),
            _ => f64::INFINITY,
        };
        patches.fold(semantic, f64::min)
    }
}

pub(crate) fn model_forward<T: AsTensor>(
    w: &AideWeights<T>,
    input: &PreparedInput,
    cfg: &AideConfig,
) -> Result<Trace> {
    let ablation = cfg.ablation;
    let (f_max, max) = if ablation.uses_max() {
        let (f, c) = branch_forward(&w.f1, &input.max_inputs)?;
        (Some(f), Some(c))
    } else {
        (None, None)
    };
    let (f_min, min) = if ablation.uses_min() {
        let (f, c) = branch_forward(&w.f2, &input.min_inputs)?;
        (Some(f), Some(c))
    } else {
        (None, None)
    };
    let (f_s, semantic) = if ablation.uses_semantic() {
        let (f, c) = semantic_forward(&w.semantic, &input.semantic)?;
        (Some(f), Some(c))
    } else {
        (None, None)
    };
    let z = fused_input(
        f_max.as_ref(),
        f_min.as_ref(),
        f_s.as_ref(),
        ablation,
        cfg.encoder_dim,
        cfg.semantic_dim,
    )?;
    check_fusion_input(&w.fusion, z.len())?;
    let (logit, fusion) = fusion_forward(&w.fusion, z)?;
    Ok(Trace {
        max,
        min,
        semantic,
        fusion,
        f_max,
        f_min,
        f_s,
        logit,
    })
}

/// Accumulates `dlogit * dlogit/dparams` into `grads`.
pub(crate) fn model_backward<T: AsTensor>(
    w: &AideWeights<T>,
    trace: &Trace,
    dlogit: f64,
    cfg: &AideConfig,
    grads: &mut Gradients,
) -> Result<()> {
    let dz = fusion_backward(&w.fusion, &trace.fusion, dlogit, &mut grads.fusion)?;
    let d = cfg.encoder_dim;
    let dmean = Tensor::vector(dz.data()[..d].to_vec());
    let ds = Tensor::vector(dz.data()[d..].to_vec());
    let ablation = cfg.ablation;
    let both = ablation.uses_max() && ablation.uses_min();
    let mut branch_grad = dmean;
    if both {
        branch_grad.scale(0.5);
    }
    if let Some(c) = &trace.max {
        branch_backward(&w.f1, c, &branch_grad, &mut grads.f1)?;
    }
    if let Some(c) = &trace.min {
        branch_backward(&w.f2, c, &branch_grad, &mut grads.f2)?;
    }
    if let Some(c) = &trace.semantic {
        semantic_backward(&w.semantic, c, &ds, &mut grads.semantic)?;
    }
    Ok(())
}

/// Logit of one prepared input.
pub fn logit<T: AsTensor>(w: &AideWeights<T>, input: &PreparedInput, cfg: &AideConfig) -> Result<f64> {
    Ok(model_forward(w, input, cfg)?.logit)
}

/// Logit and its gradient with respect to every parameter.
pub fn logit_and_grads<T: AsTensor>(
    w: &AideWeights<T>,
    input: &PreparedInput,
    cfg: &AideConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    let trace = model_forward(w, input, cfg)?;
    model_backward(w, &trace, 1.0, cfg, grads)?;
    Ok(trace.logit)
}

/// Runs the full patch branch on an image: grade, select, resize, SRM,
/// encode each selected patch with `f1` (highest) or `f2` (lowest) and
/// average over patches.
pub fn encode_patch_branch<T: AsTensor>(
    img: &RgbImage,
    cfg: &AideConfig,
    f1: &PatchEncoder<T>,
    f2: &PatchEncoder<T>,
) -> Result<(Tensor, Tensor)> {
    let pre = Preprocessor::new(cfg)?;
    let (patches, sel) = pre.select(img)?;
    let inputs = |idx: &[usize]| -> Result<Vec<Tensor>> { idx.iter().map(|&i| pre.patch_input(&patches[i].image)).collect() };
    let f_max = branch_forward(f1, &inputs(&sel.max_indices)?)?.0;
    let f_min = branch_forward(f2, &inputs(&sel.min_indices)?)?.0;
    Ok((f_max, f_min))
}

/// Semantic embedding `F_s = avgpool(g(v))` of an image (tiny encoder) or
/// of its table vector (embedded table).
pub fn encode_semantic<T: AsTensor>(
    img: Option<&RgbImage>,
    id: &str,
    cfg: &AideConfig,
    branch: &SemanticBranch<T>,
    table: Option<&EmbeddingTable>,
) -> Result<Tensor> {
    let pre = Preprocessor::new(cfg)?;
    let input = match cfg.semantic_source {
        SemanticSource::TinyEncoder => {
            let img = img.ok_or_else(|| Error::arg("tiny_encoder mode needs the image"))?;
            SemanticInput::Image(pre.semantic_image(img)?)
        }
        SemanticSource::EmbeddedTable => {
            let table = table.ok_or_else(|| Error::Config("embedded_table mode requires an embedding table".into()))?;
            SemanticInput::Vector(Tensor::vector(table.lookup(id)?.iter().map(|&x| f64::from(x)).collect()))
        }
    };
    Ok(semantic_forward(branch, &input)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub linear_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    /// Top-left pixel.
    pub x: usize,
    pub y: usize,
}

impl PatchCoord {
    pub fn new(linear_index: usize, grid_cols: usize, n: usize) -> Self {
        let grid_row = linear_index / grid_cols;
        let grid_col = linear_index % grid_cols;
        Self {
            linear_index,
            grid_row,
            grid_col,
            x: grid_col * n,
            y: grid_row * n,
        }
    }
}

/// Everything the forward pass computed for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grades: Vec<f64>,
    pub max_patches: Vec<PatchCoord>,
    pub min_patches: Vec<PatchCoord>,
    pub f_max: Option<Vec<f64>>,
    pub f_min: Option<Vec<f64>>,
    pub f_s: Option<Vec<f64>>,
    pub logit: f64,
    pub probability: f64,
}

pub fn diagnose<T: AsTensor>(w: &AideWeights<T>, input: &PreparedInput, cfg: &AideConfig) -> Result<Diagnostics> {
    let trace = model_forward(w, input, cfg)?;
    let coords = |idx: &[usize]| -> Vec<PatchCoord> {
        idx.iter().map(|&i| PatchCoord::new(i, input.grid_cols.max(1), cfg.patch_n)).collect()
    };
    let (grades, max_patches, min_patches) = match &input.selection {
        Some(s) => (s.grades.clone(), coords(&s.max_indices), coords(&s.min_indices)),
        None => (Vec::new(), Vec::new(), Vec::new()),
    };
    Ok(Diagnostics {
        grades,
        max_patches,
        min_patches,
        f_max: trace.f_max.map(Tensor::into_data),
        f_min: trace.f_min.map(Tensor::into_data),
        f_s: trace.f_s.map(Tensor::into_data),
        logit: trace.logit,
        probability: sigmoid(trace.logit),
    })
}
