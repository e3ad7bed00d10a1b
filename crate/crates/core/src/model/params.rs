//! Parameter containers. Each is generic over the leaf type so the same
//! layout holds trainable state (`ParamState`) and gradients (`Tensor`).

use rand::Rng;

use crate::nn::{ParamState, Tensor};

/// Anything that exposes a value tensor to the forward pass.
pub trait AsTensor {
    fn t(&self) -> &Tensor;
}

impl AsTensor for Tensor {
    fn t(&self) -> &Tensor {
        self
    }
}

impl AsTensor for ParamState {
    fn t(&self) -> &Tensor {
        &self.value
    }
}

pub const STACK_CHANNELS: [usize; 3] = [16, 32, 64];
pub const STACK_OUT: usize = STACK_CHANNELS[2];

/// Named leaves in a fixed traversal order.
pub trait Leaves<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>);
    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    pub w: T,
    pub b: T,
}

impl<T> LinearLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearLayer<U> {
        LinearLayer { w: f(&self.w), b: f(&self.b) }
    }
}

impl LinearLayer<ParamState> {
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: ParamState::new(Tensor::kaiming_uniform(&[d_out, d_in], d_in, rng)),
            b: ParamState::new(Tensor::zeros(&[d_out])),
        }
    }
}

impl<T> Leaves<T> for LinearLayer<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

/// conv3x3(3->16)/relu/avgpool2 -> conv3x3(16->32)/relu/avgpool2 -> conv3x3(32->64)/relu.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<T> {
    pub conv1_w: T,
    pub conv1_b: T,
    pub conv2_w: T,
    pub conv2_b: T,
    pub conv3_w: T,
    pub conv3_b: T,
}

impl<T> ConvStack<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvStack<U> {
        ConvStack {
            conv1_w: f(&self.conv1_w),
            conv1_b: f(&self.conv1_b),
            conv2_w: f(&self.conv2_w),
            conv2_b: f(&self.conv2_b),
            conv3_w: f(&self.conv3_w),
            conv3_b: f(&self.conv3_b),
        }
    }
}

impl ConvStack<ParamState> {
    pub fn init(rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = STACK_CHANNELS;
        let conv = |c_in: usize, c_out: usize, rng: &mut _| {
            ParamState::new(Tensor::kaiming_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng))
        };
        Self {
            conv1_w: conv(3, c1, rng),
            conv1_b: ParamState::new(Tensor::zeros(&[c1])),
            conv2_w: conv(c1, c2, rng),
            conv2_b: ParamState::new(Tensor::zeros(&[c2])),
            conv3_w: conv(c2, c3, rng),
            conv3_b: ParamState::new(Tensor::zeros(&[c3])),
        }
    }
}

impl<T> Leaves<T> for ConvStack<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.conv1_w"), &self.conv1_w));
        out.push((format!("{prefix}.conv1_b"), &self.conv1_b));
        out.push((format!("{prefix}.conv2_w"), &self.conv2_w));
        out.push((format!("{prefix}.conv2_b"), &self.conv2_b));
        out.push((format!("{prefix}.conv3_w"), &self.conv3_w));
        out.push((format!("{prefix}.conv3_b"), &self.conv3_b));
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.conv1_w"), &mut self.conv1_w));
        out.push((format!("{prefix}.conv1_b"), &mut self.conv1_b));
        out.push((format!("{prefix}.conv2_w"), &mut self.conv2_w));
        out.push((format!("{prefix}.conv2_b"), &mut self.conv2_b));
        out.push((format!("{prefix}.conv3_w"), &mut self.conv3_w));
        out.push((format!("{prefix}.conv3_b"), &mut self.conv3_b));
    }
}

/// One patch-branch encoder (`f1` or `f2`): conv stack, global pool, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder<T> {
    pub stack: ConvStack<T>,
    pub head: LinearLayer<T>,
}

impl<T> PatchEncoder<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PatchEncoder<U> {
        PatchEncoder {
            stack: self.stack.map(f),
            head: self.head.map(f),
        }
    }
}

impl PatchEncoder<ParamState> {
    pub fn init(encoder_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: ConvStack::init(rng),
            head: LinearLayer::init(STACK_OUT, encoder_dim, rng),
        }
    }
}

impl<T> Leaves<T> for PatchEncoder<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.stack.leaves(&format!("{prefix}.stack"), out);
        self.head.leaves(&format!("{prefix}.head"), out);
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.stack.leaves_mut(&format!("{prefix}.stack"), out);
        self.head.leaves_mut(&format!("{prefix}.head"), out);
    }
}

/// Semantic branch: optional tiny encoder producing a feature map, then the
/// per-location projection `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBranch<T> {
    pub encoder: Option<ConvStack<T>>,
    pub g: LinearLayer<T>,
}

impl<T> SemanticBranch<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SemanticBranch<U> {
        SemanticBranch {
            encoder: self.encoder.as_ref().map(|e| e.map(f)),
            g: self.g.map(f),
        }
    }
}

impl<T> Leaves<T> for SemanticBranch<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        if let Some(e) = &self.encoder {
            e.leaves(&format!("{prefix}.encoder"), out);
        }
        self.g.leaves(&format!("{prefix}.g"), out);
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        if let Some(e) = &mut self.encoder {
            e.leaves_mut(&format!("{prefix}.encoder"), out);
        }
        self.g.leaves_mut(&format!("{prefix}.g"), out);
    }
}

/// linear(D + D_s -> H_f) / GELU -> linear(H_f -> 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMlp<T> {
    pub hidden: LinearLayer<T>,
    pub out: LinearLayer<T>,
}

impl<T> FusionMlp<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FusionMlp<U> {
        FusionMlp {
            hidden: self.hidden.map(f),
            out: self.out.map(f),
        }
    }
}

impl FusionMlp<ParamState> {
    pub fn init(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: LinearLayer::init(d_in, hidden, rng),
            out: LinearLayer::init(hidden, 1, rng),
        }
    }
}

impl<T> Leaves<T> for FusionMlp<T> {
    fn leaves<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.hidden.leaves(&format!("{prefix}.hidden"), out);
        self.out.leaves(&format!("{prefix}.out"), out);
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.hidden.leaves_mut(&format!("{prefix}.hidden"), out);
        self.out.leaves_mut(&format!("{prefix}.out"), out);
    }
}

/// Every learnable parameter of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct AideWeights<T> {
    pub f1: PatchEncoder<T>,
    pub f2: PatchEncoder<T>,
    pub semantic: SemanticBranch<T>,
    pub fusion: FusionMlp<T>,
}

pub type ModelParams = AideWeights<ParamState>;
pub type Gradients = AideWeights<Tensor>;

impl<T> AideWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AideWeights<U> {
        AideWeights {
            f1: self.f1.map(&mut f),
            f2: self.f2.map(&mut f),
            semantic: self.semantic.map(&mut f),
            fusion: self.fusion.map(&mut f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.f1.leaves("f1", &mut out);
        self.f2.leaves("f2", &mut out);
        self.semantic.leaves("semantic", &mut out);
        self.fusion.leaves("fusion", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.f1.leaves_mut("f1", &mut out);
        self.f2.leaves_mut("f2", &mut out);
        self.semantic.leaves_mut("semantic", &mut out);
        self.fusion.leaves_mut("fusion", &mut out);
        out
    }
}

impl ModelParams {
    /// Kaiming-uniform weights and zero biases drawn in a fixed order from `rng`.
    ///
    /// `semantic_input_dim` is the table dimension in embedded-table mode;
    /// `None` builds the tiny encoder instead.
    pub fn init(
        encoder_dim: usize,
        semantic_dim: usize,
        fusion_hidden: usize,
        semantic_input_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        let f1 = PatchEncoder::init(encoder_dim, rng);
        let f2 = PatchEncoder::init(encoder_dim, rng);
        let (encoder, g_in) = match semantic_input_dim {
            Some(d) => (None, d),
            None => (Some(ConvStack::init(rng)), STACK_OUT),
        };
        let g = LinearLayer::init(g_in, semantic_dim, rng);
        let fusion = FusionMlp::init(encoder_dim + semantic_dim, fusion_hidden, rng);
        Self {
            f1,
            f2,
            semantic: SemanticBranch { encoder, g },
            fusion,
        }
    }

    pub fn zero_grads(&self) -> Gradients {
        self.map(|p| Tensor::zeros(p.shape()))
    }

    pub fn values(&self) -> AideWeights<Tensor> {
        self.map(|p| p.value.clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.value.len()).sum()
    }
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }
}
