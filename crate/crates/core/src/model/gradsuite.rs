//! Finite-difference checks of every layer backward and of the end-to-end
//! logit, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, AideConfig, SemanticSource};
use super::embedding::EmbeddingTable;
use super::params::{AideWeights, FusionMlp, ModelParams};
use super::pipeline::{fuse_and_score_with_grads, logit_and_grads, model_forward, Preprocessor};
use crate::imageio::RgbImage;
use crate::nn::{
    activation_backward, apply_activation, avgpool2x2, avgpool2x2_backward, avgpool_global, avgpool_global_backward,
    bce_with_logits, conv2d, conv2d_backward, dot, grad_check, linear, linear_backward, linear_map,
    linear_map_backward, probe_like, Activation, GradCheckReport, Tensor,
};

pub const SUITE_TOLERANCE: f64 = 1e-6;
/// Elements probed per parameter tensor in the end-to-end checks.
const E2E_SAMPLES: usize = 10;
/// Minimum ReLU pre-activation magnitude at the end-to-end probe point.
const KINK_MARGIN: f64 = 2e-5;
const KINK_ATTEMPTS: usize = 256;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Values bounded away from zero so ReLU kinks stay out of reach of the
/// finite-difference step.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// Checks of the individual kernels against `dot(probe, layer(x))`.
pub fn layer_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, stride, pad) in [("conv2d_s1_p1", 1, 1), ("conv2d_s2_p0", 2, 0)] {
        // Small inputs keep |y|, and with it the rounding noise of the
        // differences, well below the input gradients.
        let mut p = vec![uniform(&[3, 7, 6], &mut rng), uniform(&[4, 3, 3, 3], &mut rng), uniform(&[4], &mut rng)];
        p[0].scale(0.25);
        p[2].scale(0.25);
        let probe = probe_like(&conv2d(&p[0], &p[1], &p[2], stride, pad).unwrap(), &mut rng);
        out.push(grad_check(
            name,
            &mut p,
            |p| {
                let y = conv2d(&p[0], &p[1], &p[2], stride, pad).unwrap();
                let g = conv2d_backward(&p[0], &p[1], &p[2], stride, pad, &probe, true).unwrap();
                (dot(&probe, &y), vec![g.input.unwrap(), g.weights, g.bias])
            },
            SUITE_TOLERANCE,
            None,
        ));
    }

    for (name, kind) in [("relu", Activation::Relu), ("gelu", Activation::Gelu)] {
        let mut p = vec![off_zero(&[2, 4, 5], &mut rng)];
        let probe = probe_like(&p[0], &mut rng);
        out.push(grad_check(
            name,
            &mut p,
            |p| {
                let y = apply_activation(&p[0], kind);
                (dot(&probe, &y), vec![activation_backward(&p[0], kind, &probe).unwrap()])
            },
            SUITE_TOLERANCE,
            None,
        ));
    }

    let mut p = vec![uniform(&[2, 5, 6], &mut rng)];
    let probe = probe_like(&avgpool2x2(&p[0]).unwrap(), &mut rng);
    out.push(grad_check(
        "avgpool2x2",
        &mut p,
        |p| {
            let y = avgpool2x2(&p[0]).unwrap();
            (dot(&probe, &y), vec![avgpool2x2_backward(p[0].shape(), &probe).unwrap()])
        },
        SUITE_TOLERANCE,
        None,
    ));

    let mut p = vec![uniform(&[3, 4, 5], &mut rng)];
    let probe = probe_like(&Tensor::zeros(&[3]), &mut rng);
    out.push(grad_check(
        "avgpool_global",
        &mut p,
        |p| {
            let y = avgpool_global(&p[0]).unwrap();
            (dot(&probe, &y), vec![avgpool_global_backward(p[0].shape(), &probe).unwrap()])
        },
        SUITE_TOLERANCE,
        None,
    ));

    let mut p = vec![uniform(&[6], &mut rng), uniform(&[4, 6], &mut rng), uniform(&[4], &mut rng)];
    let probe = probe_like(&Tensor::zeros(&[4]), &mut rng);
    out.push(grad_check(
        "linear",
        &mut p,
        |p| {
            let y = linear(&p[0], &p[1], &p[2]).unwrap();
            let g = linear_backward(&p[0], &p[1], &p[2], &probe).unwrap();
            (dot(&probe, &y), vec![g.input, g.weights, g.bias])
        },
        SUITE_TOLERANCE,
        None,
    ));

    let mut p = vec![uniform(&[5, 3, 4], &mut rng), uniform(&[6, 5], &mut rng), uniform(&[6], &mut rng)];
    let probe = probe_like(&Tensor::zeros(&[6, 3, 4]), &mut rng);
    out.push(grad_check(
        "linear_map",
        &mut p,
        |p| {
            let y = linear_map(&p[0], &p[1], &p[2]).unwrap();
            let g = linear_map_backward(&p[0], &p[1], &probe).unwrap();
            (dot(&probe, &y), vec![g.input, g.weights, g.bias])
        },
        SUITE_TOLERANCE,
        None,
    ));

    for (name, z, y) in [("bce_label1", 0.7, 1.0), ("bce_label0", -2.3, 0.0), ("bce_large", 12.0, 0.0)] {
        let mut p = vec![Tensor::scalar(z)];
        out.push(grad_check(
            name,
            &mut p,
            |p| {
                let (l, g) = bce_with_logits(p[0].data()[0], y);
                (l, vec![Tensor::scalar(g)])
            },
            SUITE_TOLERANCE,
            None,
        ));
    }
    out
}

fn fusion_tensors(f: &FusionMlp<Tensor>) -> Vec<Tensor> {
    vec![f.hidden.w.clone(), f.hidden.b.clone(), f.out.w.clone(), f.out.b.clone()]
}

/// Fusion head gradients with respect to inputs and parameters, per ablation.
pub fn fusion_suite(seed: u64) -> Vec<GradCheckReport> {
    let (d, ds, h) = (5, 4, 6);
    let mut out = Vec::new();
    for (k, ablation) in Ablation::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let fusion = FusionMlp::init(d + ds, h, &mut rng).map(&mut |p| p.value.clone());
        let mut p = vec![uniform(&[d], &mut rng), uniform(&[d], &mut rng), uniform(&[ds], &mut rng)];
        p.extend(fusion_tensors(&fusion));
        // Non-zero biases so the GELU is not evaluated at a symmetric point.
        p[4] = uniform(&[h], &mut rng);
        out.push(grad_check(
            &format!("fusion_{ablation}"),
            &mut p,
            |p| {
                let f = FusionMlp {
                    hidden: super::params::LinearLayer { w: p[3].clone(), b: p[4].clone() },
                    out: super::params::LinearLayer { w: p[5].clone(), b: p[6].clone() },
                };
                let (logit, gi, gp) = fuse_and_score_with_grads(&p[0], &p[1], &p[2], &f, ablation).unwrap();
                let mut grads = vec![gi.f_max, gi.f_min, gi.f_s];
                grads.extend(fusion_tensors(&gp));
                (logit, grads)
            },
            SUITE_TOLERANCE,
            None,
        ));
    }
    out
}

/// Small configuration used by the end-to-end checks.
pub fn tiny_config(ablation: Ablation, source: SemanticSource) -> AideConfig {
    AideConfig {
        patch_n: 16,
        k_bands: 4,
        k_select: 2,
        patch_resize: 12,
        encoder_dim: 6,
        semantic_dim: 5,
        semantic_source: source,
        semantic_input_size: 12,
        fusion_hidden: 7,
        ablation,
        ..AideConfig::default()
    }
}

fn checker_image(rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(48, 32, |x, y| {
        let base = ((x * 5 + y * 3) % 200) as u8;
        [base.wrapping_add(rng.random_range(0..40)), rng.random(), base / 2 + rng.random_range(0..30)]
    })
}

/// Logit gradient of the whole model with respect to every parameter
/// tensor, sampling a few elements per tensor.
pub fn end_to_end_check(cfg: &AideConfig, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = checker_image(&mut rng);
    let table = match cfg.semantic_source {
        SemanticSource::EmbeddedTable => {
            let mut t = EmbeddingTable::new(9);
            t.insert("img", (0..9).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .expect("fresh table");
            Some(t)
        }
        SemanticSource::TinyEncoder => None,
    };
    let sdim = table.as_ref().map(EmbeddingTable::dim);
    let params = ModelParams::init(cfg.encoder_dim, cfg.semantic_dim, cfg.fusion_hidden, sdim, &mut rng);
    let input = Preprocessor::new(cfg)
        .and_then(|p| p.prepare(&img, "img", table.as_ref()))
        .expect("valid tiny configuration");
    // Random biases keep the GELUs off their symmetric point; they are redrawn
    // until no ReLU pre-activation lies within reach of the step.
    let mut base: AideWeights<Tensor> = params.values();
    for _ in 0..KINK_ATTEMPTS {
        for (name, t) in base.named_mut() {
            if name.ends_with("_b") || name.ends_with(".b") {
                *t = uniform(t.shape(), &mut rng);
                t.scale(0.1);
            }
        }
        let trace = model_forward(&base, &input, cfg).expect("shapes fixed");
        if trace.relu_margin() > KINK_MARGIN {
            break;
        }
    }
    let mut flat: Vec<Tensor> = base.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    grad_check(
        &format!("end_to_end_{}_{:?}", cfg.ablation, cfg.semantic_source).to_lowercase(),
        &mut flat,
        |p| {
            let mut w = base.clone();
            for ((_, t), v) in w.named_mut().into_iter().zip(p) {
                t.clone_from(v);
            }
            let mut g = w.map(|t| Tensor::zeros(t.shape()));
            let logit = logit_and_grads(&w, &input, cfg, &mut g).expect("shapes fixed");
            (logit, g.named().into_iter().map(|(_, t)| t.clone()).collect())
        },
        SUITE_TOLERANCE,
        Some((E2E_SAMPLES, &mut sample_rng)),
    )
}

/// Layers, fusion head, and the end-to-end logit for every ablation (tiny
/// encoder) plus the full model in embedded-table mode.
pub fn gradient_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut out = layer_suite(seed);
    out.extend(fusion_suite(seed));
    for (k, ablation) in Ablation::ALL.into_iter().enumerate() {
        out.push(end_to_end_check(
            &tiny_config(ablation, SemanticSource::TinyEncoder),
            seed.wrapping_add(100 + k as u64),
        ));
    }
    out.push(end_to_end_check(
        &tiny_config(Ablation::Full, SemanticSource::EmbeddedTable),
        seed.wrapping_add(200),
    ));
    out
}

/// The linear check with the weight gradient's sign flipped; a working
/// checker must report failure.
pub fn negative_control(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![uniform(&[6], &mut rng), uniform(&[4, 6], &mut rng), uniform(&[4], &mut rng)];
    let probe = probe_like(&Tensor::zeros(&[4]), &mut rng);
    grad_check(
        "linear_sign_corrupted",
        &mut p,
        |p| {
            let y = linear(&p[0], &p[1], &p[2]).unwrap();
            let mut g = linear_backward(&p[0], &p[1], &p[2], &probe).unwrap();
            g.weights.scale(-1.0);
            (dot(&probe, &y), vec![g.input, g.weights, g.bias])
        },
        SUITE_TOLERANCE,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in gradient_suite(3) {
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_backward_caught() {
        assert!(!negative_control(3).passed);
    }
}
