//! The catalogue of finite-difference checks: every differentiable
//! primitive and every composite block, loss and model path.

use super::{check_fn, check_module, randn, run_trials, GradCheckConfig, GradCheckReport};
use crate::blocks::{window_attention, Backbone, BackboneConfig, MaxVitBlock, MbConv, MultiHeadAttention, Partition};
use crate::decoder::{Aggregation, AttentionGate, Cam, CascadeDecoder, HeadWeights};
use crate::error::Result;
use crate::layers::{global_avg_pool, global_max_pool, Conv2d, ConvSpec};
use crate::losses::{ce_loss, combined_loss, dice_loss, mutation_loss, LossConfig};
use crate::model::{make_feedback_image, FeedbackCombine, Merit, MeritConfig, Mode};
use crate::rng::RngStream;
use crate::tensor::{Interpolation, Tensor, Var};

/// Tolerance for primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite blocks and model paths.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

type TrialFn = fn(&mut RngStream, &GradCheckConfig) -> Result<f64>;

/// One named family of randomized trials.
#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub trial: TrialFn,
}

impl Check {
    pub fn run(&self, trials: usize, seed: u64) -> Result<GradCheckReport> {
        let cfg = GradCheckConfig::default().with_tolerance(self.tolerance);
        run_trials(self.name, trials, &cfg, seed, self.trial)
    }
}

/// Small random extent in `[lo, hi]`.
fn ext(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Random broadcast-compatible pair of shapes.
fn broadcast_pair(rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let r = ext(rng, 1, 4);
    let a: Vec<usize> = (0..r).map(|_| ext(rng, 1, 3)).collect();
    let b: Vec<usize> = a.iter().map(|&d| if rng.below(2) == 0 { 1 } else { d }).collect();
    if rng.below(2) == 0 {
        (a, b)
    } else {
        (b, a)
    }
}

fn rank_and_axis(rng: &mut RngStream) -> (Vec<usize>, usize) {
    let r = ext(rng, 1, 4);
    let shape: Vec<usize> = (0..r).map(|_| ext(rng, 1, 4)).collect();
    let axis = rng.below(r);
    (shape, axis)
}

fn map4(rng: &mut RngStream) -> [usize; 4] {
    [ext(rng, 1, 2), ext(rng, 1, 3), ext(rng, 1, 4), ext(rng, 1, 4)]
}

fn p_add(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (a, b) = broadcast_pair(rng);
    check_fn(&[randn(&a, rng), randn(&b, rng)], |_, v| v[0].add(&v[1]), cfg, rng)
}

fn p_sub(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (a, b) = broadcast_pair(rng);
    check_fn(&[randn(&a, rng), randn(&b, rng)], |_, v| v[0].sub(&v[1]), cfg, rng)
}

fn p_mul(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (a, b) = broadcast_pair(rng);
    check_fn(&[randn(&a, rng), randn(&b, rng)], |_, v| v[0].mul(&v[1]), cfg, rng)
}

fn p_div(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (a, b) = broadcast_pair(rng);
    let mut den = randn(&b, rng);
    den.data_mut().iter_mut().for_each(|v| *v = v.signum() * (1.0 + v.abs()));
    check_fn(&[randn(&a, rng), den], |_, v| v[0].div(&v[1]), cfg, rng)
}

fn p_matmul(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (b, m, k, n) = (ext(rng, 1, 3), ext(rng, 1, 4), ext(rng, 1, 4), ext(rng, 1, 4));
    let ins = if rng.below(2) == 0 {
        [randn(&[b, m, k], rng), randn(&[b, k, n], rng)]
    } else {
        [randn(&[m, k], rng), randn(&[k, n], rng)]
    };
    check_fn(&ins, |_, v| v[0].matmul(&v[1]), cfg, rng)
}

fn p_conv2d(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let groups = ext(rng, 1, 2);
    let c = groups * ext(rng, 1, 2);
    let o = groups * ext(rng, 1, 2);
    let k = [1, 3][rng.below(2)];
    let (stride, pad) = (ext(rng, 1, 2), rng.below(2));
    let (h, w) = (ext(rng, k.max(2), 6), ext(rng, k.max(2), 6));
    let ins = [
        randn(&[ext(rng, 1, 2), c, h, w], rng),
        randn(&[o, c / groups, k, k], rng),
        randn(&[o], rng),
    ];
    check_fn(&ins, move |_, v| v[0].conv2d(&v[1], Some(&v[2]), stride, pad, groups), cfg, rng)
}

fn p_depthwise(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let c = ext(rng, 1, 4);
    let stride = ext(rng, 1, 2);
    let ins = [randn(&[1, c, ext(rng, 3, 7), ext(rng, 3, 7)], rng), randn(&[c, 1, 3, 3], rng)];
    check_fn(&ins, move |_, v| v[0].conv2d(&v[1], None, stride, 1, c), cfg, rng)
}

fn p_softmax(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, axis) = rank_and_axis(rng);
    check_fn(&[randn(&s, rng)], move |_, v| v[0].softmax(axis), cfg, rng)
}

fn p_log_softmax(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, axis) = rank_and_axis(rng);
    check_fn(&[randn(&s, rng)], move |_, v| v[0].log_softmax(axis), cfg, rng)
}

fn p_sigmoid(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, _) = rank_and_axis(rng);
    check_fn(&[randn(&s, rng)], |_, v| v[0].sigmoid(), cfg, rng)
}

fn p_relu(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, _) = rank_and_axis(rng);
    check_fn(&[randn(&s, rng)], |_, v| v[0].relu(), cfg, rng)
}

fn p_gelu(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, _) = rank_and_axis(rng);
    check_fn(&[randn(&s, rng)], |_, v| v[0].gelu(), cfg, rng)
}

fn p_layer_norm(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (mut s, axis) = rank_and_axis(rng);
    // with two entries the normalized output is ±1 and its gradient vanishes,
    // leaving only finite-difference noise
    s[axis] = s[axis].max(3);
    check_fn(&[randn(&s, rng)], move |_, v| v[0].layer_norm(axis, 1e-5), cfg, rng)
}

fn p_avg_pool(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let s = map4(rng);
    check_fn(&[randn(&s, rng)], |_, v| global_avg_pool(&v[0]), cfg, rng)
}

fn p_max_pool(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let s = map4(rng);
    check_fn(&[randn(&s, rng)], |_, v| global_max_pool(&v[0]), cfg, rng)
}

fn p_reshape_transpose(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let s = [ext(rng, 1, 3), ext(rng, 1, 3), ext(rng, 1, 3)];
    let (a, b) = (rng.below(3), rng.below(3));
    let n: usize = s.iter().product();
    check_fn(
        &[randn(&s, rng)],
        move |_, v| v[0].transpose(a, b)?.reshape(&[n])?.reshape(&[1, n]),
        cfg,
        rng,
    )
}

fn p_permute(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let s = [ext(rng, 1, 3), ext(rng, 1, 3), ext(rng, 1, 3), ext(rng, 1, 3)];
    let mut axes = [0, 1, 2, 3];
    for i in (1..4).rev() {
        axes.swap(i, rng.below(i + 1));
    }
    check_fn(&[randn(&s, rng)], move |_, v| v[0].permute(&axes), cfg, rng)
}

fn p_resize(mode: Interpolation, rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let s = [1, ext(rng, 1, 2), ext(rng, 1, 5), ext(rng, 1, 5)];
    let (oh, ow) = (ext(rng, 1, 8), ext(rng, 1, 8));
    check_fn(&[randn(&s, rng)], move |_, v| v[0].resize2d(oh, ow, mode), cfg, rng)
}

fn p_resize_nearest(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    p_resize(Interpolation::Nearest, rng, cfg)
}

fn p_resize_bilinear(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    p_resize(Interpolation::Bilinear, rng, cfg)
}

fn p_resize_bicubic(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    p_resize(Interpolation::Bicubic, rng, cfg)
}

fn p_resize_area(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    p_resize(Interpolation::Area, rng, cfg)
}

fn p_concat(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let axis = rng.below(3);
    let mut a = vec![ext(rng, 1, 3), ext(rng, 1, 3), ext(rng, 1, 3)];
    let mut b = a.clone();
    a[axis] = ext(rng, 1, 3);
    b[axis] = ext(rng, 1, 3);
    check_fn(&[randn(&a, rng), randn(&b, rng)], move |_, v| Var::concat(&[v[0], v[1]], axis), cfg, rng)
}

fn p_reductions(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (s, axis) = rank_and_axis(rng);
    check_fn(
        &[randn(&s, rng)],
        move |_, v| {
            let a = v[0].sum_axis(axis)?.affine(1.7, -0.3)?;
            a.mul(&v[0].mean()?)
        },
        cfg,
        rng,
    )
}

/// Every differentiable primitive of the tensor substrate.
pub fn primitive_checks() -> Vec<Check> {
    let c = |name, trial| Check {
        name,
        tolerance: PRIMITIVE_TOLERANCE,
        trial,
    };
    vec![
        c("add", p_add as TrialFn),
        c("sub", p_sub),
        c("mul", p_mul),
        c("div", p_div),
        c("matmul", p_matmul),
        c("conv2d", p_conv2d),
        c("depthwise conv2d", p_depthwise),
        c("softmax", p_softmax),
        c("log_softmax", p_log_softmax),
        c("sigmoid", p_sigmoid),
        c("relu", p_relu),
        c("gelu", p_gelu),
        c("layer_norm", p_layer_norm),
        c("global avg pool", p_avg_pool),
        c("global max pool", p_max_pool),
        c("reshape/transpose", p_reshape_transpose),
        c("permute", p_permute),
        c("resize nearest", p_resize_nearest),
        c("resize bilinear", p_resize_bilinear),
        c("resize bicubic", p_resize_bicubic),
        c("resize area", p_resize_area),
        c("concat", p_concat),
        c("sum/mean/affine", p_reductions),
    ]
}

fn c_mbconv(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let stride = ext(rng, 1, 2);
    let (cin, cout) = (ext(rng, 2, 4), ext(rng, 2, 4));
    let mut m = MbConv::new("mb", cin, cout, stride, &mut rng.fork(1))?;
    let x = randn(&[1, cin, 4, 4], rng);
    check_module(&mut m, &[x], |m, t, v| m.forward(t, &v[0]), cfg, rng)
}

fn attention_check(kind: Partition, rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let window = ext(rng, 1, 2);
    let (c, heads) = [(4, 2), (4, 1), (6, 3)][rng.below(3)];
    let mut a = MultiHeadAttention::new("sa", c, heads, &mut rng.fork(2))?;
    let x = randn(&[ext(rng, 1, 2), c, 2 * window, 2 * window], rng);
    check_module(&mut a, &[x], move |a, t, v| window_attention(t, &v[0], window, kind, a), cfg, rng)
}

fn c_block_sa(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    attention_check(Partition::Block, rng, cfg)
}

fn c_grid_sa(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    attention_check(Partition::Grid, rng, cfg)
}

fn c_maxvit(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let window = [2, 4][rng.below(2)];
    let mut b = MaxVitBlock::new("blk", 4, 4, 1, window, 2, 2, &mut rng.fork(3))?;
    let x = randn(&[1, 4, 8, 8], rng);
    check_module(&mut b, &[x], |b, t, v| b.forward(t, &v[0]), cfg, rng)
}

fn c_attention_gate(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let (cg, cx) = (ext(rng, 1, 4), ext(rng, 2, 4));
    let mut ag = AttentionGate::new("ag", cg, cx, Interpolation::Bilinear, &mut rng.fork(4));
    let ins = [randn(&[1, cg, 2, 2], rng), randn(&[1, cx, 4, 4], rng)];
    check_module(&mut ag, &ins, |ag, t, v| ag.forward(t, &v[0], &v[1]), cfg, rng)
}

fn c_cam(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let mut cam = Cam::new("cam", 4, &mut rng.fork(5));
    let x = randn(&[1, 4, 8, 8], rng);
    check_module(&mut cam, &[x], |c, t, v| c.forward(t, &v[0]), cfg, rng)
}

fn c_decoder(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let join = [Aggregation::Additive, Aggregation::Concatenation][rng.below(2)];
    let ch = [2, 4, 4, 6];
    let mut d = CascadeDecoder::new("dec", ch, 3, join, Interpolation::Bilinear, &mut rng.fork(6));
    let ins = [
        randn(&[1, 2, 4, 4], rng),
        randn(&[1, 4, 2, 2], rng),
        randn(&[1, 4, 1, 1], rng),
        randn(&[1, 6, 1, 1], rng),
    ];
    check_module(
        &mut d,
        &ins,
        |d, t, v| {
            let p = crate::blocks::FeaturePyramid {
                levels: [v[0], v[1], v[2], v[3]],
            };
            let out = d.decode(t, &p, None)?;
            let h = out.maps[0].shape();
            let up: Vec<Var<'_, f64>> = out
                .maps
                .iter()
                .map(|m| m.resize2d(h[2], h[3], Interpolation::Bilinear))
                .collect::<Result<_>>()?;
            crate::decoder::weighted_sum(&up, &HeadWeights::default())
        },
        cfg,
        rng,
    )
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_resolution: 32,
        window: 1,
        stem_channels: 4,
        stage_channels: [4, 4, 8, 8],
        stage_depths: [1, 1, 1, 1],
        ffn_expansion: 2,
        heads: 2,
    }
}

fn c_backbone(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let mut b = Backbone::new("bb", &tiny_backbone(), &mut rng.fork(7))?;
    let x = randn(&[1, 3, 32, 32], rng);
    check_module(
        &mut b,
        &[x],
        |b, t, v| {
            let p = b.forward(t, &v[0])?;
            Var::concat(&[p.levels[2], p.levels[3]], 1)
        },
        cfg,
        rng,
    )
}

fn label_map(rng: &mut RngStream, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

fn c_dice(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let c = ext(rng, 2, 4);
    let t = label_map(rng, 2 * 8 * 8, c);
    let lc = LossConfig::default();
    check_fn(&[randn(&[2, c, 8, 8], rng)], move |_, v| dice_loss(&v[0], &t, &lc), cfg, rng)
}

fn c_ce(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let c = ext(rng, 2, 4);
    let t = label_map(rng, 2 * 8 * 8, c);
    check_fn(&[randn(&[2, c, 8, 8], rng)], move |_, v| ce_loss(&v[0], &t), cfg, rng)
}

fn c_combined(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let c = ext(rng, 2, 4);
    let t = label_map(rng, 8 * 8, c);
    let lc = LossConfig::with_dice_weight(rng.uniform());
    check_fn(&[randn(&[1, c, 8, 8], rng)], move |_, v| combined_loss(&v[0], &t, &lc), cfg, rng)
}

fn c_mutation(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let n = ext(rng, 1, 3);
    let t = label_map(rng, 8 * 8, 3);
    let maps: Vec<Tensor<f64>> = (0..n).map(|_| randn(&[1, 3, 8, 8], rng)).collect();
    let lc = LossConfig::default();
    check_fn(&maps, move |_, v| mutation_loss(v, &t, &lc), cfg, rng)
}

fn c_feedback(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let c = ext(rng, 1, 4);
    let mut conv = Conv2d::new("fb", ConvSpec::new(c, 1, 1), &mut rng.fork(8));
    let target = ext(rng, 3, 7);
    let ins = [randn(&[1, c, 3, 3], rng), randn(&[1, 3, 8, 8], rng)];
    check_module(
        &mut conv,
        &ins,
        move |conv, t, v| make_feedback_image(t, &v[0], &v[1], target, conv, FeedbackCombine::Multiplicative),
        cfg,
        rng,
    )
}

/// Smallest cascaded model: 32-pixel backbones with window 1.
pub fn tiny_cascaded_config() -> MeritConfig {
    MeritConfig {
        mode: Mode::Cascaded,
        backbone_a: tiny_backbone(),
        backbone_b: tiny_backbone(),
        num_classes: 3,
        gt_resolution: 32,
        ..MeritConfig::desk()
    }
}

fn c_model(rng: &mut RngStream, cfg: &GradCheckConfig) -> Result<f64> {
    let mut m = Merit::new_relaxed(&tiny_cascaded_config(), rng.next_u64())?;
    let x = randn(&[1, 3, 32, 32], rng);
    check_module(&mut m, &[x], |m, t, v| Ok(m.forward(t, &v[0])?.logits), cfg, rng)
}

/// Composite blocks, losses, the feedback path and the tiny end-to-end model.
pub fn composite_checks() -> Vec<Check> {
    let c = |name, tolerance, trial| Check { name, tolerance, trial };
    let (ct, lt) = (COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE);
    vec![
        c("mbconv", ct, c_mbconv as TrialFn),
        c("block attention", ct, c_block_sa),
        c("grid attention", ct, c_grid_sa),
        c("maxvit block", ct, c_maxvit),
        c("attention gate", ct, c_attention_gate),
        c("cam", ct, c_cam),
        c("cascade decoder", ct, c_decoder),
        c("backbone (tiny)", ct, c_backbone),
        c("dice loss", lt, c_dice),
        c("ce loss", lt, c_ce),
        c("combined loss", lt, c_combined),
        c("mutation loss", lt, c_mutation),
        c("feedback path", ct, c_feedback),
        c("cascaded model (tiny)", ct, c_model),
    ]
}
