//! End-to-end wiring of two backbones and two decoders, and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FeedbackCombine, MeritConfig, Mode};

use crate::blocks::{Backbone, FeaturePyramid};
use crate::decoder::{
    weighted_sum, Aggregation, Aggregator, CascadeDecoder, DecodeOutput, Decoder, PlainDecoder, PredictionSet, SkipSet,
};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{resize_to, Conv2d, ConvSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Interpolation, Tape, Var};

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<'t, T: Element> {
    /// Aggregated per-stage maps p1..p4 at ground-truth resolution.
    pub predictions: PredictionSet<'t, T>,
    /// Weighted head sum before the class softmax.
    pub logits: Var<'t, T>,
    /// Class probabilities.
    pub probs: Var<'t, T>,
    pub pyramid_a: FeaturePyramid<'t, T>,
    pub decoder_a: DecodeOutput<'t, T>,
    /// Image fed to backbone B (resized image, or the feedback image).
    pub input_b: Option<Var<'t, T>>,
    pub pyramid_b: Option<FeaturePyramid<'t, T>>,
    pub decoder_b: Option<DecodeOutput<'t, T>>,
}

/// The dual-backbone segmentation model.
#[derive(Clone, Debug)]
pub struct Merit<T: Element> {
    pub config: MeritConfig,
    pub backbone_a: Backbone<T>,
    pub decoder_a: Decoder<T>,
    pub backbone_b: Option<Backbone<T>>,
    pub decoder_b: Option<Decoder<T>>,
    pub feedback: Option<Conv2d<T>>,
    pub aggregator: Aggregator<T>,
}
impl_module!(Merit { backbone_a, decoder_a, backbone_b, decoder_b, feedback, aggregator });

fn build_decoder<T: Element>(name: &str, cfg: &MeritConfig, channels: [usize; 4], rng: &mut RngStream) -> Decoder<T> {
    if cfg.use_cascade_decoder {
        Decoder::Cascade(CascadeDecoder::new(
            name,
            channels,
            cfg.num_classes,
            cfg.aggregation,
            cfg.interpolation,
            rng,
        ))
    } else {
        Decoder::Plain(PlainDecoder::new(name, channels, cfg.num_classes, rng))
    }
}

/// `sigmoid(conv1×1(feature))`, bilinearly resized to `target_res`, combined
/// with the bilinearly resized image.
pub fn make_feedback_image<'t, T: Element>(
    tape: &'t Tape<T>,
    feature: &Var<'t, T>,
    image: &Var<'t, T>,
    target_res: usize,
    conv: &Conv2d<T>,
    combine: FeedbackCombine,
) -> Result<Var<'t, T>> {
    let m = saliency_map(tape, feature, target_res, conv)?;
    let img = resize_to(image, target_res, target_res, Interpolation::Bilinear)?;
    match combine {
        FeedbackCombine::Multiplicative => img.mul(&m),
        FeedbackCombine::Additive => img.add(&m),
    }
}

/// One-channel saliency `[N,1,target,target]` in (0,1).
pub fn saliency_map<'t, T: Element>(
    tape: &'t Tape<T>,
    feature: &Var<'t, T>,
    target_res: usize,
    conv: &Conv2d<T>,
) -> Result<Var<'t, T>> {
    let m = conv.forward(tape, feature)?.sigmoid()?;
    resize_to(&m, target_res, target_res, Interpolation::Bilinear)
}

impl<T: Element> Merit<T> {
    /// Build with freshly initialized parameters; the config must satisfy
    /// the full multi-scale premise.
    pub fn new(config: &MeritConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::build(config, seed)
    }

    /// Build with only structural validation (identical or degenerate
    /// backbones are allowed).
    pub fn new_relaxed(config: &MeritConfig, seed: u64) -> Result<Self> {
        config.validate_structure()?;
        Self::build(config, seed)
    }

    fn build(cfg: &MeritConfig, seed: u64) -> Result<Self> {
        let root = RngStream::new(seed, 0);
        let dual = cfg.mode != Mode::Single;
        let backbone_a = Backbone::new("backboneA", &cfg.backbone_a, &mut root.fork(1))?;
        let decoder_a = build_decoder("decoderA", cfg, cfg.backbone_a.stage_channels, &mut root.fork(2));
        let backbone_b = dual
            .then(|| Backbone::new("backboneB", &cfg.backbone_b, &mut root.fork(3)))
            .transpose()?;
        let decoder_b = dual.then(|| build_decoder("decoderB", cfg, cfg.backbone_b.stage_channels, &mut root.fork(4)));
        let feedback = (cfg.mode == Mode::Cascaded).then(|| {
            Conv2d::new(
                "feedback",
                ConvSpec::new(decoder_a.last_channels(), 1, 1),
                &mut root.fork(5),
            )
        });
        let aggregator = Aggregator::new(
            "aggregate",
            if dual { cfg.aggregation } else { Aggregation::Additive },
            cfg.num_classes,
            cfg.interpolation,
            &mut root.fork(6),
        );
        Ok(Self {
            config: cfg.clone(),
            backbone_a,
            decoder_a,
            backbone_b,
            decoder_b,
            feedback,
            aggregator,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, image: &Var<'t, T>) -> Result<ForwardOutput<'t, T>> {
        let cfg = &self.config;
        let s = image.shape();
        let gt = cfg.gt_resolution;
        if s.len() != 4 || s[1] != 3 || s[2] != gt || s[3] != gt {
            return Err(Error::invalid(format!("expected [N,3,{gt},{gt}] image, got {s:?}")));
        }
        let ra = cfg.backbone_a.input_resolution;
        let img_a = resize_to(image, ra, ra, Interpolation::Bilinear)?;
        let pyramid_a = self.backbone_a.forward(tape, &img_a)?;
        let decoder_a = self.decoder_a.decode(tape, &pyramid_a, None)?;

        let (mut input_b, mut pyramid_b, mut decoder_b) = (None, None, None);
        if let (Some(bb), Some(db)) = (&self.backbone_b, &self.decoder_b) {
            let rb = cfg.backbone_b.input_resolution;
            let (img_b, extra) = match cfg.mode {
                Mode::Cascaded => {
                    let conv = self.feedback.as_ref().expect("cascaded model has a feedback conv");
                    let fb = make_feedback_image(tape, &decoder_a.last_feature, image, rb, conv, cfg.feedback)?;
                    (fb, Some(SkipSet::from_pyramid(&pyramid_a)))
                }
                _ => (resize_to(image, rb, rb, Interpolation::Bilinear)?, None),
            };
            let mut pb = bb.forward(tape, &img_b)?;
            if extra.is_some() {
                let f4 = pb.levels[3];
                let s4 = f4.shape();
                let fa = resize_to(&pyramid_a.levels[3], s4[2], s4[3], Interpolation::Bilinear)?;
                pb.levels[3] = f4.add(&fa)?;
            }
            decoder_b = Some(db.decode(tape, &pb, extra.as_ref())?);
            input_b = Some(img_b);
            pyramid_b = Some(pb);
        }

        let predictions = self.aggregator.aggregate(
            tape,
            &decoder_a.maps,
            decoder_b.as_ref().map(|d| &d.maps[..]),
            gt,
        )?;
        let logits = weighted_sum(predictions.maps(), &cfg.head_weights)?;
        let probs = logits.softmax(1)?;
        Ok(ForwardOutput {
            predictions,
            logits,
            probs,
            pyramid_a,
            decoder_a,
            input_b,
            pyramid_b,
            decoder_b,
        })
    }
}
