use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioFeatures, FEATURE_DIM};
use crate::encoder::{fuse, Encoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rnnt::{
    greedy_decode, rnnt_loss, Joint, JointConfig, LabelSequence, PredictionConfig, PredictionNet, DEFAULT_MAX_SYMBOLS,
    VOCAB_SIZE,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::video::vgg::VggStage;
use crate::video::{resample_nearest, FrontEndKind, TubeletConfig, VggConfig, VideoClip, VideoFrontEnd, VitConfig, TARGET_FPS};

/// Which streams feed the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Av,
    Video,
    Audio,
}

impl Modality {
    pub fn uses_video(self) -> bool {
        matches!(self, Self::Av | Self::Video)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Self::Av | Self::Audio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontEndKind,
    pub modality: Modality,
    pub vit: VitConfig,
    pub vgg: VggConfig,
    pub encoder: EncoderConfig,
    pub prediction: PredictionConfig,
    /// Width of the joint network's hidden layer.
    pub joint_dim: usize,
}

impl ModelConfig {
    pub fn full(frontend: FrontEndKind) -> Self {
        Self {
            frontend,
            modality: Modality::Av,
            vit: VitConfig::full(),
            vgg: VggConfig::full(),
            encoder: EncoderConfig::full_transformer(),
            prediction: PredictionConfig::full(),
            joint_dim: 640,
        }
    }

    /// Grayscale 128×128 input, 32-wide everywhere, two encoder layers.
    pub fn desk(frontend: FrontEndKind) -> Self {
        let s = |mid, out, pool| VggStage { mid, out, pool };
        Self {
            frontend,
            modality: Modality::Video,
            vit: VitConfig {
                frame_size: 128,
                channels: 1,
                tubelet: TubeletConfig::default(),
                dim: 32,
                layers: 2,
                heads: 4,
                ffn_dim: 64,
                activation: Activation::Relu,
            },
            vgg: VggConfig {
                frame_size: 128,
                channels: 1,
                stages: vec![s(2, 4, 8), s(8, 8, 2), s(8, 16, 2), s(16, 16, 2), s(16, 32, 2)],
                dim: 32,
            },
            encoder: EncoderConfig {
                kind: EncoderKind::Transformer,
                layers: 2,
                model_dim: 32,
                heads: 4,
                attn_window: 100,
                conv_kernel: 32,
                ffn_dim: 64,
            },
            prediction: PredictionConfig {
                vocab: VOCAB_SIZE,
                embed_dim: 16,
                hidden: 32,
                layers: 2,
                out_dim: 32,
            },
            joint_dim: 32,
        }
    }

    pub fn video_dim(&self) -> usize {
        match self.frontend {
            FrontEndKind::Vit => self.vit.dim,
            FrontEndKind::Vgg => self.vgg.dim,
        }
    }

    /// Width of the rows entering the encoder.
    pub fn input_dim(&self) -> usize {
        match self.modality {
            Modality::Av => FEATURE_DIM + self.video_dim(),
            Modality::Video => self.video_dim(),
            Modality::Audio => FEATURE_DIM,
        }
    }
}

/// One utterance's encoder inputs; streams the modality does not use may be absent.
#[derive(Clone, Debug, Default)]
pub struct ModelInput {
    pub video: Option<VideoClip>,
    pub audio: Option<AudioFeatures>,
}

/// Front-end, fusion, encoder, prediction and joint networks over one parameter store.
#[derive(Clone, Debug)]
pub struct AvsrModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub front: Option<VideoFrontEnd>,
    pub encoder: Encoder,
    pub pred: PredictionNet,
    pub joint: Joint,
}

impl AvsrModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let front = if cfg.modality.uses_video() {
            Some(VideoFrontEnd::new(&mut store, "front", cfg.frontend, &cfg.vit, &cfg.vgg, &mut rng)?)
        } else {
            None
        };
        let encoder = Encoder::new(&mut store, "encoder", cfg.input_dim(), &cfg.encoder, &mut rng)?;
        let pred = PredictionNet::new(&mut store, "pred", cfg.prediction.clone(), &mut rng)?;
        let joint_cfg = JointConfig {
            enc_dim: cfg.encoder.model_dim,
            pred_dim: cfg.prediction.out_dim,
            hidden: cfg.joint_dim,
            symbols: cfg.prediction.vocab + 1,
        };
        let joint = Joint::new(&mut store, "joint", joint_cfg, &mut rng);
        Ok(Self {
            cfg,
            store,
            front,
            encoder,
            pred,
            joint,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Encoder output `[T, model_dim]`.
    pub fn encode<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &ModelInput) -> Result<Var<'t>> {
        let modality = self.cfg.modality;
        let audio = if modality.uses_audio() {
            Some(input.audio.as_ref().ok_or_else(|| Error::Config(format!("{modality:?} modality needs audio")))?)
        } else {
            None
        };
        let x = match &self.front {
            Some(front) => {
                let clip = input.video.as_ref().ok_or_else(|| Error::Config(format!("{modality:?} modality needs video")))?;
                let v = if clip.fps == TARGET_FPS {
                    front.forward(tape, p, clip)?
                } else {
                    front.forward(tape, p, &resample_nearest(clip, TARGET_FPS)?)?
                };
                fuse(tape, audio, &v)?
            }
            None => tape.constant(audio.expect("audio modality").values.clone()),
        };
        self.encoder.forward(tape, p, &x)
    }

    pub fn loss<'t>(&self, tape: &'t Tape, p: &[Var<'t>], input: &ModelInput, labels: &LabelSequence) -> Result<Var<'t>> {
        let h = self.encode(tape, p, input)?;
        let g = self.pred.forward(tape, p, labels)?;
        rnnt_loss(&self.joint.forward(p, &h, &g)?, labels)
    }

    /// Loss and gradients in parameter-store order.
    pub fn gradients(&self, input: &ModelInput, labels: &LabelSequence) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let loss = self.loss(&tape, &p, input, labels)?;
        let mut grads = tape.backward(loss)?;
        let g = p
            .iter()
            .map(|&v| match grads.take(v) {
                Some(data) => Tensor::new(v.shape(), data),
                None => Ok(Tensor::zeros(v.shape())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((loss.item(), g))
    }

    pub fn decode(&self, input: &ModelInput) -> Result<LabelSequence> {
        let h = {
            let tape = Tape::new();
            let p = self.store.bind_frozen(&tape);
            let h = self.encode(&tape, &p, input)?.value();
            (*h).clone()
        };
        greedy_decode(&self.store, &self.pred, &self.joint, &h, DEFAULT_MAX_SYMBOLS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synth::{gen_synthetic, SynthConfig};

    #[test]
    fn input_width_follows_modality() {
        let mut cfg = ModelConfig::full(FrontEndKind::Vit);
        assert_eq!(cfg.input_dim(), 752);
        cfg.modality = Modality::Video;
        assert_eq!(cfg.input_dim(), 512);
        cfg.modality = Modality::Audio;
        assert_eq!(cfg.input_dim(), 240);
    }

    #[test]
    fn video_modality_ignores_audio() {
        let item = &gen_synthetic(3, 1, &SynthConfig::default()).unwrap()[0];
        let ex = item.render().unwrap();
        let model = AvsrModel::new(ModelConfig::desk(FrontEndKind::Vit), 0).unwrap();
        let with = ModelInput {
            video: Some(ex.video.clone()),
            audio: Some(crate::audio::features(&ex.audio).unwrap()),
        };
        let without = ModelInput {
            video: Some(ex.video),
            audio: None,
        };
        let run = |input: &ModelInput| {
            let tape = Tape::new();
            let p = model.store.bind_frozen(&tape);
            (*model.encode(&tape, &p, input).unwrap().value()).clone()
        };
        assert_eq!(run(&with), run(&without));
        assert_eq!(model.store.by_name("encoder.input.w").unwrap().shape(), &[32, 32]);
    }

    #[test]
    fn missing_stream_is_a_config_error() {
        let mut cfg = ModelConfig::desk(FrontEndKind::Vit);
        cfg.modality = Modality::Av;
        let model = AvsrModel::new(cfg, 0).unwrap();
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        assert!(matches!(model.encode(&tape, &p, &ModelInput::default()), Err(Error::Config(_))));
    }
}
