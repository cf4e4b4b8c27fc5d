//! Encoders and fusion bundled into one immutable, shareable model.

use crate::encoders::{AudioEncoder, VisualEncoder};
use crate::error::{AsdError, Result};
use crate::frontend::{align_streams, FaceFrameSequence, MfccSequence};
use crate::fusion::{fusion_forward, gru_fusion_forward, ContextConfig, Fusion};
use crate::model_io::{ModelConfig, ParamSet};
use crate::numerics::sigmoid;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AsdModel<S> {
    pub(crate) config: ModelConfig,
    pub(crate) visual: VisualEncoder<S>,
    pub(crate) audio: AudioEncoder<S>,
    pub(crate) fusion: Fusion<S>,
    param_values: usize,
}

/// Offline scores for one aligned clip.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineScores<S> {
    pub logits: Vec<S>,
    pub visual_aux_logits: Vec<S>,
}

impl<S: Scalar> OfflineScores<S> {
    pub fn probabilities(&self) -> Vec<S> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

impl<S: Scalar> AsdModel<S> {
    pub fn from_params(params: &ParamSet<S>) -> Result<Self> {
        params.config().validate()?;
        Ok(AsdModel {
            config: params.config().clone(),
            visual: VisualEncoder::from_params(params)?,
            audio: AudioEncoder::from_params(params)?,
            fusion: Fusion::from_params(params)?,
            param_values: params.total_values(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn visual(&self) -> &VisualEncoder<S> {
        &self.visual
    }

    pub fn audio(&self) -> &AudioEncoder<S> {
        &self.audio
    }

    pub fn fusion(&self) -> &Fusion<S> {
        &self.fusion
    }

    pub fn param_bytes(&self) -> usize {
        self.param_values * S::BYTES
    }

    /// Full-sequence inference with the production kernels.
    pub fn forward(
        &self,
        mfcc: MfccSequence<S>,
        faces: FaceFrameSequence<S>,
        ctx: ContextConfig,
    ) -> Result<OfflineScores<S>> {
        let (mfcc, faces, ratio) = align_streams(mfcc, faces)?;
        if ratio != self.config.encoder.audio_downsample() {
            return Err(AsdError::Alignment(format!(
                "streams align at {ratio} MFCC frames per video frame, the model expects {}",
                self.config.encoder.audio_downsample()
            )));
        }
        let e_v = self.visual.forward(&faces.frames)?;
        let e_a = self.audio.forward(&mfcc.frames)?;
        let logits = match &self.fusion {
            Fusion::Transformer(t) => fusion_forward(&e_a, &e_v, ctx, t)?,
            Fusion::Gru(g) => gru_fusion_forward(&e_a, &e_v, g)?,
        };
        Ok(OfflineScores {
            logits,
            visual_aux_logits: self.visual.aux_scores(&e_v)?,
        })
    }
}
