//! The full network: encoder, decoder, post-net and speech embedder sharing
//! one parameter store.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{RegionFeatureSet, TrainingBatch};
use crate::decoder::{infer_greedy, unroll_teacher_forced, AttentionMemory, DecoderConfig, DecoderParams, GreedyOutput, UnrollOutput};
use crate::encoder::{encode_batch, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{Result, SasError};
use crate::losses::{
    mms_loss, spectrogram_loss, speech_embedding, stop_token_loss, total_loss, EmbedderConfig, EmbedderParams, LossVars,
    LossWeights,
};
use crate::params::ParamStore;
use crate::tensor::{cast, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub embedder: EmbedderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.embedder.validate()?;
        if self.embedder.output_dim() != self.encoder.embed_dim {
            return Err(SasError::Config(format!(
                "speech embedding width {} must equal image embedding width {}",
                self.embedder.output_dim(),
                self.encoder.embed_dim
            )));
        }
        Ok(())
    }

    /// Tiny network used by gradient checks and fast tests.
    pub fn micro(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                feature_dim,
                n_classes,
                fuse_units: 4,
                proj1_units: 5,
                embed_dim: 6,
                activation: crate::encoder::Activation::Relu,
            },
            decoder: DecoderConfig {
                n_mels: 4,
                prenet_units: vec![5, 5],
                attn_dim: 6,
                location_filters: 3,
                location_kernel: 3,
                rnn_units: 8,
                rnn_layers: 2,
                postnet_layers: 3,
                postnet_filters: 4,
                postnet_kernel: 3,
                stop_threshold: 0.5,
                max_frames: 20,
                prenet_dropout: 0.0,
                frame_center: -1.0,
            },
            embedder: EmbedderConfig {
                conv_filters: 4,
                conv_kernel: 3,
                conv_stride: 2,
                gru_hidden: 3,
                gru_layers: 2,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub embedder: EmbedderParams,
}

#[derive(Debug, Clone)]
pub struct SasModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelParams,
}

impl<T: Real> SasModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, &config.encoder, &mut rng);
        let decoder = DecoderParams::register(&mut store, &config.decoder, config.encoder.embed_dim, &mut rng);
        let embedder = EmbedderParams::register(&mut store, &config.embedder, config.decoder.n_mels, &mut rng);
        Ok(Self {
            config,
            store,
            ids: ModelParams { encoder, decoder, embedder },
        })
    }

    pub fn cast<U: Real>(&self) -> SasModel<U> {
        let mut store = ParamStore::new();
        for id in self.store.ids() {
            store.add(self.store.name(id), cast(self.store.get(id)));
        }
        SasModel {
            config: self.config.clone(),
            store,
            ids: self.ids.clone(),
        }
    }
}

/// Forward pass of the training objective on a batch.
pub struct BatchForward {
    pub losses: LossVars,
    pub unroll: UnrollOutput,
    pub encoder: EncoderOutput,
}

pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &SasModel<T>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    feed_mask: &Array2<bool>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchForward> {
    let cfg = &model.config;
    let items: Vec<&RegionFeatureSet> = batch.features.iter().map(|f| f.as_ref()).collect();
    if items.is_empty() {
        return Err(SasError::Input("empty batch".into()));
    }
    if batch.targets.ncols() != cfg.decoder.n_mels {
        return Err(SasError::Input(format!(
            "targets have {} mel channels, model expects {}",
            batch.targets.ncols(),
            cfg.decoder.n_mels
        )));
    }
    let enc = encode_batch(tape, &model.ids.encoder, &cfg.encoder, &items)?;
    let mem = AttentionMemory::new(tape, &model.ids.decoder, enc.seq, enc.batch);
    let targets: Array2<T> = cast(&batch.targets);
    let unroll = unroll_teacher_forced(
        tape,
        &model.ids.decoder,
        &cfg.decoder,
        &mem,
        &targets,
        &batch.lengths,
        feed_mask,
        dropout,
    )?;
    let mask: Array2<T> = cast(&batch.frame_mask);
    let stop_targets: Array2<T> = cast(&batch.stop_targets);
    let l_s = spectrogram_loss(tape, unroll.mel_pre, unroll.mel_post, &targets, &mask)?;
    let l_st = stop_token_loss(tape, unroll.stop_logits, &stop_targets, &mask, weights.stop_positive_weight)?;
    let truth = tape.constant(targets);
    let speech = speech_embedding(
        tape,
        &model.ids.embedder,
        &cfg.embedder,
        truth,
        &batch.lengths,
        cfg.decoder.frame_center,
    )?;
    let l_ec = mms_loss(tape, enc.global, speech, weights.mms_margin, &batch.same_image)?;
    let losses = total_loss(tape, l_s, l_st, l_ec, weights);
    Ok(BatchForward { losses, unroll, encoder: enc })
}

/// Free-running synthesis for a batch of images.
pub fn synthesize<T: Real>(
    model: &SasModel<T>,
    items: &[&RegionFeatureSet],
    max_frames: Option<usize>,
    ignore_stop: bool,
) -> Result<GreedyOutput> {
    let mut tape = Tape::inference(&model.store);
    let cfg = &model.config;
    let enc = encode_batch(&mut tape, &model.ids.encoder, &cfg.encoder, items)?;
    let mem = AttentionMemory::new(&mut tape, &model.ids.decoder, enc.seq, enc.batch);
    infer_greedy(
        &mut tape,
        &model.ids.decoder,
        &cfg.decoder,
        &mem,
        max_frames.unwrap_or(cfg.decoder.max_frames),
        ignore_stop,
    )
}
