//! The joint segmentation + survival network.
//!
//! CT/PET patches and the health record are projected into one token
//! sequence, encoded by a transformer whose intermediate layers are tapped,
//! decoded convolutionally into a voxel mask, and mean-pooled into the
//! prognostic head. Cross-modal fusion happens only inside the encoder's
//! attention; the decoder never reads the EHR token.

pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod prognosis;

use crate::autodiff::{Scalar, Tape, Tensor, TensorRef};
use crate::data::{Subject, Volume};
use crate::error::ModelError;
use crate::mtlr::{MtlrConfig, MtlrLabel};
use crate::params::{BoundParams, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. `taps` lists the encoder layers routed to
/// the decoder (shallow to deep; the last one is the encoder output and
/// drives the main decoder path), so it must hold exactly `log2(patch)`
/// entries: one per upsampling stage, the full-resolution stage being fed
/// by the conv-processed input volumes instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Preprocessed volume shape (H, W, D).
    pub input_shape: [usize; 3],
    /// Patch edge P; tokens are P^3 blocks of both channels.
    pub patch: usize,
    /// Embedding width h.
    pub embed_dim: usize,
    /// Encoder depth L.
    pub layers: usize,
    /// Attention heads A.
    pub heads: usize,
    /// MLP hidden width as a multiple of the embedding width.
    pub mlp_ratio: usize,
    /// Encoded EHR length F.
    pub ehr_features: usize,
    /// Tapped encoder layers, ascending; `taps.len() == log2(patch)`.
    pub taps: Vec<usize>,
    /// Decoder stage widths, shallow (full res) to deep.
    pub decoder_widths: Vec<usize>,
    /// Prognostic head dims after mean pooling.
    pub head_hidden: [usize; 2],
    /// Requested number of survival time bins K.
    pub time_bins: usize,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn paper(ehr_features: usize) -> Self {
        Self {
            input_shape: [80, 80, 48],
            patch: 16,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            ehr_features,
            taps: vec![3, 6, 9, 12],
            decoder_widths: vec![64, 128, 256, 512],
            head_hidden: [512, 128],
            time_bins: 10,
        }
    }

    /// Desk-scale configuration that trains in minutes on one CPU core while
    /// preserving the architectural relations (token grid, taps, stages).
    pub fn desk(ehr_features: usize) -> Self {
        Self {
            input_shape: [32, 32, 16],
            patch: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            ehr_features,
            taps: vec![2, 3, 4],
            decoder_widths: vec![8, 16, 32],
            head_hidden: [64, 32],
            time_bins: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return err(format!("patch {} must be a power of two >= 2", self.patch));
        }
        if self.input_shape.iter().any(|&s| s == 0 || s % self.patch != 0) {
            return err(format!(
                "input shape {:?} must be divisible by patch {}",
                self.input_shape, self.patch
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed dim {} must be divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.ehr_features == 0 {
            return err("layers, mlp_ratio and ehr_features must be positive".into());
        }
        let stages = self.stages();
        if self.taps.len() != stages {
            return err(format!(
                "need exactly {} taps for patch {}, got {:?}",
                stages, self.patch, self.taps
            ));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1])
            || self.taps.iter().any(|&t| t < 1 || t > self.layers)
            || *self.taps.last().unwrap() != self.layers
        {
            return err(format!(
                "taps {:?} must be strictly increasing within 1..={} and end at the last layer",
                self.taps, self.layers
            ));
        }
        if self.decoder_widths.len() != stages || self.decoder_widths.iter().any(|&w| w == 0) {
            return err(format!(
                "need {} positive decoder widths, got {:?}",
                stages, self.decoder_widths
            ));
        }
        if self.head_hidden.iter().any(|&h| h == 0) {
            return err("prognostic head widths must be positive".into());
        }
        if self.time_bins < 2 {
            return err(format!("time_bins {} must be at least 2", self.time_bins));
        }
        Ok(())
    }

    /// Image tokens n = H*W*D / P^3.
    pub fn token_count(&self) -> usize {
        let [h, w, d] = self.input_shape;
        h * w * d / self.patch.pow(3)
    }

    /// Token grid (H/P, W/P, D/P).
    pub fn grid(&self) -> [usize; 3] {
        [
            self.input_shape[0] / self.patch,
            self.input_shape[1] / self.patch,
            self.input_shape[2] / self.patch,
        ]
    }

    /// Decoder upsampling stages, log2(patch).
    pub fn stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    /// Length of one patch row: both channels of a P^3 block.
    pub fn patch_row_len(&self) -> usize {
        2 * self.patch.pow(3)
    }
}

const INIT_STD: f64 = 0.02;

/// Builds the full parameter set in canonical (checkpoint) order, with
/// truncated-normal weights, unit norm gains, and zero biases.
pub fn init_params<T: Scalar>(
    cfg: &ModelConfig,
    mtlr: &MtlrConfig,
    seed: u64,
) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = cfg.embed_dim;
    let n = cfg.token_count();

    let mut weight = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
        store.add(name, Tensor::trunc_normal(shape, INIT_STD, &mut rng));
    };
    let zeros = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
        store.add(name, Tensor::zeros(shape));
    };
    let ones = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
        store.add(name, Tensor::full(shape, T::one()));
    };

    // Embedder.
    weight(&mut store, "embed.patch_w".into(), vec![cfg.patch_row_len(), h]);
    zeros(&mut store, "embed.patch_b".into(), vec![h]);
    weight(&mut store, "embed.ehr_w".into(), vec![cfg.ehr_features, h]);
    zeros(&mut store, "embed.ehr_b".into(), vec![h]);
    weight(&mut store, "embed.pos".into(), vec![n + 1, h]);

    // Encoder layers (1-based, matching tap indices).
    for l in 1..=cfg.layers {
        let p = format!("enc.l{l}");
        ones(&mut store, format!("{p}.ln1_g"), vec![h]);
        zeros(&mut store, format!("{p}.ln1_b"), vec![h]);
        for w in ["wq", "wk", "wv", "wo"] {
            weight(&mut store, format!("{p}.{w}"), vec![h, h]);
        }
        ones(&mut store, format!("{p}.ln2_g"), vec![h]);
        zeros(&mut store, format!("{p}.ln2_b"), vec![h]);
        let mh = h * cfg.mlp_ratio;
        weight(&mut store, format!("{p}.mlp_w1"), vec![h, mh]);
        zeros(&mut store, format!("{p}.mlp_b1"), vec![mh]);
        weight(&mut store, format!("{p}.mlp_w2"), vec![mh, h]);
        zeros(&mut store, format!("{p}.mlp_b2"), vec![h]);
    }

    // Decoder: stage j = 0 is deepest (first upsample).
    let stages = cfg.stages();
    for j in 0..stages {
        let width = cfg.decoder_widths[stages - 1 - j];
        let main_in = if j == 0 {
            h
        } else {
            cfg.decoder_widths[stages - j]
        };
        weight(
            &mut store,
            format!("dec.up{j}_w"),
            vec![main_in, width, 2, 2, 2],
        );
        if j < stages - 1 {
            // Skip chain from a tapped layer: j+1 doublings to match scale.
            weight(
                &mut store,
                format!("dec.skip{j}.d0_w"),
                vec![h, width, 2, 2, 2],
            );
            for e in 1..=j {
                weight(
                    &mut store,
                    format!("dec.skip{j}.d{e}_w"),
                    vec![width, width, 2, 2, 2],
                );
            }
        } else {
            // Full-resolution skip: conv stem over the two input channels.
            weight(&mut store, "dec.stem.c1_w".into(), vec![width, 2, 3, 3, 3]);
            ones(&mut store, "dec.stem.bn1_g".into(), vec![width]);
            zeros(&mut store, "dec.stem.bn1_b".into(), vec![width]);
            weight(
                &mut store,
                "dec.stem.c2_w".into(),
                vec![width, width, 3, 3, 3],
            );
            ones(&mut store, "dec.stem.bn2_g".into(), vec![width]);
            zeros(&mut store, "dec.stem.bn2_b".into(), vec![width]);
        }
        weight(
            &mut store,
            format!("dec.stage{j}.c1_w"),
            vec![width, 2 * width, 3, 3, 3],
        );
        ones(&mut store, format!("dec.stage{j}.bn1_g"), vec![width]);
        zeros(&mut store, format!("dec.stage{j}.bn1_b"), vec![width]);
        weight(
            &mut store,
            format!("dec.stage{j}.c2_w"),
            vec![width, width, 3, 3, 3],
        );
        ones(&mut store, format!("dec.stage{j}.bn2_g"), vec![width]);
        zeros(&mut store, format!("dec.stage{j}.bn2_b"), vec![width]);
    }
    weight(
        &mut store,
        "dec.out_w".into(),
        vec![1, cfg.decoder_widths[0], 1, 1, 1],
    );
    zeros(&mut store, "dec.out_b".into(), vec![1]);

    // Prognostic head.
    let [h1, h2] = cfg.head_hidden;
    let km1 = mtlr.bins() - 1;
    weight(&mut store, "prog.fc1_w".into(), vec![h, h1]);
    zeros(&mut store, "prog.fc1_b".into(), vec![h1]);
    weight(&mut store, "prog.fc2_w".into(), vec![h1, h2]);
    zeros(&mut store, "prog.fc2_b".into(), vec![h2]);
    weight(&mut store, "prog.mtlr_w".into(), vec![h2, km1]);
    zeros(&mut store, "prog.mtlr_b".into(), vec![km1]);

    Ok(store)
}

/// Expected parameter shapes for a config, used to validate checkpoints.
pub fn expected_shapes(cfg: &ModelConfig, mtlr: &MtlrConfig) -> Vec<(String, Vec<usize>)> {
    let store: ParamStore<f64> = init_params(cfg, mtlr, 0).expect("validated config");
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}

/// Tape-ready tensors for one subject.
#[derive(Clone, Debug)]
pub struct SubjectInputs<T> {
    pub id: String,
    /// `[n, 2 P^3]` patch rows.
    pub tokens: Tensor<T>,
    /// `[1, F]` encoded record.
    pub ehr: Tensor<T>,
    /// `[2, H, W, D]` normalized CT and PET for the decoder's input skip.
    pub ct_pet: Tensor<T>,
    /// `[H*W*D]` ground-truth mask.
    pub mask: Tensor<T>,
    pub time: f64,
    pub event: u8,
}

impl<T: Scalar> SubjectInputs<T> {
    pub fn prepare(s: &Subject, cfg: &ModelConfig) -> Result<Self, ModelError> {
        if s.ct.shape != cfg.input_shape {
            return Err(ModelError::InvalidConfig(format!(
                "subject {} shape {:?} does not match configured {:?}",
                s.id, s.ct.shape, cfg.input_shape
            )));
        }
        if s.ehr.encoded.len() != cfg.ehr_features {
            return Err(ModelError::EhrLengthMismatch {
                got: s.ehr.encoded.len(),
                expected: cfg.ehr_features,
            });
        }
        let tokens = embed::patchify(&s.ct, &s.pet, cfg.patch)?;
        let ehr = Tensor::from_f64(vec![1, s.ehr.encoded.len()], &s.ehr.encoded)
            .map_err(ModelError::Diff)?;
        let [hh, ww, dd] = s.ct.shape;
        let mut ctpet = Vec::with_capacity(2 * hh * ww * dd);
        ctpet.extend(s.ct.data.iter().map(|&v| T::from_f64(v as f64)));
        ctpet.extend(s.pet.data.iter().map(|&v| T::from_f64(v as f64)));
        let ct_pet = Tensor::new(vec![2, hh, ww, dd], ctpet).map_err(ModelError::Diff)?;
        let mask = Tensor::new(
            vec![hh * ww * dd],
            s.mask.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .map_err(ModelError::Diff)?;
        Ok(Self {
            id: s.id.clone(),
            tokens,
            ehr,
            ct_pet,
            mask,
            time: s.label.time,
            event: s.label.event,
        })
    }

    pub fn label(&self, mtlr: &MtlrConfig) -> MtlrLabel {
        MtlrLabel::new(self.time, self.event == 1, mtlr)
    }
}

/// Tape handles produced by one subject's forward pass.
pub struct SubjectForward {
    /// `[1, H, W, D]` voxel logits.
    pub logits: TensorRef,
    /// `[H*W*D]` sigmoid probabilities.
    pub probs: TensorRef,
    /// `[1, K-1]` survival edge scores.
    pub scores: TensorRef,
}

/// Runs the full network for one subject on an existing tape with
/// already-registered parameters.
pub fn forward_subject<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    inputs: &SubjectInputs<T>,
) -> Result<SubjectForward, ModelError> {
    let tokens = tape.constant(inputs.tokens.clone());
    let ehr = tape.constant(inputs.ehr.clone());
    let x0 = embed::embed(tape, bound, cfg, tokens, ehr)?;
    let taps = encoder::encode(tape, bound, cfg, x0)?;

    let n = cfg.token_count();
    let grid = cfg.grid();
    let mut grids = Vec::with_capacity(taps.len());
    for &tap in &taps {
        let image_rows = tape.slice(tap, 0, 0, n)?;
        grids.push(decoder::tokens_to_grid(tape, image_rows, grid)?);
    }
    let ct_pet = tape.constant(inputs.ct_pet.clone());
    let logits = decoder::decode(tape, bound, cfg, &grids, ct_pet)?;

    let [hh, ww, dd] = cfg.input_shape;
    let flat = tape.reshape(logits, vec![hh * ww * dd])?;
    let probs = tape.sigmoid(flat)?;

    let z_final = *taps.last().expect("validated taps are nonempty");
    let features = prognosis::head_forward(tape, bound, cfg, z_final)?;
    let scores = prognosis::mtlr_scores(tape, bound, features)?;

    Ok(SubjectForward {
        logits,
        probs,
        scores,
    })
}

/// Inference for one subject with fresh parameters: predicted mask volume,
/// scalar risk, and the bin pmf.
pub fn predict_subject<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    mtlr: &MtlrConfig,
    subject: &Subject,
    threshold: f64,
) -> Result<(Volume, f64, Vec<f64>), ModelError> {
    let inputs = SubjectInputs::<T>::prepare(subject, cfg)?;
    let mut tape = Tape::new();
    let bound = params.register(&mut tape);
    let fwd = forward_subject(&mut tape, &bound, cfg, &inputs)?;
    let logits: Vec<f64> = tape.value(fwd.logits).iter_f64().collect();
    let mask = decoder::logits_to_mask(&logits, cfg.input_shape, subject.ct.spacing, threshold)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let scores: Vec<f64> = tape.value(fwd.scores).iter_f64().collect();
    let pmf = crate::mtlr::survival_pmf(&scores)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let risk = crate::mtlr::risk_score(&pmf, &mtlr.edges)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    Ok((mask, risk, pmf))
}
