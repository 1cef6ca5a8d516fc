use super::config::{ModelConfig, Variant};
use super::layers::{antenna_block, cc_predict, classify, embed, lstm_final, Scope};
use super::layout::{init_params, param_layout};
use super::{CompensationTensor, ModelError};
use crate::diffcore::{ParamStore, Real, Tape, Tensor, Var};

/// Intermediate values of one forward pass, all on the caller's tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `Ĥ [N×Nr×Nt×1×2]`, full variant only.
    pub compensation: Option<Var>,
    /// `r̂ [N×Nt×L×2]`, full variant only.
    pub compensated: Option<Var>,
    /// `[N×A×L_e×C]`
    pub embedded: Var,
    /// Output of the last transformer block, `[N×A×L_e×C]`.
    pub attended: Option<Var>,
    /// Attention probabilities of every extractor block.
    pub attention: Vec<Var>,
    /// Final LSTM state per antenna, `[N×A×C]`.
    pub temporal: Option<Var>,
    /// `[N×C]`
    pub pooled: Var,
    /// `[N×K]`
    pub logits: Var,
}

/// The recognizer: configuration plus its parameters.
#[derive(Clone, Debug)]
pub struct Camd<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> Camd<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against the layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        for spec in &layout {
            let id = params
                .id(&spec.name)
                .ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            let found = params.tensor(id).shape();
            if found != spec.shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
        if params.len() != layout.len() {
            let extra = params
                .iter()
                .map(|(_, name, _)| name)
                .find(|name| !layout.iter().any(|s| s.name == *name))
                .unwrap_or_default();
            return Err(ModelError::UnknownParam(extra.to_string()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Camd<U> {
        Camd {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Logits `[N×K]` for received frames `r [N×Nr×L×2]`.
    pub fn forward(&self, tape: &mut Tape<T>, r: Var) -> Result<Var, ModelError> {
        Ok(self.forward_traced(tape, r)?.logits)
    }

    /// Forward pass that also returns every stage.
    pub fn forward_traced(&self, tape: &mut Tape<T>, r: Var) -> Result<ForwardTrace, ModelError> {
        forward_with(&self.config, &self.params, tape, r)
    }

    /// Logits for a batch of frames given as flat `[Nr×L×2]` slices.
    pub fn predict_logits(&self, frames: &[&[T]]) -> Result<Vec<Vec<T>>, ModelError> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let r = tape.constant(&self.batch_tensor(frames)?);
        let logits = self.forward(&mut tape, r)?;
        let k = self.config.num_classes;
        Ok(tape
            .value(logits)
            .chunks_exact(k)
            .map(<[T]>::to_vec)
            .collect())
    }

    /// Predicted compensation for one frame `[Nr×L×2]`.
    pub fn cc_predict_frame(&self, frame: &[T]) -> Result<CompensationTensor<T>, ModelError> {
        let cfg = &self.config;
        if !cfg.variant.has_cc() {
            return Err(ModelError::Config(format!(
                "variant {} has no compensation module",
                cfg.variant
            )));
        }
        let mut tape = Tape::new();
        let r = tape.constant(&self.batch_tensor(&[frame])?);
        if !tape.value(r).iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let mut s = Scope {
            tape: &mut tape,
            store: &self.params,
        };
        let (h, _) = cc_predict(&mut s, cfg, r)?;
        CompensationTensor::broadcast(cfg.nr, cfg.nt, cfg.len, tape.value(h))
    }

    fn batch_tensor(&self, frames: &[&[T]]) -> Result<Tensor<T>, ModelError> {
        let cfg = &self.config;
        let per = cfg.nr * cfg.len * 2;
        let mut data = Vec::with_capacity(frames.len() * per);
        for f in frames {
            if f.len() != per {
                return Err(ModelError::Input(format!(
                    "frame has {} values, expected {per}",
                    f.len()
                )));
            }
            data.extend_from_slice(f);
        }
        Ok(Tensor::new(&[frames.len(), cfg.nr, cfg.len, 2], data)?)
    }
}

/// Forward pass of `config` over an explicit parameter store, which must
/// follow [`param_layout`]. Used where the parameters are perturbed outside
/// a [`Camd`], such as gradient checks.
pub fn forward_with<T: Real>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    tape: &mut Tape<T>,
    r: Var,
) -> Result<ForwardTrace, ModelError> {
    let shape = tape.shape(r).to_vec();
    if shape.len() != 4 || shape[1] != cfg.nr || shape[2] != cfg.len || shape[3] != 2 {
        return Err(ModelError::Input(format!(
            "expected [N×{}×{}×2] frames, got {shape:?}",
            cfg.nr, cfg.len
        )));
    }
    if !tape.value(r).iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let mut s = Scope {
        tape,
        store: params,
    };

    let (compensation, compensated, input) = if cfg.variant.has_cc() {
        let (h, _) = cc_predict(&mut s, cfg, r)?;
        let rhat = s.tape.cc_apply(h, r)?;
        (Some(h), Some(rhat), rhat)
    } else {
        (None, None, r)
    };

    let embedded = embed(&mut s, "", input, &cfg.conv_stack(), cfg.padding())?;
    let mut x = embedded;
    let mut attention = Vec::new();
    for b in 0..cfg.effective_blocks() {
        let out = antenna_block(&mut s, &format!("block{b}"), x, cfg.heads)?;
        x = out.x;
        attention.push(out.attention);
    }
    let attended = (!attention.is_empty()).then_some(x);

    let (temporal, pooled) = match cfg.variant {
        Variant::Full | Variant::NoCc | Variant::LstmOnly => {
            let state = lstm_final(&mut s, "", x, cfg.effective_lstm_layers())?;
            (Some(state), s.tape.mean_axis(state, 1)?)
        }
        Variant::TransformerOnly | Variant::CnnOnly => {
            let over_time = s.tape.mean_axis(x, 2)?;
            (None, s.tape.mean_axis(over_time, 1)?)
        }
    };
    let logits = classify(&mut s, pooled)?;
    Ok(ForwardTrace {
        compensation,
        compensated,
        embedded,
        attended,
        attention,
        temporal,
        pooled,
        logits,
    })
}
