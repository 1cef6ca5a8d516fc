//! Canonical parameter list: names, shapes and initializers, in the order
//! they are created, trained and serialized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConvLayer, ModelConfig};
use crate::diffcore::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`
    FanIn(usize),
    Zeros,
    Ones,
    /// LSTM bias: zero except the forget-gate block, which is +1.
    ForgetGate {
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn extractor(
        &mut self,
        prefix: &str,
        width: usize,
        cfg: &ModelConfig,
        convs: &[ConvLayer],
        blocks: usize,
        lstm_layers: usize,
    ) {
        let c = width;
        let k = cfg.kernel;
        let inner = cfg.ffn_mult * c;
        self.add(format!("{prefix}embed.proj.w"), &[2, c], Init::FanIn(2));
        self.add(format!("{prefix}embed.proj.b"), &[c], Init::Zeros);
        for i in 0..convs.len() {
            self.add(
                format!("{prefix}embed.conv{i}.w"),
                &[k, c, c],
                Init::FanIn(k * c),
            );
            self.add(format!("{prefix}embed.conv{i}.b"), &[c], Init::Zeros);
        }
        for b in 0..blocks {
            let p = format!("{prefix}block{b}");
            self.add(format!("{p}.ln1.gamma"), &[c], Init::Ones);
            self.add(format!("{p}.ln1.beta"), &[c], Init::Zeros);
            for w in ["wq", "wk", "wv", "wo"] {
                self.add(format!("{p}.attn.{w}"), &[c, c], Init::FanIn(c));
            }
            self.add(format!("{p}.ln2.gamma"), &[c], Init::Ones);
            self.add(format!("{p}.ln2.beta"), &[c], Init::Zeros);
            self.add(format!("{p}.ffn.w1"), &[c, inner], Init::FanIn(c));
            self.add(format!("{p}.ffn.w2"), &[c, inner], Init::FanIn(c));
            self.add(format!("{p}.ffn.w3"), &[inner, c], Init::FanIn(inner));
        }
        for l in 0..lstm_layers {
            let p = format!("{prefix}lstm{l}");
            self.add(format!("{p}.w_ih"), &[c, 4 * c], Init::FanIn(c));
            self.add(format!("{p}.w_hh"), &[c, 4 * c], Init::FanIn(c));
            self.add(format!("{p}.b"), &[4 * c], Init::ForgetGate { hidden: c });
        }
    }
}

/// Every trainable tensor of `cfg`, in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = Builder { specs: Vec::new() };
    if cfg.variant.has_cc() {
        b.extractor(
            "cc.",
            cfg.cc_width,
            cfg,
            &cfg.cc_conv_stack(),
            cfg.transformer_blocks,
            cfg.lstm_layers,
        );
        b.add("cc.head.w".into(), &[cfg.cc_width, 2 * cfg.nt], Init::Zeros);
        b.add("cc.head.b".into(), &[2 * cfg.nt], Init::Zeros);
    }
    b.extractor(
        "",
        cfg.width,
        cfg,
        &cfg.conv_stack(),
        cfg.effective_blocks(),
        cfg.effective_lstm_layers(),
    );
    b.add(
        "classifier.w".into(),
        &[cfg.width, cfg.num_classes],
        Init::FanIn(cfg.width),
    );
    b.add("classifier.b".into(), &[cfg.num_classes], Init::Zeros);
    b.specs
}

/// Draws initial values in canonical order from one seeded stream.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_layout(cfg) {
        let n = spec.numel();
        let values: Vec<f64> = match spec.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::ForgetGate { hidden } => (0..n)
                .map(|i| {
                    if (hidden..2 * hidden).contains(&i) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let tensor = Tensor::from_f64(&spec.shape, &values).expect("layout shapes are consistent");
        store.add(spec.name, tensor);
    }
    store
}
