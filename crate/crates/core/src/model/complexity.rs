//! Closed-form size and cost of a configuration, independent of the
//! parameter layout so the two can be checked against each other.

use super::config::ModelConfig;

struct Extractor {
    width: usize,
    convs: usize,
    strided: usize,
    blocks: usize,
    lstm: usize,
    antennas: usize,
}

/// Dense layer `c_in → c_out`, with or without bias.
pub fn linear_params(c_in: usize, c_out: usize, bias: bool) -> usize {
    c_in * c_out + if bias { c_out } else { 0 }
}

/// 1-D convolution with bias.
pub fn conv_params(kernel: usize, c_in: usize, c_out: usize) -> usize {
    kernel * c_in * c_out + c_out
}

fn extractor_params(cfg: &ModelConfig, e: &Extractor) -> usize {
    let c = e.width;
    let inner = cfg.ffn_mult * c;
    let embed = linear_params(2, c, true) + e.convs * conv_params(cfg.kernel, c, c);
    let norms = 2 * 2 * c;
    let attn = 4 * linear_params(c, c, false);
    let ffn = 2 * linear_params(c, inner, false) + linear_params(inner, c, false);
    let lstm = linear_params(c, 4 * c, true) + linear_params(c, 4 * c, false);
    embed + e.blocks * (norms + attn + ffn) + e.lstm * lstm
}

/// Multiply-accumulates of one extractor over one frame.
fn extractor_macs(cfg: &ModelConfig, e: &Extractor) -> usize {
    let c = e.width;
    let a = e.antennas;
    let mut len = cfg.len;
    let mut macs = a * len * 2 * c;
    for i in 0..e.convs {
        if i < e.strided {
            len /= 2;
        }
        macs += a * len * cfg.kernel * c * c;
    }
    let tokens = a * len;
    // Q, K, V, O projections, scores and weighted values, three FFN products
    let block = tokens * 4 * c * c + 2 * len * a * a * c + tokens * 3 * cfg.ffn_mult * c * c;
    macs += e.blocks * block;
    macs += e.lstm * tokens * 8 * c * c;
    macs
}

fn extractors(cfg: &ModelConfig) -> (Option<Extractor>, Extractor) {
    let cc = cfg.variant.has_cc().then_some(Extractor {
        width: cfg.cc_width,
        convs: cfg.conv_layers,
        strided: cfg.conv_layers,
        blocks: cfg.transformer_blocks,
        lstm: cfg.lstm_layers,
        antennas: cfg.nr,
    });
    let main = Extractor {
        width: cfg.width,
        convs: cfg.conv_stack().len(),
        strided: cfg.conv_layers,
        blocks: cfg.effective_blocks(),
        lstm: cfg.effective_lstm_layers(),
        antennas: cfg.extractor_antennas(),
    };
    (cc, main)
}

/// Number of trainable scalars.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (cc, main) = extractors(cfg);
    let cc_params = cc.map_or(0, |e| {
        extractor_params(cfg, &e) + linear_params(e.width, 2 * cfg.nt, true)
    });
    cc_params + extractor_params(cfg, &main) + linear_params(cfg.width, cfg.num_classes, true)
}

/// Forward FLOPs for one frame, counted as two per multiply-accumulate in
/// the convolutions, products and recurrences. Normalization, activations
/// and biases are not counted.
pub fn estimate_flops(cfg: &ModelConfig) -> usize {
    let (cc, main) = extractors(cfg);
    let mut macs = extractor_macs(cfg, &main) + cfg.width * cfg.num_classes;
    if let Some(e) = cc {
        macs += extractor_macs(cfg, &e) + cfg.nr * e.width * 2 * cfg.nt;
        // complex multiply-accumulate per (i, j, t)
        macs += 4 * cfg.nt * cfg.nr * cfg.len;
    }
    2 * macs
}
