//! Offsets of every named tensor inside the flat parameter buffer.

use std::ops::Range;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// `x · W + b` with `W` stored `din × dout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnIdx {
    pub up: LinearIdx,
    pub down: LinearIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIdx {
    pub norm1: NormIdx,
    pub attn: AttnIdx,
    pub norm2: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIdx {
    pub norm1: NormIdx,
    pub self_attn: AttnIdx,
    pub norm2: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm3: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub encoder_norm: NormIdx,
    pub decoder: Vec<DecoderLayerIdx>,
    pub decoder_norm: NormIdx,
    pub output: LinearIdx,
    /// End of the encoder-side prefix of the buffer.
    pub encoder_end: usize,
    pub total: usize,
    pub tensors: Vec<TensorSpec>,
}

struct Builder {
    offset: usize,
    tensors: Vec<TensorSpec>,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, kind: TensorKind) -> usize {
        let offset = self.offset;
        self.tensors.push(TensorSpec {
            name,
            offset,
            rows,
            cols,
            kind,
        });
        self.offset += rows * cols;
        offset
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIdx {
        let w = self.push(format!("{name}.weight"), din, dout, TensorKind::Weight);
        let b = self.push(format!("{name}.bias"), 1, dout, TensorKind::Bias);
        LinearIdx { w, b, din, dout }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        let g = self.push(format!("{name}.gain"), 1, d, TensorKind::Gain);
        let b = self.push(format!("{name}.bias"), 1, d, TensorKind::Bias);
        NormIdx { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            up: self.linear(&format!("{name}.up"), d, f),
            down: self.linear(&format!("{name}.down"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            offset: 0,
            tensors: Vec::new(),
        };
        let tok = b.push("token_embedding".into(), cfg.vocab_size, d, TensorKind::Embedding);
        let pos = b.push("position_embedding".into(), cfg.max_positions, d, TensorKind::Embedding);
        let seg = b.push("segment_embedding".into(), cfg.n_segments, d, TensorKind::Embedding);
        let encoder = (0..cfg.n_encoder_layers)
            .map(|i| EncoderLayerIdx {
                norm1: b.norm(&format!("encoder.{i}.norm1"), d),
                attn: b.attn(&format!("encoder.{i}.self_attn"), d),
                norm2: b.norm(&format!("encoder.{i}.norm2"), d),
                ffn: b.ffn(&format!("encoder.{i}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let encoder_norm = b.norm("encoder.final_norm", d);
        let encoder_end = b.offset;
        let decoder = (0..cfg.n_decoder_layers)
            .map(|i| DecoderLayerIdx {
                norm1: b.norm(&format!("decoder.{i}.norm1"), d),
                self_attn: b.attn(&format!("decoder.{i}.self_attn"), d),
                norm2: b.norm(&format!("decoder.{i}.norm2"), d),
                cross_attn: b.attn(&format!("decoder.{i}.cross_attn"), d),
                norm3: b.norm(&format!("decoder.{i}.norm3"), d),
                ffn: b.ffn(&format!("decoder.{i}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let decoder_norm = b.norm("decoder.final_norm", d);
        let output = b.linear("output", d, cfg.vocab_size);
        Layout {
            tok,
            pos,
            seg,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            encoder_end,
            total: b.offset,
            tensors: b.tensors,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
