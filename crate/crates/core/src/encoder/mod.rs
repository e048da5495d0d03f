//! Pre-norm transformer encoder and the Condenser head.
//!
//! The encoder embeds tokens plus learned positions and runs `num_layers`
//! blocks of `x += Attn(LN(x)); x += FFN(LN(x))`. The last-layer stream
//! passes through a final layer norm; its rows (L2-normalized when
//! `normalize_tokens` is on) are the token representations used for
//! similarity. The stream after block `middle_layer` is kept for the head.
//!
//! The Condenser head re-reads each span as `[CLS from the last layer ;
//! non-CLS rows from the middle layer]`, runs `condenser_layers` further
//! blocks, and predicts masked tokens through the shared MLM projection.
//! Its parameters live under the `condenser.` prefix so they can be dropped
//! after pretraining without touching the encoder.

mod checkpoint;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Segment, Tape, Var, LAYER_NORM_EPS};
use crate::seeding;
use crate::tokenizer::MaskedSequence;

pub const CONDENSER_PREFIX: &str = "condenser.";

/// Encoder shape. `middle_layer` counts blocks from the bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub middle_layer: usize,
    pub condenser_layers: usize,
    pub normalize_tokens: bool,
}

impl EncoderConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            vocab_size,
            max_len: 64,
            middle_layer: 2,
            condenser_layers: 2,
            normalize_tokens: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.num_layers < 2 || self.num_layers % 2 != 0 {
            return fail(format!("num_layers {} must be even and >= 2", self.num_layers));
        }
        if self.middle_layer == 0 || self.middle_layer >= self.num_layers {
            return fail(format!(
                "middle_layer {} must lie in 1..{}",
                self.middle_layer, self.num_layers
            ));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.vocab_size < crate::tokenizer::NUM_RESERVED {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_len < 2 || self.ff_dim == 0 {
            return fail("max_len must be >= 2 and ff_dim > 0".into());
        }
        Ok(())
    }
}

/// Encoder configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn has_condenser(&self) -> bool {
        self.params.iter().any(|p| p.name.starts_with(CONDENSER_PREFIX))
    }

    /// The encoder without its Condenser head.
    pub fn without_condenser(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.filtered(|n| !n.starts_with(CONDENSER_PREFIX)),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

fn block_shapes(prefix: &str, d: usize, ff: usize) -> Vec<(String, usize, usize, Init)> {
    let p = |s: &str| format!("{prefix}.{s}");
    vec![
        (p("ln1.gain"), 1, d, Init::One),
        (p("ln1.bias"), 1, d, Init::Zero),
        (p("attn.q.weight"), d, d, Init::Normal),
        (p("attn.q.bias"), 1, d, Init::Zero),
        (p("attn.k.weight"), d, d, Init::Normal),
        (p("attn.v.weight"), d, d, Init::Normal),
        (p("attn.v.bias"), 1, d, Init::Zero),
        (p("attn.out.weight"), d, d, Init::Normal),
        (p("attn.out.bias"), 1, d, Init::Zero),
        (p("ln2.gain"), 1, d, Init::One),
        (p("ln2.bias"), 1, d, Init::Zero),
        (p("ff.in.weight"), d, ff, Init::Normal),
        (p("ff.in.bias"), 1, ff, Init::Zero),
        (p("ff.out.weight"), ff, d, Init::Normal),
        (p("ff.out.bias"), 1, d, Init::Zero),
    ]
}

fn param_shapes(config: &EncoderConfig) -> Vec<(String, usize, usize, Init)> {
    let (d, v, ff) = (config.hidden_dim, config.vocab_size, config.ff_dim);
    let mut shapes = vec![
        ("embed.tokens".to_string(), v, d, Init::Normal),
        ("embed.positions".to_string(), config.max_len, d, Init::Normal),
    ];
    for l in 0..config.num_layers {
        shapes.extend(block_shapes(&format!("layer{l}"), d, ff));
    }
    shapes.extend([
        ("final_norm.gain".to_string(), 1, d, Init::One),
        ("final_norm.bias".to_string(), 1, d, Init::Zero),
        ("mlm_head.weight".to_string(), d, v, Init::Normal),
        ("mlm_head.bias".to_string(), 1, v, Init::Zero),
    ]);
    for c in 0..config.condenser_layers {
        shapes.extend(block_shapes(&format!("{CONDENSER_PREFIX}layer{c}"), d, ff));
    }
    if config.condenser_layers > 0 {
        shapes.extend([
            (format!("{CONDENSER_PREFIX}final_norm.gain"), 1, d, Init::One),
            (format!("{CONDENSER_PREFIX}final_norm.bias"), 1, d, Init::Zero),
        ]);
    }
    shapes
}

/// Weights ~ N(0, 0.02), biases 0, layer-norm gains 1; deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<Model> {
    init_params_with_std(config, seed, INIT_STD)
}

pub const INIT_STD: f64 = 0.02;

/// [`init_params`] with a different weight standard deviation.
pub fn init_params_with_std(config: &EncoderConfig, seed: u64, std: f64) -> Result<Model> {
    config.validate()?;
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::contract(format!("init std must be positive, got {std}")));
    }
    let mut rng = seeding::stream(seed, &[seeding::phase::INIT]);
    let normal = Normal::new(0.0, std).expect("valid normal");
    let mut params = ParamStore::new();
    for (name, rows, cols, init) in param_shapes(config) {
        let value = match init {
            Init::Normal => Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())?,
            Init::Zero => Matrix::zeros(rows, cols),
            Init::One => Matrix::filled(rows, cols, 1.0),
        };
        params.insert(name, value)?;
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Tape handles for one encoder pass over a stack of spans.
pub struct EncodedBatch {
    pub segments: Arc<[Segment]>,
    /// Last layer after the final norm (`rows x hidden`).
    pub hidden: Var,
    /// Similarity-facing token rows (`hidden`, L2-normalized if configured).
    pub tokens: Var,
    /// Residual stream after block `middle_layer`.
    pub middle: Var,
    /// Similarity-facing CLS row of each span (`spans x hidden`).
    pub cls: Var,
}

impl EncodedBatch {
    pub fn num_spans(&self) -> usize {
        self.segments.len()
    }
}

/// Lays spans end to end; each becomes one attention segment.
pub fn segments_for(spans: &[MaskedSequence]) -> Arc<[Segment]> {
    let mut start = 0;
    spans
        .iter()
        .map(|s| {
            let seg = Segment {
                start,
                mask: s.attended(),
            };
            start += s.len();
            seg
        })
        .collect()
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.tape.param(self.params, id))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn block(&mut self, x: Var, prefix: &str, segments: &Arc<[Segment]>, heads: usize) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.ln1"))?;
        let q = self.linear(h, &format!("{prefix}.attn.q"))?;
        // a key bias only shifts each query's scores uniformly, so there is none
        let wk = self.p(&format!("{prefix}.attn.k.weight"))?;
        let k = self.tape.matmul(h, wk)?;
        let v = self.linear(h, &format!("{prefix}.attn.v"))?;
        let a = self.tape.attention(q, k, v, segments.clone(), heads)?;
        let a = self.linear(a, &format!("{prefix}.attn.out"))?;
        let x = self.tape.add(x, a)?;

        let h = self.norm(x, &format!("{prefix}.ln2"))?;
        let f = self.linear(h, &format!("{prefix}.ff.in"))?;
        let f = self.tape.gelu(f);
        let f = self.linear(f, &format!("{prefix}.ff.out"))?;
        self.tape.add(x, f)
    }
}

/// Runs the encoder over `spans` on `tape`.
pub fn forward(tape: &mut Tape, model: &Model, spans: &[MaskedSequence]) -> Result<EncodedBatch> {
    let cfg = &model.config;
    if spans.is_empty() {
        return Err(Error::contract("encoder input has no spans"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for s in spans {
        if s.len() > cfg.max_len || s.is_empty() {
            return Err(Error::contract(format!(
                "span length {} outside 1..={}",
                s.len(),
                cfg.max_len
            )));
        }
        if s.attention_mask.first() != Some(&1) {
            return Err(Error::contract("span must start with an attended CLS position"));
        }
        for &id in &s.input_ids {
            if id >= cfg.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: id as i64,
                    limit: cfg.vocab_size,
                });
            }
        }
        ids.extend_from_slice(&s.input_ids);
        positions.extend(0..s.len());
    }
    let segments = segments_for(spans);
    let mut ctx = Ctx {
        tape,
        params: &model.params,
    };

    let tok_table = ctx.p("embed.tokens")?;
    let pos_table = ctx.p("embed.positions")?;
    let tok = ctx.tape.embedding(tok_table, &ids)?;
    let pos = ctx.tape.embedding(pos_table, &positions)?;
    let mut x = ctx.tape.add(tok, pos)?;
    let mut middle = None;
    for l in 0..cfg.num_layers {
        x = ctx.block(x, &format!("layer{l}"), &segments, cfg.num_heads)?;
        if l + 1 == cfg.middle_layer {
            middle = Some(x);
        }
    }
    let hidden = ctx.norm(x, "final_norm")?;
    let tokens = if cfg.normalize_tokens {
        ctx.tape.l2_normalize(hidden)
    } else {
        hidden
    };
    let cls_rows: Vec<usize> = segments.iter().map(|s| s.start).collect();
    let cls = ctx.tape.gather_rows(tokens, &cls_rows)?;
    Ok(EncodedBatch {
        segments,
        hidden,
        tokens,
        middle: middle.expect("middle_layer validated"),
        cls,
    })
}

/// Applies the shared MLM head to hidden rows (`rows x vocab`).
pub fn vocab_logits(tape: &mut Tape, model: &Model, hidden: Var) -> Result<Var> {
    let mut ctx = Ctx {
        tape,
        params: &model.params,
    };
    ctx.linear(hidden, "mlm_head")
}

/// Vocabulary logits from the last layer (`rows x vocab`).
pub fn mlm_logits(tape: &mut Tape, model: &Model, enc: &EncodedBatch) -> Result<Var> {
    vocab_logits(tape, model, enc.hidden)
}

/// Condenser-head hidden rows before the vocabulary projection. Row 0 of each
/// span comes from the last layer, the rest from the middle layer.
pub fn condenser_hidden(tape: &mut Tape, model: &Model, enc: &EncodedBatch) -> Result<Var> {
    let cfg = &model.config;
    if cfg.condenser_layers == 0 {
        return Err(Error::contract("condenser head needs at least one layer"));
    }
    let rows = tape.value(enc.hidden).rows();
    let mut from_last = vec![false; rows];
    for s in enc.segments.iter() {
        from_last[s.start] = true;
    }
    let mut ctx = Ctx {
        tape,
        params: &model.params,
    };
    let mut x = ctx.tape.merge_rows(enc.hidden, enc.middle, from_last)?;
    for c in 0..cfg.condenser_layers {
        x = ctx.block(x, &format!("{CONDENSER_PREFIX}layer{c}"), &enc.segments, cfg.num_heads)?;
    }
    ctx.norm(x, &format!("{CONDENSER_PREFIX}final_norm"))
}

/// Condenser-head vocabulary logits (`rows x vocab`).
pub fn condenser_logits(tape: &mut Tape, model: &Model, enc: &EncodedBatch) -> Result<Var> {
    let h = condenser_hidden(tape, model, enc)?;
    vocab_logits(tape, model, h)
}

/// Plain per-span encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Similarity-facing token rows, one per position.
    pub last_tokens: Matrix,
    pub middle_tokens: Matrix,
    pub cls: Vec<f64>,
    pub attention_mask: Vec<bool>,
}

/// Encodes spans without recording gradients.
pub fn encode(model: &Model, spans: &[MaskedSequence]) -> Result<Vec<EncoderOutput>> {
    let mut tape = Tape::inference();
    let enc = forward(&mut tape, model, spans)?;
    Ok(split_outputs(&tape, &enc))
}

pub fn split_outputs(tape: &Tape, enc: &EncodedBatch) -> Vec<EncoderOutput> {
    let tokens = tape.value(enc.tokens);
    let middle = tape.value(enc.middle);
    enc.segments
        .iter()
        .map(|s| EncoderOutput {
            last_tokens: tokens.slice_rows(s.start, s.len()),
            middle_tokens: middle.slice_rows(s.start, s.len()),
            cls: tokens.row(s.start).to_vec(),
            attention_mask: s.mask.clone(),
        })
        .collect()
}

/// Random token ids in `[NUM_RESERVED, vocab)`, CLS-prefixed; test helper
/// shared by integration tests.
pub fn random_span<R: Rng + ?Sized>(rng: &mut R, vocab: usize, len: usize, pad: usize) -> MaskedSequence {
    let mut ids = vec![crate::tokenizer::CLS];
    ids.extend((1..len).map(|_| rng.random_range(crate::tokenizer::NUM_RESERVED..vocab)));
    ids.extend(std::iter::repeat_n(crate::tokenizer::PAD, pad));
    MaskedSequence::unmasked(ids)
}
