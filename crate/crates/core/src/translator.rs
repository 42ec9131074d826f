//! The conditional translator: a small decoder-only language model that
//! reads an optional visual prefix (projected scene embeddings), the
//! source sentence and a separator, then emits target tokens
//! autoregressively. Output projection is tied to the token embeddings.

use crate::tensor::{Bound, Params, Record, Tensor, TensorError};
use crate::world;
use rand::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TranslatorError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    UnknownId(usize),
    #[error("sequence of length {len} exceeds the model maximum {max}")]
    Overlength { len: usize, max: usize },
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TranslatorError>;

/// Token universe for both languages plus the reserved specials at the
/// fixed ids 0..=4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const PAD: usize = 2;
    pub const SEP: usize = 3;
    pub const IMG: usize = 4;

    const SPECIALS: [&'static str; 5] = ["<bos>", "<eos>", "<pad>", "<sep>", "<img>"];

    /// The shared bilingual vocabulary: specials, then Sourcish, then
    /// Targetese, in fixed order.
    pub fn shared() -> Self {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(world::source_vocab().iter().map(|s| s.to_string()));
        tokens.extend(world::target_vocab().iter().map(|s| s.to_string()));
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| TranslatorError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TranslatorError::UnknownId(id))
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < Self::SPECIALS.len() {
            return Err(TranslatorError::VocabFile(
                "fewer tokens than reserved specials".into(),
            ));
        }
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(TranslatorError::VocabFile(format!(
                    "special {s:?} missing from reserved id {i}"
                )));
            }
        }
        Ok(Vocabulary { tokens })
    }
}

#[derive(Clone, Debug)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub enc_hidden: usize,
    pub enc_out: usize,
    pub l_vis: usize,
    pub d_model: usize,
    /// When false the scene encoder is a frozen random linear map and only
    /// the projector layer trains (the `w/o VS` ablation).
    pub use_encoder: bool,
}

impl ProjectorConfig {
    pub fn standard(d_model: usize, l_vis: usize, use_encoder: bool) -> Self {
        ProjectorConfig {
            input_dim: world::SCENE_DIM,
            enc_hidden: 64,
            enc_out: 64,
            l_vis,
            d_model,
            use_encoder,
        }
    }
}

/// Scene-feature encoder (two tanh layers) followed by a linear projector
/// producing exactly `l_vis` embeddings of width `d_model`.
#[derive(Clone, Debug)]
pub struct VisualProjector {
    pub cfg: ProjectorConfig,
    pub params: Params,
}

impl VisualProjector {
    pub fn init(cfg: ProjectorConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        if cfg.use_encoder {
            params.insert(
                "enc.w1",
                gaussian_matrix(rng, cfg.input_dim, cfg.enc_hidden, 1.0 / (cfg.input_dim as f64).sqrt()),
            );
            params.insert("enc.b1", Tensor::zeros(&[1, cfg.enc_hidden]));
            params.insert(
                "enc.w2",
                gaussian_matrix(rng, cfg.enc_hidden, cfg.enc_out, 1.0 / (cfg.enc_hidden as f64).sqrt()),
            );
            params.insert("enc.b2", Tensor::zeros(&[1, cfg.enc_out]));
        } else {
            // frozen random feature map; bound as a constant in forward
            params.insert(
                "enc.frozen",
                gaussian_matrix(rng, cfg.input_dim, cfg.enc_out, 1.0 / (cfg.input_dim as f64).sqrt()),
            );
        }
        params.insert(
            "proj.w",
            gaussian_matrix(
                rng,
                cfg.enc_out,
                cfg.l_vis * cfg.d_model,
                1.0 / (cfg.enc_out as f64).sqrt(),
            ),
        );
        params.insert("proj.b", Tensor::zeros(&[1, cfg.l_vis * cfg.d_model]));
        VisualProjector { cfg, params }
    }

    pub fn bind(&self, rec: &mut Record) -> Bound {
        self.params.bind(rec)
    }

    /// Map a scene vector to the `l_vis x d_model` visual prefix.
    pub fn project_visual(&self, rec: &mut Record, bind: &Bound, x0: &[f64]) -> Result<Tensor> {
        assert_eq!(x0.len(), self.cfg.input_dim, "scene vector dimension");
        let x = Tensor::row(x0.to_vec());
        let feat = if self.cfg.use_encoder {
            let h = rec.matmul(&x, bind.t("enc.w1"))?;
            let h = rec.add(&h, bind.t("enc.b1"))?;
            let h = rec.tanh(&h)?;
            let h = rec.matmul(&h, bind.t("enc.w2"))?;
            let h = rec.add(&h, bind.t("enc.b2"))?;
            rec.tanh(&h)?
        } else {
            // the frozen map stays out of the gradient path
            let frozen = self.params.get("enc.frozen").clone();
            rec.matmul(&x, &frozen)?
        };
        let flat = rec.matmul(&feat, bind.t("proj.w"))?;
        let flat = rec.add(&flat, bind.t("proj.b"))?;
        Ok(rec.reshape(&flat, &[self.cfg.l_vis, self.cfg.d_model])?)
    }

    pub fn project_visual_plain(&self, x0: &[f64]) -> Result<Tensor> {
        let mut rec = Record::disabled();
        let bind = self.bind(&mut rec);
        self.project_visual(&mut rec, &bind, x0)
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| crate::streams::randn(rng) * scale)
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn standard(vocab: usize) -> Self {
        ModelConfig {
            d_model: 64,
            blocks: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 48,
            vocab,
        }
    }
}

/// Decoder-only causal language model with tied input/output embeddings
/// and learned positional embeddings.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl DecoderModel {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        assert_eq!(cfg.d_model % cfg.heads, 0, "heads must divide d_model");
        let mut params = Params::new();
        params.insert("emb", gaussian_matrix(rng, cfg.vocab, cfg.d_model, 0.1));
        params.insert("pos", gaussian_matrix(rng, cfg.max_len, cfg.d_model, 0.1));
        let attn_scale = 1.0 / (cfg.d_model as f64).sqrt();
        for b in 0..cfg.blocks {
            // no key bias: softmax is invariant to a per-row score shift,
            // so a key bias would be a structurally dead parameter
            for mat in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    &format!("blk{b}.{mat}"),
                    gaussian_matrix(rng, cfg.d_model, cfg.d_model, attn_scale),
                );
                if mat != "wk" {
                    params.insert(&format!("blk{b}.{mat}b"), Tensor::zeros(&[1, cfg.d_model]));
                }
            }
            params.insert(
                &format!("blk{b}.ff1"),
                gaussian_matrix(rng, cfg.d_model, cfg.ff_dim, attn_scale),
            );
            params.insert(&format!("blk{b}.ff1b"), Tensor::zeros(&[1, cfg.ff_dim]));
            params.insert(
                &format!("blk{b}.ff2"),
                gaussian_matrix(rng, cfg.ff_dim, cfg.d_model, 1.0 / (cfg.ff_dim as f64).sqrt()),
            );
            params.insert(&format!("blk{b}.ff2b"), Tensor::zeros(&[1, cfg.d_model]));
        }
        DecoderModel { cfg, params }
    }

    pub fn bind(&self, rec: &mut Record) -> Bound {
        self.params.bind(rec)
    }

    /// Per-position logits over the vocabulary. `ids` is the full layout
    /// `[IMG x L?] [source] [SEP] [target so far]`; when `visuals` is
    /// present its rows replace the embeddings of the leading IMG
    /// positions. Positions attend only to themselves and the left.
    pub fn lm_logits(
        &self,
        rec: &mut Record,
        bind: &Bound,
        ids: &[usize],
        visuals: Option<&Tensor>,
    ) -> Result<Tensor> {
        let t_len = ids.len();
        if t_len > self.cfg.max_len {
            return Err(TranslatorError::Overlength {
                len: t_len,
                max: self.cfg.max_len,
            });
        }
        let n_vis = visuals.map_or(0, |v| v.shape()[0]);
        debug_assert!(
            visuals.is_none() || ids[..n_vis].iter().all(|&i| i == Vocabulary::IMG),
            "visual rows must line up with IMG placeholder ids"
        );
        let token_ids = &ids[n_vis..];
        let idx = Tensor::vector(token_ids.iter().map(|&i| i as f64).collect());
        let tok_emb = rec.gather_rows(bind.t("emb"), &idx)?;
        let mut h = match visuals {
            Some(v) => rec.concat(&[v, &tok_emb], 0)?,
            None => tok_emb,
        };
        let pos = rec.slice(bind.t("pos"), 0, 0, t_len)?;
        h = rec.add(&h, &pos)?;

        let mask = causal_mask(t_len);
        let dh = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in 0..self.cfg.blocks {
            let name = |m: &str| format!("blk{b}.{m}");
            let q = rec.matmul(&h, bind.t(&name("wq")))?;
            let q = rec.add(&q, bind.t(&name("wqb")))?;
            let k = rec.matmul(&h, bind.t(&name("wk")))?;
            let v = rec.matmul(&h, bind.t(&name("wv")))?;
            let v = rec.add(&v, bind.t(&name("wvb")))?;
            let mut head_outputs = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let qh = rec.slice(&q, 1, head * dh, dh)?;
                let kh = rec.slice(&k, 1, head * dh, dh)?;
                let vh = rec.slice(&v, 1, head * dh, dh)?;
                let kt = rec.transpose(&kh)?;
                let scores = rec.matmul(&qh, &kt)?;
                let scores = rec.scale(&scores, scale)?;
                let masked = rec.add(&scores, &mask)?;
                let probs = rec.softmax_rows(&masked)?;
                head_outputs.push(rec.matmul(&probs, &vh)?);
            }
            let head_refs: Vec<&Tensor> = head_outputs.iter().collect();
            let attn = rec.concat(&head_refs, 1)?;
            let attn = rec.matmul(&attn, bind.t(&name("wo")))?;
            let attn = rec.add(&attn, bind.t(&name("wob")))?;
            h = rec.add(&h, &attn)?;
            let f = rec.matmul(&h, bind.t(&name("ff1")))?;
            let f = rec.add(&f, bind.t(&name("ff1b")))?;
            let f = rec.tanh(&f)?;
            let f = rec.matmul(&f, bind.t(&name("ff2")))?;
            let f = rec.add(&f, bind.t(&name("ff2b")))?;
            h = rec.add(&h, &f)?;
        }

        let emb_t = rec.transpose(bind.t("emb"))?;
        Ok(rec.matmul(&h, &emb_t)?)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above it.
fn causal_mask(t_len: usize) -> Tensor {
    let mut data = vec![0.0; t_len * t_len];
    for r in 0..t_len {
        for c in (r + 1)..t_len {
            data[r * t_len + c] = -1e9;
        }
    }
    Tensor::matrix(t_len, t_len, data).expect("mask shape")
}

/// One training example prepared for the loss: full sequence ids plus the
/// span of positions whose next-token predictions count.
pub struct PreparedExample {
    pub ids: Vec<usize>,
    pub visuals: Option<Tensor>,
    sep_pos: usize,
    n_predictions: usize,
}

/// Assemble `[IMG x L?] [source] [SEP] [target] [EOS]` and remember where
/// the loss positions start.
pub fn prepare_example(
    vocab: &Vocabulary,
    source: &[String],
    target: &[String],
    visuals: Option<Tensor>,
    l_vis: usize,
) -> Result<PreparedExample> {
    let mut ids = Vec::new();
    if visuals.is_some() {
        ids.extend(std::iter::repeat(Vocabulary::IMG).take(l_vis));
    }
    ids.extend(vocab.ids(source)?);
    let sep_pos = ids.len();
    ids.push(Vocabulary::SEP);
    ids.extend(vocab.ids(target)?);
    ids.push(Vocabulary::EOS);
    let n_predictions = target.len() + 1;
    Ok(PreparedExample {
        ids,
        visuals,
        sep_pos,
        n_predictions,
    })
}

/// Mean negative log-likelihood over target-side positions only (source
/// and visual-prefix positions are masked out of the loss). The reduction
/// runs in the order examples are given.
pub fn mllm_loss(
    rec: &mut Record,
    bind: &Bound,
    model: &DecoderModel,
    examples: &[PreparedExample],
) -> Result<Tensor> {
    assert!(!examples.is_empty(), "mllm_loss needs a non-empty batch");
    let mut nll_parts = Vec::with_capacity(examples.len());
    let mut total_positions = 0usize;
    for ex in examples {
        let logits = model.lm_logits(rec, bind, &ex.ids, ex.visuals.as_ref())?;
        let span = rec.slice(&logits, 0, ex.sep_pos, ex.n_predictions)?;
        let targets: Vec<f64> = (0..ex.n_predictions)
            .map(|i| ex.ids[ex.sep_pos + 1 + i] as f64)
            .collect();
        let targets = Tensor::vector(targets);
        nll_parts.push(rec.softmax_cross_entropy(&span, &targets)?);
        total_positions += ex.n_predictions;
    }
    let part_refs: Vec<&Tensor> = nll_parts.iter().collect();
    let all = rec.concat(&part_refs, 0)?;
    let total = rec.sum(&all)?;
    Ok(rec.scale(&total, 1.0 / total_positions as f64)?)
}

/// Argmax decoding from SEP until EOS or `max_new` generated tokens.
/// Ties resolve to the lowest token id; fully deterministic.
pub fn greedy_decode(
    model: &DecoderModel,
    vocab: &Vocabulary,
    source: &[String],
    visuals: Option<&Tensor>,
    max_new: usize,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let n_vis = visuals.map_or(0, |v| v.shape()[0]);
    ids.extend(std::iter::repeat(Vocabulary::IMG).take(n_vis));
    ids.extend(vocab.ids(source)?);
    ids.push(Vocabulary::SEP);

    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= model.cfg.max_len {
            break;
        }
        let mut rec = Record::disabled();
        let bind = model.bind(&mut rec);
        let logits = model.lm_logits(&mut rec, &bind, &ids, visuals)?;
        let v = model.cfg.vocab;
        let last = &logits.data()[(ids.len() - 1) * v..ids.len() * v];
        let mut best = 0usize;
        for i in 1..v {
            if last[i] > last[best] {
                best = i;
            }
        }
        if best == Vocabulary::EOS {
            break;
        }
        ids.push(best);
        out.push(vocab.token(best)?.to_string());
    }
    Ok(out)
}
