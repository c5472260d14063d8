//! Predictor models: the transformer relation predictor, the MLP
//! relation baseline, and the transformer accuracy regressor.
//!
//! The relation models score ordered pairs of encoded configurations;
//! the regressor predicts a score for one configuration.  Both
//! transformer models share the same encoder structure: token embedding
//! plus fixed sinusoidal positions, post-norm encoder layers, masked
//! mean pooling to one d-dimensional embedding per sequence.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedConfig, MAX_LEN};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, uniform, zeros, BoundParams, Linear, ParamId, ParamSet};
use crate::predictor::tokenizer::{tokenize, PAD_TOKEN, VOCAB_SIZE};
use crate::tape::{sigmoid, NodeId, Tape};

/// Sizes of the transformer models; every knob of the desk-scale
/// defaults is exposed here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Hidden width of the relation head.
    pub head_hidden: usize,
    /// Longest supported token sequence (positional table size).
    pub max_len: usize,
    /// Score pairs as a linear map of e_i - e_j, making p(i,j) + p(j,i)
    /// exactly 1.  Off by default: the standard head follows the
    /// concatenate-then-FC description.
    pub antisymmetric: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            d_model: 32,
            num_layers: 2,
            num_heads: 1,
            d_ff: 64,
            head_hidden: 32,
            max_len: MAX_LEN,
            antisymmetric: false,
        }
    }
}

impl PredictorConfig {
    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.head_hidden == 0 || self.max_len == 0 {
            return Err(Error::Config("all predictor sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal positional table (max_len, d); not a parameter.
pub fn positional_encoding(max_len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, d));
    for pos in 0..max_len {
        for k in 0..d {
            let exponent = 2.0 * (k / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, k]] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

struct EncoderLayerIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: crate::nn::LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: crate::nn::LayerNorm,
}

/// Parameter handles of one transformer encoder.
pub struct EncoderIds {
    embed: ParamId,
    layers: Vec<EncoderLayerIds>,
}

impl EncoderIds {
    fn register<R: Rng>(ps: &mut ParamSet, rng: &mut R, cfg: &PredictorConfig) -> EncoderIds {
        let embed = ps.register("embed", uniform(rng, &[VOCAB_SIZE, cfg.d_model], -0.1, 0.1));
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let d = cfg.d_model;
                let name = |part: &str| format!("enc{l}.{part}");
                EncoderLayerIds {
                    q: Linear::register(ps, rng, &name("attn.q"), d, d),
                    k: Linear::register(ps, rng, &name("attn.k"), d, d),
                    v: Linear::register(ps, rng, &name("attn.v"), d, d),
                    o: Linear::register(ps, rng, &name("attn.o"), d, d),
                    ln1: crate::nn::LayerNorm::register(ps, &name("ln1"), d),
                    ff1: Linear::register(ps, rng, &name("ffn.fc1"), d, cfg.d_ff),
                    ff2: Linear::register(ps, rng, &name("ffn.fc2"), cfg.d_ff, d),
                    ln2: crate::nn::LayerNorm::register(ps, &name("ln2"), d),
                }
            })
            .collect();
        EncoderIds { embed, layers }
    }

    /// Encode a batch of token sequences to (B, d) pooled embeddings.
    /// Sequences are padded to the longest; padded keys are masked out
    /// of attention and padded positions out of pooling, so each
    /// sequence's embedding is independent of its batch neighbors.
    fn encode_batch(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cfg: &PredictorConfig,
        seqs: &[Vec<usize>],
    ) -> Result<NodeId> {
        let b = seqs.len();
        let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if l == 0 {
            return Err(Error::Config("cannot encode an empty batch".into()));
        }
        if l > cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {l} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let (d, heads) = (cfg.d_model, cfg.num_heads);
        let dh = d / heads;

        let mut ids = Vec::with_capacity(b * l);
        for seq in seqs {
            ids.extend(seq.iter().copied());
            ids.extend(std::iter::repeat(PAD_TOKEN).take(l - seq.len()));
        }
        let emb = tape.gather(bound.node(self.embed), &ids);

        let pe = positional_encoding(cfg.max_len, d);
        let mut pe_tile = Array2::zeros((b * l, d));
        for bi in 0..b {
            for p in 0..l {
                pe_tile.row_mut(bi * l + p).assign(&pe.row(p));
            }
        }
        let pe_leaf = tape.leaf(pe_tile.into_dyn());
        let mut h = tape.add(emb, pe_leaf);

        // Additive key mask, shared by every layer.
        let mut mask = Array3::zeros((b * heads, l, l));
        for bi in 0..b {
            for hd in 0..heads {
                for j in seqs[bi].len()..l {
                    mask
                        .index_axis_mut(ndarray::Axis(0), bi * heads + hd)
                        .column_mut(j)
                        .fill(-1e9);
                }
            }
        }
        let mask_leaf = tape.leaf(mask.into_dyn());

        for layer in &self.layers {
            let split = |tape: &mut Tape, x: NodeId| {
                let x4 = tape.reshape(x, &[b, l, heads, dh]);
                let xp = tape.permute(x4, &[0, 2, 1, 3]);
                tape.reshape(xp, &[b * heads, l, dh])
            };
            let q = layer.q.apply(tape, bound, h);
            let k = layer.k.apply(tape, bound, h);
            let v = layer.v.apply(tape, bound, h);
            let q3 = split(tape, q);
            let k3 = split(tape, k);
            let v3 = split(tape, v);
            let kt = tape.permute(k3, &[0, 2, 1]);
            let scores = tape.batch_matmul(q3, kt);
            let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
            let masked = tape.add(scaled, mask_leaf);
            let attn = tape.softmax(masked, 2);
            let ctx = tape.batch_matmul(attn, v3);
            let c4 = tape.reshape(ctx, &[b, heads, l, dh]);
            let cp = tape.permute(c4, &[0, 2, 1, 3]);
            let merged = tape.reshape(cp, &[b * l, d]);
            let out = layer.o.apply(tape, bound, merged);
            let res = tape.add(h, out);
            h = layer.ln1.apply(tape, bound, res);

            let f1 = layer.ff1.apply(tape, bound, h);
            let f1r = tape.relu(f1);
            let f2 = layer.ff2.apply(tape, bound, f1r);
            let res2 = tape.add(h, f2);
            h = layer.ln2.apply(tape, bound, res2);
        }

        // Masked mean pooling as a batched matmul with constant weights.
        let mut w = Array3::zeros((b, 1, l));
        for (bi, seq) in seqs.iter().enumerate() {
            let inv = 1.0 / seq.len() as f64;
            for p in 0..seq.len() {
                w[[bi, 0, p]] = inv;
            }
        }
        let w_leaf = tape.leaf(w.into_dyn());
        let h3 = tape.reshape(h, &[b, l, d]);
        let pooled3 = tape.batch_matmul(w_leaf, h3);
        Ok(tape.reshape(pooled3, &[b, d]))
    }
}

enum Head {
    Standard {
        wi: ParamId,
        wj: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Antisymmetric {
        w: ParamId,
    },
}

/// Transformer relation predictor over ordered pairs.
pub struct RelationPredictor {
    pub config: PredictorConfig,
    pub params: ParamSet,
    encoder: EncoderIds,
    head: Head,
}

impl RelationPredictor {
    pub fn new<R: Rng>(config: PredictorConfig, rng: &mut R) -> Result<RelationPredictor> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = EncoderIds::register(&mut params, rng, &config);
        let (d, hidden) = (config.d_model, config.head_hidden);
        let head = if config.antisymmetric {
            Head::Antisymmetric {
                w: params.register("head.w", fan_in_uniform(rng, &[d, 1], d)),
            }
        } else {
            Head::Standard {
                wi: params.register("head.wi", fan_in_uniform(rng, &[d, hidden], 2 * d)),
                wj: params.register("head.wj", fan_in_uniform(rng, &[d, hidden], 2 * d)),
                b1: params.register("head.b1", zeros(&[hidden])),
                w2: params.register("head.w2", fan_in_uniform(rng, &[hidden, 1], hidden)),
                b2: params.register("head.b2", zeros(&[1])),
            }
        };
        Ok(RelationPredictor {
            config,
            params,
            encoder,
            head,
        })
    }

    /// Pooled (B, d) embeddings for a batch of encoded vectors.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        vecs: &[&EncodedConfig],
    ) -> Result<NodeId> {
        let seqs = vecs.iter().map(|v| tokenize(v)).collect::<Result<Vec<_>>>()?;
        self.encoder.encode_batch(tape, bound, &self.config, &seqs)
    }

    /// Pair logits (P,) from pooled left/right embedding matrices.
    pub fn pair_logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        left: NodeId,
        right: NodeId,
    ) -> NodeId {
        let p = tape.value(left).shape()[0];
        match &self.head {
            Head::Standard { wi, wj, b1, w2, b2 } => {
                let hi = tape.matmul(left, bound.node(*wi));
                let hj = tape.matmul(right, bound.node(*wj));
                let s = tape.add(hi, hj);
                let sb = tape.add_bias_last(s, bound.node(*b1));
                let r = tape.relu(sb);
                let o = tape.matmul(r, bound.node(*w2));
                let ob = tape.add_bias_last(o, bound.node(*b2));
                tape.reshape(ob, &[p])
            }
            Head::Antisymmetric { w } => {
                let diff = tape.sub(left, right);
                let o = tape.matmul(diff, bound.node(*w));
                tape.reshape(o, &[p])
            }
        }
    }

    /// Pooled embeddings as plain arrays, for callers that cache them.
    /// Large batches are encoded in fixed-size chunks to bound tape
    /// memory; chunking cannot change results because masking isolates
    /// each sequence.
    pub fn pooled_embeddings(&self, vecs: &[&EncodedConfig]) -> Result<Array2<f64>> {
        const CHUNK: usize = 64;
        let mut out = Array2::zeros((vecs.len(), self.config.d_model));
        for (c, chunk) in vecs.chunks(CHUNK).enumerate() {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let pooled = self.encode_on_tape(&mut tape, &bound, chunk)?;
            let vals = tape
                .value(pooled)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("pooled embeddings are 2D");
            for (r, row) in vals.rows().into_iter().enumerate() {
                out.row_mut(c * CHUNK + r).assign(&row);
            }
        }
        Ok(out)
    }

    /// Head probability from two precomputed pooled embeddings.
    pub fn head_probability(&self, e_i: &Array1<f64>, e_j: &Array1<f64>) -> f64 {
        let logit = match &self.head {
            Head::Standard { wi, wj, b1, w2, b2 } => {
                let get2 = |id: &ParamId| {
                    self.params
                        .value(*id)
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned()
                };
                let b1v = self.params.value(*b1);
                let mut hidden = e_i.dot(&get2(wi)) + e_j.dot(&get2(wj));
                for (h, b) in hidden.iter_mut().zip(b1v.iter()) {
                    *h = (*h + b).max(0.0);
                }
                hidden.dot(&get2(w2).column(0)) + self.params.value(*b2)[[0]]
            }
            Head::Antisymmetric { w } => {
                let wv = self
                    .params
                    .value(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                (e_i - e_j).dot(&wv.column(0))
            }
        };
        sigmoid(logit)
    }

    /// Probability that the left configuration scores at least as well.
    pub fn predict_relation(&self, v_i: &EncodedConfig, v_j: &EncodedConfig) -> Result<f64> {
        let emb = self.pooled_embeddings(&[v_i, v_j])?;
        Ok(self.head_probability(&emb.row(0).to_owned(), &emb.row(1).to_owned()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(
            path,
            RELATION_TAG,
            serde_json::to_value(self.config)?,
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<RelationPredictor> {
        let (config_json, values) = read_checkpoint(path, RELATION_TAG)?;
        let config: PredictorConfig = serde_json::from_value(config_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("bad config: {e}")))?;
        let mut model = RelationPredictor::new(config, &mut crate::rng::stream_rng(0, 0))?;
        load_named_values(&mut model.params, values)?;
        Ok(model)
    }
}

/// MLP relation baseline over zero-history padded integer vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden1: 64,
            hidden2: 64,
        }
    }
}

/// Raw-integer pad value; distinct from every real token (min is -1).
pub const MLP_PAD_VALUE: f64 = -2.0;
/// Input scale keeping raw integer magnitudes near unit range.
pub const MLP_INPUT_SCALE: f64 = 0.1;

pub struct MlpBaseline {
    pub config: MlpConfig,
    pub params: ParamSet,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

impl MlpBaseline {
    pub fn new<R: Rng>(config: MlpConfig, rng: &mut R) -> Result<MlpBaseline> {
        if config.hidden1 == 0 || config.hidden2 == 0 {
            return Err(Error::Config("MLP hidden sizes must be positive".into()));
        }
        let mut params = ParamSet::new();
        let fc1 = Linear::register(&mut params, rng, "fc1", 2 * MAX_LEN, config.hidden1);
        let fc2 = Linear::register(&mut params, rng, "fc2", config.hidden1, config.hidden2);
        let out = Linear::register(&mut params, rng, "out", config.hidden2, 1);
        Ok(MlpBaseline {
            config,
            params,
            fc1,
            fc2,
            out,
        })
    }

    /// Fixed-length pair features: both vectors padded to 69 raw values
    /// and concatenated, then scaled.
    pub fn pair_features(v_i: &EncodedConfig, v_j: &EncodedConfig) -> Result<Array1<f64>> {
        // Tokenize for validation only; the features stay raw integers.
        tokenize(v_i)?;
        tokenize(v_j)?;
        let mut f = Array1::from_elem(2 * MAX_LEN, MLP_PAD_VALUE * MLP_INPUT_SCALE);
        for (slot, v) in [(0, v_i), (1, v_j)] {
            for (p, &t) in v.tokens.iter().enumerate() {
                f[slot * MAX_LEN + p] = t as f64 * MLP_INPUT_SCALE;
            }
        }
        Ok(f)
    }

    /// Batch logits (P,) from a (P, 138) feature leaf.
    pub fn logits_on_tape(&self, tape: &mut Tape, bound: &BoundParams, feats: NodeId) -> NodeId {
        let p = tape.value(feats).shape()[0];
        let h1 = self.fc1.apply(tape, bound, feats);
        let r1 = tape.relu(h1);
        let h2 = self.fc2.apply(tape, bound, r1);
        let r2 = tape.relu(h2);
        let o = self.out.apply(tape, bound, r2);
        tape.reshape(o, &[p])
    }

    pub fn predict_relation(&self, v_i: &EncodedConfig, v_j: &EncodedConfig) -> Result<f64> {
        let f = Self::pair_features(v_i, v_j)?;
        let n = f.len();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let leaf = tape.leaf(f.into_dyn().into_shape_with_order(IxDyn(&[1, n])).unwrap());
        let logits = self.logits_on_tape(&mut tape, &bound, leaf);
        Ok(sigmoid(tape.value(logits)[[0]]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(
            path,
            MLP_TAG,
            serde_json::to_value(self.config)?,
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<MlpBaseline> {
        let (config_json, values) = read_checkpoint(path, MLP_TAG)?;
        let config: MlpConfig = serde_json::from_value(config_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("bad config: {e}")))?;
        let mut model = MlpBaseline::new(config, &mut crate::rng::stream_rng(0, 0))?;
        load_named_values(&mut model.params, values)?;
        Ok(model)
    }
}

/// Transformer accuracy regressor: same encoder, linear score head.
pub struct AccuracyRegressor {
    pub config: PredictorConfig,
    pub params: ParamSet,
    encoder: EncoderIds,
    head_w: ParamId,
    head_b: ParamId,
}

impl AccuracyRegressor {
    pub fn new<R: Rng>(config: PredictorConfig, rng: &mut R) -> Result<AccuracyRegressor> {
        config.validate()?;
        let mut params = ParamSet::new();
        let encoder = EncoderIds::register(&mut params, rng, &config);
        let d = config.d_model;
        let head_w = params.register("reg.w", fan_in_uniform(rng, &[d, 1], d));
        let head_b = params.register("reg.b", zeros(&[1]));
        Ok(AccuracyRegressor {
            config,
            params,
            encoder,
            head_w,
            head_b,
        })
    }

    /// Predicted scores (P,) for a batch of encoded vectors.
    pub fn scores_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        vecs: &[&EncodedConfig],
    ) -> Result<NodeId> {
        let seqs = vecs.iter().map(|v| tokenize(v)).collect::<Result<Vec<_>>>()?;
        let pooled = self.encoder.encode_batch(tape, bound, &self.config, &seqs)?;
        let o = tape.matmul(pooled, bound.node(self.head_w));
        let ob = tape.add_bias_last(o, bound.node(self.head_b));
        Ok(tape.reshape(ob, &[vecs.len()]))
    }

    pub fn predict_accuracy(&self, v: &EncodedConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let scores = self.scores_on_tape(&mut tape, &bound, &[v])?;
        Ok(tape.value(scores)[[0]])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(
            path,
            REGRESSOR_TAG,
            serde_json::to_value(self.config)?,
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<AccuracyRegressor> {
        let (config_json, values) = read_checkpoint(path, REGRESSOR_TAG)?;
        let config: PredictorConfig = serde_json::from_value(config_json)
            .map_err(|e| Error::MalformedCheckpoint(format!("bad config: {e}")))?;
        let mut model = AccuracyRegressor::new(config, &mut crate::rng::stream_rng(0, 0))?;
        load_named_values(&mut model.params, values)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: "TAPR", version, JSON header, little-endian f32
// weights in registration order.

const MAGIC: &[u8; 4] = b"TAPR";
const CHECKPOINT_VERSION: u32 = 1;
pub const RELATION_TAG: &str = "relation-transformer";
pub const MLP_TAG: &str = "relation-mlp";
pub const REGRESSOR_TAG: &str = "accuracy-regressor";

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: String,
    schema_version: u32,
    vocab_size: usize,
    config: serde_json::Value,
    tensors: Vec<TensorSpec>,
}

/// Sidecar path next to a checkpoint: `predictor.bin` -> `predictor.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn write_checkpoint(
    path: &Path,
    tag: &str,
    config: serde_json::Value,
    params: &ParamSet,
) -> Result<()> {
    let header = CheckpointHeader {
        model: tag.to_string(),
        schema_version: crate::SCHEMA_VERSION,
        vocab_size: VOCAB_SIZE,
        config,
        tensors: params
            .iter()
            .map(|(name, v)| TensorSpec {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, v) in params.iter() {
        for &x in v.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_checkpoint(path: &Path, expect_tag: &str) -> Result<(serde_json::Value, Vec<(String, ArrayD<f64>)>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::MalformedCheckpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(bad("missing TAPR magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| bad(&format!("unreadable header: {e}")))?;
    if header.model != expect_tag {
        return Err(bad(&format!(
            "model is '{}', expected '{expect_tag}'",
            header.model
        )));
    }
    if header.vocab_size != VOCAB_SIZE {
        return Err(bad(&format!("vocabulary size {}", header.vocab_size)));
    }
    let mut offset = 12 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for spec in &header.tensors {
        let count: usize = spec.shape.iter().product();
        let end = offset + 4 * count;
        if bytes.len() < end {
            return Err(bad(&format!("truncated tensor '{}'", spec.name)));
        }
        let vals: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), vals)
            .map_err(|e| bad(&format!("tensor '{}': {e}", spec.name)))?;
        tensors.push((spec.name.clone(), arr));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok((header.config, tensors))
}

fn load_named_values(params: &mut ParamSet, tensors: Vec<(String, ArrayD<f64>)>) -> Result<()> {
    let expected: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let got: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if expected.len() != got.len() || expected.iter().zip(&got).any(|(a, b)| &a != b) {
        return Err(Error::MalformedCheckpoint(format!(
            "tensor names {got:?} do not match the model's parameters"
        )));
    }
    params.load_values(tensors.into_iter().map(|(_, v)| v).collect())
}
