//! Configurable transformer encoder with residual and normalization toggles,
//! a classification head, a masked-reconstruction head, and per-layer
//! activation capture.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mask::MaskPlan;
use crate::matrix::{
    gaussian_from_rng, softmax_rows, xavier_from_rng, ActivationKind, Matrix, Scalar,
};

/// Where layer normalization sits relative to the residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

/// How sequence-level logits are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Cls,
    MeanPool,
}

/// Which training target the forward pass feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Classifier,
    Mae,
}

fn default_ffn_mult() -> usize {
    4
}
fn default_norm_placement() -> NormPlacement {
    NormPlacement::Pre
}
fn default_residual() -> bool {
    true
}
fn default_activation() -> ActivationKind {
    ActivationKind::Gelu
}
fn default_head_mode() -> HeadMode {
    HeadMode::MeanPool
}

/// Architecture of one encoder: the scaling knobs plus structural switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of transformer blocks (L).
    pub depth: usize,
    /// Hidden dimension (d).
    pub width: usize,
    /// Attention head count (H); must divide `width`.
    pub heads: usize,
    /// Data tokens per sequence (T), excluding any CLS slot.
    pub seq_len: usize,
    /// Input token dimensionality (p).
    pub patch_dim: usize,
    /// Classes for the classification head (C).
    pub num_classes: usize,
    /// FFN expansion factor.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_norm_placement")]
    pub norm_placement: NormPlacement,
    #[serde(default = "default_residual")]
    pub residual_enabled: bool,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_head_mode")]
    pub head_mode: HeadMode,
    #[serde(default)]
    pub use_cls_token: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidConfig("seq_len must be >= 2".into()));
        }
        if self.heads < 1 || self.width < self.heads {
            return Err(Error::InvalidConfig(
                "need width >= heads >= 1".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_dim < 1 {
            return Err(Error::InvalidConfig("patch_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.ffn_mult < 1 {
            return Err(Error::InvalidConfig("ffn_mult must be >= 1".into()));
        }
        if self.head_mode == HeadMode::Cls && !self.use_cls_token {
            return Err(Error::InvalidConfig(
                "cls head mode requires use_cls_token".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Sequence rows in hidden matrices: data tokens plus the CLS slot.
    pub fn rows(&self) -> usize {
        self.seq_len + usize::from(self.use_cls_token)
    }

    /// Row offset of data token 0.
    pub fn cls_offset(&self) -> usize {
        usize::from(self.use_cls_token)
    }
}

/// Per-block learnable tensors. Field order defines serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm_gain: Matrix<S>,
    pub attn_norm_bias: Matrix<S>,
    pub wq: Matrix<S>,
    pub bq: Matrix<S>,
    pub wk: Matrix<S>,
    pub bk: Matrix<S>,
    pub wv: Matrix<S>,
    pub bv: Matrix<S>,
    pub wo: Matrix<S>,
    pub bo: Matrix<S>,
    pub ffn_norm_gain: Matrix<S>,
    pub ffn_norm_bias: Matrix<S>,
    pub w_up: Matrix<S>,
    pub b_up: Matrix<S>,
    pub w_down: Matrix<S>,
    pub b_down: Matrix<S>,
}

/// Full learnable state of one encoder plus both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S> {
    pub config: ModelConfig,
    pub patch_embed: Matrix<S>,
    pub patch_bias: Matrix<S>,
    pub pos_embed: Matrix<S>,
    pub cls_token: Option<Matrix<S>>,
    pub mask_token: Matrix<S>,
    pub layers: Vec<LayerParams<S>>,
    pub classifier_weight: Matrix<S>,
    pub classifier_bias: Matrix<S>,
    pub reconstruction_weight: Matrix<S>,
    pub reconstruction_bias: Matrix<S>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Deterministic initialization: Xavier-uniform weights, zero biases, unit
/// norm gains, N(0, 0.02) positional and CLS embeddings, zero mask token.
pub fn build<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.width;
    let p = config.patch_dim;
    let c = config.num_classes;
    let hidden = config.ffn_mult * d;

    let patch_embed = xavier_from_rng(p, d, &mut rng);
    let patch_bias = Matrix::zeros(1, d);
    let pos_embed = gaussian_from_rng(config.rows(), d, 0.02, &mut rng);
    let cls_token = config
        .use_cls_token
        .then(|| gaussian_from_rng(1, d, 0.02, &mut rng));
    let mask_token = Matrix::zeros(1, d);

    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        layers.push(LayerParams {
            attn_norm_gain: Matrix::filled(1, d, S::one()),
            attn_norm_bias: Matrix::zeros(1, d),
            wq: xavier_from_rng(d, d, &mut rng),
            bq: Matrix::zeros(1, d),
            wk: xavier_from_rng(d, d, &mut rng),
            bk: Matrix::zeros(1, d),
            wv: xavier_from_rng(d, d, &mut rng),
            bv: Matrix::zeros(1, d),
            wo: xavier_from_rng(d, d, &mut rng),
            bo: Matrix::zeros(1, d),
            ffn_norm_gain: Matrix::filled(1, d, S::one()),
            ffn_norm_bias: Matrix::zeros(1, d),
            w_up: xavier_from_rng(d, hidden, &mut rng),
            b_up: Matrix::zeros(1, hidden),
            w_down: xavier_from_rng(hidden, d, &mut rng),
            b_down: Matrix::zeros(1, d),
        });
    }

    let classifier_weight = xavier_from_rng(d, c, &mut rng);
    let classifier_bias = Matrix::zeros(1, c);
    let reconstruction_weight = xavier_from_rng(d, p, &mut rng);
    let reconstruction_bias = Matrix::zeros(1, p);

    Ok(Parameters {
        config: config.clone(),
        patch_embed,
        patch_bias,
        pos_embed,
        cls_token,
        mask_token,
        layers,
        classifier_weight,
        classifier_bias,
        reconstruction_weight,
        reconstruction_bias,
    })
}

impl<S: Scalar> Parameters<S> {
    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Matrix<S>> {
        let mut out = vec![&self.patch_embed, &self.patch_bias, &self.pos_embed];
        if let Some(cls) = &self.cls_token {
            out.push(cls);
        }
        out.push(&self.mask_token);
        for l in &self.layers {
            out.extend([
                &l.attn_norm_gain,
                &l.attn_norm_bias,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ffn_norm_gain,
                &l.ffn_norm_bias,
                &l.w_up,
                &l.b_up,
                &l.w_down,
                &l.b_down,
            ]);
        }
        out.extend([
            &self.classifier_weight,
            &self.classifier_bias,
            &self.reconstruction_weight,
            &self.reconstruction_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut out: Vec<&mut Matrix<S>> =
            vec![&mut self.patch_embed, &mut self.patch_bias, &mut self.pos_embed];
        if let Some(cls) = &mut self.cls_token {
            out.push(cls);
        }
        out.push(&mut self.mask_token);
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm_gain,
                &mut l.attn_norm_bias,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ffn_norm_gain,
                &mut l.ffn_norm_bias,
                &mut l.w_up,
                &mut l.b_up,
                &mut l.w_down,
                &mut l.b_down,
            ]);
        }
        out.extend([
            &mut self.classifier_weight,
            &mut self.classifier_bias,
            &mut self.reconstruction_weight,
            &mut self.reconstruction_bias,
        ]);
        out
    }

    /// Total learnable scalars.
    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    /// Rebuilds a parameter set from tensors in declaration order, checking
    /// every shape against the config.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix<S>>) -> Result<Self> {
        config.validate()?;
        let template = build::<S>(config, 0)?;
        let expected: Vec<(usize, usize)> =
            template.tensors().iter().map(|t| t.shape()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::ShapeMismatch {
                op: "from_tensors",
                details: format!("{} tensors, expected {}", tensors.len(), expected.len()),
            });
        }
        for (i, (t, want)) in tensors.iter().zip(expected.iter()).enumerate() {
            if t.shape() != *want {
                return Err(Error::ShapeMismatch {
                    op: "from_tensors",
                    details: format!("tensor {i}: {:?}, expected {:?}", t.shape(), want),
                });
            }
        }

        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let patch_embed = next();
        let patch_bias = next();
        let pos_embed = next();
        let cls_token = config.use_cls_token.then(&mut next);
        let mask_token = next();
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            layers.push(LayerParams {
                attn_norm_gain: next(),
                attn_norm_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ffn_norm_gain: next(),
                ffn_norm_bias: next(),
                w_up: next(),
                b_up: next(),
                w_down: next(),
                b_down: next(),
            });
        }
        Ok(Parameters {
            config: config.clone(),
            patch_embed,
            patch_bias,
            pos_embed,
            cls_token,
            mask_token,
            layers,
            classifier_weight: next(),
            classifier_bias: next(),
            reconstruction_weight: next(),
            reconstruction_bias: next(),
        })
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for t in self.tensors() {
            t.ensure_finite(context)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        let tensors: Vec<Matrix<T>> = self.tensors().iter().map(|t| t.cast()).collect();
        Parameters::from_tensors(&self.config, tensors).expect("shapes preserved by cast")
    }
}

// ---------------------------------------------------------------------------
// Binary serialization: magic "BMB1", config header, tensors as f32 LE.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BMB1";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

impl<S: Scalar> Parameters<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            c.depth, c.width, c.heads, c.seq_len, c.patch_dim, c.num_classes, c.ffn_mult,
        ] {
            put_u32(&mut buf, v as u32);
        }
        buf.push(match c.norm_placement {
            NormPlacement::Pre => 0,
            NormPlacement::Post => 1,
        });
        buf.push(u8::from(c.residual_enabled));
        buf.push(match c.activation {
            ActivationKind::Relu => 0,
            ActivationKind::Gelu => 1,
        });
        buf.push(match c.head_mode {
            HeadMode::Cls => 0,
            HeadMode::MeanPool => 1,
        });
        buf.push(u8::from(c.use_cls_token));
        for t in self.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Parse("truncated parameter file".into()));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Parse("bad magic, expected BMB1".into()));
        }
        let mut words = [0u32; 7];
        for w in &mut words {
            *w = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let flags = take(5)?.to_vec();
        let config = ModelConfig {
            depth: words[0] as usize,
            width: words[1] as usize,
            heads: words[2] as usize,
            seq_len: words[3] as usize,
            patch_dim: words[4] as usize,
            num_classes: words[5] as usize,
            ffn_mult: words[6] as usize,
            norm_placement: if flags[0] == 0 {
                NormPlacement::Pre
            } else {
                NormPlacement::Post
            },
            residual_enabled: flags[1] != 0,
            activation: if flags[2] == 0 {
                ActivationKind::Relu
            } else {
                ActivationKind::Gelu
            },
            head_mode: if flags[3] == 0 {
                HeadMode::Cls
            } else {
                HeadMode::MeanPool
            },
            use_cls_token: flags[4] != 0,
        };
        config.validate()?;

        let template = build::<S>(&config, 0)?;
        let shapes: Vec<(usize, usize)> = template.tensors().iter().map(|t| t.shape()).collect();
        let mut tensors = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let raw = take(4)?;
                data.push(S::from_f64(f32::from_le_bytes(raw.try_into().unwrap()) as f64));
            }
            tensors.push(Matrix::from_vec(rows, cols, data)?);
        }
        if !cursor.is_empty() {
            return Err(Error::Parse("trailing bytes after tensors".into()));
        }
        Parameters::from_tensors(&config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Hidden states captured during one forward pass: h^0 through h^L plus each
/// block's pre-residual contribution.
#[derive(Debug, Clone)]
pub struct ActivationTrace<S> {
    /// `depth + 1` matrices of shape `rows x width`; index 0 is the embedded
    /// input.
    pub layers: Vec<Matrix<S>>,
    /// One matrix per block: the block output itself without residuals, or
    /// the additive contribution `h^{l+1} - h^l` with them.
    pub block_outputs: Vec<Matrix<S>>,
    /// Masked data positions, when the pass was masked.
    pub masked_positions: Option<Vec<usize>>,
    pub cls_present: bool,
}

impl<S: Scalar> ActivationTrace<S> {
    /// Hidden-matrix row indices of the data tokens.
    pub fn data_rows(&self) -> Vec<usize> {
        let offset = usize::from(self.cls_present);
        let rows = self.layers[0].rows();
        (offset..rows).collect()
    }

    /// Hidden-matrix row indices of masked positions.
    pub fn masked_rows(&self) -> Option<Vec<usize>> {
        let offset = usize::from(self.cls_present);
        self.masked_positions
            .as_ref()
            .map(|ps| ps.iter().map(|p| p + offset).collect())
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Model output for one sequence.
#[derive(Debug, Clone)]
pub enum Output<S> {
    /// `1 x C` logits.
    Logits(Matrix<S>),
    /// `|mask| x p` reconstructed patches, rows in mask-position order.
    Reconstruction(Matrix<S>),
}

impl<S: Scalar> Output<S> {
    pub fn logits(&self) -> Option<&Matrix<S>> {
        match self {
            Output::Logits(m) => Some(m),
            _ => None,
        }
    }

    pub fn reconstruction(&self) -> Option<&Matrix<S>> {
        match self {
            Output::Reconstruction(m) => Some(m),
            _ => None,
        }
    }
}

pub struct ForwardResult<S> {
    pub trace: Option<ActivationTrace<S>>,
    pub output: Output<S>,
}

/// Tape node ids of every parameter leaf, mirroring [`Parameters`].
pub(crate) struct ParamNodes {
    pub patch_embed: NodeId,
    pub patch_bias: NodeId,
    pub pos_embed: NodeId,
    pub cls_token: Option<NodeId>,
    pub mask_token: NodeId,
    pub layers: Vec<LayerNodeIds>,
    pub classifier_weight: NodeId,
    pub classifier_bias: NodeId,
    pub reconstruction_weight: NodeId,
    pub reconstruction_bias: NodeId,
}

pub(crate) struct LayerNodeIds {
    pub attn_norm_gain: NodeId,
    pub attn_norm_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ffn_norm_gain: NodeId,
    pub ffn_norm_bias: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub w_down: NodeId,
    pub b_down: NodeId,
}

impl ParamNodes {
    /// Leaf ids in declaration order, aligned with `Parameters::tensors()`.
    pub fn in_order(&self) -> Vec<NodeId> {
        let mut out = vec![self.patch_embed, self.patch_bias, self.pos_embed];
        if let Some(cls) = self.cls_token {
            out.push(cls);
        }
        out.push(self.mask_token);
        for l in &self.layers {
            out.extend([
                l.attn_norm_gain,
                l.attn_norm_bias,
                l.wq,
                l.bq,
                l.wk,
                l.bk,
                l.wv,
                l.bv,
                l.wo,
                l.bo,
                l.ffn_norm_gain,
                l.ffn_norm_bias,
                l.w_up,
                l.b_up,
                l.w_down,
                l.b_down,
            ]);
        }
        out.extend([
            self.classifier_weight,
            self.classifier_bias,
            self.reconstruction_weight,
            self.reconstruction_bias,
        ]);
        out
    }

    pub(crate) fn register<S: Scalar>(
        g: &mut Graph<S>,
        params: &Parameters<S>,
    ) -> Result<Self> {
        let mut ids = Vec::new();
        for t in params.tensors() {
            ids.push(g.leaf((*t).clone())?);
        }
        Ok(Self::from_ordered(&params.config, &ids))
    }

    pub(crate) fn from_ordered(config: &ModelConfig, ids: &[NodeId]) -> Self {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("id list matches tensor order");
        let patch_embed = next();
        let patch_bias = next();
        let pos_embed = next();
        let cls_token = config.use_cls_token.then(&mut next);
        let mask_token = next();
        let layers = (0..config.depth)
            .map(|_| LayerNodeIds {
                attn_norm_gain: next(),
                attn_norm_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ffn_norm_gain: next(),
                ffn_norm_bias: next(),
                w_up: next(),
                b_up: next(),
                w_down: next(),
                b_down: next(),
            })
            .collect();
        Self {
            patch_embed,
            patch_bias,
            pos_embed,
            cls_token,
            mask_token,
            layers,
            classifier_weight: next(),
            classifier_bias: next(),
            reconstruction_weight: next(),
            reconstruction_bias: next(),
        }
    }
}

pub(crate) struct GraphedForward {
    /// h^0 .. h^L.
    pub layer_ids: Vec<NodeId>,
    /// Pre-residual block contributions, one per layer.
    pub block_ids: Vec<NodeId>,
    pub output: NodeId,
}

/// Builds the whole forward computation on the tape. Shared by inference,
/// training, and gradient checking.
pub(crate) fn graph_forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    nodes: &ParamNodes,
    tokens: &Matrix<S>,
    objective: Objective,
    mask: Option<&MaskPlan>,
) -> Result<GraphedForward> {
    config.validate()?;
    if tokens.shape() != (config.seq_len, config.patch_dim) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            details: format!(
                "tokens {:?}, config wants {}x{}",
                tokens.shape(),
                config.seq_len,
                config.patch_dim
            ),
        });
    }
    match (objective, mask) {
        (Objective::Classifier, Some(_)) => {
            return Err(Error::InvalidArgument(
                "mask supplied in classifier mode".into(),
            ))
        }
        (Objective::Mae, None) => {
            return Err(Error::InvalidArgument(
                "reconstruction objective requires a mask".into(),
            ))
        }
        _ => {}
    }
    if let Some(plan) = mask {
        plan.validate_for(config.seq_len)?;
    }

    let rows = config.rows();
    let offset = config.cls_offset();
    let scale = 1.0 / (config.head_dim() as f64).sqrt();

    // Embed data tokens, swap masked rows for the mask token, lay rows out
    // with the CLS slot, then add positional embeddings.
    let tokens_id = g.constant(tokens.clone())?;
    let projected = g.matmul(tokens_id, nodes.patch_embed)?;
    let mut embedded = g.add_row_vec(projected, nodes.patch_bias)?;
    if let Some(plan) = mask {
        let holes = g.zero_rows(embedded, plan.positions())?;
        let fill = g.scatter_row_vec(nodes.mask_token, plan.positions(), config.seq_len)?;
        embedded = g.add(holes, fill)?;
    }
    let data_rows: Vec<usize> = (offset..rows).collect();
    let mut h = g.place_rows(embedded, &data_rows, rows)?;
    if let Some(cls) = nodes.cls_token {
        let cls_row = g.scatter_row_vec(cls, &[0], rows)?;
        h = g.add(h, cls_row)?;
    }
    h = g.add(h, nodes.pos_embed)?;

    let mut layer_ids = vec![h];
    let mut block_ids = Vec::with_capacity(config.depth);

    for layer in &nodes.layers {
        let h_in = *layer_ids.last().expect("non-empty");
        let (h_out, block) = match config.norm_placement {
            NormPlacement::Pre => {
                let normed = g.layer_norm(h_in, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
                let attn = attention_subblock(g, config, layer, normed, scale)?;
                let h_mid = if config.residual_enabled {
                    g.add(h_in, attn)?
                } else {
                    attn
                };
                let normed2 =
                    g.layer_norm(h_mid, layer.ffn_norm_gain, layer.ffn_norm_bias, LAYER_NORM_EPS)?;
                let ffn = ffn_subblock(g, config, layer, normed2)?;
                if config.residual_enabled {
                    let block = g.add(attn, ffn)?;
                    (g.add(h_mid, ffn)?, block)
                } else {
                    (ffn, ffn)
                }
            }
            NormPlacement::Post => {
                let attn = attention_subblock(g, config, layer, h_in, scale)?;
                let summed = if config.residual_enabled {
                    g.add(h_in, attn)?
                } else {
                    attn
                };
                let h_mid =
                    g.layer_norm(summed, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
                let ffn = ffn_subblock(g, config, layer, h_mid)?;
                let summed2 = if config.residual_enabled {
                    g.add(h_mid, ffn)?
                } else {
                    ffn
                };
                let h_out =
                    g.layer_norm(summed2, layer.ffn_norm_gain, layer.ffn_norm_bias, LAYER_NORM_EPS)?;
                (h_out, h_out)
            }
        };
        layer_ids.push(h_out);
        block_ids.push(block);
    }

    let h_last = *layer_ids.last().expect("non-empty");
    let output = match objective {
        Objective::Classifier => {
            let pooled = match config.head_mode {
                HeadMode::Cls => g.select_rows(h_last, &[0])?,
                HeadMode::MeanPool => g.mean_rows(h_last, &data_rows)?,
            };
            let logits = g.matmul(pooled, nodes.classifier_weight)?;
            g.add_row_vec(logits, nodes.classifier_bias)?
        }
        Objective::Mae => {
            let plan = mask.expect("checked above");
            let trace_rows: Vec<usize> = plan.positions().iter().map(|p| p + offset).collect();
            let picked = g.select_rows(h_last, &trace_rows)?;
            let recon = g.matmul(picked, nodes.reconstruction_weight)?;
            g.add_row_vec(recon, nodes.reconstruction_bias)?
        }
    };

    Ok(GraphedForward {
        layer_ids,
        block_ids,
        output,
    })
}

fn attention_subblock<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    layer: &LayerNodeIds,
    x: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let q_all = g.matmul(x, layer.wq)?;
    let q_all = g.add_row_vec(q_all, layer.bq)?;
    let k_all = g.matmul(x, layer.wk)?;
    let k_all = g.add_row_vec(k_all, layer.bk)?;
    let v_all = g.matmul(x, layer.wv)?;
    let v_all = g.add_row_vec(v_all, layer.bv)?;

    let dh = config.head_dim();
    let mut head_outputs = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let start = head * dh;
        let q = g.select_cols(q_all, start, dh)?;
        let k = g.select_cols(k_all, start, dh)?;
        let v = g.select_cols(v_all, start, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        head_outputs.push(g.matmul(weights, v)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let out = g.matmul(merged, layer.wo)?;
    g.add_row_vec(out, layer.bo)
}

fn ffn_subblock<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    layer: &LayerNodeIds,
    x: NodeId,
) -> Result<NodeId> {
    let up = g.matmul(x, layer.w_up)?;
    let up = g.add_row_vec(up, layer.b_up)?;
    let act = g.activation(up, config.activation)?;
    let down = g.matmul(act, layer.w_down)?;
    g.add_row_vec(down, layer.b_down)
}

/// Pure single-sequence forward pass. Output is logits without a mask and
/// reconstructed patches with one; the trace is captured only on request.
pub fn forward<S: Scalar>(
    params: &Parameters<S>,
    tokens: &Matrix<S>,
    objective: Objective,
    mask: Option<&MaskPlan>,
    capture: bool,
) -> Result<ForwardResult<S>> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, params)?;
    let graphed = graph_forward(&mut g, &params.config, &nodes, tokens, objective, mask)?;

    let trace = capture.then(|| extract_trace(&g, &params.config, &graphed, mask));
    let output_value = g.value(graphed.output).clone();
    let output = match objective {
        Objective::Classifier => Output::Logits(output_value),
        Objective::Mae => Output::Reconstruction(output_value),
    };
    Ok(ForwardResult { trace, output })
}

pub(crate) fn extract_trace<S: Scalar>(
    g: &Graph<S>,
    config: &ModelConfig,
    graphed: &GraphedForward,
    mask: Option<&MaskPlan>,
) -> ActivationTrace<S> {
    let layers: Vec<Matrix<S>> = graphed
        .layer_ids
        .iter()
        .map(|&id| g.value(id).clone())
        .collect();
    let block_outputs = graphed
        .block_ids
        .iter()
        .map(|&id| g.value(id).clone())
        .collect();
    ActivationTrace {
        layers,
        block_outputs,
        masked_positions: mask.map(|m| m.positions().to_vec()),
        cls_present: config.use_cls_token,
    }
}

/// Scaled dot-product attention over a single head.
///
/// Returns the weighted value rows and the `T x T` weight matrix; each weight
/// row sums to 1.
pub fn attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>)> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            details: format!("{:?} / {:?} / {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let scale = S::from_f64(1.0 / (q.cols() as f64).sqrt());
    let scores = q.matmul(&k.transpose())?.scale(scale);
    let weights = softmax_rows(&scores)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// Projects the final hidden state to class logits.
///
/// `MeanPool` averages the data-token rows; `Cls` takes row 0 and requires a
/// CLS slot in the trace.
pub fn classification_head<S: Scalar>(
    params: &Parameters<S>,
    trace: &ActivationTrace<S>,
    mode: HeadMode,
) -> Result<Matrix<S>> {
    let h_last = trace.layers.last().ok_or_else(|| {
        Error::InvalidArgument("trace has no layers".into())
    })?;
    let pooled = match mode {
        HeadMode::Cls => {
            if !trace.cls_present {
                return Err(Error::InvalidArgument(
                    "cls head requested but trace has no CLS token".into(),
                ));
            }
            h_last.select_rows(&[0])?
        }
        HeadMode::MeanPool => {
            let rows = trace.data_rows();
            h_last
                .select_rows(&rows)?
                .sum_rows()
                .scale(S::from_f64(1.0 / rows.len() as f64))
        }
    };
    pooled
        .matmul(&params.classifier_weight)?
        .add_row_vec(&params.classifier_bias)
}

/// Projects the final hidden state at masked positions back to patch space.
pub fn reconstruction_head<S: Scalar>(
    params: &Parameters<S>,
    trace: &ActivationTrace<S>,
    mask: &MaskPlan,
) -> Result<Matrix<S>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let h_last = trace
        .layers
        .last()
        .ok_or_else(|| Error::InvalidArgument("trace has no layers".into()))?;
    let offset = usize::from(trace.cls_present);
    let rows: Vec<usize> = mask.positions().iter().map(|p| p + offset).collect();
    h_last
        .select_rows(&rows)?
        .matmul(&params.reconstruction_weight)?
        .add_row_vec(&params.reconstruction_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::sample_mask;
    use crate::matrix::seeded_normal;
    use rand_chacha::rand_core::SeedableRng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            width: 16,
            heads: 4,
            seq_len: 6,
            patch_dim: 5,
            num_classes: 3,
            ffn_mult: 4,
            norm_placement: NormPlacement::Pre,
            residual_enabled: true,
            activation: ActivationKind::Gelu,
            head_mode: HeadMode::MeanPool,
            use_cls_token: false,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let config = small_config();
        let a = build::<f32>(&config, 42).unwrap();
        let b = build::<f32>(&config, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = build::<f32>(&config, 43).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let mut config = small_config();
        config.width = 64;
        config.heads = 4;
        assert!(build::<f64>(&config, 1).is_ok());
        config.heads = 5;
        assert!(matches!(
            build::<f64>(&config, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let mut config = small_config();
        config.use_cls_token = true;
        config.head_mode = HeadMode::Cls;
        let params = build::<f32>(&config, 7).unwrap();
        let bytes = params.to_bytes();
        let restored = Parameters::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(params, restored);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = small_config();
        let params = build::<f64>(&config, 3).unwrap();
        let tokens = seeded_normal(6, 5, 11);
        let a = forward(&params, &tokens, Objective::Classifier, None, false).unwrap();
        let b = forward(&params, &tokens, Objective::Classifier, None, false).unwrap();
        assert_eq!(a.output.logits().unwrap(), b.output.logits().unwrap());
    }

    #[test]
    fn zeroed_classifier_gives_uniform_logits() {
        let config = small_config();
        let mut params = build::<f64>(&config, 3).unwrap();
        params.classifier_weight = Matrix::zeros(16, 3);
        params.classifier_bias = Matrix::zeros(1, 3);
        let tokens = seeded_normal(6, 5, 1);
        let out = forward(&params, &tokens, Objective::Classifier, None, false).unwrap();
        for &v in out.output.logits().unwrap().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn classifier_mode_rejects_mask() {
        let config = small_config();
        let params = build::<f64>(&config, 3).unwrap();
        let tokens = seeded_normal(6, 5, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mask = sample_mask(6, 0.5, &mut rng).unwrap();
        assert!(forward(&params, &tokens, Objective::Classifier, Some(&mask), false).is_err());
    }

    #[test]
    fn trace_shapes_are_uniform() {
        let mut config = small_config();
        config.use_cls_token = true;
        let params = build::<f64>(&config, 3).unwrap();
        let tokens = seeded_normal(6, 5, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mask = sample_mask(6, 0.5, &mut rng).unwrap();
        let out = forward(&params, &tokens, Objective::Mae, Some(&mask), true).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.layers.len(), config.depth + 1);
        assert_eq!(trace.block_outputs.len(), config.depth);
        for layer in &trace.layers {
            assert_eq!(layer.shape(), (7, 16));
        }
        assert_eq!(trace.data_rows(), vec![1, 2, 3, 4, 5, 6]);
        let recon = out.output.reconstruction().unwrap();
        assert_eq!(recon.shape(), (mask.len(), 5));
    }

    #[test]
    fn block_outputs_are_residual_contributions() {
        let config = small_config();
        let params = build::<f64>(&config, 5).unwrap();
        let tokens = seeded_normal(6, 5, 2);
        let out = forward(&params, &tokens, Objective::Classifier, None, true).unwrap();
        let trace = out.trace.unwrap();
        for l in 0..config.depth {
            let want = trace.layers[l + 1].sub(&trace.layers[l]).unwrap();
            for (a, b) in trace.block_outputs[l].data().iter().zip(want.data().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_single_token_is_identity() {
        let q = seeded_normal::<f64>(1, 4, 1);
        let k = seeded_normal::<f64>(1, 4, 2);
        let v = seeded_normal::<f64>(1, 4, 3);
        let (out, w) = attention(&q, &k, &v).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn attention_identical_keys_average_uniformly() {
        let q = seeded_normal::<f64>(5, 4, 1);
        let k = Matrix::from_fn(5, 4, |_, c| 0.3 * c as f64);
        let v = seeded_normal::<f64>(5, 4, 3);
        let (_, w) = attention(&q, &k, &v).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert!((w.get(r, c) - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one_with_bounded_energy() {
        for seed in 0..10 {
            let q = seeded_normal::<f64>(7, 8, seed).scale(2.0);
            let k = seeded_normal::<f64>(7, 8, seed + 100).scale(2.0);
            let v = seeded_normal::<f64>(7, 8, seed + 200);
            let (_, w) = attention(&q, &k, &v).unwrap();
            for r in 0..7 {
                let sum: f64 = w.row(r).iter().sum();
                let energy: f64 = w.row(r).iter().map(|x| x * x).sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(energy <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn mean_pool_of_identical_tokens_matches_single_projection() {
        let config = small_config();
        let params = build::<f64>(&config, 9).unwrap();
        let token_row = seeded_normal::<f64>(1, 16, 5);
        let mut layers = Vec::new();
        let mut uniform = Matrix::zeros(6, 16);
        for r in 0..6 {
            uniform.row_mut(r).copy_from_slice(token_row.row(0));
        }
        layers.push(uniform.clone());
        let trace = ActivationTrace {
            layers,
            block_outputs: vec![],
            masked_positions: None,
            cls_present: false,
        };
        let pooled = classification_head(&params, &trace, HeadMode::MeanPool).unwrap();
        let direct = token_row
            .matmul(&params.classifier_weight)
            .unwrap()
            .add_row_vec(&params.classifier_bias)
            .unwrap();
        for (a, b) in pooled.data().iter().zip(direct.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_is_permutation_invariant_and_matches_hand_mean() {
        let mut config = small_config();
        config.width = 3;
        config.heads = 1;
        config.num_classes = 3;
        let mut params = build::<f64>(&config, 1).unwrap();
        params.classifier_weight = Matrix::identity(3);
        params.classifier_bias = Matrix::zeros(1, 3);

        let h = Matrix::from_vec(
            6,
            3,
            vec![
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let trace = ActivationTrace {
            layers: vec![h.clone()],
            block_outputs: vec![],
            masked_positions: None,
            cls_present: false,
        };
        let logits = classification_head(&params, &trace, HeadMode::MeanPool).unwrap();
        for c in 0..3 {
            assert!((logits.get(0, c) - 1.0 / 3.0).abs() < 1e-12);
        }

        let permuted = h.select_rows(&[3, 1, 5, 0, 4, 2]).unwrap();
        let trace2 = ActivationTrace {
            layers: vec![permuted],
            block_outputs: vec![],
            masked_positions: None,
            cls_present: false,
        };
        let logits2 = classification_head(&params, &trace2, HeadMode::MeanPool).unwrap();
        assert_eq!(logits.data(), logits2.data());
    }

    #[test]
    fn cls_head_without_cls_token_errors() {
        let config = small_config();
        let params = build::<f64>(&config, 1).unwrap();
        let trace = ActivationTrace {
            layers: vec![Matrix::zeros(6, 16)],
            block_outputs: vec![],
            masked_positions: None,
            cls_present: false,
        };
        assert!(classification_head(&params, &trace, HeadMode::Cls).is_err());
    }

    #[test]
    fn reconstruction_head_selects_masked_rows() {
        let mut config = small_config();
        config.patch_dim = 16; // p = d so identity projection is possible
        let mut params = build::<f64>(&config, 1).unwrap();
        params.reconstruction_weight = Matrix::identity(16);
        params.reconstruction_bias = Matrix::zeros(1, 16);

        let h = seeded_normal::<f64>(6, 16, 8);
        let trace = ActivationTrace {
            layers: vec![h.clone()],
            block_outputs: vec![],
            masked_positions: Some(vec![1, 4]),
            cls_present: false,
        };
        let plan = MaskPlan::new(vec![1, 4], 0.33).unwrap();
        let out = reconstruction_head(&params, &trace, &plan).unwrap();
        assert_eq!(out.rows(), 2);
        assert_eq!(out.row(0), h.row(1));
        assert_eq!(out.row(1), h.row(4));
    }

    #[test]
    fn reconstruction_output_rows_follow_mask_size() {
        let config = small_config();
        let params = build::<f64>(&config, 2).unwrap();
        let tokens = seeded_normal(6, 5, 3);
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask(6, 0.5, &mut rng).unwrap();
            let out = forward(&params, &tokens, Objective::Mae, Some(&plan), false).unwrap();
            let recon = out.output.reconstruction().unwrap();
            assert_eq!(recon.rows(), (0.5f64 * 6.0).round() as usize);
            assert_eq!(recon.cols(), 5);
        }
    }

    #[test]
    fn single_row_mask_gives_single_row_output() {
        let config = small_config();
        let params = build::<f64>(&config, 2).unwrap();
        let tokens = seeded_normal(6, 5, 3);
        let plan = MaskPlan::new(vec![2], 0.17).unwrap();
        let out = forward(&params, &tokens, Objective::Mae, Some(&plan), false).unwrap();
        assert_eq!(out.output.reconstruction().unwrap().rows(), 1);
    }

    #[test]
    fn graph_head_matches_value_level_head() {
        let mut config = small_config();
        config.use_cls_token = true;
        config.head_mode = HeadMode::Cls;
        let params = build::<f64>(&config, 21).unwrap();
        let tokens = seeded_normal(6, 5, 22);
        let out = forward(&params, &tokens, Objective::Classifier, None, true).unwrap();
        let trace = out.trace.unwrap();
        let direct = classification_head(&params, &trace, HeadMode::Cls).unwrap();
        for (a, b) in out
            .output
            .logits()
            .unwrap()
            .data()
            .iter()
            .zip(direct.data().iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn param_cast_round_trip_preserves_shapes() {
        let config = small_config();
        let params = build::<f64>(&config, 2).unwrap();
        let as_f32: Parameters<f32> = params.cast();
        assert_eq!(as_f32.param_count(), params.param_count());
    }
}
