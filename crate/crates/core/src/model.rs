//! Desk-scale networks with named adapter attachment sites.
//!
//! Two architectures share one code path: an MLP classifier
//! (`logits = W_down · relu(W_up · x)`) and a single-block, single-head
//! causal transformer character model. Every projection that can carry an
//! adapter is a [`Site`]; the forward pass runs on the gradient tape so task
//! loss, regularization loss, and exact gradients all come from the same
//! recorded computation.
//!
//! Activations are (features x batch) matrices: one sample per column.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, init_reg, LoraAdapter, RegVariant};
use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape};
use crate::linalg::{gaussian_matrix, Matrix, Rng};

/// Projection matrices that can carry an adapter. Ordering is fixed and
/// deterministic (declaration order) — iteration drives optimizer slot and
/// checkpoint layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    MlpUp,
    MlpDown,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 5] = [
        AdapterTarget::Query,
        AdapterTarget::Key,
        AdapterTarget::Value,
        AdapterTarget::MlpUp,
        AdapterTarget::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterTarget::Query => "query",
            AdapterTarget::Key => "key",
            AdapterTarget::Value => "value",
            AdapterTarget::MlpUp => "mlp_up",
            AdapterTarget::MlpDown => "mlp_down",
        }
    }
}

impl std::fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AdapterTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<AdapterTarget> {
        AdapterTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::invalid_argument(format!(
                    "unknown adapter target '{s}' (expected one of query, key, value, mlp_up, mlp_down)"
                ))
            })
    }
}

/// Architecture and its dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelShape {
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
    Transformer {
        vocab_size: usize,
        seq_len: usize,
        embed_dim: usize,
        hidden_dim: usize,
    },
}

/// Settings for the frozen regularization direction pair attached to each
/// adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub variant: RegVariant,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModelConfig {
    #[serde(flatten)]
    pub shape: ModelShape,
    pub adapter_targets: Vec<AdapterTarget>,
    pub rank: usize,
    pub alpha: f64,
    /// Weight of the orthogonality penalty in the total loss.
    pub lambda: f64,
    /// Std of the Gaussian init for adapter A factors.
    pub adapter_init_std: f64,
    pub reg: Option<RegConfig>,
    /// Dropout probability on attention weights and hidden activations;
    /// 0 disables dropout entirely (the default — keeps runs deterministic
    /// without threading a mask stream).
    #[serde(default)]
    pub dropout: f64,
}

impl TinyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = match self.shape {
            ModelShape::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => input_dim > 0 && hidden_dim > 0 && num_classes > 1,
            ModelShape::Transformer {
                vocab_size,
                seq_len,
                embed_dim,
                hidden_dim,
            } => vocab_size > 1 && seq_len > 1 && embed_dim > 0 && hidden_dim > 0,
        };
        if !dims_ok {
            return Err(Error::invalid_argument(
                "model dimensions must be positive (and at least 2 classes/tokens)".to_string(),
            ));
        }
        if self.adapter_targets.is_empty() {
            return Err(Error::invalid_argument(
                "adapter_targets must not be empty".to_string(),
            ));
        }
        let available = self.available_targets();
        for t in &self.adapter_targets {
            if !available.contains(t) {
                return Err(Error::invalid_argument(format!(
                    "adapter target '{t}' does not exist in this architecture"
                )));
            }
        }
        let mut seen = self.adapter_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapter_targets.len() {
            return Err(Error::invalid_argument(
                "adapter_targets contains duplicates".to_string(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::invalid_argument("rank must be at least 1".to_string()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "lambda must be nonnegative and finite, got {}",
                self.lambda
            )));
        }
        if !(self.adapter_init_std > 0.0 && self.adapter_init_std.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "adapter_init_std must be positive and finite, got {}",
                self.adapter_init_std
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_argument(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Targets that exist for this architecture.
    pub fn available_targets(&self) -> Vec<AdapterTarget> {
        match self.shape {
            ModelShape::Mlp { .. } => vec![AdapterTarget::MlpUp, AdapterTarget::MlpDown],
            ModelShape::Transformer { .. } => AdapterTarget::ALL.to_vec(),
        }
    }

    /// (rows, cols) of the projection matrix at `target`.
    pub fn site_dims(&self, target: AdapterTarget) -> Result<(usize, usize)> {
        match (self.shape.clone(), target) {
            (ModelShape::Mlp { input_dim, hidden_dim, .. }, AdapterTarget::MlpUp) => {
                Ok((hidden_dim, input_dim))
            }
            (ModelShape::Mlp { hidden_dim, num_classes, .. }, AdapterTarget::MlpDown) => {
                Ok((num_classes, hidden_dim))
            }
            (
                ModelShape::Transformer { embed_dim, .. },
                AdapterTarget::Query | AdapterTarget::Key | AdapterTarget::Value,
            ) => Ok((embed_dim, embed_dim)),
            (ModelShape::Transformer { embed_dim, hidden_dim, .. }, AdapterTarget::MlpUp) => {
                Ok((hidden_dim, embed_dim))
            }
            (ModelShape::Transformer { embed_dim, hidden_dim, .. }, AdapterTarget::MlpDown) => {
                Ok((embed_dim, hidden_dim))
            }
            _ => Err(Error::invalid_argument(format!(
                "target '{target}' does not exist in this architecture"
            ))),
        }
    }
}

/// One projection: either a plain frozen matrix or a frozen matrix with a
/// trainable adapter on top.
#[derive(Debug, Clone, PartialEq)]
pub enum Site {
    Frozen(Matrix),
    Adapted(LoraAdapter),
}

impl Site {
    pub fn weight(&self) -> &Matrix {
        match self {
            Site::Frozen(w) => w,
            Site::Adapted(ad) => &ad.w,
        }
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        match self {
            Site::Frozen(_) => None,
            Site::Adapted(ad) => Some(ad),
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LoraAdapter> {
        match self {
            Site::Frozen(_) => None,
            Site::Adapted(ad) => Some(ad),
        }
    }
}

/// Frozen parameters outside the adapter sites.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenExtras {
    Mlp,
    Transformer {
        /// embed_dim x vocab_size; column t is the embedding of token t.
        embed: Matrix,
        /// embed_dim x seq_len positional table.
        pos: Matrix,
        /// vocab_size x embed_dim output head.
        lm_head: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub config: TinyModelConfig,
    pub sites: BTreeMap<AdapterTarget, Site>,
    pub extras: FrozenExtras,
}

/// A batch or full split of task data.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    /// `inputs` is features x N; `labels[j]` is the class of column j.
    Classification { inputs: Matrix, labels: Vec<usize> },
    /// Token sequences, all of the configured length; the model predicts
    /// each next token from the prefix.
    SequenceLm { seqs: Vec<Vec<usize>> },
}

impl Dataset {
    pub fn classification(inputs: Matrix, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != inputs.cols() {
            return Err(Error::invalid_argument(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.cols()
            )));
        }
        Ok(Dataset::Classification { inputs, labels })
    }

    pub fn sequences(seqs: Vec<Vec<usize>>) -> Result<Dataset> {
        if seqs.is_empty() {
            return Err(Error::invalid_argument("no sequences given".to_string()));
        }
        let len = seqs[0].len();
        if len < 2 || seqs.iter().any(|s| s.len() != len) {
            return Err(Error::invalid_argument(
                "sequences must share one length of at least 2".to_string(),
            ));
        }
        Ok(Dataset::SequenceLm { seqs })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification { labels, .. } => labels.len(),
            Dataset::SequenceLm { seqs } => seqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the samples at `indices` into a new dataset (batching).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::invalid_argument("subset index out of range".to_string()));
        }
        match self {
            Dataset::Classification { inputs, labels } => {
                let mut sub = Matrix::zeros(inputs.rows(), indices.len());
                for (dst, &src) in indices.iter().enumerate() {
                    sub.set_column(dst, &inputs.column(src));
                }
                Ok(Dataset::Classification {
                    inputs: sub,
                    labels: indices.iter().map(|&i| labels[i]).collect(),
                })
            }
            Dataset::SequenceLm { seqs } => Ok(Dataset::SequenceLm {
                seqs: indices.iter().map(|&i| seqs[i].clone()).collect(),
            }),
        }
    }
}

/// Task, regularization, and combined loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub reg: f64,
    /// `task + lambda·reg`.
    pub total: f64,
}

/// Gradients of the total loss w.r.t. each adapter's factors.
pub type AdapterGrads = BTreeMap<AdapterTarget, (Matrix, Matrix)>;

/// Per-site nodes on the tape for one forward pass.
enum SiteNodes {
    Frozen(NodeId),
    Adapted {
        w: NodeId,
        a: NodeId,
        b: NodeId,
        scaling: f64,
    },
}

struct ForwardPass<'m> {
    model: &'m TinyModel,
    tape: Tape,
    nodes: BTreeMap<AdapterTarget, SiteNodes>,
    collected: Option<BTreeMap<AdapterTarget, Vec<Vec<f64>>>>,
}

impl<'m> ForwardPass<'m> {
    fn new(model: &'m TinyModel, collect: bool) -> ForwardPass<'m> {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (&target, site) in &model.sites {
            let entry = match site {
                Site::Frozen(w) => SiteNodes::Frozen(tape.leaf(w.clone(), false)),
                Site::Adapted(ad) => SiteNodes::Adapted {
                    w: tape.leaf(ad.w.clone(), false),
                    a: tape.leaf(ad.a.clone(), true),
                    b: tape.leaf(ad.b.clone(), true),
                    scaling: ad.scaling(),
                },
            };
            nodes.insert(target, entry);
        }
        let collected = collect.then(|| {
            model
                .sites
                .keys()
                .map(|&t| (t, Vec::new()))
                .collect::<BTreeMap<_, _>>()
        });
        ForwardPass {
            model,
            tape,
            nodes,
            collected,
        }
    }

    /// Applies the projection at `target` to activation node `x`
    /// (features x batch), recording input columns when collecting.
    fn apply_site(&mut self, target: AdapterTarget, x: NodeId) -> Result<NodeId> {
        if let Some(collected) = &mut self.collected {
            let v = self.tape.value(x);
            let cols = (0..v.cols()).map(|j| v.column(j)).collect::<Vec<_>>();
            collected.get_mut(&target).expect("site exists").extend(cols);
        }
        match self.nodes.get(&target).expect("site exists") {
            SiteNodes::Frozen(w) => self.tape.matmul(*w, x),
            &SiteNodes::Adapted { w, a, b, scaling } => {
                let wx = self.tape.matmul(w, x)?;
                let bt = self.tape.transpose(b);
                let btx = self.tape.matmul(bt, x)?;
                let abx = self.tape.matmul(a, btx)?;
                let scaled = self.tape.scale(abx, scaling);
                self.tape.add(wx, scaled)
            }
        }
    }

    fn dropout_mask(&mut self, x: NodeId, rng: &mut Rng) -> Result<NodeId> {
        let p = self.model.config.dropout;
        let (r, c) = self.tape.value(x).shape();
        let keep = 1.0 - p;
        let mut mask = Matrix::zeros(r, c);
        for v in mask.data_mut() {
            // Inverted dropout: surviving entries are rescaled so the
            // expectation is unchanged.
            *v = if rng.next_f64() < keep { 1.0 / keep } else { 0.0 };
        }
        self.tape.mask_mul(x, mask)
    }

    /// Mean task cross-entropy for the batch, as a scalar node.
    fn task_loss(&mut self, batch: &Dataset, mut dropout_rng: Option<&mut Rng>) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::invalid_argument("batch must not be empty".to_string()));
        }
        match (&self.model.config.shape, batch) {
            (ModelShape::Mlp { input_dim, .. }, Dataset::Classification { inputs, labels }) => {
                if inputs.rows() != *input_dim {
                    return Err(Error::invalid_argument(format!(
                        "input rows {} do not match input_dim {input_dim}",
                        inputs.rows()
                    )));
                }
                let x = self.tape.leaf(inputs.clone(), false);
                let hidden = self.apply_site(AdapterTarget::MlpUp, x)?;
                let mut act = self.tape.relu(hidden);
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if self.model.config.dropout > 0.0 {
                        act = self.dropout_mask(act, rng)?;
                    }
                }
                let logits = self.apply_site(AdapterTarget::MlpDown, act)?;
                self.tape.softmax_cross_entropy(logits, labels)
            }
            (
                ModelShape::Transformer { vocab_size, seq_len, .. },
                Dataset::SequenceLm { seqs },
            ) => {
                let mut per_sample = Vec::with_capacity(seqs.len());
                for seq in seqs {
                    if seq.len() != *seq_len {
                        return Err(Error::invalid_argument(format!(
                            "sequence length {} does not match seq_len {seq_len}",
                            seq.len()
                        )));
                    }
                    if seq.iter().any(|&t| t >= *vocab_size) {
                        return Err(Error::invalid_argument(
                            "token id out of vocabulary".to_string(),
                        ));
                    }
                    let loss = self.sequence_loss(seq, dropout_rng.as_deref_mut())?;
                    per_sample.push(loss);
                }
                // Mean over samples.
                let mut acc = per_sample[0];
                for &l in &per_sample[1..] {
                    acc = self.tape.add(acc, l)?;
                }
                Ok(self.tape.scale(acc, 1.0 / per_sample.len() as f64))
            }
            _ => Err(Error::invalid_argument(
                "dataset kind does not match model architecture".to_string(),
            )),
        }
    }

    /// Causal next-token cross-entropy for one sequence.
    fn sequence_loss(&mut self, seq: &[usize], mut dropout_rng: Option<&mut Rng>) -> Result<NodeId> {
        let (embed, pos, lm_head) = match &self.model.extras {
            FrozenExtras::Transformer { embed, pos, lm_head } => (embed, pos, lm_head),
            FrozenExtras::Mlp => unreachable!("checked by caller"),
        };
        let d = embed.rows();
        let len = seq.len();
        // Frozen input: token embedding plus positional entry, per column.
        let mut x0 = Matrix::zeros(d, len);
        for (t, &tok) in seq.iter().enumerate() {
            for i in 0..d {
                x0[(i, t)] = embed[(i, tok)] + pos[(i, t)];
            }
        }
        let x = self.tape.leaf(x0, false);

        let q = self.apply_site(AdapterTarget::Query, x)?;
        let k = self.apply_site(AdapterTarget::Key, x)?;
        let v = self.apply_site(AdapterTarget::Value, x)?;
        let kt = self.tape.transpose(k);
        let scores = self.tape.matmul(kt, q)?;
        let scaled = self.tape.scale(scores, 1.0 / (d as f64).sqrt());
        let mut attn = self.tape.causal_col_softmax(scaled)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if self.model.config.dropout > 0.0 {
                attn = self.dropout_mask(attn, rng)?;
            }
        }
        let mixed = self.tape.matmul(v, attn)?;
        let h1 = self.tape.add(x, mixed)?;

        let up = self.apply_site(AdapterTarget::MlpUp, h1)?;
        let mut act = self.tape.relu(up);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if self.model.config.dropout > 0.0 {
                act = self.dropout_mask(act, rng)?;
            }
        }
        let down = self.apply_site(AdapterTarget::MlpDown, act)?;
        let h2 = self.tape.add(h1, down)?;

        let head = self.tape.leaf(lm_head.clone(), false);
        let logits = self.tape.matmul(head, h2)?;
        // Position t predicts token t+1; the last column has no target.
        let preds = self.tape.cols(logits, 0, len - 1)?;
        let labels: Vec<usize> = seq[1..].to_vec();
        self.tape.softmax_cross_entropy(preds, &labels)
    }

    /// Adds `lambda`-weighted orthogonality penalties for every adapter that
    /// carries a direction pair. Returns `None` when nothing contributes
    /// (lambda = 0 or no pairs) — in that case the tape is bitwise identical
    /// to a plain unregularized run.
    fn reg_loss(&mut self) -> Result<Option<NodeId>> {
        if self.model.config.lambda == 0.0 {
            return Ok(None);
        }
        let mut total: Option<NodeId> = None;
        for (&target, site) in &self.model.sites {
            let Site::Adapted(ad) = site else { continue };
            let Some(reg) = &ad.reg else { continue };
            let (a, b) = match self.nodes.get(&target).expect("site exists") {
                &SiteNodes::Adapted { a, b, .. } => (a, b),
                SiteNodes::Frozen(_) => unreachable!("adapted site has adapter nodes"),
            };
            let p_a = self.tape.leaf(reg.p_a.clone(), false);
            let p_b = self.tape.leaf(reg.p_b.clone(), false);
            for (factor, directions) in [(a, p_a), (b, p_b)] {
                let ft = self.tape.transpose(factor);
                let cross = self.tape.matmul(ft, directions)?;
                let term = self.tape.frob_sq(cross);
                total = Some(match total {
                    Some(t) => self.tape.add(t, term)?,
                    None => term,
                });
            }
        }
        Ok(total)
    }
}

impl TinyModel {
    /// Builds a model from independent child streams of `rng`, so drawing or
    /// skipping the optional direction pairs never shifts the base-weight or
    /// adapter draws. Identical root seeds therefore give identical bases
    /// across method variants.
    pub fn init(config: TinyModelConfig, rng: &Rng) -> Result<TinyModel> {
        config.validate()?;
        let base_rng = rng.derive("model_base");
        let adapter_rng = rng.derive("adapter_init");
        let reg_rng = rng.derive("reg_init");

        let mut sites = BTreeMap::new();
        for target in config.available_targets() {
            let (rows, cols) = config.site_dims(target)?;
            let std = 1.0 / (cols as f64).sqrt();
            let w = gaussian_matrix(rows, cols, std, &mut base_rng.derive(target.name()))?;
            let site = if config.adapter_targets.contains(&target) {
                if config.rank > rows.min(cols) {
                    return Err(Error::invalid_argument(format!(
                        "rank {} exceeds min dimension {} of target '{target}'",
                        config.rank,
                        rows.min(cols)
                    )));
                }
                let mut ad = init_adapter(
                    w,
                    config.rank,
                    config.alpha,
                    config.adapter_init_std,
                    &mut adapter_rng.derive(target.name()),
                )?;
                if let Some(rc) = &config.reg {
                    ad.reg = Some(init_reg(
                        rc.variant,
                        &ad.w,
                        rc.k,
                        &mut reg_rng.derive(target.name()),
                    )?);
                }
                Site::Adapted(ad)
            } else {
                Site::Frozen(w)
            };
            sites.insert(target, site);
        }

        let extras = match config.shape {
            ModelShape::Mlp { .. } => FrozenExtras::Mlp,
            ModelShape::Transformer {
                vocab_size,
                seq_len,
                embed_dim,
                ..
            } => FrozenExtras::Transformer {
                embed: gaussian_matrix(embed_dim, vocab_size, 1.0, &mut base_rng.derive("embed"))?,
                pos: gaussian_matrix(embed_dim, seq_len, 0.5, &mut base_rng.derive("pos"))?,
                lm_head: gaussian_matrix(
                    vocab_size,
                    embed_dim,
                    1.0 / (embed_dim as f64).sqrt(),
                    &mut base_rng.derive("lm_head"),
                )?,
            },
        };
        Ok(TinyModel {
            config,
            sites,
            extras,
        })
    }

    /// Adapters in deterministic target order.
    pub fn adapters(&self) -> impl Iterator<Item = (AdapterTarget, &LoraAdapter)> {
        self.sites
            .iter()
            .filter_map(|(&t, s)| s.adapter().map(|a| (t, a)))
    }

    pub fn adapter_at(&self, target: AdapterTarget) -> Option<&LoraAdapter> {
        self.sites.get(&target).and_then(|s| s.adapter())
    }

    pub fn adapter_at_mut(&mut self, target: AdapterTarget) -> Option<&mut LoraAdapter> {
        self.sites.get_mut(&target).and_then(|s| s.adapter_mut())
    }

    /// Logits for a batch: classes x batch for the classifier, or the
    /// horizontal concatenation of per-position vocab x (seq_len−1) blocks
    /// for the language model.
    pub fn forward_logits(&self, batch: &Dataset) -> Result<Matrix> {
        if batch.is_empty() {
            return Err(Error::invalid_argument("batch must not be empty".to_string()));
        }
        match (&self.config.shape, batch) {
            (ModelShape::Mlp { .. }, Dataset::Classification { inputs, labels: _ }) => {
                let mut pass = ForwardPass::new(self, false);
                let x = pass.tape.leaf(inputs.clone(), false);
                let hidden = pass.apply_site(AdapterTarget::MlpUp, x)?;
                let act = pass.tape.relu(hidden);
                let logits = pass.apply_site(AdapterTarget::MlpDown, act)?;
                Ok(pass.tape.value(logits).clone())
            }
            (ModelShape::Transformer { vocab_size, .. }, Dataset::SequenceLm { seqs }) => {
                let mut out: Option<Matrix> = None;
                for seq in seqs {
                    let block = self.sequence_pred_logits(seq)?;
                    out = Some(match out {
                        None => block,
                        Some(prev) => {
                            let mut joined = Matrix::zeros(*vocab_size, prev.cols() + block.cols());
                            for j in 0..prev.cols() {
                                joined.set_column(j, &prev.column(j));
                            }
                            for j in 0..block.cols() {
                                joined.set_column(prev.cols() + j, &block.column(j));
                            }
                            joined
                        }
                    });
                }
                Ok(out.expect("nonempty checked"))
            }
            _ => Err(Error::invalid_argument(
                "dataset kind does not match model architecture".to_string(),
            )),
        }
    }

    /// Prediction logits (vocab x seq_len−1) for one sequence.
    fn sequence_pred_logits(&self, seq: &[usize]) -> Result<Matrix> {
        let (embed, pos, lm_head) = match &self.extras {
            FrozenExtras::Transformer { embed, pos, lm_head } => (embed, pos, lm_head),
            FrozenExtras::Mlp => unreachable!(),
        };
        let d = embed.rows();
        let len = seq.len();
        let mut x0 = Matrix::zeros(d, len);
        for (t, &tok) in seq.iter().enumerate() {
            for i in 0..d {
                x0[(i, t)] = embed[(i, tok)] + pos[(i, t)];
            }
        }
        let mut pass = ForwardPass::new(self, false);
        let x = pass.tape.leaf(x0, false);
        let q = pass.apply_site(AdapterTarget::Query, x)?;
        let k = pass.apply_site(AdapterTarget::Key, x)?;
        let v = pass.apply_site(AdapterTarget::Value, x)?;
        let kt = pass.tape.transpose(k);
        let scores = pass.tape.matmul(kt, q)?;
        let scaled = pass.tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = pass.tape.causal_col_softmax(scaled)?;
        let mixed = pass.tape.matmul(v, attn)?;
        let h1 = pass.tape.add(x, mixed)?;
        let up = pass.apply_site(AdapterTarget::MlpUp, h1)?;
        let act = pass.tape.relu(up);
        let down = pass.apply_site(AdapterTarget::MlpDown, act)?;
        let h2 = pass.tape.add(h1, down)?;
        let head = pass.tape.leaf(lm_head.clone(), false);
        let logits = pass.tape.matmul(head, h2)?;
        let preds = pass.tape.cols(logits, 0, len - 1)?;
        Ok(pass.tape.value(preds).clone())
    }

    /// Task, regularization, and total loss without gradients.
    pub fn total_loss(&self, batch: &Dataset) -> Result<LossParts> {
        let (parts, _) = self.loss_with_grads(batch, None, false)?;
        Ok(parts)
    }

    /// Loss parts plus gradients of `task + lambda·reg` w.r.t. every
    /// adapter factor. `dropout_rng` enables dropout when the config asks
    /// for it (training only).
    pub fn loss_and_grads(
        &self,
        batch: &Dataset,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(LossParts, AdapterGrads)> {
        let (parts, grads) = self.loss_with_grads(batch, dropout_rng, true)?;
        Ok((parts, grads.expect("gradients requested")))
    }

    fn loss_with_grads(
        &self,
        batch: &Dataset,
        dropout_rng: Option<&mut Rng>,
        want_grads: bool,
    ) -> Result<(LossParts, Option<AdapterGrads>)> {
        let mut pass = ForwardPass::new(self, false);
        let task_node = pass.task_loss(batch, dropout_rng)?;
        let reg_node = pass.reg_loss()?;
        let task = pass.tape.value(task_node)[(0, 0)];
        let (reg, total_node) = match reg_node {
            None => {
                // Reg value is still reported when pairs exist; only its
                // gradient path is skipped at lambda = 0.
                let reg = self.reg_value()?;
                (reg, task_node)
            }
            Some(rn) => {
                let reg = pass.tape.value(rn)[(0, 0)];
                let weighted = pass.tape.scale(rn, self.config.lambda);
                (reg, pass.tape.add(task_node, weighted)?)
            }
        };
        let total = pass.tape.value(total_node)[(0, 0)];
        if !total.is_finite() {
            return Err(Error::invalid_state(format!(
                "non-finite loss encountered: {total}"
            )));
        }
        let parts = LossParts { task, reg, total };
        if !want_grads {
            return Ok((parts, None));
        }
        let grads = pass.tape.backward(total_node)?;
        let mut out = AdapterGrads::new();
        for (&target, nodes) in &pass.nodes {
            if let &SiteNodes::Adapted { a, b, .. } = nodes {
                let (ra, ca) = pass.tape.value(a).shape();
                let (rb, cb) = pass.tape.value(b).shape();
                let ga = grads
                    .get(a)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(ra, ca));
                let gb = grads
                    .get(b)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(rb, cb));
                out.insert(target, (ga, gb));
            }
        }
        Ok((parts, Some(out)))
    }

    /// Sum of regularization penalties over adapters that carry pairs
    /// (independent of lambda).
    pub fn reg_value(&self) -> Result<f64> {
        let mut total = 0.0;
        for (_, ad) in self.adapters() {
            if ad.reg.is_some() {
                total += ad.clora_reg_loss()?;
            }
        }
        Ok(total)
    }

    /// Fraction of samples/positions whose argmax prediction is correct.
    pub fn evaluate_accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid_argument("dataset must not be empty".to_string()));
        }
        match (&self.config.shape, data) {
            (ModelShape::Mlp { .. }, Dataset::Classification { labels, .. }) => {
                let logits = self.forward_logits(data)?;
                let mut hits = 0usize;
                for (j, &label) in labels.iter().enumerate() {
                    if argmax(&logits.column(j)) == label {
                        hits += 1;
                    }
                }
                Ok(hits as f64 / labels.len() as f64)
            }
            (ModelShape::Transformer { .. }, Dataset::SequenceLm { seqs }) => {
                let mut hits = 0usize;
                let mut total = 0usize;
                for seq in seqs {
                    let preds = self.sequence_pred_logits(seq)?;
                    for (t, &label) in seq[1..].iter().enumerate() {
                        if argmax(&preds.column(t)) == label {
                            hits += 1;
                        }
                        total += 1;
                    }
                }
                Ok(hits as f64 / total as f64)
            }
            _ => Err(Error::invalid_argument(
                "dataset kind does not match model architecture".to_string(),
            )),
        }
    }

    /// Runs the sample set forward and records, per adapter site, the exact
    /// activation vectors entering that projection.
    pub fn collect_layer_inputs(
        &self,
        samples: &Dataset,
    ) -> Result<BTreeMap<AdapterTarget, Vec<Vec<f64>>>> {
        if samples.is_empty() {
            return Err(Error::invalid_argument("sample set must not be empty".to_string()));
        }
        let mut pass = ForwardPass::new(self, true);
        pass.task_loss(samples, None)?;
        Ok(pass.collected.take().expect("collection enabled"))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
