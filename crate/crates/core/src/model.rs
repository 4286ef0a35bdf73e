//! The two-tower recommender: feature embeddings, interaction MLP, GRU
//! session encoder, the supervised and contrastive losses, and their exact
//! gradients.
//!
//! All trainable values live in one flat `Vec<f64>` described by a
//! [`ParamLayout`]. Gradients share the same layout, so a client delta is a
//! plain element-wise difference.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine_t, affine_t_backward, dot, logsumexp, sigmoid, RngStream};

/// Lower/upper clamp applied to predictions before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// A bag of categorical indices for one feature field (single-valued fields
/// hold exactly one index; multi-valued ones such as genres hold several).
pub type FieldValues = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Vocabulary size of each user feature field.
    pub user_fields: Vec<usize>,
    pub item_count: usize,
    /// Vocabulary size of each item feature field (item id excluded).
    pub item_fields: Vec<usize>,
    pub embed_dim: usize,
    /// Widths of the ReLU hidden layers.
    pub hidden: Vec<usize>,
}

impl ModelDims {
    pub fn user_dim(&self) -> usize {
        self.embed_dim * self.user_fields.len()
    }

    pub fn item_dim(&self) -> usize {
        self.embed_dim * (1 + self.item_fields.len())
    }

    pub fn input_dim(&self) -> usize {
        self.user_dim() + self.item_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be >= 1".into()));
        }
        if self.user_fields.is_empty() {
            return Err(Error::InvalidArgument("at least one user field is required".into()));
        }
        if self.item_count == 0 {
            return Err(Error::InvalidArgument("item_count must be >= 1".into()));
        }
        if self
            .user_fields
            .iter()
            .chain(&self.item_fields)
            .chain(&self.hidden)
            .any(|&v| v == 0)
        {
            return Err(Error::InvalidArgument("vocabularies and layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn row(&self, r: usize) -> std::ops::Range<usize> {
        let start = self.offset + r * self.cols;
        start..start + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: Span,
    pub b: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruSpans {
    pub wz: Span,
    pub uz: Span,
    pub bz: Span,
    pub wr: Span,
    pub ur: Span,
    pub br: Span,
    pub wn: Span,
    pub un: Span,
    pub bn: Span,
}

/// Where each named tensor lives inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub dims: ModelDims,
    pub user_emb: Vec<Span>,
    pub item_id_emb: Span,
    pub item_field_emb: Vec<Span>,
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub gru: GruSpans,
    pub psi: Dense,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let d = dims.embed_dim;
        let mut offset = 0;
        let mut alloc = |rows: usize, cols: usize| {
            let s = Span { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let user_emb = dims.user_fields.iter().map(|&v| alloc(v, d)).collect();
        let item_id_emb = alloc(dims.item_count, d);
        let item_field_emb = dims.item_fields.iter().map(|&v| alloc(v, d)).collect();
        let mut hidden = Vec::with_capacity(dims.hidden.len());
        let mut width = dims.input_dim();
        for &h in &dims.hidden {
            hidden.push(Dense {
                w: alloc(width, h),
                b: alloc(1, h),
            });
            width = h;
        }
        let output = Dense {
            w: alloc(width, 1),
            b: alloc(1, 1),
        };
        let xi = dims.item_dim();
        let gru = GruSpans {
            wz: alloc(xi, d),
            uz: alloc(d, d),
            bz: alloc(1, d),
            wr: alloc(xi, d),
            ur: alloc(d, d),
            br: alloc(1, d),
            wn: alloc(xi, d),
            un: alloc(d, d),
            bn: alloc(1, d),
        };
        let psi = Dense {
            w: alloc(xi, d),
            b: alloc(1, d),
        };
        Ok(Self {
            dims,
            user_emb,
            item_id_emb,
            item_field_emb,
            hidden,
            output,
            gru,
            psi,
            total: offset,
        })
    }

    /// Every weight matrix with its fan-in/fan-out, biases excluded.
    fn weight_spans(&self) -> Vec<Span> {
        let mut v: Vec<Span> = self.user_emb.clone();
        v.push(self.item_id_emb);
        v.extend(self.item_field_emb.iter().copied());
        v.extend(self.hidden.iter().map(|l| l.w));
        v.push(self.output.w);
        let g = &self.gru;
        v.extend([g.wz, g.uz, g.wr, g.ur, g.wn, g.un]);
        v.push(self.psi.w);
        v
    }

    /// Spans touched by the self-supervised objectives (item embeddings, GRU, projection).
    pub fn item_side_spans(&self) -> Vec<Span> {
        let mut v = vec![self.item_id_emb];
        v.extend(self.item_field_emb.iter().copied());
        let g = &self.gru;
        v.extend([g.wz, g.uz, g.bz, g.wr, g.ur, g.br, g.wn, g.un, g.bn]);
        v.push(self.psi.w);
        v.push(self.psi.b);
        v
    }
}

/// A full set of trainable parameters (or a gradient with the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total];
        Self { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layout: Arc<ParamLayout>, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(layout);
        for span in p.layout.clone().weight_spans() {
            let limit = (6.0 / (span.rows + span.cols) as f64).sqrt();
            for v in &mut p.values[span.range()] {
                *v = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn dims(&self) -> &ModelDims {
        &self.layout.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn unflatten(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "layout needs {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn span(&self, s: Span) -> &[f64] {
        &self.values[s.range()]
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        for (a, b) in self.values.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 8 * self.values.len());
        encode_checkpoint(self, &mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&mut bytes.as_slice())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDRECCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout: magic, u32 version, u32 header length, JSON
/// [`ModelDims`] header, u64 value count, then little-endian f64 values.
pub fn encode_checkpoint(p: &ParamSet, out: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&p.layout.dims)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    out.write_all(&(p.values.len() as u64).to_le_bytes()).map_err(io)?;
    for v in &p.values {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn decode_checkpoint(input: &mut impl Read) -> Result<ParamSet> {
    let io = |e| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    input.read_exact(&mut u32buf).map_err(io)?;
    let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
    input.read_exact(&mut header).map_err(io)?;
    let dims: ModelDims = serde_json::from_slice(&header)?;
    let layout = Arc::new(ParamLayout::new(dims)?);
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf).map_err(io)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    if n != layout.total {
        return Err(Error::Checkpoint(format!(
            "header describes {} parameters but body holds {n}",
            layout.total
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut u64buf).map_err(io)?;
        values.push(f64::from_le_bytes(u64buf));
    }
    ParamSet::unflatten(layout, values)
}

/// Side information for every item, indexed by item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub field_vocab: Vec<usize>,
    /// `features[item][field]` is that field's bag of indices.
    pub features: Vec<Vec<FieldValues>>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self, item: u32) -> Result<&[FieldValues]> {
        self.features
            .get(item as usize)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfVocabulary {
                what: "item id",
                index: item as usize,
                size: self.features.len(),
            })
    }

    pub fn example(&self, user_features: &[FieldValues], item: u32, label: u8) -> Result<Example> {
        Ok(Example {
            user_features: user_features.to_vec(),
            item_id: item,
            item_features: self.features(item)?.to_vec(),
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user_features: Vec<FieldValues>,
    pub item_id: u32,
    pub item_features: Vec<FieldValues>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<u32>,
}

impl Session {
    pub fn new(items: Vec<u32>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Item-masked view: the session with one position replaced, the item that
/// was there, and the candidate set scored against it (contains `positive`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMaskedView {
    pub masked: Session,
    pub positive: u32,
    pub candidates: Vec<u32>,
}

/// Segment-masked view: the session with a span replaced, the original span,
/// and negative spans drawn elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMaskedView {
    pub masked: Session,
    pub positive: Session,
    pub negatives: Vec<Session>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SslViews {
    pub item: Vec<ItemMaskedView>,
    pub segment: Vec<SegmentMaskedView>,
}

impl SslViews {
    pub fn is_empty(&self) -> bool {
        self.item.is_empty() && self.segment.is_empty()
    }

    pub fn len(&self) -> usize {
        self.item.len() + self.segment.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dssm: f64,
    pub item_mask: f64,
    pub segment_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dssm: 1.0,
            item_mask: 1.0,
            segment_mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dssm, self.item_mask, self.segment_mask]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// embeddings

fn check_index(what: &'static str, index: u32, size: usize) -> Result<()> {
    if (index as usize) < size {
        Ok(())
    } else {
        Err(Error::OutOfVocabulary {
            what,
            index: index as usize,
            size,
        })
    }
}

/// Mean of the embedding rows for a bag; zero for an empty bag.
fn embed_bag(p: &ParamSet, table: Span, bag: &[u32], out: &mut [f64]) {
    out.fill(0.0);
    if bag.is_empty() {
        return;
    }
    let w = 1.0 / bag.len() as f64;
    for &i in bag {
        for (o, v) in out.iter_mut().zip(&p.values[table.row(i as usize)]) {
            *o += w * v;
        }
    }
}

fn embed_bag_backward(grad: &mut [f64], table: Span, bag: &[u32], dout: &[f64]) {
    if bag.is_empty() {
        return;
    }
    let w = 1.0 / bag.len() as f64;
    for &i in bag {
        for (g, d) in grad[table.row(i as usize)].iter_mut().zip(dout) {
            *g += w * d;
        }
    }
}

fn check_fields(what: &'static str, fields: &[FieldValues], vocab: &[usize]) -> Result<()> {
    if fields.len() != vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {} fields, got {}",
            vocab.len(),
            fields.len()
        )));
    }
    for (bag, &size) in fields.iter().zip(vocab) {
        for &i in bag {
            check_index(what, i, size)?;
        }
    }
    Ok(())
}

fn user_repr(p: &ParamSet, user_features: &[FieldValues], out: &mut [f64]) {
    let d = p.dims().embed_dim;
    for (f, (bag, table)) in user_features.iter().zip(&p.layout.user_emb).enumerate() {
        embed_bag(p, *table, bag, &mut out[f * d..(f + 1) * d]);
    }
}

fn user_repr_backward(p: &ParamSet, grad: &mut [f64], user_features: &[FieldValues], dout: &[f64]) {
    let d = p.dims().embed_dim;
    for (f, (bag, table)) in user_features.iter().zip(&p.layout.user_emb).enumerate() {
        embed_bag_backward(grad, *table, bag, &dout[f * d..(f + 1) * d]);
    }
}

fn item_repr(p: &ParamSet, item: u32, features: &[FieldValues], out: &mut [f64]) {
    let d = p.dims().embed_dim;
    out[..d].copy_from_slice(&p.values[p.layout.item_id_emb.row(item as usize)]);
    for (f, (bag, table)) in features.iter().zip(&p.layout.item_field_emb).enumerate() {
        embed_bag(p, *table, bag, &mut out[(f + 1) * d..(f + 2) * d]);
    }
}

fn item_repr_backward(p: &ParamSet, grad: &mut [f64], item: u32, features: &[FieldValues], dout: &[f64]) {
    let d = p.dims().embed_dim;
    for (g, x) in grad[p.layout.item_id_emb.row(item as usize)].iter_mut().zip(&dout[..d]) {
        *g += x;
    }
    for (f, (bag, table)) in features.iter().zip(&p.layout.item_field_emb).enumerate() {
        embed_bag_backward(grad, *table, bag, &dout[(f + 1) * d..(f + 2) * d]);
    }
}

fn validate_example(p: &ParamSet, ex: &Example) -> Result<()> {
    let dims = p.dims();
    check_fields("user feature", &ex.user_features, &dims.user_fields)?;
    check_index("item id", ex.item_id, dims.item_count)?;
    check_fields("item feature", &ex.item_features, &dims.item_fields)?;
    if ex.label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {}", ex.label)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// interaction network

struct MlpTrace {
    /// activations[0] is the input, activations[l+1] the post-ReLU output of layer l
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logit: f64,
}

fn mlp_forward(p: &ParamSet, ex: &Example) -> MlpTrace {
    let dims = p.dims();
    let mut x0 = vec![0.0; dims.input_dim()];
    let ud = dims.user_dim();
    user_repr(p, &ex.user_features, &mut x0[..ud]);
    item_repr(p, ex.item_id, &ex.item_features, &mut x0[ud..]);
    let mut activations = vec![x0];
    let mut pre = Vec::with_capacity(p.layout.hidden.len());
    for layer in &p.layout.hidden {
        let mut a = vec![0.0; layer.b.len()];
        affine_t(p.span(layer.w), p.span(layer.b), activations.last().unwrap(), &mut a);
        let x: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        pre.push(a);
        activations.push(x);
    }
    let mut out = [0.0];
    affine_t(p.span(p.layout.output.w), p.span(p.layout.output.b), activations.last().unwrap(), &mut out);
    MlpTrace {
        activations,
        pre,
        logit: out[0],
    }
}

fn mlp_backward(p: &ParamSet, grad: &mut [f64], ex: &Example, trace: &MlpTrace, dlogit: f64) {
    let layout = &p.layout;
    let last = trace.activations.last().unwrap();
    let mut dx = vec![0.0; last.len()];
    {
        let (dw, db) = split_two(grad, layout.output.w, layout.output.b);
        affine_t_backward(p.span(layout.output.w), last, &[dlogit], dw, db, Some(&mut dx));
    }
    for (l, layer) in layout.hidden.iter().enumerate().rev() {
        let da: Vec<f64> = dx
            .iter()
            .zip(&trace.pre[l])
            .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
            .collect();
        let input = &trace.activations[l];
        let mut dinput = vec![0.0; input.len()];
        let (dw, db) = split_two(grad, layer.w, layer.b);
        affine_t_backward(p.span(layer.w), input, &da, dw, db, Some(&mut dinput));
        dx = dinput;
    }
    let ud = p.dims().user_dim();
    user_repr_backward(p, grad, &ex.user_features, &dx[..ud]);
    item_repr_backward(p, grad, ex.item_id, &ex.item_features, &dx[ud..]);
}

/// Mutable views of two disjoint spans of the gradient buffer.
fn split_two(grad: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    assert!(a.offset + a.len() <= b.offset || b.offset + b.len() <= a.offset);
    if a.offset < b.offset {
        let (lo, hi) = grad.split_at_mut(b.offset);
        (&mut lo[a.range()], &mut hi[..b.len()])
    } else {
        let (lo, hi) = grad.split_at_mut(a.offset);
        (&mut hi[..a.len()], &mut lo[b.range()])
    }
}

/// Pre-sigmoid score; monotone in [`forward`], used for ranking.
pub fn score(theta: &ParamSet, ex: &Example) -> Result<f64> {
    validate_example(theta, ex)?;
    Ok(mlp_forward(theta, ex).logit)
}

/// Predicted interaction probability in (0, 1).
pub fn forward(theta: &ParamSet, ex: &Example) -> Result<f64> {
    score(theta, ex).map(sigmoid)
}

fn bce(yhat: f64, label: u8) -> f64 {
    let y = yhat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -y.ln()
    } else {
        -(1.0 - y).ln()
    }
}

fn check_batch(theta: &ParamSet, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("supervised batch"));
    }
    batch.iter().try_for_each(|ex| validate_example(theta, ex))
}

/// Summed binary cross-entropy over the batch.
pub fn loss_dssm(theta: &ParamSet, batch: &[Example]) -> Result<f64> {
    check_batch(theta, batch)?;
    Ok(batch
        .iter()
        .map(|ex| bce(sigmoid(mlp_forward(theta, ex).logit), ex.label))
        .sum())
}

fn accumulate_dssm(theta: &ParamSet, batch: &[Example], weight: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ex in batch {
        let trace = mlp_forward(theta, ex);
        let yhat = sigmoid(trace.logit);
        loss += bce(yhat, ex.label);
        if weight != 0.0 {
            mlp_backward(theta, grad, ex, &trace, weight * (yhat - f64::from(ex.label)));
        }
    }
    loss
}

/// Gradient of [`loss_dssm`]. Uses `Ŷ − Y` at the logit, which is the exact
/// derivative everywhere the clamp is inactive.
pub fn grad_dssm(theta: &ParamSet, batch: &[Example]) -> Result<ParamSet> {
    check_batch(theta, batch)?;
    let mut g = theta.zeros_like();
    accumulate_dssm(theta, batch, 1.0, &mut g.values);
    Ok(g)
}

// ---------------------------------------------------------------------------
// session encoder

struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

struct GruTrace {
    items: Vec<u32>,
    steps: Vec<GruStep>,
    h: Vec<f64>,
}

fn check_session(p: &ParamSet, s: &Session) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Empty("session"));
    }
    s.items
        .iter()
        .try_for_each(|&i| check_index("session item", i, p.dims().item_count))
}

fn gru_forward(p: &ParamSet, catalog: &ItemCatalog, s: &Session) -> Result<GruTrace> {
    let d = p.dims().embed_dim;
    let g = &p.layout.gru;
    let mut h = vec![0.0; d];
    let mut steps = Vec::with_capacity(s.len());
    let mut tmp = vec![0.0; d];
    for &item in &s.items {
        let mut x = vec![0.0; p.dims().item_dim()];
        item_repr(p, item, catalog.features(item)?, &mut x);

        let mut z = vec![0.0; d];
        affine_t(p.span(g.wz), p.span(g.bz), &x, &mut z);
        affine_t(p.span(g.uz), &vec![0.0; d], &h, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(a, b)| *a = sigmoid(*a + b));

        let mut r = vec![0.0; d];
        affine_t(p.span(g.wr), p.span(g.br), &x, &mut r);
        affine_t(p.span(g.ur), &vec![0.0; d], &h, &mut tmp);
        r.iter_mut().zip(&tmp).for_each(|(a, b)| *a = sigmoid(*a + b));

        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let mut n = vec![0.0; d];
        affine_t(p.span(g.wn), p.span(g.bn), &x, &mut n);
        affine_t(p.span(g.un), &vec![0.0; d], &rh, &mut tmp);
        n.iter_mut().zip(&tmp).for_each(|(a, b)| *a = (*a + b).tanh());

        let h_new: Vec<f64> = (0..d).map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k]).collect();
        steps.push(GruStep {
            x,
            h_prev: std::mem::replace(&mut h, h_new),
            z,
            r,
            n,
        });
    }
    Ok(GruTrace {
        items: s.items.clone(),
        steps,
        h,
    })
}

fn gru_backward(p: &ParamSet, catalog: &ItemCatalog, grad: &mut [f64], trace: &GruTrace, dh_final: &[f64]) {
    let d = p.dims().embed_dim;
    let g = p.layout.gru;
    let mut dh = dh_final.to_vec();
    let mut scratch_b = vec![0.0; d];
    for (step, &item) in trace.steps.iter().zip(&trace.items).rev() {
        let mut dh_prev: Vec<f64> = (0..d).map(|k| dh[k] * step.z[k]).collect();
        let dan: Vec<f64> = (0..d)
            .map(|k| dh[k] * (1.0 - step.z[k]) * (1.0 - step.n[k] * step.n[k]))
            .collect();
        let daz: Vec<f64> = (0..d)
            .map(|k| dh[k] * (step.h_prev[k] - step.n[k]) * step.z[k] * (1.0 - step.z[k]))
            .collect();

        let mut dx = vec![0.0; step.x.len()];
        // candidate path
        {
            let (dw, db) = split_two(grad, g.wn, g.bn);
            affine_t_backward(p.span(g.wn), &step.x, &dan, dw, db, Some(&mut dx));
        }
        let rh: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(a, b)| a * b).collect();
        let mut drh = vec![0.0; d];
        scratch_b.fill(0.0);
        affine_t_backward(p.span(g.un), &rh, &dan, &mut grad[g.un.range()], &mut scratch_b, Some(&mut drh));
        let dar: Vec<f64> = (0..d)
            .map(|k| drh[k] * step.h_prev[k] * step.r[k] * (1.0 - step.r[k]))
            .collect();
        for k in 0..d {
            dh_prev[k] += drh[k] * step.r[k];
        }
        // update and reset gates
        for (w, u, b, da) in [(g.wz, g.uz, g.bz, &daz), (g.wr, g.ur, g.br, &dar)] {
            let (dw, db) = split_two(grad, w, b);
            affine_t_backward(p.span(w), &step.x, da, dw, db, Some(&mut dx));
            scratch_b.fill(0.0);
            affine_t_backward(p.span(u), &step.h_prev, da, &mut grad[u.range()], &mut scratch_b, Some(&mut dh_prev));
        }
        // catalog lookups were validated on the forward pass
        let features = catalog.features(item).expect("validated in forward");
        item_repr_backward(p, grad, item, features, &dx);
        dh = dh_prev;
    }
}

/// Final GRU hidden state for the session, starting from a zero state.
pub fn encode_session(theta: &ParamSet, catalog: &ItemCatalog, s: &Session) -> Result<Vec<f64>> {
    check_session(theta, s)?;
    Ok(gru_forward(theta, catalog, s)?.h)
}

/// Item-tower output: the item-id embedding followed by one pooled embedding per item field.
pub fn item_embedding(theta: &ParamSet, catalog: &ItemCatalog, item: u32) -> Result<Vec<f64>> {
    check_index("item id", item, theta.dims().item_count)?;
    let mut x = vec![0.0; theta.dims().item_dim()];
    item_repr(theta, item, catalog.features(item)?, &mut x);
    Ok(x)
}

/// Item projection used as the contrastive target for masked items.
pub fn project_item(theta: &ParamSet, catalog: &ItemCatalog, item: u32) -> Result<Vec<f64>> {
    check_index("item id", item, theta.dims().item_count)?;
    let mut x = vec![0.0; theta.dims().item_dim()];
    item_repr(theta, item, catalog.features(item)?, &mut x);
    let mut out = vec![0.0; theta.dims().embed_dim];
    affine_t(theta.span(theta.layout.psi.w), theta.span(theta.layout.psi.b), &x, &mut out);
    Ok(out)
}

/// Softmax cross-entropy of `scores` against the entry at `positive`:
/// `logsumexp(scores) - scores[positive]`, with its gradient w.r.t. scores.
pub fn contrastive_loss(scores: &[f64], positive: usize) -> (f64, Vec<f64>) {
    let lse = logsumexp(scores);
    let loss = (lse - scores[positive]).max(0.0);
    let mut g: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    g[positive] -= 1.0;
    (loss, g)
}

fn check_item_view(theta: &ParamSet, view: &ItemMaskedView) -> Result<usize> {
    check_session(theta, &view.masked)?;
    let pos = view
        .candidates
        .iter()
        .position(|&c| c == view.positive)
        .ok_or_else(|| Error::InvalidArgument("positive item missing from candidate set".into()))?;
    view.candidates
        .iter()
        .try_for_each(|&c| check_index("candidate item", c, theta.dims().item_count))?;
    Ok(pos)
}

fn accumulate_item_view(
    theta: &ParamSet,
    catalog: &ItemCatalog,
    view: &ItemMaskedView,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let pos = check_item_view(theta, view)?;
    let trace = gru_forward(theta, catalog, &view.masked)?;
    let psi = theta.layout.psi;
    let d = theta.dims().embed_dim;
    let mut xs = Vec::with_capacity(view.candidates.len());
    let mut projs = Vec::with_capacity(view.candidates.len());
    for &c in &view.candidates {
        let mut x = vec![0.0; theta.dims().item_dim()];
        item_repr(theta, c, catalog.features(c)?, &mut x);
        let mut out = vec![0.0; d];
        affine_t(theta.span(psi.w), theta.span(psi.b), &x, &mut out);
        xs.push(x);
        projs.push(out);
    }
    let scores: Vec<f64> = projs.iter().map(|v| dot(&trace.h, v)).collect();
    let (loss, dscores) = contrastive_loss(&scores, pos);
    if weight != 0.0 {
        let mut dh = vec![0.0; d];
        for (((c, x), proj), ds) in view.candidates.iter().zip(&xs).zip(&projs).zip(&dscores) {
            let ds = weight * ds;
            for k in 0..d {
                dh[k] += ds * proj[k];
            }
            let dproj: Vec<f64> = trace.h.iter().map(|h| ds * h).collect();
            let mut dx = vec![0.0; x.len()];
            let (dw, db) = split_two(grad, psi.w, psi.b);
            affine_t_backward(theta.span(psi.w), x, &dproj, dw, db, Some(&mut dx));
            item_repr_backward(theta, grad, *c, catalog.features(*c)?, &dx);
        }
        gru_backward(theta, catalog, grad, &trace, &dh);
    }
    Ok(loss)
}

fn accumulate_segment_view(
    theta: &ParamSet,
    catalog: &ItemCatalog,
    view: &SegmentMaskedView,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if view.negatives.is_empty() {
        return Err(Error::Empty("negative segment set"));
    }
    check_session(theta, &view.masked)?;
    check_session(theta, &view.positive)?;
    view.negatives.iter().try_for_each(|s| check_session(theta, s))?;

    let anchor = gru_forward(theta, catalog, &view.masked)?;
    let mut cands = Vec::with_capacity(1 + view.negatives.len());
    cands.push(gru_forward(theta, catalog, &view.positive)?);
    for s in &view.negatives {
        cands.push(gru_forward(theta, catalog, s)?);
    }
    let scores: Vec<f64> = cands.iter().map(|c| dot(&anchor.h, &c.h)).collect();
    let (loss, dscores) = contrastive_loss(&scores, 0);
    if weight != 0.0 {
        let d = theta.dims().embed_dim;
        let mut danchor = vec![0.0; d];
        for (c, ds) in cands.iter().zip(&dscores) {
            let ds = weight * ds;
            for k in 0..d {
                danchor[k] += ds * c.h[k];
            }
            let dc: Vec<f64> = anchor.h.iter().map(|h| ds * h).collect();
            gru_backward(theta, catalog, grad, c, &dc);
        }
        gru_backward(theta, catalog, grad, &anchor, &danchor);
    }
    Ok(loss)
}

/// Negative log-softmax of the masked item among its candidates.
pub fn loss_item_masked(theta: &ParamSet, catalog: &ItemCatalog, view: &ItemMaskedView) -> Result<f64> {
    let mut scratch = Vec::new();
    accumulate_item_view(theta, catalog, view, 0.0, &mut scratch)
}

pub fn grad_item_masked(theta: &ParamSet, catalog: &ItemCatalog, view: &ItemMaskedView) -> Result<ParamSet> {
    let mut g = theta.zeros_like();
    accumulate_item_view(theta, catalog, view, 1.0, &mut g.values)?;
    Ok(g)
}

/// Negative log-softmax of the original segment among {original} ∪ negatives,
/// all encoded with the session GRU.
pub fn loss_segment_masked(theta: &ParamSet, catalog: &ItemCatalog, view: &SegmentMaskedView) -> Result<f64> {
    let mut scratch = Vec::new();
    accumulate_segment_view(theta, catalog, view, 0.0, &mut scratch)
}

pub fn grad_segment_masked(theta: &ParamSet, catalog: &ItemCatalog, view: &SegmentMaskedView) -> Result<ParamSet> {
    let mut g = theta.zeros_like();
    accumulate_segment_view(theta, catalog, view, 1.0, &mut g.values)?;
    Ok(g)
}

/// Everything one objective evaluation needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub catalog: &'a ItemCatalog,
    pub weights: LossWeights,
}

/// Loss components of one evaluation (unweighted) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub dssm: f64,
    pub item_mask: f64,
    pub segment_mask: f64,
    pub total: f64,
}

impl Objective<'_> {
    /// `λ_DSSM·L_DSSM(batch) + λ_IM·mean L_IM + λ_SM·mean L_SM`, optionally
    /// accumulating the gradient into `grad` (which must have the layout's length).
    pub fn evaluate(
        &self,
        theta: &ParamSet,
        batch: &[Example],
        views: &SslViews,
        grad: Option<&mut [f64]>,
    ) -> Result<LossBreakdown> {
        self.weights.validate()?;
        batch.iter().try_for_each(|ex| validate_example(theta, ex))?;
        let mut scratch = Vec::new();
        let want_grad = grad.is_some();
        let grad = grad.unwrap_or(&mut scratch);
        let w = |x: f64| if want_grad { x } else { 0.0 };
        let mut out = LossBreakdown::default();

        if !batch.is_empty() {
            out.dssm = accumulate_dssm(theta, batch, w(self.weights.dssm), grad);
        }
        if !views.item.is_empty() {
            let scale = self.weights.item_mask / views.item.len() as f64;
            let mut sum = 0.0;
            for v in &views.item {
                sum += accumulate_item_view(theta, self.catalog, v, w(scale), grad)?;
            }
            out.item_mask = sum / views.item.len() as f64;
        }
        if !views.segment.is_empty() {
            let scale = self.weights.segment_mask / views.segment.len() as f64;
            let mut sum = 0.0;
            for v in &views.segment {
                sum += accumulate_segment_view(theta, self.catalog, v, w(scale), grad)?;
            }
            out.segment_mask = sum / views.segment.len() as f64;
        }
        out.total = self.weights.dssm * out.dssm
            + self.weights.item_mask * out.item_mask
            + self.weights.segment_mask * out.segment_mask;
        Ok(out)
    }

    pub fn loss_and_grad(&self, theta: &ParamSet, batch: &[Example], views: &SslViews) -> Result<(f64, ParamSet)> {
        let mut g = theta.zeros_like();
        let l = self.evaluate(theta, batch, views, Some(&mut g.values))?;
        Ok((l.total, g))
    }
}

/// `λ_IM·L_IM + λ_SM·L_SM` with each term averaged over its views.
pub fn loss_ssl(theta: &ParamSet, catalog: &ItemCatalog, views: &SslViews, weights: LossWeights) -> Result<f64> {
    let obj = Objective {
        catalog,
        weights: LossWeights { dssm: 0.0, ..weights },
    };
    Ok(obj.evaluate(theta, &[], views, None)?.total)
}

/// `λ_DSSM·L_DSSM + L_SSL`.
pub fn loss_joint(
    theta: &ParamSet,
    catalog: &ItemCatalog,
    batch: &[Example],
    views: &SslViews,
    weights: LossWeights,
) -> Result<f64> {
    Objective { catalog, weights }
        .evaluate(theta, batch, views, None)
        .map(|b| b.total)
}

pub fn grad_joint(
    theta: &ParamSet,
    catalog: &ItemCatalog,
    batch: &[Example],
    views: &SslViews,
    weights: LossWeights,
) -> Result<ParamSet> {
    Objective { catalog, weights }
        .loss_and_grad(theta, batch, views)
        .map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::any;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    /// 1 user field (vocab 2), 3 items, no item fields, d=1 → x0 has 2 dims; one hidden layer of 2.
    fn tiny_layout() -> Arc<ParamLayout> {
        Arc::new(
            ParamLayout::new(ModelDims {
                user_fields: vec![2],
                item_count: 3,
                item_fields: vec![],
                embed_dim: 1,
                hidden: vec![2],
            })
            .unwrap(),
        )
    }

    fn tiny_catalog() -> ItemCatalog {
        ItemCatalog {
            field_vocab: vec![],
            features: vec![vec![]; 3],
        }
    }

    fn ex(user: u32, item: u32, label: u8) -> Example {
        Example {
            user_features: vec![vec![user]],
            item_id: item,
            item_features: vec![],
            label,
        }
    }

    #[test]
    fn zero_weights_predict_half() {
        let p = ParamSet::zeros(tiny_layout());
        assert_eq!(forward(&p, &ex(0, 1, 1)).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_forward() {
        let layout = tiny_layout();
        let mut p = ParamSet::zeros(layout.clone());
        let v = p.values_mut();
        v[layout.user_emb[0].row(1)][0] = 0.5;
        v[layout.item_id_emb.row(2)][0] = -1.0;
        // W1 is 2x2 row-major: rows index inputs
        v[layout.hidden[0].w.range()].copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        v[layout.hidden[0].b.range()].copy_from_slice(&[0.1, 0.2]);
        v[layout.output.w.range()].copy_from_slice(&[0.7, -0.4]);
        v[layout.output.b.range()].copy_from_slice(&[0.05]);
        // x0 = [0.5, -1]; a = [0.5*1 + -1*0.5 + 0.1, 0.5*-2 + -1*3 + 0.2] = [0.1, -3.8]
        // relu → [0.1, 0]; logit = 0.07 + 0.05 = 0.12
        let expected = 1.0 / (1.0 + (-0.12f64).exp());
        let got = forward(&p, &ex(1, 2, 1)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_out_of_vocab() {
        let p = ParamSet::zeros(tiny_layout());
        assert!(matches!(forward(&p, &ex(5, 0, 1)), Err(Error::OutOfVocabulary { .. })));
        assert!(matches!(forward(&p, &ex(0, 9, 1)), Err(Error::OutOfVocabulary { .. })));
    }

    #[test]
    fn dssm_loss_cases() {
        let p = ParamSet::zeros(tiny_layout());
        let l = loss_dssm(&p, &[ex(0, 0, 1)]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_dssm(&p, &[]).is_err());
        // clamped perfect prediction
        assert!(bce(1.0, 1) < 1e-6);
        assert!(bce(0.0, 0) < 1e-6);
    }

    #[test]
    fn dssm_gradient_sign_for_negative_label() {
        let p = ParamSet::zeros(tiny_layout());
        let g = grad_dssm(&p, &[ex(0, 0, 0)]).unwrap();
        // descending along a positive bias gradient lowers the prediction
        assert!(g.span(p.layout().output.b)[0] > 0.0);
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let mut rng = RngStream::new(1, "init");
        let p = ParamSet::init(tiny_layout(), &mut rng);
        let batch = vec![ex(0, 1, 1), ex(1, 2, 0)];
        let doubled: Vec<Example> = batch.iter().chain(&batch).cloned().collect();
        let g1 = grad_dssm(&p, &batch).unwrap();
        let g2 = grad_dssm(&p, &doubled).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let p = ParamSet::zeros(tiny_layout());
        let h = encode_session(&p, &tiny_catalog(), &Session::new(vec![0, 1, 2])).unwrap();
        assert_eq!(h, vec![0.0]);
        assert!(encode_session(&p, &tiny_catalog(), &Session::new(vec![])).is_err());
    }

    /// Independent scalar GRU step for d=1 with item input x.
    fn manual_step(p: &ParamSet, x: f64, h: f64) -> f64 {
        let g = p.layout().gru;
        let s = |sp: Span| p.span(sp)[0];
        let z = sigmoid(s(g.wz) * x + s(g.uz) * h + s(g.bz));
        let r = sigmoid(s(g.wr) * x + s(g.ur) * h + s(g.br));
        let n = (s(g.wn) * x + s(g.un) * (r * h) + s(g.bn)).tanh();
        (1.0 - z) * n + z * h
    }

    #[test]
    fn gru_matches_manual_unroll() {
        let layout = tiny_layout();
        let mut rng = RngStream::new(4, "init");
        let p = ParamSet::init(layout.clone(), &mut rng);
        let emb = |i: u32| p.span(layout.item_id_emb)[i as usize];
        let cat = tiny_catalog();

        let one = encode_session(&p, &cat, &Session::new(vec![2])).unwrap();
        assert!((one[0] - manual_step(&p, emb(2), 0.0)).abs() < 1e-12);

        let mut h = 0.0;
        for i in [1, 0, 2] {
            h = manual_step(&p, emb(i), h);
        }
        let got = encode_session(&p, &cat, &Session::new(vec![1, 0, 2])).unwrap();
        assert!((got[0] - h).abs() < 1e-12);
    }

    #[test]
    fn contrastive_scalar_cases() {
        let (l, _) = contrastive_loss(&[1.0, 0.0, -1.0], 0);
        assert!((l - 0.4076).abs() < 1e-4, "{l}");
        let (l, _) = contrastive_loss(&[3.2], 0);
        assert_eq!(l, 0.0);
        let (a, _) = contrastive_loss(&[0.3, -0.2], 0);
        let (b, _) = contrastive_loss(&[0.3, -0.2, f64::NEG_INFINITY], 0);
        assert_eq!(a, b);
    }

    #[test]
    fn item_view_positive_only_is_zero_and_missing_positive_errors() {
        let mut rng = RngStream::new(2, "init");
        let p = ParamSet::init(tiny_layout(), &mut rng);
        let cat = tiny_catalog();
        let view = ItemMaskedView {
            masked: Session::new(vec![0, 2]),
            positive: 1,
            candidates: vec![1],
        };
        assert_eq!(loss_item_masked(&p, &cat, &view).unwrap(), 0.0);
        let bad = ItemMaskedView {
            candidates: vec![0, 2],
            ..view.clone()
        };
        assert!(loss_item_masked(&p, &cat, &bad).is_err());
        let wider = ItemMaskedView {
            candidates: vec![1, 0, 2],
            ..view
        };
        assert!(loss_item_masked(&p, &cat, &wider).unwrap() >= 0.0);
    }

    #[test]
    fn segment_view_requires_negatives() {
        let p = ParamSet::zeros(tiny_layout());
        let view = SegmentMaskedView {
            masked: Session::new(vec![0, 1]),
            positive: Session::new(vec![2, 2]),
            negatives: vec![],
        };
        assert!(matches!(
            loss_segment_masked(&p, &tiny_catalog(), &view),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn loss_weight_arithmetic() {
        let mut rng = RngStream::new(8, "init");
        let p = ParamSet::init(tiny_layout(), &mut rng);
        let cat = tiny_catalog();
        let views = SslViews {
            item: vec![ItemMaskedView {
                masked: Session::new(vec![0, 2]),
                positive: 1,
                candidates: vec![1, 0, 2],
            }],
            segment: vec![SegmentMaskedView {
                masked: Session::new(vec![0, 1, 1, 2]),
                positive: Session::new(vec![2, 0]),
                negatives: vec![Session::new(vec![1, 1])],
            }],
        };
        let im = loss_item_masked(&p, &cat, &views.item[0]).unwrap();
        let sm = loss_segment_masked(&p, &cat, &views.segment[0]).unwrap();
        let w = LossWeights {
            dssm: 0.0,
            item_mask: 1.0,
            segment_mask: 0.5,
        };
        assert!((loss_ssl(&p, &cat, &views, w).unwrap() - (im + 0.5 * sm)).abs() < 1e-12);
        let w0 = LossWeights { item_mask: 0.0, ..w };
        assert!((loss_ssl(&p, &cat, &views, w0).unwrap() - 0.5 * sm).abs() < 1e-12);

        let batch = vec![ex(0, 1, 1)];
        let d = loss_dssm(&p, &batch).unwrap();
        let joint = loss_joint(&p, &cat, &batch, &views, LossWeights { dssm: 1.0, ..w }).unwrap();
        assert!((joint - (d + im + 0.5 * sm)).abs() < 1e-12);
        let pure = loss_joint(
            &p,
            &cat,
            &batch,
            &SslViews::default(),
            LossWeights {
                dssm: 1.0,
                item_mask: 0.0,
                segment_mask: 0.0,
            },
        )
        .unwrap();
        assert_eq!(pure, d);
    }

    #[test]
    fn weight_scaling_scales_gradient() {
        let mut rng = RngStream::new(12, "init");
        let p = ParamSet::init(tiny_layout(), &mut rng);
        let cat = tiny_catalog();
        let views = SslViews {
            item: vec![ItemMaskedView {
                masked: Session::new(vec![0, 2]),
                positive: 1,
                candidates: vec![1, 0],
            }],
            segment: vec![],
        };
        let w = |s| LossWeights {
            dssm: 0.0,
            item_mask: s,
            segment_mask: 0.0,
        };
        let g1 = grad_joint(&p, &cat, &[], &views, w(1.0)).unwrap();
        let g3 = grad_joint(&p, &cat, &[], &views, w(3.0)).unwrap();
        let scale = g3.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0);
        for (a, b) in g1.flatten().iter().zip(g3.flatten()) {
            assert!((3.0 * a - b).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = RngStream::new(3, "init");
        let p = ParamSet::init(tiny_layout(), &mut rng);
        let mut buf = Vec::new();
        encode_checkpoint(&p, &mut buf).unwrap();
        let back = decode_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(decode_checkpoint(&mut &truncated[..]).is_err());
    }

    fn central_difference(p: &ParamSet, i: usize, f: &dyn Fn(&ParamSet) -> f64) -> f64 {
        let h = 1e-5;
        let mut plus = p.clone();
        plus.values_mut()[i] += h;
        let mut minus = p.clone();
        minus.values_mut()[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let layout = tiny_layout();
        let cat = tiny_catalog();
        let p = ParamSet::init(layout, &mut RngStream::new(21, "init"));
        let batch = vec![ex(0, 1, 1), ex(1, 2, 0), ex(1, 0, 1)];
        let views = SslViews {
            item: vec![ItemMaskedView {
                masked: Session::new(vec![0, 2, 1]),
                positive: 1,
                candidates: vec![1, 0, 2],
            }],
            segment: vec![SegmentMaskedView {
                masked: Session::new(vec![0, 1, 2]),
                positive: Session::new(vec![2, 0]),
                negatives: vec![Session::new(vec![1, 1]), Session::new(vec![0])],
            }],
        };
        let w = LossWeights {
            dssm: 0.7,
            item_mask: 1.3,
            segment_mask: 0.4,
        };
        let cases: Vec<(&str, ParamSet, Box<dyn Fn(&ParamSet) -> f64>)> = vec![
            ("dssm", grad_dssm(&p, &batch).unwrap(), Box::new(|q: &ParamSet| loss_dssm(q, &batch).unwrap())),
            (
                "item",
                grad_item_masked(&p, &cat, &views.item[0]).unwrap(),
                Box::new(|q: &ParamSet| loss_item_masked(q, &cat, &views.item[0]).unwrap()),
            ),
            (
                "segment",
                grad_segment_masked(&p, &cat, &views.segment[0]).unwrap(),
                Box::new(|q: &ParamSet| loss_segment_masked(q, &cat, &views.segment[0]).unwrap()),
            ),
            (
                "joint",
                grad_joint(&p, &cat, &batch, &views, w).unwrap(),
                Box::new(|q: &ParamSet| loss_joint(q, &cat, &batch, &views, w).unwrap()),
            ),
        ];
        for (name, grad, f) in &cases {
            for i in 0..p.len() {
                let numeric = central_difference(&p, i, f.as_ref());
                let analytic = grad.flatten()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    proptest! {
        #[test]
        fn unflatten_flatten_round_trip(seed in any::<u64>()) {
            let layout = tiny_layout();
            let mut rng = RngStream::new(seed, "prop");
            let values: Vec<f64> = (0..layout.total).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = ParamSet::unflatten(layout, values.clone()).unwrap();
            prop_assert_eq!(p.flatten(), values.as_slice());
        }

        #[test]
        fn forward_in_open_unit_interval(seed in any::<u64>(), user in 0u32..2, item in 0u32..3) {
            let mut rng = RngStream::new(seed, "prop");
            let p = ParamSet::init(tiny_layout(), &mut rng);
            let y = forward(&p, &ex(user, item, 1)).unwrap();
            prop_assert!(y > 0.0 && y < 1.0);
            prop_assert_eq!(y, forward(&p, &ex(user, item, 1)).unwrap());
        }
    }
}
