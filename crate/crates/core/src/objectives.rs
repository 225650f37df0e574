//! Loss functions: style/content contrastive losses over embedding
//! batches, dense feature propagation with its pairwise consistency term,
//! the combined pretraining objective, and the supervised/regularization
//! fine-tuning losses.
//!
//! Every loss exists twice: a tape graph builder used by training, and a
//! value-level wrapper that runs the same graph on a scratch tape. The
//! independent brute-force oracles live in test code only.

use crate::error::{Error, Result};
use crate::gfda::Style;
use crate::netcore::model::{Embedding, FeatureMap, Logits, Tensor};
use crate::netcore::tape::{NodeId, Tape};
use crate::synthdata::SegMask;
use std::collections::BTreeMap;

/// Temperature default, shared with the trainer config.
pub const DEFAULT_TAU: f64 = 0.07;
/// Pair-distance threshold default, in feature-cell diagonals.
pub const DEFAULT_TH: f64 = 0.6;
/// Stage-1 loss weights.
pub const DEFAULT_LAMBDA1: f64 = 0.75;
pub const DEFAULT_LAMBDA2: f64 = 0.75;
/// Stage-2 regularization weight.
pub const DEFAULT_LAMBDA3: f64 = 0.5;

/// Embeddings with their style and instance tags, the unit both
/// contrastive losses consume.
#[derive(Debug, Clone)]
pub struct ContrastBatch {
    pub embeddings: Vec<Embedding>,
    pub styles: Vec<Style>,
    pub instance_ids: Vec<u64>,
    pub tau: f64,
}

impl ContrastBatch {
    pub fn new(
        embeddings: Vec<Embedding>,
        styles: Vec<Style>,
        instance_ids: Vec<u64>,
        tau: f64,
    ) -> Result<Self> {
        if embeddings.len() != styles.len() || embeddings.len() != instance_ids.len() {
            return Err(Error::dimension("batch tag lengths differ"));
        }
        if tau <= 0.0 {
            return Err(Error::domain("temperature must be positive"));
        }
        Ok(ContrastBatch {
            embeddings,
            styles,
            instance_ids,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

fn check_nonzero(embeddings: &[Embedding]) -> Result<()> {
    for (i, e) in embeddings.iter().enumerate() {
        if e.values.iter().all(|&v| v == 0.0) {
            return Err(Error::domain(format!("embedding {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cached pairwise cosine nodes over a set of embedding nodes.
struct SimCache {
    nodes: BTreeMap<(usize, usize), NodeId>,
}

impl SimCache {
    fn new() -> Self {
        SimCache {
            nodes: BTreeMap::new(),
        }
    }

    fn get(&mut self, tape: &mut Tape, embs: &[NodeId], i: usize, j: usize) -> Result<NodeId> {
        let key = if i <= j { (i, j) } else { (j, i) };
        if let Some(&id) = self.nodes.get(&key) {
            return Ok(id);
        }
        let id = tape.cosine(embs[key.0], embs[key.1])?;
        self.nodes.insert(key, id);
        Ok(id)
    }
}

/// One InfoNCE anchor term on the tape: mean over positives of
/// -log( e^{s+/tau} / (e^{s+/tau} + sum_negs e^{s-/tau}) ).
fn nce_anchor(
    tape: &mut Tape,
    cache: &mut SimCache,
    embs: &[NodeId],
    anchor: usize,
    positives: &[usize],
    negatives: &[usize],
    tau: f64,
) -> Result<NodeId> {
    let neg_sims: Vec<NodeId> = negatives
        .iter()
        .map(|&j| cache.get(tape, embs, anchor, j))
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(positives.len());
    let w = 1.0 / positives.len() as f64;
    for &p in positives {
        let pos_sim = cache.get(tape, embs, anchor, p)?;
        let term = tape.nce_term(pos_sim, neg_sims.clone(), tau)?;
        terms.push((w, term));
    }
    tape.weighted_sum(terms)
}

/// Style contrastive loss on the tape: every element anchors once;
/// positives share its style tag, negatives carry the other one. Sum over
/// anchors, mean within each anchor's positive set.
pub fn scl_graph(
    tape: &mut Tape,
    embs: &[NodeId],
    styles: &[Style],
    tau: f64,
) -> Result<NodeId> {
    let n = embs.len();
    if styles.len() != n {
        return Err(Error::dimension("style tags do not match embeddings"));
    }
    let a: Vec<usize> = (0..n).filter(|&i| styles[i] == Style::A).collect();
    let b: Vec<usize> = (0..n).filter(|&i| styles[i] == Style::B).collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("style loss needs both styles present"));
    }
    let mut cache = SimCache::new();
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let (same, other) = if styles[i] == Style::A {
            (&a, &b)
        } else {
            (&b, &a)
        };
        let positives: Vec<usize> = same.iter().copied().filter(|&j| j != i).collect();
        if positives.is_empty() {
            return Err(Error::domain(format!(
                "anchor {i} has no same-style positive"
            )));
        }
        let term = nce_anchor(tape, &mut cache, embs, i, &positives, other, tau)?;
        anchors.push((1.0, term));
    }
    tape.weighted_sum(anchors)
}

/// Content contrastive loss on the tape: positives share the anchor's
/// instance id regardless of style, negatives are all other instances.
/// Anchors without any positive are skipped and counted.
pub fn ccl_graph(
    tape: &mut Tape,
    embs: &[NodeId],
    instance_ids: &[u64],
    tau: f64,
) -> Result<(NodeId, usize)> {
    let n = embs.len();
    if instance_ids.len() != n {
        return Err(Error::dimension("instance ids do not match embeddings"));
    }
    let distinct: std::collections::BTreeSet<u64> = instance_ids.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::domain("content loss needs at least two instances"));
    }
    let mut cache = SimCache::new();
    let mut anchors = Vec::new();
    let mut skipped = 0usize;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && instance_ids[j] == instance_ids[i])
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let negatives: Vec<usize> = (0..n)
            .filter(|&j| instance_ids[j] != instance_ids[i])
            .collect();
        let term = nce_anchor(tape, &mut cache, embs, i, &positives, &negatives, tau)?;
        anchors.push((1.0, term));
    }
    if anchors.is_empty() {
        return Err(Error::domain("every content anchor was a singleton"));
    }
    let node = tape.weighted_sum(anchors)?;
    Ok((node, skipped))
}

/// Single-anchor InfoNCE over explicit positive/negative embedding lists.
pub fn info_nce(
    anchor: &Embedding,
    positives: &[Embedding],
    negatives: &[Embedding],
    tau: f64,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::domain(
            "InfoNCE needs at least one positive and one negative",
        ));
    }
    if tau <= 0.0 {
        return Err(Error::domain("temperature must be positive"));
    }
    check_nonzero(std::slice::from_ref(anchor))?;
    check_nonzero(positives)?;
    check_nonzero(negatives)?;
    let mut tape = Tape::new();
    let a = tape.leaf(anchor.values.clone());
    let neg_sims: Vec<NodeId> = negatives
        .iter()
        .map(|e| {
            let n = tape.leaf(e.values.clone());
            tape.cosine(a, n)
        })
        .collect::<Result<_>>()?;
    let w = 1.0 / positives.len() as f64;
    let mut terms = Vec::new();
    for p in positives {
        let pn = tape.leaf(p.values.clone());
        let ps = tape.cosine(a, pn)?;
        let t = tape.nce_term(ps, neg_sims.clone(), tau)?;
        terms.push((w, t));
    }
    let root = tape.weighted_sum(terms)?;
    Ok(tape.scalar(root))
}

/// Value-level style contrastive loss.
pub fn scl_loss(batch: &ContrastBatch) -> Result<f64> {
    check_nonzero(&batch.embeddings)?;
    let mut tape = Tape::new();
    let embs: Vec<NodeId> = batch
        .embeddings
        .iter()
        .map(|e| tape.leaf(e.values.clone()))
        .collect();
    let root = scl_graph(&mut tape, &embs, &batch.styles, batch.tau)?;
    Ok(tape.scalar(root))
}

/// Value-level content contrastive loss; returns the loss and the number
/// of singleton anchors that were skipped.
pub fn ccl_loss(batch: &ContrastBatch) -> Result<(f64, usize)> {
    check_nonzero(&batch.embeddings)?;
    let mut tape = Tape::new();
    let embs: Vec<NodeId> = batch
        .embeddings
        .iter()
        .map(|e| tape.leaf(e.values.clone()))
        .collect();
    let (root, skipped) = ccl_graph(&mut tape, &embs, &batch.instance_ids, batch.tau)?;
    Ok((tape.scalar(root), skipped))
}

/// Which operand the propagation map applies to. `Propagated` follows the
/// prose (transform the features being gathered); `Anchor` reproduces the
/// printed formula (transform the anchor's own feature) for comparison.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize,
)]
pub enum DfpmMode {
    #[default]
    Propagated,
    Anchor,
}

/// Constant propagation basis rows from a momentum-encoder feature map:
/// `Propagated` gives g_m = (1/N) sum_n cos(f_m, f_n) f_n, so that the
/// propagated map is K g_m; `Anchor` gives ((1/N) sum_n cos(f_m, f_n)) f_m.
pub fn dfpm_basis(f: &FeatureMap, mode: DfpmMode) -> Vec<f64> {
    let n = f.cells();
    let dim = f.dim;
    let inv = 1.0 / n as f64;
    let mut basis = vec![0.0; n * dim];
    for m in 0..n {
        let fm = f.cell(m);
        match mode {
            DfpmMode::Propagated => {
                let row = &mut basis[m * dim..(m + 1) * dim];
                for nn in 0..n {
                    let c = crate::netcore::tape::cosine_value(fm, f.cell(nn));
                    if c == 0.0 {
                        continue;
                    }
                    for (r, &v) in row.iter_mut().zip(f.cell(nn)) {
                        *r += inv * c * v;
                    }
                }
            }
            DfpmMode::Anchor => {
                let mut scale = 0.0;
                for nn in 0..n {
                    scale += crate::netcore::tape::cosine_value(fm, f.cell(nn));
                }
                scale *= inv;
                for (r, &v) in basis[m * dim..(m + 1) * dim].iter_mut().zip(fm) {
                    *r = scale * v;
                }
            }
        }
    }
    basis
}

/// Similarity-weighted smoothing of a momentum-encoder feature map through
/// the learned linear map `k` (row-major dim x dim).
pub fn dfpm_propagate(f: &FeatureMap, k: &Tensor, mode: DfpmMode) -> Result<FeatureMap> {
    if k.shape != vec![f.dim, f.dim] {
        return Err(Error::dimension(format!(
            "propagation map must be {0}x{0}",
            f.dim
        )));
    }
    let mut tape = Tape::new();
    let kn = tape.leaf(k.data.clone());
    let basis = dfpm_basis(f, mode);
    let out = tape.linear_map_rows(kn, basis, f.cells(), f.dim)?;
    Ok(FeatureMap {
        grid_h: f.grid_h,
        grid_w: f.grid_w,
        dim: f.dim,
        features: tape.value(out).to_vec(),
        src_coords: f.src_coords.clone(),
    })
}

/// Grid-cell pairs whose original-image distance, in feature-cell
/// diagonals, stays below the threshold.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub th: f64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Enumerate retained pairs between two views' coordinate sets. Cells
/// without a source coordinate (zero-padded territory) never pair.
pub fn build_pair_set(
    view_a: &FeatureMap,
    view_b: &FeatureMap,
    image_size: usize,
    th: f64,
) -> Result<PairSet> {
    if view_a.cells() != view_b.cells() || view_a.dim != view_b.dim {
        return Err(Error::dimension("feature maps differ in geometry"));
    }
    build_pair_set_coords(
        &view_a.src_coords,
        &view_b.src_coords,
        view_a.cell_diagonal(image_size),
        th,
    )
}

/// Coordinate-level pair enumeration: retain (m, n) where the Euclidean
/// distance in original-image pixels, divided by the feature-cell
/// diagonal, stays below the threshold.
pub fn build_pair_set_coords(
    coords_a: &[Option<(f64, f64)>],
    coords_b: &[Option<(f64, f64)>],
    cell_diagonal: f64,
    th: f64,
) -> Result<PairSet> {
    if th <= 0.0 {
        return Err(Error::domain("pair threshold must be positive"));
    }
    if cell_diagonal <= 0.0 {
        return Err(Error::domain("cell diagonal must be positive"));
    }
    let mut pairs = Vec::new();
    for (m, ca) in coords_a.iter().enumerate() {
        let Some((ay, ax)) = ca else { continue };
        for (n, cb) in coords_b.iter().enumerate() {
            let Some((by, bx)) = cb else { continue };
            let d = ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt() / cell_diagonal;
            if d < th {
                pairs.push((m, n));
            }
        }
    }
    Ok(PairSet { pairs, th })
}

/// Consistency loss on the tape. `f_tilde` is the propagated
/// momentum-encoder map as a [cells x dim] node; `f_feat` is the online
/// encoder's conv activation node ([dim, gh, gw]).
pub fn consistency_graph(
    tape: &mut Tape,
    f_tilde: NodeId,
    f_feat: NodeId,
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    pairs: &PairSet,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::domain(
            "empty pair set: augmentations share no overlap",
        ));
    }
    let mut tilde_rows: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut feat_cells: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut terms = Vec::with_capacity(pairs.len() * 2);
    let w = -1.0 / pairs.len() as f64;
    for &(m, n) in &pairs.pairs {
        let tm = match tilde_rows.get(&m) {
            Some(&id) => id,
            None => {
                let id = tape.row(f_tilde, m, dim)?;
                tilde_rows.insert(m, id);
                id
            }
        };
        let tn = match tilde_rows.get(&n) {
            Some(&id) => id,
            None => {
                let id = tape.row(f_tilde, n, dim)?;
                tilde_rows.insert(n, id);
                id
            }
        };
        let mut feat_cell = |tape: &mut Tape, idx: usize| -> Result<NodeId> {
            if let Some(&id) = feat_cells.get(&idx) {
                return Ok(id);
            }
            let id = tape.cell_vec(f_feat, dim, grid_h, grid_w, idx / grid_w, idx % grid_w)?;
            feat_cells.insert(idx, id);
            Ok(id)
        };
        let fn_ = feat_cell(tape, n)?;
        let fm = feat_cell(tape, m)?;
        let c1 = tape.cosine(tm, fn_)?;
        let c2 = tape.cosine(fm, tn)?;
        terms.push((w, c1));
        terms.push((w, c2));
    }
    tape.weighted_sum(terms)
}

/// Value-level consistency loss between a propagated momentum map and a
/// regular online map over a retained pair set. Result lies in [-2, 2].
pub fn consistency_loss(f_tilde: &FeatureMap, f: &FeatureMap, pairs: &PairSet) -> Result<f64> {
    if f_tilde.cells() != f.cells() || f_tilde.dim != f.dim {
        return Err(Error::dimension("feature maps differ in geometry"));
    }
    let mut tape = Tape::new();
    let tilde = tape.leaf(f_tilde.features.clone());
    let feat = tape.leaf(crate::netcore::model::rows_to_grid(
        &f.features,
        f.dim,
        f.grid_h,
        f.grid_w,
    ));
    let root = consistency_graph(&mut tape, tilde, feat, f.dim, f.grid_h, f.grid_w, pairs)?;
    Ok(tape.scalar(root))
}

/// Stage-1 objective: lambda1 * SCL + lambda2 * CCL + consistency.
pub fn pretrain_loss(scl: f64, ccl: f64, con: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * scl + lambda2 * ccl + con
}

/// Mean per-pixel softmax cross-entropy against integer labels.
pub fn supervised_loss(logits: &Logits, mask: &SegMask) -> Result<f64> {
    if logits.height != mask.height() || logits.width != mask.width() {
        return Err(Error::dimension("logit and mask shapes differ"));
    }
    let mut tape = Tape::new();
    let lg = tape.leaf(logits.data.clone());
    let npix = logits.height * logits.width;
    let root = tape.ce_hard(lg, logits.classes, npix, mask.labels().to_vec())?;
    Ok(tape.scalar(root))
}

/// Mean per-pixel cross-entropy of the student softmax against the teacher
/// softmax used as a constant soft target.
pub fn reg_loss(student: &Logits, teacher: &Logits) -> Result<f64> {
    if student.classes != teacher.classes
        || student.height != teacher.height
        || student.width != teacher.width
    {
        return Err(Error::dimension("student and teacher logit shapes differ"));
    }
    let mut tape = Tape::new();
    let lg = tape.leaf(student.data.clone());
    let npix = student.height * student.width;
    let root = tape.ce_soft(lg, student.classes, npix, teacher.softmax())?;
    Ok(tape.scalar(root))
}

/// Stage-2 objective: supervised + lambda3 * regularization.
pub fn finetune_loss(l_sup: f64, l_reg: f64, lambda3: f64) -> f64 {
    l_sup + lambda3 * l_reg
}
