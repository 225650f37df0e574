//! Orchestration of stage-1 contrastive pretraining and stage-2
//! semi-supervised (or unsupervised) fine-tuning, with epoch histories,
//! exact-resume checkpoints, and CSV/JSON reporting.

use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::gfda::{make_view_set, Style};
use crate::netcore::checkpoint::{rng_from_arrays, rng_to_arrays, Checkpoint};
use crate::netcore::model::{
    bind_params, collect_grads, decoder_forward, decoder_graph, encoder_forward, encoder_graph,
    head_graph, init_decoder, init_encoder, init_pretrain_state, init_segmenter_state,
    cell_src_coords, HeadKind, ModelState, NetConfig, Tensor,
};
use crate::netcore::tape::{NodeId, Tape};
use crate::netcore::{adam_step, ema_update, save_checkpoint, AdamState};
use crate::objectives::{
    build_pair_set_coords, ccl_graph, consistency_graph, dfpm_basis, scl_graph, DfpmMode,
    DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, DEFAULT_LAMBDA3, DEFAULT_TAU, DEFAULT_TH,
};
use crate::synthdata::{AugmentRecord, Dataset, DatasetSplit, LabeledAmount, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Deterministic RNG stream ids per role.
const STREAM_PRETRAIN_DATA: u64 = 1;
const STREAM_PRETRAIN_AUG: u64 = 2;
const STREAM_FINETUNE_DATA: u64 = 3;
const STREAM_FINETUNE_UNLAB: u64 = 4;

/// Offset mixed into the run seed for the independently initialized teacher.
const TEACHER_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Ssda,
    Uda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherInit {
    /// Fresh random draw, independent of the student.
    Random,
    /// Comparison flag: start the teacher from the student's weights.
    CopyStudent,
}

/// Stage-1 component switches; the full method keeps SCL + CCL + DFPM on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub tcl: bool,
    pub scl: bool,
    pub ccl: bool,
    pub dfpm: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            tcl: false,
            scl: true,
            ccl: true,
            dfpm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub net: NetConfig,
    /// Labeled images per fine-tuning step. Stage 1 always takes one
    /// optimizer step per source/target pair (one view set per step).
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub th: f64,
    pub mode: Mode,
    pub labeled: LabeledAmount,
    pub switches: AblationSwitches,
    pub teacher_init: TeacherInit,
    pub dfpm_mode: DfpmMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            net: NetConfig::default(),
            batch_size: 4,
            lr: 1e-4,
            pretrain_epochs: 50,
            finetune_epochs: 100,
            sigma: crate::gfda::DEFAULT_SIGMA,
            tau: DEFAULT_TAU,
            alpha: 0.999,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            lambda3: DEFAULT_LAMBDA3,
            th: DEFAULT_TH,
            mode: Mode::Ssda,
            labeled: LabeledAmount::Fraction(0.5),
            switches: AblationSwitches::default(),
            teacher_init: TeacherInit::Random,
            dfpm_mode: DfpmMode::Propagated,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule (the desk-scale default is 50/100 epochs).
    pub fn with_full_schedule(mut self) -> Self {
        self.pretrain_epochs = 300;
        self.finetune_epochs = 500;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("sigma", self.sigma),
            ("tau", self.tau),
            ("th", self.th),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        let s = &self.switches;
        if !(s.tcl || s.scl || s.ccl || s.dfpm) {
            return Err(Error::config("every stage-1 objective is switched off"));
        }
        Ok(())
    }
}

/// One epoch's mean loss components. Stage-specific fields stay `None`
/// outside their stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_scl: Option<f64>,
    pub l_ccl: Option<f64>,
    pub l_con: Option<f64>,
    pub l_pre: Option<f64>,
    pub l_sup: Option<f64>,
    pub l_reg: Option<f64>,
    pub total: f64,
}

/// Fixed-schema CSV: epoch, l_scl, l_ccl, l_con, l_pre, l_sup, l_reg, total.
pub fn history_csv(records: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,l_scl,l_ccl,l_con,l_pre,l_sup,l_reg,total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            cell(r.l_scl),
            cell(r.l_ccl),
            cell(r.l_con),
            cell(r.l_pre),
            cell(r.l_sup),
            cell(r.l_reg),
            r.total
        ));
    }
    out
}

pub fn write_history_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(records)).map_err(|e| Error::io(path, e))
}

/// Serializable run summary; wall-clock is kept in memory only so that
/// identical config + seed produce byte-identical serialized reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub pretrain: Vec<EpochRecord>,
    pub finetune: Vec<EpochRecord>,
    pub eval_source: Option<MetricReport>,
    pub eval_target: Option<MetricReport>,
    #[serde(skip)]
    pub wall_clock_secs: Option<f64>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Stage 1: contrastive pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainStepLosses {
    pub scl: Option<f64>,
    pub ccl: Option<f64>,
    pub con: Option<f64>,
    pub tcl: Option<f64>,
    pub total: f64,
}

pub struct PretrainEngine {
    pub cfg: TrainConfig,
    /// Online parameters: encoder, both heads, propagation map.
    pub state: ModelState,
    /// Momentum encoder parameters (enc.* only).
    pub momentum: ModelState,
    pub opt: AdamState,
    pub step: u64,
    pub epochs_done: usize,
    data_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

impl PretrainEngine {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = init_pretrain_state(&cfg.net, cfg.seed);
        let momentum = state.subset("enc.");
        Ok(PretrainEngine {
            cfg: cfg.clone(),
            state,
            momentum,
            opt: AdamState::new(),
            step: 0,
            epochs_done: 0,
            data_rng: derived_rng(cfg.seed, STREAM_PRETRAIN_DATA),
            aug_rng: derived_rng(cfg.seed, STREAM_PRETRAIN_AUG),
        })
    }

    /// One optimizer step over a batch of source/target pairs.
    pub fn step_batch(&mut self, pairs: &[(&Sample, &Sample)]) -> Result<PretrainStepLosses> {
        if pairs.is_empty() {
            return Err(Error::config("empty pretraining batch"));
        }
        let cfg = self.cfg.clone();
        let sw = cfg.switches;
        let net = cfg.net;
        let size = net.image_size;
        let dim = net.feature_dim();
        let gs = net.grid_size();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &self.state);

        // Contrastive pools across the whole batch.
        let mut style_embs: Vec<NodeId> = Vec::new();
        let mut style_tags: Vec<Style> = Vec::new();
        let mut content_embs: Vec<NodeId> = Vec::new();
        let mut content_ids: Vec<u64> = Vec::new();
        let mut tcl_embs: Vec<NodeId> = Vec::new();
        let mut tcl_ids: Vec<u64> = Vec::new();
        let mut con_terms: Vec<NodeId> = Vec::new();

        for (src, tgt) in pairs {
            let view_seed = self.aug_rng.random::<u64>();
            let cons_seed_s = self.aug_rng.random::<u64>();
            let cons_seed_t = self.aug_rng.random::<u64>();
            let vs = make_view_set(
                &src.image,
                &tgt.image,
                (src.id, tgt.id),
                cfg.sigma,
                view_seed,
            )?;

            // Which views this configuration forwards through the encoder:
            // all eight for the disentangled losses, the four non-transfer
            // views for TCL, just the two augmented ones for consistency.
            let mut needed = vec![false; vs.views.len()];
            if sw.scl || sw.ccl {
                needed.iter_mut().for_each(|v| *v = true);
            }
            if sw.tcl {
                needed[0..4].iter_mut().for_each(|v| *v = true);
            }
            if sw.dfpm {
                needed[1] = true;
                needed[3] = true;
            }

            let mut feat_nodes: Vec<Option<NodeId>> = vec![None; vs.views.len()];
            let mut pooled_nodes: Vec<Option<NodeId>> = vec![None; vs.views.len()];
            for (i, view) in vs.views.iter().enumerate() {
                if !needed[i] {
                    continue;
                }
                let enc = encoder_graph(&mut tape, &bound, &net, &view.image)?;
                feat_nodes[i] = Some(enc.feat);
                pooled_nodes[i] = Some(enc.pooled);
            }

            if sw.scl || sw.ccl {
                for (i, view) in vs.views.iter().enumerate() {
                    let pooled = pooled_nodes[i].expect("all views forwarded");
                    if sw.scl {
                        let e = head_graph(&mut tape, &bound, &net, HeadKind::Style, pooled)?;
                        style_embs.push(e);
                        style_tags.push(view.style);
                    }
                    if sw.ccl {
                        let e = head_graph(&mut tape, &bound, &net, HeadKind::Content, pooled)?;
                        content_embs.push(e);
                        content_ids.push(view.instance_id);
                    }
                }
            }
            if sw.tcl {
                for (i, view) in vs.views.iter().enumerate().take(4) {
                    let pooled = pooled_nodes[i].expect("tcl views forwarded");
                    let e = head_graph(&mut tape, &bound, &net, HeadKind::Content, pooled)?;
                    tcl_embs.push(e);
                    tcl_ids.push(view.instance_id);
                }
            }

            if sw.dfpm {
                let k_node = bound.node("dfpm.k")?;
                for (view_idx, base, cons_seed) in [
                    (1usize, &src.image, cons_seed_s),
                    (3usize, &tgt.image, cons_seed_t),
                ] {
                    let online_record = vs.views[view_idx].augment;
                    let online_feat =
                        feat_nodes[view_idx].expect("consistency views forwarded");
                    let online_coords = cell_src_coords(&net, &online_record);

                    let mom_record = AugmentRecord::random(cons_seed, size);
                    let mom_image = mom_record.apply_to_image(base)?;
                    let (mom_map, _) =
                        encoder_forward(&self.momentum, &net, &mom_image, Some(&mom_record))?;
                    let basis = dfpm_basis(&mom_map, cfg.dfpm_mode);
                    let tilde = tape.linear_map_rows(k_node, basis, mom_map.cells(), dim)?;

                    let diag = mom_map.cell_diagonal(size);
                    let pair_set = build_pair_set_coords(
                        &mom_map.src_coords,
                        &online_coords,
                        diag,
                        cfg.th,
                    )?;
                    if pair_set.is_empty() {
                        return Err(Error::config(format!(
                            "threshold {} left the consistency pair set empty",
                            cfg.th
                        )));
                    }
                    let term =
                        consistency_graph(&mut tape, tilde, online_feat, dim, gs, gs, &pair_set)?;
                    con_terms.push(term);
                }
            }
        }

        let mut totals: Vec<(f64, NodeId)> = Vec::new();
        let mut losses = PretrainStepLosses::default();
        if sw.scl {
            let node = scl_graph(&mut tape, &style_embs, &style_tags, cfg.tau)?;
            losses.scl = Some(tape.scalar(node));
            totals.push((cfg.lambda1, node));
        }
        if sw.ccl {
            let (node, _skipped) = ccl_graph(&mut tape, &content_embs, &content_ids, cfg.tau)?;
            losses.ccl = Some(tape.scalar(node));
            totals.push((cfg.lambda2, node));
        }
        if sw.tcl {
            let (node, _skipped) = ccl_graph(&mut tape, &tcl_embs, &tcl_ids, cfg.tau)?;
            losses.tcl = Some(tape.scalar(node));
            totals.push((1.0, node));
        }
        if sw.dfpm {
            let w = 1.0 / con_terms.len() as f64;
            let node = tape.weighted_sum(con_terms.iter().map(|&t| (w, t)).collect())?;
            losses.con = Some(tape.scalar(node));
            totals.push((1.0, node));
        }
        let total_node = tape.weighted_sum(totals)?;
        losses.total = tape.scalar(total_node);

        let grads = tape.backward(total_node)?;
        let param_grads = collect_grads(&grads, &bound);
        adam_step(&mut self.state, &param_grads, &mut self.opt, cfg.lr)?;
        ema_update(&mut self.momentum, &self.state, cfg.alpha)?;
        self.step += 1;
        Ok(losses)
    }

    /// One pass over freshly shuffled source/target pairs.
    pub fn epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        let n = dataset.source.len().min(dataset.target.len());
        if n == 0 {
            return Err(Error::config("pretraining needs both domains populated"));
        }
        let src_order = shuffled_indices(dataset.source.len(), &mut self.data_rng);
        let tgt_order = shuffled_indices(dataset.target.len(), &mut self.data_rng);
        let pairs: Vec<(&Sample, &Sample)> = (0..n)
            .map(|i| (&dataset.source[src_order[i]], &dataset.target[tgt_order[i]]))
            .collect();

        // One view set (one source/target pair) per optimizer step; the
        // batch size governs how the epoch's pairs are drawn, not how
        // many share a gradient step.
        let mut sums = PretrainStepLosses::default();
        let mut counts = (0usize, 0usize, 0usize, 0usize);
        let mut steps = 0usize;
        for chunk in pairs.chunks(1) {
            let l = self.step_batch(chunk)?;
            if let Some(v) = l.scl {
                sums.scl = Some(sums.scl.unwrap_or(0.0) + v);
                counts.0 += 1;
            }
            if let Some(v) = l.ccl {
                sums.ccl = Some(sums.ccl.unwrap_or(0.0) + v);
                counts.1 += 1;
            }
            if let Some(v) = l.con {
                sums.con = Some(sums.con.unwrap_or(0.0) + v);
                counts.2 += 1;
            }
            if let Some(v) = l.tcl {
                sums.tcl = Some(sums.tcl.unwrap_or(0.0) + v);
                counts.3 += 1;
            }
            sums.total += l.total;
            steps += 1;
        }
        self.epochs_done += 1;
        let avg = |sum: Option<f64>, c: usize| sum.map(|s| s / c as f64);
        let total = sums.total / steps as f64;
        Ok(EpochRecord {
            epoch: self.epochs_done,
            l_scl: avg(sums.scl, counts.0),
            l_ccl: avg(sums.ccl, counts.1),
            l_con: avg(sums.con, counts.2),
            l_pre: Some(total),
            l_sup: None,
            l_reg: None,
            total,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        pack_state(&mut ckpt, "model", &self.state);
        pack_state(&mut ckpt, "aux", &self.momentum);
        pack_adam(&mut ckpt, &self.opt);
        for (name, t) in rng_to_arrays("rng.data", &self.data_rng) {
            ckpt.insert(name, t);
        }
        for (name, t) in rng_to_arrays("rng.aug", &self.aug_rng) {
            ckpt.insert(name, t);
        }
        ckpt.insert_scalar("meta.kind", 1.0);
        ckpt.insert_scalar("meta.step", self.step as f64);
        ckpt.insert_scalar("meta.epochs_done", self.epochs_done as f64);
        ckpt
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.scalar("meta.kind")? != 1.0 {
            return Err(Error::Checkpoint(
                "checkpoint does not hold a pretraining state".into(),
            ));
        }
        let reference = init_pretrain_state(&cfg.net, cfg.seed);
        let state = unpack_state(ckpt, "model", &reference)?;
        let momentum = unpack_state(ckpt, "aux", &reference.subset("enc."))?;
        let opt = unpack_adam(ckpt)?;
        Ok(PretrainEngine {
            cfg: cfg.clone(),
            state,
            momentum,
            opt,
            step: ckpt.scalar("meta.step")? as u64,
            epochs_done: ckpt.scalar("meta.epochs_done")? as usize,
            data_rng: rng_from_arrays("rng.data", ckpt)?,
            aug_rng: rng_from_arrays("rng.aug", ckpt)?,
        })
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: ModelState,
    pub momentum: ModelState,
    pub history: Vec<EpochRecord>,
}

/// Run the full stage-1 schedule.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset) -> Result<PretrainOutcome> {
    pretrain_with_checkpoints(cfg, dataset, None)
}

/// Same, saving a checkpoint after every epoch so an abort (for example a
/// non-finite loss) leaves the last epoch's state on disk.
pub fn pretrain_with_checkpoints(
    cfg: &TrainConfig,
    dataset: &Dataset,
    ckpt_path: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut engine = PretrainEngine::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        let record = engine.epoch(dataset)?;
        history.push(record);
        if let Some(path) = ckpt_path {
            save_checkpoint(path, &engine.to_checkpoint())?;
        }
    }
    Ok(PretrainOutcome {
        state: engine.state,
        momentum: engine.momentum,
        history,
    })
}

// ---------------------------------------------------------------------------
// Stage 2: semi-supervised fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EncoderInit<'a> {
    Pretrained(&'a ModelState),
    Fresh,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FinetuneStepLosses {
    pub sup: f64,
    pub reg: Option<f64>,
    pub total: f64,
}

pub struct FinetuneEngine {
    pub cfg: TrainConfig,
    /// Student encoder + decoder.
    pub student: ModelState,
    /// Teacher encoder + decoder when the regularizer is active.
    pub teacher: Option<ModelState>,
    pub opt: AdamState,
    pub step: u64,
    pub epochs_done: usize,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
    data_rng: ChaCha8Rng,
    unlab_rng: ChaCha8Rng,
    unlab_order: Vec<usize>,
    unlab_pos: usize,
}

impl FinetuneEngine {
    pub fn new(cfg: &TrainConfig, init: EncoderInit, split: &DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        let (labeled, unlabeled): (Vec<Sample>, Vec<Sample>) = match cfg.mode {
            Mode::Ssda => {
                if split.t1.is_empty() {
                    return Err(Error::config(
                        "SSDA fine-tuning needs labeled target samples (T1)",
                    ));
                }
                (
                    split.source.iter().chain(&split.t1).cloned().collect(),
                    split.t2.clone(),
                )
            }
            Mode::Uda => (
                split.source.clone(),
                split.t1.iter().chain(&split.t2).cloned().collect(),
            ),
        };
        Self::with_pools(cfg, init, labeled, unlabeled)
    }

    /// Plain supervised construction: labeled pool only, no regularizer.
    /// The source-only baseline is this with a fresh encoder.
    pub fn supervised(
        cfg: &TrainConfig,
        init: EncoderInit,
        labeled: Vec<Sample>,
    ) -> Result<Self> {
        Self::with_pools(cfg, init, labeled, Vec::new())
    }

    fn with_pools(
        cfg: &TrainConfig,
        init: EncoderInit,
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
    ) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::config("fine-tuning needs labeled samples"));
        }
        if labeled.iter().any(|s| s.train_mask().is_none()) {
            return Err(Error::config(
                "a label-withheld sample reached the supervised pool",
            ));
        }
        let mut student = match init {
            EncoderInit::Pretrained(state) => {
                let enc = state.subset("enc.");
                if enc.param_count() == 0 {
                    return Err(Error::config("pretrained state has no encoder parameters"));
                }
                enc
            }
            EncoderInit::Fresh => init_encoder(&cfg.net, cfg.seed),
        };
        student.merge(init_decoder(&cfg.net, cfg.seed));

        let use_reg = cfg.lambda3 > 0.0 && !unlabeled.is_empty();
        let mut unlab_rng = derived_rng(cfg.seed, STREAM_FINETUNE_UNLAB);
        let (teacher, unlab_order) = if use_reg {
            let teacher = match cfg.teacher_init {
                TeacherInit::Random => init_segmenter_state(
                    &cfg.net,
                    cfg.seed.wrapping_add(TEACHER_SEED_OFFSET),
                ),
                TeacherInit::CopyStudent => student.clone(),
            };
            let order = shuffled_indices(unlabeled.len(), &mut unlab_rng);
            (Some(teacher), order)
        } else {
            (None, Vec::new())
        };

        Ok(FinetuneEngine {
            cfg: cfg.clone(),
            student,
            teacher,
            opt: AdamState::new(),
            step: 0,
            epochs_done: 0,
            labeled,
            unlabeled,
            data_rng: derived_rng(cfg.seed, STREAM_FINETUNE_DATA),
            unlab_rng,
            unlab_order,
            unlab_pos: 0,
        })
    }

    pub fn uses_regularizer(&self) -> bool {
        self.teacher.is_some()
    }

    fn next_unlabeled(&mut self) -> usize {
        if self.unlab_pos >= self.unlab_order.len() {
            self.unlab_order = shuffled_indices(self.unlabeled.len(), &mut self.unlab_rng);
            self.unlab_pos = 0;
        }
        let idx = self.unlab_order[self.unlab_pos];
        self.unlab_pos += 1;
        idx
    }

    pub fn step_batch(&mut self, labeled_idx: &[usize]) -> Result<FinetuneStepLosses> {
        if labeled_idx.is_empty() {
            return Err(Error::config("empty fine-tuning batch"));
        }
        let cfg = self.cfg.clone();
        let net = cfg.net;
        let npix = net.image_size * net.image_size;

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &self.student);

        let mut sup_terms = Vec::with_capacity(labeled_idx.len());
        for &i in labeled_idx {
            let sample = &self.labeled[i];
            let mask = sample
                .train_mask()
                .ok_or_else(|| Error::config("unlabeled sample in supervised batch"))?;
            let enc = encoder_graph(&mut tape, &bound, &net, &sample.image)?;
            let logits = decoder_graph(&mut tape, &bound, &net, enc.feat)?;
            let ce = tape.ce_hard(logits, net.classes, npix, mask.labels().to_vec())?;
            sup_terms.push(ce);
        }
        let w_sup = 1.0 / sup_terms.len() as f64;
        let sup_node = tape.weighted_sum(sup_terms.iter().map(|&t| (w_sup, t)).collect())?;

        let mut losses = FinetuneStepLosses {
            sup: tape.scalar(sup_node),
            ..Default::default()
        };
        let mut totals = vec![(1.0, sup_node)];

        if self.teacher.is_some() {
            let batch: Vec<usize> = (0..labeled_idx.len().min(self.cfg.batch_size).max(1))
                .map(|_| self.next_unlabeled())
                .collect();
            let teacher = self.teacher.as_ref().expect("regularizer active");
            let mut reg_terms = Vec::with_capacity(batch.len());
            for idx in batch {
                let sample = &self.unlabeled[idx];
                let enc = encoder_graph(&mut tape, &bound, &net, &sample.image)?;
                let logits = decoder_graph(&mut tape, &bound, &net, enc.feat)?;
                let (t_feat, _) = encoder_forward(teacher, &net, &sample.image, None)?;
                let t_logits = decoder_forward(teacher, &net, &t_feat)?;
                let ce = tape.ce_soft(logits, net.classes, npix, t_logits.softmax())?;
                reg_terms.push(ce);
            }
            let w_reg = 1.0 / reg_terms.len() as f64;
            let reg_node = tape.weighted_sum(reg_terms.iter().map(|&t| (w_reg, t)).collect())?;
            losses.reg = Some(tape.scalar(reg_node));
            totals.push((cfg.lambda3, reg_node));
        }

        let total_node = tape.weighted_sum(totals)?;
        losses.total = tape.scalar(total_node);

        let grads = tape.backward(total_node)?;
        let param_grads = collect_grads(&grads, &bound);
        adam_step(&mut self.student, &param_grads, &mut self.opt, cfg.lr)?;
        if let Some(teacher) = self.teacher.as_mut() {
            ema_update(teacher, &self.student, cfg.alpha)?;
        }
        self.step += 1;
        Ok(losses)
    }

    /// One pass over the shuffled labeled pool.
    pub fn epoch(&mut self) -> Result<EpochRecord> {
        let order = shuffled_indices(self.labeled.len(), &mut self.data_rng);
        let mut sup_sum = 0.0;
        let mut reg_sum: Option<f64> = None;
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        let batch = self.cfg.batch_size;
        for chunk in order.chunks(batch).map(|c| c.to_vec()) {
            let l = self.step_batch(&chunk)?;
            sup_sum += l.sup;
            if let Some(r) = l.reg {
                reg_sum = Some(reg_sum.unwrap_or(0.0) + r);
            }
            total_sum += l.total;
            steps += 1;
        }
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch: self.epochs_done,
            l_scl: None,
            l_ccl: None,
            l_con: None,
            l_pre: None,
            l_sup: Some(sup_sum / steps as f64),
            l_reg: reg_sum.map(|r| r / steps as f64),
            total: total_sum / steps as f64,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        pack_state(&mut ckpt, "model", &self.student);
        if let Some(t) = &self.teacher {
            pack_state(&mut ckpt, "aux", t);
        }
        pack_adam(&mut ckpt, &self.opt);
        for (name, t) in rng_to_arrays("rng.data", &self.data_rng) {
            ckpt.insert(name, t);
        }
        for (name, t) in rng_to_arrays("rng.unlab", &self.unlab_rng) {
            ckpt.insert(name, t);
        }
        ckpt.insert(
            "order.unlab",
            Tensor {
                shape: vec![self.unlab_order.len()],
                data: self.unlab_order.iter().map(|&i| i as f64).collect(),
            },
        );
        ckpt.insert_scalar("meta.kind", 2.0);
        ckpt.insert_scalar("meta.step", self.step as f64);
        ckpt.insert_scalar("meta.epochs_done", self.epochs_done as f64);
        ckpt.insert_scalar("meta.unlab_pos", self.unlab_pos as f64);
        ckpt.insert_scalar("meta.has_teacher", if self.teacher.is_some() { 1.0 } else { 0.0 });
        ckpt
    }

    /// Rebuild from a checkpoint; `split` must be the same dataset split
    /// the saved run was using.
    pub fn from_checkpoint(
        cfg: &TrainConfig,
        ckpt: &Checkpoint,
        split: &DatasetSplit,
    ) -> Result<Self> {
        if ckpt.scalar("meta.kind")? != 2.0 {
            return Err(Error::Checkpoint(
                "checkpoint does not hold a fine-tuning state".into(),
            ));
        }
        let mut engine = Self::new(cfg, EncoderInit::Fresh, split)?;
        let reference = init_segmenter_state(&cfg.net, cfg.seed);
        engine.student = unpack_state(ckpt, "model", &reference)?;
        let has_teacher = ckpt.scalar("meta.has_teacher")? == 1.0;
        engine.teacher = if has_teacher {
            Some(unpack_state(ckpt, "aux", &reference)?)
        } else {
            None
        };
        engine.opt = unpack_adam(ckpt)?;
        engine.step = ckpt.scalar("meta.step")? as u64;
        engine.epochs_done = ckpt.scalar("meta.epochs_done")? as usize;
        engine.data_rng = rng_from_arrays("rng.data", ckpt)?;
        engine.unlab_rng = rng_from_arrays("rng.unlab", ckpt)?;
        engine.unlab_order = ckpt
            .get("order.unlab")?
            .data
            .iter()
            .map(|&v| v as usize)
            .collect();
        engine.unlab_pos = ckpt.scalar("meta.unlab_pos")? as usize;
        Ok(engine)
    }
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub student: ModelState,
    pub teacher: Option<ModelState>,
    pub history: Vec<EpochRecord>,
}

/// Stage 2 on a pretrained encoder. The student is the inference network.
pub fn finetune(
    cfg: &TrainConfig,
    pretrained: &ModelState,
    split: &DatasetSplit,
) -> Result<FinetuneOutcome> {
    finetune_with_checkpoints(cfg, pretrained, split, None)
}

pub fn finetune_with_checkpoints(
    cfg: &TrainConfig,
    pretrained: &ModelState,
    split: &DatasetSplit,
    ckpt_path: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let mut engine = FinetuneEngine::new(cfg, EncoderInit::Pretrained(pretrained), split)?;
    run_finetune_schedule(&mut engine, cfg.finetune_epochs, ckpt_path)
}

/// No-adaptation baseline: fresh network, supervised on source labels only.
pub fn train_source_only(cfg: &TrainConfig, split: &DatasetSplit) -> Result<FinetuneOutcome> {
    let mut engine = FinetuneEngine::supervised(cfg, EncoderInit::Fresh, split.source.clone())?;
    run_finetune_schedule(&mut engine, cfg.finetune_epochs, None)
}

fn run_finetune_schedule(
    engine: &mut FinetuneEngine,
    epochs: usize,
    ckpt_path: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(engine.epoch()?);
        if let Some(path) = ckpt_path {
            save_checkpoint(path, &engine.to_checkpoint())?;
        }
    }
    Ok(FinetuneOutcome {
        student: engine.student.clone(),
        teacher: engine.teacher.clone(),
        history,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint packing helpers
// ---------------------------------------------------------------------------

fn pack_state(ckpt: &mut Checkpoint, prefix: &str, state: &ModelState) {
    for (name, tensor) in state.iter() {
        ckpt.insert(format!("{prefix}.{name}"), tensor.clone());
    }
}

fn unpack_state(ckpt: &Checkpoint, prefix: &str, reference: &ModelState) -> Result<ModelState> {
    let mut out = ModelState::new();
    for (name, expect) in reference.iter() {
        let stored = ckpt.get(&format!("{prefix}.{name}"))?;
        if stored.shape != expect.shape {
            return Err(Error::Checkpoint(format!(
                "array {prefix}.{name} has shape {:?}, expected {:?}",
                stored.shape, expect.shape
            )));
        }
        out.insert(name.clone(), stored.clone());
    }
    Ok(out)
}

fn pack_adam(ckpt: &mut Checkpoint, opt: &AdamState) {
    ckpt.insert_scalar("adam.t", opt.t as f64);
    for (name, m) in &opt.m {
        ckpt.insert(
            format!("adam.m.{name}"),
            Tensor {
                shape: vec![m.len()],
                data: m.clone(),
            },
        );
    }
    for (name, v) in &opt.v {
        ckpt.insert(
            format!("adam.v.{name}"),
            Tensor {
                shape: vec![v.len()],
                data: v.clone(),
            },
        );
    }
}

fn unpack_adam(ckpt: &Checkpoint) -> Result<AdamState> {
    let mut opt = AdamState::new();
    opt.t = ckpt.scalar("adam.t")? as u64;
    for (name, tensor) in &ckpt.arrays {
        if let Some(param) = name.strip_prefix("adam.m.") {
            opt.m.insert(param.to_string(), tensor.data.clone());
        } else if let Some(param) = name.strip_prefix("adam.v.") {
            opt.v.insert(param.to_string(), tensor.data.clone());
        }
    }
    Ok(opt)
}

/// Gradient map type alias used across the trainer.
pub type GradMap = BTreeMap<String, Vec<f64>>;
