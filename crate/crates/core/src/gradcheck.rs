//! Central-difference validation of every loss gradient on a reduced
//! model, exercised by tests and the `gradcheck` CLI command.

use crate::error::{Error, Result};
use crate::gfda::{make_view_set, Style, ViewSet};
use crate::image::Image;
use crate::netcore::model::{
    bind_params, collect_grads, decoder_forward, decoder_graph, encoder_forward, encoder_graph,
    head_graph, init_decoder, init_encoder, init_heads, init_dfpm, init_segmenter_state,
    cell_src_coords, HeadKind, Logits, ModelState, NetConfig,
};
use crate::netcore::tape::{NodeId, Tape};
use crate::objectives::{
    build_pair_set_coords, ccl_graph, consistency_graph, dfpm_basis, scl_graph, DfpmMode,
    PairSet, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, DEFAULT_LAMBDA3, DEFAULT_TH,
};
use crate::synthdata::{AugmentRecord, SegMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of checking one loss.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked_params: usize,
    pub pass: bool,
    /// Parameter with the largest disagreement, with its analytic and
    /// numeric readings.
    pub worst: (String, usize, f64, f64),
}

/// Gradient-comparison scale floor. A central difference at h = 1e-3
/// carries an irreducible h^2/6 * f''' truncation of a few 1e-7 on this
/// battery even for exact gradients, so gradients below this scale are
/// judged absolutely at floor * rtol = 5e-6 (20x the measured truncation)
/// instead of relatively.
pub const GRAD_SCALE_FLOOR: f64 = 0.05;

/// Relative disagreement with the small-gradient floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR)
}

/// Fixed inputs shared by every loss: two source/target pairs with their
/// view sets, a frozen momentum encoder, a frozen teacher, and labels.
struct Fixture {
    net: NetConfig,
    /// Contrastive temperature for the check (the production default).
    tau: f64,
    view_sets: Vec<ViewSet>,
    labeled: Vec<(Image, SegMask)>,
    unlabeled: Vec<Image>,
    momentum: ModelState,
    teacher: ModelState,
    cons: Vec<(Image, AugmentRecord, usize)>,
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
    // Smooth-ish random field so spectra are not white noise.
    let mut img = Image::zeros(n, n, 1);
    let waves: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.25),
            )
        })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let mut v = 0.5;
            for &(fy, fx, p, a) in &waves {
                v += a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / n as f64 + p)
                    .sin();
            }
            img.set(0, y, x, v.clamp(0.0, 1.0));
        }
    }
    img
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> SegMask {
    let mut mask = SegMask::zeros(n, n);
    let cy = rng.random_range(0.3..0.7) * n as f64;
    let cx = rng.random_range(0.3..0.7) * n as f64;
    let r = rng.random_range(0.15..0.3) * n as f64;
    for y in 0..n {
        for x in 0..n {
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let net = NetConfig::reduced();
        let n = net.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut view_sets = Vec::new();
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut cons = Vec::new();
        for pair in 0..2u64 {
            let src = random_image(&mut rng, n);
            let tgt = random_image(&mut rng, n);
            let vs = make_view_set(
                &src,
                &tgt,
                (2 * pair, 2 * pair + 1),
                crate::gfda::DEFAULT_SIGMA,
                seed ^ (pair + 1),
            )?;
            // Consistency: the momentum side sees a fresh augmentation of
            // each base image; the online side reuses the augmented views.
            for (view_idx, base) in [(1usize, &src), (3usize, &tgt)] {
                let rec = AugmentRecord::random(rng.random(), n);
                cons.push((rec.apply_to_image(base)?, rec, view_idx));
            }
            view_sets.push(vs);
            labeled.push((src.clone(), random_mask(&mut rng, n)));
            unlabeled.push(tgt.clone());
        }
        let momentum = init_encoder(&net, seed ^ 0xABCD);
        let teacher = init_segmenter_state(&net, seed ^ 0x1234);
        Ok(Fixture {
            net,
            tau: crate::objectives::DEFAULT_TAU,
            view_sets,
            labeled,
            unlabeled,
            momentum,
            teacher,
            cons,
        })
    }

    /// Union parameter state every loss is differentiated against. Biases
    /// are then nudged so every ReLU preactivation clears the kink by a
    /// fixed margin: at a kink the analytic subgradient is correct but a
    /// finite difference straddles the corner and reads half the slope, so
    /// probe validity requires the margin to dominate the step.
    fn params(&self, seed: u64) -> Result<ModelState> {
        let mut s = init_encoder(&self.net, seed);
        s.merge(init_heads(&self.net, seed));
        s.merge(init_dfpm(&self.net, seed));
        s.merge(init_decoder(&self.net, seed));
        // Random biases keep embeddings away from zero norm (the cosine
        // convention is discontinuous there) before kink clearing, and
        // bias draws avoid the degenerate all-off hidden layers that would
        // pin several views to one shared embedding.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00b1a5);
        for (name, tensor) in s.iter_mut() {
            if name.ends_with(".b") {
                for v in &mut tensor.data {
                    *v = rng.random_range(-0.4..0.4);
                }
            }
        }
        self.clear_relu_kinks(s)
    }

    /// Iteratively shift biases until no preactivation lies within the
    /// margin band. Shifting a channel's bias moves all of its units in
    /// lockstep, so each pass finds the smallest shift that empties the
    /// band for that channel; downstream coupling converges in a few
    /// passes.
    fn clear_relu_kinks(&self, mut params: ModelState) -> Result<ModelState> {
        const MARGIN: f64 = 0.03;
        for _pass in 0..200 {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let _ = loss_root(&mut tape, &bound, self, LossKind::Pre)?;
            let _ = loss_root(&mut tape, &bound, self, LossKind::Finetune)?;

            let mut name_of: Vec<(NodeId, String)> = Vec::new();
            for (name, &id) in bound.iter() {
                name_of.push((id, name.clone()));
            }
            let mut grouped: std::collections::BTreeMap<(NodeId, usize), Vec<f64>> =
                std::collections::BTreeMap::new();
            for (bias, channel, values) in tape.relu_bias_channel_values() {
                grouped.entry((bias, channel)).or_default().extend(values);
            }

            let mut shifted = false;
            for ((bias, channel), values) in grouped {
                let delta = clear_band_shift(&values, MARGIN);
                if delta == 0.0 {
                    continue;
                }
                let name = name_of
                    .iter()
                    .find(|(id, _)| *id == bias)
                    .map(|(_, n)| n.clone())
                    .ok_or_else(|| Error::config("relu bias is not a bound parameter"))?;
                params.get_mut(&name)?.data[channel] += delta;
                shifted = true;
            }
            if !shifted {
                return Ok(params);
            }
        }
        Err(Error::config(
            "could not steer relu preactivations away from their kinks",
        ))
    }
}

/// Smallest-magnitude common shift that leaves no value inside
/// (-margin, margin); zero when the band is already clear.
fn clear_band_shift(values: &[f64], margin: f64) -> f64 {
    let clear = |d: f64| values.iter().all(|&v| (v + d).abs() >= margin);
    if clear(0.0) {
        return 0.0;
    }
    let mut best: Option<f64> = None;
    for &v in values {
        for d in [margin * 1.05 - v, -margin * 1.05 - v] {
            if clear(d) && best.is_none_or(|b: f64| d.abs() < b.abs()) {
                best = Some(d);
            }
        }
    }
    // No single shift empties the band (values straddle it more densely
    // than its width); push everything upward and let the next pass see
    // the new landscape.
    best.unwrap_or(margin * 2.0)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Scl,
    Ccl,
    Con,
    Pre,
    Sup,
    Reg,
    Finetune,
}

impl LossKind {
    fn name(self) -> &'static str {
        match self {
            LossKind::Scl => "l_scl",
            LossKind::Ccl => "l_ccl",
            LossKind::Con => "l_con",
            LossKind::Pre => "l_pre",
            LossKind::Sup => "l_sup",
            LossKind::Reg => "l_reg",
            LossKind::Finetune => "l_finetune",
        }
    }
}

fn contrastive_nodes(
    tape: &mut Tape,
    bound: &crate::netcore::model::BoundParams,
    fx: &Fixture,
    head: HeadKind,
) -> Result<(Vec<NodeId>, Vec<Style>, Vec<u64>)> {
    let mut embs = Vec::new();
    let mut styles = Vec::new();
    let mut ids = Vec::new();
    for vs in &fx.view_sets {
        for view in &vs.views {
            let enc = encoder_graph(tape, bound, &fx.net, &view.image)?;
            let e = head_graph(tape, bound, &fx.net, head, enc.pooled)?;
            embs.push(e);
            styles.push(view.style);
            ids.push(view.instance_id);
        }
    }
    Ok((embs, styles, ids))
}

fn consistency_node(
    tape: &mut Tape,
    bound: &crate::netcore::model::BoundParams,
    fx: &Fixture,
) -> Result<NodeId> {
    let net = fx.net;
    let dim = net.feature_dim();
    let gs = net.grid_size();
    let k_node = bound.node("dfpm.k")?;
    let mut terms = Vec::new();
    for (pair_idx, vs) in fx.view_sets.iter().enumerate() {
        for (mom_image, mom_rec, view_idx) in &fx.cons[2 * pair_idx..2 * pair_idx + 2] {
            let online_view = &vs.views[*view_idx];
            let enc = encoder_graph(tape, bound, &net, &online_view.image)?;
            let online_coords = cell_src_coords(&net, &online_view.augment);
            let (mom_map, _) = encoder_forward(&fx.momentum, &net, mom_image, Some(mom_rec))?;
            let basis = dfpm_basis(&mom_map, DfpmMode::Propagated);
            let tilde = tape.linear_map_rows(k_node, basis, mom_map.cells(), dim)?;
            let pairs: PairSet = build_pair_set_coords(
                &mom_map.src_coords,
                &online_coords,
                mom_map.cell_diagonal(net.image_size),
                DEFAULT_TH,
            )?;
            if pairs.is_empty() {
                return Err(Error::config("gradcheck fixture produced no pairs"));
            }
            let term = consistency_graph(tape, tilde, enc.feat, dim, gs, gs, &pairs)?;
            terms.push(term);
        }
    }
    let w = 1.0 / terms.len() as f64;
    tape.weighted_sum(terms.iter().map(|&t| (w, t)).collect())
}

fn supervised_node(
    tape: &mut Tape,
    bound: &crate::netcore::model::BoundParams,
    fx: &Fixture,
) -> Result<NodeId> {
    let net = fx.net;
    let npix = net.image_size * net.image_size;
    let mut terms = Vec::new();
    for (image, mask) in &fx.labeled {
        let enc = encoder_graph(tape, bound, &net, image)?;
        let logits = decoder_graph(tape, bound, &net, enc.feat)?;
        terms.push(tape.ce_hard(logits, net.classes, npix, mask.labels().to_vec())?);
    }
    let w = 1.0 / terms.len() as f64;
    tape.weighted_sum(terms.iter().map(|&t| (w, t)).collect())
}

fn teacher_logits(fx: &Fixture, image: &Image) -> Result<Logits> {
    let (feat, _) = encoder_forward(&fx.teacher, &fx.net, image, None)?;
    decoder_forward(&fx.teacher, &fx.net, &feat)
}

fn reg_node(
    tape: &mut Tape,
    bound: &crate::netcore::model::BoundParams,
    fx: &Fixture,
) -> Result<NodeId> {
    let net = fx.net;
    let npix = net.image_size * net.image_size;
    let mut terms = Vec::new();
    for image in &fx.unlabeled {
        let enc = encoder_graph(tape, bound, &net, image)?;
        let logits = decoder_graph(tape, bound, &net, enc.feat)?;
        let target = teacher_logits(fx, image)?.softmax();
        terms.push(tape.ce_soft(logits, net.classes, npix, target)?);
    }
    let w = 1.0 / terms.len() as f64;
    tape.weighted_sum(terms.iter().map(|&t| (w, t)).collect())
}

fn loss_root(tape: &mut Tape, bound: &crate::netcore::model::BoundParams, fx: &Fixture, kind: LossKind) -> Result<NodeId> {
    match kind {
        LossKind::Scl => {
            let (embs, styles, _) = contrastive_nodes(tape, bound, fx, HeadKind::Style)?;
            scl_graph(tape, &embs, &styles, fx.tau)
        }
        LossKind::Ccl => {
            let (embs, _, ids) = contrastive_nodes(tape, bound, fx, HeadKind::Content)?;
            Ok(ccl_graph(tape, &embs, &ids, fx.tau)?.0)
        }
        LossKind::Con => consistency_node(tape, bound, fx),
        LossKind::Pre => {
            let (s_embs, styles, _) = contrastive_nodes(tape, bound, fx, HeadKind::Style)?;
            let scl = scl_graph(tape, &s_embs, &styles, fx.tau)?;
            let (c_embs, _, ids) = contrastive_nodes(tape, bound, fx, HeadKind::Content)?;
            let ccl = ccl_graph(tape, &c_embs, &ids, fx.tau)?.0;
            let con = consistency_node(tape, bound, fx)?;
            tape.weighted_sum(vec![
                (DEFAULT_LAMBDA1, scl),
                (DEFAULT_LAMBDA2, ccl),
                (1.0, con),
            ])
        }
        LossKind::Sup => supervised_node(tape, bound, fx),
        LossKind::Reg => reg_node(tape, bound, fx),
        LossKind::Finetune => {
            let sup = supervised_node(tape, bound, fx)?;
            let reg = reg_node(tape, bound, fx)?;
            tape.weighted_sum(vec![(1.0, sup), (DEFAULT_LAMBDA3, reg)])
        }
    }
}

fn loss_value(fx: &Fixture, params: &ModelState, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let root = loss_root(&mut tape, &bound, fx, kind)?;
    Ok(tape.scalar(root))
}

/// Check one loss: analytic tape gradients against central differences
/// over every parameter of the union state.
fn check_loss(fx: &Fixture, params: &ModelState, kind: LossKind, h: f64, tol: f64) -> Result<LossCheck> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let root = loss_root(&mut tape, &bound, fx, kind)?;
    let grads = tape.backward(root)?;
    let analytic = collect_grads(&grads, &bound);

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst = (String::new(), 0usize, 0.0f64, 0.0f64);
    for (name, tensor) in params.iter() {
        for i in 0..tensor.data.len() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name)?.data[i] -= h;
            let fd = (loss_value(fx, &plus, kind)? - loss_value(fx, &minus, kind)?) / (2.0 * h);
            let an = analytic[name][i];
            let rel = relative_error(an, fd);
            if rel > max_rel {
                max_rel = rel;
                worst = (name.clone(), i, an, fd);
            }
            checked += 1;
        }
    }
    Ok(LossCheck {
        name: kind.name(),
        max_rel_err: max_rel,
        checked_params: checked,
        pass: max_rel < tol,
        worst,
    })
}

/// Run the whole battery: every stage-1 and stage-2 loss plus the combined
/// objectives, each against central finite differences with step `h`.
pub fn run_gradcheck(seed: u64, h: f64, tol: f64) -> Result<Vec<LossCheck>> {
    let fx = Fixture::new(seed)?;
    let params = fx.params(seed)?;
    let kinds = [
        LossKind::Scl,
        LossKind::Ccl,
        LossKind::Con,
        LossKind::Pre,
        LossKind::Sup,
        LossKind::Reg,
        LossKind::Finetune,
    ];
    kinds
        .iter()
        .map(|&k| check_loss(&fx, &params, k, h, tol))
        .collect()
}
