//! The fixed network family: a 3-block stride-2 conv encoder, two shallow
//! FC projection heads, a dim x dim feature-propagation map, and a
//! mirror-image upsampling decoder, all expressed as tape graphs with
//! value-level wrappers.

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthdata::AugmentRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Shape-carrying named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All learnable parameters of one network role, keyed by name. BTreeMap
/// keeps every iteration order deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelState {
    params: BTreeMap<String, Tensor>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.data.len()).sum()
    }

    /// Clone the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelState {
        ModelState {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Move every parameter of `other` in, overwriting name collisions.
    pub fn merge(&mut self, other: ModelState) {
        self.params.extend(other.params);
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Architecture knobs. The training-scale default is fixed; the reduced
/// variant keeps gradient checking under the parameter budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Encoder conv widths, one per stride-2 block.
    pub widths: [usize; 3],
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            in_channels: 1,
            widths: [8, 16, 16],
            head_hidden: 16,
            embed_dim: 8,
            classes: 2,
        }
    }
}

impl NetConfig {
    /// Small variant for finite-difference tests (< 2000 parameters).
    pub fn reduced() -> Self {
        NetConfig {
            image_size: 16,
            in_channels: 1,
            widths: [3, 4, 4],
            head_hidden: 4,
            embed_dim: 3,
            classes: 2,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }

    /// Decoder conv widths, mirroring the encoder's width progression at
    /// half scale in the last block (w2 -> w1 -> w0 -> w0/2), then a 1x1
    /// conv to the class count.
    pub fn decoder_widths(&self) -> [usize; 3] {
        [self.widths[1], self.widths[0], (self.widths[0] / 2).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || !self.image_size.is_power_of_two() {
            return Err(Error::config(
                "image size must be a power of two divisible by 8",
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.head_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(())
    }
}

/// Which projection head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Style,
    Content,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Style => "style",
            HeadKind::Content => "content",
        }
    }
}

/// Dense per-cell feature grid with the original-image coordinate of each
/// cell center (through the view's augmentation inverse). Cells whose
/// centers fall in zero-padded territory carry no coordinate.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Row-major cells x dim; cell m = gy * grid_w + gx.
    pub features: Vec<f64>,
    pub src_coords: Vec<Option<(f64, f64)>>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell(&self, m: usize) -> &[f64] {
        &self.features[m * self.dim..(m + 1) * self.dim]
    }

    /// Diagonal of one feature cell in image pixels; the unit for the
    /// consistency-loss distance threshold.
    pub fn cell_diagonal(&self, image_size: usize) -> f64 {
        let cell_h = image_size as f64 / self.grid_h as f64;
        let cell_w = image_size as f64 / self.grid_w as f64;
        (cell_h * cell_h + cell_w * cell_w).sqrt()
    }
}

/// Cell-center coordinates through an augmentation inverse.
pub fn cell_src_coords(
    cfg: &NetConfig,
    augment: &AugmentRecord,
) -> Vec<Option<(f64, f64)>> {
    let gs = cfg.grid_size();
    let scale = cfg.image_size as f64 / gs as f64;
    let mut coords = Vec::with_capacity(gs * gs);
    for gy in 0..gs {
        for gx in 0..gs {
            let cy = scale * gy as f64 + (scale - 1.0) / 2.0;
            let cx = scale * gx as f64 + (scale - 1.0) / 2.0;
            coords.push(augment.inverse(cy, cx, cfg.image_size));
        }
    }
    coords
}

/// Pooled global representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Full-resolution class scores, channel-major [K][H][W].
#[derive(Debug, Clone)]
pub struct Logits {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax; ties resolve to the lower class index.
    pub fn argmax_mask(&self) -> crate::synthdata::SegMask {
        let mut labels = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            let mut best = 0usize;
            let mut best_v = self.data[px];
            for k in 1..self.classes {
                let v = self.data[k * self.height * self.width + px];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            labels.push(best as u8);
        }
        crate::synthdata::SegMask::new(self.height, self.width, labels)
            .expect("argmax labels are in range")
    }

    /// Per-pixel softmax probabilities, same layout as the logits.
    pub fn softmax(&self) -> Vec<f64> {
        let npix = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for px in 0..npix {
            let mut m = f64::NEG_INFINITY;
            for k in 0..self.classes {
                m = m.max(self.data[k * npix + px]);
            }
            let mut denom = 0.0;
            for k in 0..self.classes {
                denom += (self.data[k * npix + px] - m).exp();
            }
            for k in 0..self.classes {
                out[k * npix + px] = (self.data[k * npix + px] - m).exp() / denom;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); each parameter
/// draws from its own stream of the run seed so layout changes cannot
/// shift siblings.
fn glorot(name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    Tensor {
        shape,
        data: (0..len).map(|_| rng.random_range(-a..a)).collect(),
    }
}

fn conv_pair(state: &mut ModelState, name: &str, out_c: usize, in_c: usize, seed: u64) {
    state.insert(
        format!("{name}.w"),
        glorot(
            &format!("{name}.w"),
            vec![out_c, in_c, 3, 3],
            in_c * 9,
            out_c * 9,
            seed,
        ),
    );
    state.insert(format!("{name}.b"), Tensor::zeros(vec![out_c]));
}

fn dense_pair(state: &mut ModelState, name: &str, out_d: usize, in_d: usize, seed: u64) {
    state.insert(
        format!("{name}.w"),
        glorot(&format!("{name}.w"), vec![out_d, in_d], in_d, out_d, seed),
    );
    state.insert(format!("{name}.b"), Tensor::zeros(vec![out_d]));
}

pub fn init_encoder(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = ModelState::new();
    let [w0, w1, w2] = cfg.widths;
    conv_pair(&mut s, "enc.conv1", w0, cfg.in_channels, seed);
    conv_pair(&mut s, "enc.conv2", w1, w0, seed);
    conv_pair(&mut s, "enc.conv3", w2, w1, seed);
    s
}

pub fn init_heads(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = ModelState::new();
    for head in ["style", "content"] {
        dense_pair(&mut s, &format!("{head}.fc1"), cfg.head_hidden, cfg.feature_dim(), seed);
        dense_pair(&mut s, &format!("{head}.fc2"), cfg.embed_dim, cfg.head_hidden, seed);
    }
    s
}

pub fn init_dfpm(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = ModelState::new();
    let d = cfg.feature_dim();
    s.insert("dfpm.k", glorot("dfpm.k", vec![d, d], d, d, seed));
    s
}

pub fn init_decoder(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = ModelState::new();
    let [d0, d1, d2] = cfg.decoder_widths();
    conv_pair(&mut s, "dec.conv1", d0, cfg.feature_dim(), seed);
    conv_pair(&mut s, "dec.conv2", d1, d0, seed);
    conv_pair(&mut s, "dec.conv3", d2, d1, seed);
    dense_pair(&mut s, "dec.out", cfg.classes, d2, seed);
    s
}

/// Stage-1 state: encoder, both heads, and the propagation map.
pub fn init_pretrain_state(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = init_encoder(cfg, seed);
    s.merge(init_heads(cfg, seed));
    s.merge(init_dfpm(cfg, seed));
    s
}

/// Stage-2 state: encoder plus decoder.
pub fn init_segmenter_state(cfg: &NetConfig, seed: u64) -> ModelState {
    let mut s = init_encoder(cfg, seed);
    s.merge(init_decoder(cfg, seed));
    s
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Tape handles for bound parameters.
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Copy every parameter onto the tape as a leaf.
pub fn bind_params(tape: &mut Tape, state: &ModelState) -> BoundParams {
    let mut nodes = BTreeMap::new();
    for (name, tensor) in state.iter() {
        nodes.insert(name.clone(), tape.leaf(tensor.data.clone()));
    }
    BoundParams { nodes }
}

/// Collect d(loss)/d(param) for every bound parameter.
pub fn collect_grads(
    grads: &super::tape::Gradients,
    bound: &BoundParams,
) -> BTreeMap<String, Vec<f64>> {
    bound
        .iter()
        .map(|(name, &id)| (name.clone(), grads.get(id).to_vec()))
        .collect()
}

pub struct EncoderNodes {
    /// Final conv activation, [feature_dim, grid, grid].
    pub feat: NodeId,
    /// Spatial mean of the final map, [feature_dim].
    pub pooled: NodeId,
}

pub fn encoder_graph(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &NetConfig,
    image: &Image,
) -> Result<EncoderNodes> {
    if image.height() != cfg.image_size
        || image.width() != cfg.image_size
        || image.channels() != cfg.in_channels
    {
        return Err(Error::dimension(format!(
            "encoder expects {0}x{0}x{1} input, got {2}x{3}x{4}",
            cfg.image_size,
            cfg.in_channels,
            image.height(),
            image.width(),
            image.channels()
        )));
    }
    let [w0, w1, w2] = cfg.widths;
    let n = cfg.image_size;
    let x = tape.constant(image.data().to_vec());
    let c1 = tape.conv2d(
        x,
        params.node("enc.conv1.w")?,
        params.node("enc.conv1.b")?,
        cfg.in_channels,
        n,
        n,
        w0,
        2,
    )?;
    let r1 = tape.relu(c1);
    let c2 = tape.conv2d(
        r1,
        params.node("enc.conv2.w")?,
        params.node("enc.conv2.b")?,
        w0,
        n / 2,
        n / 2,
        w1,
        2,
    )?;
    let r2 = tape.relu(c2);
    let c3 = tape.conv2d(
        r2,
        params.node("enc.conv3.w")?,
        params.node("enc.conv3.b")?,
        w1,
        n / 4,
        n / 4,
        w2,
        2,
    )?;
    let feat = tape.relu(c3);
    let pooled = tape.mean_pool(feat, w2, n / 8, n / 8)?;
    Ok(EncoderNodes { feat, pooled })
}

/// Two-layer MLP head with a ReLU between.
pub fn head_graph(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &NetConfig,
    which: HeadKind,
    pooled: NodeId,
) -> Result<NodeId> {
    let p = which.prefix();
    let h = tape.dense(
        pooled,
        params.node(&format!("{p}.fc1.w"))?,
        params.node(&format!("{p}.fc1.b"))?,
        cfg.feature_dim(),
        cfg.head_hidden,
    )?;
    let r = tape.relu(h);
    tape.dense(
        r,
        params.node(&format!("{p}.fc2.w"))?,
        params.node(&format!("{p}.fc2.b"))?,
        cfg.head_hidden,
        cfg.embed_dim,
    )
}

/// Mirror decoder: three upsample + conv(3x3) + ReLU blocks back to full
/// resolution, then a 1x1 conv to class logits.
pub fn decoder_graph(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &NetConfig,
    feat: NodeId,
) -> Result<NodeId> {
    let [d0, d1, d2] = cfg.decoder_widths();
    let gs = cfg.grid_size();
    let fdim = cfg.feature_dim();

    let u1 = tape.upsample2x(feat, fdim, gs, gs)?;
    let c1 = tape.conv2d(
        u1,
        params.node("dec.conv1.w")?,
        params.node("dec.conv1.b")?,
        fdim,
        gs * 2,
        gs * 2,
        d0,
        1,
    )?;
    let r1 = tape.relu(c1);

    let u2 = tape.upsample2x(r1, d0, gs * 2, gs * 2)?;
    let c2 = tape.conv2d(
        u2,
        params.node("dec.conv2.w")?,
        params.node("dec.conv2.b")?,
        d0,
        gs * 4,
        gs * 4,
        d1,
        1,
    )?;
    let r2 = tape.relu(c2);

    let u3 = tape.upsample2x(r2, d1, gs * 4, gs * 4)?;
    let c3 = tape.conv2d(
        u3,
        params.node("dec.conv3.w")?,
        params.node("dec.conv3.b")?,
        d1,
        gs * 8,
        gs * 8,
        d2,
        1,
    )?;
    let r3 = tape.relu(c3);

    tape.conv1x1(
        r3,
        params.node("dec.out.w")?,
        params.node("dec.out.b")?,
        d2,
        gs * 8,
        gs * 8,
        cfg.classes,
    )
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

/// Run the encoder, returning the dense feature map (with source
/// coordinates through `augment`) and the pooled embedding.
pub fn encoder_forward(
    state: &ModelState,
    cfg: &NetConfig,
    image: &Image,
    augment: Option<&AugmentRecord>,
) -> Result<(FeatureMap, Embedding)> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, state);
    let nodes = encoder_graph(&mut tape, &bound, cfg, image)?;
    let identity = AugmentRecord::identity();
    let record = augment.unwrap_or(&identity);
    let gs = cfg.grid_size();
    Ok((
        FeatureMap {
            grid_h: gs,
            grid_w: gs,
            dim: cfg.feature_dim(),
            features: grid_to_rows(tape.value(nodes.feat), cfg.feature_dim(), gs, gs),
            src_coords: cell_src_coords(cfg, record),
        },
        Embedding {
            values: tape.value(nodes.pooled).to_vec(),
        },
    ))
}

pub fn head_forward(
    state: &ModelState,
    cfg: &NetConfig,
    which: HeadKind,
    pooled: &Embedding,
) -> Result<Embedding> {
    if pooled.dim() != cfg.feature_dim() {
        return Err(Error::dimension("pooled embedding has wrong dimension"));
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, state);
    let input = tape.constant(pooled.values.clone());
    let out = head_graph(&mut tape, &bound, cfg, which, input)?;
    Ok(Embedding {
        values: tape.value(out).to_vec(),
    })
}

pub fn decoder_forward(state: &ModelState, cfg: &NetConfig, feat: &FeatureMap) -> Result<Logits> {
    let gs = cfg.grid_size();
    if feat.grid_h != gs || feat.grid_w != gs || feat.dim != cfg.feature_dim() {
        return Err(Error::dimension("feature map does not match config"));
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, state);
    let input = tape.constant(rows_to_grid(&feat.features, feat.dim, gs, gs));
    let out = decoder_graph(&mut tape, &bound, cfg, input)?;
    Ok(Logits {
        classes: cfg.classes,
        height: cfg.image_size,
        width: cfg.image_size,
        data: tape.value(out).to_vec(),
    })
}

/// [C, H, W] channel-major activation -> cells x dim rows.
pub fn grid_to_rows(value: &[f64], dim: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w * dim];
    for c in 0..dim {
        for m in 0..h * w {
            rows[m * dim + c] = value[c * h * w + m];
        }
    }
    rows
}

/// cells x dim rows -> [C, H, W] channel-major activation.
pub fn rows_to_grid(rows: &[f64], dim: usize, h: usize, w: usize) -> Vec<f64> {
    let mut value = vec![0.0; h * w * dim];
    for c in 0..dim {
        for m in 0..h * w {
            value[c * h * w + m] = rows[m * dim + c];
        }
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = NetConfig::default();
        let state = init_encoder(&cfg, 1);
        let img = Image::zeros(64, 64, 1);
        let (feat, pooled) = encoder_forward(&state, &cfg, &img, None).unwrap();
        assert!(feat.features.iter().all(|&v| v == 0.0));
        assert!(pooled.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_output_grid_is_8x8x16_for_64() {
        let cfg = NetConfig::default();
        let state = init_encoder(&cfg, 2);
        let img = Image::zeros(64, 64, 1);
        let (feat, pooled) = encoder_forward(&state, &cfg, &img, None).unwrap();
        assert_eq!((feat.grid_h, feat.grid_w, feat.dim), (8, 8, 16));
        assert_eq!(pooled.dim(), 16);
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let cfg = NetConfig::default();
        let state = init_encoder(&cfg, 3);
        let img = Image::zeros(32, 32, 1);
        assert!(encoder_forward(&state, &cfg, &img, None).is_err());
    }

    #[test]
    fn head_zero_input_zero_bias_gives_zero() {
        let cfg = NetConfig::default();
        let state = init_heads(&cfg, 4);
        let out = head_forward(
            &state,
            &cfg,
            HeadKind::Style,
            &Embedding {
                values: vec![0.0; 16],
            },
        )
        .unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_identity_weights_pass_positive_through() {
        let cfg = NetConfig {
            head_hidden: 16,
            embed_dim: 16,
            ..NetConfig::default()
        };
        let mut state = ModelState::new();
        let eye16 = |_: &str| {
            let mut t = Tensor::zeros(vec![16, 16]);
            for i in 0..16 {
                t.data[i * 16 + i] = 1.0;
            }
            t
        };
        state.insert("style.fc1.w", eye16("fc1"));
        state.insert("style.fc1.b", Tensor::zeros(vec![16]));
        state.insert("style.fc2.w", eye16("fc2"));
        state.insert("style.fc2.b", Tensor::zeros(vec![16]));
        let mut input = vec![0.0; 16];
        input[3] = 2.0;
        input[7] = -1.5; // negative channel should be gated off
        let out = head_forward(
            &state,
            &cfg,
            HeadKind::Style,
            &Embedding {
                values: input.clone(),
            },
        )
        .unwrap();
        assert_eq!(out.values[3], 2.0);
        assert_eq!(out.values[7], 0.0);
    }

    #[test]
    fn head_matches_dense_oracle() {
        use rand::{Rng, SeedableRng};
        let cfg = NetConfig::default();
        let state = init_heads(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let input: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = head_forward(
            &state,
            &cfg,
            HeadKind::Content,
            &Embedding {
                values: input.clone(),
            },
        )
        .unwrap();
        // independent mat-vec recomputation
        let w1 = &state.get("content.fc1.w").unwrap().data;
        let b1 = &state.get("content.fc1.b").unwrap().data;
        let w2 = &state.get("content.fc2.w").unwrap().data;
        let b2 = &state.get("content.fc2.b").unwrap().data;
        let mut hidden = vec![0.0; 16];
        for o in 0..16 {
            let mut acc = b1[o];
            for i in 0..16 {
                acc += w1[o * 16 + i] * input[i];
            }
            hidden[o] = acc.max(0.0);
        }
        for o in 0..8 {
            let mut acc = b2[o];
            for i in 0..16 {
                acc += w2[o * 16 + i] * hidden[i];
            }
            assert!((out.values[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_shape_and_zero_case() {
        let cfg = NetConfig::default();
        let state = init_decoder(&cfg, 6);
        let feat = FeatureMap {
            grid_h: 8,
            grid_w: 8,
            dim: 16,
            features: vec![0.0; 8 * 8 * 16],
            src_coords: vec![None; 64],
        };
        let logits = decoder_forward(&state, &cfg, &feat).unwrap();
        assert_eq!(
            (logits.classes, logits.height, logits.width),
            (2, 64, 64)
        );
        // zero features + zero biases -> zero logits -> uniform softmax
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let probs = logits.softmax();
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn init_is_seed_deterministic_and_name_keyed() {
        let cfg = NetConfig::default();
        let a = init_pretrain_state(&cfg, 9);
        let b = init_pretrain_state(&cfg, 9);
        assert_eq!(a, b);
        let c = init_pretrain_state(&cfg, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn reduced_config_stays_under_gradcheck_budget() {
        let cfg = NetConfig::reduced();
        let mut s = init_pretrain_state(&cfg, 0);
        s.merge(init_decoder(&cfg, 0));
        assert!(
            s.param_count() <= 2000,
            "reduced model has {} params",
            s.param_count()
        );
    }

    #[test]
    fn grid_rows_roundtrip() {
        let v: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let rows = grid_to_rows(&v, 3, 2, 4);
        assert_eq!(rows_to_grid(&rows, 3, 2, 4), v);
    }
}
