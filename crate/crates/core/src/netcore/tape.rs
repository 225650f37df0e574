//! Define-by-run reverse-mode gradient tape over flat f64 buffers.
//!
//! Each operation computes its value eagerly and records enough metadata
//! for the reverse sweep. The op set is exactly what the fixed
//! encoder/decoder/head family and the losses need; every backward rule
//! here is covered by a finite-difference test.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Leaf that never receives gradients (inputs, frozen targets).
    Const,
    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        stride: usize,
    },
    Conv1x1 {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_c: usize,
        h: usize,
        w: usize,
        out_c: usize,
    },
    Relu {
        input: NodeId,
    },
    /// Global spatial mean: [C,H,W] -> [C].
    MeanPool {
        input: NodeId,
        c: usize,
        h: usize,
        w: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_dim: usize,
        out_dim: usize,
    },
    Upsample2x {
        input: NodeId,
        c: usize,
        h: usize,
        w: usize,
    },
    /// Cosine similarity of two equal-length vectors; 0 if either is zero.
    Cosine {
        a: NodeId,
        b: NodeId,
    },
    /// Inner product of two equal-length vectors (a == b permitted).
    Dot {
        a: NodeId,
        b: NodeId,
    },
    /// One InfoNCE term: -log( e^{p/tau} / (e^{p/tau} + sum e^{n_i/tau}) )
    /// over scalar similarity nodes, log-sum-exp stabilized.
    NceTerm {
        pos: NodeId,
        negs: Vec<NodeId>,
        tau: f64,
    },
    /// Scalar linear combination of scalar nodes.
    WeightedSum {
        terms: Vec<(f64, NodeId)>,
    },
    /// Channel vector at one spatial site of a [C,H,W] map.
    CellVec {
        input: NodeId,
        c: usize,
        h: usize,
        w: usize,
        y: usize,
        x: usize,
    },
    /// One row of a [rows x dim] matrix node.
    Row {
        input: NodeId,
        row: usize,
        dim: usize,
    },
    /// out[m] = W * basis[m] for a constant basis; gradients reach W only.
    LinearMapRows {
        weight: NodeId,
        basis: Vec<f64>,
        n_rows: usize,
        dim: usize,
    },
    /// Mean softmax cross-entropy against integer labels on [K x npix] logits.
    CeHard {
        logits: NodeId,
        classes: usize,
        npix: usize,
        labels: Vec<u8>,
    },
    /// Mean cross-entropy against constant soft targets [K x npix].
    CeSoft {
        logits: NodeId,
        classes: usize,
        npix: usize,
        target: Vec<f64>,
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by a reverse sweep.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

fn softmax_stats(z: &[f64]) -> (f64, f64) {
    // returns (max, log-sum-exp)
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    (m, m + s.ln())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn leaf(&mut self, data: Vec<f64>) -> NodeId {
        self.push(data, Op::Leaf)
    }

    /// Gradient-free input. Backward passes skip accumulating into it.
    pub fn constant(&mut self, data: Vec<f64>) -> NodeId {
        self.push(data, Op::Const)
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Const)
    }

    fn expect_len(&self, id: NodeId, len: usize, what: &str) -> Result<()> {
        if self.nodes[id.0].value.len() != len {
            return Err(Error::dimension(format!(
                "{what}: expected length {len}, node has {}",
                self.nodes[id.0].value.len()
            )));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if stride != 1 && stride != 2 {
            return Err(Error::dimension("conv stride must be 1 or 2"));
        }
        if stride == 2 && (in_h % 2 != 0 || in_w % 2 != 0) {
            return Err(Error::dimension("stride-2 conv needs even input size"));
        }
        self.expect_len(input, in_c * in_h * in_w, "conv input")?;
        self.expect_len(weight, out_c * in_c * 9, "conv weight")?;
        self.expect_len(bias, out_c, "conv bias")?;
        let out_h = in_h / stride;
        let out_w = in_w / stride;
        let mut out = vec![0.0; out_c * out_h * out_w];
        {
            let inp = &self.nodes[input.0].value;
            let w = &self.nodes[weight.0].value;
            let b = &self.nodes[bias.0].value;
            conv2d_forward(
                inp, w, b, &mut out, in_c, in_h, in_w, out_c, out_h, out_w, stride,
            );
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                in_c,
                in_h,
                in_w,
                out_c,
                stride,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1x1(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_c: usize,
        h: usize,
        w: usize,
        out_c: usize,
    ) -> Result<NodeId> {
        self.expect_len(input, in_c * h * w, "conv1x1 input")?;
        self.expect_len(weight, out_c * in_c, "conv1x1 weight")?;
        self.expect_len(bias, out_c, "conv1x1 bias")?;
        let hw = h * w;
        let mut out = vec![0.0; out_c * hw];
        {
            let inp = &self.nodes[input.0].value;
            let wt = &self.nodes[weight.0].value;
            let b = &self.nodes[bias.0].value;
            for co in 0..out_c {
                let orow = &mut out[co * hw..(co + 1) * hw];
                orow.fill(b[co]);
                for ci in 0..in_c {
                    let k = wt[co * in_c + ci];
                    let irow = &inp[ci * hw..(ci + 1) * hw];
                    for (o, &i) in orow.iter_mut().zip(irow) {
                        *o += k * i;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv1x1 {
                input,
                weight,
                bias,
                in_c,
                h,
                w,
                out_c,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        self.push(out, Op::Relu { input })
    }

    pub fn mean_pool(&mut self, input: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
        self.expect_len(input, c * h * w, "mean_pool input")?;
        let hw = (h * w) as f64;
        let inp = &self.nodes[input.0].value;
        let out: Vec<f64> = (0..c)
            .map(|ci| inp[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(out, Op::MeanPool { input, c, h, w }))
    }

    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<NodeId> {
        self.expect_len(input, in_dim, "dense input")?;
        self.expect_len(weight, out_dim * in_dim, "dense weight")?;
        self.expect_len(bias, out_dim, "dense bias")?;
        let inp = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let out: Vec<f64> = (0..out_dim)
            .map(|o| {
                b[o] + w[o * in_dim..(o + 1) * in_dim]
                    .iter()
                    .zip(inp)
                    .map(|(wi, xi)| wi * xi)
                    .sum::<f64>()
            })
            .collect();
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
                in_dim,
                out_dim,
            },
        ))
    }

    pub fn upsample2x(&mut self, input: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
        self.expect_len(input, c * h * w, "upsample input")?;
        let (oh, ow) = (2 * h, 2 * w);
        let inp = &self.nodes[input.0].value;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ci * oh + y) * ow + x] = inp[(ci * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x { input, c, h, w }))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.len() != vb.len() {
            return Err(Error::dimension("cosine operands differ in length"));
        }
        let val = cosine_value(va, vb);
        Ok(self.push(vec![val], Op::Cosine { a, b }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.len() != vb.len() {
            return Err(Error::dimension("dot operands differ in length"));
        }
        let val: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![val], Op::Dot { a, b }))
    }

    pub fn nce_term(&mut self, pos: NodeId, negs: Vec<NodeId>, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::domain("temperature must be positive"));
        }
        if negs.is_empty() {
            return Err(Error::domain("InfoNCE needs at least one negative"));
        }
        self.expect_len(pos, 1, "nce positive")?;
        for &n in &negs {
            self.expect_len(n, 1, "nce negative")?;
        }
        let mut z = Vec::with_capacity(1 + negs.len());
        z.push(self.nodes[pos.0].value[0] / tau);
        z.extend(negs.iter().map(|n| self.nodes[n.0].value[0] / tau));
        let (_, lse) = softmax_stats(&z);
        let val = lse - z[0];
        Ok(self.push(vec![val], Op::NceTerm { pos, negs, tau }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(f64, NodeId)>) -> Result<NodeId> {
        let mut val = 0.0;
        for &(c, id) in &terms {
            self.expect_len(id, 1, "weighted_sum term")?;
            val += c * self.nodes[id.0].value[0];
        }
        Ok(self.push(vec![val], Op::WeightedSum { terms }))
    }

    pub fn cell_vec(
        &mut self,
        input: NodeId,
        c: usize,
        h: usize,
        w: usize,
        y: usize,
        x: usize,
    ) -> Result<NodeId> {
        self.expect_len(input, c * h * w, "cell_vec input")?;
        if y >= h || x >= w {
            return Err(Error::dimension("cell coordinates out of bounds"));
        }
        let inp = &self.nodes[input.0].value;
        let out: Vec<f64> = (0..c).map(|ci| inp[(ci * h + y) * w + x]).collect();
        Ok(self.push(out, Op::CellVec { input, c, h, w, y, x }))
    }

    pub fn row(&mut self, input: NodeId, row: usize, dim: usize) -> Result<NodeId> {
        let len = self.nodes[input.0].value.len();
        if (row + 1) * dim > len {
            return Err(Error::dimension("row slice out of bounds"));
        }
        let out = self.nodes[input.0].value[row * dim..(row + 1) * dim].to_vec();
        Ok(self.push(out, Op::Row { input, row, dim }))
    }

    pub fn linear_map_rows(
        &mut self,
        weight: NodeId,
        basis: Vec<f64>,
        n_rows: usize,
        dim: usize,
    ) -> Result<NodeId> {
        self.expect_len(weight, dim * dim, "linear map weight")?;
        if basis.len() != n_rows * dim {
            return Err(Error::dimension("basis length mismatch"));
        }
        let w = &self.nodes[weight.0].value;
        let mut out = vec![0.0; n_rows * dim];
        for m in 0..n_rows {
            let row = &basis[m * dim..(m + 1) * dim];
            for i in 0..dim {
                out[m * dim + i] = w[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(row)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        Ok(self.push(
            out,
            Op::LinearMapRows {
                weight,
                basis,
                n_rows,
                dim,
            },
        ))
    }

    pub fn ce_hard(
        &mut self,
        logits: NodeId,
        classes: usize,
        npix: usize,
        labels: Vec<u8>,
    ) -> Result<NodeId> {
        self.expect_len(logits, classes * npix, "ce logits")?;
        if labels.len() != npix {
            return Err(Error::dimension("label count mismatch"));
        }
        if labels.iter().any(|&l| l as usize >= classes) {
            return Err(Error::domain("label outside class range"));
        }
        let lg = &self.nodes[logits.0].value;
        let mut total = 0.0;
        let mut z = vec![0.0; classes];
        for px in 0..npix {
            for k in 0..classes {
                z[k] = lg[k * npix + px];
            }
            let (_, lse) = softmax_stats(&z);
            total += lse - z[labels[px] as usize];
        }
        let val = total / npix as f64;
        Ok(self.push(
            vec![val],
            Op::CeHard {
                logits,
                classes,
                npix,
                labels,
            },
        ))
    }

    pub fn ce_soft(
        &mut self,
        logits: NodeId,
        classes: usize,
        npix: usize,
        target: Vec<f64>,
    ) -> Result<NodeId> {
        self.expect_len(logits, classes * npix, "ce logits")?;
        if target.len() != classes * npix {
            return Err(Error::dimension("target length mismatch"));
        }
        let lg = &self.nodes[logits.0].value;
        let mut total = 0.0;
        let mut z = vec![0.0; classes];
        for px in 0..npix {
            for k in 0..classes {
                z[k] = lg[k * npix + px];
            }
            let (_, lse) = softmax_stats(&z);
            for k in 0..classes {
                total += target[k * npix + px] * (lse - z[k]);
            }
        }
        let val = total / npix as f64;
        Ok(self.push(
            vec![val],
            Op::CeSoft {
                logits,
                classes,
                npix,
                target,
            },
        ))
    }

    /// Smallest |preactivation| feeding any ReLU on this tape. Finite
    /// differences are only trustworthy when this margin comfortably
    /// exceeds the probe step.
    pub fn min_relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                for &v in &self.nodes[input.0].value {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Per-channel ReLU preactivations grouped by the bias node that can
    /// shift them, for fixtures that need to steer kinks away from zero.
    pub fn relu_bias_channel_values(&self) -> Vec<(NodeId, usize, Vec<f64>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                let (bias, out_c) = match &self.nodes[input.0].op {
                    Op::Conv2d { bias, out_c, .. } => (*bias, *out_c),
                    Op::Conv1x1 { bias, out_c, .. } => (*bias, *out_c),
                    Op::Dense { bias, out_dim, .. } => (*bias, *out_dim),
                    _ => continue,
                };
                let vals = &self.nodes[input.0].value;
                let per = vals.len() / out_c;
                for c in 0..out_c {
                    out.push((bias, c, vals[c * per..(c + 1) * per].to_vec()));
                }
            }
        }
        out
    }

    /// Reverse sweep from a scalar root seeded with 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Reverse sweep with explicit seeds (for multi-output graphs).
    pub fn backward_seeded(&self, seeds: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        for (id, seed) in seeds {
            if seed.len() != self.nodes[id.0].value.len() {
                return Err(Error::dimension("gradient seed length mismatch"));
            }
            for (g, s) in grads[id.0].iter_mut().zip(seed) {
                *g += s;
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(idx, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, grads: &mut [Vec<f64>]) {
        // Take the node's gradient out to satisfy the borrow checker.
        let g_out = std::mem::take(&mut grads[idx]);
        match &self.nodes[idx].op {
            Op::Leaf | Op::Const => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                in_c,
                in_h,
                in_w,
                out_c,
                stride,
            } => {
                let inp = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (out_h, out_w) = (in_h / stride, in_w / stride);
                let want_input = self.wants_grad(*input);
                {
                    let gb = &mut grads[bias.0];
                    for co in 0..*out_c {
                        gb[co] += g_out[co * out_h * out_w..(co + 1) * out_h * out_w]
                            .iter()
                            .sum::<f64>();
                    }
                }
                for co in 0..*out_c {
                    for ci in 0..*in_c {
                        let iplane = &inp[ci * in_h * in_w..(ci + 1) * in_h * in_w];
                        for ky in 0..3usize {
                            let (oy_lo, oy_hi) = conv_bounds(ky, *in_h, out_h, *stride);
                            for kx in 0..3usize {
                                let widx = ((co * in_c + ci) * 3 + ky) * 3 + kx;
                                let wv = w[widx];
                                let (ox_lo, ox_hi) = conv_bounds(kx, *in_w, out_w, *stride);
                                let len = ox_hi - ox_lo + 1;
                                let ib = ox_lo * stride + kx - 1;
                                let mut gw = 0.0;
                                for oy in oy_lo..=oy_hi {
                                    let iy = oy * stride + ky - 1;
                                    let grow = &g_out
                                        [(co * out_h + oy) * out_w + ox_lo..][..len];
                                    let irow = &iplane[iy * in_w..(iy + 1) * in_w];
                                    if want_input {
                                        let ginp = &mut grads[input.0]
                                            [(ci * in_h + iy) * in_w..(ci * in_h + iy + 1) * in_w];
                                        if *stride == 1 {
                                            let src = &irow[ib..ib + len];
                                            let dst = &mut ginp[ib..ib + len];
                                            for i in 0..len {
                                                gw += grow[i] * src[i];
                                                dst[i] += wv * grow[i];
                                            }
                                        } else {
                                            for i in 0..len {
                                                gw += grow[i] * irow[ib + i * stride];
                                                ginp[ib + i * stride] += wv * grow[i];
                                            }
                                        }
                                    } else if *stride == 1 {
                                        let src = &irow[ib..ib + len];
                                        for i in 0..len {
                                            gw += grow[i] * src[i];
                                        }
                                    } else {
                                        for i in 0..len {
                                            gw += grow[i] * irow[ib + i * stride];
                                        }
                                    }
                                }
                                grads[weight.0][widx] += gw;
                            }
                        }
                    }
                }
            }
            Op::Conv1x1 {
                input,
                weight,
                bias,
                in_c,
                h,
                w,
                out_c,
            } => {
                let hw = h * w;
                let inp = &self.nodes[input.0].value;
                let wt = &self.nodes[weight.0].value;
                for co in 0..*out_c {
                    let gout = &g_out[co * hw..(co + 1) * hw];
                    grads[bias.0][co] += gout.iter().sum::<f64>();
                    for ci in 0..*in_c {
                        let mut gw = 0.0;
                        let k = wt[co * in_c + ci];
                        let gin = &mut grads[input.0][ci * hw..(ci + 1) * hw];
                        let irow = &inp[ci * hw..(ci + 1) * hw];
                        for i in 0..hw {
                            gw += gout[i] * irow[i];
                            gin[i] += gout[i] * k;
                        }
                        grads[weight.0][co * in_c + ci] += gw;
                    }
                }
            }
            Op::Relu { input } => {
                let inp = &self.nodes[input.0].value;
                let gin = &mut grads[input.0];
                for i in 0..inp.len() {
                    if inp[i] > 0.0 {
                        gin[i] += g_out[i];
                    }
                }
            }
            Op::MeanPool { input, c, h, w } => {
                let hw = (h * w) as f64;
                let gin = &mut grads[input.0];
                for ci in 0..*c {
                    let g = g_out[ci] / hw;
                    for v in &mut gin[ci * h * w..(ci + 1) * h * w] {
                        *v += g;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                in_dim,
                out_dim,
            } => {
                let inp = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                for o in 0..*out_dim {
                    let go = g_out[o];
                    if go == 0.0 {
                        continue;
                    }
                    grads[bias.0][o] += go;
                    for i in 0..*in_dim {
                        grads[weight.0][o * in_dim + i] += go * inp[i];
                        grads[input.0][i] += go * w[o * in_dim + i];
                    }
                }
            }
            Op::Upsample2x { input, c, h, w } => {
                let (oh, ow) = (2 * h, 2 * w);
                let gin = &mut grads[input.0];
                for ci in 0..*c {
                    for y in 0..oh {
                        for x in 0..ow {
                            gin[(ci * h + y / 2) * w + x / 2] += g_out[(ci * oh + y) * ow + x];
                        }
                    }
                }
            }
            Op::Cosine { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let na = norm(va);
                let nb = norm(vb);
                if na == 0.0 || nb == 0.0 {
                    grads[idx] = g_out;
                    return;
                }
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let c = dot / (na * nb);
                let g = g_out[0];
                for i in 0..va.len() {
                    grads[a.0][i] += g * (vb[i] / (na * nb) - c * va[i] / (na * na));
                    grads[b.0][i] += g * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                }
            }
            Op::Dot { a, b } => {
                let g = g_out[0];
                for (i, &y) in self.nodes[b.0].value.iter().enumerate() {
                    grads[a.0][i] += g * y;
                }
                for (i, &x) in self.nodes[a.0].value.iter().enumerate() {
                    grads[b.0][i] += g * x;
                }
            }
            Op::NceTerm { pos, negs, tau } => {
                let g = g_out[0];
                let mut z = Vec::with_capacity(1 + negs.len());
                z.push(self.nodes[pos.0].value[0] / tau);
                z.extend(negs.iter().map(|n| self.nodes[n.0].value[0] / tau));
                let (_, lse) = softmax_stats(&z);
                grads[pos.0][0] += g * ((z[0] - lse).exp() - 1.0) / tau;
                for (i, n) in negs.iter().enumerate() {
                    grads[n.0][0] += g * (z[i + 1] - lse).exp() / tau;
                }
            }
            Op::WeightedSum { terms } => {
                let g = g_out[0];
                for &(c, id) in terms {
                    grads[id.0][0] += g * c;
                }
            }
            Op::CellVec { input, c, h, w, y, x } => {
                let gin = &mut grads[input.0];
                for ci in 0..*c {
                    gin[(ci * h + y) * w + x] += g_out[ci];
                }
            }
            Op::Row { input, row, dim } => {
                let gin = &mut grads[input.0][row * dim..(row + 1) * dim];
                for (gi, go) in gin.iter_mut().zip(&g_out) {
                    *gi += go;
                }
            }
            Op::LinearMapRows {
                weight,
                basis,
                n_rows,
                dim,
            } => {
                let gw = &mut grads[weight.0];
                for m in 0..*n_rows {
                    let brow = &basis[m * dim..(m + 1) * dim];
                    let grow = &g_out[m * dim..(m + 1) * dim];
                    for i in 0..*dim {
                        if grow[i] == 0.0 {
                            continue;
                        }
                        for j in 0..*dim {
                            gw[i * dim + j] += grow[i] * brow[j];
                        }
                    }
                }
            }
            Op::CeHard {
                logits,
                classes,
                npix,
                labels,
            } => {
                let g = g_out[0] / *npix as f64;
                let lg = &self.nodes[logits.0].value;
                let gl = &mut grads[logits.0];
                let mut z = vec![0.0; *classes];
                for px in 0..*npix {
                    for k in 0..*classes {
                        z[k] = lg[k * npix + px];
                    }
                    let (_, lse) = softmax_stats(&z);
                    for k in 0..*classes {
                        let p = (z[k] - lse).exp();
                        let y = if labels[px] as usize == k { 1.0 } else { 0.0 };
                        gl[k * npix + px] += g * (p - y);
                    }
                }
            }
            Op::CeSoft {
                logits,
                classes,
                npix,
                target,
            } => {
                let g = g_out[0] / *npix as f64;
                let lg = &self.nodes[logits.0].value;
                let gl = &mut grads[logits.0];
                let mut z = vec![0.0; *classes];
                for px in 0..*npix {
                    let mut qsum = 0.0;
                    for k in 0..*classes {
                        z[k] = lg[k * npix + px];
                        qsum += target[k * npix + px];
                    }
                    let (_, lse) = softmax_stats(&z);
                    for k in 0..*classes {
                        let p = (z[k] - lse).exp();
                        gl[k * npix + px] += g * (qsum * p - target[k * npix + px]);
                    }
                }
            }
        }
        grads[idx] = g_out;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with the zero-vector convention: 0 when either input
/// has zero norm.
pub fn cosine_value(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Valid output index range (inclusive) along one axis for a padded 3-tap
/// kernel: indices o with 0 <= o*stride + k - 1 < in_n.
#[inline]
fn conv_bounds(k: usize, in_n: usize, out_n: usize, stride: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = ((in_n - k) / stride).min(out_n - 1);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    inp: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
) {
    for co in 0..out_c {
        out[co * out_h * out_w..(co + 1) * out_h * out_w].fill(b[co]);
        for ci in 0..in_c {
            let iplane = &inp[ci * in_h * in_w..(ci + 1) * in_h * in_w];
            for ky in 0..3usize {
                let (oy_lo, oy_hi) = conv_bounds(ky, in_h, out_h, stride);
                for kx in 0..3usize {
                    let wv = w[((co * in_c + ci) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = conv_bounds(kx, in_w, out_w, stride);
                    let len = ox_hi - ox_lo + 1;
                    let ib = ox_lo * stride + kx - 1;
                    for oy in oy_lo..=oy_hi {
                        let iy = oy * stride + ky - 1;
                        let irow = &iplane[iy * in_w..(iy + 1) * in_w];
                        let orow =
                            &mut out[(co * out_h + oy) * out_w..(co * out_h + oy + 1) * out_w];
                        if stride == 1 {
                            let src = &irow[ib..ib + len];
                            let dst = &mut orow[ox_lo..ox_lo + len];
                            for i in 0..len {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for i in 0..len {
                                orow[ox_lo + i] += wv * irow[ib + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}
