//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Ops are recorded during the forward pass and replayed in reverse to
//! propagate cotangents. Parameters that do not influence the loss receive
//! exact zero gradients.

use super::conv;
use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Conv3d {
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
    },
    TransposedConv3d {
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
    },
    Dense {
        input: VarId,
        weights: VarId,
        bias: VarId,
    },
    LeakyRelu {
        input: VarId,
        slope: f64,
    },
    Tanh {
        input: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    AddChannelBias {
        input: VarId,
        bias: VarId,
    },
    Reshape {
        input: VarId,
    },
    Sum {
        input: VarId,
    },
    L1Loss {
        a: VarId,
        b: VarId,
    },
    MseLoss {
        a: VarId,
        b: VarId,
    },
    TripletLoss {
        anchor: VarId,
        positive: VarId,
        negative: VarId,
        margin: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward primitives; `backward` replays them in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a variable; exact zeros if the loss did not depend on it.
    pub fn get(&self, id: VarId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<VarId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(
                "forward pass produced a non-finite value".into(),
            ));
        }
        self.nodes.push(Node { value, op });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn conv3d(
        &mut self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, NumericsError> {
        let out = conv::conv3d(self.value(input), self.value(kernel), stride, pad)?;
        self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn transposed_conv3d(
        &mut self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, NumericsError> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(NumericsError::BadShape(format!(
                "transposed_conv3d input must be [C,D,H,W], got {:?}",
                x.shape()
            )));
        }
        let k = self.value(kernel);
        if k.shape().len() != 5 {
            return Err(NumericsError::BadShape(format!(
                "transposed_conv3d kernel must be [C_out,C_in,k,k,k], got {:?}",
                k.shape()
            )));
        }
        let kk = k.shape()[2];
        let spatial = [
            conv::transposed_out_extent(x.shape()[1], kk, stride, pad),
            conv::transposed_out_extent(x.shape()[2], kk, stride, pad),
            conv::transposed_out_extent(x.shape()[3], kk, stride, pad),
        ];
        let out = conv::conv3d_adjoint_input(x, k, stride, pad, spatial)?;
        self.push(
            out,
            Op::TransposedConv3d {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn dense(
        &mut self,
        input: VarId,
        weights: VarId,
        bias: VarId,
    ) -> Result<VarId, NumericsError> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        if w.shape().len() != 2 || x.shape().len() != 1 || b.shape().len() != 1 {
            return Err(NumericsError::BadShape(format!(
                "dense expects input [n], weights [m,n], bias [m]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if x.numel() != n || b.numel() != m {
            return Err(NumericsError::BadShape(format!(
                "dense shape mismatch: input {}, weights {m}x{n}, bias {}",
                x.numel(),
                b.numel()
            )));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = b.data()[i];
            let row = &w.data()[i * n..(i + 1) * n];
            for j in 0..n {
                acc += row[j] * x.data()[j];
            }
            out[i] = acc;
        }
        self.push(
            Tensor::from_vec(out),
            Op::Dense {
                input,
                weights,
                bias,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: VarId, slope: f64) -> Result<VarId, NumericsError> {
        let out = self
            .value(input)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn tanh(&mut self, input: VarId) -> Result<VarId, NumericsError> {
        let out = self.value(input).map(f64::tanh);
        self.push(out, Op::Tanh { input })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::BadShape(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b })
    }

    pub fn add_channel_bias(&mut self, input: VarId, bias: VarId) -> Result<VarId, NumericsError> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.shape().is_empty() || b.shape().len() != 1 || b.numel() != x.shape()[0] {
            return Err(NumericsError::BadShape(format!(
                "channel bias {:?} does not match leading axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let per = x.numel() / x.shape()[0];
        let mut data = x.data().to_vec();
        for c in 0..x.shape()[0] {
            let bv = b.data()[c];
            for v in &mut data[c * per..(c + 1) * per] {
                *v += bv;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddChannelBias { input, bias })
    }

    pub fn reshape(&mut self, input: VarId, shape: Vec<usize>) -> Result<VarId, NumericsError> {
        let out = self.value(input).reshaped(shape)?;
        self.push(out, Op::Reshape { input })
    }

    pub fn sum(&mut self, input: VarId) -> Result<VarId, NumericsError> {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn l1_loss(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::BadShape(format!(
                "l1_loss shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push(Tensor::scalar(s / n), Op::L1Loss { a, b })
    }

    pub fn mse_loss(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::BadShape(format!(
                "mse_loss shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::MseLoss { a, b })
    }

    /// `max(0, ||a - p||_2 - ||a - n||_2 + margin)`.
    pub fn triplet_loss(
        &mut self,
        anchor: VarId,
        positive: VarId,
        negative: VarId,
        margin: f64,
    ) -> Result<VarId, NumericsError> {
        let (a, p, n) = (
            self.value(anchor),
            self.value(positive),
            self.value(negative),
        );
        if a.shape() != p.shape() || a.shape() != n.shape() {
            return Err(NumericsError::BadShape(format!(
                "triplet_loss dimension mismatch: {:?}, {:?}, {:?}",
                a.shape(),
                p.shape(),
                n.shape()
            )));
        }
        if margin < 0.0 {
            return Err(NumericsError::BadShape("margin must be >= 0".into()));
        }
        let dp = l2_dist(a, p);
        let dn = l2_dist(a, n);
        let loss = (dp - dn + margin).max(0.0);
        self.push(
            Tensor::scalar(loss),
            Op::TripletLoss {
                anchor,
                positive,
                negative,
                margin,
            },
        )
    }

    /// Propagate cotangents from a scalar loss back to every variable.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::BadShape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv3d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let gi = conv::conv3d_adjoint_input(
                        &g,
                        k,
                        *stride,
                        *pad,
                        [x.shape()[1], x.shape()[2], x.shape()[3]],
                    )?;
                    let gk = conv::conv3d_grad_kernel(x, &g, k.shape(), *stride, *pad)?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::TransposedConv3d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let k = self.value(*kernel);
                    let gi = conv::conv3d(&g, k, *stride, *pad)?;
                    let gk =
                        conv::conv3d_grad_kernel(&g, self.value(*input), k.shape(), *stride, *pad)?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    let mut gi = vec![0.0; n];
                    let mut gw = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        let row = &w.data()[r * n..(r + 1) * n];
                        for c in 0..n {
                            gi[c] += gr * row[c];
                            gw[r * n + c] = gr * x.data()[c];
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_vec(gi));
                    accumulate(&mut grads, *weights, Tensor::new(vec![m, n], gw)?);
                    accumulate(&mut grads, *bias, g.clone());
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                        .collect();
                    accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Tanh { input } => {
                    let y = &self.nodes[i].value;
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gv * (1.0 - v * v))
                        .collect();
                    accumulate(&mut grads, *input, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddChannelBias { input, bias } => {
                    let x = self.value(*input);
                    let c = x.shape()[0];
                    let per = x.numel() / c;
                    let mut gb = vec![0.0; c];
                    for ch in 0..c {
                        gb[ch] = g.data()[ch * per..(ch + 1) * per].iter().sum();
                    }
                    accumulate(&mut grads, *input, g.clone());
                    accumulate(&mut grads, *bias, Tensor::from_vec(gb));
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, g.reshaped(shape)?);
                }
                Op::Sum { input } => {
                    let gv = g.item();
                    accumulate(
                        &mut grads,
                        *input,
                        Tensor::full(self.value(*input).shape(), gv),
                    );
                }
                Op::L1Loss { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = g.item() / ta.numel() as f64;
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; ta.numel()];
                    for (j, (&x, &y)) in ta.data().iter().zip(tb.data()).enumerate() {
                        let s = scale * (x - y).signum() * if x == y { 0.0 } else { 1.0 };
                        ga[j] = s;
                        gb[j] = -s;
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::MseLoss { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = 2.0 * g.item() / ta.numel() as f64;
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; ta.numel()];
                    for (j, (&x, &y)) in ta.data().iter().zip(tb.data()).enumerate() {
                        ga[j] = scale * (x - y);
                        gb[j] = -scale * (x - y);
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::TripletLoss {
                    anchor,
                    positive,
                    negative,
                    margin,
                } => {
                    let (a, p, n) = (
                        self.value(*anchor),
                        self.value(*positive),
                        self.value(*negative),
                    );
                    let dp = l2_dist(a, p);
                    let dn = l2_dist(a, n);
                    if dp - dn + margin <= 0.0 {
                        continue; // hinge inactive: zero gradient
                    }
                    let gv = g.item();
                    let d = a.numel();
                    let mut ga = vec![0.0; d];
                    let mut gp = vec![0.0; d];
                    let mut gn = vec![0.0; d];
                    for j in 0..d {
                        if dp > 0.0 {
                            let u = (a.data()[j] - p.data()[j]) / dp;
                            ga[j] += gv * u;
                            gp[j] -= gv * u;
                        }
                        if dn > 0.0 {
                            let u = (a.data()[j] - n.data()[j]) / dn;
                            ga[j] -= gv * u;
                            gn[j] += gv * u;
                        }
                    }
                    accumulate(&mut grads, *anchor, Tensor::new(a.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *positive, Tensor::new(p.shape().to_vec(), gp)?);
                    accumulate(&mut grads, *negative, Tensor::new(n.shape().to_vec(), gn)?);
                }
            }
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(NumericsError::NonFinite(
                    "backward pass produced a non-finite gradient".into(),
                ));
            }
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }
}

fn l2_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn accumulate(grads: &mut [Option<Tensor>], id: VarId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
