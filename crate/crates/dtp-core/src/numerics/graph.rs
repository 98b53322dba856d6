//! Eager computation graph with reverse-mode gradients.
//!
//! Every operation is recorded as a node holding its already-computed value,
//! so shapes are known at build time and `backward` is a single reverse sweep
//! over the tape. The op set is closed: each variant below carries a
//! hand-derived adjoint, and the whole engine is verified against central
//! finite differences (see `gradcheck`).

use crate::error::{DtpError, Result};
use crate::numerics::tensor::{strides, Real, Tensor};

/// Handle to a value recorded on the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// Spatial axis selector for rank-3 `[H,W,C]` / rank-4 `[N,H,W,C]` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { slot: usize },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    /// `a + broadcast(b)`; `b` is right-aligned broadcast into `a`'s shape.
    AddB(ValueId, ValueId),
    /// `a * broadcast(b)`.
    MulB(ValueId, ValueId),
    Scale(ValueId, f64),
    // The constant is read only through the derived Debug (error messages).
    Offset(ValueId, #[allow(dead_code)] f64),
    PowConst(ValueId, f64),
    /// Elementwise `a^e` with a one-element exponent tensor.
    PowElem(ValueId, ValueId),
    Exp(ValueId),
    Ln(ValueId),
    Sqrt(ValueId),
    Abs(ValueId),
    Softplus(ValueId),
    Sigmoid(ValueId),
    LeakyRelu(ValueId, f64),
    Clamp(ValueId, f64, f64),
    Softmax(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    ChannelMean(ValueId),
    ChannelPoolMean(ValueId),
    ChannelPoolMax(ValueId),
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: Padding,
    },
    PixelShuffle {
        input: ValueId,
        factor: usize,
    },
    ConcatChannels(Vec<ValueId>),
    SliceChannels {
        input: ValueId,
        start: usize,
        end: usize,
    },
    TakeEven {
        input: ValueId,
        axis: usize,
    },
    TakeOdd {
        input: ValueId,
        axis: usize,
    },
    Interleave {
        even: ValueId,
        odd: ValueId,
        axis: usize,
    },
    /// Shift by one along an axis with edge clamping. `forward` shifts
    /// toward lower indices (`out[i] = in[i+1]`, last repeated); otherwise
    /// `out[i] = in[i-1]` with the first repeated.
    ShiftEdge {
        input: ValueId,
        axis: usize,
        forward: bool,
    },
    /// Append one edge-replicated slice at the end of an axis.
    PadEdgeEnd {
        input: ValueId,
        axis: usize,
    },
    /// Keep the first `len` slices of an axis.
    CropAxis {
        input: ValueId,
        axis: usize,
        len: usize,
    },
    /// One element of the input as a scalar tensor.
    Element {
        input: ValueId,
        index: usize,
    },
    Reshape(ValueId),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op,
}

/// Gradients produced by a backward sweep, indexed by node.
pub struct GradientMap<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> GradientMap<F> {
    /// Gradient for a node. Nodes the loss does not reach yield `None`.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Decomposes a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(DtpError::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Records an input value with no gradient tracking of its own.
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<ValueId> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Result<ValueId> {
        self.leaf(Tensor::scalar(F::from_f64(value)))
    }

    /// Records a parameter leaf tied to a store slot (see `params`).
    pub fn param(&mut self, slot: usize, value: Tensor<F>) -> Result<ValueId> {
        self.push(value, Op::Param { slot })
    }

    /// Stable pairing of parameter-node gradients with their store slots.
    pub(crate) fn param_slots(&self) -> Vec<(usize, ValueId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { slot } => Some((slot, ValueId(i))),
                _ => None,
            })
            .collect()
    }

    fn binary_same_shape(&self, context: &str, a: ValueId, b: ValueId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DtpError::shape(context, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        self.push(data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        self.push(data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        self.push(data, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("div", a, b)?;
        let data = self.zip(a, b, |x, y| x / y);
        self.push(data, Op::Div(a, b))
    }

    fn zip(&self, a: ValueId, b: ValueId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let ta = self.value(a);
        let tb = self.value(b);
        Tensor::new(
            ta.shape().to_vec(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .expect("zip preserves length")
    }

    /// Checks that `b` broadcasts into `a` under right-aligned rules and
    /// returns, for each element of `a`, the corresponding flat index in `b`.
    fn broadcast_index(&self, context: &str, a: ValueId, b: ValueId) -> Result<Vec<usize>> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() {
            return Err(DtpError::shape(context, &sa, &sb));
        }
        let offset = sa.len() - sb.len();
        for (i, &db) in sb.iter().enumerate() {
            if db != 1 && db != sa[offset + i] {
                return Err(DtpError::shape(context, &sa, &sb));
            }
        }
        let stra = strides(&sa);
        let strb = strides(&sb);
        let len: usize = sa.iter().product();
        let mut map = Vec::with_capacity(len);
        for flat in 0..len {
            let mut ib = 0usize;
            for (i, &db) in sb.iter().enumerate() {
                if db != 1 {
                    let coord = (flat / stra[offset + i]) % sa[offset + i];
                    ib += coord * strb[i];
                }
            }
            map.push(ib);
        }
        Ok(map)
    }

    /// `a + b` with `b` broadcast into `a`'s shape.
    pub fn add_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let map = self.broadcast_index("add_b", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data: Vec<F> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[map[i]])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("broadcast preserves length");
        self.push(t, Op::AddB(a, b))
    }

    /// `a * b` with `b` broadcast into `a`'s shape.
    pub fn mul_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let map = self.broadcast_index("mul_b", a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data: Vec<F> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tb.data()[map[i]])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("broadcast preserves length");
        self.push(t, Op::MulB(a, b))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let fc = F::from_f64(c);
        let t = self.value(a).map(|x| x * fc);
        self.push(t, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let fc = F::from_f64(c);
        let t = self.value(a).map(|x| x + fc);
        self.push(t, Op::Offset(a, c))
    }

    pub fn neg(&mut self, a: ValueId) -> Result<ValueId> {
        self.scale(a, -1.0)
    }

    pub fn pow_const(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let fc = F::from_f64(c);
        let t = self.value(a).map(|x| x.powf(fc));
        self.push(t, Op::PowConst(a, c))
    }

    pub fn square(&mut self, a: ValueId) -> Result<ValueId> {
        self.mul(a, a)
    }

    /// Elementwise `a^e` where `e` is a one-element tensor.
    pub fn pow_elem(&mut self, a: ValueId, e: ValueId) -> Result<ValueId> {
        let ev = self.value(e).item()?;
        let t = self.value(a).map(|x| x.powf(ev));
        self.push(t, Op::PowElem(a, e))
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(|x| x.ln());
        self.push(t, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(|x| x.sqrt());
        self.push(t, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(|x| x.abs());
        self.push(t, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> Result<ValueId> {
        let s = F::from_f64(slope);
        let t = self.value(a).map(|x| if x >= F::zero() { x } else { x * s });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    /// Clamp with a straight-through subgradient: pass-through inside the
    /// interval (boundary inclusive), zero outside.
    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        let (flo, fhi) = (F::from_f64(lo), F::from_f64(hi));
        let t = self.value(a).map(|x| x.max(flo).min(fhi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| {
            DtpError::InvalidArgument("softmax requires rank >= 1".to_string())
        })?;
        let mut data = vec![F::zero(); ta.len()];
        for (r, row) in ta.data().chunks(cols).enumerate() {
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                data[r * cols + j] = data[r * cols + j] / denom;
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let mut acc = F::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(a))
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(DtpError::InvalidArgument("mean of empty tensor".to_string()));
        }
        let m = t.mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Per-channel mean over batch and spatial extents: `[.., C] -> [C]`.
    pub fn channel_mean(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, h, w, c) = self.value(a).nhwc()?;
        let count = F::from_f64((n * h * w) as f64);
        let mut out = vec![F::zero(); c];
        for (i, &v) in self.value(a).data().iter().enumerate() {
            out[i % c] += v;
        }
        for v in &mut out {
            *v = *v / count;
        }
        let t = Tensor::new(vec![c], out)?;
        self.push(t, Op::ChannelMean(a))
    }

    /// Mean over the channel axis: `[.., H, W, C] -> [.., H, W, 1]`.
    pub fn channel_pool_mean(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let (_, _, _, c) = ta.nhwc()?;
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let inv = F::one() / F::from_f64(c as f64);
        let data: Vec<F> = ta
            .data()
            .chunks(c)
            .map(|px| {
                let mut acc = F::zero();
                for &v in px {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::ChannelPoolMean(a))
    }

    /// Max over the channel axis: `[.., H, W, C] -> [.., H, W, 1]`.
    /// Ties route the gradient to the lowest channel index.
    pub fn channel_pool_max(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let (_, _, _, c) = ta.nhwc()?;
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let data: Vec<F> = ta
            .data()
            .chunks(c)
            .map(|px| {
                let mut m = px[0];
                for &v in &px[1..] {
                    m = m.max(v);
                }
                m
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::ChannelPoolMax(a))
    }

    /// 2-D convolution. Input `[N,H,W,Cin]` (rank 3 = batch one), kernel
    /// `[KH,KW,Cin,Cout]`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        if stride < 1 {
            return Err(DtpError::InvalidArgument("stride must be >= 1".to_string()));
        }
        let (n, h, w, cin) = self.value(input).nhwc()?;
        let kshape = self.shape(kernel).to_vec();
        let [kh, kw, kcin, cout] = match kshape.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(DtpError::shape(
                    "conv2d kernel must be [KH,KW,Cin,Cout]",
                    self.shape(input),
                    &kshape,
                ))
            }
        };
        if kcin != cin {
            return Err(DtpError::shape(
                "conv2d input channels vs kernel channels",
                self.shape(input),
                &kshape,
            ));
        }
        let geom = ConvGeometry::resolve(h, w, kh, kw, stride, padding)?;
        let mut out = vec![F::zero(); n * geom.oh * geom.ow * cout];
        let inp = self.value(input).data();
        let ker = self.value(kernel).data();
        for b in 0..n {
            for oy in 0..geom.oh {
                for ox in 0..geom.ow {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let k_base = (ky * kw + kx) * cin;
                            let out_base = ((b * geom.oh + oy) * geom.ow + ox) * cout;
                            for ci in 0..cin {
                                let x = inp[in_base + ci];
                                let kk = (k_base + ci) * cout;
                                for co in 0..cout {
                                    out[out_base + co] += x * ker[kk + co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if self.value(input).rank() == 3 {
            vec![geom.oh, geom.ow, cout]
        } else {
            vec![n, geom.oh, geom.ow, cout]
        };
        let t = Tensor::new(out_shape, out)?;
        self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// Channel-to-space rearrangement: `[.., H, W, C*r^2] -> [.., rH, rW, C]`.
    /// `out[ry+dy, rx+dx, c] = in[y, x, c*r^2 + dy*r + dx]`.
    pub fn pixel_shuffle(&mut self, input: ValueId, factor: usize) -> Result<ValueId> {
        if factor < 1 {
            return Err(DtpError::InvalidArgument(
                "pixel_shuffle factor must be >= 1".to_string(),
            ));
        }
        let (n, h, w, c_in) = self.value(input).nhwc()?;
        let r2 = factor * factor;
        if c_in % r2 != 0 {
            return Err(DtpError::InvalidArgument(format!(
                "pixel_shuffle: {c_in} channels not divisible by {r2}"
            )));
        }
        let c = c_in / r2;
        let mut out = vec![F::zero(); n * h * factor * w * factor * c];
        let inp = self.value(input).data();
        let (oh, ow) = (h * factor, w * factor);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let in_base = ((b * h + y) * w + x) * c_in;
                    for cc in 0..c {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let oy = y * factor + dy;
                                let ox = x * factor + dx;
                                let oi = ((b * oh + oy) * ow + ox) * c + cc;
                                out[oi] = inp[in_base + cc * r2 + dy * factor + dx];
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if self.value(input).rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![n, oh, ow, c]
        };
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::PixelShuffle { input, factor })
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(DtpError::InvalidArgument("concat of no tensors".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_c = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(DtpError::shape("concat_channels leading dims", &first, s));
            }
            total_c += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_c);
        for row in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = *t.shape().last().unwrap();
                out.extend_from_slice(&t.data()[row * c..(row + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_c);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::ConcatChannels(parts.to_vec()))
    }

    /// Channels `start..end` of the last axis.
    pub fn slice_channels(&mut self, input: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let s = self.shape(input).to_vec();
        let c = *s.last().unwrap();
        if start >= end || end > c {
            return Err(DtpError::InvalidArgument(format!(
                "slice_channels {start}..{end} out of range for {c} channels"
            )));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let t = self.value(input);
        let mut out = Vec::with_capacity(rows * (end - start));
        for row in 0..rows {
            out.extend_from_slice(&t.data()[row * c + start..row * c + end]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(end - start);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::SliceChannels { input, start, end })
    }

    fn resolve_axis(&self, input: ValueId, axis: Axis) -> Result<usize> {
        let (h_axis, w_axis) = self.value(input).spatial_axes()?;
        Ok(match axis {
            Axis::Height => h_axis,
            Axis::Width => w_axis,
        })
    }

    /// Even-indexed slices along a spatial axis; the extent must be even.
    pub fn take_even(&mut self, input: ValueId, axis: Axis) -> Result<ValueId> {
        self.take_parity(input, axis, 0)
    }

    /// Odd-indexed slices along a spatial axis; the extent must be even.
    pub fn take_odd(&mut self, input: ValueId, axis: Axis) -> Result<ValueId> {
        self.take_parity(input, axis, 1)
    }

    fn take_parity(&mut self, input: ValueId, axis: Axis, parity: usize) -> Result<ValueId> {
        let ax = self.resolve_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, n, inner) = axis_split(&shape, ax);
        if n % 2 != 0 {
            return Err(DtpError::InvalidArgument(format!(
                "take_even/take_odd requires an even extent, got {n} in {shape:?}"
            )));
        }
        let half = n / 2;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * half * inner);
        for o in 0..outer {
            for i in 0..half {
                let base = (o * n + 2 * i + parity) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[ax] = half;
        let t = Tensor::new(out_shape, out)?;
        let op = if parity == 0 {
            Op::TakeEven { input, axis: ax }
        } else {
            Op::TakeOdd { input, axis: ax }
        };
        self.push(t, op)
    }

    /// Inverse of the even/odd split: `out[2i] = even[i]`, `out[2i+1] = odd[i]`.
    pub fn interleave(&mut self, even: ValueId, odd: ValueId, axis: Axis) -> Result<ValueId> {
        self.binary_same_shape("interleave", even, odd)?;
        let ax = self.resolve_axis(even, axis)?;
        let shape = self.shape(even).to_vec();
        let (outer, half, inner) = axis_split(&shape, ax);
        let se = self.value(even).data();
        let so = self.value(odd).data();
        let mut out = Vec::with_capacity(outer * half * 2 * inner);
        for o in 0..outer {
            for i in 0..half {
                let base = (o * half + i) * inner;
                out.extend_from_slice(&se[base..base + inner]);
                out.extend_from_slice(&so[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[ax] = half * 2;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Interleave { even, odd, axis: ax })
    }

    /// `out[i] = in[i+1]` (forward) or `in[i-1]` (backward) with clamped edges.
    pub fn shift_edge(&mut self, input: ValueId, axis: Axis, forward: bool) -> Result<ValueId> {
        let ax = self.resolve_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, n, inner) = axis_split(&shape, ax);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            for i in 0..n {
                let j = if forward { (i + 1).min(n - 1) } else { i.saturating_sub(1) };
                let base = (o * n + j) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::ShiftEdge { input, axis: ax, forward })
    }

    /// Appends one edge-replicated slice at the end of a spatial axis.
    pub fn pad_edge_end(&mut self, input: ValueId, axis: Axis) -> Result<ValueId> {
        let ax = self.resolve_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, n, inner) = axis_split(&shape, ax);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (n + 1) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            let last = (o * n + n - 1) * inner;
            out.extend_from_slice(&src[last..last + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[ax] = n + 1;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::PadEdgeEnd { input, axis: ax })
    }

    /// Keeps the first `len` slices along a spatial axis.
    pub fn crop_axis(&mut self, input: ValueId, axis: Axis, len: usize) -> Result<ValueId> {
        let ax = self.resolve_axis(input, axis)?;
        let shape = self.shape(input).to_vec();
        let (outer, n, inner) = axis_split(&shape, ax);
        if len == 0 || len > n {
            return Err(DtpError::InvalidArgument(format!(
                "crop_axis to {len} out of range for extent {n}"
            )));
        }
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[o * n * inner..(o * n + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[ax] = len;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::CropAxis { input, axis: ax, len })
    }

    /// One element of the input as a scalar tensor.
    pub fn element(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        let t = self.value(input);
        if index >= t.len() {
            return Err(DtpError::InvalidArgument(format!(
                "element index {index} out of range for {} elements",
                t.len()
            )));
        }
        let v = t.data()[index];
        self.push(Tensor::scalar(v), Op::Element { input, index })
    }

    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let t = self.value(input).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(input))
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// the loss reaches.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap<F>> {
        if self.value(loss).len() != 1 {
            return Err(DtpError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(ValueId(i), &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], id: ValueId, delta: Tensor<F>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(
        &self,
        id: ValueId,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = self.elementwise_grad(g, *b, |gv, bv| gv * bv);
                let gb = self.elementwise_grad(g, *a, |gv, av| gv * av);
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                let ta = self.value(*a);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&gv, &bv)| gv / bv)
                        .collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect(),
                )?;
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::AddB(a, b) => {
                self.add_grad(grads, *a, g.clone());
                let map = self
                    .broadcast_index("add_b backward", *a, *b)
                    .expect("checked at record time");
                let mut gb = Tensor::zeros(self.shape(*b));
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[map[i]] += gv;
                }
                self.add_grad(grads, *b, gb);
            }
            Op::MulB(a, b) => {
                let map = self
                    .broadcast_index("mul_b backward", *a, *b)
                    .expect("checked at record time");
                let tb = self.value(*b);
                let ta = self.value(*a);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * tb.data()[map[i]])
                        .collect(),
                )?;
                let mut gb = Tensor::zeros(tb.shape());
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[map[i]] += gv * ta.data()[i];
                }
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let fc = F::from_f64(*c);
                self.add_grad(grads, *a, g.map(|x| x * fc));
            }
            Op::Offset(a, _) => {
                self.add_grad(grads, *a, g.clone());
            }
            Op::PowConst(a, c) => {
                let ta = self.value(*a);
                let fc = F::from_f64(*c);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv * fc * pow_dx(x, *c))
                        .collect(),
                )?;
                self.add_grad(grads, *a, ga);
            }
            Op::PowElem(a, e) => {
                let ta = self.value(*a);
                let ev = self.value(*e).item()?;
                let efl = ev.to_f64();
                let y = &node.value;
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv * ev * pow_dx(x, efl))
                        .collect(),
                )?;
                let mut ge = F::zero();
                for ((&gv, &x), &yv) in g.data().iter().zip(ta.data()).zip(y.data()) {
                    if x > F::zero() {
                        ge += gv * yv * x.ln();
                    }
                }
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *e, Tensor::scalar(ge));
            }
            Op::Exp(a) => {
                let ga = self.elementwise_grad(g, id, |gv, yv| gv * yv);
                self.add_grad(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = self.elementwise_grad(g, *a, |gv, xv| gv / xv);
                self.add_grad(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let two = F::from_f64(2.0);
                let ga = self.elementwise_grad(g, id, |gv, yv| {
                    if yv > F::zero() {
                        gv / (two * yv)
                    } else {
                        F::zero()
                    }
                });
                self.add_grad(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = self.elementwise_grad(g, *a, |gv, xv| {
                    if xv > F::zero() {
                        gv
                    } else if xv < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                });
                self.add_grad(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = self.elementwise_grad(g, *a, |gv, xv| gv * sigmoid(xv));
                self.add_grad(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = self.elementwise_grad(g, id, |gv, yv| gv * yv * (F::one() - yv));
                self.add_grad(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = F::from_f64(*slope);
                let ga = self.elementwise_grad(g, *a, |gv, xv| {
                    if xv >= F::zero() {
                        gv
                    } else {
                        gv * s
                    }
                });
                self.add_grad(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (flo, fhi) = (F::from_f64(*lo), F::from_f64(*hi));
                let ga = self.elementwise_grad(g, *a, |gv, xv| {
                    if xv >= flo && xv <= fhi {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.add_grad(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..y.len() / cols {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let mut dot = F::zero();
                    for (yv, gv) in ys.iter().zip(gs) {
                        dot += *yv * *gv;
                    }
                    for j in 0..cols {
                        ga.data_mut()[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                self.add_grad(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gv = g.item()? / F::from_f64(n as f64);
                self.add_grad(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
            Op::ChannelMean(a) => {
                let (n, h, w, c) = self.value(*a).nhwc()?;
                let inv = F::one() / F::from_f64((n * h * w) as f64);
                let mut ga = Tensor::zeros(self.shape(*a));
                for (i, gv) in ga.data_mut().iter_mut().enumerate() {
                    *gv = g.data()[i % c] * inv;
                }
                self.add_grad(grads, *a, ga);
            }
            Op::ChannelPoolMean(a) => {
                let (_, _, _, c) = self.value(*a).nhwc()?;
                let inv = F::one() / F::from_f64(c as f64);
                let mut ga = Tensor::zeros(self.shape(*a));
                for (i, gv) in ga.data_mut().iter_mut().enumerate() {
                    *gv = g.data()[i / c] * inv;
                }
                self.add_grad(grads, *a, ga);
            }
            Op::ChannelPoolMax(a) => {
                let ta = self.value(*a);
                let (_, _, _, c) = ta.nhwc()?;
                let mut ga = Tensor::zeros(ta.shape());
                for (p, px) in ta.data().chunks(c).enumerate() {
                    let mut best = 0usize;
                    for (j, &v) in px.iter().enumerate() {
                        if v > px[best] {
                            best = j;
                        }
                    }
                    ga.data_mut()[p * c + best] = g.data()[p];
                }
                self.add_grad(grads, *a, ga);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                self.conv2d_backward(*input, *kernel, *stride, *padding, g, grads)?;
            }
            Op::PixelShuffle { input, factor } => {
                let (n, h, w, c_in) = self.value(*input).nhwc()?;
                let r = *factor;
                let c = c_in / (r * r);
                let (oh, ow) = (h * r, w * r);
                let mut ga = Tensor::zeros(self.shape(*input));
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let in_base = ((b * h + y) * w + x) * c_in;
                            for cc in 0..c {
                                for dy in 0..r {
                                    for dx in 0..r {
                                        let oi = ((b * oh + y * r + dy) * ow + x * r + dx) * c + cc;
                                        ga.data_mut()[in_base + cc * r * r + dy * r + dx] +=
                                            g.data()[oi];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::ConcatChannels(parts) => {
                let lead: usize = {
                    let s = g.shape();
                    s[..s.len() - 1].iter().product()
                };
                let total_c = *g.shape().last().unwrap();
                let mut offset = 0usize;
                for &p in parts {
                    let c = *self.shape(p).last().unwrap();
                    let mut gp = Tensor::zeros(self.shape(p));
                    for row in 0..lead {
                        let src = row * total_c + offset;
                        gp.data_mut()[row * c..(row + 1) * c]
                            .copy_from_slice(&g.data()[src..src + c]);
                    }
                    self.add_grad(grads, p, gp);
                    offset += c;
                }
            }
            Op::SliceChannels { input, start, end } => {
                let c = *self.shape(*input).last().unwrap();
                let rows = self.value(*input).len() / c;
                let width = end - start;
                let mut ga = Tensor::zeros(self.shape(*input));
                for row in 0..rows {
                    for j in 0..width {
                        ga.data_mut()[row * c + start + j] += g.data()[row * width + j];
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::TakeEven { input, axis } | Op::TakeOdd { input, axis } => {
                let parity = match node.op {
                    Op::TakeEven { .. } => 0,
                    _ => 1,
                };
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let half = n / 2;
                let mut ga = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..half {
                        let dst = (o * n + 2 * i + parity) * inner;
                        let src = (o * half + i) * inner;
                        for j in 0..inner {
                            ga.data_mut()[dst + j] += g.data()[src + j];
                        }
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::Interleave { even, odd, axis } => {
                let shape = self.shape(*even).to_vec();
                let (outer, half, inner) = axis_split(&shape, *axis);
                let n = half * 2;
                let mut ge = Tensor::zeros(&shape);
                let mut go = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..half {
                        let dst = (o * half + i) * inner;
                        let src_e = (o * n + 2 * i) * inner;
                        let src_o = (o * n + 2 * i + 1) * inner;
                        for j in 0..inner {
                            ge.data_mut()[dst + j] += g.data()[src_e + j];
                            go.data_mut()[dst + j] += g.data()[src_o + j];
                        }
                    }
                }
                self.add_grad(grads, *even, ge);
                self.add_grad(grads, *odd, go);
            }
            Op::ShiftEdge { input, axis, forward } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mut ga = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..n {
                        let j = if *forward { (i + 1).min(n - 1) } else { i.saturating_sub(1) };
                        let dst = (o * n + j) * inner;
                        let src = (o * n + i) * inner;
                        for k in 0..inner {
                            ga.data_mut()[dst + k] += g.data()[src + k];
                        }
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::PadEdgeEnd { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let np = n + 1;
                let mut ga = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..np {
                        let dst = (o * n + i.min(n - 1)) * inner;
                        let src = (o * np + i) * inner;
                        for k in 0..inner {
                            ga.data_mut()[dst + k] += g.data()[src + k];
                        }
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::CropAxis { input, axis, len } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mut ga = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..*len {
                        let dst = (o * n + i) * inner;
                        let src = (o * len + i) * inner;
                        for k in 0..inner {
                            ga.data_mut()[dst + k] += g.data()[src + k];
                        }
                    }
                }
                self.add_grad(grads, *input, ga);
            }
            Op::Element { input, index } => {
                let mut ga = Tensor::zeros(self.shape(*input));
                ga.data_mut()[*index] = g.item()?;
                self.add_grad(grads, *input, ga);
            }
            Op::Reshape(input) => {
                let ga = Tensor::new(self.shape(*input).to_vec(), g.data().to_vec())?;
                self.add_grad(grads, *input, ga);
            }
        }
        Ok(())
    }

    /// Builds a gradient tensor by zipping the incoming gradient with the
    /// values of some node (an input or the output itself).
    fn elementwise_grad(&self, g: &Tensor<F>, with: ValueId, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let tv = self.value(with);
        Tensor::new(
            g.shape().to_vec(),
            g.data()
                .iter()
                .zip(tv.data())
                .map(|(&gv, &xv)| f(gv, xv))
                .collect(),
        )
        .expect("gradient shape matches")
    }

    fn conv2d_backward(
        &self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: Padding,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let (n, h, w, cin) = self.value(input).nhwc()?;
        let kshape = self.shape(kernel);
        let (kh, kw, cout) = (kshape[0], kshape[1], kshape[3]);
        let geom = ConvGeometry::resolve(h, w, kh, kw, stride, padding)?;
        let inp = self.value(input).data();
        let ker = self.value(kernel).data();
        let mut g_in = Tensor::zeros(self.shape(input));
        let mut g_k = Tensor::zeros(kshape);
        for b in 0..n {
            for oy in 0..geom.oh {
                for ox in 0..geom.ow {
                    let out_base = ((b * geom.oh + oy) * geom.ow + ox) * cout;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - geom.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - geom.pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_base = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let k_base = (ky * kw + kx) * cin;
                            for ci in 0..cin {
                                let kk = (k_base + ci) * cout;
                                let x = inp[in_base + ci];
                                let mut acc = F::zero();
                                for co in 0..cout {
                                    let gv = g.data()[out_base + co];
                                    acc += gv * ker[kk + co];
                                    g_k.data_mut()[kk + co] += gv * x;
                                }
                                g_in.data_mut()[in_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        self.add_grad(grads, input, g_in);
        self.add_grad(grads, kernel, g_k);
        Ok(())
    }
}

struct ConvGeometry {
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn resolve(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        match padding {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(DtpError::InvalidArgument(format!(
                        "valid conv: input {h}x{w} smaller than kernel {kh}x{kw}"
                    )));
                }
                Ok(ConvGeometry {
                    oh: (h - kh) / stride + 1,
                    ow: (w - kw) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                Ok(ConvGeometry {
                    oh,
                    ow,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx x^c with the subgradient convention 0 at x = 0 (except c = 1) and
/// at negative bases with fractional exponents.
fn pow_dx<F: Real>(x: F, c: f64) -> F {
    if x == F::zero() {
        if c == 1.0 {
            F::one()
        } else {
            F::zero()
        }
    } else if x < F::zero() && c.fract() != 0.0 {
        F::zero()
    } else {
        x.powf(F::from_f64(c - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Central finite differences on the leaf at `slot` of a rebuilt graph.
    fn fd_check(
        build: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> ValueId,
        inputs: &[Tensor<f64>],
        tol: f64,
    ) {
        let mut g = Graph::new();
        let loss = build(&mut g, inputs);
        let grads = g.backward(loss).unwrap();
        let mut leaf_ids = Vec::new();
        {
            let mut probe = Graph::new();
            let _ = build(&mut probe, inputs);
            for i in 0..inputs.len() {
                leaf_ids.push(ValueId(i));
            }
        }
        let step = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(leaf_ids[which])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for k in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[k] += step;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[k] -= step;
                let mut gp = Graph::new();
                let lp = build(&mut gp, &plus);
                let mut gm = Graph::new();
                let lm = build(&mut gm, &minus);
                let fd = (gp.value(lp).item().unwrap() - gm.value(lm).item().unwrap())
                    / (2.0 * step);
                let a = analytic.data()[k];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                let rel = (a - fd).abs() / denom;
                assert!(
                    rel < tol,
                    "input {which} elem {k}: analytic {a} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn add_mul_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let ib = g.leaf(inp[1].clone()).unwrap();
                let s = g.add(ia, ib).unwrap();
                let m = g.mul(s, ib).unwrap();
                g.sum(m).unwrap()
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn div_sigmoid_softplus_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 2, 1], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 2, 1], 0.5, 2.0);
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let ib = g.leaf(inp[1].clone()).unwrap();
                let d = g.div(ia, ib).unwrap();
                let s = g.sigmoid(d).unwrap();
                let p = g.softplus(s).unwrap();
                g.mean(p).unwrap()
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn broadcast_ops_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        let chan = rand_tensor(&mut rng, &[3], 0.2, 1.5);
        let scalarish = rand_tensor(&mut rng, &[1], 0.2, 1.5);
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let ic = g.leaf(inp[1].clone()).unwrap();
                let is = g.leaf(inp[2].clone()).unwrap();
                let m = g.mul_b(ia, ic).unwrap();
                let s = g.add_b(m, is).unwrap();
                let sq = g.square(s).unwrap();
                g.mean(sq).unwrap()
            },
            &[a, chan, scalarish],
            1e-6,
        );
    }

    #[test]
    fn conv2d_same_and_valid_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, &[5, 4, 2], -1.0, 1.0);
        let kernel = rand_tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
        for padding in [Padding::Same, Padding::Valid] {
            fd_check(
                |g, inp| {
                    let ii = g.leaf(inp[0].clone()).unwrap();
                    let ik = g.leaf(inp[1].clone()).unwrap();
                    let c = g.conv2d(ii, ik, 1, padding).unwrap();
                    let sq = g.square(c).unwrap();
                    g.sum(sq).unwrap()
                },
                &[input.clone(), kernel.clone()],
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_stride_two_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&mut rng, &[6, 6, 1], -1.0, 1.0);
        let kernel = rand_tensor(&mut rng, &[2, 2, 1, 2], -0.5, 0.5);
        fd_check(
            |g, inp| {
                let ii = g.leaf(inp[0].clone()).unwrap();
                let ik = g.leaf(inp[1].clone()).unwrap();
                let c = g.conv2d(ii, ik, 2, Padding::Valid).unwrap();
                let sq = g.square(c).unwrap();
                g.sum(sq).unwrap()
            },
            &[input, kernel],
            1e-6,
        );
    }

    #[test]
    fn pool_softmax_pow_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[3, 3, 4], 0.1, 1.0);
        let e = Tensor::new(vec![1], vec![1.7]).unwrap();
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let ie = g.leaf(inp[1].clone()).unwrap();
                let p = g.pow_elem(ia, ie).unwrap();
                let cm = g.channel_mean(p).unwrap();
                let sm = g.softmax(cm).unwrap();
                let pm = g.channel_pool_mean(ia).unwrap();
                let pmx = g.channel_pool_max(ia).unwrap();
                let cat = g.concat_channels(&[pm, pmx]).unwrap();
                // sum(softmax) is constant; pick one entry so gradients flow.
                let s1 = g.element(sm, 0).unwrap();
                let s2 = g.mean(cat).unwrap();
                g.add(s1, s2).unwrap()
            },
            &[a, e],
            1e-5,
        );
    }

    #[test]
    fn structural_ops_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[4, 6, 2], -1.0, 1.0);
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let even = g.take_even(ia, Axis::Width).unwrap();
                let odd = g.take_odd(ia, Axis::Width).unwrap();
                let shifted = g.shift_edge(even, Axis::Width, true).unwrap();
                let merged = g.interleave(shifted, odd, Axis::Width).unwrap();
                let padded = g.pad_edge_end(merged, Axis::Height).unwrap();
                let cropped = g.crop_axis(padded, Axis::Height, 4).unwrap();
                let sq = g.square(cropped).unwrap();
                g.sum(sq).unwrap()
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn pixel_shuffle_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[2, 3, 8], -1.0, 1.0);
        fd_check(
            |g, inp| {
                let ia = g.leaf(inp[0].clone()).unwrap();
                let ps = g.pixel_shuffle(ia, 2).unwrap();
                let sq = g.square(ps).unwrap();
                g.sum(sq).unwrap()
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn clamp_straight_through_subgradient() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::new(vec![5], vec![-0.5, 0.0, 0.5, 1.0, 1.5]).unwrap())
            .unwrap();
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        // Outside: zero. Inside and at both boundaries: pass-through.
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn scalar_ops_trivial_gradients() {
        // loss = sum(p) -> all ones; loss = sum(p*p) at [1,-2,3] -> [2,-4,6]
        let mut g = Graph::new();
        let p = g
            .leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let p = g
            .leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap())
            .unwrap();
        let sq = g.square(p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(Tensor::zeros(&[4, 4, 2])).unwrap();
        let k = g.leaf(Tensor::zeros(&[3, 3, 3, 4])).unwrap();
        let err = g.conv2d(i, k, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 4, 2]") && msg.contains("[3, 3, 3, 4]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = rand_tensor(&mut rng, &[4, 5], -30.0, 30.0);
            let mut g = Graph::new();
            let x = g.leaf(t).unwrap();
            let y = g.softmax(x).unwrap();
            for row in g.value(y).data().chunks(5) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn sigmoid_output_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = rand_tensor(&mut rng, &[100], -50.0, 50.0);
        let mut g = Graph::new();
        let x = g.leaf(t).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn backward_linearity() {
        // grad of (a*f + b*g) == a*grad(f) + b*grad(g)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_tensor(&mut rng, &[6], 0.1, 1.0);
        let (ca, cb) = (2.5, -1.25);

        let grad_of = |combine: &dyn Fn(&mut Graph<f64>, ValueId) -> ValueId| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(p.clone()).unwrap();
            let loss = combine(&mut g, x);
            g.backward(loss).unwrap().get(x).unwrap().data().to_vec()
        };

        let f = |g: &mut Graph<f64>, x: ValueId| {
            let sq = g.square(x).unwrap();
            g.sum(sq).unwrap()
        };
        let h = |g: &mut Graph<f64>, x: ValueId| {
            let sg = g.sigmoid(x).unwrap();
            g.mean(sg).unwrap()
        };
        let gf = grad_of(&f);
        let gh = grad_of(&h);
        let gcomb = grad_of(&|g: &mut Graph<f64>, x: ValueId| {
            let lf = f(g, x);
            let lh = h(g, x);
            let sf = g.scale(lf, ca).unwrap();
            let sh = g.scale(lh, cb).unwrap();
            g.add(sf, sh).unwrap()
        });
        for i in 0..gf.len() {
            let expect = ca * gf[i] + cb * gh[i];
            assert!((gcomb[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = rand_tensor(&mut rng, &[6, 6, 3], 0.0, 1.0);
        let kernel = rand_tensor(&mut rng, &[3, 3, 3, 4], -0.5, 0.5);
        let run = || {
            let mut g = Graph::new();
            let i = g.leaf(input.clone()).unwrap();
            let k = g.leaf(kernel.clone()).unwrap();
            let c = g.conv2d(i, k, 1, Padding::Same).unwrap();
            let s = g.sigmoid(c).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
