//! Small dense building blocks with hand-written reverse passes.
//!
//! Activations are stored channel-major: a [`Mat`] has one row per channel
//! and one column per point (or cell). Every output element is accumulated
//! in a fixed order that does not depend on the number of columns, so a
//! point evaluated alone or inside a large batch gives the same bits.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// From point-major data (`n` points of `rows` values each).
    pub fn from_point_major(rows: usize, values: &[f64]) -> Self {
        let cols = values.len() / rows;
        let mut m = Self::zeros(rows, cols);
        for (c, chunk) in values.chunks_exact(rows).enumerate() {
            for (r, v) in chunk.iter().enumerate() {
                m.data[r * cols + c] = *v;
            }
        }
        m
    }

    pub fn to_point_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                out[c * self.rows + r] = *v;
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Fully connected map `z = W x + b`, `W` row-major `out × inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self { inp, out, w: vec![0.0; inp * out], b: vec![0.0; out] }
    }

    /// Uniform ±√(6/inp) weights (He-style for leaky-ReLU), zero biases.
    pub fn random<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inp as f64).sqrt();
        let w = (0..inp * out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { inp, out, w, b: vec![0.0; out] }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows, self.inp, "layer input width");
        let n = x.cols;
        let mut z = Mat::zeros(self.out, n);
        for o in 0..self.out {
            let zr = &mut z.data[o * n..(o + 1) * n];
            let wr = &self.w[o * self.inp..(o + 1) * self.inp];
            for (k, &w) in wr.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let xr = &x.data[k * n..(k + 1) * n];
                for (zv, xv) in zr.iter_mut().zip(xr) {
                    *zv += w * xv;
                }
            }
            let b = self.b[o];
            zr.iter_mut().for_each(|v| *v += b);
        }
        z
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx` when requested.
    pub fn backward(&self, x: &Mat, dz: &Mat, grad: &mut Layer, want_dx: bool) -> Option<Mat> {
        let n = x.cols;
        for o in 0..self.out {
            let dzr = dz.row(o);
            grad.b[o] += dzr.iter().sum::<f64>();
            for k in 0..self.inp {
                grad.w[o * self.inp + k] += dot(dzr, x.row(k));
            }
        }
        want_dx.then(|| {
            let mut dx = Mat::zeros(self.inp, n);
            for o in 0..self.out {
                let dzr = &dz.data[o * n..(o + 1) * n];
                for k in 0..self.inp {
                    let w = self.w[o * self.inp + k];
                    let dxr = &mut dx.data[k * n..(k + 1) * n];
                    for (d, g) in dxr.iter_mut().zip(dzr) {
                        *d += w * g;
                    }
                }
            }
            dx
        })
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Dot product with eight independent partial sums (fixed order).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn leaky(z: &Mat) -> Mat {
    let data = z.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
    Mat { rows: z.rows, cols: z.cols, data }
}

/// `da ⊙ leaky'(z)`.
pub fn leaky_back(z: &Mat, da: &Mat) -> Mat {
    let data = z.data.iter().zip(&da.data).map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g }).collect();
    Mat { rows: z.rows, cols: z.cols, data }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output nonlinearity of an MLP head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

impl OutputActivation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Self::Sigmoid),
            "softmax" => Some(Self::Softmax),
            _ => None,
        }
    }

    fn apply(&self, z: &Mat) -> Mat {
        match self {
            Self::Sigmoid => Mat { rows: z.rows, cols: z.cols, data: z.data.iter().map(|&v| sigmoid(v)).collect() },
            Self::Softmax => {
                let mut out = Mat::zeros(z.rows, z.cols);
                for c in 0..z.cols {
                    let m = (0..z.rows).map(|r| z.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for r in 0..z.rows {
                        let e = (z.get(r, c) - m).exp();
                        out.data[r * z.cols + c] = e;
                        total += e;
                    }
                    for r in 0..z.rows {
                        out.data[r * z.cols + c] /= total;
                    }
                }
                out
            }
        }
    }

    /// `dz` from `dy` given the activation output `y`.
    fn back(&self, y: &Mat, dy: &Mat) -> Mat {
        match self {
            Self::Sigmoid => Mat {
                rows: y.rows,
                cols: y.cols,
                data: y.data.iter().zip(&dy.data).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
            },
            Self::Softmax => {
                let mut dz = Mat::zeros(y.rows, y.cols);
                for c in 0..y.cols {
                    let dot: f64 = (0..y.rows).map(|r| y.get(r, c) * dy.get(r, c)).sum();
                    for r in 0..y.rows {
                        dz.data[r * y.cols + c] = y.get(r, c) * (dy.get(r, c) - dot);
                    }
                }
                dz
            }
        }
    }
}

/// Multi-layer perceptron: leaky-ReLU between layers, `output` at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output: OutputActivation,
}

/// Pre-activations of every layer, kept for the reverse pass.
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    pub output: Mat,
}

impl MlpParams {
    pub fn random<R: Rng>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Layer::random(w[0], w[1], rng)).collect();
        Self { layers, output }
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Self {
        Self { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(), output }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inp];
        s.extend(self.layers.iter().map(|l| l.out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        self.forward_cached(x).output
    }

    pub fn forward_cached(&self, x: &Mat) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let next = if i + 1 == self.layers.len() { self.output.apply(&z) } else { leaky(&z) };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        MlpCache { inputs, pre, output: h }
    }

    /// Accumulates parameter gradients into `grad`; returns `dx`.
    pub fn backward(&self, cache: &MlpCache, dy: &Mat, grad: &mut MlpParams) -> Mat {
        let last = self.layers.len() - 1;
        let mut dz = self.output.back(&cache.output, dy);
        for i in (0..=last).rev() {
            let dx = self.layers[i].backward(&cache.inputs[i], &dz, &mut grad.layers[i], true).unwrap();
            if i == 0 {
                return dx;
            }
            dz = leaky_back(&cache.pre[i - 1], &dx);
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

/// Averaging of a regular lattice into `factor`-sized blocks (partial
/// blocks at the upper border average what they cover).
#[derive(Debug, Clone)]
pub struct Pool {
    pub parent: Vec<u32>,
    inv_count: Vec<f64>,
    pub coarse_dims: Vec<usize>,
}

impl Pool {
    /// `dims` lists extents fastest axis first.
    pub fn new(dims: &[usize], factor: usize) -> Self {
        let coarse_dims: Vec<usize> = dims.iter().map(|d| d.div_ceil(factor)).collect();
        let n: usize = dims.iter().product();
        let mut parent = Vec::with_capacity(n);
        let mut count = vec![0usize; coarse_dims.iter().product()];
        for lin in 0..n {
            let mut rem = lin;
            let (mut c, mut stride) = (0, 1);
            for (d, cd) in dims.iter().zip(&coarse_dims) {
                c += (rem % d) / factor * stride;
                rem /= d;
                stride *= cd;
            }
            parent.push(c as u32);
            count[c] += 1;
        }
        let inv_count = count.iter().map(|&c| 1.0 / c as f64).collect();
        Self { parent, inv_count, coarse_dims }
    }

    pub fn coarse_len(&self) -> usize {
        self.inv_count.len()
    }

    pub fn down(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, self.coarse_len());
        for r in 0..x.rows {
            let (src, dst) = (x.row(r), out.row_mut(r));
            for (i, &p) in self.parent.iter().enumerate() {
                dst[p as usize] += src[i];
            }
            dst.iter_mut().zip(&self.inv_count).for_each(|(v, s)| *v *= s);
        }
        out
    }

    pub fn down_back(&self, dy: &Mat) -> Mat {
        let mut dx = Mat::zeros(dy.rows, self.parent.len());
        for r in 0..dy.rows {
            let (src, dst) = (dy.row(r), dx.row_mut(r));
            for (i, &p) in self.parent.iter().enumerate() {
                dst[i] = src[p as usize] * self.inv_count[p as usize];
            }
        }
        dx
    }

    pub fn up(&self, y: &Mat) -> Mat {
        let mut out = Mat::zeros(y.rows, self.parent.len());
        for r in 0..y.rows {
            let (src, dst) = (y.row(r), out.row_mut(r));
            for (i, &p) in self.parent.iter().enumerate() {
                dst[i] = src[p as usize];
            }
        }
        out
    }

    pub fn up_back(&self, dx: &Mat) -> Mat {
        let mut dy = Mat::zeros(dx.rows, self.coarse_len());
        for r in 0..dx.rows {
            let (src, dst) = (dx.row(r), dy.row_mut(r));
            for (i, &p) in self.parent.iter().enumerate() {
                dst[p as usize] += src[i];
            }
        }
        dy
    }
}

/// Neighbour table for a `3^d` zero-padded convolution on a lattice.
#[derive(Debug, Clone)]
pub struct Taps {
    /// `cells × 3^d` source indices, `u32::MAX` outside the lattice.
    index: Vec<u32>,
    pub kernel: usize,
}

impl Taps {
    pub fn new(dims: &[usize]) -> Self {
        let kernel = 3usize.pow(dims.len() as u32);
        let n: usize = dims.iter().product();
        let mut index = Vec::with_capacity(n * kernel);
        let mut coord = vec![0usize; dims.len()];
        for lin in 0..n {
            let mut rem = lin;
            for (c, d) in coord.iter_mut().zip(dims) {
                *c = rem % d;
                rem /= d;
            }
            for t in 0..kernel {
                let (mut off, mut src, mut stride, mut inside) = (t, 0usize, 1usize, true);
                for (c, d) in coord.iter().zip(dims) {
                    let q = *c as isize + (off % 3) as isize - 1;
                    off /= 3;
                    inside &= q >= 0 && q < *d as isize;
                    src += q.max(0) as usize * stride;
                    stride *= d;
                }
                index.push(if inside { src as u32 } else { u32::MAX });
            }
        }
        Self { index, kernel }
    }

    /// im2col: row `t·C + k` holds channel `k` at tap `t`.
    pub fn gather(&self, x: &Mat) -> Mat {
        let n = x.cols;
        let mut col = Mat::zeros(self.kernel * x.rows, n);
        for t in 0..self.kernel {
            for k in 0..x.rows {
                let (src, dst) = (x.row(k), &mut col.data[(t * x.rows + k) * n..(t * x.rows + k + 1) * n]);
                for (cell, d) in dst.iter_mut().enumerate() {
                    let s = self.index[cell * self.kernel + t];
                    if s != u32::MAX {
                        *d = src[s as usize];
                    }
                }
            }
        }
        col
    }

    pub fn scatter(&self, dcol: &Mat, channels: usize) -> Mat {
        let n = dcol.cols;
        let mut dx = Mat::zeros(channels, n);
        for t in 0..self.kernel {
            for k in 0..channels {
                let src = &dcol.data[(t * channels + k) * n..(t * channels + k + 1) * n];
                let dst = dx.row_mut(k);
                for (cell, g) in src.iter().enumerate() {
                    let s = self.index[cell * self.kernel + t];
                    if s != u32::MAX {
                        dst[s as usize] += g;
                    }
                }
            }
        }
        dx
    }
}

/// Pooling levels of every encoder.
pub const ENCODER_LEVELS: usize = 4;
/// Levels from this one down use 3-wide convolutions; finer levels use
/// per-cell maps.
pub const CONV_FROM_LEVEL: usize = 2;

/// Multi-level encode/decode over a lattice: per-cell lift, optional
/// `prepool` reduction, then `ENCODER_LEVELS` rounds of 2× average pool
/// and a map (per-cell at level 1, 3-wide convolution below), then back up
/// by nearest upsample, skip-add and a per-cell fuse. Every map is affine
/// plus leaky-ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub lift: Layer,
    /// Level `l + 1` map.
    pub down: Vec<Layer>,
    /// Level `l` fuse.
    pub fuse: Vec<Layer>,
}

pub struct EncoderCache {
    x: Mat,
    z_lift: Mat,
    a: Vec<Mat>,
    cols: Vec<Mat>,
    z_down: Vec<Mat>,
    s: Vec<Mat>,
    z_fuse: Vec<Mat>,
}

impl EncoderCache {
    pub fn output(&self) -> Mat {
        leaky(&self.z_fuse[0])
    }
}

/// Lattice pooling plan shared by forward and reverse passes.
#[derive(Debug, Clone)]
pub struct EncoderPlan {
    pub pre: Option<Pool>,
    /// Pool from level `l` to `l + 1`.
    pub pools: Vec<Pool>,
    /// Convolution taps of level `l + 1`, if it convolves.
    pub taps: Vec<Option<Taps>>,
    pub out_dims: Vec<usize>,
}

impl EncoderPlan {
    pub fn new(dims: &[usize], prepool: usize) -> Self {
        let (pre, base) = if prepool > 1 {
            let p = Pool::new(dims, prepool);
            let d = p.coarse_dims.clone();
            (Some(p), d)
        } else {
            (None, dims.to_vec())
        };
        let (mut pools, mut taps) = (Vec::new(), Vec::new());
        let mut d = base.clone();
        for l in 1..=ENCODER_LEVELS {
            let p = Pool::new(&d, 2);
            d = p.coarse_dims.clone();
            pools.push(p);
            taps.push((l >= CONV_FROM_LEVEL).then(|| Taps::new(&d)));
        }
        Self { pre, pools, taps, out_dims: base }
    }
}

fn down_width(level: usize, channels: usize, rank: usize) -> usize {
    if level >= CONV_FROM_LEVEL {
        3usize.pow(rank as u32) * channels
    } else {
        channels
    }
}

impl EncoderParams {
    /// `rank` is the lattice dimension (2 for images, 3 for voxels).
    pub fn random<R: Rng>(inp: usize, channels: usize, rank: usize, rng: &mut R) -> Self {
        let lift = Layer::random(inp, channels, rng);
        let down = (1..=ENCODER_LEVELS).map(|l| Layer::random(down_width(l, channels, rank), channels, rng)).collect();
        let fuse = (0..ENCODER_LEVELS).map(|_| Layer::random(channels, channels, rng)).collect();
        Self { lift, down, fuse }
    }

    pub fn zeros(inp: usize, channels: usize, rank: usize) -> Self {
        Self {
            lift: Layer::zeros(inp, channels),
            down: (1..=ENCODER_LEVELS).map(|l| Layer::zeros(down_width(l, channels, rank), channels)).collect(),
            fuse: (0..ENCODER_LEVELS).map(|_| Layer::zeros(channels, channels)).collect(),
        }
    }

    /// Whether the layer shapes match an encoder of this kind.
    pub fn has_shape(&self, inp: usize, channels: usize, rank: usize) -> bool {
        let z = Self::zeros(inp, channels, rank);
        self.layers().iter().zip(z.layers()).all(|(a, b)| a.inp == b.inp && a.out == b.out)
            && self.down.len() == z.down.len()
            && self.fuse.len() == z.fuse.len()
    }

    pub fn input_dim(&self) -> usize {
        self.lift.inp
    }

    pub fn channels(&self) -> usize {
        self.lift.out
    }

    pub fn forward(&self, x: &Mat, plan: &EncoderPlan) -> Mat {
        self.forward_cached(x, plan).output()
    }

    pub fn forward_cached(&self, x: &Mat, plan: &EncoderPlan) -> EncoderCache {
        let z_lift = self.lift.forward(x);
        let a0 = leaky(&z_lift);
        let mut a = vec![match &plan.pre {
            Some(p) => p.down(&a0),
            None => a0,
        }];
        let (mut cols, mut z_down) = (Vec::new(), Vec::new());
        for (l, layer) in self.down.iter().enumerate() {
            let p = plan.pools[l].down(&a[l]);
            let col = match &plan.taps[l] {
                Some(t) => t.gather(&p),
                None => p,
            };
            let z = layer.forward(&col);
            a.push(leaky(&z));
            cols.push(col);
            z_down.push(z);
        }
        let (mut s, mut z_fuse) = (vec![Mat::zeros(0, 0); ENCODER_LEVELS], vec![Mat::zeros(0, 0); ENCODER_LEVELS]);
        let mut u = a[ENCODER_LEVELS].clone();
        for l in (0..ENCODER_LEVELS).rev() {
            let mut sl = plan.pools[l].up(&u);
            sl.add_assign(&a[l]);
            let z = self.fuse[l].forward(&sl);
            u = leaky(&z);
            s[l] = sl;
            z_fuse[l] = z;
        }
        EncoderCache { x: x.clone(), z_lift, a, cols, z_down, s, z_fuse }
    }

    pub fn backward(&self, cache: &EncoderCache, dout: &Mat, plan: &EncoderPlan, grad: &mut EncoderParams) {
        let mut da: Vec<Mat> = cache.a.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        let mut du = dout.clone();
        for l in 0..ENCODER_LEVELS {
            let dz = leaky_back(&cache.z_fuse[l], &du);
            let ds = self.fuse[l].backward(&cache.s[l], &dz, &mut grad.fuse[l], true).unwrap();
            du = plan.pools[l].up_back(&ds);
            da[l].add_assign(&ds);
        }
        da[ENCODER_LEVELS].add_assign(&du);
        for l in (0..ENCODER_LEVELS).rev() {
            let dz = leaky_back(&cache.z_down[l], &da[l + 1]);
            let dcol = self.down[l].backward(&cache.cols[l], &dz, &mut grad.down[l], true).unwrap();
            let dp = match &plan.taps[l] {
                Some(t) => t.scatter(&dcol, cache.a[l].rows),
                None => dcol,
            };
            let back = plan.pools[l].down_back(&dp);
            da[l].add_assign(&back);
        }
        let da0 = std::mem::replace(&mut da[0], Mat::zeros(0, 0));
        let da0 = match &plan.pre {
            Some(p) => p.down_back(&da0),
            None => da0,
        };
        let dz = leaky_back(&cache.z_lift, &da0);
        self.lift.backward(&cache.x, &dz, &mut grad.lift, false);
    }

    /// Lift, level maps, then fuses.
    pub fn layers(&self) -> Vec<&Layer> {
        std::iter::once(&self.lift).chain(&self.down).chain(&self.fuse).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        std::iter::once(&mut self.lift).chain(&mut self.down).chain(&mut self.fuse).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain per-point forward pass written independently of the batched
    /// kernels.
    fn reference_mlp(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in p.layers.iter().enumerate() {
            let mut z = vec![0.0; l.out];
            for o in 0..l.out {
                let mut acc = l.b[o];
                for k in 0..l.inp {
                    acc += l.w[o * l.inp + k] * h[k];
                }
                z[o] = acc;
            }
            h = if i + 1 < p.layers.len() {
                z.iter().map(|&v| if v > 0.0 { v } else { 0.01 * v }).collect()
            } else {
                match p.output {
                    OutputActivation::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                    OutputActivation::Softmax => {
                        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|v| v / s).collect()
                    }
                }
            };
        }
        h
    }

    #[test]
    fn mlp_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [OutputActivation::Sigmoid, OutputActivation::Softmax] {
            let mut p = MlpParams::random(&[4, 5, 3, 3], act, &mut rng);
            for l in &mut p.layers {
                l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            }
            let pts: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = p.forward(&Mat::from_point_major(4, &pts));
            for (c, x) in pts.chunks(4).enumerate() {
                let r = reference_mlp(&p, x);
                for (a, b) in y.column(c).iter().zip(&r) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn batch_size_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::random(&[7, 16, 16, 2], OutputActivation::Sigmoid, &mut rng);
        let pts: Vec<f64> = (0..7 * 33).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let all = p.forward(&Mat::from_point_major(7, &pts));
        for c in [0, 5, 32] {
            let one = p.forward(&Mat::from_point_major(7, &pts[c * 7..c * 7 + 7]));
            assert_eq!(one.column(0), all.column(c));
        }
    }

    #[test]
    fn zero_mlp_outputs() {
        let p = MlpParams::zeros(&[3, 4, 1], OutputActivation::Sigmoid);
        assert_eq!(p.forward(&Mat::from_point_major(3, &[1.0, 2.0, 3.0])).data, vec![0.5]);
        let p = MlpParams::zeros(&[3, 4, 5], OutputActivation::Softmax);
        assert_eq!(p.forward(&Mat::from_point_major(3, &[1.0, 2.0, 3.0])).data, vec![0.2; 5]);
    }

    #[test]
    fn pool_shapes_and_means() {
        let pool = Pool::new(&[4, 3], 2);
        assert_eq!(pool.coarse_dims, vec![2, 2]);
        let x = Mat { rows: 1, cols: 12, data: (0..12).map(|v| v as f64).collect() };
        let y = pool.down(&x);
        // block (0,0): cells 0,1,4,5; block (0,1): partial row 8,9
        assert_eq!(y.data, vec![2.5, 4.5, 8.5, 10.5]);
        assert_eq!(pool.up(&y).row(0)[9], 8.5);
    }

    #[test]
    fn encoder_zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = EncoderParams::random(2, 4, 2, &mut rng);
        let plan = EncoderPlan::new(&[32, 32], 4);
        let out = e.forward(&Mat::zeros(2, 1024), &plan);
        assert_eq!((out.rows, out.cols), (4, 64));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_match_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (5, 4);
        let taps = Taps::new(&[w, h]);
        let x = Mat { rows: 2, cols: w * h, data: (0..2 * w * h).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let layer = Layer::random(18, 1, &mut rng);
        let y = layer.forward(&taps.gather(&x));
        for j in 0..h {
            for i in 0..w {
                let mut acc = 0.0;
                for dj in 0..3 {
                    for di in 0..3 {
                        let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if si < 0 || sj < 0 || si >= w as isize || sj >= h as isize {
                            continue;
                        }
                        for k in 0..2 {
                            acc += layer.w[(dj * 3 + di) * 2 + k] * x.get(k, si as usize + w * sj as usize);
                        }
                    }
                }
                assert!((y.get(0, i + w * j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut e = EncoderParams::random(1, 3, 3, &mut rng);
        for l in e.layers_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        let plan = EncoderPlan::new(&[6, 5, 4], 1);
        let x = Mat { rows: 1, cols: 120, data: (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let dout = Mat { rows: 3, cols: 120, data: (0..360).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let loss = |e: &EncoderParams| e.forward(&x, &plan).data.iter().zip(&dout.data).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = EncoderParams::zeros(1, 3, 3);
        e.backward(&e.forward_cached(&x, &plan), &dout, &plan, &mut grad);
        let h = 1e-6;
        for (li, layer) in grad.layers().iter().enumerate() {
            for wi in (0..layer.w.len()).step_by(7) {
                let mut p = e.clone();
                p.layers_mut()[li].w[wi] += h;
                let up = loss(&p);
                p.layers_mut()[li].w[wi] -= 2.0 * h;
                let num = (up - loss(&p)) / (2.0 * h);
                assert!((num - layer.w[wi]).abs() < 1e-6 * (1.0 + num.abs()), "layer {li} w {wi}: {num} vs {}", layer.w[wi]);
            }
        }
    }
}
