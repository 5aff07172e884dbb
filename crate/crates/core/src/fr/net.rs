//! Small convolutional embedders with hand-written forward and backward
//! passes.
//!
//! The stack is fixed per architecture: repeated (3x3 conv, tanh, 2x2 average
//! pool) blocks followed by a linear head and L2 normalization. Tanh and
//! average pooling keep the network smooth everywhere, which the
//! finite-difference gradient oracles rely on.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Available embedder topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureId {
    /// Three conv blocks, widths 8/16/32.
    Conv3,
    /// Four conv blocks, widths 6/12/24/48.
    Conv4,
}

impl ArchitectureId {
    pub fn widths(self) -> &'static [usize] {
        match self {
            ArchitectureId::Conv3 => &[8, 16, 32],
            ArchitectureId::Conv4 => &[6, 12, 24, 48],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ArchitectureId::Conv3 => "c3",
            ArchitectureId::Conv4 => "c4",
        }
    }
}

/// 3x3 same-padded convolution. Weights are laid out `(oc, ky, kx, ic)` so
/// the innermost accumulation runs over contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    fn init(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> Self {
        let fan_in = (in_c * 9) as f64;
        let fan_out = (out_c * 9) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let w = Array4::from_shape_fn((out_c, 3, 3, in_c), |_| rng.gen_range(-a..a));
        Conv2d { w, b: Array1::zeros(out_c) }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w_, ic) = x.dim();
        let oc = self.w.dim().0;
        let mut out = Array3::zeros((h, w_, oc));
        for o in 0..oc {
            let bias = self.b[o];
            for y in 0..h {
                for xx in 0..w_ {
                    let mut acc = bias;
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xk = xx as isize + kx as isize - 1;
                            if xk < 0 || xk >= w_ as isize {
                                continue;
                            }
                            for i in 0..ic {
                                acc += self.w[[o, ky, kx, i]] * x[[yy as usize, xk as usize, i]];
                            }
                        }
                    }
                    out[[y, xx, o]] = acc;
                }
            }
        }
        out
    }

    /// Backward pass. `dy` is the gradient at the conv output; returns the
    /// gradient at the input and, when `grads` is given, accumulates
    /// weight/bias gradients.
    fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
        mut grads: Option<(&mut Array4<f64>, &mut Array1<f64>)>,
    ) -> Array3<f64> {
        let (h, w_, ic) = x.dim();
        let oc = self.w.dim().0;
        let mut dx = Array3::zeros((h, w_, ic));
        for o in 0..oc {
            for y in 0..h {
                for xx in 0..w_ {
                    let g = dy[[y, xx, o]];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some((_, ref mut db)) = grads {
                        db[o] += g;
                    }
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xk = xx as isize + kx as isize - 1;
                            if xk < 0 || xk >= w_ as isize {
                                continue;
                            }
                            for i in 0..ic {
                                dx[[yy as usize, xk as usize, i]] +=
                                    g * self.w[[o, ky, kx, i]];
                                if let Some((ref mut dw, _)) = grads {
                                    dw[[o, ky, kx, i]] +=
                                        g * x[[yy as usize, xk as usize, i]];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, in_d: usize, out_d: usize) -> Self {
        let a = (6.0 / (in_d + out_d) as f64).sqrt();
        let w = Array2::from_shape_fn((out_d, in_d), |_| rng.gen_range(-a..a));
        Linear { w, b: Array1::zeros(out_d) }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }
}

fn avgpool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::zeros((h / 2, w / 2, c));
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for ch in 0..c {
                out[[y, xx, ch]] = 0.25
                    * (x[[2 * y, 2 * xx, ch]]
                        + x[[2 * y + 1, 2 * xx, ch]]
                        + x[[2 * y, 2 * xx + 1, ch]]
                        + x[[2 * y + 1, 2 * xx + 1, ch]]);
            }
        }
    }
    out
}

fn avgpool2_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (_, _, c) = dy.dim();
    let mut dx = Array3::zeros((h, w, c));
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for ch in 0..c {
                let g = 0.25 * dy[[y, xx, ch]];
                dx[[2 * y, 2 * xx, ch]] = g;
                dx[[2 * y + 1, 2 * xx, ch]] = g;
                dx[[2 * y, 2 * xx + 1, ch]] = g;
                dx[[2 * y + 1, 2 * xx + 1, ch]] = g;
            }
        }
    }
    dx
}

/// The embedder network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub arch: ArchitectureId,
    pub blocks: Vec<Conv2d>,
    pub head: Linear,
    pub input_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
}

/// Intermediate activations needed by the backward pass.
pub struct ForwardCache {
    /// Input to each conv block (the image for block 0).
    inputs: Vec<Array3<f64>>,
    /// Tanh outputs per block.
    acts: Vec<Array3<f64>>,
    flat: Array1<f64>,
    /// Head output before normalization.
    pub z: Array1<f64>,
    /// Unit-norm embedding.
    pub feat: Array1<f64>,
}

/// Parameter gradients matching a [`ConvNet`]'s layout.
pub struct NetGrads {
    pub blocks: Vec<(Array4<f64>, Array1<f64>)>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ConvNet {
    pub fn init(
        arch: ArchitectureId,
        input_size: usize,
        channels: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let widths = arch.widths();
        assert!(
            input_size % (1 << widths.len()) == 0,
            "input size {} not divisible by pooling factor {}",
            input_size,
            1 << widths.len()
        );
        let mut blocks = Vec::new();
        let mut in_c = channels;
        for &w in widths {
            blocks.push(Conv2d::init(rng, in_c, w));
            in_c = w;
        }
        let side = input_size >> widths.len();
        let head = Linear::init(rng, side * side * in_c, feature_dim);
        ConvNet { arch, blocks, head, input_size, channels, feature_dim }
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            blocks: self
                .blocks
                .iter()
                .map(|b| (Array4::zeros(b.w.dim()), Array1::zeros(b.b.dim())))
                .collect(),
            head_w: Array2::zeros(self.head.w.dim()),
            head_b: Array1::zeros(self.head.b.dim()),
        }
    }

    /// Forward pass; `cache.feat` is the unit-norm embedding.
    pub fn forward(&self, image: &Array3<f64>) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut acts = Vec::with_capacity(self.blocks.len());
        let mut x = image.clone();
        for block in &self.blocks {
            let y = block.forward(&x);
            let a = y.mapv(f64::tanh);
            inputs.push(x);
            let pooled = avgpool2(&a);
            acts.push(a);
            x = pooled;
        }
        let flat = Array1::from_iter(x.iter().copied());
        let z = self.head.forward(&flat);
        let norm = z.dot(&z).sqrt().max(1e-12);
        let feat = &z / norm;
        ForwardCache { inputs, acts, flat, z, feat }
    }

    /// Backward from an upstream gradient on the normalized feature.
    /// Returns the input-image gradient; accumulates parameter gradients when
    /// `grads` is provided.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream_feat: &Array1<f64>,
        grads: Option<&mut NetGrads>,
    ) -> Array3<f64> {
        // Through normalization: dz = (g - (g . f) f) / ||z||.
        let norm = cache.z.dot(&cache.z).sqrt().max(1e-12);
        let gf = upstream_feat.dot(&cache.feat);
        let dz = (upstream_feat - &(gf * &cache.feat)) / norm;
        self.backward_from_z(cache, &dz, grads)
    }

    /// Backward from an upstream gradient on the pre-normalization output.
    pub fn backward_from_z(
        &self,
        cache: &ForwardCache,
        dz: &Array1<f64>,
        mut grads: Option<&mut NetGrads>,
    ) -> Array3<f64> {
        let dflat = self.head.w.t().dot(dz);
        if let Some(ref mut g) = grads {
            for (i, &dzi) in dz.iter().enumerate() {
                g.head_b[i] += dzi;
                for (j, &fj) in cache.flat.iter().enumerate() {
                    g.head_w[[i, j]] += dzi * fj;
                }
            }
        }

        let last = cache.acts.last_dim();
        let mut dx = Array3::from_shape_vec(last, dflat.to_vec()).expect("flat size");
        for (idx, block) in self.blocks.iter().enumerate().rev() {
            let a = &cache.acts[idx];
            let (h, w, _) = a.dim();
            let da = avgpool2_backward(&dx, h, w);
            // tanh'(y) = 1 - a^2
            let dy = &da * &a.mapv(|v| 1.0 - v * v);
            dx = match grads.as_mut() {
                Some(g) => {
                    let (gw, gb) = &mut g.blocks[idx];
                    block.backward(&cache.inputs[idx], &dy, Some((gw, gb)))
                }
                None => block.backward(&cache.inputs[idx], &dy, None),
            };
        }
        dx
    }

    /// Flatten all parameters in a fixed order (conv blocks then head).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.w.iter());
            out.extend(b.b.iter());
        }
        out.extend(self.head.w.iter());
        out.extend(self.head.b.iter());
        out
    }

    /// Rebuild parameters from [`ConvNet::to_flat`] output.
    pub fn from_flat(&mut self, flat: &[f64]) -> Result<(), String> {
        let expected: usize = self
            .blocks
            .iter()
            .map(|b| b.w.len() + b.b.len())
            .sum::<usize>()
            + self.head.w.len()
            + self.head.b.len();
        if flat.len() != expected {
            return Err(format!("parameter count {} != expected {}", flat.len(), expected));
        }
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            for w in b.w.iter_mut() {
                *w = it.next().unwrap();
            }
            for v in b.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for w in self.head.w.iter_mut() {
            *w = it.next().unwrap();
        }
        for v in self.head.b.iter_mut() {
            *v = it.next().unwrap();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.w.len() + b.b.len()).sum::<usize>()
            + self.head.w.len()
            + self.head.b.len()
    }

    /// Apply `update(param, grad)` across all parameters in flat order.
    pub fn sgd_step(&mut self, grads: &NetGrads, velocity: &mut Vec<f64>, lr: f64, momentum: f64) {
        if velocity.is_empty() {
            velocity.resize(self.param_count(), 0.0);
        }
        let mut k = 0usize;
        let mut step = |p: &mut f64, g: f64, vel: &mut [f64]| {
            vel[k] = momentum * vel[k] - lr * g;
            *p += vel[k];
            k += 1;
        };
        for (b, (gw, gb)) in self.blocks.iter_mut().zip(grads.blocks.iter()) {
            for (p, &g) in b.w.iter_mut().zip(gw.iter()) {
                step(p, g, velocity);
            }
            for (p, &g) in b.b.iter_mut().zip(gb.iter()) {
                step(p, g, velocity);
            }
        }
        for (p, &g) in self.head.w.iter_mut().zip(grads.head_w.iter()) {
            step(p, g, velocity);
        }
        for (p, &g) in self.head.b.iter_mut().zip(grads.head_b.iter()) {
            step(p, g, velocity);
        }
    }
}

trait LastDim {
    fn last_dim(&self) -> (usize, usize, usize);
}

impl LastDim for Vec<Array3<f64>> {
    fn last_dim(&self) -> (usize, usize, usize) {
        let (h, w, c) = self.last().expect("non-empty").dim();
        (h / 2, w / 2, c)
    }
}
