//! Independent reference implementations used as test oracles.
//!
//! Everything here is written with plain nested loops over `f64`, without
//! any of the crate's kernels.

#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use vbquant_core::tensor::Tensor;

/// Shape helper: `(C, D, H, W)`.
pub fn dims4(t: &Tensor<f64>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn at(t: &Tensor<f64>, c: usize, z: usize, y: usize, x: usize) -> f64 {
    let [_, d, h, w] = dims4(t);
    t.data()[((c * d + z) * h + y) * w + x]
}

/// Direct 3-D cross-correlation with zero padding.
pub fn naive_conv3d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [ci, d, h, w] = dims4(x);
    let ks = k.shape();
    let (co, kd, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
    assert_eq!(ks[1], ci);
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * od * oh * ow];
    let kat = |o: usize, i: usize, a: usize, b: usize, c: usize| k.data()[(((o * ci + i) * kd + a) * kh + b) * kw + c];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..ci {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (y * stride + b) as isize - pad as isize;
                                    let ix = (xx * stride + c) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += kat(o, i, a, b, c) * at(x, i, iz as usize, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[co, od, oh, ow], out).unwrap()
}

/// Transposed convolution by scattering each input voxel through the kernel.
/// The kernel is laid out `(C_in, C_out, k, k, k)`.
pub fn naive_conv3d_transpose(y: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [ci, d, h, w] = dims4(y);
    let ks = k.shape();
    let (co, kd, kh, kw) = (ks[1], ks[2], ks[3], ks[4]);
    assert_eq!(ks[0], ci);
    let od = (d - 1) * stride + kd - 2 * pad;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; co * od * oh * ow];
    for o in 0..co {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for v in &mut out[o * od * oh * ow..(o + 1) * od * oh * ow] {
            *v = b;
        }
    }
    for i in 0..ci {
        for z in 0..d {
            for yy in 0..h {
                for x in 0..w {
                    let v = at(y, i, z, yy, x);
                    for o in 0..co {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let oz = (z * stride + a) as isize - pad as isize;
                                    let oy = (yy * stride + b) as isize - pad as isize;
                                    let ox = (x * stride + c) as isize - pad as isize;
                                    if oz < 0 || oy < 0 || ox < 0 || oz >= od as isize || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    let kv = k.data()[(((i * co + o) * kd + a) * kh + b) * kw + c];
                                    out[((o * od + oz as usize) * oh + oy as usize) * ow + ox as usize] += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, od, oh, ow], out).unwrap()
}

pub fn naive_prelu(x: &Tensor<f64>, slope: &Tensor<f64>) -> Tensor<f64> {
    let [c, d, h, w] = dims4(x);
    let per = d * h * w;
    let data = (0..c * per)
        .map(|i| {
            let v = x.data()[i];
            if v > 0.0 {
                v
            } else {
                slope.data()[i / per] * v
            }
        })
        .collect();
    Tensor::new(&[c, d, h, w], data).unwrap()
}

pub fn naive_sigmoid(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn naive_concat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data).unwrap()
}

pub fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)`.
pub fn naive_soft_dice(p: &Tensor<f64>, t: &Tensor<f64>, smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for i in 0..p.len() {
        inter += p.data()[i] * t.data()[i];
        sp += p.data()[i];
        st += t.data()[i];
    }
    1.0 - (2.0 * inter + smooth) / (sp + st + smooth)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero (for checks across PReLU's kink).
pub fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force voxel counting on boolean masks.
pub mod masks {
    pub fn count(m: &[bool]) -> usize {
        let mut n = 0;
        for &v in m {
            if v {
                n += 1;
            }
        }
        n
    }

    pub fn dice(r: &[bool], s: &[bool]) -> f64 {
        let mut inter = 0usize;
        for i in 0..r.len() {
            if r[i] && s[i] {
                inter += 1;
            }
        }
        let total = count(r) + count(s);
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }

    /// `None` for an empty region.
    pub fn poi(inf: &[bool], region: &[bool]) -> Option<f64> {
        let mut hit = 0usize;
        let mut n = 0usize;
        for i in 0..inf.len() {
            if region[i] {
                n += 1;
                if inf[i] {
                    hit += 1;
                }
            }
        }
        (n > 0).then(|| 100.0 * hit as f64 / n as f64)
    }

    pub fn volume_cm3(m: &[bool], spacing_mm: [f64; 3]) -> f64 {
        count(m) as f64 * spacing_mm[0] * spacing_mm[1] * spacing_mm[2] / 1000.0
    }

    /// `(counts, underflow, overflow)` with bins `[e_i, e_{i+1})` by linear scan.
    pub fn histogram(hu: &[f32], m: &[bool], edges: &[f32]) -> (Vec<usize>, usize, usize) {
        let mut counts = vec![0; edges.len() - 1];
        let (mut under, mut over) = (0, 0);
        for i in 0..hu.len() {
            if !m[i] {
                continue;
            }
            let v = hu[i];
            let mut placed = false;
            for b in 0..counts.len() {
                if v >= edges[b] && v < edges[b + 1] {
                    counts[b] += 1;
                    placed = true;
                }
            }
            if !placed {
                if v < edges[0] {
                    under += 1;
                } else {
                    over += 1;
                }
            }
        }
        (counts, under, over)
    }
}
