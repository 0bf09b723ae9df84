//! Independent reference computations for the integration tests.
//!
//! Everything here is written from the textbook definitions with plain
//! nested loops over `f64`; none of it calls the library's tape operations.
//! `Tensor` is used only as an indexed container.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use roadseg_core::acam::AxisAwareBlock;
use roadseg_core::autograd::ConvGeom;
use roadseg_core::gam::Gam;
use roadseg_core::nn::{BatchNorm2d, Conv2d, ConvBnRelu, ConvStack, ParamStore, BN_EPS};
use roadseg_core::ram::Ram;
use roadseg_core::tensor::Tensor;

pub type T4 = Tensor<f64>;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: [usize; 4], std: f64) -> T4 {
    let normal = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Replaces every trainable parameter with random values, so zero-initialized
/// scales, heads and biases take part in the comparison.
pub fn randomize_params<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, std: f64) {
    let normal = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = normal.sample(rng);
        }
    }
}

/// Direct summation `y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] x[n,c,i*s+u*d-p, j*s+v*d-p]`
/// with zero padding.
pub fn conv(x: &T4, w: &T4, b: Option<&T4>, g: ConvGeom) -> T4 {
    let (n, cin, h, wd) = x.dims();
    let (cout, cin_w, kh, kw) = w.dims();
    assert_eq!(cin, cin_w);
    let oh = (h + 2 * g.pad.0 - g.dilation.0 * (kh - 1) - 1) / g.stride.0 + 1;
    let ow = (wd + 2 * g.pad.1 - g.dilation.1 * (kw - 1) - 1) / g.stride.1 + 1;
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    for s in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.at(0, o, 0, 0));
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * g.stride.0 + u * g.dilation.0) as isize - g.pad.0 as isize;
                                let q = (j * g.stride.1 + v * g.dilation.1) as isize - g.pad.1 as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, c, u, v) * x.at(s, c, r as usize, q as usize);
                            }
                        }
                    }
                    y.set(s, o, i, j, acc);
                }
            }
        }
    }
    y
}

/// Training-mode batch normalization: per-channel mean and biased variance
/// over batch and space.
pub fn batch_norm_train(x: &T4, gamma: &T4, beta: &T4) -> T4 {
    let (n, c, h, w) = x.dims();
    let mut y = Tensor::zeros([n, c, h, w]);
    let count = (n * h * w) as f64;
    for ch in 0..c {
        let mut mean = 0.0;
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    mean += x.at(s, ch, i, j);
                }
            }
        }
        mean /= count;
        let mut var = 0.0;
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    var += (x.at(s, ch, i, j) - mean).powi(2);
                }
            }
        }
        var /= count;
        let denom = (var + BN_EPS).sqrt();
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let z = (x.at(s, ch, i, j) - mean) / denom;
                    y.set(s, ch, i, j, gamma.at(0, ch, 0, 0) * z + beta.at(0, ch, 0, 0));
                }
            }
        }
    }
    y
}

pub fn relu(x: &T4) -> T4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Bilinear resampling with half-pixel centres and edge clamping: output
/// pixel `i` samples source coordinate `(i + 1/2) * in/out - 1/2`, clamped
/// at zero, as a weighted sum of its four neighbours.
pub fn bilinear(x: &T4, oh: usize, ow: usize) -> T4 {
    let (n, c, h, w) = x.dims();
    let coord = |i: usize, src: usize, dst: usize| {
        let p = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (p.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, p - lo as f64)
    };
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                let (r0, r1, a) = coord(i, h, oh);
                for j in 0..ow {
                    let (c0, c1, b) = coord(j, w, ow);
                    let v = (1.0 - a) * (1.0 - b) * x.at(s, ch, r0, c0)
                        + (1.0 - a) * b * x.at(s, ch, r0, c1)
                        + a * (1.0 - b) * x.at(s, ch, r1, c0)
                        + a * b * x.at(s, ch, r1, c1);
                    y.set(s, ch, i, j, v);
                }
            }
        }
    }
    y
}

pub fn concat(parts: &[&T4]) -> T4 {
    let (n, _, h, w) = parts[0].dims();
    let c: usize = parts.iter().map(|p| p.dims().1).sum();
    let mut y = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let mut off = 0;
        for p in parts {
            let pc = p.dims().1;
            for ch in 0..pc {
                for i in 0..h {
                    for j in 0..w {
                        y.set(s, off + ch, i, j, p.at(s, ch, i, j));
                    }
                }
            }
            off += pc;
        }
    }
    y
}

/// Element-wise product; a single-channel operand broadcasts over channels.
pub fn mul(a: &T4, b: &T4) -> T4 {
    let (n, c, h, w) = a.dims();
    let bc = b.dims().1;
    Tensor::from_fn([n, c, h, w], |idx| {
        let j = idx % w;
        let i = (idx / w) % h;
        let ch = (idx / (w * h)) % c;
        let s = idx / (w * h * c);
        a.at(s, ch, i, j) * b.at(s, if bc == 1 { 0 } else { ch }, i, j)
    })
}

pub fn add(a: &T4, b: &T4) -> T4 {
    a.zip_map(b, |x, y| x + y)
}

pub fn conv_layer(store: &ParamStore<f64>, layer: &Conv2d, x: &T4) -> T4 {
    conv(x, store.value(layer.weight), layer.bias.map(|b| store.value(b)), layer.geom)
}

pub fn bn_layer(store: &ParamStore<f64>, bn: &BatchNorm2d, x: &T4) -> T4 {
    batch_norm_train(x, store.value(bn.gamma), store.value(bn.beta))
}

pub fn conv_bn_relu(store: &ParamStore<f64>, l: &ConvBnRelu, x: &T4) -> T4 {
    relu(&bn_layer(store, &l.bn, &conv_layer(store, &l.conv, x)))
}

pub fn conv_stack(store: &ParamStore<f64>, s: &ConvStack, x: &T4) -> T4 {
    s.layers.iter().fold(x.clone(), |y, l| conv_bn_relu(store, l, &y))
}

/// Aggregation equations composed step by step:
///
/// ```text
/// f4'' = B(f4' * Up2(f5'))
/// f3'' = B(f3' * Up4(f5')) * Up2(f4')
/// f_g  = Conv(B(Cat(f3'', Up2(Cat(f4'', Up2(f5'))))))
/// ```
pub fn gam_oracle(store: &ParamStore<f64>, gam: &Gam, f3: &T4, f4: &T4, f5: &T4) -> (T4, T4, T4) {
    let (_, _, h3, w3) = f3.dims();
    let (_, _, h4, w4) = f4.dims();
    let f5_up2 = bilinear(f5, h4, w4);
    let f4dd = conv_stack(store, &gam.dense4, &mul(f4, &f5_up2));
    let f5_up4 = bilinear(f5, h3, w3);
    let f4_up2 = bilinear(f4, h3, w3);
    let f3dd = mul(&conv_stack(store, &gam.dense3, &mul(f3, &f5_up4)), &f4_up2);
    let inner = bilinear(&concat(&[&f4dd, &f5_up2]), h3, w3);
    let fused = conv_stack(store, &gam.fuse, &concat(&[&f3dd, &inner]));
    (conv_layer(store, &gam.head, &fused), f4dd, f3dd)
}

/// Reverse refinement composed step by step:
///
/// ```text
/// fg   = Conv(B_fg(Cat(f_k, r_k)))
/// bg   = Conv(B_bg((1 - sigmoid(r_k)) * f_k))
/// side = head(fg + bg) + r_k
/// ```
/// Returns `(fg, bg, refined, side)`.
pub fn ram_oracle(store: &ParamStore<f64>, ram: &Ram, f: &T4, r: &T4) -> (T4, T4, T4, T4) {
    let fg = conv_layer(store, &ram.fg_conv, &conv_stack(store, &ram.fg_stack, &concat(&[f, r])));
    let reverse = r.map(|v| 1.0 - sigmoid(v));
    let bg = conv_layer(store, &ram.bg_conv, &conv_stack(store, &ram.bg_stack, &mul(f, &reverse)));
    let refined = add(&fg, &bg);
    let side = add(&conv_layer(store, &ram.head, &refined), r);
    (fg, bg, refined, side)
}

/// Naive axial attention. For every pixel `(i, j)` with query `q_ij`:
///
/// ```text
/// col(i,j) = sum_r softmax_r(q_ij . k_rj) v_rj
/// row(i,j) = sum_c softmax_c(q_ij . k_ic) v_ic
/// out      = x + gamma * (col + row)
/// ```
pub fn axial_oracle(store: &ParamStore<f64>, block: &AxisAwareBlock, x: &T4) -> T4 {
    let q = conv_layer(store, &block.query, x);
    let k = conv_layer(store, &block.key, x);
    let v = conv_layer(store, &block.value, x);
    let gamma = store.value(block.gamma).data()[0];
    let (n, c, h, w) = x.dims();
    let ck = q.dims().1;
    let dot = |s: usize, i: usize, j: usize, r: usize, t: usize| -> f64 {
        (0..ck).map(|ch| q.at(s, ch, i, j) * k.at(s, ch, r, t)).sum()
    };
    let softmax = |scores: Vec<f64>| -> Vec<f64> {
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    };
    let mut out = x.clone();
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let col = softmax((0..h).map(|r| dot(s, i, j, r, j)).collect());
                let row = softmax((0..w).map(|t| dot(s, i, j, i, t)).collect());
                for ch in 0..c {
                    let a: f64 = (0..h).map(|r| col[r] * v.at(s, ch, r, j)).sum();
                    let b: f64 = (0..w).map(|t| row[t] * v.at(s, ch, i, t)).sum();
                    out.set(s, ch, i, j, x.at(s, ch, i, j) + gamma * (a + b));
                }
            }
        }
    }
    out
}

/// Confusion counts by one pass over the pixel pairs.
pub fn brute_counts(pred: &[u8], gt: &[u8]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive scores above a random negative, ties counting one
/// half.
pub fn rank_auc(score: &[f64], gt: &[u8]) -> f64 {
    let pos: Vec<f64> = score.iter().zip(gt).filter(|(_, &g)| g == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = score.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub fn max_abs_diff(a: &T4, b: &T4) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
