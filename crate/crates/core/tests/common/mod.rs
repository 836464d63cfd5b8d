//! Independent reference implementations used as test oracles. Nothing
//! here goes through the autodiff graph or the optimised conv kernels.
#![allow(dead_code)]

use fer_core::{ModelConfig, ModelParams, Rng, Tensor};

pub fn random_frames(rng: &mut Rng, n: usize, side: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let data = (0..9 * side * side).map(|_| rng.uniform()).collect();
            Tensor::new(vec![9, side, side], data).unwrap()
        })
        .collect()
}

/// Direct six-loop grouped convolution with zero padding.
pub fn naive_conv(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    (c_out, k): (usize, usize),
    groups: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut y = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let g = o / cog;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for cl in 0..cig {
                    let ci = g * cig + cl;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ci * h + iy as usize) * w + ix as usize];
                            acc += xv * weight[((o * cig + cl) * k + ky) * k + kx];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (y, oh, ow)
}

fn param<'a>(p: &'a ModelParams, name: &str) -> &'a Tensor {
    p.get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Feature map `C × H × W` of every block for one frame.
pub fn backbone_taps(
    cfg: &ModelConfig,
    p: &ModelParams,
    frame: &Tensor,
) -> Vec<(Vec<f64>, usize, usize, usize)> {
    let bb = &cfg.backbone;
    let (mut x, mut c, mut h, mut w) =
        (frame.data().to_vec(), 9, frame.shape()[1], frame.shape()[2]);
    let mut taps = Vec::new();
    for b in 0..bb.num_blocks {
        let co = bb.channels_per_block[b];
        let stride = if b == 0 { 1 } else { 2 };
        let w1 = param(p, &format!("block{b}.conv1.weight"));
        let (mut h1, oh, ow) = naive_conv(&x, (c, h, w), w1.data(), (co, 3), 3, stride, 1);
        let (s1, t1) = (
            param(p, &format!("block{b}.conv1.scale")),
            param(p, &format!("block{b}.conv1.shift")),
        );
        for (i, v) in h1.iter_mut().enumerate() {
            let ch = i / (oh * ow);
            *v = relu(s1.data()[ch] * *v + t1.data()[ch]);
        }
        let w2 = param(p, &format!("block{b}.conv2.weight"));
        let (mut h2, _, _) = naive_conv(&h1, (co, oh, ow), w2.data(), (co, 3), 3, 1, 1);
        let (s2, t2) = (
            param(p, &format!("block{b}.conv2.scale")),
            param(p, &format!("block{b}.conv2.shift")),
        );
        for (i, v) in h2.iter_mut().enumerate() {
            let ch = i / (oh * ow);
            *v = s2.data()[ch] * *v + t2.data()[ch];
        }
        let shortcut = match p.get(&format!("block{b}.shortcut.weight")) {
            Some(ws) => naive_conv(&x, (c, h, w), ws.data(), (co, 1), 3, stride, 0).0,
            None => x.clone(),
        };
        x = h2.iter().zip(&shortcut).map(|(a, s)| relu(a + s)).collect();
        c = co;
        h = oh;
        w = ow;
        taps.push((x.clone(), c, h, w));
    }
    taps
}

/// Spatial attention over one `D × R` region slice: returns the hop-mean
/// descriptor and `‖MMᵀ − I‖_F`.
fn spatial(tap: &[f64], d: usize, r: usize, ws1: &Tensor, ws2: &Tensor) -> (Vec<f64>, f64) {
    let u = ws1.shape()[0];
    let hops = ws2.shape()[0];
    // a = tanh(ws1 · Lᵀ), Lᵀ[dd][rr] = tap[dd * r + rr]
    let mut a = vec![0.0; u * r];
    for i in 0..u {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..d {
                s += ws1.data()[i * d + k] * tap[k * r + j];
            }
            a[i * r + j] = s.tanh();
        }
    }
    let mut m = vec![0.0; hops * r];
    for i in 0..hops {
        let row: Vec<f64> = (0..r)
            .map(|j| (0..u).map(|k| ws2.data()[i * u + k] * a[k * r + j]).sum())
            .collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..r {
            m[i * r + j] = e[j] / z;
        }
    }
    let mut vec_out = vec![0.0; d];
    for i in 0..hops {
        for k in 0..d {
            let s: f64 = (0..r).map(|j| m[i * r + j] * tap[k * r + j]).sum();
            vec_out[k] += s / hops as f64;
        }
    }
    let mut pen = 0.0;
    for i in 0..hops {
        for j in 0..hops {
            let dot: f64 = (0..r).map(|k| m[i * r + k] * m[j * r + k]).sum();
            let e = dot - if i == j { 1.0 } else { 0.0 };
            pen += e * e;
        }
    }
    (vec_out, pen.sqrt())
}

/// `Σ αᵢ fᵢ / Σ αᵢ`, `αᵢ = σ(w_vecᵀ relu(w_matᵀ fᵢ))`.
pub fn gated(items: &[Vec<f64>], w_mat: &Tensor, w_vec: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (l, r) = (w_mat.shape()[0], w_mat.shape()[1]);
    let alphas: Vec<f64> = items
        .iter()
        .map(|f| {
            let mut s = 0.0;
            for j in 0..r {
                let hid: f64 = (0..l).map(|i| f[i] * w_mat.data()[i * r + j]).sum();
                s += relu(hid) * w_vec.data()[j];
            }
            sigmoid(s)
        })
        .collect();
    let total: f64 = alphas.iter().sum();
    let out = (0..l)
        .map(|i| {
            items
                .iter()
                .zip(&alphas)
                .map(|(f, a)| a * f[i])
                .sum::<f64>()
                / total
        })
        .collect();
    (out, alphas)
}

/// Logits and mean spatial penalty of the full model (all components on,
/// hop-mean aggregation), written out loop by loop.
pub fn oracle_logits(cfg: &ModelConfig, p: &ModelParams, frames: &[Tensor]) -> (Vec<f64>, f64) {
    let mut frame_vecs = Vec::new();
    let mut penalties = Vec::new();
    for frame in frames {
        let taps = backbone_taps(cfg, p, frame);
        let mut regions = vec![Vec::new(); 3];
        for (b, (tap, c, h, w)) in taps.iter().enumerate() {
            let d = c / 3;
            let r = h * w;
            let ws1 = param(p, &format!("spatial{b}.ws1"));
            let ws2 = param(p, &format!("spatial{b}.ws2"));
            for (g, region) in regions.iter_mut().enumerate() {
                let slice = &tap[g * d * r..(g + 1) * d * r];
                let (v, pen) = spatial(slice, d, r, ws1, ws2);
                region.extend(v);
                penalties.push(pen);
            }
        }
        let (fused, _) = gated(
            &regions,
            param(p, "channel.w_mat"),
            param(p, "channel.w_vec"),
        );
        frame_vecs.push(fused);
    }
    let (video, _) = gated(
        &frame_vecs,
        param(p, "frame.w_mat"),
        param(p, "frame.w_vec"),
    );
    let hw = param(p, "head.weight");
    let hb = param(p, "head.bias");
    let k = hb.numel();
    let logits = (0..k)
        .map(|j| {
            hb.data()[j]
                + video
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * hw.data()[i * k + j])
                    .sum::<f64>()
        })
        .collect();
    let penalty = penalties.iter().sum::<f64>() / penalties.len() as f64;
    (logits, penalty)
}

/// Randomises every parameter, including scales, shifts and biases that
/// start at constants.
pub fn jitter(params: &mut ModelParams, rng: &mut Rng, spread: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += spread * rng.normal();
        }
    }
}
