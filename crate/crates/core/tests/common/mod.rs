//! Independent scalar-loop oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Direct convolution: `x [n,c,h,w]`, `w [o,c,k,k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yy = (i * stride + a) as isize - pad as isize;
                                let xx = (j * stride + bb) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + yy as usize) * w + xx as usize]
                                    * k[((oc * c + ic) * kh + a) * kw + bb];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Direct scatter form of the transposed convolution: `x [n,c,h,w]`,
/// `w [c,o,k,k]`.
pub fn deconv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for ic in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[((b * c + ic) * h + i) * w + j];
                    for oc in 0..o {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let yy = (i * stride + a) as isize - pad as isize;
                                let xx = (j * stride + bb) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                y[((b * o + oc) * oh + yy as usize) * ow + xx as usize] +=
                                    v * k[((ic * o + oc) * kh + a) * kw + bb];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, oh, ow)
}

/// Affinity matrix by explicit loops. `fl [m,h,w]`, `fk [nn,h2,w2]`,
/// `mask [hm,wm]` of 0/1 (all ones for the class-agnostic variant).
#[allow(clippy::too_many_arguments)]
pub fn affinity_oracle(
    fl: &[f64],
    (m, h, w): (usize, usize, usize),
    fk: &[f64],
    (nn, h2, w2): (usize, usize, usize),
    mask: &[f64],
    (hm, wm): (usize, usize),
) -> Option<Vec<f64>> {
    let (ch, cw) = if h <= h2 { (h, w) } else { (h2, w2) };
    let mask_at = |y: usize, x: usize, th: usize, tw: usize| -> f64 {
        // Nearest neighbour, top-left of each block when shrinking.
        let sy = if hm >= th { y * (hm / th) } else { y / (th / hm) };
        let sx = if wm >= tw { x * (wm / tw) } else { x / (tw / wm) };
        mask[sy * wm + sx]
    };
    let reduce = |f: &[f64], count: usize, fh: usize, fw: usize| -> Vec<Vec<f64>> {
        let factor = fh / ch;
        (0..count)
            .map(|q| {
                let mut out = vec![0.0; ch * cw];
                for y in 0..ch {
                    for x in 0..cw {
                        let mut s = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let (yy, xx) = (y * factor + dy, x * factor + dx);
                                s += f[(q * fh + yy) * fw + xx] * mask_at(yy, xx, fh, fw);
                            }
                        }
                        out[y * cw + x] = s / (factor * factor) as f64;
                    }
                }
                out
            })
            .collect()
    };
    let a = reduce(fl, m, h, w);
    let b = reduce(fk, nn, h2, w2);
    let mut s_c = 0usize;
    for y in 0..ch {
        for x in 0..cw {
            if mask_at(y, x, ch, cw) == 1.0 {
                s_c += 1;
            }
        }
    }
    if s_c == 0 {
        return None;
    }
    let mut out = Vec::with_capacity(m * nn);
    for u in &a {
        for v in &b {
            let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
            for i in 0..u.len() {
                dot += u[i] * v[i];
                nu += u[i] * u[i];
                nv += v[i] * v[i];
            }
            let cos = if nu == 0.0 || nv == 0.0 { 0.0 } else { dot / (nu.sqrt() * nv.sqrt()) };
            out.push(cos / s_c as f64);
        }
    }
    Some(out)
}

/// Both reductions of the consistency loss by explicit loops.
pub fn csa_loss_oracle(a1: &[Vec<f64>], a2: &[Vec<f64>], entrywise: bool) -> f64 {
    let mut total = 0.0;
    for (x, y) in a1.iter().zip(a2) {
        let p = x.len() as f64;
        if entrywise {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x[i] - y[i]) * (x[i] - y[i]);
            }
            total += s / p;
        } else {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += x[i] - y[i];
            }
            total += (s / p) * (s / p);
        }
    }
    total / a1.len() as f64
}

/// Boundary pixels by direct neighbour inspection.
pub fn boundary_oracle(mask: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let get = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if get(r, c) && (!get(r - 1, c) || !get(r + 1, c) || !get(r, c - 1) || !get(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// All-pairs symmetric Hausdorff distance between boundary sets.
pub fn hausdorff_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let ba = boundary_oracle(a, h, w);
    let bb = boundary_oracle(b, h, w);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> i64 {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&ba, &bb).max(directed(&bb, &ba)) as f64).sqrt())
}
