//! Finite-difference oracle for the toy tokenizer gradients.

#![allow(dead_code)]

use robustlat::rng;
use robustlat::toytok::*;
use robustlat::{Image, TokenGrid, Tokenizer};

pub fn tiny_arch() -> Architecture {
    Architecture {
        side: 2,
        channels: 3,
        patch: 2,
        latent_dim: 2,
        hidden: 3,
        codebook_size: 4,
        context: 0,
        activation: Activation::Tanh,
    }
}

pub fn random_images(n: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|_| {
            Image::new(
                side,
                side,
                3,
                (0..side * side * 3).map(|_| rng::uniform(&mut r)).collect(),
            )
            .unwrap()
        })
        .collect()
}

/// Parameters in the flat order, split into layers by hand.
struct Unpacked {
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    codebook: Vec<f64>,
}

fn unpack(a: &Architecture, flat: &[f64]) -> Unpacked {
    let p = a.patch * a.patch * a.channels;
    let win = (2 * a.context + 1).pow(2);
    let shapes = [
        (p, a.hidden),
        (a.hidden, a.latent_dim),
        (win * a.latent_dim, a.hidden),
        (a.hidden, p),
    ];
    let mut off = 0;
    let mut layers = Vec::new();
    for (i, o) in shapes {
        let w = flat[off..off + i * o].to_vec();
        off += i * o;
        let b = flat[off..off + o].to_vec();
        off += o;
        layers.push((w, b, i, o));
    }
    Unpacked {
        layers,
        codebook: flat[off..].to_vec(),
    }
}

fn affine(l: &(Vec<f64>, Vec<f64>, usize, usize), x: &[f64]) -> Vec<f64> {
    let (w, b, i, o) = l;
    (0..*o)
        .map(|r| b[r] + (0..*i).map(|c| w[r * i + c] * x[c]).sum::<f64>())
        .collect()
}

fn mlp(l1: &(Vec<f64>, Vec<f64>, usize, usize), l2: &(Vec<f64>, Vec<f64>, usize, usize), x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(l1, x).into_iter().map(f64::tanh).collect();
    affine(l2, &h)
}

/// Pixels of patch (gy, gx) in (row, column, channel) order.
fn patch_pixels(im: &Image, p: usize, gy: usize, gx: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for y in 0..p {
        for x in 0..p {
            for c in 0..im.channels {
                v.push(im.at(gy * p + y, gx * p + x, c));
            }
        }
    }
    v
}

/// Values frozen at the expansion point, one entry per cell in image-major,
/// row-major order.
struct Frozen {
    offset: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    assignment: Vec<usize>,
}

/// Loss whose exact gradient is the straight-through gradient: the decoder
/// input is z + (e_used - z) with the bracket frozen, and each VQ term stops
/// the gradient on one side.
fn surrogate_loss(a: &Architecture, flat: &[f64], images: &[Image], f: &Frozen, w: &LossWeights) -> f64 {
    let u = unpack(a, flat);
    let (d, g, r) = (a.latent_dim, a.side / a.patch, a.context as isize);
    let cells = (images.len() * g * g) as f64;
    let npix = images.iter().map(|i| i.pixels.len()).sum::<usize>() as f64;
    let (mut rec, mut cb_term, mut commit) = (0.0, 0.0, 0.0);
    for (n, im) in images.iter().enumerate() {
        let base = n * g * g;
        let mut dec_in = Vec::new();
        let mut targets = Vec::new();
        for gy in 0..g {
            for gx in 0..g {
                let c = base + gy * g + gx;
                let x = patch_pixels(im, a.patch, gy, gx);
                let z = mlp(&u.layers[0], &u.layers[1], &x);
                dec_in.push(z.iter().zip(&f.offset[c]).map(|(a, b)| a + b).collect::<Vec<f64>>());
                let k = f.assignment[c];
                cb_term += f.z[c]
                    .iter()
                    .zip(&u.codebook[k * d..(k + 1) * d])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
                commit += z.iter().zip(&f.e[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                targets.push(x);
            }
        }
        let gi = g as isize;
        for gy in 0..gi {
            for gx in 0..gi {
                let mut input = Vec::new();
                for oy in -r..=r {
                    for ox in -r..=r {
                        let ny = (gy + oy).clamp(0, gi - 1);
                        let nx = (gx + ox).clamp(0, gi - 1);
                        input.extend_from_slice(&dec_in[(ny * gi + nx) as usize]);
                    }
                }
                let y = mlp(&u.layers[2], &u.layers[3], &input);
                let t = &targets[(gy * gi + gx) as usize];
                rec += y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
    }
    w.lambda_rec * rec / npix + w.lambda_vq * (cb_term / cells + w.commitment_weight * commit / cells)
}

pub fn check_gradients(a: Architecture, images: &[Image], perturb: &[(usize, usize)]) {
    let mut model = ToyTokenizer::init(a, 11).unwrap();
    let mut flat = model.params_flat();
    let n_cb = a.codebook_size * a.latent_dim;
    let mut r = rng::stream(12, &[]);
    let n = flat.len();
    for v in flat[..n - n_cb].iter_mut() {
        *v += 0.3 * rng::standard_normal(&mut r);
    }
    for v in flat[n - n_cb..].iter_mut() {
        *v = 0.8 * rng::standard_normal(&mut r);
    }
    model.set_params_flat(&flat).unwrap();

    let weights = LossWeights {
        lambda_rec: 1.3,
        lambda_vq: 0.7,
        commitment_weight: 0.25,
    };
    let clean: Vec<TokenGrid> = images.iter().map(|im| model.tokenize(im).unwrap()).collect();
    // swapped tokens make the straight-through offset differ from e_clean - z
    let mut used = clean.clone();
    for &(img, cell) in perturb {
        used[img].indices[cell] = (clean[img].indices[cell] + 1) % a.codebook_size as u32;
    }
    let g = batch_gradients(&model, images, &weights, Some(&used)).unwrap();

    let d = a.latent_dim;
    let z: Vec<Vec<f64>> = g.latent.chunks(d).map(|c| c.to_vec()).collect();
    let assignment: Vec<usize> = clean
        .iter()
        .flat_map(|t| t.indices.iter().map(|&k| k as usize))
        .collect();
    let used_flat: Vec<usize> = used
        .iter()
        .flat_map(|t| t.indices.iter().map(|&k| k as usize))
        .collect();
    let frozen = Frozen {
        offset: used_flat
            .iter()
            .zip(&z)
            .map(|(&k, z)| model.codebook.row(k).iter().zip(z).map(|(e, z)| e - z).collect())
            .collect(),
        e: assignment.iter().map(|&k| model.codebook.row(k).to_vec()).collect(),
        z: z.clone(),
        assignment: assignment.clone(),
    };
    assert_eq!(g.assignment.iter().map(|&k| k as usize).collect::<Vec<_>>(), assignment);

    let f0 = surrogate_loss(&a, &flat, images, &frozen, &weights);
    assert!((f0 - g.losses.total).abs() < 1e-12);

    let h = 1e-5;
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] += h;
        let up = surrogate_loss(&a, &p, images, &frozen, &weights);
        p[i] -= 2.0 * h;
        let down = surrogate_loss(&a, &p, images, &frozen, &weights);
        let fd = (up - down) / (2.0 * h);
        let an = g.params[i];
        let tol = (1e-4 * fd.abs().max(an.abs())).max(1e-6);
        assert!((fd - an).abs() <= tol, "parameter {i}: analytic {an} vs numeric {fd}");
    }
}
