//! Swap-quality metrics on the synthetic dataset.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use styleswap_autograd::{Scalar, Tensor};

use crate::embedders::{EmbedderSet, Trained};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::swap::{Swapped, Swapper};
use crate::synth::{rgb_to_hue, stream_rng, Dataset, RenderedSample};

const PAIR_DOMAIN: u64 = 40;
/// Side of the square patch sampled at each image corner.
pub const CORNER_PATCH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_cosine_mean: f64,
    pub id_retrieval_rate: f64,
    pub attr_background_err: f64,
    pub attr_pose_err: f64,
    pub toy_fid: f64,
    /// Absent for models without an active mask branch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_iou: Option<f64>,
    pub recon_psnr: f64,
    pub sample_count: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine between each swap and its source's gallery entry, and the
/// rate at which that entry is the swap's nearest gallery neighbour.
pub fn id_metrics(swaps: &[(Vec<f64>, usize)], gallery: &[(Vec<f64>, usize)]) -> Result<(f64, f64)> {
    if swaps.is_empty() || gallery.is_empty() {
        return Err(Error::Empty("id_metrics inputs"));
    }
    let (mut cos_sum, mut hits) = (0.0, 0usize);
    for (emb, id) in swaps {
        let sims: Vec<f64> = gallery.iter().map(|(g, _)| cosine(emb, g)).collect();
        let own = gallery
            .iter()
            .position(|(_, gid)| gid == id)
            .ok_or(Error::Empty("gallery entry for a swap's source identity"))?;
        cos_sum += sims[own];
        let best = sims
            .iter()
            .enumerate()
            .fold(0, |b, (i, &s)| if s > sims[b] { i } else { b });
        hits += usize::from(gallery[best].1 == *id);
    }
    Ok((cos_sum / swaps.len() as f64, hits as f64 / swaps.len() as f64))
}

/// Hue of the mean colour of the four corner patches.
pub fn background_hue(image: &Image) -> f64 {
    let (h, w) = (image.height(), image.width());
    let k = CORNER_PATCH.min(h / 2).min(w / 2).max(1);
    let mut acc = [0.0; 3];
    let mut count = 0.0;
    for (r0, c0) in [(0, 0), (0, w - k), (h - k, 0), (h - k, w - k)] {
        for r in r0..r0 + k {
            for c in c0..c0 + k {
                let p = image.pixel_unit(r, c);
                for i in 0..3 {
                    acc[i] += p[i];
                }
                count += 1.0;
            }
        }
    }
    rgb_to_hue(acc.map(|v| v / count))
}

/// Distance on the unit hue circle.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Mean background hue error and mean absolute yaw error against the
/// target factors.
pub fn attribute_errors<T: Scalar>(
    swaps: &[Image],
    targets: &[RenderedSample],
    pose: &Trained<T>,
) -> Result<(f64, f64)> {
    if swaps.len() != targets.len() || swaps.is_empty() {
        return Err(Error::Empty("attribute_errors inputs"));
    }
    let n = swaps.len() as f64;
    let bg = swaps
        .iter()
        .zip(targets)
        .map(|(s, t)| hue_distance(background_hue(s), t.attributes.background_hue))
        .sum::<f64>()
        / n;
    let mut pose_err = 0.0;
    for (chunk, tchunk) in swaps.chunks(64).zip(targets.chunks(64)) {
        let pred = pose.regress(&Image::stack::<T>(&chunk.iter().collect::<Vec<_>>())?)?;
        pose_err += pred.iter().zip(tchunk).map(|(p, t)| (p - t.attributes.yaw).abs()).sum::<f64>();
    }
    Ok((bg, pose_err / n))
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let root_a = psd_sqrt(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&e| e.max(0.0).sqrt()).sum();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_stats(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.len() < dim + 1 || dim == 0 {
        return Err(Error::Dataset {
            what: "feature samples",
            needed: dim + 1,
            got: rows.len(),
        });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    let mu = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

/// Fréchet distance between the feature distributions of two sample sets.
pub fn toy_fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_stats(set_a)?;
    let (mu_b, cov_b) = gaussian_stats(set_b)?;
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Intersection over union of `pred > 0.5` and `gt > 0.5`; 1 when both are empty.
pub fn mask_iou(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "mask_iou",
            detail: format!("{} vs {} pixels", pred.len(), gt.len()),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Peak signal-to-noise ratio in dB after mapping `[-1, 1]` to `[0, 1]`;
/// infinite for identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Cross-identity source/target pairs drawn from held-out frames.
#[derive(Debug, Clone)]
pub struct EvalPairs {
    /// One source frame per identity; doubles as the retrieval gallery.
    pub sources: Vec<RenderedSample>,
    /// `(source identity, target sample)`.
    pub pairs: Vec<(usize, RenderedSample)>,
}

impl EvalPairs {
    pub fn sample(dataset: &Dataset, count: usize, seed: u64) -> Result<Self> {
        let n_id = dataset.identities.len();
        let frames_per_id = count.div_ceil(n_id) + 1;
        let held = dataset.held_out(frames_per_id)?;
        // held_out is frame-major: entry f * n_id + id.
        let sources: Vec<RenderedSample> = held[..n_id].to_vec();
        let mut rng = stream_rng(seed, PAIR_DOMAIN, 0);
        let pairs = (0..count)
            .map(|_| {
                let s = rng.gen_range(0..n_id);
                let t = (s + rng.gen_range(1..n_id)) % n_id;
                let f = rng.gen_range(1..frames_per_id);
                (s, held[f * n_id + t].clone())
            })
            .collect();
        Ok(Self { sources, pairs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub swaps: usize,
    pub recon_frames: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            swaps: 200,
            recon_frames: 100,
            seed: 0,
            batch_size: 50,
        }
    }
}

fn images<'a>(samples: &[&'a RenderedSample]) -> Vec<&'a Image> {
    samples.iter().map(|s| &s.image).collect()
}

fn rows_f64<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = t.numel() / t.dim(0);
    t.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Swaps `sources[i]` onto `targets[i]` in batches.
pub fn batched_swaps<T: Scalar>(swapper: &Swapper<T>, sources: &[&Image], targets: &[&Image], batch: usize) -> Result<Vec<Swapped<T>>> {
    sources
        .chunks(batch.max(1))
        .zip(targets.chunks(batch.max(1)))
        .map(|(s, t)| swapper.swap(&Image::stack(s)?, &Image::stack(t)?))
        .collect()
}

/// Embeddings (or, with `head`, raw head features) of images in batches.
pub fn embed_images<T: Scalar>(net: &Trained<T>, images: &[&Image], head: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let x = Image::stack::<T>(chunk)?;
        let t = if head { net.features(&x)? } else { net.embed(&x)? };
        out.extend(rows_f64(&t));
    }
    Ok(out)
}

/// Full report for `swapper` on held-out frames of `dataset`.
pub fn evaluate<T: Scalar>(swapper: &Swapper<T>, embedders: &EmbedderSet<T>, dataset: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    let ep = EvalPairs::sample(dataset, options.swaps, options.seed)?;
    let src: Vec<&Image> = ep.pairs.iter().map(|(s, _)| &ep.sources[*s].image).collect();
    let tgt_samples: Vec<&RenderedSample> = ep.pairs.iter().map(|(_, t)| t).collect();
    let swapped = batched_swaps(swapper, &src, &images(&tgt_samples), options.batch_size)?;
    let mut swap_images = Vec::with_capacity(ep.pairs.len());
    let mut masks = Vec::new();
    for s in &swapped {
        swap_images.extend(Image::from_batch(&s.image)?);
        if let Some(m) = &s.mask {
            masks.extend(m.data().iter().map(|v| v.as_f64() as f32));
        }
    }
    let swap_refs: Vec<&Image> = swap_images.iter().collect();

    let eval = &embedders.evaluation;
    let swap_emb = embed_images(eval, &swap_refs, false)?;
    let gallery_emb = embed_images(eval, &ep.sources.iter().map(|s| &s.image).collect::<Vec<_>>(), false)?;
    let swaps: Vec<(Vec<f64>, usize)> = swap_emb.into_iter().zip(ep.pairs.iter().map(|(s, _)| *s)).collect();
    let gallery: Vec<(Vec<f64>, usize)> = gallery_emb.into_iter().enumerate().map(|(i, e)| (e, i)).collect();
    let (id_cosine_mean, id_retrieval_rate) = id_metrics(&swaps, &gallery)?;

    let targets: Vec<RenderedSample> = tgt_samples.iter().map(|&t| t.clone()).collect();
    let (attr_background_err, attr_pose_err) = attribute_errors(&swap_images, &targets, &embedders.pose)?;

    let real_feats = embed_images(eval, &images(&tgt_samples), true)?;
    let fake_feats = embed_images(eval, &swap_refs, true)?;
    let toy_fid = toy_fid(&fake_feats, &real_feats)?;

    let mask_iou = if swapper.mask_enabled {
        let plane = dataset.resolution() * dataset.resolution();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            total += mask_iou(&masks[i * plane..(i + 1) * plane], t.mask.data())?;
        }
        Some(total / targets.len() as f64)
    } else {
        None
    };

    let recon_psnr = self_reconstruction_psnr(swapper, dataset, options.recon_frames, options.batch_size)?;
    Ok(EvalReport {
        id_cosine_mean,
        id_retrieval_rate,
        attr_background_err,
        attr_pose_err,
        toy_fid,
        mask_iou,
        recon_psnr,
        sample_count: ep.pairs.len(),
    })
}

/// Mean PSNR of `swap(x, x)` against `x` over `count` held-out frames.
pub fn self_reconstruction_psnr<T: Scalar>(swapper: &Swapper<T>, dataset: &Dataset, count: usize, batch: usize) -> Result<f64> {
    let n_id = dataset.identities.len();
    let held = dataset.held_out(count.div_ceil(n_id))?;
    let frames: Vec<&Image> = held.iter().take(count).map(|s| &s.image).collect();
    if frames.is_empty() {
        return Err(Error::Empty("reconstruction frames"));
    }
    let mut total = 0.0;
    let mut k = 0;
    for out in batched_swaps(swapper, &frames, &frames, batch)? {
        for img in Image::from_batch(&out.image)? {
            total += psnr(img.data(), frames[k].data())?;
            k += 1;
        }
    }
    Ok(total / k as f64)
}
