//! Image-quality and conditioning metrics.
//!
//! Feature-based metrics (Fréchet distance, embedding similarity, perceptual
//! distance) use a small classifier trained on the synthetic scenes, so their
//! absolute values only compare systems scored with the same encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use maskctl_tensor::{Adam, Bound, Float, Graph, ParamStore, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;

use crate::error::{CoreError, Result};
use crate::optimize::{optimize, Checkpoint, TrainLog};
use crate::raster::{ensure_same_size, Image, Mask};
use crate::seeding::{rng_for, stream};
use crate::synthetic_data::{ColorName, SceneRecord, ShapeClass, TextureClass};

pub const ENCODER_CAVEAT: &str =
    "note: ffd, embed_sim and perc_dist use a toy feature encoder trained on synthetic scenes; \
     values are only comparable between systems scored with the same encoder";

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_SSIM_WINDOW: usize = 7;
pub const HIST_BINS: usize = 8;

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// `10 log10(1 / MSE)` on unit-range images; `+inf` for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_size("psnr", a.size(), b.size())?;
    Ok(psnr_from_mse(mse(a.data(), b.data())))
}

/// Mean SSIM over every `window x window` box (stride 1) of every channel.
pub fn ssim(a: &Image, b: &Image, window: usize) -> Result<f64> {
    ensure_same_size("ssim", a.size(), b.size())?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(CoreError::Argument(format!("ssim window must be odd and >= 3, got {window}")));
    }
    let (w, h) = a.size();
    if window > w || window > h {
        return Err(CoreError::Argument(format!(
            "ssim window {window} exceeds image size {w}x{h}"
        )));
    }
    let n = (window * window) as f64;
    let plane = w * h;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa = &a.data()[c * plane..(c + 1) * plane];
        let pb = &b.data()[c * plane..(c + 1) * plane];
        for y0 in 0..=h - window {
            for x0 in 0..=w - window {
                let rows = y0..y0 + window;
                let at = |p: &[f32], y: usize, x: usize| p[y * w + x] as f64;
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in rows.clone() {
                    for x in x0..x0 + window {
                        sa += at(pa, y, x);
                        sb += at(pb, y, x);
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                // Centred second moments: non-negative, and bitwise equal
                // for identical windows, so ssim(x, x) is exactly 1.
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in rows {
                    for x in x0..x0 + window {
                        let (u, v) = (at(pa, y, x) - ma, at(pb, y, x) - mb);
                        va += u * u;
                        vb += v * v;
                        cov += u * v;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mean, cov)
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// Symmetric PSD square root; negative roundoff eigenvalues are treated as 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetric_eigen(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((ra cb ra)^1/2)`, from the eigenvalues directly; no threshold, so
/// small-but-real eigenvalues (which square to below any fixed cutoff)
/// still contribute.
fn sqrt_trace(m: &DMatrix<f64>) -> f64 {
    symmetric_eigen(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_feature_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CoreError::Argument("each feature set needs at least 2 vectors".into()));
    }
    let dim = a[0].len();
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(CoreError::Shape(format!("feature length {} vs {dim}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::InvalidData("non-finite feature value".into()));
        }
    }
    let (ma, ca) = moments(a, dim);
    let (mb, cb) = moments(b, dim);
    let ra = psd_sqrt(&ca);
    let cross = sqrt_trace(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// PSNR restricted to the pixels under `mask`.
pub fn mask_region_fidelity(generated: &Image, reference: &Image, mask: &Mask) -> Result<f64> {
    ensure_same_size("mask_region_fidelity", generated.size(), reference.size())?;
    ensure_same_size("mask_region_fidelity", generated.size(), mask.size())?;
    if mask.count() == 0 {
        return Err(CoreError::Argument("mask has no foreground pixels".into()));
    }
    let plane = mask.data().len();
    let mut s = 0.0;
    for c in 0..3 {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let d = generated.data()[c * plane + i] as f64 - reference.data()[c * plane + i] as f64;
                s += d * d;
            }
        }
    }
    Ok(psnr_from_mse(s / (3 * mask.count()) as f64))
}

/// Normalised 8x8x8 RGB histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHistogram {
    bins: Vec<f64>,
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1)
}

impl ColorHistogram {
    /// Histogram of the pixels where `select(x, y)` holds; `None` if none do.
    pub fn from_region(image: &Image, select: impl Fn(usize, usize) -> bool) -> Option<Self> {
        let mut counts = vec![0.0; HIST_BINS.pow(3)];
        let mut total = 0.0;
        for y in 0..image.height() {
            for x in 0..image.width() {
                if select(x, y) {
                    let [r, g, b] = image.pixel(x, y).map(bin_of);
                    counts[(r * HIST_BINS + g) * HIST_BINS + b] += 1.0;
                    total += 1.0;
                }
            }
        }
        (total > 0.0).then(|| Self {
            bins: counts.into_iter().map(|c| c / total).collect(),
        })
    }

    /// Average of several histograms (each already normalised).
    pub fn average(hists: &[ColorHistogram]) -> Option<Self> {
        let first = hists.first()?;
        let mut bins = vec![0.0; first.bins.len()];
        for h in hists {
            bins.iter_mut().zip(&h.bins).for_each(|(a, b)| *a += b);
        }
        let n = hists.len() as f64;
        Some(Self {
            bins: bins.into_iter().map(|b| b / n).collect(),
        })
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    /// `sum_i min(a_i, b_i)`, in `[0, 1]`.
    pub fn intersection(&self, other: &Self) -> f64 {
        self.bins.iter().zip(&other.bins).map(|(a, b)| a.min(*b)).sum()
    }
}

/// Background colour histograms of a (correlated) training set, keyed by the
/// shape class whose scenes they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundHistograms {
    pub by_shape: BTreeMap<ShapeClass, ColorHistogram>,
}

impl BackgroundHistograms {
    pub fn from_records(records: &[SceneRecord]) -> Self {
        let mut grouped: BTreeMap<ShapeClass, Vec<ColorHistogram>> = BTreeMap::new();
        for r in records {
            if let Some(h) = ColorHistogram::from_region(&r.image, |x, y| !r.mask.get(x, y)) {
                grouped.entry(r.metadata.shape_class).or_default().push(h);
            }
        }
        Self {
            by_shape: grouped
                .into_iter()
                .filter_map(|(k, v)| ColorHistogram::average(&v).map(|h| (k, h)))
                .collect(),
        }
    }
}

/// Overlap between the generated background and the background that the
/// training data paired with `trained_shape`. Higher means more leakage.
pub fn background_leakage(
    generated: &Image,
    generated_mask: &Mask,
    train: &BackgroundHistograms,
    trained_shape: ShapeClass,
) -> Result<f64> {
    ensure_same_size("background_leakage", generated.size(), generated_mask.size())?;
    let target = train.by_shape.get(&trained_shape).ok_or_else(|| {
        CoreError::Argument(format!("no training background histogram for shape `{trained_shape}`"))
    })?;
    let hist = ColorHistogram::from_region(generated, |x, y| !generated_mask.get(x, y))
        .ok_or_else(|| CoreError::Argument("mask leaves no background pixels".into()))?;
    Ok(hist.intersection(target))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

// ----- feature encoder -------------------------------------------------------

const FEATURE_LAYERS: [(&str, usize); 4] = [("feat.conv0", 2), ("feat.conv1", 2), ("feat.conv2", 2), ("feat.conv3", 1)];
/// Layers compared by the perceptual distance.
const PERCEPTUAL_LAYERS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    pub store: ParamStore<f32>,
}

/// Intermediate activations and the pooled embedding of one batch.
pub struct Features {
    pub layers: Vec<Tensor<f32>>,
    /// `[N, feature_dim]`
    pub pooled: Tensor<f32>,
}

impl Features {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let d = self.pooled.dim(1);
        self.pooled.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()
    }
}

fn encoder_graph<T: Float>(p: &Bound<T>, x: Var) -> Result<(Vec<Var>, Var)> {
    let g = p.graph();
    let mut h = x;
    let mut layers = Vec::new();
    for (name, stride) in FEATURE_LAYERS {
        h = g.silu(p.conv(h, name, stride, 1)?);
        layers.push(h);
    }
    // Max pooling keeps small objects visible against a large background.
    let pooled = g.concat_channels(&[g.global_avg_pool(h)?, g.global_max_pool(h)?])?;
    Ok((layers, pooled))
}

impl FeatureEncoder {
    const CHANNELS: usize = 64;
    /// Average- and max-pooled channels of the last layer.
    pub const FEATURE_DIM: usize = 2 * Self::CHANNELS;

    pub fn init(seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::INIT, 1);
        let mut s = ParamStore::new();
        s.init_conv("feat.conv0", 16, 3, 3, &mut rng);
        s.init_conv("feat.conv1", 32, 16, 3, &mut rng);
        s.init_conv("feat.conv2", 64, 32, 3, &mut rng);
        s.init_conv("feat.conv3", Self::CHANNELS, 64, 3, &mut rng);
        s.init_linear("head.shape", ShapeClass::ALL.len(), Self::FEATURE_DIM, &mut rng);
        s.init_linear("head.color", ColorName::ALL.len(), Self::FEATURE_DIM, &mut rng);
        s.init_linear("head.texture", TextureClass::ALL.len(), Self::FEATURE_DIM, &mut rng);
        Self { store: s }
    }

    pub fn features(&self, images: &[&Image]) -> Result<Features> {
        let g = Graph::new();
        let p = Bound::new(&g, &self.store, false);
        let (layers, pooled) = encoder_graph(&p, g.constant(Image::batch(images)?))?;
        Ok(Features {
            layers: layers.into_iter().map(|v| (*g.value(v)).clone()).collect(),
            pooled: (*g.value(pooled)).clone(),
        })
    }

    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.features(&[image])?.vector(0))
    }

    /// Predicted `(shape, color, texture)` class indices.
    pub fn classify(&self, images: &[&Image]) -> Result<Vec<[usize; 3]>> {
        let g = Graph::new();
        let p = Bound::new(&g, &self.store, false);
        let (_, pooled) = encoder_graph(&p, g.constant(Image::batch(images)?))?;
        let heads = ["head.shape", "head.color", "head.texture"]
            .map(|h| p.linear(pooled, h).map(|v| g.value(v)));
        let mut out = vec![[0; 3]; images.len()];
        for (k, logits) in heads.into_iter().enumerate() {
            let logits = logits?;
            let classes = logits.dim(1);
            for (i, row) in logits.data().chunks(classes).enumerate() {
                out[i][k] = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0;
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.store.clone(),
            config: [("kind".to_string(), "feature_encoder".to_string())].into(),
            optimizer: None,
            log: TrainLog::default(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.config.get("kind").map(String::as_str) != Some("feature_encoder") {
            return Err(CoreError::InvalidData("not a feature encoder checkpoint".into()));
        }
        Ok(Self { store: ck.params })
    }
}

/// Cosine similarity of pooled features.
pub fn embed_similarity(a: &Image, b: &Image, enc: &FeatureEncoder) -> Result<f64> {
    let f = enc.features(&[a, b])?;
    Ok(cosine(&f.vector(0), &f.vector(1)))
}

/// Mean squared difference of channel-normalised activations, averaged over
/// positions and then over the compared layers.
pub fn perceptual_distance(a: &Image, b: &Image, enc: &FeatureEncoder) -> Result<f64> {
    ensure_same_size("perceptual_distance", a.size(), b.size())?;
    let f = enc.features(&[a, b])?;
    let mut total = 0.0;
    for &l in &PERCEPTUAL_LAYERS {
        let t = &f.layers[l];
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        let plane = h * w;
        let (fa, fb) = t.data().split_at(c * plane);
        let mut layer = 0.0;
        for pos in 0..plane {
            let norm = |d: &[f32]| {
                (0..c)
                    .map(|k| (d[k * plane + pos] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    + 1e-10
            };
            let (na, nb) = (norm(fa), norm(fb));
            layer += (0..c)
                .map(|k| (fa[k * plane + pos] as f64 / na - fb[k * plane + pos] as f64 / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / plane as f64;
    }
    Ok(total / PERCEPTUAL_LAYERS.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

pub const MIN_FEATURE_SCENES: usize = 100;

/// Fraction of `records` whose shape and colour are both predicted correctly.
pub fn shape_color_accuracy(enc: &FeatureEncoder, records: &[SceneRecord]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in records.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        for (pred, r) in enc.classify(&images)?.into_iter().zip(chunk) {
            if pred[0] == r.metadata.shape_class.index() && pred[1] == r.metadata.color_name.index() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / records.len().max(1) as f64)
}

/// Trains the classifier on `(shape, color, texture)` labels; held-out
/// accuracy is recorded in the log summary.
pub fn train_feature_encoder(
    train: &[SceneRecord],
    held_out: &[SceneRecord],
    config: &FeatureTrainConfig,
) -> Result<(FeatureEncoder, TrainLog)> {
    if train.len() < MIN_FEATURE_SCENES {
        return Err(CoreError::Config(format!(
            "feature encoder training needs at least {MIN_FEATURE_SCENES} scenes, got {}",
            train.len()
        )));
    }
    let mut enc = FeatureEncoder::init(config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let batch = config.batch_size.min(train.len());
    optimize(
        &mut enc.store,
        &mut adam,
        &mut log,
        config.steps,
        config.seed,
        |_, rng, params| {
            let picks: Vec<&SceneRecord> = sample(rng, train.len(), batch).iter().map(|i| &train[i]).collect();
            let images: Vec<&Image> = picks.iter().map(|r| &r.image).collect();
            let g = Graph::new();
            let p = Bound::new(&g, params, true);
            let (_, pooled) = encoder_graph(&p, g.constant(Image::batch(&images)?))?;
            let labels = |f: fn(&SceneRecord) -> usize| picks.iter().map(|r| f(r)).collect::<Vec<_>>();
            let shape = g.cross_entropy(p.linear(pooled, "head.shape")?, &labels(|r| r.metadata.shape_class.index()))?;
            let color = g.cross_entropy(p.linear(pooled, "head.color")?, &labels(|r| r.metadata.color_name.index()))?;
            let texture =
                g.cross_entropy(p.linear(pooled, "head.texture")?, &labels(|r| r.metadata.texture_class.index()))?;
            let loss = g.add(g.add(shape, color)?, texture)?;
            let value = g.value(loss).item() as f64;
            let mut grads = g.backward(loss)?;
            Ok((value, p.gradients(&mut grads)))
        },
        |_, _, _, _| Ok(()),
    )?;
    if !held_out.is_empty() {
        let acc = shape_color_accuracy(&enc, held_out)?;
        log.summary.insert("held_out_accuracy".into(), format!("{acc:.4}"));
    }
    Ok((enc, log))
}

// ----- reports ---------------------------------------------------------------

/// Aggregate metrics plus one record per evaluated pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub setting: String,
    pub metrics: BTreeMap<String, f64>,
    pub pairs: Vec<BTreeMap<String, f64>>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {ENCODER_CAVEAT}");
        if !self.setting.is_empty() {
            let _ = writeln!(out, "setting={}", self.setting);
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k}={v}");
        }
        for (i, pair) in self.pairs.iter().enumerate() {
            let fields: Vec<String> = pair.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "pair={i}\t{}", fields.join("\t"));
        }
        out
    }
}

/// Self-reconstruction report: each generated image is scored against the
/// scene it was conditioned on.
pub fn evaluate_pairs(
    generated: &[Image],
    references: &[SceneRecord],
    enc: &FeatureEncoder,
) -> Result<MetricsReport> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(CoreError::Argument("need one generated image per reference".into()));
    }
    let mut report = MetricsReport {
        setting: "self-reconstruction: each sample is conditioned on, and compared with, its own reference"
            .into(),
        ..Default::default()
    };
    let mut gen_feats = Vec::new();
    let mut ref_feats = Vec::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (g, r) in generated.iter().zip(references) {
        let mut pair = BTreeMap::new();
        pair.insert("psnr".to_string(), psnr(g, &r.image)?);
        pair.insert("ssim".to_string(), ssim(g, &r.image, DEFAULT_SSIM_WINDOW)?);
        pair.insert("embed_sim".to_string(), embed_similarity(g, &r.image, enc)?);
        pair.insert("perc_dist".to_string(), perceptual_distance(g, &r.image, enc)?);
        pair.insert("mask_fidelity".to_string(), mask_region_fidelity(g, &r.image, &r.mask)?);
        gen_feats.push(enc.embed(g)?);
        ref_feats.push(enc.embed(&r.image)?);
        for (k, v) in &pair {
            *sums.entry(k.clone()).or_default() += v;
        }
        report.pairs.push(pair);
    }
    let n = generated.len() as f64;
    report.metrics = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
    if generated.len() >= 2 {
        report
            .metrics
            .insert("ffd".into(), frechet_feature_distance(&gen_feats, &ref_feats)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_constant_images() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_argument_checks() {
        let a = Image::filled(8, 8, [0.5; 3]);
        assert!(ssim(&a, &a, 4).is_err());
        assert!(ssim(&a, &a, 9).is_err());
        assert_eq!(ssim(&a, &a, 3).unwrap(), 1.0);
    }

    #[test]
    fn fidelity_requires_foreground() {
        let a = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(
            mask_region_fidelity(&a, &a, &Mask::filled(8, 8, false)),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn cosine_extremes() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_carries_caveat() {
        assert!(MetricsReport::default().to_text().contains("toy feature encoder"));
    }
}
