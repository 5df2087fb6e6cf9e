//! Distribution metrics on learned event features: Fréchet distances
//! (image and spatio-temporal extractors) and the kernel distance.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, AdamConfig, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::events::{encode_histogram, EventHistogram};
use crate::fsutil::atomic_write;
use crate::networks::{ExtractorConfig, ExtractorKind, FeatureExtractor, FEATURE_DIM};
use crate::tensor::Tensor;

pub const CERTIFICATION_THRESHOLD: f64 = 0.8;
pub const MIN_SAMPLES_PER_CLASS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainConfig {
    pub kind: ExtractorKind,
    pub cap: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ExtractorTrainConfig {
    pub fn new(kind: ExtractorKind, seed: u64) -> Self {
        Self {
            kind,
            cap: 10.0,
            epochs: 6,
            batch_size: 8,
            lr: 1e-3,
            seed,
        }
    }
}

/// Identity of a trained extractor; reports computed with different
/// fingerprints are not comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorFingerprint {
    pub data_hash: String,
    pub architecture: ExtractorKind,
    pub accuracy: f64,
    pub seed: u64,
    pub weights_hash: String,
}

impl ExtractorFingerprint {
    /// Short stable identifier over every field.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.data_hash.as_bytes());
        h.update(self.architecture.as_str().as_bytes());
        h.update(self.accuracy.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(self.weights_hash.as_bytes());
        format!("{}-{}", self.architecture.as_str(), &hex::encode(h.finalize())[..16])
    }
}

/// A certified extractor with its fingerprint.
pub struct TrainedExtractor {
    pub extractor: FeatureExtractor,
    pub fingerprint: ExtractorFingerprint,
}

fn dataset_hash(day: &[EventHistogram], night: &[EventHistogram]) -> String {
    let mut h = Sha256::new();
    for (tag, set) in [(b"day".as_slice(), day), (b"night".as_slice(), night)] {
        h.update(tag);
        h.update((set.len() as u64).to_le_bytes());
        for x in set {
            h.update(Sha256::digest(encode_histogram(x)));
        }
    }
    hex::encode(h.finalize())
}

fn accuracy(ex: &FeatureExtractor, samples: &[(Tensor, usize)]) -> f64 {
    let tape = Tape::no_grad();
    let p = ex.bind(&tape, false);
    let correct = samples
        .iter()
        .filter(|(x, label)| {
            let l = ex.logits(&p, tape.constant(x.clone())).value();
            let pred = if l.data()[1] > l.data()[0] { 1 } else { 0 };
            pred == *label
        })
        .count();
    correct as f64 / samples.len().max(1) as f64
}

/// Trains a day (0) / night (1) classifier on an 80/20 split per class and
/// certifies it if held-out accuracy reaches [`CERTIFICATION_THRESHOLD`].
pub fn train_extractor(
    day: &[EventHistogram],
    night: &[EventHistogram],
    cfg: &ExtractorTrainConfig,
) -> Result<TrainedExtractor> {
    for (name, set) in [("day", day), ("night", night)] {
        if set.len() < MIN_SAMPLES_PER_CLASS {
            return Err(Error::Config(format!(
                "extractor training needs at least {MIN_SAMPLES_PER_CLASS} {name} samples, got {}",
                set.len()
            )));
        }
    }
    let bins = day[0].bins();
    if day.iter().chain(night).any(|h| h.bins() != bins) {
        return Err(Error::Config("extractor training sets mix bin counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ex = FeatureExtractor::new(
        ExtractorConfig {
            kind: cfg.kind,
            bins,
            cap: cfg.cap,
        },
        &mut rng,
    )?;
    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for (label, set) in [(0usize, day), (1usize, night)] {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut rng);
        let cut = set.len() * 4 / 5;
        for (k, &i) in idx.iter().enumerate() {
            let item = (ex.input_tensor(&set[i])?, label);
            if k < cut {
                train_set.push(item);
            } else {
                val_set.push(item);
            }
        }
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &ex.params,
    );
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        train_set.shuffle(&mut rng);
        for batch in train_set.chunks(bs) {
            let mut grads: Vec<Option<Tensor>> = vec![None; ex.params.len()];
            for (x, label) in batch {
                let tape = Tape::new();
                let p = ex.bind(&tape, true);
                let loss = ex
                    .logits(&p, tape.constant(x.clone()))
                    .cross_entropy_rows(&[*label])
                    .scale(1.0 / batch.len() as f64);
                let mut g = tape.backward(loss);
                for (acc, gi) in grads.iter_mut().zip(p.take_grads(&mut g)) {
                    if let Some(gi) = gi {
                        match acc {
                            Some(a) => a.add_assign(&gi),
                            None => *acc = Some(gi),
                        }
                    }
                }
            }
            opt.step(&mut ex.params, &grads);
        }
        log::debug!("extractor epoch {epoch}: train acc {:.3}", accuracy(&ex, &train_set));
    }
    let acc = accuracy(&ex, &val_set);
    if acc < CERTIFICATION_THRESHOLD {
        return Err(Error::Uncertified {
            accuracy: acc,
            threshold: CERTIFICATION_THRESHOLD,
        });
    }
    ex.certify(acc);
    let fingerprint = ExtractorFingerprint {
        data_hash: dataset_hash(day, night),
        architecture: cfg.kind,
        accuracy: acc,
        seed: cfg.seed,
        weights_hash: ex.compute_fingerprint(),
    };
    Ok(TrainedExtractor {
        extractor: ex,
        fingerprint,
    })
}

impl TrainedExtractor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a ExtractorConfig,
            fingerprint: &'a ExtractorFingerprint,
        }
        let meta = Meta {
            config: &self.extractor.config,
            fingerprint: &self.fingerprint,
        };
        Checkpoint {
            iteration: 0,
            config_json: serde_json::to_string(&meta).expect("metadata serialises"),
            tensors: self.extractor.params.to_named(),
        }
        .save(path)
    }

    /// Loads a saved extractor, refusing it if the weights no longer match
    /// the recorded fingerprint.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: ExtractorConfig,
            fingerprint: ExtractorFingerprint,
        }
        let ckpt = Checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::format(0, format!("extractor metadata: {e}")))?;
        let mut ex = FeatureExtractor::new(meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ex.params.load_named(&ckpt.tensors)?;
        if ex.compute_fingerprint() != meta.fingerprint.weights_hash {
            return Err(Error::FingerprintMismatch {
                left: ex.compute_fingerprint(),
                right: meta.fingerprint.weights_hash,
            });
        }
        ex.certify(meta.fingerprint.accuracy);
        Ok(Self {
            extractor: ex,
            fingerprint: meta.fingerprint,
        })
    }
}

/// Per-sample feature rows.
pub fn extract_all(ex: &FeatureExtractor, set: &[EventHistogram]) -> Result<Vec<Vec<f64>>> {
    set.iter().map(|h| ex.extract_features(h)).collect()
}

/// Empirical mean and (n-1)-normalised covariance.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples for moments, got {n}")));
    }
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{name} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(Error::Config(format!("{name} is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the matrix root taken
/// as `tr sqrt(sqrt(S1) S2 sqrt(S1))` and negative eigenvalues clipped.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    check_symmetric("cov1", cov1)?;
    check_symmetric("cov2", cov2)?;
    if mu1.len() != mu2.len() || cov1.nrows() != mu1.len() || cov2.nrows() != mu2.len() {
        return Err(Error::Shape("mean/covariance dimensions disagree".into()));
    }
    let s1 = psd_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * tr_root;
    Ok(clip_floor(d))
}

fn clip_floor(v: f64) -> f64 {
    if v < 0.0 && v > -1e-8 {
        0.0
    } else {
        v.max(0.0)
    }
}

fn require_kind(ex: &FeatureExtractor, kind: ExtractorKind, metric: &str) -> Result<()> {
    if ex.config.kind != kind {
        return Err(Error::Config(format!(
            "{metric} needs the {} extractor, got {}",
            kind.as_str(),
            ex.config.kind.as_str()
        )));
    }
    Ok(())
}

fn warn_small(n: usize, metric: &str) {
    if n < FEATURE_DIM {
        log::warn!("{metric}: only {n} samples for {FEATURE_DIM}-d features; covariance is rank deficient");
    }
}

fn frechet_between(ex: &FeatureExtractor, a: &[EventHistogram], b: &[EventHistogram], metric: &str) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Config(format!("{metric} needs at least 2 samples per set")));
    }
    warn_small(a.len().min(b.len()), metric);
    let (m1, c1) = moments(&extract_all(ex, a)?)?;
    let (m2, c2) = moments(&extract_all(ex, b)?)?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// Fréchet distance on image-extractor features.
pub fn event_fid(ex: &FeatureExtractor, a: &[EventHistogram], b: &[EventHistogram]) -> Result<f64> {
    require_kind(ex, ExtractorKind::Image, "event FID")?;
    frechet_between(ex, a, b, "event FID")
}

/// Fréchet distance on spatio-temporal-extractor features.
pub fn event_fvd(ex: &FeatureExtractor, a: &[EventHistogram], b: &[EventHistogram]) -> Result<f64> {
    require_kind(ex, ExtractorKind::Video, "event FVD")?;
    frechet_between(ex, a, b, "event FVD")
}

/// Unbiased squared MMD with kernel `(x.y / d + 1)^3`, times 100.
pub fn kid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Config("KID needs at least 2 samples per set".into()));
    }
    let d = a[0].len() as f64;
    let k = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        (dot / d + 1.0).powi(3)
    };
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    let mmd = within(a) + within(b) - 2.0 * cross / (m * n) as f64;
    Ok(100.0 * mmd)
}

pub fn kid(ex: &FeatureExtractor, a: &[EventHistogram], b: &[EventHistogram]) -> Result<f64> {
    warn_small(a.len().min(b.len()), "KID");
    kid_from_features(&extract_all(ex, a)?, &extract_all(ex, b)?)
}

/// Flat key-value summary of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub event_fid: Option<f64>,
    pub event_fvd: Option<f64>,
    pub kid: Option<f64>,
    pub samples_a: usize,
    pub samples_b: usize,
    pub fingerprint_image: Option<String>,
    pub fingerprint_video: Option<String>,
}

impl MetricReport {
    /// Computes every metric for which an extractor is supplied.
    pub fn compute(
        image: Option<&TrainedExtractor>,
        video: Option<&TrainedExtractor>,
        a: &[EventHistogram],
        b: &[EventHistogram],
    ) -> Result<Self> {
        let mut r = MetricReport {
            samples_a: a.len(),
            samples_b: b.len(),
            ..Default::default()
        };
        if let Some(ex) = image {
            r.event_fid = Some(event_fid(&ex.extractor, a, b)?);
            // The unbiased estimate can dip below zero; reports carry the floor.
            r.kid = Some(kid(&ex.extractor, a, b)?.max(0.0));
            r.fingerprint_image = Some(ex.fingerprint.id());
        }
        if let Some(ex) = video {
            r.event_fvd = Some(event_fvd(&ex.extractor, a, b)?);
            r.fingerprint_video = Some(ex.fingerprint.id());
        }
        if r.fingerprint_image.is_none() && r.fingerprint_video.is_none() {
            return Err(Error::FingerprintMissing);
        }
        Ok(r)
    }

    pub fn to_text(&self) -> String {
        let mut kv = BTreeMap::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        kv.insert("event_fid", opt(self.event_fid));
        kv.insert("event_fvd", opt(self.event_fvd));
        kv.insert("kid_x100", opt(self.kid));
        kv.insert("samples_a", self.samples_a.to_string());
        kv.insert("samples_b", self.samples_b.to_string());
        kv.insert("fingerprint_image", self.fingerprint_image.clone().unwrap_or_else(|| "none".into()));
        kv.insert("fingerprint_video", self.fingerprint_video.clone().unwrap_or_else(|| "none".into()));
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricReport::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(n as u64 + 1, format!("line {} is not key=value", n + 1)))?;
            let num = |v: &str| -> Result<Option<f64>> {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse()
                        .map(Some)
                        .map_err(|_| Error::format(n as u64 + 1, format!("line {}: bad number {v:?}", n + 1)))
                }
            };
            let text = |v: &str| (v != "none").then(|| v.to_string());
            match k {
                "event_fid" => r.event_fid = num(v)?,
                "event_fvd" => r.event_fvd = num(v)?,
                "kid_x100" => r.kid = num(v)?,
                "samples_a" => r.samples_a = num(v)?.unwrap_or(0.0) as usize,
                "samples_b" => r.samples_b = num(v)?.unwrap_or(0.0) as usize,
                "fingerprint_image" => r.fingerprint_image = text(v),
                "fingerprint_video" => r.fingerprint_video = text(v),
                other => return Err(Error::format(n as u64 + 1, format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        if r.fingerprint_image.is_none() && r.fingerprint_video.is_none() {
            return Err(Error::FingerprintMissing);
        }
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Errors unless both reports were produced by the same extractors.
    pub fn check_comparable(&self, other: &MetricReport) -> Result<()> {
        for (a, b) in [
            (&self.fingerprint_image, &other.fingerprint_image),
            (&self.fingerprint_video, &other.fingerprint_video),
        ] {
            if a != b {
                return Err(Error::FingerprintMismatch {
                    left: a.clone().unwrap_or_else(|| "none".into()),
                    right: b.clone().unwrap_or_else(|| "none".into()),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one(v: f64) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let (m0, c1) = one(1.0);
        let m1 = DVector::from_element(1, 1.0);
        assert!((frechet_distance(&m0, &c1, &m1, &c1).unwrap() - 1.0).abs() < 1e-12);
        let (_, c4) = one(4.0);
        assert!((frechet_distance(&m0, &c4, &m0, &c1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&m0, &c4, &m0, &c4).unwrap(), 0.0);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..40).map(|_| (0..5).map(|_| rng.random::<f64>() + shift).collect()).collect()
        };
        let (ma, ca) = moments(&feats(&mut rng, 0.0)).unwrap();
        let (mb, cb) = moments(&feats(&mut rng, 0.3)).unwrap();
        let ab = frechet_distance(&ma, &ca, &mb, &cb).unwrap();
        let ba = frechet_distance(&mb, &cb, &ma, &ca).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(frechet_distance(&ma, &ca, &ma, &ca).unwrap() < 1e-6);
        let mut bad = ca.clone();
        bad[(0, 1)] += 1e-3;
        assert!(matches!(frechet_distance(&ma, &bad, &mb, &cb), Err(Error::Config(_))));
    }

    #[test]
    fn kid_properties() {
        let x = vec![vec![0.5, -1.0, 2.0]; 2];
        assert_eq!(kid_from_features(&x, &x).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random::<f64>() + 0.5).collect()).collect();
        let ab = kid_from_features(&a, &b).unwrap();
        assert!((ab - kid_from_features(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    /// Two disjoint halves of one sample: KID is within three bootstrap
    /// standard deviations of zero.
    #[test]
    fn kid_of_same_distribution_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let v = kid_from_features(&pool[..100], &pool[100..]).unwrap();
        let mut boots = Vec::new();
        for _ in 0..50 {
            let pick = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..100).map(|_| pool[rng.random_range(0..200)].clone()).collect() };
            let (a, b) = (pick(&mut rng), pick(&mut rng));
            boots.push(kid_from_features(&a, &b).unwrap());
        }
        let mean = boots.iter().sum::<f64>() / boots.len() as f64;
        let sd = (boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt();
        assert!(v.abs() <= 3.0 * sd, "{v} vs sd {sd}");
    }

    #[test]
    fn report_round_trip_and_fingerprint_guard() {
        let r = MetricReport {
            event_fid: Some(1.25),
            event_fvd: None,
            kid: Some(0.5),
            samples_a: 10,
            samples_b: 12,
            fingerprint_image: Some("image-abc".into()),
            fingerprint_video: None,
        };
        let back = MetricReport::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        let mut other = r.clone();
        other.fingerprint_image = Some("image-def".into());
        assert!(matches!(r.check_comparable(&other), Err(Error::FingerprintMismatch { .. })));
        r.check_comparable(&back).unwrap();
        assert!(matches!(MetricReport::parse("event_fid=1\n"), Err(Error::FingerprintMissing)));
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let h = EventHistogram::zeros(3, 8, 8, crate::events::Domain::Day);
        let err = train_extractor(&[h.clone()], &[h], &ExtractorTrainConfig::new(ExtractorKind::Image, 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
