use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Bound, ConvGeometry, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::events::EventHistogram;
use crate::nn::{Conv2d, Conv3d, GroupNorm, Linear};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
const WIDTHS: [usize; 4] = [16, 32, 64, FEATURE_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// 2-D convolutions over the stacked `2B` channels.
    Image,
    /// 3-D convolutions with the bins as a time axis and polarity as channels.
    Video,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::Image => "image",
            ExtractorKind::Video => "video",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub bins: usize,
    /// Count clipping cap used to normalise inputs.
    pub cap: f64,
}

/// Validation result attached to a trained extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub accuracy: f64,
    pub fingerprint: String,
}

enum Stage {
    Flat(Conv2d),
    Temporal(Conv3d),
}

/// Small day/night classifier whose pooled penultimate activations serve
/// as metric features.
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub params: ParamStore,
    pub certification: Option<Certification>,
    stages: Vec<Stage>,
    norms: Vec<Option<GroupNorm>>,
    classifier: Linear,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        if config.bins == 0 {
            return Err(Error::Config("extractor needs at least one bin".into()));
        }
        if !(config.cap > 0.0) {
            return Err(Error::Config(format!("cap must be positive, got {}", config.cap)));
        }
        let mut s = ParamStore::new();
        let mut stages = Vec::new();
        let mut norms = Vec::new();
        let mut cin = match config.kind {
            ExtractorKind::Image => 2 * config.bins,
            ExtractorKind::Video => 2,
        };
        let kt = if config.bins >= 3 { 3 } else { 1 };
        for (k, &cout) in WIDTHS.iter().enumerate() {
            let stride = if k + 1 < WIDTHS.len() { 2 } else { 1 };
            let name = format!("stage{k}");
            stages.push(match config.kind {
                ExtractorKind::Image => Stage::Flat(Conv2d::new(&mut s, &name, cin, cout, 3, stride, 1, rng)),
                ExtractorKind::Video => Stage::Temporal(Conv3d::new(
                    &mut s,
                    &name,
                    cin,
                    cout,
                    ConvGeometry {
                        kernel: [kt, 3, 3],
                        stride: [1, stride, stride],
                        pad: [kt / 2, 1, 1],
                    },
                    rng,
                )),
            });
            norms.push((k > 0 && k + 1 < WIDTHS.len()).then(|| GroupNorm::new(&mut s, &format!("{name}.norm"), cout)));
            cin = cout;
        }
        let classifier = Linear::new(&mut s, "classifier", FEATURE_DIM, 2, rng);
        Ok(Self {
            config,
            params: s,
            certification: None,
            stages,
            norms,
            classifier,
        })
    }

    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> Bound<'t, 's> {
        Bound::new(tape, &self.params, trainable)
    }

    /// Network input for `h`: `ln(1 + min(count, cap))` and, for the video
    /// variant, rearranged to `(2, B, H, W)`.
    pub fn input_tensor(&self, h: &EventHistogram) -> Result<Tensor> {
        if h.bins() != self.config.bins {
            return Err(Error::Shape(format!(
                "extractor built for {} bins, histogram has {}",
                self.config.bins,
                h.bins()
            )));
        }
        if h.height() < 8 || h.width() < 8 {
            return Err(Error::Shape(format!(
                "extractor needs at least 8x8 inputs, got {}x{}",
                h.height(),
                h.width()
            )));
        }
        let cap = self.config.cap;
        let x = Tensor::new(
            &[h.channels(), h.height(), h.width()],
            h.data().iter().map(|&v| (v as f64).clamp(0.0, cap).ln_1p()).collect(),
        );
        Ok(match self.config.kind {
            ExtractorKind::Image => x,
            ExtractorKind::Video => {
                let b = h.bins();
                let plane = h.height() * h.width();
                let mut out = vec![0.0; x.numel()];
                for bin in 0..b {
                    for pol in 0..2 {
                        let src = &x.data()[(2 * bin + pol) * plane..][..plane];
                        out[(pol * b + bin) * plane..][..plane].copy_from_slice(src);
                    }
                }
                Tensor::new(&[2, b, h.height(), h.width()], out)
            }
        })
    }

    /// Pooled `FEATURE_DIM` features of a prepared input.
    pub fn features_var<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for (stage, norm) in self.stages.iter().zip(&self.norms) {
            h = match stage {
                Stage::Flat(c) => c.forward(p, h),
                Stage::Temporal(c) => c.forward(p, h),
            };
            if let Some(n) = norm {
                h = n.forward(p, h);
            }
            h = h.leaky_relu(0.2);
        }
        h.mean_trailing()
    }

    /// Day/night logits for a prepared input, shape `[1, 2]`.
    pub fn logits<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        let f = self.features_var(p, x).reshape(&[1, FEATURE_DIM]);
        self.classifier.forward(p, f)
    }

    /// Features of a histogram; refuses extractors that were never certified.
    pub fn extract_features(&self, h: &EventHistogram) -> Result<Vec<f64>> {
        if self.certification.is_none() {
            return Err(Error::FingerprintMissing);
        }
        let x = self.input_tensor(h)?;
        let tape = Tape::no_grad();
        let p = self.bind(&tape, false);
        Ok(self.features_var(&p, tape.constant(x)).value().data().to_vec())
    }

    /// SHA-256 over the configuration and every parameter, in name order.
    pub fn compute_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in self.params.to_named() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn certify(&mut self, accuracy: f64) {
        self.certification = Some(Certification {
            accuracy,
            fingerprint: self.compute_fingerprint(),
        });
    }
}
