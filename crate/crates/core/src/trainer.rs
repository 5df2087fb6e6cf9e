//! Unpaired training loop, inference and model checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape};
use crate::checkpoint::{first_difference, Checkpoint};
use crate::error::{Error, Result};
use crate::events::{check_supported_bins, Domain, EventHistogram};
use crate::networks::{Critic, CriticConfig, FeatureHeads, Generator, GeneratorConfig};
use crate::objectives::{
    lsgan_critic_loss, lsgan_generator_loss, sb_loss, spatial_contrastive_loss, temporal_contrastive_loss,
    shuffle_permutations, total_loss, ContrastiveConfig, LossBreakdown, LossTerms, LossWeights, LOSS_CSV_HEADER,
};
use crate::sb_bridge::{run_full_chain, sample_chain, sample_latent, BridgeConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    DayToNight,
    NightToDay,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day_to_night" => Ok(Direction::DayToNight),
            "night_to_day" => Ok(Direction::NightToDay),
            other => Err(Error::Config(format!(
                "unknown direction {other:?} (expected day_to_night or night_to_day)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub direction: Direction,
    pub bins: usize,
    /// Square crop side fed to the networks.
    pub size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Counts are clipped to `[0, cap]` before normalisation.
    pub cap: f64,
    /// Random crop and horizontal flip.
    pub augment: bool,
    /// Save a checkpoint every this many iterations; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub generator_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub bridge: BridgeConfig,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl TrainConfig {
    pub fn for_bins(bins: usize) -> Self {
        Self {
            direction: Direction::DayToNight,
            bins,
            size: 64,
            batch_size: 1,
            iterations: 1000,
            seed: 0,
            cap: 10.0,
            augment: true,
            checkpoint_every: 0,
            generator_optimizer: AdamConfig::default(),
            critic_optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::for_bins(bins),
            bridge: BridgeConfig::default(),
            generator: GeneratorConfig::for_bins(bins),
            critic: CriticConfig::for_bins(bins),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_supported_bins(self.bins)?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.cap > 0.0) || !self.cap.is_finite() {
            return Err(Error::Config(format!("cap must be positive, got {}", self.cap)));
        }
        self.generator.validate()?;
        self.critic.validate()?;
        self.bridge.validate()?;
        self.weights.validate()?;
        self.contrastive.validate(self.bins)?;
        let m = self.generator.spatial_multiple().max(1 << CriticConfig::STAGES);
        if self.size == 0 || self.size % m != 0 {
            return Err(Error::Config(format!("size {} must be a positive multiple of {m}", self.size)));
        }
        for (what, got) in [
            ("generator.bins", self.generator.bins),
            ("critic.bins", self.critic.bins),
        ] {
            if got != self.bins {
                return Err(Error::Config(format!("{what} is {got}, expected {}", self.bins)));
            }
        }
        for (what, got) in [
            ("generator.timesteps", self.generator.timesteps),
            ("critic.timesteps", self.critic.timesteps),
        ] {
            if got != self.bridge.steps {
                return Err(Error::Config(format!(
                    "{what} is {got}, expected bridge.steps = {}",
                    self.bridge.steps
                )));
            }
        }
        Ok(())
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// Trained networks together with the configuration that built them.
pub struct TranslationModel {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub heads: FeatureHeads,
    pub iteration: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl TranslationModel {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), &mut stream_rng(config.seed, 1))?;
        let critic = Critic::new(config.critic.clone(), &mut stream_rng(config.seed, 2))?;
        let heads = FeatureHeads::for_generator(&config.generator, config.contrastive.embed_dim, &mut stream_rng(config.seed, 3));
        Ok(Self {
            config,
            generator,
            critic,
            heads,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = std::collections::BTreeMap::new();
        for (prefix, store) in [
            ("generator/", &self.generator.params),
            ("critic/", &self.critic.params),
            ("heads/", &self.heads.params),
        ] {
            for (k, v) in store.to_named() {
                tensors.insert(format!("{prefix}{k}"), v);
            }
        }
        Checkpoint {
            iteration: self.iteration,
            config_json: self.config.to_json(),
            tensors,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::format(0, format!("checkpoint config: {e}")))?;
        let mut model = Self::new(config)?;
        model.generator.params.load_named(&ckpt.group("generator/"))?;
        model.critic.params.load_named(&ckpt.group("critic/"))?;
        model.heads.params.load_named(&ckpt.group("heads/"))?;
        model.iteration = ckpt.iteration;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint and refuses it unless its configuration equals
    /// `expected`, naming the first differing field.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<Self> {
        let model = Self::load(path)?;
        let a = serde_json::to_value(&model.config).expect("config serialises");
        let b = serde_json::to_value(expected).expect("config serialises");
        if let Some(field) = first_difference(&a, &b) {
            return Err(Error::ConfigMismatch { field });
        }
        Ok(model)
    }

    fn check_input(&self, h: &EventHistogram) -> Result<()> {
        if h.bins() != self.config.bins {
            return Err(Error::ConfigMismatch {
                field: format!("bins (model {}, input {})", self.config.bins, h.bins()),
            });
        }
        if h.height() != self.config.size || h.width() != self.config.size {
            return Err(Error::ConfigMismatch {
                field: format!(
                    "size (model {}, input {}x{})",
                    self.config.size,
                    h.height(),
                    h.width()
                ),
            });
        }
        Ok(())
    }

    /// Runs the full bridge chain on each input and maps the result back to
    /// whole counts.
    pub fn translate(&self, inputs: &[EventHistogram], seed: u64) -> Result<Vec<EventHistogram>> {
        let mut rng = stream_rng(seed, 7);
        inputs
            .iter()
            .map(|h| {
                self.check_input(h)?;
                let x = h.normalized(self.config.cap);
                let y = run_full_chain(&self.generator, &x, &self.config.bridge, &mut rng)?;
                if !y.all_finite() {
                    return Err(Error::NumericalAbort {
                        component: "translate".into(),
                        iteration: None,
                    });
                }
                EventHistogram::from_normalized(&y, self.config.cap, Domain::Translated)
            })
            .collect()
    }

    /// Temporal contrastive loss of a translation against its source, once
    /// with the translated bins in order and once averaged over bin
    /// permutations drawn like the training negatives. Returns
    /// `(ordered, shuffled)`; `None` for single-bin models.
    pub fn temporal_consistency(
        &self,
        source: &EventHistogram,
        translated: &EventHistogram,
        seed: u64,
    ) -> Result<Option<(f64, f64)>> {
        let bins = self.config.bins;
        if bins < 2 {
            return Ok(None);
        }
        self.check_input(source)?;
        self.check_input(translated)?;
        let x = translated.normalized(self.config.cap);
        let perms = shuffle_permutations(bins, self.config.contrastive.negatives, &mut stream_rng(seed, 9))?;
        let tape = Tape::no_grad();
        let gp = self.generator.bind(&tape, false);
        let hp = self.heads.bind(&tape, false);
        let temb = self.generator.time_embedding(&gp, 0)?;
        let src = self.generator.encode(&gp, tape.constant(source.normalized(self.config.cap)), temb)?;
        let score = |input: Tensor| -> Result<f64> {
            let enc = self.generator.encode(&gp, tape.constant(input), temb)?;
            let mut rng = stream_rng(seed, 8);
            let l = temporal_contrastive_loss(&enc.features, &src.features, &self.heads, &hp, bins, &self.config.contrastive, &mut rng)?;
            Ok(l.value().map(|v| v.item()).unwrap_or(0.0))
        };
        let ordered = score(x.clone())?;
        let mut shuffled = 0.0;
        for perm in &perms {
            let parts: Vec<Tensor> = perm.iter().map(|&b| x.narrow0(2 * b, 2)).collect();
            shuffled += score(Tensor::cat0(&parts.iter().collect::<Vec<_>>()))?;
        }
        Ok(Some((ordered, shuffled / perms.len() as f64)))
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub loss_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub t_i: usize,
    pub losses: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: TranslationModel,
    pub log: Vec<LossRecord>,
}

/// Random `size` square crop (and optional flip) of a normalised histogram.
fn prepare<R: Rng + ?Sized>(h: &EventHistogram, cfg: &TrainConfig, rng: &mut R) -> Tensor {
    let x = h.normalized(cfg.cap);
    let (c, hh, ww) = (h.channels(), h.height(), h.width());
    let (top, left) = if cfg.augment {
        (rng.random_range(0..=hh - cfg.size), rng.random_range(0..=ww - cfg.size))
    } else {
        ((hh - cfg.size) / 2, (ww - cfg.size) / 2)
    };
    let flip = cfg.augment && rng.random_bool(0.5);
    let s = cfg.size;
    let mut out = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for r in 0..s {
            let row = &x.data()[(ch * hh + top + r) * ww + left..][..s];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(&[c, s, s], out)
}

fn check_dataset(name: &str, data: &[EventHistogram], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{name} dataset is empty")));
    }
    for (i, h) in data.iter().enumerate() {
        if h.bins() != cfg.bins {
            return Err(Error::Config(format!(
                "{name} sample {i} has {} bins, config expects {}",
                h.bins(),
                cfg.bins
            )));
        }
        if h.height() < cfg.size || h.width() < cfg.size {
            return Err(Error::Config(format!(
                "{name} sample {i} is {}x{}, smaller than size {}",
                h.height(),
                h.width(),
                cfg.size
            )));
        }
    }
    Ok(())
}

fn accumulate(into: &mut [Option<Tensor>], from: Vec<Option<Tensor>>, scale: f64) {
    for (a, b) in into.iter_mut().zip(from) {
        if let Some(b) = b {
            let b = if scale == 1.0 { b } else { b.scale(scale) };
            match a {
                Some(a) => a.add_assign(&b),
                None => *a = Some(b),
            }
        }
    }
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NumericalAbort { component, .. } => Error::NumericalAbort {
            component,
            iteration: Some(it),
        },
        other => other,
    }
}

fn no_grads(store: &ParamStore) -> Vec<Option<Tensor>> {
    vec![None; store.len()]
}

struct Optimizers {
    generator: Adam,
    critic: Adam,
    heads: Adam,
}

/// Trains on unpaired day and night sets. With `night_to_day` the two
/// roles are swapped.
pub fn train(
    cfg: &TrainConfig,
    day: &[EventHistogram],
    night: &[EventHistogram],
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (source, target) = match cfg.direction {
        Direction::DayToNight => (day, night),
        Direction::NightToDay => (night, day),
    };
    check_dataset("source", source, cfg)?;
    check_dataset("target", target, cfg)?;
    let mut model = TranslationModel::new(cfg.clone())?;
    let mut opt = Optimizers {
        generator: Adam::new(cfg.generator_optimizer, &model.generator.params),
        critic: Adam::new(cfg.critic_optimizer, &model.critic.params),
        heads: Adam::new(cfg.generator_optimizer, &model.heads.params),
    };
    let mut csv = match &outputs.loss_csv {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let mut rng = stream_rng(cfg.seed, 0);
    let mut log = Vec::with_capacity(cfg.iterations);
    let sc_locations = cfg.contrastive.sc_locations_for(cfg.size);
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for it in 0..cfg.iterations {
        let t_i = rng.random_range(0..cfg.bridge.steps);
        let t = cfg.bridge.time(t_i);
        let mut gen_grads = no_grads(&model.generator.params);
        let mut head_grads = no_grads(&model.heads.params);
        let mut sums = LossBreakdown {
            adv_g: 0.0,
            adv_d: 0.0,
            sb: 0.0,
            sc: 0.0,
            tc: if cfg.bins >= 2 { Some(0.0) } else { None },
            total: 0.0,
        };
        let mut critic_pairs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let x0 = prepare(&source[rng.random_range(0..source.len())], cfg, &mut rng);
            let x1_real = prepare(&target[rng.random_range(0..target.len())], cfg, &mut rng);
            let x_t = sample_chain(&model.generator, &x0, t_i, &cfg.bridge, &mut rng)?.x;
            let z = sample_latent(cfg.generator.latent_dim, &mut rng);
            let tape = Tape::new();
            let gp = model.generator.bind(&tape, true);
            let dp = model.critic.bind(&tape, false);
            let hp = model.heads.bind(&tape, true);
            let zv = tape.constant(z);
            let x_tv = tape.constant(x_t);
            let out = model.generator.generate(&gp, x_tv, t_i, zv)?;
            let adv_g = lsgan_generator_loss(model.critic.criticize(&dp, out.x1, t_i)?);
            let sb = sb_loss(x_tv, out.x1, zv, out.z_hat, t, cfg.bridge.tau);
            let temb0 = model.generator.time_embedding(&gp, 0)?;
            let enc_src = model.generator.encode(&gp, tape.constant(x0), temb0)?;
            let enc_gen = model.generator.encode(&gp, out.x1, temb0)?;
            let sc = spatial_contrastive_loss(
                &enc_src.features,
                &enc_gen.features,
                &model.heads,
                &hp,
                sc_locations,
                cfg.contrastive.sc_temperature,
                &mut rng,
            )?;
            let tc = temporal_contrastive_loss(
                &enc_gen.features,
                &enc_src.features,
                &model.heads,
                &hp,
                cfg.bins,
                &cfg.contrastive,
                &mut rng,
            )?;
            let terms = LossTerms { adv_g, sb, sc, tc };
            let (total, b) = total_loss(&terms, &cfg.weights, 0.0).map_err(|e| at_iteration(e, it))?;
            sums.adv_g += b.adv_g * inv_batch;
            sums.sb += b.sb * inv_batch;
            sums.sc += b.sc * inv_batch;
            if let (Some(s), Some(v)) = (sums.tc.as_mut(), b.tc) {
                *s += v * inv_batch;
            }
            sums.total += b.total * inv_batch;
            critic_pairs.push(((*out.x1.value()).clone(), x1_real));
            let mut g = tape.backward(total);
            accumulate(&mut gen_grads, gp.take_grads(&mut g), inv_batch);
            accumulate(&mut head_grads, hp.take_grads(&mut g), inv_batch);
        }
        opt.generator.step(&mut model.generator.params, &gen_grads);
        opt.heads.step(&mut model.heads.params, &head_grads);

        // Critic update on the detached predictions.
        let mut critic_grads = no_grads(&model.critic.params);
        for (fake, real) in critic_pairs {
            let tape = Tape::new();
            let dp = model.critic.bind(&tape, true);
            let real_s = model.critic.criticize(&dp, tape.constant(real), t_i)?;
            let fake_s = model.critic.criticize(&dp, tape.constant(fake), t_i)?;
            let loss_d = lsgan_critic_loss(real_s, fake_s);
            sums.adv_d += loss_d.item() * inv_batch;
            let mut g = tape.backward(loss_d);
            accumulate(&mut critic_grads, dp.take_grads(&mut g), inv_batch);
        }
        if !sums.adv_d.is_finite() {
            return Err(Error::NumericalAbort {
                component: "adv_d".into(),
                iteration: Some(it),
            });
        }
        opt.critic.step(&mut model.critic.params, &critic_grads);
        model.iteration = it as u64 + 1;

        if let Some((p, w)) = csv.as_mut() {
            writeln!(w, "{}", sums.csv_row(it, t_i)).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(LossRecord {
            iteration: it,
            t_i,
            losses: sums,
        });
        let last = it + 1 == cfg.iterations;
        if let Some(dir) = &outputs.checkpoint_dir {
            if last || (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
                if let Some((p, w)) = csv.as_mut() {
                    w.flush().map_err(|e| Error::io(p.as_path(), e))?;
                }
                let path = dir.join(format!("checkpoint_{:06}.evck", it + 1));
                model.save(&path).map_err(|e| match e {
                    Error::Io { path, source } => Error::CheckpointWrite {
                        path,
                        iteration: it + 1,
                        source,
                    },
                    other => other,
                })?;
            }
        }
        if (it + 1) % 100 == 0 {
            log::info!("iteration {} total {:.4}", it + 1, log[it].losses.total);
        }
    }
    if let Some((p, mut w)) = csv {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{bin_events, generate_day_scene, generate_night_scene, SceneConfig};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::for_bins(3);
        cfg.size = 16;
        cfg.iterations = 4;
        cfg.generator = GeneratorConfig {
            base_channels: 6,
            time_embed_dim: 8,
            ..GeneratorConfig::for_bins(3)
        };
        cfg.critic.base_channels = 4;
        cfg.critic.time_embed_dim = 8;
        cfg.contrastive.embed_dim = 8;
        cfg.contrastive.tc_locations = 8;
        cfg
    }

    fn data(n: usize, night: bool, size: usize) -> Vec<EventHistogram> {
        (0..n)
            .map(|i| {
                let sc = SceneConfig {
                    height: size,
                    width: size,
                    seed: 1000 * night as u64 + i as u64,
                    ..SceneConfig::default()
                };
                let s = if night { generate_night_scene(&sc) } else { generate_day_scene(&sc) }.unwrap();
                bin_events(&s, 3, if night { Domain::Night } else { Domain::Day }).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        TrainConfig::for_bins(3).validate().unwrap();
        let mut c = TrainConfig::for_bins(3);
        c.size = 40;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::for_bins(3);
        c.bins = 5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_bins(3);
        c.iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_iteration() {
        let cfg = tiny_config();
        let (day, night) = (data(3, false, 20), data(3, true, 20));
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let out = TrainOutputs {
                loss_csv: Some(dir.path().join(name)),
                checkpoint_dir: None,
            };
            train(&cfg, &day, &night, &out).unwrap()
        };
        let a = run("a.csv");
        let b = run("b.csv");
        let ca = std::fs::read(dir.path().join("a.csv")).unwrap();
        assert_eq!(ca, std::fs::read(dir.path().join("b.csv")).unwrap());
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), cfg.iterations + 1);
        assert_eq!(text.lines().next().unwrap(), LOSS_CSV_HEADER);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn direction_swaps_roles_only() {
        let mut cfg = tiny_config();
        cfg.iterations = 2;
        let (day, night) = (data(2, false, 16), data(2, true, 16));
        let fwd = train(&cfg, &night, &day, &TrainOutputs::default()).unwrap();
        cfg.direction = Direction::NightToDay;
        let rev = train(&cfg, &day, &night, &TrainOutputs::default()).unwrap();
        assert_eq!(fwd.log, rev.log);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_translation() {
        let mut cfg = tiny_config();
        cfg.iterations = 3;
        cfg.checkpoint_every = 2;
        let (day, night) = (data(2, false, 16), data(2, true, 16));
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            loss_csv: None,
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        let trained = train(&cfg, &day, &night, &out).unwrap();
        assert!(dir.path().join("checkpoint_000002.evck").exists());
        let last = dir.path().join("checkpoint_000003.evck");
        let loaded = TranslationModel::load_expecting(&last, &cfg).unwrap();
        assert_eq!(loaded.iteration, 3);
        let a = trained.model.translate(&day, 5).unwrap();
        let b = loaded.translate(&day, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].height(), 16);
        assert_eq!(a[0].domain(), Domain::Translated);
        let mut other = cfg.clone();
        other.cap = 12.0;
        match TranslationModel::load_expecting(&last, &other) {
            Err(Error::ConfigMismatch { field }) => assert_eq!(field, "cap"),
            Err(e) => panic!("unexpected {e:?}"),
            Ok(_) => panic!("mismatch accepted"),
        }
        let wrong = data(1, false, 20);
        assert!(matches!(loaded.translate(&wrong, 0), Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn unwritable_checkpoint_names_path_and_iteration() {
        let mut cfg = tiny_config();
        cfg.iterations = 1;
        let (day, night) = (data(1, false, 16), data(1, true, 16));
        let out = TrainOutputs {
            loss_csv: None,
            checkpoint_dir: Some(PathBuf::from("/nonexistent/dir/for/ckpt")),
        };
        match train(&cfg, &day, &night, &out) {
            Err(Error::CheckpointWrite { path, iteration, .. }) => {
                assert_eq!(iteration, 1);
                assert!(path.to_string_lossy().contains("checkpoint_000001"));
            }
            Err(e) => panic!("unexpected {e:?}"),
            Ok(_) => panic!("write should fail"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_config();
        assert!(matches!(train(&cfg, &[], &data(1, true, 16), &TrainOutputs::default()), Err(Error::Config(_))));
    }
}
