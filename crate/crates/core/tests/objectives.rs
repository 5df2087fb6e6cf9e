use eventsb::autodiff::{Tape, Var};
use eventsb::networks::{FeatureHeads, Generator, GeneratorConfig};
use eventsb::objectives::{spatial_contrastive_loss, temporal_contrastive_loss, ContrastiveConfig, TemporalLoss};
use eventsb::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(bins: usize) -> GeneratorConfig {
    GeneratorConfig {
        bins,
        scale_levels: 3,
        base_channels: 4 * bins,
        channel_mults: vec![1, 1, 2],
        downsample_count: 1,
        latent_dim: 2,
        time_embed_dim: 8,
        timesteps: 5,
    }
}

fn contrastive(bins: usize) -> ContrastiveConfig {
    ContrastiveConfig {
        tc_locations: 16,
        embed_dim: 8,
        ..ContrastiveConfig::for_bins(bins)
    }
}

fn central_difference<F>(x0: &Tensor, f: F) -> (Tensor, Vec<(usize, f64)>)
where
    F: for<'a> Fn(Var<'a>) -> Var<'a>,
{
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let grad = tape.backward(f(x)).get_or_zeros(x);
    let mut fd = Vec::new();
    for i in (0..x0.numel()).step_by(5) {
        let eval = |d: f64| {
            let mut xp = x0.clone();
            xp.data_mut()[i] += d;
            let t = Tape::no_grad();
            f(t.constant(xp)).item()
        };
        fd.push((i, (eval(1e-5) - eval(-1e-5)) / 2e-5));
    }
    (grad, fd)
}

#[test]
fn identical_groups_give_log_r_plus_one_per_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let heads = FeatureHeads::new(&[6, 12], 8, &mut rng);
    let tape = Tape::no_grad();
    let p = heads.bind(&tape, false);
    let mut feats = Vec::new();
    for c in [2usize, 4] {
        let group = Tensor::randn(&[c, 4, 4], 1.0, &mut rng);
        feats.push(tape.constant(Tensor::cat0(&[&group, &group, &group])));
    }
    let cfg = contrastive(3);
    let loss = temporal_contrastive_loss(&feats, &feats, &heads, &p, 3, &cfg, &mut rng).unwrap();
    let v = loss.value().unwrap().item();
    let want = 2.0 * 6f64.ln();
    assert!((v - want).abs() < 1e-9, "{v} vs {want}");
}

#[test]
fn single_bin_skips_temporal_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let heads = FeatureHeads::new(&[4], 8, &mut rng);
    let tape = Tape::no_grad();
    let p = heads.bind(&tape, false);
    let f = vec![tape.constant(Tensor::randn(&[4, 4, 4], 1.0, &mut rng))];
    let out = temporal_contrastive_loss(&f, &f, &heads, &p, 1, &contrastive(1), &mut rng).unwrap();
    assert!(matches!(out, TemporalLoss::Skipped));
}

#[test]
fn contrastive_terms_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let heads = FeatureHeads::new(&[6], 8, &mut rng);
    let day = Tensor::randn(&[6, 8, 8], 1.0, &mut rng);
    let x0 = Tensor::randn(&[6, 8, 8], 1.0, &mut rng);
    let cfg = contrastive(3);
    let (g, fd) = central_difference(&x0, |x| {
        let t = x.tape();
        let p = heads.bind(t, false);
        let d = vec![t.constant(day.clone())];
        let loss = temporal_contrastive_loss(&[x], &d, &heads, &p, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        loss.value().unwrap()
    });
    for (i, want) in fd {
        let got = g.data()[i];
        assert!((got - want).abs() <= 1e-3 * want.abs().max(got.abs()).max(1e-4), "tc {i}: {got} vs {want}");
    }
    let (g, fd) = central_difference(&x0, |x| {
        let t = x.tape();
        let p = heads.bind(t, false);
        let d = vec![t.constant(day.clone())];
        spatial_contrastive_loss(&d, &[x], &heads, &p, 24, 0.07, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
    });
    for (i, want) in fd {
        let got = g.data()[i];
        assert!((got - want).abs() <= 1e-3 * want.abs().max(got.abs()).max(1e-4), "sc {i}: {got} vs {want}");
    }
}

#[test]
fn spatial_term_needs_two_locations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let heads = FeatureHeads::new(&[2], 4, &mut rng);
    let tape = Tape::no_grad();
    let p = heads.bind(&tape, false);
    let f = vec![tape.constant(Tensor::randn(&[2, 1, 1], 1.0, &mut rng))];
    assert!(spatial_contrastive_loss(&f, &f, &heads, &p, 16, 0.07, &mut rng).is_err());
}

/// Bin-shuffled references score worse than ordered ones against an
/// ordered positive, on inputs whose bins differ.
#[test]
fn temporal_term_prefers_ordered_reference() {
    let seeds = 20;
    let (mut ordered_sum, mut shuffled_sum) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g = Generator::new(small_config(3), &mut rng).unwrap();
        let heads = FeatureHeads::for_generator(&g.config, 8, &mut rng);
        let x = Tensor::uniform(&[6, 16, 16], 1.0, &mut rng);
        // Bins in reverse order: (b2, b1, b0).
        let rev = Tensor::cat0(&[&x.narrow0(4, 2), &x.narrow0(2, 2), &x.narrow0(0, 2)]);
        let tape = Tape::no_grad();
        let gp = g.bind(&tape, false);
        let hp = heads.bind(&tape, false);
        let temb = g.time_embedding(&gp, 0).unwrap();
        let day = g.encode(&gp, tape.constant(x), temb).unwrap().features;
        let shuffled = g.encode(&gp, tape.constant(rev), temb).unwrap().features;
        let cfg = contrastive(3);
        let tc = |reference: &[Var<'_>]| {
            temporal_contrastive_loss(reference, &day, &heads, &hp, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .value()
                .unwrap()
                .item()
        };
        ordered_sum += tc(&day);
        shuffled_sum += tc(&shuffled);
    }
    assert!(shuffled_sum > ordered_sum, "{shuffled_sum} <= {ordered_sum}");
}
