use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eventsb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eventsb"))
        .args(args)
        .env_remove("EVENTSB_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn gen(dir: &Path, domain: &str, count: usize, size: usize, seed: u64) -> Output {
    eventsb(&[
        "gen-data",
        "--out",
        s(dir),
        "--count",
        &count.to_string(),
        "--domain",
        domain,
        "--seed",
        &seed.to_string(),
        "--height",
        &size.to_string(),
        "--width",
        &size.to_string(),
    ])
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with("{\"error\"")).expect("error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn gen_data_writes_pairs_and_manifest_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, "day", 10, 32, 4).status.success());
    assert!(gen(&b, "day", 10, 32, 4).status.success());
    let fa = files(&a);
    assert_eq!(fa.iter().filter(|p| p.extension().unwrap() == "evs").count(), 10);
    assert_eq!(fa.iter().filter(|p| p.extension().unwrap() == "evh").count(), 10);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["items"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["items"][3]["domain"], "day");
    for (x, y) in fa.iter().zip(files(&b)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn unsupported_bins_are_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = eventsb(&["gen-data", "--out", s(tmp.path()), "--count", "2", "--domain", "night", "--bins", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], 2);
    assert!(files(tmp.path()).is_empty());
    let out = eventsb(&["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_rejects_empty_and_malformed_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("loss.csv");
    let png = tmp.path().join("loss.png");
    std::fs::write(&csv, "").unwrap();
    let out = eventsb(&["plot", "--loss-csv", s(&csv), "--out", s(&png)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!png.exists());
    std::fs::write(&csv, "iteration,t_i,adv_g,adv_d,sb,sc,tc,total\n0,1,1,1,1,1,1,1\n1,0,nan?,1,1,1,1,1\n").unwrap();
    let out = eventsb(&["plot", "--loss-csv", s(&csv), "--out", s(&png)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("line 3"));
    assert!(!png.exists());
}

#[test]
fn histogram_plot_has_one_panel_per_bin() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "night", 1, 32, 0).status.success());
    let panels = tmp.path().join("panels");
    let evh = data.join("night_00000.evh");
    let out = eventsb(&["plot", "--histogram", s(&evh), "--out", s(&panels)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = files(&panels).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["night_00000_bin0.png", "night_00000_bin1.png", "night_00000_bin2.png"]);
    let h = eventsb::events::read_histogram(&evh).unwrap();
    for b in 0..3 {
        let img = image::open(panels.join(format!("night_00000_bin{b}.png"))).unwrap().to_rgb8();
        let red = img.pixels().filter(|p| p.0 == [220, 0, 0]).count();
        let blue = img.pixels().filter(|p| p.0 == [0, 0, 220]).count();
        let nz = |c: usize| h.channel(c).iter().filter(|&&v| v > 0.0).count();
        assert_eq!((red, blue), (nz(2 * b), nz(2 * b + 1)));
    }
}

#[test]
fn toy_ot_plan_has_requested_marginal_sums() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("plan.csv");
    let out = eventsb(&["toy-ot", "--n", "4", "--seed", "3", "--out", s(&csv)]);
    assert!(out.status.success());
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let total: f64 = rows.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-8);
    assert!(rows.iter().flatten().all(|&v| v >= 0.0));
    let out = eventsb(&["toy-ot", "--epsilon", "-1", "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = eventsb(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "direction",
        "bins",
        "batch_size",
        "generator_optimizer.lr",
        "critic_optimizer.lr",
        "weights.lambda_tc",
        "contrastive.tc_locations",
        "bridge.tau",
        "generator.base_channels",
        "critic.base_channels",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}

const TINY: &str = "size = 16
iterations = 3
[generator]
base_channels = 6
time_embed_dim = 8
[critic]
base_channels = 4
time_embed_dim = 8
[contrastive]
embed_dim = 8
tc_locations = 8
";

#[test]
fn train_translate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (day, night) = (tmp.path().join("day"), tmp.path().join("night"));
    assert!(gen(&day, "day", 3, 16, 1).status.success());
    assert!(gen(&night, "night", 3, 16, 2).status.success());
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = |dir: &Path| {
        eventsb(&[
            "train", "--day", s(&day), "--night", s(&night), "--out", s(dir), "--config", s(&cfg), "--iterations", "2",
            "--seed", "5",
        ])
    };
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let out = run(&r1);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run(&r2).status.success());
    let csv = std::fs::read_to_string(r1.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "flag overrides the file's iteration count");
    assert_eq!(csv, std::fs::read_to_string(r2.join("loss.csv")).unwrap());
    let written = std::fs::read_to_string(r1.join("config.toml")).unwrap();
    assert!(written.contains("seed = 5"));

    let model = r1.join("model.evck");
    let (t1, t2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    for t in [&t1, &t2] {
        let out = eventsb(&["translate", "--checkpoint", s(&model), "--input", s(&day), "--out", s(t), "--seed", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(files(&t1).len(), 3);
    for (x, y) in files(&t1).iter().zip(files(&t2)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }

    // Inputs of another size are refused.
    let big = tmp.path().join("big");
    assert!(gen(&big, "day", 1, 32, 1).status.success());
    let out = eventsb(&["translate", "--checkpoint", s(&model), "--input", s(&big), "--out", s(&t1)]);
    assert_eq!(out.status.code(), Some(5));

    let loss_png = tmp.path().join("loss.png");
    let out = eventsb(&["plot", "--loss-csv", s(&r1.join("loss.csv")), "--out", s(&loss_png)]);
    assert!(out.status.success());
    assert!(image::open(&loss_png).is_ok());
}

#[test]
fn eval_refuses_uncertified_extractor_and_foreign_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (day, night) = (tmp.path().join("day"), tmp.path().join("night"));
    assert!(gen(&day, "day", 100, 16, 1).status.success());
    assert!(gen(&night, "night", 100, 16, 2).status.success());
    let report = tmp.path().join("report.txt");
    let out = eventsb(&[
        "eval", "--a", s(&day), "--b", s(&night), "--out", s(&report), "--metrics", "image", "--train-day", s(&day),
        "--train-night", s(&day),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!report.exists());

    let ex_dir = tmp.path().join("ex");
    let out = eventsb(&[
        "eval", "--a", s(&day), "--b", s(&night), "--out", s(&report), "--metrics", "image", "--train-day", s(&day),
        "--train-night", s(&night), "--save-extractors", s(&ex_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("fingerprint_image=image-"));

    // Same saved extractor: comparable.
    let again = tmp.path().join("again.txt");
    let out = eventsb(&[
        "eval", "--a", s(&day), "--b", s(&day), "--out", s(&again), "--metrics", "image", "--extractor-image",
        s(&ex_dir.join("image.evx")), "--compare", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let foreign = tmp.path().join("foreign.txt");
    std::fs::write(&foreign, text.replace("fingerprint_image=image-", "fingerprint_image=image-x")).unwrap();
    let out = eventsb(&[
        "eval", "--a", s(&day), "--b", s(&day), "--out", s(&again), "--metrics", "image", "--extractor-image",
        s(&ex_dir.join("image.evx")), "--compare", s(&foreign),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"]["kind"], "refused");
}
