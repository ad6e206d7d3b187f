use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use burstsr::cli::{self, BurstMeta, RunManifest, EXIT_IO, EXIT_OK, EXIT_USAGE};
use burstsr::net::layers::Conv2d;
use burstsr::net::{save_checkpoint, NetParams, MOTION_HEAD};
use burstsr::quality::report::FWHM_HEADER;
use burstsr::Raster;
use rand::SeedableRng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_burstsr"))
}

fn run(args: &[&str]) -> u8 {
    let mut v = vec!["burstsr"];
    v.extend_from_slice(args);
    cli::run(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(cli::MANIFEST_FILE)).unwrap()).unwrap()
}

fn simulate(tmp: &TempDir, name: &str, config: &str, seed: u64) -> PathBuf {
    let cfg = write_json(&tmp.path().join(format!("{name}.cfg.json")), config);
    let out = tmp.path().join(name);
    let code = run(&[
        "simulate",
        "--config",
        s(&cfg),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    out
}

const SMALL: &str = r#"{"scene_size": 32, "frames": 6}"#;
const POLYPHASE: &str = r#"{
    "scene_size": 32, "frames": 4, "scale": 2, "psf_sigma_lr": 0.0, "snr": null,
    "decimation": "point_sample",
    "motion": {"translational": [[0, 0], [0.5, 0], [0, 0.5], [0.5, 0.5]]}
}"#;

#[test]
fn default_simulation_writes_twenty_four_frames() {
    let tmp = TempDir::new().unwrap();
    let out = simulate(&tmp, "burst", "{}", 1);
    let frames = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.starts_with("frame_") && n.ends_with(".f32")
        })
        .count();
    assert_eq!(frames, 24);
    let meta: BurstMeta =
        serde_json::from_str(&fs::read_to_string(out.join(cli::BURST_FILE)).unwrap()).unwrap();
    assert_eq!(meta.frames.len(), 24);
    assert_eq!(meta.scale, 2);
}

#[test]
fn identity_simulation_copies_the_payload() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("scene.f32");
    Raster::from_fn(12, 10, 2, |y, x, c| {
        0.1 * y as f64 + 0.01 * x as f64 + c as f64 / 3.0
    })
    .save(&input, None)
    .unwrap();
    let cfg = r#"{"input": "scene.f32", "frames": 1, "scale": 1, "psf_sigma_lr": 0.0,
                  "snr": null, "motion": {"translational": [[0, 0]]}}"#;
    let out = simulate(&tmp, "id", cfg, 0);
    assert_eq!(
        fs::read(out.join("frame_000.f32")).unwrap(),
        fs::read(&input).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_directories() {
    let tmp = TempDir::new().unwrap();
    let a = simulate(&tmp, "a", SMALL, 7);
    let b = simulate(&tmp, "b", SMALL, 7);
    let c = simulate(&tmp, "c", SMALL, 8);
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        if n == cli::MANIFEST_FILE {
            continue;
        }
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n:?}"
        );
    }
    assert_eq!(manifest(&a).run_hash, manifest(&b).run_hash);
    assert_ne!(manifest(&a).run_hash, manifest(&c).run_hash);
    assert_ne!(
        fs::read(a.join("frame_001.f32")).unwrap(),
        fs::read(c.join("frame_001.f32")).unwrap()
    );
}

#[test]
fn classic_recovers_polyphase_truth() {
    let tmp = TempDir::new().unwrap();
    let burst = simulate(&tmp, "poly", POLYPHASE, 0);
    let cfg = write_json(&tmp.path().join("sr.json"), r#"{"use_true_flows": true}"#);
    let out = tmp.path().join("sr");
    assert_eq!(
        run(&["sr", s(&burst), "--config", s(&cfg), "--out", s(&out)]),
        EXIT_OK
    );
    let m = manifest(&out);
    assert!(m.results["hr_max_abs_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(m.results["scale"], 2);
    let (sr, _) = Raster::load(out.join("sr.f32")).unwrap();
    assert_eq!(sr.shape(), (32, 32, 1));
}

#[test]
fn scale_in_manifest_matches_config() {
    let tmp = TempDir::new().unwrap();
    let burst = simulate(
        &tmp,
        "b3",
        r#"{"scene_size": 36, "frames": 9, "scale": 3}"#,
        2,
    );
    let out = tmp.path().join("sr");
    assert_eq!(run(&["sr", s(&burst), "--out", s(&out)]), EXIT_OK);
    assert_eq!(manifest(&out).results["scale"], 3);
}

fn checkpoint(tmp: &TempDir) -> PathBuf {
    let mut p = NetParams::<f32>::new(1, 5).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    p.layers[MOTION_HEAD] = Conv2d::uniform(16, 2, 1, &mut rng);
    let path = tmp.path().join("net.json");
    save_checkpoint(&path, &p, 5, 0, 1.0).unwrap();
    path
}

#[test]
fn net_output_ignores_frame_file_order() {
    let tmp = TempDir::new().unwrap();
    let burst = simulate(&tmp, "b", SMALL, 3);
    let ck = checkpoint(&tmp);
    let meta_path = burst.join(cli::BURST_FILE);
    let mut meta: BurstMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).unwrap()).unwrap();
    let order = [0usize, 4, 2, 5, 1, 3];
    meta.frames = order.iter().map(|&i| meta.frames[i].clone()).collect();
    meta.flows = meta
        .flows
        .map(|f| order.iter().map(|&i| f[i].clone()).collect());
    let permuted = tmp.path().join("permuted");
    fs::create_dir(&permuted).unwrap();
    for e in fs::read_dir(&burst).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), permuted.join(e.file_name())).unwrap();
    }
    fs::write(
        permuted.join(cli::BURST_FILE),
        serde_json::to_string(&meta).unwrap(),
    )
    .unwrap();

    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    for (b, o) in [(&burst, &o1), (&permuted, &o2)] {
        assert_eq!(
            run(&[
                "sr",
                s(b),
                "--method",
                "net",
                "--checkpoint",
                s(&ck),
                "--out",
                s(o)
            ]),
            EXIT_OK
        );
    }
    assert_eq!(
        fs::read(o1.join("sr.f32")).unwrap(),
        fs::read(o2.join("sr.f32")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let burst = simulate(&tmp, "b", SMALL, 0);
    let out = tmp.path().join("o");

    let st = bin()
        .args(["sr", s(&burst), "--method", "net", "--out", s(&out)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_USAGE as i32));

    let bad = write_json(&tmp.path().join("bad.json"), r#"{"frames": "many"}"#);
    let st = bin()
        .args(["simulate", "--config", s(&bad), "--out", s(&out)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_USAGE as i32));

    let unknown = write_json(&tmp.path().join("unknown.json"), r#"{"frame": 3}"#);
    let st = bin()
        .args(["simulate", "--config", s(&unknown), "--out", s(&out)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_USAGE as i32));

    let missing = tmp.path().join("nope");
    let st = bin()
        .args(["sr", s(&missing), "--out", s(&out)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_IO as i32));

    let st = bin()
        .args(["sr", s(&burst), "--out", s(&out)])
        .env(cli::THREADS_ENV, "0")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_USAGE as i32));

    let st = bin()
        .args(["sr", s(&burst), "--out", s(&out)])
        .env(cli::THREADS_ENV, "2")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(EXIT_OK as i32));
    assert_eq!(manifest(&out).threads, Some(2));

    let st = bin().args(["frobnicate"]).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_USAGE as i32));
}

#[test]
fn evaluate_self_comparison() {
    let tmp = TempDir::new().unwrap();
    let img = burstsr::scene::procedural_scene(64, 4);
    let path = tmp.path().join("img.f32");
    img.save(&path, None).unwrap();
    let roi = write_json(
        &tmp.path().join("roi.json"),
        r#"{"spectral": [{"y0": 4, "x0": 4, "height": 20, "width": 20}]}"#,
    );
    let (o1, o2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for o in [&o1, &o2] {
        let code = run(&[
            "evaluate",
            s(&path),
            "--reference",
            s(&path),
            "--roi",
            s(&roi),
            "--out",
            s(o),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    let m = manifest(&o1);
    assert_eq!(m.results["spectral_deviation"].as_f64().unwrap(), 0.0);
    assert_eq!(m.results["correlation"].as_f64().unwrap(), 1.0);
    let fwhm = fs::read_to_string(o1.join("fwhm.csv")).unwrap();
    assert_eq!(fwhm.lines().next().unwrap(), FWHM_HEADER);
    for f in ["fwhm.csv", "spectrum.csv"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap());
    }
}

#[test]
fn evaluate_edges_need_a_reference() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("img.f32");
    burstsr::scene::procedural_scene(64, 1)
        .save(&path, None)
        .unwrap();
    let roi = write_json(
        &tmp.path().join("roi.json"),
        r#"{"edges": [{"rect": {"y0": 0, "x0": 0, "height": 32, "width": 32}, "orientation": "Vertical"}]}"#,
    );
    let out = tmp.path().join("e");
    assert_eq!(
        run(&["evaluate", s(&path), "--roi", s(&roi), "--out", s(&out)]),
        EXIT_USAGE
    );
    assert_eq!(run(&["evaluate", s(&path), "--out", s(&out)]), EXIT_OK);
    assert!(manifest(&out).results["nss_score_sr"]
        .as_f64()
        .unwrap()
        .is_finite());
}

#[test]
fn evaluate_reports_edge_sharpness_table() {
    let tmp = TempDir::new().unwrap();
    let lr = burstsr::scene::slanted_edge(48, 48, 5.0, 0.2, 0.8, 1.0);
    let hr = burstsr::scene::slanted_edge(96, 96, 5.0, 0.2, 0.8, 1.2);
    let (lp, hp) = (tmp.path().join("lr.f32"), tmp.path().join("hr.f32"));
    lr.save(&lp, None).unwrap();
    hr.save(&hp, None).unwrap();
    let roi = write_json(
        &tmp.path().join("roi.json"),
        r#"{"edges": [{"rect": {"y0": 4, "x0": 8, "height": 40, "width": 32}, "orientation": "Vertical"}]}"#,
    );
    let out = tmp.path().join("e");
    assert_eq!(
        run(&[
            "evaluate",
            s(&hp),
            "--reference",
            s(&lp),
            "--roi",
            s(&roi),
            "--out",
            s(&out)
        ]),
        EXIT_OK
    );
    let csv = fs::read_to_string(out.join("fwhm.csv")).unwrap();
    let row: Vec<f64> = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[0], 0.0);
    assert!(row[1..].iter().all(|v| v.is_finite() && *v > 0.0), "{csv}");
}

#[test]
fn tiny_training_run_writes_a_loadable_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_json(
        &tmp.path().join("train.json"),
        r#"{"train": {"patch": 8, "max_epochs": 1, "batch_size": 2},
            "pretrain": {"steps": 2, "pairs_per_step": 2, "size": 16},
            "train_patches": 2, "val_patches": 1, "frames": 3, "pretrain_val_pairs": 1}"#,
    );
    let out = tmp.path().join("t");
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--seed",
            "3",
            "--out",
            s(&out)
        ]),
        EXIT_OK
    );
    let (p, m) = burstsr::net::load_checkpoint::<f32>(&out.join("net.json")).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(p.channels, 1);
    assert!(out.join("history.json").exists());
}
