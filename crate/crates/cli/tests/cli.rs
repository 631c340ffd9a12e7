use std::path::Path;
use std::process::{Command, Output};

use fpfl_core::template::random_template;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn fpfl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpfl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = fpfl(dir, &full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY_NET: &str = "epochs = 3\nbatch_size = 4\nmap_h = 8\nmap_w = 8\nminutiae_pool = 2\nloc_pool = 4\n";

fn tiny_pipeline(dir: &Path) {
    ok_json(dir, &["gen-data", "--out", "data", "--classes", "3", "--impressions", "3", "--size", "32", "--seed", "9"]);
    std::fs::write(dir.join("net.cfg"), TINY_NET).unwrap();
    ok_json(dir, &["train", "--data", "data", "--out", "net.fpck", "--config", "net.cfg", "--seed", "2", "--loss-csv", "loss.csv"]);
}

#[test]
fn full_pipeline_reports_cmc() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pipeline(dir);

    let csv = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,total,texture_ce,minutiae_ce,map,decay\n"));
    assert_eq!(csv.lines().count(), 1 + 1 + 3);

    let ex = ok_json(dir, &["extract", "--checkpoint", "net.fpck", "--data", "data", "--out-dir", "tpl"]);
    assert_eq!(ex["gallery_templates"], 3);
    assert_eq!(ex["probe_templates"], 3);
    assert_eq!(std::fs::metadata(dir.join("tpl/gallery/class_0.fpt")).unwrap().len(), 16 + 4 * 64);

    let en = ok_json(dir, &["enroll", "--gallery", "g.fpg", "--templates", "tpl/gallery"]);
    assert_eq!(en["size"], 3);

    let ev = ok_json(dir, &["search-eval", "--gallery", "g.fpg", "--probes", "tpl/probes"]);
    let r1 = ev["rank1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert_eq!(ev["cmc"].as_array().unwrap().last().unwrap()["accuracy"], 1.0);

    let ve = ok_json(dir, &["verify-eval", "--gallery", "g.fpg", "--probes", "tpl/probes", "--far", "0.5"]);
    assert_eq!(ve["imposters"], 6);

    let low = fpfl(dir, &["verify-eval", "--gallery", "g.fpg", "--probes", "tpl/probes", "--far", "0.01"]);
    assert_eq!(code(&low), 3);
    assert!(String::from_utf8_lossy(&low.stderr).contains("imposter"));

    let single = ok_json(dir, &["extract", "--checkpoint", "net.fpck", "--image", "data/class_1/imp_0.pgm", "--out", "one.fpt"]);
    assert_eq!(single["dim"], 64);

    let st = ok_json(
        dir,
        &["distill", "--teacher", "net.fpck", "--data", "data", "--out", "s.fpck", "--stem-channels", "4,8", "--epochs", "2"],
    );
    assert!(st["student_params"].as_u64() < st["teacher_params"].as_u64());
    let bad = fpfl(dir, &["distill", "--teacher", "net.fpck", "--data", "data", "--out", "s2.fpck", "--embed-dim", "5", "--epochs", "1"]);
    assert_eq!(code(&bad), 3);
}

#[test]
fn seeded_commands_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_pipeline(a.path());
    tiny_pipeline(b.path());
    for f in ["data/manifest.json", "data/class_2/imp_1.pgm", "data/class_0/imp_2.mnt", "net.fpck", "loss.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

fn write_gallery(dir: &Path, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    std::fs::create_dir_all(dir.join("t")).unwrap();
    for i in 0..n {
        random_template(&mut rng, 32).save(dir.join(format!("t/id{i:03}.fpt"))).unwrap();
    }
}

#[test]
fn gallery_member_is_found_at_rank_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_gallery(dir, 50);
    ok_json(dir, &["enroll", "--gallery", "g.fpg", "--templates", "t"]);
    let probe_bytes = std::fs::read(dir.join("t/id017.fpt")).unwrap();
    for threads in ["1", "3"] {
        let r = ok_json(dir, &["search", "--gallery", "g.fpg", "--probe", "t/id017.fpt", "-k", "5", "--threads", threads]);
        let c = r["candidates"].as_array().unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c[0]["id"], "id017");
        assert!((c[0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }
    // Inputs are left alone.
    assert_eq!(std::fs::read(dir.join("t/id017.fpt")).unwrap(), probe_bytes);
}

#[test]
fn bench_reports_the_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let r = ok_json(dir, &["bench", "--size", "1000", "--dim", "64", "--probes", "5", "--threads", "2"]);
    for field in ["gallery_size", "dim", "matches_per_sec_1t", "matches_per_sec_mt", "probe_latency_ms"] {
        assert!(r[field].as_f64().unwrap() > 0.0, "{field}");
    }
    assert_eq!(r["gallery_size"], 1000);

    write_gallery(dir, 20);
    ok_json(dir, &["enroll", "--gallery", "g.fpg", "--templates", "t"]);
    let r = ok_json(dir, &["bench", "--gallery", "g.fpg", "--probes", "3"]);
    assert_eq!(r["dim"], 32);
}

#[test]
fn encode_map_and_align_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("a.mnt"), "MNT 64 64 2\n10 20 0.5\n40.5 33 3.0\n").unwrap();
    let r = ok_json(dir, &["encode-map", "--mnt", "a.mnt", "--out", "a.map", "--h-map", "16", "--w-map", "16"]);
    assert_eq!(r["minutiae"], 2);
    let dump = std::fs::read(dir.join("a.map")).unwrap();
    assert!(dump.starts_with(b"MAP 16 16 6 "));
    assert!(dump.len() > 16 * 16 * 6 * 4);

    let img = fpfl_core::GrayImage::from_fn(40, 40, |y, x| ((x + y) % 7) as f32 / 6.0);
    img.save(dir.join("in.png")).unwrap();
    let r = ok_json(dir, &["align", "--image", "in.png", "--out", "out.png", "--tx", "-500", "--theta", "0.2"]);
    assert_eq!(r["clamped"], true);
    assert_eq!(r["tx"], -20.0);
    assert_eq!(r["theta"], 0.2);
    let out = fpfl_core::GrayImage::load(dir.join("out.png")).unwrap();
    assert_eq!((out.height(), out.width()), (40, 40));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&fpfl(dir, &["no-such-command"])), 2);
    assert_eq!(code(&fpfl(dir, &["search", "--gallery"])), 2);
    assert_eq!(code(&fpfl(dir, &["bench", "--bogus-flag"])), 2);
    assert_eq!(code(&fpfl(dir, &["--help"])), 0);
    assert_eq!(code(&fpfl(dir, &["search", "--gallery", "missing.fpg", "--probe", "p.fpt"])), 3);

    std::fs::write(dir.join("junk.fpg"), b"not a gallery").unwrap();
    std::fs::write(dir.join("p.fpt"), b"FPFL").unwrap();
    assert_eq!(code(&fpfl(dir, &["search", "--gallery", "junk.fpg", "--probe", "p.fpt"])), 3);

    ok_json(dir, &["gen-data", "--out", "d", "--classes", "2", "--impressions", "2", "--size", "16"]);
    std::fs::write(dir.join("bad.cfg"), "epochz = 3\n").unwrap();
    let out = fpfl(dir, &["train", "--data", "d", "--out", "n.fpck", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert!(!dir.join("n.fpck").exists());

    assert_eq!(code(&fpfl(dir, &["gen-data", "--out", "e", "--classes", "1"])), 3);
    assert_eq!(code(&fpfl(dir, &["train", "--data", "d", "--out", "n.fpck", "--lr", "nan"])), 3);
}
