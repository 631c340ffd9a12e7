use std::path::{Path, PathBuf};

use fpfl_core::eval::{pair_scores, rank_of};
use fpfl_core::io::{write_atomic, write_atomic_with};
use fpfl_core::net::{
    distill_from, extract_embedding, load_checkpoint, save_checkpoint, train_from, DistillConfig, EpochStats,
    NetConfig, NetParams, TrainConfig,
};
use fpfl_core::spatial_transform::{AlignmentBounds, AlignmentParams};
use fpfl_core::synth::{make_dataset, Dataset, Split, SynthConfig};
use fpfl_core::template::random_template;
use fpfl_core::throughput::benchmark;
use fpfl_core::{
    align, build_gallery, encode_map, eval_search, eval_verification, FixedTemplate, Gallery, GrayImage, MapConfig,
    MinutiaeTemplate,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{parse_list, KeyValues};
use crate::error::CliError;
use crate::{
    AlignArgs, BenchArgs, Cli, Command, DistillArgs, EncodeMapArgs, EnrollArgs, EvalArgs, ExtractArgs, GenDataArgs,
    SearchArgs, TrainArgs,
};

type Out = Result<Value, CliError>;

pub fn run(cli: &Cli) -> Out {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Extract(a) => extract(a),
        Command::EncodeMap(a) => encode_map_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::Enroll(a) => enroll(a),
        Command::Search(a) => search(a),
        Command::VerifyEval(a) => verify_eval(a),
        Command::SearchEval(a) => search_eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{}: no such file", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{}: no such directory", path.display())))
    }
}

fn threads_or_default(t: Option<usize>) -> usize {
    t.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

fn gen_data(a: &GenDataArgs) -> Out {
    let cfg = SynthConfig::with_size(a.size);
    let data = make_dataset(a.classes, a.impressions, a.seed, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    data.write(&a.out)?;
    Ok(json!({
        "out": a.out,
        "classes": a.classes,
        "train": data.train.len(),
        "eval": data.eval.len(),
        "size": a.size,
        "seed": a.seed,
    }))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require_dir(dir)?;
    require_file(&dir.join("manifest.json"))?;
    Ok(Dataset::read(dir)?)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Out {
    let data = load_dataset(&a.data)?;
    let first = data
        .train
        .first()
        .ok_or_else(|| CliError::validation("dataset has no training impressions"))?;
    let mut net = NetConfig {
        in_h: first.image.height(),
        in_w: first.image.width(),
        num_classes: data.manifest.num_classes,
        ..Default::default()
    };
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let mut kv = KeyValues::load(path)?;
        kv.apply_net(&mut net)?;
        kv.apply_train(&mut cfg)?;
        kv.finish()?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.min_lr {
        cfg.min_lr = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        net.seed = v;
    }
    if a.no_augment {
        cfg.augment = None;
    }
    if a.no_dropout {
        cfg.dropout = false;
    }
    if a.localizer {
        net.use_localizer = true;
    }

    let init = NetParams::init(&net)?;
    let (params, report) = train_from(init, &data.train, &cfg, |e: &EpochStats| {
        eprintln!("epoch {:>4}  train {:.4}  clean {:.4}", e.epoch + 1, e.train_loss, e.clean.total);
    })?;
    save_checkpoint(&params, &a.out)?;
    if let Some(csv) = &a.loss_csv {
        let initial = report.initial;
        let rows = std::iter::once(format!(
            "0,,{},{},{},{},{}",
            initial.total, initial.texture_ce, initial.minutiae_ce, initial.map, initial.decay
        ))
        .chain(report.epochs.iter().map(|e| {
            format!(
                "{},{},{},{},{},{},{}",
                e.epoch + 1,
                e.train_loss,
                e.clean.total,
                e.clean.texture_ce,
                e.clean.minutiae_ce,
                e.clean.map,
                e.clean.decay
            )
        }));
        write_csv(csv, "epoch,train_loss,total,texture_ce,minutiae_ce,map,decay", rows)?;
    }
    Ok(json!({
        "checkpoint": a.out,
        "epochs": report.epochs.len(),
        "params": params.num_params(),
        "initial_loss": report.initial.total,
        "final_loss": report.final_loss().total,
        "final": report.final_loss(),
    }))
}

fn distill_cmd(a: &DistillArgs) -> Out {
    require_file(&a.teacher)?;
    let data = load_dataset(&a.data)?;
    let teacher = load_checkpoint(&a.teacher)?;
    let mut student_cfg = teacher.config().clone();
    let mut cfg = DistillConfig::default();
    if let Some(path) = &a.config {
        let mut kv = KeyValues::load(path)?;
        kv.apply_net(&mut student_cfg)?;
        kv.apply_distill(&mut cfg)?;
        kv.finish()?;
    }
    if let Some(s) = &a.stem_channels {
        student_cfg.stem_channels =
            parse_list(s).map_err(|_| CliError::validation(format!("bad --stem-channels {s:?}")))?;
    }
    if let Some(v) = a.branch_channels {
        student_cfg.branch_channels = v;
    }
    if let Some(v) = a.embed_dim {
        student_cfg.embed_dim = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.min_lr {
        cfg.min_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        student_cfg.seed = v;
    }
    let images: Vec<GrayImage> = data.train.iter().map(|i| i.image.clone()).collect();
    let init = NetParams::init(&student_cfg)?;
    let (student, report) = distill_from(&teacher, init, &images, &cfg, |e, l| {
        eprintln!("epoch {:>4}  loss {l:.6}", e + 1);
    })?;
    save_checkpoint(&student, &a.out)?;
    if let Some(csv) = &a.loss_csv {
        let rows = std::iter::once(format!("0,{}", report.initial_loss))
            .chain(report.epoch_losses.iter().enumerate().map(|(e, l)| format!("{},{l}", e + 1)));
        write_csv(csv, "epoch,loss", rows)?;
    }
    Ok(json!({
        "checkpoint": a.out,
        "student_params": student.num_params(),
        "teacher_params": teacher.num_params(),
        "initial_loss": report.initial_loss,
        "final_loss": report.epoch_losses.last().copied().unwrap_or(report.initial_loss),
        "mean_cosine": report.mean_cosine,
    }))
}

fn embed_checked(params: &NetParams, image: &GrayImage) -> Result<FixedTemplate, CliError> {
    let cfg = params.config();
    if (image.height(), image.width()) != (cfg.in_h, cfg.in_w) {
        return Err(CliError::validation(format!(
            "image is {}x{}, network expects {}x{}",
            image.height(),
            image.width(),
            cfg.in_h,
            cfg.in_w
        )));
    }
    Ok(extract_embedding(params, image)?)
}

fn extract(a: &ExtractArgs) -> Out {
    require_file(&a.checkpoint)?;
    let params = load_checkpoint(&a.checkpoint)?;
    if let (Some(image), Some(out)) = (&a.image, &a.out) {
        require_file(image)?;
        let t = embed_checked(&params, &GrayImage::load(image)?)?;
        t.save(out)?;
        return Ok(json!({ "template": out, "dim": t.dim() }));
    }
    let (Some(data_dir), Some(out_dir)) = (&a.data, &a.out_dir) else {
        return Err(CliError::validation("extract needs --image/--out or --data/--out-dir"));
    };
    let data = load_dataset(data_dir)?;
    let gallery_dir = out_dir.join("gallery");
    let probe_dir = out_dir.join("probes");
    std::fs::create_dir_all(&gallery_dir)?;
    std::fs::create_dir_all(&probe_dir)?;

    let mut train = data.train.iter();
    let mut eval = data.eval.iter();
    let mut enrolled = vec![false; data.manifest.num_classes];
    let (mut n_gallery, mut n_probes) = (0, 0);
    for rec in &data.manifest.impressions {
        let imp = match rec.split {
            Split::Train => train.next(),
            Split::Eval => eval.next(),
        }
        .ok_or_else(|| CliError::validation("manifest does not match dataset contents"))?;
        match rec.split {
            Split::Train if !enrolled[rec.class] => {
                enrolled[rec.class] = true;
                embed_checked(&params, &imp.image)?.save(gallery_dir.join(format!("class_{}.fpt", rec.class)))?;
                n_gallery += 1;
            }
            Split::Eval => {
                embed_checked(&params, &imp.image)?
                    .save(probe_dir.join(format!("class_{}__imp_{}.fpt", rec.class, rec.index)))?;
                n_probes += 1;
            }
            Split::Train => {}
        }
    }
    Ok(json!({
        "gallery_dir": gallery_dir,
        "probe_dir": probe_dir,
        "gallery_templates": n_gallery,
        "probe_templates": n_probes,
    }))
}

fn encode_map_cmd(a: &EncodeMapArgs) -> Out {
    require_file(&a.mnt)?;
    let file = std::fs::File::open(&a.mnt)?;
    let t = MinutiaeTemplate::read_mnt(std::io::BufReader::new(file))?;
    let cfg = MapConfig {
        h_map: a.h_map,
        w_map: a.w_map,
        channels: a.channels,
        sigma_s: a.sigma_s,
        sigma_o: a.sigma_o.unwrap_or(a.sigma_s),
        truncation_radius: a.truncation,
    };
    let map = encode_map(&t, &cfg)?;
    write_atomic_with(&a.out, |w| map.write_dump(w))?;
    let max = map.values().iter().copied().fold(0.0f32, f32::max);
    Ok(json!({
        "map": a.out,
        "minutiae": t.len(),
        "shape": [cfg.h_map, cfg.w_map, cfg.channels],
        "max_value": max,
    }))
}

fn align_cmd(a: &AlignArgs) -> Out {
    require_file(&a.image)?;
    let img = GrayImage::load(&a.image)?;
    let bounds = AlignmentBounds::scaled_to(img.width());
    let p = AlignmentParams::clamped(a.tx, a.ty, a.theta, &bounds)?;
    let (h, w) = match a.out_size {
        Some(s) => (s, s),
        None => (img.height(), img.width()),
    };
    let out = align(&img, &p, h, w)?;
    out.save(&a.out)?;
    Ok(json!({
        "image": a.out,
        "tx": p.tx,
        "ty": p.ty,
        "theta": p.theta,
        "window": p.window,
        "clamped": (p.tx, p.ty, p.theta) != (a.tx, a.ty, a.theta),
        "out_h": h,
        "out_w": w,
    }))
}

/// `.fpt` files of `dir`, sorted by file name.
fn template_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    require_dir(dir)?;
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "fpt") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::validation(format!("{}: file name is not UTF-8", path.display())))?
                .to_string();
            files.push((stem, path));
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::validation(format!("{}: no .fpt templates", dir.display())));
    }
    Ok(files)
}

fn enroll(a: &EnrollArgs) -> Out {
    let files = template_files(&a.templates)?;
    let templates = files
        .into_iter()
        .map(|(id, path)| Ok((id, FixedTemplate::load(&path)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let g = build_gallery(templates)?;
    g.save(&a.gallery)?;
    Ok(json!({ "gallery": a.gallery, "size": g.len(), "dim": g.dim() }))
}

fn load_gallery(path: &Path) -> Result<Gallery, CliError> {
    require_file(path)?;
    Ok(Gallery::load(path)?)
}

fn search(a: &SearchArgs) -> Out {
    if a.k == 0 {
        return Err(CliError::validation("-k must be at least 1"));
    }
    require_file(&a.probe)?;
    let g = load_gallery(&a.gallery)?;
    let probe = FixedTemplate::load(&a.probe)?;
    let threads = threads_or_default(a.threads);
    let result = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::runtime(e.to_string()))?;
        pool.install(|| g.search_par(&probe, a.k))?
    } else {
        g.search(&probe, a.k)?
    };
    let candidates: Vec<Value> = result
        .candidates
        .iter()
        .enumerate()
        .map(|(r, c)| json!({ "rank": r + 1, "id": c.id, "score": c.score }))
        .collect();
    Ok(json!({ "probe": a.probe, "gallery_size": g.len(), "candidates": candidates }))
}

/// Probes named `<id>__<suffix>.fpt`; a stem without `__` is its own id.
fn load_probes(dir: &Path) -> Result<Vec<(String, FixedTemplate)>, CliError> {
    template_files(dir)?
        .into_iter()
        .map(|(stem, path)| {
            let id = stem.split_once("__").map_or(stem.as_str(), |(id, _)| id).to_string();
            Ok((id, FixedTemplate::load(&path)?))
        })
        .collect()
}

fn verify_eval(a: &EvalArgs) -> Out {
    let levels: Vec<f64> = a
        .far
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::validation(format!("bad --far list {:?}", a.far)))?;
    let g = load_gallery(&a.gallery)?;
    let probes = load_probes(&a.probes)?;
    let (genuine, imposter) = pair_scores(&probes, &g)?;
    let report = eval_verification(&genuine, &imposter, &levels)?;
    Ok(json!({
        "genuine": report.genuine_count,
        "imposters": report.imposter_count,
        "operating_points": report.tar_at_far,
    }))
}

fn search_eval(a: &EvalArgs) -> Out {
    let g = load_gallery(&a.gallery)?;
    let probes = load_probes(&a.probes)?;
    let report = eval_search(&probes, &g)?;
    let ranks: Vec<usize> = probes
        .iter()
        .map(|(id, t)| rank_of(&g, t, g.position(id).expect("checked by eval_search")))
        .collect::<Result<_, _>>()?;
    let per_probe: Vec<Value> = probes
        .iter()
        .zip(&ranks)
        .map(|((id, _), r)| json!({ "id": id, "rank": r }))
        .collect();
    let shown: Vec<_> = report.cmc.iter().take(20).collect();
    Ok(json!({
        "probes": report.probe_count,
        "gallery_size": g.len(),
        "rank1": report.cmc_at(1),
        "cmc": shown,
        "per_probe": per_probe,
    }))
}

fn bench(a: &BenchArgs) -> Out {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let g = match &a.gallery {
        Some(path) => load_gallery(path)?,
        None => {
            if a.size == 0 || a.dim == 0 {
                return Err(CliError::validation("--size and --dim must be positive"));
            }
            build_gallery(
                (0..a.size)
                    .map(|i| (format!("g{i}"), random_template(&mut rng, a.dim)))
                    .collect(),
            )?
        }
    };
    let queries: Vec<FixedTemplate> = (0..a.probes).map(|_| random_template(&mut rng, g.dim())).collect();
    let report = benchmark(&g, &queries, a.repetitions, threads_or_default(a.threads))?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}
