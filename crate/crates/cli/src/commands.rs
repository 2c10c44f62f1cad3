//! Subcommand bodies. Each returns the number of failed items; fatal
//! problems come back as errors.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cpie_core::eval::{mf_ods, normalize_rgb_illumination};
use cpie_core::fixtures::{heldout_pair, item_seed, raw_sample, texture, Primitive, View};
use cpie_core::geom::{classify_primitive, fit_contour_map, map_points, PrimitiveKind};
use cpie_core::image::{BinaryMap, ImagePlane};
use cpie_core::io::{load_mask, load_plane, load_rgb, render_overlay, save_mask, save_plane, write_atomic};
use cpie_core::model::{load_checkpoint, save_checkpoint, CpieModel, StepLog, Trainer};
use cpie_core::nms::{nms_thin, GaborBank};
use cpie_core::pairgen::{generate_pair, MaskMode, RawSample, SamplePair};
use cpie_core::{Error, Result};

use crate::config::RunConfig;
use crate::{EvalArgs, ExtractArgs, KindArg, PairMode, TrainArgs};

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Writes the effective configuration, with the command's paths, next to
/// its outputs.
fn echo_config(cfg: &RunConfig, dir: &Path, paths: &[(&str, &Path)]) -> Result<()> {
    let mut cfg = cfg.clone();
    for (k, p) in paths {
        cfg.paths.insert((*k).to_string(), p.display().to_string());
    }
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

fn fail(failures: &mut usize, what: impl std::fmt::Display, e: impl std::fmt::Display) {
    eprintln!("error: {what}: {e}");
    *failures += 1;
}

/// `.png` files of a directory, sorted by name.
fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if p.extension().is_some_and(|e| e == "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn truth_fields(p: &Primitive) -> String {
    match p {
        Primitive::Line { p0, p1 } => format!(
            "LS\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            p.line_angle_deg().unwrap_or_default(),
            p0[0],
            p0[1],
            p1[0],
            p1[1]
        ),
        Primitive::Arc {
            center,
            radius,
            start,
            span,
        } => format!(
            "CA\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            center[0],
            center[1],
            radius,
            start.to_degrees(),
            span.to_degrees()
        ),
    }
}

pub fn fixtures(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let f = &cfg.fixtures;
    let (raw_dir, dis_dir, held_dir) = (out.join("raw"), out.join("distractors"), out.join("heldout"));
    for d in [&raw_dir, &dis_dir, &held_dir] {
        mkdir(d)?;
    }
    let mut truth = String::from("set\tid\tview\tkind\tparams\n");
    let save_view = |dir: &Path, name: &str, v: &View| -> Result<()> {
        save_plane(&dir.join(format!("{name}.png")), &v.image)?;
        save_mask(&dir.join(format!("{name}_mask.png")), &v.mask)
    };
    for i in 0..f.raw_count {
        let v = raw_sample(f, cfg.seed, i);
        save_view(&raw_dir, &format!("{i:04}"), &v)?;
        let _ = writeln!(truth, "raw\t{i:04}\t-\t{}", truth_fields(&v.truth));
    }
    for i in 0..f.distractor_count {
        save_plane(&dis_dir.join(format!("{i:04}.png")), &texture(f, cfg.seed, i))?;
    }
    for i in 0..f.heldout_count {
        let (s, q) = heldout_pair(f, cfg.seed, i);
        save_view(&held_dir, &format!("{i:04}_support"), &s)?;
        save_view(&held_dir, &format!("{i:04}_query"), &q)?;
        let _ = writeln!(truth, "heldout\t{i:04}\tsupport\t{}", truth_fields(&s.truth));
        let _ = writeln!(truth, "heldout\t{i:04}\tquery\t{}", truth_fields(&q.truth));
    }
    write_atomic(&out.join("truth.tsv"), truth.as_bytes())?;
    echo_config(cfg, out, &[("out", out)])?;
    eprintln!(
        "wrote {} raw samples, {} distractors, {} held-out pairs to {}",
        f.raw_count,
        f.distractor_count,
        f.heldout_count,
        out.display()
    );
    Ok(0)
}

/// Raw samples of a directory; unreadable or maskless items are reported
/// and skipped.
fn load_raws(dir: &Path, failures: &mut usize) -> Result<Vec<(String, RawSample)>> {
    let mut out = Vec::new();
    for p in pngs(dir)? {
        let s = stem(&p);
        if s.ends_with("_mask") {
            continue;
        }
        let mask_path = dir.join(format!("{s}_mask.png"));
        if !mask_path.exists() {
            fail(failures, &s, format!("missing mask {}", mask_path.display()));
            continue;
        }
        let loaded = load_rgb(&p).and_then(|img| RawSample::new(img, load_mask(&mask_path)?));
        match loaded {
            Ok(r) => out.push((s, r)),
            Err(e) => fail(failures, &s, e),
        }
    }
    Ok(out)
}

fn load_pool(dir: &Path) -> Result<Vec<ImagePlane>> {
    pngs(dir)?.iter().map(|p| load_rgb(p)).collect()
}

fn save_pair(dir: &Path, id: &str, pair: &SamplePair) -> Result<()> {
    save_plane(&dir.join(format!("{id}_support.png")), &pair.support_image)?;
    save_mask(&dir.join(format!("{id}_support_mask.png")), &pair.support_mask)?;
    save_plane(&dir.join(format!("{id}_query.png")), &pair.query_image)?;
    save_mask(&dir.join(format!("{id}_query_mask.png")), &pair.query_mask)
}

pub fn gen_pairs(cfg: &RunConfig, raw: &Path, distractors: &Path, out: &Path, count: usize, mode: PairMode) -> Result<usize> {
    let mut failures = 0;
    let raws = load_raws(raw, &mut failures)?;
    let pool = load_pool(distractors)?;
    mkdir(out)?;
    let mode = match mode {
        PairMode::Train => MaskMode::Train,
        PairMode::Test => MaskMode::Test,
    };
    let mut manifest = String::from(
        "id\tsource\tseed\tflip_h\tflip_v\tsupport_gamma\tquery_gamma\tsupport_cutout_skipped\tquery_cutout_skipped\n",
    );
    for (i, (s, r)) in raws.iter().enumerate() {
        for k in 0..count {
            let seed = item_seed(cfg.seed, 11, (i * count + k) as u64);
            let id = format!("{s}_{k:03}");
            match generate_pair(r, &pool, &cfg.augment, mode, seed).and_then(|(pair, t)| {
                save_pair(out, &id, &pair)?;
                Ok(t)
            }) {
                Ok(t) => {
                    let _ = writeln!(
                        manifest,
                        "{id}\t{s}\t{seed}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}",
                        t.flip_h, t.flip_v, t.support.gamma, t.query.gamma, t.support.cutout_skipped, t.query.cutout_skipped
                    );
                }
                Err(e) => fail(&mut failures, &id, e),
            }
        }
    }
    write_atomic(&out.join("manifest.tsv"), manifest.as_bytes())?;
    echo_config(cfg, out, &[("raw", raw), ("distractors", distractors), ("out", out)])?;
    Ok(failures)
}

fn append_log(path: &Path, lines: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let header = if fresh { "step\tepoch\tlr\tloss\n" } else { "" };
    f.write_all(format!("{header}{lines}").as_bytes()).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn train(cfg: &RunConfig, a: &TrainArgs) -> Result<usize> {
    let mut failures = 0;
    let raws: Vec<RawSample> = load_raws(&a.raw, &mut failures)?.into_iter().map(|(_, r)| r).collect();
    if failures > 0 {
        return Err(Error::Config(format!("{failures} raw sample(s) could not be loaded")));
    }
    let pool = load_pool(&a.distractors)?;
    mkdir(&a.checkpoint)?;
    let log_path = a.checkpoint.join("loss.tsv");
    let mut trainer = if a.resume {
        let (model, adam, manifest) = load_checkpoint(&a.checkpoint)?;
        eprintln!("resuming at step {}", manifest.step);
        Trainer::resume(model, adam, cfg.train.clone(), manifest.step)?
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        }
        Trainer::new(CpieModel::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?
    };
    let save = |t: &Trainer| save_checkpoint(&a.checkpoint, &t.model, &t.adam, cfg.preset, cfg.train.seed, t.step);
    let report = |l: &StepLog, lines: &mut String| {
        lines.push_str(&l.to_line());
        lines.push('\n');
        if l.step % 10 == 0 {
            eprintln!("step {} epoch {} lr {:e} loss {:.4}", l.step, l.epoch, l.lr, l.loss);
        }
    };

    if let Some(steps) = a.overfit {
        let first = raws.first().ok_or(Error::EmptyDataset)?;
        let seed = item_seed(cfg.train.seed, 7, 0);
        let (pair, _) = generate_pair(first, &pool, &cfg.augment, MaskMode::Train, seed)?;
        let mut lines = String::new();
        for _ in 0..steps {
            let lr = cfg.train.learning_rate;
            let loss = trainer.train_step(std::slice::from_ref(&pair), lr)?;
            report(
                &StepLog {
                    step: trainer.step,
                    epoch: 0,
                    lr,
                    loss,
                },
                &mut lines,
            );
        }
        append_log(&log_path, &lines)?;
    } else {
        let spe = trainer.steps_per_epoch(raws.len()) as u64;
        let total = trainer.total_steps(raws.len());
        while trainer.step < total {
            let until = ((trainer.step / spe + 1) * spe).min(total);
            let mut lines = String::new();
            trainer.run_until(&raws, &pool, &cfg.augment, until, |l| report(l, &mut lines))?;
            append_log(&log_path, &lines)?;
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    echo_config(
        cfg,
        &a.checkpoint,
        &[("raw", &a.raw), ("distractors", &a.distractors), ("checkpoint", &a.checkpoint)],
    )?;
    eprintln!("checkpoint at step {} in {}", trainer.step, a.checkpoint.display());
    Ok(failures)
}

fn load_inputs(support: &Path, query: &Path, illum_norm: bool) -> Result<(ImagePlane, ImagePlane)> {
    let (mut s, mut q) = (load_rgb(support)?, load_rgb(query)?);
    if illum_norm {
        s = normalize_rgb_illumination(&s);
        q = normalize_rgb_illumination(&q);
    }
    Ok((s, q))
}

pub fn extract(cfg: &RunConfig, a: &ExtractArgs) -> Result<usize> {
    let (model, _, _) = load_checkpoint(&a.checkpoint)?;
    let (support, query) = load_inputs(&a.support, &a.query, a.illum_norm || cfg.extract.illum_norm)?;
    let masks = a.masks.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
    mkdir(&a.out)?;
    let bank = GaborBank::new(&cfg.nms)?;
    let outputs = model.forward_batch(&query, &support, &masks)?;
    let mut failures = 0;
    let mut report = String::new();
    let mut overlays = Vec::with_capacity(masks.len());
    for (k, (out, mask)) in outputs.into_iter().zip(&masks).enumerate() {
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                fail(&mut failures, format!("mask {k} ({})", a.masks[k].display()), e);
                overlays.push(BinaryMap::new(query.height(), query.width()));
                continue;
            }
        };
        save_plane(&a.out.join(format!("map_{k}.png")), &out.map)?;
        let final_map = if a.thin {
            let t = nms_thin(&out.map, &bank);
            save_plane(&a.out.join(format!("thin_{k}.png")), &t)?;
            t
        } else {
            out.map
        };
        let binary = BinaryMap::threshold(&final_map, cfg.extract.threshold);
        if a.fit {
            // The support annotation fixes the primitive kind.
            let fitted = classify_primitive(&map_points(mask), &cfg.fit)
                .and_then(|c| fit_contour_map(&binary, Some(c.kind), &cfg.fit));
            match fitted {
                Ok(f) => {
                    let _ = writeln!(report, "{k}\t{}", f.report_fields().join("\t"));
                }
                Err(e) => fail(&mut failures, format!("fit {k}"), e),
            }
        }
        overlays.push(binary);
    }
    if a.fit {
        write_atomic(&a.out.join("fit.tsv"), report.as_bytes())?;
        print!("{report}");
    }
    if a.overlay {
        save_plane(&a.out.join("overlay.png"), &render_overlay(&query, &overlays)?)?;
    }
    let mut paths: Vec<(&str, &Path)> = vec![
        ("checkpoint", &a.checkpoint),
        ("support", &a.support),
        ("query", &a.query),
        ("out", &a.out),
    ];
    let names: Vec<String> = (0..a.masks.len()).map(|k| format!("mask_{k}")).collect();
    for (n, p) in names.iter().zip(&a.masks) {
        paths.push((n, p));
    }
    echo_config(cfg, &a.out, &paths)?;
    Ok(failures)
}

pub fn thin(cfg: &RunConfig, inputs: &[PathBuf], out: Option<&Path>, bank_out: Option<&Path>) -> Result<usize> {
    let bank = GaborBank::new(&cfg.nms)?;
    if let Some(p) = bank_out {
        write_atomic(p, bank.dump().as_bytes())?;
    }
    let Some(out) = out else {
        return Ok(0);
    };
    mkdir(out)?;
    let mut failures = 0;
    for p in inputs {
        let name = p.file_name().unwrap_or_default();
        match load_plane(p).and_then(|m| save_plane(&out.join(name), &nms_thin(&m, &bank))) {
            Ok(()) => {}
            Err(e) => fail(&mut failures, "thin", e),
        }
    }
    echo_config(cfg, out, &[("out", out)])?;
    Ok(failures)
}

fn stems_of(dir: &Path) -> Result<Vec<String>> {
    Ok(pngs(dir)?.iter().map(|p| stem(p)).collect())
}

pub fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<usize> {
    let bank = GaborBank::new(&cfg.nms)?;
    let finish = |m: ImagePlane| if a.thin { nms_thin(&m, &bank) } else { m };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let (ps, gs) = (stems_of(pred)?, stems_of(gt)?);
        if ps != gs {
            let only_pred: Vec<_> = ps.iter().filter(|s| !gs.contains(s)).collect();
            let only_gt: Vec<_> = gs.iter().filter(|s| !ps.contains(s)).collect();
            return Err(Error::DimMismatch(format!(
                "file stems differ: only in predictions {only_pred:?}, only in ground truth {only_gt:?}"
            )));
        }
        for s in &ps {
            preds.push(finish(load_plane(&pred.join(format!("{s}.png")))?));
            gts.push(load_mask(&gt.join(format!("{s}.png")))?);
        }
    } else if let (Some(ck), Some(pairs)) = (&a.checkpoint, &a.pairs) {
        let (model, _, _) = load_checkpoint(ck)?;
        let ids: Vec<String> = stems_of(pairs)?
            .into_iter()
            .filter_map(|s| s.strip_suffix("_query").map(str::to_string))
            .collect();
        for id in ids {
            let f = |suffix: &str| pairs.join(format!("{id}_{suffix}.png"));
            let (s, q) = load_inputs(&f("support"), &f("query"), a.illum_norm || cfg.extract.illum_norm)?;
            let out = model.forward(&q, &s, &load_mask(&f("support_mask"))?)?;
            preds.push(finish(out.map));
            gts.push(load_mask(&f("query_mask"))?);
        }
    } else {
        return Err(Error::Config("eval needs --pred and --gt, or --checkpoint and --pairs".into()));
    }
    let report = mf_ods(&preds, &gts, &cfg.eval)?.to_text();
    print!("{report}");
    if let Some(out) = &a.out {
        write_atomic(out, report.as_bytes())?;
    }
    Ok(0)
}

pub fn fit(cfg: &RunConfig, inputs: &[PathBuf], kind: KindArg, out: Option<&Path>) -> Result<usize> {
    let kind = match kind {
        KindArg::Auto => None,
        KindArg::Ls => Some(PrimitiveKind::LineSegment),
        KindArg::Ca => Some(PrimitiveKind::CircularArc),
    };
    let mut failures = 0;
    let mut report = String::new();
    for p in inputs {
        let fitted = load_plane(p).and_then(|m| {
            Ok(fit_contour_map(&BinaryMap::threshold(&m, cfg.extract.threshold), kind, &cfg.fit)?)
        });
        match fitted {
            Ok(f) => {
                let _ = writeln!(report, "{}\t{}", p.display(), f.report_fields().join("\t"));
            }
            Err(e) => fail(&mut failures, "fit", e),
        }
    }
    print!("{report}");
    if let Some(out) = out {
        write_atomic(out, report.as_bytes())?;
    }
    Ok(failures)
}
