use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use cmt_core::config::{Config, QueryPe};
use cmt_core::encoders::ModalityMask;
use cmt_core::eval::{evaluate, robustness_modes, simulate_sensor_failure, EvalReport, DISTANCE_THRESHOLDS};
use cmt_core::loss::LossBreakdown;
use cmt_core::scene::{write_dataset, DatasetIndex, Scene};
use cmt_core::train::{train as train_model, Trainer};
use cmt_core::CmtError;
use log::info;

use crate::manifest;
use crate::{AblateArgs, DumpArgs, EvalArgs, GenDataArgs, Modality, RobustnessArgs, Switch, TrainArgs};

const LOG_FILE: &str = "log.csv";
const CONFIG_FILE: &str = "config.txt";

fn ensure_empty_or_forced(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(CmtError::Config(format!("{} exists and is not empty (use --force)", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_index(data: &Path) -> Result<DatasetIndex> {
    DatasetIndex::read(data).with_context(|| format!("reading dataset index in {}", data.display()))
}

fn load_checkpoint(path: &Path) -> Result<Trainer> {
    Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

pub fn gen_data(mut config: Config, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.scenes {
        config.data.n_train = n;
    }
    if let Some(n) = a.val {
        config.data.n_val = n;
    }
    if let Some(s) = a.seed {
        config.data.data_seed = s;
    }
    config.validate()?;
    ensure_empty_or_forced(&a.out, a.force)?;
    let idx = write_dataset(&a.out, &config)?;
    fs::write(a.out.join(CONFIG_FILE), config.to_text())?;
    manifest::write(&a.out, "gen-data", &[], &config)?;
    info!(
        "wrote {} training and {} validation scenes to {}",
        idx.train.len(),
        idx.val.len(),
        a.out.display()
    );
    Ok(())
}

fn checkpoint_name(step: usize) -> String {
    format!("checkpoints/step_{step:08}")
}

pub fn train(mut config: Config, a: &TrainArgs) -> Result<()> {
    if let Some(eta) = &a.mask_modal {
        config.train.eta_camera = eta[0];
        config.train.eta_lidar = eta[1];
    }
    if let Some(d) = a.denoise {
        config.train.denoise = d == Switch::On;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    config.validate()?;
    let scenes = load_index(&a.data)?.load_train()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), config.to_text())?;

    let mut trainer = Trainer::new(&config)?;
    trainer.save(&a.out.join(checkpoint_name(0)))?;
    let mut log = vec![LossBreakdown::CSV_HEADER.to_string()];
    let interval = config.train.checkpoint_interval;
    let per_epoch = scenes.len().div_ceil(config.train.batch_size);
    for epoch in 0..config.train.epochs {
        trainer.run_epoch(&scenes, epoch, &mut |t, _, b| {
            log.push(b.csv_row(t.step));
            if t.step % per_epoch.max(1) == 0 || t.step % 50 == 0 {
                info!("epoch {epoch} step {} loss {:.4}", t.step, b.total);
            }
            if interval > 0 && t.step % interval == 0 {
                t.save(&a.out.join(checkpoint_name(t.step)))?;
            }
            Ok(())
        })?;
    }
    if trainer.step > 0 {
        trainer.save(&a.out.join("final"))?;
    }
    fs::write(a.out.join(LOG_FILE), log.join("\n") + "\n")?;
    let args = [("data", path_arg(&a.data)), ("steps", trainer.step.to_string())];
    manifest::write(&a.out, "train", &args, &config)?;
    info!("trained {} steps; outputs in {}", trainer.step, a.out.display());
    Ok(())
}

fn mask_for(m: Modality) -> ModalityMask {
    match m {
        Modality::Both => ModalityMask::both(),
        Modality::Camera => ModalityMask::camera_only(),
        Modality::Lidar => ModalityMask::lidar_only(),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let val = load_index(&a.data)?.load_val()?;
    let report = evaluate(&trainer.model, &val, &mask_for(a.modality))?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    fs::write(a.out.join("report.txt"), report.pretty())?;
    let modality = format!("{:?}", a.modality).to_lowercase();
    write_summary(&a.out, "summary.csv", &[(modality.clone(), report.clone())])?;
    print!("{}", report.pretty());
    let args = [
        ("checkpoint", path_arg(&a.checkpoint)),
        ("data", path_arg(&a.data)),
        ("modality", modality),
    ];
    manifest::write(&a.out, "eval", &args, &trainer.config)?;
    Ok(())
}

const SUMMARY_HEADER: &str = "name,map,map_0.5,map_1,map_2,map_4,mate";

fn summary_row(name: &str, r: &EvalReport) -> String {
    let mut s = format!("{name},{:.6}", r.map);
    for v in &r.map_at {
        let _ = write!(s, ",{v:.6}");
    }
    let _ = write!(s, ",{:.6}", r.mate);
    s
}

fn summary_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:width$}  {:>7}", "mode", "mAP");
    for t in DISTANCE_THRESHOLDS {
        let _ = write!(s, "  {:>7}", format!("@{t}m"));
    }
    let _ = writeln!(s, "  {:>7}", "mATE");
    for (name, r) in rows {
        let _ = write!(s, "{name:width$}  {:>7.4}", r.map);
        for v in &r.map_at {
            let _ = write!(s, "  {v:>7.4}");
        }
        let _ = writeln!(s, "  {:>7.4}", r.mate);
    }
    s
}

fn write_summary(dir: &Path, file: &str, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for (name, r) in rows {
        csv.push_str(&summary_row(name, r));
        csv.push('\n');
    }
    fs::write(dir.join(file), csv)?;
    Ok(())
}

pub fn robustness(a: &RobustnessArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let val = load_index(&a.data)?.load_val()?;
    let cameras = val.first().map_or(trainer.config.data.cameras, |s| s.rig.len());
    let mut rows = Vec::new();
    for mode in robustness_modes(cameras) {
        let report = evaluate(&trainer.model, &val, &simulate_sensor_failure(mode))?;
        info!("{}: mAP {:.4}", mode.label(), report.map);
        rows.push((mode.label(), report));
    }
    fs::create_dir_all(&a.out)?;
    write_summary(&a.out, "robustness.csv", &rows)?;
    let table = summary_table(&rows);
    fs::write(a.out.join("robustness.txt"), &table)?;
    print!("{table}");
    let args = [("checkpoint", path_arg(&a.checkpoint)), ("data", path_arg(&a.data))];
    manifest::write(&a.out, "robustness", &args, &trainer.config)?;
    Ok(())
}

/// The ablation variants: the full model, no denoising, and query
/// embeddings built from a single modality.
pub fn ablation_variants(base: &Config) -> Vec<(&'static str, Config)> {
    let mut no_dn = base.clone();
    no_dn.train.denoise = false;
    let mut im = base.clone();
    im.model.query_pe = QueryPe::ImageOnly;
    let mut pc = base.clone();
    pc.model.query_pe = QueryPe::BevOnly;
    vec![
        ("full", base.clone()),
        ("no_denoise", no_dn),
        ("query_pe_image", im),
        ("query_pe_bev", pc),
    ]
}

pub fn ablate(mut config: Config, a: &AblateArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    config.validate()?;
    let idx = load_index(&a.data)?;
    let (train, val): (Vec<Scene>, Vec<Scene>) = (idx.load_train()?, idx.load_val()?);
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(&config) {
        info!("training variant {name}");
        let (trainer, log) = train_model(&cfg, &train, &mut |_, _, _| Ok(()))?;
        let dir = a.out.join(name);
        trainer.save(&dir.join("final"))?;
        fs::write(dir.join(LOG_FILE), log.join("\n") + "\n")?;
        let report = evaluate(&trainer.model, &val, &ModalityMask::both())?;
        info!("{name}: mAP {:.4}", report.map);
        rows.push((name.to_string(), report));
    }
    write_summary(&a.out, "ablation.csv", &rows)?;
    let table = summary_table(&rows);
    fs::write(a.out.join("ablation.txt"), &table)?;
    print!("{table}");
    manifest::write(&a.out, "ablate", &[("data", path_arg(&a.data))], &config)?;
    Ok(())
}

pub fn dump_attention(a: &DumpArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let idx = load_index(&a.data)?;
    let file = idx
        .val
        .get(a.scene)
        .ok_or_else(|| CmtError::Config(format!("validation scene {} does not exist", a.scene)))?;
    let scene = cmt_core::scene::read_scene(&idx.root.join(file))?;
    let queries = if a.queries.is_empty() {
        let preds = trainer.model.predict(&scene.input(), &ModalityMask::both())?;
        let best = |i: usize| preds[i].scores().into_iter().fold(0.0f64, f64::max);
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&x, &y| best(y).total_cmp(&best(x)).then(x.cmp(&y)));
        order.truncate(3);
        order
    } else {
        a.queries.clone()
    };
    let written = cmt_core::eval::dump_attention(&trainer.model, &scene, a.layer, &queries, &a.out)?;
    info!("wrote {} files to {}", written.len(), a.out.display());
    let args = [
        ("checkpoint", path_arg(&a.checkpoint)),
        ("data", path_arg(&a.data)),
        ("scene", a.scene.to_string()),
        ("layer", a.layer.to_string()),
        (
            "queries",
            queries.iter().map(|q| q.to_string()).collect::<Vec<_>>().join(","),
        ),
    ];
    manifest::write(&a.out, "dump-attention", &args, &trainer.config)?;
    Ok(())
}
