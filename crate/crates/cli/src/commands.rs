use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use uidet_core::checkpoint::{init_from_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, RunConfig};
use uidet_core::data::{generate_dataset, load_dataset, write_dataset, ClassCatalog, Dataset, Split, SplitSizes, VAL_RATIO};
use uidet_core::eval::{
    ablation_eval, bench as run_bench, detection_listing, draw_detections, evaluate, predict_sample, DecodeSettings,
    MetricsReport,
};
use uidet_core::fusion::FusionKind;
use uidet_core::parallel;
use uidet_core::text::external::load_external_embeddings;
use uidet_core::text::{Corruption, TextProvider};
use uidet_core::train::{train as run_train, Phase};
use uidet_core::{Detector, Error};

use crate::{AblateArgs, AblationMode, BenchArgs, EvalArgs, FusionArg, GenArgs, PipelineArgs, RenderArgs, SourceArgs, TrainArgs};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn fusion_kind(f: FusionArg) -> FusionKind {
    match f {
        FusionArg::None => FusionKind::None,
        FusionArg::Add => FusionKind::Add,
        FusionArg::Wsum => FusionKind::Wsum,
        FusionArg::Conv => FusionKind::Conv,
    }
}

fn text_provider(ds: &Dataset, dim: usize, embeddings: Option<&Path>) -> Result<TextProvider> {
    let mut p = TextProvider::new(dim, &ds.catalog);
    if let Some(path) = embeddings {
        p.external = Some(load_external_embeddings(path, dim)?);
    }
    Ok(p)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    parallel::thread_cap()?;
    let catalog = ClassCatalog::by_name(&a.catalog)?;
    let test = a.test.unwrap_or(SplitSizes::standard(a.count).test);
    if test > a.count {
        return Err(usage(format!("--test {test} exceeds --count {}", a.count)));
    }
    let val = a.val.unwrap_or(((a.count - test) as f64 * VAL_RATIO).round() as usize);
    if val + test > a.count {
        return Err(usage(format!("--val {val} plus {test} test images exceeds --count {}", a.count)));
    }
    let sizes = SplitSizes {
        train: a.count - test - val,
        val,
        test,
    };
    let ds = generate_dataset(&catalog, a.canvas, sizes, a.seed)?;
    write_dataset(&a.out, &ds)?;
    println!(
        "{}: {} images ({} train, {} val, {} test), catalog {}, canvas {}, seed {}",
        a.out.display(),
        ds.samples.len(),
        sizes.train,
        sizes.val,
        sizes.test,
        catalog.name,
        a.canvas,
        a.seed
    );
    Ok(())
}

/// Applies the two-phase protocol checks, trains and writes the checkpoint,
/// `<out>.loss.csv` and the `<out>.config.toml` echo.
fn train_run(mut cfg: RunConfig, out: &Path) -> Result<Detector> {
    let fusion = cfg.model.fusion;
    let xattn = cfg.model.xattn_count;
    match (fusion, xattn, &cfg.init) {
        (FusionKind::None, x, _) if x != 0 => return Err(usage("fusion `none` requires --xattn 0")),
        (FusionKind::None, _, Some(_)) => {
            return Err(usage("--init is only for fusion fine-tuning; a baseline trains from scratch"))
        }
        (_, 0, _) if fusion != FusionKind::None => {
            return Err(usage(format!("fusion `{fusion}` needs at least one cross-attention module (--xattn 3|4|5)")))
        }
        (_, _, None) if fusion != FusionKind::None => {
            return Err(usage(format!(
                "fusion `{fusion}` is fine-tuned from a baseline: first run `uidet train --fusion none --xattn 0`, \
                 then pass that checkpoint with --init"
            )))
        }
        _ => {}
    }
    let ds = load_dataset(&cfg.data_dir)?;
    if cfg.model.num_classes != ds.catalog.len() {
        eprintln!(
            "note: model.num_classes set to {} to match catalog {}",
            ds.catalog.len(),
            ds.catalog.name
        );
        cfg.model.num_classes = ds.catalog.len();
    }
    if cfg.model.input_size != ds.canvas as usize {
        return Err(Error::Config(format!(
            "model.input_size {} differs from the dataset canvas {}",
            cfg.model.input_size, ds.canvas
        ))
        .into());
    }
    cfg.model.validate()?;
    let (mut model, phase) = match &cfg.init {
        None => (Detector::build(&cfg.model)?, Phase::Baseline),
        Some(init) => {
            let base = read_checkpoint(init)?;
            if base.config.model.fusion != FusionKind::None {
                return Err(usage(format!(
                    "--init {} holds a `{}` fusion model; fine-tuning starts from a baseline checkpoint",
                    init.display(),
                    base.config.model.fusion
                )));
            }
            let (model, report) = init_from_checkpoint(init, &cfg.model)?;
            eprintln!(
                "init: {} parameters loaded from {}, {} initialised fresh ({})",
                report.loaded.len(),
                init.display(),
                report.initialized.len(),
                report.initialized.join(", ")
            );
            (model, Phase::Finetune)
        }
    };
    let text = text_provider(&ds, cfg.model.text_dim, cfg.embeddings.as_deref())?;
    let settings = cfg.train_settings();
    let epochs = settings.epochs;
    let outcome = run_train(&mut model, &ds, phase, &settings, &text, |e| {
        let val = e.val_map50.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!("epoch {}/{epochs} loss {:.5} val_map50 {val} ({:.1}s)", e.epoch, e.loss, e.seconds);
    })?;
    if outcome.unmatched_gt > 0 {
        eprintln!("note: {} training boxes matched no anchor", outcome.unmatched_gt);
    }
    cfg.out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    save_checkpoint(&model, &cfg, out)?;
    write(&out.with_extension("loss.csv"), outcome.to_csv().as_bytes())?;
    let mut echo = cfg.clone();
    echo.model = model.config().clone();
    write(&out.with_extension("config.toml"), echo.to_toml().as_bytes())?;
    println!("{}: best epoch {} of {}", out.display(), outcome.best_epoch, epochs);
    Ok(model)
}

fn run_config(config: Option<&Path>) -> Result<RunConfig> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    parallel::thread_cap()?;
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    if let Some(f) = a.fusion {
        cfg.model.fusion = fusion_kind(f);
    }
    if let Some(x) = a.xattn {
        cfg.model.xattn_count = x as usize;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.init.is_some() {
        cfg.init = a.init.clone();
    }
    if a.embeddings.is_some() {
        cfg.embeddings = a.embeddings.clone();
    }
    train_run(cfg, &a.out)?;
    Ok(())
}

struct Loaded {
    model: Detector,
    ds: Dataset,
    text: TextProvider,
}

fn load_source(src: &SourceArgs) -> Result<Loaded> {
    parallel::thread_cap()?;
    let (cfg, model) = load_checkpoint(&src.ckpt)?;
    let data = src.data.clone().unwrap_or(cfg.data_dir.clone());
    let ds = load_dataset(&data)?;
    let emb: Option<PathBuf> = src.embeddings.clone().or(cfg.embeddings.clone());
    let text = text_provider(&ds, model.config().text_dim, emb.as_deref())?;
    Ok(Loaded { model, ds, text })
}

fn report_table(r: &MetricsReport) -> String {
    let mut s = format!("{:<26} {:>9} {:>7} {:>7} {:>7} {:>6}\n", "class", "precision", "recall", "f1", "ap50", "gt");
    for (name, m) in r.classes.iter().chain(std::iter::once((&"all".to_string(), &r.all))) {
        let _ = writeln!(
            s,
            "{name:<26} {:>9.3} {:>7.3} {:>7.3} {:>7.3} {:>6}",
            m.precision, m.recall, m.f1, m.ap50, m.gt_count
        );
    }
    s
}

fn eval_to(l: &Loaded, split: Split, report: &Path) -> Result<MetricsReport> {
    let r = evaluate(&l.model, &l.ds, split, &l.text, &DecodeSettings::default())?;
    write(report, r.to_json().as_bytes())?;
    Ok(r)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let l = load_source(&a.src)?;
    let r = eval_to(&l, Split::parse(&a.split)?, &a.report)?;
    print!("{}", report_table(&r));
    Ok(())
}

fn corruption(mode: AblationMode, class: Option<&str>, seed: u64) -> Result<Corruption> {
    Ok(match (mode, class) {
        (AblationMode::Mismatch, None) => Corruption::Mismatch { seed },
        (AblationMode::Mismatch, Some(_)) => return Err(usage("--class applies to partial mode only")),
        (AblationMode::Partial, Some(c)) => Corruption::Partial { class: c.to_string() },
        (AblationMode::Partial, None) => return Err(usage("partial mode needs --class NAME")),
    })
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let c = corruption(a.mode, a.class.as_deref(), a.seed)?;
    let l = load_source(&a.src)?;
    let reference = MetricsReport::read(&a.reference)?;
    let r = ablation_eval(
        &l.model,
        &l.ds,
        Split::parse(&a.split)?,
        &l.text,
        c,
        &reference,
        &DecodeSettings::default(),
    )?;
    write(&a.report, r.to_json().as_bytes())?;
    print!("{}", report_table(&r.report));
    Ok(())
}

fn bench_to(l: &Loaded, cfg: &RunConfig, epochs: usize, report: &Path) -> Result<()> {
    let mut settings = cfg.train_settings();
    settings.epochs = epochs;
    let r = run_bench(&l.model, &l.ds, &l.text, &settings)?;
    write(report, r.to_json().as_bytes())?;
    println!(
        "{} xattn={} params={} epoch={:.2}s inference={:.4}s/image",
        r.fusion, r.xattn_count, r.params.total, r.mean_epoch_seconds, r.mean_inference_seconds
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    let l = load_source(&a.src)?;
    let cfg = read_checkpoint(&a.src.ckpt)?.config;
    bench_to(&l, &cfg, a.epochs, &a.report)
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let l = load_source(&a.src)?;
    let sample = l
        .ds
        .get(&a.image)
        .ok_or_else(|| usage(format!("image `{}` is not in the dataset", a.image)))?;
    let settings = DecodeSettings {
        conf_thresh: a.conf,
        ..DecodeSettings::default()
    };
    let dets = predict_sample(&l.model, sample, &l.text, &settings)?;
    let img = draw_detections(&sample.image, &dets);
    write(&a.out, &img.encode_ppm())?;
    print!("{}", detection_listing(&dets, &l.ds.catalog));
    Ok(())
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    parallel::thread_cap()?;
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    cfg.model.fusion = FusionKind::None;
    cfg.model.xattn_count = 0;
    cfg.init = None;
    let out = &a.out;
    let base_ckpt = out.join("baseline.ckpt");
    eprintln!("== baseline");
    train_run(cfg.clone(), &base_ckpt)?;

    let mut summary = String::from("variant\tmap50\tf1\ttwin_map50\tmismatch_map50\tmismatch_f1\n");
    let mut variants = vec![("baseline".to_string(), base_ckpt.clone())];
    for kind in [FusionKind::Add, FusionKind::Wsum, FusionKind::Conv] {
        eprintln!("== {kind}");
        let mut c = cfg.clone();
        c.model.fusion = kind;
        c.model.xattn_count = a.xattn as usize;
        c.init = Some(base_ckpt.clone());
        if let Some(e) = a.finetune_epochs {
            c.epochs = e;
        }
        let ckpt = out.join(format!("{kind}.ckpt"));
        train_run(c, &ckpt)?;
        variants.push((kind.to_string(), ckpt));
    }
    for (name, ckpt) in &variants {
        let src = SourceArgs {
            ckpt: ckpt.clone(),
            data: Some(cfg.data_dir.clone()),
            embeddings: cfg.embeddings.clone(),
        };
        let l = load_source(&src)?;
        let reference = eval_to(&l, Split::Test, &out.join(format!("{name}.report.json")))?;
        let twins: Vec<&str> = l.ds.catalog.twin_classes().into_iter().map(|c| l.ds.catalog.name_of(c)).collect();
        let mut row = format!(
            "{name}\t{:.4}\t{:.4}\t{:.4}",
            reference.all.ap50,
            reference.all.f1,
            reference.mean_ap(&twins)
        );
        if l.model.has_fusion() {
            let settings = DecodeSettings::default();
            let mismatch = ablation_eval(
                &l.model,
                &l.ds,
                Split::Test,
                &l.text,
                Corruption::Mismatch { seed: cfg.seed },
                &reference,
                &settings,
            )?;
            write(&out.join(format!("{name}.mismatch.json")), mismatch.to_json().as_bytes())?;
            let _ = write!(row, "\t{:.4}\t{:.4}", mismatch.report.all.ap50, mismatch.report.all.f1);
            for class in l.ds.catalog.names() {
                let partial = ablation_eval(
                    &l.model,
                    &l.ds,
                    Split::Test,
                    &l.text,
                    Corruption::Partial { class: class.to_string() },
                    &reference,
                    &settings,
                )?;
                write(&out.join(format!("{name}.partial.{class}.json")), partial.to_json().as_bytes())?;
            }
        } else {
            row.push_str("\t-\t-");
        }
        summary.push_str(&row);
        summary.push('\n');
        let run = read_checkpoint(ckpt)?.config;
        bench_to(&l, &run, a.bench_epochs.max(1), &out.join(format!("{name}.bench.json")))?;
    }
    write(&out.join("summary.tsv"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}
