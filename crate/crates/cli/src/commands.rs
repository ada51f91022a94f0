use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use softpose::checkpoint::Checkpoint;
use softpose::data::{
    crop_normalize, load_annotations, normalize_annotation, synth_range, write_annotations, Annotation, Dataset, Image,
};
use softpose::gradcheck::{run_gradcheck, GradcheckConfig};
use softpose::metrics::evaluate;
use softpose::render::{heatmap_mosaic, render_overlay};
use softpose::train::{predict_dataset, EpochRecord, Trainer};
use softpose::{Model, Pose, PredictionSet};

use crate::config::{MetricKind, RunConfig};
use crate::CliError;

const DEFAULT_RUN_DIR: &str = "softpose-run";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub fn synth(run: &RunConfig, out: &Path, start: usize, count: usize, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = run.synth.clone();
    spec.seed = seed.unwrap_or(spec.seed);
    let samples = synth_range(&spec, start, count)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let mut anns = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("images/{:06}.png", start + i);
        s.image.save_png(&out.join(&name))?;
        anns.push(s.annotation(&name, &run.crop));
    }
    let path = out.join("annotations.jsonl");
    write_annotations(&path, &anns)?;
    println!("wrote {} samples to {}", anns.len(), path.display());
    Ok(())
}

fn print_epoch(r: &EpochRecord) {
    let val = r.val_pck.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "epoch {:>3}  lr {:.2e}  loss {:.5} (coord {:.5}, prob {:.5})  val_pck {}  {:.1}s",
        r.epoch, r.lr, r.total_loss, r.coordinate_loss, r.probability_loss, val, r.wall_clock_secs
    );
}

pub fn train(
    run: &RunConfig,
    data: &Path,
    val: Option<&Path>,
    init_from: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = run.train.clone();
    let out = cfg.output_dir.get_or_insert_with(|| PathBuf::from(DEFAULT_RUN_DIR)).clone();
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let model_cfg = resumed.as_ref().map_or_else(|| run.model.clone(), |c| c.config.clone());
    let full = Dataset::from_annotations(data, model_cfg.input_size, &run.crop)?;
    let (train_set, val_set) = match val {
        Some(path) => (full, Dataset::from_annotations(path, model_cfg.input_size, &run.crop)?),
        None => full.split(cfg.val_fraction, cfg.seed)?,
    };
    let nj = train_set.num_joints().unwrap_or(model_cfg.num_joints);
    let metric = run.metric_config(nj, Some(MetricKind::Pck), Some(0.2))?;
    println!(
        "training on {} samples, validating on {}; output in {}",
        train_set.len(),
        val_set.len(),
        out.display()
    );
    let mut trainer = match (&resumed, init_from) {
        (Some(ckpt), _) => Trainer::resume(ckpt, cfg, &train_set, &val_set, metric)?,
        (None, Some(path)) => {
            let mut model = Model::new(model_cfg)?;
            model.load_weights(&Checkpoint::load(path)?)?;
            Trainer::new(model, cfg, &train_set, &val_set, metric)?
        }
        (None, None) => Trainer::new(Model::new(model_cfg)?, cfg, &train_set, &val_set, metric)?,
    };
    println!("model has {} parameters", trainer.model().param_count());
    trainer.run(print_epoch)?;
    let best = trainer.state().best_score.map_or_else(|| "n/a".into(), |b| format!("{b:.4}"));
    println!("done after {} epochs; best val_pck {best}", trainer.state().epoch);
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Pose>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn write_predictions(path: &Path, poses: &[Pose]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for p in poses {
        let line = serde_json::to_string(p).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn eval(
    run: &RunConfig,
    data: &Path,
    predictions: Option<&Path>,
    checkpoint: Option<&Path>,
    metric: Option<MetricKind>,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let anns = load_annotations(data)?;
    let truths = anns
        .iter()
        .map(|a| normalize_annotation(a, &run.crop))
        .collect::<softpose::Result<Vec<_>>>()?;
    let preds = match (predictions, checkpoint) {
        (Some(path), _) => read_predictions(path)?,
        (None, Some(dir)) => {
            let model = Model::from_checkpoint(&Checkpoint::load(dir)?)?;
            let dataset = Dataset::from_annotations(data, model.config().input_size, &run.crop)?;
            predict_dataset(&model, &dataset)?
        }
        (None, None) => return Err(CliError::Config("--predictions or --checkpoint is required".into())),
    };
    let nj = truths.first().map_or(0, Pose::num_joints);
    let cfg = run.metric_config(nj, metric, threshold)?;
    let table = evaluate(&preds, &truths, &cfg)?.to_csv();
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub enum PredictSource {
    Image {
        path: PathBuf,
        center: Option<[f64; 2]>,
        scale: Option<f64>,
    },
    Annotations(PathBuf),
}

pub fn predict(
    run: &RunConfig,
    checkpoint: &Path,
    source: PredictSource,
    out: &Path,
    zoom: usize,
    max_images: usize,
) -> Result<(), CliError> {
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let size = model.config().input_size;
    let dataset = match source {
        PredictSource::Image { path, center, scale } => {
            let image = Image::load_png(&path)?;
            let (w, h) = (image.width() as f64, image.height() as f64);
            let ann = Annotation {
                image: path.display().to_string(),
                joints: Vec::new(),
                visibility: Vec::new(),
                center: center.unwrap_or([w / 2.0, h / 2.0]),
                scale: scale.unwrap_or(w.max(h) / run.crop.pixels_per_scale),
            };
            let (tensor, _) = crop_normalize(&image, &ann, size, &run.crop)?;
            let nj = model.config().num_joints;
            Dataset::new(vec![tensor], vec![Pose::truth(vec![[0.5, 0.5]; nj], vec![true; nj])])?
        }
        PredictSource::Annotations(path) => Dataset::from_annotations(&path, size, &run.crop)?,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let limbs = run.metric_config(model.config().num_joints, None, None)?.skeleton;
    let mut poses = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(32) {
        let sets: Vec<PredictionSet> = model.predict_batch(&dataset.batch_images(chunk)?)?;
        for (set, &i) in sets.iter().zip(chunk) {
            let pose = set.final_pose().clone();
            if i < max_images {
                let image = Image::from_tensor(&dataset.images[i])?;
                render_overlay(&image, &pose, &limbs, zoom).save_png(&out.join(format!("overlay_{i:06}.png")))?;
                let maps = &set.blocks.last().expect("at least one block").heatmaps;
                heatmap_mosaic(maps, zoom)?.save_png(&out.join(format!("heatmaps_{i:06}.png")))?;
            }
            poses.push(pose);
        }
    }
    let path = out.join("predictions.jsonl");
    write_predictions(&path, &poses)?;
    println!("wrote {} predictions to {}", poses.len(), path.display());
    Ok(())
}

pub fn gradcheck(run: &RunConfig, instances: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = GradcheckConfig::for_model(run.model.clone());
    cfg.instances = instances.unwrap_or(cfg.instances);
    cfg.seed = seed.unwrap_or(cfg.seed);
    if softpose::tensor::ELEMENT_TYPE != "f64" {
        eprintln!("warning: finite differences at step {} need 64-bit floats", cfg.step);
    }
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.to_table());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

