//! Subcommand implementations. Every artifact is written under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use part_core::conv_equiv::{equivalence_gap, ConvKernel, ConvSpec};
use part_core::data::{generate_dataset, load_dataset, save_pgm, Dataset, Image, Sample, SynthSpec};
use part_core::feature::{FeatureMap, Grid};
use part_core::model::{evaluate, grad_cam, train, EpochMetrics, PartModel};
use part_core::tensor::{load_checkpoint, save_checkpoint, Graph, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARTS_FILE: &str = "parts.csv";
pub const CAM_PGM: &str = "cam.pgm";
pub const CAM_CSV: &str = "cam.csv";
pub const EQUIV_FILE: &str = "equiv.csv";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error("{0}")]
    Data(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingCheckpoint(_) => 3,
            Self::Io { .. } => 4,
            Self::Model(_) | Self::Data(_) => 1,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

/// Training and test split from the configured source.
pub fn load_data(settings: &Settings) -> Result<Dataset, RunError> {
    match &settings.data_dir {
        Some(dir) => {
            let load = |sub: &str| -> Result<Vec<Sample>, RunError> {
                load_dataset(&dir.join(sub)).map_err(|e| match e {
                    part_core::data::DatasetError::Io(source) => {
                        RunError::Io { context: format!("reading {}", dir.join(sub).display()), source }
                    }
                    other => RunError::Data(other.to_string()),
                })
            };
            let data = Dataset { train: load("train")?, test: load("test")? };
            let (w, h) = settings.model.image;
            let bad = data.train.iter().chain(&data.test).find(|s| {
                s.image.width != w || s.image.height != h || s.label >= settings.model.classes
            });
            if let Some(s) = bad {
                return Err(RunError::Data(format!(
                    "sample {}x{} label {} does not match data.width/height/classes",
                    s.image.width, s.image.height, s.label
                )));
            }
            Ok(data)
        }
        None => {
            let spec = SynthSpec { seed: settings.seeds.data, ..settings.data.clone() };
            generate_dataset(&spec).map_err(|e| RunError::Data(e.to_string()))
        }
    }
}

pub fn build_model(settings: &Settings) -> Result<PartModel, RunError> {
    Ok(PartModel::seeded(settings.model.clone(), settings.seeds.init)?)
}

fn checkpoint_path(settings: &Settings, out: &Path) -> PathBuf {
    settings.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

/// Model initialised from settings, then overwritten from the checkpoint.
pub fn restore_model(settings: &Settings, out: &Path) -> Result<PartModel, RunError> {
    let path = checkpoint_path(settings, out);
    if !path.is_file() {
        return Err(RunError::MissingCheckpoint(path));
    }
    let mut model = build_model(settings)?;
    load_checkpoint(&path, &mut model.store).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData => RunError::Data(format!("{}: {e}", path.display())),
        _ => RunError::Io { context: format!("reading {}", path.display()), source: e },
    })?;
    Ok(model)
}

/// `epoch,loss,top1` rows.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,top1\n");
    for m in history {
        writeln!(s, "{},{},{}", m.epoch, m.loss, m.top1).unwrap();
    }
    s
}

fn test_sample(settings: &Settings, data: &Dataset) -> Result<Sample, RunError> {
    data.test.get(settings.sample).cloned().ok_or_else(|| {
        RunError::Data(format!("sample {} out of range ({} test samples)", settings.sample, data.test.len()))
    })
}

pub fn cmd_train(settings: &Settings, out: &Path) -> Result<Vec<EpochMetrics>, RunError> {
    let data = load_data(settings)?;
    let mut model = build_model(settings)?;
    let cfg = part_core::model::TrainConfig { seed: settings.seeds.train, ..settings.train.clone() };
    let metrics_path = out.join(METRICS_FILE);
    let mut history = Vec::new();
    let mut write_error = None;
    let result = train(&mut model, &data.train, &data.test, &cfg, |m| {
        history.push(*m);
        if write_error.is_none() {
            write_error = write_file(&metrics_path, &metrics_csv(&history)).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    write_file(&metrics_path, &metrics_csv(&result))?;
    let ckpt = checkpoint_path(settings, out);
    save_checkpoint(&ckpt, &model.store).map_err(io_err(format!("writing {}", ckpt.display())))?;
    if let Some(last) = result.last() {
        println!("epoch={} loss={} top1={}", last.epoch, last.loss, last.top1);
    }
    Ok(result)
}

pub fn cmd_eval(settings: &Settings, out: &Path) -> Result<f64, RunError> {
    let model = restore_model(settings, out)?;
    let data = load_data(settings)?;
    let top1 = evaluate(&model, &data.test)?;
    println!("top1={top1}");
    Ok(top1)
}

/// Mask as a grid-sized PGM, 1 inside.
fn mask_image(grid: Grid, mask: &[bool]) -> Image {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Image::from_data(grid.width, grid.height, 1, data).expect("mask matches grid")
}

pub fn cmd_discover(settings: &Settings, out: &Path) -> Result<usize, RunError> {
    let model = restore_model(settings, out)?;
    let data = load_data(settings)?;
    let sample = test_sample(settings, &data)?;
    let mut g = Graph::new(&model.store);
    let feats = model.backbone_forward(&mut g, &sample.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seeds.discover);
    let set = model.discover(g.tape.value(feats.xp), feats.grid, &mut rng)?;
    let mut csv = String::from("part_index,source_channel,eta,row_lo,col_lo,row_hi,col_hi\n");
    for (i, p) in set.parts.iter().enumerate() {
        let b = p.bbox;
        writeln!(csv, "{i},{},{},{},{},{},{}", p.source_channel, p.eta, b.row_lo, b.col_lo, b.row_hi, b.col_hi).unwrap();
        let path = out.join(format!("part{i}.pgm"));
        save_pgm(&path, &mask_image(p.grid, &p.mask)).map_err(|e| pnm_err(&path, e))?;
    }
    write_file(&out.join(PARTS_FILE), &csv)?;
    log::info!("{} parts ({:?}) after {} passes", set.parts.len(), set.status, set.passes);
    Ok(set.parts.len())
}

fn pnm_err(path: &Path, e: part_core::data::PnmError) -> RunError {
    match e {
        part_core::data::PnmError::Io(source) => RunError::Io { context: format!("writing {}", path.display()), source },
        other => RunError::Data(other.to_string()),
    }
}

pub fn cmd_cam(settings: &Settings, out: &Path) -> Result<usize, RunError> {
    let model = restore_model(settings, out)?;
    let data = load_data(settings)?;
    let sample = test_sample(settings, &data)?;
    let class = settings.cam_class.unwrap_or(sample.label);
    let map = grad_cam(&model, &sample.image, class)?;
    let grid = map.grid;
    let img = Image::from_data(grid.width, grid.height, 1, map.values.clone()).expect("heatmap matches grid");
    let pgm = out.join(CAM_PGM);
    save_pgm(&pgm, &img).map_err(|e| pnm_err(&pgm, e))?;
    let mut csv = String::from("row,col,raw,value\n");
    for row in 0..grid.height {
        for col in 0..grid.width {
            let i = row * grid.width + col;
            writeln!(csv, "{row},{col},{},{}", map.raw[i], map.values[i]).unwrap();
        }
    }
    write_file(&out.join(CAM_CSV), &csv)?;
    Ok(class)
}

/// Gap between the constructed attention layer and the reference
/// convolution on a random input, for each configured α.
pub fn equiv_sweep(settings: &Settings) -> Result<Vec<(f64, f64)>, RunError> {
    let e = &settings.equiv;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seeds.equiv);
    let grid = Grid::new(e.width, e.height);
    let x = FeatureMap::new(grid, e.channels, (0..grid.pixels() * e.channels).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let n = e.kernel * e.kernel * e.channels * e.channels;
    let kernel = ConvKernel::new(e.kernel, e.channels, e.channels, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let bias: Vec<f64> = (0..e.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    e.alphas
        .iter()
        .map(|&a| Ok((a, equivalence_gap(&x, &kernel, &bias, ConvSpec::new(a))?)))
        .collect()
}

pub fn cmd_equiv(settings: &Settings, out: &Path) -> Result<Vec<(f64, f64)>, RunError> {
    let rows = equiv_sweep(settings)?;
    let mut csv = String::from("alpha,gap\n");
    for (a, gap) in &rows {
        writeln!(csv, "{a},{gap:e}").unwrap();
    }
    write_file(&out.join(EQUIV_FILE), &csv)?;
    print!("{csv}");
    Ok(rows)
}
