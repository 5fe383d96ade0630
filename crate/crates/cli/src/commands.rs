//! Subcommand implementations. Each returns the JSON report printed on
//! standard output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use paedid::addressing::{deep_image_prior, PriorResult};
use paedid::bank::{
    build_agg_bank, build_raw_bank, coreset_subsample, load_bank, save_bank, AggBank, CoresetConfig, RawBank,
};
use paedid::decomposition::{
    binarize, decompose as solve, decompose_noisy, defect_magnitude, magnitude_image, residual_segmentation,
};
use paedid::eval::{dice, pixel_auroc, tune_parameters, Annotated, TuneGrid, TunePipeline};
use paedid::image_io::{load_image, save_image, save_mask_png};
use paedid::nn::{load_model, save_model, train_autoencoder, Model};
use paedid::synth::{gen_corpus, load_corpus};
use paedid::tensor::{read_tensor, write_tensor};
use paedid::{par, Error, Image, Mask, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::Mode;

/// PNG files of a directory sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Clean images of a corpus (`train/`) or of a plain image directory.
fn load_clean_images(data: &Path) -> Result<Vec<Image>> {
    let train = data.join("train");
    let dir = if train.is_dir() { train } else { data.to_path_buf() };
    let paths = list_pngs(&dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG images in {}", dir.display())));
    }
    let images = par::map_slice(&paths, |p| load_image(p))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let shape = images[0].shape();
    if let Some((p, img)) = paths.iter().zip(&images).find(|(_, i)| i.shape() != shape) {
        return Err(Error::Shape(format!(
            "{} is {:?}, expected {:?}",
            p.display(),
            img.shape(),
            shape
        )));
    }
    Ok(images)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path, n_train: Option<usize>, n_test: Option<usize>) -> Result<Value> {
    let n_train = n_train.unwrap_or(cfg.data.n_train);
    let n_test = n_test.unwrap_or(cfg.data.n_test);
    let manifest = gen_corpus(&cfg.data.synth(), n_train, n_test, out)?;
    log::info!(
        "wrote {n_train} clean and {n_test} defective images to {}",
        out.display()
    );
    Ok(serde_json::to_value(manifest).expect("manifest serializes"))
}

/// Loss CSV written next to a checkpoint.
pub fn loss_csv_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Value> {
    let images = load_clean_images(data)?;
    let arch = cfg.arch.resolve(images[0].shape())?;
    log::info!(
        "training {:?} on {} images for {} epochs",
        arch.stages,
        images.len(),
        cfg.train.epochs
    );
    let outcome = train_autoencoder(&images, &cfg.train, &arch)?;
    create_parent(out)?;
    save_model(&outcome.model, out)?;
    let csv: String = outcome
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{},{l}\n", i + 1))
        .collect();
    write_file(&loss_csv_path(out), csv.as_bytes())?;
    Ok(json!({
        "images": images.len(),
        "epochs": cfg.train.epochs,
        "parameters": outcome.model.num_params(),
        "final_loss": outcome.loss_trace.last(),
    }))
}

fn check_images_fit(model: &Model, images: &[Image]) -> Result<()> {
    let a = model.arch();
    let want = (a.height, a.width, a.channels);
    match images.iter().find(|i| i.shape() != want) {
        Some(img) => Err(Error::Shape(format!(
            "image {:?} does not match model input {:?}",
            img.shape(),
            want
        ))),
        None => Ok(()),
    }
}

pub fn build_bank(
    cfg: &PipelineConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    coreset: Option<usize>,
) -> Result<Value> {
    let model = load_model(model)?;
    let images = load_clean_images(data)?;
    check_images_fit(&model, &images)?;
    let raw = build_raw_bank(&model, &images)?;
    let agg = build_agg_bank(&raw, cfg.addressing.l)?;
    let full_rows = raw.rows();
    let reduce = match (coreset, &cfg.coreset) {
        (Some(n), Some(c)) => Some(CoresetConfig { size: n, ..c.clone() }),
        (Some(n), None) => Some(CoresetConfig::new(n, cfg.train.seed)),
        (None, c) => c.clone(),
    };
    let (raw, agg) = match &reduce {
        Some(c) => {
            let (agg, raw, _) = coreset_subsample(&agg, &raw, c)?;
            (raw, agg)
        }
        None => (raw, agg),
    };
    create_parent(out)?;
    save_bank(&raw, &agg, out)?;
    let d = raw.dims;
    log::info!(
        "bank with {} of {full_rows} rows written to {}",
        raw.rows(),
        out.display()
    );
    Ok(json!({
        "rows": raw.rows(),
        "full_rows": full_rows,
        "images": d.images,
        "latent": [d.p1, d.p2, d.p3],
        "l": agg.l,
        "coreset": reduce.is_some(),
    }))
}

fn check_bank_fits(model: &Model, raw: &RawBank) -> Result<()> {
    let (p1, p2, p3) = model.arch().latent_dims();
    let d = raw.dims;
    if (d.p1, d.p2, d.p3) != (p1, p2, p3) {
        return Err(Error::Shape(format!(
            "bank latent {}x{}x{} does not match model latent {p1}x{p2}x{p3}",
            d.p1, d.p2, d.p3
        )));
    }
    Ok(())
}

/// Output file locations for one decomposed image.
struct Outputs {
    prior: PathBuf,
    background: PathBuf,
    defect: PathBuf,
    magnitude: PathBuf,
    mask: PathBuf,
    score: PathBuf,
    objective: PathBuf,
}

impl Outputs {
    /// `PREFIX.prior.png`, `PREFIX.s.ptf`, ...
    fn prefixed(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Outputs {
            prior: with(".prior.png"),
            background: with(".background.png"),
            defect: with(".s.ptf"),
            magnitude: with(".magnitude.png"),
            mask: with(".mask.png"),
            score: with(".score.png"),
            objective: with(".objective.csv"),
        }
    }

    /// `DIR/prior/NAME.png`, `DIR/s/NAME.ptf`, ...
    fn in_dir(dir: &Path, name: &str) -> Self {
        let at = |sub: &str, ext: &str| dir.join(sub).join(format!("{name}.{ext}"));
        Outputs {
            prior: at("prior", "png"),
            background: at("background", "png"),
            defect: at("s", "ptf"),
            magnitude: at("magnitude", "png"),
            mask: at("mask", "png"),
            score: at("score", "png"),
            objective: at("objective", "csv"),
        }
    }

    fn create_dirs(&self) -> Result<()> {
        for p in [
            &self.prior,
            &self.background,
            &self.defect,
            &self.magnitude,
            &self.mask,
            &self.score,
            &self.objective,
        ] {
            create_parent(p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct DecomposeSummary {
    image: String,
    replaced: usize,
    final_objective: Option<f64>,
    mask_pixels: usize,
}

/// Loaded model, bank and settings shared by every image of one run.
struct Decomposer<'a> {
    cfg: &'a PipelineConfig,
    model: Model,
    raw: RawBank,
    agg: AggBank,
    mode: Mode,
    threshold: f64,
}

impl Decomposer<'_> {
    fn run(&self, path: &Path, out: &Outputs) -> Result<DecomposeSummary> {
        let image = load_image(path)?;
        check_images_fit(&self.model, std::slice::from_ref(&image))?;
        let PriorResult { prior, score, .. } =
            deep_image_prior(&self.model, &self.raw, &self.agg, &image, &self.cfg.addressing.params())?;
        let (background, defect, objective) = match self.mode {
            Mode::Residual => (prior.clone(), residual_segmentation(&image, &prior)?, Vec::new()),
            Mode::Paedid | Mode::Noisy => {
                let r = if self.mode == Mode::Paedid {
                    solve(&image, &prior, &self.cfg.decomposition)?
                } else {
                    decompose_noisy(&image, &prior, &self.cfg.decomposition)?
                };
                (r.background, r.defect, r.objective)
            }
        };
        let mask = binarize(&defect, self.threshold)?;
        out.create_dirs()?;
        save_image(&prior, &out.prior)?;
        save_image(&background, &out.background)?;
        write_tensor(&defect.to_f32(), &out.defect)?;
        save_image(&magnitude_image(&defect)?, &out.magnitude)?;
        save_mask_png(mask.data(), mask.height(), mask.width(), &out.mask)?;
        save_image(&score.heat_image(image.height(), image.width())?, &out.score)?;
        let csv: String = objective
            .iter()
            .enumerate()
            .map(|(i, f)| format!("{i},{f}\n"))
            .collect();
        write_file(&out.objective, csv.as_bytes())?;
        Ok(DecomposeSummary {
            image: path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            replaced: score.replaced(),
            final_objective: objective.last().copied(),
            mask_pixels: mask.count(),
        })
    }
}

pub fn decompose(
    cfg: &PipelineConfig,
    model: &Path,
    bank: &Path,
    image: &Path,
    out: &Path,
    mode: Mode,
    threshold: Option<f64>,
) -> Result<Value> {
    if mode == Mode::Noisy && cfg.decomposition.lambda2.is_none() {
        return Err(Error::InvalidArgument(
            "noisy mode needs decomposition.lambda2 in the config".into(),
        ));
    }
    let threshold = threshold.unwrap_or(cfg.threshold());
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let model = load_model(model)?;
    let (raw, agg) = load_bank(bank)?;
    check_bank_fits(&model, &raw)?;
    let job = Decomposer {
        cfg,
        model,
        raw,
        agg,
        mode,
        threshold,
    };
    if image.is_dir() {
        let paths = list_pngs(image)?;
        let summaries = par::map_slice(&paths, |p| job.run(p, &Outputs::in_dir(out, &stem(p))))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::to_value(summaries).expect("summary serializes"))
    } else {
        let s = job.run(image, &Outputs::prefixed(out))?;
        Ok(serde_json::to_value(s).expect("summary serializes"))
    }
}

#[derive(Debug, Serialize)]
struct ImageScore {
    name: String,
    dice: f64,
    auroc: Option<f64>,
}

pub fn eval(pred: &Path, truth: &Path, scores: Option<&Path>) -> Result<Value> {
    let preds = list_pngs(pred)?;
    let truths = list_pngs(truth)?;
    let names: Vec<String> = preds.iter().map(|p| stem(p)).collect();
    let truth_names: Vec<String> = truths.iter().map(|p| stem(p)).collect();
    if names != truth_names {
        let missing: Vec<&String> = names
            .iter()
            .filter(|n| !truth_names.contains(n))
            .chain(truth_names.iter().filter(|n| !names.contains(n)))
            .collect();
        return Err(Error::InvalidArgument(format!("unpaired masks: {missing:?}")));
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument("no masks to evaluate".into()));
    }
    let rows = par::map_range(names.len(), |i| -> Result<ImageScore> {
        let p = Mask::from_image(&load_image(&preds[i])?)?;
        let t = Mask::from_image(&load_image(&truths[i])?)?;
        let d = dice(&p, &t)?;
        let auroc = match scores {
            Some(dir) => {
                let s = read_tensor(dir.join(format!("{}.ptf", names[i])))?;
                let m = defect_magnitude(&s.to_f64())?;
                match pixel_auroc(&m, &t) {
                    Ok(a) => Some(a),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                }
            }
            None => None,
        };
        Ok(ImageScore {
            name: names[i].clone(),
            dice: d,
            auroc,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.dice).sum::<f64>() / n;
    let std = (rows.iter().map(|r| (r.dice - mean).powi(2)).sum::<f64>() / n).sqrt();
    let aurocs: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    let auroc_mean = (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64);
    Ok(json!({
        "dice_mean": mean,
        "dice_std": std,
        "auroc_mean": auroc_mean,
        "per_image": rows,
    }))
}

pub fn tune(cfg: &PipelineConfig, data: &Path, grid: &Path, model: &Path, bank: &Path) -> Result<Value> {
    let text = fs::read_to_string(grid).map_err(|e| Error::io(grid, e))?;
    let grid: TuneGrid =
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", grid.display())))?;
    grid.validate()?;
    let model = load_model(model)?;
    let (raw, bank_agg) = load_bank(bank)?;
    check_bank_fits(&model, &raw)?;
    let corpus = load_corpus(data)?;
    check_images_fit(&model, &corpus.test.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let mut aggs = Vec::new();
    for &l in &grid.l {
        if l == bank_agg.l {
            aggs.push(bank_agg.clone());
        } else {
            aggs.push(build_agg_bank(&raw, l)?);
        }
    }
    let samples: Vec<Annotated> = corpus
        .test
        .iter()
        .map(|s| Annotated {
            image: &s.image,
            defect: &s.truth,
        })
        .collect();
    let pipe = TunePipeline {
        model: &model,
        raw: &raw,
        aggs: &aggs,
        aligned: cfg.addressing.aligned,
        decomp: cfg.decomposition,
    };
    let outcome = tune_parameters(&samples, &grid, &pipe)?;
    Ok(serde_json::to_value(outcome).expect("tuning outcome serializes"))
}
