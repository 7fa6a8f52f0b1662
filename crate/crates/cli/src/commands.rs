//! One function per subcommand. Each writes its outputs into the output
//! directory and returns the one-line summary.

use std::fmt::Debug;
use std::path::Path;

use mvtn::camera::{circular_config, random_config, spherical_config};
use mvtn::dataset::{self, Dataset, Split};
use mvtn::gradcheck::{self, FixtureResult, TOLERANCE};
use mvtn::mesh::{load_obj, load_off, LoadOptions};
use mvtn::render::{render_views_values, LightMode};
use mvtn::retrieval::{self, lfda_fit};
use mvtn::train::{self, BaseConfig, Checkpoint};
use mvtn::viewdist;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};

pub enum CliError {
    Usage(String),
    /// `module` is the error type name, e.g. `TrainError`.
    Runtime { module: &'static str, variant: String, message: String },
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime { .. } => 2,
            CliError::GradcheckFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime { module, variant, message } => write!(f, "error [{module}::{variant}]: {message}"),
            CliError::GradcheckFailed(m) => write!(f, "gradcheck failed: {m}"),
        }
    }
}

/// Tags an error with its type and variant name.
fn rt<E: std::error::Error + Debug>(module: &'static str) -> impl Fn(E) -> CliError {
    move |e| {
        let dbg = format!("{e:?}");
        let variant = dbg.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or("").to_string();
        CliError::Runtime { module, variant, message: e.to_string() }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime { module: "io", variant: format!("{:?}", e.kind()), message: format!("{}: {e}", path.display()) }
}

type Result<T> = std::result::Result<T, CliError>;

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(io(&p))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    write(dir, name, s)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = || cfg.data.path.clone().ok_or_else(|| CliError::Usage(format!("--data.path is required for source {:?}", cfg.data.source)));
    match cfg.data.source {
        DataSource::Synthetic => dataset::generate_synthetic(&cfg.data.synthetic).map_err(rt("DatasetError")),
        DataSource::Dir => dataset::read_dataset(&path()?).map_err(rt("DatasetError")),
        DataSource::Modelnet => {
            let (ds, report) = dataset::import_modelnet_off(&path()?, None, LoadOptions { face_cap: cfg.data.face_cap })
                .map_err(rt("DatasetError"))?;
            let mut csv = String::from("path,reason\n");
            for (p, why) in &report.rejected {
                csv.push_str(&format!("{},{}\n", p.display(), why.replace(',', ";")));
            }
            write(&cfg.output_dir, "import_rejected.csv", csv)?;
            Ok(ds)
        }
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let p = cfg.checkpoint_path();
    dataset::load_checkpoint(&p).map_err(rt("DatasetError"))
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let ds = dataset::generate_synthetic(&cfg.data.synthetic).map_err(rt("DatasetError"))?;
    let dir = cfg.output_dir.join("dataset");
    dataset::write_dataset(&ds, &dir).map_err(rt("DatasetError"))?;
    Ok(format!(
        "gen-data: {} shapes ({} train, {} test) in {} classes -> {}",
        ds.len(),
        ds.split(Split::Train).len(),
        ds.split(Split::Test).len(),
        ds.num_classes(),
        dir.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let ck = train::train(&ds, &cfg.train).map_err(rt("TrainError"))?;
    let path = cfg.checkpoint_path();
    dataset::save_checkpoint(&ck, &path).map_err(rt("DatasetError"))?;
    write(&cfg.output_dir, "metrics.csv", ck.history.to_csv())?;
    write_json(&cfg.output_dir, "metrics.json", &ck.history)?;
    let last = ck.history.epochs.last();
    Ok(format!(
        "train: {:?} variant, {} epochs, train acc {:.4}, test acc {}, {} skipped steps -> {}",
        cfg.train.variant,
        ck.epoch,
        last.map_or(f64::NAN, |m| m.train_accuracy),
        last.and_then(|m| m.test_accuracy).map_or("n/a".into(), |a| format!("{a:.4}")),
        ck.skipped_steps,
        path.display()
    ))
}

#[derive(Serialize)]
struct EvalOutput {
    train_accuracy: Option<f64>,
    train_loss: Option<f64>,
    test_accuracy: Option<f64>,
    test_loss: Option<f64>,
}

pub fn eval(cfg: &RunConfig) -> Result<String> {
    let ck = load_checkpoint(cfg)?;
    let ds = load_dataset(cfg)?;
    let run = |split| -> Result<Option<train::Evaluation>> {
        let sub = ds.subset(split);
        if sub.is_empty() {
            return Ok(None);
        }
        train::evaluate(&ck, &sub).map(Some).map_err(rt("TrainError"))
    };
    let (tr, te) = (run(Split::Train)?, run(Split::Test)?);
    let mut csv = String::from("split,id,label,prediction\n");
    for (split, ev) in [(Split::Train, &tr), (Split::Test, &te)] {
        if let Some(ev) = ev {
            for (s, p) in ds.split(split).iter().zip(&ev.predictions) {
                csv.push_str(&format!("{},{},{},{}\n", split.dir_name(), s.id, s.label, p));
            }
        }
    }
    write(&cfg.output_dir, "predictions.csv", csv)?;
    let out = EvalOutput {
        train_accuracy: tr.as_ref().map(|e| e.accuracy),
        train_loss: tr.as_ref().map(|e| e.loss),
        test_accuracy: te.as_ref().map(|e| e.accuracy),
        test_loss: te.as_ref().map(|e| e.loss),
    };
    write_json(&cfg.output_dir, "eval.json", &out)?;
    let f = |a: Option<f64>| a.map_or("n/a".into(), |a| format!("{a:.4}"));
    Ok(format!("eval: train acc {}, test acc {}", f(out.train_accuracy), f(out.test_accuracy)))
}

pub fn robustness(cfg: &RunConfig) -> Result<String> {
    let ck = load_checkpoint(cfg)?;
    let test = load_dataset(cfg)?.subset(Split::Test);
    let report = train::robustness_eval(&ck, &test, &cfg.robustness).map_err(rt("TrainError"))?;
    write_json(&cfg.output_dir, "robustness.json", &report)?;
    let mut csv = String::from("repeat,accuracy\n");
    for (i, a) in report.accuracies.iter().enumerate() {
        csv.push_str(&format!("{i},{a}\n"));
    }
    write(&cfg.output_dir, "robustness.csv", csv)?;
    Ok(format!(
        "robustness: {:?} up to {} deg, {} repeats, accuracy {:.4} ± {:.4}",
        report.mode,
        report.max_angle_deg,
        report.accuracies.len(),
        report.mean,
        report.std
    ))
}

pub fn retrieve(cfg: &RunConfig) -> Result<String> {
    let ck = load_checkpoint(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut gallery = retrieval::extract_signatures(&ck, &ds.subset(Split::Train)).map_err(rt("RetrievalError"))?;
    let mut queries = retrieval::extract_signatures(&ck, &ds.subset(Split::Test)).map_err(rt("RetrievalError"))?;
    write(&cfg.output_dir, "signatures_train.csv", retrieval::signatures_csv(&gallery))?;
    write(&cfg.output_dir, "signatures_test.csv", retrieval::signatures_csv(&queries))?;
    let rc = &cfg.retrieval;
    let mut projection = String::from("raw");
    if let Some(r) = rc.lfda_rank {
        let feats: Vec<Vec<f64>> = gallery.iter().map(|s| s.feature.clone()).collect();
        let labels: Vec<usize> = gallery.iter().map(|s| s.label).collect();
        let model = lfda_fit(&feats, &labels, r, rc.neighbors, rc.epsilon).map_err(rt("RetrievalError"))?;
        retrieval::apply_projection(&model, &mut gallery).map_err(rt("RetrievalError"))?;
        retrieval::apply_projection(&model, &mut queries).map_err(rt("RetrievalError"))?;
        write_json(&cfg.output_dir, "lfda.json", &model)?;
        projection = format!("lfda r={r} eps={:e} residual={:.2e}", model.epsilon, model.eigen_residual());
    }
    let report = retrieval::evaluate_retrieval(&queries, &gallery, rc.ap_mode).map_err(rt("RetrievalError"))?;
    write(&cfg.output_dir, "retrieval.csv", retrieval::retrieval_csv(&report, &queries, &gallery, rc.top))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        map: f64,
        mode: retrieval::ApMode,
        projection: &'a str,
        queries: usize,
        gallery: usize,
        average_precision: Vec<f64>,
    }
    write_json(
        &cfg.output_dir,
        "retrieval.json",
        &Summary {
            map: report.map,
            mode: report.mode,
            projection: &projection,
            queries: queries.len(),
            gallery: gallery.len(),
            average_precision: report.queries.iter().map(|q| q.average_precision).collect(),
        },
    )?;
    Ok(format!("retrieve: mAP {:.4} over {} queries, {} gallery ({projection})", report.map, queries.len(), gallery.len()))
}

pub fn render(cfg: &RunConfig) -> Result<String> {
    let path = cfg.preview.mesh.clone().ok_or_else(|| CliError::Usage("--mesh is required".into()))?;
    let bytes = std::fs::read(&path).map_err(io(&path))?;
    let opts = LoadOptions { face_cap: cfg.data.face_cap };
    let is_obj = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    let mesh = if is_obj { load_obj(&bytes, opts) } else { load_off(&bytes, opts) }.map_err(rt("MeshError"))?;
    let mesh = mvtn::mesh::normalize_unit(&mesh).map_err(rt("MeshError"))?;
    let (m, d) = (cfg.preview.views, cfg.train.distance);
    let params = match cfg.preview.config {
        BaseConfig::Circular => circular_config(m, cfg.train.circular_elevation_deg, d),
        BaseConfig::Spherical => spherical_config(m, d),
        BaseConfig::Random => random_config(m, cfg.train.seed, d),
    }
    .map_err(rt("CameraError"))?;
    let images = render_views_values(&mesh, &params, &cfg.train.render, LightMode::Fixed).map_err(rt("RenderError"))?;
    let mut csv = String::from("view,azimuth,elevation,distance,file\n");
    for (k, (img, (a, e))) in images.iter().zip(params.angles()).enumerate() {
        let name = format!("view_{k:02}.ppm");
        write(&cfg.output_dir, &name, img.to_ppm())?;
        csv.push_str(&format!("{k},{a},{e},{d},{name}\n"));
    }
    write(&cfg.output_dir, "views.csv", csv)?;
    Ok(format!("render: {} {:?} views of {} ({} faces) -> {}", images.len(), cfg.preview.config, path.display(), mesh.face_count(), cfg.output_dir.display()))
}

pub fn views_dist(cfg: &RunConfig) -> Result<String> {
    let ck = load_checkpoint(cfg)?;
    let ds = load_dataset(cfg)?;
    let dist = viewdist::export_view_distribution(&ck, &ds).map_err(rt("TrainError"))?;
    write(&cfg.output_dir, "view_samples.csv", dist.samples_csv())?;
    write(&cfg.output_dir, "view_kde.csv", dist.kde_csv())?;
    Ok(format!("views-dist: {} views over {} classes", dist.samples.len(), dist.classes.len()))
}

/// Runs the fixtures; the table goes to stdout before the summary.
pub fn gradcheck(cfg: &RunConfig) -> Result<String> {
    let g = &cfg.gradcheck;
    let mut results: Vec<FixtureResult> = gradcheck::renderer_fixtures(g.fixtures, g.seed).map_err(rt("RenderError"))?;
    results.push(gradcheck::bounding_fixture(g.seed).map_err(rt("TrainError"))?);
    results.push(gradcheck::end_to_end_fixture(g.seed, g.coordinates).map_err(rt("TrainError"))?);
    let mut csv = String::from("fixture,faces,max_rel_error,passed\n");
    println!("{:<60} {:>6} {:>14}", "fixture", "faces", "max rel error");
    for r in &results {
        println!("{:<60} {:>6} {:>14.3e}", truncate(&r.name, 60), r.faces, r.max_rel_error);
        csv.push_str(&format!("{},{},{},{}\n", r.name, r.faces, r.max_rel_error, r.passed()));
    }
    write(&cfg.output_dir, "gradcheck.csv", csv)?;
    write_json(&cfg.output_dir, "gradcheck.json", &results)?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed()).count();
    let line = format!("{} fixtures, {failed} failed, worst relative error {worst:.3e} (tolerance {TOLERANCE:e})", results.len());
    if failed > 0 {
        return Err(CliError::GradcheckFailed(line));
    }
    Ok(format!("gradcheck: {line}"))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
