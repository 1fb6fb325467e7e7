//! `panosal` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, configuration or data error, 2 numeric failure during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use panosal::checkpoint::Checkpoint;
use panosal::config::{parse_size, RunConfig};
use panosal::data::{decode_image, load_dataset, resize_bilinear, save_gray_png, save_sample, synth_dataset};
use panosal::geometry::{init_relation_matrix, PriorKind};
use panosal::inspect::{channel_mosaic, render_prior, GrayMap};
use panosal::model::Model;
use panosal::selfcheck::{self, Fault, Faults};
use panosal::trainer::{evaluate_dataset, train, TrainOutput, TrainState};
use panosal::{Error, Result};

#[derive(Parser)]
#[command(name = "panosal", version, about = "Salient object detection on equirectangular panoramas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, loss.csv and config.ini into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write the metrics report as JSON.
    Eval(EvalArgs),
    /// Write saliency and edge maps of one image as 8-bit PNGs.
    Predict(PredictArgs),
    /// Generate a synthetic panorama dataset.
    MakeSynth(SynthArgs),
    /// Run the invariant, gradient and oracle suite.
    Selfcheck(SelfcheckArgs),
    /// Render the relation-matrix prior or the scale regulator output.
    InspectRm(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Saliency PNG path; the edge map goes next to it with an `_edge` suffix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HxW.
    #[arg(long, default_value = "224x448")]
    size: String,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Run only checks whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// Replace a metric with a wrong variant (mae, f-measure, e-measure, s-measure); repeatable.
    #[arg(long = "inject-fault", value_name = "METRIC")]
    faults: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, default_value = "cosine")]
    prior: String,
    /// Render the first 12 regulator output channels instead of the raw prior.
    #[arg(long)]
    after_regulator: bool,
    /// Regulator weights; a fresh initialization from the config is used otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::MakeSynth(a) => cmd_make_synth(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
        Command::InspectRm(a) => cmd_inspect_rm(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    let data = load_dataset(&a.data)?;
    let model = Model::new(cfg.model.clone())?;
    let echo = cfg.echo();
    let state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let saved = RunConfig::parse(&ck.config)?;
            if saved != cfg {
                return Err(Error::Config(format!("{} was written with a different configuration", p.display())));
            }
            ck.params.check_against(model.registry())?;
            ck.into_state()
        }
        None => TrainState::new(model.init(cfg.init_seed)?),
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.ini"), &echo)?;
    eprintln!(
        "training {} parameters on {} samples for {} steps",
        state.params.num_params(),
        data.len(),
        cfg.train.total_steps
    );
    let out = TrainOutput { dir: a.out.clone(), config_echo: echo };
    let done = train(&model, &cfg.train, &cfg.augment, &data, state, Some(&out), |r| {
        eprintln!(
            "step {:>6}  loss_sal {:.5}  loss_edge {:.5}  loss_total {:.5}  lr {:e}",
            r.step, r.loss_sal, r.loss_edge, r.loss_total, r.lr
        );
    })?;
    println!("wrote {} after {} steps", out.final_path().display(), done.step);
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let model = Model::new(cfg.model)?;
    ck.params
        .check_against(model.registry())
        .map_err(|e| Error::Checkpoint(format!("{}: parameters do not match its configuration: {e}", path.display())))?;
    Ok((model, ck))
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let report = evaluate_dataset(&model, &ck.params, &data)?;
    std::fs::write(&a.report, report.to_json() + "\n")?;
    println!(
        "images {}  mae {:.4}  maxF {:.4}  meanF {:.4}  maxE {:.4}  meanE {:.4}  S {:.4}",
        report.n_images, report.mae, report.max_f, report.mean_f, report.max_e, report.mean_e, report.s_measure
    );
    Ok(ExitCode::SUCCESS)
}

fn edge_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction");
    out.with_file_name(format!("{stem}_edge.png"))
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let bytes = std::fs::read(&a.image).map_err(|e| Error::Config(format!("{}: {e}", a.image.display())))?;
    let image = decode_image(&bytes)?;
    let (h, w) = (model.config().height, model.config().width);
    let image = resize_bilinear(&image, h, w)?.reshape(&[1, 3, h, w])?;
    let out = model.forward(&ck.params, &image)?;
    let to_vec = |t: panosal::Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_gray_png(&a.out, &to_vec(out.saliency()), h, w)?;
    let edge = edge_path(&a.out);
    save_gray_png(&edge, &to_vec(out.edge()), h, w)?;
    println!("wrote {} and {} ({h}x{w})", a.out.display(), edge.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_make_synth(a: SynthArgs) -> Result<ExitCode> {
    let (h, w) = parse_size(&a.size)?;
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    for s in synth_dataset(a.n, a.seed, h, w)? {
        save_sample(&a.out, &s)?;
    }
    println!("wrote {} samples of {h}x{w} to {}", a.n, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let faults: Faults = a.faults.iter().map(|f| f.parse::<Fault>()).collect::<Result<_>>()?;
    let outcomes = selfcheck::run(a.filter.as_deref(), &faults);
    if outcomes.is_empty() {
        return Err(Error::Config("no check matches the filter".into()));
    }
    print!("{}", selfcheck::render_table(&outcomes));
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_inspect_rm(a: InspectArgs) -> Result<ExitCode> {
    let kind: PriorKind = a.prior.parse()?;
    let map: GrayMap = if a.after_regulator {
        let (mut cfg, store) = match &a.checkpoint {
            Some(p) => {
                let (model, ck) = load_model(p)?;
                (model.config().clone(), ck.params)
            }
            None => {
                let rc = a.config.resolve()?;
                let cfg = panosal::model::ModelConfig { use_rm: true, ..rc.model };
                let store = Model::new(cfg.clone())?.init(rc.init_seed)?;
                (cfg, store)
            }
        };
        cfg.prior = kind;
        cfg.use_rm = true;
        let model = Model::new(cfg)?;
        let reg = model
            .regulator()
            .ok_or_else(|| Error::Config("the configuration injects the prior without a regulator".into()))?;
        let rm = model.relation_matrix().ok_or_else(|| Error::Config("no relation matrix".into()))?;
        store.check_against(model.registry()).map_err(|e| Error::Config(format!("regulator weights: {e}")))?;
        channel_mosaic(&reg.channel_maps(&store, rm)?)?
    } else {
        let rc = a.config.resolve()?;
        render_prior(&init_relation_matrix(rc.model.height, rc.model.width, kind)?)
    };
    save_gray_png(&a.out, &map.values, map.height, map.width)?;
    println!("wrote {} ({}x{})", a.out.display(), map.height, map.width);
    Ok(ExitCode::SUCCESS)
}
