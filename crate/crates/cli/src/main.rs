mod config;
mod rundir;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use talkmem::audio2expression::{self, A2EModel, A2ETrainState};
use talkmem::eval_harness::{self, ImageMetrics};
use talkmem::explicit_memory::{self, ExplicitMemoryBank};
use talkmem::renderer::{self, Discriminator, NrMemory, RendererModel, RendererTrainState};
use talkmem::synth_data::{self, Dataset, Image};
use talkmem::{Error, Result};

use config::RunConfig;
use rundir::{Prepared, RunDir};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "TALKMEM_OUT";

#[derive(Parser, Debug)]
#[command(name = "talkmem", version, about = "Memory-augmented talking-face pipeline on synthetic data")]
struct Cli {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Defaults to `$TALKMEM_OUT/<command>-s<seed>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override such as `experiment.a2e_train.epochs=20`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset for the seed.
    GenData,
    /// Train the audio-to-expression model.
    TrainA2e {
        #[arg(long)]
        data: PathBuf,
    },
    /// Build the explicit memory bank from the training split.
    BuildMem {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the renderer; builds a bank when none is given and one is needed.
    TrainNr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Full pipeline from audio to frames, with metrics.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        a2e: PathBuf,
        #[arg(long)]
        renderer: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
        /// Skip writing PNG frames.
        #[arg(long)]
        no_frames: bool,
    },
    /// Fine-tune both stages on a new identity and rebuild the bank.
    Adapt {
        #[arg(long)]
        a2e: PathBuf,
        #[arg(long)]
        renderer: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Frame budget such as `15s`, `30s`, `60s` or a frame count.
        #[arg(long)]
        budget: Option<String>,
    },
    /// Run the ablation plan and write the report.
    Ablate,
    /// Per-stage metrics with ground-truth conditioning.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        a2e: Option<PathBuf>,
        #[arg(long)]
        renderer: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainA2e { .. } => "train-a2e",
            Command::BuildMem { .. } => "build-mem",
            Command::TrainNr { .. } => "train-nr",
            Command::Infer { .. } => "infer",
            Command::Adapt { .. } => "adapt",
            Command::Ablate => "ablate",
            Command::Eval { .. } => "eval",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("argument: {}", config::one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.category(), config::one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.experiment.validate()?;
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{name}-s{}", cfg.seed))
    });
    let inputs = command_inputs(&cli.command);
    let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    let dir = match rundir::prepare(&out, name, &cfg, &inputs)? {
        Prepared::UpToDate(p) => {
            println!("up to date: {}", p.display());
            return Ok(());
        }
        Prepared::Fresh(d) => d,
    };
    match &cli.command {
        Command::GenData => gen_data(&cfg, &dir)?,
        Command::TrainA2e { data } => train_a2e(&cfg, &dir, data)?,
        Command::BuildMem { data } => build_mem(&cfg, &dir, data)?,
        Command::TrainNr { data, bank } => train_nr(&cfg, &dir, data, bank.as_deref())?,
        Command::Infer {
            data,
            a2e,
            renderer,
            bank,
            split,
            no_frames,
        } => infer(&cfg, &dir, data, a2e, renderer, bank.as_deref(), *split, !no_frames)?,
        Command::Adapt {
            a2e,
            renderer,
            bank,
            budget,
        } => adapt(&cfg, &dir, a2e, renderer, bank.as_deref(), budget.as_deref())?,
        Command::Ablate => ablate(&cfg, &dir)?,
        Command::Eval {
            data,
            a2e,
            renderer,
            bank,
            split,
        } => eval(&cfg, &dir, data, a2e.as_deref(), renderer.as_deref(), bank.as_deref(), *split)?,
    }
    let path = dir.finish()?;
    println!("{}", path.display());
    Ok(())
}

fn command_inputs(c: &Command) -> Vec<(&'static str, PathBuf)> {
    let mut v = Vec::new();
    let mut add = |n: &'static str, p: &Option<PathBuf>| {
        if let Some(p) = p {
            v.push((n, p.clone()));
        }
    };
    match c {
        Command::GenData | Command::Ablate => {}
        Command::TrainA2e { data } | Command::BuildMem { data } => add("data", &Some(data.clone())),
        Command::TrainNr { data, bank } => {
            add("data", &Some(data.clone()));
            add("bank", bank);
        }
        Command::Infer {
            data, a2e, renderer, bank, ..
        } => {
            add("data", &Some(data.clone()));
            add("a2e", &Some(a2e.clone()));
            add("renderer", &Some(renderer.clone()));
            add("bank", bank);
        }
        Command::Adapt { a2e, renderer, bank, .. } => {
            add("a2e", &Some(a2e.clone()));
            add("renderer", &Some(renderer.clone()));
            add("bank", bank);
        }
        Command::Eval {
            data, a2e, renderer, bank, ..
        } => {
            add("data", &Some(data.clone()));
            add("a2e", a2e);
            add("renderer", renderer);
            add("bank", bank);
        }
    }
    v
}

fn load_split(cfg: &RunConfig, data: &Path, split: Split) -> Result<Dataset> {
    let ds = synth_data::read_dataset(data)?;
    let (train, held) = cfg.experiment.data.split(&ds);
    Ok(match split {
        Split::Train => train,
        Split::Heldout => held,
        Split::All => ds,
    })
}

fn load_bank(p: Option<&Path>) -> Result<Option<ExplicitMemoryBank>> {
    p.map(explicit_memory::load_bank).transpose()
}

fn gen_data(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let e = &cfg.experiment;
    let ds = e.data.dataset(&e.synth, cfg.seed)?;
    let hash = synth_data::write_dataset(&ds, &dir.join("data"))?;
    println!("dataset {} frames, manifest {hash}", ds.len());
    Ok(())
}

fn a2e_trace_csv(trace: &[audio2expression::EpochMetrics]) -> String {
    let mut s = String::from("epoch,l_cof,l_vtx,l_reg,total\n");
    for m in trace {
        let _ = writeln!(s, "{},{},{},{},{}", m.epoch, m.l_cof, m.l_vtx, m.l_reg, m.total);
    }
    s
}

fn train_a2e(cfg: &RunConfig, dir: &RunDir, data: &Path) -> Result<()> {
    let e = &cfg.experiment;
    let train = load_split(cfg, data, Split::Train)?;
    let held = load_split(cfg, data, Split::Heldout)?;
    let run = eval_harness::run_a2e(
        e.a2e_config(cfg.seed, e.a2e.memory),
        e.a2e_train_config(cfg.seed),
        &train,
        &held,
    )?;
    run.model.save(&dir.join("a2e"))?;
    dir.write("trace.csv", &a2e_trace_csv(&run.trace))?;
    dir.write(
        "metrics.csv",
        &format!("split,frames,vertex_rmse\nheldout,{},{}\n", held.len(), run.heldout_rmse),
    )?;
    Ok(())
}

fn build_mem(cfg: &RunConfig, dir: &RunDir, data: &Path) -> Result<()> {
    let train = load_split(cfg, data, Split::Train)?;
    let (bank, report) = explicit_memory::build_explicit_memory_with_report(
        &train.vertex_patch_pool()?,
        &explicit_memory::BuildOptions::new(cfg.experiment.bank_n, cfg.seed, train.identity.tag.clone()),
    )?;
    explicit_memory::save_bank(&bank, &dir.join("bank"))?;
    talkmem::storage::write_json(&dir.join("build_report.json"), &report)?;
    Ok(())
}

fn nr_trace_csv(trace: &[renderer::NrEpochMetrics]) -> String {
    let mut s = String::from("epoch,l_rec,l_adv_nr,l_adv_d,total_nr\n");
    for m in trace {
        let _ = writeln!(s, "{},{},{},{},{}", m.epoch, m.l_rec, m.l_adv_nr, m.l_adv_d, m.total_nr);
    }
    s
}

fn train_nr(cfg: &RunConfig, dir: &RunDir, data: &Path, bank: Option<&Path>) -> Result<()> {
    let e = &cfg.experiment;
    let seed = cfg.seed;
    let train = load_split(cfg, data, Split::Train)?;
    let held = load_split(cfg, data, Split::Heldout)?;
    let rc = e.renderer_config(seed, e.renderer.memory);
    let bank = match (rc.memory, load_bank(bank)?) {
        (NrMemory::Explicit, Some(b)) => Some(b),
        (NrMemory::Explicit, None) => Some(eval_harness::build_bank(&train, e.bank_n, seed)?),
        _ => None,
    };
    let model = RendererModel::new(rc, DType::F32)?;
    let disc = Discriminator::new(e.disc_config(seed), DType::F32)?;
    let mut state = RendererTrainState::new(model, disc, e.renderer_train_config(seed));
    let trace = renderer::train_renderer(&mut state, &train, None, bank.as_ref())?;
    state.save(&dir.join("renderer"))?;
    if let Some(b) = &bank {
        explicit_memory::save_bank(b, &dir.join("bank"))?;
    }
    let m = eval_harness::evaluate_renderer(&state.model, &held, bank.as_ref())?;
    dir.write("trace.csv", &nr_trace_csv(&trace))?;
    dir.write("metrics.csv", &image_csv(&[("heldout", held.len(), None, m)]))?;
    Ok(())
}

fn fmt_metric(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

fn image_csv(rows: &[(&str, usize, Option<f64>, ImageMetrics)]) -> String {
    let mut s = String::from("split,frames,vertex_rmse,mse,psnr,feat_dist\n");
    for (name, n, v, m) in rows {
        let v = v.map(fmt_metric).unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            s,
            "{name},{n},{v},{},{},{}",
            fmt_metric(m.mse),
            fmt_metric(m.psnr),
            fmt_metric(m.feat_dist)
        );
    }
    s
}

fn load_renderer(p: &Path) -> Result<RendererTrainState> {
    RendererTrainState::load(p, DType::F32)
}

fn load_a2e(p: &Path) -> Result<A2EModel> {
    A2EModel::load(p, DType::F32).or_else(|_| Ok(A2ETrainState::load(p, DType::F32)?.model))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Heldout => "heldout",
        Split::All => "all",
    }
}

#[allow(clippy::too_many_arguments)]
fn infer(
    cfg: &RunConfig,
    dir: &RunDir,
    data: &Path,
    a2e: &Path,
    nr: &Path,
    bank: Option<&Path>,
    split: Split,
    frames: bool,
) -> Result<()> {
    let ds = load_split(cfg, data, split)?;
    let a2e = load_a2e(a2e)?;
    let nr = load_renderer(nr)?.model;
    let bank = load_bank(bank)?;
    if nr.config.memory == NrMemory::Explicit && bank.is_none() {
        return Err(Error::argument("the renderer uses explicit memory; pass --bank"));
    }
    let out = eval_harness::run_pipeline(&a2e, &nr, bank.as_ref(), &ds)?;
    if frames {
        let fdir = dir.join("frames");
        talkmem::storage::ensure_dir(&fdir)?;
        for (r, img) in ds.records.iter().zip(&out.frames) {
            write_png(&fdir.join(format!("seq{:03}_frame{:04}.png", r.sequence_id, r.frame_id)), img)?;
        }
    }
    let mut per_frame = String::from("sequence,frame");
    for k in 0..ds.config.h_c {
        let _ = write!(per_frame, ",exp{k}");
    }
    per_frame.push('\n');
    for (r, e) in ds.records.iter().zip(&out.expressions) {
        let _ = write!(per_frame, "{},{}", r.sequence_id, r.frame_id);
        for x in e {
            let _ = write!(per_frame, ",{x}");
        }
        per_frame.push('\n');
    }
    dir.write("expressions.csv", &per_frame)?;
    dir.write(
        "metrics.csv",
        &image_csv(&[(split_name(split), ds.len(), Some(out.vertex_rmse), out.image)]),
    )?;
    Ok(())
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match c {
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([px(img[[y, x, 0]]), px(img[[y, x, 1]]), px(img[[y, x, 2]])])
        })
        .save(path),
        _ => image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(img[[y as usize, x as usize, 0]])]))
            .save(path),
    };
    result.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

fn adapt(
    cfg: &RunConfig,
    dir: &RunDir,
    a2e: &Path,
    nr: &Path,
    bank: Option<&Path>,
    budget: Option<&str>,
) -> Result<()> {
    let mut acfg = cfg.adapt.clone();
    if let Some(b) = budget {
        acfg.budget_frames = eval_harness::parse_budget(b)?;
    }
    let a2e = load_a2e(a2e)?;
    let state = load_renderer(nr)?;
    let bank = load_bank(bank)?;
    if state.model.config.memory == NrMemory::Explicit && bank.is_none() {
        return Err(Error::argument("the renderer uses explicit memory; pass --bank"));
    }
    let (small, held) = acfg.data(&cfg.experiment, cfg.seed)?;
    synth_data::write_dataset(&small, &dir.join("adapt_data"))?;
    let run = eval_harness::adapt_models(
        a2e,
        state.model,
        state.disc,
        bank.as_ref(),
        &small,
        &held,
        &acfg,
        cfg.experiment.bank_n,
        cfg.seed,
    )?;
    run.a2e.save(&dir.join("a2e"))?;
    run.renderer.save(&dir.join("renderer"))?;
    if let Some(b) = &run.bank {
        explicit_memory::save_bank(b, &dir.join("bank"))?;
    }
    let mut s = String::from("model,frames,vertex_rmse,mse,psnr,feat_dist\n");
    for (name, m) in [("pretrained", run.before), ("adapted", run.after)] {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{}",
            small.len(),
            m.vertex_rmse,
            fmt_metric(m.mse),
            fmt_metric(eval_harness::psnr_from_mse(m.mse)),
            fmt_metric(m.feat_dist)
        );
    }
    dir.write("metrics.csv", &s)?;
    Ok(())
}

fn ablate(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let report = eval_harness::run_ablation(&cfg.ablation, &cfg.experiment, &dir.path)?;
    print!("{}", report.markdown());
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    dir: &RunDir,
    data: &Path,
    a2e: Option<&Path>,
    nr: Option<&Path>,
    bank: Option<&Path>,
    split: Split,
) -> Result<()> {
    if a2e.is_none() && nr.is_none() {
        return Err(Error::argument("pass --a2e, --renderer or both"));
    }
    let ds = load_split(cfg, data, split)?;
    let v = match a2e {
        Some(p) => Some(audio2expression::heldout_vertex_rmse(&load_a2e(p)?, &ds)?),
        None => None,
    };
    let mut s = String::from("split,frames,vertex_rmse,mse,psnr,feat_dist\n");
    match nr {
        Some(p) => {
            let m = eval_harness::evaluate_renderer(&load_renderer(p)?.model, &ds, load_bank(bank)?.as_ref())?;
            s = image_csv(&[(split_name(split), ds.len(), v, m)]);
        }
        None => {
            let _ = writeln!(s, "{},{},{},NA,NA,NA", split_name(split), ds.len(), v.map(fmt_metric).unwrap_or_default());
        }
    }
    dir.write("metrics.csv", &s)?;
    Ok(())
}
