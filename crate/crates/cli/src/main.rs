use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use cosf_core::config::{AblationMode, PriorAlignment, TrainConfig};
use cosf_core::io::{self, Axis, Window};
use cosf_core::networks::{CoarseDirNet, FineDirNet, SrDiscriminator, SrGenerator};
use cosf_core::phantom::{generate, Phantom, PhantomSpec};
use cosf_core::pipeline::{
    self, coarse_pairs, evaluate_pairs, joint_finetune, model_path, pretrain_coarse, pretrain_sr,
    summarize, write_metrics_csv, Method, ModelSet, RegisterOptions, SliceSet, TrainLog,
    COARSE_FILE, DISCRIMINATOR_FILE, FINE_FILE, GENERATOR_FILE,
};
use cosf_core::selftest;

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(
    name = "cosf",
    version,
    about = "Coarse, super-resolution and fine registration of 4D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic breathing phantom with its ground truth.
    Phantom {
        /// Phantom spec JSON; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Derive a distinct subject from the spec.
        #[arg(long)]
        subject: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Register a moving phase to a fixed phase and write every intermediate.
    Register {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        mode: AblationMode,
        #[arg(long, value_enum, default_value = "coarse")]
        prior_alignment: AlignArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve one low-resolution volume.
    Enhance {
        #[arg(long)]
        models: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Use the jointly tuned generator of this mode instead of the pretrained one.
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every phase pair of a phantom and write the metrics table.
    Evaluate {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Method to score (repeatable); defaults to the standard comparison set.
        #[arg(long = "mode")]
        methods: Vec<Method>,
        #[arg(long, env = "COSF_THREADS", default_value_t = 1)]
        threads: usize,
        /// Summary JSON path; defaults to the CSV path with a `.summary.json` suffix.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one slice of a volume as a 16-bit PGM image.
    ExportSlice {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 0.4)]
        center: f64,
        #[arg(long, default_value_t = 0.8)]
        width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Coarse,
    Sr,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Coarse,
    Identity,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Phantom directory (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Model directory the checkpoints are written to.
    #[arg(long)]
    out: PathBuf,
    /// Joint stage only; defaults to the config's joint_mode.
    #[arg(long)]
    mode: Option<AblationMode>,
    /// Joint stage only: where the pretrained checkpoints live (default: --out).
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    tool_version: &'static str,
    command: String,
    args: Vec<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file of a directory (or the file itself), sorted.
fn files_of(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = e?.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn hashes(paths: &[PathBuf], relative_to: Option<&Path>) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for p in paths {
        for f in files_of(p)? {
            let shown = relative_to
                .and_then(|r| f.strip_prefix(r).ok())
                .unwrap_or(&f);
            out.push(FileHash {
                path: shown.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
    }
    Ok(out)
}

struct Run {
    command: String,
    config: Option<TrainConfig>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes the manifest into `dir`, or next to a single output file.
    fn finish(self, manifest_path: &Path) -> Result<()> {
        let base = manifest_path.parent().map(Path::to_path_buf);
        let m = RunManifest {
            schema_version: 1,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config_sha256: self
                .config
                .as_ref()
                .map(|c| hex::encode(Sha256::digest(c.to_json().as_bytes()))),
            seed: self.config.as_ref().map(|c| c.seed),
            inputs: hashes(&self.inputs, None)?,
            outputs: hashes(&self.outputs, base.as_deref())?,
        };
        std::fs::write(manifest_path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", manifest_path.display()))
    }
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv()?).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn load_phantoms(dirs: &[PathBuf]) -> Result<Vec<Phantom>> {
    dirs.iter()
        .map(|d| Phantom::load(d).with_context(|| format!("loading phantom {}", d.display())))
        .collect()
}

fn cmd_phantom(spec: Option<&Path>, subject: Option<u64>, out: &Path) -> Result<()> {
    let mut s = match spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(k) = subject {
        s = s.subject(k);
    }
    let ph = generate(&s)?;
    ph.save(out)?;
    if Phantom::load(out)? != ph {
        bail!(
            "phantom in {} does not read back identically",
            out.display()
        );
    }
    let mut run = Run::new("phantom");
    run.inputs.extend(spec.map(Path::to_path_buf));
    run.outputs.push(out.to_path_buf());
    run.finish(&out.join(RUN_MANIFEST))
}

fn cmd_train(stage: Stage, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let phantoms = load_phantoms(&a.data)?;
    create_dir(&a.out)?;
    let mut run = Run::new("");
    run.inputs.extend(a.config.iter().cloned());
    run.inputs.extend(a.data.iter().cloned());
    let manifest = match stage {
        Stage::Coarse => {
            run.command = "train coarse".into();
            let (net, log) = pretrain_coarse(&cfg, &coarse_pairs(&phantoms, &cfg)?)?;
            let ckpt = model_path(&a.out, None, COARSE_FILE);
            net.save(&ckpt)?;
            if CoarseDirNet::load(&ckpt)?.params != net.params {
                bail!("{} does not read back identically", ckpt.display());
            }
            let csv = a.out.join("coarse_log.csv");
            write_log(&log, &csv)?;
            run.outputs.extend([ckpt, csv]);
            a.out.join(format!("coarse_{RUN_MANIFEST}"))
        }
        Stage::Sr => {
            run.command = "train sr".into();
            let (gen, disc, log) = pretrain_sr(&cfg, &SliceSet::from_phantoms(&phantoms)?)?;
            let g = model_path(&a.out, None, GENERATOR_FILE);
            let d = model_path(&a.out, None, DISCRIMINATOR_FILE);
            gen.save(&g)?;
            disc.save(&d)?;
            if SrGenerator::load(&g)?.params != gen.params
                || SrDiscriminator::load(&d)?.params != disc.params
            {
                bail!(
                    "SR checkpoints in {} do not read back identically",
                    a.out.display()
                );
            }
            let csv = a.out.join("sr_log.csv");
            write_log(&log, &csv)?;
            run.outputs.extend([g, d, csv]);
            a.out.join(format!("sr_{RUN_MANIFEST}"))
        }
        Stage::Joint => {
            let mode = a.mode.unwrap_or(cfg.joint_mode);
            run.command = format!("train joint {mode}");
            let src = a.pretrained.as_deref().unwrap_or(&a.out);
            let (coarse, generator) = ModelSet::pretrained(src, mode)?;
            if src != a.out {
                // the output directory must hold the pretrained coarse network used for prior alignment
                for f in [COARSE_FILE, GENERATOR_FILE] {
                    let from = model_path(src, None, f);
                    if from.exists() {
                        std::fs::copy(&from, model_path(&a.out, None, f))
                            .with_context(|| format!("copying {}", from.display()))?;
                    }
                }
            }
            let discriminator = if mode.uses_sr() && !cfg.freeze_discriminator {
                let p = model_path(src, None, DISCRIMINATOR_FILE);
                if !p.exists() {
                    bail!(
                        "missing model: an unfrozen discriminator needs {}",
                        p.display()
                    );
                }
                Some(SrDiscriminator::load(&p)?)
            } else {
                None
            };
            let (nets, log) = joint_finetune(
                &cfg,
                mode,
                &coarse,
                generator.as_ref(),
                discriminator.as_ref(),
                &phantoms,
            )?;
            let dir = a.out.join(mode.as_str());
            create_dir(&dir)?;
            let c = model_path(&a.out, Some(mode), COARSE_FILE);
            let f = model_path(&a.out, Some(mode), FINE_FILE);
            nets.coarse.save(&c)?;
            nets.fine.save(&f)?;
            if CoarseDirNet::load(&c)?.params != nets.coarse.params
                || FineDirNet::load(&f)?.params != nets.fine.params
            {
                bail!(
                    "joint checkpoints in {} do not read back identically",
                    dir.display()
                );
            }
            run.outputs.extend([c, f]);
            if let Some(g) = &nets.generator {
                let p = model_path(&a.out, Some(mode), GENERATOR_FILE);
                g.save(&p)?;
                if SrGenerator::load(&p)?.params != g.params {
                    bail!("{} does not read back identically", p.display());
                }
                run.outputs.push(p);
            }
            if let Some(d) = &nets.discriminator {
                let p = model_path(&a.out, Some(mode), DISCRIMINATOR_FILE);
                d.save(&p)?;
                if SrDiscriminator::load(&p)?.params != d.params {
                    bail!("{} does not read back identically", p.display());
                }
                run.outputs.push(p);
            }
            let csv = dir.join("joint_log.csv");
            write_log(&log, &csv)?;
            run.outputs.push(csv);
            ModelSet::load(&a.out, mode)?;
            dir.join(RUN_MANIFEST)
        }
    };
    run.config = Some(cfg);
    run.finish(&manifest)
}

fn cmd_register(
    models: &Path,
    moving: &Path,
    fixed: &Path,
    prior: &Path,
    mode: AblationMode,
    align: AlignArg,
    out: &Path,
) -> Result<()> {
    let set = ModelSet::load(models, mode)?;
    let opts = RegisterOptions {
        prior_alignment: match align {
            AlignArg::Coarse => PriorAlignment::Coarse,
            AlignArg::Identity => PriorAlignment::Identity,
        },
        linear_upsampling: false,
    };
    let bundle = pipeline::register(
        &set,
        &io::read_volume(moving)?,
        &io::read_volume(fixed)?,
        &io::read_volume(prior)?,
        mode,
        opts,
    )?;
    create_dir(out)?;
    let written = bundle.save(out)?;
    for p in &written {
        if p.extension().is_some_and(|e| e == "mvol") {
            io::read_volume(p)?;
        } else {
            io::read_dvf(p)?;
        }
    }
    let mut run = Run::new(format!("register {mode}"));
    run.inputs
        .extend([moving, fixed, prior].map(Path::to_path_buf));
    run.outputs.push(out.to_path_buf());
    run.finish(&out.join(RUN_MANIFEST))
}

fn cmd_enhance(models: &Path, input: &Path, mode: Option<AblationMode>, out: &Path) -> Result<()> {
    let ckpt = match mode {
        Some(m) if m.uses_sr() => model_path(models, Some(m), GENERATOR_FILE),
        Some(m) => bail!("mode {m} has no generator"),
        None => model_path(models, None, GENERATOR_FILE),
    };
    let gen = SrGenerator::load(&ckpt)?;
    let v = gen.enhance_volume(&io::read_volume(input)?)?;
    io::write_volume(&v, out)?;
    if io::read_volume(out)? != v {
        bail!("{} does not read back identically", out.display());
    }
    let mut run = Run::new("enhance");
    run.inputs.extend([ckpt, input.to_path_buf()]);
    run.outputs
        .extend([out.to_path_buf(), io::payload_path(out)]);
    run.finish(&manifest_beside(out))
}

const DEFAULT_METHODS: [Method; 5] = [
    Method::Identity,
    Method::Mode(AblationMode::CoarseOnly),
    Method::Mode(AblationMode::CoarseFine),
    Method::Mode(AblationMode::CosfFull),
    Method::TrilinearSrBaseline,
];

fn cmd_evaluate(
    models: Option<&Path>,
    data: &Path,
    methods: &[Method],
    threads: usize,
    summary: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let methods = if methods.is_empty() {
        &DEFAULT_METHODS[..]
    } else {
        methods
    };
    let phantom = Phantom::load(data)?;
    let mut sets = Vec::new();
    for &m in methods {
        let set = match m.models_mode() {
            None => None,
            Some(mode) => {
                let dir = models.with_context(|| format!("method {m} needs --models"))?;
                Some(ModelSet::load(dir, mode)?)
            }
        };
        sets.push((m, set));
    }
    let rows = evaluate_pairs(&phantom, &sets, threads)?;
    write_metrics_csv(&rows, out)?;
    let text =
        std::fs::read_to_string(out).with_context(|| format!("reading {}", out.display()))?;
    if pipeline::parse_metrics_csv(&text)? != rows {
        bail!("{} does not read back identically", out.display());
    }
    let summary_path = summary
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("summary.json"));
    std::fs::write(&summary_path, summarize(&rows).to_json() + "\n")
        .with_context(|| format!("writing {}", summary_path.display()))?;
    let mut run = Run::new("evaluate");
    run.inputs.push(data.to_path_buf());
    run.outputs.extend([out.to_path_buf(), summary_path]);
    run.finish(&manifest_beside(out))
}

fn cmd_export_slice(
    input: &Path,
    axis: Axis,
    index: usize,
    window: Window,
    out: &Path,
) -> Result<()> {
    io::export_slice(&io::read_volume(input)?, axis, index, window, out)?;
    let mut run = Run::new("export-slice");
    run.inputs.push(input.to_path_buf());
    run.outputs.push(out.to_path_buf());
    run.finish(&manifest_beside(out))
}

fn cmd_selftest() -> Result<()> {
    let results = selftest::run();
    let failed = results.iter().filter(|c| !c.passed).count();
    for c in &results {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{tag} {}", c.name);
        } else {
            println!("{tag} {} ({})", c.name, c.detail);
        }
    }
    if failed > 0 {
        bail!("{failed} of {} self-test checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { spec, subject, out } => cmd_phantom(spec.as_deref(), subject, &out),
        Command::Train { stage, args } => cmd_train(stage, &args),
        Command::Register {
            models,
            moving,
            fixed,
            prior,
            mode,
            prior_alignment,
            out,
        } => cmd_register(
            &models,
            &moving,
            &fixed,
            &prior,
            mode,
            prior_alignment,
            &out,
        ),
        Command::Enhance {
            models,
            input,
            mode,
            out,
        } => cmd_enhance(&models, &input, mode, &out),
        Command::Evaluate {
            models,
            data,
            methods,
            threads,
            summary,
            out,
        } => cmd_evaluate(
            models.as_deref(),
            &data,
            &methods,
            threads,
            summary.as_deref(),
            &out,
        ),
        Command::ExportSlice {
            input,
            axis,
            index,
            center,
            width,
            out,
        } => cmd_export_slice(&input, axis, index, Window { center, width }, &out),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
