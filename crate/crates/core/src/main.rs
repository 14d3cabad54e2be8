use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use faithsplat::config::parse_list;
use faithsplat::fisher::{check_tau, eig_map, DEFAULT_TAU};
use faithsplat::formats;
use faithsplat::protocol::{eval_csv, evaluate, score_views, sweep_csv};
use faithsplat::restorer::restorer_by_name;
use faithsplat::synth::{generate_dataset, load_dataset, write_dataset, SceneSpec};
use faithsplat::trainer::{
    fuse, load_checkpoint, metrics_csv, save_checkpoint, save_restored, train_original, FusionState, TrainConfig,
};
use faithsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "faithsplat", version, about = "Gaussian splatting with pixel-wise expected information gain")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FAITHSPLAT_THREADS")]
    threads: Option<usize>,
    /// Force fixed-order reductions. Reductions are always merged in tile
    /// order, so this only records the request.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic street dataset.
    GenScene {
        /// Scene spec (key = value); omitted keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the forward trajectory and build the Fisher ledger.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a pixel-wise EIG map.
    EigMap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Training frame `N`, or `N:OFFSET` for a lateral shift.
        #[arg(long)]
        cam: String,
        /// Output `.eigf` path; `.pgm`, `_preview.pgm` and `.txt` siblings are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run EIG-guided fusion rounds.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// identity, oracle or degrade.
        #[arg(long)]
        restorer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score lateral views: one row per (frame, offset).
    Eval(EvalArgs),
    /// Masked PSNR over low-EIG pixels for a list of thresholds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.02,0.1,0.2,0.4,0.7,1.0")]
        thresholds: String,
        #[arg(long, default_value_t = 3.0)]
        offset: f64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "1,2,3,6")]
    offsets: String,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    match std::fs::create_dir(path) {
        Err(e) if !(e.kind() == std::io::ErrorKind::AlreadyExists && path.is_dir()) => Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_cam(s: &str) -> Result<(usize, f64)> {
    let bad = || Error::InvalidArgument {
        name: "cam".into(),
        message: format!("expected N or N:OFFSET, got `{s}`"),
    };
    let (f, o) = match s.split_once(':') {
        Some((f, o)) => (f, o.parse::<f64>().map_err(|_| bad())?),
        None => (s, 0.0),
    };
    if !o.is_finite() {
        return Err(bad());
    }
    Ok((f.parse().map_err(|_| bad())?, o))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { spec, out } => {
            let spec = match spec {
                Some(p) => SceneSpec::load(&p)?,
                None => SceneSpec::default(),
            };
            let (data, depths) = generate_dataset(&spec)?;
            write_dataset(&data, &depths, &out)?;
            eprintln!("wrote {} frames to {}", data.train.len(), out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&data)?;
            let mut state = FusionState::from_dataset(&data, &cfg);
            let result = train_original(&mut state, &data, &cfg);
            save_checkpoint(&state, &data.train_cameras(), &cfg, &out)?;
            result?;
            if let Some(r) = state.history.last() {
                eprintln!("trained {} iterations, {} gaussians, train psnr {:.2}", r.iteration, r.gaussians, r.train_psnr);
            }
        }
        Command::EigMap { ckpt, cam, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let (frame, offset) = parse_cam(&cam)?;
            let base = ck.train_cameras.get(frame).ok_or_else(|| Error::InvalidArgument {
                name: "cam".into(),
                message: format!("frame {frame} out of range 0..{}", ck.train_cameras.len()),
            })?;
            let camera = base.shifted_laterally(offset);
            let map = eig_map(&ck.state.scene, &ck.state.ledger, &camera)?;
            formats::save_eigf(&map.raw, &out)?;
            write(&out.with_extension("pgm"), &formats::encode_pgm16(&map.normalized, 1.0))?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write(&out.with_file_name(format!("{stem}_preview.pgm")), &formats::encode_pgm8(&map.normalized, 1.0))?;
            write(&out.with_extension("txt"), formats::eig_sidecar(&map, &cam).as_bytes())?;
            eprintln!("mean raw EIG {:.6e}, p99 scale {:.6e}", map.raw.mean(), map.scale);
        }
        Command::Fuse {
            ckpt,
            data,
            config,
            restorer,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => ck.config.clone(),
            };
            let restorer = restorer_by_name(&restorer, cfg.restorer_tau, cfg.restorer_noise)?;
            let data = load_dataset(&data)?;
            let mut state = ck.state;
            create_dir(&out)?;
            let restored_dir = out.join("restored");
            let result = fuse(&mut state, &data, restorer.as_ref(), &cfg, |s, views| {
                save_restored(&restored_dir, s.round, views)
            });
            save_checkpoint(&state, &ck.train_cameras, &cfg, &out)?;
            // append this run's rows to the input checkpoint's history
            let mut metrics = ck.metrics.clone();
            for line in metrics_csv(&state.history).lines().skip(1) {
                metrics.push_str(line);
                metrics.push('\n');
            }
            write(&out.join("metrics.csv"), metrics.as_bytes())?;
            result?;
            eprintln!("completed {} fusion rounds, offset {}", state.round, state.offset);
        }
        Command::Eval(args) => {
            let offsets: Vec<f64> = parse_list("offsets", &args.offsets)?;
            check_tau(args.tau)?;
            let ck = load_checkpoint(&args.common.ckpt)?;
            let data = load_dataset(&args.common.data)?;
            let rows = evaluate(&ck.state.scene, &ck.state.ledger, &data, &offsets, args.tau)?;
            write(&args.common.out, eval_csv(&rows).as_bytes())?;
        }
        Command::Sweep {
            common,
            thresholds,
            offset,
        } => {
            let thresholds: Vec<f64> = parse_list("thresholds", &thresholds)?;
            for t in &thresholds {
                check_tau(*t)?;
            }
            let ck = load_checkpoint(&common.ckpt)?;
            let data = load_dataset(&common.data)?;
            let views = score_views(&ck.state.scene, &ck.state.ledger, &data, &[offset], 1)?;
            write(&common.out, sweep_csv(&views, &thresholds)?.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::from(2);
        }
    }
    let _ = cli.deterministic;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
