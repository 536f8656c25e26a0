//! Command-line front end: train, evaluate, run inference, sweep the
//! comparison grid, generate synthetic corpora, and track detections.

use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use videopose::body::{make_default_body, write_obj, BodyConfig};
use videopose::checkpoint::{load_checkpoint, save_checkpoint};
use videopose::config::TrainConfig;
use videopose::model::SegmentObs;
use videopose::synth::{save_dataset, Dataset};
use videopose::track::{read_detections, track_detections, write_tracks, TrackerConfig};
use videopose::train::{ablation_table, run_ablation, Trainer};

#[derive(Parser)]
#[command(name = "videopose", about = "Video-based 3D human pose and shape estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an estimator and save a checkpoint.
    Train {
        /// Config file (key = value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set steps=200 --set seed=3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Where to store the final checkpoint.
        #[arg(long, default_value = "checkpoint.bin")]
        out: PathBuf,
        /// Resume from an existing checkpoint before training.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step loss log (CSV: step,term,value).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out sequences.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also evaluate under synthetic occlusions.
        #[arg(long)]
        occluded: bool,
        /// Evaluate on the training corpus instead of held-out sequences.
        #[arg(long)]
        on_train: bool,
        /// Write per-sequence metrics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run windowed inference over one held-out sequence and dump results.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the held-out set.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value = "inference")]
        out_dir: PathBuf,
        /// Write every Kth frame's mesh as OBJ (0 disables meshes).
        #[arg(long, default_value_t = 8)]
        mesh_every: usize,
    },
    /// Train the full model and every ablated variant, then print the grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Comma-separated seeds shared by every cell.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also write the table to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic motion corpus and save it.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "corpus.bin")]
        out: PathBuf,
    },
    /// Associate per-frame detections into identity-stable tracks.
    Track {
        /// Detections CSV: frame,x_min,y_min,x_max,y_max,score.
        #[arg(long)]
        detections: PathBuf,
        /// Tracks CSV: frame,id,x_min,y_min,x_max,y_max.
        #[arg(long, default_value = "tracks.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = TrackerConfig::default().min_iou)]
        min_iou: f64,
        #[arg(long, default_value_t = TrackerConfig::default().max_misses)]
        max_misses: usize,
    },
}

/// Loads a config file if given, then applies `--set key=value` overrides.
/// Both go through the same parser, so overrides accept exactly the keys a
/// config file does.
fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    for s in sets {
        if !s.contains('=') {
            bail!("--set expects KEY=VALUE, got {s:?}");
        }
        text.push('\n');
        text.push_str(s);
    }
    let config = TrainConfig::parse(&text)?;
    config.validate()?;
    Ok(config)
}

fn restore_from(trainer: &mut Trainer, path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    trainer.restore(&ckpt)?;
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let config = load_config(config, sets)?;
    let steps = config.steps;
    let mut trainer = Trainer::new(config)?;
    if let Some(path) = resume {
        restore_from(&mut trainer, path)?;
        println!("resumed at step {}", trainer.step);
    }
    let held = trainer.held_out();
    let before = trainer.evaluate(&held)?;
    println!("held-out before: pa_mpjpe {:.2} mm", before.mean.pa_mpjpe_mm);

    match log {
        Some(path) => {
            let mut w = BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            trainer.train(steps, Some(&mut w))?;
            w.flush()?;
        }
        None => {
            trainer.train::<std::io::Sink>(steps, None)?;
        }
    }

    let after = trainer.evaluate(&held)?;
    println!("held-out after:  pa_mpjpe {:.2} mm", after.mean.pa_mpjpe_mm);
    save_checkpoint(out, &trainer.checkpoint())?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    sets: &[String],
    checkpoint: &Path,
    occluded: bool,
    on_train: bool,
    out: Option<&Path>,
) -> Result<()> {
    let config = load_config(config, sets)?;
    let eval_seed = config.seed;
    let mut trainer = Trainer::new(config)?;
    restore_from(&mut trainer, checkpoint)?;
    let data = if on_train {
        // A held-out-sized slice keeps the comparison cheap and like-for-like.
        let mut corpus = trainer.corpus.clone();
        corpus.sequences.truncate(trainer.config.eval_sequences.max(1));
        corpus
    } else {
        trainer.held_out()
    };
    let report = if occluded {
        trainer.evaluate_occluded(&data, eval_seed)?
    } else {
        trainer.evaluate(&data)?
    };
    print!("{}", report.pretty_table());
    if let Some(path) = out {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        report.write_csv(&mut w)?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn cmd_infer(
    config: Option<&Path>,
    sets: &[String],
    checkpoint: Option<&Path>,
    sequence: usize,
    out_dir: &Path,
    mesh_every: usize,
) -> Result<()> {
    let config = load_config(config, sets)?;
    let mut trainer = Trainer::new(config)?;
    if let Some(path) = checkpoint {
        restore_from(&mut trainer, path)?;
    }
    let held = trainer.held_out();
    let Some(seq) = held.sequences.get(sequence) else {
        bail!("sequence {sequence} out of range (held-out set has {})", held.sequences.len());
    };
    let result = trainer.infer(&SegmentObs::whole_sequence(seq))?;

    fs::create_dir_all(out_dir)?;
    let t = result.theta.dims2().0;

    let params_path = out_dir.join("params.csv");
    let mut w = BufWriter::new(File::create(&params_path)?);
    let (_, j3) = result.theta.dims2();
    let (_, b) = result.beta.dims2();
    let mut header = vec!["frame".to_string()];
    header.extend((0..j3).map(|i| format!("theta_{i}")));
    header.extend((0..b).map(|i| format!("beta_{i}")));
    header.extend((0..6).map(|i| format!("cam_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for f in 0..t {
        let mut row = vec![f.to_string()];
        row.extend(result.theta.row(f).iter().map(f64::to_string));
        row.extend(result.beta.row(f).iter().map(f64::to_string));
        row.extend(result.cam_raw.row(f).iter().map(f64::to_string));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    let joints_path = out_dir.join("joints3d.csv");
    let mut w = BufWriter::new(File::create(&joints_path)?);
    let k = result.joints3d.dims2().1 / 3;
    let mut header = vec!["frame".to_string()];
    for i in 0..k {
        for ax in ["x", "y", "z"] {
            header.push(format!("j{i}_{ax}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for f in 0..t {
        let mut row = vec![f.to_string()];
        row.extend(result.joints3d.row(f).iter().map(f64::to_string));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    let mut meshes_written = 0usize;
    if mesh_every > 0 {
        for f in (0..t).step_by(mesh_every) {
            let path = out_dir.join(format!("frame_{f:05}.obj"));
            let mut w = BufWriter::new(File::create(&path)?);
            write_obj(&mut w, &result.meshes[f], &trainer.body.faces)?;
            w.flush()?;
            meshes_written += 1;
        }
    }
    println!(
        "wrote {} frames ({} meshes) to {}{}",
        t,
        meshes_written,
        out_dir.display(),
        if result.padded { " [reflection-padded]" } else { "" }
    );
    Ok(())
}

fn cmd_ablate(
    config: Option<&Path>,
    sets: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    if seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let config = load_config(config, sets)?;
    let results = run_ablation(&config, seeds)?;
    let table = ablation_table(&results);
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gen_data(config: Option<&Path>, sets: &[String], out: &Path) -> Result<()> {
    let config = load_config(config, sets)?;
    let body = make_default_body(
        config.body_seed,
        &BodyConfig {
            num_verts: config.body_verts,
            num_shapes: config.num_shapes,
            ..BodyConfig::default()
        },
    );
    let ds = Dataset::generate(
        &body,
        config.data_seed,
        config.corpus_sequences,
        config.corpus_frames,
        &config.synth_config(),
    );
    save_dataset(&ds, out)?;
    println!(
        "wrote {} sequences x {} frames to {}",
        config.corpus_sequences,
        config.corpus_frames,
        out.display()
    );
    Ok(())
}

fn cmd_track(detections: &Path, out: &Path, min_iou: f64, max_misses: usize) -> Result<()> {
    let file = File::open(detections)
        .with_context(|| format!("opening {}", detections.display()))?;
    let dets = read_detections(file)?;
    let records = track_detections(&dets, TrackerConfig { min_iou, max_misses });
    let ids = records.iter().map(|r| r.id).collect::<std::collections::HashSet<_>>();
    let w = BufWriter::new(
        File::create(out).with_context(|| format!("creating {}", out.display()))?,
    );
    write_tracks(w, &records)?;
    println!(
        "{} detections -> {} track records ({} identities) in {}",
        dets.len(),
        records.len(),
        ids.len(),
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, sets, out, resume, log } => {
            cmd_train(config.as_deref(), &sets, &out, resume.as_deref(), log.as_deref())
        }
        Command::Eval { config, sets, checkpoint, occluded, on_train, out } => {
            cmd_eval(config.as_deref(), &sets, &checkpoint, occluded, on_train, out.as_deref())
        }
        Command::Infer { config, sets, checkpoint, sequence, out_dir, mesh_every } => cmd_infer(
            config.as_deref(),
            &sets,
            checkpoint.as_deref(),
            sequence,
            &out_dir,
            mesh_every,
        ),
        Command::Ablate { config, sets, seeds, out } => {
            cmd_ablate(config.as_deref(), &sets, &seeds, out.as_deref())
        }
        Command::GenData { config, sets, out } => cmd_gen_data(config.as_deref(), &sets, &out),
        Command::Track { detections, out, min_iou, max_misses } => {
            cmd_track(&detections, &out, min_iou, max_misses)
        }
    }
}
