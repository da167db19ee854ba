//! Command-line entry points.
//!
//! Every command reads an optional TOML config, overlays its flags, writes
//! the resolved config next to its outputs and prints it. Usage and
//! configuration errors exit with status 2, runtime errors with 1.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::compose::{self, MixStrategy};
use crate::config::RunConfig;
use crate::edit::{self, SlotPick};
use crate::error::{Error, Result};
use crate::metrics::probe::Property;
use crate::metrics::SegMasks;
use crate::render;
use crate::scenegen::{make_dataset, Dataset, LabeledSample};
use crate::slotcore::SlotSet;
use crate::trainer::{
    self, encode_samples, evaluate, format_table, load_checkpoint, property_probe, run_ablation, save_checkpoint,
    stream_rng, MetricsReport, RegVariant, Stream, TrainState,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.scck";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Parser, Debug)]
#[command(name = "slotcomp", version, about = "Compositional slot-attention auto-encoder with a diffusion prior")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialization and every training draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a sprite dataset with masks and properties.
    GenerateData(GenerateArgs),
    /// Train the model, resuming from `<out>/checkpoint.scck` when present.
    Train(TrainArgs),
    /// Segmentation metrics, overlays and property probes for a checkpoint.
    Eval(EvalArgs),
    /// Swap or remove slots between two images and render the composite.
    Compose(ComposeArgs),
    /// Train and evaluate every row of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of scenes.
    #[arg(long)]
    pub n: Option<usize>,
    /// Split name recorded in the dataset manifest, e.g. `train` or `val`.
    #[arg(long)]
    pub split: Option<String>,
    /// Replace an existing dataset generated with a different config.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Total optimizer steps, counting any resumed ones.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Image pairs are formed within a batch, so this must be even.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Drop the diffusion prior term from the encoder objective.
    #[arg(long)]
    pub no_prior: bool,
    /// Drop the mask regularizer.
    #[arg(long)]
    pub no_reg: bool,
    /// Independent initial draws per image and random mixing.
    #[arg(long)]
    pub no_shared_init: bool,
    /// Composite from the one-step denoiser estimate instead of the surrogate.
    #[arg(long)]
    pub tweedie: bool,
    /// Attention maps in the regularizer: `own` (each image's slots over its
    /// own features) or `cross` (over the other image's features).
    #[arg(long)]
    pub reg_variant: Option<String>,
    /// Steps between checkpoint writes.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset evaluated after training.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Ignore an existing checkpoint in the output directory.
    #[arg(long)]
    pub fresh: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample indices to draw segmentation overlays for, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub overlays: Vec<usize>,
    /// Properties to probe: position, shape, color.
    #[arg(long, value_delimiter = ',')]
    pub probe: Vec<String>,
    /// Number of shared-init composite panels rendered with the sampler.
    #[arg(long, default_value_t = 0)]
    pub panels: usize,
    /// Ancestral sampler steps used to render composites.
    #[arg(long, default_value_t = 100)]
    pub sample_steps: usize,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Index of image A in the dataset.
    #[arg(long)]
    pub a: usize,
    /// Index of image B in the dataset.
    #[arg(long)]
    pub b: usize,
    /// Slots to keep, e.g. `a:0,1,3;b:2`; `*` takes every slot.
    #[arg(long, default_value = "a:*")]
    pub swap: String,
    /// Ancestral sampler steps used to render composites.
    #[arg(long, default_value_t = 100)]
    pub sample_steps: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset every row is scored on.
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Parse `args`, run, and map the outcome to an exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Bad flags and bad configuration files are both usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolve())
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| Error::Usage("--out is required".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn log_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_toml()?;
    println!("seed = {}", cfg.seed);
    println!("# resolved config\n{text}");
    fs::write(dir.join(RESOLVED_CONFIG), text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenerateData(a) => cmd_generate_data(cfg, &cli.common, a),
        Command::Train(a) => cmd_train(cfg, &cli.common, a),
        Command::Eval(a) => cmd_eval(cfg, &cli.common, a),
        Command::Compose(a) => cmd_compose(cfg, &cli.common, a),
        Command::Ablate(a) => cmd_ablate(cfg, &cli.common, a),
    }
}

fn cmd_generate_data(mut cfg: RunConfig, common: &Common, a: GenerateArgs) -> Result<()> {
    if let Some(n) = a.n {
        cfg.data.n = n;
    }
    if let Some(s) = a.split {
        cfg.data.split = s;
    }
    if cfg.data.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let dir = out_dir(common)?;
    log_config(&cfg, &dir)?;
    let m = make_dataset(&dir, cfg.data.n, &cfg.data.gen, cfg.seed, &cfg.data.split, a.overwrite)?;
    println!(
        "wrote {} {} samples ({}×{}, {}..={} objects) to {}, config hash {}",
        m.count,
        m.split,
        m.config.height,
        m.config.width,
        m.config.min_objects,
        m.config.max_objects,
        dir.display(),
        m.config_hash
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = o.steps {
        t.steps = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.checkpoint_every {
        t.checkpoint_every = v;
    }
    if o.no_prior {
        t.prior = false;
    }
    if o.no_reg {
        t.reg = false;
    }
    if o.no_shared_init {
        t.shared_init = false;
        t.mix = MixStrategy::Random;
    }
    if o.tweedie {
        t.tweedie = true;
    }
    if let Some(v) = &o.reg_variant {
        t.reg_variant = match v.as_str() {
            "own" => RegVariant::Own,
            "cross" => RegVariant::Cross,
            other => return Err(Error::Usage(format!("unknown reg variant `{other}` (expected own | cross)"))),
        };
    }
    t.validate().map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Serialize)]
struct LossRecord<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a compose::LossBreakdown,
}

/// Keep only log lines for steps `<= step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).map_err(|e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{m} (generate one with `slotcomp generate-data`)")),
        other => other,
    })
}

fn cmd_train(mut cfg: RunConfig, common: &Common, a: TrainArgs) -> Result<()> {
    apply_overrides(&mut cfg, &a.overrides)?;
    let dir = out_dir(common)?;
    let data = open_dataset(&a.data)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(LOSS_LOG);
    let mut state = if ckpt.exists() && !a.fresh {
        let mut s = load_checkpoint(&ckpt)?;
        let schedule_only = |c: &trainer::TrainConfig| trainer::TrainConfig { steps: 0, checkpoint_every: 0, ..c.clone() };
        if schedule_only(&s.config) != schedule_only(&cfg.train) {
            return Err(Error::Usage(format!(
                "{} was written with a different configuration; pass --fresh to start over",
                ckpt.display()
            )));
        }
        s.config = cfg.train.clone();
        println!("resuming from {} at step {}", ckpt.display(), s.step);
        truncate_log(&log_path, s.step)?;
        s
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        TrainState::new(&cfg.train)?
    };
    log_config(&cfg, &dir)?;
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let every = cfg.train.checkpoint_every.max(1);
    let steps = cfg.train.steps;
    trainer::train(&mut state, &data, steps, |s, l| {
        writeln!(log, "{}", serde_json::to_string(&LossRecord { step: s.step, losses: l })?)?;
        if s.step % every == 0 || s.step == steps {
            log.flush()?;
            save_checkpoint(s, &ckpt)?;
            println!(
                "step {:>6}  total {:.5}  diff {:.5}  recon {:.5}  prior {:.6}  reg {:.5}",
                s.step, l.total, l.diff, l.recon, l.prior, l.reg
            );
        }
        Ok(())
    })?;
    save_checkpoint(&state, &ckpt)?;
    if let Some(val) = a.val {
        let report = evaluate(&state.model, &state.config, &open_dataset(&val)?, &cfg.eval)?;
        write_json(&dir.join(METRICS_FILE), &report)?;
        println!("fg_ari {:.4}  miou {:.4}  mbo {:.4}", report.fg_ari, report.miou, report.mbo);
    }
    Ok(())
}

fn sample_at<'a>(data: &'a Dataset, i: usize) -> Result<&'a LabeledSample> {
    data.samples.get(i).ok_or_else(|| Error::Usage(format!("sample {i} out of range 0..{}", data.len())))
}

fn cmd_eval(cfg: RunConfig, common: &Common, a: EvalArgs) -> Result<()> {
    let dir = out_dir(common)?;
    log_config(&cfg, &dir)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let data = open_dataset(&a.data)?;
    let props = a.probe.iter().map(|p| p.parse::<Property>()).collect::<Result<Vec<_>>>()?;
    for &i in &a.overlays {
        sample_at(&data, i)?;
    }
    let mut report: MetricsReport = evaluate(&state.model, &state.config, &data, &cfg.eval)?;
    for p in props {
        report.probes.push(property_probe(&state.model, &data, p, &cfg.probe, &cfg.eval)?);
    }
    write_json(&dir.join(METRICS_FILE), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    if !a.overlays.is_empty() {
        let samples: Vec<&LabeledSample> = a.overlays.iter().map(|&i| &data.samples[i]).collect();
        let enc = encode_samples(&state.model, &samples, cfg.eval.batch_size, cfg.eval.seed)?;
        for ((&i, s), e) in a.overlays.iter().zip(&samples).zip(&enc) {
            let img = render::to_rgb(&s.image, s.height, s.width)?;
            let gt = SegMasks { labels: s.gt_masks.clone(), grid: (s.height, s.width) };
            let p = render::panel(
                &[
                    img.clone(),
                    render::overlay(&img, &e.masks, 0.55),
                    render::segmentation(&e.masks, s.height as u32, s.width as u32),
                    render::segmentation(&gt, s.height as u32, s.width as u32),
                ],
                4,
                4,
            );
            render::save_png(&p, &dir.join(format!("overlay_{i:05}.png")))?;
        }
    }
    for k in 0..a.panels {
        let (ia, ib) = (2 * k % data.len(), (2 * k + 1) % data.len());
        let (sa, sb) = (&data.samples[ia], &data.samples[ib]);
        let pair = edit::encode_pair(&state.model, sa, sb, cfg.seed)?;
        let n = pair.a.n_slots();
        let (i1, i2) = compose::sample_partition(&mut stream_rng(cfg.seed, k as u64, Stream::Mix), n);
        let composite = edit::compose_slots(&pair.a, &pair.b, &SlotPick { from_a: i1, from_b: i2.clone() })?;
        // shared-init mixing keeps slot positions, so slot i of B replaces slot i of A
        let composite = reorder_index_preserving(&composite, n, &i2)?;
        let (h, w) = state.model.image_size();
        let imgs = [
            render::to_rgb(&sa.image, h, w)?,
            render::to_rgb(&sb.image, h, w)?,
            render::to_rgb(&edit::render_surrogate(&state.model, &composite)?, h, w)?,
            render::to_rgb(&edit::render_diffusion(&state.model, &composite, a.sample_steps, cfg.seed)?, h, w)?,
        ];
        render::save_png(&render::panel(&imgs, 4, 4), &dir.join(format!("composite_{k:03}.png")))?;
    }
    Ok(())
}

/// Put slots back in index order after `compose_slots` stacked A's picks
/// before B's.
fn reorder_index_preserving(c: &SlotSet, n: usize, from_b: &[usize]) -> Result<SlotSet> {
    let from_a: Vec<usize> = (0..n).filter(|i| !from_b.contains(i)).collect();
    let mut perm = vec![0; n];
    for (pos, &i) in from_a.iter().chain(from_b).enumerate() {
        perm[i] = pos;
    }
    c.permute_slots(&perm)
}

#[derive(Serialize)]
struct ComposeRecord {
    a: usize,
    b: usize,
    from_a: Vec<usize>,
    from_b: Vec<usize>,
    seed: u64,
    sample_steps: usize,
    changed_pixels_vs_a: usize,
}

fn cmd_compose(cfg: RunConfig, common: &Common, a: ComposeArgs) -> Result<()> {
    let pick: SlotPick = a.swap.parse()?;
    let dir = out_dir(common)?;
    log_config(&cfg, &dir)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let data = open_dataset(&a.data)?;
    let (sa, sb) = (sample_at(&data, a.a)?, sample_at(&data, a.b)?);
    let model = &state.model;
    let pair = edit::encode_pair(model, sa, sb, cfg.seed)?;
    let pick = pick.resolve(pair.a.n_slots())?;
    let composite = edit::compose_slots(&pair.a, &pair.b, &pick)?;
    let recon_a = edit::render_surrogate(model, &pair.a)?;
    let surrogate = edit::render_surrogate(model, &composite)?;
    let sampled = edit::render_diffusion(model, &composite, a.sample_steps, cfg.seed)?;
    let (h, w) = model.image_size();
    let imgs = [
        render::overlay(&render::to_rgb(&sa.image, h, w)?, &pair.masks_a, 0.45),
        render::overlay(&render::to_rgb(&sb.image, h, w)?, &pair.masks_b, 0.45),
        render::to_rgb(&recon_a, h, w)?,
        render::to_rgb(&surrogate, h, w)?,
        render::to_rgb(&sampled, h, w)?,
    ];
    let name = format!("compose_{}_{}", a.a, a.b);
    render::save_png(&render::panel(&imgs, 4, 4), &dir.join(format!("{name}.png")))?;
    let record = ComposeRecord {
        a: a.a,
        b: a.b,
        from_a: pick.from_a,
        from_b: pick.from_b,
        seed: cfg.seed,
        sample_steps: a.sample_steps,
        changed_pixels_vs_a: edit::change_mask(&recon_a, &surrogate, edit::CHANGE_THRESHOLD).iter().filter(|&&c| c).count(),
    };
    write_json(&dir.join(format!("{name}.json")), &record)?;
    println!("wrote {}", dir.join(format!("{name}.png")).display());
    Ok(())
}

fn cmd_ablate(mut cfg: RunConfig, common: &Common, a: AblateArgs) -> Result<()> {
    apply_overrides(&mut cfg, &a.overrides)?;
    let dir = out_dir(common)?;
    log_config(&cfg, &dir)?;
    let train_data = open_dataset(&a.data)?;
    let val = open_dataset(&a.val)?;
    let seeds = cfg.ablation_seeds();
    let mut log = OpenOptions::new().create(true).append(true).open(dir.join(LOSS_LOG))?;
    let every = cfg.train.checkpoint_every.max(1);
    let results = run_ablation(&cfg.ablation.rows, &cfg.train, &seeds, &train_data, &val, &cfg.eval, |row, seed, s, l| {
        if s.step % every == 0 {
            writeln!(log, "{}", serde_json::json!({"row": row, "seed": seed, "step": s.step, "losses": l}))?;
            println!("[{row} seed {seed}] step {} total {:.5}", s.step, l.total);
        }
        Ok(())
    })?;
    write_json(&dir.join("ablation.json"), &results)?;
    let table = format_table(&results);
    fs::write(dir.join("ablation.md"), &table)?;
    println!("{table}");
    Ok(())
}
