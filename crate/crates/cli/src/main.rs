use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cellcount::config::RunConfig;
use cellcount::eval::{compute_metrics, count_cells, extract_centroids, ImageCount, MetricsReport};
use cellcount::experiment::crossval;
use cellcount::io::read_image;
use cellcount::model::{predict, Arch, ParamStore};
use cellcount::synth::{generate_synthetic, load_dataset, save_dataset, LabeledImage, SyntheticSpec};
use cellcount::targets::{proximity_map, DensityTarget, KernelSpec, ProximitySpec};
use cellcount::trainer::{select_lr, EpochRecord, Example, RunDir, Trainer};
use cellcount::{selftest, Tensor4};

#[derive(Parser, Debug)]
#[command(name = "cellcount", version, about = "Density-regression cell counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic labeled dataset.
    GenData(GenData),
    /// Write density, low-resolution and proximity target maps from annotations.
    MakeTargets(MakeTargets),
    /// Train a model and write checkpoints and the loss log.
    Train(Train),
    /// Count cells in one image, or in a density map file.
    Count(Count),
    /// Score a checkpoint on a labeled dataset.
    Evaluate(Evaluate),
    /// Run k-fold cross-validation.
    Crossval(Crossval),
    /// Run the gradient-check and invariant suite.
    Selftest,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Start from this spec file; the flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cells per image as MIN-MAX.
    #[arg(long, value_parser = parse_range)]
    counts: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
struct MakeTargets {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = KernelSpec::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = KernelSpec::default().half_width)]
    half_width: usize,
    /// Factor applied to the density and low-resolution maps.
    #[arg(long, default_value_t = 100.0)]
    amplification: f32,
    /// Also write proximity maps.
    #[arg(long)]
    proximity: bool,
    #[arg(long, default_value_t = ProximitySpec::default().decay)]
    decay: f64,
    #[arg(long, default_value_t = ProximitySpec::default().cutoff)]
    cutoff: f64,
}

/// Run configuration file plus per-key overrides.
#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    /// Enable or disable the auxiliary heads.
    #[arg(long)]
    aux: Option<bool>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.val {
            cfg.val_dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.arch {
            cfg.arch = v;
            if v == Arch::Fcrn && self.aux.is_none() {
                cfg.aux = false;
            }
        }
        if let Some(v) = self.aux {
            cfg.aux = v;
        }
        let t = &mut cfg.train;
        macro_rules! set {
            ($($field:ident => $dst:expr),*) => {$(
                if let Some(v) = self.$field {
                    $dst = v;
                }
            )*};
        }
        set!(width_divisor => cfg.width_divisor, epochs => t.epochs, lr => t.lr, batch_size => t.batch_size,
             patches_per_image => t.patches_per_image, patch_size => t.patch_size, seed => t.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    run: RunArgs,
    /// Pick the learning rate from the configured candidates with short probes.
    #[arg(long)]
    select_lr: bool,
    /// Print a progress line every this many epochs; 0 stays quiet.
    #[arg(long, default_value_t = 1)]
    log_every: usize,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["image", "density"])))]
struct Count {
    #[arg(long, requires = "image")]
    checkpoint: Option<PathBuf>,
    /// PNG image to run the model on; needs --checkpoint.
    #[arg(long, requires = "checkpoint")]
    image: Option<PathBuf>,
    /// Density map file (DCT1) to count directly.
    #[arg(long)]
    density: Option<PathBuf>,
    /// Factor the density carries; counts are divided by it.
    #[arg(long, default_value_t = 100.0)]
    amplification: f64,
    /// Write the density map (DCT1) here.
    #[arg(long)]
    density_out: Option<PathBuf>,
    /// Write detected centroids as x,y CSV here.
    #[arg(long)]
    centroids_out: Option<PathBuf>,
    /// Smallest distance in pixels between two detections.
    #[arg(long, default_value_t = 3.0)]
    min_distance: f64,
    /// Density below this is never a detection, in units of the amplified map.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-image counts and summary CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    amplification: f64,
}

#[derive(Args, Debug)]
struct Crossval {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Folds trained at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seed of the fold split; defaults to the training seed.
    #[arg(long)]
    fold_seed: Option<u64>,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("expected WIDTHxHEIGHT, got '{s}'"));
    Ok((num(w)?, num(h)?))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("expected MIN-MAX, got '{s}'"));
    Ok((num(a)?, num(b)?))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.n {
        spec.n_images = n;
    }
    if let Some((w, h)) = a.dims {
        spec.width = w;
        spec.height = h;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(c) = a.counts {
        spec.count_range = c;
    }
    let items = generate_synthetic(&spec)?;
    save_dataset(&a.out, &items)?;
    let spec_path = a.out.join(SyntheticSpec::FILE);
    fs::write(&spec_path, spec.to_toml()).with_context(|| format!("cannot write {}", spec_path.display()))?;
    let cells: usize = items.iter().map(|i| i.centroids.count()).sum();
    println!("wrote {} images with {cells} cells to {}", items.len(), a.out.display());
    Ok(())
}

fn make_targets(a: &MakeTargets) -> Result<()> {
    let kernel = KernelSpec {
        sigma: a.sigma,
        half_width: a.half_width,
    };
    kernel.validate()?;
    let prox = ProximitySpec {
        decay: a.decay,
        cutoff: a.cutoff,
    };
    let items = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    for item in &items {
        let target = DensityTarget::from_centroids(&item.centroids, &kernel)?.scaled(a.amplification);
        let file = |kind: &str| a.out.join(format!("{}.{kind}.dct1", item.id));
        target.full.save(file("density"))?;
        for (t, kind) in target.lr.iter().zip(["lr8", "lr4", "lr2"]) {
            t.save(file(kind))?;
        }
        if a.proximity && item.centroids.count() > 0 {
            proximity_map(&item.centroids, &prox)?.save(file("proximity"))?;
        }
    }
    println!("wrote targets for {} images to {}", items.len(), a.out.display());
    Ok(())
}

fn examples(items: &[LabeledImage], cfg: &RunConfig) -> Result<Vec<Example>> {
    let kernel = cfg.kernel();
    let channels = cfg.model_spec().in_channels;
    Ok(items
        .iter()
        .map(|i| i.to_example(&kernel, channels))
        .collect::<cellcount::Result<Vec<_>>>()?)
}

fn print_epoch(r: &EpochRecord) {
    match r.val_l {
        Some(v) => println!("epoch {} train_lcmb {:.6} val_l {:.6}", r.epoch, r.train_lcmb, v),
        None => println!("epoch {} train_lcmb {:.6}", r.epoch, r.train_lcmb),
    }
}

fn train(a: &Train) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    let train = examples(&load_dataset(&cfg.data_dir)?, &cfg)?;
    let val = match &cfg.val_dir {
        Some(dir) => examples(&load_dataset(dir)?, &cfg)?,
        None => Vec::new(),
    };
    let spec = cfg.model_spec();
    if a.select_lr {
        let (lr, probes) = select_lr(&cfg.train.lr_candidates, &train, &val, &cfg.train, &spec)?;
        for p in &probes {
            match p.score {
                Some(s) => println!("probe lr {} loss {s:.6}", p.lr),
                None => println!("probe lr {} diverged", p.lr),
            }
        }
        println!("selected lr {lr}");
        cfg.train.lr = lr;
    }
    let mut run = RunDir::create(&cfg.output_dir, &cfg.to_toml())?;
    let mut trainer = Trainer::from_spec(cfg.train.clone(), &spec)?;
    let every = a.log_every;
    let last = cfg.train.epochs;
    trainer.fit_observed(&train, &val, Some(&mut run), |r| {
        if every > 0 && (r.epoch % every == 0 || r.epoch == last) {
            print_epoch(r);
        }
    })?;
    println!("saved {}", run.root().join(RunDir::FINAL).display());
    Ok(())
}

fn count(a: &Count) -> Result<()> {
    let density = match (&a.density, &a.checkpoint, &a.image) {
        (Some(path), _, _) => Tensor4::load(path)?,
        (None, Some(ckpt), Some(image)) => {
            let store = ParamStore::load(ckpt)?;
            let x = read_image(image)?.to_tensor(store.spec().in_channels)?;
            predict(&store, &x)?
        }
        _ => bail!("count needs --density, or --checkpoint with --image"),
    };
    let d = density.dims();
    if d.batch != 1 || d.channels != 1 {
        bail!("expected a single one-channel density map, got {d}");
    }
    println!("count {}", count_cells(&density, a.amplification));
    if let Some(p) = &a.density_out {
        density.save(p)?;
    }
    if let Some(p) = &a.centroids_out {
        let id = a
            .image
            .as_ref()
            .or(a.density.as_ref())
            .and_then(|p| p.file_stem())
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let found = extract_centroids(id, &density, a.min_distance, a.threshold)?;
        found.save_csv(p)?;
        println!("detections {}", found.count());
    }
    Ok(())
}

fn score(store: &ParamStore, items: &[LabeledImage], amplification: f64) -> Result<MetricsReport> {
    let channels = store.spec().in_channels;
    let counts = items
        .iter()
        .map(|i| {
            let density = predict(store, &i.image.to_tensor(channels)?)?;
            Ok(ImageCount::new(
                i.id.clone(),
                i.centroids.count() as f64,
                count_cells(&density, amplification),
            ))
        })
        .collect::<cellcount::Result<Vec<_>>>()?;
    Ok(compute_metrics(counts)?)
}

fn evaluate(a: &Evaluate) -> Result<()> {
    let store = ParamStore::load(&a.checkpoint)?;
    let report = score(&store, &load_dataset(&a.data)?, a.amplification)?;
    report.save_csv(&a.out)?;
    println!("{}", report.summary_line());
    Ok(())
}

fn run_crossval(a: &Crossval) -> Result<()> {
    let cfg = a.run.resolve()?;
    let items = load_dataset(&cfg.data_dir)?;
    let fold_seed = a.fold_seed.unwrap_or(cfg.train.seed);
    let report = crossval(
        &items,
        &cfg.model_spec(),
        &cfg.train,
        &cfg.kernel(),
        a.k,
        fold_seed,
        a.jobs,
    )?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    };
    write(RunDir::CONFIG, cfg.to_toml())?;
    write("folds.toml", report.plan.to_toml())?;
    for f in &report.folds {
        let dir = out.join(format!("fold_{}", f.fold));
        create_dir(&dir)?;
        f.report.save_csv(dir.join("metrics.csv"))?;
        f.store.save(dir.join(RunDir::FINAL))?;
        let mut log = String::from("epoch,train_lcmb,val_l\n");
        for r in &f.history {
            let val = r.val_l.map(|v| v.to_string()).unwrap_or_default();
            log.push_str(&format!("{},{},{val}\n", r.epoch, r.train_lcmb));
        }
        fs::write(dir.join(RunDir::LOSSES), log).with_context(|| format!("cannot write {}", dir.display()))?;
        println!("fold {} val_l {:.6} {}", f.fold, f.final_val_l, f.report.summary_line());
    }
    report.aggregate.save_csv(out.join("aggregate.csv"))?;
    println!("aggregate {}", report.aggregate.summary_line());
    Ok(())
}

fn run_selftest() -> Result<()> {
    let checks = selftest::run();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} self-checks failed", checks.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::MakeTargets(a) => make_targets(&a),
        Command::Train(a) => train(&a),
        Command::Count(a) => count(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Crossval(a) => run_crossval(&a),
        Command::Selftest => run_selftest(),
    }
}

/// Collapses an error chain onto one line, skipping causes already quoted by
/// their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The message part of a clap error without the usage block.
fn clap_line(e: &clap::Error) -> String {
    let text = e.to_string();
    let body: Vec<&str> = text
        .lines()
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if body.is_empty() {
        "error: invalid arguments".into()
    } else {
        body.join(" ")
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", clap_line(&e));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
