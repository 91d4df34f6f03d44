//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    generate_synthetic_dataset, load_bags, load_manifest, train_val_split, FeatureBag, Manifest, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::auc_averages;
use crate::interpret::{patch_scores, prototype_distance_matrix, render_heatmap, scorers};
use crate::model::{activations, forward, normalizations, Checkpoint, GradCheckProblem, GRADCHECK_EPS};
use crate::training::{evaluate, fit_with_observer, run_cross_validation, samplers, weight_decays, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tpmil", version, about = "Attention MIL with trainable prototypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known instance labels.
    Synth(SynthArgs),
    /// Train on a patient-grouped train/validation split.
    Train(TrainArgs),
    /// Patient-grouped k-fold cross-validation.
    Cv(CvArgs),
    /// Score a checkpoint on every bag of a manifest.
    Eval(EvalArgs),
    /// Render a per-patch heatmap for one slide.
    Heatmap(HeatmapArgs),
    /// Print the inter-prototype distance matrix.
    Protodist(ProtodistArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub bags: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub min_instances: usize,
    #[arg(long, default_value_t = 64)]
    pub max_instances: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_positive: f64,
    #[arg(long, default_value_t = 0.3)]
    pub max_positive: f64,
    /// Minimum distance between cluster means, in noise units.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// orthogonal | close-far
    #[arg(long, default_value = "orthogonal")]
    pub layout: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Hyperparameters shared by `train` and `cv`.
#[derive(Debug, Args)]
pub struct Hyper {
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// coupled | decoupled
    #[arg(long, default_value = "coupled")]
    pub decay_mode: String,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Train the attention-MIL baseline without prototypes.
    #[arg(long)]
    pub no_prototype: bool,
    /// minmax | softmax-raw
    #[arg(long, default_value = "minmax")]
    pub norm: String,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long)]
    pub weighted_sampling: bool,
    #[arg(long, default_value_t = 512)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub attention_dim: usize,
    /// relu | none
    #[arg(long, default_value = "relu")]
    pub activation: String,
    /// macro | micro | weighted
    #[arg(long, default_value = "macro")]
    pub auc_average: String,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Hyper {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            lambda: self.lambda,
            seed: self.seed,
            prototype_module: !self.no_prototype,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            temperature: self.tau,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            normalization: normalizations().get(&self.norm)?,
            activation: activations().get(&self.activation)?,
            decay: weight_decays().get(&self.decay_mode)?,
            sampler: samplers().get(if self.weighted_sampling { "weighted" } else { "shuffle" })?,
            auc_average: auc_averages().get(&self.auc_average)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Defaults to `cv_out` next to the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-slide predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "macro")]
    pub auc_average: String,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub slide: String,
    /// attention | dist-pred | dist-neg
    #[arg(long, default_value = "attention")]
    pub mode: String,
    #[arg(long, default_value_t = 8)]
    pub cell_px: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; rendering is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProtodistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; the matrix is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GRADCHECK_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Applies `TPMIL_THREADS` to the global worker pool.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("TPMIL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::invalid(format!("TPMIL_THREADS must be a positive integer, got {v:?}")))?;
    // A pool that already exists (repeated in-process calls) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(command: Command) -> Result<i32> {
    let done = match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Protodist(a) => protodist(a),
        Command::Gradcheck(a) => return gradcheck(a),
    };
    done.map(|()| 0)
}

fn echo(title: &str, body: &str) {
    eprintln!("[{title}] resolved config:");
    for line in body.lines() {
        eprintln!("  {line}");
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_classes: a.classes,
        feature_dim: a.dim,
        n_bags: a.bags,
        instances_per_bag: (a.min_instances, a.max_instances),
        positive_fraction: (a.min_positive, a.max_positive),
        cluster_separation: a.separation,
        noise_scale: a.noise,
        layout: a.layout,
        seed: a.seed,
    };
    echo("synth", &format!("{cfg:#?}\nout = {}", a.out.display()));
    let ds = generate_synthetic_dataset(&cfg)?;
    let manifest = ds.write(&a.out)?;
    println!("wrote {} bags; manifest {}", ds.bags.len(), manifest.display());
    Ok(())
}

fn load(manifest: &Path) -> Result<(Manifest, Vec<FeatureBag>)> {
    let m = load_manifest(manifest)?;
    let bags = load_bags(&m)?;
    Ok((m, bags))
}

fn pick(bags: &[FeatureBag], ids: &std::collections::BTreeSet<String>) -> Vec<FeatureBag> {
    bags.iter().filter(|b| ids.contains(&b.slide_id)).cloned().collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    echo(
        "train",
        &format!("{cfg}\nval_fraction = {}\nmanifest = {}\nout = {}", a.hyper.val_fraction, a.manifest.display(), a.out.display()),
    );
    let (manifest, bags) = load(&a.manifest)?;
    let (train_ids, val_ids) = train_val_split(&manifest, a.hyper.val_fraction, cfg.seed)?;
    let (train, val) = (pick(&bags, &train_ids), pick(&bags, &val_ids));
    eprintln!("train bags {}, validation bags {}", train.len(), val.len());
    let result = fit_with_observer(&train, &val, manifest.num_classes(), &cfg, |r| {
        eprintln!(
            "epoch {:>4} ce {:.6} kld {:.6} val_auc {:.4} val_acc {:.4}",
            r.epoch, r.train_ce, r.train_kld, r.val_auc, r.val_acc
        );
    })?;
    create_dir(&a.out)?;
    let ck = Checkpoint {
        config: result.config.clone(),
        class_names: manifest.class_names.clone(),
        params: result.params.clone(),
    };
    ck.save(&a.out.join("best.tpck"))?;
    result.write_log(&a.out.join("train_log.csv"))?;
    let best = result.selected();
    println!(
        "selected epoch {} val_auc {:.4} val_acc {:.4}; checkpoint {}",
        result.selected_epoch,
        best.val_auc,
        best.val_acc,
        a.out.join("best.tpck").display()
    );
    Ok(())
}

fn cv(a: CvArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new(".")).join("cv_out"));
    echo(
        "cv",
        &format!(
            "{cfg}\nfolds = {}\nval_fraction = {}\nmanifest = {}\nout = {}",
            a.folds,
            a.hyper.val_fraction,
            a.manifest.display(),
            out.display()
        ),
    );
    let (manifest, bags) = load(&a.manifest)?;
    let outcome = run_cross_validation(&manifest, &bags, &cfg, a.folds, a.hyper.val_fraction)?;
    create_dir(&out)?;
    for f in &outcome.folds {
        let dir = out.join(format!("fold_{}", f.split.fold_index));
        create_dir(&dir)?;
        Checkpoint {
            config: f.fit.config.clone(),
            class_names: manifest.class_names.clone(),
            params: f.fit.params.clone(),
        }
        .save(&dir.join("best.tpck"))?;
        f.fit.write_log(&dir.join("train_log.csv"))?;
        eprintln!(
            "fold {}: selected epoch {}, test auc {:.4} acc {:.4}",
            f.split.fold_index, f.fit.selected_epoch, f.test.report.auc, f.test.report.acc
        );
    }
    outcome.report.write_csv(&out.join("report.csv"))?;
    print!("{}", outcome.report.to_table());
    println!("report {}", out.join("report.csv").display());
    Ok(())
}

fn check_compatible(ck: &Checkpoint, manifest: &Manifest) -> Result<()> {
    if ck.config.feature_dim != manifest.feature_dim {
        return Err(Error::invalid(format!(
            "checkpoint expects {}-dim features, manifest has {}",
            ck.config.feature_dim, manifest.feature_dim
        )));
    }
    if ck.class_names != manifest.class_names {
        return Err(Error::invalid(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            ck.class_names, manifest.class_names
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    echo(
        "eval",
        &format!(
            "checkpoint = {}\nmanifest = {}\nauc_average = {}",
            a.checkpoint.display(),
            a.manifest.display(),
            a.auc_average
        ),
    );
    let averaging = auc_averages().get(&a.auc_average)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (manifest, bags) = load(&a.manifest)?;
    check_compatible(&ck, &manifest)?;
    let e = evaluate(&ck.params, &ck.config, &bags, averaging.as_ref())?;
    println!("n {} acc {:.4} auc {:.4}", e.report.n, e.report.acc, e.report.auc);
    for (c, auc) in e.report.per_class_auc.iter().enumerate() {
        println!("  auc[{}] {:.4}", manifest.class_names[c], auc);
    }
    if let Some(path) = a.out {
        let mut csv = String::from("slide_id,label,prediction");
        for c in 0..manifest.num_classes() {
            let _ = write!(csv, ",p_{c}");
        }
        csv.push('\n');
        for (b, row) in bags.iter().zip(e.probabilities.row_iter()) {
            let _ = write!(csv, "{},{},{}", b.slide_id, b.label, crate::numerics::argmax(row));
            for p in row {
                let _ = write!(csv, ",{p}");
            }
            csv.push('\n');
        }
        write_file(&path, csv)?;
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    echo(
        "heatmap",
        &format!(
            "checkpoint = {}\nmanifest = {}\nslide = {}\nmode = {}\ncell_px = {}\nout = {}",
            a.checkpoint.display(),
            a.manifest.display(),
            a.slide,
            a.mode,
            a.cell_px,
            a.out.display()
        ),
    );
    let scorer = scorers().get(&a.mode)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    check_compatible(&ck, &manifest)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.slide_id == a.slide)
        .ok_or_else(|| Error::invalid(format!("slide {:?} not in manifest", a.slide)))?;
    let payload = crate::data::load_feature_bag(&manifest.resolve(entry), manifest.feature_dim)?;
    let bag = FeatureBag {
        slide_id: entry.slide_id.clone(),
        patient_id: entry.patient_id.clone(),
        label: entry.label,
        features: payload.features,
        coords: payload.coords,
    };
    let (trace, _) = forward(&ck.params, &ck.config, &bag.features, bag.label)?;
    let map = patch_scores(&trace, &bag, scorer.as_ref())?;
    let image = render_heatmap(&map, a.cell_px)?;
    create_dir(&a.out)?;
    let stem = format!("{}_{}", bag.slide_id, scorer.name());
    write_file(&a.out.join(format!("{stem}.ppm")), image)?;
    map.write_csv(&a.out.join(format!("{stem}.csv")), &ck.digest())?;
    println!(
        "predicted {} for {}; wrote {}",
        ck.class_names[trace.prediction()],
        bag.slide_id,
        a.out.join(format!("{stem}.ppm")).display()
    );
    Ok(())
}

fn protodist(a: ProtodistArgs) -> Result<()> {
    echo("protodist", &format!("checkpoint = {}", a.checkpoint.display()));
    let ck = Checkpoint::load(&a.checkpoint)?;
    if !ck.config.prototype_module {
        eprintln!("warning: checkpoint was trained without the prototype module");
    }
    let m = prototype_distance_matrix(&ck.params, &ck.class_names)?;
    let width = m.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(8);
    print!("{:width$}", "");
    for l in &m.labels {
        print!(" {l:>width$}");
    }
    println!();
    for (l, row) in m.labels.iter().zip(&m.matrix) {
        print!("{l:width$}");
        for v in row {
            print!(" {v:>width$.4}");
        }
        println!();
    }
    if let Some(path) = a.out {
        write_file(&path, m.to_csv())?;
    }
    Ok(())
}

/// Exit 0 within tolerance, 1 above it.
fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    echo(
        "gradcheck",
        &format!("seed = {}\neps = {}\ntolerance = {}\nD=16 L=8 A=4 K=3 M=12 lambda=1", a.seed, a.eps, a.tolerance),
    );
    if !(a.eps > 0.0) {
        return Err(Error::invalid("eps must be > 0"));
    }
    let report = GradCheckProblem::small(a.seed).check(a.eps)?;
    println!(
        "max relative error {:e} at {}[{}] over {} parameters",
        report.max_relative_error, report.worst_tensor, report.worst_index, report.checked
    );
    if report.max_relative_error <= a.tolerance {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(0)
    } else {
        println!("FAIL (tolerance {:e})", a.tolerance);
        Ok(1)
    }
}
