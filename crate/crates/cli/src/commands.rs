use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fmvit_core::analyzer::{
    block_shapes, branch_spectrum_report, count_flops, count_params, reference_totals, stage_outputs,
    SpectrumProfile, LOW_FREQ_CUTOFF, REFERENCE_BAND,
};
use fmvit_core::blocks::{Ablation, Model, VariantSpec};
use fmvit_core::reparam::{fuse_model, verify_equivalence, MODEL_TOLERANCE};
use fmvit_core::tensor::{Dims, Tensor};
use fmvit_core::trainer::{
    ablation_lattice, ablation_suite, agreement, evaluate, train, ConvBaseline, GeneratorKind, HistoryPoint,
    Optimizer, Samples, SynthDataset, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::image::decode_pnm;
use crate::report::{dims, human, render_all, ReportFormat, Table};
use crate::spec_file::ModelSpecFile;
use crate::weights::{self, Form};
use crate::{CliError, EXIT_VERIFY_FAILED};

#[derive(Debug, Parser)]
#[command(name = "fmvit", version, about = "Build, train, fuse, verify and analyse hybrid conv/attention backbones")]
pub struct Cli {
    /// Layout of every printed report.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    pub report_format: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Construct a seeded, randomly initialised model and write its weights.
    Build(BuildArgs),
    /// Merge every branch bundle and write the deployed model.
    Fuse(FuseArgs),
    /// Compare two models on seeded inputs; exits 5 when a residual exceeds the tolerance.
    Verify(VerifyArgs),
    /// Shape trace, parameter and MAC counts.
    Analyze(AnalyzeArgs),
    /// Fit a model on the synthetic dataset.
    Train(TrainArgs),
    /// Radial power spectra of the multi-frequency branches.
    Spectrum(SpectrumArgs),
    /// Build, optionally train, and measure each configuration of the module ablation.
    Ablate(AblateArgs),
}

/// Where a model configuration comes from.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SpecSource {
    /// TOML model spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in preset: T, S, M, B, L or nano.
    #[arg(long)]
    pub variant: Option<String>,
}

impl SpecSource {
    fn resolve(&self) -> Result<VariantSpec, CliError> {
        match (&self.spec, &self.variant) {
            (Some(path), _) => read_spec(path),
            (None, Some(name)) => ModelSpecFile::preset(name).to_variant(),
            (None, None) => Err(CliError::Usage("one of --spec or --variant is required".into())),
        }
    }
}

/// A model from a weight file or a fresh build.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// TOML model spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in preset: T, S, M, B, L or nano.
    #[arg(long)]
    pub variant: Option<String>,
}

impl ModelSource {
    fn spec_source(&self) -> SpecSource {
        SpecSource {
            spec: self.spec.clone(),
            variant: self.variant.clone(),
        }
    }

    fn load(&self, seed: u64) -> Result<Model, CliError> {
        match &self.weights {
            Some(path) => weights::load(path),
            None => Ok(Model::build(&self.spec_source().resolve()?, &mut ChaCha8Rng::seed_from_u64(seed))?),
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw batch-norm scales and shifts at random instead of 1 and 0.
    #[arg(long)]
    pub random_bn: bool,
    /// Side of the seeded batch that sets the batch-norm running statistics.
    #[arg(long, default_value_t = 64)]
    pub calib_size: usize,
    #[arg(long, default_value_t = 4)]
    pub calib_samples: usize,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Reference model, usually the training form.
    #[arg(long)]
    pub weights: PathBuf,
    /// Model to compare, usually the deployed form.
    #[arg(long)]
    pub against: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = MODEL_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
    /// Also list every counted op.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Starting weights (training form), a spec or a preset.
    #[command(flatten)]
    pub source: ModelSource,
    /// TOML file with `[train]` and `[data]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the trained weights.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the step/loss/accuracy history as tab-separated columns.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Train the small convolutional reference network instead of the model.
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Default, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// sgd-momentum or adamw-lite.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training set size.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// gabor-texture or colored-shape.
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Side of the synthetic images.
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Binary PGM or PPM image; a seeded normal input is used otherwise.
    #[arg(long, conflicts_with = "seed")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
    /// Also write the per-bin report here as tab-separated columns.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: SpecSource,
    /// Side of the input used for MAC counts.
    #[arg(long, default_value_t = 224)]
    pub count_size: usize,
    /// Train each configuration on the synthetic task and report fused accuracy.
    #[arg(long)]
    pub train: bool,
    /// TOML file with `[train]` and `[data]` tables, used with `--train`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Printed report and process exit code of a successful run.
#[derive(Debug)]
pub struct Outcome {
    pub output: String,
    pub code: i32,
}

impl Outcome {
    fn ok(output: String) -> Self {
        Self { output, code: 0 }
    }
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let f = cli.report_format;
    match cli.command {
        Command::Build(a) => build(a, f),
        Command::Fuse(a) => fuse(a, f),
        Command::Verify(a) => verify(a, f),
        Command::Analyze(a) => analyze(a, f),
        Command::Train(a) => train_cmd(a, f),
        Command::Spectrum(a) => spectrum(a, f),
        Command::Ablate(a) => ablate(a, f),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_spec(path: &Path) -> Result<VariantSpec, CliError> {
    ModelSpecFile::parse(&read_text(path)?)
        .and_then(|s| s.to_variant())
        .map_err(|e| e.in_file(path))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Dims of one `size × size` input, or a usage error when the model cannot
/// take it.
fn input_dims(spec: &VariantSpec, size: usize, flag: &str) -> Result<Dims, CliError> {
    let r = spec.reduction();
    if size == 0 || size % r != 0 {
        return Err(CliError::Usage(format!(
            "{flag} {size} must be a positive multiple of {r} for variant `{}`",
            spec.name
        )));
    }
    Ok([1, spec.in_channels, size, size])
}

fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn ablation_name(a: Ablation) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    format!("fmb={} gmlp={} rlmhsa={}", on(a.fmb), on(a.gmlp), on(a.rlmhsa))
}

fn build(a: BuildArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let spec = a.source.resolve()?;
    let [_, c, h, w] = input_dims(&spec, a.calib_size, "--calib-size")?;
    if a.calib_samples < 2 {
        return Err(CliError::Usage("--calib-samples must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = Model::build(&spec, &mut rng)?;
    if a.random_bn {
        model.randomize_bn(&mut rng);
    }
    model.calibrate_bn(&Tensor::randn([a.calib_samples, c, h, w], 1.0, &mut rng))?;
    let bytes = weights::encode(&model);
    write(&a.out, &bytes)?;
    let mut t = Table::new("build", &[]);
    t.note("variant", &spec.name);
    t.note("form", Form::of(&model).name());
    t.note("parameters", model.param_count());
    t.note("seed", a.seed);
    t.note("batch norm", if a.random_bn { "random affine" } else { "gamma 1, beta 0" });
    t.note("wrote", format!("{} ({} bytes)", a.out.display(), bytes.len()));
    Ok(Outcome::ok(t.render(f)))
}

fn fuse(a: FuseArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let model = weights::load(&a.weights)?;
    let (fused, passes) = fuse_model(&model)?;
    let bytes = weights::encode(&fused);
    write(&a.out, &bytes)?;
    let mut t = Table::new("fuse", &["pass", "layers"]);
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for p in &passes {
        match counts.iter_mut().find(|(n, _)| *n == p.pass) {
            Some(c) => c.1 += 1,
            None => counts.push((p.pass, 1)),
        }
    }
    for (pass, n) in counts {
        t.row(vec![pass.to_string(), n.to_string()]);
    }
    t.note("variant", &model.spec.name);
    t.note("input form", Form::of(&model).name());
    t.note("parameters", format!("{} -> {}", model.param_count(), fused.param_count()));
    t.note("wrote", format!("{} ({} bytes)", a.out.display(), bytes.len()));
    Ok(Outcome::ok(t.render(f)))
}

fn verify(a: VerifyArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    if !(a.tol > 0.0 && a.tol.is_finite()) {
        return Err(CliError::Usage(format!("--tol {} must be positive", a.tol)));
    }
    let ma = weights::load(&a.weights)?;
    let mb = weights::load(&a.against)?;
    let dims = input_dims(&ma.spec, a.input_size, "--input-size")?;
    let r = verify_equivalence(&ma, &mb, a.samples, a.tol, a.seed, dims)?;
    let mut t = Table::new("verify", &["unit", "max_abs_residual", "status"]);
    for (unit, res) in &r.residuals {
        let status = if *res < r.tolerance { "ok" } else { "FAIL" };
        t.row(vec![unit.clone(), sci(*res), status.into()]);
    }
    t.note("forms", format!("{} vs {}", Form::of(&ma).name(), Form::of(&mb).name()));
    t.note("samples", format!("{} at {}x{}", r.samples, a.input_size, a.input_size));
    t.note("tolerance", sci(r.tolerance));
    t.note("end_to_end", sci(r.end_to_end));
    if let Some((unit, res)) = r.worst_layer() {
        t.note("worst_unit", format!("{unit} ({})", sci(res)));
    }
    for s in &r.assumptions {
        t.note("assumption", s);
    }
    t.note("verdict", if r.passed { "PASS" } else { "FAIL" });
    Ok(Outcome {
        output: t.render(f),
        code: if r.passed { 0 } else { EXIT_VERIFY_FAILED },
    })
}

const CHANNEL_RULE_CAVEAT: &str = "multi-frequency stage widths follow an (input, intermediate, output) reading \
of the published channel triples with a projection when the concat width differs; totals depend on that reading";

fn analyze(a: AnalyzeArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let model = a.source.load(0)?;
    let d = input_dims(&model.spec, a.input_size, "--input-size")?;
    let deployed = if model.is_deployed() { model.clone() } else { fuse_model(&model)?.0 };

    let mut shapes = Table::new("shapes", &["unit", "output"]);
    for (unit, o) in block_shapes(&model, d)? {
        shapes.row(vec![unit, dims(o)]);
    }
    for (i, o) in stage_outputs(&model, d)?.iter().enumerate() {
        shapes.note(&format!("stage {i}"), format!("{} (H/{})", dims(*o), a.input_size / o[2]));
    }

    let train_params = count_params(&model).totals;
    let cost = count_flops(&deployed, d)?;
    let deployed_params = count_params(&deployed).totals.params;
    let mut totals = Table::new("totals", &[]);
    totals.note("variant", &model.spec.name);
    totals.note("input", dims(d));
    totals.note("params_training", train_params.params);
    totals.note("params_deployed", deployed_params);
    totals.note("bn_running_stats", train_params.running);
    totals.note("macs", cost.totals.macs);
    totals.note("flops_2x_macs", cost.flops());
    totals.note("adds", cost.totals.adds);
    totals.note("summary", format!("{} params, {} MACs", human(deployed_params as f64), human(cost.totals.macs as f64)));
    if let Some((ref_mp, ref_gmacs)) = reference_totals(&model.spec.name) {
        let mp = deployed_params as f64 / 1e6;
        // References are quoted at 224².
        let gmacs = cost.totals.macs as f64 / 1e9 * (224.0 * 224.0) / (a.input_size * a.input_size) as f64;
        let verdict = |ours: f64, theirs: f64| {
            let gap = (ours - theirs) / theirs;
            let label = if gap.abs() <= REFERENCE_BAND { "consistent" } else { "interpretation deviation" };
            format!("{ours:.2} vs {theirs} ({:+.1}%, {label})", 100.0 * gap)
        };
        totals.note("reference_params_M", verdict(mp, ref_mp));
        totals.note("reference_gmacs_at_224", verdict(gmacs, ref_gmacs));
        totals.note("caveat", CHANNEL_RULE_CAVEAT);
    }

    let mut tables = vec![shapes, totals];
    if a.layers {
        let mut ops = Table::new("ops", &["path", "op", "params", "macs", "adds", "output"]);
        for r in &cost.rows {
            ops.row(vec![
                r.path.clone(),
                r.op.to_string(),
                r.params.to_string(),
                r.macs.to_string(),
                r.adds.to_string(),
                r.output_dims.map(dims).unwrap_or_default(),
            ]);
        }
        tables.push(ops);
    }
    Ok(Outcome::ok(render_all(&tables, f)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    data: DataSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<String>,
    lr: Option<f64>,
    warmup_steps: Option<usize>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    eval_interval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    generator: Option<String>,
    samples: Option<usize>,
    eval_samples: Option<usize>,
    classes: Option<usize>,
    input_size: Option<usize>,
    seed: Option<u64>,
}

/// Everything a training run needs, resolved from defaults, the config file
/// and flags, in that order of precedence (lowest first).
struct RunPlan {
    config: TrainConfig,
    generator: GeneratorKind,
    samples: usize,
    eval_samples: usize,
    classes: usize,
    input_size: usize,
    data_seed: u64,
}

impl RunPlan {
    fn resolve(path: Option<&Path>, o: &TrainOverrides, model_classes: usize) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => toml::from_str::<RunFile>(&read_text(p)?)
                .map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?,
            None => RunFile::default(),
        };
        let (t, d) = (file.train, file.data);
        let mut config = TrainConfig {
            steps: 600,
            warmup_steps: 30,
            ..TrainConfig::default()
        };
        macro_rules! set {
            ($dst:expr, $($src:expr),+) => {$( if let Some(v) = $src.clone() { $dst = v; } )+};
        }
        set!(config.steps, t.steps, o.steps);
        set!(config.batch_size, t.batch_size, o.batch);
        set!(config.lr, t.lr, o.lr);
        set!(config.warmup_steps, t.warmup_steps, o.warmup);
        set!(config.weight_decay, t.weight_decay);
        set!(config.seed, t.seed, o.seed);
        set!(config.eval_interval, t.eval_interval);
        if let Some(name) = o.optimizer.as_ref().or(t.optimizer.as_ref()) {
            config.optimizer = Optimizer::parse(name)?;
        }
        let generator = GeneratorKind::parse(o.generator.as_deref().or(d.generator.as_deref()).unwrap_or("gabor-texture"))?;
        let mut plan = RunPlan {
            generator,
            samples: 1024,
            eval_samples: 512,
            classes: model_classes.min(8),
            input_size: 32,
            data_seed: 0,
            config,
        };
        set!(plan.samples, d.samples, o.samples);
        set!(plan.eval_samples, d.eval_samples, o.eval_samples);
        set!(plan.classes, d.classes, o.classes);
        set!(plan.input_size, d.input_size, o.input_size);
        set!(plan.data_seed, d.seed);
        if plan.classes < 2 || plan.classes > model_classes {
            return Err(CliError::Usage(format!(
                "dataset classes {} must be between 2 and the model's {model_classes}",
                plan.classes
            )));
        }
        if plan.samples == 0 || plan.eval_samples == 0 {
            return Err(CliError::Usage("dataset sizes must be positive".into()));
        }
        plan.config.validate()?;
        Ok(plan)
    }

    fn datasets(&self, channels: usize) -> Result<(Samples, Samples), CliError> {
        let image = [channels, self.input_size, self.input_size];
        let train = SynthDataset::new(self.data_seed, self.samples, self.classes, image, self.generator).generate()?;
        let eval = SynthDataset::new(self.data_seed + 1, self.eval_samples, self.classes, image, self.generator)
            .generate()?;
        Ok((train, eval))
    }

    fn describe(&self, t: &mut Table) {
        let c = &self.config;
        t.note(
            "data",
            format!(
                "{} {}x{}, {} classes, {} train / {} eval",
                self.generator.name(),
                self.input_size,
                self.input_size,
                self.classes,
                self.samples,
                self.eval_samples
            ),
        );
        t.note(
            "schedule",
            format!(
                "{} steps, batch {}, {} lr {} warmup {}",
                c.steps,
                c.batch_size,
                c.optimizer.name(),
                c.lr,
                c.warmup_steps
            ),
        );
    }
}

fn history_table(history: &[HistoryPoint]) -> Table {
    let mut t = Table::new("history", &["step", "loss", "acc"]);
    for h in history {
        t.row(vec![h.step.to_string(), format!("{:.6}", h.loss), format!("{:.4}", h.accuracy)]);
    }
    t
}

fn train_cmd(a: TrainArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let seed = a.overrides.seed.unwrap_or(0);
    let mut model = a.source.load(seed)?;
    if model.is_deployed() {
        return Err(CliError::Usage("a deployed model has no branches left to train; pass training weights".into()));
    }
    if a.baseline && a.out.is_some() {
        return Err(CliError::Usage("--out writes model weights and cannot be combined with --baseline".into()));
    }
    let plan = RunPlan::resolve(a.config.as_deref(), &a.overrides, model.classes())?;
    input_dims(&model.spec, plan.input_size, "--input-size")?;
    let (train_set, eval_set) = plan.datasets(model.spec.in_channels)?;

    let mut summary = Table::new("train", &[]);
    plan.describe(&mut summary);
    let history = if a.baseline {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.config.seed);
        let mut net = ConvBaseline::new(model.spec.in_channels, 16, model.classes(), &mut rng);
        let history = train(&mut net, &train_set, &plan.config)?;
        summary.note("model", "conv baseline (width 16)");
        summary.note("train_accuracy", pct(evaluate(&net, &train_set)?.accuracy));
        summary.note("eval_accuracy", pct(evaluate(&net, &eval_set)?.accuracy));
        history
    } else {
        let history = train(&mut model, &train_set, &plan.config)?;
        let fused = fuse_model(&model)?.0;
        let tr = evaluate(&model, &train_set)?;
        let ev = evaluate(&model, &eval_set)?;
        let fv = evaluate(&fused, &eval_set)?;
        summary.note("model", &model.spec.name);
        summary.note("train_accuracy", pct(tr.accuracy));
        summary.note("eval_accuracy", pct(ev.accuracy));
        summary.note("fused_eval_accuracy", pct(fv.accuracy));
        summary.note("fused_agreement", pct(agreement(&ev.predictions, &fv.predictions)));
        if let Some(out) = &a.out {
            let bytes = weights::encode(&model);
            write(out, &bytes)?;
            summary.note("wrote", format!("{} ({} bytes)", out.display(), bytes.len()));
        }
        history
    };
    let hist = history_table(&history);
    if let Some(path) = &a.history {
        write(path, hist.render(ReportFormat::Columnar))?;
        summary.note("history", path.display());
    }
    Ok(Outcome::ok(render_all(&[hist, summary], f)))
}

fn spectrum(a: SpectrumArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let model = weights::load(&a.weights)?;
    let (x, source) = match &a.image {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let x = decode_pnm(&bytes).map_err(|e| e.in_file(path))?;
            let [_, c, h, w] = x.dims();
            if c != model.spec.in_channels {
                return Err(CliError::Usage(format!(
                    "{} has {c} channels, the model takes {}",
                    path.display(),
                    model.spec.in_channels
                )));
            }
            let r = model.spec.reduction();
            if h % r != 0 || w % r != 0 {
                return Err(CliError::Usage(format!("image sides {h}x{w} must be multiples of {r}")));
            }
            (x, path.display().to_string())
        }
        None => {
            let seed = a.seed.unwrap_or(0);
            let d = input_dims(&model.spec, a.input_size, "--input-size")?;
            let x = Tensor::randn(d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            (x, format!("seeded normal input (seed {seed})"))
        }
    };
    let profiles = branch_spectrum_report(&model, &x)?;

    let mut t = Table::new("spectrum", &["block", "branch", "low_freq_ratio", "spatial_energy", "parseval_rel_gap"]);
    for p in &profiles {
        let gap = (p.spatial_energy - p.spectral_energy).abs() / p.spatial_energy.max(f64::MIN_POSITIVE);
        t.row(vec![
            p.block.clone(),
            p.branch.clone(),
            format!("{:.4}", p.low_freq_ratio),
            sci(p.spatial_energy),
            sci(gap),
        ]);
    }
    t.note("input", source);
    t.note("low_freq_cutoff", format!("{LOW_FREQ_CUTOFF} of Nyquist"));
    t.note("attention_tap", qualitative_note(&profiles));
    let bins = bins_table(&profiles);
    if let Some(out) = &a.out {
        write(out, bins.render(ReportFormat::Columnar))?;
        t.note("wrote", out.display());
    }
    Ok(Outcome::ok(render_all(&[t, bins], f)))
}

fn bins_table(profiles: &[SpectrumProfile]) -> Table {
    let edges = SpectrumProfile::bin_edges();
    let heads: Vec<String> = edges.iter().map(|e| format!("r<={e:.3}")).collect();
    let mut cols = vec!["block", "branch"];
    cols.extend(heads.iter().map(String::as_str));
    let mut t = Table::new("radial energy fractions", &cols);
    for p in profiles {
        let mut row = vec![p.block.clone(), p.branch.clone()];
        row.extend(p.radial_bins.iter().map(|v| format!("{v:.6}")));
        t.row(row);
    }
    t
}

/// How often the attention tap `f1` carries a larger low-frequency share
/// than the mean of the convolutional taps `f3..f5`.
fn qualitative_note(profiles: &[SpectrumProfile]) -> String {
    let mut blocks: Vec<&str> = profiles.iter().map(|p| p.block.as_str()).collect();
    blocks.dedup();
    let (mut lower, mut total) = (0, 0);
    for b in &blocks {
        let of = |name: &str| profiles.iter().find(|p| p.block == *b && p.branch == name);
        let Some(att) = of("f1") else { continue };
        let conv: Vec<f64> = ["f3", "f4", "f5"].iter().filter_map(|n| of(n)).map(|p| p.low_freq_ratio).collect();
        if conv.is_empty() {
            continue;
        }
        total += 1;
        if att.low_freq_ratio > conv.iter().sum::<f64>() / conv.len() as f64 {
            lower += 1;
        }
    }
    if total == 0 {
        return "no block has both attention and convolutional taps".into();
    }
    format!("f1 is more low-frequency than the mean of f3..f5 in {lower} of {total} blocks (observation, not a guarantee)")
}

fn ablate(a: AblateArgs, f: ReportFormat) -> Result<Outcome, CliError> {
    let spec = a.source.resolve()?;
    let d = input_dims(&spec, a.count_size, "--count-size")?;
    let plan = if a.train {
        let plan = RunPlan::resolve(a.config.as_deref(), &a.overrides, spec.classes)?;
        input_dims(&spec, plan.input_size, "data input size")?;
        Some(plan)
    } else {
        None
    };
    let data = match &plan {
        Some(p) => Some(p.datasets(spec.in_channels)?),
        None => None,
    };
    let training = match (&plan, &data) {
        (Some(p), Some((tr, ev))) => Some((tr, ev, &p.config)),
        _ => None,
    };
    let rows = ablation_suite(&spec, &ablation_lattice(), d, training, a.overrides.seed.unwrap_or(0))?;
    let mut t = Table::new("ablation", &["config", "params", "attention_params", "macs", "fused_accuracy"]);
    for r in &rows {
        t.row(vec![
            ablation_name(r.ablation),
            r.params.to_string(),
            r.attention_params.to_string(),
            r.macs.to_string(),
            r.accuracy.map(pct).unwrap_or_else(|| "-".into()),
        ]);
    }
    t.note("variant", &spec.name);
    t.note("input", dims(d));
    if let Some(p) = &plan {
        p.describe(&mut t);
    }
    Ok(Outcome::ok(t.render(f)))
}
