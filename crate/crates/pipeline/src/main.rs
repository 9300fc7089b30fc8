use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphoflow::config::env_seed;
use morphoflow::eval::{evaluate, read_rows, write_rows};
use morphoflow::report::{summarize, summary_csv, write_report, SUBSTITUTION_NOTE};
use morphoflow::stage1::{load_cache, train_stage1};
use morphoflow::stage2::{smoothed, Stage2, SMOOTHING_WINDOW};
use morphoflow::synth::{propagate_labels, write_sample, SynthesisRequest, Synthesizer};
use morphoflow::{Error, Result, RunConfig};
use morphoflow_core::dataset::{load_dataset, load_subject, INDEX_FILE, MANIFEST_FILE};
use morphoflow_core::io::{create_dir, read_volume};
use morphoflow_core::synthdata::{generate_dataset, PhantomSpec};
use morphoflow_core::{detjac_report_csv, Boundary, DetJacRow, DiseaseLabel, Shape, SubjectRecord};

#[derive(Parser)]
#[command(name = "morphoflow", version, about = "Longitudinal brain trajectory synthesis with velocity-field diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal phantom dataset.
    GenData(GenData),
    /// Register every subject's baseline to its follow-ups and cache velocities.
    Register(Register),
    /// Train the diffusion transformer on cached velocities.
    Train(Train),
    /// Sample follow-up scans from a trained checkpoint.
    Sample(Sample),
    /// Compare predicted follow-ups with references.
    Eval(Eval),
    /// Summarize an evaluation CSV and plot metric trends.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    frames: usize,
    /// Edge length, or HxWxL.
    #[arg(long, value_parser = parse_shape)]
    shape: Shape,
    #[arg(long)]
    seed: Option<u64>,
    /// Proportions of CN, MCI and AD subjects.
    #[arg(long, value_parser = parse_triple)]
    class_mix: Option<[f64; 3]>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
struct Register {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Velocity grid, coarser than the images.
    #[arg(long, value_parser = parse_shape)]
    field_shape: Option<Shape>,
    /// Run configuration supplying defaults for the options above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    velocities: PathBuf,
    /// Run configuration; defaults match the cache's shapes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: usize,
    /// Run directory receiving config, losses and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    /// A raw baseline volume, a subject directory or a dataset directory.
    #[arg(long)]
    baseline: PathBuf,
    /// Comma-separated target ages; defaults to each subject's follow-up ages.
    #[arg(long, value_delimiter = ',')]
    ages: Option<Vec<f64>>,
    /// CN, MCI or AD; defaults to each subject's label.
    #[arg(long)]
    label: Option<String>,
    /// Baseline age for a raw baseline; one year before the first target
    /// when omitted.
    #[arg(long)]
    baseline_age: Option<f64>,
    /// Subject id for a raw baseline.
    #[arg(long, default_value = "sample")]
    subject: String,
    /// Restrict a dataset to these comma-separated subject ids.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "corrector-M")]
    corrector_m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    plots: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<usize> = s.split(['x', 'X', ',']).map(|d| d.trim().parse().map_err(|_| format!("bad shape {s:?}"))).collect::<std::result::Result<_, _>>()?;
    match dims[..] {
        [n] => Ok(Shape::cube(n)),
        [h, w, l] => Ok(Shape([h, w, l])),
        _ => Err(format!("shape {s:?} needs one or three dimensions")),
    }
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|a| a.trim().parse::<f64>().map_err(|_| format!("bad number {a:?}"))).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_label(s: &str) -> Result<DiseaseLabel> {
    s.parse().map_err(|e: morphoflow_core::Error| Error::usage(e.to_string()))
}

fn gen_data(a: GenData) -> Result<()> {
    let mut spec = PhantomSpec { shape: a.shape, n_subjects: a.subjects, frames: a.frames, ..PhantomSpec::default() };
    spec.seed = a.seed.or_else(env_seed).unwrap_or(spec.seed);
    if let Some(mix) = a.class_mix {
        spec.class_mix = mix;
    }
    if let Some(sigma) = a.noise_sigma {
        spec.noise_sigma = sigma;
    }
    if a.subjects == 0 || a.frames == 0 {
        return Err(Error::usage("--subjects and --frames must be positive"));
    }
    generate_dataset(&spec, &a.out)?;
    println!("{}", a.out.join(INDEX_FILE).display());
    Ok(())
}

fn register(a: Register) -> Result<()> {
    if let Some(jobs) = a.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| Error::usage(e.to_string()))?;
    }
    if !a.data.join(INDEX_FILE).is_file() {
        return Err(Error::usage(format!("{} is not a dataset directory", a.data.display())));
    }
    let (_, records) = load_dataset(&a.data)?;
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let shape = records.first().map(|r| r.shape()).ok_or_else(|| Error::usage("dataset has no subjects"))?;
            RunConfig { image_shape: shape, field_shape: shape, ..RunConfig::default() }
        }
    };
    let mut reg = base.registration()?;
    reg.iterations = a.iters.unwrap_or(reg.iterations);
    reg.lambda = a.lambda.unwrap_or(reg.lambda);
    if let Some(fs) = a.field_shape {
        reg.field_shape = (fs != records[0].shape()).then_some(fs);
    }
    let cache = train_stage1(&records, &reg, &a.out)?;
    for f in &cache.failures {
        eprintln!("registration failed for {}: {}", f.subject_id, f.error);
    }
    println!(
        "registered {} subjects ({} failed); mean ssd reduction {:.3}",
        cache.subjects.len(),
        cache.failures.len(),
        cache.mean_ssd_reduction()
    );
    if cache.subjects.is_empty() {
        return Err(Error::usage("every subject failed to register"));
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let (cache, seqs) = load_cache(&a.velocities)?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            image_shape: cache.image_shape,
            field_shape: cache.field_shape,
            frames: seqs.iter().map(|s| s.velocities.len()).max().unwrap_or(1),
            ..RunConfig::default()
        },
    };
    if cfg.image_shape != cache.image_shape || cfg.field_shape != cache.field_shape {
        return Err(Error::usage(format!(
            "config shapes {} / {} do not match the cache's {} / {}",
            cfg.image_shape, cfg.field_shape, cache.image_shape, cache.field_shape
        )));
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    let mut run = Stage2::new(&seqs, &cfg)?;
    for step in 1..=a.steps {
        run.step()?;
        if step % 50 == 0 || step == a.steps {
            let s = smoothed(run.losses(), SMOOTHING_WINDOW);
            eprintln!("step {step}/{} loss {:.4}", a.steps, s[step - 1]);
        }
    }
    let saved = run.save(&a.out)?;
    println!("{}", saved.checkpoint.display());
    Ok(())
}

/// Baselines named by `--baseline`, with their known ages and labels.
fn sample_inputs(a: &Sample, synth: &Synthesizer) -> Result<Vec<SubjectRecord>> {
    let p = &a.baseline;
    let mut records = if p.join(INDEX_FILE).is_file() {
        load_dataset(p)?.1
    } else if p.join(MANIFEST_FILE).is_file() {
        vec![load_subject(p)?]
    } else if p.is_file() {
        let cfg = synth.config();
        let ages = a.ages.as_ref().ok_or_else(|| Error::usage("--ages is required with a raw baseline"))?;
        let label = parse_label(a.label.as_deref().ok_or_else(|| Error::usage("--label is required with a raw baseline"))?)?;
        let first = *ages.first().ok_or_else(|| Error::usage("--ages is empty"))?;
        let baseline = read_volume(p, cfg.image_shape, Boundary::Clamp)?;
        vec![SubjectRecord::new(a.subject.clone(), baseline, vec![], vec![a.baseline_age.unwrap_or(first - 1.0)], label)?]
    } else {
        return Err(Error::usage(format!("baseline {} does not exist", p.display())));
    };
    if let Some(ids) = &a.subjects {
        if let Some(missing) = ids.iter().find(|id| !records.iter().any(|r| &r.subject_id == *id)) {
            return Err(Error::usage(format!("subject {missing} is not in {}", p.display())));
        }
        records.retain(|r| ids.contains(&r.subject_id));
    }
    Ok(records)
}

fn sample(a: Sample) -> Result<()> {
    let mut synth = Synthesizer::load(&a.ckpt)?;
    if let Some(m) = a.corrector_m {
        synth = synth.with_corrector_steps(m);
    }
    let label = a.label.as_deref().map(parse_label).transpose()?;
    let records = sample_inputs(&a, &synth)?;
    let requests: Vec<SynthesisRequest> = records
        .iter()
        .map(|r| SynthesisRequest {
            baseline: r.baseline.clone(),
            baseline_age: Some(r.baseline_age()),
            ages: a.ages.clone().unwrap_or_else(|| r.followup_ages().to_vec()),
            label: label.unwrap_or(r.label),
        })
        .collect();
    let seed = a.seed.or(synth.config().seed).or_else(env_seed).unwrap_or(0);
    let results = synth.synthesize(&requests, seed)?;
    let samples = a.out.join(morphoflow::eval::SAMPLES_DIR);
    create_dir(&samples)?;
    let mut rows = Vec::new();
    for ((rec, req), syn) in records.iter().zip(&requests).zip(&results) {
        let labels = rec.segmentation.as_ref().map(|s| propagate_labels(s, &syn.deformations)).transpose()?;
        let dir = samples.join(&rec.subject_id);
        write_sample(&dir, &rec.subject_id, req.label, &rec.baseline, rec.baseline_age(), syn, labels.as_deref())?;
        for (t, stats) in syn.detjac.iter().enumerate() {
            rows.push(DetJacRow { model: format!("ldt:{}", rec.subject_id), frame: t + 1, stats: *stats });
        }
        println!("{}", dir.display());
    }
    let path = a.out.join("detjac_report.csv");
    std::fs::write(&path, detjac_report_csv(&rows)).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let rows = evaluate(&a.pred, &a.reference)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_rows(&a.report, &rows)?;
    println!("{} rows written to {}", rows.len(), a.report.display());
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let rows = read_rows(&a.csv)?;
    let files = write_report(&rows, &a.plots)?;
    print!("{}", summary_csv(&summarize(&rows)));
    println!("{SUBSTITUTION_NOTE}");
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Register(a) => register(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
