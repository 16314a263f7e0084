use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use segslu::data::{self, Manifest, Split, ToyCorpusSpec};
use segslu::feat::{apply_cmvn, extract_features, AudioBuffer, CmvnMode, CmvnStats};
use segslu::nn::{Architecture, ModelWeights};
use segslu::stream::{bench_latency, classify_windows, segment_stream, StreamConfig, Window};
use segslu::train::{self, CmvnKind, Dataset, EpochMetrics, Example, TrainConfig};
use segslu::weights::{self, LoadedModel};

use crate::{BenchArgs, ClassifyArgs, Cli, Command, EvalArgs, Format, GenToyArgs, ModelArgs, SplitArg, SweepArgs, TrainArgs};

/// Bad invocation, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

/// Streaming latency ratios reported for the reference system, as
/// (segment s, step s, percent).
const REFERENCE_RATIOS: [(f64, f64, f64); 2] = [(1.75, 0.75, 43.0), (1.0, 0.25, 25.0)];

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenToy(a) => gen_toy(a, cli.format),
        Command::Train(a) => train_cmd(a, cli.format),
        Command::Eval(a) => eval(a, cli.format),
        Command::Classify(a) => classify(a, cli.format),
        Command::Sweep(a) => sweep(a, cli.format),
        Command::Bench(a) => bench(a, cli.format),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

pub fn cmvn_path(weights: &Path) -> PathBuf {
    let mut s = OsString::from(weights.as_os_str());
    s.push(".cmvn");
    PathBuf::from(s)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn cmvn_name(k: CmvnKind) -> &'static str {
    match k {
        CmvnKind::None => "none",
        CmvnKind::Global => "global",
        CmvnKind::Utterance => "utterance",
    }
}

struct Model {
    loaded: LoadedModel,
    cmvn: CmvnKind,
    stats: Option<CmvnStats>,
}

impl Model {
    fn open(args: &ModelArgs) -> Result<Self> {
        require_file(&args.weights, "weight file")?;
        let loaded = weights::load_model(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
        let stats = match args.cmvn {
            CmvnKind::Global => {
                let p = cmvn_path(&args.weights);
                Some(weights::load_cmvn(&p).with_context(|| format!("global CMVN needs {}", p.display()))?)
            }
            _ => None,
        };
        Ok(Self {
            loaded,
            cmvn: args.cmvn,
            stats,
        })
    }

    fn weights(&self) -> &ModelWeights<f32> {
        &self.loaded.weights
    }

    fn label(&self, id: usize) -> String {
        self.loaded
            .labels
            .as_ref()
            .and_then(|l| l.get(id).cloned())
            .unwrap_or_else(|| id.to_string())
    }

    fn mode(&self) -> CmvnMode<'_> {
        match (self.cmvn, &self.stats) {
            (CmvnKind::Global, Some(s)) => CmvnMode::Global(s),
            (CmvnKind::Utterance, _) => CmvnMode::Utterance,
            _ => CmvnMode::None,
        }
    }

    fn normalize(&self, examples: Vec<Example>) -> Result<Vec<Example>> {
        let mode = self.mode();
        examples
            .into_iter()
            .map(|e| {
                Ok(Example {
                    features: apply_cmvn(&e.features, mode)?,
                    label: e.label,
                })
            })
            .collect()
    }

    fn manifest(&self, path: &Path) -> Result<Manifest> {
        require_file(path, "manifest")?;
        let m = data::load_manifest(path, self.loaded.labels.as_deref())?;
        let k = self.weights().arch.num_intents;
        if m.num_classes() != k {
            bail!("manifest has {} labels, model has {k} outputs", m.num_classes());
        }
        Ok(m)
    }

    fn examples(&self, manifest: &Path, split: SplitArg) -> Result<Vec<Example>> {
        let m = self.manifest(manifest)?;
        let ex = data::load_examples(m.split(split_of(split)))?;
        if ex.is_empty() {
            bail!("no {:?} rows in {}", split, manifest.display());
        }
        self.normalize(ex)
    }
}

fn gen_toy(a: &GenToyArgs, format: Format) -> Result<()> {
    let spec = ToyCorpusSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        seed: a.seed,
        ..ToyCorpusSpec::default()
    };
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let m = data::generate_toy_corpus(&spec, &a.out)?;
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| m.split(s).count()).collect();
    let manifest = a.out.join("manifest.csv");
    match format {
        Format::Csv => {
            println!("manifest,rows,train,val,test");
            println!("{},{},{},{},{}", manifest.display(), m.entries.len(), counts[0], counts[1], counts[2]);
        }
        Format::Json => println!(
            "{}",
            json!({"manifest": manifest, "rows": m.entries.len(), "train": counts[0], "val": counts[1], "test": counts[2]})
        ),
    }
    Ok(())
}

/// Train and validation examples; Fluent-style manifests without a split
/// column take their validation rows from a sibling `valid_data.csv`.
fn training_data(path: &Path) -> Result<(Manifest, Dataset)> {
    require_file(path, "manifest")?;
    let m = data::load_manifest(path, None)?;
    if m.has_splits() {
        let train = data::load_examples(m.split(Split::Train))?;
        let val = data::load_examples(m.split(Split::Val))?;
        return Ok((m, Dataset { train, val }));
    }
    let sibling = path.with_file_name("valid_data.csv");
    if !sibling.is_file() {
        bail!(
            "{} has no split column and no sibling valid_data.csv for validation",
            path.display()
        );
    }
    let vm = data::load_manifest(&sibling, Some(&m.vocab))?;
    let train = data::load_examples(&m.entries)?;
    let val = data::load_examples(&vm.entries)?;
    Ok((m, Dataset { train, val }))
}

fn train_cmd(a: &TrainArgs, format: Format) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        early_stop_patience: a.patience,
        seed: a.seed,
        cmvn_mode: a.cmvn,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let (manifest, data) = training_data(&a.manifest)?;
    let init = ModelWeights::<f32>::init(Architecture::standard(manifest.num_classes()), a.seed)?;

    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = OsString::from(a.weights.as_os_str());
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    let mut metrics = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    writeln!(metrics, "{}", EpochMetrics::CSV_HEADER)?;
    if format == Format::Csv {
        println!("{}", EpochMetrics::CSV_HEADER);
    }
    let mut write_err = None;
    let outcome = train::train(init, &data, &cfg, |m| {
        if let Err(e) = writeln!(metrics, "{}", m.csv_line()) {
            write_err.get_or_insert(e);
        }
        if format == Format::Csv {
            println!("{}", m.csv_line());
        }
        eprintln!("epoch {} val_loss {:.4} val_error {:.4}", m.epoch, m.val_loss, m.val_error_rate);
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    weights::save(&outcome.weights, Some(&manifest.vocab), &a.weights)?;
    if let Some(stats) = &outcome.cmvn {
        weights::save_cmvn(stats, cmvn_path(&a.weights))?;
    }
    if format == Format::Json {
        println!(
            "{}",
            json!({
                "weights": a.weights,
                "metrics": metrics_path,
                "best_epoch": outcome.best_epoch,
                "history": outcome.history,
            })
        );
    }
    Ok(())
}

fn eval(a: &EvalArgs, format: Format) -> Result<()> {
    let model = Model::open(&a.model)?;
    let examples = model.examples(&a.manifest, a.split)?;
    let r = train::evaluate(model.weights(), &examples)?;
    let split = format!("{:?}", a.split).to_lowercase();
    match format {
        Format::Csv => {
            println!("split,cmvn,total,correct,error_rate,loss");
            println!(
                "{split},{},{},{},{:.6},{:.6}",
                cmvn_name(a.model.cmvn),
                r.total,
                r.correct,
                r.error_rate,
                r.loss
            );
        }
        Format::Json => println!(
            "{}",
            json!({"split": split, "cmvn": cmvn_name(a.model.cmvn), "total": r.total, "correct": r.correct,
                   "error_rate": r.error_rate, "loss": r.loss})
        ),
    }
    Ok(())
}

fn stream_config(segment: f64, step: f64, align: crate::AlignArg) -> Result<StreamConfig> {
    Ok(StreamConfig::new(segment, step)
        .map_err(|e| UsageError(e.to_string()))?
        .with_alignment(align.into()))
}

fn classify(a: &ClassifyArgs, format: Format) -> Result<()> {
    let model = Model::open(&a.model)?;
    let cfg = match (a.segment, a.step) {
        (Some(s), Some(t)) => Some(stream_config(s, t, a.align)?),
        _ => None,
    };
    for f in &a.files {
        require_file(f, "audio file")?;
    }
    let results: Vec<(usize, f32, usize)> = a
        .files
        .par_iter()
        .map(|f| -> Result<_> {
            let audio = data::read_wav(f)?;
            let feats = apply_cmvn(&extract_features(&audio)?, model.mode())?;
            let windows = match &cfg {
                Some(c) => segment_stream(feats.len(), c)?,
                None => vec![Window { start: 0, end: feats.len() }],
            };
            let (post, _) = classify_windows(feats.frames(), &windows, model.weights())?;
            let id = post.argmax();
            Ok((id, post.probs[id], windows.len()))
        })
        .collect::<Result<_>>()?;
    match format {
        Format::Csv => {
            println!("path,intent_id,label,probability,segments");
            for (f, (id, p, n)) in a.files.iter().zip(&results) {
                println!("{},{id},{},{p:.6},{n}", f.display(), model.label(*id));
            }
        }
        Format::Json => {
            let rows: Vec<_> = a
                .files
                .iter()
                .zip(&results)
                .map(|(f, (id, p, n))| json!({"path": f, "intent_id": id, "label": model.label(*id), "probability": p, "segments": n}))
                .collect();
            println!("{}", serde_json::Value::Array(rows));
        }
    }
    Ok(())
}

fn sweep(a: &SweepArgs, format: Format) -> Result<()> {
    let model = Model::open(&a.model)?;
    let mut cells = Vec::new();
    for &s in &a.segments {
        for &t in &a.steps {
            cells.push(stream_config(s, t, a.align)?);
        }
    }
    let examples = model.examples(&a.manifest, a.split)?;
    let rates: Vec<f64> = cells
        .par_iter()
        .map(|cfg| -> Result<f64> {
            let mut wrong = 0usize;
            for ex in &examples {
                let windows = segment_stream(ex.features.len(), cfg)?;
                let (post, _) = classify_windows(ex.features.frames(), &windows, model.weights())?;
                if post.argmax() != ex.label {
                    wrong += 1;
                }
            }
            Ok(wrong as f64 / examples.len() as f64)
        })
        .collect::<Result<_>>()?;
    let n_t = a.steps.len();
    match format {
        Format::Csv => {
            let header: Vec<String> = a.steps.iter().map(|t| t.to_string()).collect();
            println!("segment\\step,{}", header.join(","));
            for (i, s) in a.segments.iter().enumerate() {
                let row: Vec<String> = rates[i * n_t..(i + 1) * n_t].iter().map(|r| format!("{r:.6}")).collect();
                println!("{s},{}", row.join(","));
            }
        }
        Format::Json => {
            let matrix: Vec<&[f64]> = rates.chunks(n_t).collect();
            println!(
                "{}",
                json!({"segments": a.segments, "steps": a.steps, "cmvn": cmvn_name(a.model.cmvn), "error_rates": matrix})
            );
        }
    }
    Ok(())
}

fn reference_ratio(segment: f64, step: f64) -> Option<f64> {
    REFERENCE_RATIOS
        .iter()
        .find(|(s, t, _)| (s - segment).abs() < 1e-9 && (t - step).abs() < 1e-9)
        .map(|r| r.2)
}

fn bench(a: &BenchArgs, format: Format) -> Result<()> {
    if a.model.cmvn == CmvnKind::Utterance {
        return Err(UsageError("streaming needs causal normalization: use --cmvn global or none".into()).into());
    }
    let model = Model::open(&a.model)?;
    let audio: AudioBuffer = match &a.audio {
        Some(p) => {
            require_file(p, "audio file")?;
            data::read_wav(p)?
        }
        None => {
            if a.duration.is_nan() || a.duration < 0.7 {
                return Err(UsageError(format!("--duration {} s is too short", a.duration)).into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let k = model.weights().arch.num_intents.max(2);
            data::toy_utterance(a.seed as usize % k, k, a.duration, &mut rng)
        }
    };
    let configs: Vec<StreamConfig> = match (a.segment, a.step) {
        (Some(s), Some(t)) => vec![stream_config(s, t, crate::AlignArg::Free)?],
        _ => REFERENCE_RATIOS
            .iter()
            .map(|&(s, t, _)| stream_config(s, t, crate::AlignArg::Free))
            .collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for cfg in &configs {
        let b = bench_latency(&audio, cfg, model.weights(), model.stats.as_ref(), a.repeats)?;
        rows.push((b, reference_ratio(cfg.segment_seconds, cfg.step_seconds)));
    }
    match format {
        Format::Csv => {
            println!("mode,segment,step,audio_seconds,segments,beta_ms,alpha_ms,ratio_percent,reference_ratio_percent,max_segment_ms,realtime_ok");
            if let Some((b, _)) = rows.first() {
                let beta = b.median.beta_seconds * 1e3;
                println!(
                    "full,,,{:.3},1,{beta:.3},{beta:.3},100.000,100,{beta:.3},",
                    b.audio_seconds
                );
            }
            for (b, r) in &rows {
                println!(
                    "stream,{},{},{:.3},{},{:.3},{:.3},{:.3},{},{:.3},{}",
                    b.config.segment_seconds,
                    b.config.step_seconds,
                    b.audio_seconds,
                    b.median.per_segment_times.len(),
                    b.median.beta_seconds * 1e3,
                    b.median.alpha_seconds * 1e3,
                    b.median.ratio_percent,
                    r.map(|v| v.to_string()).unwrap_or_default(),
                    b.max_segment_seconds * 1e3,
                    b.realtime_ok
                );
            }
        }
        Format::Json => {
            let out: Vec<_> = rows
                .iter()
                .map(|(b, r)| json!({"summary": b, "reference_ratio_percent": r}))
                .collect();
            println!("{}", serde_json::Value::Array(out));
        }
    }
    for (b, r) in &rows {
        if let Some(r) = r {
            eprintln!(
                "S={} s T={} s: measured {:.1}% of full-signal latency (reference system: {r}%)",
                b.config.segment_seconds, b.config.step_seconds, b.median.ratio_percent
            );
        }
    }
    Ok(())
}
