//! `menan`: synthesize a corpus, extract features, train, evaluate, probe
//! and export embeddings.
//!
//! Data root layout:
//!
//! ```text
//! manifest.csv          id,path,speaker_id,emotion,duration_s
//! wav/                  16 kHz audio
//! folds.json            leave-one-speaker-out folds
//! features/index.csv    one row per (possibly speed-perturbed) utterance
//! features/*.fea
//! runs/<regime>/        default training output
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use menan::config::RunConfig;
use menan::corpus::{
    generate_synthetic, make_folds, prepare_utterances, read_feature_store, read_folds, sessions_from_speakers,
    write_feature_store, write_folds, FoldData, FoldSpec, Manifest, Utterance,
};
use menan::dsp::{read_wav, write_wav};
use menan::eval::{evaluate_fold, export_embeddings, probe_model, run_cv, write_json, FoldReport};
use menan::model::Model;
use menan::numerics::Checkpoint;
use menan::training::Regime;
use menan::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "menan", version, about = "Speaker-invariant emotion embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into the data root.
    Synth(Common),
    /// Compute features for every manifest entry (plus speed-perturbed copies).
    Extract(Common),
    /// Train one regime on one fold or all folds.
    Train(Common),
    /// Re-evaluate saved checkpoints on validation and test speakers.
    Evaluate(Common),
    /// Write per-utterance embeddings from saved checkpoints.
    ExportEmbeddings(Common),
    /// Fit a speaker probe on embeddings from saved checkpoints.
    Probe(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[train] regime`.
    #[arg(long)]
    regime: Option<Regime>,
    /// Restrict to one fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for train, evaluate, probe and export-embeddings
    /// (default `<data>/runs/<regime>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-utterance and per-fold work.
    #[arg(long)]
    jobs: Option<usize>,
    /// Data root; overrides the config and MENAN_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    verb: &'a str,
    version: &'a str,
    seed: u64,
    fold: Option<usize>,
    data_root: &'a Path,
    out: &'a Path,
    config: &'a RunConfig,
}

struct Ctx {
    verb: &'static str,
    cfg: RunConfig,
    root: PathBuf,
    fold: Option<usize>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn new(verb: &'static str, c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.set_seed(s);
        }
        if let Some(r) = c.regime {
            cfg.train.regime = r;
        }
        if let Some(d) = &c.data {
            cfg.data.root = Some(d.clone());
        }
        cfg.validate()?;
        if let Some(n) = c.jobs {
            if n == 0 {
                return Err(Error::Usage("--jobs must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Usage(e.to_string()))?;
        }
        Ok(Ctx {
            verb,
            root: cfg.data_root()?,
            cfg,
            fold: c.fold,
            out: c.out.clone(),
        })
    }

    fn run_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| self.root.join("runs").join(self.cfg.train.regime.as_str()))
    }

    /// Records the resolved configuration next to the verb's outputs.
    fn write_manifest(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let m = RunManifest {
            verb: self.verb,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            fold: self.fold,
            data_root: &self.root,
            out,
            config: &self.cfg,
        };
        write_json(&out.join(format!("run-{}.json", self.verb)), &m)
    }

    fn folds(&self) -> Result<Vec<FoldSpec>> {
        let all = read_folds(&self.root.join("folds.json"))?;
        match self.fold {
            None => Ok(all),
            Some(k) => all
                .into_iter()
                .find(|f| f.fold == k)
                .map(|f| vec![f])
                .ok_or_else(|| Error::Usage(format!("no fold {k} in folds.json"))),
        }
    }

    fn fold_data(&self) -> Result<Vec<FoldData>> {
        let specs = self.folds()?;
        let utts: Vec<Arc<Utterance>> = read_feature_store(&self.root.join("features"))?
            .into_iter()
            .map(Arc::new)
            .collect();
        let emotions = menan::corpus::label_set(utts.iter().map(|u| u.emotion.as_str()));
        specs.iter().map(|s| FoldData::build(s, &emotions, &utts)).collect()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let corpus = generate_synthetic(&ctx.cfg.synth)?;
    let wav_dir = ctx.root.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| io_err(&wav_dir, e))?;
    let manifest = Manifest {
        records: corpus.utterances.iter().map(|u| u.record.clone()).collect(),
        root: ctx.root.clone(),
    };
    for u in &corpus.utterances {
        write_wav(&manifest.audio_path(&u.record), &u.waveform)?;
    }
    manifest.write(&ctx.root.join("manifest.csv"))?;
    write_folds(&ctx.root.join("folds.json"), &make_folds(&sessions_from_speakers(&manifest.speakers())?)?)?;
    ctx.write_manifest(&ctx.root)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), ctx.root.display());
    Ok(())
}

fn extract(ctx: &Ctx) -> Result<()> {
    use rayon::prelude::*;
    let manifest = Manifest::read(&ctx.root.join("manifest.csv"))?;
    let items = manifest
        .records
        .par_iter()
        .map(|r| Ok((r.clone(), read_wav(&manifest.audio_path(r))?)))
        .collect::<Result<Vec<_>>>()?;
    let f = &ctx.cfg.features;
    let utts = prepare_utterances(&items, f.target_seconds, &f.speed_ratios)?;
    let dir = ctx.root.join("features");
    write_feature_store(&dir, &utts)?;
    let folds = ctx.root.join("folds.json");
    if !folds.exists() {
        write_folds(&folds, &make_folds(&sessions_from_speakers(&manifest.speakers())?)?)?;
    }
    ctx.write_manifest(&dir)?;
    println!("wrote {} feature files to {}", utts.len(), dir.display());
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    let data = ctx.fold_data()?;
    let out = ctx.run_dir();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let report = run_cv(&ctx.cfg.train, &ctx.cfg.probe, &data, Some(&out))?;
    ctx.write_manifest(&out)?;
    print!("{}", menan::eval::format_table(std::slice::from_ref(&report)));
    Ok(())
}

/// Loads each fold's saved checkpoint.
fn checkpoints(ctx: &Ctx) -> Result<Vec<(FoldData, Model, Checkpoint)>> {
    let dir = ctx.run_dir();
    ctx.fold_data()?
        .into_iter()
        .map(|d| {
            let ck = Checkpoint::load(&dir.join(format!("fold_{:02}", d.spec.fold)).join("checkpoint.bin"))?;
            let model = Model::from_store(ck.store.clone())?;
            Ok((d, model, ck))
        })
        .collect()
}

fn meta_regime(ck: &Checkpoint, fallback: Regime) -> Result<Regime> {
    ck.meta.get("regime").map_or(Ok(fallback), |r| r.parse())
}

fn evaluate(ctx: &Ctx) -> Result<()> {
    let dir = ctx.run_dir();
    let mut reports: Vec<FoldReport> = Vec::new();
    for (d, model, ck) in checkpoints(ctx)? {
        let best_epoch = ck.meta.get("best_epoch").and_then(|s| s.parse().ok()).unwrap_or(0);
        let regime = meta_regime(&ck, ctx.cfg.train.regime)?;
        let r = evaluate_fold(&model, &d, regime, best_epoch, None, &ctx.cfg.probe)?;
        write_json(&dir.join(format!("fold_{:02}", d.spec.fold)).join("evaluation.json"), &r)?;
        println!(
            "fold {:>2}  WA {:6.2}/{:6.2}  UA {:6.2}/{:6.2}  ΔUA {:+6.2}",
            r.fold, r.val_wa, r.test_wa, r.val_ua, r.test_ua, r.delta_ua
        );
        reports.push(r);
    }
    write_json(&dir.join("evaluation.json"), &reports)?;
    ctx.write_manifest(&dir)
}

#[derive(Serialize)]
struct ProbeReport {
    fold: usize,
    regime: Regime,
    n_speakers: usize,
    chance: f64,
    probe_accuracy: f64,
}

fn probe(ctx: &Ctx) -> Result<()> {
    let dir = ctx.run_dir();
    let mut reports = Vec::new();
    for (d, model, ck) in checkpoints(ctx)? {
        let r = ProbeReport {
            fold: d.spec.fold,
            regime: meta_regime(&ck, ctx.cfg.train.regime)?,
            n_speakers: d.speakers.len(),
            chance: 100.0 / d.speakers.len() as f64,
            probe_accuracy: probe_model(&model, &d, &ctx.cfg.probe)?,
        };
        write_json(&dir.join(format!("fold_{:02}", r.fold)).join("probe.json"), &r)?;
        println!("fold {:>2}  probe {:6.2} (chance {:.2})", r.fold, r.probe_accuracy, r.chance);
        reports.push(r);
    }
    write_json(&dir.join("probe.json"), &reports)?;
    ctx.write_manifest(&dir)
}

fn export(ctx: &Ctx) -> Result<()> {
    let dir = ctx.run_dir();
    for (d, model, _) in checkpoints(ctx)? {
        let mut utts: Vec<&Utterance> = [&d.train, &d.val, &d.test]
            .into_iter()
            .flat_map(|s| s.examples.iter().map(|e| e.utt.as_ref()))
            .filter(|u| u.speed.is_none())
            .collect();
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        let path = dir.join(format!("fold_{:02}", d.spec.fold)).join("embeddings.csv");
        let n = export_embeddings(&model, &utts, &path)?;
        println!("fold {:>2}  {} embeddings → {}", d.spec.fold, n, path.display());
    }
    ctx.write_manifest(&dir)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, common, f): (_, _, fn(&Ctx) -> Result<()>) = match &cli.command {
        Command::Synth(c) => ("synth", c, synth),
        Command::Extract(c) => ("extract", c, extract),
        Command::Train(c) => ("train", c, train),
        Command::Evaluate(c) => ("evaluate", c, evaluate),
        Command::ExportEmbeddings(c) => ("export-embeddings", c, export),
        Command::Probe(c) => ("probe", c, probe),
    };
    match Ctx::new(verb, common).and_then(|ctx| f(&ctx)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("menan {verb}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
