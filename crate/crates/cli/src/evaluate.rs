use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use tunewake::eval::{detector_predictions, detector_sweep, operating_point, pr_sweep, EvalQuery, Truth};
use tunewake::seqmatch::{analyze, Scorer};
use tunewake::synth::QuerySource;
use tunewake::{DetectorWeights, PipelineConfig};

use crate::catalog::recognizer;
use crate::corpus::{Entry, Manifest};

#[derive(Debug, Args)]
pub struct EvalPrArgs {
    /// Comma-separated NPDB files, one per embedding dimension; each needs
    /// its `.npfw` sibling.
    #[arg(long, value_delimiter = ',', required = true)]
    pub db_per_dim: Vec<PathBuf>,
    /// Corpus directory whose manifest lists the queries.
    #[arg(long)]
    pub queries: PathBuf,
}

/// Fingerprints and analyzes every query of `manifest` against one DB,
/// returning the DB's dimension too. Both scorers later see exactly these
/// candidate sets.
fn analyze_queries(cfg: &PipelineConfig, db: &std::path::Path, manifest: &Manifest) -> Result<(usize, Vec<EvalQuery>)> {
    let rec = recognizer(cfg, db, None)?;
    let mut out = Vec::new();
    for entry in manifest.queries() {
        let Entry::Query {
            path,
            source,
            song_id,
            offset_s,
            ..
        } = entry
        else {
            continue;
        };
        let truth = match (source, song_id, offset_s) {
            (QuerySource::Indexed, Some(song_id), Some(offset_s)) => Some(Truth {
                song_id: *song_id,
                offset_s: *offset_s,
            }),
            (QuerySource::Indexed, ..) => bail!("query {path} lacks its song id or offset"),
            _ => None,
        };
        let fps = rec.fingerprint(&manifest.read_wav(path)?).with_context(|| format!("fingerprinting {path}"))?;
        let analysis = analyze(&fps, rec.db().index(), rec.db().density(), rec.matcher())?;
        out.push(EvalQuery { truth, analysis });
    }
    if out.is_empty() {
        bail!("corpus {} lists no queries", manifest.dir.display());
    }
    Ok((rec.db().index().dim(), out))
}

pub fn eval_pr(cfg: &PipelineConfig, args: &EvalPrArgs) -> Result<()> {
    let manifest = Manifest::load(&args.queries)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "dimension,threshold,precision,recall,scorer")?;
    for db in &args.db_per_dim {
        let (dim, queries) = analyze_queries(cfg, db, &manifest)?;
        let m = &cfg.matcher;
        for scorer in [Scorer::Adaptive, Scorer::Naive] {
            for row in pr_sweep(&queries, scorer, m.theta_gap, dim) {
                writeln!(out, "{},{},{},{},{}", row.dimension, row.threshold, row.precision, row.recall, row.scorer)?;
            }
        }
        let adaptive = operating_point(&queries, |a| a.decide_adaptive(m.theta_abs, m.theta_gap));
        let naive = operating_point(&queries, |a| a.decide_naive(m.naive_threshold));
        let scanned = queries.iter().map(|q| q.analysis.scanned_fraction).sum::<f64>() / queries.len() as f64;
        eprintln!(
            "d={dim}: adaptive P={:.4} R={:.4} FA={:.4}; naive P={:.4} R={:.4} FA={:.4}; scanned {:.2}% of DB",
            adaptive.precision,
            adaptive.recall,
            adaptive.false_accept_rate,
            naive.precision,
            naive.recall,
            naive.false_accept_rate,
            100.0 * scanned
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalDetectorArgs {
    /// Detector weights from `train-detector`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Corpus directory with an ambient recording (`gen-corpus --ambient-s`).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Thresholds t to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub thresholds: Vec<f64>,
    /// Consecutive-prediction counts c to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub consecutive: Vec<usize>,
}

pub fn eval_detector(cfg: &PipelineConfig, args: &EvalDetectorArgs) -> Result<()> {
    if args.consecutive.contains(&0) {
        bail!("--consecutive values must be positive");
    }
    let bytes = std::fs::read(&args.weights).with_context(|| format!("reading {}", args.weights.display()))?;
    let weights = DetectorWeights::from_bytes(&bytes).with_context(|| format!("loading {}", args.weights.display()))?;
    let manifest = Manifest::load(&args.corpus)?;
    let Some((path, duration_s, regions)) = manifest.ambient() else {
        bail!("corpus {} has no ambient recording", args.corpus.display());
    };
    let pcm = manifest.read_wav(path)?;
    let predictions = detector_predictions(&weights, &cfg.frontend, &pcm)?;
    let fe = &cfg.frontend;
    let window_s =
        ((weights.topology.window() - 1) * fe.hop_samples() + fe.window_samples()) as f64 / 16_000.0;
    let mut thresholds = args.thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    let rows = detector_sweep(&predictions, regions, duration_s, &cfg.gate, window_s, &thresholds, &args.consecutive);
    let mut out = std::io::stdout().lock();
    writeln!(out, "threshold,consecutive,recall,false_positives,fp_per_hour")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.threshold, r.consecutive, r.recall, r.false_positives, r.fp_per_hour)?;
    }
    Ok(())
}
