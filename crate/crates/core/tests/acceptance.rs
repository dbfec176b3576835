//! Acceptance criteria 1-12.
//!
//! Prints one `PASS`/`FAIL` line per criterion with the measured values and
//! wall time, and exits non-zero when any criterion fails. Run it alone with
//! `cargo test -p tunewake --test acceptance`.
//!
//! Criteria 2 and 8-11 share one seeded desk-scale benchmark: 100 synthetic
//! 240 s songs, 1000 distorted 8 s excerpts of them, 100 pure-noise clips and
//! 100 excerpts of songs outside the catalogue. Catalogues are built at
//! d = 96 (and, for criterion 9, d = 64 and d = 128) with the default config.

use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tunewake::dbstore::index_songs;
use tunewake::eval::{
    detector_predictions, detector_sweep, max_recall, operating_point, pr_sweep, precision_at_recall, EvalQuery,
    PrRow, Truth,
};
use tunewake::fpindex::{IndexConfig, ProbePolicy};
use tunewake::frontend::{FrontendConfig, LogMelExtractor};
use tunewake::musdet::{self, parameter_count, quantize_weights, DetectorTrainConfig, PREDICTION_PERIOD_S};
use tunewake::nnfp::{
    train_embedder, AlignedCorpus, EmbedderTrainConfig, SegmentLabel, Triplet, TripletBatch, TRAIN_EXCERPT_S,
};
use tunewake::pipeline::fingerprint_audio;
use tunewake::seqmatch::{analyze, collect_candidates, local_density, Scorer};
use tunewake::synth::{
    heldout_query, mix_seed, noise_query, render_ambient, render_song_f32, rng_for, song_queries, to_pcm,
    AmbientSpec, QuerySource,
};
use tunewake::weights::DETECTOR_MAGIC;
use tunewake::{
    build_db, load_db, Database, DetectorTopology, DetectorWeights, EmbedderTopology, EmbedderWeights, Fingerprint,
    IvfPqIndex, LogMelFrame, MatcherConfig, PcmStream, PipelineConfig, Recognizer, SearchHit, SequenceCandidate,
    SongMeta,
};

type Res<T> = Result<T, Box<dyn Error>>;

const SONGS: u32 = 100;
const SONG_S: f64 = 240.0;
const QUERIES_PER_SONG: usize = 10;
const NEGATIVES: usize = 100;
const QUERY_S: f64 = 8.0;
const MAX_JITTER_MS: i32 = 250;
const SR: f64 = 16_000.0;

/// Outcome of one criterion.
struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Runner {
    failed: Vec<u8>,
}

impl Runner {
    /// Runs `check`, adding `extra` (time spent on shared fixtures the
    /// criterion depends on) to its wall time before comparing with `budget`.
    fn run(&mut self, id: u8, title: &str, budget: Duration, extra: Duration, check: impl FnOnce() -> Res<Verdict>) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed() + extra;
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = elapsed <= budget;
        let pass = pass && in_time;
        let timing = format!(
            "{:.1} s{}",
            elapsed.as_secs_f64(),
            if in_time { String::new() } else { format!(", over the {:.0} s budget", budget.as_secs_f64()) }
        );
        println!("AC{id:<2} {} {title}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Songs whose consecutive fingerprints drift smoothly around a per-song
/// centre, like real fingerprint sequences.
fn structured_catalogue(songs: u32, len: usize, dim: usize, seed: u64) -> Vec<(SongMeta, Vec<Fingerprint>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..songs)
        .map(|id| {
            let centre: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut walk = vec![0f32; dim];
            let fps = (0..len)
                .map(|i| {
                    for w in walk.iter_mut() {
                        *w = 0.8 * *w + rng.random_range(-0.5..0.5);
                    }
                    Fingerprint {
                        values: unit(centre.iter().zip(&walk).map(|(c, w)| c + w).collect()),
                        song_id: Some(id),
                        offset_s: i as f64,
                    }
                })
                .collect();
            let meta = SongMeta {
                song_id: id,
                title: format!("Song {id}"),
                artist: "Artist".into(),
                duration_s: len as f64,
            };
            (meta, fps)
        })
        .collect()
}

fn encode(songs: &[(SongMeta, Vec<Fingerprint>)], matcher: &MatcherConfig) -> Res<Vec<u8>> {
    let (index, density) = index_songs(songs, &IndexConfig::default(), matcher)?;
    let metas: Vec<SongMeta> = songs.iter().map(|(m, _)| m.clone()).collect();
    Ok(build_db(&metas, &index, &density)?)
}

// ---------------------------------------------------------------------------
// Shared benchmark fixtures

struct Query {
    truth: Option<Truth>,
    source: QuerySource,
    pcm: PcmStream,
}

struct Benchmark {
    cfg: PipelineConfig,
    queries: Vec<Query>,
    training: AlignedCorpus,
    built_in: Duration,
}

fn benchmark() -> Benchmark {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let seed = cfg.seed;
    let mut rng = rng_for(seed, 0x5155);
    let mut queries = Vec::new();
    let mut training = AlignedCorpus {
        corpus_seed: seed,
        songs: Vec::new(),
    };
    let keep = (TRAIN_EXCERPT_S * SR) as usize;
    for id in 0..SONGS {
        let song = render_song_f32(seed, id, SONG_S);
        for q in song_queries(&song, id, QUERIES_PER_SONG, QUERY_S, MAX_JITTER_MS, &mut rng) {
            let truth = Some(Truth {
                song_id: id,
                offset_s: q.offset_s.expect("indexed queries carry an offset"),
            });
            queries.push(Query {
                truth,
                source: q.source,
                pcm: to_pcm(&q.samples),
            });
        }
        training.songs.push((id, song[..keep].to_vec()));
    }
    for k in 0..NEGATIVES {
        let q = noise_query(k, QUERY_S, &mut rng);
        queries.push(Query {
            truth: None,
            source: q.source,
            pcm: to_pcm(&q.samples),
        });
    }
    for k in 0..NEGATIVES {
        let q = heldout_query(seed, k as u32, QUERY_S, &mut rng);
        queries.push(Query {
            truth: None,
            source: q.source,
            pcm: to_pcm(&q.samples),
        });
    }
    Benchmark {
        cfg,
        queries,
        training,
        built_in: start.elapsed(),
    }
}

struct Catalogue {
    dim: usize,
    embedder: EmbedderWeights,
    songs: Vec<(SongMeta, Vec<Fingerprint>)>,
    bytes: Vec<u8>,
    db: Database,
    analyses: Vec<EvalQuery>,
    /// Training, fingerprinting and indexing.
    built_in: Duration,
    /// Fingerprinting and analyzing every query.
    analyzed_in: Duration,
}

fn catalogue(bench: &Benchmark, dim: usize) -> Res<Catalogue> {
    let start = Instant::now();
    let cfg = &bench.cfg;
    let train_cfg = EmbedderTrainConfig {
        seed: cfg.seed,
        ..EmbedderTrainConfig::default()
    };
    let (embedder, _) = train_embedder(&bench.training, EmbedderTopology::with_dim(dim), &train_cfg)?;
    let extractor = LogMelExtractor::new(cfg.frontend.clone())?;
    let mut songs = Vec::new();
    for id in 0..SONGS {
        let pcm = to_pcm(&render_song_f32(cfg.seed, id, SONG_S));
        let meta = SongMeta {
            song_id: id,
            title: format!("Track {id:04}"),
            artist: format!("Synth Ensemble {:02}", id % 17),
            duration_s: SONG_S,
        };
        songs.push((meta, fingerprint_audio(&extractor, &embedder, &pcm)?));
    }
    let bytes = encode(&songs, &cfg.matcher)?;
    let db = load_db(&bytes)?;
    let built_in = start.elapsed();
    let start = Instant::now();
    let mut analyses = Vec::with_capacity(bench.queries.len());
    for q in &bench.queries {
        let fps = fingerprint_audio(&extractor, &embedder, &q.pcm)?;
        analyses.push(EvalQuery {
            truth: q.truth,
            analysis: analyze(&fps, db.index(), db.density(), &cfg.matcher)?,
        });
    }
    eprintln!(
        "catalogue d={dim}: built in {:.0} s, queries analyzed in {:.0} s",
        built_in.as_secs_f64(),
        start.elapsed().as_secs_f64()
    );
    Ok(Catalogue {
        dim,
        embedder,
        songs,
        bytes,
        db,
        analyses,
        built_in,
        analyzed_in: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// 1. Compression ratio

fn ac1() -> Res<Verdict> {
    let songs = structured_catalogue(4, 40, 96, 1);
    let db = load_db(&encode(&songs, &MatcherConfig::default())?)?;
    let r = db.storage_report();
    let code_per_fp = db.index().code(0).len();
    let raw = r.dim * 4;
    let ratio = raw as f64 / code_per_fp as f64;
    let pass = r.dim == 96 && code_per_fp == 12 && r.code_bytes == 12 && ratio == 32.0 && r.compression_ratio == 32.0;
    Ok(Verdict::new(
        pass,
        format!(
            "d={} code {code_per_fp} B vs {raw} B float32, ratio {} (reported {}), want exactly 32.0",
            r.dim, ratio, r.compression_ratio
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. Per-song budget

fn ac2(cat: &Catalogue) -> Res<Verdict> {
    let db = load_db(&cat.bytes)?;
    let r = db.storage_report();
    let fps_ok = db.songs().iter().all(|s| s.count == SONG_S as u32);
    let pass = r.songs == SONGS as usize
        && fps_ok
        && r.payload_bytes_per_song == 2880.0
        && r.payload_bytes_per_song < 3072.0
        && r.total_bytes_per_song < 3584.0;
    Ok(Verdict::new(
        pass,
        format!(
            "{} songs x {} fingerprints: payload {} B/song (want 2880 < 3072), total {:.1} B/song (< 3584), \
             shared model {} B, whole file {:.1} B/song",
            r.songs,
            r.fingerprints / r.songs.max(1),
            r.payload_bytes_per_song,
            r.total_bytes_per_song,
            r.model_bytes,
            r.file_bytes_per_song
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. Partition probing

fn ac3() -> Res<Verdict> {
    let dim = 96;
    let songs = structured_catalogue(420, 240, dim, 3);
    let n: usize = songs.iter().map(|(_, f)| f.len()).sum();
    let vectors: Vec<f32> = songs.iter().flat_map(|(_, f)| f.iter().flat_map(|x| x.values.clone())).collect();
    let ids: Vec<(u32, u32)> = songs
        .iter()
        .flat_map(|(m, f)| (0..f.len() as u32).map(move |i| (m.song_id, i)))
        .collect();
    let index = IvfPqIndex::build(&vectors, dim, &ids, &IndexConfig::default())?;
    let probe = MatcherConfig::default().probe;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut fractions = Vec::new();
    for _ in 0..300 {
        let i = rng.random_range(0..n);
        let q = unit(
            vectors[i * dim..(i + 1) * dim]
                .iter()
                .map(|x| x + rng.random_range(-0.05..0.05))
                .collect(),
        );
        fractions.push(index.search_topk(&q, 32, probe)?.scanned_fraction);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let (lo, hi) = fractions.iter().fold((f64::MAX, 0f64), |(a, b), &f| (a.min(f), b.max(f)));
    let pass = n >= 100_000 && lo >= 0.01 && hi <= 0.05;
    Ok(Verdict::new(
        pass,
        format!(
            "{n} fingerprints, {} partitions: scanned {:.2}% mean (target 2%), per query {:.2}%..{:.2}%, want within [1%, 5%]",
            index.partitioner.partitions(),
            100.0 * mean,
            100.0 * lo,
            100.0 * hi
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. Detector budget

fn ac4() -> Res<Verdict> {
    let topology = DetectorTopology::default();
    let count = parameter_count(&topology);
    let weights = DetectorWeights::random(topology, &mut ChaCha8Rng::seed_from_u64(4));
    let bytes = quantize_weights(&weights).to_bytes(DETECTOR_MAGIC);
    let reloaded = DetectorWeights::from_bytes(&bytes)?;
    let pass = (8000..=9000).contains(&count) && bytes.len() < 10 * 1024 && reloaded.topology == topology;
    Ok(Verdict::new(
        pass,
        format!(
            "{count} parameters (want 8000..=9000), 8-bit weight file {} B (< 10240)",
            bytes.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5. Detector cadence and streaming equivalence

fn ac5() -> Res<Verdict> {
    let topology = DetectorTopology::default();
    let (window, hop) = (topology.window(), topology.hop());
    let extractor = LogMelExtractor::new(FrontendConfig::default())?;
    let mut worst = 0f64;
    let mut cadence_ok = hop == 64;
    let mut emitted = 0;
    for k in 0..10u64 {
        let mut rng = rng_for(55, k);
        let weights = DetectorWeights::random(topology, &mut rng);
        // Random 30 s input: a song excerpt, noise, or both, at a random level.
        let n = (30.0 * SR) as usize;
        let mut audio = match k % 3 {
            0 => render_song_f32(55, k as u32, 30.0),
            _ => vec![0.0; n],
        };
        audio.resize(n, 0.0);
        let noise_level = if k % 3 == 1 { 0.0 } else { rng.random_range(0.0..0.2) };
        let gain = rng.random_range(0.05..1.0f32);
        for s in audio.iter_mut() {
            *s = (*s + noise_level * rng.random_range(-1.0..1.0f32)) * gain;
        }
        if k % 3 == 1 {
            audio.iter_mut().for_each(|s| *s = rng.random_range(-0.5..0.5f32) * gain);
        }
        let frames = extractor.frames(&to_pcm(&audio))?;
        let mut det = musdet::StreamingDetector::new(&weights);
        let mut at = Vec::new();
        for (i, f) in frames.iter().enumerate() {
            if let Some(p) = det.push(f) {
                at.push((i, p));
            }
        }
        let expected: Vec<usize> = (window - 1..frames.len()).step_by(hop).collect();
        cadence_ok &= at.iter().map(|a| a.0).collect::<Vec<_>>() == expected;
        for (i, p) in at {
            let batch = weights.forward(&frames[i + 1 - window..=i])?;
            worst = worst.max((p - batch).abs());
            emitted += 1;
        }
    }
    let pass = cadence_ok && worst <= 1e-5;
    Ok(Verdict::new(
        pass,
        format!(
            "{emitted} predictions, one every {hop} frames ({:.0} ms) from frame {}: {}; max |streaming - batch| {worst:.2e} (<= 1e-5)",
            hop as f64 * 10.0,
            window - 1,
            if cadence_ok { "ok" } else { "WRONG" },
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. Gradient checks

const FD_STEP: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<LogMelFrame> {
    (0..n)
        .map(|i| {
            let mut coeffs = [0f32; 32];
            coeffs.iter_mut().for_each(|c| *c = rng.random_range(-3.0..3.0));
            LogMelFrame {
                coeffs,
                frame_index: i as u64,
            }
        })
        .collect()
}

/// Worst relative error over every entry of every trainable tensor.
fn worst_gradient_error<W: Clone>(
    base: &W,
    analytic: Vec<Vec<f64>>,
    params_mut: impl Fn(&mut W) -> Vec<&mut [f64]>,
    loss: impl Fn(&W) -> f64,
) -> (f64, usize) {
    let (mut worst, mut checked) = (0f64, 0);
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = base.clone();
            params_mut(&mut plus)[t][i] += FD_STEP;
            let mut minus = base.clone();
            params_mut(&mut minus)[t][i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g, numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

fn ac6() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    // Detector cross-entropy on a tiny topology.
    let topo = DetectorTopology {
        channels: 4,
        conv_layers: 2,
        final_len: 3,
        hidden: 3,
    };
    let mut det = DetectorWeights::random(topo, &mut rng);
    let windows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..topo.window() * 4).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    det.calibrate_batch_norm(&windows);
    for p in det.trainable_mut() {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let window = random_frames(&mut rng, topo.window());
    let (mut det_worst, mut det_n) = (0f64, 0);
    for is_music in [true, false] {
        let (_, grads) = det.loss_and_gradient(&window, is_music)?;
        let analytic = grads.trainable().iter().map(|t| t.to_vec()).collect();
        let (w, n) = worst_gradient_error(
            &det,
            analytic,
            |w| w.trainable_mut(),
            |w| w.loss_and_gradient(&window, is_music).unwrap().0,
        );
        det_worst = det_worst.max(w);
        det_n += n;
    }

    // Triplet-loss embedder on a tiny topology, with fixed and mined triplets.
    let topo = EmbedderTopology {
        input_frames: 16,
        mel_bins: 8,
        conv_channels: vec![2, 4],
        branches: 2,
        branch_hidden: 3,
        dim: 8,
    };
    let mut emb = EmbedderWeights::random(topo, &mut rng)?;
    let inputs: Vec<Vec<LogMelFrame>> = (0..6).map(|_| random_frames(&mut rng, 16)).collect();
    let refs: Vec<&[LogMelFrame]> = inputs.iter().map(Vec::as_slice).collect();
    emb.calibrate_batch_norm(&refs)?;
    for p in emb.trainable_mut() {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let fixed = TripletBatch {
        triplets: vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 4, positive: 5, negative: 0 },
            Triplet { anchor: 5, positive: 4, negative: 3 },
        ],
        // Above any squared distance between unit vectors: every triplet is
        // active and the loss is smooth at the evaluation point.
        margin: 5.0,
    };
    let labels: Vec<SegmentLabel> = [(1, 0), (1, 100), (2, 0), (2, 150), (3, 0), (3, 50)]
        .iter()
        .map(|&(song_id, offset_ms)| SegmentLabel { song_id, offset_ms })
        .collect();
    let flat = emb.embed_batch(&refs)?;
    let rows: Vec<Vec<f64>> = flat.chunks(8).map(<[f64]>::to_vec).collect();
    let mut mined = tunewake::nnfp::mine_triplets(&rows, &labels, 300, 0.4)?;
    mined.margin = 5.0;
    let (mut emb_worst, mut emb_n) = (0f64, 0);
    for batch in [&fixed, &mined] {
        let (_, grads) = emb.triplet_loss_and_gradient(&refs, batch)?;
        let analytic = grads.trainable().iter().map(|t| t.to_vec()).collect();
        let (w, n) = worst_gradient_error(
            &emb,
            analytic,
            |w| w.trainable_mut(),
            |w| w.triplet_loss_and_gradient(&refs, batch).unwrap().0,
        );
        emb_worst = emb_worst.max(w);
        emb_n += n;
    }
    let pass = det_worst <= 1e-3 && emb_worst <= 1e-3;
    Ok(Verdict::new(
        pass,
        format!(
            "detector cross-entropy: {det_n} entries, worst rel. err {det_worst:.2e}; \
             embedder triplet loss: {emb_n} entries, worst {emb_worst:.2e} (<= 1e-3)"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. Oracle equivalence

/// Quantized distances to every stored point, sorted by (distance, song,
/// offset), first `k`.
fn exhaustive_oracle(index: &IvfPqIndex, q: &[f32], k: usize) -> Vec<SearchHit> {
    let mut all: Vec<SearchHit> = (0..index.len())
        .map(|i| SearchHit {
            song_id: index.song_ids[i],
            offset_s: index.offsets[i],
            approx_distance: index.approx_distance(q, i),
            db_index: i as u32,
        })
        .collect();
    all.sort_by(|a, b| {
        a.approx_distance
            .total_cmp(&b.approx_distance)
            .then(a.song_id.cmp(&b.song_id))
            .then(a.offset_s.cmp(&b.offset_s))
    });
    all.truncate(k);
    all
}

/// Recounts, for every (song, alignment) pair ever voted for, how many hits
/// agree with it.
fn candidate_oracle(hits: &[Vec<SearchHit>], c: usize) -> Vec<SequenceCandidate> {
    let mut pairs: Vec<(u32, i64)> = hits
        .iter()
        .enumerate()
        .flat_map(|(i, step)| step.iter().map(move |h| (h.song_id, h.offset_s as i64 - i as i64)))
        .collect();
    pairs.sort();
    pairs.dedup();
    let mut out: Vec<SequenceCandidate> = pairs
        .into_iter()
        .map(|(song_id, align)| {
            let support = hits
                .iter()
                .enumerate()
                .map(|(i, step)| {
                    step.iter()
                        .filter(|h| h.song_id == song_id && h.offset_s as i64 - i as i64 == align)
                        .count()
                })
                .sum::<usize>() as u32;
            SequenceCandidate {
                song_id,
                start_offset_s: align,
                support,
            }
        })
        .collect();
    out.sort_by_key(|c| (std::cmp::Reverse(c.support), c.song_id, c.start_offset_s));
    out.truncate(c);
    out
}

/// k-th smallest exact distance between reconstructions, over all pairs.
fn density_oracle(index: &IvfPqIndex, k: usize, exclusion_s: u32, floor: f64) -> Vec<f64> {
    let decoded: Vec<Vec<f32>> = (0..index.len()).map(|i| index.decode(i)).collect();
    (0..index.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..index.len())
                .filter(|&j| {
                    j != i
                        && !(index.song_ids[j] == index.song_ids[i]
                            && index.offsets[j].abs_diff(index.offsets[i]) <= exclusion_s)
                })
                .map(|j| {
                    decoded[i]
                        .iter()
                        .zip(&decoded[j])
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            d[(k - 1).min(d.len() - 1)].max(floor)
        })
        .collect()
}

fn ac7() -> Res<Verdict> {
    let dim = 64;
    let matcher = MatcherConfig::default();
    let songs = structured_catalogue(20, 50, dim, 7);
    let (index, density) = index_songs(&songs, &IndexConfig::default(), &matcher)?;
    let n = index.len();
    let p = index.partitioner.partitions();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let mut topk_equal = 0;
    let mut cand_equal = 0;
    let trials = 100;
    for _ in 0..trials {
        let (song, start) = (rng.random_range(0..20usize), rng.random_range(0..42usize));
        let hits: Vec<Vec<SearchHit>> = (0..8)
            .map(|i| {
                let q = unit(
                    songs[song].1[start + i]
                        .values
                        .iter()
                        .map(|x| x + rng.random_range(-0.1..0.1))
                        .collect(),
                );
                let full = index.search_topk(&q, matcher.top_k, ProbePolicy::Count(p)).unwrap().hits;
                let same = full == exhaustive_oracle(&index, &q, matcher.top_k)
                    && full == index.exhaustive_topk(&q, matcher.top_k);
                topk_equal += usize::from(same);
                let probed = index.search_topk(&q, matcher.top_k, matcher.probe).unwrap().hits;
                probed
            })
            .collect();
        cand_equal +=
            usize::from(collect_candidates(&hits, matcher.max_candidates) == candidate_oracle(&hits, matcher.max_candidates));
    }

    let radii = local_density(&index, matcher.density_k, matcher.density_exclusion_s, matcher.radius_floor)?;
    let oracle = density_oracle(&index, matcher.density_k, matcher.density_exclusion_s, matcher.radius_floor);
    let worst_radius = radii
        .radii
        .iter()
        .zip(&oracle)
        .map(|(&a, &b)| (a as f64 - b).abs() / b)
        .fold(0f64, f64::max);
    // The stored model must be the same computation.
    let stored_same = density.radii == radii.radii;

    let pass = topk_equal == trials * 8 && cand_equal == trials && worst_radius <= 1e-5 && stored_same && n == 1000;
    Ok(Verdict::new(
        pass,
        format!(
            "{n} points, P={p}: top-{} with all partitions == exhaustive in {topk_equal}/{}; candidates == recount in \
             {cand_equal}/{trials}; density radii vs all-pairs oracle worst rel. diff {worst_radius:.1e} (f32 vs f64, <= 1e-5)",
            matcher.top_k,
            trials * 8
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. End-to-end recognition

fn ac8(bench: &Benchmark, cat: &Catalogue) -> Res<Verdict> {
    let m = &bench.cfg.matcher;
    let op = operating_point(&cat.analyses, |a| a.decide_adaptive(m.theta_abs, m.theta_gap));
    let accept_rate = |source: QuerySource| {
        let (mut n, mut accepted) = (0, 0);
        for (q, a) in bench.queries.iter().zip(&cat.analyses) {
            if q.source == source {
                n += 1;
                accepted += usize::from(a.analysis.decide_adaptive(m.theta_abs, m.theta_gap).accepted);
            }
        }
        accepted as f64 / n.max(1) as f64
    };
    let noise = accept_rate(QuerySource::Noise);
    let heldout = accept_rate(QuerySource::Heldout);
    let positives = cat.analyses.iter().filter(|q| q.truth.is_some()).count();
    let scanned = cat.analyses.iter().map(|q| q.analysis.scanned_fraction).sum::<f64>() / cat.analyses.len() as f64;
    let pass = positives == 1000 && op.recall >= 0.85 && op.precision >= 0.95 && noise <= 0.01 && heldout <= 0.01;
    Ok(Verdict::new(
        pass,
        format!(
            "{positives} queries, d={}, theta_abs={}: recall {:.3} (>= 0.85) at precision {:.4} (>= 0.95); accepted \
             noise {:.1}%, held-out {:.1}% (each <= 1%); scanned {:.2}% of DB",
            cat.dim,
            m.theta_abs,
            op.recall,
            op.precision,
            100.0 * noise,
            100.0 * heldout,
            100.0 * scanned
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Dimension comparison

fn adaptive_rows(cat: &Catalogue, theta_gap: f64) -> Vec<PrRow> {
    pr_sweep(&cat.analyses, Scorer::Adaptive, theta_gap, cat.dim)
}

/// 0.01, 0.02, ... up to `to`, plus every recall the curves actually reach
/// at or below `to`.
fn matched_levels(from: f64, to: f64, curves: &[&[PrRow]]) -> Vec<f64> {
    let mut levels: Vec<f64> = tunewake::eval::recall_levels(from, to, 0.01);
    levels.extend(
        curves
            .iter()
            .flat_map(|rows| rows.iter().map(|r| r.recall))
            .filter(|&r| r >= from && r <= to),
    );
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
}

/// Lists, on stderr, every query whose best adaptive candidate passes the gap
/// rule but is wrong, highest score first: the points that cost precision.
fn report_wrong_answers(cat: &Catalogue, gap: f64) {
    let mut wrong: Vec<_> = cat
        .analyses
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let (b, rival) = q.analysis.best(Scorer::Adaptive)?;
            let eligible = b.adaptive - rival > gap || rival == 0.0;
            let correct = q.truth.is_some_and(|t| {
                b.candidate.song_id == t.song_id && (b.candidate.start_offset_s as f64 - t.offset_s).abs() <= 1.0
            });
            (eligible && !correct).then_some((i, q.truth, b, rival))
        })
        .collect();
    wrong.sort_by(|a, b| b.2.adaptive.total_cmp(&a.2.adaptive));
    for (i, truth, b, rival) in wrong.iter().take(5) {
        eprintln!(
            "  d={} query {i}: truth {:?}, answer song {} at {} s (support {}), score {:.4}, rival {:.4}",
            cat.dim,
            truth.map(|t| (t.song_id, t.offset_s)),
            b.candidate.song_id,
            b.candidate.start_offset_s,
            b.candidate.support,
            b.adaptive,
            rival
        );
    }
}

fn ac9(bench: &Benchmark, d64: &Catalogue, d96: &Catalogue, d128: &Catalogue) -> Res<Verdict> {
    let gap = bench.cfg.matcher.theta_gap;
    for cat in [d64, d96, d128] {
        report_wrong_answers(cat, gap);
    }
    let (r64, r96, r128) = (adaptive_rows(d64, gap), adaptive_rows(d96, gap), adaptive_rows(d128, gap));
    let top = max_recall(&r64).min(max_recall(&r96)).min(max_recall(&r128));
    let levels = matched_levels(0.01, top, &[&r64, &r96, &r128]);
    let (mut worst_a, mut worst_b) = ((f64::MAX, 0.0), (f64::MAX, 0.0));
    for &r in &levels {
        let p = |rows: &[PrRow]| precision_at_recall(rows, r).unwrap_or(0.0);
        let (p64, p96, p128) = (p(&r64), p(&r96), p(&r128));
        if p96 - p64 < worst_a.0 {
            worst_a = (p96 - p64, r);
        }
        if p128 - (p96 - 0.02) < worst_b.0 {
            worst_b = (p128 - (p96 - 0.02), r);
        }
    }
    let at = |rows: &[PrRow], r: f64| precision_at_recall(rows, r).unwrap_or(0.0);
    let pass = !levels.is_empty() && worst_a.0 >= 0.0 && worst_b.0 >= 0.0;
    Ok(Verdict::new(
        pass,
        format!(
            "{} recall levels up to {top:.3}: min P96-P64 {:+.4} (at R={:.3}), min P128-(P96-0.02) {:+.4} (at R={:.3}); \
             max recall 64/96/128 = {:.3}/{:.3}/{:.3}; P at R=0.85: {:.4}/{:.4}/{:.4}",
            levels.len(),
            worst_a.0,
            worst_a.1,
            worst_b.0,
            worst_b.1,
            max_recall(&r64),
            max_recall(&r96),
            max_recall(&r128),
            at(&r64, 0.85),
            at(&r96, 0.85),
            at(&r128, 0.85),
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10. Adaptive vs. naive scorer

fn ac10(bench: &Benchmark, cat: &Catalogue) -> Res<Verdict> {
    let gap = bench.cfg.matcher.theta_gap;
    // Both sweeps read the same analyses, i.e. the same candidate sets.
    let adaptive = pr_sweep(&cat.analyses, Scorer::Adaptive, gap, cat.dim);
    let naive = pr_sweep(&cat.analyses, Scorer::Naive, gap, cat.dim);
    let top = max_recall(&adaptive).min(max_recall(&naive));
    let levels = matched_levels(0.5, top, &[&adaptive, &naive]);
    let mut worst = (f64::MAX, 0.0);
    for &r in &levels {
        let diff = precision_at_recall(&adaptive, r).unwrap_or(0.0) - precision_at_recall(&naive, r).unwrap_or(0.0);
        if diff < worst.0 {
            worst = (diff, r);
        }
    }
    let pass = !levels.is_empty() && worst.0 >= 0.0;
    Ok(Verdict::new(
        pass,
        format!(
            "{} recall levels in [0.5, {top:.3}]: min P_adaptive - P_naive {:+.4} (at R={:.3}); max recall adaptive {:.3}, naive {:.3}",
            levels.len(),
            worst.0,
            worst.1,
            max_recall(&adaptive),
            max_recall(&naive)
        ),
    ))
}

// ---------------------------------------------------------------------------
// 11. Gate behaviour

fn ac11(bench: &Benchmark, cat: &Catalogue) -> Res<Verdict> {
    let cfg = &bench.cfg;
    // The deployed detector: trained on synthetic clips, stored at 8 bits.
    let train = musdet::synthetic_corpus(mix_seed(cfg.seed, 1), 1600, 5.0);
    let train_cfg = DetectorTrainConfig {
        seed: cfg.seed,
        ..DetectorTrainConfig::default()
    };
    let topology = DetectorTopology::default();
    let (trained, _) = musdet::train_detector(&train, topology, &train_cfg)?;
    let detector = DetectorWeights::from_bytes(&quantize_weights(&trained).to_bytes(DETECTOR_MAGIC))?;

    let spec = AmbientSpec::new(mix_seed(cfg.seed, 11), cfg.seed, 3600.0, (0..SONGS).collect());
    let (ambient, regions) = render_ambient(&spec);
    let rec = Recognizer::new(cfg.frontend.clone(), cat.embedder.clone(), cat.db.clone(), cfg.matcher.clone())?;
    let listen = |pcm: &PcmStream| -> Res<_> {
        let mut listener = rec.listen(&detector, cfg.gate.clone())?;
        let mut events = Vec::new();
        for chunk in pcm.samples.chunks(16_000) {
            events.extend(listener.push(chunk)?);
        }
        let (tail, stats) = listener.finish()?;
        events.extend(tail);
        Ok((events, stats))
    };
    let (events, stats) = listen(&ambient)?;

    let window_s = ((topology.window() - 1) * cfg.frontend.hop_samples() + cfg.frontend.window_samples()) as f64 / SR;
    let lag = window_s + cfg.gate.smoothing_window_s;
    let loud: Vec<_> = regions.iter().filter(|r| r.snr_db >= 10.0).collect();
    let woken = loud
        .iter()
        .filter(|r| {
            events
                .iter()
                .any(|e| e.detection.trigger_time_s >= r.start_s && e.detection.trigger_time_s <= r.end_s + lag)
        })
        .count();
    let recognized = loud
        .iter()
        .filter(|r| {
            events.iter().any(|e| {
                e.detection.trigger_time_s >= r.start_s
                    && e.detection.trigger_time_s <= r.end_s + lag
                    && e.result.as_ref().is_some_and(|m| m.accepted && m.song_id == Some(r.song_id))
            })
        })
        .count();

    let silence = PcmStream {
        samples: vec![0; (600.0 * SR) as usize],
        sample_rate: 16_000,
        channels: 1,
    };
    let (silent_events, _) = listen(&silence)?;

    let predictions = detector_predictions(&detector, &cfg.frontend, &ambient)?;
    let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let consecutive: Vec<usize> = (1..=5).collect();
    let rows = detector_sweep(&predictions, &regions, 3600.0, &cfg.gate, window_s, &thresholds, &consecutive);
    let cell = |c: usize, t: usize| rows[(c - 1) * thresholds.len() + t];
    let mut monotone = true;
    for c in 1..=5 {
        for t in 0..thresholds.len() {
            let here = cell(c, t);
            if t + 1 < thresholds.len() {
                let next = cell(c, t + 1);
                monotone &= next.recall <= here.recall && next.false_positives <= here.false_positives;
            }
            if c < 5 {
                let next = cell(c + 1, t);
                monotone &= next.recall <= here.recall && next.false_positives <= here.false_positives;
            }
        }
    }
    let default_row = rows
        .iter()
        .find(|r| r.consecutive == cfg.gate.consecutive && (r.threshold - cfg.gate.threshold).abs() < 1e-9);
    let predictions_ok = (stats.detector_predictions as f64 - 3600.0 / PREDICTION_PERIOD_S).abs() < 10.0;

    let pass = woken == loud.len() && silent_events.is_empty() && monotone && predictions_ok;
    Ok(Verdict::new(
        pass,
        format!(
            "{}/{} regions with SNR >= 10 dB woke the recognizer ({} of them recognized); {} wakeups in 1 h, duty cycle \
             {:.2}%; 10 min of silence: {} wakeups (want 0); recall/FP over {}x{} (t, c) grid monotone: {}{}",
            woken,
            loud.len(),
            recognized,
            stats.wakeups,
            100.0 * stats.duty_cycle(),
            silent_events.len(),
            thresholds.len(),
            consecutive.len(),
            monotone,
            default_row
                .map(|r| format!("; default gate recall {:.2}, {:.1} FP/h", r.recall, r.fp_per_hour))
                .unwrap_or_default()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 12. Persistence

fn ac12(bench: &Benchmark, cat: &Catalogue) -> Res<Verdict> {
    // Round trip and determinism on the full d = 96 catalogue.
    let m = &bench.cfg.matcher;
    let (index, density) = index_songs(&cat.songs, &IndexConfig::default(), m)?;
    let metas: Vec<SongMeta> = cat.songs.iter().map(|(s, _)| s.clone()).collect();
    let rebuilt = build_db(&metas, &index, &density)?;
    let deterministic = rebuilt == cat.bytes;
    let db = load_db(&rebuilt)?;
    let radii_close = db
        .density()
        .radii
        .iter()
        .zip(&density.radii)
        .all(|(a, b)| (a / b - 1.0).abs() < 0.02);
    let round_trip = db.index() == &index
        && db.songs().iter().map(|r| &r.meta).eq(metas.iter())
        && db.density().k == density.k
        && radii_close
        && build_db(&metas, db.index(), db.density())? == rebuilt;

    // Every value of every byte of a small catalogue file.
    let small = encode(&structured_catalogue(3, 24, 16, 12), m)?;
    let mut typed = 0usize;
    let mut total = 0usize;
    for i in 0..small.len() {
        for v in 0..=255u8 {
            if v == small[i] {
                continue;
            }
            let mut bad = small.clone();
            bad[i] = v;
            total += 1;
            if let Ok(Err(_)) = catch_unwind(|| load_db(&bad)) {
                typed += 1;
            }
        }
    }
    let pass = deterministic && round_trip && typed == total;
    Ok(Verdict::new(
        pass,
        format!(
            "{} B catalogue: rebuild identical {deterministic}, load->rebuild identical {round_trip}; {} B file: \
             {typed}/{total} single-byte corruptions rejected with a typed error",
            cat.bytes.len(),
            small.len()
        ),
    ))
}

fn main() {
    let mut runner = Runner { failed: Vec::new() };
    runner.run(1, "compression ratio", secs(1), Duration::ZERO, ac1);

    eprintln!("building the 100-song benchmark and the d=96 catalogue...");
    let bench = benchmark();
    let d96 = match catalogue(&bench, 96) {
        Ok(c) => c,
        Err(e) => {
            println!("AC2/8-12 FAIL: could not build the d=96 catalogue: {e}");
            std::process::exit(1);
        }
    };
    let shared = bench.built_in + d96.built_in;
    runner.run(2, "per-song budget", secs(60), Duration::ZERO, || ac2(&d96));
    runner.run(3, "partition probing", secs(120), Duration::ZERO, ac3);
    runner.run(4, "detector budget", secs(1), Duration::ZERO, ac4);
    runner.run(5, "detector cadence", secs(60), Duration::ZERO, ac5);
    runner.run(6, "gradient checks", secs(120), Duration::ZERO, ac6);
    runner.run(7, "oracle equivalence", secs(120), Duration::ZERO, ac7);
    runner.run(8, "end-to-end recognition", secs(600), shared + d96.analyzed_in, || ac8(&bench, &d96));
    runner.run(9, "fingerprint dimension", secs(1200), Duration::ZERO, || {
        let d64 = catalogue(&bench, 64)?;
        let d128 = catalogue(&bench, 128)?;
        ac9(&bench, &d64, &d96, &d128)
    });
    runner.run(10, "adaptive vs naive scorer", secs(300), d96.analyzed_in, || ac10(&bench, &d96));
    runner.run(11, "gate behaviour", secs(600), Duration::ZERO, || ac11(&bench, &d96));
    runner.run(12, "persistence", secs(60), Duration::ZERO, || ac12(&bench, &d96));

    if runner.failed.is_empty() {
        println!("acceptance: all 12 criteria passed");
    } else {
        println!("acceptance: failed {:?}", runner.failed);
        std::process::exit(1);
    }
}
