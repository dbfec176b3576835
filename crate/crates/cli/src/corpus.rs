//! Synthetic corpus on disk: `songs/*.wav`, `queries/*.wav`, an optional
//! `ambient.wav`, and `manifest.jsonl` holding one tagged JSON object per
//! line with the ground truth of every file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tunewake::frontend::{decode_wav, encode_wav};
use tunewake::synth::{
    heldout_query, noise_query, render_ambient, render_song_f32, rng_for, song_queries, to_pcm, AmbientSpec,
    Augmentation, MusicRegion, QueryClip, QuerySource,
};
use tunewake::{PcmStream, PipelineConfig};

pub const MANIFEST: &str = "manifest.jsonl";

const QUERY_STREAM: u64 = 0x5155;

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Number of catalogue songs (ids 0..N).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub songs: u32,
    /// Length of every song, seconds.
    #[arg(long, default_value_t = 240.0)]
    pub duration_s: f64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Distorted excerpts per catalogue song.
    #[arg(long, default_value_t = 10)]
    pub queries_per_song: usize,
    /// Pure-noise queries (should be rejected).
    #[arg(long, default_value_t = 100)]
    pub noise_queries: usize,
    /// Excerpts of songs outside the catalogue (should be rejected).
    #[arg(long, default_value_t = 100)]
    pub heldout_queries: usize,
    #[arg(long, default_value_t = 8.0)]
    pub query_len_s: f64,
    /// Largest time jitter of a query against whole-second song offsets.
    #[arg(long, default_value_t = 250)]
    pub max_jitter_ms: i32,
    /// Also render an ambient recording of this many seconds with music
    /// regions from the catalogue (0 = none).
    #[arg(long, default_value_t = 0.0)]
    pub ambient_s: f64,
    /// Music regions in the ambient recording.
    #[arg(long, default_value_t = 12)]
    pub ambient_regions: usize,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Corpus {
        seed: u64,
        songs: u32,
        duration_s: f64,
    },
    Song {
        song_id: u32,
        title: String,
        artist: String,
        duration_s: f64,
        path: String,
    },
    Query {
        path: String,
        source: QuerySource,
        song_id: Option<u32>,
        offset_s: Option<f64>,
        augmentation: Option<Augmentation>,
    },
    Ambient {
        path: String,
        duration_s: f64,
        regions: Vec<MusicRegion>,
    },
}

pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
            );
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn songs(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| matches!(e, Entry::Song { .. }))
    }

    pub fn queries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| matches!(e, Entry::Query { .. }))
    }

    pub fn ambient(&self) -> Option<(&str, f64, &[MusicRegion])> {
        self.entries.iter().find_map(|e| match e {
            Entry::Ambient {
                path,
                duration_s,
                regions,
            } => Some((path.as_str(), *duration_s, regions.as_slice())),
            _ => None,
        })
    }

    pub fn read_wav(&self, rel: &str) -> Result<PcmStream> {
        read_wav(&self.dir.join(rel))
    }
}

pub fn read_wav(path: &Path) -> Result<PcmStream> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_wav(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    fs::write(path, encode_wav(&to_pcm(samples))).with_context(|| format!("writing {}", path.display()))
}

pub fn song_title(song_id: u32) -> (String, String) {
    (format!("Track {song_id:04}"), format!("Synth Ensemble {:02}", song_id % 17))
}

pub fn gen_corpus(cfg: &PipelineConfig, args: &GenCorpusArgs) -> Result<()> {
    ensure!(
        args.duration_s > args.query_len_s + 1.0,
        "--duration-s must exceed the query length plus one second"
    );
    ensure!(args.query_len_s >= 1.0, "--query-len-s must be at least one second");
    for sub in ["songs", "queries"] {
        let dir = args.out.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let seed = cfg.seed;
    let mut entries = vec![Entry::Corpus {
        seed,
        songs: args.songs,
        duration_s: args.duration_s,
    }];
    let mut rng = rng_for(seed, QUERY_STREAM);
    // Query entries follow all song entries; audio is written as generated.
    let mut query_entries = Vec::new();
    let push_query = |entries: &mut Vec<Entry>, q: QueryClip| -> Result<()> {
        let path = format!("queries/query_{:05}.wav", entries.len());
        write_wav(&args.out.join(&path), &q.samples)?;
        entries.push(Entry::Query {
            path,
            source: q.source,
            song_id: q.song_id,
            offset_s: q.offset_s,
            augmentation: q.augmentation,
        });
        Ok(())
    };
    for song_id in 0..args.songs {
        let song = render_song_f32(seed, song_id, args.duration_s);
        let path = format!("songs/song_{song_id:04}.wav");
        write_wav(&args.out.join(&path), &song)?;
        let (title, artist) = song_title(song_id);
        entries.push(Entry::Song {
            song_id,
            title,
            artist,
            duration_s: args.duration_s,
            path,
        });
        for q in song_queries(&song, song_id, args.queries_per_song, args.query_len_s, args.max_jitter_ms, &mut rng) {
            push_query(&mut query_entries, q)?;
        }
        eprintln!("song {}/{}", song_id + 1, args.songs);
    }
    for k in 0..args.noise_queries {
        push_query(&mut query_entries, noise_query(k, args.query_len_s, &mut rng))?;
    }
    for k in 0..args.heldout_queries {
        push_query(&mut query_entries, heldout_query(seed, k as u32, args.query_len_s, &mut rng))?;
    }
    entries.extend(query_entries);
    if args.ambient_s > 0.0 {
        let base = AmbientSpec::new(seed, seed, args.ambient_s, (0..args.songs).collect());
        let (lo, hi) = base.region_len_s;
        let spec = AmbientSpec {
            song_duration_s: args.duration_s,
            regions: args.ambient_regions,
            region_len_s: (lo.min(args.duration_s), hi.min(args.duration_s)),
            ..base
        };
        let (pcm, regions) = render_ambient(&spec);
        let path = "ambient.wav".to_string();
        fs::write(args.out.join(&path), encode_wav(&pcm))?;
        entries.push(Entry::Ambient {
            path,
            duration_s: args.ambient_s,
            regions,
        });
    }
    let mut out = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let path = args.out.join(MANIFEST);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} entries to {}", entries.len(), path.display());
    Ok(())
}

/// Catalogue songs of a corpus, in manifest order.
pub struct SongFile<'a> {
    pub song_id: u32,
    pub title: &'a str,
    pub artist: &'a str,
    pub duration_s: f64,
    pub path: &'a str,
}

pub fn song_files(manifest: &Manifest) -> Result<Vec<SongFile<'_>>> {
    let songs: Vec<SongFile> = manifest
        .songs()
        .filter_map(|e| match e {
            Entry::Song {
                song_id,
                title,
                artist,
                duration_s,
                path,
            } => Some(SongFile {
                song_id: *song_id,
                title,
                artist,
                duration_s: *duration_s,
                path,
            }),
            _ => None,
        })
        .collect();
    if songs.is_empty() {
        bail!("corpus {} lists no songs", manifest.dir.display());
    }
    Ok(songs)
}
