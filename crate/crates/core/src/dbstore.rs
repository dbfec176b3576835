//! The NPDB catalogue file: song metadata, quantized fingerprints, the
//! partitioner and PQ codebooks, and the density radii, in one immutable
//! little-endian file protected by a trailing CRC32.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0    magic "NPDB"
//! 4    version u16, reserved u16
//! 8    dim, subspaces, ksub, partitions, songs, fingerprints, density_k  (u32 each)
//! 36   section count u32 (= 6)
//! 40   section table: 6 x (kind u32, offset u32, length u32)
//! 112  sections, in kind order
//! end  CRC32 of every preceding byte (u32)
//! ```
//!
//! Fingerprints are stored song by song, in song-table order; offsets within
//! a song are implicit (0, 1, 2, ... seconds).

use std::collections::BTreeSet;

use thiserror::Error;

use crate::fpindex::{IndexConfig, IndexError, IvfPqIndex, PartitionerModel, PqCodebook};
use crate::nnfp::Fingerprint;
use crate::seqmatch::{self, DensityModel, MatchError, MatchResult, MatcherConfig};

pub const MAGIC: [u8; 4] = *b"NPDB";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 40;
const SECTION_COUNT: usize = 6;
const TABLE_LEN: usize = SECTION_COUNT * 12;

/// Section kinds, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
enum Section {
    Songs = 1,
    Codes = 2,
    Partitions = 3,
    Centroids = 4,
    Codebooks = 5,
    Density = 6,
}

const SECTIONS: [Section; SECTION_COUNT] = [
    Section::Songs,
    Section::Codes,
    Section::Partitions,
    Section::Centroids,
    Section::Codebooks,
    Section::Density,
];

#[derive(Debug, Error, PartialEq)]
pub enum DbError {
    #[error("not an NPDB file (bad magic)")]
    BadMagic,
    #[error("unsupported NPDB version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{what} lies outside the file")]
    OutOfBounds { what: String },
    #[error("malformed NPDB file: {0}")]
    Malformed(String),
    #[error("song list is empty")]
    EmptySongList,
    #[error("duplicate song id {0}")]
    DuplicateSong(u32),
    #[error("song {0} has no fingerprints")]
    EmptySong(u32),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Descriptive metadata of one song.
#[derive(Debug, Clone, PartialEq)]
pub struct SongMeta {
    pub song_id: u32,
    pub title: String,
    pub artist: String,
    pub duration_s: f64,
}

/// A song and its span in the global fingerprint array.
#[derive(Debug, Clone, PartialEq)]
pub struct SongRecord {
    pub meta: SongMeta,
    pub start: u32,
    pub count: u32,
}

/// Loaded, immutable catalogue.
#[derive(Debug, Clone)]
pub struct Database {
    songs: Vec<SongRecord>,
    index: IvfPqIndex,
    density: DensityModel,
    file_bytes: usize,
}

/// Storage accounting.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StorageReport {
    pub songs: usize,
    pub fingerprints: usize,
    pub dim: usize,
    pub code_bytes: usize,
    /// Float32 fingerprint bytes over code bytes.
    pub compression_ratio: f64,
    /// Code bytes per song: the fingerprint payload.
    pub payload_bytes_per_song: f64,
    /// Payload plus per-fingerprint partition ids and density bytes plus the
    /// song's metadata record.
    pub total_bytes_per_song: f64,
    /// Shared model data: header, centroids, codebooks, checksum.
    pub model_bytes: usize,
    /// Whole file divided by the number of songs.
    pub file_bytes_per_song: f64,
    /// Code bytes at this dimension over code bytes at d = 128.
    pub payload_ratio_vs_d128: f64,
}

/// Encodes a song list and their fingerprint sequences into a trained index
/// and density model. Song order fixes fingerprint order; fingerprint `i` of
/// a song gets offset `i` seconds.
pub fn index_songs(
    songs: &[(SongMeta, Vec<Fingerprint>)],
    index_cfg: &IndexConfig,
    matcher: &MatcherConfig,
) -> Result<(IvfPqIndex, DensityModel), DbError> {
    check_songs(songs.iter().map(|(m, f)| (m.song_id, f.len())))?;
    let dim = songs[0].1[0].dim();
    let mut vectors = Vec::new();
    let mut ids = Vec::new();
    for (meta, fps) in songs {
        for (i, f) in fps.iter().enumerate() {
            if f.dim() != dim {
                return Err(IndexError::DimMismatch {
                    expected: dim,
                    found: f.dim(),
                }
                .into());
            }
            vectors.extend_from_slice(&f.values);
            ids.push((meta.song_id, i as u32));
        }
    }
    let index = IvfPqIndex::build(&vectors, dim, &ids, index_cfg)?;
    let density = seqmatch::local_density(
        &index,
        matcher.density_k.min(index.len().saturating_sub(1)).max(1),
        matcher.density_exclusion_s,
        matcher.radius_floor,
    )?;
    Ok((index, density))
}

fn check_songs(songs: impl Iterator<Item = (u32, usize)>) -> Result<(), DbError> {
    let mut seen = BTreeSet::new();
    for (id, count) in songs {
        if !seen.insert(id) {
            return Err(DbError::DuplicateSong(id));
        }
        if count == 0 {
            return Err(DbError::EmptySong(id));
        }
    }
    if seen.is_empty() {
        return Err(DbError::EmptySongList);
    }
    Ok(())
}

fn partition_width(partitions: usize) -> usize {
    if partitions <= 256 {
        1
    } else {
        2
    }
}

/// Log-uniform 8-bit quantization of the radii between their min and max.
fn quantize_radii(radii: &[f32]) -> (f32, f32, Vec<u8>) {
    let lo = radii.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = radii.iter().copied().fold(0.0f32, f32::max);
    let span = (hi as f64 / lo as f64).ln();
    let q = radii
        .iter()
        .map(|&r| {
            if span > 0.0 {
                ((r as f64 / lo as f64).ln() / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (lo, hi, q)
}

fn dequantize_radius(lo: f32, hi: f32, q: u8) -> f32 {
    let span = (hi as f64 / lo as f64).ln();
    (lo as f64 * (span * q as f64 / 255.0).exp()) as f32
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), DbError> {
    let len = u16::try_from(s.len()).map_err(|_| DbError::Malformed(format!("string of {} bytes is too long", s.len())))?;
    put_u16(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes `songs` (in index order) with the index and density model.
/// Identical inputs give identical bytes.
pub fn build_db(songs: &[SongMeta], index: &IvfPqIndex, density: &DensityModel) -> Result<Vec<u8>, DbError> {
    let counts: Vec<usize> = songs
        .iter()
        .map(|m| index.song_span(m.song_id).map_or(0, |(_, c)| c))
        .collect();
    check_songs(songs.iter().zip(&counts).map(|(m, &c)| (m.song_id, c)))?;
    // Songs must cover the index back to back, in order.
    let mut next = 0;
    for (m, &c) in songs.iter().zip(&counts) {
        let (start, _) = index.song_span(m.song_id).expect("checked above");
        if start != next {
            return Err(DbError::Malformed(format!(
                "song {} starts at fingerprint {start}, expected {next}",
                m.song_id
            )));
        }
        next += c;
    }
    if next != index.len() || index.song_count() != songs.len() {
        return Err(DbError::Malformed("song list does not cover the index".into()));
    }
    if density.radii.len() != index.len() {
        return Err(MatchError::DensityMismatch {
            expected: index.len(),
            found: density.radii.len(),
        }
        .into());
    }

    let p = index.partitioner.partitions();
    let mut sections: Vec<Vec<u8>> = Vec::with_capacity(SECTION_COUNT);
    let mut s = Vec::new();
    for (m, &c) in songs.iter().zip(&counts) {
        put_u32(&mut s, m.song_id);
        put_u32(&mut s, c as u32);
        put_f32s(&mut s, &[m.duration_s as f32]);
        put_str(&mut s, &m.title)?;
        put_str(&mut s, &m.artist)?;
    }
    sections.push(s);
    sections.push(index.codes.clone());
    let mut s = Vec::with_capacity(index.len() * partition_width(p));
    for &part in &index.partition_of {
        if partition_width(p) == 1 {
            s.push(part as u8);
        } else {
            put_u16(&mut s, part as u16);
        }
    }
    sections.push(s);
    let mut s = Vec::new();
    put_f32s(&mut s, &index.partitioner.centroids);
    sections.push(s);
    let mut s = Vec::new();
    put_f32s(&mut s, &index.codebook.centroids);
    sections.push(s);
    let (lo, hi, q) = quantize_radii(&density.radii);
    let mut s = Vec::with_capacity(8 + q.len());
    put_f32s(&mut s, &[lo, hi]);
    s.extend_from_slice(&q);
    sections.push(s);

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u16(&mut out, VERSION);
    put_u16(&mut out, 0);
    for v in [
        index.dim(),
        index.codebook.subspaces,
        index.codebook.ksub,
        p,
        songs.len(),
        index.len(),
        density.k,
        SECTION_COUNT,
    ] {
        put_u32(&mut out, v as u32);
    }
    let mut offset = HEADER_LEN + TABLE_LEN;
    for (kind, body) in SECTIONS.iter().zip(&sections) {
        put_u32(&mut out, *kind as u32);
        put_u32(&mut out, offset as u32);
        put_u32(&mut out, body.len() as u32);
        offset += body.len();
    }
    for body in &sections {
        out.extend_from_slice(body);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

/// Bounds-checked little-endian cursor.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DbError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DbError::Malformed(format!("{} section ends early", self.what)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DbError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DbError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DbError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| DbError::Malformed("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String, DbError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DbError::Malformed("song string is not UTF-8".into()))
    }

    fn finish(&self) -> Result<(), DbError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(DbError::Malformed(format!("{} section has trailing bytes", self.what)))
        }
    }
}

fn header_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses and validates an NPDB file.
pub fn load_db(bytes: &[u8]) -> Result<Database, DbError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(DbError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + TABLE_LEN + 4 {
        return Err(DbError::OutOfBounds {
            what: "header".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DbError::UnsupportedVersion { found: version });
    }
    let field = |i: usize| header_u32(bytes, 8 + 4 * i) as usize;
    let (dim, subspaces, ksub, partitions, n_songs, n_fp, density_k, n_sections) =
        (field(0), field(1), field(2), field(3), field(4), field(5), field(6), field(7));
    if n_sections != SECTION_COUNT {
        return Err(DbError::Malformed(format!("{n_sections} sections, expected {SECTION_COUNT}")));
    }
    let payload_end = bytes.len() - 4;
    let mut sections = Vec::with_capacity(SECTION_COUNT);
    for (i, expected) in SECTIONS.iter().enumerate() {
        let at = HEADER_LEN + 12 * i;
        let (kind, offset, len) = (
            header_u32(bytes, at),
            header_u32(bytes, at + 4) as usize,
            header_u32(bytes, at + 8) as usize,
        );
        if kind != *expected as u32 {
            return Err(DbError::Malformed(format!("section {i} has kind {kind}")));
        }
        if offset < HEADER_LEN + TABLE_LEN || offset.checked_add(len).is_none_or(|e| e > payload_end) {
            return Err(DbError::OutOfBounds {
                what: format!("{expected:?} section"),
            });
        }
        sections.push(&bytes[offset..offset + len]);
    }
    let stored = header_u32(bytes, payload_end);
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(DbError::Checksum { stored, computed });
    }
    if dim == 0 || subspaces == 0 || dim % subspaces != 0 || ksub == 0 || ksub > 256 || partitions == 0 {
        return Err(DbError::Malformed("inconsistent index dimensions".into()));
    }

    let mut c = Cursor::new(sections[0], "songs");
    let mut songs = Vec::with_capacity(n_songs.min(sections[0].len()));
    let (mut song_ids, mut offsets) = (Vec::new(), Vec::new());
    let mut start = 0u32;
    for _ in 0..n_songs {
        let song_id = c.u32()?;
        let count = c.u32()?;
        let duration_s = c.f32s(1)?[0] as f64;
        let title = c.string()?;
        let artist = c.string()?;
        if count as usize > n_fp - start as usize {
            return Err(DbError::Malformed(format!("song {song_id} overruns the fingerprint array")));
        }
        song_ids.extend(std::iter::repeat_n(song_id, count as usize));
        offsets.extend(0..count);
        songs.push(SongRecord {
            meta: SongMeta {
                song_id,
                title,
                artist,
                duration_s,
            },
            start,
            count,
        });
        start += count;
    }
    c.finish()?;
    check_songs(songs.iter().map(|s| (s.meta.song_id, s.count as usize)))?;
    if start as usize != n_fp {
        return Err(DbError::Malformed("songs do not cover every fingerprint".into()));
    }

    let mut c = Cursor::new(sections[1], "codes");
    let codes = c.take(n_fp * subspaces)?.to_vec();
    c.finish()?;

    let width = partition_width(partitions);
    let mut c = Cursor::new(sections[2], "partitions");
    let raw = c.take(n_fp * width)?;
    c.finish()?;
    let partition_of: Vec<u32> = if width == 1 {
        raw.iter().map(|&b| b as u32).collect()
    } else {
        raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as u32).collect()
    };

    let mut c = Cursor::new(sections[3], "centroids");
    let centroids = c.f32s(partitions * dim)?;
    c.finish()?;
    let mut c = Cursor::new(sections[4], "codebooks");
    let cb = c.f32s(ksub * dim)?;
    c.finish()?;
    let mut c = Cursor::new(sections[5], "density");
    let lohi = c.f32s(2)?;
    let q = c.take(n_fp)?;
    c.finish()?;
    let (lo, hi) = (lohi[0], lohi[1]);
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(DbError::Malformed("density range is invalid".into()));
    }
    let radii = q.iter().map(|&b| dequantize_radius(lo, hi, b)).collect();

    let index = IvfPqIndex::from_parts(
        PartitionerModel { dim, centroids },
        PqCodebook {
            dim,
            subspaces,
            ksub,
            centroids: cb,
        },
        song_ids,
        offsets,
        partition_of,
        codes,
    )?;
    Ok(Database {
        songs,
        index,
        density: DensityModel { k: density_k, radii },
        file_bytes: bytes.len(),
    })
}

impl Database {
    pub fn songs(&self) -> &[SongRecord] {
        &self.songs
    }

    pub fn song(&self, song_id: u32) -> Option<&SongRecord> {
        self.songs.iter().find(|s| s.meta.song_id == song_id)
    }

    pub fn index(&self) -> &IvfPqIndex {
        &self.index
    }

    pub fn density(&self) -> &DensityModel {
        &self.density
    }

    pub fn file_bytes(&self) -> usize {
        self.file_bytes
    }

    /// Runs the second stage and attaches the song title.
    pub fn recognize(&self, query: &[Fingerprint], cfg: &MatcherConfig) -> Result<MatchResult, DbError> {
        let mut r = seqmatch::recognize(query, &self.index, &self.density, cfg)?;
        r.title = r.song_id.and_then(|id| self.song(id)).map(|s| s.meta.title.clone());
        Ok(r)
    }

    pub fn storage_report(&self) -> StorageReport {
        let n = self.index.len();
        let songs = self.songs.len();
        let m = self.index.codebook.subspaces;
        let dim = self.index.dim();
        let per_fp_overhead = partition_width(self.index.partitioner.partitions()) + 1;
        let meta_bytes: usize = self
            .songs
            .iter()
            .map(|s| 4 + 4 + 4 + 2 + s.meta.title.len() + 2 + s.meta.artist.len())
            .sum();
        let model_bytes = self.file_bytes - n * (m + per_fp_overhead) - meta_bytes;
        StorageReport {
            songs,
            fingerprints: n,
            dim,
            code_bytes: m,
            compression_ratio: (dim * 4) as f64 / m as f64,
            payload_bytes_per_song: (n * m) as f64 / songs as f64,
            total_bytes_per_song: (n * (m + per_fp_overhead) + meta_bytes) as f64 / songs as f64,
            model_bytes,
            file_bytes_per_song: self.file_bytes as f64 / songs as f64,
            payload_ratio_vs_d128: m as f64 / (128 / 8) as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn songs(n: u32, len: usize, d: usize) -> Vec<(SongMeta, Vec<Fingerprint>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|id| {
                let fps = (0..len)
                    .map(|i| Fingerprint {
                        values: unit(&mut rng, d),
                        song_id: Some(id),
                        offset_s: i as f64,
                    })
                    .collect();
                let meta = SongMeta {
                    song_id: id,
                    title: format!("Song {id}"),
                    artist: "Synth".into(),
                    duration_s: len as f64,
                };
                (meta, fps)
            })
            .collect()
    }

    fn build(input: &[(SongMeta, Vec<Fingerprint>)]) -> Vec<u8> {
        let (index, density) = index_songs(input, &IndexConfig::default(), &MatcherConfig::default()).unwrap();
        let metas: Vec<SongMeta> = input.iter().map(|s| s.0.clone()).collect();
        build_db(&metas, &index, &density).unwrap()
    }

    #[test]
    fn round_trip_reproduces_records_and_codes() {
        let input = songs(6, 50, 32);
        let (index, density) = index_songs(&input, &IndexConfig::default(), &MatcherConfig::default()).unwrap();
        let metas: Vec<SongMeta> = input.iter().map(|s| s.0.clone()).collect();
        let db = load_db(&build_db(&metas, &index, &density).unwrap()).unwrap();
        assert_eq!(db.index(), &index);
        for (rec, meta) in db.songs().iter().zip(&metas) {
            assert_eq!(rec.meta, *meta);
            assert_eq!(rec.count, 50);
        }
        for (a, b) in db.density().radii.iter().zip(&density.radii) {
            assert!((a / b - 1.0).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let input = songs(4, 30, 16);
        assert_eq!(build(&input), build(&input));
    }

    #[test]
    fn rejects_bad_song_lists() {
        let cfg = (IndexConfig::default(), MatcherConfig::default());
        assert_eq!(index_songs(&[], &cfg.0, &cfg.1).unwrap_err(), DbError::EmptySongList);
        let mut dup = songs(2, 20, 16);
        dup[1].0.song_id = 0;
        assert_eq!(index_songs(&dup, &cfg.0, &cfg.1).unwrap_err(), DbError::DuplicateSong(0));
        let mut empty = songs(2, 20, 16);
        empty[1].1.clear();
        assert_eq!(index_songs(&empty, &cfg.0, &cfg.1).unwrap_err(), DbError::EmptySong(1));
    }

    #[test]
    fn corruption_is_a_typed_error() {
        let bytes = build(&songs(3, 20, 16));
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(load_db(&flipped), Err(DbError::Checksum { .. })));
        assert!(matches!(load_db(&bytes[..bytes.len() - 10]), Err(DbError::OutOfBounds { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(load_db(&magic).unwrap_err(), DbError::BadMagic);
        let mut version = bytes;
        version[4] = 9;
        assert_eq!(load_db(&version).unwrap_err(), DbError::UnsupportedVersion { found: 9 });
    }

    #[test]
    fn one_second_song_costs_codes_plus_metadata() {
        // 2 songs are needed to train anything; each has one fingerprint.
        let input = songs(2, 1, 96);
        let db = load_db(&build(&input)).unwrap();
        let r = db.storage_report();
        assert_eq!(r.payload_bytes_per_song, 12.0);
        assert_eq!(r.compression_ratio, 32.0);
        let meta = 4 + 4 + 4 + 2 + "Song 0".len() + 2 + "Synth".len();
        assert_eq!(r.total_bytes_per_song, (12 + 2 + meta) as f64);
        assert_eq!(r.payload_ratio_vs_d128, 0.75);
    }

    #[test]
    fn radius_quantization_is_close() {
        let radii: Vec<f32> = (1..200).map(|i| 0.01 * i as f32).collect();
        let (lo, hi, q) = quantize_radii(&radii);
        for (r, b) in radii.iter().zip(q) {
            let back = dequantize_radius(lo, hi, b);
            assert!((back / r - 1.0).abs() < 0.011, "{r} -> {back}");
        }
    }
}
