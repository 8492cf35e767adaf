//! Corpus persistence: a TOML manifest plus one binary array file per field.
//!
//! Array files are little-endian 32-bit floats behind a 16-byte header
//! `{magic "DSCV", rank u32, dim0 u32, dim1 u32}`. Variable-length
//! per-recording data (features, f0) is concatenated along the frame axis;
//! the manifest records each recording's frame offset and length.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{DiscoverError, Result};
use crate::synthcover::{hex_digest, Corpus, Recording, SongSpec, VersionSpec};

const MAGIC: &[u8; 4] = b"DSCV";

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FEATURES_FILE: &str = "features.f32";
pub const F0_FILE: &str = "f0.f32";
pub const TIMBRE_FILE: &str = "timbre.f32";

/// Row of the manifest's recording table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub recording_id: u32,
    pub song_id: u32,
    /// First frame of this recording in the concatenated arrays.
    pub frame_offset: u64,
    pub frames: u64,
}

/// The corpus manifest: full generation config, spec tables, and layout of
/// the binary array files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub data: DataConfig,
    pub mixing_checksum: String,
    pub songs: Vec<SongSpec>,
    pub versions: Vec<VersionSpec>,
    pub recordings: Vec<RecordingEntry>,
}

/// Write a rank-1 or rank-2 array of f32 values with the 16-byte header.
pub fn write_array(path: &Path, rank: u32, dim0: u32, dim1: u32, data: &[f32]) -> Result<()> {
    debug_assert_eq!(data.len() as u64, dim0 as u64 * dim1 as u64);
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&rank.to_le_bytes())?;
    file.write_all(&dim0.to_le_bytes())?;
    file.write_all(&dim1.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read an array file, returning `(rank, dim0, dim1, data)`.
pub fn read_array(path: &Path) -> Result<(u32, u32, u32, Vec<f32>)> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(DiscoverError::Format(format!(
            "{}: bad magic, not a corpus array file",
            path.display()
        )));
    }
    let rank = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let dim0 = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let dim1 = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if rank != 1 && rank != 2 {
        return Err(DiscoverError::Format(format!(
            "{}: unsupported rank {rank}",
            path.display()
        )));
    }
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let expected = dim0 as usize * dim1 as usize * 4;
    if raw.len() != expected {
        return Err(DiscoverError::Format(format!(
            "{}: expected {expected} payload bytes, found {}",
            path.display(),
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rank, dim0, dim1, data))
}

fn mixing_checksum(corpus: &Corpus) -> String {
    let mut hasher = Sha256::new();
    for w in [&corpus.w_melody, &corpus.w_timbre] {
        for v in w.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_digest(&hasher.finalize())
}

/// Persist a corpus into a directory: manifest plus the three array files.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut entries = Vec::with_capacity(corpus.recordings.len());
    let mut features = Vec::new();
    let mut f0 = Vec::new();
    let mut timbre = Vec::new();
    let mut offset = 0u64;
    let d_f = corpus.config.feature_dim;
    for rec in &corpus.recordings {
        let frames = rec.features.nrows() as u64;
        entries.push(RecordingEntry {
            recording_id: rec.recording_id,
            song_id: rec.song_id,
            frame_offset: offset,
            frames,
        });
        offset += frames;
        for v in rec.features.iter() {
            features.push(*v as f32);
        }
        for v in &rec.f0_contour {
            f0.push(*v as f32);
        }
        for v in &rec.timbre {
            timbre.push(*v as f32);
        }
    }

    let manifest = CorpusManifest {
        format_version: 1,
        data: corpus.config.clone(),
        mixing_checksum: mixing_checksum(corpus),
        songs: corpus.songs.clone(),
        versions: corpus.versions.clone(),
        recordings: entries,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| DiscoverError::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;

    let total_frames = offset as u32;
    write_array(
        &dir.join(FEATURES_FILE),
        2,
        total_frames,
        d_f as u32,
        &features,
    )?;
    write_array(&dir.join(F0_FILE), 1, total_frames, 1, &f0)?;
    write_array(
        &dir.join(TIMBRE_FILE),
        2,
        corpus.recordings.len() as u32,
        corpus.config.timbre_dim as u32,
        &timbre,
    )?;
    Ok(())
}

/// Load a corpus directory back into memory. The mixing matrices are
/// regenerated from the stored config and verified against the manifest
/// checksum.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
        DiscoverError::Format(format!(
            "{}: cannot read corpus manifest: {e}",
            dir.display()
        ))
    })?;
    let manifest: CorpusManifest = toml::from_str(&text)
        .map_err(|e| DiscoverError::Format(format!("corpus manifest parse: {e}")))?;
    if manifest.format_version != 1 {
        return Err(DiscoverError::Format(format!(
            "unsupported corpus format version {}",
            manifest.format_version
        )));
    }

    let (rank_f, frames_total, d_f, features) = read_array(&dir.join(FEATURES_FILE))?;
    let (rank_0, f0_len, _, f0) = read_array(&dir.join(F0_FILE))?;
    let (rank_t, n_rec, d_t, timbre) = read_array(&dir.join(TIMBRE_FILE))?;
    if rank_f != 2 || rank_0 != 1 || rank_t != 2 {
        return Err(DiscoverError::Format("unexpected array ranks".into()));
    }
    if f0_len != frames_total
        || n_rec as usize != manifest.recordings.len()
        || d_f as usize != manifest.data.feature_dim
        || d_t as usize != manifest.data.timbre_dim
    {
        return Err(DiscoverError::Format(
            "array shapes inconsistent with manifest".into(),
        ));
    }

    let mut recordings = Vec::with_capacity(manifest.recordings.len());
    for (idx, entry) in manifest.recordings.iter().enumerate() {
        let start = entry.frame_offset as usize;
        let frames = entry.frames as usize;
        let d_f = d_f as usize;
        let mut feat = Array2::zeros((frames, d_f));
        for t in 0..frames {
            for k in 0..d_f {
                feat[(t, k)] = features[(start + t) * d_f + k] as f64;
            }
        }
        let contour: Vec<f64> = f0[start..start + frames].iter().map(|v| *v as f64).collect();
        let d_t = d_t as usize;
        let timbre_vec: Vec<f64> = timbre[idx * d_t..(idx + 1) * d_t]
            .iter()
            .map(|v| *v as f64)
            .collect();
        recordings.push(Recording {
            recording_id: entry.recording_id,
            song_id: entry.song_id,
            features: feat,
            f0_contour: contour,
            timbre: timbre_vec,
        });
    }

    // regenerate mixing matrices deterministically from the stored config
    let regenerated = super::generate_mixing(&manifest.data);
    let corpus = Corpus {
        songs: manifest.songs,
        versions: manifest.versions,
        recordings,
        config: manifest.data,
        w_melody: regenerated.0,
        w_timbre: regenerated.1,
    };
    if mixing_checksum(&corpus) != manifest.mixing_checksum {
        return Err(DiscoverError::Format(
            "mixing matrix checksum mismatch: corpus was generated with a different build".into(),
        ));
    }
    Ok(corpus)
}

/// Combined digest over every file of a corpus directory.
pub fn corpus_dir_checksum(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, FEATURES_FILE, F0_FILE, TIMBRE_FILE] {
        let bytes = fs::read(dir.join(name))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex_digest(&hasher.finalize()))
}
