//! Synthetic cover-song corpus with known version-invariant and
//! version-variant factors.
//!
//! Each song is a melody (pitch classes) plus a base pitch; each version
//! re-performs it under a transposition, a tempo change, and a performer
//! timbre. Observable features are a linear mixture of a one-hot pitch-bin
//! encoding of the fundamental-frequency contour and the timbre vector, plus
//! i.i.d. noise, so ground truth is recoverable by least squares and every
//! disentanglement claim downstream has an oracle.

pub mod io;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{DiscoverError, Result};

/// Pitch bins per semitone in the feature encoding (CQT-like granularity).
pub const BINS_PER_SEMITONE: usize = 4;
/// Pitch-class bins in one octave-folded feature frame.
pub const N_PITCH_BINS: usize = 12 * BINS_PER_SEMITONE;

/// A song: the version-invariant factor set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SongSpec {
    pub song_id: u32,
    /// Pitch classes 0..=11, one per note.
    pub melody: Vec<u8>,
    /// Reference pitch in semitones on a MIDI-like scale.
    pub base_pitch: f64,
}

/// One performance of a song: the version-variant factor set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionSpec {
    pub recording_id: u32,
    pub song_id: u32,
    /// Key shift in semitones relative to the song's base pitch.
    pub transposition: f64,
    /// Playback speed factor in [0.5, 2.0]; higher is faster.
    pub tempo_scale: f64,
    /// Performer timbre vector (dim `d_t`).
    pub timbre: Vec<f64>,
    /// Seed of the per-recording noise stream.
    pub noise_seed: u64,
}

/// A rendered recording: observable features plus stored ground truth.
#[derive(Debug, Clone)]
pub struct Recording {
    pub recording_id: u32,
    pub song_id: u32,
    /// Frames x feature-dim observable input.
    pub features: Array2<f64>,
    /// Per-frame fundamental frequency in semitones.
    pub f0_contour: Vec<f64>,
    /// Ground-truth timbre vector.
    pub timbre: Vec<f64>,
}

/// The full corpus: specs, rendered recordings, and the mixing matrices that
/// produced them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub songs: Vec<SongSpec>,
    pub versions: Vec<VersionSpec>,
    pub recordings: Vec<Recording>,
    pub config: DataConfig,
    /// `d_f x N_PITCH_BINS` melody mixing matrix, drawn once per corpus.
    pub w_melody: Array2<f64>,
    /// `d_f x d_t` timbre mixing matrix, drawn once per corpus.
    pub w_timbre: Array2<f64>,
}

/// Train/valid/test recording ids for one evaluation scenario.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
    pub scenario: u8,
    pub seen_fraction: f64,
}

impl CorpusSplit {
    /// Stable digest of the split content, used to tag metric reports.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update([self.scenario]);
        hasher.update(self.seen_fraction.to_le_bytes());
        for part in [&self.train, &self.valid, &self.test] {
            hasher.update((part.len() as u64).to_le_bytes());
            for id in part {
                hasher.update(id.to_le_bytes());
            }
        }
        hex_digest(&hasher.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic substream seed derived from a root seed, a purpose tag, and
/// an id, so per-song and per-recording streams are independent of iteration
/// order. Kept within the positive i64 range so seeds survive a TOML round
/// trip.
pub fn derive_seed(root: u64, tag: &str, id: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(id.to_le_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap()) & (i64::MAX as u64)
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Mixing matrices for a data configuration, drawn once from the corpus seed.
pub(crate) fn generate_mixing(config: &DataConfig) -> (Array2<f64>, Array2<f64>) {
    let mut global = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "mixing", 0));
    let w_melody = Array2::from_shape_fn((config.feature_dim, N_PITCH_BINS), |_| {
        standard_normal(&mut global)
    });
    // scaled so the timbre term contributes comparable (not dominant)
    // variance relative to the melody term
    let timbre_scale = 0.7 / (config.timbre_dim as f64).sqrt();
    let w_timbre = Array2::from_shape_fn((config.feature_dim, config.timbre_dim), |_| {
        standard_normal(&mut global) * timbre_scale
    });
    (w_melody, w_timbre)
}

/// Generate the full corpus for a data configuration. Byte-identical output
/// for identical configurations.
pub fn generate_corpus(config: &DataConfig) -> Result<Corpus> {
    config.validate()?;
    let seed = config.seed;
    let (w_melody, w_timbre) = generate_mixing(config);

    let mut songs = Vec::with_capacity(config.n_songs);
    let mut versions = Vec::new();
    let mut next_recording = 0u32;

    for song_id in 0..config.n_songs as u32 {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "song", song_id as u64));
        let melody: Vec<u8> = (0..config.melody_len)
            .map(|_| rng.gen_range(0..12u8))
            .collect();
        let base_pitch =
            rng.gen_range(config.base_pitch_min..=config.base_pitch_max.max(config.base_pitch_min));
        songs.push(SongSpec {
            song_id,
            melody,
            base_pitch,
        });

        let n_versions = if config.versions_max > config.versions_min {
            rng.gen_range(config.versions_min..=config.versions_max)
        } else {
            config.versions_min
        };

        let mut transpositions: Vec<f64> = Vec::new();
        let mut timbres: Vec<Vec<f64>> = Vec::new();
        for _ in 0..n_versions {
            // rejection-sample transposition and timbre so versions of one
            // song stay separated in both factors; covers transpose by whole
            // semitones, with a continuous fallback when a song has more
            // versions than integer keys in range
            let range = config.transposition_range;
            let t = {
                let mut attempts = 0;
                loop {
                    attempts += 1;
                    let cand = if config.integer_transpositions && attempts <= 200 {
                        rng.gen_range(-(range.floor() as i64)..=(range.floor() as i64)) as f64
                    } else {
                        rng.gen_range(-range..=range)
                    };
                    let gap = if attempts <= 400 {
                        config.transposition_min_gap
                    } else {
                        1e-9
                    };
                    if transpositions.iter().all(|prev| (prev - cand).abs() >= gap) {
                        break cand;
                    }
                }
            };
            transpositions.push(t);
            let tim = loop {
                let cand = normal_vec(&mut rng, config.timbre_dim);
                let ok = timbres.iter().all(|prev| {
                    let d2: f64 = prev
                        .iter()
                        .zip(cand.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d2.sqrt() >= config.timbre_margin
                });
                if ok {
                    break cand;
                }
            };
            timbres.push(tim.clone());

            let tempo_scale = rng.gen_range(config.tempo_min..=config.tempo_max);
            versions.push(VersionSpec {
                recording_id: next_recording,
                song_id,
                transposition: t,
                tempo_scale,
                timbre: tim,
                noise_seed: derive_seed(seed, "noise", next_recording as u64),
            });
            next_recording += 1;
        }
    }

    let recordings = versions
        .iter()
        .map(|v| {
            render_features(
                &songs[v.song_id as usize],
                v,
                &w_melody,
                &w_timbre,
                config.frames_per_note,
                config.noise_sigma,
            )
        })
        .collect();

    Ok(Corpus {
        songs,
        versions,
        recordings,
        config: config.clone(),
        w_melody,
        w_timbre,
    })
}

/// Octave-folded pitch bin of a fundamental frequency in semitones.
pub fn pitch_bin(f0: f64) -> usize {
    let b = (f0 * BINS_PER_SEMITONE as f64).round() as i64;
    b.rem_euclid(N_PITCH_BINS as i64) as usize
}

/// Render one recording from its song and version specs. Pure function of its
/// inputs; noise comes only from the version's `noise_seed`.
pub fn render_features(
    song: &SongSpec,
    version: &VersionSpec,
    w_melody: &Array2<f64>,
    w_timbre: &Array2<f64>,
    frames_per_note: usize,
    noise_sigma: f64,
) -> Recording {
    let n_notes = song.melody.len();
    let frames =
        ((n_notes * frames_per_note) as f64 / version.tempo_scale).round() as usize;
    let frames = frames.max(1);
    let d_f = w_melody.nrows();

    let mut rng = ChaCha20Rng::seed_from_u64(version.noise_seed);
    let mut f0_contour = Vec::with_capacity(frames);
    for t in 0..frames {
        let note_idx = (t * n_notes) / frames;
        let pitch = song.base_pitch + version.transposition + song.melody[note_idx] as f64;
        let jitter = if noise_sigma > 0.0 {
            standard_normal(&mut rng) * noise_sigma * 0.25
        } else {
            0.0
        };
        f0_contour.push(pitch + jitter);
    }

    // timbre contribution is constant across frames
    let timbre_part: Vec<f64> = (0..d_f)
        .map(|r| {
            version
                .timbre
                .iter()
                .enumerate()
                .map(|(c, v)| w_timbre[(r, c)] * v)
                .sum()
        })
        .collect();

    let mut features = Array2::zeros((frames, d_f));
    for (t, &f0) in f0_contour.iter().enumerate() {
        let bin = pitch_bin(f0);
        for r in 0..d_f {
            let noise = if noise_sigma > 0.0 {
                standard_normal(&mut rng) * noise_sigma
            } else {
                0.0
            };
            features[(t, r)] = w_melody[(r, bin)] + timbre_part[r] + noise;
        }
    }

    Recording {
        recording_id: version.recording_id,
        song_id: version.song_id,
        features,
        f0_contour,
        timbre: version.timbre.clone(),
    }
}

impl Corpus {
    pub fn n_recordings(&self) -> usize {
        self.recordings.len()
    }

    pub fn recording(&self, id: u32) -> Option<&Recording> {
        self.recordings.iter().find(|r| r.recording_id == id)
    }

    /// Song ids present in a list of recording ids.
    pub fn song_ids_of(&self, recording_ids: &[u32]) -> std::collections::BTreeSet<u32> {
        recording_ids
            .iter()
            .filter_map(|id| self.recording(*id).map(|r| r.song_id))
            .collect()
    }

    /// Checksum over the corpus content: mixing matrices, specs, and all
    /// rendered arrays.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for w in [&self.w_melody, &self.w_timbre] {
            for v in w.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for s in &self.songs {
            hasher.update(s.song_id.to_le_bytes());
            hasher.update(&s.melody);
            hasher.update(s.base_pitch.to_le_bytes());
        }
        for v in &self.versions {
            hasher.update(v.recording_id.to_le_bytes());
            hasher.update(v.song_id.to_le_bytes());
            hasher.update(v.transposition.to_le_bytes());
            hasher.update(v.tempo_scale.to_le_bytes());
            for t in &v.timbre {
                hasher.update(t.to_le_bytes());
            }
            hasher.update(v.noise_seed.to_le_bytes());
        }
        for r in &self.recordings {
            for v in r.features.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in &r.f0_contour {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(&hasher.finalize())
    }
}

/// Split the corpus into train/valid/test by song, honoring the scenario
/// semantics: scenario 1 keeps test songs entirely unseen; scenario 2 moves
/// one recording of `seen_fraction` of the test songs into the train set.
pub fn split_scenarios(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    scenario: u8,
    seen_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr <= 0.0 || va < 0.0 || te <= 0.0 {
        return Err(DiscoverError::Split(format!(
            "ratios must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    if scenario != 1 && scenario != 2 {
        return Err(DiscoverError::Split(format!(
            "scenario must be 1 or 2, got {scenario}"
        )));
    }
    if scenario == 2 && !(seen_fraction > 0.0 && seen_fraction <= 1.0) {
        return Err(DiscoverError::Split(format!(
            "scenario 2 requires seen_fraction in (0, 1], got {seen_fraction}"
        )));
    }

    let mut song_ids: Vec<u32> = corpus.songs.iter().map(|s| s.song_id).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "split", 0));
    // Fisher-Yates shuffle
    for i in (1..song_ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        song_ids.swap(i, j);
    }

    let n = song_ids.len();
    let n_train = ((n as f64) * tr).round() as usize;
    let n_valid = ((n as f64) * va).round() as usize;
    let n_train = n_train.min(n.saturating_sub(2)).max(1);
    let n_valid = n_valid.min(n - n_train - 1);
    let train_songs: Vec<u32> = song_ids[..n_train].to_vec();
    let valid_songs: Vec<u32> = song_ids[n_train..n_train + n_valid].to_vec();
    let test_songs: Vec<u32> = song_ids[n_train + n_valid..].to_vec();
    if test_songs.is_empty() {
        return Err(DiscoverError::Split(
            "corpus too small: empty test song set".into(),
        ));
    }

    let recordings_of = |song: u32| -> Vec<u32> {
        corpus
            .versions
            .iter()
            .filter(|v| v.song_id == song)
            .map(|v| v.recording_id)
            .collect()
    };

    let mut train: Vec<u32> = train_songs.iter().flat_map(|s| recordings_of(*s)).collect();
    let valid: Vec<u32> = valid_songs.iter().flat_map(|s| recordings_of(*s)).collect();
    let mut test: Vec<u32> = test_songs.iter().flat_map(|s| recordings_of(*s)).collect();

    if scenario == 2 {
        let n_seen = ((test_songs.len() as f64) * seen_fraction).round() as usize;
        let mut eligible: Vec<u32> = test_songs
            .iter()
            .copied()
            .filter(|s| recordings_of(*s).len() >= 2)
            .collect();
        if eligible.len() < n_seen {
            return Err(DiscoverError::Split(format!(
                "corpus too small to satisfy seen_fraction {seen_fraction}: \
                 {} multi-version test songs available, {n_seen} needed",
                eligible.len()
            )));
        }
        for i in (1..eligible.len()).rev() {
            let j = rng.gen_range(0..=i);
            eligible.swap(i, j);
        }
        for song in eligible.into_iter().take(n_seen) {
            let recs = recordings_of(song);
            // move the first recording of the seen song into train
            let moved = recs[0];
            test.retain(|r| *r != moved);
            train.push(moved);
        }
    }

    train.sort_unstable();
    test.sort_unstable();
    let mut valid = valid;
    valid.sort_unstable();

    Ok(CorpusSplit {
        train,
        valid,
        test,
        scenario,
        seen_fraction: if scenario == 2 { seen_fraction } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn small_config() -> DataConfig {
        DataConfig {
            n_songs: 12,
            versions_min: 2,
            versions_max: 3,
            seed: 7,
            ..DataConfig::default()
        }
    }

    #[test]
    fn eighty_songs_with_two_versions_yield_160_recordings() {
        let config = DataConfig {
            n_songs: 80,
            versions_min: 2,
            versions_max: 2,
            seed: 7,
            ..DataConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        assert_eq!(corpus.n_recordings(), 160);
    }

    #[test]
    fn minimum_corpus_has_two_distinct_songs() {
        let config = DataConfig {
            n_songs: 2,
            versions_min: 1,
            versions_max: 1,
            seed: 0,
            ..DataConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        assert_eq!(corpus.n_recordings(), 2);
        let ids: std::collections::BTreeSet<u32> =
            corpus.recordings.iter().map(|r| r.song_id).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn identical_arguments_give_identical_corpora() {
        let config = DataConfig {
            n_songs: 20,
            versions_min: 2,
            versions_max: 3,
            seed: 1,
            ..DataConfig::default()
        };
        let a = generate_corpus(&config).unwrap();
        let b = generate_corpus(&config).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn invalid_dims_are_config_errors() {
        let config = DataConfig {
            feature_dim: 0,
            ..small_config()
        };
        assert!(matches!(
            generate_corpus(&config),
            Err(DiscoverError::Config(_))
        ));
    }

    #[test]
    fn f0_without_noise_is_exactly_base_plus_melody() {
        let mut config = small_config();
        config.noise_sigma = 0.0;
        let corpus = generate_corpus(&config).unwrap();
        let song = &corpus.songs[0];
        let version = VersionSpec {
            recording_id: 999,
            song_id: song.song_id,
            transposition: 0.0,
            tempo_scale: 1.0,
            timbre: vec![0.0; config.timbre_dim],
            noise_seed: 0,
        };
        let rec = render_features(
            song,
            &version,
            &corpus.w_melody,
            &corpus.w_timbre,
            config.frames_per_note,
            0.0,
        );
        let n_notes = song.melody.len();
        let frames = rec.f0_contour.len();
        for (t, &f0) in rec.f0_contour.iter().enumerate() {
            let note = (t * n_notes) / frames;
            assert_eq!(f0 - song.base_pitch, song.melody[note] as f64);
        }
    }

    #[test]
    fn transposition_shifts_f0_by_a_constant() {
        let mut config = small_config();
        config.noise_sigma = 0.0;
        let corpus = generate_corpus(&config).unwrap();
        let song = &corpus.songs[1];
        let make = |transposition: f64| VersionSpec {
            recording_id: 0,
            song_id: song.song_id,
            transposition,
            tempo_scale: 1.0,
            timbre: vec![0.0; config.timbre_dim],
            noise_seed: 0,
        };
        let a = render_features(
            song,
            &make(0.0),
            &corpus.w_melody,
            &corpus.w_timbre,
            config.frames_per_note,
            0.0,
        );
        let b = render_features(
            song,
            &make(2.0),
            &corpus.w_melody,
            &corpus.w_timbre,
            config.frames_per_note,
            0.0,
        );
        for (fa, fb) in a.f0_contour.iter().zip(b.f0_contour.iter()) {
            assert!((fb - fa - 2.0).abs() < 1e-12);
        }
    }

    /// Least-squares oracle on the linear mixing: regressing features on the
    /// visited pitch-bin indicators recovers melody coefficients that are
    /// identical across versions once the per-version constant (the timbre
    /// term, absorbed into every visited bin) is centered out.
    #[test]
    fn melody_coefficients_are_version_invariant_under_least_squares() {
        let mut config = small_config();
        config.noise_sigma = 0.0;
        let corpus = generate_corpus(&config).unwrap();
        let song = &corpus.songs[2];
        let make = |timbre_seed: u64| {
            let mut rng = ChaCha20Rng::seed_from_u64(timbre_seed);
            VersionSpec {
                recording_id: 0,
                song_id: song.song_id,
                transposition: 1.25,
                tempo_scale: 1.0,
                timbre: normal_vec(&mut rng, config.timbre_dim),
                noise_seed: 0,
            }
        };
        let recs = [
            render_features(
                song,
                &make(11),
                &corpus.w_melody,
                &corpus.w_timbre,
                config.frames_per_note,
                0.0,
            ),
            render_features(
                song,
                &make(22),
                &corpus.w_melody,
                &corpus.w_timbre,
                config.frames_per_note,
                0.0,
            ),
        ];

        // Per-version regression: with a one-hot design the least-squares
        // coefficient of a visited bin is the mean feature over its frames.
        let coeffs: Vec<std::collections::BTreeMap<usize, Vec<f64>>> = recs
            .iter()
            .map(|rec| {
                let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> =
                    Default::default();
                for (t, &f0) in rec.f0_contour.iter().enumerate() {
                    let bin = pitch_bin(f0);
                    let entry = sums
                        .entry(bin)
                        .or_insert_with(|| (vec![0.0; rec.features.ncols()], 0));
                    for (k, v) in entry.0.iter_mut().enumerate() {
                        *v += rec.features[(t, k)];
                    }
                    entry.1 += 1;
                }
                sums.into_iter()
                    .map(|(bin, (sum, n))| {
                        (bin, sum.into_iter().map(|v| v / n as f64).collect())
                    })
                    .collect()
            })
            .collect();

        let bins: Vec<usize> = coeffs[0].keys().copied().collect();
        assert_eq!(bins, coeffs[1].keys().copied().collect::<Vec<_>>());
        let d_f = corpus.config.feature_dim;
        // center each version's coefficients over visited bins, then compare
        let centered = |m: &std::collections::BTreeMap<usize, Vec<f64>>| {
            let mut mean = vec![0.0; d_f];
            for c in m.values() {
                for (k, v) in c.iter().enumerate() {
                    mean[k] += v / m.len() as f64;
                }
            }
            m.iter()
                .map(|(bin, c)| {
                    (
                        *bin,
                        c.iter().zip(mean.iter()).map(|(v, mu)| v - mu).collect::<Vec<f64>>(),
                    )
                })
                .collect::<std::collections::BTreeMap<_, _>>()
        };
        let (c0, c1) = (centered(&coeffs[0]), centered(&coeffs[1]));
        for bin in bins {
            for (a, b) in c0[&bin].iter().zip(c1[&bin].iter()) {
                assert!((a - b).abs() < 1e-6, "bin {bin}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn timbre_vectors_of_one_song_respect_the_margin() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for song in &corpus.songs {
            let versions: Vec<&VersionSpec> = corpus
                .versions
                .iter()
                .filter(|v| v.song_id == song.song_id)
                .collect();
            for i in 0..versions.len() {
                for j in i + 1..versions.len() {
                    let d2: f64 = versions[i]
                        .timbre
                        .iter()
                        .zip(versions[j].timbre.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    assert!(d2.sqrt() >= corpus.config.timbre_margin);
                }
            }
        }
    }

    #[test]
    fn scenario_one_split_is_song_disjoint() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let split = split_scenarios(&corpus, (0.8, 0.1, 0.1), 1, 0.0, 3).unwrap();
        let train_songs = corpus.song_ids_of(&split.train);
        let test_songs = corpus.song_ids_of(&split.test);
        assert!(train_songs.is_disjoint(&test_songs));
    }

    #[test]
    fn scenario_two_exposes_the_requested_fraction() {
        let config = DataConfig {
            n_songs: 40,
            versions_min: 2,
            versions_max: 3,
            seed: 5,
            ..DataConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let split = split_scenarios(&corpus, (0.8, 0.1, 0.1), 2, 0.25, 3).unwrap();
        let train_songs = corpus.song_ids_of(&split.train);
        let test_songs = corpus.song_ids_of(&split.test);
        let seen = test_songs.intersection(&train_songs).count();
        let expected = ((test_songs.len() as f64) * 0.25).round() as usize;
        assert_eq!(seen, expected);
        assert!(seen > 0);
    }

    #[test]
    fn ratio_split_counts_songs_eight_one_one() {
        let config = DataConfig {
            n_songs: 100,
            versions_min: 2,
            versions_max: 2,
            seed: 2,
            ..DataConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let split = split_scenarios(&corpus, (0.8, 0.1, 0.1), 1, 0.0, 9).unwrap();
        assert_eq!(corpus.song_ids_of(&split.train).len(), 80);
        assert_eq!(corpus.song_ids_of(&split.valid).len(), 10);
        assert_eq!(corpus.song_ids_of(&split.test).len(), 10);
    }

    #[test]
    fn split_rejects_bad_ratios_and_seen_fraction() {
        let corpus = generate_corpus(&small_config()).unwrap();
        assert!(split_scenarios(&corpus, (0.8, 0.3, 0.1), 1, 0.0, 0).is_err());
        assert!(split_scenarios(&corpus, (0.8, 0.1, 0.1), 2, 0.0, 0).is_err());
        assert!(split_scenarios(&corpus, (0.8, 0.1, 0.1), 2, 1.5, 0).is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::config::DataConfig;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Scenario-1 splits never let a song straddle train and test.
        #[test]
        fn scenario_one_disjoint_for_any_seed(
            seed in 0u64..10_000,
            split_seed in 0u64..10_000,
            n_songs in 6usize..24,
        ) {
            let config = DataConfig {
                n_songs,
                versions_min: 1,
                versions_max: 3,
                melody_len: 6,
                frames_per_note: 2,
                seed,
                ..DataConfig::default()
            };
            let corpus = generate_corpus(&config).unwrap();
            let split = split_scenarios(&corpus, (0.8, 0.1, 0.1), 1, 0.0, split_seed).unwrap();
            let train_songs = corpus.song_ids_of(&split.train);
            let test_songs = corpus.song_ids_of(&split.test);
            prop_assert!(train_songs.is_disjoint(&test_songs));
            // every recording lands in exactly one part
            let total = split.train.len() + split.valid.len() + split.test.len();
            prop_assert_eq!(total, corpus.n_recordings());
        }
    }
}
