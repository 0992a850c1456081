use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::frontend::{encode_pcm16, log_mel, AudioClip, SAMPLE_RATE};
use crate::train::{format_demographics, format_interactions, AudioLibrary, Demographics, Interaction};

const OVERTONES: usize = 6;
const TRACKS_PER_ALBUM: usize = 10;
const ALBUMS_PER_ARTIST: usize = 2;
const AGE_BUCKETS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_tracks: usize,
    pub n_genres: usize,
    pub seed: u64,
    /// Std dev of the half-normal noise added to the one-hot favourite genre.
    pub taste_noise: f64,
    pub likes_per_user: usize,
    pub dislikes_per_user: usize,
    pub track_seconds: f64,
    /// Std dev of the additive white noise in each track.
    pub audio_noise: f64,
    /// Probability that a user's region feature names their favourite genre.
    pub region_fidelity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_tracks: 1000,
            n_genres: 4,
            seed: 42,
            taste_noise: 0.0,
            likes_per_user: 10,
            dislikes_per_user: 10,
            track_seconds: 30.0,
            audio_noise: 0.05,
            region_fidelity: 0.85,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_genres >= 2, Contract, "need at least 2 genres");
        ensure!(self.n_tracks >= self.n_genres, Contract, "need at least one track per genre");
        ensure!(self.n_users >= 1, Contract, "need at least one user");
        ensure!(
            self.likes_per_user >= 10 && self.dislikes_per_user >= 10,
            Contract,
            "every user needs at least 10 likes and 10 dislikes"
        );
        ensure!(
            self.likes_per_user + self.dislikes_per_user <= self.n_tracks,
            Contract,
            "more interactions per user than tracks"
        );
        ensure!(self.taste_noise >= 0.0, Contract, "taste_noise must be non-negative");
        ensure!(self.track_seconds >= 0.1, Contract, "tracks must last at least 0.1 s");
        ensure!((0.0..=1.0).contains(&self.region_fidelity), Contract, "region_fidelity is a probability");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackInfo {
    pub id: String,
    pub album: String,
    pub artist: String,
    pub genre: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserInfo {
    pub id: String,
    pub favorite: usize,
    /// Distribution over genres.
    pub taste: Vec<f64>,
}

/// Timbre of one genre.
#[derive(Clone, Debug, PartialEq)]
pub struct GenreSignature {
    pub base_hz: f64,
    pub overtones: [f64; OVERTONES],
    pub am_hz: f64,
}

impl GenreSignature {
    fn new(genre: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut overtones = [0.0; OVERTONES];
        overtones[0] = 1.0;
        for w in &mut overtones[1..] {
            *w = rng.random_range(0.05..0.9);
        }
        Self {
            base_hz: 110.0 * 2f64.powf(genre as f64 / 2.0),
            overtones,
            am_hz: 0.5 + 1.5 * genre as f64,
        }
    }
}

/// Planted-preference corpus: ground truth plus interactions.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub genres: Vec<GenreSignature>,
    pub tracks: Vec<TrackInfo>,
    pub users: Vec<UserInfo>,
    pub interactions: Vec<Interaction>,
    pub demographics: Demographics,
}

fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let genres: Vec<GenreSignature> = (0..spec.n_genres).map(|g| GenreSignature::new(g, &mut rng)).collect();

    // genres are dealt round-robin so every genre has ⌊n/G⌋ or ⌈n/G⌉ tracks
    let mut tracks = Vec::with_capacity(spec.n_tracks);
    let mut per_genre: Vec<Vec<usize>> = vec![Vec::new(); spec.n_genres];
    for i in 0..spec.n_tracks {
        let genre = i % spec.n_genres;
        let k = per_genre[genre].len();
        let album = k / TRACKS_PER_ALBUM;
        per_genre[genre].push(i);
        tracks.push(TrackInfo {
            id: format!("t{i:05}"),
            album: format!("g{genre}-al{album}"),
            artist: format!("g{genre}-ar{}", album / ALBUMS_PER_ARTIST),
            genre,
        });
    }

    let half_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut users = Vec::with_capacity(spec.n_users);
    let mut interactions = Vec::new();
    let mut demographics = Demographics::new();
    for u in 0..spec.n_users {
        let id = format!("u{u:04}");
        let favorite = rng.random_range(0..spec.n_genres);
        let mut taste: Vec<f64> = (0..spec.n_genres)
            .map(|g| (g == favorite) as u8 as f64 + spec.taste_noise * f64::abs(half_normal.sample(&mut rng)))
            .collect();
        let total: f64 = taste.iter().sum();
        taste.iter_mut().for_each(|t| *t /= total);

        let mut taken = BTreeSet::new();
        let liked = draw_tracks(&mut rng, &per_genre, &taste, spec.likes_per_user, &mut taken)?;
        let inverse: Vec<f64> = taste.iter().map(|t| 1.0 - t).collect();
        let disliked = draw_tracks(&mut rng, &per_genre, &inverse, spec.dislikes_per_user, &mut taken)?;
        let mut events: Vec<(usize, bool)> = liked
            .into_iter()
            .map(|t| (t, true))
            .chain(disliked.into_iter().map(|t| (t, false)))
            .collect();
        events.shuffle(&mut rng);
        for (ts, (t, l)) in events.into_iter().enumerate() {
            let tr = &tracks[t];
            interactions.push(Interaction {
                user: id.clone(),
                track: tr.id.clone(),
                album: tr.album.clone(),
                artist: tr.artist.clone(),
                liked: l,
                timestamp: ts as i64,
            });
        }

        let region = if rng.random_bool(spec.region_fidelity) {
            favorite
        } else {
            rng.random_range(0..spec.n_genres)
        };
        let age = rng.random_range(0..AGE_BUCKETS);
        demographics.insert(id.clone(), vec![format!("region:{region}"), format!("age:{age}")]);
        users.push(UserInfo { id, favorite, taste });
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        genres,
        tracks,
        users,
        interactions,
        demographics,
    })
}

/// `count` distinct tracks: genre drawn by `weights`, track uniform within it.
fn draw_tracks(
    rng: &mut ChaCha8Rng,
    per_genre: &[Vec<usize>],
    weights: &[f64],
    count: usize,
    taken: &mut BTreeSet<usize>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut w = weights.to_vec();
    while out.len() < count {
        for (g, tracks) in per_genre.iter().enumerate() {
            if tracks.iter().all(|t| taken.contains(t)) {
                w[g] = 0.0;
            }
        }
        let pick = WeightedIndex::new(&w)
            .map_err(|_| Error::Contract("taste leaves too few tracks to draw from".into()))?;
        let g = pick.sample(rng);
        let free: Vec<usize> = per_genre[g].iter().copied().filter(|t| !taken.contains(t)).collect();
        let t = free[rng.random_range(0..free.len())];
        taken.insert(t);
        out.push(t);
    }
    Ok(out)
}

impl SyntheticCorpus {
    pub fn track(&self, id: &str) -> Option<&TrackInfo> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// The waveform of track `index`, deterministic per seed.
    pub fn audio(&self, index: usize) -> Result<AudioClip> {
        let spec = &self.spec;
        let info = self
            .tracks
            .get(index)
            .ok_or_else(|| Error::Vocabulary(format!("track index {index} out of range")))?;
        let sig = &self.genres[info.genre];
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 1, index as u64));
        let f0 = sig.base_hz * (1.0 + rng.random_range(-0.01..0.01));
        let phases: Vec<f64> = (0..OVERTONES).map(|_| rng.random_range(0.0..TAU)).collect();
        let am_phase = rng.random_range(0.0..TAU);
        let amp = rng.random_range(0.3..0.5);
        let norm: f64 = sig.overtones.iter().sum();
        let noise = Normal::new(0.0, spec.audio_noise.max(0.0)).expect("finite std");
        let n = (spec.track_seconds * SAMPLE_RATE as f64).round() as usize;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let mut tone = 0.0;
                for (h, (&w, &p)) in sig.overtones.iter().zip(&phases).enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f < nyquist {
                        tone += w * (TAU * f * t + p).sin();
                    }
                }
                let env = 0.6 + 0.4 * (TAU * sig.am_hz * t + am_phase).sin();
                (amp * env * tone / norm + noise.sample(&mut rng)) as f32
            })
            .collect();
        AudioClip::new(samples, SAMPLE_RATE)
    }

    /// Log-mel spectrograms of every track, computed in parallel.
    pub fn audio_library(&self) -> Result<AudioLibrary> {
        let specs = (0..self.tracks.len())
            .into_par_iter()
            .map(|i| Ok((self.tracks[i].id.clone(), log_mel(&self.audio(i)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(specs.into_iter().collect())
    }

    pub fn genre_manifest(&self) -> String {
        let mut s = String::from("track_id\tgenre\n");
        for t in &self.tracks {
            let _ = writeln!(s, "{}\t{}", t.id, t.genre);
        }
        s
    }

    pub fn taste_manifest(&self) -> String {
        let mut s = String::from("user_id\tfavorite\ttaste\n");
        for u in &self.users {
            let taste: Vec<String> = u.taste.iter().map(|t| format!("{t:.6}")).collect();
            let _ = writeln!(s, "{}\t{}\t{}", u.id, u.favorite, taste.join(" "));
        }
        s
    }

    /// Writes `audio/<track>.wav` plus the interaction, demographics, genre
    /// and taste manifests into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let audio_dir = dir.join("audio");
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        (0..self.tracks.len()).into_par_iter().try_for_each(|i| {
            let path = audio_dir.join(format!("{}.wav", self.tracks[i].id));
            let bytes = encode_pcm16(&self.audio(i)?)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        })?;
        let files = [
            ("interactions.tsv", format_interactions(&self.interactions)),
            ("demographics.tsv", format_demographics(&self.demographics)),
            ("genres.tsv", self.genre_manifest()),
            ("tastes.tsv", self.taste_manifest()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 12,
            n_tracks: 60,
            n_genres: 2,
            track_seconds: 0.5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn floors_and_no_overlap() {
        let c = generate(&tiny()).unwrap();
        for u in &c.users {
            let rows: Vec<_> = c.interactions.iter().filter(|r| r.user == u.id).collect();
            assert_eq!(rows.iter().filter(|r| r.liked).count(), 10);
            assert_eq!(rows.iter().filter(|r| !r.liked).count(), 10);
            let tracks: BTreeSet<_> = rows.iter().map(|r| &r.track).collect();
            assert_eq!(tracks.len(), 20);
        }
    }

    #[test]
    fn noiseless_two_genre_likes_are_single_genre() {
        let c = generate(&tiny()).unwrap();
        for u in &c.users {
            for r in c.interactions.iter().filter(|r| r.user == u.id) {
                let g = c.track(&r.track).unwrap().genre;
                assert_eq!(g == u.favorite, r.liked);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.audio(3).unwrap(), b.audio(3).unwrap());
        let other = generate(&SyntheticSpec { seed: 7, ..tiny() }).unwrap();
        assert_ne!(a.interactions, other.interactions);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SyntheticSpec { n_genres: 1, ..tiny() }).is_err());
        assert!(generate(&SyntheticSpec { likes_per_user: 9, ..tiny() }).is_err());
    }
}
