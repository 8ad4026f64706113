//! Dataset manifests, artist-exclusive splits, piano-subset extraction,
//! segmentation of long recordings and the synthetic two-domain task.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Number of mid-level perceptual features.
pub const NUM_FEATURES: usize = 7;

/// Feature names in the fixed order used everywhere, including manifest
/// columns and model outputs.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "melodiousness",
    "articulation",
    "rhythmic_complexity",
    "rhythmic_stability",
    "dissonance",
    "tonal_stability",
    "modality",
];

pub const LABEL_MIN: f64 = 1.0;
pub const LABEL_MAX: f64 = 10.0;

/// Length of the clips in the labelled dataset and of target segments.
pub const SEGMENT_SECONDS: u32 = 15;

/// The seven mid-level feature values, ordered as [`FEATURE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidLevelVector(pub [f64; NUM_FEATURES]);

impl MidLevelVector {
    pub fn values(&self) -> &[f64; NUM_FEATURES] {
        &self.0
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_FEATURES] = values.try_into().map_err(|_| {
            Error::Shape(format!(
                "mid-level vector needs {NUM_FEATURES} values, got {}",
                values.len()
            ))
        })?;
        Ok(Self(arr))
    }

    pub fn check_range(&self, clip_id: &str) -> Result<()> {
        for (v, name) in self.0.iter().zip(FEATURE_NAMES) {
            if !(LABEL_MIN..=LABEL_MAX).contains(v) {
                return Err(Error::LabelRange {
                    clip_id: clip_id.to_string(),
                    feature: name,
                    value: *v,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub audio_path: PathBuf,
    pub artist: String,
    pub domain: Domain,
    pub labels: Option<MidLevelVector>,
}

impl ClipRecord {
    /// Sample offset for records that refer to a segment of a longer
    /// recording (`<stem>@<offset>` ids produced by [`sample_segments`]).
    pub fn segment_offset(&self) -> Option<u64> {
        self.clip_id.rsplit_once('@').and_then(|(_, o)| o.parse().ok())
    }
}

/// A model input with an optional regression target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub input: Arc<Spectrogram>,
    pub label: Option<MidLevelVector>,
}

const MANIFEST_FIXED: [&str; 4] = ["clip_id", "audio_path", "artist", "domain"];
const PROVENANCE_COLUMN: &str = "teachers";

/// A parsed manifest: records plus the optional per-row provenance column
/// written for pseudo-labelled sets.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub provenance: Option<Vec<String>>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    Ok(read_manifest(path)?.records)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn parse_manifest(text: &str, source_name: &str) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(source_name, e.to_string()))?
        .clone();
    let expected: Vec<&str> = MANIFEST_FIXED.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    let got: Vec<&str> = headers.iter().collect();
    let has_provenance = match got.len() {
        n if n == expected.len() => false,
        n if n == expected.len() + 1 && got[n - 1] == PROVENANCE_COLUMN => true,
        _ => {
            return Err(Error::parse(
                format!("{source_name}:1"),
                format!("unexpected header {got:?}"),
            ))
        }
    };
    if got[..expected.len()] != expected[..] {
        return Err(Error::parse(
            format!("{source_name}:1"),
            format!("unexpected header {got:?}"),
        ));
    }

    let mut records = Vec::new();
    let mut provenance = has_provenance.then(Vec::new);
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let loc = format!("{source_name}:{}", i + 2);
        let row = row.map_err(|e| Error::parse(&loc, e.to_string()))?;
        if row.len() != got.len() {
            return Err(Error::parse(&loc, format!("expected {} columns, got {}", got.len(), row.len())));
        }
        let clip_id = row[0].to_string();
        if clip_id.is_empty() {
            return Err(Error::parse(&loc, "empty clip_id"));
        }
        let domain: Domain = row[3].parse().map_err(|e: String| Error::parse(&loc, e))?;

        let cells: Vec<&str> = (4..4 + NUM_FEATURES).map(|c| &row[c]).collect();
        let labels = if cells.iter().all(|c| c.is_empty()) {
            None
        } else if cells.iter().any(|c| c.is_empty()) {
            return Err(Error::parse(&loc, "labels must be all present or all empty"));
        } else {
            let values = cells
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| Error::parse(&loc, format!("label `{c}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let v = MidLevelVector::from_slice(&values)?;
            // Pseudo-labels are unclipped ensemble means.
            if !has_provenance {
                v.check_range(&clip_id)?;
            }
            Some(v)
        };

        match (domain, labels.is_some()) {
            (Domain::Source, false) => {
                return Err(Error::parse(&loc, "source clips must carry labels"));
            }
            (Domain::Target, true) if !has_provenance => {
                return Err(Error::parse(&loc, "target clips carry no labels"));
            }
            _ => {}
        }

        if !seen.insert(clip_id.clone()) {
            return Err(Error::DuplicateClip(clip_id));
        }
        if let Some(p) = provenance.as_mut() {
            p.push(row[4 + NUM_FEATURES].to_string());
        }
        records.push(ClipRecord {
            clip_id,
            audio_path: PathBuf::from(&row[1]),
            artist: row[2].to_string(),
            domain,
            labels,
        });
    }
    Ok(Manifest { records, provenance })
}

/// Serialize records in manifest format. Labels are written with full
/// round-trip precision.
pub fn format_manifest(records: &[ClipRecord], provenance: Option<&[String]>) -> Result<String> {
    if let Some(p) = provenance {
        if p.len() != records.len() {
            return Err(Error::Shape("provenance column length mismatch".into()));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_FIXED.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    if provenance.is_some() {
        header.push(PROVENANCE_COLUMN);
    }
    let csv_err = |e: csv::Error| Error::parse("manifest writer", e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![
            r.clip_id.clone(),
            r.audio_path.display().to_string(),
            r.artist.clone(),
            r.domain.to_string(),
        ];
        match &r.labels {
            Some(v) => row.extend(v.0.iter().map(|x| x.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), NUM_FEATURES)),
        }
        if let Some(p) = provenance {
            row.push(p[i].clone());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse("manifest writer", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::parse("manifest writer", e.to_string()))
}

pub fn write_manifest(path: &Path, records: &[ClipRecord], provenance: Option<&[String]>) -> Result<()> {
    let text = format_manifest(records, provenance)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a one-id-per-line list. Blank lines are ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Partition records into the listed piano clips and everything else,
/// both in manifest order.
pub fn extract_piano_subset(
    records: &[ClipRecord],
    piano_ids: &[String],
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let known: HashSet<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
    if let Some(missing) = piano_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::UnknownClip(missing.clone()));
    }
    let wanted: HashSet<&str> = piano_ids.iter().map(String::as_str).collect();
    Ok(records
        .iter()
        .cloned()
        .partition(|r| wanted.contains(r.clip_id.as_str())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Train,
    Validation,
    Test,
    PianoTest,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Train, Bucket::Validation, Bucket::Test, Bucket::PianoTest];

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Train => "train",
            Bucket::Validation => "validation",
            Bucket::Test => "test",
            Bucket::PianoTest => "piano_test",
        }
    }
}

impl FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown bucket `{s}`"))
    }
}

/// Fractions of clips assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.90,
            validation: 0.02,
            test: 0.08,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// Allowed deviation of each realized fraction from the requested one.
pub const SPLIT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub piano_test: BTreeSet<String>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn bucket(&self, b: Bucket) -> &BTreeSet<String> {
        match b {
            Bucket::Train => &self.train,
            Bucket::Validation => &self.validation,
            Bucket::Test => &self.test,
            Bucket::PianoTest => &self.piano_test,
        }
    }

    fn bucket_mut(&mut self, b: Bucket) -> &mut BTreeSet<String> {
        match b {
            Bucket::Train => &mut self.train,
            Bucket::Validation => &mut self.validation,
            Bucket::Test => &mut self.test,
            Bucket::PianoTest => &mut self.piano_test,
        }
    }

    pub fn bucket_of(&self, clip_id: &str) -> Option<Bucket> {
        Bucket::ALL.into_iter().find(|&b| self.bucket(b).contains(clip_id))
    }

    pub fn len(&self) -> usize {
        Bucket::ALL.iter().map(|&b| self.bucket(b).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach the piano test clips, which must not already be assigned.
    pub fn assign_piano_test(&mut self, ids: impl IntoIterator<Item = String>) -> Result<()> {
        for id in ids {
            if self.bucket_of(&id).is_some() {
                return Err(Error::Precondition(format!(
                    "piano clip `{id}` is already in another split"
                )));
            }
            self.piano_test.insert(id);
        }
        Ok(())
    }

    /// `clip_id<TAB>bucket` lines sorted by clip id.
    pub fn to_split_file(&self) -> String {
        let mut lines: Vec<(&str, &str)> = Bucket::ALL
            .iter()
            .flat_map(|&b| self.bucket(b).iter().map(move |id| (id.as_str(), b.as_str())))
            .collect();
        lines.sort();
        lines.into_iter().map(|(id, b)| format!("{id}\t{b}\n")).collect()
    }

    pub fn from_split_file(text: &str, seed: u64) -> Result<Self> {
        let mut out = SplitAssignment {
            train: BTreeSet::new(),
            validation: BTreeSet::new(),
            test: BTreeSet::new(),
            piano_test: BTreeSet::new(),
            seed,
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let loc = format!("split file:{}", i + 1);
            let (id, bucket) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&loc, "expected `clip_id<TAB>bucket`"))?;
            let bucket: Bucket = bucket.trim().parse().map_err(|e: String| Error::parse(&loc, e))?;
            if out.bucket_of(id).is_some() {
                return Err(Error::DuplicateClip(id.to_string()));
            }
            out.bucket_mut(bucket).insert(id.to_string());
        }
        Ok(out)
    }
}

/// Artist-exclusive split by greedy bin packing.
///
/// Artists are shuffled with `seed`, stably sorted by descending clip count,
/// and each is placed in the bucket with the largest remaining deficit
/// (requested minus assigned clips). Fails when any realized fraction
/// misses its request by more than [`SPLIT_TOLERANCE`].
pub fn split_by_artist(
    records: &[ClipRecord],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment> {
    let fr = fractions.as_array();
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fr:?} must be in [0,1] and sum to 1")));
    }
    if records.is_empty() {
        return Err(Error::Precondition("cannot split an empty manifest".into()));
    }

    let mut by_artist: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_artist.entry(r.artist.as_str()).or_default().push(r.clip_id.as_str());
    }
    let mut artists: Vec<(&str, Vec<&str>)> = by_artist.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    artists.shuffle(&mut rng);
    artists.sort_by_key(|(_, clips)| std::cmp::Reverse(clips.len()));

    let total = records.len() as f64;
    let targets = fr.map(|f| f * total);
    let mut assigned = [0usize; 3];
    let buckets = [Bucket::Train, Bucket::Validation, Bucket::Test];
    let mut out = SplitAssignment {
        train: BTreeSet::new(),
        validation: BTreeSet::new(),
        test: BTreeSet::new(),
        piano_test: BTreeSet::new(),
        seed,
    };
    for (_, clips) in artists {
        let mut best = 0;
        for i in 1..3 {
            let deficit = |j: usize| targets[j] - assigned[j] as f64;
            if deficit(i) > deficit(best) {
                best = i;
            }
        }
        assigned[best] += clips.len();
        let set = out.bucket_mut(buckets[best]);
        for c in clips {
            if !set.insert(c.to_string()) {
                return Err(Error::DuplicateClip(c.to_string()));
            }
        }
    }

    for i in 0..3 {
        let realized = assigned[i] as f64 / total;
        if (realized - fr[i]).abs() > SPLIT_TOLERANCE + 1e-12 {
            return Err(Error::InfeasibleSplit(format!(
                "{} bucket holds {:.1}% of clips, requested {:.1}% (artist sizes do not permit an exclusive split)",
                buckets[i].as_str(),
                100.0 * realized,
                100.0 * fr[i]
            )));
        }
    }
    Ok(out)
}

/// Complete fixed-length segments of one long recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentIndex {
    pub recording_path: PathBuf,
    pub segment_length_s: u32,
    pub sample_rate: u32,
    pub offsets: Vec<u64>,
}

impl SegmentIndex {
    pub fn segment_samples(&self) -> u64 {
        self.segment_length_s as u64 * self.sample_rate as u64
    }
}

/// Index the complete 15 s segments of a recording; a trailing partial
/// segment is dropped.
pub fn build_segment_index(recording: &Path, num_samples: u64, sample_rate: u32) -> Result<SegmentIndex> {
    if sample_rate == 0 {
        return Err(Error::Config("sample_rate must be positive".into()));
    }
    let len = SEGMENT_SECONDS as u64 * sample_rate as u64;
    if num_samples < len {
        return Err(Error::TooShort {
            samples: num_samples as usize,
            required: len as usize,
        });
    }
    let count = num_samples / len;
    Ok(SegmentIndex {
        recording_path: recording.to_path_buf(),
        segment_length_s: SEGMENT_SECONDS,
        sample_rate,
        offsets: (0..count).map(|i| i * len).collect(),
    })
}

/// Uniformly sample `n` segments without replacement across all indices.
///
/// Records carry the target domain tag, no labels, the recording stem as
/// artist, and `<stem>@<offset>` as clip id.
pub fn sample_segments(indices: &[SegmentIndex], n: usize, seed: u64) -> Result<Vec<ClipRecord>> {
    let all: Vec<(&SegmentIndex, u64)> = indices
        .iter()
        .flat_map(|idx| idx.offsets.iter().map(move |&o| (idx, o)))
        .collect();
    if n > all.len() {
        return Err(Error::NotEnough {
            requested: n,
            available: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, all.len(), n);
    Ok(picks
        .into_iter()
        .map(|i| {
            let (idx, offset) = all[i];
            let stem = idx
                .recording_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| idx.recording_path.display().to_string());
            ClipRecord {
                clip_id: format!("{stem}@{offset}"),
                audio_path: idx.recording_path.clone(),
                artist: stem,
                domain: Domain::Target,
                labels: None,
            }
        })
        .collect())
}

/// Covariate shift applied to target clips: bands are permuted, then a
/// linear tilt across band positions is added (the arrays are log
/// magnitudes, so this is a multiplicative spectral tilt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTransform {
    pub tilt: f64,
    pub permutation: Option<Vec<usize>>,
}

impl ShiftTransform {
    pub fn identity() -> Self {
        Self {
            tilt: 0.0,
            permutation: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.tilt == 0.0 && self.permutation.as_ref().is_none_or(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    pub fn apply(&self, raw: &Spectrogram) -> Spectrogram {
        let (bands, frames) = raw.shape();
        let mut data = vec![0f32; bands * frames];
        for b in 0..bands {
            let src = self.permutation.as_ref().map_or(b, |p| p[b]);
            let offset = if bands > 1 {
                self.tilt * (b as f64 / (bands - 1) as f64 - 0.5)
            } else {
                0.0
            };
            for t in 0..frames {
                data[b * frames + t] = (raw.get(src, t) as f64 + offset) as f32;
            }
        }
        Spectrogram {
            bands,
            frames,
            data,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_source: usize,
    pub n_target_pool: usize,
    pub n_target_test: usize,
    pub bands: usize,
    pub frames: usize,
    /// Additive log-magnitude tilt across bands for target clips.
    pub shift_tilt: f64,
    /// Permute band order for target clips.
    pub shift_permute: bool,
    /// Strength of the spectral-envelope cue that tracks the labels in the
    /// raw signal but is scrambled by the shift.
    pub envelope_cue: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_source: 600,
            n_target_pool: 600,
            n_target_test: 200,
            bands: 12,
            frames: 24,
            shift_tilt: 3.0,
            shift_permute: true,
            envelope_cue: 2.0,
            noise_std: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands < 2 || self.frames < 4 {
            return Err(Error::Config("synthetic clips need at least 2 bands and 4 frames".into()));
        }
        if self.n_source == 0 || self.n_target_test == 0 {
            return Err(Error::Config("synthetic source and target test sets must be non-empty".into()));
        }
        if !(self.noise_std >= 0.0 && self.shift_tilt.is_finite() && self.envelope_cue.is_finite()) {
            return Err(Error::Config("synthetic noise/tilt/cue must be finite, noise non-negative".into()));
        }
        Ok(())
    }

    pub fn shift(&self, seed: u64) -> ShiftTransform {
        let permutation = self.shift_permute.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_51f7_u64);
            let mut p: Vec<usize> = (0..self.bands).collect();
            p.shuffle(&mut rng);
            p
        });
        ShiftTransform {
            tilt: self.shift_tilt,
            permutation,
        }
    }
}

/// One synthetic clip: the unshifted array the labels are defined on and
/// the array the model sees.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub id: String,
    pub domain: Domain,
    pub raw: Spectrogram,
    pub observed: Arc<Spectrogram>,
    pub label: MidLevelVector,
}

impl SyntheticClip {
    pub fn labelled(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            input: Arc::clone(&self.observed),
            label: Some(self.label),
        }
    }

    pub fn unlabelled(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            input: Arc::clone(&self.observed),
            label: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: Vec<SyntheticClip>,
    pub target_pool: Vec<SyntheticClip>,
    pub target_test: Vec<SyntheticClip>,
    pub shift: ShiftTransform,
}

impl SyntheticPair {
    pub fn source_samples(&self) -> Vec<Sample> {
        self.source.iter().map(SyntheticClip::labelled).collect()
    }

    pub fn target_pool_samples(&self) -> Vec<Sample> {
        self.target_pool.iter().map(SyntheticClip::unlabelled).collect()
    }

    pub fn target_test_samples(&self) -> Vec<Sample> {
        self.target_test.iter().map(SyntheticClip::labelled).collect()
    }
}

/// Per-clip statistics the synthetic labels are a function of. Both are
/// invariant to per-band offsets and to band order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStatistics {
    /// Mean over bands of the temporal standard deviation.
    pub modulation_depth: f64,
    /// Mean absolute frame-to-frame difference.
    pub roughness: f64,
}

pub fn clip_statistics(raw: &Spectrogram) -> ClipStatistics {
    let (bands, frames) = raw.shape();
    let mut depth = 0.0;
    let mut rough = 0.0;
    for b in 0..bands {
        let row = raw.band(b);
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / frames as f64;
        let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / frames as f64;
        depth += var.sqrt();
        rough += row.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum::<f64>();
    }
    ClipStatistics {
        modulation_depth: depth / bands as f64,
        roughness: rough / (bands * (frames - 1)) as f64,
    }
}

const LABEL_LINEAR: [[f64; 2]; NUM_FEATURES] = [
    [1.0, -0.4],
    [0.3, 1.0],
    [-0.8, 0.6],
    [0.7, 0.2],
    [-0.2, -0.9],
    [0.9, -0.7],
    [-0.6, -0.3],
];
const LABEL_INTERACTION: [f64; NUM_FEATURES] = [0.3, -0.2, 0.4, -0.5, 0.2, 0.1, -0.3];

/// The synthetic label function: `5.5 + 4.5 * tanh(a*z1 + b*z2 + c*z1*z2)`
/// per feature, with `z1`, `z2` the centred and scaled statistics. Always
/// inside (1, 10).
pub fn synthetic_label(stats: ClipStatistics) -> MidLevelVector {
    let z1 = (stats.modulation_depth - 0.65) / 0.3;
    let z2 = (stats.roughness - 0.45) / 0.2;
    let mut out = [0.0; NUM_FEATURES];
    for (j, o) in out.iter_mut().enumerate() {
        let [a, b] = LABEL_LINEAR[j];
        let c = LABEL_INTERACTION[j];
        *o = 5.5 + 4.5 * (a * z1 + b * z2 + c * z1 * z2).tanh();
    }
    MidLevelVector(out)
}

fn synthetic_raw(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Spectrogram {
    let (bands, frames) = (config.bands, config.frames);
    let depth_u: f64 = rng.random();
    let rate_u: f64 = rng.random();
    let depth = 0.2 + 1.2 * depth_u;
    let cycles = 1.0 + 4.0 * rate_u;
    // The envelope slope follows the depth latent, so in the raw domain the
    // spectral shape is predictive of the labels.
    let slope_noise: f64 = StandardNormal.sample(rng);
    let slope = config.envelope_cue * (depth_u - 0.5 + 0.15 * slope_noise);
    let mut data = vec![0f32; bands * frames];
    for b in 0..bands {
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let envelope = slope * (b as f64 / (bands - 1) as f64 - 0.5);
        for t in 0..frames {
            let noise: f64 = StandardNormal.sample(rng);
            let m = depth * (std::f64::consts::TAU * cycles * t as f64 / frames as f64 + phase).sin();
            data[b * frames + t] = (envelope + m + config.noise_std * noise) as f32;
        }
    }
    Spectrogram {
        bands,
        frames,
        data,
        config: None,
    }
}

/// Generate labelled source clips, an unlabelled target pool and a labelled
/// target test set. Deterministic in `seed`.
pub fn gen_synthetic_domain_pair(config: &SyntheticConfig, seed: u64) -> Result<SyntheticPair> {
    config.validate()?;
    let shift = config.shift(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |prefix: &str, n: usize, domain: Domain| -> Vec<SyntheticClip> {
        (0..n)
            .map(|i| {
                let raw = synthetic_raw(config, &mut rng);
                let label = synthetic_label(clip_statistics(&raw));
                let observed = match domain {
                    Domain::Source => raw.clone(),
                    Domain::Target => shift.apply(&raw),
                };
                SyntheticClip {
                    id: format!("{prefix}-{i:05}"),
                    domain,
                    raw,
                    observed: Arc::new(observed),
                    label,
                }
            })
            .collect()
    };
    let source = make("src", config.n_source, Domain::Source);
    let target_pool = make("tgt", config.n_target_pool, Domain::Target);
    let target_test = make("tgt-test", config.n_target_test, Domain::Target);
    Ok(SyntheticPair {
        source,
        target_pool,
        target_test,
        shift,
    })
}

/// Random artist-exclusive-friendly labelled records; used by tests and the
/// CLI's synthetic mode to produce manifests.
pub fn synthetic_records(pair: &SyntheticPair) -> Vec<ClipRecord> {
    pair.source
        .iter()
        .enumerate()
        .map(|(i, c)| ClipRecord {
            clip_id: c.id.clone(),
            audio_path: PathBuf::from(format!("synthetic/{}.spec", c.id)),
            artist: format!("artist-{:04}", i / 3),
            domain: Domain::Source,
            labels: Some(c.label),
        })
        .collect()
}

/// Lookup from clip id to record.
pub fn index_by_id(records: &[ClipRecord]) -> HashMap<&str, &ClipRecord> {
    records.iter().map(|r| (r.clip_id.as_str(), r)).collect()
}
