//! JSON-Lines manifest of captioned single-sound clips with event
//! timestamps, validated against a closed category table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeline::EventInterval;

/// The closed category table (23 names).
pub const CATEGORIES: [&str; 23] = [
    "Household Daily",
    "Transportation Vehicles",
    "Impacts Crashes",
    "Foley",
    "Human Elements",
    "Industrial",
    "Weapons War",
    "Cartoon Comical",
    "Sports",
    "Animals Insects",
    "Instruments",
    "Water Liquid",
    "Technology",
    "Horror",
    "Emergency",
    "Public Places",
    "Sound Design Effects",
    "Doors Windows",
    "Fire Explosions",
    "Nature Weather",
    "Leisure",
    "Multimedia",
    "Bells",
];

/// Clips longer than this draw a validation warning.
pub const SOFT_DURATION_LIMIT_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest has {} invalid line(s): {}", .0.len(), summarize(.0))]
    InvalidLines(Vec<(usize, String)>),
}

fn summarize(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .take(3)
        .map(|(n, e)| format!("line {n}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One dataset entry. Field order is the canonical serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    pub caption: String,
    pub category: String,
    pub events: Vec<EventInterval>,
    pub duration_s: f64,
}

/// Loads a JSON-Lines manifest, preserving order. Parse failures and
/// unknown categories are collected with their line numbers; any failure
/// rejects the whole file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ManifestError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut errors: Vec<(usize, String)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestEntry>(line) {
            Ok(entry) => {
                if !CATEGORIES.contains(&entry.category.as_str()) {
                    errors.push((lineno, format!("unknown category `{}`", entry.category)));
                } else {
                    entries.push(entry);
                }
            }
            Err(e) => errors.push((lineno, e.to_string())),
        }
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(ManifestError::InvalidLines(errors))
    }
}

/// Canonical JSON-Lines serialization (one entry per line, declared field
/// order).
pub fn serialize_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

/// Validation findings; errors and warnings carry entry ids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
    pub category_histogram: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks entry invariants: events inside [0, duration], start < end,
/// non-empty captions; durations above the soft limit warn. Emits a
/// category histogram.
pub fn validate_manifest(entries: &[ManifestEntry]) -> ValidationReport {
    let mut report = ValidationReport::default();
    for e in entries {
        *report
            .category_histogram
            .entry(e.category.clone())
            .or_insert(0) += 1;
        if e.caption.trim().is_empty() {
            report.errors.push(format!("{}: empty caption", e.id));
        }
        if e.duration_s > SOFT_DURATION_LIMIT_S {
            report.warnings.push(format!(
                "{}: duration {:.2}s exceeds the typical {SOFT_DURATION_LIMIT_S}s",
                e.id, e.duration_s
            ));
        }
        for (i, ev) in e.events.iter().enumerate() {
            if !(ev.start_s < ev.end_s) {
                report
                    .errors
                    .push(format!("{}: event {i} has end <= start", e.id));
            }
            if ev.start_s < 0.0 || ev.end_s > e.duration_s {
                report
                    .errors
                    .push(format!("{}: event {i} outside [0, duration]", e.id));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(category: &str) -> ManifestEntry {
        ManifestEntry {
            id: "clip-0001".into(),
            audio_path: "audio/clip-0001.wav".into(),
            caption: "two tone bursts".into(),
            category: category.into(),
            events: vec![EventInterval {
                start_s: 0.5,
                end_s: 1.0,
            }],
            duration_s: 2.0,
        }
    }

    fn write_lines(lines: &[String]) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("sonotime-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("m{}.jsonl", lines.len()));
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let path = write_lines(&[]);
        assert!(load_manifest(path).unwrap().is_empty());
    }

    #[test]
    fn known_category_is_accepted() {
        let e = entry("Bells");
        let path = write_lines(&[serde_json::to_string(&e).unwrap()]);
        let loaded = load_manifest(path).unwrap();
        assert_eq!(loaded, vec![e]);
    }

    #[test]
    fn unknown_category_names_the_line() {
        let good = serde_json::to_string(&entry("Foley")).unwrap();
        let bad = serde_json::to_string(&entry("Spaceships")).unwrap();
        let path = write_lines(&[good, bad]);
        match load_manifest(path) {
            Err(ManifestError::InvalidLines(lines)) => {
                assert_eq!(lines.len(), 1);
                assert_eq!(lines[0].0, 2);
                assert!(lines[0].1.contains("Spaceships"));
            }
            other => panic!("expected invalid lines, got {other:?}"),
        }
    }

    #[test]
    fn category_table_is_closed_and_complete() {
        assert_eq!(CATEGORIES.len(), 23);
        let unique: std::collections::BTreeSet<&str> = CATEGORIES.iter().copied().collect();
        assert_eq!(unique.len(), 23);
    }

    #[test]
    fn long_clip_warns_but_passes() {
        let mut e = entry("Sports");
        e.duration_s = 12.0;
        e.events[0].end_s = 1.0;
        let report = validate_manifest(&[e]);
        assert!(report.ok());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn inverted_event_is_an_error() {
        let mut e = entry("Sports");
        e.events[0] = EventInterval {
            start_s: 1.0,
            end_s: 0.5,
        };
        let report = validate_manifest(&[e]);
        assert!(!report.ok());
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let entries = vec![entry("Foley"), entry("Bells")];
        let text = serialize_manifest(&entries);
        let path = write_lines(&[text.trim_end().to_string()]);
        let loaded = load_manifest(path).unwrap();
        assert_eq!(serialize_manifest(&loaded), text);
    }

    #[test]
    fn histogram_tracks_sampled_proportions() {
        // Sample 10k entries at the published proportions and check the
        // largest category lands near its share.
        let weights: [(&str, f64); 23] = [
            ("Household Daily", 14.11),
            ("Transportation Vehicles", 10.42),
            ("Impacts Crashes", 10.10),
            ("Foley", 8.24),
            ("Human Elements", 7.77),
            ("Industrial", 6.58),
            ("Weapons War", 5.83),
            ("Cartoon Comical", 4.90),
            ("Sports", 4.43),
            ("Animals Insects", 4.04),
            ("Instruments", 3.68),
            ("Water Liquid", 3.27),
            ("Technology", 2.70),
            ("Horror", 2.41),
            ("Emergency", 2.20),
            ("Public Places", 1.87),
            ("Sound Design Effects", 1.69),
            ("Doors Windows", 1.56),
            ("Fire Explosions", 1.49),
            ("Nature Weather", 1.02),
            ("Leisure", 0.84),
            ("Multimedia", 0.47),
            ("Bells", 0.37),
        ];
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let n = 10_000;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let mut draw = rng.gen_range(0.0..total);
            let mut cat = weights[22].0;
            for (name, w) in &weights {
                if draw < *w {
                    cat = name;
                    break;
                }
                draw -= w;
            }
            let mut e = entry(cat);
            e.id = format!("clip-{i:05}");
            entries.push(e);
        }
        let report = validate_manifest(&entries);
        let household = report.category_histogram["Household Daily"] as f64 / n as f64 * 100.0;
        assert!(
            (household - 14.11).abs() < 1.5,
            "Household Daily at {household:.2}%"
        );
        assert_eq!(report.category_histogram.len(), 23);
    }
}
