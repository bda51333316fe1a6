//! Six-stage data curation, the failure-case router and caption retrieval.
//!
//! Each stage admits a data mix, then runs its filters in a fixed order.
//! A record stops at its first drop. The audit trail of a record holds the
//! decisions of the most recent stage run, in application order.

mod filters;
mod retrieval;
mod router;
pub mod toy;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use filters::{
    color_agreement, compression_score, dhash, entropy, gray_entropy, luma, resolution, rotation, sharpness, skin_fraction, token_length, toy_aesthetic, DedupState, Filter, FilterDecision, Scorer,
    Scorers, PALETTE,
};
pub use retrieval::RetrievalIndex;
pub use router::{route_failure, write_review_queue, FailureCase, FailureEvidence, RouterThresholds, Track};

use crate::error::{contract_err, Error, Result};
use crate::flowmatch::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionType {
    General,
    Text,
    Knowledge,
    Structured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub filter: String,
    pub keep: bool,
    pub reason: String,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the manifest directory unless absolute.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub caption_type: CaptionType,
    pub task: Task,
    /// `web`, `edit` or `synthetic`.
    pub source: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
}

/// Thresholds of the filter bank. `strict_*` values drive the stage-6
/// distribution filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub min_side: u32,
    pub high_min_side: u32,
    pub dedup_hamming: u32,
    pub nsfw_max: f64,
    pub entropy_lo: f64,
    pub entropy_hi: f64,
    pub clip_min: f64,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub quality_min: f64,
    pub aesthetic_min: f64,
    pub compression_min: f64,
    pub strict_entropy_lo: f64,
    pub strict_entropy_hi: f64,
    pub strict_clip_min: f64,
    pub strict_tokens_min: usize,
    pub strict_tokens_max: usize,
    pub strict_quality_min: f64,
    pub strict_aesthetic_min: f64,
    pub strict_compression_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_side: 256,
            high_min_side: 2048,
            dedup_hamming: 4,
            nsfw_max: 0.5,
            entropy_lo: 1.0,
            entropy_hi: 7.9,
            clip_min: 0.3,
            tokens_min: 4,
            tokens_max: 1024,
            quality_min: 0.3,
            aesthetic_min: 0.12,
            compression_min: 0.5,
            strict_entropy_lo: 1.5,
            strict_entropy_hi: 7.7,
            strict_clip_min: 0.5,
            strict_tokens_min: 6,
            strict_tokens_max: 512,
            strict_quality_min: 0.4,
            strict_aesthetic_min: 0.15,
            strict_compression_min: 0.6,
        }
    }
}

impl PipelineConfig {
    /// Checks that the strict thresholds are no looser than the defaults.
    pub fn validate(&self) -> Result<()> {
        let ok = self.strict_entropy_lo >= self.entropy_lo
            && self.strict_entropy_hi <= self.entropy_hi
            && self.strict_clip_min >= self.clip_min
            && self.strict_tokens_min >= self.tokens_min
            && self.strict_tokens_max <= self.tokens_max
            && self.strict_quality_min >= self.quality_min
            && self.strict_aesthetic_min >= self.aesthetic_min
            && self.strict_compression_min >= self.compression_min
            && self.entropy_lo <= self.entropy_hi
            && self.tokens_min <= self.tokens_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("pipeline thresholds: strict values must be at least as strict as the defaults".into()))
        }
    }

    fn base_filters(&self) -> Vec<Filter> {
        vec![
            Filter::BrokenFiles,
            Filter::Resolution { min_side: self.min_side },
            Filter::Dedup { max_hamming: self.dedup_hamming },
            Filter::Nsfw { max_score: self.nsfw_max },
            Filter::Rotation,
            Filter::Entropy { lo: self.entropy_lo, hi: self.entropy_hi },
            Filter::ClipSim { min_sim: self.clip_min },
            Filter::TokenLength { min: self.tokens_min, max: self.tokens_max },
        ]
    }

    fn quality_filters(&self) -> Vec<Filter> {
        vec![
            Filter::ImageQuality { min: self.quality_min },
            Filter::Aesthetic { min: self.aesthetic_min },
            Filter::CompressionQuality { min: self.compression_min },
        ]
    }

    fn strict_filters(&self) -> Vec<Filter> {
        vec![
            Filter::Entropy { lo: self.strict_entropy_lo, hi: self.strict_entropy_hi },
            Filter::ClipSim { min_sim: self.strict_clip_min },
            Filter::TokenLength { min: self.strict_tokens_min, max: self.strict_tokens_max },
            Filter::ImageQuality { min: self.strict_quality_min },
            Filter::Aesthetic { min: self.strict_aesthetic_min },
            Filter::CompressionQuality { min: self.strict_compression_min },
        ]
    }

    /// Ordered filter list of `stage`.
    pub fn stage_filters(&self, stage: u8) -> Result<Vec<Filter>> {
        let mut f = self.base_filters();
        match stage {
            1..=3 => {}
            4 => f.extend(self.quality_filters()),
            5 => {
                f.extend(self.quality_filters());
                f.push(Filter::HighResolution { min_side: self.high_min_side });
            }
            6 => {
                f.extend(self.quality_filters());
                f.push(Filter::HighResolution { min_side: self.high_min_side });
                f.push(Filter::Distribution(self.strict_filters()));
            }
            _ => return contract_err("run_stage_pipeline", format!("unknown stage {stage}; stages are 1 to 6")),
        }
        Ok(f)
    }
}

/// Whether `stage` admits a record into its mix: stage 1 takes web T2I
/// data, stage 2 adds editing pairs, stage 3 adds synthetic data.
pub fn in_mix(stage: u8, rec: &SampleRecord) -> bool {
    match stage {
        1 => rec.task == Task::T2i && rec.source == "web",
        2 => rec.source == "web" || (rec.task == Task::Ti2i && rec.source == "edit"),
        _ => true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCount {
    pub name: String,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub input: usize,
    pub excluded_by_mix: usize,
    pub admitted: usize,
    pub kept: usize,
    /// `kept / admitted`.
    pub retention: f64,
    pub filters: Vec<FilterCount>,
}

impl StageReport {
    /// Pretty JSON with a trailing newline; the golden-file format.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct StageOutcome {
    pub kept: Vec<SampleRecord>,
    pub dropped: Vec<SampleRecord>,
    pub report: StageReport,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub scorers: Scorers,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, scorers: Scorers::default(), base_dir: base_dir.into() })
    }

    pub fn resolve(&self, rec: &SampleRecord) -> PathBuf {
        let p = Path::new(&rec.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Runs one stage. The kept stream preserves input order; each kept
    /// record's trail holds exactly the stage's filter list.
    pub fn run_stage_pipeline(&self, stage: u8, records: Vec<SampleRecord>) -> Result<(Vec<SampleRecord>, StageReport)> {
        let out = self.run_stage_detailed(stage, records)?;
        Ok((out.kept, out.report))
    }

    /// Like [`Pipeline::run_stage_pipeline`], also returning the admitted
    /// records that were dropped, with their trails.
    pub fn run_stage_detailed(&self, stage: u8, records: Vec<SampleRecord>) -> Result<StageOutcome> {
        let filters = self.cfg.stage_filters(stage)?;
        let mut counts: Vec<FilterCount> = filters.iter().map(|f| FilterCount { name: f.name().to_string(), dropped: 0 }).collect();
        let mut dedup = DedupState::default();
        let input = records.len();
        let mut admitted = 0;
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for mut rec in records {
            if !in_mix(stage, &rec) {
                continue;
            }
            admitted += 1;
            rec.audit.clear();
            let bytes = std::fs::read(self.resolve(&rec)).ok();
            let img = bytes.as_deref().and_then(|b| image::load_from_memory(b).ok()).map(|i| i.to_rgb8());
            let mut survived = true;
            for (f, c) in filters.iter().zip(counts.iter_mut()) {
                let d = f.apply(&rec, bytes.as_deref(), img.as_ref(), &self.scorers, &mut dedup);
                rec.audit.push(AuditEntry { filter: f.name().to_string(), keep: d.keep, reason: d.reason, score: d.score });
                if !d.keep {
                    c.dropped += 1;
                    survived = false;
                    break;
                }
            }
            if survived {
                kept.push(rec);
            } else {
                dropped.push(rec);
            }
        }
        let report = StageReport {
            stage,
            input,
            excluded_by_mix: input - admitted,
            admitted,
            kept: kept.len(),
            retention: if admitted == 0 { 0.0 } else { kept.len() as f64 / admitted as f64 },
            filters: counts,
        };
        Ok(StageOutcome { kept, dropped, report })
    }
}

/// Reads one JSON record per line, skipping blank lines.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
