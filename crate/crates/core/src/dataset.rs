//! Dataset layout, manifest I/O, and report ingestion.
//!
//! The dataset root holds one subdirectory per cardiac class. Ingestion
//! preprocesses every report scan into twelve per-lead PNGs plus a manifest
//! CSV (`report_id,lead_label,class,path`) that training and evaluation
//! read back, decoupling the slow image pass from experiments.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::preprocess::{
    preprocess_report, save_binary_png, BinarizeConfig, LeadGridSpec, LeadLabel, PreprocessError,
    RoiRect,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} is missing class directory {1}")]
    MissingClassDir(PathBuf, &'static str),
    #[error("dataset root {0} contains no report images")]
    EmptyDataset(PathBuf),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("manifest {path} row {row}: {message}")]
    BadManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// The four target classes, in fixed label order 0..4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiseaseClass {
    MyocardialInfarction,
    AbnormalHeartbeat,
    HistoryOfMi,
    Normal,
}

impl DiseaseClass {
    pub const ALL: [DiseaseClass; 4] = [
        DiseaseClass::MyocardialInfarction,
        DiseaseClass::AbnormalHeartbeat,
        DiseaseClass::HistoryOfMi,
        DiseaseClass::Normal,
    ];

    pub const COUNT: usize = 4;

    /// Subdirectory name under the dataset root.
    pub fn dir_name(&self) -> &'static str {
        match self {
            DiseaseClass::MyocardialInfarction => "MI",
            DiseaseClass::AbnormalHeartbeat => "AbnormalHB",
            DiseaseClass::HistoryOfMi => "HistoryMI",
            DiseaseClass::Normal => "Normal",
        }
    }

    pub fn label(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).expect("member of ALL")
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

impl fmt::Display for DiseaseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DiseaseClass {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .find(|c| c.dir_name() == s)
            .copied()
            .ok_or_else(|| DatasetError::UnknownClass(s.to_string()))
    }
}

/// One manifest row: a single lead image on disk.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub report_id: String,
    pub lead_label: LeadLabel,
    pub class: DiseaseClass,
    /// Path relative to the manifest's directory.
    pub path: String,
}

/// Per-class report/lead counts produced by ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub reports_per_class: [usize; 4],
    pub leads_per_class: [usize; 4],
    pub failures: Vec<(PathBuf, String)>,
}

impl IngestSummary {
    pub fn total_reports(&self) -> usize {
        self.reports_per_class.iter().sum()
    }

    pub fn total_leads(&self) -> usize {
        self.leads_per_class.iter().sum()
    }
}

/// Preprocessing knobs shared by ingestion and the CLI config file.
#[derive(Debug, Clone, Copy)]
pub struct IngestSettings {
    /// Waveform region; `None` keeps the whole scan.
    pub roi: Option<RoiRect>,
    pub binarize: BinarizeConfig,
    pub grid: LeadGridSpec,
    pub resize: usize,
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

/// List report scans under one class directory, sorted by file name.
fn class_reports(root: &Path, class: DiseaseClass) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = root.join(class.dir_name());
    if !dir.is_dir() {
        return Err(DatasetError::MissingClassDir(root.to_path_buf(), class.dir_name()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|source| DatasetError::Io { path: dir.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTS.contains(&e))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Preprocess every report under `root` into `out_dir/leads/*.png` and
/// write `out_dir/manifest.csv`. Reports are processed in parallel;
/// per-file failures are recorded and the run continues.
pub fn ingest(
    root: &Path,
    out_dir: &Path,
    settings: &IngestSettings,
    jobs: usize,
) -> Result<IngestSummary, DatasetError> {
    let leads_dir = out_dir.join("leads");
    fs::create_dir_all(&leads_dir)
        .map_err(|source| DatasetError::Io { path: leads_dir.clone(), source })?;

    let mut work: Vec<(DiseaseClass, PathBuf)> = Vec::new();
    for class in DiseaseClass::ALL {
        for path in class_reports(root, class)? {
            work.push((class, path));
        }
    }
    if work.is_empty() {
        return Err(DatasetError::EmptyDataset(root.to_path_buf()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    type ReportResult = Result<Vec<ManifestEntry>, (PathBuf, String)>;
    let results: Vec<(DiseaseClass, ReportResult)> = pool.install(|| {
        work.par_iter()
            .map(|(class, path)| {
                let out = preprocess_report(
                    path,
                    settings.roi.as_ref(),
                    &settings.binarize,
                    &settings.grid,
                    settings.resize,
                )
                .and_then(|leads| {
                    let mut entries = Vec::with_capacity(12);
                    for lead in &leads {
                        let file =
                            format!("{}__{}.png", lead.source_report_id, lead.lead_label);
                        save_binary_png(&lead.image, &leads_dir.join(&file))?;
                        entries.push(ManifestEntry {
                            report_id: lead.source_report_id.clone(),
                            lead_label: lead.lead_label,
                            class: *class,
                            path: format!("leads/{file}"),
                        });
                    }
                    Ok(entries)
                })
                .map_err(|e| (path.clone(), e.to_string()));
                (*class, out)
            })
            .collect()
    });

    let mut summary = IngestSummary::default();
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (class, result) in results {
        match result {
            Ok(lead_entries) => {
                summary.reports_per_class[class.label()] += 1;
                summary.leads_per_class[class.label()] += lead_entries.len();
                entries.extend(lead_entries);
            }
            Err(failure) => summary.failures.push(failure),
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(summary)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|source| DatasetError::Csv { path: path.to_path_buf(), source })?;
    writer
        .write_record(["report_id", "lead_label", "class", "path"])
        .map_err(|source| DatasetError::Csv { path: path.to_path_buf(), source })?;
    for e in entries {
        writer
            .write_record([
                e.report_id.as_str(),
                &e.lead_label.to_string(),
                e.class.dir_name(),
                e.path.as_str(),
            ])
            .map_err(|source| DatasetError::Csv { path: path.to_path_buf(), source })?;
    }
    writer
        .flush()
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|source| DatasetError::Csv { path: path.to_path_buf(), source })?;
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|source| DatasetError::Csv { path: path.to_path_buf(), source })?;
        let field = |idx: usize| -> Result<&str, DatasetError> {
            record.get(idx).ok_or_else(|| DatasetError::BadManifestRow {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("missing column {idx}"),
            })
        };
        entries.push(ManifestEntry {
            report_id: field(0)?.to_string(),
            lead_label: field(1)?.parse().map_err(|e: PreprocessError| {
                DatasetError::BadManifestRow {
                    path: path.to_path_buf(),
                    row: i + 2,
                    message: e.to_string(),
                }
            })?,
            class: field(2)?.parse().map_err(|e: DatasetError| {
                DatasetError::BadManifestRow {
                    path: path.to_path_buf(),
                    row: i + 2,
                    message: e.to_string(),
                }
            })?,
            path: field(3)?.to_string(),
        });
    }
    Ok(entries)
}

/// One loaded training sample: a lead image as 0/1 floats plus its label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Vec<f64>,
    pub side: usize,
    pub label: usize,
    pub report_id: String,
    pub lead_label: LeadLabel,
}

/// In-memory dataset of lead images with a uniform side length.
#[derive(Debug, Clone, Default)]
pub struct LeadDataset {
    pub samples: Vec<Sample>,
}

impl LeadDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn report_ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.report_id.as_str()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LeadDataset {
        LeadDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Load every manifest entry's PNG, resolving paths relative to the
    /// manifest location.
    pub fn load(manifest_path: &Path) -> Result<Self, DatasetError> {
        let entries = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let img = crate::preprocess::load_binary_png(&base.join(&e.path))?;
            samples.push(Sample {
                image: img.to_f64(),
                side: img.width,
                label: e.class.label(),
                report_id: e.report_id,
                lead_label: e.lead_label,
            });
        }
        Ok(LeadDataset { samples })
    }
}
