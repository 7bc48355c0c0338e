//! Synthetic density-attributed cohorts and every split performed on them.
//!
//! A [`Cohort`] is a list of patients, each with a BI-RADS density category
//! and a few rendered images. Lesion visibility is controlled per density so
//! that dense breasts hide lesions, which is the heterogeneity the federated
//! experiments study.

mod archive;
mod generate;
mod partition;
mod patches;
mod split;

use std::fmt;

use thiserror::Error;

pub use archive::{read_cohort, write_cohort, ARCHIVE_MAGIC};
pub use generate::{generate_cohort, lesion_contrast, GeneratorConfig};
pub use partition::{
    l1, partition_population, partition_strong, sample_population_subsets, PopulationTarget,
};
pub use patches::{extract_patches, iou, Patch, PatchLabel, MAX_PATCH_ATTEMPTS, PATCHES_PER_LESION};
pub use split::{assign_priority_label, assign_strata, kfold_splits, stratified_split, ClassTally};

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("k = {k} folds requested but cohort has only {patients} patients")]
    TooManyFolds { k: usize, patients: usize },
    #[error("density {0} is required by the partition mode but absent from the cohort")]
    MissingDensity(Density),
    #[error("population targets infeasible: pool lacks density {density}; achievable distributions {achieved:?}")]
    InfeasibleTargets {
        density: Density,
        achieved: Vec<[f64; 4]>,
    },
    #[error("image {height}x{width} is smaller than patch size {patch}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("archive: {0}")]
    Archive(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Archive(e.to_string())
    }
}

/// BI-RADS breast density category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Density {
    A,
    B,
    C,
    D,
}

impl Density {
    pub const ALL: [Density; 4] = [Density::A, Density::B, Density::C, Density::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Density> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Density> {
        match c.to_ascii_uppercase() {
            'A' => Some(Density::A),
            'B' => Some(Density::B),
            'C' => Some(Density::C),
            'D' => Some(Density::D),
            _ => None,
        }
    }

    /// C and D.
    pub fn is_dense(self) -> bool {
        matches!(self, Density::C | Density::D)
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LesionType {
    Mass,
    Calcification,
    Other,
}

impl LesionType {
    pub fn name(self) -> &'static str {
        match self {
            LesionType::Mass => "mass",
            LesionType::Calcification => "calcification",
            LesionType::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mass" => Some(LesionType::Mass),
            "calcification" => Some(LesionType::Calcification),
            "other" => Some(LesionType::Other),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathology {
    Benign,
    Malignant,
}

impl Pathology {
    pub fn name(self) -> &'static str {
        match self {
            Pathology::Benign => "benign",
            Pathology::Malignant => "malignant",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "benign" => Some(Pathology::Benign),
            "malignant" => Some(Pathology::Malignant),
            _ => None,
        }
    }
}

/// Axis-aligned pixel rectangle, `x`/`y` are the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionBox {
    pub rect: Rect,
    pub lesion_type: LesionType,
    pub pathology: Pathology,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub lesions: Vec<LesionBox>,
    /// True iff a malignant lesion is present.
    pub label: bool,
}

impl ImageRecord {
    pub fn has_malignancy(&self) -> bool {
        self.lesions
            .iter()
            .any(|l| l.pathology == Pathology::Malignant)
    }
}

/// Split priority of a patient, highest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PriorityClass {
    Malignant,
    BenignMassOrCalc,
    OtherBenign,
    Normal,
}

impl PriorityClass {
    pub fn name(self) -> &'static str {
        match self {
            PriorityClass::Malignant => "malignant",
            PriorityClass::BenignMassOrCalc => "benign_mass_or_calc",
            PriorityClass::OtherBenign => "other_benign",
            PriorityClass::Normal => "normal",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "malignant" => Some(PriorityClass::Malignant),
            "benign_mass_or_calc" => Some(PriorityClass::BenignMassOrCalc),
            "other_benign" => Some(PriorityClass::OtherBenign),
            "normal" => Some(PriorityClass::Normal),
            _ => None,
        }
    }

    pub fn of(lesion_type: LesionType, pathology: Pathology) -> Self {
        match (pathology, lesion_type) {
            (Pathology::Malignant, _) => PriorityClass::Malignant,
            (Pathology::Benign, LesionType::Other) => PriorityClass::OtherBenign,
            (Pathology::Benign, _) => PriorityClass::BenignMassOrCalc,
        }
    }
}

/// The stratum a patient is split by: lesion priority class, the lesion
/// type that won the priority contest, and density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StratumLabel {
    pub priority_class: PriorityClass,
    pub lesion_type: Option<LesionType>,
    pub density: Density,
}

impl StratumLabel {
    /// The lesion class without density, used for tie-break tallies.
    pub fn lesion_class(&self) -> (PriorityClass, Option<LesionType>) {
        (self.priority_class, self.lesion_type)
    }

    pub fn encode(&self) -> String {
        format!(
            "{}:{}:{}",
            self.priority_class.name(),
            self.lesion_type.map_or("none", LesionType::name),
            self.density
        )
    }

    pub fn decode(s: &str) -> Option<Self> {
        let mut it = s.split(':');
        let priority_class = PriorityClass::from_name(it.next()?)?;
        let lesion_type = match it.next()? {
            "none" => None,
            name => Some(LesionType::from_name(name)?),
        };
        let density = Density::from_letter(it.next()?.chars().next()?)?;
        if it.next().is_some() {
            return None;
        }
        Some(StratumLabel {
            priority_class,
            lesion_type,
            density,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub density: Density,
    pub images: Vec<ImageRecord>,
    pub stratum: StratumLabel,
}

impl PatientRecord {
    pub fn lesions(&self) -> impl Iterator<Item = &LesionBox> {
        self.images.iter().flat_map(|im| im.lesions.iter())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>) -> Self {
        Cohort { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.patients.iter().flat_map(|p| p.images.iter())
    }

    pub fn image_count(&self) -> usize {
        self.patients.iter().map(|p| p.images.len()).sum()
    }

    pub fn patient_ids(&self) -> Vec<u64> {
        self.patients.iter().map(|p| p.patient_id).collect()
    }

    pub fn density_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for p in &self.patients {
            counts[p.density.index()] += 1;
        }
        counts
    }

    /// Empirical density distribution over patients.
    pub fn density_distribution(&self) -> [f64; 4] {
        let counts = self.density_counts();
        let n = self.len().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }

    /// Patients whose density satisfies `keep`, order preserved.
    pub fn filter_density(&self, keep: impl Fn(Density) -> bool) -> Cohort {
        Cohort::new(
            self.patients
                .iter()
                .filter(|p| keep(p.density))
                .cloned()
                .collect(),
        )
    }

    /// Concatenates cohorts and sorts by patient id.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a Cohort>) -> Cohort {
        let mut patients: Vec<PatientRecord> = parts
            .into_iter()
            .flat_map(|c| c.patients.iter().cloned())
            .collect();
        patients.sort_by_key(|p| p.patient_id);
        Cohort::new(patients)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratum_label_round_trips_through_text() {
        let s = StratumLabel {
            priority_class: PriorityClass::BenignMassOrCalc,
            lesion_type: Some(LesionType::Calcification),
            density: Density::C,
        };
        assert_eq!(StratumLabel::decode(&s.encode()), Some(s));
        let n = StratumLabel {
            priority_class: PriorityClass::Normal,
            lesion_type: None,
            density: Density::A,
        };
        assert_eq!(n.encode(), "normal:none:A");
        assert_eq!(StratumLabel::decode("normal:none:A"), Some(n));
        assert_eq!(StratumLabel::decode("normal:none:E"), None);
    }

    #[test]
    fn rect_intersection() {
        let a = Rect::new(0, 0, 8, 8);
        let b = Rect::new(4, 4, 8, 8);
        assert_eq!(a.intersection_area(&b), 16);
        assert_eq!(a.intersection_area(&Rect::new(8, 0, 4, 4)), 0);
        assert!(!a.intersects(&Rect::new(8, 8, 1, 1)));
    }
}
