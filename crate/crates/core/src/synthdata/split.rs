use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;

use super::{Cohort, DataError, LesionType, PatientRecord, PriorityClass, StratumLabel};
use crate::rng;

/// Running count of lesion classes over the patients processed so far.
#[derive(Clone, Debug, Default)]
pub struct ClassTally {
    counts: HashMap<(PriorityClass, Option<LesionType>), usize>,
}

impl ClassTally {
    pub fn count(&self, class: (PriorityClass, Option<LesionType>)) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn record(&mut self, label: &StratumLabel) {
        *self.counts.entry(label.lesion_class()).or_insert(0) += 1;
    }
}

/// Picks the split label of a patient from all lesions across its images.
///
/// The highest priority class wins (malignant, then benign mass or
/// calcification, then other benign findings). When several lesion types tie
/// within that class, the type that is rarest in `tally` is chosen, falling
/// back to mass < calcification < other. A patient is normal only when every
/// image is lesion-free.
pub fn assign_priority_label(patient: &PatientRecord, tally: &ClassTally) -> StratumLabel {
    let best = patient
        .lesions()
        .map(|l| PriorityClass::of(l.lesion_type, l.pathology))
        .min();
    let Some(priority_class) = best else {
        return StratumLabel {
            priority_class: PriorityClass::Normal,
            lesion_type: None,
            density: patient.density,
        };
    };
    let mut candidates: Vec<LesionType> = patient
        .lesions()
        .filter(|l| PriorityClass::of(l.lesion_type, l.pathology) == priority_class)
        .map(|l| l.lesion_type)
        .collect();
    candidates.sort();
    candidates.dedup();
    let lesion_type = candidates
        .into_iter()
        .min_by_key(|&t| (tally.count((priority_class, Some(t))), t))
        .expect("at least one lesion in the winning class");
    StratumLabel {
        priority_class,
        lesion_type: Some(lesion_type),
        density: patient.density,
    }
}

/// Assigns strata to every patient, processing in ascending patient id so
/// the tie-break tally is deterministic.
pub fn assign_strata(patients: &mut [PatientRecord]) {
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.sort_by_key(|&i| patients[i].patient_id);
    let mut tally = ClassTally::default();
    for i in order {
        let label = assign_priority_label(&patients[i], &tally);
        tally.record(&label);
        patients[i].stratum = label;
    }
}

fn check_fractions(fractions: &[f64]) -> Result<(), DataError> {
    if fractions.len() < 2 {
        return Err(DataError::InvalidFractions(format!(
            "need at least 2 fractions, got {}",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DataError::InvalidFractions(format!(
            "fractions {fractions:?} must lie in [0, 1]"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(format!(
            "fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `size` items over `fractions`.
///
/// Equal fractional parts are resolved in favour of the subset furthest
/// below its running target (`deficit`), then by lower index.
pub(crate) fn apportion(size: usize, fractions: &[f64], assigned: &[usize], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * size as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let given: usize = counts.iter().sum();
    let remaining = size.saturating_sub(given);
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    let deficit = |j: usize| fractions[j] * (total + size) as f64 - assigned[j] as f64;
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa)
            .then(deficit(b).total_cmp(&deficit(a)))
            .then(a.cmp(&b))
    });
    for &j in order.iter().take(remaining) {
        counts[j] += 1;
    }
    counts
}

/// Subset index for every patient, stratified by [`StratumLabel`].
///
/// Strata are visited in sorted order; within a stratum patients are sorted
/// by id and shuffled with a stream derived from `seed`.
pub(crate) fn stratified_assignment(
    patients: &[PatientRecord],
    fractions: &[f64],
    seed: u64,
) -> Vec<usize> {
    let mut strata: BTreeMap<StratumLabel, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        strata.entry(p.stratum).or_default().push(i);
    }
    let mut assignment = vec![0usize; patients.len()];
    let mut assigned = vec![0usize; fractions.len()];
    let mut total = 0usize;
    let mut r = rng::stream(&[seed, rng::label_key("stratified_split")]);
    for members in strata.values_mut() {
        members.sort_by_key(|&i| patients[i].patient_id);
        members.shuffle(&mut r);
        let counts = apportion(members.len(), fractions, &assigned, total);
        let mut it = members.iter();
        for (j, &c) in counts.iter().enumerate() {
            for &i in it.by_ref().take(c) {
                assignment[i] = j;
            }
            assigned[j] += c;
        }
        total += members.len();
    }
    assignment
}

fn collect_subsets(cohort: &Cohort, assignment: &[usize], n: usize) -> Vec<Cohort> {
    let mut out = vec![Vec::new(); n];
    for (p, &j) in cohort.patients.iter().zip(assignment) {
        out[j].push(p.clone());
    }
    out.into_iter()
        .map(|mut v| {
            v.sort_by_key(|p: &PatientRecord| p.patient_id);
            Cohort::new(v)
        })
        .collect()
}

/// Patient-level stratified split into `fractions.len()` disjoint cohorts.
pub fn stratified_split(cohort: &Cohort, fractions: &[f64], seed: u64) -> Result<Vec<Cohort>, DataError> {
    if cohort.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    check_fractions(fractions)?;
    let assignment = stratified_assignment(&cohort.patients, fractions, seed);
    Ok(collect_subsets(cohort, &assignment, fractions.len()))
}

/// Stratified k-fold: returns `(train, validation)` for each fold.
pub fn kfold_splits(dev: &Cohort, k: usize, seed: u64) -> Result<Vec<(Cohort, Cohort)>, DataError> {
    if k < 2 {
        return Err(DataError::InvalidFractions(format!("k = {k}, need k >= 2")));
    }
    if k > dev.len() {
        return Err(DataError::TooManyFolds {
            k,
            patients: dev.len(),
        });
    }
    let fractions = vec![1.0 / k as f64; k];
    let assignment = stratified_assignment(&dev.patients, &fractions, seed);
    Ok((0..k)
        .map(|fold| {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (p, &j) in dev.patients.iter().zip(&assignment) {
                if j == fold {
                    val.push(p.clone());
                } else {
                    train.push(p.clone());
                }
            }
            (Cohort::new(train), Cohort::new(val))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Density, ImageRecord, LesionBox, Pathology, Rect};

    fn lesion(t: LesionType, p: Pathology) -> LesionBox {
        LesionBox {
            rect: Rect::new(1, 1, 3, 3),
            lesion_type: t,
            pathology: p,
        }
    }

    fn patient(id: u64, density: Density, images: Vec<Vec<LesionBox>>) -> PatientRecord {
        let images = images
            .into_iter()
            .enumerate()
            .map(|(k, lesions)| ImageRecord {
                image_id: id * 10 + k as u64,
                height: 8,
                width: 8,
                pixels: vec![0.0; 64],
                label: lesions.iter().any(|l| l.pathology == Pathology::Malignant),
                lesions,
            })
            .collect();
        let mut p = PatientRecord {
            patient_id: id,
            density,
            images,
            stratum: StratumLabel {
                priority_class: PriorityClass::Normal,
                lesion_type: None,
                density,
            },
        };
        p.stratum = assign_priority_label(&p, &ClassTally::default());
        p
    }

    /// Patient whose stratum is forced to one of several synthetic labels.
    fn in_stratum(id: u64, stratum: usize) -> PatientRecord {
        let lesions = match stratum {
            0 => vec![],
            1 => vec![lesion(LesionType::Mass, Pathology::Malignant)],
            2 => vec![lesion(LesionType::Mass, Pathology::Benign)],
            _ => vec![lesion(LesionType::Other, Pathology::Benign)],
        };
        patient(id, Density::B, vec![lesions])
    }

    #[test]
    fn malignant_outranks_benign() {
        let p = patient(
            1,
            Density::A,
            vec![
                vec![lesion(LesionType::Mass, Pathology::Malignant)],
                vec![lesion(LesionType::Calcification, Pathology::Benign)],
            ],
        );
        let s = assign_priority_label(&p, &ClassTally::default());
        assert_eq!(s.priority_class, PriorityClass::Malignant);
        assert_eq!(s.lesion_type, Some(LesionType::Mass));
    }

    #[test]
    fn lesion_free_patient_is_normal() {
        let p = patient(2, Density::C, vec![vec![], vec![]]);
        let s = assign_priority_label(&p, &ClassTally::default());
        assert_eq!(s.priority_class, PriorityClass::Normal);
        assert_eq!(s.lesion_type, None);
        assert_eq!(s.density, Density::C);
    }

    #[test]
    fn other_only_patient_is_other_benign() {
        let p = patient(3, Density::B, vec![vec![lesion(LesionType::Other, Pathology::Benign)], vec![]]);
        let s = assign_priority_label(&p, &ClassTally::default());
        assert_eq!(s.priority_class, PriorityClass::OtherBenign);
    }

    #[test]
    fn ties_go_to_the_least_represented_class() {
        let p = patient(
            4,
            Density::B,
            vec![vec![
                lesion(LesionType::Mass, Pathology::Benign),
                lesion(LesionType::Calcification, Pathology::Benign),
            ]],
        );
        let mut tally = ClassTally::default();
        assert_eq!(assign_priority_label(&p, &tally).lesion_type, Some(LesionType::Mass));
        tally.record(&StratumLabel {
            priority_class: PriorityClass::BenignMassOrCalc,
            lesion_type: Some(LesionType::Mass),
            density: Density::A,
        });
        assert_eq!(
            assign_priority_label(&p, &tally).lesion_type,
            Some(LesionType::Calcification)
        );
    }

    #[test]
    fn single_stratum_80_20() {
        let cohort = Cohort::new((0..100).map(|i| in_stratum(i, 0)).collect());
        let parts = stratified_split(&cohort, &[0.8, 0.2], 1).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (80, 20));
    }

    #[test]
    fn degenerate_fractions() {
        let cohort = Cohort::new((0..10).map(|i| in_stratum(i, (i % 3) as usize)).collect());
        let parts = stratified_split(&cohort, &[1.0, 0.0], 1).unwrap();
        assert_eq!(parts[0], cohort);
        assert!(parts[1].is_empty());
    }

    #[test]
    fn largest_remainder_per_stratum() {
        // strata sizes 5, 3, 2: quotas for the 0.2 subset are 1.0, 0.6, 0.4
        let mut patients = Vec::new();
        for i in 0..5 {
            patients.push(in_stratum(i, 0));
        }
        for i in 5..8 {
            patients.push(in_stratum(i, 1));
        }
        for i in 8..10 {
            patients.push(in_stratum(i, 2));
        }
        let cohort = Cohort::new(patients);
        let parts = stratified_split(&cohort, &[0.8, 0.2], 9).unwrap();
        let test_counts: Vec<usize> = [0, 1, 2]
            .iter()
            .map(|&s| {
                let label = in_stratum(0, s).stratum;
                parts[1].patients.iter().filter(|p| p.stratum == label).count()
            })
            .collect();
        assert_eq!(test_counts, vec![1, 1, 0]);
    }

    #[test]
    fn split_errors() {
        assert_eq!(
            stratified_split(&Cohort::default(), &[0.5, 0.5], 0),
            Err(DataError::EmptyCohort)
        );
        let cohort = Cohort::new(vec![in_stratum(0, 0)]);
        assert!(matches!(
            stratified_split(&cohort, &[1.0], 0),
            Err(DataError::InvalidFractions(_))
        ));
        assert!(matches!(
            stratified_split(&cohort, &[0.5, 0.4], 0),
            Err(DataError::InvalidFractions(_))
        ));
    }

    #[test]
    fn five_folds_on_uniform_cohort() {
        let cohort = Cohort::new((0..100).map(|i| in_stratum(i, 0)).collect());
        let folds = kfold_splits(&cohort, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = Vec::new();
        for (train, val) in &folds {
            assert_eq!(val.len(), 20);
            assert_eq!(train.len(), 80);
            seen.extend(val.patient_ids());
        }
        seen.sort();
        assert_eq!(seen, (0..100).collect::<Vec<u64>>());
        assert_eq!(folds, kfold_splits(&cohort, 5, 3).unwrap());
    }

    #[test]
    fn two_folds_two_patients() {
        for strata in [(0, 0), (0, 1)] {
            let cohort = Cohort::new(vec![in_stratum(0, strata.0), in_stratum(1, strata.1)]);
            let folds = kfold_splits(&cohort, 2, 0).unwrap();
            assert!(folds.iter().all(|(t, v)| t.len() == 1 && v.len() == 1));
            assert_ne!(folds[0].1.patient_ids(), folds[1].1.patient_ids());
        }
    }

    #[test]
    fn too_many_folds() {
        let cohort = Cohort::new((0..3).map(|i| in_stratum(i, 0)).collect());
        assert_eq!(
            kfold_splits(&cohort, 4, 0),
            Err(DataError::TooManyFolds { k: 4, patients: 3 })
        );
    }

    #[test]
    fn apportion_balances_equal_remainders() {
        // three singleton strata over three equal folds land in distinct folds
        let f = [1.0 / 3.0; 3];
        let mut assigned = vec![0; 3];
        let mut total = 0;
        for _ in 0..3 {
            let c = apportion(1, &f, &assigned, total);
            for j in 0..3 {
                assigned[j] += c[j];
            }
            total += 1;
        }
        assert_eq!(assigned, vec![1, 1, 1]);
    }
}
