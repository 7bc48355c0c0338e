use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;

use super::split::stratified_assignment;
use super::{Cohort, DataError, Density, PatientRecord};
use crate::rng;

/// Maximum L1 distance between a client's density distribution and its
/// target before the partition is reported as infeasible.
pub const POPULATION_L1_TOLERANCE: f64 = 0.05;

/// A named target density distribution over A..D.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationTarget {
    pub name: String,
    pub distribution: [f64; 4],
}

impl PopulationTarget {
    pub fn new(name: impl Into<String>, distribution: [f64; 4]) -> Self {
        PopulationTarget {
            name: name.into(),
            distribution,
        }
    }

    /// Spreads a dense fraction over C/D and the remainder over A/B in
    /// proportion to `marginal`.
    pub fn from_dense_fraction(name: impl Into<String>, dense: f64, marginal: &[f64; 4]) -> Self {
        let fatty_mass = marginal[0] + marginal[1];
        let dense_mass = marginal[2] + marginal[3];
        let distribution = [
            (1.0 - dense) * marginal[0] / fatty_mass,
            (1.0 - dense) * marginal[1] / fatty_mass,
            dense * marginal[2] / dense_mass,
            dense * marginal[3] / dense_mass,
        ];
        PopulationTarget::new(name, distribution)
    }

    /// Default pair: dense-breast prevalence 66.0% (Asian) and 45.5% (White).
    pub fn defaults(marginal: &[f64; 4]) -> Vec<PopulationTarget> {
        vec![
            PopulationTarget::from_dense_fraction("Asian", 0.660, marginal),
            PopulationTarget::from_dense_fraction("White", 0.455, marginal),
        ]
    }

    pub fn dense_fraction(&self) -> f64 {
        self.distribution[2] + self.distribution[3]
    }
}

pub fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Strongly heterogeneous partition: 2 clients split {A,B} / {C,D}, or 4
/// clients with one density each.
pub fn partition_strong(dev: &Cohort, n_clients: usize) -> Result<Vec<Cohort>, DataError> {
    if dev.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    let groups: Vec<Vec<Density>> = match n_clients {
        2 => vec![vec![Density::A, Density::B], vec![Density::C, Density::D]],
        4 => Density::ALL.iter().map(|&d| vec![d]).collect(),
        n => {
            return Err(DataError::InvalidFractions(format!(
                "strong partition supports 2 or 4 clients, got {n}"
            )))
        }
    };
    let counts = dev.density_counts();
    let mut clients = Vec::with_capacity(groups.len());
    for group in groups {
        if group.iter().all(|d| counts[d.index()] == 0) {
            return Err(DataError::MissingDensity(group[0]));
        }
        clients.push(dev.filter_density(|d| group.contains(&d)));
    }
    Ok(clients)
}

fn check_targets(targets: &[PopulationTarget]) -> Result<(), DataError> {
    if targets.is_empty() {
        return Err(DataError::InvalidFractions("no population targets".into()));
    }
    for t in targets {
        let sum: f64 = t.distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || t.distribution.iter().any(|&p| p < 0.0) {
            return Err(DataError::InvalidFractions(format!(
                "target {} = {:?} is not a distribution",
                t.name, t.distribution
            )));
        }
    }
    Ok(())
}

fn missing_density(pool: &[usize; 4], targets: &[PopulationTarget]) -> Option<Density> {
    Density::ALL.into_iter().find(|d| {
        pool[d.index()] == 0 && targets.iter().any(|t| t.distribution[d.index()] > 0.0)
    })
}

/// Patients grouped by stratum, shuffled within each stratum.
fn stratum_order(patients: &[PatientRecord], seed: u64, tag: &str) -> Vec<usize> {
    let mut strata: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        strata.entry(p.stratum).or_default().push(i);
    }
    let mut r = rng::stream(&[seed, rng::label_key(tag)]);
    let mut order = Vec::with_capacity(patients.len());
    for members in strata.values_mut() {
        members.sort_by_key(|&i| patients[i].patient_id);
        members.shuffle(&mut r);
        order.extend_from_slice(members);
    }
    order
}

/// Splits `dev` across clients so each client's density distribution
/// matches its target.
///
/// Greedy largest-deficit: patients are visited stratum by stratum and each
/// goes to the client with the largest remaining need for its density among
/// clients with spare capacity. Ties are broken towards the client holding
/// the fewest patients of the same lesion class, then the lower index.
///
/// Every patient is assigned and client sizes differ by at most one when that
/// meets the targets. Otherwise all clients get the largest equal size the
/// pool can fill on target and surplus patients are left out.
pub fn partition_population(
    dev: &Cohort,
    targets: &[PopulationTarget],
    seed: u64,
) -> Result<Vec<Cohort>, DataError> {
    if dev.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    check_targets(targets)?;
    let pool = dev.density_counts();
    if let Some(d) = missing_density(&pool, targets) {
        return Err(DataError::InfeasibleTargets {
            density: d,
            achieved: vec![dev.density_distribution(); targets.len()],
        });
    }

    let n = dev.len();
    let c = targets.len();
    let order = stratum_order(&dev.patients, seed, "partition_population");
    let exhaustive: Vec<usize> = (0..c).map(|i| n / c + usize::from(i < n % c)).collect();
    let (mut clients, mut worst) = assign_population(dev, targets, &exhaustive, &order);
    let mut capacity = exhaustive;
    if worst > POPULATION_L1_TOLERANCE {
        // largest equal client size whose target counts the pool can supply
        let fit = Density::ALL
            .into_iter()
            .filter_map(|d| {
                let demand: f64 = targets.iter().map(|t| t.distribution[d.index()]).sum();
                (demand > 0.0).then(|| (pool[d.index()] as f64 / demand).floor() as usize)
            })
            .min()
            .unwrap_or(0);
        if fit > 0 && fit < n / c {
            capacity = vec![fit; c];
            (clients, worst) = assign_population(dev, targets, &capacity, &order);
        }
    }
    if worst > POPULATION_L1_TOLERANCE {
        // name the density whose pool falls furthest short of the demand
        let density = Density::ALL
            .into_iter()
            .max_by(|a, b| {
                let short = |d: Density| {
                    (0..c)
                        .map(|j| targets[j].distribution[d.index()] * capacity[j] as f64)
                        .sum::<f64>()
                        - pool[d.index()] as f64
                };
                short(*a).total_cmp(&short(*b))
            })
            .expect("four densities");
        let achieved = clients.iter().map(Cohort::density_distribution).collect();
        return Err(DataError::InfeasibleTargets { density, achieved });
    }
    Ok(clients)
}

/// Greedy fill of the given client capacities; returns the clients and the
/// worst L1 distance to their targets. Patients that fit nowhere are left out.
fn assign_population(
    dev: &Cohort,
    targets: &[PopulationTarget],
    capacity: &[usize],
    order: &[usize],
) -> (Vec<Cohort>, f64) {
    let c = targets.len();
    let mut per_density = vec![[0usize; 4]; c];
    let mut per_class: Vec<HashMap<_, usize>> = vec![HashMap::new(); c];
    let mut sizes = vec![0usize; c];
    let mut owner: Vec<Option<usize>> = vec![None; dev.len()];
    // first pass fills rounded quotas, second pass fills leftover capacity
    for min_need in [0.5, f64::NEG_INFINITY] {
        for &i in order {
            if owner[i].is_some() {
                continue;
            }
            let p = &dev.patients[i];
            let d = p.density.index();
            let class = p.stratum.lesion_class();
            let need = |j: usize| targets[j].distribution[d] * capacity[j] as f64 - per_density[j][d] as f64;
            let held = |j: usize| per_class[j].get(&class).copied().unwrap_or(0);
            let Some(client) = (0..c)
                .filter(|&j| sizes[j] < capacity[j])
                .max_by(|&a, &b| need(a).total_cmp(&need(b)).then(held(b).cmp(&held(a))).then(b.cmp(&a)))
            else {
                break;
            };
            if need(client) < min_need {
                continue;
            }
            owner[i] = Some(client);
            sizes[client] += 1;
            per_density[client][d] += 1;
            *per_class[client].entry(class).or_insert(0) += 1;
        }
    }
    let clients: Vec<Cohort> = (0..c)
        .map(|j| {
            Cohort::new(
                dev.patients
                    .iter()
                    .zip(&owner)
                    .filter(|(_, &o)| o == Some(j))
                    .map(|(p, _)| p.clone())
                    .collect(),
            )
        })
        .collect();
    let worst = clients
        .iter()
        .zip(targets)
        .map(|(cl, t)| l1(&cl.density_distribution(), &t.distribution))
        .fold(0.0, f64::max);
    (clients, worst)
}

/// Draws disjoint, equally sized subsets of `test` whose density
/// distributions follow `targets`, using the largest size the pool allows.
///
/// Within each density the draw is stratified by lesion class. Unlike
/// [`partition_population`] the subsets need not cover the pool.
pub fn sample_population_subsets(
    test: &Cohort,
    targets: &[PopulationTarget],
    seed: u64,
) -> Result<Vec<Cohort>, DataError> {
    if test.is_empty() {
        return Err(DataError::EmptyCohort);
    }
    check_targets(targets)?;
    let pool = test.density_counts();
    if let Some(d) = missing_density(&pool, targets) {
        return Err(DataError::InfeasibleTargets {
            density: d,
            achieved: vec![test.density_distribution(); targets.len()],
        });
    }
    let wanted = |m: usize| -> Vec<[usize; 4]> {
        targets
            .iter()
            .map(|t| t.distribution.map(|p| (p * m as f64).round() as usize))
            .collect()
    };
    let fits = |m: usize| {
        let w = wanted(m);
        (0..4).all(|d| w.iter().map(|row| row[d]).sum::<usize>() <= pool[d])
    };
    let size = (0..=test.len() / targets.len())
        .rev()
        .find(|&m| fits(m))
        .unwrap_or(0);
    let want = wanted(size);

    let mut subsets = vec![Vec::new(); targets.len()];
    for d in Density::ALL {
        let di = d.index();
        if pool[di] == 0 {
            continue;
        }
        let members = test.filter_density(|x| x == d);
        let mut fractions: Vec<f64> = want.iter().map(|w| w[di] as f64 / pool[di] as f64).collect();
        let used: f64 = fractions.iter().sum();
        fractions.push((1.0 - used).max(0.0));
        let assignment = stratified_assignment(
            &members.patients,
            &fractions,
            rng::derive_seed(&[seed, di as u64]),
        );
        for (p, &j) in members.patients.iter().zip(&assignment) {
            if j < targets.len() {
                subsets[j].push(p.clone());
            }
        }
    }
    Ok(subsets
        .into_iter()
        .map(|mut v| {
            v.sort_by_key(|p: &PatientRecord| p.patient_id);
            Cohort::new(v)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_cohort, GeneratorConfig};

    fn cohort(n: usize, marginal: [f64; 4], seed: u64) -> Cohort {
        generate_cohort(
            &GeneratorConfig {
                n_patients: n,
                images_per_patient: 1,
                density_marginal: marginal,
                image_size: 24,
                patch_size: 8,
                ..GeneratorConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn ids(parts: &[Cohort]) -> Vec<u64> {
        let mut v: Vec<u64> = parts.iter().flat_map(|c| c.patient_ids()).collect();
        v.sort();
        v
    }

    #[test]
    fn strong_two_client_sizes() {
        // exactly 10 per density
        let base = cohort(400, [0.25; 4], 1);
        let mut patients = Vec::new();
        for d in Density::ALL {
            patients.extend(base.patients.iter().filter(|p| p.density == d).take(10).cloned());
        }
        let dev = Cohort::new(patients);
        let two = partition_strong(&dev, 2).unwrap();
        assert_eq!((two[0].len(), two[1].len()), (20, 20));
        assert!(two[0].patients.iter().all(|p| !p.density.is_dense()));
        assert!(two[1].patients.iter().all(|p| p.density.is_dense()));
        let four = partition_strong(&dev, 4).unwrap();
        for (i, c) in four.iter().enumerate() {
            assert_eq!(c.len(), 10);
            assert!(c.patients.iter().all(|p| p.density.index() == i));
        }
    }

    #[test]
    fn strong_partition_requires_densities() {
        let dev = cohort(100, [0.5, 0.5, 0.0, 0.0], 2);
        assert!(matches!(partition_strong(&dev, 2), Err(DataError::MissingDensity(Density::C))));
        assert!(matches!(partition_strong(&dev, 4), Err(DataError::MissingDensity(Density::C))));
        assert!(partition_strong(&dev, 3).is_err());
    }

    #[test]
    fn population_partition_matches_targets() {
        let marginal = [0.10, 0.40, 0.40, 0.10];
        let targets = PopulationTarget::defaults(&marginal);
        let mean: [f64; 4] =
            std::array::from_fn(|d| targets.iter().map(|t| t.distribution[d]).sum::<f64>() / 2.0);
        let dev = cohort(1000, mean, 3);
        let parts = partition_population(&dev, &targets, 5).unwrap();
        assert_eq!(ids(&parts), dev.patient_ids());
        assert!(parts[0].len().abs_diff(parts[1].len()) <= 1);
        for (p, t) in parts.iter().zip(&targets) {
            let dist = p.density_distribution();
            assert!(l1(&dist, &t.distribution) <= POPULATION_L1_TOLERANCE);
            let dense = dist[2] + dist[3];
            assert!((dense - t.dense_fraction()).abs() <= 0.05);
        }
    }

    #[test]
    fn identical_targets_give_matching_clients() {
        let dev = cohort(800, [0.25; 4], 4);
        let t = PopulationTarget::new("x", dev.density_distribution());
        let parts = partition_population(&dev, &[t.clone(), t], 1).unwrap();
        assert!(l1(&parts[0].density_distribution(), &parts[1].density_distribution()) < 0.05);
    }

    #[test]
    fn short_pool_drops_surplus_patients() {
        let marginal = [0.10, 0.40, 0.40, 0.10];
        let targets = PopulationTarget::defaults(&marginal);
        // far fewer dense patients than an exhaustive split would need
        let dev = cohort(800, [0.15, 0.45, 0.30, 0.10], 7);
        let parts = partition_population(&dev, &targets, 3).unwrap();
        assert_eq!(parts[0].len(), parts[1].len());
        assert!(parts[0].len() * 2 < dev.len());
        let all = ids(&parts);
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(all, dedup);
        for (p, t) in parts.iter().zip(&targets) {
            assert!(l1(&p.density_distribution(), &t.distribution) <= POPULATION_L1_TOLERANCE);
        }
    }

    #[test]
    fn missing_density_is_infeasible() {
        let dev = cohort(100, [0.0, 0.5, 0.5, 0.0], 6);
        let err = partition_population(
            &dev,
            &[
                PopulationTarget::new("a", [1.0, 0.0, 0.0, 0.0]),
                PopulationTarget::new("b", [0.0, 0.5, 0.5, 0.0]),
            ],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::InfeasibleTargets { density: Density::A, .. }));
        assert!(err.to_string().contains("density A"));
    }

    #[test]
    fn population_subsets_are_disjoint_and_on_target() {
        let marginal = [0.10, 0.40, 0.40, 0.10];
        let test = cohort(600, marginal, 8);
        let targets = PopulationTarget::defaults(&marginal);
        let subsets = sample_population_subsets(&test, &targets, 2).unwrap();
        let all = ids(&subsets);
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(all, dedup);
        assert!(all.len() < test.len());
        for (s, t) in subsets.iter().zip(&targets) {
            assert!(s.len() > 100);
            assert!((s.density_distribution()[2] + s.density_distribution()[3] - t.dense_fraction()).abs() < 0.05);
        }
    }
}
