//! Exposure-stratified k-fold assignment.

use rand::seq::SliceRandom;

use crate::cohort::Cohort;
use crate::error::{CelError, Result};
use crate::rng::{self, Domain};

/// Assign every patient to one of `k` folds, stratified by exposure so each
/// fold's treated fraction matches the cohort within one patient per class.
/// Deterministic for a fixed seed.
pub fn kfold_split(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CelError::config("k_folds must be >= 2"));
    }
    if cohort.len() < k {
        return Err(CelError::validation(format!(
            "cannot split {} patients into {k} folds",
            cohort.len()
        )));
    }
    let mut treated: Vec<usize> = Vec::new();
    let mut control: Vec<usize> = Vec::new();
    for (i, p) in cohort.patients.iter().enumerate() {
        if p.exposure == 1 {
            treated.push(i);
        } else {
            control.push(i);
        }
    }
    if treated.len() < k || control.len() < k {
        return Err(CelError::validation(format!(
            "stratified split needs at least {k} patients per exposure class \
             (treated {}, control {})",
            treated.len(),
            control.len()
        )));
    }
    let mut rng = rng::stream(seed, Domain::Folds, 0);
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);

    let mut assignment = vec![0usize; cohort.len()];
    for (j, idx) in treated.iter().enumerate() {
        assignment[*idx] = j % k;
    }
    for (j, idx) in control.iter().enumerate() {
        // offset so remainders don't pile onto fold 0 for both classes
        assignment[*idx] = (j + treated.len()) % k;
    }
    Ok(assignment)
}
