use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            stratified: true,
            seed: 0,
        }
    }
}

/// Test-set size for a group of `n` entries: `round(fraction * n)`, at
/// least 1 and leaving at least 1 for training.
fn test_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits manifest indices into `(train, test)`, both sorted ascending.
///
/// When stratified, each class contributes `round(test_fraction * n_c)`
/// entries (minimum 1) to the test set, chosen by a seeded shuffle within
/// the class.
pub fn stratified_split(m: &DatasetManifest, s: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test fraction must be in (0, 1), got {}",
            s.test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let groups: Vec<Vec<usize>> = if s.stratified {
        let mut groups = vec![Vec::new(); m.num_classes()];
        for (i, e) in m.entries.iter().enumerate() {
            groups[e.label_id].push(i);
        }
        groups
    } else {
        vec![(0..m.len()).collect()]
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in groups.into_iter().enumerate() {
        if members.len() < 2 {
            let what = if s.stratified {
                format!("class {:?}", m.class_names[class])
            } else {
                "dataset".to_string()
            };
            return Err(Error::Split(format!(
                "{what} has {} entries, need at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let k = test_count(members.len(), s.test_fraction);
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
