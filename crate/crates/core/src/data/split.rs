use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// How trials are divided into training and test folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitPlan {
    /// One fold. Without `train_subjects`, every other subject trains.
    Fixed {
        test_subjects: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subjects: Option<Vec<String>>,
    },
    /// One fold per subject.
    Loso {},
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn load_split_plan(path: &Path) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn make_splits(dataset: &Dataset, plan: &SplitPlan) -> Result<Vec<Fold>> {
    let subjects = dataset.subjects();
    let indices_of = |subs: &[String]| -> Vec<usize> {
        (0..dataset.trials.len())
            .filter(|&i| subs.contains(&dataset.trials[i].sequence.subject_id))
            .collect()
    };
    let folds = match plan {
        SplitPlan::Loso {} => subjects
            .iter()
            .map(|s| {
                let test = indices_of(std::slice::from_ref(s));
                let train = (0..dataset.trials.len()).filter(|i| !test.contains(i)).collect();
                Fold {
                    name: format!("loso-{s}"),
                    train,
                    test,
                }
            })
            .collect(),
        SplitPlan::Fixed {
            test_subjects,
            train_subjects,
        } => {
            for s in test_subjects.iter().chain(train_subjects.iter().flatten()) {
                if !subjects.contains(s) {
                    return Err(Error::Config(format!("split names unknown subject '{s}'")));
                }
            }
            let train_subs: Vec<String> = match train_subjects {
                Some(t) => {
                    if let Some(s) = t.iter().find(|s| test_subjects.contains(s)) {
                        return Err(Error::Config(format!("subject '{s}' is in both train and test")));
                    }
                    t.clone()
                }
                None => subjects.iter().filter(|s| !test_subjects.contains(s)).cloned().collect(),
            };
            vec![Fold {
                name: "fixed".into(),
                train: indices_of(&train_subs),
                test: indices_of(test_subjects),
            }]
        }
    };
    for f in &folds {
        if f.train.is_empty() || f.test.is_empty() {
            return Err(Error::Config(format!("fold {} has an empty partition", f.name)));
        }
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn dataset(subjects: usize, sequences: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            subjects,
            sequences,
            min_len: 20,
            max_len: 30,
            min_segment: 5,
            max_segment: 10,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn loso_covers_every_trial_once() {
        let ds = dataset(5, 13);
        let folds = make_splits(&ds, &SplitPlan::Loso {}).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![0; 13];
        for f in &folds {
            let subj = &ds.trials[f.test[0]].sequence.subject_id;
            let per_subject = ds.trials.iter().filter(|t| &t.sequence.subject_id == subj).count();
            assert_eq!(f.test.len(), per_subject);
            for &i in &f.test {
                seen[i] += 1;
                assert!(!f.train.contains(&i));
            }
            assert_eq!(f.train.len() + f.test.len(), 13);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn fixed_split_is_disjoint() {
        let ds = dataset(6, 12);
        let plan = SplitPlan::Fixed {
            test_subjects: vec!["s1".into(), "s2".into(), "s3".into(), "s4".into()],
            train_subjects: None,
        };
        let folds = make_splits(&ds, &plan).unwrap();
        assert_eq!(folds.len(), 1);
        for &i in &folds[0].train {
            assert!(!folds[0].test.contains(&i));
        }
    }

    #[test]
    fn overlapping_subjects_are_rejected() {
        let ds = dataset(3, 6);
        let plan = SplitPlan::Fixed {
            test_subjects: vec!["s1".into()],
            train_subjects: Some(vec!["s0".into(), "s1".into()]),
        };
        assert!(matches!(make_splits(&ds, &plan), Err(Error::Config(_))));
    }

    #[test]
    fn plans_parse_from_toml() {
        let p: SplitPlan = toml::from_str("mode = \"fixed\"\ntest_subjects = [\"s1\"]\n").unwrap();
        assert!(matches!(p, SplitPlan::Fixed { .. }));
        let p: SplitPlan = toml::from_str("mode = \"loso\"\n").unwrap();
        assert_eq!(p, SplitPlan::Loso {});
        assert!(toml::from_str::<SplitPlan>("mode = \"loso\"\nextra = 1\n").is_err());
    }
}
