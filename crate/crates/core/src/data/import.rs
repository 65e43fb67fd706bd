use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{compute_features, resample, Dataset, LabelSequence, SkeletonSequence, Trial};
use crate::error::{Error, Result};
use crate::graph::resolve_layout;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// Three position columns per node, converted to displacement and
    /// root-relative features.
    Positions,
    /// Columns are used as-is.
    Features,
}

/// Column map from a CSV export into sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportRecipe {
    /// Preset name or path to a layout file.
    pub layout: String,
    pub sample_rate: f64,
    #[serde(default)]
    pub target_rate: Option<f64>,
    pub kind: ChannelKind,
    pub label_column: String,
    /// Class names in id order; label cells must match one of them.
    pub classes: Vec<String>,
    #[serde(default)]
    pub subject_column: Option<String>,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub trial_column: Option<String>,
    /// Per node, the columns holding its channels.
    pub nodes: Vec<Vec<String>>,
}

pub fn load_recipe(path: &Path) -> Result<ImportRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Convert one CSV file into a dataset. Rows sharing a (subject, trial) key
/// form one sequence, in file order.
pub fn import_csv(csv_path: &Path, recipe: &ImportRecipe) -> Result<Dataset> {
    let layout = resolve_layout(&recipe.layout)?;
    if recipe.nodes.len() != layout.num_nodes {
        return Err(Error::Config(format!(
            "recipe maps {} nodes but layout has {}",
            recipe.nodes.len(),
            layout.num_nodes
        )));
    }
    let channels = recipe.nodes[0].len();
    if channels == 0 || recipe.nodes.iter().any(|n| n.len() != channels) {
        return Err(Error::Config("every node needs the same positive number of columns".into()));
    }
    if recipe.kind == ChannelKind::Positions && channels != 3 {
        return Err(Error::Config("position imports need exactly 3 columns per node".into()));
    }

    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(csv_path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(csv_path, 1, format!("missing column '{name}'")))
    };
    let value_cols: Vec<usize> = recipe.nodes.iter().flatten().map(|c| col(c)).collect::<Result<_>>()?;
    let label_col = col(&recipe.label_column)?;
    let subject_col = recipe.subject_column.as_deref().map(col).transpose()?;
    let trial_col = recipe.trial_column.as_deref().map(col).transpose()?;

    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), (Vec<f64>, Vec<usize>)> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(csv_path, line, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let subject = match subject_col {
            Some(c) => field(c).to_string(),
            None => recipe.subject.clone().unwrap_or_else(|| "s0".into()),
        };
        let trial = trial_col.map_or_else(|| "t0".to_string(), |c| field(c).to_string());
        let key = (subject, trial);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        let (vals, labels) = groups.entry(key).or_default();
        for &c in &value_cols {
            let v: f64 = field(c)
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::parse(csv_path, line, format!("invalid number '{}'", field(c))))?;
            vals.push(v);
        }
        let name = field(label_col).trim();
        let l = recipe
            .classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::parse(csv_path, line, format!("unknown class '{name}'")))?;
        labels.push(l);
    }

    let mut trials = Vec::new();
    for key in order {
        let (vals, labels) = groups.remove(&key).expect("grouped");
        let t = labels.len();
        let mut sequence = SkeletonSequence {
            values: Tensor::new(&[t, layout.num_nodes, channels], vals)?,
            sample_rate: recipe.sample_rate,
            subject_id: key.0,
            trial_id: key.1,
            class_names: recipe.classes.clone(),
        };
        let mut labels = LabelSequence { labels };
        if let Some(target) = recipe.target_rate {
            (sequence, labels) = resample(&sequence, &labels, target)?;
        }
        if recipe.kind == ChannelKind::Positions {
            sequence.values = compute_features(&sequence.values, &layout)?;
        }
        trials.push(Trial { sequence, labels });
    }
    if trials.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", csv_path.display())));
    }
    Ok(Dataset {
        layout,
        class_names: recipe.classes.clone(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const RECIPE: &str = r#"
layout = "fog-gait"
sample_rate = 100.0
target_rate = 50.0
kind = "positions"
label_column = "activity"
classes = ["walk", "turn"]
subject_column = "subject"
trial_column = "trial"
nodes = [
  ["n0x", "n0y", "n0z"], ["n1x", "n1y", "n1z"], ["n2x", "n2y", "n2z"],
  ["n3x", "n3y", "n3z"], ["n4x", "n4y", "n4z"], ["n5x", "n5y", "n5z"],
  ["n6x", "n6y", "n6z"], ["n7x", "n7y", "n7z"], ["n8x", "n8y", "n8z"],
]
"#;

    fn csv_text(rows: usize) -> String {
        let mut header = vec!["subject".to_string(), "trial".into(), "activity".into()];
        for n in 0..9 {
            for a in ["x", "y", "z"] {
                header.push(format!("n{n}{a}"));
            }
        }
        let mut out = header.join(",") + "\n";
        for r in 0..rows {
            let trial = if r < rows / 2 { "a" } else { "b" };
            let label = if r % 4 < 2 { "walk" } else { "turn" };
            let mut row = vec!["p1".to_string(), trial.into(), label.into()];
            for k in 0..27 {
                row.push(format!("{}", r as f64 * 0.1 + k as f64));
            }
            out += &(row.join(",") + "\n");
        }
        out
    }

    #[test]
    fn imports_and_decimates_grouped_trials() {
        let recipe: ImportRecipe = toml::from_str(RECIPE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.csv");
        std::fs::write(&path, csv_text(8)).unwrap();
        let ds = import_csv(&path, &recipe).unwrap();
        assert_eq!(ds.trials.len(), 2);
        let t = &ds.trials[0];
        assert_eq!(t.sequence.values.shape(), &[2, 9, 6]);
        assert_eq!(t.sequence.sample_rate, 50.0);
        assert_eq!(t.labels.labels, vec![0, 1]);
        // features are computed after decimation, so displacement spans two raw rows
        assert!((t.sequence.values.at(&[1, 0, 0]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn unknown_label_reports_line() {
        let recipe: ImportRecipe = toml::from_str(RECIPE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.csv");
        std::fs::write(&path, csv_text(4).replace("turn", "sit")).unwrap();
        match import_csv(&path, &recipe) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recipe_rejects_unknown_keys() {
        let bad = format!("{RECIPE}\nbogus = 1\n");
        assert!(toml::from_str::<ImportRecipe>(&bad).is_err());
    }
}
