//! Skeleton sequences, label sequences and their on-disk formats.
//!
//! Text sequence format:
//!
//! ```text
//! msgcn-sequence 1
//! T=<samples>
//! N=<nodes>
//! C=<channels>
//! sample_rate=<Hz>
//! subject=<id>
//! trial=<id>
//! classes=<name>,<name>,...
//! ---
//! <N·C comma-separated values, node-major>   (T lines)
//! ```
//!
//! Labels live in a parallel file (same stem, `.labels` extension) with one
//! integer class id per line.

mod import;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use import::{import_csv, load_recipe, ChannelKind, ImportRecipe};
pub use split::{load_split_plan, make_splits, Fold, SplitPlan};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::container;
use crate::error::{Error, Result};
use crate::graph::{layout_to_toml, load_layout, GraphLayout};
use crate::tensor::Tensor;

const TEXT_MAGIC: &str = "msgcn-sequence 1";
pub const SEQUENCE_MAGIC: &[u8; 8] = b"MSGCNSEQ";

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    /// `[T, N, C]`
    pub values: Tensor,
    pub sample_rate: f64,
    pub subject_id: String,
    pub trial_id: String,
    pub class_names: Vec<String>,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.ndim() != 3 {
            return Err(Error::Data(format!("sequence must be [T, N, C], got {:?}", self.values.shape())));
        }
        if !self.values.all_finite() {
            return Err(Error::Data(format!("sequence {} contains non-finite values", self.trial_id)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Data(format!("invalid sample rate {}", self.sample_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub labels: Vec<usize>,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One recorded trial with its per-sample labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub sequence: SkeletonSequence,
    pub labels: LabelSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: GraphLayout,
    pub class_names: Vec<String>,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.trials.first().map_or(0, |t| t.sequence.channels())
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.sequence.subject_id) {
                out.push(t.sequence.subject_id.clone());
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            layout: self.layout.clone(),
            class_names: self.class_names.clone(),
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
        }
    }
}

pub fn labels_path_for(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

pub fn sequence_to_text(seq: &SkeletonSequence) -> String {
    let [t, n, c] = [seq.len(), seq.num_nodes(), seq.channels()];
    let mut out = format!(
        "{TEXT_MAGIC}\nT={t}\nN={n}\nC={c}\nsample_rate={}\nsubject={}\ntrial={}\nclasses={}\n---\n",
        seq.sample_rate,
        seq.subject_id,
        seq.trial_id,
        seq.class_names.join(",")
    );
    for row in seq.values.data().chunks(n * c) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn labels_to_text(labels: &LabelSequence) -> String {
    labels.labels.iter().map(|l| format!("{l}\n")).collect()
}

fn header_value<'a>(path: &Path, line_no: usize, line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::parse(path, line_no, format!("missing header field {key}")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::parse(path, line_no, format!("expected {key}=..., found '{line}'")))
}

fn header_usize(path: &Path, line_no: usize, line: Option<&str>, key: &str) -> Result<usize> {
    let v = header_value(path, line_no, line, key)?;
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::parse(path, line_no, format!("{key} must be a positive integer, got '{v}'"))),
    }
}

/// Parse the text sequence format. `path` only labels error messages.
pub fn parse_sequence(path: &Path, text: &str) -> Result<SkeletonSequence> {
    let mut lines = text.lines();
    if lines.next() != Some(TEXT_MAGIC) {
        return Err(Error::parse(path, 1, format!("expected '{TEXT_MAGIC}'")));
    }
    let t = header_usize(path, 2, lines.next(), "T")?;
    let n = header_usize(path, 3, lines.next(), "N")?;
    let c = header_usize(path, 4, lines.next(), "C")?;
    let rate_text = header_value(path, 5, lines.next(), "sample_rate")?;
    let sample_rate: f64 = rate_text
        .parse()
        .ok()
        .filter(|r: &f64| *r > 0.0 && r.is_finite())
        .ok_or_else(|| Error::parse(path, 5, format!("invalid sample rate '{rate_text}'")))?;
    let subject_id = header_value(path, 6, lines.next(), "subject")?.to_string();
    let trial_id = header_value(path, 7, lines.next(), "trial")?.to_string();
    let classes = header_value(path, 8, lines.next(), "classes")?;
    let class_names: Vec<String> = if classes.is_empty() {
        Vec::new()
    } else {
        classes.split(',').map(str::to_string).collect()
    };
    if lines.next() != Some("---") {
        return Err(Error::parse(path, 9, "expected '---' after header"));
    }
    let width = n * c;
    let mut data = Vec::with_capacity(t * width);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let line_no = 10 + i;
        if line.is_empty() {
            continue;
        }
        rows += 1;
        if rows > t {
            return Err(Error::parse(path, line_no, format!("more than T={t} data rows")));
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("invalid number '{field}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line_no, format!("non-finite value '{field}'")));
            }
            data.push(v);
        }
        if data.len() - before != width {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {width} values, found {}", data.len() - before),
            ));
        }
    }
    if rows != t {
        return Err(Error::parse(path, 10 + rows, format!("expected T={t} data rows, found {rows}")));
    }
    Ok(SkeletonSequence {
        values: Tensor::new(&[t, n, c], data)?,
        sample_rate,
        subject_id,
        trial_id,
        class_names,
    })
}

/// Parse a label file; ids must be below `num_classes`.
pub fn parse_labels(path: &Path, text: &str, num_classes: usize) -> Result<LabelSequence> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: usize = line
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid class id '{line}'")))?;
        if l >= num_classes {
            return Err(Error::parse(
                path,
                i + 1,
                format!("class id {l} outside the {num_classes} declared classes"),
            ));
        }
        labels.push(l);
    }
    Ok(LabelSequence { labels })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_alignment(path: &Path, seq: &SkeletonSequence, labels: &LabelSequence) -> Result<()> {
    if labels.len() != seq.len() {
        return Err(Error::parse(
            path,
            labels.len() + 1,
            format!("sequence has T={} samples but {} labels", seq.len(), labels.len()),
        ));
    }
    Ok(())
}

/// Write `path` and its `.labels` companion.
pub fn save_sequence(path: &Path, seq: &SkeletonSequence, labels: &LabelSequence) -> Result<()> {
    write_text(path, &sequence_to_text(seq))?;
    write_text(&labels_path_for(path), &labels_to_text(labels))
}

pub fn load_sequence(path: &Path) -> Result<(SkeletonSequence, LabelSequence)> {
    let seq = parse_sequence(path, &read_text(path)?)?;
    let lpath = labels_path_for(path);
    let labels = parse_labels(&lpath, &read_text(&lpath)?, seq.class_names.len())?;
    check_alignment(&lpath, &seq, &labels)?;
    Ok((seq, labels))
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    sample_rate: f64,
    subject: String,
    trial: String,
    classes: Vec<String>,
}

pub fn sequence_to_bytes(seq: &SkeletonSequence, labels: &LabelSequence) -> Vec<u8> {
    let header = BinaryHeader {
        sample_rate: seq.sample_rate,
        subject: seq.subject_id.clone(),
        trial: seq.trial_id.clone(),
        classes: seq.class_names.clone(),
    };
    let label_tensor = Tensor::new(&[labels.len().max(1)], {
        let mut v: Vec<f64> = labels.labels.iter().map(|&l| l as f64).collect();
        if v.is_empty() {
            v.push(-1.0);
        }
        v
    })
    .expect("label length matches");
    container::encode(
        SEQUENCE_MAGIC,
        &serde_json::to_string(&header).expect("header serializes"),
        &[("values".into(), seq.values.clone()), ("labels".into(), label_tensor)],
    )
}

pub fn sequence_from_bytes(path: &Path, bytes: &[u8]) -> Result<(SkeletonSequence, LabelSequence)> {
    let c = container::decode(SEQUENCE_MAGIC, bytes)?;
    let h: BinaryHeader = serde_json::from_str(&c.header).map_err(|e| Error::Format(e.to_string()))?;
    let mut values = None;
    let mut labels = None;
    for (name, t) in c.tensors {
        match name.as_str() {
            "values" if t.ndim() == 3 => values = Some(t),
            "labels" => labels = Some(t),
            _ => return Err(Error::Format(format!("unexpected tensor {name}"))),
        }
    }
    let values = values.ok_or_else(|| Error::Format("missing values tensor".into()))?;
    let raw = labels.ok_or_else(|| Error::Format("missing labels tensor".into()))?;
    let labels = LabelSequence {
        labels: raw
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < h.classes.len() {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("invalid class id {v}")))
                }
            })
            .collect::<Result<_>>()?,
    };
    let seq = SkeletonSequence {
        values,
        sample_rate: h.sample_rate,
        subject_id: h.subject,
        trial_id: h.trial,
        class_names: h.classes,
    };
    seq.validate()?;
    check_alignment(path, &seq, &labels)?;
    Ok((seq, labels))
}

pub fn save_sequence_binary(path: &Path, seq: &SkeletonSequence, labels: &LabelSequence) -> Result<()> {
    std::fs::write(path, sequence_to_bytes(seq, labels)).map_err(|e| Error::io(path, e))
}

pub fn load_sequence_binary(path: &Path) -> Result<(SkeletonSequence, LabelSequence)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    sequence_from_bytes(path, &bytes)
}

/// Write a dataset directory: `layout.toml` plus one `.seq`/`.labels` pair
/// per trial.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("layout.toml"), &layout_to_toml(&dataset.layout))?;
    let mut paths = Vec::new();
    for (i, t) in dataset.trials.iter().enumerate() {
        let path = dir.join(format!("{i:04}_{}_{}.seq", t.sequence.subject_id, t.sequence.trial_id));
        save_sequence(&path, &t.sequence, &t.labels)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let layout = load_layout(&dir.join("layout.toml"))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "seq"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .seq files in {}", dir.display())));
    }
    let mut trials = Vec::new();
    let mut class_names: Option<Vec<String>> = None;
    for f in files {
        let (sequence, labels) = load_sequence(&f)?;
        if sequence.num_nodes() != layout.num_nodes {
            return Err(Error::Data(format!(
                "{} has {} nodes but the layout has {}",
                f.display(),
                sequence.num_nodes(),
                layout.num_nodes
            )));
        }
        match &class_names {
            None => class_names = Some(sequence.class_names.clone()),
            Some(c) if *c != sequence.class_names => {
                return Err(Error::Data(format!("{} declares a different class table", f.display())));
            }
            Some(_) => {}
        }
        trials.push(Trial { sequence, labels });
    }
    Ok(Dataset {
        layout,
        class_names: class_names.unwrap_or_default(),
        trials,
    })
}

/// Displacement (channels 0..3) and root-relative position (channels 3..6)
/// from `[T, N, 3]` joint positions.
pub fn compute_features(positions: &Tensor, layout: &GraphLayout) -> Result<Tensor> {
    let shape = positions.shape();
    if shape.len() != 3 || shape[2] != 3 || shape[1] != layout.num_nodes {
        return Err(Error::Dimension {
            op: "compute_features",
            left: shape.to_vec(),
            right: vec![0, layout.num_nodes, 3],
        });
    }
    let (t_len, n) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(&[t_len, n, 6]);
    for t in 0..t_len {
        for j in 0..n {
            for a in 0..3 {
                let x = positions.at(&[t, j, a]);
                if t > 0 {
                    out.set(&[t, j, a], x - positions.at(&[t - 1, j, a]));
                }
                out.set(&[t, j, 3 + a], x - positions.at(&[t, layout.root, a]));
            }
        }
    }
    Ok(out)
}

/// Integer decimation to `target_rate`; labels use the same stride.
pub fn resample(seq: &SkeletonSequence, labels: &LabelSequence, target_rate: f64) -> Result<(SkeletonSequence, LabelSequence)> {
    let ratio = seq.sample_rate / target_rate;
    let stride = ratio.round();
    if !(target_rate > 0.0) || stride < 1.0 || (ratio - stride).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "unsupported resampling {} Hz -> {} Hz: only integer decimation is supported",
            seq.sample_rate, target_rate
        )));
    }
    let stride = stride as usize;
    let [t, n, c] = [seq.len(), seq.num_nodes(), seq.channels()];
    let keep: Vec<usize> = (0..t).step_by(stride).collect();
    let width = n * c;
    let mut data = Vec::with_capacity(keep.len() * width);
    for &i in &keep {
        data.extend_from_slice(&seq.values.data()[i * width..(i + 1) * width]);
    }
    let out = SkeletonSequence {
        values: Tensor::new(&[keep.len(), n, c], data)?,
        sample_rate: target_rate,
        ..seq.clone()
    };
    let lab = LabelSequence {
        labels: keep.iter().filter_map(|&i| labels.labels.get(i).copied()).collect(),
    };
    Ok((out, lab))
}
