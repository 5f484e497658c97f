//! File-name based dataset partition.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train1,
    Validate1,
    Train2,
    Validate2,
    Test,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::Train1, Part::Validate1, Part::Train2, Part::Validate2, Part::Test];

    pub fn name(self) -> &'static str {
        match self {
            Part::Train1 => "train1",
            Part::Validate1 => "validate1",
            Part::Train2 => "train2",
            Part::Validate2 => "validate2",
            Part::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub part: Part,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    /// One entry per part, in `Part::ALL` order.
    pub parts: Vec<DatasetSplit>,
    /// Names that matched no rule.
    pub rejects: Vec<String>,
}

impl SplitReport {
    pub fn files(&self, part: Part) -> &[String] {
        &self.parts.iter().find(|s| s.part == part).expect("every part present").files
    }
}

/// `prefix` followed by exactly two characters and a `.` extension.
fn two_after<'a>(name: &'a str, prefix: &str) -> Option<[char; 2]> {
    let rest = name.strip_prefix(prefix)?;
    let (stem, ext) = rest.split_once('.')?;
    if ext.is_empty() {
        return None;
    }
    let mut chars = stem.chars();
    let pair = [chars.next()?, chars.next()?];
    chars.next().is_none().then_some(pair)
}

/// Classifies a single base name (directories are ignored).
pub fn classify(file: &str) -> Option<Part> {
    let name = file.rsplit(['/', '\\']).next().unwrap_or(file);
    if two_after(name, "train").is_some() {
        return Some(Part::Train1);
    }
    if two_after(name, "test").is_some() {
        return Some(Part::Test);
    }
    let [c, _] = two_after(name, "validate")?;
    Some(match c {
        'a' => Part::Validate1,
        '0'..='9' => Part::Validate2,
        _ => Part::Train2,
    })
}

/// Assigns every name to exactly one part, or to the rejects list.
/// Input order is preserved within each part.
pub fn split_files<S: AsRef<str>>(files: &[S]) -> SplitReport {
    let mut parts: Vec<DatasetSplit> = Part::ALL.iter().map(|&part| DatasetSplit { part, files: Vec::new() }).collect();
    let mut rejects = Vec::new();
    for f in files {
        let f = f.as_ref();
        match classify(f) {
            Some(p) => parts[p as usize].files.push(f.to_string()),
            None => rejects.push(f.to_string()),
        }
    }
    SplitReport { parts, rejects }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rules() {
        assert_eq!(classify("validateaK.tfrecord"), Some(Part::Validate1));
        assert_eq!(classify("validate7Q.tfrecord"), Some(Part::Validate2));
        assert_eq!(classify("trainAB.tfrecord"), Some(Part::Train1));
        assert_eq!(classify("validateb3.tfrecord"), Some(Part::Train2));
        assert_eq!(classify("validateZ0.tfrecord"), Some(Part::Train2));
        assert_eq!(classify("test0x.tfrecord"), Some(Part::Test));
        assert_eq!(classify("data/shards/train12.tfrecord"), Some(Part::Train1));
    }

    #[test]
    fn non_matching_names_rejected() {
        for bad in ["train1.tfrecord", "train123.tfrecord", "validate.tfrecord", "trainab", "readme.txt", "validatea"] {
            assert_eq!(classify(bad), None, "{bad}");
        }
        let r = split_files(&["train00.tfrecord", "notes.md"]);
        assert_eq!(r.rejects, vec!["notes.md".to_string()]);
        assert_eq!(r.files(Part::Train1), ["train00.tfrecord".to_string()]);
    }
}
