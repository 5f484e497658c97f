//! Competition submission files.
//!
//! ```text
//! VideoId,LabelConfidencePairs
//! vid1,7 0.987654 3 0.500000 ...
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use chainstack::metrics::{ranked_labels, PredictionMatrix};

use crate::CliError;

pub const SUBMISSION_HEADER: &str = "VideoId,LabelConfidencePairs";

/// Renders the top `top_k` labels per video, highest confidence first and
/// lowest label first among ties.
pub fn render_submission(pred: &PredictionMatrix, video_ids: &[String], top_k: usize) -> Result<String, CliError> {
    if video_ids.len() != pred.rows() {
        return Err(CliError::Invalid(format!("{} video ids for {} prediction rows", video_ids.len(), pred.rows())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = video_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CliError::Invalid(format!("duplicate video id `{dup}`")));
    }
    if let Some(bad) = video_ids.iter().find(|id| id.is_empty() || id.contains([',', '\n', '\r'])) {
        return Err(CliError::Invalid(format!("video id `{bad}` cannot be written to a submission")));
    }
    let mut out = String::with_capacity(pred.rows() * top_k * 12);
    out.push_str(SUBMISSION_HEADER);
    out.push('\n');
    for (i, id) in video_ids.iter().enumerate() {
        let row = pred.row(i);
        out.push_str(id);
        out.push(',');
        for (r, l) in ranked_labels(row).into_iter().take(top_k).enumerate() {
            if r > 0 {
                out.push(' ');
            }
            write!(out, "{l} {:.6}", row[l]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_submission(
    pred: &PredictionMatrix,
    video_ids: &[String],
    top_k: usize,
    path: &std::path::Path,
) -> Result<(), CliError> {
    let text = render_submission(pred, video_ids, top_k)?;
    crate::checkpoint_io::write_atomic(path, text.as_bytes())
}

/// One parsed submission row.
#[derive(Clone, Debug, PartialEq)]
pub struct SubmissionRow {
    pub video_id: String,
    pub pairs: Vec<(usize, f64)>,
}

pub fn parse_submission(text: &str) -> Result<Vec<SubmissionRow>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(SUBMISSION_HEADER) {
        return Err(CliError::Invalid(format!("submission must start with `{SUBMISSION_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |why: &str| CliError::Invalid(format!("submission line {}: {why}", i + 2));
            let (id, rest) = line.split_once(',').ok_or_else(|| bad("missing comma"))?;
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() % 2 != 0 {
                return Err(bad("odd number of label/confidence fields"));
            }
            let pairs = fields
                .chunks(2)
                .map(|p| Ok((p[0].parse().map_err(|_| bad("bad label"))?, p[1].parse().map_err(|_| bad("bad confidence"))?)))
                .collect::<Result<_, CliError>>()?;
            Ok(SubmissionRow { video_id: id.to_string(), pairs })
        })
        .collect()
}
