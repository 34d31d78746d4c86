//! One `key=value` record per line:
//!
//! ```text
//! step=40 loss_s=0.31 loss_t=0.12 loss_c=0.004 q_mean=0.62 lr=0.0009
//! ```
//!
//! Evaluation steps append `miou`, `iou`, `teacher_miou` and `teacher_iou`,
//! where `iou` lists per-class values separated by commas and `-` marks an
//! absent class.

use std::fmt::Write as _;

use super::eval::IouReport;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub student: IouReport,
    pub teacher: IouReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed iterations.
    pub step: u64,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_c: f64,
    pub q_mean: f64,
    pub lr: f64,
    pub eval: Option<EvalMetrics>,
}

fn iou_list(r: &IouReport) -> String {
    r.per_class
        .iter()
        .map(|v| v.map_or_else(|| "-".to_string(), |x| x.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_iou_list(s: &str) -> Result<Vec<Option<f64>>> {
    s.split(',')
        .map(|v| if v == "-" { Ok(None) } else { parse_f64("iou", v).map(Some) })
        .collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::InvalidArgument(format!("metrics: bad value `{v}` for `{key}`")))
}

impl MetricsRecord {
    /// The record as one line, without the trailing newline.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} loss_s={} loss_t={} loss_c={} q_mean={} lr={}",
            self.step, self.loss_s, self.loss_t, self.loss_c, self.q_mean, self.lr
        );
        if let Some(e) = &self.eval {
            write!(
                s,
                " miou={} iou={} teacher_miou={} teacher_iou={}",
                e.student.miou,
                iou_list(&e.student),
                e.teacher.miou,
                iou_list(&e.teacher)
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("metrics: malformed field `{tok}`")))?;
            if fields.insert(k, v).is_some() {
                return Err(Error::InvalidArgument(format!("metrics: repeated field `{k}`")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::InvalidArgument(format!("metrics: missing `{k}`")));
        let step = get("step")?.parse().map_err(|_| Error::InvalidArgument("metrics: bad step".into()))?;
        let eval = if fields.contains_key("miou") {
            Some(EvalMetrics {
                student: IouReport { per_class: parse_iou_list(get("iou")?)?, miou: parse_f64("miou", get("miou")?)? },
                teacher: IouReport {
                    per_class: parse_iou_list(get("teacher_iou")?)?,
                    miou: parse_f64("teacher_miou", get("teacher_miou")?)?,
                },
            })
        } else {
            None
        };
        Ok(MetricsRecord {
            step,
            loss_s: parse_f64("loss_s", get("loss_s")?)?,
            loss_t: parse_f64("loss_t", get("loss_t")?)?,
            loss_c: parse_f64("loss_c", get("loss_c")?)?,
            q_mean: parse_f64("q_mean", get("q_mean")?)?,
            lr: parse_f64("lr", get("lr")?)?,
            eval,
        })
    }
}

/// Parses every newline-terminated record in `text`. A trailing line without
/// its newline is a partial write and is skipped.
pub fn parse_stream(text: &str) -> Result<Vec<MetricsRecord>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..i],
        None => return Ok(Vec::new()),
    };
    complete.lines().filter(|l| !l.trim().is_empty()).map(MetricsRecord::parse_line).collect()
}
