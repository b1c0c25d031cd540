//! Scoring quality: ROC curves, AUC, per-attack tables and PC1 fusion of
//! two score sets.
//!
//! Scores are outlier scores: larger means more anomalous. A flow counts as
//! a positive when its label is not benign.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RowId;

/// The pseudo-label covering every non-benign flow.
pub const ALL_ATTACKS: &str = "All Attacks";

pub fn is_benign(label: &str) -> bool {
    label.trim().eq_ignore_ascii_case("benign")
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is empty.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Walk tie groups counting doubled wins to stay in integers.
    let mut wins2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0.total_cmp(&all[i].0).is_eq() {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins2 += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    let pairs = positives.len() as u128 * negatives.len() as u128;
    Some(wins2 as f64 / (2 * pairs) as f64)
}

/// AUC of `scores` where `is_positive` picks the positive class.
pub fn auc_scores<'a, I>(scores: I, is_positive: impl Fn(&str) -> bool) -> Option<f64>
where
    I: IntoIterator<Item = (f64, &'a str)>,
{
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, label) in scores {
        if is_positive(label) {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    auc(&pos, &neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// From (0, 0) at threshold +inf to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoid area under the curve; equals [`auc`] on the same data.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<roc>", e))?;
        Ok(())
    }
}

/// ROC curve flagging everything scoring at least the threshold.
pub fn roc_curve(positives: &[f64], negatives: &[f64]) -> Option<RocCurve> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0.total_cmp(&threshold).is_eq() {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Some(RocCurve { points })
}

/// A scored flow as it appears in a score set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub row_id: RowId,
    pub score: f64,
    pub label: String,
}

/// Attack labels present in `rows`, sorted, followed by [`ALL_ATTACKS`]
/// when at least one attack is present.
pub fn attack_labels(rows: &[ScoreRow]) -> Vec<String> {
    let set: BTreeSet<&str> = rows
        .iter()
        .map(|r| r.label.as_str())
        .filter(|l| !is_benign(l))
        .collect();
    let mut out: Vec<String> = set.into_iter().map(str::to_string).collect();
    if !out.is_empty() {
        out.push(ALL_ATTACKS.to_string());
    }
    out
}

/// One-vs-rest AUC for `attack`: its flows are positives, everything else
/// (benign and other attacks alike) is negative. [`ALL_ATTACKS`] takes
/// every non-benign flow as positive.
pub fn attack_auc(rows: &[ScoreRow], attack: &str) -> Option<f64> {
    let positive = |label: &str| {
        if attack == ALL_ATTACKS {
            !is_benign(label)
        } else {
            label == attack
        }
    };
    auc_scores(rows.iter().map(|r| (r.score, r.label.as_str())), positive)
}

/// AUC per attack label, in [`attack_labels`] order.
pub fn per_attack_eval(rows: &[ScoreRow]) -> Vec<(String, Option<f64>)> {
    attack_labels(rows)
        .into_iter()
        .map(|a| {
            let v = attack_auc(rows, &a);
            (a, v)
        })
        .collect()
}

/// Mean of the defined values; `None` if there are none.
pub fn bootstrap_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// One line of an evaluation table: a score set's AUC for one attack,
/// averaged over replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `lstm`, `frequency` or `pc1`.
    pub model: String,
    pub feature: String,
    /// Empty for models that do not aggregate flows.
    pub rule: String,
    pub attack: String,
    /// [`bootstrap_mean`] of `replica_aucs`.
    pub auc: Option<f64>,
    pub replica_aucs: Vec<Option<f64>>,
    pub positives: usize,
    pub negatives: usize,
}

/// Evaluates the replicas of one score set. Test tokens are the same in
/// every replica, so class counts come from the first.
pub fn evaluate_replicas(model: &str, feature: &str, rule: &str, replicas: &[Vec<ScoreRow>]) -> Vec<EvalRow> {
    let Some(first) = replicas.first() else {
        return Vec::new();
    };
    attack_labels(first)
        .into_iter()
        .map(|attack| {
            let replica_aucs: Vec<Option<f64>> = replicas.iter().map(|r| attack_auc(r, &attack)).collect();
            let positives = first
                .iter()
                .filter(|r| {
                    if attack == ALL_ATTACKS {
                        !is_benign(&r.label)
                    } else {
                        r.label == attack
                    }
                })
                .count();
            EvalRow {
                model: model.into(),
                feature: feature.into(),
                rule: rule.into(),
                auc: bootstrap_mean(&replica_aucs),
                replica_aucs,
                positives,
                negatives: first.len() - positives,
                attack,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

const EVAL_HEADER: [&str; 8] = [
    "model",
    "feature",
    "rule",
    "attack",
    "auc",
    "replica_aucs",
    "positives",
    "negatives",
];

fn fmt_auc(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// AUCs are written with six decimals; a missing AUC is an empty field
    /// and replica AUCs are `;`-separated.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(EVAL_HEADER)?;
        for r in &self.rows {
            let reps: Vec<String> = r.replica_aucs.iter().map(|v| fmt_auc(*v)).collect();
            w.write_record([
                r.model.as_str(),
                &r.feature,
                &r.rule,
                &r.attack,
                &fmt_auc(r.auc),
                &reps.join(";"),
                &r.positives.to_string(),
                &r.negatives.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<eval>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(source);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != EVAL_HEADER.len() {
                return Err(Error::Schema(format!("evaluation row has {} fields", rec.len())));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Schema(format!("bad AUC `{s}` in evaluation table")))
            };
            let count = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Schema(format!("bad count `{s}` in evaluation table")))
            };
            rows.push(EvalRow {
                model: rec[0].to_string(),
                feature: rec[1].to_string(),
                rule: rec[2].to_string(),
                attack: rec[3].to_string(),
                auc: opt(&rec[4])?,
                replica_aucs: rec[5].split(';').map(opt).collect::<Result<_>>()?,
                positives: count(&rec[6])?,
                negatives: count(&rec[7])?,
            });
        }
        Ok(Self { rows })
    }

    /// One table per `feature`: attacks down, rules (or the model name for
    /// unaggregated models) across.
    /// The best value in each attack row is wrapped in `**`.
    pub fn to_text_tables(&self) -> String {
        let mut by_feature: BTreeMap<&str, Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            by_feature.entry(&r.feature).or_default().push(r);
        }
        let mut out = String::new();
        for (feature, rows) in by_feature {
            let mut columns: Vec<String> = Vec::new();
            let mut attacks: Vec<&str> = Vec::new();
            let mut cells: HashMap<(&str, String), Option<f64>> = HashMap::new();
            for r in &rows {
                let col = if r.rule.is_empty() { r.model.clone() } else { r.rule.clone() };
                if !columns.contains(&col) {
                    columns.push(col.clone());
                }
                if !attacks.contains(&r.attack.as_str()) {
                    attacks.push(&r.attack);
                }
                cells.insert((&r.attack, col), r.auc);
            }
            // ALL_ATTACKS last, the rest alphabetical.
            attacks.sort_by_key(|a| (*a == ALL_ATTACKS, *a));

            let mut table: Vec<Vec<String>> = vec![std::iter::once("attack".to_string())
                .chain(columns.iter().cloned())
                .collect()];
            for attack in &attacks {
                let vals: Vec<Option<f64>> = columns
                    .iter()
                    .map(|c| cells.get(&(*attack, c.clone())).copied().flatten())
                    .collect();
                let best = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut line = vec![attack.to_string()];
                for v in vals {
                    line.push(match v {
                        None => "-".into(),
                        Some(x) if format!("{x:.2}") == format!("{best:.2}") => format!("**{x:.2}**"),
                        Some(x) => format!("{x:.2}"),
                    });
                }
                table.push(line);
            }
            let widths: Vec<usize> = (0..table[0].len())
                .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
                .collect();
            let _ = writeln!(out, "feature: {feature}");
            for line in &table {
                let padded: Vec<String> = line
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                    .collect();
                let _ = writeln!(out, "{}", padded.join("  ").trim_end());
            }
            out.push('\n');
        }
        out
    }
}

/// Minimal SVG line plot of several ROC curves.
pub fn roc_svg(curves: &[(String, RocCurve)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let full = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="#bbb" stroke-dasharray="4"/>"##,
        PAD + SIZE,
        PAD + SIZE
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}">false positive rate</text>"#, PAD + SIZE / 2.0 - 50.0, full - 10.0);
    let _ = writeln!(s, r#"<text x="5" y="{}">TPR</text>"#, PAD + SIZE / 2.0);
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", PAD + p.fpr * SIZE, PAD + (1.0 - p.tpr) * SIZE))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{} (AUC {:.3})</text>"#,
            PAD + SIZE * 0.45,
            PAD + SIZE * 0.7 + 14.0 * i as f64,
            xml_escape(name),
            curve.area()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; xs.len()];
    }
    let sd = var.sqrt();
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Unit eigenvector of the largest eigenvalue of `[[a, b], [b, c]]`.
fn top_eigenvector(a: f64, b: f64, c: f64) -> [f64; 2] {
    if b == 0.0 {
        return if a >= c { [1.0, 0.0] } else { [0.0, 1.0] };
    }
    let lambda = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
    // (A - lambda I) v = 0 -> v = (b, lambda - a) or (lambda - c, b).
    let v = if (lambda - a).abs() >= (lambda - c).abs() {
        [b, lambda - a]
    } else {
        [lambda - c, b]
    };
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / norm, v[1] / norm]
}

/// Fuses two score sets into their first principal component.
///
/// Rows are joined on `row_id` (rows missing from either side are dropped
/// and their number logged), each score column is standardised, and the
/// projection onto the top eigenvector of the 2x2 covariance becomes the
/// new score. The sign is chosen so the result increases with the sum of
/// the standardised inputs; with zero correlation the first nonzero
/// component of the eigenvector is made positive.
pub fn pc1_combine(a: &[ScoreRow], b: &[ScoreRow]) -> Result<Vec<ScoreRow>> {
    let right: HashMap<RowId, &ScoreRow> = b.iter().map(|r| (r.row_id, r)).collect();
    let joined: Vec<(&ScoreRow, &ScoreRow)> = a
        .iter()
        .filter_map(|l| right.get(&l.row_id).map(|r| (l, *r)))
        .collect();
    let dropped = a.len() + b.len() - 2 * joined.len();
    if dropped > 0 {
        log::warn!("pc1: {dropped} rows without a partner were dropped");
    }
    if joined.len() < 2 {
        return Err(Error::InsufficientData {
            what: "jointly scored rows for PC1",
            needed: 2,
            got: joined.len(),
        });
    }
    let za = standardize(&joined.iter().map(|(l, _)| l.score).collect::<Vec<_>>());
    let zb = standardize(&joined.iter().map(|(_, r)| r.score).collect::<Vec<_>>());
    let n = joined.len() as f64;
    let caa = za.iter().map(|x| x * x).sum::<f64>() / n;
    let cbb = zb.iter().map(|x| x * x).sum::<f64>() / n;
    let cab = za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / n;
    let mut v = top_eigenvector(caa, cab, cbb);
    let proj: Vec<f64> = za.iter().zip(&zb).map(|(x, y)| v[0] * x + v[1] * y).collect();
    let corr: f64 = proj.iter().zip(za.iter().zip(&zb)).map(|(p, (x, y))| p * (x + y)).sum();
    let flip = if corr != 0.0 {
        corr < 0.0
    } else {
        v.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
    };
    if flip {
        v = [-v[0], -v[1]];
    }
    if a.iter().any(|l| right.get(&l.row_id).is_some_and(|r| r.label != l.label)) {
        return Err(Error::Schema("score sets disagree on a row's label".into()));
    }
    Ok(joined
        .iter()
        .zip(za.iter().zip(&zb))
        .map(|((l, _), (x, y))| ScoreRow {
            row_id: l.row_id,
            score: v[0] * x + v[1] * y,
            label: l.label.clone(),
        })
        .collect())
}
