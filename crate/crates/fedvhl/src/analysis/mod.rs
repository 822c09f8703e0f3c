//! Margin / transport analysis: statistical margins over an explicit
//! violating-candidate set, exact per-class W1 via optimal assignment, the
//! margin-difference inequality they satisfy, and feature export.

mod assignment;

pub use assignment::min_cost_assignment;

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{forward, MlpSpec, ModelParams};
use crate::seeding::{rng_for, Role};

/// Ground metric for margins and transport costs. The scale factor exists so
/// the alpha-homogeneity of both quantities is testable without moving the
/// points (which would also move classifier decisions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Euclidean { scale: f64 },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Euclidean { scale: 1.0 }
    }
}

impl Metric {
    fn validate(&self) -> Result<()> {
        let Metric::Euclidean { scale } = self;
        if !(*scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput("metric scale must be positive".into()));
        }
        Ok(())
    }

    pub fn distance(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        let Metric::Euclidean { scale } = self;
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
        }
        scale * acc.sqrt()
    }
}

/// Finite labeled point set with uniform weight inside each class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDist {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmpiricalDist {
    pub fn new(points: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidInput("empirical distribution needs at least one point".into()));
        }
        if points.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                site: "empirical distribution".into(),
                expected: format!("{} labels", points.nrows()),
                actual: format!("{}", labels.len()),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("points must be finite".into()));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    /// Always false: construction requires at least one point.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<usize> {
        let mut ls = self.labels.clone();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    pub fn class_rows(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub margin: f64,
    pub per_sample: Vec<f64>,
    pub candidate_count: usize,
}

/// Mean distance from each sample to the nearest candidate the classifier
/// labels differently from the sample's own label.
pub fn statistical_margin<F>(
    classifier: F,
    dist: &EmpiricalDist,
    candidates: ArrayView2<f64>,
    metric: Metric,
) -> Result<MarginReport>
where
    F: Fn(ArrayView1<f64>) -> usize,
{
    metric.validate()?;
    if candidates.ncols() != dist.dim() {
        return Err(Error::ShapeMismatch {
            site: "violating candidates".into(),
            expected: format!("{} columns", dist.dim()),
            actual: format!("{} columns", candidates.ncols()),
        });
    }
    let candidate_labels: Vec<usize> = candidates
        .axis_iter(Axis(0))
        .map(|row| classifier(row))
        .collect();
    for &label in &dist.label_set() {
        if !candidate_labels.iter().any(|&c| c != label) {
            return Err(Error::MarginUndefined { label });
        }
    }
    let mut per_sample = Vec::with_capacity(dist.len());
    for i in 0..dist.len() {
        let y = dist.labels[i];
        let x = dist.points.row(i);
        let mut best = f64::INFINITY;
        for (j, cand) in candidates.axis_iter(Axis(0)).enumerate() {
            if candidate_labels[j] != y {
                let d = metric.distance(x, cand);
                if d < best {
                    best = d;
                }
            }
        }
        per_sample.push(best);
    }
    let margin = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(MarginReport {
        margin,
        per_sample,
        candidate_count: candidates.nrows(),
    })
}

/// How many points the exact per-class solver accepts.
pub const MAX_CLASS_SUPPORT: usize = 10;

/// Label-conditional W1 between two equally-sized uniform empirical
/// distributions, averaged over the shared label marginal. Per class this is
/// a minimum-cost perfect matching, which is exact for uniform weights.
pub fn conditional_wasserstein(p: &EmpiricalDist, pv: &EmpiricalDist, metric: Metric) -> Result<f64> {
    metric.validate()?;
    if p.dim() != pv.dim() {
        return Err(Error::UnsupportedInstance(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            pv.dim()
        )));
    }
    let labels = p.label_set();
    if labels != pv.label_set() {
        return Err(Error::UnsupportedInstance("label sets differ".into()));
    }
    let total = p.len() as f64;
    let mut out = 0.0;
    for &y in &labels {
        let rows_p = p.class_rows(y);
        let rows_v = pv.class_rows(y);
        if rows_p.len() != rows_v.len() {
            return Err(Error::UnsupportedInstance(format!(
                "class {y} has {} points in one distribution and {} in the other",
                rows_p.len(),
                rows_v.len()
            )));
        }
        let n = rows_p.len();
        if n > MAX_CLASS_SUPPORT {
            return Err(Error::UnsupportedInstance(format!(
                "class {y} has {n} points; the exact solver is bounded at {MAX_CLASS_SUPPORT}"
            )));
        }
        let cost = Array2::from_shape_fn((n, n), |(i, j)| {
            metric.distance(p.points.row(rows_p[i]), pv.points.row(rows_v[j]))
        });
        let (_, matched) = min_cost_assignment(&cost)?;
        // Uniform weights 1/n per point; marginal weight n/total.
        out += (rows_p.len() as f64 / total) * (matched / n as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub margin_p: f64,
    pub margin_pv: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub const LEMMA1_SLACK: f64 = 1e-9;

/// Checks |SM(f, P) - SM(f, Pv)| <= E_y W1(P(.|y), Pv(.|y)) with both margins
/// taken over the same violating-candidate set.
pub fn lemma1_check<F>(
    classifier: F,
    p: &EmpiricalDist,
    pv: &EmpiricalDist,
    candidates: ArrayView2<f64>,
    metric: Metric,
) -> Result<Lemma1Report>
where
    F: Fn(ArrayView1<f64>) -> usize,
{
    let report_p = statistical_margin(&classifier, p, candidates, metric)?;
    let report_pv = statistical_margin(&classifier, pv, candidates, metric)?;
    let rhs = conditional_wasserstein(p, pv, metric)?;
    let lhs = (report_p.margin - report_pv.margin).abs();
    Ok(Lemma1Report {
        margin_p: report_p.margin,
        margin_pv: report_pv.margin,
        lhs,
        rhs,
        holds: lhs <= rhs + LEMMA1_SLACK,
    })
}

/// A fully materialized random check instance: two label-matched point sets,
/// a linear classifier, and a candidate set that violates every label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub index: u64,
    pub points_p: Vec<Vec<f64>>,
    pub points_pv: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
    pub classifier_w: Vec<Vec<f64>>,
    pub classifier_b: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

impl TheoryInstance {
    pub fn dist_p(&self) -> Result<EmpiricalDist> {
        EmpiricalDist::new(to_matrix(&self.points_p), self.labels.clone())
    }

    pub fn dist_pv(&self) -> Result<EmpiricalDist> {
        EmpiricalDist::new(to_matrix(&self.points_pv), self.labels.clone())
    }

    pub fn candidate_matrix(&self) -> Array2<f64> {
        to_matrix(&self.candidates)
    }

    pub fn classify(&self, x: ArrayView1<f64>) -> usize {
        let w = to_matrix(&self.classifier_w);
        let b = Array1::from_vec(self.classifier_b.clone());
        let scores = w.dot(&x) + &b;
        scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }

    pub fn check(&self) -> Result<Lemma1Report> {
        lemma1_check(
            |x| self.classify(x),
            &self.dist_p()?,
            &self.dist_pv()?,
            self.candidate_matrix().view(),
            Metric::default(),
        )
    }
}

/// Draws a random instance with 2-4 classes, up to 6 points per class, and a
/// candidate set redrawn until every label has a violating candidate.
pub fn random_theory_instance(seed: u64, index: u64) -> TheoryInstance {
    let mut rng = rng_for(seed, Role::TheoryInstance, &[index]);
    let classes = rng.gen_range(2..=4usize);
    let per_class = rng.gen_range(1..=6usize);
    let dim = rng.gen_range(2..=4usize);

    let mut labels = Vec::new();
    let draw_points = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..classes * per_class)
            .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect()
    };
    for y in 0..classes {
        labels.extend(std::iter::repeat(y).take(per_class));
    }
    let points_p = draw_points(&mut rng);
    let points_pv = draw_points(&mut rng);

    let mut instance = TheoryInstance {
        index,
        points_p,
        points_pv,
        labels,
        candidates: Vec::new(),
        classifier_w: Vec::new(),
        classifier_b: Vec::new(),
    };
    // Candidate redraws alone cannot fix a degenerate classifier that sends
    // the whole box to one class, so the classifier is redrawn in the outer
    // loop. Terminates with probability 1 and stays a pure function of
    // (seed, index).
    loop {
        instance.classifier_w = (0..classes)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        instance.classifier_b = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for _ in 0..4 {
            let count = classes + rng.gen_range(2..=8usize);
            instance.candidates = (0..count)
                .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let cand = instance.candidate_matrix();
            let cand_labels: Vec<usize> =
                cand.axis_iter(Axis(0)).map(|row| instance.classify(row)).collect();
            if (0..classes).all(|y| cand_labels.iter().any(|&c| c != y)) {
                return instance;
            }
        }
    }
}

/// One forwardable (or raw, pre-extracted) block of rows for feature export.
pub struct FeatureGroup<'a> {
    /// Attribution for the csv; -1 when rows belong to no client.
    pub client: i64,
    pub is_virtual: bool,
    /// When true the rows already live at `layer` and skip the forward pass.
    pub raw: bool,
    pub data: &'a LabeledDataset,
}

/// Writes `client,label,is_virtual,f0..f{d-1}` rows for every sample, using
/// the post-activation features at `layer`.
pub fn export_features<W: Write>(
    spec: &MlpSpec,
    params: &ModelParams,
    groups: &[FeatureGroup<'_>],
    layer: usize,
    sink: &mut W,
) -> Result<usize> {
    if layer == 0 || layer > spec.feature_layer_count() {
        return Err(Error::Config(format!(
            "export layer must be in 1..={}, got {layer}",
            spec.feature_layer_count()
        )));
    }
    let width = spec.layer_width(layer).unwrap();
    let mut header = String::from("client,label,is_virtual");
    for j in 0..width {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(sink, "{header}")?;

    let mut written = 0usize;
    for group in groups {
        let features: Array2<f64> = if group.raw {
            if group.data.dim() != width {
                return Err(Error::ShapeMismatch {
                    site: "raw feature export".into(),
                    expected: format!("{width} columns"),
                    actual: format!("{} columns", group.data.dim()),
                });
            }
            group.data.features.clone()
        } else {
            forward(spec, params, group.data.features.view())?.layers[layer].clone()
        };
        for i in 0..group.data.len() {
            let mut line = format!(
                "{},{},{}",
                group.client,
                group.data.labels[i],
                u8::from(group.is_virtual)
            );
            for v in features.row(i) {
                line.push_str(&format!(",{v:.9e}"));
            }
            writeln!(sink, "{line}")?;
            written += 1;
        }
    }
    Ok(written)
}
