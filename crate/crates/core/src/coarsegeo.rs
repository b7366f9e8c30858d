//! Coarse zone inference from event text.
//!
//! Bag-of-unigrams featurization (binary term frequency weighted by inverse
//! document frequency, then l2 normalization) feeding a multinomial
//! logistic regression over caller-defined zone labels. Training is plain
//! full-batch gradient descent from a zero initialization with a step size
//! derived from the smoothness bound of the objective, so fitting is
//! deterministic and the loss never increases between epochs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse l2-normalized feature vector; empty when no token is in-vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    /// (column, value) pairs sorted by column.
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A fitted zone classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneModel {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    /// Sorted lexicographically; prediction ties resolve to the first.
    pub zone_labels: Vec<String>,
    /// One coefficient row per zone label.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Training class frequencies; the fallback for zero-vector inputs.
    pub priors: Vec<f64>,
}

impl ZoneModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Binary-TF/IDF/l2 featurization. Out-of-vocabulary tokens are dropped;
/// all-OOV or empty text yields the zero vector.
pub fn featurize(text: &str, model: &ZoneModel) -> SparseVector {
    let mut cols: Vec<usize> = tokenize(text)
        .iter()
        .filter_map(|t| model.vocabulary.get(t).copied())
        .collect();
    cols.sort_unstable();
    cols.dedup();
    let mut entries: Vec<(usize, f64)> = cols.into_iter().map(|c| (c, model.idf[c])).collect();
    let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in entries.iter_mut() {
            *v /= norm;
        }
    } else {
        entries.clear();
    }
    SparseVector { entries }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// l2 penalty strength on the coefficient rows (intercepts are free).
    pub reg: f64,
    pub max_epochs: usize,
    /// Stop once the full gradient norm drops below this.
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            reg: 1.0,
            max_epochs: 5000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: usize,
    pub final_grad_norm: f64,
    /// Loss at the start of every epoch plus the final loss.
    pub loss_trace: Vec<f64>,
}

/// Fit with default options.
pub fn fit(corpus: &[(String, String)]) -> Result<ZoneModel> {
    fit_with(corpus, &FitOptions::default()).map(|(m, _)| m)
}

/// Fit a zone model on (zone_label, text) pairs.
pub fn fit_with(corpus: &[(String, String)], opts: &FitOptions) -> Result<(ZoneModel, FitReport)> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty training corpus".into()));
    }
    let mut zone_labels: Vec<String> = corpus.iter().map(|(z, _)| z.clone()).collect();
    zone_labels.sort_unstable();
    zone_labels.dedup();
    if zone_labels.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 distinct zone labels, got {}",
            zone_labels.len()
        )));
    }
    let label_idx: BTreeMap<String, usize> = zone_labels
        .iter()
        .enumerate()
        .map(|(i, z)| (z.clone(), i))
        .collect();

    // Vocabulary and document frequencies.
    let docs_tokens: Vec<Vec<String>> = corpus.iter().map(|(_, t)| tokenize(t)).collect();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for tokens in &docs_tokens {
        let mut distinct: Vec<&String> = tokens.iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        for t in distinct {
            *df.entry(t.clone()).or_default() += 1;
        }
    }
    let vocabulary: BTreeMap<String, usize> = df
        .keys()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let n_docs = corpus.len() as f64;
    let mut idf = vec![0.0; vocabulary.len()];
    for (token, &col) in &vocabulary {
        // Smoothed inverse document frequency.
        idf[col] = ((1.0 + n_docs) / (1.0 + df[token] as f64)).ln() + 1.0;
    }

    let n_classes = zone_labels.len();
    let mut priors = vec![0.0; n_classes];
    for (z, _) in corpus {
        priors[label_idx[z.as_str()]] += 1.0 / n_docs;
    }

    let mut model = ZoneModel {
        vocabulary,
        idf,
        zone_labels,
        weights: vec![vec![0.0; df.len()]; n_classes],
        intercepts: vec![0.0; n_classes],
        priors,
    };

    let features: Vec<SparseVector> = corpus.iter().map(|(_, t)| featurize(t, &model)).collect();
    let targets: Vec<usize> = corpus.iter().map(|(z, _)| label_idx[z.as_str()]).collect();
    let n = corpus.len() as f64;

    // Smoothness bound: features have norm <= 1, the intercept adds 1, and
    // the softmax Hessian is bounded by I/2, so the objective gradient is
    // Lipschitz with constant <= 1 + reg/n. A 1/L step therefore descends
    // every epoch.
    let lr = 1.0 / (1.0 + opts.reg / n);

    let mut report = FitReport {
        epochs: 0,
        final_grad_norm: f64::INFINITY,
        loss_trace: Vec::new(),
    };

    for epoch in 0..opts.max_epochs {
        let mut grad_w = vec![vec![0.0; model.idf.len()]; n_classes];
        let mut grad_b = vec![0.0; n_classes];
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(&targets) {
            let p = softmax_scores(&model, x);
            loss += -(p[y].max(1e-300)).ln() / n;
            for k in 0..n_classes {
                let coef = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                for &(col, v) in &x.entries {
                    grad_w[k][col] += coef * v;
                }
                grad_b[k] += coef;
            }
        }
        let mut grad_sq = 0.0;
        for k in 0..n_classes {
            for (g, w) in grad_w[k].iter_mut().zip(&model.weights[k]) {
                *g += opts.reg / n * w;
                grad_sq += *g * *g;
            }
            grad_sq += grad_b[k] * grad_b[k];
        }
        let reg_term: f64 = model
            .weights
            .iter()
            .flat_map(|row| row.iter())
            .map(|w| w * w)
            .sum::<f64>()
            * opts.reg
            / (2.0 * n);
        loss += reg_term;
        report.loss_trace.push(loss);
        report.final_grad_norm = grad_sq.sqrt();
        report.epochs = epoch;
        if report.final_grad_norm < opts.grad_tol {
            break;
        }
        for k in 0..n_classes {
            for (w, g) in model.weights[k].iter_mut().zip(&grad_w[k]) {
                *w -= lr * g;
            }
            model.intercepts[k] -= lr * grad_b[k];
        }
    }
    Ok((model, report))
}

fn softmax_scores(model: &ZoneModel, x: &SparseVector) -> Vec<f64> {
    let mut scores: Vec<f64> = model
        .weights
        .iter()
        .zip(&model.intercepts)
        .map(|(row, b)| {
            b + x
                .entries
                .iter()
                .map(|&(col, v)| row[col] * v)
                .sum::<f64>()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
    scores
}

/// Per-zone probabilities for a text (softmax over the linear scores). A
/// zero-vector input falls back to the training priors.
pub fn zone_probabilities(text: &str, model: &ZoneModel) -> Vec<f64> {
    let x = featurize(text, model);
    if x.is_zero() {
        model.priors.clone()
    } else {
        softmax_scores(model, &x)
    }
}

/// Most likely zone with its confidence. Ties resolve to the
/// lexicographically smallest zone label; empty or all-OOV text falls back
/// to the majority training zone at its prior.
pub fn predict_zone<'m>(text: &str, model: &'m ZoneModel) -> (&'m str, f64) {
    let probs = zone_probabilities(text, model);
    let mut best = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = k;
        }
    }
    (&model.zone_labels[best], probs[best])
}

/// Load a training corpus from a CSV with header `zone_label,text`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Format(format!("{}: {e}", path.display())),
    })?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match (row.get(0), row.get(1)) {
            (Some(z), Some(t)) if !z.is_empty() => out.push((z.to_string(), t.to_string())),
            _ => return Err(Error::Format(format!("{}: bad corpus row", path.display()))),
        }
    }
    Ok(out)
}

/// Write a corpus CSV with header `zone_label,text`.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    w.write_record(["zone_label", "text"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (z, t) in corpus {
        w.write_record([z.as_str(), t.as_str()])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
