//! Zero-shot classification: an image is assigned the class whose caption embeddings it
//! is most similar to. Reports Recall@1, a confusion matrix and per-sample scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetView, Split};
use crate::embed::{encode_image, EncoderPair};
use crate::error::{Error, Result};
use crate::morphology::StageClass;
use crate::raster::RasterImage;
use crate::scalar::Scalar;

/// Allowed deviation of an embedding norm from 1 before similarity refuses it.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeMode {
    /// Mean caption embedding, re-normalized.
    #[default]
    Mean,
    /// Best match over all caption embeddings.
    Max,
}

impl FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown prototype mode '{other}' (mean or max)"))),
        }
    }
}

fn check_unit<F: Scalar>(v: ArrayView1<'_, F>, what: &str) -> Result<()> {
    let norm = v.dot(&v).sqrt().as_f64();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Contract(format!("{what} has norm {norm}, expected unit length")));
    }
    Ok(())
}

/// Dot product of two unit vectors.
pub fn similarity<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embedding lengths {} and {} differ", a.len(), b.len())));
    }
    check_unit(a, "image embedding")?;
    check_unit(b, "text embedding")?;
    Ok(a.dot(&b))
}

/// Per-class unit vectors: one row per class in mean mode, one row per caption in max mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypeSet<F> {
    pub mode: PrototypeMode,
    pub classes: BTreeMap<StageClass, Array2<F>>,
}

impl<F: Scalar> ClassPrototypeSet<F> {
    pub fn new(mode: PrototypeMode, classes: BTreeMap<StageClass, Array2<F>>) -> Result<Self> {
        for (class, rows) in &classes {
            if rows.nrows() == 0 {
                return Err(Error::Config(format!("class {class} has no prototype")));
            }
            for r in rows.rows() {
                check_unit(r, "prototype")?;
            }
        }
        Ok(Self { mode, classes })
    }

    fn rows(&self, class: StageClass) -> Result<&Array2<F>> {
        self.classes
            .get(&class)
            .ok_or_else(|| Error::Config(format!("no prototype for class {class}")))
    }

    /// Similarity of one embedding to every class, in class order.
    pub fn scores(&self, embedding: ArrayView1<'_, F>) -> Result<[F; StageClass::COUNT]> {
        check_unit(embedding, "image embedding")?;
        let mut out = [F::zero(); StageClass::COUNT];
        for class in StageClass::ALL {
            let rows = self.rows(class)?;
            if rows.ncols() != embedding.len() {
                return Err(Error::Shape(format!(
                    "prototype width {} vs embedding width {}",
                    rows.ncols(),
                    embedding.len()
                )));
            }
            let sims = rows.dot(&embedding);
            out[class.ordinal()] = sims.iter().copied().fold(F::neg_infinity(), F::max);
        }
        Ok(out)
    }
}

/// Encodes every caption of every class set.
pub fn build_prototypes<F: Scalar>(
    pair: &EncoderPair<F>,
    caption_sets: &BTreeMap<StageClass, Vec<String>>,
    mode: PrototypeMode,
) -> Result<ClassPrototypeSet<F>> {
    let mut classes = BTreeMap::new();
    for class in StageClass::ALL {
        let captions = caption_sets
            .get(&class)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Config(format!("no captions for class {class}")))?;
        let emb = pair.encode_captions(captions)?;
        let rows = match mode {
            PrototypeMode::Max => emb,
            PrototypeMode::Mean => {
                let mean = emb.mean_axis(ndarray::Axis(0)).expect("non-empty");
                let norm = mean.dot(&mean).sqrt();
                if norm <= F::of(1e-12) {
                    return Err(Error::numeric(
                        format!("prototype.{class}"),
                        "caption embeddings cancel out",
                    ));
                }
                (mean / norm).insert_axis(ndarray::Axis(0))
            }
        };
        classes.insert(class, rows);
    }
    ClassPrototypeSet::new(mode, classes)
}

/// Caption texts of a dataset view, keyed by class.
pub fn caption_texts(view: &DatasetView) -> BTreeMap<StageClass, Vec<String>> {
    view.caption_sets()
        .iter()
        .map(|(&c, set)| (c, set.texts().map(str::to_string).collect()))
        .collect()
}

/// Highest score wins; ties go to the lowest class ordinal.
pub fn argmax_class(scores: &[f64]) -> StageClass {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    StageClass::from_ordinal(best).expect("one score per class")
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: StageClass,
    pub scores: Vec<f64>,
    /// Softmax of the scores at the encoder temperature.
    pub confidence: Vec<f64>,
}

pub fn classify_embedding<F: Scalar>(
    embedding: ArrayView1<'_, F>,
    prototypes: &ClassPrototypeSet<F>,
    tau: f64,
) -> Result<Prediction> {
    let scores: Vec<f64> = prototypes.scores(embedding)?.iter().map(|s| s.as_f64()).collect();
    Ok(Prediction {
        predicted: argmax_class(&scores),
        confidence: softmax(&scores, tau),
        scores,
    })
}

pub fn classify<F: Scalar>(
    image: &RasterImage,
    pair: &EncoderPair<F>,
    prototypes: &ClassPrototypeSet<F>,
) -> Result<Prediction> {
    let emb: Array1<F> = encode_image(pair, image)?;
    classify_embedding(emb.view(), prototypes, pair.temperature().as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub path: String,
    pub truth: StageClass,
    pub predicted: StageClass,
    pub scores: Vec<f64>,
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Option<Split>,
    pub recall_at_1: f64,
    pub per_class_accuracy: BTreeMap<StageClass, f64>,
    /// `confusion[truth][predicted]`, in class order.
    pub confusion: [[usize; StageClass::COUNT]; StageClass::COUNT],
    /// Share of misclassifications between neighbouring stages; `None` without errors.
    pub adjacent_error_fraction: Option<f64>,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    pub fn from_samples(split: Option<Split>, samples: Vec<SampleResult>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Size("nothing to evaluate".into()));
        }
        let mut confusion = [[0usize; StageClass::COUNT]; StageClass::COUNT];
        for s in &samples {
            confusion[s.truth.ordinal()][s.predicted.ordinal()] += 1;
        }
        let correct: usize = (0..StageClass::COUNT).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = StageClass::ALL
            .iter()
            .filter_map(|&c| {
                let row = &confusion[c.ordinal()];
                let n: usize = row.iter().sum();
                (n > 0).then(|| (c, row[c.ordinal()] as f64 / n as f64))
            })
            .collect();
        let errors = samples.len() - correct;
        let adjacent = samples
            .iter()
            .filter(|s| s.truth != s.predicted && s.truth.is_adjacent(s.predicted))
            .count();
        Ok(Self {
            split,
            recall_at_1: correct as f64 / samples.len() as f64,
            per_class_accuracy,
            confusion,
            adjacent_error_fraction: (errors > 0).then(|| adjacent as f64 / errors as f64),
            samples,
        })
    }

    pub fn errors(&self) -> usize {
        self.samples.iter().filter(|s| s.truth != s.predicted).count()
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in StageClass::ALL {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for t in StageClass::ALL {
            out.push_str(t.name());
            for n in self.confusion[t.ordinal()] {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("path,truth,predicted");
        for c in StageClass::ALL {
            let _ = write!(out, ",score_{c}");
        }
        for c in StageClass::ALL {
            let _ = write!(out, ",p_{c}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{},{}", s.path, s.truth, s.predicted);
            for v in s.scores.iter().chain(&s.confidence) {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.json`, `confusion.csv` and `samples.csv` into `dir`. `run`, when
    /// given, is stored under the `run` key of the JSON report.
    pub fn write<M: Serialize>(&self, dir: &Path, run: Option<&M>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let encode_err = |e: serde_json::Error| Error::Data(format!("report encode: {e}"));
        let mut value = serde_json::to_value(self).map_err(encode_err)?;
        if let (Some(run), Some(obj)) = (run, value.as_object_mut()) {
            obj.insert("run".into(), serde_json::to_value(run).map_err(encode_err)?);
        }
        let json = serde_json::to_string_pretty(&value).map_err(encode_err)?;
        for (name, body) in [
            ("report.json", json),
            ("confusion.csv", self.confusion_csv()),
            ("samples.csv", self.samples_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Classifies already-decoded images.
pub fn evaluate_images<F: Scalar>(
    images: &[(String, StageClass, RasterImage)],
    pair: &EncoderPair<F>,
    prototypes: &ClassPrototypeSet<F>,
    split: Option<Split>,
) -> Result<EvalReport> {
    let samples = images
        .par_iter()
        .map(|(path, truth, img)| {
            let p = classify(img, pair, prototypes)?;
            Ok(SampleResult {
                path: path.clone(),
                truth: *truth,
                predicted: p.predicted,
                scores: p.scores,
                confidence: p.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(split, samples)
}

/// Classifies every image of `split`.
pub fn evaluate<F: Scalar>(
    view: &DatasetView,
    split: Split,
    pair: &EncoderPair<F>,
    prototypes: &ClassPrototypeSet<F>,
) -> Result<EvalReport> {
    let images: Vec<_> = view
        .load_split(split)?
        .into_iter()
        .map(|(r, img)| (r.path, r.class, img))
        .collect();
    if images.is_empty() {
        return Err(Error::Size(format!("split {split} is empty")));
    }
    evaluate_images(&images, pair, prototypes, Some(split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(v: &[f64]) -> Array1<f64> {
        let a = Array1::from(v.to_vec());
        let n = a.dot(&a).sqrt();
        a / n
    }

    #[test]
    fn similarity_basics() {
        let v = unit(&[1.0, 2.0, 2.0]);
        assert!((similarity(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-12);
        let neg = -&v;
        assert!((similarity(v.view(), neg.view()).unwrap() + 1.0).abs() < 1e-12);
        let (x, y) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_eq!(similarity(x.view(), y.view()).unwrap(), 0.0);
        let long = array![1.1, 0.0];
        assert!(matches!(similarity(long.view(), y.view()), Err(Error::Contract(_))));
    }

    fn prototypes() -> ClassPrototypeSet<f64> {
        let mut m = BTreeMap::new();
        m.insert(StageClass::Spore, unit(&[1.0, 0.0, 0.0]).insert_axis(ndarray::Axis(0)));
        m.insert(StageClass::Hyphae, unit(&[0.0, 1.0, 0.0]).insert_axis(ndarray::Axis(0)));
        m.insert(StageClass::Mycelium, unit(&[0.0, 0.0, 1.0]).insert_axis(ndarray::Axis(0)));
        ClassPrototypeSet::new(PrototypeMode::Mean, m).unwrap()
    }

    #[test]
    fn self_match_wins_with_score_one() {
        let p = prototypes();
        let e = unit(&[0.0, 1.0, 0.0]);
        let pred = classify_embedding(e.view(), &p, 0.07).unwrap();
        assert_eq!(pred.predicted, StageClass::Hyphae);
        assert!((pred.scores[1] - 1.0).abs() < 1e-12);
        assert!((pred.confidence.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ordinal() {
        assert_eq!(argmax_class(&[0.5, 0.5, 0.1]), StageClass::Spore);
        assert_eq!(argmax_class(&[0.1, 0.7, 0.7]), StageClass::Hyphae);
        let p = prototypes();
        let e = unit(&[0.0, 1.0, 1.0]);
        assert_eq!(classify_embedding(e.view(), &p, 0.1).unwrap().predicted, StageClass::Hyphae);
    }

    #[test]
    fn missing_class_is_config_error() {
        let mut p = prototypes();
        p.classes.remove(&StageClass::Mycelium);
        let e = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(p.scores(e.view()), Err(Error::Config(_))));
    }

    fn sample(t: StageClass, p: StageClass) -> SampleResult {
        SampleResult {
            path: String::new(),
            truth: t,
            predicted: p,
            scores: vec![0.0; 3],
            confidence: vec![1.0 / 3.0; 3],
        }
    }

    #[test]
    fn report_arithmetic() {
        use StageClass::*;
        let all_right: Vec<_> = [Spore, Hyphae, Mycelium].iter().map(|&c| sample(c, c)).collect();
        let r = EvalReport::from_samples(None, all_right).unwrap();
        assert_eq!(r.recall_at_1, 1.0);
        assert_eq!(r.confusion, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(r.adjacent_error_fraction, None);

        let constant: Vec<_> = [Spore, Hyphae, Mycelium].iter().map(|&c| sample(c, Hyphae)).collect();
        let r = EvalReport::from_samples(None, constant).unwrap();
        assert!((r.recall_at_1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.adjacent_error_fraction, Some(1.0));

        let r = EvalReport::from_samples(None, vec![sample(Spore, Mycelium), sample(Hyphae, Hyphae)]).unwrap();
        assert_eq!(r.adjacent_error_fraction, Some(0.0));
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![1, 1, 0]);
        assert!(r.confusion_csv().starts_with("truth,spore,hyphae,mycelium\nspore,0,0,1\n"));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("MAX".parse::<PrototypeMode>().unwrap(), PrototypeMode::Max);
        assert!("median".parse::<PrototypeMode>().is_err());
    }
}
