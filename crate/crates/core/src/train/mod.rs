//! Contrastive training of the dual encoder: loss and exact gradients, AdamW over the
//! currently trainable groups, and the staged unfreezing schedule.

mod loss;
mod optim;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{draw_caption, epoch_batches, DatasetView, Split};
use crate::embed::{
    init_params, patchify, Checkpoint, EncoderDims, EncoderPair, Gradients, LayerGroup, ParamId, Vocabulary,
};
use crate::error::{Error, Result};
use crate::morphology::StageClass;
use crate::raster::RasterImage;
use crate::rng::{rng_from_seed, stream_seed, SeededRng};
use crate::scalar::Scalar;
use crate::zeroshot::{build_prototypes, caption_texts, evaluate_images, EvalReport, PrototypeMode};

pub use loss::{contrastive_loss, contrastive_loss_grad, LossBreakdown, LossGrad, PositiveSets};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use schedule::{unfreeze_schedule, UnfreezeSchedule};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: UnfreezeSchedule,
    pub dims: EncoderDims,
    /// Prototype construction for the per-epoch validation Recall@1.
    pub prototypes: PrototypeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            seed: 0,
            optimizer: AdamWConfig::default(),
            schedule: UnfreezeSchedule::default(),
            dims: EncoderDims::default(),
            prototypes: PrototypeMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.dims.validate()
    }
}

/// Aligned image patches, caption token ids and class labels.
#[derive(Debug, Clone)]
pub struct TrainBatch<F> {
    pub patches: Vec<Array2<F>>,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<StageClass>,
}

impl<F: Scalar> TrainBatch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.patches.len() != self.len() || self.tokens.len() != self.len() || self.is_empty() {
            return Err(Error::Shape(format!(
                "batch has {} images, {} captions, {} labels",
                self.patches.len(),
                self.tokens.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

struct Forward<F> {
    image: crate::embed::ImageCache<F>,
    text: crate::embed::TextCache<F>,
    similarity: Array2<F>,
}

fn forward<F: Scalar>(pair: &EncoderPair<F>, batch: &TrainBatch<F>) -> Result<Forward<F>> {
    batch.check()?;
    let views: Vec<ArrayView2<'_, F>> = batch.patches.iter().map(|p| p.view()).collect();
    let image = pair.image.forward(&views)?;
    let text = pair.text.forward(&batch.tokens)?;
    let similarity = image.embeddings.dot(&text.embeddings.t());
    Ok(Forward {
        image,
        text,
        similarity,
    })
}

pub fn batch_loss<F: Scalar>(pair: &EncoderPair<F>, batch: &TrainBatch<F>) -> Result<LossBreakdown<F>> {
    let f = forward(pair, batch)?;
    contrastive_loss(&f.similarity, pair.temperature(), &PositiveSets::from_labels(&batch.labels))
}

/// Loss and reverse-mode gradients for every tensor; frozen tensors get zeros.
pub fn loss_gradients<F: Scalar>(
    pair: &EncoderPair<F>,
    batch: &TrainBatch<F>,
) -> Result<(LossBreakdown<F>, Gradients<F>)> {
    let f = forward(pair, batch)?;
    let lg = contrastive_loss_grad(&f.similarity, pair.temperature(), &PositiveSets::from_labels(&batch.labels))?;
    let mut grads = Gradients::zeros_like(pair);
    let d_img = lg.d_similarity.dot(&f.text.embeddings);
    let d_txt = lg.d_similarity.t().dot(&f.image.embeddings);
    grads.absorb_image(pair.image.backward(&f.image, &d_img, &pair.freeze));
    grads.absorb_text(pair.text.backward(&f.text, &d_txt, &pair.freeze));
    if pair.freeze.is_trainable(LayerGroup::LogTemperature) {
        grads.get_mut(ParamId::LogTemperature)[[0]] = lg.d_log_temperature;
    }
    grads.check_finite()?;
    Ok((lg.loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_image: f64,
    pub l_text: f64,
    pub l_total: f64,
    pub tau: f64,
    pub trainable_params: usize,
    pub val_recall_at_1: f64,
}

pub const METRICS_HEADER: &str = "epoch\tl_image\tl_text\tl_total\ttau\ttrainable_params\tval_recall_at_1";

impl EpochMetrics {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.epoch, self.l_image, self.l_text, self.l_total, self.tau, self.trainable_params, self.val_recall_at_1
        )
    }
}

pub fn metrics_tsv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.tsv_row());
    }
    out
}

/// Vocabulary over every caption of the dataset.
pub fn dataset_vocabulary(view: &DatasetView) -> Vocabulary {
    Vocabulary::build(view.caption_sets().values().flat_map(|s| s.texts()))
}

/// Epoch-by-epoch training state over a loaded dataset.
pub struct Trainer<'a, F> {
    view: &'a DatasetView,
    config: TrainConfig,
    pair: EncoderPair<F>,
    state: AdamState<F>,
    epoch: usize,
    rng: SeededRng,
    train: Vec<(StageClass, Array2<F>)>,
    val: Vec<(String, StageClass, RasterImage)>,
    metrics: Vec<EpochMetrics>,
    last_good: EncoderPair<F>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(view: &'a DatasetView, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let pair = init_params(stream_seed(config.seed, "init"), &config.dims, dataset_vocabulary(view))?;
        let train = view
            .load_split(Split::Train)?
            .into_iter()
            .map(|(r, img)| Ok((r.class, patchify::<F>(&img, config.dims.patch)?)))
            .collect::<Result<Vec<_>>>()?;
        if train.len() < 2 {
            return Err(Error::Size("training split needs at least two images".into()));
        }
        let val: Vec<_> = view
            .load_split(Split::Val)?
            .into_iter()
            .map(|(r, img)| (r.path, r.class, img))
            .collect();
        if val.is_empty() {
            return Err(Error::Size("validation split is empty".into()));
        }
        Ok(Self {
            view,
            state: AdamState::new(&pair),
            rng: rng_from_seed(stream_seed(config.seed, "batches")),
            last_good: pair.clone(),
            pair,
            config,
            epoch: 0,
            train,
            val,
            metrics: Vec::new(),
        })
    }

    pub fn pair(&self) -> &EncoderPair<F> {
        &self.pair
    }

    /// Encoders after the most recent epoch that finished with finite losses.
    pub fn last_good(&self) -> &EncoderPair<F> {
        &self.last_good
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Applies the epoch's freeze mask, runs one shuffled pass over the training split
    /// and scores the validation split.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        self.pair.freeze = self.config.schedule.mask_at(epoch);
        let batches = epoch_batches(self.train.len(), self.config.batch_size, &mut self.rng)?;
        let (mut li, mut lt, mut seen) = (0.0, 0.0, 0usize);
        for idx in batches {
            let mut batch = TrainBatch {
                patches: Vec::with_capacity(idx.len()),
                tokens: Vec::with_capacity(idx.len()),
                labels: Vec::with_capacity(idx.len()),
            };
            for &i in &idx {
                let (class, patches) = &self.train[i];
                let caption = draw_caption(self.view, *class, &mut self.rng)?;
                batch.patches.push(patches.clone());
                batch.tokens.push(self.pair.text.vocab.encode(caption));
                batch.labels.push(*class);
            }
            let (loss, grads) = loss_gradients(&self.pair, &batch).map_err(|e| diverged(epoch, e))?;
            if !loss.l_total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {}", loss.l_total),
                });
            }
            adamw_step(&mut self.pair, &grads, &mut self.state, &self.config.optimizer)?;
            li += loss.l_image.as_f64() * idx.len() as f64;
            lt += loss.l_text.as_f64() * idx.len() as f64;
            seen += idx.len();
        }
        let report = self.validate()?;
        let m = EpochMetrics {
            epoch,
            l_image: li / seen as f64,
            l_text: lt / seen as f64,
            l_total: (li + lt) / seen as f64,
            tau: self.pair.temperature().as_f64(),
            trainable_params: self.pair.trainable_param_count(),
            val_recall_at_1: report.recall_at_1,
        };
        self.metrics.push(m);
        self.last_good = self.pair.clone();
        self.epoch += 1;
        Ok(m)
    }

    /// Validation report with the current encoders.
    pub fn validate(&self) -> Result<EvalReport> {
        let prototypes = build_prototypes(&self.pair, &caption_texts(self.view), self.config.prototypes)?;
        evaluate_images(&self.val, &self.pair, &prototypes, Some(Split::Val))
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint::new(
            self.last_good.clone(),
            Some(self.view.manifest_sha256().to_string()),
            self.metrics.len(),
        )
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { name, detail } => Error::Diverged {
            epoch,
            detail: format!("{name}: {detail}"),
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub pair: EncoderPair<F>,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Full run. With an output directory, the checkpoint and metrics log are rewritten
/// after every epoch, so an interrupted or diverged run leaves its last good state.
pub fn train<F: Scalar>(
    view: &DatasetView,
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<F>> {
    let mut trainer = Trainer::<F>::new(view, config.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let persist = |t: &Trainer<'_, F>| -> Result<()> {
        if let Some(dir) = out {
            t.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            let path = dir.join(METRICS_FILE);
            fs::write(&path, metrics_tsv(t.metrics())).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    while !trainer.is_finished() {
        match trainer.run_epoch() {
            Ok(m) => {
                persist(&trainer)?;
                on_epoch(&m);
            }
            Err(e) => {
                persist(&trainer)?;
                return Err(e);
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint_path: out.map(|d| d.join(CHECKPOINT_FILE)),
        metrics: trainer.metrics().to_vec(),
        pair: trainer.last_good().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::FreezeMask;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn tiny_dims() -> EncoderDims {
        EncoderDims {
            patch: 2,
            channels: 3,
            image_hidden: 5,
            image_block: 4,
            text_embed: 3,
            text_hidden: 4,
            embed_dim: 8,
        }
    }

    pub(crate) fn tiny_setup(seed: u64) -> (EncoderPair<f64>, TrainBatch<f64>) {
        let vocab = Vocabulary::build(["spore round yellow", "hyphae thread orange", "mycelium web red"]);
        let mut pair: EncoderPair<f64> = init_params(seed, &tiny_dims(), vocab).unwrap();
        pair.freeze = FreezeMask::all_trainable();
        let mut rng = rng_from_seed(seed + 100);
        let labels = vec![StageClass::Spore, StageClass::Hyphae, StageClass::Mycelium, StageClass::Hyphae];
        let captions = ["spore round yellow", "hyphae thread", "mycelium red web", "orange hyphae"];
        let patches = labels
            .iter()
            .map(|_| Array2::from_shape_simple_fn((4, 12), || rng.random::<f64>()))
            .collect();
        let tokens = captions.iter().map(|c| pair.text.vocab.encode(c)).collect();
        (pair, TrainBatch { patches, tokens, labels })
    }

    #[test]
    fn gradients_match_central_differences() {
        let (pair, batch) = tiny_setup(1);
        let (_, grads) = loss_gradients(&pair, &batch).unwrap();
        let h = 1e-4;
        for id in ParamId::ALL {
            let n = pair.tensor(id).len();
            let analytic: Vec<f64> = grads.get(id).iter().copied().collect();
            let mut numeric = Vec::with_capacity(n);
            for k in 0..n {
                let mut plus = pair.clone();
                plus.tensor_mut(id).as_slice_mut().unwrap()[k] += h;
                let mut minus = pair.clone();
                minus.tensor_mut(id).as_slice_mut().unwrap()[k] -= h;
                let fp = batch_loss(&plus, &batch).unwrap().l_total;
                let fm = batch_loss(&minus, &batch).unwrap().l_total;
                numeric.push((fp - fm) / (2.0 * h));
            }
            let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
            let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(scale > 0.0, "{id} has an all-zero gradient");
            assert!(err / scale < 1e-4, "{id}: relative error {}", err / scale);
        }
    }

    #[test]
    fn frozen_groups_get_exact_zeros() {
        let (mut pair, batch) = tiny_setup(2);
        pair.freeze = FreezeMask::with(&[LayerGroup::Heads]);
        let (_, grads) = loss_gradients(&pair, &batch).unwrap();
        for id in ParamId::ALL {
            let zero = grads.get(id).iter().all(|&v| v == 0.0);
            assert_eq!(zero, id.group() != LayerGroup::Heads, "{id}");
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient_direction() {
        let (pair, batch) = tiny_setup(3);
        let doubled = TrainBatch {
            patches: [batch.patches.clone(), batch.patches.clone()].concat(),
            tokens: [batch.tokens.clone(), batch.tokens.clone()].concat(),
            labels: [batch.labels.clone(), batch.labels.clone()].concat(),
        };
        let a = loss_gradients(&pair, &batch).unwrap().1.flatten();
        let b = loss_gradients(&pair, &doubled).unwrap().1.flatten();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) > 0.999, "cosine {}", dot / (na * nb));
    }

    #[test]
    fn full_batch_descent_over_ten_steps() {
        let (mut pair, batch) = tiny_setup(4);
        let mut state = AdamState::new(&pair);
        let cfg = AdamWConfig::default();
        let mut prev = batch_loss(&pair, &batch).unwrap().l_total;
        for _ in 0..10 {
            let (_, g) = loss_gradients(&pair, &batch).unwrap();
            adamw_step(&mut pair, &g, &mut state, &cfg).unwrap();
            let now = batch_loss(&pair, &batch).unwrap().l_total;
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn image_text_permutation_leaves_loss_unchanged() {
        let (pair, batch) = tiny_setup(5);
        let perm = [3, 1, 0, 2];
        let shuffled = TrainBatch {
            patches: perm.iter().map(|&i| batch.patches[i].clone()).collect(),
            tokens: perm.iter().map(|&i| batch.tokens[i].clone()).collect(),
            labels: perm.iter().map(|&i| batch.labels[i]).collect(),
        };
        let a = batch_loss(&pair, &batch).unwrap().l_total;
        let b = batch_loss(&pair, &shuffled).unwrap().l_total;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn metrics_rows() {
        let m = EpochMetrics {
            epoch: 3,
            l_image: 1.0,
            l_text: 0.5,
            l_total: 1.5,
            tau: 0.07,
            trainable_params: 12,
            val_recall_at_1: 0.9,
        };
        let tsv = metrics_tsv(&[m]);
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(tsv.lines().nth(1).unwrap(), "3\t1.000000\t0.500000\t1.500000\t0.070000\t12\t0.900000");
    }
}
