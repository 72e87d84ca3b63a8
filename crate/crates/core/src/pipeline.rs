//! The attack pipeline as composable stages, plus a file-backed runner that
//! persists every stage under an output directory and skips stages whose
//! inputs and configuration are unchanged.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json
//! pretrain/{natural.ck, robust.ck, history.csv}
//! spab/{model.ck, trace.csv}
//! round/{update.ck, client_batch.ck}
//! extract/{candidates.ck, candidates.json}
//! reconstruct/{report.json, images.ck, rec_NNN.ppm}
//! preimage/{report.json, ratios.csv}
//! detect/{report.json, vectors.csv}
//! evaluate/{report.json, samples.csv, summary.csv, sweep.csv}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::data::{encode_ppm, load_cifar10_binary, mislabel, synth_dataset, Dataset, Split};
use crate::detection::{scan_model, write_report_csv, ScanReport};
use crate::error::{Error, Result};
use crate::federation::{run_round, DpConfig, GradientUpdate, ServerState};
use crate::leakage::{
    candidates_from_checkpoint, candidates_to_checkpoint, cosine, dedupe_candidates, extract_candidate_irs,
    probe_leakage_rate, IrCandidate, DEFAULT_COS_THRESHOLD, DEFAULT_TOL,
};
use crate::metrics::{format_psnr, mean_std, median, psnr, ssim};
use crate::models::{Checkpoint, Classifier, FeatureExtractor, FeatureExtractorSpec, GeneratorSpec, Head, LinearHead, SpabHead};
use crate::reconstruction::{ir_match, preimage_attack, random_baseline, IrMatchConfig, IrMatchResult};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::training::{
    adversarial_train, dataset_irs, gather_rows, natural_train, spab_train, write_trace_csv, EpochStats, Probe, SpabEpoch,
};

/// Probe batch size for the per-epoch leakage trace.
pub const PROBE_BATCH: usize = 64;

pub struct Datasets {
    pub public: Dataset,
    pub eval: Dataset,
    pub private: Dataset,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.dataset;
    let m = cfg.master_seed;
    if let Some(path) = &d.cifar_path {
        let all = load_cifar10_binary(path)?;
        let need = d.public_count + d.eval_count + d.private_count;
        if all.len() < need {
            return Err(Error::Data(format!("{} holds {} images, config needs {need}", path.display(), all.len())));
        }
        let a = d.public_count;
        let b = a + d.eval_count;
        return Ok(Datasets {
            public: all.slice(0, a),
            eval: all.slice(a, b),
            private: all.slice(b, b + d.private_count).with_split(Split::Private),
        });
    }
    let synth = |stream: &str, count, family| synth_dataset(derive_seed(m, stream), count, d.classes, d.image_size, family);
    Ok(Datasets {
        public: synth("data/public", d.public_count, d.family)?,
        eval: synth("data/eval", d.eval_count, d.family)?,
        private: synth("data/private", d.private_count, d.client_family)?.with_split(Split::Private),
    })
}

pub fn extractor_spec(cfg: &ExperimentConfig) -> FeatureExtractorSpec {
    FeatureExtractorSpec::desk_default(cfg.dataset.image_size, cfg.model.ir_dim)
}

/// Architecture descriptor the client expects the server to ship.
pub fn expected_descriptor(cfg: &ExperimentConfig) -> Result<String> {
    let mut rng = rng_for(0, "descriptor");
    let fe = FeatureExtractor::init(extractor_spec(cfg), &mut rng)?;
    let head = SpabHead::init(cfg.model.ir_dim, cfg.model.spab_width, cfg.dataset.classes, &mut rng);
    Ok(Classifier {
        extractor: fe,
        head: Head::Spab(head),
    }
    .descriptor())
}

pub fn fresh_classifier(cfg: &ExperimentConfig, stream: &str) -> Result<Classifier> {
    let mut rng = rng_for(cfg.master_seed, stream);
    let extractor = FeatureExtractor::init(extractor_spec(cfg), &mut rng)?;
    let head = Head::Linear(LinearHead::init(cfg.model.ir_dim, cfg.dataset.classes, &mut rng));
    Ok(Classifier { extractor, head })
}

pub struct Pretrained {
    pub natural: Classifier,
    pub robust: Classifier,
    pub natural_history: Vec<EpochStats>,
    pub robust_history: Vec<EpochStats>,
}

/// Trains the naturally trained reference and the adversarially trained
/// robust prior from independent initializations.
pub fn pretrain(cfg: &ExperimentConfig, ds: &Datasets) -> Result<Pretrained> {
    let m = cfg.master_seed;
    let mut natural = fresh_classifier(cfg, "init/natural")?;
    let natural_history = natural_train(&mut natural, &ds.public, &ds.eval, &cfg.pretrain.natural, &mut rng_for(m, "train/natural"))?;
    let mut robust = fresh_classifier(cfg, "init/robust")?;
    let robust_history = adversarial_train(
        &mut robust,
        &ds.public,
        &ds.eval,
        &cfg.pretrain.budget,
        &cfg.pretrain.adversarial,
        &mut rng_for(m, "train/robust"),
    )?;
    Ok(Pretrained {
        natural,
        robust,
        natural_history,
        robust_history,
    })
}

/// First `min(PROBE_BATCH, len)` evaluation samples, as IRs.
pub fn probe_set(extractor: &FeatureExtractor, eval: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    let probe = eval.slice(0, eval.len().min(PROBE_BATCH));
    Ok((dataset_irs(extractor, &probe)?, probe.labels))
}

/// SpAB-trains a fresh head on top of the frozen `extractor`.
pub fn spab_stage(cfg: &ExperimentConfig, extractor: &FeatureExtractor, ds: &Datasets) -> Result<(Classifier, Vec<SpabEpoch>)> {
    let m = cfg.master_seed;
    let public = if cfg.spab.mislabel { mislabel(&ds.public)? } else { ds.public.clone() };
    let (probe_irs, probe_labels) = probe_set(extractor, &ds.eval)?;
    let probe = Probe {
        irs: &probe_irs,
        labels: &probe_labels,
    };
    let head = SpabHead::init(extractor.ir_dim(), cfg.model.spab_width, cfg.dataset.classes, &mut rng_for(m, "init/spab"));
    let (head, trace) = spab_train(extractor, head, &public, &probe, &cfg.spab.train, &mut rng_for(m, "train/spab"))?;
    Ok((
        Classifier {
            extractor: extractor.clone(),
            head: Head::Spab(head),
        },
        trace,
    ))
}

pub fn spab_head(model: &Classifier) -> Result<&SpabHead> {
    match &model.head {
        Head::Spab(h) => Ok(h),
        Head::Linear(_) => Err(Error::InvalidArgument("model has no SpAB head".into())),
    }
}

pub fn dp_config(cfg: &ExperimentConfig) -> Option<DpConfig> {
    cfg.round.dp.map(|d| DpConfig {
        epsilon: d.epsilon,
        delta: d.delta,
        clip: d.clip,
        seed: derive_seed(cfg.master_seed, "dp"),
    })
}

pub struct RoundOutput {
    pub update: GradientUpdate,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// One client round against the SpAB model.
pub fn round_stage(cfg: &ExperimentConfig, model: &Classifier, private: &Dataset) -> Result<RoundOutput> {
    let server = ServerState {
        extractor: model.extractor.clone(),
        head: spab_head(model)?.clone(),
    };
    let dp = dp_config(cfg);
    let (update, images, labels) = run_round(
        &server,
        private,
        cfg.round.batch_size,
        dp.as_ref(),
        &mut rng_for(cfg.master_seed, "round"),
    )?;
    Ok(RoundOutput { update, images, labels })
}

/// Attacker-side extraction followed by deduplication.
pub fn extract_stage(update: &GradientUpdate) -> Result<Vec<IrCandidate>> {
    dedupe_candidates(&extract_candidate_irs(update, DEFAULT_TOL)?, DEFAULT_COS_THRESHOLD)
}

/// IR-matching for every candidate on a pool of `jobs` threads. Results
/// are in candidate order and independent of `jobs`.
pub fn reconstruct_all(
    extractor: &FeatureExtractor,
    candidates: &[IrCandidate],
    ir_cfg: &IrMatchConfig,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<IrMatchResult>> {
    let [c, h, w] = extractor.input_shape();
    let gen_spec = GeneratorSpec {
        shape: [c, h, w],
        ..GeneratorSpec::desk_default(h)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        candidates
            .par_iter()
            .enumerate()
            .map(|(i, cand)| {
                let cfg = IrMatchConfig {
                    seed: derive_seed(master_seed, &format!("ir_match/{i}")),
                    ..ir_cfg.clone()
                };
                ir_match(&cand.vector, extractor, &gen_spec, &cfg)
            })
            .collect()
    })
}

fn psnr_str<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_psnr(*v))
}

/// Quality of the reconstruction assigned to one batch sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleScore {
    pub index: usize,
    pub label: usize,
    /// Candidate whose IR is most similar to this sample's true IR.
    pub candidate: Option<usize>,
    pub cosine: f64,
    #[serde(serialize_with = "psnr_str")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundScore {
    pub samples: Vec<SampleScore>,
    /// Fraction of samples whose reconstruction clears the SSIM threshold.
    pub rate: f64,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
}

/// Assigns each batch sample the candidate closest (by cosine) to its true
/// IR and scores that candidate's reconstruction. Samples with no
/// candidate score zero on both metrics.
pub fn score_round(
    reconstructions: &[Tensor],
    candidates: &[IrCandidate],
    images: &Tensor,
    labels: &[usize],
    true_irs: &Tensor,
    ssim_threshold: f64,
) -> Result<RoundScore> {
    if reconstructions.len() != candidates.len() {
        return Err(Error::InvalidArgument("one reconstruction per candidate required".into()));
    }
    let b = images.shape()[0];
    let mut samples = Vec::with_capacity(b);
    for p in 0..b {
        let truth = images.select(p);
        let best = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, cosine(&c.vector, true_irs.row(p))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let score = match best {
            Some((i, cos)) => SampleScore {
                index: p,
                label: labels[p],
                candidate: Some(i),
                cosine: cos,
                psnr: psnr(&reconstructions[i], &truth)?,
                ssim: ssim(&reconstructions[i], &truth)?,
            },
            None => SampleScore {
                index: p,
                label: labels[p],
                candidate: None,
                cosine: 0.0,
                psnr: 0.0,
                ssim: 0.0,
            },
        };
        samples.push(score);
    }
    let ssims: Vec<f64> = samples.iter().map(|s| s.ssim).collect();
    let psnrs: Vec<f64> = samples.iter().map(|s| s.psnr.min(100.0)).collect();
    Ok(RoundScore {
        rate: ssims.iter().filter(|&&s| s > ssim_threshold).count() as f64 / b.max(1) as f64,
        mean_ssim: mean_std(&ssims).0,
        mean_psnr: mean_std(&psnrs).0,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub batch_size: usize,
    pub mean_rate: f64,
    pub std_rate: f64,
}

/// Oracle leakage rate of the model's head on random private batches, per
/// batch size. Each seed contributes the mean over its batches; rows report
/// mean and standard deviation across seeds.
pub fn leakage_sweep(
    model: &Classifier,
    private: &Dataset,
    batch_sizes: &[usize],
    seeds: usize,
    batches_per_seed: usize,
    master_seed: u64,
) -> Result<Vec<SweepRow>> {
    let head = spab_head(model)?;
    let irs = dataset_irs(&model.extractor, private)?;
    let n = private.len();
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        if bs == 0 || bs > n {
            return Err(Error::Config(format!("batch size {bs} outside 1..={n}")));
        }
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let mut rng = rng_for(master_seed, &format!("sweep/{s}/{bs}"));
            let mut total = 0.0;
            for _ in 0..batches_per_seed.max(1) {
                let idx = sample(&mut rng, n, bs).into_vec();
                let y = gather_rows(&irs, &idx);
                let labels: Vec<usize> = idx.iter().map(|&i| private.labels[i]).collect();
                total += probe_leakage_rate(head, &y, &labels)?;
            }
            per_seed.push(total / batches_per_seed.max(1) as f64);
        }
        let (mean_rate, std_rate) = mean_std(&per_seed);
        rows.push(SweepRow {
            batch_size: bs,
            mean_rate,
            std_rate,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreimageReport {
    pub natural_ratios: Vec<f64>,
    pub robust_ratios: Vec<f64>,
    pub natural_median: f64,
    pub robust_median: f64,
}

/// Collision attack on consecutive evaluation pairs `(2i, 2i+1)` against
/// both extractors.
pub fn preimage_stage(cfg: &ExperimentConfig, natural: &FeatureExtractor, robust: &FeatureExtractor, eval: &Dataset) -> Result<PreimageReport> {
    let pairs = cfg.preimage.pairs;
    if 2 * pairs > eval.len() {
        return Err(Error::Config(format!("{pairs} pairs need {} evaluation images", 2 * pairs)));
    }
    let run = |fe: &FeatureExtractor| -> Result<Vec<f64>> {
        (0..pairs)
            .map(|i| {
                preimage_attack(&eval.images[2 * i], &eval.images[2 * i + 1], fe, &cfg.preimage.budget, cfg.preimage.tv_weight)
                    .map(|r| r.ratio())
            })
            .collect()
    };
    let natural_ratios = run(natural)?;
    let robust_ratios = run(robust)?;
    Ok(PreimageReport {
        natural_median: median(&natural_ratios),
        robust_median: median(&robust_ratios),
        natural_ratios,
        robust_ratios,
    })
}

/// Stage runner over an output directory.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

/// Stage result: whether the stage executed or was found up to date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

const STAMP: &str = ".stamp";

impl Runner {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out, jobs: jobs.max(1) })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Runs `body` unless `<stage>/.stamp` already records the digest of the
    /// config, the stage key and the bytes of every input.
    fn stage(&self, name: &str, key: &str, inputs: &[&str], body: impl FnOnce(&Path) -> Result<()>) -> Result<Outcome> {
        let mut h = Sha256::new();
        h.update(self.cfg.content_hash().as_bytes());
        h.update(name.as_bytes());
        h.update(key.as_bytes());
        for rel in inputs {
            let p = self.path(rel);
            let bytes = fs::read(&p).map_err(|_| Error::MissingInput(p.clone()))?;
            h.update(rel.as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        let digest = hex(&h.finalize());
        let dir = self.path(name);
        let stamp = dir.join(STAMP);
        if fs::read_to_string(&stamp).is_ok_and(|s| s == digest) {
            log::info!("{name}: up to date");
            return Ok(Outcome::UpToDate);
        }
        fs::create_dir_all(&dir)?;
        let _ = fs::remove_file(&stamp);
        log::info!("{name}: running");
        body(&dir)?;
        fs::write(&stamp, digest)?;
        Ok(Outcome::Ran)
    }

    pub fn write_config(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let p = self.path("config.json");
        let mut stored = self.cfg.clone();
        stored.output_dir = PathBuf::from(".");
        let text = stored.to_json();
        if fs::read_to_string(&p).ok().as_deref() != Some(text.as_str()) {
            fs::write(p, text)?;
        }
        Ok(())
    }

    fn load_model(&self, rel: &str) -> Result<Classifier> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingInput(p));
        }
        Classifier::load(&p)
    }

    pub fn pretrain_at(&self) -> Result<Outcome> {
        self.stage("pretrain", "", &[], |dir| {
            let ds = build_datasets(&self.cfg)?;
            let p = pretrain(&self.cfg, &ds)?;
            p.natural.save(&dir.join("natural.ck"))?;
            p.robust.save(&dir.join("robust.ck"))?;
            let mut w = csv::Writer::from_path(dir.join("history.csv")).map_err(csv_io)?;
            w.write_record(["model", "epoch", "loss", "natural_acc", "robust_acc"]).map_err(csv_io)?;
            for (tag, hist) in [("natural", &p.natural_history), ("robust", &p.robust_history)] {
                for e in hist {
                    w.write_record([
                        tag.to_string(),
                        e.epoch.to_string(),
                        e.loss.to_string(),
                        e.natural_acc.to_string(),
                        e.robust_acc.to_string(),
                    ])
                    .map_err(csv_io)?;
                }
            }
            w.flush()?;
            Ok(())
        })
    }

    pub fn spab_train(&self) -> Result<Outcome> {
        self.stage("spab", "", &["pretrain/robust.ck"], |dir| {
            let robust = self.load_model("pretrain/robust.ck")?;
            let ds = build_datasets(&self.cfg)?;
            let (model, trace) = spab_stage(&self.cfg, &robust.extractor, &ds)?;
            model.save(&dir.join("model.ck"))?;
            write_trace_csv(fs::File::create(dir.join("trace.csv"))?, &trace)
        })
    }

    pub fn fed_round(&self) -> Result<Outcome> {
        self.stage("round", "", &["spab/model.ck"], |dir| {
            let model = self.load_model("spab/model.ck")?;
            let ds = build_datasets(&self.cfg)?;
            let r = round_stage(&self.cfg, &model, &ds.private)?;
            r.update.to_checkpoint().save(&dir.join("update.ck"))?;
            let mut ck = Checkpoint::new(format!("client_batch({})", r.labels.len()));
            ck.push("images", r.images);
            ck.push("labels", Tensor::from_vec(r.labels.iter().map(|&l| l as f64).collect()));
            ck.save(&dir.join("client_batch.ck"))
        })
    }

    pub fn extract(&self) -> Result<Outcome> {
        self.stage("extract", "", &["round/update.ck"], |dir| {
            let update = GradientUpdate::from_checkpoint(&Checkpoint::load(&self.path("round/update.ck"))?)?;
            let cands = extract_stage(&update)?;
            candidates_to_checkpoint(&cands, update.w.shape()[0])?.save(&dir.join("candidates.ck"))?;
            let meta: Vec<_> = cands
                .iter()
                .map(|c| serde_json::json!({"source_column": c.source_column, "bias_grad": c.bias_grad, "group": c.group}))
                .collect();
            write_json(&dir.join("candidates.json"), &meta)
        })
    }

    pub fn reconstruct(&self) -> Result<Outcome> {
        self.stage("reconstruct", "", &["spab/model.ck", "extract/candidates.ck"], |dir| {
            let model = self.load_model("spab/model.ck")?;
            let cands = candidates_from_checkpoint(&Checkpoint::load(&self.path("extract/candidates.ck"))?)?;
            let results = reconstruct_all(&model.extractor, &cands, &self.cfg.ir_match, self.cfg.master_seed, self.jobs)?;
            let mut report = Vec::with_capacity(results.len());
            for (i, r) in results.iter().enumerate() {
                let file = format!("rec_{i:03}.ppm");
                fs::write(dir.join(&file), encode_ppm(&r.image)?)?;
                report.push(serde_json::json!({
                    "candidate": i,
                    "image": file,
                    "best_loss": r.best_loss,
                    "best_iteration": r.best_iteration,
                    "ir_distance": r.ir_distance,
                }));
            }
            let mut ck = Checkpoint::new(format!("reconstructions({})", results.len()));
            for (i, r) in results.into_iter().enumerate() {
                ck.push(format!("rec.{i}"), r.image);
            }
            ck.save(&dir.join("images.ck"))?;
            write_json(&dir.join("report.json"), &report)
        })
    }

    pub fn preimage(&self) -> Result<Outcome> {
        self.stage("preimage", "", &["pretrain/natural.ck", "pretrain/robust.ck"], |dir| {
            let natural = self.load_model("pretrain/natural.ck")?;
            let robust = self.load_model("pretrain/robust.ck")?;
            let ds = build_datasets(&self.cfg)?;
            let rep = preimage_stage(&self.cfg, &natural.extractor, &robust.extractor, &ds.eval)?;
            let mut w = csv::Writer::from_path(dir.join("ratios.csv")).map_err(csv_io)?;
            w.write_record(["pair", "natural_ratio", "robust_ratio"]).map_err(csv_io)?;
            for (i, (a, b)) in rep.natural_ratios.iter().zip(&rep.robust_ratios).enumerate() {
                w.write_record([i.to_string(), a.to_string(), b.to_string()]).map_err(csv_io)?;
            }
            w.flush()?;
            write_json(&dir.join("report.json"), &rep)
        })
    }

    /// Scans `model` (default: the SpAB model of this run) and returns the
    /// report. The report is also written under `detect/`.
    pub fn detect(&self, model: Option<&Path>) -> Result<ScanReport> {
        let default = self.path("spab/model.ck");
        let model_path = model.unwrap_or(&default);
        if !model_path.exists() {
            return Err(Error::MissingInput(model_path.to_path_buf()));
        }
        let key = hex(&Sha256::digest(fs::read(model_path)?));
        let mut report = None;
        self.stage("detect", &key, &[], |dir| {
            let m = Classifier::load(model_path)?;
            let rep = scan_model(&m, &self.cfg.detection, Some(&expected_descriptor(&self.cfg)?))?;
            write_report_csv(fs::File::create(dir.join("vectors.csv"))?, &rep)?;
            write_json(&dir.join("report.json"), &rep)?;
            report = Some(rep);
            Ok(())
        })?;
        match report {
            Some(r) => Ok(r),
            None => Ok(serde_json::from_slice(&fs::read(self.path("detect/report.json"))?)?),
        }
    }

    /// Scores the reconstructions of this run's round and, when
    /// `sweep` is given, measures the leakage rate over those batch sizes.
    pub fn evaluate(&self, sweep: Option<&[usize]>) -> Result<Outcome> {
        let sweep_key = sweep.map(|s| format!("{s:?}")).unwrap_or_default();
        let inputs = ["spab/model.ck", "round/client_batch.ck", "extract/candidates.ck", "reconstruct/images.ck"];
        self.stage("evaluate", &sweep_key, &inputs, |dir| {
            let model = self.load_model("spab/model.ck")?;
            let batch = Checkpoint::load(&self.path("round/client_batch.ck"))?;
            let images = batch.get("images")?.clone();
            let labels: Vec<usize> = batch.get("labels")?.data().iter().map(|&l| l as usize).collect();
            let cands = candidates_from_checkpoint(&Checkpoint::load(&self.path("extract/candidates.ck"))?)?;
            let recs_ck = Checkpoint::load(&self.path("reconstruct/images.ck"))?;
            let recs: Vec<Tensor> = recs_ck.tensors.into_iter().map(|(_, t)| t).collect();
            let true_irs = model.extractor.irs(&images)?;
            let ev = &self.cfg.evaluate;
            let score = score_round(&recs, &cands, &images, &labels, &true_irs, ev.ssim_threshold)?;

            let mut baseline = Vec::with_capacity(labels.len());
            for p in 0..labels.len() {
                let mut rng = rng_for(self.cfg.master_seed, &format!("baseline/{p}"));
                let img = random_baseline(true_irs.row(p), &model.extractor, ev.baseline_draws, self.cfg.ir_match.alpha, &mut rng)?;
                baseline.push(psnr(&img, &images.select(p))?);
            }

            let mut w = csv::Writer::from_path(dir.join("samples.csv")).map_err(csv_io)?;
            w.write_record(["index", "label", "candidate", "cosine", "psnr", "ssim", "baseline_psnr"]).map_err(csv_io)?;
            for (s, b) in score.samples.iter().zip(&baseline) {
                w.write_record([
                    s.index.to_string(),
                    s.label.to_string(),
                    s.candidate.map(|c| c.to_string()).unwrap_or_default(),
                    s.cosine.to_string(),
                    format_psnr(s.psnr),
                    s.ssim.to_string(),
                    format_psnr(*b),
                ])
                .map_err(csv_io)?;
            }
            w.flush()?;

            let psnrs: Vec<f64> = score.samples.iter().map(|s| s.psnr.min(100.0)).collect();
            let ssims: Vec<f64> = score.samples.iter().map(|s| s.ssim).collect();
            let base: Vec<f64> = baseline.iter().map(|b| b.min(100.0)).collect();
            let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_io)?;
            w.write_record(["method", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "rate"]).map_err(csv_io)?;
            let (pm, ps) = mean_std(&psnrs);
            let (sm, ss) = mean_std(&ssims);
            w.write_record(["ir_match".into(), pm.to_string(), ps.to_string(), sm.to_string(), ss.to_string(), score.rate.to_string()])
                .map_err(csv_io)?;
            let (bm, bsd) = mean_std(&base);
            w.write_record(["random_baseline".into(), bm.to_string(), bsd.to_string(), String::new(), String::new(), String::new()])
                .map_err(csv_io)?;
            w.flush()?;

            let sweep_rows = match sweep {
                Some(sizes) => {
                    let ds = build_datasets(&self.cfg)?;
                    let rows = leakage_sweep(&model, &ds.private, sizes, ev.sweep_seeds, ev.sweep_batches_per_seed, self.cfg.master_seed)?;
                    let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(csv_io)?;
                    w.write_record(["batch_size", "leakage_rate", "std"]).map_err(csv_io)?;
                    for r in &rows {
                        w.write_record([r.batch_size.to_string(), r.mean_rate.to_string(), r.std_rate.to_string()])
                            .map_err(csv_io)?;
                    }
                    w.flush()?;
                    Some(rows)
                }
                None => None,
            };
            write_json(
                &dir.join("report.json"),
                &serde_json::json!({
                    "score": score,
                    "candidates": cands.len(),
                    "batch_size": labels.len(),
                    "baseline_psnr_mean": bm,
                    "sweep": sweep_rows,
                }),
            )
        })
    }

    /// Every stage in order. The detection verdict is recorded but does not
    /// stop the run.
    pub fn demo(&self) -> Result<()> {
        self.write_config()?;
        self.pretrain_at()?;
        self.spab_train()?;
        self.fed_round()?;
        self.extract()?;
        self.reconstruct()?;
        self.preimage()?;
        self.detect(None)?;
        let sizes = self.cfg.evaluate.sweep_batch_sizes.clone();
        self.evaluate(Some(&sizes))?;
        Ok(())
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
