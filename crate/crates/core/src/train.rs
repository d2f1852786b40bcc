//! Training harness: leave-one-domain-out runs over the composite
//! objective, fixed-seed benchmark grids, ablations, and binary
//! checkpoints with bit-exact resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{rate_keyed_defaults, NoiseKind, TrainConfig};
use crate::data::{
    default_domains, generate_domain, lodo_split, Dataset, DatasetManifest, SequenceRecord,
    StageMarkov,
};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::metrics::{accumulate, accuracy, export_hypnogram, macro_f1, ConfusionMatrix};
use crate::model::{bind, classify, encode, init_params, ModelDims, ModelParams};
use crate::noise::{asymmetric_matrix, default_sleep_adjacency, inject, symmetric_matrix};
use crate::objective::{total_loss, Batch, Buffers, LossBreakdown, StepContext};
use crate::optim::AdamW;
use crate::regularizers::{warmup_alpha, ElrBuffer, FourierBuffer};
use crate::tensor::Tensor;

/// SplitMix64-style mix of a base seed with two stream tags, so every
/// RNG consumer gets an independent, epoch-addressable stream.
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    h
}

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Build the configured dataset: read it from disk, or synthesize the
/// default graded-shift domains and inject the configured label noise.
pub fn load_or_generate(cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    if let Some(path) = &cfg.data_path {
        let ds = crate::data::read_dataset(path)?;
        if ds.manifest.dims != cfg.dims {
            return Err(Error::Config(format!(
                "dataset dims {:?} do not match configured dims {:?}",
                ds.manifest.dims, cfg.dims
            )));
        }
        if ds.manifest.noise_kind != cfg.noise_kind.to_string()
            || (ds.manifest.noise_rate - cfg.noise_rate).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "dataset noise {}@{} does not match configured {}@{}",
                ds.manifest.noise_kind, ds.manifest.noise_rate, cfg.noise_kind, cfg.noise_rate
            )));
        }
        return Ok(ds);
    }
    generate_dataset(cfg)
}

/// Synthesize all domains and corrupt labels in place. Per-record
/// noise streams are keyed by sample id, so the corruption of one
/// sequence never depends on dataset ordering.
pub fn generate_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let specs = default_domains(cfg.dims.channels)?;
    let markov = StageMarkov::hypnogram_default(cfg.dims.c)?;
    let mut records = Vec::new();
    for spec in &specs {
        let seed = derive_seed(cfg.generator_seed, spec.domain_id as u64, 0);
        records.extend(generate_domain(spec, cfg.sequences_per_domain, &cfg.dims, &markov, seed)?);
    }
    let noise_seed = derive_seed(cfg.generator_seed, 0x6e6f_6973, 0);
    if cfg.noise_kind != NoiseKind::None {
        let matrix = match cfg.noise_kind {
            NoiseKind::Sym => symmetric_matrix(cfg.dims.c, cfg.noise_rate)?,
            NoiseKind::Asym => {
                let adj = cfg.adjacency.clone().unwrap_or_else(default_sleep_adjacency);
                asymmetric_matrix(cfg.dims.c, cfg.noise_rate, &adj)?
            }
            NoiseKind::None => unreachable!(),
        };
        for rec in &mut records {
            let (noisy, _) =
                inject(&rec.y_clean, &matrix, derive_seed(noise_seed, rec.sample_id, 1))?;
            rec.y_noisy = noisy;
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            dims: cfg.dims.clone(),
            domains: specs,
            generator_seed: cfg.generator_seed,
            noise_kind: cfg.noise_kind.to_string(),
            noise_rate: cfg.noise_rate,
            noise_seed,
        },
        records,
    })
}

fn by_domain(records: Vec<SequenceRecord>) -> BTreeMap<usize, Vec<SequenceRecord>> {
    let mut map: BTreeMap<usize, Vec<SequenceRecord>> = BTreeMap::new();
    for rec in records {
        map.entry(rec.domain_id).or_default().push(rec);
    }
    map
}

/// Leave-one-domain-out split with a per-domain 90/10 train/validation
/// hold-out. The validation set is diagnostic only; it never stops or
/// steers training.
pub fn prepare_split(
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    let dataset = load_or_generate(cfg)?;
    let grouped = by_domain(dataset.records);
    let (sources, test) = lodo_split(&grouped, cfg.target_domain)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (domain, mut recs) in by_domain(sources) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain as u64, STREAM_SPLIT));
        recs.shuffle(&mut rng);
        let n_train = (recs.len() * 9).div_ceil(10);
        for (i, rec) in recs.into_iter().enumerate() {
            if i < n_train {
                train.push(rec);
            } else {
                val.push(rec);
            }
        }
    }
    Ok((train, val, test))
}

fn make_batch(records: &[&SequenceRecord], dims: &ModelDims) -> Result<Batch> {
    let b = records.len();
    let mut x = Vec::with_capacity(b * dims.t * dims.input_len());
    let mut y_noisy = Vec::with_capacity(b * dims.t);
    let mut sample_ids = Vec::with_capacity(b);
    let mut domain_ids = Vec::with_capacity(b);
    for rec in records {
        x.extend_from_slice(&rec.x);
        y_noisy.extend_from_slice(&rec.y_noisy);
        sample_ids.push(rec.sample_id);
        domain_ids.push(rec.domain_id);
    }
    Ok(Batch {
        x: Tensor::new(vec![b, dims.t, dims.channels, dims.epoch_len], x)?,
        y_noisy,
        sample_ids,
        domain_ids,
    })
}

/// Round-robin interleave of per-domain shuffled records, then fixed
/// chunks. Interleaving keeps every chunk multi-domain until a domain
/// runs dry; chunks that still end up single-domain (or smaller than
/// two records) are dropped when alignment is active.
fn plan_batches<'a>(
    train: &'a [SequenceRecord],
    batch_size: usize,
    need_multi_domain: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a SequenceRecord>> {
    let mut per_domain: BTreeMap<usize, Vec<&SequenceRecord>> = BTreeMap::new();
    for rec in train {
        per_domain.entry(rec.domain_id).or_default().push(rec);
    }
    let mut queues: Vec<Vec<&SequenceRecord>> = per_domain.into_values().collect();
    for q in &mut queues {
        q.shuffle(rng);
    }
    let mut order = Vec::with_capacity(train.len());
    let mut cursor = 0;
    while !queues.is_empty() {
        cursor %= queues.len();
        order.push(queues[cursor].pop().expect("non-empty queue"));
        if queues[cursor].is_empty() {
            queues.remove(cursor);
        } else {
            cursor += 1;
        }
    }
    order
        .chunks(batch_size)
        .filter(|chunk| {
            if chunk.len() < 2 {
                return false;
            }
            if need_multi_domain {
                let first = chunk[0].domain_id;
                chunk.iter().any(|r| r.domain_id != first)
            } else {
                true
            }
        })
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// Epoch-wise argmax predictions, one Vec<usize> of length T per record.
pub fn predict(
    params: &ModelParams,
    dims: &ModelDims,
    records: &[SequenceRecord],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceRecord> = chunk.iter().collect();
        let batch = make_batch(&refs, dims)?;
        let tape = Tape::new();
        let pv = bind(params, &tape);
        let x = tape.constant(batch.x);
        let f = encode(&tape, x, &pv, dims, 0.0, false, 0)?;
        let z = tape.value_cloned(classify(&tape, f, &pv, dims)?);
        for b in 0..chunk.len() {
            let mut preds = Vec::with_capacity(dims.t);
            for t in 0..dims.t {
                let row = &z.data()[(b * dims.t + t) * dims.c..(b * dims.t + t + 1) * dims.c];
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty row");
                preds.push(arg);
            }
            out.push(preds);
        }
    }
    Ok(out)
}

fn evaluate(
    params: &ModelParams,
    dims: &ModelDims,
    records: &[SequenceRecord],
    batch_size: usize,
    use_clean: bool,
) -> Result<(f64, f64)> {
    let preds = predict(params, dims, records, batch_size)?;
    let mut cm = ConfusionMatrix::new(dims.c)?;
    for (rec, pred) in records.iter().zip(&preds) {
        let truth = if use_clean { &rec.y_clean } else { &rec.y_noisy };
        accumulate(&mut cm, truth, pred)?;
    }
    Ok((accuracy(&cm)?, macro_f1(&cm)?))
}

/// One training epoch's logged summary.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub mean_total: f64,
    pub steps: usize,
    pub val_acc: f64,
    pub val_mf1: f64,
}

/// Everything one (config, seed) run produced.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    pub target_acc: f64,
    pub target_mf1: f64,
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<LossBreakdown>,
}

/// Multi-seed run summary; everything except `wall_secs` is a pure
/// function of the config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub per_seed: Vec<SeedReport>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_mf1: f64,
    pub std_mf1: f64,
    pub wall_secs: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Optional harness plumbing for a single-seed run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Write a checkpoint here after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Restore state from this checkpoint before training.
    pub resume_from: Option<PathBuf>,
    /// Stop after this epoch (for interruption tests); the run report
    /// then reflects the truncated run.
    pub stop_after_epoch: Option<usize>,
}

struct RunState {
    params: ModelParams,
    opt: AdamW,
    buffers: Buffers,
    epochs_done: usize,
}

/// Train one seed to completion (or to `stop_after_epoch`), then score
/// the held-out target domain on clean labels.
pub fn train_seed(cfg: &TrainConfig, seed: u64, opts: &TrainOptions) -> Result<SeedReport> {
    cfg.validate()?;
    let obj = cfg.objective()?;
    let (train, val, test) = prepare_split(cfg, seed)?;
    let need_multi_domain = cfg.lambda_ep > 0.0 || cfg.lambda_seq > 0.0;

    let mut state = match &opts.resume_from {
        Some(path) => restore_checkpoint(path, cfg, seed)?,
        None => {
            let params = init_params(cfg.dims.clone(), seed)?;
            let opt = AdamW::new(cfg.lr, cfg.weight_decay, &params)?;
            RunState {
                params,
                opt,
                buffers: Buffers {
                    elr: ElrBuffer::new(cfg.dims.c, cfg.m_elr, cfg.effective_lambda_elr())?,
                    fourier: FourierBuffer::new(cfg.m_f, cfg.effective_lambda_f())?,
                },
                epochs_done: 0,
            }
        }
    };

    let last_epoch = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut epoch_logs = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in state.epochs_done + 1..=last_epoch {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, STREAM_SHUFFLE));
        let batches = plan_batches(&train, cfg.batch_size, need_multi_domain, &mut shuffle_rng);
        if batches.is_empty() {
            return Err(Error::Config("no viable training batches".into()));
        }
        let mut epoch_total = 0.0;
        for (bi, chunk) in batches.iter().enumerate() {
            let batch = make_batch(chunk, &cfg.dims)?;
            let tape = Tape::new();
            let pv = bind(&state.params, &tape);
            let ctx = StepContext {
                epoch_t: epoch,
                dropout_seed: derive_seed(seed, (epoch as u64) << 20 | bi as u64, STREAM_DROPOUT),
                training: true,
                update_buffers: true,
            };
            let (loss, bd) =
                total_loss(&tape, &batch, &pv, &cfg.dims, &mut state.buffers, &obj, ctx)?;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = pv
                .all()
                .iter()
                .zip(state.params.tensors())
                .map(|((_, v), (_, t))| {
                    tape.grad(*v).unwrap_or_else(|| vec![0.0; t.data().len()])
                })
                .collect();
            state.opt.step(&mut state.params, &grads)?;
            epoch_total += bd.weighted_total;
            step_losses.push(bd);
        }
        let (val_acc, val_mf1) = evaluate(&state.params, &cfg.dims, &val, cfg.batch_size, false)?;
        epoch_logs.push(EpochLog {
            epoch,
            alpha: warmup_alpha(obj.warmup, epoch),
            mean_total: epoch_total / batches.len() as f64,
            steps: batches.len(),
            val_acc,
            val_mf1,
        });
        state.epochs_done = epoch;
        if let Some(path) = &opts.checkpoint_path {
            write_checkpoint(path, cfg, seed, &state)?;
        }
    }

    let (target_acc, target_mf1) =
        evaluate(&state.params, &cfg.dims, &test, cfg.batch_size, true)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        if let Some(first) = test.first() {
            let preds = predict(&state.params, &cfg.dims, std::slice::from_ref(first), 1)?;
            export_hypnogram(
                &first.y_clean,
                &preds[0],
                &dir.join(format!("hypnogram_seed{seed}.tsv")),
            )?;
        }
        let mut lines = String::new();
        for bd in &step_losses {
            lines.push_str(&serde_json::to_string(bd).map_err(|e| Error::Data(e.to_string()))?);
            lines.push('\n');
        }
        std::fs::write(dir.join(format!("loss_seed{seed}.jsonl")), lines)?;
    }
    Ok(SeedReport { seed, target_acc, target_mf1, epochs: epoch_logs, step_losses })
}

/// Train every configured seed and aggregate mean ± sample std.
pub fn train(cfg: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    let per_seed: Vec<SeedReport> = cfg
        .seeds
        .iter()
        .map(|&s| train_seed(cfg, s, &TrainOptions::default()))
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = per_seed.iter().map(|r| r.target_acc).collect();
    let mf1s: Vec<f64> = per_seed.iter().map(|r| r.target_mf1).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    let (mean_mf1, std_mf1) = mean_std(&mf1s);
    Ok(RunReport {
        config: cfg.clone(),
        per_seed,
        mean_acc,
        std_acc,
        mean_mf1,
        std_mf1,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

const CKPT_MAGIC: &[u8; 4] = b"NLDC";
const CKPT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct SavedElr {
    momentum: f64,
    lambda: f64,
    classes: usize,
    entries: Vec<(u64, usize, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct SavedFourier {
    momentum: f64,
    lambda: f64,
    spectrum_len: Option<usize>,
    entries: Vec<(u64, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    config_hash: String,
    seed: u64,
    epochs_done: usize,
    optimizer: AdamW,
    elr: SavedElr,
    fourier: SavedFourier,
}

fn write_checkpoint(path: &Path, cfg: &TrainConfig, seed: u64, state: &RunState) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        config_hash: cfg.content_hash(),
        seed,
        epochs_done: state.epochs_done,
        optimizer: state.opt.clone(),
        elr: SavedElr {
            momentum: state.buffers.elr.momentum,
            lambda: state.buffers.elr.lambda,
            classes: state.buffers.elr.classes(),
            entries: state
                .buffers
                .elr
                .targets
                .iter()
                .map(|(&(sid, t), v)| (sid, t, v.clone()))
                .collect(),
        },
        fourier: SavedFourier {
            momentum: state.buffers.fourier.momentum,
            lambda: state.buffers.fourier.lambda,
            spectrum_len: state.buffers.fourier.spectrum_len(),
            entries: state
                .buffers
                .fourier
                .targets
                .iter()
                .map(|(&sid, v)| (sid, v.clone()))
                .collect(),
        },
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Data(e.to_string()))?;
    let params = state.params.to_bytes()?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&meta_json);
    payload.extend_from_slice(&(params.len() as u64).to_le_bytes());
    payload.extend_from_slice(&params);
    let digest = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(payload.len() + 38);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

fn restore_checkpoint(path: &Path, cfg: &TrainConfig, seed: u64) -> Result<RunState> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 38 || &bytes[0..4] != CKPT_MAGIC {
        return Err(Error::Integrity(format!("{}: not a training checkpoint", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(Error::Version { found: version, expected: CKPT_VERSION });
    }
    let payload = &bytes[38..];
    let digest = Sha256::digest(payload);
    if digest.as_slice() != &bytes[6..38] {
        return Err(Error::Integrity(format!(
            "{}: checkpoint digest mismatch, file corrupt",
            path.display()
        )));
    }
    let read_u64 = |at: usize| -> Result<u64> {
        payload
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))
    };
    let meta_len = read_u64(0)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(
        payload
            .get(8..8 + meta_len)
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?,
    )
    .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
    let params_len = read_u64(8 + meta_len)? as usize;
    let params = ModelParams::from_bytes(
        payload
            .get(16 + meta_len..16 + meta_len + params_len)
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?,
    )?;

    if meta.config_hash != cfg.content_hash() {
        let diff = meta.config.diff(cfg).join("; ");
        return Err(Error::Config(format!(
            "checkpoint was written under a different config; changed fields: {diff}"
        )));
    }
    if meta.seed != seed {
        return Err(Error::Config(format!(
            "checkpoint holds seed {}, resume requested seed {seed}",
            meta.seed
        )));
    }

    let mut elr = ElrBuffer::new(meta.elr.classes, meta.elr.momentum, meta.elr.lambda)?;
    for (sid, t, v) in meta.elr.entries {
        elr.targets.insert((sid, t), v);
    }
    let mut fourier = FourierBuffer::new(meta.fourier.momentum, meta.fourier.lambda)?;
    if let Some(len) = meta.fourier.spectrum_len {
        fourier.set_spectrum_len(len);
    }
    for (sid, v) in meta.fourier.entries {
        fourier.targets.insert(sid, v);
    }
    Ok(RunState {
        params,
        opt: meta.optimizer,
        buffers: Buffers { elr, fourier },
        epochs_done: meta.epochs_done,
    })
}

/// Benchmark grid: noise settings × target domains, each trained over
/// the configured seed list with rate-keyed hyperparameters.
#[derive(Clone, Debug)]
pub struct BenchGrid {
    pub base: TrainConfig,
    pub kinds: Vec<NoiseKind>,
    pub rates: Vec<f64>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCell {
    pub kind: NoiseKind,
    pub rate: f64,
    pub target: usize,
    pub report: RunReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

/// A grid cell's config: the base with noise setting, target, and all
/// rate-keyed hyperparameters swapped in.
pub fn cell_config(base: &TrainConfig, kind: NoiseKind, rate: f64, target: usize) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.noise_kind = kind;
    cfg.noise_rate = if kind == NoiseKind::None { 0.0 } else { rate };
    cfg.target_domain = target;
    let keyed = rate_keyed_defaults(cfg.noise_rate);
    cfg.lambda_ce = keyed.lambda_ce;
    cfg.lambda_im = keyed.lambda_im;
    cfg.lambda_elr = keyed.lambda_elr;
    cfg.m_elr = keyed.m_elr;
    cfg.lambda_f = keyed.lambda_f;
    cfg.m_f = keyed.m_f;
    cfg.warmup_end = keyed.warmup_end;
    cfg
}

pub fn run_benchmark(grid: &BenchGrid) -> Result<BenchReport> {
    grid.base.validate()?;
    let mut cells = Vec::new();
    for &kind in &grid.kinds {
        for &rate in &grid.rates {
            for &target in &grid.targets {
                let cfg = cell_config(&grid.base, kind, rate, target);
                cells.push(BenchCell { kind, rate, target, report: train(&cfg)? });
            }
        }
    }
    Ok(BenchReport { cells })
}

/// Per-cell CSV plus per-(kind, rate) aggregate rows averaged over
/// targets, mirroring a benchmark-table layout.
pub fn benchmark_table(rep: &BenchReport) -> String {
    let mut out = String::from("kind,rate,target,mean_acc,std_acc,mean_mf1,std_mf1\n");
    for c in &rep.cells {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            c.kind, c.rate, c.target, c.report.mean_acc, c.report.std_acc, c.report.mean_mf1,
            c.report.std_mf1
        ));
    }
    let mut groups: BTreeMap<(String, String), Vec<&BenchCell>> = BTreeMap::new();
    for c in &rep.cells {
        groups.entry((c.kind.to_string(), format!("{}", c.rate))).or_default().push(c);
    }
    out.push_str("kind,rate,avg_mean_acc,avg_mean_mf1\n");
    for ((kind, rate), cells) in groups {
        let acc = cells.iter().map(|c| c.report.mean_acc).sum::<f64>() / cells.len() as f64;
        let mf1 = cells.iter().map(|c| c.report.mean_mf1).sum::<f64>() / cells.len() as f64;
        out.push_str(&format!("{kind},{rate},{acc:.4},{mf1:.4}\n"));
    }
    out
}

/// One row of the regularizer ablation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub elr_on: bool,
    pub felr_on: bool,
    pub cdr_on: bool,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_mf1: f64,
    pub per_seed_acc: Vec<f64>,
}

/// All 2³ on/off combinations of the three regularizer families, each
/// trained over the configured seeds on the base noise setting.
pub fn run_ablation(base: &TrainConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for bits in 0..8u8 {
        let (elr_on, felr_on, cdr_on) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        let mut cfg = base.clone();
        cfg.disable_elr = !elr_on;
        cfg.disable_felr = !felr_on;
        cfg.disable_cdr = !cdr_on;
        let report = train(&cfg)?;
        rows.push(AblationRow {
            elr_on,
            felr_on,
            cdr_on,
            mean_acc: report.mean_acc,
            std_acc: report.std_acc,
            mean_mf1: report.mean_mf1,
            per_seed_acc: report.per_seed.iter().map(|r| r.target_acc).collect(),
        });
    }
    Ok(rows)
}
