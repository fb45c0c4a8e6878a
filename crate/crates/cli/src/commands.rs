//! One handler per subcommand. Each returns the JSON value for stdout;
//! schemas/ carries one schema per command describing exactly that value.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::PathBuf;

use clap::{ArgMatches, Args};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use capalign_core::autodiff::Tape;
use capalign_core::datapipe::{
    self, sidecar_for, truncate_bilingual, whitespace_tokens, DEFAULT_BN_BUDGET, DEFAULT_CAP,
    DEFAULT_EN_BUDGET, DEFAULT_THRESHOLD,
};
use capalign_core::diagnostics::{alignment_report, bleu_n, EmbeddingSet, SetLabel};
use capalign_core::losses::{infonce, masked_ce, pal_loss, LogitsBatch, PooledPairBatch};
use capalign_core::mat::Mat;
use capalign_core::numio::{
    load_tensor, read_records, save_tensor, write_records_csv, RecordFormat, RunConfig,
    TensorFile,
};
use capalign_core::objective::{
    ce_node, grad_check as fd_grad, infonce_node, pal_cos_node, topk_pool_node,
    transport_loss_node,
};
use capalign_core::ot::{sinkhorn as solve_sinkhorn, CostMatrix};
use capalign_core::toycap::{
    generate as decode, load_checkpoint, make_batch, make_dataset, save_checkpoint, train_with,
    SceneGenConfig, TrainMode, TrainOptions, TripletBatch,
};

use crate::{merge_fields, reject_unknown_keys, runtime, CliError, ModeArg};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_mat(path: &PathBuf) -> Result<Mat, CliError> {
    let t = load_tensor(path).map_err(runtime)?;
    t.to_mat().map_err(runtime)
}

fn load_vec(path: &PathBuf) -> Result<Vec<f64>, CliError> {
    let t = load_tensor(path).map_err(runtime)?;
    if t.rank() != 1 {
        return Err(CliError::Runtime(format!(
            "{} holds a rank-{} tensor, expected rank 1",
            path.display(),
            t.rank()
        )));
    }
    let vals = t
        .f64_values()
        .ok_or_else(|| CliError::Runtime(format!("{} is not an f64 tensor", path.display())))?;
    Ok(vals.to_vec())
}

fn read_record_file(path: &PathBuf) -> Result<Vec<capalign_core::numio::CaptionPairRecord>, CliError> {
    let format = RecordFormat::from_path(path)
        .ok_or_else(|| usage(format!("{}: unrecognized record format", path.display())))?;
    let file = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    read_records(file, format).map_err(runtime)
}

// ---------------------------------------------------------------- verify-pairs

#[derive(Args, Debug)]
pub struct VerifyPairsArgs {
    /// Caption records, CSV or JSONL by extension.
    #[arg(long)]
    records: PathBuf,
    /// N x 2E tensor, row i = [english_i, bengali_i] for record i.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Where to write the records with similarity and valid filled in (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl VerifyPairsArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["records", "embeddings", "threshold", "out", "seed"])?;
        merge_fields!(self, sub, cfg; records, embeddings, threshold, out);
        Ok(())
    }
}

pub fn verify_pairs(args: VerifyPairsArgs) -> Result<Value, CliError> {
    if !args.threshold.is_finite() {
        return Err(usage(format!("threshold must be finite, got {}", args.threshold)));
    }
    let mut records = read_record_file(&args.records)?;
    let embeddings = load_mat(&args.embeddings)?;
    let summary =
        datapipe::verify_shard(&mut records, &embeddings, args.threshold).map_err(runtime)?;
    if let Some(out) = &args.out {
        let file = File::create(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        write_records_csv(file, &records).map_err(runtime)?;
    }
    log::info!("verified {} pairs, accepted {}", summary.total, summary.accepted);
    Ok(json!({
        "threshold": args.threshold,
        "summary": summary,
        "out": args.out.as_ref().map(|p| p.display().to_string()),
    }))
}

// ---------------------------------------------------------------- build-prompts

#[derive(Args, Debug)]
pub struct BuildPromptsArgs {
    #[arg(long)]
    records: PathBuf,
    /// Directory receiving one `<caption_id>.json` sidecar per record.
    #[arg(long)]
    out_dir: PathBuf,
    /// `name=version` entries recorded in every sidecar; repeatable.
    #[arg(long = "model-version", value_parser = parse_key_value)]
    model_versions: Vec<(String, String)>,
    /// Override the default negative prompt.
    #[arg(long)]
    negative_prompt: Option<String>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected name=version, got {s:?}"))
}

impl BuildPromptsArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(
            cfg,
            &["records", "out_dir", "model_versions", "negative_prompt", "seed"],
        )?;
        merge_fields!(self, sub, cfg; records, out_dir, model_versions, negative_prompt);
        Ok(())
    }
}

pub fn build_prompts(args: BuildPromptsArgs, seed: u64) -> Result<Value, CliError> {
    let records = read_record_file(&args.records)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| runtime(format!("{}: {e}", args.out_dir.display())))?;
    let versions: BTreeMap<String, String> = args.model_versions.iter().cloned().collect();
    let stopwords = HashSet::new();
    let mut written = 0usize;
    for rec in &records {
        let (en, bn) = truncate_bilingual(
            &whitespace_tokens(&rec.text_en),
            &whitespace_tokens(&rec.text_bn),
            DEFAULT_CAP,
            DEFAULT_EN_BUDGET,
            DEFAULT_BN_BUDGET,
            &stopwords,
            &stopwords,
        );
        let prompt = datapipe::build_prompt(&en.join(" "), &bn.join(" ")).map_err(runtime)?;
        let mut sidecar = sidecar_for(&prompt, versions.clone(), seed);
        if let Some(neg) = &args.negative_prompt {
            sidecar.negative_prompt = neg.clone();
        }
        let path = args.out_dir.join(format!("{}.json", rec.caption_id));
        let file = File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        serde_json::to_writer_pretty(file, &sidecar).map_err(runtime)?;
        written += 1;
    }
    log::info!("wrote {written} sidecars to {}", args.out_dir.display());
    Ok(json!({
        "written": written,
        "out_dir": args.out_dir.display().to_string(),
        "seed": seed,
        "negative_prompt": args
            .negative_prompt
            .unwrap_or_else(|| datapipe::DEFAULT_NEGATIVE_PROMPT.to_string()),
    }))
}

// ---------------------------------------------------------------- merge-shards

#[derive(Args, Debug)]
pub struct MergeShardsArgs {
    /// Shard files in merge order; repeatable.
    #[arg(long = "shard", required = true)]
    shards: Vec<PathBuf>,
    /// Where to write the merged records (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl MergeShardsArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["shards", "out", "seed"])?;
        merge_fields!(self, sub, cfg; shards, out);
        if self.shards.is_empty() {
            return Err(usage("at least one --shard is required"));
        }
        Ok(())
    }
}

pub fn merge_shards(args: MergeShardsArgs) -> Result<Value, CliError> {
    let (records, summary) = datapipe::merge_shards(&args.shards).map_err(runtime)?;
    if let Some(out) = &args.out {
        let file = File::create(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        write_records_csv(file, &records).map_err(runtime)?;
    }
    log::info!(
        "merged {} shards into {} records ({} duplicates dropped)",
        args.shards.len(),
        summary.total,
        summary.duplicates
    );
    Ok(json!({
        "shards": args.shards.len(),
        "summary": summary,
        "out": args.out.as_ref().map(|p| p.display().to_string()),
    }))
}

// ---------------------------------------------------------------- train-toy

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    /// Batches in the procedurally generated dataset.
    #[arg(long, default_value_t = 8)]
    batches: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    /// Weight on the descriptor alignment term.
    #[arg(long, default_value_t = 0.5)]
    lambda_pal: f64,
    /// Weight on the contrastive term.
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Weight on the transport term.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Saliency softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau_attn: f64,
    /// Cumulative attention mass kept by truncation.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Decoder layers whose cross-attention feeds saliency.
    #[arg(long, default_value_t = 2)]
    last_k: usize,
    /// Contrastive softmax temperature.
    #[arg(long, default_value_t = 0.07)]
    nce_temp: f64,
    /// Entropic regularization for the transport term.
    #[arg(long, default_value_t = 0.05)]
    ot_eps: f64,
    /// Alternating-update count for the transport solver.
    #[arg(long, default_value_t = 30)]
    ot_iters: usize,
    /// Enable staged unfreezing (bridge, then top layer, then all).
    #[arg(long, default_value_t = false)]
    unfreeze: bool,
    /// Micro-batches averaged per optimizer step.
    #[arg(long, default_value_t = 1)]
    accum: usize,
    /// Directory to save the final model, optimizer state, and history.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Include the full per-step history in the JSON output.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    history: bool,
}

impl TrainToyArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(
            cfg,
            &[
                "epochs", "batches", "mode", "lambda_pal", "alpha", "beta", "tau_attn", "rho",
                "last_k", "nce_temp", "ot_eps", "ot_iters", "unfreeze", "accum",
                "checkpoint_dir", "history", "seed",
            ],
        )?;
        merge_fields!(self, sub, cfg;
            epochs, batches, mode, lambda_pal, alpha, beta, tau_attn, rho, last_k,
            nce_temp, ot_eps, ot_iters, unfreeze, accum, checkpoint_dir, history);
        Ok(())
    }

    fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            lambda_pal: self.lambda_pal,
            alpha: self.alpha,
            beta: self.beta,
            tau_attn: self.tau_attn,
            rho: self.rho,
            last_k: self.last_k,
            nce_temp: self.nce_temp,
            ot_eps: self.ot_eps,
            ot_iters: self.ot_iters,
            seed,
        }
    }
}

pub fn train_toy(args: TrainToyArgs, seed: u64) -> Result<Value, CliError> {
    let cfg = args.run_config(seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let scene = SceneGenConfig::default();
    let dataset = make_batches(&scene, seed, args.batches)?;
    let opts = TrainOptions {
        mode: match args.mode {
            ModeArg::Full => TrainMode::Full,
            ModeArg::CaptionOnly => TrainMode::CaptionOnly,
        },
        unfreeze: args.unfreeze,
        accum: args.accum,
        ..TrainOptions::default()
    };
    let run = train_with(&dataset, &cfg, args.epochs, &opts).map_err(runtime)?;
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        save_checkpoint(dir, &run, &cfg, &opts).map_err(runtime)?;
    }
    let last = run.history.last().expect("training always takes at least one step");
    log::info!(
        "trained {} steps, final total loss {:.4}",
        run.history.len(),
        last.losses.total
    );
    Ok(json!({
        "epochs": args.epochs,
        "steps": run.history.len(),
        "mode": match args.mode { ModeArg::Full => "full", ModeArg::CaptionOnly => "caption-only" },
        "config": cfg,
        "final": last,
        "history": if args.history { json!(run.history) } else { Value::Null },
        "checkpoint": args.checkpoint_dir.as_ref().map(|p| p.display().to_string()),
    }))
}

fn make_batches(
    scene: &SceneGenConfig,
    seed: u64,
    batches: usize,
) -> Result<Vec<TripletBatch>, CliError> {
    if batches == 0 {
        return Err(usage("--batches must be at least 1"));
    }
    make_dataset(scene, seed, batches).map_err(runtime)
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint directory written by train-toy.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene batch to caption (derived from --seed and this step index).
    #[arg(long, default_value_t = 0)]
    step: usize,
    #[arg(long, default_value_t = 1)]
    beams: usize,
    /// Maximum decoded length including the start token.
    #[arg(long)]
    max_len: Option<usize>,
}

impl GenerateArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["checkpoint", "step", "beams", "max_len", "seed"])?;
        merge_fields!(self, sub, cfg; checkpoint, step, beams, max_len);
        Ok(())
    }
}

fn token_name(id: usize) -> String {
    use capalign_core::toycap::data::{BOS_ID, COLOR_BASE, EOS_ID, N_COLORS, N_SHAPES, PAD_ID, SHAPE_BASE};
    match id {
        _ if id == PAD_ID => "<pad>".into(),
        _ if id == BOS_ID => "<bos>".into(),
        _ if id == EOS_ID => "<eos>".into(),
        _ if (COLOR_BASE..COLOR_BASE + N_COLORS).contains(&id) => {
            format!("color{}", id - COLOR_BASE)
        }
        _ if (SHAPE_BASE..SHAPE_BASE + N_SHAPES).contains(&id) => {
            format!("shape{}", id - SHAPE_BASE)
        }
        other => format!("tok{other}"),
    }
}

pub fn generate(args: GenerateArgs, seed: u64) -> Result<Value, CliError> {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(runtime)?;
    let scene = SceneGenConfig::default();
    let batch = make_batch(&scene, seed, args.step).map_err(runtime)?;
    let max_len = args.max_len.unwrap_or(ckpt.model.cfg.seq_len);
    let mut captions = Vec::new();
    for i in 0..batch.batch() {
        let ids = decode(&ckpt.model, batch.raw_real(i), max_len, args.beams).map_err(runtime)?;
        let tokens: Vec<String> = ids.iter().map(|&t| token_name(t)).collect();
        captions.push(json!({
            "image": i,
            "token_ids": ids,
            "tokens": tokens,
            "reference": batch.caption(i),
        }));
    }
    Ok(json!({
        "beams": args.beams,
        "max_len": max_len,
        "scene_seed": seed,
        "step": args.step,
        "captions": captions,
    }))
}

// ---------------------------------------------------------------- sinkhorn

#[derive(Args, Debug)]
pub struct SinkhornArgs {
    /// Cost matrix tensor (rank 2).
    #[arg(long)]
    cost: PathBuf,
    /// Row marginal tensor (rank 1).
    #[arg(long)]
    a: PathBuf,
    /// Column marginal tensor (rank 1).
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    /// Where to save the transport plan tensor.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SinkhornArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["cost", "a", "b", "eps", "iters", "out", "seed"])?;
        merge_fields!(self, sub, cfg; cost, a, b, eps, iters, out);
        Ok(())
    }
}

pub fn sinkhorn(args: SinkhornArgs) -> Result<Value, CliError> {
    let cost = CostMatrix::new(load_mat(&args.cost)?).map_err(runtime)?;
    let a = load_vec(&args.a)?;
    let b = load_vec(&args.b)?;
    let solution = solve_sinkhorn(&cost, &a, &b, args.eps, args.iters).map_err(runtime)?;
    if let Some(out) = &args.out {
        save_tensor(out, &TensorFile::from_mat(solution.plan.plan())).map_err(runtime)?;
    }
    log::info!(
        "solved {}x{} instance, cost {:.6}",
        cost.rows(),
        cost.cols(),
        solution.cost
    );
    Ok(json!({
        "rows": cost.rows(),
        "cols": cost.cols(),
        "eps": args.eps,
        "iters": args.iters,
        "cost": solution.cost,
        "row_residual": solution.plan.row_residual(),
        "col_residual": solution.plan.col_residual(),
        "plan_saved": args.out.as_ref().map(|p| p.display().to_string()),
    }))
}

// ---------------------------------------------------------------- grad-check

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Random evaluation points per loss term.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Relative-error budget for the closed-form terms.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Relative-error budget for the unrolled transport term.
    #[arg(long, default_value_t = 1e-3)]
    ot_tolerance: f64,
}

impl GradCheckArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["points", "tolerance", "ot_tolerance", "seed"])?;
        merge_fields!(self, sub, cfg; points, tolerance, ot_tolerance);
        Ok(())
    }
}

pub fn grad_check(args: GradCheckArgs, seed: u64) -> Result<Value, CliError> {
    if args.points == 0 {
        return Err(usage("--points must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suite = crate::commands::gradsuite::run_suite(
        &mut rng,
        args.points,
        args.tolerance,
        args.ot_tolerance,
    )
    .map_err(runtime)?;
    let pass = suite.values().all(|c| c.pass);
    let checks: Map<String, Value> = suite
        .iter()
        .map(|(name, c)| {
            (
                name.to_string(),
                json!({"max_rel_err": c.max_rel_err, "points": c.points, "pass": c.pass}),
            )
        })
        .collect();
    Ok(json!({
        "seed": seed,
        "points": args.points,
        "checks": checks,
        "pass": pass,
    }))
}

pub mod gradsuite {
    //! Finite-difference sweeps for each loss term, shared by the
    //! grad-check command and the test suites. Every sweep compares the
    //! tape's backward result against central differences on the same
    //! scalar, excluding draws that sit on a truncation boundary.

    use std::collections::BTreeMap;

    use capalign_core::attnpool::retention_margin;

    use super::*;

    pub struct CheckOutcome {
        pub max_rel_err: f64,
        pub points: usize,
        pub pass: bool,
    }

    const TAU: f64 = 1.0;
    const RHO: f64 = 0.5;

    fn rel_err(analytic: f64, fd: f64) -> f64 {
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-7)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Worst relative error of tape-vs-FD over the coordinates of `point`,
    /// where `f` rebuilds the scalar eagerly and `g` is the tape gradient.
    fn sweep(
        f: impl FnMut(&[f64]) -> f64,
        grad: &[f64],
        point: &[f64],
    ) -> f64 {
        let fd = fd_grad(f, point, 1e-6);
        grad.iter().zip(&fd).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
    }

    fn pal_point(rng: &mut ChaCha8Rng) -> f64 {
        let d = 6;
        let a = rand_vec(rng, d);
        let b = rand_vec(rng, d);
        let f = |x: &[f64]| pal_loss(x, &b).unwrap();
        let mut tape = Tape::new();
        let na = tape.param(Mat::from_vec(1, d, a.clone()));
        let nb = tape.constant(Mat::from_vec(1, d, b.clone()));
        let cos = pal_cos_node(&mut tape, na, nb).unwrap();
        let neg = tape.mul_const(cos, -1.0);
        let loss = tape.add_const(neg, 1.0);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(na).unwrap().data().to_vec();
        sweep(f, &g, &a)
    }

    fn nce_point(rng: &mut ChaCha8Rng) -> f64 {
        let (b, d) = (3, 5);
        let real = Mat::from_fn(b, d, |_, _| rng.random_range(-1.0..1.0));
        let syn = Mat::from_fn(b, d, |_, _| rng.random_range(-1.0..1.0));
        let temp = 0.07;
        let f = |x: &[f64]| {
            let real = Mat::from_vec(b, d, x.to_vec());
            infonce(&PooledPairBatch::new(real, syn.clone()).unwrap(), temp).unwrap()
        };
        let mut tape = Tape::new();
        let real_rows: Vec<_> =
            (0..b).map(|i| tape.param(Mat::from_vec(1, d, real.row(i).to_vec()))).collect();
        let syn_rows: Vec<_> =
            (0..b).map(|i| tape.constant(Mat::from_vec(1, d, syn.row(i).to_vec()))).collect();
        let loss = infonce_node(&mut tape, &real_rows, &syn_rows, temp).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g: Vec<f64> = real_rows
            .iter()
            .flat_map(|&n| grads.get(n).unwrap().data().to_vec())
            .collect();
        sweep(f, &g, real.data())
    }

    fn ce_point(rng: &mut ChaCha8Rng) -> f64 {
        let (rows, vocab) = (6, 7);
        let logits = Mat::from_fn(rows, vocab, |_, _| rng.random_range(-2.0..2.0));
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        let keep: Vec<bool> = (0..rows).map(|i| i != 2).collect();
        let pad: Vec<bool> = keep.iter().map(|&k| !k).collect();
        let f = |x: &[f64]| {
            let b =
                LogitsBatch::new(rows, 1, vocab, x.to_vec(), targets.clone(), pad.clone()).unwrap();
            masked_ce(&b)
        };
        let mut tape = Tape::new();
        let node = tape.param(logits.clone());
        let loss = ce_node(&mut tape, node, &targets, &keep).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(node).unwrap().data().to_vec();
        sweep(f, &g, logits.data())
    }

    /// Transport gradient with respect to the synthetic patch features,
    /// through cost construction and the unrolled solver. Draws whose
    /// saliency sits within 1e-3 of the retention cutoff are redrawn: the
    /// kept set changes discontinuously there.
    fn ot_point(rng: &mut ChaCha8Rng) -> Option<f64> {
        let (s, d) = (4, 5);
        let sal_real = rand_vec(rng, s);
        let sal_syn = rand_vec(rng, s);
        if retention_margin(&sal_real, TAU, RHO) < 1e-3
            || retention_margin(&sal_syn, TAU, RHO) < 1e-3
        {
            return None;
        }
        let feats_real = Mat::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
        let feats_syn = Mat::from_fn(s, d, |_, _| rng.random_range(-1.0..1.0));
        let (eps, iters) = (0.05, 30);

        let eval = |x: &[f64]| {
            let syn = Mat::from_vec(s, d, x.to_vec());
            let mut tape = Tape::new();
            let nsr = tape.constant(Mat::from_vec(1, s, sal_real.clone()));
            let nss = tape.constant(Mat::from_vec(1, s, sal_syn.clone()));
            let nfr = tape.constant(feats_real.clone());
            let nfs = tape.param(syn);
            let pr = topk_pool_node(&mut tape, nsr, nfr, TAU, RHO).unwrap();
            let ps = topk_pool_node(&mut tape, nss, nfs, TAU, RHO).unwrap();
            let t = transport_loss_node(
                &mut tape, nfr, &pr.kept, pr.weights, nfs, &ps.kept, ps.weights, eps, iters,
            )
            .unwrap();
            (tape, nfs, t.loss)
        };

        let (mut tape, param, loss) = eval(feats_syn.data());
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(param).unwrap().data().to_vec();
        let f = |x: &[f64]| {
            let (tape, _, loss) = eval(x);
            tape.value(loss).get(0, 0)
        };
        Some(sweep(f, &g, feats_syn.data()))
    }

    pub fn run_suite(
        rng: &mut ChaCha8Rng,
        points: usize,
        tol: f64,
        ot_tol: f64,
    ) -> Result<BTreeMap<&'static str, CheckOutcome>, String> {
        let mut out = BTreeMap::new();
        for (name, budget) in
            [("pal", tol), ("infonce", tol), ("masked_ce", tol), ("transport", ot_tol)]
        {
            let mut max_err = 0.0f64;
            let mut done = 0;
            let mut attempts = 0;
            while done < points {
                attempts += 1;
                if attempts > points * 20 {
                    return Err(format!("{name}: too many boundary redraws"));
                }
                let err = match name {
                    "pal" => Some(pal_point(rng)),
                    "infonce" => Some(nce_point(rng)),
                    "masked_ce" => Some(ce_point(rng)),
                    _ => ot_point(rng),
                };
                let Some(err) = err else { continue };
                max_err = max_err.max(err);
                done += 1;
            }
            out.insert(
                name,
                CheckOutcome { max_rel_err: max_err, points: done, pass: max_err < budget },
            );
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------- diagnose

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Real embedding cloud, N x D tensor.
    #[arg(long)]
    real: PathBuf,
    /// Synthetic embedding cloud, M x D tensor.
    #[arg(long)]
    synthetic: PathBuf,
    /// Kernel bandwidth; defaults to the median pooled pairwise distance.
    #[arg(long)]
    bandwidth: Option<f64>,
}

impl DiagnoseArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["real", "synthetic", "bandwidth", "seed"])?;
        merge_fields!(self, sub, cfg; real, synthetic, bandwidth);
        Ok(())
    }
}

pub fn diagnose(args: DiagnoseArgs) -> Result<Value, CliError> {
    let real = EmbeddingSet::new(load_mat(&args.real)?, SetLabel::Real).map_err(runtime)?;
    let synthetic =
        EmbeddingSet::new(load_mat(&args.synthetic)?, SetLabel::Synthetic).map_err(runtime)?;
    let report = alignment_report(&real, &synthetic, args.bandwidth).map_err(runtime)?;
    serde_json::to_value(&report).map_err(runtime)
}

// ---------------------------------------------------------------- bleu

#[derive(Args, Debug)]
pub struct BleuArgs {
    /// JSONL file, one JSON array of tokens per line.
    #[arg(long)]
    candidates: PathBuf,
    /// JSONL file aligned line-by-line with the candidates.
    #[arg(long)]
    references: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_n: usize,
}

impl BleuArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["candidates", "references", "max_n", "seed"])?;
        merge_fields!(self, sub, cfg; candidates, references, max_n);
        Ok(())
    }
}

fn read_token_lines(path: &PathBuf) -> Result<Vec<Vec<String>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str::<Vec<String>>(line).map_err(|e| {
                runtime(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn bleu(args: BleuArgs) -> Result<Value, CliError> {
    let candidates = read_token_lines(&args.candidates)?;
    let references = read_token_lines(&args.references)?;
    let scores = bleu_n(&candidates, &references, args.max_n).map_err(runtime)?;
    Ok(json!({
        "candidates": candidates.len(),
        "max_n": args.max_n,
        "scores": scores,
    }))
}

// ---------------------------------------------------------------- pal-eval

#[derive(Args, Debug)]
pub struct PalEvalArgs {
    /// Pooled real descriptors, N x D tensor; row i pairs with row i below.
    #[arg(long)]
    real: PathBuf,
    /// Pooled synthetic descriptors, N x D tensor.
    #[arg(long)]
    synthetic: PathBuf,
}

impl PalEvalArgs {
    pub fn merge(&mut self, sub: &ArgMatches, cfg: &Map<String, Value>) -> Result<(), CliError> {
        reject_unknown_keys(cfg, &["real", "synthetic", "seed"])?;
        merge_fields!(self, sub, cfg; real, synthetic);
        Ok(())
    }
}

pub fn pal_eval(args: PalEvalArgs) -> Result<Value, CliError> {
    let real = load_mat(&args.real)?;
    let synthetic = load_mat(&args.synthetic)?;
    if real.shape() != synthetic.shape() {
        return Err(CliError::Runtime(format!(
            "descriptor shapes differ: {:?} vs {:?}",
            real.shape(),
            synthetic.shape()
        )));
    }
    let per_pair: Vec<f64> = (0..real.rows())
        .map(|i| pal_loss(real.row(i), synthetic.row(i)))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(json!({
        "pairs": per_pair.len(),
        "per_pair": per_pair,
        "mean": mean,
    }))
}
