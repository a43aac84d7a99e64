//! Command implementations behind the CLI surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use diffguard_core::adapters::{BackendRegistry, BackendSpec, Backends, IdentityEmbedding};
use diffguard_core::eval::{
    diversity_dispersion, identification_rate, protection_success_rate, recovery_metrics,
    ProbeEntry, VerificationSet,
};
use diffguard_core::guidance::Lambda;

use diffguard_core::msi::{train_embedding, MsiConfig, TrainConfig};
use diffguard_core::pipelines::{anonymize, hide_identity, recover, RunConfig, RunKind};

use crate::config::{resolve, resolve_owned, FileConfig};
use crate::error::CliError;
use crate::imgio::{load_png, save_png};
use crate::keyfile::{KeyContainer, KeyKind};

pub struct CommonOpts {
    pub config: Option<PathBuf>,
    pub overwrite: bool,
}

fn ensure_writable(path: &Path, overwrite: bool) -> Result<(), CliError> {
    if path.exists() && !overwrite {
        return Err(CliError::Input(format!(
            "refusing to overwrite '{}' without --overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn read_container(path: &Path, expected: KeyKind) -> Result<KeyContainer, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("key file not found: {}", path.display())));
    }
    Ok(KeyContainer::read_from(path, Some(expected))?)
}

/// Builds the backend bundle a key was created with, from its recorded
/// model id.
fn backends_from_model_id(model_id: &str) -> Result<Backends, CliError> {
    let spec: BackendSpec = model_id
        .parse()
        .map_err(|e| CliError::Format(format!("key carries unusable model id: {e}")))?;
    let registry = BackendRegistry::with_builtins();
    registry
        .build(&spec)
        .map_err(|e| CliError::Input(format!("cannot rebuild backend '{model_id}': {e}")))
}

/// Resolves the `--backend` flag (a kind or full `kind:k=v,...` spec) into a
/// canonical spec with the sizing parameters filled in.
fn backend_spec_from_flag(
    flag: &str,
    size: u32,
    embed_dim: usize,
    backend_seed: u64,
) -> Result<BackendSpec, CliError> {
    let raw = flag.strip_prefix("plugin:").unwrap_or(flag);
    let mut spec: BackendSpec = raw
        .parse()
        .map_err(|e| CliError::Input(format!("bad --backend value '{flag}': {e}")))?;
    let defaults = [
        ("img", format!("{size}x{size}x3")),
        ("ctx", embed_dim.to_string()),
        ("seed", backend_seed.to_string()),
    ];
    for (k, v) in defaults {
        spec.params.entry(k.to_string()).or_insert(v);
    }
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
pub struct TrainArgs {
    pub image: PathBuf,
    pub out: PathBuf,
    pub backend: Option<String>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub size: Option<u32>,
    pub embed_dim: Option<usize>,
    pub tokens: usize,
    pub attn_dim: usize,
    pub backend_seed: u64,
}

pub fn cmd_train_embedding(args: TrainArgs, common: &CommonOpts) -> Result<(), CliError> {
    let file_cfg = FileConfig::load(common.config.as_deref())?;
    if !args.image.exists() {
        return Err(CliError::Input(format!("image not found: {}", args.image.display())));
    }
    ensure_writable(&args.out, common.overwrite)?;

    let backend = resolve_owned(args.backend, file_cfg.backend.clone(), "oracle".to_string());
    let size = resolve(args.size, file_cfg.size, 32);
    let embed_dim = resolve(args.embed_dim, file_cfg.embed_dim, 768);
    let steps = resolve(args.steps, file_cfg.steps, 400);
    let lr = resolve(args.lr, file_cfg.lr, 1e-3);
    let seed = resolve(args.seed, file_cfg.seed, 0);

    let spec = backend_spec_from_flag(&backend, size, embed_dim, args.backend_seed)?;
    let shape = spec.image_shape(48)?;
    let image = load_png(&args.image, Some(shape[1] as u32))?;
    let registry = BackendRegistry::with_builtins();
    let backends = registry.build(&spec).map_err(|e| CliError::Input(e.to_string()))?;

    let cfg = TrainConfig {
        steps,
        lr,
        seed,
        probe_count: 16,
        msi: MsiConfig {
            embed_dim,
            tokens_per_stage: args.tokens,
            attn_dim: args.attn_dim,
            ..MsiConfig::default()
        },
    };
    let (key_e, report) = train_embedding(&image, &backends, &cfg)?;
    let container = KeyContainer::from_key_e(&key_e, backends.schedule.t_total(), seed);
    container.write_to(&args.out)?;
    println!(
        "trained key-E over {} steps: probe loss {:.6} -> {:.6}",
        report.steps, report.initial_probe_loss, report.final_probe_loss
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

pub struct ProtectArgs {
    pub mode: RunKind,
    pub image: PathBuf,
    pub key_e: PathBuf,
    pub out_dir: PathBuf,
    pub tau: Option<f64>,
    pub s_ns: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub stride: Option<usize>,
    pub trace: bool,
    pub force: bool,
}

pub fn cmd_protect(args: ProtectArgs, common: &CommonOpts) -> Result<(), CliError> {
    let file_cfg = FileConfig::load(common.config.as_deref())?;
    if !args.image.exists() {
        return Err(CliError::Input(format!("image not found: {}", args.image.display())));
    }
    let container = read_container(&args.key_e, KeyKind::KeyE)?;
    let key_e = container.to_key_e()?;
    let backends = backends_from_model_id(&key_e.model_id)?;
    let shape = backends.codec.image_shape();
    let image = load_png(&args.image, Some(shape[1] as u32))?;

    let defaults = match args.mode {
        RunKind::Anonymize => RunConfig::anonymize_defaults(),
        RunKind::Hide => RunConfig::hide_defaults(),
    };
    let lambda = resolve(args.lambda, file_cfg.lambda, 1.0);
    if args.mode == RunKind::Hide && lambda == 0.0 {
        eprintln!("warning: lambda is 0, identity guidance is disabled for this hide run");
    }
    let cfg = RunConfig {
        s_ns: resolve(args.s_ns, file_cfg.s_ns, defaults.s_ns),
        tau: resolve(args.tau, file_cfg.tau, defaults.tau),
        lambda: Lambda::Constant(lambda),
        seed: resolve(args.seed, file_cfg.seed, 0),
        stride: resolve(args.stride, file_cfg.stride, defaults.stride),
        force: args.force,
        ..defaults
    };

    std::fs::create_dir_all(&args.out_dir)?;
    let key_path = args.out_dir.join("key-i.dpky");
    ensure_writable(&key_path, common.overwrite)?;

    let (key, trail) = match args.mode {
        RunKind::Anonymize => {
            let out = anonymize(&image, &key_e, &cfg, &backends)?;
            for (i, img) in out.images.iter().enumerate() {
                let path = args.out_dir.join(format!("anonymized_{i}.png"));
                ensure_writable(&path, common.overwrite)?;
                save_png(img, &path)?;
                println!("wrote {}", path.display());
            }
            (out.key, out.trail)
        }
        RunKind::Hide => {
            let out = hide_identity(&image, &key_e, &cfg, &backends)?;
            let path = args.out_dir.join("hidden.png");
            ensure_writable(&path, common.overwrite)?;
            save_png(&out.image, &path)?;
            println!("wrote {}", path.display());
            (out.key, out.trail)
        }
    };

    KeyContainer::from_noise_key(&key).write_to(&key_path)?;
    println!("wrote {}", key_path.display());

    if args.trace {
        let trace_path = args.out_dir.join("trace.jsonl");
        ensure_writable(&trace_path, common.overwrite)?;
        let mut f = std::fs::File::create(&trace_path)?;
        for report in &trail {
            let line = serde_json::to_string(report)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        println!("wrote {} ({} guided steps)", trace_path.display(), trail.len());
    }
    Ok(())
}

pub struct RecoverArgs {
    pub key_i: PathBuf,
    pub key_e: PathBuf,
    pub out: PathBuf,
    pub reference: Option<PathBuf>,
}

pub fn cmd_recover(args: RecoverArgs, common: &CommonOpts) -> Result<(), CliError> {
    let key_i = read_container(&args.key_i, KeyKind::KeyI)?.to_noise_key()?;
    let key_e = read_container(&args.key_e, KeyKind::KeyE)?.to_key_e()?;
    ensure_writable(&args.out, common.overwrite)?;

    let backends = backends_from_model_id(&key_i.model_id)?;
    let recovered = recover(&key_i, &key_e, &backends, false)?;
    save_png(&recovered, &args.out)?;
    println!("wrote {}", args.out.display());

    if let Some(ref_path) = args.reference {
        let shape = backends.codec.image_shape();
        let reference = load_png(&ref_path, Some(shape[1] as u32))?;
        // Compare what was actually written: the unit-range clamp of the
        // decoded latent.
        let mut clamped = recovered;
        for v in &mut clamped.data {
            *v = v.clamp(0.0, 1.0);
        }
        let m = recovery_metrics(&reference, &clamped)?;
        println!("recovery vs {}: mse {:.6} psnr {:.2} dB ssim {:.4}", ref_path.display(), m.mse, m.psnr, m.ssim);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    Sr,
    Idrate,
    Recovery,
    Diversity,
}

pub struct EvalArgs {
    pub protocol: EvalProtocol,
    /// CSV input for sr (reference,candidate), idrate (role,identity,path),
    /// diversity (group,path).
    pub input: Option<PathBuf>,
    pub original: Option<PathBuf>,
    pub recovered: Option<PathBuf>,
    pub backend: Option<String>,
    pub size: Option<u32>,
    pub out: Option<PathBuf>,
}

fn read_csv(path: &Path, columns: usize) -> Result<Vec<Vec<String>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot read '{}': {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("bad csv row: {e}")))?;
        if record.len() != columns {
            return Err(CliError::Input(format!(
                "expected {columns} columns, got {} in '{}'",
                record.len(),
                path.display()
            )));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("'{}' holds no rows", path.display())));
    }
    Ok(rows)
}

fn write_record(out: &Option<PathBuf>, record: serde_json::Value) -> Result<(), CliError> {
    if let Some(path) = out {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{record}")?;
    }
    Ok(())
}

pub fn cmd_eval(args: EvalArgs, common: &CommonOpts) -> Result<(), CliError> {
    let file_cfg = FileConfig::load(common.config.as_deref())?;
    let size = resolve(args.size, file_cfg.size, 32);
    let backend = resolve_owned(args.backend.clone(), file_cfg.backend.clone(), "oracle".into());
    let spec = backend_spec_from_flag(&backend, size, 16, 1)?;
    let registry = BackendRegistry::with_builtins();

    let embed = |backends: &Backends, path: &str| -> Result<IdentityEmbedding, CliError> {
        let img = load_png(Path::new(path), Some(size))?;
        Ok(backends.embedder.embed(&img)?)
    };

    match args.protocol {
        EvalProtocol::Sr => {
            let input = args.input.ok_or_else(|| {
                CliError::Input("sr needs a CSV of reference,candidate image paths".into())
            })?;
            let rows = read_csv(&input, 2)?;
            let backends = registry.build(&spec).map_err(|e| CliError::Input(e.to_string()))?;
            let pairs = rows
                .iter()
                .map(|r| Ok((embed(&backends, &r[0])?, embed(&backends, &r[1])?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            let sr = protection_success_rate(&pairs, backends.embedder.as_ref())?;
            println!("protection success rate over {} pairs: {sr:.4}", pairs.len());
            println!(
                "  metric {:?}, threshold {}",
                backends.embedder.metric(),
                backends.embedder.threshold()
            );
            write_record(
                &args.out,
                serde_json::json!({
                    "protocol": "sr",
                    "pairs": pairs.len(),
                    "threshold": backends.embedder.threshold(),
                    "success_rate": sr,
                }),
            )?;
        }
        EvalProtocol::Idrate => {
            let input = args.input.ok_or_else(|| {
                CliError::Input("idrate needs a CSV of role,identity,path rows".into())
            })?;
            let rows = read_csv(&input, 3)?;
            let backends = registry.build(&spec).map_err(|e| CliError::Input(e.to_string()))?;
            let mut probes: Vec<(String, IdentityEmbedding)> = Vec::new();
            let mut same: Vec<(String, IdentityEmbedding)> = Vec::new();
            let mut diff: Vec<IdentityEmbedding> = Vec::new();
            for row in &rows {
                let e = embed(&backends, &row[2])?;
                match row[0].as_str() {
                    "probe" => probes.push((row[1].clone(), e)),
                    "same" => same.push((row[1].clone(), e)),
                    "diff" => diff.push(e),
                    other => {
                        return Err(CliError::Input(format!(
                            "row role must be probe/same/diff, got '{other}'"
                        )))
                    }
                }
            }
            let vs = VerificationSet {
                probes: probes
                    .into_iter()
                    .map(|(identity, embedding)| ProbeEntry {
                        embedding,
                        same_set: same
                            .iter()
                            .filter(|(id, _)| *id == identity)
                            .map(|(_, e)| e.clone())
                            .collect(),
                    })
                    .collect(),
                diff_set: diff,
            };
            let rate = identification_rate(&vs)?;
            println!("identification rate over {} probes: {rate:.4}", vs.probes.len());
            write_record(
                &args.out,
                serde_json::json!({
                    "protocol": "idrate",
                    "probes": vs.probes.len(),
                    "diff_set": vs.diff_set.len(),
                    "identification_rate": rate,
                }),
            )?;
        }
        EvalProtocol::Recovery => {
            let (orig, rec) = match (&args.original, &args.recovered) {
                (Some(o), Some(r)) => (o, r),
                _ => {
                    return Err(CliError::Input(
                        "recovery needs --original and --recovered images".into(),
                    ))
                }
            };
            let a = load_png(orig, None)?;
            let b = load_png(rec, None)?;
            let m = recovery_metrics(&a, &b)?;
            println!("mse {:.6}  psnr {:.2} dB  ssim {:.4}", m.mse, m.psnr, m.ssim);
            write_record(
                &args.out,
                serde_json::json!({
                    "protocol": "recovery",
                    "mse": m.mse, "psnr": m.psnr, "ssim": m.ssim,
                }),
            )?;
        }
        EvalProtocol::Diversity => {
            let input = args.input.ok_or_else(|| {
                CliError::Input("diversity needs a CSV of group,path rows".into())
            })?;
            let rows = read_csv(&input, 2)?;
            let backends = registry.build(&spec).map_err(|e| CliError::Input(e.to_string()))?;
            let mut groups: std::collections::BTreeMap<String, Vec<IdentityEmbedding>> =
                Default::default();
            for row in &rows {
                groups.entry(row[0].clone()).or_default().push(embed(&backends, &row[1])?);
            }
            let groups: Vec<Vec<IdentityEmbedding>> = groups.into_values().collect();
            let report = diversity_dispersion(&groups)?;
            println!(
                "diversity dispersion {:.4} over {} groups ({} singleton groups skipped)",
                report.dispersion, report.groups_used, report.groups_skipped
            );
            write_record(
                &args.out,
                serde_json::json!({
                    "protocol": "diversity",
                    "dispersion": report.dispersion,
                    "groups_used": report.groups_used,
                    "groups_skipped": report.groups_skipped,
                }),
            )?;
        }
    }
    Ok(())
}
