use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use super_core::attribution::{self, AttributionMap};
use super_core::data::{self, GroupedDataset, SampleRecord, Split, SpuriousSpec};
use super_core::evaluation::{self, MetricsReport};
use super_core::guidance::{
    parse_prompt_variants, GuidanceCache, GuidanceProvider, GuidanceTable, OracleGuidance, PromptSet, TinyClip,
    VlmGuidance,
};
use super_core::kv::KeyValues;
use super_core::model::{CheckpointManifest, Head, ModelParams};
use super_core::trainer::{self, BatchReduction, TrainConfig, TrainOutcome};

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{AblateParam, GuidanceKind};

pub const CACHE_ENV: &str = "SUPER_CACHE_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(super_core::Error),
    Io(PathBuf, std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<super_core::Error> for CliError {
    fn from(e: super_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(super_core::Error::Io { .. } | super_core::Error::Image { .. } | super_core::Error::Csv { .. }) => 1,
            CliError::Io(..) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.to_path_buf(), e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// Creates `dir`, refusing to reuse a directory with artifacts in it unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .flatten()
            .any(|e| e.file_name() != MANIFEST_FILE);
        if occupied && !force {
            return Err(CliError::Usage(format!(
                "{} already holds outputs; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn append_manifest(manifest: RunManifest, dir: &Path) -> Result<()> {
    manifest.append(dir).map_err(io_err(dir))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let kv = KeyValues::parse(&read_text(path)?)?;
    Ok(TrainConfig::from_key_values(&kv)?)
}

fn cache_root(data: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| data.join("cache"))
}

fn feature_size(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<(usize, usize)> {
    Ok(cfg.model_config(ds)?.feature_size())
}

fn vlm_provider(model: &Path, superclass: &str, n_prompts: usize, size: (usize, usize)) -> Result<VlmGuidance<TinyClip>> {
    let model = TinyClip::load(model)?;
    let fingerprint = model.fingerprint();
    Ok(VlmGuidance {
        model,
        prompts: PromptSet::standard(superclass, n_prompts)?,
        height: size.0,
        width: size.1,
        fingerprint,
    })
}

/// A cache built by the vision-language provider, checked against the prompts and resolution in use.
fn vlm_cache(root: &Path, prompts: &PromptSet, size: (usize, usize)) -> Result<GuidanceCache> {
    let cache = GuidanceCache::open_tag(root, "vlm").map_err(|e| match e {
        super_core::Error::MissingGuidance(m) => {
            CliError::Usage(format!("--guidance vlm needs a guidance cache or --vlm-model ({m})"))
        }
        other => other.into(),
    })?;
    let key = cache.key();
    if (key.height, key.width) != size || !key.prompt_hash.starts_with(&prompts.hash()) {
        return Err(super_core::Error::CacheMismatch(format!(
            "{} was built for other prompts or another resolution",
            cache.dir().display()
        ))
        .into());
    }
    Ok(cache)
}

fn training_guidance(
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    kind: GuidanceKind,
    vlm_model: Option<&Path>,
    root: &Path,
) -> Result<GuidanceTable> {
    let size = feature_size(ds, cfg)?;
    let table = match (kind, vlm_model) {
        (GuidanceKind::Oracle, _) => {
            let provider = OracleGuidance::new(ds, size.0, size.1, cfg.corruption, cfg.seed)?;
            let cache = if root.join("oracle").exists() {
                Some(GuidanceCache::open_existing(root, provider.cache_key())?)
            } else {
                None
            };
            GuidanceTable::resolve(ds, Split::Train, cache.as_ref(), Some(&provider))?
        }
        (GuidanceKind::Vlm, Some(model)) => {
            let provider = vlm_provider(model, &cfg.superclass, cfg.n_prompts, size)?;
            let cache = GuidanceCache::open(root, provider.cache_key())?;
            GuidanceTable::resolve(ds, Split::Train, Some(&cache), Some(&provider))?
        }
        (GuidanceKind::Vlm, None) => {
            let prompts = PromptSet::standard(&cfg.superclass, cfg.n_prompts)?;
            let cache = vlm_cache(root, &prompts, size)?;
            GuidanceTable::resolve(ds, Split::Train, Some(&cache), None).map_err(|e| match e {
                super_core::Error::MissingGuidance(m) => {
                    CliError::Usage(format!("guidance cache is incomplete and no --vlm-model was given ({m})"))
                }
                other => other.into(),
            })?
        }
    };
    Ok(table)
}

pub fn generate(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    let kv = KeyValues::parse(&read_text(spec_path)?)?;
    let spec = SpuriousSpec::from_key_values(&kv)?;
    prepare_out(out, force)?;
    let mut manifest = RunManifest::start("generate", spec.to_key_values(), spec.seed);
    let ds = data::generate_synthetic(&spec)?;
    data::save_dataset(&ds, out)?;
    write_file(&out.join("spec.txt"), spec.to_key_values().to_text())?;
    manifest.outputs = vec!["metadata.csv".into(), "images".into(), "masks".into(), "dataset.info".into(), "spec.txt".into()];
    append_manifest(manifest, out)?;
    print!("{}", data::format_group_table(&ds));
    Ok(())
}

pub fn init_vlm(out: &Path, seed: u64, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut kv = KeyValues::default();
    kv.set("seed", seed);
    let mut manifest = RunManifest::start("init-vlm", kv, seed);
    let model = TinyClip::new(seed);
    model.save(out)?;
    manifest.outputs = vec![out.file_name().map(PathBuf::from).unwrap_or_default()];
    append_manifest(manifest, dir)?;
    println!("wrote {} (fingerprint {})", out.display(), model.fingerprint());
    Ok(())
}

pub fn cache_guidance(data: &Path, config: Option<&Path>, kind: GuidanceKind, vlm_model: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.guidance = kind.tag().into();
    let ds = data::load_dataset(data)?;
    let size = feature_size(&ds, &cfg)?;
    let root = cache_root(data);
    let provider: Box<dyn GuidanceProvider> = match (kind, vlm_model) {
        (GuidanceKind::Oracle, _) => Box::new(OracleGuidance::new(&ds, size.0, size.1, cfg.corruption, cfg.seed)?),
        (GuidanceKind::Vlm, Some(m)) => Box::new(vlm_provider(m, &cfg.superclass, cfg.n_prompts, size)?),
        (GuidanceKind::Vlm, None) => return Err(CliError::Usage("--guidance vlm requires --vlm-model".into())),
    };
    let cache = GuidanceCache::open(&root, provider.cache_key())?;
    let mut manifest = RunManifest::start("cache-guidance", cfg.to_key_values(), cfg.seed);
    let table = GuidanceTable::resolve(&ds, Split::Train, Some(&cache), Some(provider.as_ref()))?;
    manifest.outputs = vec![cache.dir().to_path_buf()];
    append_manifest(manifest, cache.dir())?;
    println!(
        "{} guidance maps in {} ({} computed, {} already cached)",
        table.len(),
        cache.dir().display(),
        table.provider_calls,
        table.len() - table.provider_calls
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub guidance: GuidanceKind,
    pub out: PathBuf,
    pub jtt: bool,
    pub detach_alpha: bool,
    pub erm: bool,
    pub batch_reduction: Option<BatchReduction>,
    pub vlm_model: Option<PathBuf>,
    pub force: bool,
}

fn format_val_metrics(history: &[MetricsReport]) -> String {
    let mut out = String::from("epoch,worst,average,variance_pct");
    if let Some(first) = history.first() {
        for (y, z) in first.groups.keys() {
            let _ = write!(out, ",acc_y{y}_a{z}");
        }
    }
    out.push('\n');
    for (i, r) in history.iter().enumerate() {
        let _ = write!(out, "{},{},{},{}", i + 1, r.worst, r.average, r.variance_pct);
        for g in r.groups.values() {
            let _ = write!(out, ",{}", g.accuracy);
        }
        out.push('\n');
    }
    out
}

/// Checkpoint, loss log, per-epoch validation metrics and effective config.
fn write_training_outputs(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    let state = &outcome.state;
    state
        .params
        .save_checkpoint(&dir.join("checkpoint.ckpt"), &CheckpointManifest { seed: cfg.seed, epoch: state.best_epoch })?;
    trainer::write_loss_log(&outcome.log, &dir.join("loss_log.csv"))?;
    write_file(&dir.join("val_metrics.csv"), format_val_metrics(&state.history))?;
    write_file(&dir.join("config.txt"), cfg.to_key_values().to_text())?;
    Ok(vec!["checkpoint.ckpt".into(), "loss_log.csv".into(), "val_metrics.csv".into(), "config.txt".into()])
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.guidance = args.guidance.tag().into();
    cfg.detach_alpha |= args.detach_alpha;
    if let Some(r) = args.batch_reduction {
        cfg.batch_reduction = r;
    }
    cfg.validate()?;
    if args.jtt && cfg.jtt.is_none() {
        return Err(CliError::Usage("--jtt requires jtt_id_epochs, jtt_id_lr and jtt_upweight in the config".into()));
    }
    if args.jtt && args.erm {
        return Err(CliError::Usage("--jtt and --erm are mutually exclusive".into()));
    }
    prepare_out(&args.out, args.force)?;
    let ds = data::load_dataset(&args.data)?;

    let mut snapshot = cfg.to_key_values();
    snapshot.set("objective", if args.erm { "erm" } else { "full" });
    snapshot.set("jtt", args.jtt);
    let mut manifest = RunManifest::start("train", snapshot, cfg.seed);

    let mut outputs = Vec::new();
    let outcome = if args.erm {
        trainer::train_erm_baseline(&ds, &cfg)?.0
    } else {
        let table = training_guidance(&ds, &cfg, args.guidance, args.vlm_model.as_deref(), &cache_root(&args.data))?;
        let upweighted = if args.jtt { trainer::jtt_identify(&ds, &cfg)? } else { BTreeSet::new() };
        if args.jtt {
            let list: String = upweighted.iter().map(|id| format!("{id}\n")).collect();
            write_file(&args.out.join("jtt_upweighted.txt"), list)?;
            outputs.push(PathBuf::from("jtt_upweighted.txt"));
        }
        trainer::train(&ds, &cfg, &table, &upweighted)?
    };
    outputs.extend(write_training_outputs(&args.out, &cfg, &outcome)?);
    manifest.outputs = outputs;
    append_manifest(manifest, &args.out)?;
    println!(
        "best epoch {} of {}: validation worst-group accuracy {:.4} ({} steps)",
        outcome.state.best_epoch, outcome.state.epoch, outcome.state.best_val_wga, outcome.steps
    );
    Ok(())
}

pub fn evaluate(data: &Path, checkpoint: &Path, split: Split, out: &Path, force: bool) -> Result<()> {
    let (params, ckpt) = ModelParams::load_checkpoint(checkpoint)?;
    let ds = data::load_dataset(data)?;
    prepare_out(out, force)?;
    let mut kv = KeyValues::default();
    kv.set("checkpoint", checkpoint.display());
    kv.set("split", split);
    kv.set("epoch", ckpt.epoch);
    let mut manifest = RunManifest::start("evaluate", kv, ckpt.seed);
    let report = evaluation::evaluate(&params, &ds, split)?;
    let name = format!("report_{split}.csv");
    evaluation::report_emit(&report, &out.join(&name))?;
    manifest.outputs = vec![name.into()];
    append_manifest(manifest, out)?;
    print!("{}", evaluation::report_to_string(&report)?);
    Ok(())
}

pub struct AblateArgs {
    pub data: PathBuf,
    pub config: PathBuf,
    pub param: AblateParam,
    pub values: String,
    pub guidance: GuidanceKind,
    pub vlm_model: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

fn param_name(p: AblateParam) -> &'static str {
    match p {
        AblateParam::Beta => "beta",
        AblateParam::Lambda2 => "lambda2",
        AblateParam::Prompts => "prompts",
    }
}

fn parse_values(list: &str) -> Result<Vec<f64>> {
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Usage(format!("cannot parse value `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("--values lists no values".into()));
    }
    Ok(values)
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let mut base = load_config(&args.config)?;
    base.guidance = args.guidance.tag().into();
    let name = param_name(args.param);

    // (label, config) per run.
    let runs: Vec<(String, TrainConfig)> = match args.param {
        AblateParam::Beta | AblateParam::Lambda2 => parse_values(&args.values)?
            .into_iter()
            .map(|v| {
                let mut cfg = base.clone();
                match args.param {
                    AblateParam::Beta => cfg.beta = v,
                    _ => cfg.lambda2 = v,
                }
                (v.to_string(), cfg)
            })
            .collect(),
        AblateParam::Prompts => {
            if args.guidance != GuidanceKind::Vlm || args.vlm_model.is_none() {
                return Err(CliError::Usage("a prompt sweep needs --guidance vlm and --vlm-model".into()));
            }
            parse_prompt_variants(&read_text(Path::new(&args.values))?)?
                .into_iter()
                .map(|v| {
                    let mut cfg = base.clone();
                    cfg.superclass = v.superclass.clone();
                    cfg.n_prompts = v.n;
                    (v.label(), cfg)
                })
                .collect()
        }
    };
    for (_, cfg) in &runs {
        cfg.validate()?;
    }
    prepare_out(&args.out, args.force)?;
    let ds = data::load_dataset(&args.data)?;
    let mut snapshot = base.to_key_values();
    snapshot.set("ablate_param", name);
    snapshot.set("ablate_values", runs.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>().join(" "));
    let mut manifest = RunManifest::start("ablate", snapshot, base.seed);

    let shared = match args.param {
        AblateParam::Prompts => None,
        _ => Some(training_guidance(&ds, &base, args.guidance, args.vlm_model.as_deref(), &cache_root(&args.data))?),
    };
    let mut results = vec![];
    for (i, (label, cfg)) in runs.iter().enumerate() {
        let dir = args.out.join(format!("run_{i}"));
        prepare_out(&dir, args.force)?;
        let mut run_kv = cfg.to_key_values();
        run_kv.set(&format!("ablate_{name}"), label);
        let mut run_manifest = RunManifest::start("ablate-run", run_kv, cfg.seed);
        let table = match &shared {
            Some(t) => t.clone(),
            None => {
                let model = args.vlm_model.as_deref().expect("checked above");
                let provider = vlm_provider(model, &cfg.superclass, cfg.n_prompts, feature_size(&ds, cfg)?)?;
                GuidanceTable::resolve(&ds, Split::Train, None, Some(&provider))?
            }
        };
        let outcome = trainer::train(&ds, cfg, &table, &BTreeSet::new())?;
        let report = evaluation::evaluate(&outcome.state.params, &ds, Split::Test)?;
        let mut outputs = write_training_outputs(&dir, cfg, &outcome)?;
        evaluation::report_emit(&report, &dir.join("report_test.csv"))?;
        outputs.push("report_test.csv".into());
        run_manifest.outputs = outputs;
        append_manifest(run_manifest, &dir)?;
        println!("{name}={label}: test worst-group accuracy {:.4}", report.worst);
        results.push((label.clone(), report, outcome.state.best_epoch));
    }

    let mut table = String::from("param,value,worst,average,variance_pct,best_epoch\n");
    for (label, r, epoch) in &results {
        let _ = writeln!(table, "{name},{label},{},{},{},{epoch}", r.worst, r.average, r.variance_pct);
    }
    write_file(&args.out.join("results.csv"), table)?;
    let (base_label, base_report, _) = &results[0];
    let mut deltas = String::from("param,value,baseline,delta_worst_pct\n");
    for (label, r, _) in &results[1..] {
        let _ = writeln!(deltas, "{name},{label},{base_label},{}", (r.worst - base_report.worst) * 100.0);
    }
    write_file(&args.out.join("deltas.csv"), deltas)?;
    let mut outputs: Vec<PathBuf> = vec!["results.csv".into(), "deltas.csv".into()];
    outputs.extend((0..results.len()).map(|i| PathBuf::from(format!("run_{i}"))));
    manifest.outputs = outputs;
    append_manifest(manifest, &args.out)?;
    Ok(())
}

fn export_guidance_map(
    record: &SampleRecord,
    ds: &GroupedDataset,
    size: (usize, usize),
    kind: GuidanceKind,
    vlm_model: Option<&Path>,
    data: &Path,
) -> Result<AttributionMap> {
    match (kind, vlm_model) {
        (GuidanceKind::Oracle, _) => Ok(OracleGuidance::new(ds, size.0, size.1, 0.0, 0)?.relevant_map(record)?),
        (GuidanceKind::Vlm, Some(m)) => {
            let cfg = TrainConfig::default();
            Ok(vlm_provider(m, &cfg.superclass, cfg.n_prompts, size)?.relevant_map(record)?)
        }
        (GuidanceKind::Vlm, None) => {
            let cache = GuidanceCache::open_tag(&cache_root(data), "vlm")?;
            match cache.load(&record.id)? {
                Some(pair) => Ok(attribution::resample(&pair.relevant, size.0, size.1)?),
                None => Err(CliError::Usage(format!(
                    "no cached vlm guidance for {} and no --vlm-model given",
                    record.id
                ))),
            }
        }
    }
}

pub fn export_maps(
    data: &Path,
    checkpoint: &Path,
    ids: &[String],
    out: &Path,
    kind: GuidanceKind,
    vlm_model: Option<&Path>,
    force: bool,
) -> Result<()> {
    let (params, ckpt) = ModelParams::load_checkpoint(checkpoint)?;
    let ds = data::load_dataset(data)?;
    let records = ids
        .iter()
        .map(|id| ds.get(id).ok_or_else(|| CliError::Usage(format!("unknown sample id `{id}`"))))
        .collect::<Result<Vec<&SampleRecord>>>()?;
    prepare_out(out, force)?;
    let sidecar = out.join("sidecar");
    fs::create_dir_all(&sidecar).map_err(io_err(&sidecar))?;
    let mut kv = KeyValues::default();
    kv.set("checkpoint", checkpoint.display());
    kv.set("ids", ids.join(" "));
    kv.set("guidance", kind.tag());
    let mut manifest = RunManifest::start("export-maps", kv, ckpt.seed);

    let size = params.config.feature_size();
    let head1 = evaluation::head_maps(&params, &records, Head::Relevant)?;
    let head2 = evaluation::head_maps(&params, &records, Head::Irrelevant)?;
    let mut outputs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let guide = export_guidance_map(r, &ds, size, kind, vlm_model, data)?;
        let original = format!("{}_original.png", r.id);
        data::save_png_rgb(&out.join(&original), &r.image)?;
        outputs.push(PathBuf::from(original));
        for (tag, map) in [("head1", &head1[i]), ("head2", &head2[i]), ("guidance", &guide)] {
            let png = format!("{}_{tag}.png", r.id);
            attribution::resample(map, r.image.height, r.image.width)?.write_png(&out.join(&png))?;
            let side = format!("sidecar/{}_{tag}.map", r.id);
            map.write_sidecar(&out.join(&side))?;
            outputs.push(png.into());
            outputs.push(side.into());
        }
    }
    manifest.outputs = outputs;
    append_manifest(manifest, out)?;
    println!("exported maps for {} samples to {}", records.len(), out.display());
    Ok(())
}
