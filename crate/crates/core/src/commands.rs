//! Command-line front end: `gen-masks`, `certify`, `eval`, `audit`.
//!
//! Flags may also come from a JSON config file (`--config FILE` or the
//! `PATCHCERT_CONFIG` environment variable) with one object per subcommand,
//! keyed by flag name. Config values are spliced in ahead of the command
//! line, so explicit flags win.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tracing::info;

use crate::backend::stub::{serve_stub, StubFault, StubOptions, StubSegment};
use crate::backend::{
    DemaskingBackend, NearestFillDemasker, ProcessBackend, ProcessConfig, SegmentationBackend, ToyOracleSegmenter,
};
use crate::certify::{
    CertMode, CertifiedOutput, DetectionCertifier, RecoveryCertifier,
};
use crate::error::{Error, Result};
use crate::grid::{apply_patch, ImageGrid, SegMap, ThreatModel};
use crate::io;
use crate::maskgen::{
    build_detection_column_masks, build_detection_row_masks, build_recovery, compute_strength, load_maskset,
    save_maskset, verify_detection_coverage, MaskSet, MaskSetKind, Scheme,
};
use crate::metrics::{DatasetAggregate, EvalReport, ImageEval, DEFAULT_BIG_CLASS_THRESHOLD};
use crate::oracle::{
    attack_search, audit_detection_soundness, audit_masking_erasure, audit_recovery_soundness,
    audit_recovery_soundness_pairs, audit_trigger_flips, content_battery, AttackBudget, AttackOutcome,
    ErasureReport, FlipReport, SoundnessReport, TriggerSegmenter, Violation, DEFAULT_RANDOM_CONTENTS,
};
use crate::scene::{generate_scene, SceneSpec};

pub const CONFIG_ENV: &str = "PATCHCERT_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "patchcert", version, about = "Certified patch robustness for semantic segmentation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, verify and save a mask set.
    GenMasks(GenMasksArgs),
    /// Certify one image or a directory of images.
    Certify(CertifyArgs),
    /// Score predictions and certificates against ground truth.
    Eval(EvalArgs),
    /// Run brute-force soundness audits on a synthetic scene.
    Audit(AuditArgs),
    /// Echo server for the backend protocol.
    #[command(hide = true)]
    StubBackend(StubArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GeometryArgs {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Square patch covering this fraction of the image.
    #[arg(long, conflicts_with_all = ["patch_h", "patch_w"])]
    pub patch_frac: Option<f64>,
    #[arg(long)]
    pub patch_h: Option<usize>,
    #[arg(long)]
    pub patch_w: Option<usize>,
}

impl GeometryArgs {
    fn threat(&self) -> Result<ThreatModel> {
        let (Some(h), Some(w)) = (self.height, self.width) else {
            return Err(Error::InvalidArgument("--height and --width are required".into()));
        };
        let (ph, pw) = match (self.patch_frac, self.patch_h, self.patch_w) {
            (Some(frac), None, None) => {
                let side = patch_side_from_fraction(frac, h, w)?;
                (side, side)
            }
            (None, Some(ph), Some(pw)) => (ph, pw),
            (None, Some(p), None) | (None, None, Some(p)) => (p, p),
            _ => return Err(Error::InvalidArgument("give --patch-frac or --patch-h/--patch-w".into())),
        };
        ThreatModel::new(h, w, ph, pw)
    }

    fn is_set(&self) -> bool {
        self.height.is_some() || self.width.is_some()
    }
}

/// Side of the square patch with area fraction `frac`: `ceil(sqrt(frac * H * W))`.
pub fn patch_side_from_fraction(frac: f64, height: usize, width: usize) -> Result<usize> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("patch fraction {frac} not in (0, 1]")));
    }
    let side = (frac * height as f64 * width as f64).sqrt().ceil() as usize;
    if side > height.min(width) {
        return Err(Error::InvalidGeometry(format!(
            "patch side {side} does not fit a {height}x{width} image"
        )));
    }
    Ok(side)
}

#[derive(Debug, Clone, Args)]
pub struct SchemeArgs {
    #[arg(long, default_value = "col", value_parser = parse_scheme)]
    pub scheme: Scheme,
    /// Number of recovery masks; defaults to the scheme's minimum for one patch.
    #[arg(long)]
    pub k: Option<usize>,
    /// Band width of detection masks (band height for det-row); defaults to the patch extent.
    #[arg(long)]
    pub mask_width: Option<usize>,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    match s.parse::<Scheme>() {
        Ok(Scheme::Custom) => Err("custom mask sets cannot be generated".into()),
        Ok(s) => Ok(s),
        Err(e) => Err(e.to_string()),
    }
}

impl SchemeArgs {
    fn build(&self, tm: &ThreatModel) -> Result<MaskSet> {
        match self.scheme {
            Scheme::DetectionColumn => {
                self.warn_k();
                build_detection_column_masks(tm, self.mask_width.unwrap_or(tm.patch_width))
            }
            Scheme::DetectionRow => {
                self.warn_k();
                build_detection_row_masks(tm, self.mask_width.unwrap_or(tm.patch_height))
            }
            s => build_recovery(s, tm, self.k.or(s.default_k()).expect("recovery scheme")),
        }
    }

    fn warn_k(&self) {
        if self.k.is_some() {
            tracing::warn!("--k is ignored for detection schemes; K follows from the band width");
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenMasksArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Recovery,
    Detection,
}

#[derive(Debug, Clone, Args)]
pub struct CertifyArgs {
    /// Single input image (PNG).
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub image: Option<PathBuf>,
    /// Directory of PNG images, processed recursively.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub masks: PathBuf,
    /// Defaults to the kind of the mask set.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// `toy`, `toy-threshold` or `process:<command line>`.
    #[arg(long, default_value = "toy")]
    pub backend: String,
    #[arg(long, default_value_t = 1)]
    pub n_patches: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Also write colorized PNGs of the segmentation and certified pixels.
    #[arg(long)]
    pub colorize: bool,
    #[arg(long)]
    pub allow_nondeterministic: bool,
    /// Per-response timeout for process backends.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Predictions: `<name>.pgm|seg` or `<name>/segmentation.*`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Certify output directory: `<name>/cert.pgm` plus segmentation.
    #[arg(long)]
    pub cert: Option<PathBuf>,
    /// Ground truth: `<name>.pgm|seg`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub num_classes: u32,
    #[arg(long, default_value_t = DEFAULT_BIG_CLASS_THRESHOLD)]
    pub big_threshold: f64,
    /// Ground-truth label excluded from all counts, or `none`.
    #[arg(long, default_value = "255", value_parser = parse_ignore)]
    pub ignore_label: IgnoreLabel,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IgnoreLabel(pub Option<u16>);

fn parse_ignore(s: &str) -> std::result::Result<IgnoreLabel, String> {
    if s == "none" {
        return Ok(IgnoreLabel(None));
    }
    s.parse::<u16>().map(|v| IgnoreLabel(Some(v))).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Audit a saved mask set instead of building one.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Audit this image instead of a synthetic scene.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Region count of the synthetic scene.
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    /// Horizontal distance weight of the synthetic scene; below 1 gives wide bands.
    #[arg(long, default_value_t = 1.0)]
    pub horizontal_weight: f64,
    #[arg(long, default_value_t = DEFAULT_RANDOM_CONTENTS)]
    pub random_contents: usize,
    /// 2 adds the sampled two-patch recovery audit.
    #[arg(long, default_value_t = 1)]
    pub n_patches: usize,
    #[arg(long, default_value_t = 200)]
    pub pair_samples: usize,
    /// Attack-search trials against the certified pipeline; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub attack_trials: usize,
    /// Record wall time in the report (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    WrongDims,
    FailSegment,
    WrongId,
    Hang,
    BadHandshake,
    Noise,
}

#[derive(Debug, Clone, Args)]
pub struct StubArgs {
    #[arg(long, default_value_t = 3)]
    pub num_classes: u32,
    #[arg(long, default_value_t = 4)]
    pub max_inflight: u32,
    /// `dominant` or a constant label.
    #[arg(long, default_value = "0")]
    pub segment: String,
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
    #[arg(long, default_value_t = 5)]
    pub max_delay_ms: u64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let args = match splice_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

const SUBCOMMANDS: [&str; 5] = ["gen-masks", "certify", "eval", "audit", "stub-backend"];

/// Inserts flags from the config file right after the subcommand name.
fn splice_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let mut sub_pos = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config_path = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(v) = a.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(v));
        } else if sub_pos.is_none() && SUBCOMMANDS.contains(&a.as_ref()) {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config_path, sub_pos) else {
        return Ok(args);
    };
    let text = std::fs::read(&path)?;
    let config: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let sub = args[pos].to_string_lossy().into_owned();
    let section = match config.get(&sub) {
        None => return Ok(args),
        Some(serde_json::Value::Object(map)) => map,
        Some(_) => return Err(Error::format(&path, format!("section {sub:?} is not an object"))),
    };
    let mut injected = Vec::new();
    for (key, value) in section {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Bool(true) => injected.push(OsString::from(flag)),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::String(s) => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(s));
            }
            serde_json::Value::Number(n) => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(n.to_string()));
            }
            _ => return Err(Error::format(&path, format!("unsupported value for {key:?}"))),
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMasks(a) => gen_masks(&a).map(|_| ()),
        Command::Certify(a) => certify(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Audit(a) => audit(&a).map(|_| ()),
        Command::StubBackend(a) => stub_backend(&a),
    }
}

pub fn gen_masks(args: &GenMasksArgs) -> Result<MaskSet> {
    let tm = args.geometry.threat()?;
    let ms = args.scheme.build(&tm)?;
    save_maskset(&args.out, &ms)?;
    let mut stdout = std::io::stdout().lock();
    match ms.kind() {
        MaskSetKind::Recovery => {
            let t = compute_strength(&ms, &tm);
            writeln!(
                stdout,
                "scheme={} K={} T={} patch={}x{} image={}x{} max_patches={}",
                ms.scheme(),
                ms.len(),
                t,
                tm.patch_height,
                tm.patch_width,
                tm.image_height,
                tm.image_width,
                (ms.len() - 1) / (2 * t.max(1))
            )?;
        }
        MaskSetKind::Detection => {
            let bands = ms.bands().expect("built-in detection set has bands");
            writeln!(
                stdout,
                "scheme={} K={} band={} stride={} patch={}x{} image={}x{} coverage={}",
                ms.scheme(),
                ms.len(),
                bands.extent,
                bands.stride,
                tm.patch_height,
                tm.patch_width,
                tm.image_height,
                tm.image_width,
                verify_detection_coverage(&ms, &tm)
            )?;
        }
    }
    Ok(ms)
}

enum Backends {
    Toy {
        demasker: NearestFillDemasker,
        segmenter: ToyOracleSegmenter,
    },
    Process(ProcessBackend),
}

impl Backends {
    fn open(spec: &str, channels: usize, timeout: Duration) -> Result<Self> {
        if let Some(cmd) = spec.strip_prefix("process:") {
            let mut config = ProcessConfig::from_command_line(cmd);
            config.timeout = timeout;
            return Ok(Backends::Process(ProcessBackend::spawn(config)?));
        }
        let segmenter = match spec {
            "toy" => ToyOracleSegmenter::dominant_channel(channels),
            "toy-threshold" => ToyOracleSegmenter::threshold(channels, 0.5),
            other => return Err(Error::InvalidArgument(format!("unknown backend {other:?}"))),
        };
        Ok(Backends::Toy {
            demasker: NearestFillDemasker::new(),
            segmenter,
        })
    }

    fn demasker(&self) -> &dyn DemaskingBackend {
        match self {
            Backends::Toy { demasker, .. } => demasker,
            Backends::Process(p) => p,
        }
    }

    fn segmenter(&self) -> &dyn SegmentationBackend {
        match self {
            Backends::Toy { segmenter, .. } => segmenter,
            Backends::Process(p) => p,
        }
    }
}

/// Relative stems of files under `root` with one of `extensions`, sorted.
fn collect_files(root: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.contains(&e))
            {
                out.push(path.strip_prefix(root).expect("walked from root").with_extension(""));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn certify(args: &CertifyArgs) -> Result<()> {
    let ms = load_maskset(&args.masks)?;
    let mode = match args.mode {
        Some(ModeArg::Recovery) => CertMode::Recovery,
        Some(ModeArg::Detection) => CertMode::Detection,
        None => match ms.kind() {
            MaskSetKind::Recovery => CertMode::Recovery,
            MaskSetKind::Detection => CertMode::Detection,
        },
    };
    let inputs: Vec<(PathBuf, PathBuf)> = match (&args.image, &args.images) {
        (Some(image), _) => vec![(image.clone(), args.out.clone())],
        (None, Some(dir)) => collect_files(dir, &["png"])?
            .into_iter()
            .map(|stem| (dir.join(&stem).with_extension("png"), args.out.join(&stem)))
            .collect(),
        (None, None) => return Err(Error::InvalidArgument("--image or --images is required".into())),
    };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input images".into()));
    }
    let first = io::read_png(&inputs[0].0)?;
    let backends = Backends::open(&args.backend, first.channels(), Duration::from_secs(args.timeout_secs))?;
    let (g, f) = (backends.demasker(), backends.segmenter());
    let recovery;
    let detection;
    let certifier: &(dyn Fn(&ImageGrid) -> Result<CertifiedOutput> + Sync) = match mode {
        CertMode::Recovery => {
            let c = RecoveryCertifier::new(&ms, g, f, args.n_patches)?;
            recovery = move |x: &ImageGrid| c.certify(x);
            &recovery
        }
        CertMode::Detection => {
            if args.n_patches != 1 {
                return Err(Error::InvalidArgument("detection certifies a single patch".into()));
            }
            let c = DetectionCertifier::new(&ms, g, f, args.allow_nondeterministic)?;
            detection = move |x: &ImageGrid| c.certify(x);
            &detection
        }
    };
    let process_one = |(input, out_dir): &(PathBuf, PathBuf)| -> Result<()> {
        let image = io::read_png(input)?;
        let out = certifier(&image)?;
        out.save(out_dir)?;
        if args.colorize {
            io::write_png(&out_dir.join("segmentation_color.png"), &io::colorize(out.segmentation(), None)?)?;
            io::write_png(
                &out_dir.join("cert_color.png"),
                &io::colorize(out.segmentation(), Some(out.cert_map()))?,
            )?;
        }
        info!(image = %input.display(), certified = out.certified_fraction(), "certified");
        Ok(())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<()>> = pool.install(|| inputs.par_iter().map(process_one).collect());
    results.into_iter().collect()
}

fn find_segmentation(base: &Path, num_classes: u32) -> Result<Option<SegMap>> {
    for ext in ["pgm", "seg"] {
        let p = base.with_extension(ext);
        if p.is_file() {
            return io::read_segmap(&p, Some(num_classes)).map(Some);
        }
        let p = base.join(format!("segmentation.{ext}"));
        if p.is_file() {
            return io::read_segmap(&p, Some(num_classes)).map(Some);
        }
    }
    Ok(None)
}

fn read_ground_truth(path_stem: &Path) -> Result<SegMap> {
    for ext in ["pgm", "seg"] {
        let p = path_stem.with_extension(ext);
        if p.is_file() {
            return io::read_segmap(&p, None);
        }
    }
    Err(Error::format(path_stem, "ground truth not found"))
}

/// Stems of prediction entries: files, or directories holding a segmentation.
fn prediction_stems(root: &Path) -> Result<BTreeSet<PathBuf>> {
    let mut stems: BTreeSet<PathBuf> = collect_files(root, &["pgm", "seg"])?
        .into_iter()
        .map(|s| match s.file_name().and_then(|n| n.to_str()) {
            Some("segmentation") | Some("cert") => s.parent().map(Path::to_path_buf).unwrap_or_default(),
            _ => s,
        })
        .collect();
    stems.remove(Path::new(""));
    Ok(stems)
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    if args.pred.is_none() && args.cert.is_none() {
        return Err(Error::InvalidArgument("give --pred, --cert or both".into()));
    }
    let ignore = args.ignore_label.0;
    let gt_stems: BTreeSet<PathBuf> = collect_files(&args.gt, &["pgm", "seg"])?.into_iter().collect();
    if gt_stems.is_empty() {
        return Err(Error::InvalidArgument(format!("no ground truth under {}", args.gt.display())));
    }
    for dir in [&args.pred, &args.cert].into_iter().flatten() {
        let stems = prediction_stems(dir)?;
        if let Some(extra) = stems.difference(&gt_stems).next() {
            return Err(Error::InvalidArgument(format!(
                "{} has no ground truth in {}",
                dir.join(extra).display(),
                args.gt.display()
            )));
        }
    }
    let evals: Vec<(String, ImageEval)> = gt_stems
        .par_iter()
        .map(|stem| -> Result<(String, ImageEval)> {
            let gt = read_ground_truth(&args.gt.join(stem))?;
            let cert = match &args.cert {
                None => None,
                Some(dir) => {
                    let base = dir.join(stem);
                    let seg = find_segmentation(&base, args.num_classes)?
                        .ok_or_else(|| Error::format(&base, "missing certified segmentation"))?;
                    let (h, w, map) = io::read_cert_map(&base.join("cert.pgm"))?;
                    if h != seg.height() || w != seg.width() {
                        return Err(Error::dims(format!("{}x{}", seg.height(), seg.width()), format!("{h}x{w}")));
                    }
                    Some(CertifiedOutput::new(seg, map, CertMode::Recovery)?)
                }
            };
            let pred = match &args.pred {
                Some(dir) => find_segmentation(&dir.join(stem), args.num_classes)?
                    .ok_or_else(|| Error::format(dir.join(stem), "missing prediction"))?,
                None => cert.as_ref().expect("cert given").segmentation().clone(),
            };
            let eval = ImageEval::new(&pred, cert.as_ref(), &gt, args.num_classes, ignore)?;
            Ok((stem.to_string_lossy().into_owned(), eval))
        })
        .collect::<Result<_>>()?;
    let mut agg = DatasetAggregate::new(args.num_classes);
    for (name, e) in evals {
        agg.add(name, e)?;
    }
    let report = EvalReport::from_aggregate(&agg, args.big_threshold, ignore);
    write_json(&args.out, &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackSummary {
    #[serde(flatten)]
    pub outcome: AttackOutcome,
    /// Certified pixels whose label the found attack changed.
    pub certified_pixels_changed: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaggedViolation {
    pub audit: &'static str,
    #[serde(flatten)]
    pub violation: Violation,
}

/// Contents of `audit.json`.
#[derive(Clone, Debug, Serialize)]
pub struct AuditFile {
    pub scheme: Scheme,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub locations: usize,
    pub k: usize,
    pub battery_size: usize,
    pub seed: u64,
    pub erasure: ErasureReport,
    pub soundness: Vec<SoundnessReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger: Option<FlipReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSummary>,
    /// Checks that refused to run, e.g. a mask set failing verification.
    pub errors: Vec<String>,
    pub violations: Vec<TaggedViolation>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}

pub fn audit(args: &AuditArgs) -> Result<AuditFile> {
    let started = Instant::now();
    let ms = match &args.masks {
        Some(dir) => {
            if args.geometry.is_set() {
                tracing::warn!("geometry flags are ignored when --masks is given");
            }
            load_maskset(dir)?
        }
        None => args.scheme.build(&args.geometry.threat()?)?,
    };
    let tm = *ms.threat();
    let image = match &args.image {
        Some(p) => io::read_png(p)?,
        None => {
            let spec = SceneSpec::new(tm.image_height, tm.image_width)
                .with_regions(args.regions)
                .with_horizontal_weight(args.horizontal_weight);
            generate_scene(spec, args.seed)?.image
        }
    };
    let battery = content_battery(image.height(), image.width(), image.channels(), args.random_contents, args.seed);
    let g = NearestFillDemasker::new();
    let f = ToyOracleSegmenter::dominant_channel(image.channels());

    let erasure = audit_masking_erasure(&image, &ms, args.seed)?;
    let mut errors = Vec::new();
    let mut soundness = Vec::new();
    let mut trigger = None;
    let mut attack = None;
    let keep = |r: Result<()>, errors: &mut Vec<String>| -> Result<()> {
        match r {
            Ok(()) => Ok(()),
            Err(e @ (Error::Verification(_) | Error::InsufficientMasks { .. })) => {
                errors.push(e.to_string());
                Ok(())
            }
            Err(e) => Err(e),
        }
    };
    match ms.kind() {
        MaskSetKind::Recovery => {
            let r = (|| {
                soundness.push(audit_recovery_soundness(&image, &ms, &g, &f, &battery)?);
                if args.n_patches >= 2 {
                    soundness.push(audit_recovery_soundness_pairs(
                        &image,
                        &ms,
                        &g,
                        &f,
                        &battery,
                        4,
                        args.pair_samples,
                        args.seed,
                    )?);
                }
                if args.attack_trials > 0 {
                    let h = RecoveryCertifier::new(&ms, &g, &f, 1)?;
                    let cert = h.certify(&image)?;
                    let truth = f.segment(&image)?;
                    let outcome = attack_search(
                        &image,
                        &truth,
                        &h,
                        &tm,
                        AttackBudget { trials: args.attack_trials, seed: args.seed },
                    )?;
                    let attacked = h.segment(&apply_patch(&image, outcome.content.as_ref().expect("content"), outcome.location)?)?;
                    let changed = changed_certified(&cert, &attacked, None);
                    attack = Some(AttackSummary { outcome, certified_pixels_changed: changed });
                }
                Ok(())
            })();
            keep(r, &mut errors)?;
        }
        MaskSetKind::Detection => {
            let r = (|| {
                soundness.push(audit_detection_soundness(&image, &ms, &g, &f, &battery)?);
                let trig = TriggerSegmenter::new(
                    ToyOracleSegmenter::dominant_channel(image.channels()),
                    trigger_color(image.channels()),
                );
                trigger = Some(audit_trigger_flips(&image, &ms, &g, &trig)?);
                if args.attack_trials > 0 {
                    let det = DetectionCertifier::new(&ms, &g, &f, false)?;
                    let cert = det.certify(&image)?;
                    let outcome = attack_search(
                        &image,
                        cert.segmentation(),
                        &f,
                        &tm,
                        AttackBudget { trials: args.attack_trials, seed: args.seed },
                    )?;
                    let attacked =
                        det.certify(&apply_patch(&image, outcome.content.as_ref().expect("content"), outcome.location)?)?;
                    let changed = changed_certified(&cert, attacked.segmentation(), Some(attacked.cert_map()));
                    attack = Some(AttackSummary { outcome, certified_pixels_changed: changed });
                }
                Ok(())
            })();
            keep(r, &mut errors)?;
        }
    }

    let mut violations: Vec<TaggedViolation> = erasure
        .violations
        .iter()
        .map(|v| TaggedViolation { audit: "erasure", violation: v.clone() })
        .collect();
    for s in &soundness {
        let tag = match s.kind {
            crate::oracle::AuditKind::Recovery => "recovery",
            crate::oracle::AuditKind::RecoveryPairs => "recovery_pairs",
            crate::oracle::AuditKind::Detection => "detection",
        };
        violations.extend(s.violations.iter().map(|v| TaggedViolation { audit: tag, violation: v.clone() }));
    }
    let trigger_ok = trigger.as_ref().is_none_or(|t| t.unflagged == 0);
    let attack_ok = attack.as_ref().is_none_or(|a| a.certified_pixels_changed == 0);
    let passed = violations.is_empty() && errors.is_empty() && trigger_ok && attack_ok;
    let report = AuditFile {
        scheme: ms.scheme(),
        image_height: tm.image_height,
        image_width: tm.image_width,
        patch_height: tm.patch_height,
        patch_width: tm.patch_width,
        locations: tm.location_count(),
        k: ms.len(),
        battery_size: battery.len(),
        seed: args.seed,
        erasure,
        soundness,
        trigger,
        attack,
        errors,
        violations,
        passed,
        wall_time_ms: args.timing.then(|| started.elapsed().as_millis() as u64),
    };
    write_json(&args.out, &report)?;
    println!(
        "scheme={} locations={} K={} battery={} violations={} passed={}",
        report.scheme,
        report.locations,
        report.k,
        report.battery_size,
        report.violations.len(),
        report.passed
    );
    if !report.passed {
        return Err(Error::Verification(format!(
            "audit failed: {} violations, {} refused checks",
            report.violations.len(),
            report.errors.len()
        )));
    }
    Ok(report)
}

/// A color no synthetic scene contains: a saturated cube corner.
fn trigger_color(channels: usize) -> Vec<f32> {
    (0..channels).map(|c| if c % 2 == 0 { 1.0 } else { 0.0 }).collect()
}

/// Pixels certified on `reference` (and, when given, on `other_cert`) whose
/// label differs in `other`.
fn changed_certified(reference: &CertifiedOutput, other: &SegMap, other_cert: Option<&[bool]>) -> usize {
    reference
        .segmentation()
        .labels()
        .iter()
        .zip(other.labels())
        .enumerate()
        .filter(|&(px, (a, b))| reference.cert_map()[px] && other_cert.is_none_or(|c| c[px]) && a != b)
        .count()
}

fn stub_backend(args: &StubArgs) -> Result<()> {
    let segment = if args.segment == "dominant" {
        StubSegment::DominantChannel
    } else {
        StubSegment::Constant(
            args.segment
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad --segment {:?}", args.segment)))?,
        )
    };
    let fault = args.fault.map(|f| match f {
        FaultArg::WrongDims => StubFault::WrongDims,
        FaultArg::FailSegment => StubFault::FailSegment,
        FaultArg::WrongId => StubFault::WrongId,
        FaultArg::Hang => StubFault::Hang,
        FaultArg::BadHandshake => StubFault::BadHandshake,
        FaultArg::Noise => StubFault::Noise,
    });
    let opts = StubOptions {
        num_classes: args.num_classes,
        max_inflight: args.max_inflight,
        segment,
        fault,
        max_delay_ms: args.max_delay_ms,
    };
    serve_stub(opts, std::io::stdin().lock(), std::io::stdout())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("patchcert").chain(args.iter().copied()))
    }

    #[test]
    fn patch_fraction_rounds_up() {
        assert_eq!(patch_side_from_fraction(0.01, 512, 512).unwrap(), 52);
        assert_eq!(patch_side_from_fraction(0.005, 512, 512).unwrap(), 37);
        assert_eq!(patch_side_from_fraction(0.01, 100, 100).unwrap(), 10);
        assert!(patch_side_from_fraction(0.0, 10, 10).is_err());
        assert!(patch_side_from_fraction(1.5, 10, 10).is_err());
    }

    #[test]
    fn flags_parse() {
        let cli = parse(&["gen-masks", "--height", "100", "--width", "100", "--patch-h", "10", "--patch-w", "10",
            "--scheme", "det-col", "--out", "x"]).unwrap();
        let Command::GenMasks(a) = cli.command else { panic!() };
        assert_eq!(a.scheme.scheme, Scheme::DetectionColumn);
        assert_eq!(a.geometry.threat().unwrap().patch_width, 10);
        assert!(parse(&["gen-masks", "--scheme", "custom", "--out", "x"]).is_err());
        assert!(parse(&["gen-masks", "--patch-frac", "0.1", "--patch-h", "3", "--out", "x"]).is_err());
        let cli = parse(&["eval", "--gt", "g", "--num-classes", "3", "--out", "o", "--ignore-label", "none"]).unwrap();
        let Command::Eval(e) = cli.command else { panic!() };
        assert_eq!(e.ignore_label, IgnoreLabel(None));
        assert_eq!(e.big_threshold, 0.20);
    }

    #[test]
    fn later_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"gen-masks": {"scheme": "row", "k": 7, "height": 20, "width": 20, "patch_h": 2, "patch_w": 2}}"#).unwrap();
        let args: Vec<OsString> = ["patchcert", "--config", cfg.to_str().unwrap(), "gen-masks", "--k", "9", "--out", "o"]
            .iter()
            .map(OsString::from)
            .collect();
        let cli = Cli::try_parse_from(splice_config(args).unwrap()).unwrap();
        let Command::GenMasks(a) = cli.command else { panic!() };
        assert_eq!(a.scheme.scheme, Scheme::Row);
        assert_eq!(a.scheme.k, Some(9));
        assert_eq!(a.geometry.height, Some(20));
    }

    #[test]
    fn usage_errors_exit_one() {
        let code = main_with_args(vec!["patchcert".into(), "gen-masks".into(), "--bogus".into()]);
        assert_eq!(code, 1);
    }
}
