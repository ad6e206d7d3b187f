//! Command-line front end: `simulate`, `sr`, `evaluate` and `train`.
//!
//! Each command reads an optional JSON config, writes its outputs into
//! `--out` and finishes with an atomically written `manifest.json`.
//! Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::classic::{bicubic_upsample, classic_sr, ClassicParams};
use crate::error::Error;
use crate::imaging::{decimate, synthesize_burst, Burst, BurstConfig, Decimation, MotionSpec, Psf};
use crate::net::{
    forward, load_checkpoint, mean_epe, pretrain_motion, save_checkpoint, synthetic_dataset, train,
    translation_pairs, NetParams, PretrainConfig, TrainConfig,
};
use crate::quality::report::{fwhm_csv, write_json, write_text, FwhmRow};
use crate::quality::{
    lsf_analysis, ndvi, pearson_corr, power_spectrum, quality_score, spectral_match, transect,
    EdgeRoi, NssModel, Rect,
};
use crate::raster::{FlowField, Raster};
use crate::scene::{procedural_scene, scene_corpus};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub const THREADS_ENV: &str = "BURSTSR_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BURST_FILE: &str = "burst.json";

#[derive(Debug, Parser)]
#[command(name = "burstsr", version, about = "Burst super-resolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Classic,
    Net,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade an HR scene into a burst directory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct an SR image from a burst directory.
    Sr {
        burst: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "classic")]
        method: Method,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Quality report for an SR raster.
    Evaluate {
        sr: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Native-grid reference raster.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// JSON file with edge, spectral and NDVI regions.
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Pretrain the motion estimator and train the network on synthetic bursts.
    Train {
        #[command(flatten)]
        common: Common,
    },
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::TrainingFailure { .. }
        | Error::NoSignal(_)
        | Error::NoEdge
        | Error::AmbiguousPeak(_)
        | Error::UndefinedCorrelation(_) => EXIT_NUMERIC,
        Error::InvalidArgument(_) | Error::EmptyInput(_) | Error::State(_) => EXIT_USAGE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub threads: Option<usize>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub results: Value,
    pub wall_time_s: f64,
    /// Digest of command, config, input contents, seed and version; equal
    /// for reruns on the same data regardless of paths or timing.
    pub run_hash: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> crate::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Thread cap from the environment. Computation is single-threaded, so
/// the value is validated and recorded only.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

struct Recorder {
    command: &'static str,
    out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
    start: Instant,
    threads: Option<usize>,
}

impl Recorder {
    fn new(command: &'static str, out: &Path) -> CliResult<Self> {
        let threads = thread_cap()?;
        std::fs::create_dir_all(out).map_err(|e| CliError::from(Error::io(out, e)))?;
        Ok(Recorder {
            command,
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
            threads,
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn raster(&mut self, name: &str, r: &Raster, pixel_size_m: Option<f64>) -> CliResult<()> {
        let p = self.path(name);
        r.save(&p, pixel_size_m)?;
        self.outputs.push(
            crate::raster::sidecar_path(Path::new(name))
                .display()
                .to_string(),
        );
        Ok(())
    }

    fn finish(self, config: Value, seed: Option<u64>, results: Value) -> CliResult<RunManifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for name in &self.outputs {
            outputs.push(FileDigest {
                path: name.clone(),
                sha256: sha256_file(&self.out.join(name))?,
            });
        }
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let key = json!({
            "command": self.command,
            "config": config,
            "inputs": self.inputs.iter().map(|d| &d.sha256).collect::<Vec<_>>(),
            "seed": seed,
            "version": tool_version,
        });
        let run_hash = hex(&Sha256::digest(key.to_string().as_bytes()));
        let manifest = RunManifest {
            command: self.command.to_string(),
            config,
            inputs: self.inputs,
            seed,
            tool_version,
            threads: self.threads,
            outputs,
            results,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            run_hash,
        };
        write_json(self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecimationName {
    #[default]
    BlockAverage,
    PointSample,
}

impl From<DecimationName> for Decimation {
    fn from(d: DecimationName) -> Self {
        match d {
            DecimationName::BlockAverage => Decimation::BlockAverage,
            DecimationName::PointSample => Decimation::PointSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionConfig {
    #[default]
    Random,
    /// `[dx, dy]` per frame in LR pixels; the first must be zero.
    Translational(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// HR raster; a procedural scene is generated when absent.
    pub input: Option<PathBuf>,
    pub scene_size: usize,
    pub frames: usize,
    pub scale: usize,
    /// Optics blur in LR pixels; 0 disables blur.
    pub psf_sigma_lr: f64,
    pub motion: MotionConfig,
    /// `null` disables noise.
    pub snr: Option<f64>,
    pub decimation: DecimationName,
    pub seed: u64,
    pub pixel_size_m: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            input: None,
            scene_size: 128,
            frames: 24,
            scale: 2,
            psf_sigma_lr: 0.5,
            motion: MotionConfig::Random,
            snr: Some(800.0),
            decimation: DecimationName::BlockAverage,
            seed: 0,
            pixel_size_m: None,
        }
    }
}

/// Contents of `burst.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstMeta {
    pub scale: usize,
    /// Frame files, reference first.
    pub frames: Vec<String>,
    /// Two-channel `(u, v)` flow rasters, one per frame.
    #[serde(default)]
    pub flows: Option<Vec<String>>,
    #[serde(default)]
    pub hr_truth: Option<String>,
    pub decimation: DecimationName,
    pub psf_sigma_lr: f64,
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default)]
    pub pixel_size_m: Option<f64>,
}

fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.f32")
}

fn simulate(common: &Common) -> CliResult<RunManifest> {
    let mut cfg: SimulateConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if cfg.scale == 0 || cfg.frames == 0 {
        return Err(CliError::usage("frames and scale must be positive"));
    }
    if cfg.snr.is_some_and(|v| !(v > 0.0)) || !(cfg.psf_sigma_lr >= 0.0) {
        return Err(CliError::usage(
            "snr must be positive and psf_sigma_lr non-negative",
        ));
    }
    let mut rec = Recorder::new("simulate", &common.out)?;
    if let Some(c) = &common.config {
        rec.input(c)?;
    }
    let (hr, pixel_size) = match &cfg.input {
        Some(p) => {
            let p = resolve(common.config.as_deref(), p);
            rec.input(&p)?;
            let (r, h) = Raster::load(&p)?;
            (r, cfg.pixel_size_m.or(h.pixel_size_m))
        }
        None => (procedural_scene(cfg.scene_size, cfg.seed), cfg.pixel_size_m),
    };
    let psf = if cfg.psf_sigma_lr == 0.0 {
        Psf::delta()
    } else {
        Psf::gaussian_on_grid(cfg.psf_sigma_lr, cfg.scale)?
    };
    let motion = match &cfg.motion {
        MotionConfig::Random => MotionSpec::Random,
        MotionConfig::Translational(v) => {
            MotionSpec::Translational(v.iter().map(|d| (d[0], d[1])).collect())
        }
    };
    let bc = BurstConfig {
        frames: cfg.frames,
        scale: cfg.scale,
        psf,
        motion,
        snr: cfg.snr.unwrap_or(f64::INFINITY),
        seed: cfg.seed,
        decimation: cfg.decimation.into(),
    };
    let burst = synthesize_burst(&hr, &bc)?;
    let lr_pixel = pixel_size.map(|p| p * cfg.scale as f64);
    let mut frames = Vec::new();
    for (k, f) in burst.frames.iter().enumerate() {
        let name = frame_name(k);
        rec.raster(&name, f, lr_pixel)?;
        frames.push(name);
    }
    let mut flows = Vec::new();
    for (k, f) in burst.true_flows.iter().flatten().enumerate() {
        let name = format!("flow_{k:03}.f32");
        rec.raster(&name, &f.as_raster(), lr_pixel)?;
        flows.push(name);
    }
    rec.raster("hr_truth.f32", &hr, pixel_size)?;
    let meta = BurstMeta {
        scale: cfg.scale,
        frames,
        flows: Some(flows),
        hr_truth: Some("hr_truth.f32".into()),
        decimation: cfg.decimation,
        psf_sigma_lr: cfg.psf_sigma_lr,
        snr: cfg.snr,
        pixel_size_m: lr_pixel,
    };
    let p = rec.path(BURST_FILE);
    write_json(&p, &meta)?;
    let results = json!({ "frames": cfg.frames, "scale": cfg.scale, "shifts": bc.shifts() });
    rec.finish(to_value(&cfg), Some(cfg.seed), results)
}

/// A burst directory read back into memory.
#[derive(Debug, Clone)]
pub struct LoadedBurst {
    pub meta: BurstMeta,
    pub burst: Burst,
    pub files: Vec<PathBuf>,
}

pub fn load_burst_dir(dir: &Path) -> CliResult<LoadedBurst> {
    let meta_path = dir.join(BURST_FILE);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| CliError::from(Error::io(&meta_path, e)))?;
    let meta: BurstMeta = serde_json::from_str(&text)
        .map_err(|e| CliError::from(Error::format(&meta_path, e.to_string())))?;
    let mut files = vec![meta_path];
    let mut frames = Vec::with_capacity(meta.frames.len());
    for name in &meta.frames {
        let p = dir.join(name);
        frames.push(Raster::load(&p)?.0);
        files.push(p);
    }
    let mut burst = Burst::new(frames)?;
    if let Some(flows) = &meta.flows {
        let mut v = Vec::with_capacity(flows.len());
        for name in flows {
            let p = dir.join(name);
            v.push(FlowField::from_raster(&Raster::load(&p)?.0)?);
            files.push(p);
        }
        burst.true_flows = Some(v);
    }
    if let Some(name) = &meta.hr_truth {
        let p = dir.join(name);
        burst.hr_truth = Some(Raster::load(&p)?.0);
        files.push(p);
    }
    burst.validate()?;
    Ok(LoadedBurst { meta, burst, files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    /// Defaults to the burst's scale.
    pub scale: Option<usize>,
    pub use_true_flows: bool,
    pub subpixel_refine: bool,
    pub wiener_nsr: f64,
    /// Wiener restoration with the burst's blur model.
    pub restore: bool,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            scale: None,
            use_true_flows: false,
            subpixel_refine: true,
            wiener_nsr: 1e-2,
            restore: true,
        }
    }
}

fn sr(
    burst_dir: &Path,
    common: &Common,
    method: Method,
    checkpoint: Option<&Path>,
) -> CliResult<RunManifest> {
    let cfg: SrConfig = load_config(common.config.as_deref())?;
    if method == Method::Net && checkpoint.is_none() {
        return Err(CliError::usage("--method net requires --checkpoint"));
    }
    let mut rec = Recorder::new("sr", &common.out)?;
    if let Some(c) = &common.config {
        rec.input(c)?;
    }
    let loaded = load_burst_dir(burst_dir)?;
    for f in &loaded.files {
        rec.input(f)?;
    }
    let s = cfg.scale.unwrap_or(loaded.meta.scale);
    if s == 0 {
        return Err(CliError::usage("scale must be positive"));
    }
    let (image, epoch) = match method {
        Method::Classic => {
            let mut p = ClassicParams::for_system(
                s,
                loaded.meta.psf_sigma_lr,
                loaded.meta.decimation.into(),
            )?;
            p.use_true_flows = cfg.use_true_flows;
            p.subpixel_refine = cfg.subpixel_refine;
            p.wiener_nsr = cfg.wiener_nsr;
            if !cfg.restore {
                p.restore_psf = None;
            }
            (classic_sr(&loaded.burst, s, &p)?, None)
        }
        Method::Net => {
            let ck = checkpoint.expect("checked above");
            rec.input(ck)?;
            let (params, m) = load_checkpoint::<f32>(ck)?;
            if params.channels != loaded.burst.reference().channels() {
                return Err(CliError::usage(format!(
                    "checkpoint expects {} channels, burst has {}",
                    params.channels,
                    loaded.burst.reference().channels()
                )));
            }
            let out = forward(&loaded.burst, &params, s)?;
            if out.data().iter().any(|v| !v.is_finite()) {
                return Err(CliError {
                    code: EXIT_NUMERIC,
                    message: "network produced non-finite values".into(),
                });
            }
            (out, Some(m.epoch))
        }
    };
    let pixel = loaded.meta.pixel_size_m.map(|p| p / s as f64);
    rec.raster("sr.f32", &image, pixel)?;
    let mut results = json!({ "scale": s, "method": method, "checkpoint_epoch": epoch });
    if let Some(truth) = loaded
        .burst
        .hr_truth
        .as_ref()
        .filter(|t| t.same_shape(&image))
    {
        results["hr_max_abs_error"] = json!(image.max_abs_diff(truth));
        results["hr_l1"] = json!(crate::classic::l1_error(&image, truth)?);
    }
    let config = json!({ "sr": to_value(&cfg), "method": method });
    rec.finish(config, None, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdviSpec {
    pub red: usize,
    pub nir: usize,
    /// `(y, x)` on the reference grid.
    pub from: [f64; 2],
    pub to: [f64; 2],
}

/// Regions of interest, all on the reference grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiFile {
    pub edges: Vec<EdgeRoi>,
    pub spectral: Vec<Rect>,
    pub ndvi: Option<NdviSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Pristine corpus for the NSS model: procedural scenes.
    pub nss_corpus_count: usize,
    pub nss_corpus_size: usize,
    pub nss_corpus_seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            nss_corpus_count: 8,
            nss_corpus_size: 128,
            nss_corpus_seed: 0,
        }
    }
}

fn fwhm_in(image: &Raster, roi: &EdgeRoi, s: usize) -> f64 {
    let scaled = EdgeRoi {
        rect: roi.rect.scaled(s),
        orientation: roi.orientation,
    };
    lsf_analysis(image, &scaled)
        .map(|r| r.fwhm / s as f64)
        .unwrap_or(f64::NAN)
}

fn evaluate(
    sr_path: &Path,
    common: &Common,
    reference: Option<&Path>,
    roi: Option<&Path>,
) -> CliResult<RunManifest> {
    let cfg: EvaluateConfig = load_config(common.config.as_deref())?;
    let rois: RoiFile = load_config(roi)?;
    if reference.is_none()
        && (!rois.edges.is_empty() || !rois.spectral.is_empty() || rois.ndvi.is_some())
    {
        return Err(CliError::usage(
            "edge, spectral and NDVI metrics need --reference",
        ));
    }
    let mut rec = Recorder::new("evaluate", &common.out)?;
    for p in [common.config.as_deref(), roi].into_iter().flatten() {
        rec.input(p)?;
    }
    rec.input(sr_path)?;
    let (image, _) = Raster::load(sr_path)?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: "SR raster contains non-finite values".into(),
        });
    }

    let corpus = scene_corpus(
        cfg.nss_corpus_count,
        cfg.nss_corpus_size,
        cfg.nss_corpus_seed,
    );
    let model = NssModel::fit(&corpus)?;
    let mut results = json!({ "nss_score_sr": quality_score(&image, &model)? });
    let sr_spec = power_spectrum(&image)?;

    let Some(ref_path) = reference else {
        let p = rec.path("spectrum.csv");
        write_text(p, &crate::quality::report::spectrum_csv(&sr_spec))?;
        return rec.finish(to_value(&cfg), None, results);
    };
    rec.input(ref_path)?;
    let (refr, _) = Raster::load(ref_path)?;
    let s = image.height() / refr.height().max(1);
    if s == 0
        || image.height() != s * refr.height()
        || image.width() != s * refr.width()
        || image.channels() != refr.channels()
    {
        return Err(CliError::usage(
            "SR grid must be an integer multiple of the reference with the same bands",
        ));
    }
    let bicubic = bicubic_upsample(&refr, s)?;

    let mut rows = Vec::new();
    for band in 0..refr.channels() {
        let (rb, bb, sb) = (
            refr.channel(band),
            bicubic.channel(band),
            image.channel(band),
        );
        for e in &rois.edges {
            let native = fwhm_in(&rb, e, 1);
            let fb = fwhm_in(&bb, e, s);
            let fs = fwhm_in(&sb, e, s);
            let ratio = crate::quality::sr_ratio(fb, fs).unwrap_or(f64::NAN);
            rows.push(FwhmRow {
                band,
                fwhm_native: native,
                fwhm_bicubic: fb,
                fwhm_sr: fs,
                sr_ratio: ratio,
            });
        }
    }
    write_text(rec.path("fwhm.csv"), &fwhm_csv(&rows))?;

    let bic_spec = power_spectrum(&bicubic)?;
    let mut csv = String::from("freq,power_sr,power_bicubic,gain\n");
    for i in 0..sr_spec.freqs.len() {
        let (a, b) = (sr_spec.power[i], bic_spec.power[i]);
        let gain = if a == b { 1.0 } else { a / b };
        csv.push_str(&format!(
            "{:.6},{:.6e},{:.6e},{:.6}\n",
            sr_spec.freqs[i], a, b, gain
        ));
    }
    write_text(rec.path("spectrum.csv"), &csv)?;

    let spectral_rois = if rois.spectral.is_empty() {
        vec![Rect::full(&refr)]
    } else {
        rois.spectral.clone()
    };
    let deviation = spectral_match(&refr, &image, &spectral_rois)?;
    let down = decimate(&image, s)?;
    let correlation = pearson_corr(down.data(), refr.data())
        .map(Some)
        .or_else(|e| match e {
            Error::UndefinedCorrelation(_) => Ok::<_, Error>(None),
            other => Err(other),
        })?;
    results["scale"] = json!(s);
    results["nss_score_bicubic"] = json!(quality_score(&bicubic, &model)?);
    results["spectral_deviation"] = json!(deviation);
    results["correlation"] = json!(correlation);
    results["fwhm"] = to_value(&rows);

    if let Some(n) = &rois.ndvi {
        if n.red >= refr.channels() || n.nir >= refr.channels() {
            return Err(CliError::usage("NDVI bands out of range"));
        }
        let nd_ref = ndvi(&refr.channel(n.red), &refr.channel(n.nir))?;
        let nd_sr = ndvi(&image.channel(n.red), &image.channel(n.nir))?;
        let t_ref = transect(&nd_ref, 0, (n.from[0], n.from[1]), (n.to[0], n.to[1]))?;
        let sf = s as f64;
        let c = (sf - 1.0) / 2.0;
        let t_sr = transect(
            &nd_sr,
            0,
            (n.from[0] * sf + c, n.from[1] * sf + c),
            (n.to[0] * sf + c, n.to[1] * sf + c),
        )?;
        let mut csv = String::from("position,ndvi_reference,ndvi_sr\n");
        for (i, v) in t_sr.iter().enumerate() {
            let pos = i as f64 / sf;
            let r = t_ref
                .get((pos.floor()) as usize)
                .copied()
                .unwrap_or(f64::NAN);
            csv.push_str(&format!("{pos:.6},{r:.6},{v:.6}\n"));
        }
        write_text(rec.path("ndvi_transect.csv"), &csv)?;
    }
    let config = json!({ "evaluate": to_value(&cfg), "roi": to_value(&rois) });
    rec.finish(config, None, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub train_patches: usize,
    pub val_patches: usize,
    pub frames: usize,
    pub snr: f64,
    /// Validation pairs for the pretraining report.
    pub pretrain_val_pairs: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            train_patches: 200,
            val_patches: 50,
            frames: 8,
            snr: 800.0,
            pretrain_val_pairs: 16,
        }
    }
}

fn train_cmd(common: &Common) -> CliResult<RunManifest> {
    let mut cfg: TrainRunConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.pretrain.seed = s;
    }
    cfg.train.validate()?;
    if cfg.train_patches == 0 || cfg.val_patches == 0 || cfg.frames == 0 {
        return Err(CliError::usage("patch counts and frames must be positive"));
    }
    let mut rec = Recorder::new("train", &common.out)?;
    if let Some(c) = &common.config {
        rec.input(c)?;
    }
    let seed = cfg.train.seed;
    let (p, s) = (cfg.train.patch, cfg.train.scale);
    let train_set = synthetic_dataset(
        cfg.train_patches,
        p,
        cfg.frames,
        s,
        cfg.snr,
        crate::imaging::derive_seed(seed, 1),
    )?;
    let val_set = synthetic_dataset(
        cfg.val_patches,
        p,
        cfg.frames,
        s,
        cfg.snr,
        crate::imaging::derive_seed(seed, 2),
    )?;

    let mut params = NetParams::<f32>::new(1, seed)?;
    let pre_hist = pretrain_motion(&mut params, &cfg.pretrain)?;
    let pairs = translation_pairs(
        cfg.pretrain_val_pairs.max(1),
        cfg.pretrain.size,
        cfg.pretrain.max_shift,
        cfg.pretrain.scale,
        crate::imaging::derive_seed(seed, 3),
    )?;
    let val_epe = mean_epe(&params, &pairs, cfg.pretrain.crop)?;

    let outcome = train(params, &train_set, &val_set, &cfg.train, |r| {
        eprintln!("epoch {:>3}  val L1 {:.6}", r.epoch, r.val_loss);
    })?;
    let ck = rec.path("net.json");
    save_checkpoint(
        &ck,
        &outcome.params,
        seed,
        outcome.best_epoch,
        outcome.best_val,
    )?;
    rec.outputs.push("net.bin".into());
    write_json(rec.path("history.json"), &outcome.history)?;
    let results = json!({
        "pretrain_final_epe": pre_hist.last(),
        "pretrain_val_epe": val_epe,
        "epoch0_val": outcome.history.first().map(|r| r.val_loss),
        "best_epoch": outcome.best_epoch,
        "best_val": outcome.best_val,
        "stopped_early": outcome.stopped_early,
    });
    rec.finish(to_value(&cfg), Some(seed), results)
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Sr {
            burst,
            common,
            method,
            checkpoint,
        } => sr(burst, common, *method, checkpoint.as_deref()),
        Command::Evaluate {
            sr,
            common,
            reference,
            roi,
        } => evaluate(sr, common, reference.as_deref(), roi.as_deref()),
        Command::Train { common } => train_cmd(common),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(m) => {
            println!("{}", m.run_hash);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
