//! Command-line entry point.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{load_flow, load_vae, read_temb, save_flow, save_vae};
use crate::config::{parse_value, Configurable, KeyValues};
use crate::dataset::{
    caption_path, curate, ingest, read_dms, read_manifest, read_mesh, write_dms, write_manifest, CurationConfig,
    ManifestRecord,
};
use crate::error::{Error, Result};
use crate::mesh::{decompose_trajectory, edge_set};
use crate::metrics::{report, EdgeReference, DEFAULT_TAUS};
use crate::sgtt::{generate_animation, rf_train_step, FlowCondition, FlowExample, SgttConfig, SgttFlow};
use crate::tensor::{Adam, Rng};
use crate::topology::{hop_bands, one_hop, weighted_adjacency};
use crate::vae::{train_step, DyMeshVae, MeshContext, SampleData, VaeConfig, VaeExample};
use crate::chunking::split_chunks;

#[derive(Debug, Parser)]
#[command(name = "dymesh", version, about = "Dynamic mesh compression, animation, curation and metrics")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat key=value file with `vae.`, `flow.`, `data.` and `train.` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest, filter, slice and augment sources into a manifest.
    Ingest {
        /// A `.dms` file, an OBJ frame directory, or a directory of those.
        src: PathBuf,
        manifest: PathBuf,
        /// Where accepted containers go (default: `<manifest dir>/sequences`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Frame, vertex, face and edge distributions of accepted records.
    Stats { manifest: PathBuf },
    /// Hop band sizes and mask statistics of one mesh.
    Topo {
        mesh: PathBuf,
        #[arg(long = "L", default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
    },
    /// Round trip through a VAE with per-sequence AVE and ρ_abn.
    Recon { manifest: PathBuf, vae: PathBuf },
    /// Train the trajectory VAE.
    TrainVae {
        manifest: PathBuf,
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Train the flow model on VAE latents.
    TrainFlow {
        manifest: PathBuf,
        vae: PathBuf,
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Generate an animation for a static mesh.
    Animate {
        mesh: PathBuf,
        temb: PathBuf,
        vae: PathBuf,
        flow: PathBuf,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Guidance scale ζ (default from the flow checkpoint).
        #[arg(long = "cfg")]
        guidance: Option<f64>,
        /// Euler steps (default from the flow checkpoint).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, short, default_value = "animation.dms")]
        out: PathBuf,
    },
    /// AVE, ρ_abn and AMD of a sequence against a sequence or a mesh.
    Metrics { recon: PathBuf, reference: PathBuf },
    /// Runs the built-in invariant and oracle checks.
    Selftest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 2e-4,
            batch: 4,
            log_every: 50,
        }
    }
}

impl Configurable for TrainConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "log_every" => self.log_every = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("steps", self.steps);
        kv.set("lr", self.lr);
        kv.set("batch", self.batch);
        kv.set("log_every", self.log_every);
        kv
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch must be positive and lr > 0".into()));
        }
        Ok(())
    }
}

/// Every configurable section, after file overrides.
#[derive(Clone, Debug, Default)]
struct Resolved {
    vae: VaeConfig,
    flow: SgttConfig,
    data: CurationConfig,
    train: TrainConfig,
}

impl Resolved {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut r = Resolved::default();
        let Some(path) = path else { return Ok(r) };
        let kv = KeyValues::load(path)?;
        let known = ["vae.", "flow.", "data.", "train."];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !known.iter().any(|p| k.starts_with(p))) {
            return Err(Error::Config(format!("{}: key {k:?} has no known section", path.display())));
        }
        r.vae.apply(&kv.section("vae"))?;
        r.flow.apply(&kv.section("flow"))?;
        r.data.apply(&kv.section("data"))?;
        r.train.apply(&kv.section("train"))?;
        Ok(r)
    }

    fn log(&self, seed: u64, sections: &[&str], err: &mut (dyn Write + Send)) {
        let _ = writeln!(err, "# seed={seed}");
        for &s in sections {
            let kv = match s {
                "vae" => self.vae.to_kv(),
                "flow" => self.flow.to_kv(),
                "data" => self.data.to_kv(),
                _ => self.train.to_kv(),
            };
            for (k, v) in kv.iter() {
                let _ = writeln!(err, "# {s}.{k}={v}");
            }
        }
    }
}

/// Counts of per-record failures, which turn into exit code 1.
#[derive(Debug, Default)]
struct Outcome {
    failed: usize,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code: 0 on success, 1 when some records
/// failed, 2 on usage or fatal errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    run_with(argv, &mut stdout, &mut stderr)
}

/// [`dispatch`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| run(&cli, out, err))),
        None => run(&cli, out, err),
    };
    match result {
        Ok(o) if o.failed == 0 => 0,
        Ok(o) => {
            let _ = writeln!(err, "{} record(s) failed", o.failed);
            1
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn run(cli: &Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<Outcome> {
    let cfg = Resolved::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match &cli.command {
        Command::Ingest { src, manifest, out_dir } => {
            cfg.log(seed, &["data"], err);
            cmd_ingest(&cfg, src, manifest, out_dir.as_deref(), out, err)
        }
        Command::Stats { manifest } => {
            cfg.log(seed, &[], err);
            cmd_stats(manifest, out, err)
        }
        Command::Topo { mesh, steps, gamma, eps } => {
            cfg.log(seed, &[], err);
            cmd_topo(mesh, *steps, *gamma, *eps, out)
        }
        Command::Recon { manifest, vae } => {
            cfg.log(seed, &[], err);
            cmd_recon(manifest, vae, out, err)
        }
        Command::TrainVae { manifest, out: dest, steps, lr, batch } => {
            let mut cfg = cfg;
            override_train(&mut cfg.train, *steps, *lr, *batch)?;
            cfg.log(seed, &["vae", "train"], err);
            cmd_train_vae(&cfg, seed, manifest, dest, out, err)
        }
        Command::TrainFlow { manifest, vae, out: dest, steps, lr, batch } => {
            let mut cfg = cfg;
            override_train(&mut cfg.train, *steps, *lr, *batch)?;
            cfg.log(seed, &["flow", "train"], err);
            cmd_train_flow(&cfg, seed, manifest, vae, dest, out, err)
        }
        Command::Animate { mesh, temb, vae, flow, frames, guidance, steps, out: dest } => {
            cfg.log(seed, &[], err);
            cmd_animate(seed, mesh, temb, vae, flow, *frames, *guidance, *steps, dest, out, err)
        }
        Command::Metrics { recon, reference } => {
            cfg.log(seed, &[], err);
            cmd_metrics(recon, reference, out)
        }
        Command::Selftest => {
            cfg.log(seed, &[], err);
            let ok = crate::selftest::run(out)?;
            Ok(Outcome { failed: usize::from(!ok) })
        }
    }
}

fn override_train(t: &mut TrainConfig, steps: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> Result<()> {
    if let Some(s) = steps {
        t.steps = s;
    }
    if let Some(l) = lr {
        t.lr = l;
    }
    if let Some(b) = batch {
        t.batch = b;
    }
    t.validate()
}

fn sources_of(src: &Path) -> Result<Vec<PathBuf>> {
    let is_source = |p: &Path| {
        p.extension().and_then(|e| e.to_str()) == Some("dms")
            || (p.is_dir() && crate::dataset::obj_frame_files(p).map(|f| !f.is_empty()).unwrap_or(false))
    };
    if is_source(src) {
        return Ok(vec![src.to_path_buf()]);
    }
    if !src.is_dir() {
        return Err(Error::Argument(format!("{}: not a .dms file or directory", src.display())));
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_source(p))
        .collect();
    found.sort();
    Ok(found)
}

fn stem_of(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("seq").to_string()
}

fn cmd_ingest(
    cfg: &Resolved,
    src: &Path,
    manifest: &Path,
    out_dir: Option<&Path>,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Outcome> {
    let sources = sources_of(src)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| {
        manifest.parent().unwrap_or(Path::new(".")).join("sequences")
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let loaded: Vec<_> = sources.par_iter().map(|p| ingest(p, cfg.data.merge_tol)).collect();
    let mut outcome = Outcome::default();
    let mut seen = HashSet::new();
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for (path, seq) in sources.iter().zip(loaded) {
        let seq = match seq {
            Ok(s) => s,
            Err(e) => {
                let _ = writeln!(err, "failed: {e}");
                outcome.failed += 1;
                continue;
            }
        };
        let mut id = stem_of(path);
        let mut k = 1;
        while !ids.insert(id.clone()) {
            id = format!("{}_{k}", stem_of(path));
            k += 1;
        }
        let cap = caption_path(path);
        let cap = if cap.exists() { cap.display().to_string() } else { String::new() };
        let mut cur = curate(&id, &path.display().to_string(), &cap, &seq, &cfg.data, &mut seen);
        let written: BTreeMap<String, PathBuf> = cur
            .accepted
            .iter()
            .map(|(rid, s)| {
                let p = dir.join(format!("{rid}.dms"));
                write_dms(&p, s).map(|_| (rid.clone(), p))
            })
            .collect::<Result<_>>()?;
        for r in &mut cur.records {
            if let Some(p) = written.get(&r.id) {
                r.container = p.display().to_string();
            }
        }
        records.extend(cur.records);
    }
    write_manifest(&records, manifest)?;
    let accepted = records.iter().filter(|r| r.accepted).count();
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.accepted) {
        *reasons.entry(r.reason.as_str()).or_default() += 1;
    }
    let _ = writeln!(out, "sources\t{}", sources.len());
    let _ = writeln!(out, "accepted\t{accepted}");
    for (reason, n) in reasons {
        let _ = writeln!(out, "rejected:{reason}\t{n}");
    }
    Ok(outcome)
}

fn summary_row(name: &str, mut v: Vec<f64>) -> String {
    if v.is_empty() {
        return format!("{name}\t0\t-\t-\t-\t-\t-\t-");
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    format!("{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{mean:.3}", v.len(), q(0.0), q(0.25), q(0.5), q(0.75), q(1.0))
}

fn cmd_stats(manifest: &Path, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<Outcome> {
    let records = read_manifest(manifest)?;
    let accepted: Vec<&ManifestRecord> = records.iter().filter(|r| r.accepted).collect();
    let edges: Vec<Result<usize>> = accepted
        .par_iter()
        .map(|r| read_dms(Path::new(&r.container)).map(|s| edge_set(&s.faces).len()))
        .collect();
    let mut outcome = Outcome::default();
    let mut edge_counts = Vec::new();
    for (r, e) in accepted.iter().zip(edges) {
        match e {
            Ok(n) => edge_counts.push(n as f64),
            Err(e) => {
                let _ = writeln!(err, "record {}: {e}", r.id);
                outcome.failed += 1;
            }
        }
    }
    let col = |f: fn(&ManifestRecord) -> usize| accepted.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let _ = writeln!(out, "field\tcount\tmin\tp25\tmedian\tp75\tmax\tmean");
    let _ = writeln!(out, "{}", summary_row("frames", col(|r| r.frames)));
    let _ = writeln!(out, "{}", summary_row("vertices", col(|r| r.vertices)));
    let _ = writeln!(out, "{}", summary_row("faces", col(|r| r.faces)));
    let _ = writeln!(out, "{}", summary_row("edges", edge_counts));
    let mut windows: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &accepted {
        *windows.entry(r.window).or_default() += 1;
    }
    let _ = writeln!(out, "\nwindow\trecords");
    for (w, n) in windows {
        let _ = writeln!(out, "{w}\t{n}");
    }
    let _ = writeln!(out, "\nrecords\t{}\naccepted\t{}\nreversed\t{}", records.len(), accepted.len(), accepted.iter().filter(|r| r.reversed).count());
    Ok(outcome)
}

fn cmd_topo(path: &Path, steps: usize, gamma: f64, eps: f64, out: &mut (dyn Write + Send)) -> Result<Outcome> {
    let mesh = read_mesh(path)?;
    let adj = one_hop(&mesh)?;
    let bands = hop_bands(&adj, steps);
    let _ = writeln!(out, "vertices\t{}\nfaces\t{}", mesh.num_vertices(), mesh.num_faces());
    let _ = writeln!(out, "band\tpairs\tweight");
    for (l, b) in bands.bands.iter().enumerate() {
        let _ = writeln!(out, "{l}\t{}\t{}", b.nnz(), gamma.powi(l as i32));
    }
    let w = weighted_adjacency(&bands, gamma)?;
    let mask = w.log_mask(eps);
    let n = mesh.num_vertices().max(1);
    let floor = eps.ln();
    let open: Vec<f64> = mask.data().iter().copied().filter(|&v| v != floor).collect();
    let _ = writeln!(out, "mask_nonzero\t{}", w.nnz());
    let _ = writeln!(out, "mask_density\t{:.6}", w.nnz() as f64 / (n * n) as f64);
    let _ = writeln!(out, "mask_floor\t{floor:.6}");
    if !open.is_empty() {
        let lo = open.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = open.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(out, "mask_open_min\t{lo:.6}\nmask_open_max\t{hi:.6}");
    }
    let _ = writeln!(out, "mean_row_reach\t{:.3}", w.nnz() as f64 / n as f64);
    Ok(Outcome::default())
}

fn metric_header(out: &mut (dyn Write + Send)) {
    let taus: Vec<String> = DEFAULT_TAUS.iter().map(|t| format!("rho{t}")).collect();
    let _ = writeln!(out, "id\tave\t{}\tamd", taus.join("\t"));
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn cmd_recon(manifest: &Path, vae_path: &Path, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<Outcome> {
    let model = load_vae(vae_path)?;
    let records: Vec<_> = read_manifest(manifest)?.into_iter().filter(|r| r.accepted).collect();
    let results: Vec<Result<_>> = records
        .par_iter()
        .map(|r| {
            let seq = read_dms(Path::new(&r.container))?;
            let rec = model.reconstruct_sequence(&seq)?;
            report(&rec, EdgeReference::Sequence(&seq), &DEFAULT_TAUS)
        })
        .collect();
    metric_header(out);
    let mut outcome = Outcome::default();
    let mut sums = vec![0.0; DEFAULT_TAUS.len() + 2];
    let mut count = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(m) => {
                let rho: Vec<String> = m.rho.iter().map(|(_, v)| format!("{v:.6}")).collect();
                let _ = writeln!(out, "{}\t{}\t{}\t{}", r.id, fmt_opt(m.ave), rho.join("\t"), fmt_opt(m.amd));
                sums[0] += m.ave.unwrap_or(0.0);
                for (k, (_, v)) in m.rho.iter().enumerate() {
                    sums[k + 1] += v;
                }
                *sums.last_mut().unwrap() += m.amd.unwrap_or(0.0);
                count += 1;
            }
            Err(e) => {
                let _ = writeln!(err, "record {}: {e}", r.id);
                outcome.failed += 1;
            }
        }
    }
    if count > 0 {
        let avg: Vec<String> = sums.iter().map(|s| format!("{:.6}", s / count as f64)).collect();
        let _ = writeln!(out, "mean\t{}", avg.join("\t"));
    }
    Ok(outcome)
}

fn accepted_sequences(manifest: &Path, err: &mut (dyn Write + Send), outcome: &mut Outcome) -> Result<Vec<(ManifestRecord, crate::mesh::DynamicMeshSequence)>> {
    let records: Vec<_> = read_manifest(manifest)?.into_iter().filter(|r| r.accepted).collect();
    let loaded: Vec<_> = records.par_iter().map(|r| read_dms(Path::new(&r.container))).collect();
    let mut out = Vec::new();
    for (r, s) in records.into_iter().zip(loaded) {
        match s {
            Ok(s) => out.push((r, s)),
            Err(e) => {
                let _ = writeln!(err, "record {}: {e}", r.id);
                outcome.failed += 1;
            }
        }
    }
    Ok(out)
}

fn cmd_train_vae(cfg: &Resolved, seed: u64, manifest: &Path, dest: &Path, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let seqs = accepted_sequences(manifest, err, &mut outcome)?;
    let mut model = DyMeshVae::new(cfg.vae.clone(), seed)?;
    let mut examples = Vec::new();
    for (r, s) in &seqs {
        match VaeExample::new(s, &model) {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                let _ = writeln!(err, "record {}: {e}", r.id);
                outcome.failed += 1;
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::Argument(format!("{}: no usable training records", manifest.display())));
    }
    let _ = writeln!(err, "# parameters={} examples={}", model.params.num_values(), examples.len());
    let mut opt = Adam::new(cfg.train.lr);
    let mut rng = Rng::new(seed ^ 0x5eed_0001);
    let _ = writeln!(out, "step\tloss\tmse\tkl");
    for step in 0..cfg.train.steps {
        let batch: Vec<&VaeExample> = (0..cfg.train.batch).map(|j| &examples[(step * cfg.train.batch + j) % examples.len()]).collect();
        let s = train_step(&mut model, &mut opt, &batch, &mut rng)?;
        if step % cfg.train.log_every.max(1) == 0 || step + 1 == cfg.train.steps {
            let _ = writeln!(out, "{step}\t{:.6e}\t{:.6e}\t{:.4}", s.loss, s.mse, s.kl);
        }
    }
    save_vae(dest, &model)?;
    Ok(outcome)
}

fn cmd_train_flow(
    cfg: &Resolved,
    seed: u64,
    manifest: &Path,
    vae_path: &Path,
    dest: &Path,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let vae = load_vae(vae_path)?;
    let seqs = accepted_sequences(manifest, err, &mut outcome)?;
    let prepared: Vec<Result<FlowExample>> = seqs
        .par_iter()
        .map(|(r, s)| {
            if r.caption.is_empty() {
                return Err(Error::Argument(format!("record {} has no caption", r.id)));
            }
            let text = read_temb(&Path::new(&r.caption).with_extension("temb"))?;
            let ctx = MeshContext::new(&s.mesh_at(0), &vae.cfg)?;
            let chunked = split_chunks(&decompose_trajectory(s), vae.cfg.chunk)?;
            let packet = vae.encode_latents(&ctx, &SampleData::new(&chunked, &vae.cfg)?, None)?;
            Ok(FlowExample { z: packet.mu, cond: FlowCondition { shape: packet.sampled, text } })
        })
        .collect();
    let mut examples = Vec::new();
    for ((r, _), ex) in seqs.iter().zip(prepared) {
        match ex {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                let _ = writeln!(err, "record {}: {e}", r.id);
                outcome.failed += 1;
            }
        }
    }
    let first = examples
        .first()
        .ok_or_else(|| Error::Argument(format!("{}: no usable training records", manifest.display())))?;
    let mut fcfg = cfg.flow.clone();
    fcfg.latent = vae.cfg.latent;
    fcfg.shape_dim = vae.cfg.feature_width();
    fcfg.text_dim = first.cond.text.shape()[1];
    if let Some(bad) = examples.iter().position(|e| e.cond.text.shape()[1] != fcfg.text_dim) {
        return Err(Error::Argument(format!("text embedding width differs at example {bad}")));
    }
    let mut model = SgttFlow::new(fcfg, seed)?;
    let _ = writeln!(err, "# parameters={} examples={}", model.params.num_values(), examples.len());
    let mut opt = Adam::new(cfg.train.lr);
    let mut rng = Rng::new(seed ^ 0x5eed_0002);
    let _ = writeln!(out, "step\tloss");
    for step in 0..cfg.train.steps {
        let batch: Vec<&FlowExample> = (0..cfg.train.batch).map(|j| &examples[(step * cfg.train.batch + j) % examples.len()]).collect();
        let loss = rf_train_step(&mut model, &mut opt, &batch, &mut rng)?;
        if step % cfg.train.log_every.max(1) == 0 || step + 1 == cfg.train.steps {
            let _ = writeln!(out, "{step}\t{loss:.6e}");
        }
    }
    save_flow(dest, &model)?;
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn cmd_animate(
    seed: u64,
    mesh: &Path,
    temb: &Path,
    vae_path: &Path,
    flow_path: &Path,
    frames: usize,
    guidance: Option<f64>,
    steps: Option<usize>,
    dest: &Path,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Outcome> {
    let mesh = read_mesh(mesh)?;
    let text = read_temb(temb)?;
    let vae = load_vae(vae_path)?;
    let flow = load_flow(flow_path)?;
    let guidance = guidance.unwrap_or(flow.cfg.guidance);
    let steps = steps.unwrap_or(flow.cfg.steps);
    let _ = writeln!(err, "# frames={frames} guidance={guidance} steps={steps}");
    let mut rng = Rng::new(seed);
    let seq = generate_animation(&vae, &flow, &mesh, &text, frames, steps, guidance, &mut rng)?;
    write_dms(dest, &seq)?;
    let amd = if frames >= 2 { crate::metrics::amd(&seq)? } else { 0.0 };
    let rho = crate::metrics::rho_abn(&seq, EdgeReference::Mesh(&mesh), 2.0)?;
    let _ = writeln!(out, "wrote\t{}\nframes\t{frames}\namd\t{amd:.6}\nrho2\t{:.6}", dest.display(), rho.ratio);
    Ok(Outcome::default())
}

fn cmd_metrics(recon: &Path, reference: &Path, out: &mut (dyn Write + Send)) -> Result<Outcome> {
    let seq = read_dms(recon)?;
    let m = if reference.extension().and_then(|e| e.to_str()) == Some("dms") {
        let r = read_dms(reference)?;
        report(&seq, EdgeReference::Sequence(&r), &DEFAULT_TAUS)?
    } else {
        let mesh = read_mesh(reference)?;
        report(&seq, EdgeReference::Mesh(&mesh), &DEFAULT_TAUS)?
    };
    metric_header(out);
    let rho: Vec<String> = m.rho.iter().map(|(_, v)| format!("{v:.6}")).collect();
    let id = stem_of(recon);
    let line = format!("{}\t{}\t{}", fmt_opt(m.ave), rho.join("\t"), fmt_opt(m.amd));
    let _ = writeln!(out, "{id}\t{line}\nmean\t{line}");
    if m.zero_length_edges > 0 {
        let _ = writeln!(out, "# zero-length reference edges skipped: {}", m.zero_length_edges);
    }
    Ok(Outcome::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::write_temb;
    use crate::dataset::write_obj;
    use crate::tensor::Tensor;
    use crate::toy;

    fn run_cli(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("dymesh").chain(args.iter().copied());
        let code = run_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_eq!(run_cli(&["frobnicate"]).0, 2);
        assert_eq!(run_cli(&[]).0, 2);
        let (code, _, err) = run_cli(&["metrics", "/nonexistent/a.dms", "/nonexistent/b.dms"]);
        assert_eq!(code, 2);
        assert!(err.contains("/nonexistent/a.dms"), "{err}");
    }

    #[test]
    fn metrics_of_identical_files_are_zero() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dms");
        write_dms(&a, &toy::wave_sheet(4, 6)).unwrap();
        let a = a.to_str().unwrap();
        let (code, out, err) = run_cli(&["metrics", a, a]);
        assert_eq!(code, 0, "{err}");
        let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(&row[1..5], &["0.000000"; 4]);
        assert!(err.contains("# seed=0"));
    }

    #[test]
    fn topo_on_one_triangle_has_empty_outer_bands() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.obj");
        write_obj(&p, &toy::triangle()).unwrap();
        let (code, out, _) = run_cli(&["topo", p.to_str().unwrap(), "--L", "2"]);
        assert_eq!(code, 0);
        let bands: Vec<&str> = out.lines().skip(3).take(3).collect();
        assert_eq!(bands, vec!["0\t9\t1", "1\t0\t0.5", "2\t0\t0.25"]);
    }

    #[test]
    fn config_file_overrides_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("run.cfg");
        std::fs::write(&c, "vae.hidden=16\ndata.min_frames=20\n").unwrap();
        let r = Resolved::load(Some(&c)).unwrap();
        assert_eq!(r.vae.hidden, 16);
        assert_eq!(r.data.filters.min_frames, 20);
        std::fs::write(&c, "vae.nonsense=1\n").unwrap();
        assert!(Resolved::load(Some(&c)).is_err());
        std::fs::write(&c, "hidden=1\n").unwrap();
        assert!(Resolved::load(Some(&c)).is_err());
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let src = d.join("src");
        std::fs::create_dir(&src).unwrap();
        let mut moving = toy::grid(3, 3, 1.0);
        let seq = crate::mesh::DynamicMeshSequence::new(
            moving.faces.clone(),
            (0..20)
                .map(|t| {
                    moving.vertices[4][2] = 0.2 * (0.6 * t as f64).sin();
                    moving.vertices.clone()
                })
                .collect(),
        )
        .unwrap();
        write_dms(&src.join("a.dms"), &seq).unwrap();
        std::fs::write(src.join("a.txt"), "a bump").unwrap();
        write_temb(&src.join("a.temb"), &Tensor::full([1, 4], 0.5)).unwrap();
        write_dms(&src.join("b.dms"), &toy::wave_sheet(3, 5)).unwrap();
        std::fs::write(src.join("c.dms"), b"junk").unwrap();
        let m = d.join("m.tsv");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let (code, out, err) = run_cli(&["ingest", &s(&src), &s(&m)]);
        assert_eq!(code, 1, "{err}");
        assert!(err.contains("c.dms"));
        assert!(out.contains("accepted\t2"), "{out}");
        assert!(out.contains("rejected:too-short\t1"), "{out}");

        let (code, out, _) = run_cli(&["stats", &s(&m)]);
        assert_eq!(code, 0);
        assert!(out.contains("frames\t2\t16"), "{out}");

        let cfg = d.join("small.cfg");
        std::fs::write(&cfg, "vae.hidden=8\nvae.latent=2\nvae.normal_width=4\nvae.decoder_blocks=1\nflow.dim=8\nflow.blocks=1\nflow.steps=4\n").unwrap();
        let vae = d.join("vae.ckpt");
        let (code, _, err) = run_cli(&["--config", &s(&cfg), "train-vae", &s(&m), &s(&vae), "--steps", "2"]);
        assert_eq!(code, 0, "{err}");
        let (code, out, _) = run_cli(&["recon", &s(&m), &s(&vae)]);
        assert_eq!(code, 0);
        assert!(out.lines().last().unwrap().starts_with("mean\t"));
        let flow = d.join("flow.ckpt");
        let (code, _, err) = run_cli(&["--config", &s(&cfg), "train-flow", &s(&m), &s(&vae), &s(&flow), "--steps", "2"]);
        assert_eq!(code, 0, "{err}");

        let mesh = d.join("tri.obj");
        write_obj(&mesh, &toy::cube()).unwrap();
        let outs: Vec<Vec<u8>> = ["1", "3"]
            .iter()
            .map(|threads| {
                let o = d.join(format!("anim{threads}.dms"));
                let args = [
                    "--seed", "1", "--threads", threads, "animate", &s(&mesh), &s(&src.join("a.temb")), &s(&vae), &s(&flow),
                    "--frames", "20", "-o", &s(&o),
                ];
                let (code, _, err) = run_cli(&args);
                assert_eq!(code, 0, "{err}");
                std::fs::read(o).unwrap()
            })
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(read_dms(&d.join("anim1.dms")).unwrap().num_frames(), 20);
    }
}
